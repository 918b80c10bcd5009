//! Picard iteration for the small-terminal regime, the exponential
//! transform, and the splitting chain for general bounded terminals.

mod chain;
mod transform;

pub use chain::{shift_path, solve, solve_chain, split_terminal, ChainSolution, SolveOutput, StageReport};
pub(crate) use transform::untransform_fields;
pub use transform::{transform_generator, untransform_solution, TransformParams, Transformed};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::TerminalCondition;
use crate::model::{ball_radius, contraction_bound, derive_bounds, smallness_threshold, GeneratorSpec, Threshold};
use crate::norms::{ess_sup_with, norm_report, EssSup, NormReport};
use crate::paths::{terminal_values, Driver, GirsanovWeights, PathEnsemble};
use crate::regress::{BasisInputs, BasisSpec, Design, Projector, SliceWeights};

/// Discrete solution `(Y, Z, ζ)`; every field has `n_steps + 1` slices and
/// the last slice of `z` and `zeta` is unused (zero).
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionTriple {
    pub y: Field,
    pub z: Field,
    pub zeta: Field,
    pub norms: NormReport,
    /// Largest projected one-step defect of the discrete dynamics.
    pub residual: f64,
    /// Standard error of `Y_0`.
    pub y0_se: f64,
    /// Regression standard error of `Y` per slice (zero at the terminal slice).
    pub slice_se: Vec<f64>,
}

impl SolutionTriple {
    pub fn zeros(n_steps: usize, n_paths: usize) -> Self {
        let f = Field::zeros(n_steps + 1, n_paths);
        Self {
            y: f.clone(),
            z: f.clone(),
            zeta: f,
            norms: NormReport::default(),
            residual: 0.0,
            y0_se: 0.0,
            slice_se: vec![0.0; n_steps + 1],
        }
    }

    pub fn y0(&self) -> f64 {
        let s = self.y.slice(0);
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn n_steps(&self) -> usize {
        self.y.n_times() - 1
    }

    pub fn n_paths(&self) -> usize {
        self.y.n_paths()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub iterations: usize,
    pub distances: Vec<f64>,
    /// `d_{k+1} / d_k` where `d_k > 0`.
    pub ratios: Vec<f64>,
    pub ball_violations: usize,
    pub ball_radius: f64,
    /// `128 β² R²` for the problem's `β` and ball radius.
    pub contraction_bound: f64,
    /// `exp` of the least-squares slope of `ln d_k`.
    pub fitted_ratio: Option<f64>,
    pub converged: bool,
}

impl ConvergenceTrace {
    pub fn last_distance(&self) -> f64 {
        self.distances.last().copied().unwrap_or(f64::NAN)
    }

    fn push(&mut self, d: f64) {
        if let Some(&prev) = self.distances.last() {
            if prev > 0.0 {
                self.ratios.push(d / prev);
            }
        }
        self.distances.push(d);
        self.iterations = self.distances.len();
        self.fitted_ratio = fitted_ratio(&self.distances);
    }
}

/// Geometric rate fitted to the positive distances.
pub fn fitted_ratio(distances: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        distances.iter().enumerate().filter(|(_, d)| **d > 0.0).map(|(k, d)| (k as f64, d.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Some((sxy / sxx).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub basis_degree: usize,
    /// `None` picks the drivers the terminal condition loads on.
    pub basis_inputs: Option<BasisInputs>,
    pub ess_sup: EssSup,
    pub max_pieces: usize,
    /// Minimal terminal effective sample size, as a fraction of the paths.
    pub ess_floor: f64,
    /// Multiplier on `R²` before an iterate counts as leaving the ball.
    pub ball_slack: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 50,
            basis_degree: 3,
            basis_inputs: None,
            ess_sup: EssSup::Max,
            max_pieces: 512,
            ess_floor: 0.05,
            ball_slack: 2.0,
        }
    }
}

impl SolveOptions {
    pub fn basis_for(&self, tc: &TerminalCondition) -> BasisSpec {
        match self.basis_inputs {
            Some(inputs) => BasisSpec::new(self.basis_degree, inputs),
            None => BasisSpec::for_terminal(tc, self.basis_degree),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if self.max_pieces == 0 {
            return Err(Error::Config("max_pieces must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ess_floor) {
            return Err(Error::Config(format!("ess_floor must lie in [0, 1), got {}", self.ess_floor)));
        }
        if self.ball_slack.is_nan() || self.ball_slack < 1.0 {
            return Err(Error::Config("ball_slack must be at least 1".into()));
        }
        BasisSpec::new(self.basis_degree, BasisInputs::Both).validate()
    }
}

/// A discretized backward equation `Y_i = E(Y_{i+1} + h(i, Y_i, Z_i, ζ_i) Δt | F_i)`
/// under an optional measure change.
pub trait Problem: Sync {
    /// Drift per unit time at `(slice, path)`.
    fn driver(&self, slice: usize, path: usize, y: f64, z: f64, zeta: f64) -> f64;
    /// `driver` for paths `start..start + out.len()`; inputs are aligned with `out`.
    fn driver_slice(&self, slice: usize, start: usize, y: &[f64], z: &[f64], zeta: &[f64], out: &mut [f64]) {
        for (p, o) in out.iter_mut().enumerate() {
            *o = self.driver(slice, start + p, y[p], z[p], zeta[p]);
        }
    }
    fn terminal(&self) -> &[f64];
    /// `σ` at every grid time.
    fn sigma(&self) -> &[f64];
    fn measure(&self) -> Option<&GirsanovWeights>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Form {
    /// `f(t, y, σz) - f(t, 0, 0) + g ζ²`
    Centered,
    /// `f(t, y, σz) + g ζ²`
    Direct,
}

/// A generator evaluated on an ensemble's grid.
#[derive(Clone, Debug)]
pub struct SpecProblem {
    gen: GeneratorSpec,
    form: Form,
    times: Vec<f64>,
    sigma: Vec<f64>,
    g: Vec<f64>,
    terminal: Vec<f64>,
}

impl SpecProblem {
    pub(crate) fn new(gen: &GeneratorSpec, ens: &PathEnsemble, form: Form) -> Self {
        let times = ens.grid.times();
        Self {
            sigma: times.iter().map(|&t| gen.sigma_at(t)).collect(),
            g: times.iter().map(|&t| gen.g_at(t)).collect(),
            terminal: terminal_values(ens, &gen.terminal),
            gen: gen.clone(),
            form,
            times,
        }
    }

    pub fn generator(&self) -> &GeneratorSpec {
        &self.gen
    }
}

impl Problem for SpecProblem {
    #[inline]
    fn driver(&self, slice: usize, _path: usize, y: f64, z: f64, zeta: f64) -> f64 {
        let t = self.times[slice];
        let f = self.gen.f(t, y, self.sigma[slice] * z);
        let f = match self.form {
            Form::Centered => f - self.gen.f(t, 0.0, 0.0),
            Form::Direct => f,
        };
        f + self.g[slice] * zeta * zeta
    }

    fn driver_slice(&self, slice: usize, _start: usize, y: &[f64], z: &[f64], zeta: &[f64], out: &mut [f64]) {
        let (t, s, g) = (self.times[slice], self.sigma[slice], self.g[slice]);
        let f0 = match self.form {
            Form::Centered => self.gen.f(t, 0.0, 0.0),
            Form::Direct => 0.0,
        };
        for (p, o) in out.iter_mut().enumerate() {
            *o = (self.gen.f(t, y[p], s * z[p]) - f0) + g * zeta[p] * zeta[p];
        }
    }

    fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    fn measure(&self) -> Option<&GirsanovWeights> {
        None
    }
}

/// Raw fields of an iterate.
#[derive(Clone, Debug)]
pub(crate) struct Fields {
    pub y: Field,
    pub z: Field,
    pub zeta: Field,
}

impl Fields {
    pub(crate) fn zeros(n_steps: usize, n_paths: usize) -> Self {
        let f = Field::zeros(n_steps + 1, n_paths);
        Self { y: f.clone(), z: f.clone(), zeta: f }
    }

    fn of(t: &SolutionTriple) -> Self {
        Self { y: t.y.clone(), z: t.z.clone(), zeta: t.zeta.clone() }
    }

    fn is_finite(&self) -> bool {
        self.y.is_finite() && self.z.is_finite() && self.zeta.is_finite()
    }
}

const DRIVER_CHUNK: usize = 4096;

fn driver_targets<P: Problem>(prob: &P, frozen: &Fields, next: &[f64], slice: usize, dt: f64) -> Result<Vec<f64>> {
    let (fy, fz, fq) = (frozen.y.slice(slice), frozen.z.slice(slice), frozen.zeta.slice(slice));
    let mut target = vec![0.0; next.len()];
    let run = |(c, out): (usize, &mut [f64])| {
        let r = c * DRIVER_CHUNK..c * DRIVER_CHUNK + out.len();
        prob.driver_slice(slice, r.start, &fy[r.clone()], &fz[r.clone()], &fq[r.clone()], out);
        for (o, yn) in out.iter_mut().zip(&next[r]) {
            *o = yn + *o * dt;
        }
    };
    if rayon::current_num_threads() > 1 {
        target.par_chunks_mut(DRIVER_CHUNK).enumerate().for_each(run);
    } else {
        target.chunks_mut(DRIVER_CHUNK).enumerate().for_each(run);
    }
    if let Some(path) = target.iter().position(|v| !v.is_finite()) {
        return Err(Error::GeneratorEvaluation { slice, path });
    }
    Ok(target)
}

/// One backward sweep of the frozen map.
pub(crate) fn sweep<P: Problem>(
    prob: &P,
    ens: &PathEnsemble,
    proj: &Projector<'_, '_>,
    frozen: &Fields,
) -> Result<Fields> {
    let (n, m, dt) = (ens.n_steps(), ens.n_paths(), ens.dt());
    let mut out = Fields::zeros(n, m);
    out.y.slice_mut(n).copy_from_slice(prob.terminal());
    let sigma = prob.sigma();
    let measure = prob.measure();
    for i in (0..n).rev() {
        let target = driver_targets(prob, frozen, out.y.slice(i + 1), i, dt)?;
        let fit = proj.fit(i, &target);
        let (dw1, dw2) = (ens.increments(Driver::W1).slice(i), ens.increments(Driver::W2).slice(i));
        let next = out.y.slice(i + 1);
        let mut tz = vec![0.0; m];
        let mut tq = vec![0.0; m];
        for p in 0..m {
            // The fitted y_i is a control variate: it is F_i-measurable.
            let c = next[p] - fit.fitted[p];
            let (l1, l2) = measure.map_or((0.0, 0.0), |w| (w.drift(Driver::W1, i, p), w.drift(Driver::W2, i, p)));
            tz[p] = c * (dw1[p] - l1 * dt) / (sigma[i] * dt);
            tq[p] = c * (dw2[p] - l2 * dt) / dt;
        }
        let fits = proj.fit_many(i, &[&tz, &tq]);
        out.y.slice_mut(i).copy_from_slice(&fit.fitted);
        out.z.slice_mut(i).copy_from_slice(&fits[0].fitted);
        out.zeta.slice_mut(i).copy_from_slice(&fits[1].fitted);
    }
    Ok(out)
}

/// Largest `|E(Y_{i+1} + h(Y_i, Z_i, ζ_i) Δt | F_i) - Y_i|` and the
/// per-slice standard errors of that fit.
pub(crate) fn residual<P: Problem>(
    prob: &P,
    ens: &PathEnsemble,
    proj: &Projector<'_, '_>,
    sol: &Fields,
) -> Result<(f64, Vec<f64>)> {
    let (n, dt) = (ens.n_steps(), ens.dt());
    let mut worst = 0.0_f64;
    let mut se = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let target = driver_targets(prob, sol, sol.y.slice(i + 1), i, dt)?;
        let fit = proj.fit(i, &target);
        se[i] = fit.se;
        worst = fit.fitted.iter().zip(sol.y.slice(i)).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    Ok((worst, se))
}

/// Ball and contraction data for the Picard loop.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BallSetup {
    pub radius: f64,
    pub beta: f64,
}

/// Squared triple norms of `next - current` and of `next` from one
/// backward pass of tail regressions.
fn picard_norms(
    next: &Fields,
    current: &Fields,
    proj: &Projector<'_, '_>,
    sigma: &[f64],
    dt: f64,
    mode: EssSup,
) -> (f64, f64) {
    let (n_steps, n) = (next.z.n_times() - 1, next.z.n_paths());
    let mut tails = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut best = [0.0_f64; 4];
    for i in (0..n_steps).rev() {
        let s2 = sigma[i] * sigma[i] * dt;
        let (z, q) = (next.z.slice(i), next.zeta.slice(i));
        let (z0, q0) = (current.z.slice(i), current.zeta.slice(i));
        for p in 0..n {
            let (dz, dq) = (z[p] - z0[p], q[p] - q0[p]);
            tails[0][p] += s2 * dz * dz;
            tails[1][p] += dq * dq * dt;
            tails[2][p] += s2 * z[p] * z[p];
            tails[3][p] += q[p] * q[p] * dt;
        }
        let fits = proj.fit_many(i, &[&tails[0], &tails[1], &tails[2], &tails[3]]);
        for (m, fit) in best.iter_mut().zip(&fits) {
            *m = fit.fitted.iter().fold(*m, |acc, v| acc.max(*v));
        }
    }
    let [dz, dq, z, q] = best.map(|b| b.max(0.0));
    let dy = ess_sup_with(&next.y.difference(&current.y), mode);
    let y = ess_sup_with(&next.y, mode);
    (dy * dy + dz + dq, y * y + z + q)
}

/// Iterates the frozen map until the triple-norm distance drops below `tol`.
///
/// `proj_m` carries the problem's measure; distances and ball checks use
/// the unweighted `proj_p`.
pub(crate) fn picard<P: Problem>(
    prob: &P,
    ens: &PathEnsemble,
    proj_m: &Projector<'_, '_>,
    proj_p: &Projector<'_, '_>,
    opts: &SolveOptions,
    ball: BallSetup,
    start: Option<Fields>,
) -> Result<(Fields, ConvergenceTrace)> {
    let (n, m, dt) = (ens.n_steps(), ens.n_paths(), ens.dt());
    let sigma = prob.sigma();
    let mut trace = ConvergenceTrace {
        ball_radius: ball.radius,
        contraction_bound: contraction_bound(ball.beta, ball.radius),
        ..Default::default()
    };
    let mut current = start.unwrap_or_else(|| Fields::zeros(n, m));
    let r2 = ball.radius * ball.radius * opts.ball_slack;
    for _ in 0..opts.max_iter {
        let next = sweep(prob, ens, proj_m, &current)?;
        if !next.is_finite() {
            return Err(Error::NoConvergence { trace: Box::new(trace) });
        }
        let (d_sq, next_sq) = picard_norms(&next, &current, proj_p, sigma, dt, opts.ess_sup);
        let d = d_sq.sqrt();
        trace.push(d);
        if next_sq > r2 {
            trace.ball_violations += 1;
        }
        current = next;
        if d < opts.tol {
            trace.converged = true;
            return Ok((current, trace));
        }
    }
    Err(Error::NoConvergence { trace: Box::new(trace) })
}

pub(crate) fn finish<P: Problem>(
    prob: &P,
    ens: &PathEnsemble,
    proj_m: &Projector<'_, '_>,
    proj_p: &Projector<'_, '_>,
    fields: Fields,
    mode: EssSup,
) -> Result<SolutionTriple> {
    let (residual, slice_se) = residual(prob, ens, proj_m, &fields)?;
    let norms = norm_report(&fields.y, &fields.z, &fields.zeta, proj_p, prob.sigma(), ens.dt(), mode);
    Ok(SolutionTriple { y: fields.y, z: fields.z, zeta: fields.zeta, norms, residual, y0_se: slice_se[0], slice_se })
}

/// One application of the frozen map to `frozen`, in the centered form
/// (`f(t, 0, 0)` removed). `weights` realizes a measure change on W¹.
pub fn apply_f(
    frozen: &SolutionTriple,
    gen: &GeneratorSpec,
    ens: &PathEnsemble,
    weights: Option<&GirsanovWeights>,
    basis: &BasisSpec,
) -> Result<SolutionTriple> {
    gen.validate(ens.grid.horizon)?;
    let prob = SpecProblem::new(gen, ens, Form::Centered);
    let design = Design::new(ens, basis)?;
    let proj_p = Projector::new(&design, SliceWeights::None, ens.n_steps())?;
    let fields = Fields::of(frozen);
    match weights {
        None => {
            let out = sweep(&prob, ens, &proj_p, &fields)?;
            finish(&prob, ens, &proj_p, &proj_p, out, EssSup::Max)
        }
        Some(w) => {
            let weighted = Weighted { inner: &prob, weights: w };
            let proj_m = Projector::new(&design, SliceWeights::Step(w), ens.n_steps())?;
            let out = sweep(&weighted, ens, &proj_m, &fields)?;
            finish(&weighted, ens, &proj_m, &proj_p, out, EssSup::Max)
        }
    }
}

struct Weighted<'a, P> {
    inner: &'a P,
    weights: &'a GirsanovWeights,
}

impl<P: Problem> Problem for Weighted<'_, P> {
    fn driver(&self, slice: usize, path: usize, y: f64, z: f64, zeta: f64) -> f64 {
        self.inner.driver(slice, path, y, z, zeta)
    }
    fn driver_slice(&self, slice: usize, start: usize, y: &[f64], z: &[f64], zeta: &[f64], out: &mut [f64]) {
        self.inner.driver_slice(slice, start, y, z, zeta, out)
    }
    fn terminal(&self) -> &[f64] {
        self.inner.terminal()
    }
    fn sigma(&self) -> &[f64] {
        self.inner.sigma()
    }
    fn measure(&self) -> Option<&GirsanovWeights> {
        Some(self.weights)
    }
}

fn small_setup(gen: &GeneratorSpec, ens: &PathEnsemble) -> Result<BallSetup> {
    let bounds = derive_bounds(gen, ens.grid.horizon)?;
    let xi_sup = gen.terminal.sup_norm();
    match smallness_threshold(&bounds) {
        Ok(threshold) if xi_sup > threshold => Err(Error::SmallnessViolated { xi_sup, threshold }),
        _ => Ok(BallSetup { radius: ball_radius(xi_sup), beta: bounds.beta }),
    }
}

/// Picard iteration from the zero triple for a terminal below the
/// smallness threshold. `gen` should have no linear `y`/`z` part.
pub fn solve_small(
    gen: &GeneratorSpec,
    ens: &PathEnsemble,
    opts: &SolveOptions,
) -> Result<(SolutionTriple, ConvergenceTrace)> {
    solve_small_impl(gen, ens, opts, None)
}

/// As [`solve_small`], starting from `initial`.
pub fn solve_small_from(
    gen: &GeneratorSpec,
    ens: &PathEnsemble,
    opts: &SolveOptions,
    initial: &SolutionTriple,
) -> Result<(SolutionTriple, ConvergenceTrace)> {
    if initial.n_steps() != ens.n_steps() || initial.n_paths() != ens.n_paths() {
        return Err(Error::Config("initial triple does not match the ensemble".into()));
    }
    solve_small_impl(gen, ens, opts, Some(Fields::of(initial)))
}

fn solve_small_impl(
    gen: &GeneratorSpec,
    ens: &PathEnsemble,
    opts: &SolveOptions,
    start: Option<Fields>,
) -> Result<(SolutionTriple, ConvergenceTrace)> {
    opts.validate()?;
    let ball = small_setup(gen, ens)?;
    let prob = SpecProblem::new(gen, ens, Form::Centered);
    let design = Design::new(ens, &opts.basis_for(&gen.terminal))?;
    let proj = Projector::new(&design, SliceWeights::None, ens.n_steps())?;
    let (fields, trace) = picard(&prob, ens, &proj, &proj, opts, ball, start)?;
    Ok((finish(&prob, ens, &proj, &proj, fields, opts.ess_sup)?, trace))
}

/// Solves a transformed problem (no linear part, weighted measure) by
/// Picard iteration. The result is in transformed variables.
///
/// Smallness is checked on the untransformed terminal of `gen`.
pub fn solve_transformed(
    tp: &Transformed<SpecProblem>,
    ens: &PathEnsemble,
    opts: &SolveOptions,
) -> Result<(SolutionTriple, ConvergenceTrace)> {
    opts.validate()?;
    let gen = tp.base().generator();
    let bounds = derive_bounds(gen, ens.grid.horizon)?;
    let xi_sup = gen.terminal.sup_norm();
    if let Threshold::Finite(threshold) = crate::model::threshold_of(&bounds) {
        if xi_sup > threshold {
            return Err(Error::SmallnessViolated { xi_sup, threshold });
        }
    }
    let xi_bar = tp.terminal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let ball = BallSetup { radius: ball_radius(xi_bar), beta: bounds.transformed(ens.grid.horizon).beta };
    let design = Design::new(ens, &opts.basis_for(&gen.terminal))?;
    let proj_p = Projector::new(&design, SliceWeights::None, ens.n_steps())?;
    let proj_m = match tp.measure() {
        Some(w) => Some(Projector::new(&design, SliceWeights::Step(w), ens.n_steps())?),
        None => None,
    };
    let pm = proj_m.as_ref().unwrap_or(&proj_p);
    let (fields, trace) = picard(tp, ens, pm, &proj_p, opts, ball, None)?;
    Ok((finish(tp, ens, pm, &proj_p, fields, opts.ess_sup)?, trace))
}

#[cfg(test)]
mod tests;
