//! Splitting chain: the terminal value is cut into pieces below the
//! smallness threshold and solved stage by stage around the accumulated
//! solution, each stage linearized, transformed and iterated.

use serde::{Deserialize, Serialize};

use crate::analysis::{bmo_check, BmoCheck};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::{ball_radius, derive_bounds, threshold_of, GeneratorSpec, GridSpec, TerminalCondition};
use crate::paths::{generate, terminal_values, GirsanovWeights, PathEnsemble, WeightOptions};
use crate::regress::{Design, Projector, SliceWeights};

use super::{
    finish, picard, untransform_fields, BallSetup, Fields, Form, Problem, SolutionTriple, SolveOptions, SpecProblem,
    TransformParams, Transformed,
};

/// Safety margin applied to the smallness threshold when splitting.
pub const SPLIT_MARGIN: f64 = 0.8;
const RK4_SUBSTEPS: usize = 32;

/// `m = ceil(‖ξ‖∞ / (0.8 threshold))` equal pieces `ξ / m`.
pub fn split_terminal(tc: &TerminalCondition, threshold: f64) -> Vec<TerminalCondition> {
    let eff = SPLIT_MARGIN * threshold;
    let sup = tc.sup_norm();
    let m = if sup <= eff || !eff.is_finite() {
        1
    } else {
        // Guard against ratios like 4.000000000000001.
        ((sup / eff) * (1.0 - 1e-12)).ceil() as usize
    };
    vec![tc.divided(m); m]
}

/// `φ` on the grid, solving `φ' = f(t, -φ, 0)`, `φ(0) = 0`, by fine RK4.
///
/// With `Y = Ȳ - φ` the shifted driver `f(t, ȳ - φ, v) - f(t, -φ, 0)`
/// vanishes at the origin.
pub fn shift_path(gen: &GeneratorSpec, grid: &GridSpec) -> Vec<f64> {
    let h = grid.dt() / RK4_SUBSTEPS as f64;
    let rhs = |t: f64, phi: f64| gen.f(t, -phi, 0.0);
    let mut out = Vec::with_capacity(grid.n_steps + 1);
    let mut phi = 0.0;
    out.push(phi);
    for i in 0..grid.n_steps {
        let t0 = grid.time(i);
        for s in 0..RK4_SUBSTEPS {
            let t = t0 + s as f64 * h;
            let k1 = rhs(t, phi);
            let k2 = rhs(t + h / 2.0, phi + h / 2.0 * k1);
            let k3 = rhs(t + h / 2.0, phi + h / 2.0 * k2);
            let k4 = rhs(t + h, phi + h * k3);
            phi += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out.push(phi);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub piece_sup: f64,
    /// Sup of the transformed terminal piece.
    pub transformed_sup: f64,
    /// Terminal effective sample size over the number of paths.
    pub ess_fraction: f64,
    pub iterations: usize,
    pub last_distance: f64,
    pub ball_violations: usize,
    pub contraction_bound: f64,
    pub fitted_ratio: Option<f64>,
    /// Picard distance after each sweep.
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ChainSolution {
    pub triple: SolutionTriple,
    pub stages: Vec<StageReport>,
    /// Shift `φ` on the grid.
    pub phi: Vec<f64>,
}

impl ChainSolution {
    pub fn pieces(&self) -> usize {
        self.stages.len()
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    pub fn min_ess_fraction(&self) -> f64 {
        self.stages.iter().map(|s| s.ess_fraction).fold(1.0, f64::min)
    }
}

/// Stage equation around the accumulated solution `(Ỹ, Z̃, ζ̃)`:
/// `D(Ỹ + y, Z̃ + z) - D(Ỹ, Z̃) + g (ζ² + 2 ζ̃ ζ)` with the shifted driver `D`.
struct Stage<'a> {
    gen: &'a GeneratorSpec,
    times: &'a [f64],
    phi: &'a [f64],
    sigma: &'a [f64],
    g: &'a [f64],
    acc: Option<&'a Fields>,
    terminal: Vec<f64>,
}

impl Stage<'_> {
    #[inline]
    fn shifted(&self, i: usize, y: f64, z: f64) -> f64 {
        let (t, phi) = (self.times[i], self.phi[i]);
        self.gen.f(t, y - phi, self.sigma[i] * z) - self.gen.f(t, -phi, 0.0)
    }
}

impl Problem for Stage<'_> {
    #[inline]
    fn driver(&self, slice: usize, path: usize, y: f64, z: f64, zeta: f64) -> f64 {
        match self.acc {
            None => self.shifted(slice, y, z) + self.g[slice] * zeta * zeta,
            Some(acc) => {
                let (ya, za, qa) = (acc.y.get(slice, path), acc.z.get(slice, path), acc.zeta.get(slice, path));
                self.shifted(slice, ya + y, za + z) - self.shifted(slice, ya, za)
                    + self.g[slice] * (zeta * zeta + 2.0 * qa * zeta)
            }
        }
    }

    fn driver_slice(&self, i: usize, start: usize, y: &[f64], z: &[f64], zeta: &[f64], out: &mut [f64]) {
        let (t, phi, s, g) = (self.times[i], self.phi[i], self.sigma[i], self.g[i]);
        let f0 = self.gen.f(t, -phi, 0.0);
        match self.acc {
            None => {
                for (p, o) in out.iter_mut().enumerate() {
                    *o = (self.gen.f(t, y[p] - phi, s * z[p]) - f0) + g * zeta[p] * zeta[p];
                }
            }
            Some(acc) => {
                let r = start..start + out.len();
                let (ya, za, qa) = (&acc.y.slice(i)[r.clone()], &acc.z.slice(i)[r.clone()], &acc.zeta.slice(i)[r]);
                for (p, o) in out.iter_mut().enumerate() {
                    let around = self.gen.f(t, ya[p] - phi, s * za[p]);
                    let moved = self.gen.f(t, ya[p] + y[p] - phi, s * (za[p] + z[p]));
                    *o = (moved - around) + g * (zeta[p] * zeta[p] + 2.0 * qa[p] * zeta[p]);
                }
            }
        }
    }

    fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    fn sigma(&self) -> &[f64] {
        self.sigma
    }

    fn measure(&self) -> Option<&GirsanovWeights> {
        None
    }
}

fn stage_params(
    gen: &GeneratorSpec,
    ens: &PathEnsemble,
    times: &[f64],
    phi: &[f64],
    sigma: &[f64],
    g: &[f64],
    acc: Option<&Fields>,
) -> TransformParams {
    let (n, m) = (ens.n_steps(), ens.n_paths());
    let at = |f: Option<&Field>, i: usize, p: usize| f.map_or(0.0, |f| f.get(i, p));
    let (ay, az, aq) = (acc.map(|a| &a.y), acc.map(|a| &a.z), acc.map(|a| &a.zeta));
    let alpha = Field::from_fn(n, m, |i, p| gen.f_y(times[i], at(ay, i, p) - phi[i], sigma[i] * at(az, i, p)));
    let gamma = Field::from_fn(n, m, |i, p| gen.f_v(times[i], at(ay, i, p) - phi[i], sigma[i] * at(az, i, p)));
    let lambda2 = Field::from_fn(n, m, |i, p| 2.0 * g[i] * at(aq, i, p));
    TransformParams::new(alpha, gamma, lambda2, n, ens.dt())
}

/// Solves for a bounded terminal of any size on a given ensemble.
pub fn solve_chain(gen: &GeneratorSpec, ens: &PathEnsemble, opts: &SolveOptions) -> Result<ChainSolution> {
    opts.validate()?;
    let horizon = ens.grid.horizon;
    let bounds = derive_bounds(gen, horizon)?;
    let threshold = threshold_of(&bounds);
    let beta_bar = bounds.transformed(horizon).beta;
    let (n, m) = (ens.n_steps(), ens.n_paths());

    let phi = shift_path(gen, &ens.grid);
    let shifted = gen.terminal.clone().with_offset(gen.terminal.offset + phi[n]);
    let pieces = split_terminal(&shifted, threshold.value());
    if pieces.len() > opts.max_pieces {
        return Err(Error::TooManyPieces { needed: pieces.len(), cap: opts.max_pieces });
    }
    let piece_sup = pieces[0].sup_norm();
    let piece_values = terminal_values(ens, &pieces[0]);

    let times = ens.grid.times();
    let sigma: Vec<f64> = times.iter().map(|&t| gen.sigma_at(t)).collect();
    let g: Vec<f64> = times.iter().map(|&t| gen.g_at(t)).collect();
    let design = Design::new(ens, &opts.basis_for(&gen.terminal))?;
    let proj_p = Projector::new(&design, SliceWeights::None, n)?;
    let wopts = WeightOptions { normalize: true, ess_floor: opts.ess_floor };

    let mut acc: Option<Fields> = None;
    let mut stages = Vec::with_capacity(pieces.len());
    for j in 0..pieces.len() {
        let run = || -> Result<(Fields, StageReport)> {
            if !threshold.admits(piece_sup) {
                return Err(Error::SmallnessViolated { xi_sup: piece_sup, threshold: threshold.value() });
            }
            let stage = Stage {
                gen,
                times: &times,
                phi: &phi,
                sigma: &sigma,
                g: &g,
                acc: acc.as_ref(),
                terminal: piece_values.clone(),
            };
            let params = stage_params(gen, ens, &times, &phi, &sigma, &g, acc.as_ref());
            let tp = Transformed::new(stage, params, ens, &wopts)?;
            let xi_bar = tp.terminal().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let ball = BallSetup { radius: ball_radius(xi_bar), beta: beta_bar };
            let proj_m = match tp.weights() {
                Some(w) => Some(Projector::new(&design, SliceWeights::Step(w), n)?),
                None => None,
            };
            let pm = proj_m.as_ref().unwrap_or(&proj_p);
            let (fields, trace) = if tp.params().is_identity() {
                picard(tp.base(), ens, pm, &proj_p, opts, ball, None)?
            } else {
                picard(&tp, ens, pm, &proj_p, opts, ball, None)?
            };
            let report = StageReport {
                stage: j,
                piece_sup,
                transformed_sup: xi_bar,
                ess_fraction: tp.weights().map_or(1.0, |w| w.terminal_ess_fraction()),
                iterations: trace.iterations,
                last_distance: trace.last_distance(),
                ball_violations: trace.ball_violations,
                contraction_bound: trace.contraction_bound,
                fitted_ratio: trace.fitted_ratio,
                distances: trace.distances.clone(),
            };
            Ok((untransform_fields(fields, tp.params()), report))
        };
        let (fields, report) = run().map_err(|e| Error::Stage { stage: j, source: Box::new(e) })?;
        stages.push(report);
        acc = Some(match acc {
            None => fields,
            Some(mut a) => {
                a.y += &fields.y;
                a.z += &fields.z;
                a.zeta += &fields.zeta;
                a
            }
        });
    }

    let mut fields = acc.expect("at least one piece");
    for (i, ph) in phi.iter().enumerate() {
        for v in fields.y.slice_mut(i) {
            *v -= ph;
        }
    }
    fields.y.slice_mut(n).copy_from_slice(&terminal_values(ens, &gen.terminal));
    let direct = SpecProblem::new(gen, ens, Form::Direct);
    let triple = finish(&direct, ens, &proj_p, &proj_p, fields, opts.ess_sup)?;
    debug_assert_eq!(triple.n_paths(), m);
    Ok(ChainSolution { triple, stages, phi })
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub ensemble: PathEnsemble,
    pub solution: ChainSolution,
    pub certificate: BmoCheck,
}

/// Generates the ensemble, runs the chain and attaches the BMO certificate.
pub fn solve(gen: &GeneratorSpec, grid: &GridSpec, opts: &SolveOptions) -> Result<SolveOutput> {
    grid.validate()?;
    let ensemble = generate(grid)?;
    let solution = solve_chain(gen, &ensemble, opts)?;
    let certificate = bmo_check(gen, grid.horizon, &solution.triple)?;
    Ok(SolveOutput { ensemble, solution, certificate })
}
