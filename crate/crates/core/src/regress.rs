//! Least-squares Monte Carlo conditional expectations.
//!
//! `E(X | F_{t_i})` is approximated by the (weighted) projection of `X` onto
//! a global polynomial basis in the standardized states `(W¹_{t_i}, W²_{t_i})`.
//! The intercept is never penalized, so constants are reproduced exactly and
//! fitted values preserve the (weighted) sample mean.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TerminalCondition;
use crate::paths::{Driver, GirsanovWeights, PathEnsemble};

pub const MAX_DEGREE: usize = 6;
/// Ridge on non-intercept coefficients is `RIDGE_FACTOR * n_paths`.
pub const RIDGE_FACTOR: f64 = 1e-10;
/// Cached basis values beyond this many `f64`s are recomputed on the fly.
const CACHE_LIMIT: usize = 48_000_000;
const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisInputs {
    W1,
    W2,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub inputs: BasisInputs,
    pub standardize: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { degree: 3, inputs: BasisInputs::Both, standardize: true }
    }
}

impl BasisSpec {
    pub fn new(degree: usize, inputs: BasisInputs) -> Self {
        Self { degree, inputs, standardize: true }
    }

    /// Uses only the drivers the terminal condition loads on.
    pub fn for_terminal(tc: &TerminalCondition, degree: usize) -> Self {
        let (l1, l2) = tc.loads();
        let inputs = match (l1 != 0.0, l2 != 0.0) {
            (true, true) => BasisInputs::Both,
            (false, true) => BasisInputs::W2,
            _ => BasisInputs::W1,
        };
        Self::new(degree, inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree > MAX_DEGREE {
            return Err(Error::Config(format!("basis degree {} exceeds {MAX_DEGREE}", self.degree)));
        }
        Ok(())
    }

    fn exponents(&self) -> Vec<(u32, u32)> {
        let d = self.degree as u32;
        match self.inputs {
            BasisInputs::W1 => (0..=d).map(|p| (p, 0)).collect(),
            BasisInputs::W2 => (0..=d).map(|q| (0, q)).collect(),
            BasisInputs::Both => (0..=d).flat_map(|tot| (0..=tot).rev().map(move |p| (p, tot - p))).collect(),
        }
    }

    /// Number of basis functions.
    pub fn size(&self) -> usize {
        self.exponents().len()
    }
}

/// Standardization and (optionally cached) basis values for one slice.
#[derive(Clone, Debug)]
struct SliceDesign {
    exps: Vec<(u32, u32)>,
    center: [f64; 2],
    scale: [f64; 2],
    values: Option<Vec<f64>>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl SliceDesign {
    fn build(ens: &PathEnsemble, basis: &BasisSpec, slice: usize, cache: bool) -> Self {
        let w1 = ens.levels(Driver::W1).slice(slice);
        let w2 = ens.levels(Driver::W2).slice(slice);
        let (m1, s1) = mean_sd(w1);
        let (m2, s2) = mean_sd(w2);
        let degenerate = match basis.inputs {
            BasisInputs::W1 => s1 == 0.0,
            BasisInputs::W2 => s2 == 0.0,
            BasisInputs::Both => s1 == 0.0 && s2 == 0.0,
        };
        let mut exps = if degenerate || basis.degree == 0 { vec![(0, 0)] } else { basis.exponents() };
        if basis.inputs == BasisInputs::Both && !degenerate {
            // Drop terms in an input that has no spread on this slice.
            exps.retain(|&(p, q)| (p == 0 || s1 > 0.0) && (q == 0 || s2 > 0.0));
        }
        let (center, scale) = if basis.standardize {
            ([m1, m2], [if s1 > 0.0 { s1 } else { 1.0 }, if s2 > 0.0 { s2 } else { 1.0 }])
        } else {
            ([0.0, 0.0], [1.0, 1.0])
        };
        let mut design = Self { exps, center, scale, values: None };
        if cache {
            let k = design.k();
            let mut vals = vec![0.0; w1.len() * k];
            for (p, row) in vals.chunks_mut(k).enumerate() {
                design.eval_into(w1[p], w2[p], row);
            }
            design.values = Some(vals);
        }
        design
    }

    fn k(&self) -> usize {
        self.exps.len()
    }

    #[inline]
    fn eval_into(&self, w1: f64, w2: f64, out: &mut [f64]) {
        let x1 = (w1 - self.center[0]) / self.scale[0];
        let x2 = (w2 - self.center[1]) / self.scale[1];
        let mut p1 = [1.0; MAX_DEGREE + 1];
        let mut p2 = [1.0; MAX_DEGREE + 1];
        for d in 1..=MAX_DEGREE {
            p1[d] = p1[d - 1] * x1;
            p2[d] = p2[d - 1] * x2;
        }
        for (o, &(a, b)) in out.iter_mut().zip(&self.exps) {
            *o = p1[a as usize] * p2[b as usize];
        }
    }

    /// Row-major basis values for the paths in `range`.
    fn rows(&self, ens: &PathEnsemble, slice: usize, range: std::ops::Range<usize>) -> std::borrow::Cow<'_, [f64]> {
        let k = self.k();
        match &self.values {
            Some(vals) => std::borrow::Cow::Borrowed(&vals[range.start * k..range.end * k]),
            None => {
                let w1 = ens.levels(Driver::W1).slice(slice);
                let w2 = ens.levels(Driver::W2).slice(slice);
                let mut out = vec![0.0; range.len() * k];
                for (row, p) in out.chunks_exact_mut(k).zip(range) {
                    self.eval_into(w1[p], w2[p], row);
                }
                std::borrow::Cow::Owned(out)
            }
        }
    }
}

/// Basis designs for every slice of an ensemble; shared by projectors with
/// different weights.
#[derive(Clone, Debug)]
pub struct Design<'e> {
    ens: &'e PathEnsemble,
    basis: BasisSpec,
    slices: Vec<SliceDesign>,
}

impl<'e> Design<'e> {
    pub fn new(ens: &'e PathEnsemble, basis: &BasisSpec) -> Result<Self> {
        basis.validate()?;
        let n_slices = ens.n_steps() + 1;
        let cache = ens.n_paths() * basis.size() * n_slices <= CACHE_LIMIT;
        let slices = (0..n_slices).map(|i| SliceDesign::build(ens, basis, i, cache)).collect();
        Ok(Self { ens, basis: *basis, slices })
    }

    pub fn ensemble(&self) -> &'e PathEnsemble {
        self.ens
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }
}

/// Which per-slice weights a projector applies.
#[derive(Clone, Copy, Debug)]
pub enum SliceWeights<'w> {
    None,
    /// One-step ratios `E_{i+1}/E_i`: targets measurable at `t_{i+1}`.
    Step(&'w GirsanovWeights),
    /// Ratios `E_T/E_i`: targets measurable at `T`.
    Tail(&'w GirsanovWeights),
}

/// Fitted values and the standard error of the fit at a slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub fitted: Vec<f64>,
    pub se: f64,
}

struct SliceFactor {
    chol: Cholesky<f64, Dyn>,
    weights: Option<Vec<f64>>,
    sum_w: f64,
    ess: f64,
}

/// Weighted least-squares projector over all slices of a design.
pub struct Projector<'d, 'e> {
    design: &'d Design<'e>,
    factors: Vec<SliceFactor>,
}

// Dispatches to a kernel monomorphized on the common basis sizes.
macro_rules! with_width {
    ($k:expr, $f:ident($($arg:expr),*)) => {
        match $k {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            4 => $f::<4>($($arg),*),
            5 => $f::<5>($($arg),*),
            6 => $f::<6>($($arg),*),
            7 => $f::<7>($($arg),*),
            10 => $f::<10>($($arg),*),
            15 => $f::<15>($($arg),*),
            _ => $f::<0>($($arg),*),
        }
    };
}

/// `acc += Σ_p w_p x_p row_p`. `K = 0` means the width is taken from `acc`.
#[inline]
fn accumulate<const K: usize>(rows: &[f64], t: &[f64], w: Option<&[f64]>, acc: &mut [f64]) {
    let k = if K == 0 { acc.len() } else { K };
    let acc = &mut acc[..k];
    match w {
        None => {
            for (row, &x) in rows.chunks_exact(k).zip(t) {
                for c in 0..k {
                    acc[c] += row[c] * x;
                }
            }
        }
        Some(w) => {
            for ((row, &x), &wp) in rows.chunks_exact(k).zip(t).zip(w) {
                let wx = wp * x;
                for c in 0..k {
                    acc[c] += row[c] * wx;
                }
            }
        }
    }
}

/// Writes `row_p · coef` into `out` and returns the weighted residual sum of squares.
#[inline]
fn predict<const K: usize>(rows: &[f64], coef: &[f64], t: &[f64], w: Option<&[f64]>, out: &mut [f64]) -> f64 {
    let k = if K == 0 { coef.len() } else { K };
    let coef = &coef[..k];
    let mut rss = 0.0;
    for (i, (o, row)) in out.iter_mut().zip(rows.chunks_exact(k)).enumerate() {
        let mut v = 0.0;
        for c in 0..k {
            v += row[c] * coef[c];
        }
        *o = v;
        let r = t[i] - v;
        rss += w.map_or(1.0, |w| w[i]) * r * r;
    }
    rss
}

/// Rayon only pays off with several workers and several chunks.
fn sequential(n: usize) -> bool {
    n <= CHUNK || rayon::current_num_threads() == 1
}

/// Maps chunks in order; the result does not depend on the worker count.
fn map_chunks<T: Send>(
    ranges: &[std::ops::Range<usize>],
    f: impl Fn(&std::ops::Range<usize>) -> T + Sync + Send,
) -> Vec<T> {
    let n = ranges.last().map_or(0, |r| r.end);
    if sequential(n) {
        ranges.iter().map(&f).collect()
    } else {
        ranges.par_iter().map(f).collect()
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK)).map(|c| c * CHUNK..((c + 1) * CHUNK).min(n)).collect()
}

impl<'d, 'e> Projector<'d, 'e> {
    /// Factorizes the normal equations of slices `0..n_slices`.
    pub fn new(design: &'d Design<'e>, weights: SliceWeights<'_>, n_slices: usize) -> Result<Self> {
        let n_slices = n_slices.min(design.slices.len());
        let factors = (0..n_slices)
            .map(|i| {
                let w = match weights {
                    SliceWeights::None => None,
                    SliceWeights::Step(g) => {
                        Some(if i < g.n_steps() { g.step_weights(i) } else { vec![1.0; design.ens.n_paths()] })
                    }
                    SliceWeights::Tail(g) => Some(g.tail_weights(i)),
                };
                factorize(design, i, w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { design, factors })
    }

    pub fn n_slices(&self) -> usize {
        self.factors.len()
    }

    pub fn fit(&self, slice: usize, target: &[f64]) -> Fit {
        self.fit_many(slice, &[target]).pop().expect("one fit")
    }

    /// Projects several targets onto slice `slice` in one pass.
    pub fn fit_many(&self, slice: usize, targets: &[&[f64]]) -> Vec<Fit> {
        let sd = &self.design.slices[slice];
        let fac = &self.factors[slice];
        let ens = self.design.ens;
        let n = ens.n_paths();
        let k = sd.k();
        let nt = targets.len();
        for t in targets {
            assert_eq!(t.len(), n, "target length must equal n_paths");
        }
        let w = fac.weights.as_deref();
        let ranges = chunk_ranges(n);
        let partial: Vec<Vec<f64>> = map_chunks(&ranges, |range| {
            let rows = sd.rows(ens, slice, range.clone());
            let mut acc = vec![0.0; k * nt];
            for (j, t) in targets.iter().enumerate() {
                let a = &mut acc[j * k..(j + 1) * k];
                let w = w.map(|w| &w[range.clone()]);
                with_width!(k, accumulate(&rows, &t[range.clone()], w, a));
            }
            acc
        });
        let mut rhs = vec![0.0; k * nt];
        for part in &partial {
            for (r, v) in rhs.iter_mut().zip(part) {
                *r += v;
            }
        }
        let coefs: Vec<Vec<f64>> = (0..nt)
            .map(|j| fac.chol.solve(&DVector::from_column_slice(&rhs[j * k..(j + 1) * k])).as_slice().to_vec())
            .collect();

        let mut fitted: Vec<Vec<f64>> = (0..nt).map(|_| vec![0.0; n]).collect();
        // Chunk-major so a block of design rows is reused across targets.
        let mut per_chunk: Vec<Vec<&mut [f64]>> = (0..ranges.len()).map(|_| Vec::with_capacity(nt)).collect();
        for f in fitted.iter_mut() {
            for (c, piece) in f.chunks_mut(CHUNK).enumerate() {
                per_chunk[c].push(piece);
            }
        }
        let kernel = |(outs, range): (Vec<&mut [f64]>, &std::ops::Range<usize>)| -> Vec<f64> {
            let rows = sd.rows(ens, slice, range.clone());
            let w = w.map(|w| &w[range.clone()]);
            outs.into_iter()
                .zip(targets)
                .zip(&coefs)
                .map(|((out, t), c)| with_width!(k, predict(&rows, c, &t[range.clone()], w, out)))
                .collect()
        };
        let parts: Vec<Vec<f64>> = if sequential(n) {
            per_chunk.into_iter().zip(&ranges).map(kernel).collect()
        } else {
            per_chunk.into_par_iter().zip(ranges.par_iter()).map(kernel).collect()
        };
        fitted
            .into_iter()
            .enumerate()
            .map(|(j, fitted)| {
                let rss: f64 = parts.iter().map(|p| p[j]).sum();
                let se = if fac.ess > 0.0 { (rss / fac.sum_w * k as f64 / fac.ess).sqrt() } else { 0.0 };
                Fit { fitted, se }
            })
            .collect()
    }
}

fn factorize(design: &Design<'_>, slice: usize, weights: Option<Vec<f64>>) -> Result<SliceFactor> {
    let sd = &design.slices[slice];
    let ens = design.ens;
    let n = ens.n_paths();
    let k = sd.k();
    let w = weights.as_deref();
    let partial: Vec<(Vec<f64>, f64, f64)> = map_chunks(&chunk_ranges(n), |range| {
        let mut g = vec![0.0; k * k];
        let (mut s, mut s2) = (0.0, 0.0);
        let rows = sd.rows(ens, slice, range.clone());
        for (i, row) in rows.chunks_exact(k).enumerate() {
            let wp = w.map_or(1.0, |w| w[range.start + i]);
            s += wp;
            s2 += wp * wp;
            for a in 0..k {
                let ra = wp * row[a];
                for b in 0..=a {
                    g[a * k + b] += ra * row[b];
                }
            }
        }
        (g, s, s2)
    });
    let mut gram = vec![0.0; k * k];
    let (mut sum_w, mut sum_w2) = (0.0, 0.0);
    for (g, s, s2) in &partial {
        for (a, b) in gram.iter_mut().zip(g) {
            *a += b;
        }
        sum_w += s;
        sum_w2 += s2;
    }
    let ridge = RIDGE_FACTOR * n as f64;
    let mut m = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            m[(a, b)] = gram[a * k + b];
            m[(b, a)] = gram[a * k + b];
        }
        if a > 0 {
            m[(a, a)] += ridge;
        }
    }
    let chol = Cholesky::new(m).ok_or(Error::RankDeficient { slice })?;
    let ess = if sum_w2 > 0.0 { sum_w * sum_w / sum_w2 } else { 0.0 };
    Ok(SliceFactor { chol, weights, sum_w, ess })
}

fn single_slice_projector<'d, 'e>(
    design: &'d Design<'e>,
    slice: usize,
    weights: Option<&GirsanovWeights>,
) -> Result<SliceFactor> {
    let w = weights.map(|g| if slice < g.n_steps() { g.step_weights(slice) } else { vec![1.0; design.ens.n_paths()] });
    factorize(design, slice, w)
}

fn one_slice_design<'e>(ens: &'e PathEnsemble, basis: &BasisSpec, slice: usize) -> Result<Design<'e>> {
    basis.validate()?;
    if slice > ens.n_steps() {
        return Err(Error::Config(format!("slice {slice} is beyond the grid")));
    }
    // Only `slice` is populated with a real design; the rest are placeholders.
    let mut slices =
        vec![SliceDesign { exps: vec![(0, 0)], center: [0.0; 2], scale: [1.0; 2], values: None }; slice + 1];
    slices[slice] = SliceDesign::build(ens, basis, slice, false);
    Ok(Design { ens, basis: *basis, slices })
}

/// `E(targets | F_{t_slice})`, weighted by the one-step likelihood ratios of
/// `weights` when given.
pub fn cond_expect(
    targets: &[f64],
    slice: usize,
    ens: &PathEnsemble,
    weights: Option<&GirsanovWeights>,
    basis: &BasisSpec,
) -> Result<Vec<f64>> {
    Ok(cond_expect_fit(targets, slice, ens, weights, basis)?.fitted)
}

pub fn cond_expect_fit(
    targets: &[f64],
    slice: usize,
    ens: &PathEnsemble,
    weights: Option<&GirsanovWeights>,
    basis: &BasisSpec,
) -> Result<Fit> {
    let design = one_slice_design(ens, basis, slice)?;
    let fac = single_slice_projector(&design, slice, weights)?;
    let mut factors: Vec<SliceFactor> = Vec::with_capacity(slice + 1);
    for i in 0..slice {
        // Placeholder factors for unused slices.
        let chol = Cholesky::new(DMatrix::<f64>::identity(1, 1)).expect("identity");
        factors.push(SliceFactor { chol, weights: None, sum_w: 1.0, ess: 1.0 });
        let _ = i;
    }
    factors.push(fac);
    let proj = Projector { design: &design, factors };
    Ok(proj.fit(slice, targets))
}

fn integrand_fit(
    y_next: &[f64],
    slice: usize,
    ens: &PathEnsemble,
    weights: Option<&GirsanovWeights>,
    basis: &BasisSpec,
    driver: Driver,
) -> Result<Fit> {
    if slice >= ens.n_steps() {
        return Err(Error::Config(format!("slice {slice} has no forward increment")));
    }
    let dt = ens.dt();
    let base = cond_expect(y_next, slice, ens, weights, basis)?;
    let inc = ens.increments(driver).slice(slice);
    let target: Vec<f64> = (0..ens.n_paths())
        .map(|p| {
            let lam = weights.map_or(0.0, |w| w.drift(driver, slice, p));
            (y_next[p] - base[p]) * (inc[p] - lam * dt) / dt
        })
        .collect();
    cond_expect_fit(&target, slice, ens, weights, basis)
}

/// Predictable integrand of `y_next` against `σ dW¹` on `[t_i, t_{i+1}]`.
///
/// Uses `E((y_next - E(y_next|F_i)) ΔM̄_i | F_i) / (σ Δt)` with
/// `ΔM̄ = ΔW¹ - λ Δt` under a weighted measure with drift `λ`.
pub fn extract_z(
    y_next: &[f64],
    slice: usize,
    ens: &PathEnsemble,
    weights: Option<&GirsanovWeights>,
    basis: &BasisSpec,
    sigma: f64,
) -> Result<Vec<f64>> {
    let fit = integrand_fit(y_next, slice, ens, weights, basis, Driver::W1)?;
    Ok(fit.fitted.into_iter().map(|v| v / sigma).collect())
}

/// Loading of the orthogonal martingale part on `dW²`.
pub fn extract_zeta(
    y_next: &[f64],
    slice: usize,
    ens: &PathEnsemble,
    weights: Option<&GirsanovWeights>,
    basis: &BasisSpec,
) -> Result<Vec<f64>> {
    Ok(integrand_fit(y_next, slice, ens, weights, basis, Driver::W2)?.fitted)
}
