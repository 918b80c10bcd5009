//! Closed-form reference solutions, the ordering check for two generators,
//! and the a priori BMO bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::{GeneratorSpec, GridSpec, TerminalCondition, TimeFn};
use crate::paths::{generate, terminal_values, PathEnsemble};
use crate::regress::{BasisSpec, Design, Projector, SliceWeights};
use crate::solver::{solve_chain, ChainSolution, SolutionTriple, SolveOptions};

/// A reference solution with the standard error of its value at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Oracle {
    pub y: Field,
    pub y0_se: f64,
}

impl Oracle {
    pub fn y0(&self) -> f64 {
        self.y.get(0, 0)
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (v / n).sqrt())
}

/// `E(x | F_i)` for every slice: the plain mean at `t = 0`, `x` itself at `T`.
fn cond_field(x: &[f64], ens: &PathEnsemble, basis: &BasisSpec, transform: impl Fn(&mut [f64])) -> Result<Field> {
    let (n, m) = (ens.n_steps(), ens.n_paths());
    let design = Design::new(ens, basis)?;
    let proj = Projector::new(&design, SliceWeights::None, n)?;
    let mut out = Field::zeros(n + 1, m);
    out.slice_mut(n).copy_from_slice(x);
    let mean = x.iter().sum::<f64>() / m as f64;
    out.slice_mut(0).fill(mean);
    for i in 1..n {
        out.slice_mut(i).copy_from_slice(&proj.fit(i, x).fitted);
    }
    for i in 0..n {
        transform(out.slice_mut(i));
    }
    Ok(out)
}

/// `Y_t = (1/γ) ln E(e^{γ ξ} | F_t)`, the solution for `f = (γ/2) z²`.
///
/// The fitted conditional expectation is clamped to the range of `e^{γξ}`
/// before taking logs. `γ = 0` returns the conditional mean, clamped to the
/// range of `ξ`.
pub fn oracle_cole_hopf(gamma_q: f64, ens: &PathEnsemble, tc: &TerminalCondition, basis: &BasisSpec) -> Result<Oracle> {
    let xi = terminal_values(ens, tc);
    let range = |x: &[f64]| x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if gamma_q == 0.0 {
        let (lo, hi) = range(&xi);
        let y = cond_field(&xi, ens, basis, |s| {
            for v in s.iter_mut() {
                *v = v.clamp(lo, hi);
            }
        })?;
        return Ok(Oracle { y0_se: mean_se(&xi).1, y });
    }
    let ex: Vec<f64> = xi.iter().map(|x| (gamma_q * x).exp()).collect();
    let (lo, hi) = range(&ex);
    let mut y = cond_field(&ex, ens, basis, |s| {
        for v in s.iter_mut() {
            *v = v.clamp(lo, hi).ln() / gamma_q;
        }
    })?;
    y.slice_mut(ens.n_steps()).copy_from_slice(&xi);
    let (m, se) = mean_se(&ex);
    // Delta method for ln(mean)/γ.
    Ok(Oracle { y, y0_se: se / (m * gamma_q.abs()) })
}

/// `Y_t = e^{a(T-t)} E(ξ | F_t) + (c/a)(e^{a(T-t)} - 1)`, the solution for
/// `f = a y + c`; the second term becomes `c (T - t)` as `a → 0`.
pub fn oracle_linear(a: f64, c: f64, ens: &PathEnsemble, tc: &TerminalCondition, basis: &BasisSpec) -> Result<Oracle> {
    let xi = terminal_values(ens, tc);
    let horizon = ens.grid.horizon;
    let n = ens.n_steps();
    let mut y = cond_field(&xi, ens, basis, |_| {})?;
    for i in 0..=n {
        let tau = horizon - ens.grid.time(i);
        let growth = (a * tau).exp();
        let drift = if a == 0.0 { c * tau } else { c / a * (a * tau).exp_m1() };
        if i == n {
            continue;
        }
        for v in y.slice_mut(i) {
            *v = growth * *v + drift;
        }
    }
    Ok(Oracle { y0_se: (a * horizon).exp() * mean_se(&xi).1, y })
}

/// `Y_t = (1/(2g)) ln E(e^{2gξ} | F_t)`, the solution for `f = 0` with a
/// constant bracket coefficient `g` and a terminal driven by W².
pub fn oracle_orthogonal(
    g_const: f64,
    ens: &PathEnsemble,
    tc: &TerminalCondition,
    basis: &BasisSpec,
) -> Result<Oracle> {
    oracle_cole_hopf(2.0 * g_const, ens, tc, basis)
}

/// Which closed form applies to a generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ColeHopf,
    Linear,
    Orthogonal,
}

/// Picks the closed-form solution that applies to `gen`, if any.
///
/// Cole–Hopf needs `f = (γ/2) z²` with `g = 0` and `σ = 1`; the linear
/// oracle needs constant `f = a + b y` with `g = 0`; the orthogonal one
/// needs `f = 0`, constant `g` and a terminal driven by W² alone.
pub fn reference_oracle(
    gen: &GeneratorSpec,
    ens: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<Option<(OracleKind, Oracle)>> {
    let aq = gen.family();
    let zero = |f: &TimeFn| *f == TimeFn::Constant(0.0);
    let constant = |f: &TimeFn| match f {
        TimeFn::Constant(v) => Some(*v),
        _ => None,
    };
    if aq.nonlinearity.is_some() || gen.sigma != TimeFn::Constant(1.0) || !zero(&aq.c) {
        return Ok(None);
    }
    let g_zero = zero(&gen.g);
    if g_zero && zero(&aq.a) && zero(&aq.b) {
        return Ok(Some((OracleKind::ColeHopf, oracle_cole_hopf(aq.gamma_q, ens, &gen.terminal, basis)?)));
    }
    if g_zero && aq.gamma_q == 0.0 {
        if let (Some(a), Some(b)) = (constant(&aq.a), constant(&aq.b)) {
            return Ok(Some((OracleKind::Linear, oracle_linear(b, a, ens, &gen.terminal, basis)?)));
        }
    }
    let w2_only = gen.terminal.loads().0 == 0.0;
    if let Some(g) = constant(&gen.g) {
        if zero(&aq.a) && zero(&aq.b) && aq.gamma_q == 0.0 && w2_only {
            return Ok(Some((OracleKind::Orthogonal, oracle_orthogonal(g, ens, &gen.terminal, basis)?)));
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Fraction of grid nodes with `Y_A ≥ Y_B - tol_mc`.
    pub ordered_fraction: f64,
    pub min_gap: f64,
    pub max_gap: f64,
    pub tol_mc: f64,
    pub y0_a: f64,
    pub y0_b: f64,
    pub verdict: Verdict,
}

/// Number of random points used by the dominance and Lipschitz screens.
pub const SCREEN_SAMPLES: usize = 10_000;
/// Largest admissible difference quotient in the Lipschitz screen.
pub const LIPSCHITZ_CAP: f64 = 1e6;
const SCREEN_SEED: u64 = 0x5eed_c0de;

fn screen_box(a: &GeneratorSpec, b: &GeneratorSpec) -> f64 {
    1.0 + a.terminal.sup_norm().max(b.terminal.sup_norm())
}

/// Checks `f_A ≥ f_B`, `g_A ≥ g_B` and `σ_A = σ_B` on random points of a box
/// and `ξ_A ≥ ξ_B` on every path.
pub fn check_dominance(a: &GeneratorSpec, b: &GeneratorSpec, ens: &PathEnsemble) -> Result<()> {
    let horizon = ens.grid.horizon;
    let half = screen_box(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(SCREEN_SEED);
    for _ in 0..SCREEN_SAMPLES {
        let t = rng.gen_range(0.0..=horizon);
        let y = rng.gen_range(-half..=half);
        let v = rng.gen_range(-half..=half);
        let (fa, fb) = (a.f(t, y, v), b.f(t, y, v));
        if fa < fb {
            return Err(Error::DominanceViolated(format!(
                "f_A < f_B at t={t:.4}, y={y:.4}, v={v:.4} ({fa:e} < {fb:e})"
            )));
        }
        if a.g_at(t) < b.g_at(t) {
            return Err(Error::DominanceViolated(format!("g_A < g_B at t={t:.4}")));
        }
        if a.sigma_at(t) != b.sigma_at(t) {
            return Err(Error::DominanceViolated(format!("sigma differs at t={t:.4}")));
        }
    }
    let (xa, xb) = (terminal_values(ens, &a.terminal), terminal_values(ens, &b.terminal));
    if let Some(p) = xa.iter().zip(&xb).position(|(u, v)| u < v) {
        return Err(Error::DominanceViolated(format!("xi_A < xi_B on path {p}")));
    }
    Ok(())
}

/// Sampled difference quotients of `f` in `(y, v)` must stay below
/// [`LIPSCHITZ_CAP`] on the screening box.
pub fn lipschitz_screen(gen: &GeneratorSpec, horizon: f64, half: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(SCREEN_SEED ^ 1);
    for _ in 0..SCREEN_SAMPLES {
        let t = rng.gen_range(0.0..=horizon);
        let (y1, v1) = (rng.gen_range(-half..=half), rng.gen_range(-half..=half));
        let (y2, v2) = (rng.gen_range(-half..=half), rng.gen_range(-half..=half));
        let dist = (y1 - y2).abs() + (v1 - v2).abs();
        if dist == 0.0 {
            continue;
        }
        let q = (gen.f(t, y1, v1) - gen.f(t, y2, v2)).abs() / dist;
        if q.is_nan() || q > LIPSCHITZ_CAP {
            return Err(Error::InvalidGenerator(format!(
                "difference quotient {q:e} at t={t:.4} exceeds {LIPSCHITZ_CAP:e}"
            )));
        }
    }
    Ok(())
}

/// Gap statistics of two solutions on a common ensemble.
pub fn compare_solutions(a: &SolutionTriple, b: &SolutionTriple) -> ComparisonReport {
    let se2 = a.slice_se.iter().zip(&b.slice_se).map(|(x, y)| x * x + y * y).fold(0.0, f64::max);
    let tol_mc = 3.0 * se2.sqrt();
    let (mut lo, mut hi, mut ordered, mut total) = (f64::INFINITY, f64::NEG_INFINITY, 0usize, 0usize);
    for (ya, yb) in a.y.as_slice().iter().zip(b.y.as_slice()) {
        let gap = ya - yb;
        lo = lo.min(gap);
        hi = hi.max(gap);
        ordered += usize::from(gap >= -tol_mc);
        total += 1;
    }
    ComparisonReport {
        ordered_fraction: ordered as f64 / total as f64,
        min_gap: lo,
        max_gap: hi,
        tol_mc,
        y0_a: a.y0(),
        y0_b: b.y0(),
        verdict: if lo >= -tol_mc { Verdict::Pass } else { Verdict::Fail },
    }
}

/// Solves both generators on one ensemble and checks `Y_A ≥ Y_B` up to
/// Monte Carlo tolerance.
pub fn check_comparison(
    a: &GeneratorSpec,
    b: &GeneratorSpec,
    grid: &GridSpec,
    opts: &SolveOptions,
) -> Result<ComparisonReport> {
    let ens = generate(grid)?;
    check_comparison_on(a, b, &ens, opts).map(|(r, _, _)| r)
}

/// As [`check_comparison`] on a given ensemble; also returns both solutions.
pub fn check_comparison_on(
    a: &GeneratorSpec,
    b: &GeneratorSpec,
    ens: &PathEnsemble,
    opts: &SolveOptions,
) -> Result<(ComparisonReport, ChainSolution, ChainSolution)> {
    let horizon = ens.grid.horizon;
    let side = |s: &'static str| move |e: Error| Error::Side { side: s, source: Box::new(e) };
    a.validate(horizon).map_err(side("A"))?;
    b.validate(horizon).map_err(side("B"))?;
    check_dominance(a, b, ens)?;
    let half = screen_box(a, b);
    lipschitz_screen(a, horizon, half).map_err(side("A"))?;
    lipschitz_screen(b, horizon, half).map_err(side("B"))?;
    let mut opts_b = opts.clone();
    // Both sides must project onto the same basis.
    if opts.basis_inputs.is_none() {
        let inputs = opts.basis_for(&a.terminal).inputs;
        if inputs != opts.basis_for(&b.terminal).inputs {
            opts_b.basis_inputs = Some(crate::regress::BasisInputs::Both);
        } else {
            opts_b.basis_inputs = Some(inputs);
        }
    }
    let (ra, rb) = rayon::join(|| solve_chain(a, ens, &opts_b), || solve_chain(b, ens, &opts_b));
    let sa = ra.map_err(side("A"))?;
    let sb = rb.map_err(side("B"))?;
    Ok((compare_solutions(&sa.triple, &sb.triple), sa, sb))
}

/// Constants entering the a priori BMO estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmoBoundInputs {
    /// Bound on `|Y|`.
    pub c: f64,
    /// Quadratic growth constant of `f` in `z`.
    pub c_f: f64,
    /// Bound on `|g|`.
    pub c_g: f64,
    /// Growth function of `f` in `y`, evaluated at `c`.
    pub lambda_of_c: f64,
    /// Norm of the process `k`.
    pub k_norm: f64,
}

/// `e^{8 C C̄} (4 C̄ λ(C) ‖k‖ + 1) / (4 C̄²)` with `C̄ = max(C_f, C_g)`.
pub fn bmo_certificate(inputs: &BmoBoundInputs) -> Result<f64> {
    let cbar = inputs.c_f.max(inputs.c_g);
    if cbar.is_nan() || cbar <= 0.0 {
        return Err(Error::DegenerateBounds("quadratic growth constants are zero".into()));
    }
    let BmoBoundInputs { c, lambda_of_c, k_norm, .. } = *inputs;
    Ok((8.0 * c * cbar).exp() * (4.0 * cbar * lambda_of_c * k_norm + 1.0) / (4.0 * cbar * cbar))
}

/// Analytic constants for `gen` with `k ≡ 1`, so `‖k‖ = √T`.
///
/// `|f(t, y, v)| ≤ λ(|y|) + C_f v²` with `C_f = |γ_q|/2 + 1/2·[c ≠ 0]` and
/// `λ(C) = sup|a| + sup|b| C + |μ| sup_{|y|≤C}|φ| + sup c²/2`.
/// `C` is the larger of `‖ξ‖∞ + ∫ sup|f(t,0,0)| dt` and `y_sup`.
pub fn bmo_inputs(gen: &GeneratorSpec, horizon: f64, y_sup: f64) -> BmoBoundInputs {
    let aq = gen.family();
    let n = 1000;
    let f00: f64 =
        (0..n).map(|k| gen.f((k as f64 + 0.5) * horizon / n as f64, 0.0, 0.0).abs()).sum::<f64>() * horizon / n as f64;
    let c = (gen.terminal.sup_norm() + f00).max(y_sup);
    let c_sup = aq.c.sup_abs(horizon);
    let c_f = 0.5 * aq.gamma_q.abs() + if c_sup > 0.0 { 0.5 } else { 0.0 };
    let phi = aq.nonlinearity.as_ref().map_or(0.0, |nl| nl.mu.abs() * nl.phi_sup_on(c));
    let lambda_of_c = aq.a.sup_abs(horizon) + aq.b.sup_abs(horizon) * c + phi + 0.5 * c_sup * c_sup;
    BmoBoundInputs { c, c_f, c_g: gen.g.sup_abs(horizon), lambda_of_c, k_norm: horizon.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmoCheck {
    pub inputs: BmoBoundInputs,
    /// `None` when both growth constants vanish and the estimate does not apply.
    pub bound: Option<f64>,
    /// Squared estimated BMO norm of `Z·W¹ + N`.
    pub estimate: f64,
    pub pass: bool,
}

pub fn bmo_check(gen: &GeneratorSpec, horizon: f64, sol: &SolutionTriple) -> Result<BmoCheck> {
    let inputs = bmo_inputs(gen, horizon, sol.norms.y_sup);
    let estimate = sol.norms.zm_n_bmo * sol.norms.zm_n_bmo;
    let bound = match bmo_certificate(&inputs) {
        Ok(b) => Some(b),
        Err(Error::DegenerateBounds(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(BmoCheck { inputs, bound, estimate, pass: bound.is_none_or(|b| estimate <= b) })
}
