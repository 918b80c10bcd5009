//! Problem definition: grid, generator families, terminal conditions and
//! the coefficient bounds that drive the smallness and contraction
//! constants of the Picard scheme.
//!
//! The equation solved throughout the crate is
//!
//! ```text
//! dY_t = -f(t, Y_t, σ_t Z_t) dt - g_t d<N>_t + Z_t σ_t dW¹_t + dN_t,   Y_T = ξ,
//! ```
//!
//! with `N = ∫ ζ dW²` orthogonal to `W¹`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Composite Simpson intervals used for time integrals of bounds.
const QUADRATURE_INTERVALS: usize = 4096;

/// Uniform time grid and ensemble size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl GridSpec {
    pub fn new(horizon: f64, n_steps: usize, n_paths: usize, seed: u64) -> Result<Self> {
        let grid = Self { horizon, n_steps, n_paths, seed };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon T must be positive, got {}", self.horizon)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        if self.n_paths < 2 {
            return Err(Error::InvalidGrid("n_paths must be at least 2".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// `t_i = i T / n_steps`, with the last node pinned to `T`.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }
}

/// Bounded deterministic coefficient function of time.
///
/// In configuration files a bare number is a constant; tables select the
/// affine or sinusoidal forms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeFn {
    Constant(f64),
    Affine(AffineFn),
    Sine(SineFn),
}

/// `intercept + slope * t`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineFn {
    pub intercept: f64,
    pub slope: f64,
}

/// `offset + amplitude * sin(frequency * t)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineFn {
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Default for TimeFn {
    fn default() -> Self {
        TimeFn::Constant(0.0)
    }
}

impl TimeFn {
    pub fn affine(intercept: f64, slope: f64) -> Self {
        TimeFn::Affine(AffineFn { intercept, slope })
    }

    pub fn sine(offset: f64, amplitude: f64, frequency: f64) -> Self {
        TimeFn::Sine(SineFn { offset, amplitude, frequency })
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFn::Constant(v) => *v,
            TimeFn::Affine(a) => a.intercept + a.slope * t,
            TimeFn::Sine(s) => s.offset + s.amplitude * (s.frequency * t).sin(),
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            TimeFn::Constant(v) => vec![*v],
            TimeFn::Affine(a) => vec![a.intercept, a.slope],
            TimeFn::Sine(s) => vec![s.offset, s.amplitude, s.frequency],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TimeFn::Constant(v) => *v == 0.0,
            TimeFn::Affine(a) => a.intercept == 0.0 && a.slope == 0.0,
            TimeFn::Sine(s) => s.offset == 0.0 && s.amplitude == 0.0,
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            TimeFn::Constant(v) => Some(*v),
            TimeFn::Affine(a) if a.slope == 0.0 => Some(a.intercept),
            TimeFn::Sine(s) if s.amplitude == 0.0 || s.frequency == 0.0 => Some(s.offset),
            _ => None,
        }
    }

    /// Upper bound on `|f(t)|` over `[0, horizon]`.
    pub fn sup_abs(&self, horizon: f64) -> f64 {
        match self {
            TimeFn::Constant(v) => v.abs(),
            TimeFn::Affine(a) => a.intercept.abs().max((a.intercept + a.slope * horizon).abs()),
            TimeFn::Sine(s) => s.offset.abs() + s.amplitude.abs(),
        }
    }

    /// Lower bound on `|f(t)|` over `[0, horizon]`.
    pub fn inf_abs(&self, horizon: f64) -> f64 {
        match self {
            TimeFn::Constant(v) => v.abs(),
            TimeFn::Affine(a) => {
                let (v0, v1) = (a.intercept, a.intercept + a.slope * horizon);
                if v0 * v1 <= 0.0 {
                    0.0
                } else {
                    v0.abs().min(v1.abs())
                }
            }
            TimeFn::Sine(s) => (s.offset.abs() - s.amplitude.abs()).max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearKind {
    Tanh,
    Sin,
}

/// Bounded smooth y-nonlinearity `mu * phi(y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nonlinearity {
    pub kind: NonlinearKind,
    pub mu: f64,
}

impl Nonlinearity {
    #[inline]
    fn phi(&self, y: f64) -> f64 {
        match self.kind {
            NonlinearKind::Tanh => y.tanh(),
            NonlinearKind::Sin => y.sin(),
        }
    }

    #[inline]
    fn dphi(&self, y: f64) -> f64 {
        match self.kind {
            NonlinearKind::Tanh => {
                let th = y.tanh();
                1.0 - th * th
            }
            NonlinearKind::Sin => y.cos(),
        }
    }

    #[inline]
    fn d2phi(&self, y: f64) -> f64 {
        match self.kind {
            NonlinearKind::Tanh => {
                let th = y.tanh();
                -2.0 * th * (1.0 - th * th)
            }
            NonlinearKind::Sin => -y.sin(),
        }
    }

    /// `sup |phi''|`: `4 / (3 sqrt 3)` for tanh, 1 for sin.
    fn d2phi_sup(&self) -> f64 {
        match self.kind {
            NonlinearKind::Tanh => 4.0 / (3.0 * 3.0_f64.sqrt()),
            NonlinearKind::Sin => 1.0,
        }
    }

    /// `sup_{|y| <= c} |phi(y)|`
    pub fn phi_sup_on(&self, c: f64) -> f64 {
        match self.kind {
            NonlinearKind::Tanh => c.tanh(),
            NonlinearKind::Sin => c.min(std::f64::consts::FRAC_PI_2).sin(),
        }
    }
}

/// `f(t, y, v) = a(t) + b(t) y + c(t) v + (gamma_q / 2) v² + mu phi(y)`,
/// where `v = σ z` is the argument seen by the generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineQuadratic {
    #[serde(default)]
    pub a: TimeFn,
    #[serde(default)]
    pub b: TimeFn,
    #[serde(default)]
    pub c: TimeFn,
    #[serde(default)]
    pub gamma_q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<Nonlinearity>,
}

impl AffineQuadratic {
    #[inline]
    pub fn eval(&self, t: f64, y: f64, v: f64) -> f64 {
        let mut out = self.a.eval(t) + self.b.eval(t) * y + self.c.eval(t) * v + 0.5 * self.gamma_q * v * v;
        if let Some(nl) = &self.nonlinearity {
            out += nl.mu * nl.phi(y);
        }
        out
    }

    #[inline]
    pub fn d_y(&self, t: f64, y: f64, _v: f64) -> f64 {
        let mut out = self.b.eval(t);
        if let Some(nl) = &self.nonlinearity {
            out += nl.mu * nl.dphi(y);
        }
        out
    }

    #[inline]
    pub fn d_v(&self, t: f64, _y: f64, v: f64) -> f64 {
        self.c.eval(t) + self.gamma_q * v
    }

    pub fn d_yy(&self, _t: f64, y: f64, _v: f64) -> f64 {
        self.nonlinearity.as_ref().map_or(0.0, |nl| nl.mu * nl.d2phi(y))
    }

    pub fn d_yv(&self, _t: f64, _y: f64, _v: f64) -> f64 {
        0.0
    }

    pub fn d_vv(&self, _t: f64, _y: f64, _v: f64) -> f64 {
        self.gamma_q
    }
}

/// Closed set of generator families with analytic bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DriverFamily {
    AffineQuadratic(AffineQuadratic),
}

impl Default for DriverFamily {
    fn default() -> Self {
        DriverFamily::AffineQuadratic(AffineQuadratic::default())
    }
}

impl DriverFamily {
    fn inner(&self) -> &AffineQuadratic {
        match self {
            DriverFamily::AffineQuadratic(aq) => aq,
        }
    }

    fn inner_mut(&mut self) -> &mut AffineQuadratic {
        match self {
            DriverFamily::AffineQuadratic(aq) => aq,
        }
    }
}

/// Shape of the terminal functional, evaluated at `u = load_w1 W¹_T + load_w2 W²_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalShape {
    /// `h ≡ 1`
    Constant,
    Tanh {
        load_w1: f64,
        load_w2: f64,
    },
    Sin {
        load_w1: f64,
        load_w2: f64,
    },
    /// `clip(Σ coeffs[k] u^k, -clip, clip)`
    ClippedPolynomial {
        load_w1: f64,
        load_w2: f64,
        coeffs: Vec<f64>,
        clip: f64,
    },
}

/// `ξ = offset + scale * shape(W¹_T, W²_T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalCondition {
    pub shape: TerminalShape,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
}

fn one() -> f64 {
    1.0
}

impl TerminalCondition {
    pub fn constant(c: f64) -> Self {
        Self { shape: TerminalShape::Constant, scale: c, offset: 0.0 }
    }

    pub fn tanh_w1(scale: f64) -> Self {
        Self { shape: TerminalShape::Tanh { load_w1: 1.0, load_w2: 0.0 }, scale, offset: 0.0 }
    }

    pub fn tanh_w2(scale: f64) -> Self {
        Self { shape: TerminalShape::Tanh { load_w1: 0.0, load_w2: 1.0 }, scale, offset: 0.0 }
    }

    pub fn sin_w1(scale: f64) -> Self {
        Self { shape: TerminalShape::Sin { load_w1: 1.0, load_w2: 0.0 }, scale, offset: 0.0 }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    /// Loads on (W¹, W²).
    pub fn loads(&self) -> (f64, f64) {
        match &self.shape {
            TerminalShape::Constant => (0.0, 0.0),
            TerminalShape::Tanh { load_w1, load_w2 }
            | TerminalShape::Sin { load_w1, load_w2 }
            | TerminalShape::ClippedPolynomial { load_w1, load_w2, .. } => (*load_w1, *load_w2),
        }
    }

    fn shape_value(&self, w1: f64, w2: f64) -> f64 {
        let (l1, l2) = self.loads();
        let u = l1 * w1 + l2 * w2;
        match &self.shape {
            TerminalShape::Constant => 1.0,
            TerminalShape::Tanh { .. } => u.tanh(),
            TerminalShape::Sin { .. } => u.sin(),
            TerminalShape::ClippedPolynomial { coeffs, clip, .. } => {
                let p = coeffs.iter().rev().fold(0.0, |acc, &c| acc * u + c);
                p.clamp(-clip.abs(), clip.abs())
            }
        }
    }

    fn shape_sup(&self) -> f64 {
        match &self.shape {
            TerminalShape::Constant | TerminalShape::Tanh { .. } | TerminalShape::Sin { .. } => 1.0,
            TerminalShape::ClippedPolynomial { clip, .. } => clip.abs(),
        }
    }

    #[inline]
    pub fn eval(&self, w1: f64, w2: f64) -> f64 {
        self.offset + self.scale * self.shape_value(w1, w2)
    }

    /// Analytic bound `‖ξ‖∞`.
    pub fn sup_norm(&self) -> f64 {
        match self.shape {
            TerminalShape::Constant => (self.offset + self.scale).abs(),
            _ => self.offset.abs() + self.scale.abs() * self.shape_sup(),
        }
    }

    /// `ξ / m` as a terminal condition of the same family.
    pub fn divided(&self, m: usize) -> Self {
        let m = m as f64;
        Self { shape: self.shape.clone(), scale: self.scale / m, offset: self.offset / m }
    }

    pub fn is_finite(&self) -> bool {
        let shape_ok = match &self.shape {
            TerminalShape::Constant => true,
            TerminalShape::Tanh { load_w1, load_w2 } | TerminalShape::Sin { load_w1, load_w2 } => {
                load_w1.is_finite() && load_w2.is_finite()
            }
            TerminalShape::ClippedPolynomial { load_w1, load_w2, coeffs, clip } => {
                load_w1.is_finite() && load_w2.is_finite() && clip.is_finite() && coeffs.iter().all(|c| c.is_finite())
            }
        };
        shape_ok && self.scale.is_finite() && self.offset.is_finite()
    }
}

/// The generator data `(f, g, σ, ξ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub driver: DriverFamily,
    pub g: TimeFn,
    pub sigma: TimeFn,
    pub terminal: TerminalCondition,
}

impl GeneratorSpec {
    pub fn new(driver: AffineQuadratic, terminal: TerminalCondition) -> Self {
        Self {
            driver: DriverFamily::AffineQuadratic(driver),
            g: TimeFn::Constant(0.0),
            sigma: TimeFn::Constant(1.0),
            terminal,
        }
    }

    /// `f = (gamma_q / 2) v²`
    pub fn pure_quadratic(gamma_q: f64, terminal: TerminalCondition) -> Self {
        Self::new(AffineQuadratic { gamma_q, ..Default::default() }, terminal)
    }

    /// `f = b y + a`
    pub fn linear(b: f64, a: f64, terminal: TerminalCondition) -> Self {
        Self::new(AffineQuadratic { a: TimeFn::Constant(a), b: TimeFn::Constant(b), ..Default::default() }, terminal)
    }

    pub fn with_g(mut self, g: TimeFn) -> Self {
        self.g = g;
        self
    }

    pub fn with_sigma(mut self, sigma: TimeFn) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn family(&self) -> &AffineQuadratic {
        self.driver.inner()
    }

    pub fn family_mut(&mut self) -> &mut AffineQuadratic {
        self.driver.inner_mut()
    }

    #[inline]
    pub fn f(&self, t: f64, y: f64, v: f64) -> f64 {
        self.driver.inner().eval(t, y, v)
    }

    #[inline]
    pub fn f_y(&self, t: f64, y: f64, v: f64) -> f64 {
        self.driver.inner().d_y(t, y, v)
    }

    #[inline]
    pub fn f_v(&self, t: f64, y: f64, v: f64) -> f64 {
        self.driver.inner().d_v(t, y, v)
    }

    pub fn f_yy(&self, t: f64, y: f64, v: f64) -> f64 {
        self.driver.inner().d_yy(t, y, v)
    }

    pub fn f_yv(&self, t: f64, y: f64, v: f64) -> f64 {
        self.driver.inner().d_yv(t, y, v)
    }

    pub fn f_vv(&self, t: f64, y: f64, v: f64) -> f64 {
        self.driver.inner().d_vv(t, y, v)
    }

    #[inline]
    pub fn g_at(&self, t: f64) -> f64 {
        self.g.eval(t)
    }

    #[inline]
    pub fn sigma_at(&self, t: f64) -> f64 {
        self.sigma.eval(t)
    }

    /// True when `f(t,0,0) = 0`, `f_y(t,0,0) = 0` and `f_v(t,0,0) = 0`
    /// at every grid time.
    pub fn is_centered(&self, grid: &GridSpec) -> bool {
        grid.times()
            .into_iter()
            .all(|t| self.f(t, 0.0, 0.0) == 0.0 && self.f_y(t, 0.0, 0.0) == 0.0 && self.f_v(t, 0.0, 0.0) == 0.0)
    }

    /// `sup_{t, |y| <= c} |f(t, y, 0)|` (closed form for the family).
    pub fn sup_abs_f_y_only(&self, c: f64, horizon: f64) -> f64 {
        let aq = self.driver.inner();
        let mut s = aq.a.sup_abs(horizon) + aq.b.sup_abs(horizon) * c;
        if let Some(nl) = &aq.nonlinearity {
            s += nl.mu.abs() * nl.phi_sup_on(c);
        }
        s
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        let aq = self.driver.inner();
        let finite = aq.a.is_finite()
            && aq.b.is_finite()
            && aq.c.is_finite()
            && aq.gamma_q.is_finite()
            && aq.nonlinearity.as_ref().is_none_or(|nl| nl.mu.is_finite())
            && self.g.is_finite()
            && self.sigma.is_finite();
        if !finite {
            return Err(Error::UnboundedGenerator("non-finite coefficient".into()));
        }
        if !self.terminal.is_finite() {
            return Err(Error::UnboundedGenerator("non-finite terminal parameter".into()));
        }
        if self.sigma.inf_abs(horizon) <= 0.0 {
            return Err(Error::InvalidGenerator("sigma must be bounded away from zero".into()));
        }
        Ok(())
    }
}

pub type TimeFunction = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Growth constants `θ`, `r(t)`, `β` and the linearization `(α, γ)`.
#[derive(Clone)]
pub struct CoefficientBounds {
    pub theta: f64,
    pub r_fn: TimeFunction,
    /// `∫₀ᵀ r² dt`
    pub r2_int_inf: f64,
    /// `∫₀ᵀ r dt`
    pub r_int_inf: f64,
    pub beta: f64,
    pub alpha_fn: TimeFunction,
    pub gamma_fn: TimeFunction,
}

impl fmt::Debug for CoefficientBounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientBounds")
            .field("theta", &self.theta)
            .field("r2_int_inf", &self.r2_int_inf)
            .field("r_int_inf", &self.r_int_inf)
            .field("beta", &self.beta)
            .finish_non_exhaustive()
    }
}

impl CoefficientBounds {
    /// Builds bounds from `θ` and `r`, computing the integrals and `β`.
    pub fn from_parts(
        theta: f64,
        r_fn: TimeFunction,
        horizon: f64,
        alpha_fn: TimeFunction,
        gamma_fn: TimeFunction,
    ) -> Self {
        let r2_int_inf = simpson(|t| r_fn(t).powi(2), horizon);
        let r_int_inf = simpson(|t| r_fn(t), horizon);
        Self { theta, r_fn, r2_int_inf, r_int_inf, beta: beta_of(r2_int_inf, theta), alpha_fn, gamma_fn }
    }

    /// Replaces the default linearization coefficients.
    pub fn with_linearization(mut self, alpha_fn: TimeFunction, gamma_fn: TimeFunction) -> Self {
        self.alpha_fn = alpha_fn;
        self.gamma_fn = gamma_fn;
        self
    }

    /// Bounds after the exponential transform: `r e^{‖∫r‖}` and `θ e^{‖∫r‖}`.
    pub fn transformed(&self, horizon: f64) -> Self {
        let factor = self.r_int_inf.exp();
        let r = self.r_fn.clone();
        let zero: TimeFunction = Arc::new(|_| 0.0);
        Self::from_parts(self.theta * factor, Arc::new(move |t| r(t) * factor), horizon, zero.clone(), zero)
    }
}

/// `β = 8 max(‖∫r²‖∞, θ²)`
pub fn beta_of(r2_int_inf: f64, theta: f64) -> f64 {
    8.0 * r2_int_inf.max(theta * theta)
}

fn simpson(f: impl Fn(f64) -> f64, horizon: f64) -> f64 {
    let n = QUADRATURE_INTERVALS;
    let h = horizon / n as f64;
    let mut acc = f(0.0) + f(horizon);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(k as f64 * h);
    }
    acc * h / 3.0
}

/// Analytic Condition-A/B bounds for the supported families.
///
/// `θ = sqrt(max(|gamma_q|, sup|g|))`; `r(t) = max(|b(t)| + |mu|, sqrt(|mu| sup|phi''|))`
/// dominates `|f_y|`, `sqrt|f_yy|`, and `|f_yv| / θ` (which is zero here).
pub fn derive_bounds(gen: &GeneratorSpec, horizon: f64) -> Result<CoefficientBounds> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidGrid(format!("horizon T must be positive, got {horizon}")));
    }
    gen.validate(horizon)?;
    let aq = gen.family().clone();
    let theta = aq.gamma_q.abs().max(gen.g.sup_abs(horizon)).sqrt();
    if !theta.is_finite() {
        return Err(Error::UnboundedGenerator("theta is infinite".into()));
    }
    let (mu_abs, curv) = aq.nonlinearity.as_ref().map_or((0.0, 0.0), |nl| (nl.mu.abs(), nl.d2phi_sup()));
    let b = aq.b.clone();
    let r_fn: TimeFunction = Arc::new(move |t| (b.eval(t).abs() + mu_abs).max((mu_abs * curv).sqrt()));
    let (ga, gg) = (gen.clone(), gen.clone());
    let alpha_fn: TimeFunction = Arc::new(move |t| ga.f_y(t, 0.0, 0.0));
    let gamma_fn: TimeFunction = Arc::new(move |t| gg.f_v(t, 0.0, 0.0));
    let bounds = CoefficientBounds::from_parts(theta, r_fn, horizon, alpha_fn, gamma_fn);
    if !(bounds.r2_int_inf.is_finite() && bounds.r_int_inf.is_finite()) {
        return Err(Error::UnboundedGenerator("r is not integrable".into()));
    }
    Ok(bounds)
}

/// `(1 / (32 β)) exp(-2 ‖∫r‖∞)`.
pub fn smallness_threshold(bounds: &CoefficientBounds) -> Result<f64> {
    if bounds.beta <= 0.0 {
        return Err(Error::DegenerateBounds("beta is zero; the generator is globally Lipschitz".into()));
    }
    Ok((-2.0 * bounds.r_int_inf).exp() / (32.0 * bounds.beta))
}

/// Smallness threshold with `β = 0` mapped to an unrestricted sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Finite(f64),
    Unrestricted,
}

impl Threshold {
    pub fn admits(&self, xi_sup: f64) -> bool {
        match self {
            Threshold::Finite(t) => xi_sup <= *t,
            Threshold::Unrestricted => true,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Threshold::Finite(t) => *t,
            Threshold::Unrestricted => f64::INFINITY,
        }
    }
}

pub fn threshold_of(bounds: &CoefficientBounds) -> Threshold {
    match smallness_threshold(bounds) {
        Ok(t) => Threshold::Finite(t),
        Err(_) => Threshold::Unrestricted,
    }
}

/// `R = 2 sqrt(2) ‖ξ‖∞`.
pub fn ball_radius(xi_sup: f64) -> f64 {
    2.0 * std::f64::consts::SQRT_2 * xi_sup
}

/// Checks `4 ‖ξ‖² + β² R⁴ <= R²` for `R = ball_radius(xi_sup)`.
pub fn ball_inequality_holds(xi_sup: f64, beta: f64) -> bool {
    let r = ball_radius(xi_sup);
    4.0 * xi_sup * xi_sup + beta * beta * r.powi(4) <= r * r * (1.0 + 1e-12)
}

/// `128 β² R²`, the contraction factor bound on the ball.
pub fn contraction_bound(beta: f64, radius: f64) -> f64 {
    128.0 * beta * beta * radius * radius
}
