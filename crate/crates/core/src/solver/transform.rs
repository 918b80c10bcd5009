//! Exponential change of variables `ȳ = e^{∫α} y` combined with a Girsanov
//! change removing the linear `z` and `ζ` parts of a driver.

use crate::error::Result;
use crate::field::Field;
use crate::model::GeneratorSpec;
use crate::paths::{girsanov_weights, Driver, GirsanovWeights, PathEnsemble, WeightOptions};

use super::{Fields, Form, Problem, SolutionTriple, SpecProblem};

/// Linear coefficients to remove: `α` on `y`, `γ` on `σz` (a drift on W¹)
/// and `λ` on `ζ` (a drift on W²). Absent fields are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub alpha: Option<Field>,
    pub gamma: Option<Field>,
    pub lambda2: Option<Field>,
    /// `e^{Σ_{k<i} α_k Δt}` on `n_steps + 1` slices; `None` means one.
    pub exp_factor: Option<Field>,
}

fn nonzero(f: Field) -> Option<Field> {
    f.as_slice().iter().any(|v| *v != 0.0).then_some(f)
}

impl TransformParams {
    pub fn identity() -> Self {
        Self { alpha: None, gamma: None, lambda2: None, exp_factor: None }
    }

    /// Fields hold at least `n_steps` slices; slice `i` must be `F_i`-measurable.
    pub fn new(alpha: Field, gamma: Field, lambda2: Field, n_steps: usize, dt: f64) -> Self {
        let alpha = nonzero(alpha);
        let exp_factor = alpha.as_ref().map(|a| {
            let m = a.n_paths();
            let mut e = Field::zeros(n_steps + 1, m);
            let mut acc = vec![0.0; m];
            e.slice_mut(0).fill(1.0);
            for i in 0..n_steps {
                for (p, s) in acc.iter_mut().enumerate() {
                    *s += a.get(i, p) * dt;
                }
                for (v, s) in e.slice_mut(i + 1).iter_mut().zip(&acc) {
                    *v = s.exp();
                }
            }
            e
        });
        Self { alpha, gamma: nonzero(gamma), lambda2: nonzero(lambda2), exp_factor }
    }

    pub fn constant(alpha: f64, gamma: f64, ens: &PathEnsemble) -> Self {
        let (n, m) = (ens.n_steps(), ens.n_paths());
        Self::new(Field::constant(n, m, alpha), Field::constant(n, m, gamma), Field::zeros(n, m), n, ens.dt())
    }

    /// Linearization of `gen` at the origin: `α = f_y(t, 0, 0)`, `γ = f_v(t, 0, 0)`.
    pub fn from_generator(gen: &GeneratorSpec, ens: &PathEnsemble) -> Self {
        let (n, m) = (ens.n_steps(), ens.n_paths());
        let t = ens.grid.times();
        let alpha = Field::from_fn(n, m, |i, _| gen.f_y(t[i], 0.0, 0.0));
        let gamma = Field::from_fn(n, m, |i, _| gen.f_v(t[i], 0.0, 0.0));
        Self::new(alpha, gamma, Field::zeros(n, m), n, ens.dt())
    }

    pub fn is_identity(&self) -> bool {
        self.alpha.is_none() && self.gamma.is_none() && self.lambda2.is_none()
    }

    #[inline]
    pub fn factor(&self, slice: usize, path: usize) -> f64 {
        self.exp_factor.as_ref().map_or(1.0, |e| e.get(slice, path))
    }

    #[inline]
    fn coef(f: &Option<Field>, slice: usize, path: usize) -> f64 {
        f.as_ref().map_or(0.0, |f| f.get(slice, path))
    }

    /// Likelihood weights realizing the drifts, or `None` without drift.
    pub fn weights(&self, ens: &PathEnsemble, opts: &WeightOptions) -> Result<Option<GirsanovWeights>> {
        let w1 = self.gamma.as_ref().map(|g| girsanov_weights(ens, g, Driver::W1, opts)).transpose()?;
        let w2 = self.lambda2.as_ref().map(|l| girsanov_weights(ens, l, Driver::W2, opts)).transpose()?;
        Ok(match (w1, w2) {
            (Some(a), Some(b)) => Some(a.combine(&b, opts)?),
            (a, b) => a.or(b),
        })
    }
}

/// A problem in transformed variables `(ȳ, z̄, ζ̄) = E (y, z, ζ)` under the
/// measure with drifts `(γ, λ)`.
pub struct Transformed<P> {
    base: P,
    params: TransformParams,
    terminal: Vec<f64>,
    weights: Option<GirsanovWeights>,
}

impl<P: Problem> Transformed<P> {
    /// `base` must be posed under the reference measure.
    pub fn new(base: P, params: TransformParams, ens: &PathEnsemble, opts: &WeightOptions) -> Result<Self> {
        assert!(base.measure().is_none(), "base problem already carries a measure change");
        let n = ens.n_steps();
        let terminal = base.terminal().iter().enumerate().map(|(p, x)| params.factor(n, p) * x).collect();
        let weights = params.weights(ens, opts)?;
        Ok(Self { base, params, terminal, weights })
    }

    pub fn base(&self) -> &P {
        &self.base
    }

    pub fn params(&self) -> &TransformParams {
        &self.params
    }

    pub fn weights(&self) -> Option<&GirsanovWeights> {
        self.weights.as_ref()
    }
}

impl<P: Problem> Problem for Transformed<P> {
    #[inline]
    fn driver(&self, slice: usize, path: usize, y: f64, z: f64, zeta: f64) -> f64 {
        let e = self.params.factor(slice, path);
        let (y, z, zeta) = (y / e, z / e, zeta / e);
        let a = TransformParams::coef(&self.params.alpha, slice, path);
        let g = TransformParams::coef(&self.params.gamma, slice, path);
        let l = TransformParams::coef(&self.params.lambda2, slice, path);
        let s = self.base.sigma()[slice];
        e * (self.base.driver(slice, path, y, z, zeta) - a * y - g * s * z - l * zeta)
    }

    fn driver_slice(&self, slice: usize, start: usize, y: &[f64], z: &[f64], zeta: &[f64], out: &mut [f64]) {
        let r = start..start + out.len();
        fn part<'a>(f: &'a Option<Field>, slice: usize, r: &std::ops::Range<usize>) -> Option<&'a [f64]> {
            f.as_ref().map(|f| &f.slice(slice)[r.clone()])
        }
        let (e, a, g, l) = (
            part(&self.params.exp_factor, slice, &r),
            part(&self.params.alpha, slice, &r),
            part(&self.params.gamma, slice, &r),
            part(&self.params.lambda2, slice, &r),
        );
        let s = self.base.sigma()[slice];
        let scaled = |v: &[f64]| -> Vec<f64> {
            match e {
                Some(e) => v.iter().zip(e).map(|(v, e)| v / e).collect(),
                None => v.to_vec(),
            }
        };
        let (y, z, zeta) = (scaled(y), scaled(z), scaled(zeta));
        self.base.driver_slice(slice, start, &y, &z, &zeta, out);
        if let Some(a) = a {
            for ((o, a), y) in out.iter_mut().zip(a).zip(&y) {
                *o -= a * y;
            }
        }
        if let Some(g) = g {
            for ((o, g), z) in out.iter_mut().zip(g).zip(&z) {
                *o -= g * s * z;
            }
        }
        if let Some(l) = l {
            for ((o, l), q) in out.iter_mut().zip(l).zip(&zeta) {
                *o -= l * q;
            }
        }
        if let Some(e) = e {
            for (o, e) in out.iter_mut().zip(e) {
                *o *= e;
            }
        }
    }

    fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    fn sigma(&self) -> &[f64] {
        self.base.sigma()
    }

    fn measure(&self) -> Option<&GirsanovWeights> {
        self.weights.as_ref()
    }
}

/// Transforms `gen` (centered form) with `params`.
pub fn transform_generator(
    gen: &GeneratorSpec,
    params: TransformParams,
    ens: &PathEnsemble,
    opts: &WeightOptions,
) -> Result<Transformed<SpecProblem>> {
    gen.validate(ens.grid.horizon)?;
    Transformed::new(SpecProblem::new(gen, ens, Form::Centered), params, ens, opts)
}

/// Divides every field by the exponential factor. Norms are left as they
/// were computed in transformed variables.
pub fn untransform_solution(sol: SolutionTriple, params: &TransformParams) -> SolutionTriple {
    let Some(e) = params.exp_factor.as_ref() else {
        return sol;
    };
    let div = |f: &Field| Field::from_fn(f.n_times(), f.n_paths(), |i, p| f.get(i, p) / e.get(i, p));
    SolutionTriple { y: div(&sol.y), z: div(&sol.z), zeta: div(&sol.zeta), ..sol }
}

pub(crate) fn untransform_fields(fields: Fields, params: &TransformParams) -> Fields {
    let Some(e) = params.exp_factor.as_ref() else {
        return fields;
    };
    let div = |f: &Field| Field::from_fn(f.n_times(), f.n_paths(), |i, p| f.get(i, p) / e.get(i, p));
    Fields { y: div(&fields.y), z: div(&fields.z), zeta: div(&fields.zeta) }
}
