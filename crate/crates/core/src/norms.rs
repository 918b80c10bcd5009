//! Norm estimates for solution triples.
//!
//! Conditional tail energies `E(Σ_{j≥i} ·² Δt | F_i)` are regressed slice by
//! slice, floored at zero, and maximized over slices and paths.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::Field;
use crate::model::GeneratorSpec;
use crate::paths::PathEnsemble;
use crate::regress::{BasisSpec, Design, Projector, SliceWeights};

/// Quantile used by [`EssSup::Quantile`].
pub const ESS_QUANTILE: f64 = 0.999;

/// Estimator for the essential supremum of `|Y|`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EssSup {
    /// Maximum over all grid nodes and paths. Biased upward by noise.
    #[default]
    Max,
    /// Per-slice 99.9% quantile, maximized over slices. Biased downward.
    Quantile,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub y_sup: f64,
    pub z_h2: f64,
    pub n_bmo: f64,
    pub zm_n_bmo: f64,
    pub triple_sq: f64,
}

impl NormReport {
    pub fn new(y_sup: f64, z_h2: f64, n_bmo: f64, zm_n_bmo: f64) -> Self {
        Self { y_sup, z_h2, n_bmo, zm_n_bmo, triple_sq: y_sup * y_sup + z_h2 * z_h2 + n_bmo * n_bmo }
    }

    pub fn triple_norm(&self) -> f64 {
        self.triple_sq.sqrt()
    }
}

pub fn ess_sup(field: &Field) -> f64 {
    field.max_abs()
}

pub fn ess_sup_quantile(field: &Field, q: f64) -> f64 {
    let n = field.n_paths();
    if n == 0 {
        return 0.0;
    }
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    let mut buf = vec![0.0; n];
    (0..field.n_times())
        .map(|i| {
            for (b, v) in buf.iter_mut().zip(field.slice(i)) {
                *b = v.abs();
            }
            *buf.select_nth_unstable_by(rank, f64::total_cmp).1
        })
        .fold(0.0, f64::max)
}

pub fn ess_sup_with(field: &Field, mode: EssSup) -> f64 {
    match mode {
        EssSup::Max => ess_sup(field),
        EssSup::Quantile => ess_sup_quantile(field, ESS_QUANTILE),
    }
}

/// Square roots of the maximal conditional tail energies of
/// `σ z`, `ζ` and their sum, in that order.
///
/// `z` and `zeta` carry one slice per grid time; the last one is unused.
pub fn tail_norms(proj: &Projector<'_, '_>, sigma: &[f64], dt: f64, z: &Field, zeta: &Field) -> [f64; 3] {
    let n_steps = z.n_times() - 1;
    let n = z.n_paths();
    let mut tails = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut best = [0.0_f64; 3];
    for i in (0..n_steps).rev() {
        let s2 = sigma[i] * sigma[i];
        let (zi, qi) = (z.slice(i), zeta.slice(i));
        for p in 0..n {
            let a = s2 * zi[p] * zi[p] * dt;
            let b = qi[p] * qi[p] * dt;
            tails[0][p] += a;
            tails[1][p] += b;
            tails[2][p] += a + b;
        }
        let fits = proj.fit_many(i, &[&tails[0], &tails[1], &tails[2]]);
        for (m, fit) in best.iter_mut().zip(&fits) {
            *m = fit.fitted.iter().fold(*m, |acc, v| acc.max(*v));
        }
    }
    best.map(|b| b.max(0.0).sqrt())
}

pub fn norm_report(
    y: &Field,
    z: &Field,
    zeta: &Field,
    proj: &Projector<'_, '_>,
    sigma: &[f64],
    dt: f64,
    mode: EssSup,
) -> NormReport {
    let [z_h2, n_bmo, zm] = tail_norms(proj, sigma, dt, z, zeta);
    NormReport::new(ess_sup_with(y, mode), z_h2, n_bmo, zm)
}

fn sigma_grid(ens: &PathEnsemble, gen: Option<&GeneratorSpec>) -> Vec<f64> {
    (0..=ens.n_steps()).map(|i| gen.map_or(1.0, |g| g.sigma_at(ens.grid.time(i)))).collect()
}

/// H²-type norm of `σ z` under the unweighted measure.
pub fn h2_norm(z: &Field, ens: &PathEnsemble, gen: &GeneratorSpec, basis: &BasisSpec) -> Result<f64> {
    let design = Design::new(ens, basis)?;
    let proj = Projector::new(&design, SliceWeights::None, ens.n_steps())?;
    let zero = Field::zeros(z.n_times(), z.n_paths());
    Ok(tail_norms(&proj, &sigma_grid(ens, Some(gen)), ens.dt(), z, &zero)[0])
}

/// BMO norm of the orthogonal part `∫ ζ dW²`.
pub fn bmo_norm(zeta: &Field, ens: &PathEnsemble, basis: &BasisSpec) -> Result<f64> {
    let design = Design::new(ens, basis)?;
    let proj = Projector::new(&design, SliceWeights::None, ens.n_steps())?;
    let zero = Field::zeros(zeta.n_times(), zeta.n_paths());
    Ok(tail_norms(&proj, &sigma_grid(ens, None), ens.dt(), &zero, zeta)[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GridSpec, TerminalCondition, TimeFn};
    use crate::paths::{generate, Driver};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ens(n_steps: usize, n_paths: usize, seed: u64) -> PathEnsemble {
        generate(&GridSpec::new(1.0, n_steps, n_paths, seed).unwrap()).unwrap()
    }

    #[test]
    fn ess_sup_examples() {
        assert_eq!(ess_sup(&Field::constant(3, 4, -0.7)), 0.7);
        let mut f = Field::zeros(3, 4);
        f.set(1, 2, -3.0);
        assert_eq!(ess_sup(&f), 3.0);
        assert_eq!(ess_sup_quantile(&f, 0.999), 3.0);
        assert_eq!(ess_sup_quantile(&f, 0.5), 0.0);
    }

    #[test]
    fn running_max_of_brownian_levels() {
        let e = ens(64, 10_000, 11);
        let s = ess_sup(e.levels(Driver::W1));
        assert!((2.5..=5.5).contains(&s), "{s}");
        // Independent reference: direct simulation of the same statistic.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut best = 0.0_f64;
        for _ in 0..10_000 {
            let mut w = 0.0_f64;
            for _ in 0..64 {
                let x: f64 = rng.sample(StandardNormal);
                w += x / 8.0;
                best = best.max(w.abs());
            }
        }
        assert!((s - best).abs() < 1.5, "{s} vs {best}");
    }

    #[test]
    fn zero_triple_has_zero_norm() {
        let e = ens(8, 500, 1);
        let gen = GeneratorSpec::pure_quadratic(1.0, TerminalCondition::constant(0.0));
        let z = Field::zeros(9, 500);
        assert_eq!(h2_norm(&z, &e, &gen, &BasisSpec::default()).unwrap(), 0.0);
        assert_eq!(bmo_norm(&z, &e, &BasisSpec::default()).unwrap(), 0.0);
        assert_eq!(NormReport::new(0.0, 0.0, 0.0, 0.0).triple_sq, 0.0);
    }

    #[test]
    fn unit_integrand_gives_horizon() {
        let e = ens(64, 2000, 2);
        let gen = GeneratorSpec::pure_quadratic(1.0, TerminalCondition::constant(0.0));
        let z = Field::constant(65, 2000, 1.0);
        let h = h2_norm(&z, &e, &gen, &BasisSpec::default()).unwrap();
        assert!((h - 1.0).abs() < 0.02, "{h}");
        let sig = gen.with_sigma(TimeFn::Constant(2.0));
        let h = h2_norm(&z, &e, &sig, &BasisSpec::default()).unwrap();
        assert!((h - 2.0).abs() < 0.04, "{h}");
        let b = bmo_norm(&z, &e, &BasisSpec::default()).unwrap();
        assert!((b - 1.0).abs() < 0.02);
    }

    #[test]
    fn triple_sq_identity() {
        let r = NormReport::new(0.3, 0.4, 1.2, 2.0);
        assert_eq!(r.triple_sq, 0.3 * 0.3 + 0.4 * 0.4 + 1.2 * 1.2);
        assert_eq!(r.triple_norm(), r.triple_sq.sqrt());
    }

    #[test]
    fn tail_energy_matches_nested_monte_carlo() {
        // z_j = W¹_{t_j}: E(Σ_{j≥i} W_j² Δt | F_i) checked against inner simulations
        // continued from a handful of outer states.
        let n_steps = 16;
        let e = ens(n_steps, 20_000, 3);
        let z = Field::from_fn(n_steps + 1, 20_000, |i, p| e.levels(Driver::W1).get(i, p));
        let design = Design::new(&e, &BasisSpec::new(3, crate::regress::BasisInputs::W1)).unwrap();
        let proj = Projector::new(&design, SliceWeights::None, n_steps).unwrap();
        let dt = e.dt();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in [2usize, 8, 13] {
            let mut tail = vec![0.0; 20_000];
            for j in i..n_steps {
                for (p, t) in tail.iter_mut().enumerate() {
                    *t += z.get(j, p).powi(2) * dt;
                }
            }
            let fit = proj.fit(i, &tail);
            for p in [0usize, 1, 2] {
                let w0 = e.levels(Driver::W1).get(i, p);
                let inner = 20_000;
                let (mut s, mut s2) = (0.0, 0.0);
                for _ in 0..inner {
                    let mut w = w0;
                    let mut acc = 0.0;
                    for _ in i..n_steps {
                        acc += w * w * dt;
                        let x: f64 = rng.sample(StandardNormal);
                        w += x * dt.sqrt();
                    }
                    s += acc;
                    s2 += acc * acc;
                }
                let m = s / inner as f64;
                let se_nested = ((s2 / inner as f64 - m * m) / inner as f64).sqrt();
                let tol = 5.0 * (se_nested.powi(2) + fit.se.powi(2)).sqrt();
                assert!((fit.fitted[p] - m).abs() < tol, "slice {i} path {p}: {} vs {m} (tol {tol})", fit.fitted[p]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn norms_are_homogeneous(c in -4.0..4.0f64, seed in any::<u64>()) {
            let e = ens(6, 400, seed);
            let basis = BasisSpec::default();
            let design = Design::new(&e, &basis).unwrap();
            let proj = Projector::new(&design, SliceWeights::None, 6).unwrap();
            let sigma = vec![1.0; 7];
            let y = Field::from_fn(7, 400, |i, p| e.levels(Driver::W1).get(i, p).sin());
            let z = Field::from_fn(7, 400, |i, p| e.levels(Driver::W2).get(i, p).cos());
            let zeta = Field::from_fn(7, 400, |i, p| e.levels(Driver::W1).get(i, p));
            let a = norm_report(&y, &z, &zeta, &proj, &sigma, e.dt(), EssSup::Max);
            let b = norm_report(&y.scaled(c), &z.scaled(c), &zeta.scaled(c), &proj, &sigma, e.dt(), EssSup::Max);
            let tol = 1e-9 * (1.0 + c.abs());
            prop_assert!((b.y_sup - c.abs() * a.y_sup).abs() <= tol);
            prop_assert!((b.z_h2 - c.abs() * a.z_h2).abs() <= tol);
            prop_assert!((b.n_bmo - c.abs() * a.n_bmo).abs() <= tol);
            prop_assert!((b.zm_n_bmo - c.abs() * a.zm_n_bmo).abs() <= tol);
        }

        #[test]
        fn ess_sup_is_monotone(vals in proptest::collection::vec(-5.0..5.0f64, 12), bump in proptest::collection::vec(0.0..2.0f64, 12)) {
            let f = Field::from_vec(3, 4, vals.clone());
            let g = Field::from_vec(3, 4, vals.iter().zip(&bump).map(|(v, b)| v.signum() * (v.abs() + b)).collect());
            prop_assert!(ess_sup(&g) >= ess_sup(&f));
            prop_assert!(ess_sup_quantile(&g, 0.999) >= ess_sup_quantile(&f, 0.999));
        }
    }
}
