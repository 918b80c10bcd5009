//! Two-dimensional Brownian ensembles and Girsanov likelihood weights.
//!
//! `W¹` drives the `Z σ dW¹` term, `W²` carries the orthogonal martingale
//! `N`. Every path draws from its own ChaCha stream, so the ensemble is
//! identical for a given seed regardless of worker count, and adding paths
//! never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::{GridSpec, TerminalCondition};

/// Default cap on `n_paths * (n_steps + 1)`.
pub const DEFAULT_CELL_BUDGET: usize = 40_000_000;

const STREAM_W1: u64 = 1;
const STREAM_W2: u64 = 2;

/// Magic bytes of the binary ensemble dump.
pub const DUMP_MAGIC: &[u8; 8] = b"QBSDEENS";
pub const DUMP_VERSION: u32 = 1;
/// magic + version + T + n_steps + n_paths + seed
pub const DUMP_HEADER_LEN: usize = 8 + 4 + 8 + 8 + 8 + 8;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives the key of an independent stream from a root seed.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

fn path_rng(seed: u64, stream: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, stream));
    rng.set_stream(path as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Driver {
    W1,
    W2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub grid: GridSpec,
    /// `n_steps` slices of increments.
    pub w1_increments: Field,
    pub w2_increments: Field,
    /// `n_steps + 1` slices of levels, starting at zero.
    pub w1_levels: Field,
    pub w2_levels: Field,
}

fn cumulate(raw: &Field, n_steps: usize, n_paths: usize) -> (Field, Field) {
    let mut levels = Field::zeros(n_steps + 1, n_paths);
    for i in 0..n_steps {
        for p in 0..n_paths {
            let next = levels.get(i, p) + raw.get(i, p);
            levels.set(i + 1, p, next);
        }
    }
    // Increments are re-read from the levels so that differences are exact.
    let increments = Field::from_fn(n_steps, n_paths, |i, p| levels.get(i + 1, p) - levels.get(i, p));
    (increments, levels)
}

fn check_budget(grid: &GridSpec, budget: usize) -> Result<()> {
    let cells = grid.n_steps.checked_add(1).and_then(|r| r.checked_mul(grid.n_paths)).unwrap_or(usize::MAX);
    if cells > budget {
        return Err(Error::ResourceLimit { cells, budget });
    }
    Ok(())
}

/// Simulates the ensemble with the default memory budget.
pub fn generate(grid: &GridSpec) -> Result<PathEnsemble> {
    generate_with_budget(grid, DEFAULT_CELL_BUDGET)
}

pub fn generate_with_budget(grid: &GridSpec, budget: usize) -> Result<PathEnsemble> {
    grid.validate()?;
    check_budget(grid, budget)?;
    let (n, m) = (grid.n_steps, grid.n_paths);
    let sd = grid.dt().sqrt();
    let draw = |stream: u64| -> Field {
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|p| {
                let mut rng = path_rng(grid.seed, stream, p);
                (0..n)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        sd * x
                    })
                    .collect::<Vec<f64>>()
            })
            .collect();
        Field::from_fn(n, m, |i, p| rows[p][i])
    };
    let (w1_increments, w1_levels) = cumulate(&draw(STREAM_W1), n, m);
    let (w2_increments, w2_levels) = cumulate(&draw(STREAM_W2), n, m);
    Ok(PathEnsemble { grid: grid.clone(), w1_increments, w2_increments, w1_levels, w2_levels })
}

impl PathEnsemble {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn n_paths(&self) -> usize {
        self.grid.n_paths
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn increments(&self, driver: Driver) -> &Field {
        match driver {
            Driver::W1 => &self.w1_increments,
            Driver::W2 => &self.w2_increments,
        }
    }

    pub fn levels(&self, driver: Driver) -> &Field {
        match driver {
            Driver::W1 => &self.w1_levels,
            Driver::W2 => &self.w2_levels,
        }
    }

    /// Binary dump: header (magic, version, T, n_steps, n_paths, seed), then
    /// W¹ and W² increments as path-major little-endian `f64`.
    pub fn encode(&self) -> Vec<u8> {
        let (n, m) = (self.n_steps(), self.n_paths());
        let mut out = Vec::with_capacity(DUMP_HEADER_LEN + 16 * n * m);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&self.grid.horizon.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        out.extend_from_slice(&self.grid.seed.to_le_bytes());
        for inc in [&self.w1_increments, &self.w2_increments] {
            for p in 0..m {
                for i in 0..n {
                    out.extend_from_slice(&inc.get(i, p).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<PathEnsemble> {
        Self::decode_with_budget(bytes, DEFAULT_CELL_BUDGET)
    }

    pub fn decode_with_budget(bytes: &[u8], budget: usize) -> Result<PathEnsemble> {
        if bytes.len() < DUMP_HEADER_LEN {
            return Err(Error::Decode(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..8] != DUMP_MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != DUMP_VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let horizon = f64::from_bits(u64_at(12));
        let n_steps = usize::try_from(u64_at(20)).map_err(|_| Error::Decode("n_steps overflows".into()))?;
        let n_paths = usize::try_from(u64_at(28)).map_err(|_| Error::Decode("n_paths overflows".into()))?;
        let seed = u64_at(36);
        let grid = GridSpec { horizon, n_steps, n_paths, seed };
        grid.validate().map_err(|e| Error::Decode(e.to_string()))?;
        check_budget(&grid, budget)?;
        let expected = n_steps
            .checked_mul(n_paths)
            .and_then(|c| c.checked_mul(16))
            .and_then(|c| c.checked_add(DUMP_HEADER_LEN))
            .ok_or_else(|| Error::Decode("size overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Decode(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let body = &bytes[DUMP_HEADER_LEN..];
        let read_block = |block: usize| -> Result<Field> {
            let mut raw = Field::zeros(n_steps, n_paths);
            for p in 0..n_paths {
                for i in 0..n_steps {
                    let off = 8 * (block * n_steps * n_paths + p * n_steps + i);
                    let v = f64::from_le_bytes(body[off..off + 8].try_into().expect("8 bytes"));
                    if !v.is_finite() {
                        return Err(Error::Decode(format!("non-finite increment at path {p}, step {i}")));
                    }
                    raw.set(i, p, v);
                }
            }
            Ok(raw)
        };
        let (w1_increments, w1_levels) = cumulate(&read_block(0)?, n_steps, n_paths);
        let (w2_increments, w2_levels) = cumulate(&read_block(1)?, n_steps, n_paths);
        if !(w1_levels.is_finite() && w2_levels.is_finite()) {
            return Err(Error::Decode("levels overflow".into()));
        }
        Ok(PathEnsemble { grid, w1_increments, w2_increments, w1_levels, w2_levels })
    }
}

/// `h(W¹_T, W²_T)` per path.
pub fn terminal_values(ens: &PathEnsemble, tc: &TerminalCondition) -> Vec<f64> {
    let n = ens.n_steps();
    ens.w1_levels.slice(n).iter().zip(ens.w2_levels.slice(n)).map(|(&a, &b)| tc.eval(a, b)).collect()
}

/// Effective sample size `(Σw)² / Σw²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let (s, s2) = weights.iter().fold((0.0, 0.0), |(s, s2), &w| (s + w, s2 + w * w));
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightOptions {
    /// Renormalize each slice to weighted mean one.
    pub normalize: bool,
    /// Minimal terminal effective sample size as a fraction of `n_paths`.
    pub ess_floor: f64,
}

impl Default for WeightOptions {
    fn default() -> Self {
        Self { normalize: true, ess_floor: 0.05 }
    }
}

/// Cumulative log stochastic exponentials on the grid, together with the
/// drifts they induce on each driver.
#[derive(Clone, Debug, PartialEq)]
pub struct GirsanovWeights {
    /// `n_steps + 1` slices; zero at `t = 0`.
    pub log_weights: Field,
    pub raw_log_weights: Field,
    pub normalized: bool,
    /// Integrand on W¹ (`n_steps` slices), if any.
    pub drift_w1: Option<Field>,
    /// Integrand on W².
    pub drift_w2: Option<Field>,
}

impl GirsanovWeights {
    fn finish(raw: Field, drift_w1: Option<Field>, drift_w2: Option<Field>, opts: &WeightOptions) -> Result<Self> {
        let n_paths = raw.n_paths();
        let mut log_weights = raw.clone();
        if opts.normalize {
            for i in 0..raw.n_times() {
                let s = log_weights.slice_mut(i);
                // Log-sum-exp normalization to mean one.
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = s.iter().map(|&l| (l - mx).exp()).sum();
                let shift = mx + (sum / n_paths as f64).ln();
                for l in s.iter_mut() {
                    *l -= shift;
                }
            }
        }
        let w = Self { log_weights, raw_log_weights: raw, normalized: opts.normalize, drift_w1, drift_w2 };
        let ess = w.terminal_ess();
        let floor = opts.ess_floor * n_paths as f64;
        if ess < floor {
            return Err(Error::WeightDegeneracy { ess, floor });
        }
        Ok(w)
    }

    /// Weights identically one, without drift.
    pub fn unit(ens: &PathEnsemble) -> Self {
        let raw = Field::zeros(ens.n_steps() + 1, ens.n_paths());
        Self { log_weights: raw.clone(), raw_log_weights: raw, normalized: true, drift_w1: None, drift_w2: None }
    }

    pub fn n_steps(&self) -> usize {
        self.log_weights.n_times() - 1
    }

    pub fn weights_at(&self, slice: usize) -> Vec<f64> {
        self.log_weights.slice(slice).iter().map(|l| l.exp()).collect()
    }

    /// One-step likelihood ratios `E_{i+1} / E_i` (up to a per-slice constant).
    pub fn step_weights(&self, slice: usize) -> Vec<f64> {
        let (a, b) = (self.log_weights.slice(slice), self.log_weights.slice(slice + 1));
        a.iter().zip(b).map(|(x, y)| (y - x).exp()).collect()
    }

    /// Ratios `E_T / E_i` for conditional expectations of terminal sums.
    pub fn tail_weights(&self, slice: usize) -> Vec<f64> {
        let (a, b) = (self.log_weights.slice(slice), self.log_weights.slice(self.n_steps()));
        a.iter().zip(b).map(|(x, y)| (y - x).exp()).collect()
    }

    pub fn terminal_ess(&self) -> f64 {
        effective_sample_size(&self.weights_at(self.n_steps()))
    }

    pub fn terminal_ess_fraction(&self) -> f64 {
        self.terminal_ess() / self.log_weights.n_paths() as f64
    }

    /// Drift `λ` on the given driver at `(slice, path)`.
    #[inline]
    pub fn drift(&self, driver: Driver, slice: usize, path: usize) -> f64 {
        let f = match driver {
            Driver::W1 => &self.drift_w1,
            Driver::W2 => &self.drift_w2,
        };
        f.as_ref().map_or(0.0, |f| f.get(slice, path))
    }

    /// Product of two measure changes (sum of log weights and drifts).
    pub fn combine(&self, other: &GirsanovWeights, opts: &WeightOptions) -> Result<GirsanovWeights> {
        let mut raw = self.raw_log_weights.clone();
        raw += &other.raw_log_weights;
        let merge = |a: &Option<Field>, b: &Option<Field>| match (a, b) {
            (None, None) => None,
            (Some(x), None) | (None, Some(x)) => Some(x.clone()),
            (Some(x), Some(y)) => {
                let mut s = x.clone();
                s += y;
                Some(s)
            }
        };
        Self::finish(raw, merge(&self.drift_w1, &other.drift_w1), merge(&self.drift_w2, &other.drift_w2), opts)
    }
}

/// Discrete stochastic exponential of `∫ λ dW`:
/// `log E_{i+1} = log E_i + λ_i ΔW_i - λ_i² Δt / 2`.
///
/// `integrand` holds `n_steps` (or more) slices; slice `i` must only depend
/// on information up to `t_i`.
pub fn girsanov_weights(
    ens: &PathEnsemble,
    integrand: &Field,
    driver: Driver,
    opts: &WeightOptions,
) -> Result<GirsanovWeights> {
    let (n, m, dt) = (ens.n_steps(), ens.n_paths(), ens.dt());
    assert!(integrand.n_times() >= n && integrand.n_paths() == m, "integrand shape mismatch");
    let inc = ens.increments(driver);
    let mut raw = Field::zeros(n + 1, m);
    for i in 0..n {
        for p in 0..m {
            let lam = integrand.get(i, p);
            let next = raw.get(i, p) + lam * inc.get(i, p) - 0.5 * lam * lam * dt;
            raw.set(i + 1, p, next);
        }
    }
    let drift = Field::from_fn(n, m, |i, p| integrand.get(i, p));
    let (d1, d2) = match driver {
        Driver::W1 => (Some(drift), None),
        Driver::W2 => (None, Some(drift)),
    };
    GirsanovWeights::finish(raw, d1, d2, opts)
}
