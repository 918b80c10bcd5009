//! TOML run configuration.
//!
//! ```toml
//! [generator]
//! family = "affine_quadratic"
//! gamma_q = 1.0
//!
//! [terminal]
//! family = "tanh"
//! scale = 0.5
//!
//! [grid]
//! T = 1.0
//! n_steps = 64
//! n_paths = 20000
//! seed = 7
//! ```
//!
//! `[solver]` and `[output]` are optional. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AffineQuadratic, GeneratorSpec, GridSpec, Nonlinearity, TerminalCondition, TerminalShape, TimeFn};
use crate::solver::SolveOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorFamily {
    AffineQuadratic,
}

/// `f = a + b y + c v + (gamma_q/2) v² + mu phi(y)` with `v = σ z`, plus `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub family: GeneratorFamily,
    #[serde(default)]
    pub a: TimeFn,
    #[serde(default)]
    pub b: TimeFn,
    #[serde(default)]
    pub c: TimeFn,
    #[serde(default)]
    pub gamma_q: f64,
    #[serde(default)]
    pub g: TimeFn,
    #[serde(default = "unit")]
    pub sigma: TimeFn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<Nonlinearity>,
}

fn unit() -> TimeFn {
    TimeFn::Constant(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalFamily {
    Constant,
    Tanh,
    Sin,
    ClippedPolynomial,
}

/// `ξ = offset + scale * shape(load_w1 W¹_T + load_w2 W²_T)`. Loads default
/// to `(1, 0)`; `coeffs` and `clip` belong to `clipped_polynomial` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    pub family: TerminalFamily,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_w1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_w2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    /// Whitespace-separated columns with a `#` header, for plotting tools.
    Dat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
    /// Number of leading paths written to the field tables.
    pub csv_paths: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), formats: vec![Format::Json, Format::Csv], csv_paths: 16 }
    }
}

impl OutputSection {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorSection,
    pub terminal: TerminalSection,
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub output: OutputSection,
}

impl TerminalSection {
    pub fn condition(&self) -> Result<TerminalCondition> {
        let bad = |k: &str| Error::Config(format!("terminal.{k} is not used by family {:?}", self.family));
        let loads = (self.load_w1.unwrap_or(1.0), self.load_w2.unwrap_or(0.0));
        let poly = self.coeffs.is_some() || self.clip.is_some();
        let shape = match self.family {
            TerminalFamily::Constant => {
                if self.load_w1.is_some() || self.load_w2.is_some() {
                    return Err(bad("load_w1/load_w2"));
                }
                if poly {
                    return Err(bad("coeffs/clip"));
                }
                TerminalShape::Constant
            }
            TerminalFamily::Tanh | TerminalFamily::Sin if poly => return Err(bad("coeffs/clip")),
            TerminalFamily::Tanh => TerminalShape::Tanh { load_w1: loads.0, load_w2: loads.1 },
            TerminalFamily::Sin => TerminalShape::Sin { load_w1: loads.0, load_w2: loads.1 },
            TerminalFamily::ClippedPolynomial => {
                let coeffs =
                    self.coeffs.clone().ok_or_else(|| Error::Config("missing field `terminal.coeffs`".into()))?;
                let clip = self.clip.ok_or_else(|| Error::Config("missing field `terminal.clip`".into()))?;
                TerminalShape::ClippedPolynomial { load_w1: loads.0, load_w2: loads.1, coeffs, clip }
            }
        };
        Ok(TerminalCondition { shape, scale: self.scale, offset: self.offset })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn generator(&self) -> Result<GeneratorSpec> {
        let s = &self.generator;
        let driver = AffineQuadratic {
            a: s.a.clone(),
            b: s.b.clone(),
            c: s.c.clone(),
            gamma_q: s.gamma_q,
            nonlinearity: s.nonlinearity.clone(),
        };
        Ok(GeneratorSpec::new(driver, self.terminal.condition()?).with_g(s.g.clone()).with_sigma(s.sigma.clone()))
    }

    /// Checks everything that can be checked without running a solve.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.grid.validate().map_err(cfg)?;
        self.generator()?.validate(self.grid.horizon).map_err(cfg)?;
        self.solver.validate().map_err(cfg)?;
        if self.output.formats.is_empty() {
            return Err(Error::Config("output.formats is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[generator]
family = "affine_quadratic"
gamma_q = 1.0

[terminal]
family = "tanh"
scale = 0.5

[grid]
T = 1.0
n_steps = 16
n_paths = 1000
seed = 3
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = RunConfig::parse(BASIC).unwrap();
        assert_eq!(c.grid, GridSpec::new(1.0, 16, 1000, 3).unwrap());
        assert_eq!(c.solver, SolveOptions::default());
        assert_eq!(c.output, OutputSection::default());
        let g = c.generator().unwrap();
        assert_eq!(g, GeneratorSpec::pure_quadratic(1.0, TerminalCondition::tanh_w1(0.5)));
    }

    #[test]
    fn round_trip_is_stable() {
        let c = RunConfig::parse(BASIC).unwrap();
        let text = c.to_toml();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(c, again);
        assert_eq!(text, again.to_toml());
    }

    #[test]
    fn round_trip_with_every_section() {
        let text = r#"
[generator]
family = "affine_quadratic"
a = { intercept = 0.1, slope = -0.05 }
b = 0.3
c = { offset = 0.0, amplitude = 0.1, frequency = 2.0 }
gamma_q = 0.5
g = 0.25
sigma = 1.5
nonlinearity = { kind = "tanh", mu = 0.2 }

[terminal]
family = "clipped_polynomial"
scale = 0.1
offset = 0.01
load_w1 = 0.5
load_w2 = 0.5
coeffs = [0.0, 1.0, 0.5]
clip = 2.0

[grid]
T = 0.5
n_steps = 8
n_paths = 100
seed = 11

[solver]
tol = 1e-6
ess_sup = "quantile"
max_pieces = 64
basis_inputs = "both"

[output]
directory = "results"
formats = ["json", "dat"]
csv_paths = 4
"#;
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.solver.ess_sup, crate::norms::EssSup::Quantile);
        assert_eq!(c.generator.a, TimeFn::affine(0.1, -0.05));
        let again = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn missing_horizon_names_the_key() {
        let text = BASIC.replace("T = 1.0\n", "");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("`T`"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for (section, key) in [
            ("[generator]", "gama_q = 1.0"),
            ("[grid]", "steps = 3"),
            ("[terminal]", "scal = 1.0"),
            ("[grid]", "horizon = 1.0"),
        ] {
            let text = BASIC.replace(section, &format!("{section}\n{key}"));
            assert!(RunConfig::parse(&text).is_err(), "{key} accepted");
        }
        assert!(RunConfig::parse(&format!("{BASIC}\n[extra]\nx = 1\n")).is_err());
        assert!(RunConfig::parse(&format!("{BASIC}\n[solver]\nfoo = 1\n")).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for (from, to) in [("n_paths = 1000", "n_paths = 0"), ("T = 1.0", "T = -1.0"), ("scale = 0.5", "scale = nan")] {
            let err = RunConfig::parse(&BASIC.replace(from, to)).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{to}: {err}");
        }
        let text = BASIC.replace("family = \"tanh\"", "family = \"constant\"\nload_w1 = 1.0");
        assert!(RunConfig::parse(&text).is_err());
        let text = BASIC.replace("family = \"tanh\"", "family = \"clipped_polynomial\"");
        assert!(RunConfig::parse(&text).unwrap_err().to_string().contains("coeffs"));
    }
}
