use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::DesignConfig;
use crate::error::{Error, Result};
use crate::fracpoly::ratio_to_f64;
use crate::suite::{instance_rng, GridSpec};
use crate::system::{CoeffTable, SingularWeights, TodaParams};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Required by every command that draws random numbers.
    pub seed: Option<u64>,
    /// `γ_1..γ_n` as `(numerator, denominator)`.
    pub weights: Option<Vec<(i64, i64)>>,
    /// `λ_1..λ_n`; `λ_0` follows from the product constraint. Drawn at
    /// random when absent.
    pub lambda_free: Option<Vec<f64>>,
    pub coefficients: Vec<CoeffSpec>,
    /// Bound on `|c_ij|` for randomly drawn parameters.
    pub c_max: Option<f64>,
    pub design: DesignSpec,
    /// A `design.json` written by the `design` command.
    pub design_file: Option<PathBuf>,
    pub sample: SampleSpec,
    pub recovery: RecoverySpec,
    pub estimate: EstimateCfg,
    pub far_field: FarFieldSpec,
    pub green: GreenSpec,
    pub grid: GridSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffSpec {
    pub i: usize,
    pub j: usize,
    #[serde(default)]
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignPreset {
    #[default]
    Default,
    Moderate,
}

/// A preset plus optional overrides of every [`DesignConfig`] field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSpec {
    pub preset: DesignPreset,
    pub ln_n: Option<f64>,
    pub ln_s: Option<f64>,
    pub eps: Option<f64>,
    pub delta_angle: Option<f64>,
    pub cond_ceiling: Option<f64>,
    pub max_escalations: Option<usize>,
    pub check_ordering: Option<bool>,
}

impl DesignSpec {
    pub fn resolve(&self) -> DesignConfig {
        let mut c = match self.preset {
            DesignPreset::Default => DesignConfig::default(),
            DesignPreset::Moderate => DesignConfig::moderate(),
        };
        if let Some(v) = self.ln_n {
            c.ln_n = v;
        }
        if let Some(v) = self.ln_s {
            c.ln_s = v;
        }
        if self.eps.is_some() {
            c.eps = self.eps;
        }
        if let Some(v) = self.delta_angle {
            c.delta_angle = v;
        }
        if let Some(v) = self.cond_ceiling {
            c.cond_ceiling = v;
        }
        if let Some(v) = self.max_escalations {
            c.max_escalations = v;
        }
        if let Some(v) = self.check_ordering {
            c.check_ordering = v;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    pub epsilon: f64,
    pub eta: f64,
    /// Extra sample points on a log-polar grid up to this radius.
    pub r_max: f64,
    pub per_decade: usize,
    pub angles: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            epsilon: 1e-3,
            eta: 0.0,
            r_max: 1e3,
            per_decade: 6,
            angles: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// Least squares over all sample points.
    #[default]
    Lsq,
    /// Square Newton at the design nodes.
    Newton,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    SlopeFit,
    /// The truth offset by `±perturbation` with seeded signs.
    Perturbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySpec {
    pub mode: RecoveryMode,
    pub init: InitMode,
    /// Relative size of the random-sign start offset for `perturbed`.
    pub perturbation: f64,
}

impl Default for RecoverySpec {
    fn default() -> Self {
        RecoverySpec {
            mode: RecoveryMode::Lsq,
            init: InitMode::SlopeFit,
            perturbation: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateCfg {
    /// Midpoint of the admissible interval when absent.
    pub sigma: Option<f64>,
}

impl EstimateCfg {
    pub fn sigma_for(&self, weights: &SingularWeights) -> f64 {
        if let Some(s) = self.sigma {
            return s;
        }
        let two_mu_min = (1..=weights.n())
            .map(|i| 2.0 * ratio_to_f64(weights.mu(i)))
            .fold(f64::INFINITY, f64::min);
        if weights.min_gamma() <= num_rational::Rational64::new(-3, 4) {
            0.5 * two_mu_min
        } else {
            let lo = (1.0 - two_mu_min).max(0.0);
            0.5 * (lo + two_mu_min.min(1.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FarFieldSpec {
    pub r_max: f64,
    /// Fitting window of the decay exponent of `e^{u_i}`.
    pub decay_window: (f64, f64),
}

impl Default for FarFieldSpec {
    fn default() -> Self {
        FarFieldSpec {
            r_max: 1e4,
            decay_window: (1e4, 1e6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreenSpec {
    pub radius: f64,
    pub samples: usize,
    /// Random boundary data sets for the corrector scan.
    pub corrector_sets: usize,
}

impl Default for GreenSpec {
    fn default() -> Self {
        GreenSpec {
            radius: 100.0,
            samples: 10_000,
            corrector_sets: 10,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if let Some(w) = &self.weights {
            self.weights_checked(w)?;
        }
        let s = &self.sample;
        if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
            return Err(Error::config("sample.epsilon", "must lie in (0, 1)"));
        }
        if !(s.eta >= 0.0 && s.eta.is_finite()) {
            return Err(Error::config("sample.eta", "must be finite and nonnegative"));
        }
        if !(s.r_max > 1e-3) || s.per_decade == 0 || s.angles == 0 {
            return Err(Error::config("sample", "r_max must exceed 1e-3 with positive counts"));
        }
        if !(self.recovery.perturbation >= 0.0 && self.recovery.perturbation < 1.0) {
            return Err(Error::config("recovery.perturbation", "must lie in [0, 1)"));
        }
        if !(self.far_field.r_max > 1.0) {
            return Err(Error::config("far_field.r_max", "must exceed 1"));
        }
        let (lo, hi) = self.far_field.decay_window;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::config("far_field.decay_window", "needs 0 < lo < hi"));
        }
        if !(self.green.radius > 2.0) || self.green.samples == 0 {
            return Err(Error::config("green", "radius must exceed 2 with positive samples"));
        }
        if self.grid.n_max == 0 || self.grid.gammas.is_empty() || self.grid.seeds == 0 {
            return Err(Error::config("grid", "n_max, gammas and seeds must be nonempty"));
        }
        self.grid.weights()?;
        Ok(())
    }

    fn weights_checked(&self, pairs: &[(i64, i64)]) -> Result<SingularWeights> {
        if pairs.is_empty() {
            return Err(Error::config("weights", "rank must be at least 1"));
        }
        for (k, &(a, b)) in pairs.iter().enumerate() {
            if b == 0 {
                return Err(Error::config(format!("weights[{k}]"), "zero denominator"));
            }
            if num_rational::Rational64::new(a, b) <= num_rational::Rational64::from_integer(-1) {
                return Err(Error::config(format!("weights[{k}]"), format!("gamma = {a}/{b} must exceed -1")));
            }
        }
        SingularWeights::from_pairs(pairs)
    }

    pub fn seed_required(&self, what: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::config("seed", format!("a seed is required for {what}")))
    }

    pub fn weights(&self) -> Result<SingularWeights> {
        match &self.weights {
            Some(w) => self.weights_checked(w),
            None => Err(Error::config("weights", "missing")),
        }
    }

    fn coefficient_table(&self, n: usize) -> Result<CoeffTable> {
        let mut c = CoeffTable::zeros(n);
        for (k, spec) in self.coefficients.iter().enumerate() {
            c.set(spec.i, spec.j, Complex64::new(spec.re, spec.im))
                .map_err(|e| Error::config(format!("coefficients[{k}]"), e.to_string()))?;
        }
        Ok(c)
    }

    /// Explicit parameters, or a seeded random admissible draw.
    pub fn params(&self) -> Result<TodaParams> {
        let w = self.weights()?;
        let n = w.n();
        let c = self.coefficient_table(n)?;
        let as_config = |e: Error| match e {
            Error::ConfigInvalid { .. } => e,
            Error::NonResonantCoefficient { .. } => Error::config("coefficients", e.to_string()),
            other => Error::config("lambda_free", other.to_string()),
        };
        match &self.lambda_free {
            Some(l) => TodaParams::make(w, l, c).map_err(as_config),
            None => {
                let seed = self.seed_required("random parameters")?;
                let mut p = TodaParams::random_admissible(&w, self.c_max.unwrap_or(0.5), &mut instance_rng(seed, 11, 0, 0));
                if !self.coefficients.is_empty() {
                    p = TodaParams::from_full(w, p.lambda, c).map_err(as_config)?;
                }
                Ok(p)
            }
        }
    }

    /// Random signs for the perturbed recovery start.
    pub fn start_signs(&self, count: usize) -> Result<Vec<f64>> {
        let mut rng = instance_rng(self.seed_required("a perturbed start")?, 12, 0, 0);
        Ok((0..count).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
    }

    pub fn noise_seed(&self) -> Result<u64> {
        if self.sample.eta == 0.0 {
            return Ok(self.seed.unwrap_or(0));
        }
        Ok(instance_rng(self.seed_required("noisy samples")?, 13, 0, 0).gen())
    }
}
