//! Declarative run configuration: one TOML file drives every subcommand,
//! with a handful of command-line overrides layered on top.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use prodmix::CopulaFamily;
use serde::Deserialize;

/// One term of the site-scale regression formula. The intercept is always
/// present and never written; terms reference covariate columns of the
/// stations file by name, optionally squared or multiplied pairwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormulaTerm {
    Linear(String),
    Square(String),
    Interaction(String, String),
}

impl FormulaTerm {
    /// Covariate names this term reads.
    pub fn names(&self) -> Vec<&str> {
        match self {
            Self::Linear(a) => vec![a],
            Self::Square(a) => vec![a],
            Self::Interaction(a, b) => vec![a, b],
        }
    }

    /// Canonical label, used in summaries and error messages.
    #[must_use]
    pub fn label(&self) -> String {
        match self {
            Self::Linear(a) => a.clone(),
            Self::Square(a) => format!("{a}^2"),
            Self::Interaction(a, b) => format!("{a}*{b}"),
        }
    }
}

impl FromStr for FormulaTerm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err("empty formula term".to_string());
        }
        let valid = |name: &str| {
            !name.is_empty()
                && name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        };
        if let Some((a, b)) = s.split_once('*') {
            let (a, b) = (a.trim(), b.trim());
            if !valid(a) || !valid(b) {
                return Err(format!("malformed interaction term '{s}'"));
            }
            return Ok(Self::Interaction(a.to_string(), b.to_string()));
        }
        if let Some((a, pow)) = s.split_once('^') {
            let a = a.trim();
            if pow.trim() != "2" || !valid(a) {
                return Err(format!(
                    "malformed power term '{s}' (only squares like 'name^2' are supported)"
                ));
            }
            return Ok(Self::Square(a.to_string()));
        }
        if !valid(s) {
            return Err(format!("malformed covariate name '{s}'"));
        }
        Ok(Self::Linear(s.to_string()))
    }
}

impl fmt::Display for FormulaTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn default_censor_quantile() -> f64 {
    0.75
}
fn default_true() -> bool {
    true
}
fn default_one() -> u64 {
    1
}
fn default_copula() -> String {
    "gaussian".to_string()
}
fn default_shape_bound() -> f64 {
    1.0
}
fn default_batch() -> usize {
    5
}
fn default_mh_interval() -> u64 {
    25
}
fn default_thin() -> u64 {
    1
}
fn default_latent_thin() -> u64 {
    250
}
fn default_adapt_interval() -> u64 {
    500
}
fn default_weight_sd() -> f64 {
    10.0
}
fn default_predictor() -> String {
    "mean".to_string()
}
fn default_replicates() -> usize {
    1
}
fn default_chi_levels() -> Vec<f64> {
    vec![0.9, 0.95, 0.99, 0.999]
}
fn default_chi_samples() -> usize {
    1_000_000
}
fn default_diag_thin() -> u64 {
    1
}

/// `[data]`: input files, censoring rule, and the prediction mask.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub stations: PathBuf,
    pub observations: PathBuf,
    #[serde(default = "default_censor_quantile")]
    pub censor_quantile: f64,
    /// Thresholds from strictly positive values only (the natural choice
    /// for rainfall-like data with many exact zeros).
    #[serde(default = "default_true")]
    pub positive_only: bool,
    /// Station ids whose columns are fully masked and become prediction
    /// targets.
    #[serde(default)]
    pub mask_stations: Vec<String>,
}

/// `[model]`: scale formula, copula family, and parameter bounds.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Regression terms over station covariates; the intercept is implicit.
    #[serde(default)]
    pub formula: Vec<String>,
    #[serde(default = "default_copula")]
    pub copula: String,
    /// Degrees of freedom, required when `copula = "t"`.
    pub nu: Option<f64>,
    /// Upper bounds of the two shape weights; 1.0 unless stated otherwise.
    #[serde(default = "default_shape_bound")]
    pub delta1: f64,
    #[serde(default = "default_shape_bound")]
    pub delta2: f64,
    /// Range-prior bound; defaults to the maximum pairwise station distance.
    pub delta: Option<f64>,
}

/// `[sampler]`: chain geometry. Field names mirror the library's sampler
/// configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub iterations: u64,
    pub burnin: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_mh_interval")]
    pub mh_interval: u64,
    #[serde(default = "default_one")]
    pub chains: u64,
    pub seed: u64,
    #[serde(default = "default_thin")]
    pub thin: u64,
    #[serde(default = "default_latent_thin")]
    pub latent_thin: u64,
    #[serde(default = "default_adapt_interval")]
    pub adapt_interval: u64,
    /// Checkpoint every this many iterations; 0 = only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

/// `[output]`: where results land and how timing enters summaries.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// When set, ESS/min uses this fixed wall-clock figure instead of the
    /// measured one, making summary files bit-reproducible across runs.
    #[serde(default)]
    pub fixed_minutes: Option<f64>,
}

/// `[priors]`: optional hyperprior overrides.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub gamma_var: Option<f64>,
    pub beta3_shape: Option<f64>,
    pub beta3_rate: Option<f64>,
}

/// `[simulate]`: ground-truth parameters for synthetic data generation.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_times: usize,
    /// Intercept followed by one coefficient per formula term.
    pub gamma: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub rho: f64,
    /// Seed override; defaults to the `[sampler]` seed.
    pub seed: Option<u64>,
}

/// `[predict]`: posterior-predictive ensembles at masked cells.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfigSection {
    #[serde(default = "default_replicates")]
    pub replicates_per_draw: usize,
    pub seed: Option<u64>,
}

impl Default for PredictConfigSection {
    fn default() -> Self {
        Self { replicates_per_draw: default_replicates(), seed: None }
    }
}

/// `[score]`: probabilistic scoring of predictions against held-out truth.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Gaussian-CDF weight spread for the tail-weighted score; the weight
    /// mean is each site's censoring threshold.
    #[serde(default = "default_weight_sd")]
    pub weight_sd: f64,
    #[serde(default = "default_predictor")]
    pub predictor: String,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { weight_sd: default_weight_sd(), predictor: default_predictor() }
    }
}

/// `[chi]`: tail-dependence curves, either model-based Monte Carlo at a
/// given station separation or empirical from two observed stations.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChiConfig {
    #[serde(default = "default_chi_levels")]
    pub levels: Vec<f64>,
    /// "model" (default) or "empirical".
    #[serde(default)]
    pub mode: Option<String>,
    // Model mode: explicit parameters and a pair separation distance.
    pub gamma0: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub beta3: Option<f64>,
    pub rho: Option<f64>,
    pub separation: Option<f64>,
    #[serde(default = "default_chi_samples")]
    pub n_samples: usize,
    pub seed: Option<u64>,
    /// Empirical mode: the two station ids to pair.
    #[serde(default)]
    pub pair: Vec<String>,
}

/// `[diag]`: convergence reporting and trace thinning.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagConfig {
    #[serde(default = "default_diag_thin")]
    pub thin: u64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { thin: default_diag_thin() }
    }
}

/// The full declarative run configuration (TOML).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sampler: SamplerSection,
    pub output: OutputConfig,
    #[serde(default)]
    pub priors: PriorSection,
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub predict: PredictConfigSection,
    #[serde(default)]
    pub score: ScoreConfig,
    pub chi: Option<ChiConfig>,
    #[serde(default)]
    pub diag: DiagConfig,
}

impl RunConfig {
    /// Parses and validates a TOML configuration file. The returned config
    /// is internally consistent; data-dependent checks (covariate names,
    /// station ids) happen at ingestion.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| format!("config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural validation independent of any data file.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.data.censor_quantile > 0.0 && self.data.censor_quantile < 1.0) {
            return Err(format!(
                "data.censor_quantile must lie in (0,1), got {}",
                self.data.censor_quantile
            ));
        }
        self.formula_terms()?;
        self.copula()?;
        for (name, v) in [("model.delta1", self.model.delta1), ("model.delta2", self.model.delta2)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(d) = self.model.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(format!("model.delta must be positive when set, got {d}"));
            }
        }
        if self.sampler.iterations == 0 {
            return Err("sampler.iterations must be positive".to_string());
        }
        if self.sampler.burnin >= self.sampler.iterations {
            return Err(format!(
                "sampler.burnin ({}) must be below sampler.iterations ({})",
                self.sampler.burnin, self.sampler.iterations
            ));
        }
        if self.sampler.chains == 0 {
            return Err("sampler.chains must be at least 1".to_string());
        }
        if let Some(m) = self.output.fixed_minutes {
            if !(m > 0.0 && m.is_finite()) {
                return Err(format!("output.fixed_minutes must be positive, got {m}"));
            }
        }
        if let Some(sim) = &self.simulate {
            let want = 1 + self.formula_terms()?.len();
            if sim.gamma.len() != want {
                return Err(format!(
                    "simulate.gamma has {} entries but the formula implies {want} \
                     (intercept + one per term)",
                    sim.gamma.len()
                ));
            }
        }
        match self.score.predictor.as_str() {
            "mean" | "median" => {}
            other => {
                return Err(format!(
                    "score.predictor must be 'mean' or 'median', got '{other}'"
                ))
            }
        }
        if let Some(chi) = &self.chi {
            match chi.mode.as_deref().unwrap_or("model") {
                "model" => {
                    for (k, v) in [
                        ("gamma0", chi.gamma0),
                        ("beta1", chi.beta1),
                        ("beta2", chi.beta2),
                        ("beta3", chi.beta3),
                        ("rho", chi.rho),
                        ("separation", chi.separation),
                    ] {
                        if v.is_none() {
                            return Err(format!("chi.{k} is required in model mode"));
                        }
                    }
                }
                "empirical" => {
                    if chi.pair.len() != 2 {
                        return Err(format!(
                            "chi.pair must name exactly two stations in empirical mode, got {}",
                            chi.pair.len()
                        ));
                    }
                }
                other => {
                    return Err(format!("chi.mode must be 'model' or 'empirical', got '{other}'"))
                }
            }
        }
        Ok(())
    }

    /// Parsed formula terms, rejecting duplicates and malformed syntax.
    pub fn formula_terms(&self) -> Result<Vec<FormulaTerm>, String> {
        let mut terms = Vec::with_capacity(self.model.formula.len());
        for raw in &self.model.formula {
            let term: FormulaTerm =
                raw.parse().map_err(|e| format!("model.formula: {e}"))?;
            if terms.contains(&term) {
                return Err(format!("model.formula: duplicate term '{term}'"));
            }
            terms.push(term);
        }
        Ok(terms)
    }

    /// The copula family selected by `[model]`.
    pub fn copula(&self) -> Result<CopulaFamily, String> {
        match self.model.copula.as_str() {
            "gaussian" => Ok(CopulaFamily::Gaussian),
            "t" => {
                let nu = self
                    .model
                    .nu
                    .ok_or_else(|| "model.nu is required when copula = \"t\"".to_string())?;
                if !(nu > 0.0 && nu.is_finite()) {
                    return Err(format!("model.nu must be positive, got {nu}"));
                }
                Ok(CopulaFamily::StudentT { nu })
            }
            other => Err(format!("model.copula must be 'gaussian' or 't', got '{other}'")),
        }
    }

    /// Per-chain RNG seed: distinct, documented derivation from the base
    /// seed so segmented and parallel runs agree.
    #[must_use]
    pub fn chain_seed(&self, chain: u64) -> u64 {
        self.sampler.seed.wrapping_add(chain.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
[data]
stations = "stations.csv"
observations = "observations.csv"

[model]
formula = ["lat", "long"]
delta1 = 1.0
delta2 = 1.0

[sampler]
iterations = 100
burnin = 50
seed = 7

[output]
dir = "out"
"#
        .to_string()
    }

    fn parse(toml_text: &str) -> Result<RunConfig, String> {
        let cfg: RunConfig = toml::from_str(toml_text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse(&minimal_toml()).unwrap();
        assert_eq!(cfg.data.censor_quantile, 0.75);
        assert!(cfg.data.positive_only);
        assert_eq!(cfg.sampler.batch_size, 5);
        assert_eq!(cfg.sampler.mh_interval, 25);
        assert_eq!(cfg.sampler.chains, 1);
        assert_eq!(cfg.score.weight_sd, 10.0);
        assert!(matches!(cfg.copula().unwrap(), CopulaFamily::Gaussian));
    }

    #[test]
    fn formula_terms_parse_linear_square_interaction() {
        assert_eq!("alt".parse::<FormulaTerm>().unwrap(), FormulaTerm::Linear("alt".into()));
        assert_eq!(
            "lat^2".parse::<FormulaTerm>().unwrap(),
            FormulaTerm::Square("lat".into())
        );
        assert_eq!(
            "lat*long".parse::<FormulaTerm>().unwrap(),
            FormulaTerm::Interaction("lat".into(), "long".into())
        );
        assert!("lat^3".parse::<FormulaTerm>().is_err());
        assert!("".parse::<FormulaTerm>().is_err());
        assert!("a*b*c".parse::<FormulaTerm>().is_err());
    }

    #[test]
    fn invalid_quantile_and_duplicate_terms_are_rejected() {
        let bad_q = minimal_toml().replace(
            "[model]",
            "censor_quantile = 1.5\n\n[model]",
        );
        assert!(parse(&bad_q).unwrap_err().contains("censor_quantile"));

        let dup = minimal_toml().replace(
            r#"formula = ["lat", "long"]"#,
            r#"formula = ["lat", "lat"]"#,
        );
        assert!(parse(&dup).unwrap_err().contains("duplicate"));
    }

    #[test]
    fn t_copula_requires_degrees_of_freedom() {
        let t_no_nu = minimal_toml().replace(
            r#"formula = ["lat", "long"]"#,
            "formula = [\"lat\"]\ncopula = \"t\"",
        );
        assert!(parse(&t_no_nu).unwrap_err().contains("nu"));
    }

    #[test]
    fn simulate_gamma_length_must_match_formula() {
        let sim = minimal_toml()
            + r#"
[simulate]
n_times = 10
gamma = [0.0]
beta1 = 0.5
beta2 = 0.5
beta3 = 5.0
rho = 0.5
"#;
        let err = parse(&sim).unwrap_err();
        assert!(err.contains("gamma has 1 entries but the formula implies 3"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let extra = minimal_toml() + "\n[sampler2]\nx = 1\n";
        assert!(parse(&extra).is_err());
    }

    #[test]
    fn chain_seeds_are_distinct() {
        let cfg = parse(&minimal_toml()).unwrap();
        assert_eq!(cfg.chain_seed(0), 7);
        assert_ne!(cfg.chain_seed(0), cfg.chain_seed(1));
        assert_ne!(cfg.chain_seed(1), cfg.chain_seed(2));
    }
}
