//! Flat key = value run configuration with a schema version, strict
//! unknown-key rejection, and published defaults for every omitted key.

use sda_core::autodiff::GradMode;
use sda_core::losses::{AblationMask, EntropyKind, LossWeights};
use sda_core::metatrain::{MetaConfig, OuterOpt};
use sda_core::model::ModelSpec;
use sda_core::nn::Hyperparams;
use sda_core::ttadapt::{AdaptConfig, BaselineMode};

pub const CONFIG_VERSION: u64 = 1;

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    pub version: u64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub domains: usize,
    pub domain_seed: u64,
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub batch_per_domain: usize,
    pub adapt_epochs: usize,
    pub grad_mode: String,
    pub entropy: String,
    pub outer_opt: String,
    pub disable_meta: bool,
    pub use_ae: bool,
    pub use_orth: bool,
    pub use_ent: bool,
    pub adapt_lr: f64,
    pub adapt_batch: usize,
    pub adapt_use_adam: bool,
    pub baseline: String,
    pub eval_samples: usize,
    pub variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: "out".into(),
            domains: 4,
            domain_seed: 0,
            iterations: 2000,
            alpha: h.alpha,
            beta: h.beta,
            lambda: h.lambda,
            mu: h.mu,
            batch_per_domain: h.batch_per_domain,
            adapt_epochs: h.adapt_epochs,
            grad_mode: "second".into(),
            entropy: "bernoulli".into(),
            outer_opt: "adam".into(),
            disable_meta: false,
            use_ae: true,
            use_orth: true,
            use_ent: true,
            adapt_lr: h.alpha,
            adapt_batch: 20,
            adapt_use_adam: false,
            baseline: "none".into(),
            eval_samples: 200,
            variants: vec!["baseline".into(), "ours_wo_adapt".into(), "ours".into()],
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("key {key}: expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("key {key}: cannot parse {v:?}"))
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "version" => self.version = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|p| parse_num::<u64>(key, p.trim()))
                    .collect::<Result<_, _>>()?
            }
            "out_dir" => self.out_dir = v.to_string(),
            "domains" => self.domains = parse_num(key, v)?,
            "domain_seed" => self.domain_seed = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "batch_per_domain" => self.batch_per_domain = parse_num(key, v)?,
            "adapt_epochs" => self.adapt_epochs = parse_num(key, v)?,
            "grad_mode" => self.grad_mode = v.to_string(),
            "entropy" => self.entropy = v.to_string(),
            "outer_opt" => self.outer_opt = v.to_string(),
            "disable_meta" => self.disable_meta = parse_bool(key, v)?,
            "use_ae" => self.use_ae = parse_bool(key, v)?,
            "use_orth" => self.use_orth = parse_bool(key, v)?,
            "use_ent" => self.use_ent = parse_bool(key, v)?,
            "adapt_lr" => self.adapt_lr = parse_num(key, v)?,
            "adapt_batch" => self.adapt_batch = parse_num(key, v)?,
            "adapt_use_adam" => self.adapt_use_adam = parse_bool(key, v)?,
            "baseline" => self.baseline = v.to_string(),
            "eval_samples" => self.eval_samples = parse_num(key, v)?,
            "variants" => {
                self.variants = v.split(',').map(|p| p.trim().to_string()).collect()
            }
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value, got {line:?}", lineno + 1))?;
            cfg.apply(key.trim(), value)?;
        }
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "key \"version\": unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            ));
        }
        Ok(cfg)
    }

    pub fn hyper(&self) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            mu: self.mu,
            batch_per_domain: self.batch_per_domain,
            adapt_epochs: self.adapt_epochs,
        }
    }

    pub fn mask(&self) -> AblationMask {
        AblationMask {
            use_ae: self.use_ae,
            use_orth: self.use_orth,
            use_ent: self.use_ent,
        }
    }

    pub fn meta(&self) -> Result<MetaConfig, String> {
        let grad_mode = match self.grad_mode.as_str() {
            "second" => GradMode::SecondOrder,
            "first" => GradMode::FirstOrder,
            other => return Err(format!("key \"grad_mode\": unknown value {other:?}")),
        };
        let entropy = match self.entropy.as_str() {
            "bernoulli" => EntropyKind::Bernoulli,
            "single_term" => EntropyKind::SingleTerm,
            other => return Err(format!("key \"entropy\": unknown value {other:?}")),
        };
        let outer_opt = match self.outer_opt.as_str() {
            "adam" => OuterOpt::Adam,
            "sgd" => OuterOpt::Sgd,
            other => return Err(format!("key \"outer_opt\": unknown value {other:?}")),
        };
        let cfg = MetaConfig {
            spec: ModelSpec::default(),
            hyper: self.hyper(),
            grad_mode,
            mask: self.mask(),
            entropy,
            outer_opt,
            iterations: self.iterations,
            seed: self.seed,
            disable_meta: self.disable_meta,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn adapt(&self) -> Result<AdaptConfig, String> {
        let baseline = match self.baseline.as_str() {
            "none" => BaselineMode::None,
            "bn_stats" => BaselineMode::BnStats,
            "entropy_only" => BaselineMode::EntropyOnly,
            other => return Err(format!("key \"baseline\": unknown value {other:?}")),
        };
        let entropy = match self.entropy.as_str() {
            "bernoulli" => EntropyKind::Bernoulli,
            "single_term" => EntropyKind::SingleTerm,
            other => return Err(format!("key \"entropy\": unknown value {other:?}")),
        };
        let cfg = AdaptConfig {
            epochs: self.adapt_epochs,
            batch_size: self.adapt_batch,
            lr: self.adapt_lr,
            weights: LossWeights {
                lambda: self.lambda,
                mu: self.mu,
            },
            mask: self.mask(),
            entropy,
            baseline,
            use_adam: self.adapt_use_adam,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in serde_json::to_string(self).expect("config serializes").bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        h
    }
}
