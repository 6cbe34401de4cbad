//! Training / experiment hyperparameters and their `key=value` file format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GwclError, Result};
use crate::graph::Symmetrize;

/// Every knob of one run. Keys in config files match the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: usize,
    pub sigma_m: f64,
    pub sigma_n: f64,
    pub k: usize,
    pub lambda: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub main_epochs: usize,
    pub main_batch: usize,
    pub hidden: usize,
    pub seed: u64,
    pub quota: usize,
    pub fallback_quota: usize,
    pub skip_stage1: bool,
    pub skip_stage2: bool,
    pub disable_gwcl: bool,
    pub disable_ce: bool,
    pub no_spatial_input: bool,
    pub normalize_spectral: bool,
    pub similarity: String,
    pub activation: String,
    pub optimizer: String,
    pub reducer: String,
    pub knn_backend: String,
    pub symmetrize: Symmetrize,
    pub predict_batch: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::indian_pines()
    }
}

impl TrainConfig {
    /// Indian Pines: eta 0.001 / 0.001, sigma_m 0.04, sigma_n 0.001, K 10.
    pub fn indian_pines() -> Self {
        Self {
            beta: 20,
            sigma_m: 0.04,
            sigma_n: 0.001,
            k: 10,
            lambda: 8.0,
            eta1: 0.001,
            eta2: 0.001,
            pretrain_epochs: 300,
            pretrain_batch: 1,
            main_epochs: 1000,
            main_batch: 512,
            hidden: 180,
            seed: 0,
            quota: 30,
            fallback_quota: 15,
            skip_stage1: false,
            skip_stage2: false,
            disable_gwcl: false,
            disable_ce: false,
            no_spatial_input: false,
            normalize_spectral: true,
            similarity: "graph".into(),
            activation: "relu".into(),
            optimizer: "adam".into(),
            reducer: "pca".into(),
            knn_backend: "brute".into(),
            symmetrize: Symmetrize::Union,
            predict_batch: 4096,
            checkpoint_every: 0,
        }
    }

    /// Salinas: eta 0.001 / 0.001, sigma_m 0.04, sigma_n 0.04, K 10.
    pub fn salinas() -> Self {
        Self {
            sigma_n: 0.04,
            ..Self::indian_pines()
        }
    }

    /// University of Pavia: eta 0.005 / 0.01, sigma_m 1, sigma_n 0.4, K 50.
    pub fn pavia() -> Self {
        Self {
            eta1: 0.005,
            eta2: 0.01,
            sigma_m: 1.0,
            sigma_n: 0.4,
            k: 50,
            ..Self::indian_pines()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "indian_pines" | "ip" => Ok(Self::indian_pines()),
            "salinas" | "sa" => Ok(Self::salinas()),
            "pavia" | "pavia_university" | "paviau" | "pu" => Ok(Self::pavia()),
            other => Err(GwclError::UnknownStrategy {
                kind: "dataset preset",
                name: other.to_string(),
                available: "indian_pines, salinas, pavia".into(),
            }),
        }
    }

    /// Sets one field from its textual form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| GwclError::InvalidParameter(format!("cannot parse `{key}={value}`")))
        }
        let v = value.trim();
        match key.trim() {
            "beta" => self.beta = parse(key, v)?,
            "sigma_m" => self.sigma_m = parse(key, v)?,
            "sigma_n" => self.sigma_n = parse(key, v)?,
            "k" | "K" => self.k = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "eta1" => self.eta1 = parse(key, v)?,
            "eta2" => self.eta2 = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "main_epochs" => self.main_epochs = parse(key, v)?,
            "main_batch" => self.main_batch = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "quota" => self.quota = parse(key, v)?,
            "fallback_quota" => self.fallback_quota = parse(key, v)?,
            "skip_stage1" => self.skip_stage1 = parse(key, v)?,
            "skip_stage2" => self.skip_stage2 = parse(key, v)?,
            "disable_gwcl" => self.disable_gwcl = parse(key, v)?,
            "disable_ce" => self.disable_ce = parse(key, v)?,
            "no_spatial_input" => self.no_spatial_input = parse(key, v)?,
            "normalize_spectral" => self.normalize_spectral = parse(key, v)?,
            "similarity" => self.similarity = v.to_string(),
            "activation" => self.activation = v.to_string(),
            "optimizer" => self.optimizer = v.to_string(),
            "reducer" => self.reducer = v.to_string(),
            "knn_backend" => self.knn_backend = v.to_string(),
            "symmetrize" => self.symmetrize = v.parse()?,
            "predict_batch" => self.predict_batch = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => {
                return Err(GwclError::InvalidParameter(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of `self`. A `preset=<name>` line,
    /// if present, must come first and resets every field to that preset.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GwclError::InvalidParameter(format!("config line {} lacks `=`", n + 1)))?;
            if k.trim() == "preset" {
                *self = Self::preset(v.trim())?;
            } else {
                self.apply(k, v)?;
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GwclError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.merge_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("k", self.k),
            ("pretrain_batch", self.pretrain_batch),
            ("main_batch", self.main_batch),
            ("hidden", self.hidden),
            ("predict_batch", self.predict_batch),
            ("fallback_quota", self.fallback_quota),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GwclError::InvalidParameter(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("sigma_m", self.sigma_m), ("sigma_n", self.sigma_n)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GwclError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GwclError::InvalidParameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.fallback_quota > self.quota {
            return Err(GwclError::InvalidParameter("fallback_quota exceeds quota".into()));
        }
        Ok(())
    }

    /// All fields as `key=value` lines in declaration order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "beta={}", self.beta);
        let _ = writeln!(s, "sigma_m={}", self.sigma_m);
        let _ = writeln!(s, "sigma_n={}", self.sigma_n);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "eta1={}", self.eta1);
        let _ = writeln!(s, "eta2={}", self.eta2);
        let _ = writeln!(s, "pretrain_epochs={}", self.pretrain_epochs);
        let _ = writeln!(s, "pretrain_batch={}", self.pretrain_batch);
        let _ = writeln!(s, "main_epochs={}", self.main_epochs);
        let _ = writeln!(s, "main_batch={}", self.main_batch);
        let _ = writeln!(s, "hidden={}", self.hidden);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "quota={}", self.quota);
        let _ = writeln!(s, "fallback_quota={}", self.fallback_quota);
        let _ = writeln!(s, "skip_stage1={}", self.skip_stage1);
        let _ = writeln!(s, "skip_stage2={}", self.skip_stage2);
        let _ = writeln!(s, "disable_gwcl={}", self.disable_gwcl);
        let _ = writeln!(s, "disable_ce={}", self.disable_ce);
        let _ = writeln!(s, "no_spatial_input={}", self.no_spatial_input);
        let _ = writeln!(s, "normalize_spectral={}", self.normalize_spectral);
        let _ = writeln!(s, "similarity={}", self.similarity);
        let _ = writeln!(s, "activation={}", self.activation);
        let _ = writeln!(s, "optimizer={}", self.optimizer);
        let _ = writeln!(s, "reducer={}", self.reducer);
        let _ = writeln!(s, "knn_backend={}", self.knn_backend);
        let _ = writeln!(s, "symmetrize={}", self.symmetrize);
        let _ = writeln!(s, "predict_batch={}", self.predict_batch);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        s
    }
}
