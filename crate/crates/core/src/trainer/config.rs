use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{count_params, Dims};
use crate::error::{Error, Result};
use crate::model::{resolve_connections, ConnectionSpec, Feedback, Model, ModelConfig, Target};

/// Upper bound on epochs for any run.
pub const MAX_EPOCHS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Turboconn,
    Softtoken,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Turboconn => "turboconn",
            Method::Softtoken => "softtoken",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "turboconn" => Ok(Method::Turboconn),
            "softtoken" => Ok(Method::Softtoken),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Model shape; the vocabulary size comes from the task vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_inter: usize,
    pub max_seq: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            n_layers: 4,
            d_hidden: 128,
            n_heads: 4,
            d_inter: 256,
            max_seq: 256,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_hidden: self.d_hidden,
            n_heads: self.n_heads,
            d_kv: self.d_hidden,
            d_inter: self.d_inter,
            vocab_size,
            max_seq: self.max_seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub period: usize,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Log every N steps; the last step of each epoch is always logged.
    pub log_every: usize,
    /// Write a resumable checkpoint every N steps; 0 disables.
    pub checkpoint_every: usize,
    pub alpha: f32,
    pub g: usize,
    /// Preset name, `dense` for the triangular pattern of this depth, or a
    /// path to an `s -> l` file.
    pub connections: String,
    pub rank_d: usize,
    /// Soft-token feedback strength.
    pub lambda: f32,
    /// LoRA rank; 0 trains every base weight.
    pub lora_rank: usize,
    pub lora_targets: Vec<String>,
    /// Validation samples scored per epoch; 0 uses the whole split.
    pub val_limit: usize,
    pub val_temperature: f32,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Turboconn,
            seed: 0,
            batch_size: 64,
            epochs: 3,
            lr_max: 3e-4,
            period: 1000,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            log_every: 1,
            checkpoint_every: 0,
            alpha: 1.0,
            g: 1,
            connections: "dense".into(),
            rank_d: 16,
            lambda: 0.1,
            lora_rank: 0,
            lora_targets: Target::ALL.iter().map(|t| t.name().to_string()).collect(),
            val_limit: 0,
            val_temperature: 1.0,
            model: ModelShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return fail(format!("epochs must be in 1..={MAX_EPOCHS}, got {}", self.epochs));
        }
        if self.warmup >= self.period {
            return fail(format!("warmup {} must be below period {}", self.warmup, self.period));
        }
        if !(self.lr_max.is_finite() && self.lr_max >= 0.0) {
            return fail(format!("lr_max must be finite and non-negative, got {}", self.lr_max));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return fail("eps and grad_clip must be positive, weight_decay non-negative".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be at least 1".into());
        }
        if self.g == 0 || !self.alpha.is_finite() {
            return fail("g must be at least 1 and alpha finite".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.val_temperature > 0.0) {
            return fail("val_temperature must be positive".into());
        }
        Ok(())
    }

    /// Connection pairs this config trains with; empty unless the method is
    /// TurboConn.
    pub fn connection_pairs(&self) -> Result<Vec<(usize, usize)>> {
        if self.method != Method::Turboconn {
            return Ok(Vec::new());
        }
        if self.connections == "dense" {
            return resolve_connections(&format!("dense-{}", self.model.n_layers));
        }
        resolve_connections(&self.connections)
    }

    pub fn lora_target_list(&self) -> Result<Vec<Target>> {
        self.lora_targets.iter().map(|t| t.parse()).collect()
    }

    /// Fresh model for this config.
    pub fn build_model(&self, vocab_size: usize) -> Result<Model> {
        self.validate()?;
        let spec = match self.method {
            Method::Turboconn => ConnectionSpec::new(self.connection_pairs()?, self.alpha, self.g, self.rank_d)?,
            _ => ConnectionSpec::none(),
        };
        let mut model = Model::new(self.model.config(vocab_size), spec, self.seed)?;
        if self.method == Method::Softtoken {
            model.set_feedback(Feedback::SoftToken { lambda: self.lambda })?;
        }
        if self.lora_rank > 0 {
            model.attach_lora(self.lora_rank, &self.lora_target_list()?)?;
        }
        Ok(model)
    }

    /// Baseline config with at least as many trainable parameters as this
    /// TurboConn config: LoRA runs raise the rank, full runs widen the MLP.
    pub fn matched_baseline(&self) -> Result<TrainConfig> {
        let n_conn = self.connection_pairs()?.len() as u64;
        let mut base = TrainConfig {
            method: Method::Baseline,
            ..self.clone()
        };
        let m = &self.model;
        let dims = Dims {
            d_hidden: m.d_hidden as u64,
            d_kv: m.d_hidden as u64,
            d_inter: m.d_inter as u64,
            n_layers: m.n_layers as u64,
        };
        let extra = n_conn * (2 * self.rank_d as u64 * dims.d_hidden + self.rank_d as u64 + dims.d_hidden);
        if extra == 0 {
            return Ok(base);
        }
        if self.lora_rank > 0 {
            let want = count_params(&dims, self.lora_rank as u64, n_conn, self.rank_d as u64)?.turboconn_total;
            let mut r = self.lora_rank as u64;
            while count_params(&dims, r, 0, 1)?.baseline_total < want {
                r += 1;
            }
            base.lora_rank = r as usize;
        } else {
            // Each unit of d_inter adds three d_hidden-wide rows per layer.
            let per_unit = 3 * dims.d_hidden * dims.n_layers;
            base.model.d_inter += extra.div_ceil(per_unit) as usize;
        }
        Ok(base)
    }
}
