//! Run configuration: a flat, human-readable `key = value` format with
//! dotted namespaces. Every field has a default; unknown keys are rejected.

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::tasks::{TaskKind, TaskSpec};
use crate::training::{OptimizerConfig, Schedule};

/// Full hyperparameter record for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,

    // model geometry
    pub width: usize,
    pub oracle_depth: usize,
    pub base_model_depth: usize,
    pub lm_enc_depth: usize,
    pub lm_dec_depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub input_size: usize,
    pub code_len: usize,
    pub dict_size: usize,
    pub codeword_dim: usize,
    pub dict_momentum: f64,
    pub code_dropout: bool,
    pub with_encoder_ctx: bool,

    // task geometry
    pub semantic_classes: usize,
    pub instance_slots: usize,
    pub depth_bins: usize,
    pub max_depth: f64,
    pub depth_eval_crop: f64,

    // optimizer and schedule
    pub lr: f64,
    pub stage2_lr: f64,
    pub wd: f64,
    pub beta2_cap: f64,
    pub grad_clip_norm: f64,
    pub decay_type: String,
    pub warmup_steps: u64,

    // budgets
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,

    // data
    pub train_examples: usize,
    pub eval_examples: usize,

    // ablation switches
    pub no_oracle: bool,
    pub non_autoregressive_lm: bool,
    pub no_image: bool,
    pub no_dropout: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "panoptic".into(),
            seed: 1,
            width: 128,
            oracle_depth: 3,
            base_model_depth: 6,
            lm_enc_depth: 6,
            lm_dec_depth: 4,
            num_heads: 4,
            mlp_dim: 512,
            patch_size: 8,
            input_size: 64,
            code_len: 16,
            dict_size: 64,
            codeword_dim: 64,
            dict_momentum: 0.995,
            code_dropout: true,
            with_encoder_ctx: true,
            semantic_classes: 8,
            instance_slots: 8,
            depth_bins: 32,
            max_depth: 8.0,
            depth_eval_crop: 0.8,
            lr: 4e-4,
            stage2_lr: 1e-3,
            wd: 4e-5,
            beta2_cap: 0.95,
            grad_clip_norm: 1.0,
            decay_type: "cosine".into(),
            warmup_steps: 100,
            stage1_steps: 3000,
            stage2_steps: 2000,
            batch_size: 32,
            eval_every: 1000,
            train_examples: 2048,
            eval_examples: 256,
            no_oracle: false,
            non_autoregressive_lm: false,
            no_image: false,
            no_dropout: false,
        }
    }
}

macro_rules! config_fields {
    ($macro:ident) => {
        $macro! {
            ("task", task, string),
            ("seed", seed, u64),
            ("model.width", width, usize),
            ("model.oracle_depth", oracle_depth, usize),
            ("model.base_model_depth", base_model_depth, usize),
            ("model.lm_enc_depth", lm_enc_depth, usize),
            ("model.lm_dec_depth", lm_dec_depth, usize),
            ("model.num_heads", num_heads, usize),
            ("model.mlp_dim", mlp_dim, usize),
            ("model.patch_size", patch_size, usize),
            ("model.input_size", input_size, usize),
            ("model.code_len", code_len, usize),
            ("model.dict_size", dict_size, usize),
            ("model.codeword_dim", codeword_dim, usize),
            ("model.dict_momentum", dict_momentum, f64),
            ("model.code_dropout", code_dropout, bool),
            ("model.with_encoder_ctx", with_encoder_ctx, bool),
            ("task.semantic_classes", semantic_classes, usize),
            ("task.instance_slots", instance_slots, usize),
            ("task.depth_bins", depth_bins, usize),
            ("task.max_depth", max_depth, f64),
            ("task.depth_eval_crop", depth_eval_crop, f64),
            ("lr", lr, f64),
            ("stage2.lr", stage2_lr, f64),
            ("wd", wd, f64),
            ("optax.beta2_cap", beta2_cap, f64),
            ("grad_clip_norm", grad_clip_norm, f64),
            ("schedule.decay_type", decay_type, string),
            ("schedule.warmup_steps", warmup_steps, u64),
            ("train.stage1_steps", stage1_steps, u64),
            ("train.stage2_steps", stage2_steps, u64),
            ("train.batch_size", batch_size, usize),
            ("train.eval_every", eval_every, u64),
            ("data.train_examples", train_examples, usize),
            ("data.eval_examples", eval_examples, usize),
            ("ablation.no_oracle", no_oracle, bool),
            ("ablation.non_autoregressive_lm", non_autoregressive_lm, bool),
            ("ablation.no_image", no_image, bool),
            ("ablation.no_dropout", no_dropout, bool),
        }
    };
}

macro_rules! impl_serialize {
    ($(($key:literal, $field:ident, $kind:ident)),* $(,)?) => {
        fn write_fields(cfg: &RunConfig, out: &mut String) {
            use std::fmt::Write;
            $(writeln!(out, "{} = {}", $key, format_value!(cfg.$field, $kind)).unwrap();)*
        }
    };
}

macro_rules! format_value {
    ($v:expr, string) => {
        $v
    };
    ($v:expr, $other:ident) => {
        $v
    };
}

macro_rules! impl_set {
    ($(($key:literal, $field:ident, $kind:ident)),* $(,)?) => {
        fn set_field(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => {
                    cfg.$field = parse_value!(key, value, $kind)?;
                    Ok(())
                })*
                _ => Err(Error::Config(format!("unknown config key '{key}'"))),
            }
        }
    };
}

macro_rules! parse_value {
    ($key:expr, $value:expr, string) => {
        Ok::<String, Error>($value.to_string())
    };
    ($key:expr, $value:expr, bool) => {
        match $value {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!(
                "key '{}': expected true/false, got '{other}'",
                $key
            ))),
        }
    };
    ($key:expr, $value:expr, u64) => {
        $value
            .parse::<u64>()
            .map_err(|e| Error::Config(format!("key '{}': {e}", $key)))
    };
    ($key:expr, $value:expr, usize) => {
        $value
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("key '{}': {e}", $key)))
    };
    ($key:expr, $value:expr, f64) => {
        $value
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("key '{}': {e}", $key)))
    };
}

config_fields!(impl_serialize);
config_fields!(impl_set);

macro_rules! impl_keys {
    ($(($key:literal, $field:ident, $kind:ident)),* $(,)?) => {
        /// All known keys, in serialization order.
        pub const CONFIG_KEYS: &[&str] = &[$($key),*];
    };
}
config_fields!(impl_keys);

impl RunConfig {
    /// Parse the flat text format. Later assignments win; unknown keys and
    /// malformed lines are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            set_field(self, key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_field(self, key, value)
    }

    /// Stable one-line-per-field rendering; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        write_fields(self, &mut out);
        out
    }

    /// Keys whose values differ, with both renderings.
    pub fn diff(&self, other: &Self) -> Vec<(String, String, String)> {
        let a = self.serialize();
        let b = other.serialize();
        a.lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| {
                let (k, va) = x.split_once(" = ").unwrap();
                let (_, vb) = y.split_once(" = ").unwrap();
                (k.to_string(), va.to_string(), vb.to_string())
            })
            .collect()
    }

    /// Geometry that must agree between a stage-I checkpoint and a stage-II
    /// run for the code and models to be compatible.
    pub fn geometry_diff(&self, other: &Self) -> Vec<(String, String, String)> {
        self.diff(other)
            .into_iter()
            .filter(|(k, _, _)| k.starts_with("model.") || k.starts_with("task") || k == "task")
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.task_kind()?;
        self.model_config().validate()?;
        self.task_spec()?.validate()?;
        if self.decay_type != "cosine" {
            return Err(Error::Config(format!(
                "schedule.decay_type '{}' unsupported (only 'cosine')",
                self.decay_type
            )));
        }
        if self.batch_size == 0 || self.train_examples == 0 || self.eval_examples == 0 {
            return Err(Error::Config("batch and dataset sizes must be positive".into()));
        }
        // Warmup is clamped to the budget, so short runs stay valid.
        self.stage1_schedule()?;
        self.stage2_schedule()?;
        Ok(())
    }

    pub fn task_kind(&self) -> Result<TaskKind> {
        TaskKind::parse(&self.task)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        Ok(TaskSpec {
            kind: self.task_kind()?,
            semantic_classes: self.semantic_classes,
            instance_slots: self.instance_slots,
            depth_bins: self.depth_bins,
            max_depth: self.max_depth,
            depth_eval_crop: self.depth_eval_crop,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width: self.width,
            oracle_depth: self.oracle_depth,
            base_model_depth: self.base_model_depth,
            lm_enc_depth: self.lm_enc_depth,
            lm_dec_depth: self.lm_dec_depth,
            num_heads: self.num_heads,
            mlp_dim: self.mlp_dim,
            patch_size: self.patch_size,
            input_size: self.input_size,
            code_len: self.code_len,
            dict_size: self.dict_size,
            codeword_dim: self.codeword_dim,
            dict_momentum: self.dict_momentum,
            with_encoder_ctx: self.with_encoder_ctx,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: self.wd,
            beta1: 0.9,
            beta2_cap: self.beta2_cap,
            grad_clip_norm: self.grad_clip_norm,
        }
    }

    pub fn stage1_schedule(&self) -> Result<Schedule> {
        Schedule::new(self.lr, self.warmup_steps.min(self.stage1_steps), self.stage1_steps)
    }

    pub fn stage2_schedule(&self) -> Result<Schedule> {
        Schedule::new(
            self.stage2_lr,
            self.warmup_steps.min(self.stage2_steps),
            self.stage2_steps,
        )
    }

    /// Whether stage-I training applies code dropout, after ablations.
    pub fn effective_code_dropout(&self) -> bool {
        self.code_dropout && !self.no_dropout
    }
}
