//! Model, router, training and analysis settings, plus the run-config file.
//!
//! The file is TOML with four sections (`[model]`, `[router]`, `[train]`,
//! `[analysis]`). Unknown keys are rejected; `section.key=value` overrides are
//! applied to the parsed table before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MohdError, Result};
use crate::router::{GateSpec, SubDimLayout};

/// Byte vocabulary plus a BOS marker.
pub const BYTE_VOCAB: usize = 257;
pub const BOS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Route attention and FFN through hidden-dimension sub-slices; `false` builds the dense baseline.
    pub mohd: bool,
    pub d_base: usize,
    /// Expansion factor k: the residual stream is `k·d_base` wide.
    pub expansion: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub depth: usize,
    pub vocab: usize,
    pub norm_eps: f64,
    pub rope_theta: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mohd: true,
            d_base: 64,
            expansion: 1,
            heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            depth: 4,
            vocab: BYTE_VOCAB,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub attn_subdims: usize,
    pub attn_delta: f64,
    pub attn_shared: f64,
    pub ffn_subdims: usize,
    pub ffn_delta: f64,
    pub ffn_shared: f64,
    /// Fusion block size; 0 means "use the component's sub-dimension width".
    pub fusion_r: usize,
    pub beta: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            attn_subdims: 8,
            attn_delta: 0.5,
            attn_shared: 0.375,
            ffn_subdims: 8,
            ffn_delta: 0.5,
            ffn_shared: 0.375,
            fusion_r: 0,
            beta: 0.01,
        }
    }
}

/// Architecture hyperparameters: everything needed to build a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MohdConfig {
    pub model: ModelConfig,
    pub router: RouterConfig,
}

impl Default for MohdConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            router: RouterConfig::default(),
        }
    }
}

impl MohdConfig {
    /// Residual-stream width `k·d_base`.
    pub fn hidden(&self) -> usize {
        self.model.d_base * self.model.expansion
    }

    /// Inner attention width `h·d_h`.
    pub fn attn_width(&self) -> usize {
        self.model.heads * self.model.head_dim
    }

    pub fn attn_gate(&self) -> Result<GateSpec> {
        let r = &self.router;
        GateSpec::new(r.attn_subdims, r.attn_delta, r.attn_shared)
            .map_err(|e| field_error("router.attn_*", e))
    }

    pub fn ffn_gate(&self) -> Result<GateSpec> {
        let r = &self.router;
        GateSpec::new(r.ffn_subdims, r.ffn_delta, r.ffn_shared).map_err(|e| field_error("router.ffn_*", e))
    }

    pub fn attn_layout(&self) -> Result<SubDimLayout> {
        SubDimLayout::new(self.hidden(), self.router.attn_subdims).map_err(|e| field_error("router.attn_subdims", e))
    }

    pub fn ffn_layout(&self) -> Result<SubDimLayout> {
        SubDimLayout::new(self.hidden(), self.router.ffn_subdims).map_err(|e| field_error("router.ffn_subdims", e))
    }

    /// Fusion block size for a component with the given layout.
    pub fn fusion_r(&self, layout: &SubDimLayout) -> usize {
        if self.router.fusion_r == 0 {
            layout.sub_width()
        } else {
            self.router.fusion_r
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.d_base", m.d_base),
            ("model.expansion", m.expansion),
            ("model.heads", m.heads),
            ("model.head_dim", m.head_dim),
            ("model.ffn_dim", m.ffn_dim),
            ("model.depth", m.depth),
            ("model.vocab", m.vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(MohdError::Config(format!("{name} must be positive")));
            }
        }
        if self.attn_width() != m.d_base {
            return Err(MohdError::Config(format!(
                "model.heads × model.head_dim = {} must equal model.d_base = {}",
                self.attn_width(),
                m.d_base
            )));
        }
        if m.head_dim % 2 != 0 {
            return Err(MohdError::Config("model.head_dim must be even for rotary embeddings".into()));
        }
        if !(m.norm_eps >= 0.0) || !(m.init_std > 0.0) || !(m.rope_theta > 0.0) {
            return Err(MohdError::Config("model.norm_eps, model.init_std and model.rope_theta must be positive".into()));
        }
        if !m.mohd {
            if m.expansion != 1 {
                return Err(MohdError::Config("model.expansion > 1 requires model.mohd = true".into()));
            }
            return Ok(());
        }
        let r = &self.router;
        if !(r.beta >= 0.0) {
            return Err(MohdError::Config(format!("router.beta = {} must be non-negative", r.beta)));
        }
        let components = [
            ("attn", self.attn_gate()?, self.attn_layout()?),
            ("ffn", self.ffn_gate()?, self.ffn_layout()?),
        ];
        for (name, gate, layout) in components {
            let fr = self.fusion_r(&layout);
            if fr == 0 || self.hidden() % fr != 0 {
                return Err(MohdError::Config(format!(
                    "router.fusion_r = {fr} must divide the hidden width {} ({name})",
                    self.hidden()
                )));
            }
            if m.expansion > 1 && (gate.delta() * m.expansion as f64 - 1.0).abs() > 1e-9 {
                return Err(MohdError::Config(format!(
                    "router.{name}_delta = {} must equal 1/expansion = 1/{} to keep activation constant",
                    gate.delta(),
                    m.expansion
                )));
            }
        }
        Ok(())
    }
}

fn field_error(field: &str, e: MohdError) -> MohdError {
    match e {
        MohdError::Config(msg) => MohdError::Config(format!("{field}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    pub seq_len: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub min_lr_frac: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Fraction of the corpus (its tail) held out for evaluation.
    pub holdout_frac: f64,
    pub eval_interval: usize,
    pub eval_windows: usize,
    /// Empty path disables checkpointing.
    pub checkpoint: PathBuf,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
    /// Empty path disables the metrics CSV.
    pub metrics: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            seq_len: 128,
            batch: 16,
            steps: 1000,
            lr: 3e-4,
            min_lr_frac: 0.1,
            warmup_frac: 0.05,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            seed: 1234,
            holdout_frac: 0.1,
            eval_interval: 100,
            eval_windows: 32,
            checkpoint: PathBuf::new(),
            checkpoint_interval: 0,
            metrics: PathBuf::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(MohdError::Config("train.steps must be at least 1".into()));
        }
        if self.seq_len < 2 {
            return Err(MohdError::Config("train.seq_len must be at least 2".into()));
        }
        if self.batch == 0 || self.eval_windows == 0 {
            return Err(MohdError::Config("train.batch and train.eval_windows must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(MohdError::Config("train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) || self.holdout_frac == 0.0 {
            return Err(MohdError::Config("train.holdout_frac must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(MohdError::Config("train.warmup_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Near-zero threshold on squared activations.
    pub eps: f64,
    /// Top fraction of dimensions counted as highly activated.
    pub top_q: f64,
    pub max_window: usize,
    /// Tokens fed through the model for analysis.
    pub tokens: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            top_q: 0.2,
            max_window: 9,
            tokens: 512,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(MohdError::Config("analysis.eps must be positive".into()));
        }
        if !(self.top_q > 0.0 && self.top_q < 1.0) {
            return Err(MohdError::Config("analysis.top_q must lie in (0, 1)".into()));
        }
        if self.max_window < 2 {
            return Err(MohdError::Config("analysis.max_window must be at least 2".into()));
        }
        Ok(())
    }
}

/// Everything a CLI run reads from its config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub router: RouterConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn mohd(&self) -> MohdConfig {
        MohdConfig {
            model: self.model.clone(),
            router: self.router.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mohd().validate()?;
        self.train.validate()?;
        self.analysis.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, applies `section.key=value` overrides, then validates.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| MohdError::Config(format!("{e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| MohdError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MohdError::io(path, e))?;
        Self::parse_with_overrides(&text, overrides)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| MohdError::Config(format!("override `{ov}` is not section.key=value")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| MohdError::Config(format!("override key `{key}` is not section.key")))?;
    let raw = raw.trim();
    // a bare literal (number, bool, quoted string); anything else is taken as a string
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let sec = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sec = sec
        .as_table_mut()
        .ok_or_else(|| MohdError::Config(format!("`{section}` is not a section")))?;
    sec.insert(field.to_string(), value);
    Ok(())
}
