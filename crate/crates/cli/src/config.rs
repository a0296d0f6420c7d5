use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use parec::model::{AttentionSpec, Dims, FixedPattern, ModelSpec};
use parec::numerics::Masking;
use parec::training::TrainConfig;

pub const DEFAULT_RANK_K: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Parec,
    Fparec,
    Sasrec,
    FixedAverage,
    FixedLinear,
    FixedExponential,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Parec => "parec",
            Self::Fparec => "fparec",
            Self::Sasrec => "sasrec",
            Self::FixedAverage => "fixed-average",
            Self::FixedLinear => "fixed-linear",
            Self::FixedExponential => "fixed-exponential",
        }
    }

    pub fn of(attention: &AttentionSpec) -> Self {
        match attention {
            AttentionSpec::Positional => Self::Parec,
            AttentionSpec::Factorized { .. } => Self::Fparec,
            AttentionSpec::DotProduct { .. } => Self::Sasrec,
            AttentionSpec::Fixed { pattern } => match pattern {
                FixedPattern::Average => Self::FixedAverage,
                FixedPattern::Linear => Self::FixedLinear,
                FixedPattern::Exponential => Self::FixedExponential,
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    pub max_len: usize,
    pub blocks: usize,
    /// Factorization rank; only meaningful for `fparec`.
    pub rank_k: Option<usize>,
    /// Attention heads; only meaningful for `sasrec`.
    pub heads: Option<usize>,
    pub dropout: f64,
    pub masking: Masking,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Fparec,
            dim: 64,
            max_len: 200,
            blocks: 2,
            rank_k: None,
            heads: None,
            dropout: 0.2,
            masking: Masking::Causal,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionSpec {
        match self.variant {
            Variant::Parec => AttentionSpec::Positional,
            Variant::Fparec => AttentionSpec::Factorized {
                k: self.rank_k.unwrap_or(DEFAULT_RANK_K),
            },
            Variant::Sasrec => AttentionSpec::DotProduct {
                num_heads: self.heads.unwrap_or(1),
            },
            Variant::FixedAverage => AttentionSpec::Fixed {
                pattern: FixedPattern::Average,
            },
            Variant::FixedLinear => AttentionSpec::Fixed {
                pattern: FixedPattern::Linear,
            },
            Variant::FixedExponential => AttentionSpec::Fixed {
                pattern: FixedPattern::Exponential,
            },
        }
    }

    pub fn spec(&self, num_items: usize) -> ModelSpec {
        ModelSpec {
            attention: self.attention(),
            dims: Dims {
                d: self.dim,
                n: self.max_len,
                num_blocks: self.blocks,
                num_items,
            },
            dropout: self.dropout,
            masking: self.masking,
        }
    }

    pub fn problems(&self, num_items: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.rank_k.is_some() && self.variant != Variant::Fparec {
            out.push(format!("rank_k applies only to fparec, not {}", self.variant));
        }
        if self.heads.is_some() && self.variant != Variant::Sasrec {
            out.push(format!("heads applies only to sasrec, not {}", self.variant));
        }
        out.extend(self.spec(num_items.max(1)).problems());
        out
    }
}

/// Declarative description of a training or experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory written by `prepare`.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            repeats: 3,
        }
    }
}

impl RunConfig {
    /// Parses a JSON config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Model and training overrides shared by `train` and `experiment`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prepared dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long = "rank-k")]
    pub rank_k: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long = "max-epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long = "exclude-seen")]
    pub exclude_seen: bool,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

impl Overrides {
    /// Base config from `--config` (or defaults) with every flag applied.
    pub fn resolve(&self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let m = &mut cfg.model;
        if let Some(v) = self.variant {
            if v != m.variant {
                m.rank_k = None;
                m.heads = None;
            }
            m.variant = v;
        }
        set(&mut m.dim, self.dim);
        set(&mut m.max_len, self.max_len);
        set(&mut m.blocks, self.blocks);
        set(&mut m.dropout, self.dropout);
        if self.rank_k.is_some() {
            m.rank_k = self.rank_k;
        }
        if self.heads.is_some() {
            m.heads = self.heads;
        }
        let t = &mut cfg.train;
        set(&mut t.seed, self.seed);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.patience, self.patience);
        t.exclude_seen |= self.exclude_seen;
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PhaseArg {
    Valid,
    Test,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Self as clap::ValueEnum>::from_str(s, false)
    }
}
