//! Heat maps of position correlations and learned attention, with CSV and
//! PGM export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{shared_attention, AttentionSpec, ModelError, ModelParams, ModelSpec};
use crate::numerics::Matrix;

/// Half-width of the diagonal band used by [`band_concentration`].
pub const DEFAULT_BAND: usize = 5;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("embedding width must be positive")]
    ZeroWidth,
    #[error("block {block} out of range 1..={blocks}")]
    Block { block: usize, blocks: usize },
    #[error("attention maps are input-dependent for {0}; not supported")]
    InputDependent(String),
    #[error("model has no position embedding")]
    NoPositionEmbedding,
    #[error("output path is empty")]
    EmptyPath,
    #[error("malformed grid file: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridFormat {
    Csv,
    Pgm,
}

impl GridFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Pgm => "pgm",
        }
    }
}

/// Square causal grid of non-negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatGrid {
    pub values: Matrix,
    pub row_normalized: bool,
}

impl HeatGrid {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    /// Divides every non-zero row by its maximum.
    pub fn row_max_normalized(mut self) -> HeatGrid {
        for r in 0..self.values.rows() {
            let row = self.values.row_mut(r);
            let max = row.iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                for v in row.iter_mut() {
                    *v /= max;
                }
            }
        }
        self.row_normalized = true;
        self
    }
}

/// `exp(P Pᵀ / √d)` with entries above the diagonal zeroed, rows scaled to max 1.
pub fn positional_correlation(p: &Matrix) -> Result<HeatGrid, AnalysisError> {
    if p.cols() == 0 {
        return Err(AnalysisError::ZeroWidth);
    }
    let scale = 1.0 / (p.cols() as f64).sqrt();
    let mut c = p.matmul_nt(p).map_err(ModelError::from)?;
    for i in 0..c.rows() {
        for (j, v) in c.row_mut(i).iter_mut().enumerate() {
            *v = if j <= i { (*v * scale).exp() } else { 0.0 };
        }
    }
    Ok(HeatGrid {
        values: c,
        row_normalized: false,
    }
    .row_max_normalized())
}

/// Correlation map of a dot-product model's position embedding.
pub fn model_positional_correlation(params: &ModelParams) -> Result<HeatGrid, AnalysisError> {
    let p = params
        .position_embedding
        .as_ref()
        .ok_or(AnalysisError::NoPositionEmbedding)?;
    positional_correlation(p)
}

/// Attention weights of block `block` (1-based). Rows are scaled to max 1
/// when `normalize` is set; otherwise the raw row-stochastic matrix is kept.
pub fn attention_map(
    params: &ModelParams,
    spec: &ModelSpec,
    block: usize,
    normalize: bool,
) -> Result<HeatGrid, AnalysisError> {
    let blocks = params.blocks.len();
    if block == 0 || block > blocks {
        return Err(AnalysisError::Block { block, blocks });
    }
    if let AttentionSpec::DotProduct { .. } = spec.attention {
        return Err(AnalysisError::InputDependent(spec.attention.label()));
    }
    let a = shared_attention(params, spec, block - 1)?
        .ok_or_else(|| AnalysisError::InputDependent(spec.attention.label()))?;
    let grid = HeatGrid {
        values: a,
        row_normalized: false,
    };
    Ok(if normalize {
        grid.row_max_normalized()
    } else {
        grid
    })
}

/// Mean over rows of the share of row mass within `|i − j| ≤ band`.
pub fn band_concentration(grid: &HeatGrid, band: usize) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for (i, row) in grid.values.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        let near: f64 = row
            .iter()
            .enumerate()
            .filter(|(j, _)| i.abs_diff(*j) <= band)
            .map(|(_, v)| v)
            .sum();
        total += near / sum;
        rows += 1;
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

/// `{label}_block{block}_n{n}.{ext}` with the label reduced to file-safe characters.
pub fn grid_file_name(label: &str, block: usize, n: usize, format: GridFormat) -> String {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    let safe = safe.trim_matches('_');
    format!("{safe}_block{block}_n{n}.{}", format.extension())
}

pub fn grid_to_csv(grid: &HeatGrid) -> String {
    let mut out = String::new();
    for row in grid.values.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn grid_to_pgm(grid: &HeatGrid) -> String {
    let n = grid.n();
    let mut out = format!("P2\n{} {}\n255\n", grid.values.cols(), n);
    for row in grid.values.iter_rows() {
        let px: Vec<String> = row
            .iter()
            .map(|v| ((v * 255.0).round().clamp(0.0, 255.0) as u8).to_string())
            .collect();
        let _ = writeln!(out, "{}", px.join(" "));
    }
    out
}

pub fn export_grid(grid: &HeatGrid, path: &Path, format: GridFormat) -> Result<(), AnalysisError> {
    if path.as_os_str().is_empty() {
        return Err(AnalysisError::EmptyPath);
    }
    let text = match format {
        GridFormat::Csv => grid_to_csv(grid),
        GridFormat::Pgm => grid_to_pgm(grid),
    };
    fs::write(path, text).map_err(|source| AnalysisError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn parse_grid_csv(text: &str) -> Result<HeatGrid, AnalysisError> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| AnalysisError::Parse(format!("row {}: {e}", i + 1)))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let values = Matrix::from_rows(&rows).map_err(|e| AnalysisError::Parse(e.to_string()))?;
    if values.rows() != values.cols() {
        return Err(AnalysisError::Parse(format!(
            "grid is {}x{}, expected square",
            values.rows(),
            values.cols()
        )));
    }
    let row_normalized = values
        .iter_rows()
        .all(|r| r.iter().all(|&v| v == 0.0) || r.iter().copied().fold(0.0, f64::max) == 1.0);
    Ok(HeatGrid {
        values,
        row_normalized,
    })
}

pub fn read_grid_csv(path: &Path) -> Result<HeatGrid, AnalysisError> {
    let text = fs::read_to_string(path).map_err(|source| AnalysisError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_grid_csv(&text)
}
