//! Cross-modal rationale transfer through optimal transport between patch
//! embeddings and rationale-token embeddings.

mod check;
mod exact;
mod ipot;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub use exact::{exact_ot, vertex_enumeration_ot, EXACT_MAX_CELLS, ENUMERATION_MAX_CELLS};
pub use check::{ipot_check, IpotCheckReport};
pub use ipot::ipot_solve;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Cosine,
}

/// Nonnegative `m×r` cost between patches (rows) and tokens (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Mat,
    pub metric: CostMetric,
}

impl CostMatrix {
    pub fn new(values: Mat, metric: CostMetric) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cost", "empty cost matrix"));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid("cost", format!("entry {v} is not finite and nonnegative")));
        }
        Ok(Self { values, metric })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub values: Mat,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl TransportPlan {
    /// `⟨T, C⟩`.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        (&self.values * &c.values).sum()
    }

    /// Largest absolute deviation of any row or column sum from its marginal.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self
            .values
            .rows()
            .into_iter()
            .zip(&self.row_marginal)
            .map(|(r, a)| (r.sum() - a).abs());
        let cols = self
            .values
            .columns()
            .into_iter()
            .zip(&self.col_marginal)
            .map(|(c, b)| (c.sum() - b).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Which tokens take part in the transport problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportScope {
    /// Columns are the predicted rationale tokens only.
    #[default]
    RationaleTokens,
    /// Columns are all non-CLS tokens; the heatmap max runs over rationale columns.
    AllTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpotConfig {
    pub beta: f64,
    pub outer_iters: usize,
    pub inner_sinkhorn_iters: usize,
    pub convergence_tol: f64,
    pub scope: TransportScope,
}

impl Default for IpotConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            outer_iters: 3000,
            inner_sinkhorn_iters: 1,
            convergence_tol: 1e-6,
            scope: TransportScope::RationaleTokens,
        }
    }
}

impl IpotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid("ipot.beta", "must be finite and positive"));
        }
        if self.outer_iters == 0 {
            return Err(Error::invalid("ipot.outer_iters", "must be at least 1"));
        }
        if self.inner_sinkhorn_iters == 0 {
            return Err(Error::invalid("ipot.inner_sinkhorn_iters", "must be at least 1"));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return Err(Error::invalid("ipot.convergence_tol", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Cosine distance `1 - cos(e_k, e_j)` clamped to `[0, 2]`. A zero-norm vector
/// is at distance 1 from everything.
pub fn cost_matrix(patch_embs: &Mat, token_embs: &Mat, metric: CostMetric) -> Result<CostMatrix> {
    if token_embs.nrows() == 0 {
        return Err(Error::invalid("tokens", "no rationale tokens; use the all-zero heatmap"));
    }
    if patch_embs.nrows() == 0 {
        return Err(Error::invalid("patches", "no patches"));
    }
    if patch_embs.ncols() != token_embs.ncols() {
        return Err(Error::invalid(
            "embeddings",
            format!("patch width {} != token width {}", patch_embs.ncols(), token_embs.ncols()),
        ));
    }
    let norms = |m: &Mat| -> Vec<f64> { m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect() };
    let (pn, tn) = (norms(patch_embs), norms(token_embs));
    let dots = patch_embs.dot(&token_embs.t());
    let values = Mat::from_shape_fn(dots.dim(), |(k, j)| {
        let denom = pn[k] * tn[j];
        if denom == 0.0 {
            1.0
        } else {
            (1.0 - dots[[k, j]] / denom).clamp(0.0, 2.0)
        }
    });
    CostMatrix::new(values, metric)
}

/// Per-patch importance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub h: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(m: usize) -> Self {
        Self { h: vec![0.0; m] }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// `h_k = max_j T_kj`, normalized by the largest entry; all zeros if the plan is.
pub fn rationale_heatmap(plan: &TransportPlan) -> Heatmap {
    let all: Vec<usize> = (0..plan.values.ncols()).collect();
    heatmap_over_columns(plan, &all)
}

/// As [`rationale_heatmap`] with the max restricted to `columns`.
pub fn heatmap_over_columns(plan: &TransportPlan, columns: &[usize]) -> Heatmap {
    let raw: Vec<f64> = plan
        .values
        .rows()
        .into_iter()
        .map(|row| columns.iter().map(|&j| row[j]).fold(0.0, f64::max))
        .collect();
    let top = raw.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        Heatmap {
            h: raw.into_iter().map(|v| (v / top).clamp(0.0, 1.0)).collect(),
        }
    } else {
        Heatmap::zeros(raw.len())
    }
}

/// Heatmap for one instance. `patch_embs` and `token_embs` exclude the CLS
/// rows; `token_labels` marks predicted rationale tokens.
pub fn transfer_rationale(
    patch_embs: &Mat,
    token_embs: &Mat,
    token_labels: &[u8],
    cfg: &IpotConfig,
) -> Result<Heatmap> {
    if token_labels.len() != token_embs.nrows() {
        return Err(Error::invalid(
            "token_labels",
            format!("{} labels for {} tokens", token_labels.len(), token_embs.nrows()),
        ));
    }
    let rationale: Vec<usize> = (0..token_labels.len()).filter(|&j| token_labels[j] == 1).collect();
    if rationale.is_empty() {
        return Ok(Heatmap::zeros(patch_embs.nrows()));
    }
    match cfg.scope {
        TransportScope::RationaleTokens => {
            let selected = token_embs.select(ndarray::Axis(0), &rationale);
            let c = cost_matrix(patch_embs, &selected, CostMetric::Cosine)?;
            Ok(rationale_heatmap(&ipot_solve(&c, cfg)?))
        }
        TransportScope::AllTokens => {
            let c = cost_matrix(patch_embs, token_embs, CostMetric::Cosine)?;
            Ok(heatmap_over_columns(&ipot_solve(&c, cfg)?, &rationale))
        }
    }
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[derive(Serialize, Deserialize)]
struct HeatmapRecord {
    id: String,
    rows: usize,
    cols: usize,
    h: Vec<f64>,
}

/// Writes `{"id", "rows", "cols", "h"}` lines.
pub fn save_heatmaps(path: &Path, entries: &[(String, usize, usize, Heatmap)]) -> Result<()> {
    let mut out = String::new();
    for (id, rows, cols, h) in entries {
        let rec = HeatmapRecord {
            id: id.clone(),
            rows: *rows,
            cols: *cols,
            h: h.h.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_heatmaps(path: &Path) -> Result<Vec<(String, usize, usize, Heatmap)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: HeatmapRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.h.len() != rec.rows * rec.cols || rec.h.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("heatmap for {} does not match {}x{} in [0, 1]", rec.id, rec.rows, rec.cols),
            });
        }
        out.push((rec.id, rec.rows, rec.cols, Heatmap { h: rec.h }));
    }
    Ok(out)
}

/// Binary PGM, one pixel per patch, value `round(255·h)`.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, h: &Heatmap) -> Result<()> {
    if h.len() != rows * cols {
        return Err(Error::invalid("heatmap", format!("{} values for {rows}x{cols}", h.len())));
    }
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(h.h.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
