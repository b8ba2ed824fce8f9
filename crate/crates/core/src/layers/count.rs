use crate::config::MohdConfig;
use crate::error::Result;

use super::BlockSpec;

/// Parameter totals by group. "Active" counts are what one token touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub embedding: usize,
    pub head: usize,
    pub attn_matrix: usize,
    pub attn_matrix_active: usize,
    pub ffn_matrix: usize,
    pub ffn_matrix_active: usize,
    pub router: usize,
    pub fusion: usize,
    pub norm: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embedding + self.head + self.attn_matrix + self.ffn_matrix + self.router + self.fusion + self.norm
    }

    /// Per-token activated parameters, excluding input and output embeddings.
    pub fn activated(&self) -> usize {
        self.matrix_active() + self.router + self.fusion + self.norm
    }

    pub fn matrix(&self) -> usize {
        self.attn_matrix + self.ffn_matrix
    }

    pub fn matrix_active(&self) -> usize {
        self.attn_matrix_active + self.ffn_matrix_active
    }

    pub fn matrix_ratio(&self) -> f64 {
        self.matrix_active() as f64 / self.matrix() as f64
    }
}

/// Counts parameters implied by a configuration.
pub fn count_params(cfg: &MohdConfig) -> Result<ParamCount> {
    let spec = BlockSpec::from_config(cfg)?;
    let (d, a, f, depth) = (spec.hidden, spec.attn_width(), spec.ffn_dim, cfg.model.depth);
    let v = cfg.model.vocab;
    // rows (or columns) of the hidden axis that one token reads
    let active_rows = |rs: Option<&super::block::RouteSpec>| rs.map_or(d, |r| r.gate.k_total() * r.layout.sub_width());
    let extra = |rs: Option<&super::block::RouteSpec>| rs.map_or((0, 0), |r| (r.gate.n_subdims() * d, d * r.fusion_r));
    let (ar, ff) = (extra(spec.attn_route.as_ref()), extra(spec.ffn_route.as_ref()));
    Ok(ParamCount {
        embedding: v * d,
        head: d * v,
        attn_matrix: depth * 4 * d * a,
        attn_matrix_active: depth * 4 * active_rows(spec.attn_route.as_ref()) * a,
        ffn_matrix: depth * 3 * d * f,
        ffn_matrix_active: depth * 3 * active_rows(spec.ffn_route.as_ref()) * f,
        router: depth * (ar.0 + ff.0),
        fusion: depth * (ar.1 + ff.1),
        norm: depth * 2 * d + d,
    })
}
