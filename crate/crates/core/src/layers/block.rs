//! Differentiable attention, FFN and residual blocks.

use std::rc::Rc;

use rand::Rng;

use crate::config::MohdConfig;
use crate::error::{MohdError, Result};
use crate::numerics::{SubsetRoutes, Tape, Tensor, Var};
use crate::router::{select_mixed, Component, GateDecision, GateSpec, SubDimLayout};
use crate::sparsity::{ActivationTrace, Site};

use super::{Bound, FusionParams, ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterIds {
    pub centroids: ParamId,
    pub fusion: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub router: Option<RouterIds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIds {
    pub w_up: ParamId,
    pub w_gate: ParamId,
    pub w_down: ParamId,
    pub router: Option<RouterIds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIds {
    pub attn_norm: ParamId,
    pub attn: AttnIds,
    pub ffn_norm: ParamId,
    pub ffn: FfnIds,
}

/// Routing geometry of one component: gate rule, slice layout, fusion block size.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteSpec {
    pub gate: GateSpec,
    pub layout: SubDimLayout,
    pub fusion_r: usize,
}

/// Shapes shared by every block of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub norm_eps: f64,
    pub rope_theta: f64,
    pub attn_route: Option<RouteSpec>,
    pub ffn_route: Option<RouteSpec>,
}

impl BlockSpec {
    pub fn from_config(cfg: &MohdConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let (attn_route, ffn_route) = if m.mohd {
            let al = cfg.attn_layout()?;
            let fl = cfg.ffn_layout()?;
            (
                Some(RouteSpec {
                    gate: cfg.attn_gate()?,
                    fusion_r: cfg.fusion_r(&al),
                    layout: al,
                }),
                Some(RouteSpec {
                    gate: cfg.ffn_gate()?,
                    fusion_r: cfg.fusion_r(&fl),
                    layout: fl,
                }),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            hidden: cfg.hidden(),
            heads: m.heads,
            head_dim: m.head_dim,
            ffn_dim: m.ffn_dim,
            norm_eps: m.norm_eps,
            rope_theta: m.rope_theta,
            attn_route,
            ffn_route,
        })
    }

    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn route(&self, c: Component) -> Option<&RouteSpec> {
        match c {
            Component::Attention => self.attn_route.as_ref(),
            Component::Ffn => self.ffn_route.as_ref(),
        }
    }
}

/// Per-token routing of one component, on the tape.
#[derive(Debug, Clone)]
pub struct Routed {
    /// Router softmax scores `n×N`; absent when the decisions were forced.
    pub scores: Option<Var>,
    /// Scores masked to the selected sub-dimensions.
    pub gates: Var,
    /// `n×1` activation scale.
    pub alpha: Var,
    pub routes: Rc<SubsetRoutes>,
    pub decisions: Vec<GateDecision>,
}

/// Scores every row of `xn` against the centroids and selects sub-dimensions.
pub fn route(tape: &mut Tape, xn: Var, centroids: Var, gate: &GateSpec, layout: &SubDimLayout) -> Result<Routed> {
    let logits = tape.matmul_nt(xn, centroids)?;
    let scores = tape.softmax_rows(logits)?;
    let n_sub = gate.n_subdims();
    let decisions = tape
        .value(scores)
        .data()
        .chunks(n_sub)
        .map(|row| select_mixed(&Tensor::vector(row.to_vec())?, gate))
        .collect::<Result<Vec<_>>>()?;
    let mut mask = vec![0.0; decisions.len() * n_sub];
    for (t, dec) in decisions.iter().enumerate() {
        for &i in &dec.selected {
            mask[t * n_sub + i] = 1.0;
        }
    }
    let gates = tape.mul_const(scores, Rc::new(mask))?;
    finish_route(tape, Some(scores), gates, decisions, layout)
}

/// Routing fixed to the given decisions; gates and α are constants.
pub fn forced_route(tape: &mut Tape, decisions: &[GateDecision], layout: &SubDimLayout) -> Result<Routed> {
    let n_sub = layout.n_subdims();
    let mut g = vec![0.0; decisions.len() * n_sub];
    for (t, dec) in decisions.iter().enumerate() {
        for (&i, &w) in dec.selected.iter().zip(&dec.weights) {
            if i >= n_sub {
                return Err(MohdError::OutOfRange {
                    what: "sub-dimension",
                    index: i,
                    len: n_sub,
                });
            }
            g[t * n_sub + i] = w;
        }
    }
    let gates = tape.constant(Tensor::new(&[decisions.len(), n_sub], g)?);
    finish_route(tape, None, gates, decisions.to_vec(), layout)
}

fn finish_route(
    tape: &mut Tape,
    scores: Option<Var>,
    gates: Var,
    decisions: Vec<GateDecision>,
    layout: &SubDimLayout,
) -> Result<Routed> {
    let k = Rc::new(decisions.iter().map(|d| d.selected.len() as f64).collect());
    let alpha = tape.scale_factor(gates, k)?;
    let selected = decisions.iter().map(|d| d.selected.clone()).collect();
    let routes = Rc::new(SubsetRoutes::new(layout.sub_width(), layout.n_subdims(), selected)?);
    Ok(Routed {
        scores,
        gates,
        alpha,
        routes,
        decisions,
    })
}

fn project_in(tape: &mut Tape, x: Var, w: Var, routed: Option<&Routed>) -> Result<Var> {
    match routed {
        Some(r) => tape.sparse_project_in(x, w, r.gates, &r.routes),
        None => tape.matmul(x, w),
    }
}

/// Output projection, then α and fusion on the routed path.
fn project_out(tape: &mut Tape, h: Var, w: Var, routed: Option<&Routed>, fusion: Option<Var>) -> Result<Var> {
    match (routed, fusion) {
        (Some(r), Some(f)) => {
            let y = tape.sparse_project_out(h, w, r.gates, &r.routes)?;
            let y = tape.row_scale(y, r.alpha)?;
            tape.fuse(y, f)
        }
        (None, _) => tape.matmul(h, w),
        (Some(_), None) => Err(MohdError::Config("routed projection without fusion blocks".into())),
    }
}

/// Attention output plus the `[Q|K|V]` projections (before rotation).
#[derive(Debug, Clone, Copy)]
pub struct AttnOut {
    pub out: Var,
    pub qkv: [Var; 3],
}

/// Causal multi-head attention over normalised rows `xn` (`n×d`, sequences of `seq_len`).
///
/// With `routed` present, Q/K/V read only the selected row slices of their
/// weights, O writes only the selected column slices, and the result is
/// scaled by α and fused; otherwise this is dense attention.
pub fn attention(
    tape: &mut Tape,
    bound: &Bound,
    ids: &AttnIds,
    spec: &BlockSpec,
    xn: Var,
    routed: Option<&Routed>,
    seq_len: usize,
) -> Result<AttnOut> {
    let q = project_in(tape, xn, bound.var(ids.wq), routed)?;
    let k = project_in(tape, xn, bound.var(ids.wk), routed)?;
    let v = project_in(tape, xn, bound.var(ids.wv), routed)?;
    let qr = tape.rope(q, spec.heads, seq_len, spec.rope_theta)?;
    let kr = tape.rope(k, spec.heads, seq_len, spec.rope_theta)?;
    let o = tape.causal_attention(qr, kr, v, spec.heads, seq_len)?;
    let fusion = ids.router.map(|r| bound.var(r.fusion));
    let out = project_out(tape, o, bound.var(ids.wo), routed, fusion)?;
    Ok(AttnOut { out, qkv: [q, k, v] })
}

/// FFN output plus the up projection (before the nonlinearity).
#[derive(Debug, Clone, Copy)]
pub struct FfnOut {
    pub out: Var,
    pub up: Var,
}

/// `down(silu(up(x)) ⊙ gate(x))`, routed like [`attention`] when `routed` is present.
pub fn ffn(tape: &mut Tape, bound: &Bound, ids: &FfnIds, xn: Var, routed: Option<&Routed>) -> Result<FfnOut> {
    let up = project_in(tape, xn, bound.var(ids.w_up), routed)?;
    let gate = project_in(tape, xn, bound.var(ids.w_gate), routed)?;
    let act = tape.silu(up)?;
    let h = tape.mul(act, gate)?;
    let fusion = ids.router.map(|r| bound.var(r.fusion));
    let out = project_out(tape, h, bound.var(ids.w_down), routed, fusion)?;
    Ok(FfnOut { out, up })
}

/// Routing outcome of one component in one forward pass.
#[derive(Debug, Clone)]
pub struct RouteRecord {
    pub layer: usize,
    pub component: Component,
    pub scores: Option<Var>,
    pub decisions: Vec<GateDecision>,
}

/// Side outputs of block forwards.
#[derive(Debug, Clone, Default)]
pub struct BlockRecord {
    /// Capture probe activations when set.
    pub probe: bool,
    pub traces: Vec<ActivationTrace>,
    pub routes: Vec<RouteRecord>,
    /// Fixed decisions for the attention and FFN routers instead of scoring.
    pub forced: Option<(Vec<GateDecision>, Vec<GateDecision>)>,
}

impl BlockRecord {
    pub fn probing() -> Self {
        Self {
            probe: true,
            ..Self::default()
        }
    }

    fn capture(&mut self, tape: &Tape, layer: usize, site: Site, vars: &[Var]) {
        if !self.probe {
            return;
        }
        let values = if let [v] = vars {
            tape.value(*v).clone().with_requires_grad(false)
        } else {
            let n = tape.value(vars[0]).shape()[0];
            let widths: Vec<usize> = vars.iter().map(|v| tape.value(*v).shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(n * total);
            for t in 0..n {
                for v in vars {
                    data.extend_from_slice(tape.value(*v).row(t));
                }
            }
            Tensor::new(&[n, total], data).expect("concatenated probe")
        };
        self.traces.push(ActivationTrace { layer, site, values });
    }
}

/// Pre-norm residual block: `h = x + Attn(norm(x))`, `y = h + FFN(norm(h))`.
///
/// Routers are present in MoHD mode and absent in the dense baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub layer: usize,
    pub ids: BlockIds,
}

impl Block {
    /// Registers this block's parameters: matrices and centroids `N(0, std²)`,
    /// unit norms, identity fusion.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, spec: &BlockSpec, layer: usize, std: f64, rng: &mut R) -> Result<Self> {
        let (d, a, f) = (spec.hidden, spec.attn_width(), spec.ffn_dim);
        let p = |s: &str| format!("layers.{layer}.{s}");
        let attn_norm = store.add(p("attn_norm"), ParamKind::Norm, Tensor::full(&[d], 1.0));
        let wq = store.add(p("attn.wq"), ParamKind::Matrix, Tensor::randn(&[d, a], std, rng));
        let wk = store.add(p("attn.wk"), ParamKind::Matrix, Tensor::randn(&[d, a], std, rng));
        let wv = store.add(p("attn.wv"), ParamKind::Matrix, Tensor::randn(&[d, a], std, rng));
        let wo = store.add(p("attn.wo"), ParamKind::Matrix, Tensor::randn(&[a, d], std, rng));
        let attn_router = match &spec.attn_route {
            Some(rs) => Some(init_router(store, &p("attn"), rs, d, std, rng)?),
            None => None,
        };
        let ffn_norm = store.add(p("ffn_norm"), ParamKind::Norm, Tensor::full(&[d], 1.0));
        let w_up = store.add(p("ffn.w_up"), ParamKind::Matrix, Tensor::randn(&[d, f], std, rng));
        let w_gate = store.add(p("ffn.w_gate"), ParamKind::Matrix, Tensor::randn(&[d, f], std, rng));
        let w_down = store.add(p("ffn.w_down"), ParamKind::Matrix, Tensor::randn(&[f, d], std, rng));
        let ffn_router = match &spec.ffn_route {
            Some(rs) => Some(init_router(store, &p("ffn"), rs, d, std, rng)?),
            None => None,
        };
        Ok(Self {
            layer,
            ids: BlockIds {
                attn_norm,
                attn: AttnIds {
                    wq,
                    wk,
                    wv,
                    wo,
                    router: attn_router,
                },
                ffn_norm,
                ffn: FfnIds {
                    w_up,
                    w_gate,
                    w_down,
                    router: ffn_router,
                },
            },
        })
    }

    pub fn is_routed(&self) -> bool {
        self.ids.attn.router.is_some()
    }

    fn component_route(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        spec: &BlockSpec,
        xn: Var,
        component: Component,
        rec: &mut BlockRecord,
    ) -> Result<Option<Routed>> {
        let router = match component {
            Component::Attention => self.ids.attn.router,
            Component::Ffn => self.ids.ffn.router,
        };
        let (Some(router), Some(rs)) = (router, spec.route(component)) else {
            return Ok(None);
        };
        let routed = match &rec.forced {
            Some((a, f)) => {
                let decisions = if component == Component::Attention { a } else { f };
                if decisions.len() != tape.value(xn).shape()[0] {
                    return Err(MohdError::shape("forced routing", "one decision per token required"));
                }
                forced_route(tape, decisions, &rs.layout)?
            }
            None => route(tape, xn, bound.var(router.centroids), &rs.gate, &rs.layout)?,
        };
        rec.routes.push(RouteRecord {
            layer: self.layer,
            component,
            scores: routed.scores,
            decisions: routed.decisions.clone(),
        });
        Ok(Some(routed))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        spec: &BlockSpec,
        x: Var,
        seq_len: usize,
        rec: &mut BlockRecord,
    ) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        if n == 0 || seq_len == 0 {
            return Err(MohdError::Empty("block input"));
        }
        let l = self.layer;
        rec.capture(tape, l, Site::AttnInput, &[x]);
        let xn = tape.rmsnorm_rows(x, bound.var(self.ids.attn_norm), spec.norm_eps)?;
        let routed = self.component_route(tape, bound, spec, xn, Component::Attention, rec)?;
        let a = attention(tape, bound, &self.ids.attn, spec, xn, routed.as_ref(), seq_len)?;
        rec.capture(tape, l, Site::AttnQkvOut, &a.qkv);
        rec.capture(tape, l, Site::AttnOOut, &[a.out]);
        let h = tape.add(x, a.out)?;
        rec.capture(tape, l, Site::AttnResidualOut, &[h]);

        let hn = tape.rmsnorm_rows(h, bound.var(self.ids.ffn_norm), spec.norm_eps)?;
        rec.capture(tape, l, Site::FfnInput, &[hn]);
        let routed = self.component_route(tape, bound, spec, hn, Component::Ffn, rec)?;
        let f = ffn(tape, bound, &self.ids.ffn, hn, routed.as_ref())?;
        rec.capture(tape, l, Site::FfnUpOut, &[f.up]);
        rec.capture(tape, l, Site::FfnDownOut, &[f.out]);
        let y = tape.add(h, f.out)?;
        rec.capture(tape, l, Site::FfnResidualOut, &[y]);
        Ok(y)
    }
}

fn init_router<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    rs: &RouteSpec,
    d: usize,
    std: f64,
    rng: &mut R,
) -> Result<RouterIds> {
    let centroids = store.add(
        format!("{prefix}.centroids"),
        ParamKind::Centroids,
        Tensor::randn(&[rs.gate.n_subdims(), d], std, rng),
    );
    let blocks = FusionParams::identity(d, rs.fusion_r)?.blocks;
    let fusion = store.add(format!("{prefix}.fusion"), ParamKind::Fusion, blocks);
    Ok(RouterIds { centroids, fusion })
}
