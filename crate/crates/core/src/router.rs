//! Token-to-sub-dimension routing.
//!
//! A router scores every sub-dimension with a softmax over centroid dot
//! products, keeps the shared prefix `0..φN` unconditionally and picks the
//! best `(δ−φ)N` of the remaining specialised sub-dimensions.

use std::io::Write;

use crate::error::{MohdError, Result};
use crate::numerics::{argmax, softmax_in_place, Tensor};

const FRACTION_TOL: f64 = 1e-9;

/// Partition of the hidden width into `n` contiguous slices of `width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubDimLayout {
    d: usize,
    n: usize,
    width: usize,
}

impl SubDimLayout {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if n == 0 || d == 0 || d % n != 0 {
            return Err(MohdError::Config(format!(
                "hidden width {d} is not divisible into {n} sub-dimensions"
            )));
        }
        Ok(Self { d, n, width: d / n })
    }

    pub fn hidden(&self) -> usize {
        self.d
    }

    pub fn n_subdims(&self) -> usize {
        self.n
    }

    pub fn sub_width(&self) -> usize {
        self.width
    }

    /// Column range covered by sub-dimension `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        i * self.width..(i + 1) * self.width
    }
}

/// Returns `frac · n` when it is a whole number.
fn whole(frac: f64, n: usize, what: &str) -> Result<usize> {
    let v = frac * n as f64;
    let r = v.round();
    if (v - r).abs() > FRACTION_TOL {
        return Err(MohdError::Config(format!("{what} = {frac} gives non-integral {v} of {n} sub-dimensions")));
    }
    Ok(r as usize)
}

/// Activation ratio δ and shared fraction φ for one router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSpec {
    n: usize,
    delta: f64,
    phi_shared: f64,
    k_total: usize,
    n_shared: usize,
}

impl GateSpec {
    pub fn new(n: usize, delta: f64, phi_shared: f64) -> Result<Self> {
        if n == 0 {
            return Err(MohdError::Config("router needs at least one sub-dimension".into()));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(MohdError::Config(format!("activation ratio {delta} outside (0, 1]")));
        }
        if !(0.0..=delta + FRACTION_TOL).contains(&phi_shared) {
            return Err(MohdError::Config(format!("shared fraction {phi_shared} outside [0, {delta}]")));
        }
        let k_total = whole(delta, n, "delta")?;
        let n_shared = whole(phi_shared, n, "phi_shared")?;
        if k_total == 0 {
            return Err(MohdError::Config("activation ratio selects no sub-dimension".into()));
        }
        if k_total - n_shared > n - n_shared {
            return Err(MohdError::Config("more specialised picks than specialised sub-dimensions".into()));
        }
        Ok(Self {
            n,
            delta,
            phi_shared,
            k_total,
            n_shared,
        })
    }

    pub fn n_subdims(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn phi_shared(&self) -> f64 {
        self.phi_shared
    }

    /// Number of active sub-dimensions per token (`δN`).
    pub fn k_total(&self) -> usize {
        self.k_total
    }

    /// Number of always-on sub-dimensions (`φN`).
    pub fn n_shared(&self) -> usize {
        self.n_shared
    }

    /// Number of routed picks among the specialised range (`(δ−φ)N`).
    pub fn n_routed(&self) -> usize {
        self.k_total - self.n_shared
    }
}

/// Stand-alone router state: centroids `N×d` plus the gate spec.
#[derive(Debug, Clone)]
pub struct RouterParams {
    pub centroids: Tensor,
    pub gate: GateSpec,
    pub layer: usize,
}

/// Routing outcome for a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    /// Ascending sub-dimension indices; the shared prefix is always present.
    pub selected: Vec<usize>,
    /// Softmax scores of `selected`, positionally aligned.
    pub weights: Vec<f64>,
    /// Activation scale α.
    pub scale: f64,
    /// All `N` softmax scores.
    pub scores_full: Vec<f64>,
}

impl GateDecision {
    pub fn weight_of(&self, i: usize) -> f64 {
        self.selected
            .iter()
            .position(|&s| s == i)
            .map_or(0.0, |p| self.weights[p])
    }
}

/// `softmax_i(x · centroid_i)` over all sub-dimensions.
pub fn score(x: &Tensor, centroids: &Tensor) -> Result<Tensor> {
    let (n, d) = centroids.dims2()?;
    if x.shape() != [d] {
        return Err(MohdError::shape("score", format!("token {:?} for centroids {n}x{d}", x.shape())));
    }
    let mut logits: Vec<f64> = (0..n)
        .map(|i| centroids.row(i).iter().zip(x.data()).map(|(a, b)| a * b).sum())
        .collect();
    softmax_in_place(&mut logits);
    Tensor::vector(logits)
}

/// Mixed shared/specialised selection from precomputed scores.
pub fn select_mixed(scores: &Tensor, gate: &GateSpec) -> Result<GateDecision> {
    let s = scores.data();
    if s.len() != gate.n {
        return Err(MohdError::shape("select_mixed", format!("{} scores for {} sub-dimensions", s.len(), gate.n)));
    }
    let mut selected: Vec<usize> = (0..gate.n_shared).collect();
    let mut rest: Vec<usize> = (gate.n_shared..gate.n).collect();
    // stable sort: equal scores keep ascending index order, so the lowest index wins ties
    rest.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    selected.extend_from_slice(&rest[..gate.n_routed()]);
    selected.sort_unstable();
    let weights: Vec<f64> = selected.iter().map(|&i| s[i]).collect();
    let mut decision = GateDecision {
        selected,
        weights,
        scale: 1.0,
        scores_full: s.to_vec(),
    };
    decision.scale = scale_factor(&decision)?;
    Ok(decision)
}

/// α = K / Σ g_i over the selected sub-dimensions, so that α·Σ g_i = K.
pub fn scale_factor(decision: &GateDecision) -> Result<f64> {
    if decision.selected.is_empty() {
        return Err(MohdError::Empty("gate decision"));
    }
    let mass: f64 = decision.weights.iter().sum();
    if mass <= 0.0 {
        return Err(MohdError::NonFinite("scale_factor (zero gate mass)"));
    }
    Ok(decision.selected.len() as f64 / mass)
}

/// Concatenates the selected slices of `x` in ascending sub-dimension order.
pub fn gather_sparse(x: &Tensor, decision: &GateDecision, layout: &SubDimLayout) -> Result<Tensor> {
    if x.shape() != [layout.hidden()] {
        return Err(MohdError::shape("gather_sparse", format!("{:?} for width {}", x.shape(), layout.hidden())));
    }
    let mut out = Vec::with_capacity(decision.selected.len() * layout.sub_width());
    for &i in &decision.selected {
        if i >= layout.n_subdims() {
            return Err(MohdError::OutOfRange {
                what: "sub-dimension",
                index: i,
                len: layout.n_subdims(),
            });
        }
        out.extend_from_slice(&x.data()[layout.range(i)]);
    }
    Tensor::vector(out)
}

/// `β Σ_i P_i F_i` over a batch of decisions.
pub fn balance_loss(decisions: &[GateDecision], beta: f64) -> Result<f64> {
    let first = decisions.first().ok_or(MohdError::Empty("balance_loss batch"))?;
    let n = first.scores_full.len();
    let m = decisions.len() as f64;
    let mut p = vec![0.0; n];
    let mut f = vec![0.0; n];
    for dec in decisions {
        if dec.scores_full.len() != n {
            return Err(MohdError::shape("balance_loss", "mixed router widths in batch"));
        }
        let z: f64 = dec.scores_full.iter().sum();
        for (pi, s) in p.iter_mut().zip(&dec.scores_full) {
            *pi += s / z / m;
        }
        f[argmax(&dec.scores_full)] += 1.0 / m;
    }
    Ok(beta * p.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>())
}

/// Which sub-layer a router serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Attention,
    Ffn,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Attention => "attn",
            Component::Ffn => "ffn",
        }
    }
}

/// Running per-router score and selection tallies.
#[derive(Debug, Clone, Default)]
pub struct RouteStats {
    entries: Vec<RouteTally>,
}

#[derive(Debug, Clone)]
struct RouteTally {
    layer: usize,
    component: Component,
    score_sum: Vec<f64>,
    selected: Vec<f64>,
    tokens: usize,
}

impl RouteStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one batch of decisions for the router at `(layer, component)`.
    pub fn record(&mut self, layer: usize, component: Component, decisions: &[GateDecision]) {
        let Some(first) = decisions.first() else {
            return;
        };
        let n = first.scores_full.len();
        let idx = match self.entries.iter().position(|e| e.layer == layer && e.component == component) {
            Some(i) => i,
            None => {
                self.entries.push(RouteTally {
                    layer,
                    component,
                    score_sum: vec![0.0; n],
                    selected: vec![0.0; n],
                    tokens: 0,
                });
                self.entries.sort_by_key(|e| (e.layer, e.component));
                self.entries.iter().position(|e| e.layer == layer && e.component == component).unwrap()
            }
        };
        let tally = &mut self.entries[idx];
        for dec in decisions {
            for (acc, s) in tally.score_sum.iter_mut().zip(&dec.scores_full) {
                *acc += s;
            }
            for &i in &dec.selected {
                tally.selected[i] += 1.0;
            }
            tally.tokens += 1;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rows of `(layer, component, subdim, mean_score, selection_frequency)`.
    pub fn rows(&self) -> Vec<(usize, Component, usize, f64, f64)> {
        let mut out = Vec::new();
        for e in &self.entries {
            let t = e.tokens.max(1) as f64;
            for i in 0..e.score_sum.len() {
                out.push((e.layer, e.component, i, e.score_sum[i] / t, e.selected[i] / t));
            }
        }
        out
    }

    /// Mean score vector for one router.
    pub fn mean_scores(&self, layer: usize, component: Component) -> Option<Vec<f64>> {
        self.entries.iter().find(|e| e.layer == layer && e.component == component).map(|e| {
            let t = e.tokens.max(1) as f64;
            e.score_sum.iter().map(|s| s / t).collect()
        })
    }

    /// Max over min selection frequency across specialised sub-dimensions,
    /// worst router first. Infinite when some specialised slot is never used.
    pub fn imbalance_ratio(&self, n_shared: impl Fn(Component) -> usize) -> f64 {
        let mut worst: f64 = 1.0;
        for e in &self.entries {
            let spec = &e.selected[n_shared(e.component)..];
            if spec.is_empty() {
                continue;
            }
            let max = spec.iter().copied().fold(f64::MIN, f64::max);
            let min = spec.iter().copied().fold(f64::MAX, f64::min);
            let ratio = if min > 0.0 { max / min } else { f64::INFINITY };
            worst = worst.max(ratio);
        }
        worst
    }

    /// L1 distance between the mean score vectors of two tallies, summed over routers.
    pub fn l1_distance(&self, other: &RouteStats) -> f64 {
        let mut total = 0.0;
        for e in &self.entries {
            if let Some(o) = other.mean_scores(e.layer, e.component) {
                let mine = self.mean_scores(e.layer, e.component).unwrap_or_default();
                total += mine.iter().zip(&o).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
        }
        total
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,component,subdim,mean_score,selection_frequency")?;
        for (layer, comp, i, score, freq) in self.rows() {
            writeln!(w, "{layer},{},{i},{score},{freq}", comp.name())?;
        }
        Ok(())
    }
}
