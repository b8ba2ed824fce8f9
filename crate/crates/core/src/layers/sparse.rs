//! Per-token sparse projections on plain tensors.

use crate::error::{MohdError, Result};
use crate::numerics::Tensor;
use crate::router::{GateDecision, SubDimLayout};

use super::FusionParams;

fn check_decision(decision: &GateDecision, layout: &SubDimLayout, op: &'static str) -> Result<()> {
    if decision.weights.len() != decision.selected.len() {
        return Err(MohdError::shape(op, "weights and selection differ in length"));
    }
    for &i in &decision.selected {
        if i >= layout.n_subdims() {
            return Err(MohdError::OutOfRange {
                what: "sub-dimension",
                index: i,
                len: layout.n_subdims(),
            });
        }
    }
    Ok(())
}

/// `Σ_k g_k · x_s[slice k] · W[Dim_{sel_k}, :]` for a gathered input `x_s`.
pub fn mohd_project_in(x_s: &Tensor, w: &Tensor, decision: &GateDecision, layout: &SubDimLayout) -> Result<Tensor> {
    check_decision(decision, layout, "mohd_project_in")?;
    let (d, out) = w.dims2()?;
    let de = layout.sub_width();
    if d != layout.hidden() || x_s.numel() != decision.selected.len() * de {
        return Err(MohdError::shape(
            "mohd_project_in",
            format!("x_s of {} for {} slices, W {d}x{out}", x_s.numel(), decision.selected.len()),
        ));
    }
    let mut y = vec![0.0; out];
    for (k, (&i, &g)) in decision.selected.iter().zip(&decision.weights).enumerate() {
        for (c, row) in layout.range(i).enumerate() {
            let xv = g * x_s.data()[k * de + c];
            for (acc, wv) in y.iter_mut().zip(w.row(row)) {
                *acc += xv * wv;
            }
        }
    }
    Tensor::vector(y)
}

/// The selected output slices `g_j · h · W[:, Dim_j]`, concatenated in ascending order.
pub fn mohd_project_out(h: &Tensor, w: &Tensor, decision: &GateDecision, layout: &SubDimLayout) -> Result<Tensor> {
    check_decision(decision, layout, "mohd_project_out")?;
    let (a, d) = w.dims2()?;
    if d != layout.hidden() || h.numel() != a {
        return Err(MohdError::shape("mohd_project_out", format!("h of {} for W {a}x{d}", h.numel())));
    }
    let mut y = Vec::with_capacity(decision.selected.len() * layout.sub_width());
    for (&j, &g) in decision.selected.iter().zip(&decision.weights) {
        for col in layout.range(j) {
            let s: f64 = (0..a).map(|r| h.data()[r] * w.data()[r * d + col]).sum();
            y.push(g * s);
        }
    }
    Tensor::vector(y)
}

/// Scatters `y_s` to full width, multiplies by α and applies the fusion map.
pub fn scatter_scale_fuse(
    y_s: &Tensor,
    decision: &GateDecision,
    layout: &SubDimLayout,
    fusion: &FusionParams,
) -> Result<Tensor> {
    check_decision(decision, layout, "scatter_scale_fuse")?;
    let de = layout.sub_width();
    if y_s.numel() != decision.selected.len() * de {
        return Err(MohdError::shape("scatter_scale_fuse", format!("{} values for {} slices", y_s.numel(), decision.selected.len())));
    }
    if fusion.width() != layout.hidden() {
        return Err(MohdError::Config(format!(
            "fusion width {} does not match hidden width {}",
            fusion.width(),
            layout.hidden()
        )));
    }
    let mut full = vec![0.0; layout.hidden()];
    for (k, &i) in decision.selected.iter().enumerate() {
        for (c, pos) in layout.range(i).enumerate() {
            full[pos] = decision.scale * y_s.data()[k * de + c];
        }
    }
    Tensor::vector(fusion.apply(&full)?)
}
