//! Activation magnitude and hidden-dimension sparsity measurements.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{MohdError, Result};
use crate::numerics::Tensor;

/// Squared activation, elementwise.
pub fn magnitude(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v * v).collect();
    Tensor::new(x.shape(), data).expect("same shape as input")
}

/// Fraction of entries whose squared activation falls below `eps`.
///
/// For an `n×d` tensor this equals the mean of the per-token sparsities.
pub fn sparsity(x: &Tensor, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(MohdError::Config(format!("sparsity threshold must be positive, got {eps}")));
    }
    if x.numel() == 0 {
        return Err(MohdError::Empty("sparsity input"));
    }
    let below = x.data().iter().filter(|v| *v * *v < eps).count();
    Ok(below as f64 / x.numel() as f64)
}

fn cumulative(mut m: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = m.iter().sum();
    if !(total > 0.0) {
        return Err(MohdError::Empty("cumulative magnitude of an all-zero activation"));
    }
    m.sort_by(|a, b| b.total_cmp(a));
    let mut run = 0.0;
    let mut out: Vec<f64> = m
        .iter()
        .map(|v| {
            run += v;
            run / total
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    Ok(out)
}

/// Sorted-descending running share of total magnitude for a single vector.
pub fn cumulative_magnitude_curve(x: &[f64]) -> Result<Vec<f64>> {
    cumulative(x.iter().map(|v| v * v).collect())
}

/// Curve over the per-dimension mean magnitude of an `n×d` activation.
pub fn mean_cumulative_curve(x: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = x.dims2()?;
    if n == 0 {
        return Err(MohdError::Empty("activation rows"));
    }
    let mut m = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v * v / n as f64;
        }
    }
    cumulative(m)
}

/// Indices of the `⌈q·d⌉` largest-magnitude entries (lowest index wins ties).
fn top_set(row: &[f64], q: f64) -> Vec<bool> {
    let d = row.len();
    let k = ((q * d as f64).ceil() as usize).clamp(1, d);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| (row[b] * row[b]).total_cmp(&(row[a] * row[a])));
    let mut mark = vec![false; d];
    for &i in &idx[..k] {
        mark[i] = true;
    }
    mark
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(MohdError::Config(format!("top fraction q must lie in (0, 1), got {q}")));
    }
    Ok(())
}

/// Number of dimensions that are highly activated in every one of the `w` rows.
pub fn shared_activation_count(x: &Tensor, q: f64) -> Result<usize> {
    let (w, d) = x.dims2()?;
    if w < 2 {
        return Err(MohdError::shape("shared_activation_count", format!("need at least 2 tokens, got {w}")));
    }
    check_q(q)?;
    let mut common = vec![true; d];
    for row in x.data().chunks(d) {
        for (c, m) in common.iter_mut().zip(top_set(row, q)) {
            *c &= m;
        }
    }
    Ok(common.iter().filter(|&&c| c).count())
}

/// Mean shared-activation count over consecutive windows of length `w = 2..=max_w`.
///
/// Every `w` is averaged over the same window starts `0..=n−max_w`, so the
/// table is nonincreasing in `w`.
pub fn shared_activation_table(x: &Tensor, q: f64, max_w: usize) -> Result<Vec<(usize, f64)>> {
    let (n, d) = x.dims2()?;
    check_q(q)?;
    if max_w < 2 || n < max_w {
        return Err(MohdError::shape(
            "shared_activation_table",
            format!("{n} tokens cannot fill windows up to {max_w}"),
        ));
    }
    let marks: Vec<Vec<bool>> = x.data().chunks(d).map(|row| top_set(row, q)).collect();
    let starts = n - max_w + 1;
    let mut totals = vec![0usize; max_w + 1];
    for s in 0..starts {
        let mut common = marks[s].clone();
        for w in 2..=max_w {
            for (c, &m) in common.iter_mut().zip(&marks[s + w - 1]) {
                *c &= m;
            }
            totals[w] += common.iter().filter(|&&c| c).count();
        }
    }
    Ok((2..=max_w).map(|w| (w, totals[w] as f64 / starts as f64)).collect())
}

/// Probe location inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    AttnInput,
    AttnQkvOut,
    AttnOOut,
    AttnResidualOut,
    FfnInput,
    FfnUpOut,
    FfnDownOut,
    FfnResidualOut,
}

impl Site {
    /// Probe order within a block.
    pub const ALL: [Site; 8] = [
        Site::AttnInput,
        Site::AttnQkvOut,
        Site::AttnOOut,
        Site::AttnResidualOut,
        Site::FfnInput,
        Site::FfnUpOut,
        Site::FfnDownOut,
        Site::FfnResidualOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::AttnInput => "attn-input",
            Site::AttnQkvOut => "attn-qkv-out",
            Site::AttnOOut => "attn-o-out",
            Site::AttnResidualOut => "attn-residual-out",
            Site::FfnInput => "ffn-input",
            Site::FfnUpOut => "ffn-up-out",
            Site::FfnDownOut => "ffn-down-out",
            Site::FfnResidualOut => "ffn-residual-out",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = MohdError;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| MohdError::Trace(format!("unknown probe site `{s}`")))
    }
}

/// Activations recorded at one probe site of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layer: usize,
    pub site: Site,
    /// `n_tokens × width`.
    pub values: Tensor,
}

impl ActivationTrace {
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.values.numel().max(1) as f64;
        self.values.data().iter().map(|v| v * v).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteSparsity {
    pub layer: usize,
    pub site: Site,
    pub sparsity: f64,
    pub mean_magnitude: f64,
    /// Curve over the per-dimension mean magnitude at this site.
    pub cumulative_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsityReport {
    pub sites: Vec<SiteSparsity>,
}

impl SparsityReport {
    pub fn from_traces(traces: &[ActivationTrace], eps: f64) -> Result<Self> {
        let sites = traces
            .iter()
            .map(|t| {
                Ok(SiteSparsity {
                    layer: t.layer,
                    site: t.site,
                    sparsity: sparsity(&t.values, eps)?,
                    mean_magnitude: t.mean_magnitude(),
                    cumulative_curve: mean_cumulative_curve(&t.values)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { sites })
    }

    pub fn get(&self, layer: usize, site: Site) -> Option<&SiteSparsity> {
        self.sites.iter().find(|s| s.layer == layer && s.site == site)
    }

    /// `layer,site,sparsity,mean_magnitude`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,site,sparsity,mean_magnitude")?;
        for s in &self.sites {
            writeln!(w, "{},{},{},{}", s.layer, s.site, s.sparsity, s.mean_magnitude)?;
        }
        Ok(())
    }

    /// `layer,site,rank,cumulative_fraction`, one row per dimension.
    pub fn write_curves_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,site,rank,cumulative_fraction")?;
        for s in &self.sites {
            for (k, c) in s.cumulative_curve.iter().enumerate() {
                writeln!(w, "{},{},{},{}", s.layer, s.site, k + 1, c)?;
            }
        }
        Ok(())
    }
}

/// One point of the activation-flow profile.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPoint {
    pub layer: usize,
    pub site: Site,
    pub mean_magnitude: f64,
    /// Relative to the same layer's block input (= 100).
    pub percent: f64,
}

/// Mean magnitude per site, normalised per layer so the block input reads 100.
pub fn activation_flow(traces: &[ActivationTrace]) -> Result<Vec<FlowPoint>> {
    if traces.is_empty() {
        return Err(MohdError::Empty("activation traces"));
    }
    traces
        .iter()
        .map(|t| {
            let base = traces
                .iter()
                .find(|b| b.layer == t.layer && b.site == Site::AttnInput)
                .ok_or_else(|| MohdError::Trace(format!("layer {} has no block-input probe", t.layer)))?
                .mean_magnitude();
            if !(base > 0.0) {
                return Err(MohdError::Empty("block input with zero magnitude"));
            }
            let m = t.mean_magnitude();
            Ok(FlowPoint {
                layer: t.layer,
                site: t.site,
                mean_magnitude: m,
                percent: 100.0 * m / base,
            })
        })
        .collect()
}

/// Population standard deviation of a site's flow percentage across layers.
pub fn flow_spread(flow: &[FlowPoint], site: Site) -> f64 {
    let vals: Vec<f64> = flow.iter().filter(|p| p.site == site).map(|p| p.percent).collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

pub const TRACE_HEADER: &str = "MOHD-TRACE v1";

pub fn write_trace<W: Write>(traces: &[ActivationTrace], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for t in traces {
        let (n, d) = t.values.dims2().unwrap_or((1, t.values.numel()));
        writeln!(w, "layer={} site={} n={n} d={d}", t.layer, t.site)?;
        for row in t.values.data().chunks(d.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

fn field<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str> {
    tok.and_then(|t| t.strip_prefix(key)).and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| MohdError::Trace(format!("expected `{key}=` in record header")))
}

fn number(s: &str) -> Result<usize> {
    s.parse().map_err(|_| MohdError::Trace(format!("bad integer `{s}`")))
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<ActivationTrace>> {
    let mut tokens = String::new();
    let mut lines = r.lines();
    let first = lines
        .next()
        .transpose()
        .map_err(|e| MohdError::Trace(e.to_string()))?
        .unwrap_or_default();
    if first.trim() != TRACE_HEADER {
        return Err(MohdError::Trace(format!("missing `{TRACE_HEADER}` header")));
    }
    for line in lines {
        let line = line.map_err(|e| MohdError::Trace(e.to_string()))?;
        tokens.push_str(&line);
        tokens.push('\n');
    }
    let mut it = tokens.split_whitespace().peekable();
    let mut out = Vec::new();
    while it.peek().is_some() {
        let layer = number(field(it.next(), "layer")?)?;
        let site: Site = field(it.next(), "site")?.parse()?;
        let n = number(field(it.next(), "n")?)?;
        let d = number(field(it.next(), "d")?)?;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            let tok = it.next().ok_or_else(|| MohdError::Trace(format!("layer {layer} {site}: truncated values")))?;
            data.push(tok.parse::<f64>().map_err(|_| MohdError::Trace(format!("bad float `{tok}`")))?);
        }
        out.push(ActivationTrace {
            layer,
            site,
            values: Tensor::new(&[n, d], data)?,
        });
    }
    Ok(out)
}
