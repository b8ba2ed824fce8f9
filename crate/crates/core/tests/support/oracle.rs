//! Plain-loop reference implementations, written without the tape.

use mohd::router::GateDecision;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(data: &[f64], width: usize) -> Rows {
    data.chunks(width).map(<[f64]>::to_vec).collect()
}

pub fn flat(rows: &Rows) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn matmul(x: &Rows, w: &[f64], cols: usize) -> Rows {
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; cols];
            for (i, xi) in row.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += xi * w[i * cols + j];
                }
            }
            out
        })
        .collect()
}

pub fn rmsnorm(x: &Rows, w: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter().zip(w).map(|(v, g)| v * r * g).collect()
        })
        .collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotates interleaved pairs `(2i, 2i+1)` of every head by `pos · θ^(−2i/hd)`.
pub fn rope(x: &Rows, heads: usize, seq_len: usize, theta: f64) -> Rows {
    let hd = x[0].len() / heads;
    x.iter()
        .enumerate()
        .map(|(t, row)| {
            let pos = (t % seq_len) as f64;
            let mut out = row.clone();
            for h in 0..heads {
                for i in 0..hd / 2 {
                    let angle = pos * theta.powf(-2.0 * i as f64 / hd as f64);
                    let (s, c) = angle.sin_cos();
                    let a = row[h * hd + 2 * i];
                    let b = row[h * hd + 2 * i + 1];
                    out[h * hd + 2 * i] = a * c - b * s;
                    out[h * hd + 2 * i + 1] = a * s + b * c;
                }
            }
            out
        })
        .collect()
}

/// Causal softmax attention within each sequence of `seq_len` rows.
pub fn causal_attention(q: &Rows, k: &Rows, v: &Rows, heads: usize, seq_len: usize) -> Rows {
    let width = q[0].len();
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; width]; q.len()];
    for (t, o) in out.iter_mut().enumerate() {
        let start = t - t % seq_len;
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let logits: Vec<f64> = (start..=t)
                .map(|s| q[t][cols.clone()].iter().zip(&k[s][cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (p, s) in e.iter().zip(start..=t) {
                for c in cols.clone() {
                    o[c] += p / z * v[s][c];
                }
            }
        }
    }
    out
}

/// Weights of one block, as flat row-major slices.
pub struct BlockWeights<'a> {
    pub attn_norm: &'a [f64],
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub ffn_norm: &'a [f64],
    pub w_up: &'a [f64],
    pub w_gate: &'a [f64],
    pub w_down: &'a [f64],
}

pub struct Dims {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
    pub seq_len: usize,
    pub eps: f64,
    pub theta: f64,
}

pub fn vanilla_attention(xn: &Rows, w: &BlockWeights, dims: &Dims) -> Rows {
    let a = dims.heads * dims.head_dim;
    let q = rope(&matmul(xn, w.wq, a), dims.heads, dims.seq_len, dims.theta);
    let k = rope(&matmul(xn, w.wk, a), dims.heads, dims.seq_len, dims.theta);
    let v = matmul(xn, w.wv, a);
    let o = causal_attention(&q, &k, &v, dims.heads, dims.seq_len);
    matmul(&o, w.wo, dims.hidden)
}

pub fn vanilla_ffn(xn: &Rows, w: &BlockWeights, dims: &Dims) -> Rows {
    let up = matmul(xn, w.w_up, dims.ffn);
    let gate = matmul(xn, w.w_gate, dims.ffn);
    let h: Rows = up
        .iter()
        .zip(&gate)
        .map(|(u, g)| u.iter().zip(g).map(|(a, b)| silu(*a) * b).collect())
        .collect();
    matmul(&h, w.w_down, dims.hidden)
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Pre-norm dense transformer block.
pub fn vanilla_block(x: &Rows, w: &BlockWeights, dims: &Dims) -> Rows {
    let h = add(x, &vanilla_attention(&rmsnorm(x, w.attn_norm, dims.eps), w, dims));
    add(&h, &vanilla_ffn(&rmsnorm(&h, w.ffn_norm, dims.eps), w, dims))
}

/// Per-dimension gate: the decision's weight on each coordinate of its sub-dimension, zero elsewhere.
pub fn gate_vector(dec: &GateDecision, d: usize, n_sub: usize) -> Vec<f64> {
    let de = d / n_sub;
    let mut g = vec![0.0; d];
    for (&i, &w) in dec.selected.iter().zip(&dec.weights) {
        for gj in &mut g[i * de..(i + 1) * de] {
            *gj = w;
        }
    }
    g
}

/// Dense `d×d` matrix of the fusion map with `blocks[b][i][j]` acting on strided groups.
pub fn fusion_matrix(blocks: &[f64], d: usize, r: usize) -> Vec<Vec<f64>> {
    let nb = d / r;
    let mut m = vec![vec![0.0; d]; d];
    for b in 0..nb {
        for i in 0..r {
            for j in 0..r {
                m[i * nb + b][j * nb + b] = blocks[b * r * r + i * r + j];
            }
        }
    }
    m
}

/// Gate-scaled input rows, one decision per row.
pub fn masked_inputs(xn: &Rows, decisions: &[GateDecision], n_sub: usize) -> Rows {
    xn.iter()
        .zip(decisions)
        .map(|(row, dec)| {
            let g = gate_vector(dec, row.len(), n_sub);
            row.iter().zip(&g).map(|(a, b)| a * b).collect()
        })
        .collect()
}

/// Masks and gates output rows, scales by α and applies the dense fusion matrix.
pub fn masked_outputs(y: &Rows, decisions: &[GateDecision], n_sub: usize, fusion: &[Vec<f64>]) -> Rows {
    y.iter()
        .zip(decisions)
        .map(|(row, dec)| {
            let g = gate_vector(dec, row.len(), n_sub);
            let scaled: Vec<f64> = row.iter().zip(&g).map(|(a, b)| a * b * dec.scale).collect();
            fusion.iter().map(|m| m.iter().zip(&scaled).map(|(a, b)| a * b).sum()).collect()
        })
        .collect()
}

pub fn masked_attention(xn: &Rows, w: &BlockWeights, dims: &Dims, decisions: &[GateDecision], n_sub: usize, fusion: &[Vec<f64>]) -> Rows {
    let dense = vanilla_attention(&masked_inputs(xn, decisions, n_sub), w, dims);
    masked_outputs(&dense, decisions, n_sub, fusion)
}

pub fn masked_ffn(xn: &Rows, w: &BlockWeights, dims: &Dims, decisions: &[GateDecision], n_sub: usize, fusion: &[Vec<f64>]) -> Rows {
    let dense = vanilla_ffn(&masked_inputs(xn, decisions, n_sub), w, dims);
    masked_outputs(&dense, decisions, n_sub, fusion)
}

/// Mean cross-entropy (natural log) of rows of logits.
pub fn cross_entropy(logits: &Rows, targets: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    total / logits.len() as f64
}

/// `β Σ_i P_i F_i` from raw score rows: mean score and argmax share per sub-dimension.
pub fn balance(scores: &Rows, beta: f64) -> f64 {
    let n = scores[0].len();
    let m = scores.len() as f64;
    let mut p = vec![0.0; n];
    let mut f = vec![0.0; n];
    for row in scores {
        for (pi, s) in p.iter_mut().zip(row) {
            *pi += s / m;
        }
        let mut best = 0;
        for i in 1..n {
            if row[i] > row[best] {
                best = i;
            }
        }
        f[best] += 1.0 / m;
    }
    beta * p.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>()
}
