//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes, so
//! node order is a topological order and the backward sweep simply walks the
//! tape from the end.

use std::rc::Rc;

use super::tensor::{ensure_finite, gemm_acc, sigmoid, silu_scalar, softmax_in_place, Tensor};
use crate::error::{MohdError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-token sub-dimension selections shared by the sparse projection ops.
#[derive(Debug, Clone)]
pub struct SubsetRoutes {
    sub_width: usize,
    n_subdims: usize,
    selected: Vec<Vec<usize>>,
    members: Vec<Vec<usize>>,
}

impl SubsetRoutes {
    pub fn new(sub_width: usize, n_subdims: usize, selected: Vec<Vec<usize>>) -> Result<Self> {
        let mut members = vec![Vec::new(); n_subdims];
        for (t, sel) in selected.iter().enumerate() {
            for &i in sel {
                if i >= n_subdims {
                    return Err(MohdError::OutOfRange {
                        what: "sub-dimension",
                        index: i,
                        len: n_subdims,
                    });
                }
                members[i].push(t);
            }
        }
        Ok(Self {
            sub_width,
            n_subdims,
            selected,
            members,
        })
    }

    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn width(&self) -> usize {
        self.sub_width * self.n_subdims
    }

    pub fn selected(&self, token: usize) -> &[usize] {
        &self.selected[token]
    }

    /// Tokens that selected sub-dimension `i`, ascending.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Sum(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNormRows { x: Var, w: Var, eps: f64 },
    Embedding { table: Var, ids: Rc<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Rc<Vec<usize>> },
    SparseIn { x: Var, w: Var, g: Var, routes: Rc<SubsetRoutes> },
    SparseOut { h: Var, w: Var, g: Var, routes: Rc<SubsetRoutes> },
    RowScale { x: Var, s: Var },
    ScaleFactor { g: Var, k: Rc<Vec<f64>> },
    Fuse { x: Var, blocks: Var },
    Rope { x: Var, heads: usize, seq_len: usize, theta: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<f64> },
    Balance { s: Var, beta: f64, freq: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of the forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| MohdError::shape(op, format!("expected a matrix, got {:?}", t.shape())))
}

fn acc(dst: &mut Tensor, delta: &[f64]) {
    match dst.grad_mut() {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => dst.put_grad(delta.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if self.backward_done {
            return Err(MohdError::Tape("tape already consumed by backward"));
        }
        ensure_finite(value.data(), name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let mut t = t;
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of a trainable parameter.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(MohdError::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(MohdError::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(MohdError::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = x.data().iter().map(|p| p * c).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, c), &[a], "scale")
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        let x = self.value(a);
        if c.len() != x.numel() {
            return Err(MohdError::shape("mul_const", format!("{} vs {}", c.len(), x.numel())));
        }
        let out = x.data().iter().zip(c.iter()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::MulConst(a, c), &[a], "mul_const")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(a), &[a], "sum")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| silu_scalar(v)).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Silu(a), &[a], "silu")
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let w = *x.shape().last().ok_or(MohdError::Empty("softmax axis"))?;
        let mut out = x.data().to_vec();
        out.chunks_mut(w).for_each(softmax_in_place);
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(a), &[a], "softmax")
    }

    /// RMS normalisation of each row, scaled by the weight vector `w`.
    pub fn rmsnorm_rows(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let out = super::tensor::rmsnorm(self.value(x), self.value(w), eps)?;
        self.push(out, Op::RmsNormRows { x, w, eps }, &[x, w], "rmsnorm")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "embedding")?;
        if ids.is_empty() {
            return Err(MohdError::Empty("embedding ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(MohdError::OutOfRange {
                    what: "vocabulary",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let op = Op::Embedding {
            table,
            ids: Rc::new(ids.to_vec()),
        };
        self.push(Tensor::from_parts(vec![ids.len(), d], out), op, &[table], "embedding")
    }

    /// Mean token cross-entropy of `logits[n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(MohdError::shape("cross_entropy", format!("{n} rows, {} targets", targets.len())));
        }
        let mut total = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            if y >= v {
                return Err(MohdError::OutOfRange {
                    what: "vocabulary",
                    index: y,
                    len: v,
                });
            }
            let row = self.value(logits).row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let op = Op::CrossEntropy {
            logits,
            targets: Rc::new(targets.to_vec()),
        };
        self.push(Tensor::from_parts(vec![1], vec![total / n as f64]), op, &[logits], "cross_entropy")
    }

    fn check_routes(&self, rows: usize, g: Var, routes: &SubsetRoutes, op: &'static str) -> Result<()> {
        let (gn, gw) = dims2(self.value(g), op)?;
        if routes.tokens() != rows || gn != rows || gw != routes.n_subdims {
            return Err(MohdError::shape(
                op,
                format!("{rows} tokens, gates {gn}x{gw}, routes {}x{}", routes.tokens(), routes.n_subdims),
            ));
        }
        Ok(())
    }

    /// Row-sliced projection: `y_t = Σ_{i∈sel_t} g_{t,i} · x_t[Dim_i] · W[Dim_i, :]`.
    pub fn sparse_project_in(&mut self, x: Var, w: Var, g: Var, routes: &Rc<SubsetRoutes>) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "sparse_project_in")?;
        let (wd, out_w) = dims2(self.value(w), "sparse_project_in")?;
        if d != wd || d != routes.width() {
            return Err(MohdError::shape("sparse_project_in", format!("x width {d}, W rows {wd}")));
        }
        self.check_routes(n, g, routes, "sparse_project_in")?;
        let de = routes.sub_width;
        let (xv, wv, gv) = (self.value(x).data(), self.value(w).data(), self.value(g).data());
        let n_sub = routes.n_subdims;
        let mut out = vec![0.0; n * out_w];
        for i in 0..n_sub {
            let members = routes.members(i);
            if members.is_empty() {
                continue;
            }
            let mut xs = Vec::with_capacity(members.len() * de);
            for &t in members {
                let gate = gv[t * n_sub + i];
                xs.extend(xv[t * d + i * de..t * d + (i + 1) * de].iter().map(|v| v * gate));
            }
            let mut ys = vec![0.0; members.len() * out_w];
            gemm_acc(members.len(), de, out_w, &xs, false, &wv[i * de * out_w..(i + 1) * de * out_w], false, &mut ys);
            for (r, &t) in members.iter().enumerate() {
                let dst = &mut out[t * out_w..(t + 1) * out_w];
                for (a, b) in dst.iter_mut().zip(&ys[r * out_w..(r + 1) * out_w]) {
                    *a += b;
                }
            }
        }
        let op = Op::SparseIn {
            x,
            w,
            g,
            routes: Rc::clone(routes),
        };
        self.push(Tensor::from_parts(vec![n, out_w], out), op, &[x, w, g], "sparse_project_in")
    }

    /// Column-sliced projection producing only the selected output slices,
    /// each scaled by its gate, scattered into a zero `n×d` matrix.
    pub fn sparse_project_out(&mut self, h: Var, w: Var, g: Var, routes: &Rc<SubsetRoutes>) -> Result<Var> {
        let (n, a) = dims2(self.value(h), "sparse_project_out")?;
        let (wa, d) = dims2(self.value(w), "sparse_project_out")?;
        if a != wa || d != routes.width() {
            return Err(MohdError::shape("sparse_project_out", format!("h width {a}, W {wa}x{d}")));
        }
        self.check_routes(n, g, routes, "sparse_project_out")?;
        let de = routes.sub_width;
        let n_sub = routes.n_subdims;
        let (hv, wv, gv) = (self.value(h).data(), self.value(w).data(), self.value(g).data());
        let mut out = vec![0.0; n * d];
        for j in 0..n_sub {
            let members = routes.members(j);
            if members.is_empty() {
                continue;
            }
            let wj = column_block(wv, a, d, j * de, de);
            let hs = gather_rows(hv, a, members);
            let mut z = vec![0.0; members.len() * de];
            gemm_acc(members.len(), a, de, &hs, false, &wj, false, &mut z);
            for (r, &t) in members.iter().enumerate() {
                let gate = gv[t * n_sub + j];
                for c in 0..de {
                    out[t * d + j * de + c] = gate * z[r * de + c];
                }
            }
        }
        let op = Op::SparseOut {
            h,
            w,
            g,
            routes: Rc::clone(routes),
        };
        self.push(Tensor::from_parts(vec![n, d], out), op, &[h, w, g], "sparse_project_out")
    }

    /// Multiplies row `t` of `x` by the scalar `s[t]` (`s` is `n×1`).
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c) = dims2(self.value(x), "row_scale")?;
        if self.value(s).shape() != [n, 1] {
            return Err(MohdError::shape("row_scale", format!("scale {:?} for {n} rows", self.value(s).shape())));
        }
        let sv = self.value(s).data();
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        self.push(Tensor::from_parts(vec![n, c], out), Op::RowScale { x, s }, &[x, s], "row_scale")
    }

    /// Per-row activation scale `k_t / Σ_i g[t, i]` as an `n×1` column.
    pub fn scale_factor(&mut self, g: Var, k: Rc<Vec<f64>>) -> Result<Var> {
        let (n, w) = dims2(self.value(g), "scale_factor")?;
        if k.len() != n {
            return Err(MohdError::shape("scale_factor", format!("{} targets for {n} rows", k.len())));
        }
        let mut out = Vec::with_capacity(n);
        for (row, kt) in self.value(g).data().chunks(w).zip(k.iter()) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(MohdError::NonFinite("scale_factor (zero gate mass)"));
            }
            out.push(kt / s);
        }
        self.push(Tensor::from_parts(vec![n, 1], out), Op::ScaleFactor { g, k }, &[g], "scale_factor")
    }

    /// Grouped fusion: stride permutation, block-diagonal `r×r` blocks, inverse permutation.
    ///
    /// `blocks` has shape `[d/r, r, r]`; output element `i·(d/r) + b` of a row is
    /// `Σ_j blocks[b, i, j] · x[j·(d/r) + b]`.
    pub fn fuse(&mut self, x: Var, blocks: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "fuse")?;
        let (nb, r) = fusion_dims(self.value(blocks).shape(), d)?;
        let (xv, bv) = (self.value(x).data(), self.value(blocks).data());
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            let xr = &xv[t * d..(t + 1) * d];
            let yr = &mut out[t * d..(t + 1) * d];
            for b in 0..nb {
                let blk = &bv[b * r * r..(b + 1) * r * r];
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..r {
                        s += blk[i * r + j] * xr[j * nb + b];
                    }
                    yr[i * nb + b] = s;
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, d], out), Op::Fuse { x, blocks }, &[x, blocks], "fuse")
    }

    /// Rotary position embedding over each head; row `t` sits at position `t % seq_len`.
    pub fn rope(&mut self, x: Var, heads: usize, seq_len: usize, theta: f64) -> Result<Var> {
        let (n, a) = dims2(self.value(x), "rope")?;
        let hd = head_dim(a, heads, "rope")?;
        if hd % 2 != 0 || seq_len == 0 {
            return Err(MohdError::shape("rope", format!("head dim {hd} must be even")));
        }
        let mut out = self.value(x).data().to_vec();
        rotate(&mut out, n, a, hd, seq_len, theta, false);
        let op = Op::Rope {
            x,
            heads,
            seq_len,
            theta,
        };
        self.push(Tensor::from_parts(vec![n, a], out), op, &[x], "rope")
    }

    /// Causal multi-head scaled dot-product attention. Rows are grouped into
    /// consecutive sequences of `seq_len` tokens.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (n, a) = dims2(self.value(q), "attention")?;
        let hd = head_dim(a, heads, "attention")?;
        if seq_len == 0 || n % seq_len != 0 {
            return Err(MohdError::shape("attention", format!("{n} rows not a multiple of seq_len {seq_len}")));
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let n_seq = n / seq_len;
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut out = vec![0.0; n * a];
        for s in 0..n_seq {
            for h in 0..heads {
                let base = (s * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let ti = s * seq_len + i;
                    let qi = &qv[ti * a + h * hd..ti * a + (h + 1) * hd];
                    let row = &mut probs[base + i * seq_len..base + i * seq_len + i + 1];
                    for (j, p) in row.iter_mut().enumerate() {
                        let tj = s * seq_len + j;
                        let kj = &kv[tj * a + h * hd..tj * a + (h + 1) * hd];
                        *p = dot(qi, kj) * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[ti * a + h * hd..ti * a + (h + 1) * hd];
                    for (j, &p) in row.iter().enumerate() {
                        let tj = s * seq_len + j;
                        let vj = &vv[tj * a + h * hd..tj * a + (h + 1) * hd];
                        for (o, val) in oi.iter_mut().zip(vj) {
                            *o += p * val;
                        }
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            probs,
        };
        self.push(Tensor::from_parts(vec![n, a], out), op, &[q, k, v], "attention")
    }

    /// Sub-dimension load-balance loss `β Σ_i P_i F_i` over router scores `s[M×N]`.
    ///
    /// `P_i` is the mean normalised score and `F_i` the fraction of rows whose
    /// argmax (lowest index on ties) is `i`; only `P` carries gradient.
    pub fn balance_loss(&mut self, s: Var, beta: f64) -> Result<Var> {
        let (m, n) = dims2(self.value(s), "balance_loss")?;
        let sv = self.value(s).data();
        let mut freq = vec![0.0; n];
        let mut mean_p = vec![0.0; n];
        for row in sv.chunks(n) {
            freq[argmax(row)] += 1.0 / m as f64;
            let z: f64 = row.iter().sum();
            if z <= 0.0 {
                return Err(MohdError::NonFinite("balance_loss (zero score mass)"));
            }
            for (p, v) in mean_p.iter_mut().zip(row) {
                *p += v / z / m as f64;
            }
        }
        let loss = beta * mean_p.iter().zip(&freq).map(|(p, f)| p * f).sum::<f64>();
        let op = Op::Balance { s, beta, freq };
        self.push(Tensor::from_parts(vec![1], vec![loss]), op, &[s], "balance_loss")
    }

    /// Reverse sweep from the scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(MohdError::Tape("backward called twice without a new forward pass"));
        }
        if self.value(loss).numel() != 1 {
            return Err(MohdError::shape("backward", "loss must be a scalar"));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.put_grad(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (var, delta) in backprop(before, node, &grad)? {
                if before[var.0].requires_grad {
                    acc(&mut before[var.0].value, &delta);
                }
            }
        }
        Ok(())
    }
}

fn head_dim(width: usize, heads: usize, op: &'static str) -> Result<usize> {
    if heads == 0 || width % heads != 0 {
        return Err(MohdError::shape(op, format!("width {width} not divisible by {heads} heads")));
    }
    Ok(width / heads)
}

pub(crate) fn fusion_dims(shape: &[usize], d: usize) -> Result<(usize, usize)> {
    match shape {
        [nb, r, r2] if r == r2 && nb * r == d => Ok((*nb, *r)),
        other => Err(MohdError::shape("fuse", format!("blocks {other:?} for width {d}"))),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gather_rows(src: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &t in rows {
        out.extend_from_slice(&src[t * width..(t + 1) * width]);
    }
    out
}

/// Copies columns `[start, start+w)` of a row-major `rows×cols` matrix.
fn column_block(src: &[f64], rows: usize, cols: usize, start: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        out.extend_from_slice(&src[r * cols + start..r * cols + start + w]);
    }
    out
}

fn rotate(buf: &mut [f64], n: usize, a: usize, hd: usize, seq_len: usize, theta: f64, inverse: bool) {
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half).map(|i| theta.powf(-2.0 * i as f64 / hd as f64)).collect();
    for t in 0..n {
        let pos = (t % seq_len) as f64;
        let row = &mut buf[t * a..(t + 1) * a];
        for head in row.chunks_mut(hd) {
            for (i, f) in freqs.iter().enumerate() {
                let (sin, cos) = (pos * f).sin_cos();
                let sin = if inverse { -sin } else { sin };
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * cos - x1 * sin;
                head[2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn backprop(before: &[Node], node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
    let val = |v: Var| &before[v.0].value;
    let needs = |before: &[Node], v: Var| before[v.0].requires_grad;
    let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let n = val(*b).shape()[1];
            if needs(before, *a) {
                let mut da = vec![0.0; m * k];
                gemm_acc(m, n, k, g, false, val(*b).data(), true, &mut da);
                out.push((*a, da));
            }
            if needs(before, *b) {
                let mut db = vec![0.0; k * n];
                gemm_acc(k, m, n, val(*a).data(), true, g, false, &mut db);
                out.push((*b, db));
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if needs(before, *a) {
                let mut da = vec![0.0; m * k];
                gemm_acc(m, n, k, g, false, val(*b).data(), false, &mut da);
                out.push((*a, da));
            }
            if needs(before, *b) {
                let mut db = vec![0.0; n * k];
                gemm_acc(n, m, k, g, true, val(*a).data(), false, &mut db);
                out.push((*b, db));
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if needs(before, *v) {
                    out.push((*v, g.to_vec()));
                }
            }
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
            let db: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
            if needs(before, *a) {
                out.push((*a, da));
            }
            if needs(before, *b) {
                out.push((*b, db));
            }
        }
        Op::Scale(a, c) => {
            let da: Vec<f64> = g.iter().map(|x| x * c).collect();
            out.push((*a, da));
        }
        Op::MulConst(a, c) => {
            let da: Vec<f64> = g.iter().zip(c.iter()).map(|(x, y)| x * y).collect();
            out.push((*a, da));
        }
        Op::Sum(a) => {
            let da = vec![g[0]; val(*a).numel()];
            out.push((*a, da));
        }
        Op::Silu(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(val(*a).data())
                .map(|(gy, &x)| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            out.push((*a, da));
        }
        Op::SoftmaxRows(a) => {
            let y = node.value.data();
            let w = *node.value.shape().last().unwrap_or(&1);
            let mut da = vec![0.0; y.len()];
            for ((dr, yr), gr) in da.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                let inner = dot(yr, gr);
                for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - inner);
                }
            }
            out.push((*a, da));
        }
        Op::RmsNormRows { x, w, eps } => {
            let xv = val(*x).data();
            let wv = val(*w).data();
            let d = wv.len();
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; d];
            for ((xr, gr), dxr) in xv.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let r = 1.0 / (ms + eps).sqrt();
                let mut proj = 0.0;
                for j in 0..d {
                    dw[j] += gr[j] * xr[j] * r;
                    proj += gr[j] * wv[j] * xr[j];
                }
                let coef = r * r * r * proj / d as f64;
                for j in 0..d {
                    dxr[j] = r * gr[j] * wv[j] - coef * xr[j];
                }
            }
            if needs(before, *x) {
                out.push((*x, dx));
            }
            if needs(before, *w) {
                out.push((*w, dw));
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).shape()[1];
            let mut dt = vec![0.0; val(*table).numel()];
            for (t, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    dt[id * d + c] += g[t * d + c];
                }
            }
            out.push((*table, dt));
        }
        Op::CrossEntropy { logits, targets } => {
            let (n, v) = val(*logits).dims2()?;
            let mut dl = val(*logits).data().to_vec();
            for (t, row) in dl.chunks_mut(v).enumerate() {
                softmax_in_place(row);
                row[targets[t]] -= 1.0;
                for z in row.iter_mut() {
                    *z *= g[0] / n as f64;
                }
            }
            out.push((*logits, dl));
        }
        Op::SparseIn { x, w, g: gate, routes } => {
            let (n, d) = val(*x).dims2()?;
            let out_w = val(*w).shape()[1];
            let de = routes.sub_width;
            let n_sub = routes.n_subdims;
            let (xv, wv, gv) = (val(*x).data(), val(*w).data(), val(*gate).data());
            let mut dx = vec![0.0; n * d];
            let mut dw = vec![0.0; d * out_w];
            let mut dg = vec![0.0; n * n_sub];
            for i in 0..n_sub {
                let members = routes.members(i);
                if members.is_empty() {
                    continue;
                }
                let m = members.len();
                let wi = &wv[i * de * out_w..(i + 1) * de * out_w];
                let gy = gather_rows(g, out_w, members);
                // gx = dy · W_iᵀ  (m×de), unscaled by the gate
                let mut gx = vec![0.0; m * de];
                gemm_acc(m, out_w, de, &gy, false, wi, true, &mut gx);
                let mut xs = Vec::with_capacity(m * de);
                for (r, &t) in members.iter().enumerate() {
                    let gate_v = gv[t * n_sub + i];
                    let xr = &xv[t * d + i * de..t * d + (i + 1) * de];
                    dg[t * n_sub + i] += dot(xr, &gx[r * de..(r + 1) * de]);
                    for c in 0..de {
                        dx[t * d + i * de + c] += gate_v * gx[r * de + c];
                    }
                    xs.extend(xr.iter().map(|v| v * gate_v));
                }
                gemm_acc(de, m, out_w, &xs, true, &gy, false, &mut dw[i * de * out_w..(i + 1) * de * out_w]);
            }
            if needs(before, *x) {
                out.push((*x, dx));
            }
            if needs(before, *w) {
                out.push((*w, dw));
            }
            if needs(before, *gate) {
                out.push((*gate, dg));
            }
        }
        Op::SparseOut { h, w, g: gate, routes } => {
            let (n, a) = val(*h).dims2()?;
            let d = val(*w).shape()[1];
            let de = routes.sub_width;
            let n_sub = routes.n_subdims;
            let (hv, wv, gv) = (val(*h).data(), val(*w).data(), val(*gate).data());
            let mut dh = vec![0.0; n * a];
            let mut dw = vec![0.0; a * d];
            let mut dg = vec![0.0; n * n_sub];
            for j in 0..n_sub {
                let members = routes.members(j);
                if members.is_empty() {
                    continue;
                }
                let m = members.len();
                let wj = column_block(wv, a, d, j * de, de);
                let hs = gather_rows(hv, a, members);
                let mut z = vec![0.0; m * de];
                gemm_acc(m, a, de, &hs, false, &wj, false, &mut z);
                let mut dz = vec![0.0; m * de];
                for (r, &t) in members.iter().enumerate() {
                    let gate_v = gv[t * n_sub + j];
                    let gy = &g[t * d + j * de..t * d + (j + 1) * de];
                    dg[t * n_sub + j] += dot(gy, &z[r * de..(r + 1) * de]);
                    for c in 0..de {
                        dz[r * de + c] = gate_v * gy[c];
                    }
                }
                let mut dhs = vec![0.0; m * a];
                gemm_acc(m, de, a, &dz, false, &wj, true, &mut dhs);
                for (r, &t) in members.iter().enumerate() {
                    for c in 0..a {
                        dh[t * a + c] += dhs[r * a + c];
                    }
                }
                let mut dwj = vec![0.0; a * de];
                gemm_acc(a, m, de, &hs, true, &dz, false, &mut dwj);
                for r in 0..a {
                    for c in 0..de {
                        dw[r * d + j * de + c] += dwj[r * de + c];
                    }
                }
            }
            if needs(before, *h) {
                out.push((*h, dh));
            }
            if needs(before, *w) {
                out.push((*w, dw));
            }
            if needs(before, *gate) {
                out.push((*gate, dg));
            }
        }
        Op::RowScale { x, s } => {
            let (n, c) = val(*x).dims2()?;
            let (xv, sv) = (val(*x).data(), val(*s).data());
            let mut dx = vec![0.0; n * c];
            let mut ds = vec![0.0; n];
            for t in 0..n {
                for j in 0..c {
                    dx[t * c + j] = g[t * c + j] * sv[t];
                    ds[t] += g[t * c + j] * xv[t * c + j];
                }
            }
            if needs(before, *x) {
                out.push((*x, dx));
            }
            if needs(before, *s) {
                out.push((*s, ds));
            }
        }
        Op::ScaleFactor { g: gate, k } => {
            let (n, w) = val(*gate).dims2()?;
            let gv = val(*gate).data();
            let mut dg = vec![0.0; n * w];
            for t in 0..n {
                let s: f64 = gv[t * w..(t + 1) * w].iter().sum();
                let coef = -k[t] / (s * s) * g[t];
                dg[t * w..(t + 1) * w].iter_mut().for_each(|v| *v = coef);
            }
            out.push((*gate, dg));
        }
        Op::Fuse { x, blocks } => {
            let (n, d) = val(*x).dims2()?;
            let (nb, r) = fusion_dims(val(*blocks).shape(), d)?;
            let (xv, bv) = (val(*x).data(), val(*blocks).data());
            let mut dx = vec![0.0; n * d];
            let mut db = vec![0.0; nb * r * r];
            for t in 0..n {
                let xr = &xv[t * d..(t + 1) * d];
                let gr = &g[t * d..(t + 1) * d];
                let dxr = &mut dx[t * d..(t + 1) * d];
                for b in 0..nb {
                    let blk = &bv[b * r * r..(b + 1) * r * r];
                    let dblk = &mut db[b * r * r..(b + 1) * r * r];
                    for i in 0..r {
                        let gy = gr[i * nb + b];
                        for j in 0..r {
                            dxr[j * nb + b] += blk[i * r + j] * gy;
                            dblk[i * r + j] += gy * xr[j * nb + b];
                        }
                    }
                }
            }
            if needs(before, *x) {
                out.push((*x, dx));
            }
            if needs(before, *blocks) {
                out.push((*blocks, db));
            }
        }
        Op::Rope {
            x,
            heads,
            seq_len,
            theta,
        } => {
            let (n, a) = val(*x).dims2()?;
            let mut dx = g.to_vec();
            rotate(&mut dx, n, a, a / heads, *seq_len, *theta, true);
            out.push((*x, dx));
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            probs,
        } => {
            let (n, a) = val(*q).dims2()?;
            let hd = a / heads;
            let t_len = *seq_len;
            let scale = 1.0 / (hd as f64).sqrt();
            let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
            let mut dq = vec![0.0; n * a];
            let mut dk = vec![0.0; n * a];
            let mut dv = vec![0.0; n * a];
            let mut dp = vec![0.0; t_len];
            for s in 0..n / t_len {
                for h in 0..*heads {
                    let base = (s * heads + h) * t_len * t_len;
                    let off = h * hd;
                    for i in 0..t_len {
                        let ti = s * t_len + i;
                        let go = &g[ti * a + off..ti * a + off + hd];
                        let p = &probs[base + i * t_len..base + i * t_len + i + 1];
                        for j in 0..=i {
                            let tj = s * t_len + j;
                            dp[j] = dot(go, &vv[tj * a + off..tj * a + off + hd]);
                            for c in 0..hd {
                                dv[tj * a + off + c] += p[j] * go[c];
                            }
                        }
                        let inner = dot(p, &dp[..=i]);
                        for j in 0..=i {
                            let tj = s * t_len + j;
                            let ds = p[j] * (dp[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..hd {
                                dq[ti * a + off + c] += ds * kv[tj * a + off + c];
                                dk[tj * a + off + c] += ds * qv[ti * a + off + c];
                            }
                        }
                    }
                }
            }
            for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
                if needs(before, *var) {
                    out.push((*var, grad));
                }
            }
        }
        Op::Balance { s, beta, freq } => {
            let (m, n) = val(*s).dims2()?;
            let sv = val(*s).data();
            let mut ds = vec![0.0; m * n];
            for t in 0..m {
                let row = &sv[t * n..(t + 1) * n];
                let z: f64 = row.iter().sum();
                let fs: f64 = row.iter().zip(freq).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    ds[t * n + i] = g[0] * beta / m as f64 * (freq[i] / z - fs / (z * z));
                }
            }
            out.push((*s, ds));
        }
    }
    Ok(out)
}
