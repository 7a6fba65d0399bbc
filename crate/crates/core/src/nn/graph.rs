//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward/backward
//! pass. Parameter leaves read their values straight from the store; every other
//! node owns its output. Nodes are appended in evaluation order, so the tape is
//! already topologically sorted and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One input column of the feature tokenizer.
#[derive(Debug, Clone)]
pub enum TokenSource {
    /// `token = value * weight + bias`
    Numeric {
        values: Vec<f64>,
        weight: Var,
        bias: Var,
    },
    /// `token = table[index] + bias`
    Categorical {
        indices: Vec<usize>,
        table: Var,
        bias: Var,
    },
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddBroadcast {
        x: Var,
        y: Var,
    },
    Mul(Var, Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CaLinear {
        z: Var,
        w: Var,
        b: Var,
        c: Var,
        combined_w: Vec<f64>,
    },
    Tokenize {
        cls: Var,
        sources: Vec<TokenSource>,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::CaLinear { .. } => "calinear",
            Op::Tokenize { .. } => "tokenize",
            Op::SelectToken { .. } => "select_token",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mse { .. } => "mse",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    track: bool,
}

impl<'s> Graph<'s> {
    /// Graph that records gradients for every trainable parameter it touches.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            track: true,
        }
    }

    /// Graph for inference; no parameter requires a gradient.
    pub fn no_grad(store: &'s ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.get(id).tensor.data(),
            _ => &node.value,
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.requires(i));
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: Vec::new(),
            op: Op::Param(id),
            requires_grad: self.track && p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::Dimension(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::Dimension(format!(
                    "linear: bias {:?} does not match output width {d_out}",
                    self.shape(b)
                )));
            }
        }
        let rows = numel(&xs) / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            d_in,
            d_out,
            self.value(x),
            (d_in, 1),
            self.value(w),
            (d_out, 1),
            &mut out,
            (d_out, 1),
            1.0,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(shape, out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(Error::Dimension(format!("add_broadcast: {xs:?} vs {ys:?}")));
        }
        let inner = numel(&ys);
        let yv = self.value(y);
        let out = self
            .value(x)
            .chunks(inner)
            .flat_map(|c| c.iter().zip(yv).map(|(a, b)| a + b))
            .collect();
        self.push(xs, out, Op::AddBroadcast { x, y }, &[x, y])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// Softmax along the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = shape.last().copied().unwrap_or(0);
        if k == 0 {
            return Err(Error::Dimension("softmax over an empty axis".into()));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        self.push(shape, out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 {
            return Err(Error::Dimension("layer_norm over an empty axis".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm epsilon must be positive, got {eps}")));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: affine parameters must have shape [{d}]"
            )));
        }
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention core on already projected
    /// `q, k, v: [B, T, d]`. Scale is `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::Dimension(format!(
                "attention: q/k/v must share a [B, T, d] shape, got {:?}/{:?}/{:?}",
                shape,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (batch, tokens, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut out = vec![0.0; batch * tokens * d];
        for b in 0..batch {
            let base = b * tokens * d;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tokens {
                    let p = &mut probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                    let qi = &qv[base + i * d + off..][..dh];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kv[base + j * d + off..][..dh];
                        *pj = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(p);
                    let oi = &mut out[base + i * d + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[base + j * d + off..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Coefficient-weighted basis layer.
    ///
    /// `z: [B, T, d_in]`, `w: [M, d_in, d_out]`, `b: [M, d_out]`, `c: [T, M]`.
    /// Token `n` of every row goes through `sum_m c[n, m] * (z W_m + b_m)`,
    /// evaluated by first folding the bases into one map per token.
    pub fn calinear(&mut self, z: Var, w: Var, b: Var, c: Var) -> Result<Var> {
        let zs = self.shape(z).to_vec();
        let ws = self.shape(w).to_vec();
        let cs = self.shape(c).to_vec();
        if zs.len() != 3 || ws.len() != 3 {
            return Err(Error::Dimension(format!(
                "calinear: expected z [B,T,d_in] and w [M,d_in,d_out], got {zs:?} and {ws:?}"
            )));
        }
        let (batch, tokens, d_in) = (zs[0], zs[1], zs[2]);
        let (m, w_in, d_out) = (ws[0], ws[1], ws[2]);
        if w_in != d_in {
            return Err(Error::Dimension(format!(
                "calinear: input width {d_in} but basis maps expect {w_in}"
            )));
        }
        if self.shape(b) != [m, d_out] {
            return Err(Error::Dimension(format!(
                "calinear: basis bias {:?}, expected [{m}, {d_out}]",
                self.shape(b)
            )));
        }
        if cs != [tokens, m] {
            return Err(Error::Dimension(format!(
                "calinear: coefficients {cs:?}, expected [{tokens}, {m}]"
            )));
        }
        let (wv, bv, cv, zv) = (self.value(w), self.value(b), self.value(c), self.value(z));
        let block = d_in * d_out;
        let mut combined_w = vec![0.0; tokens * block];
        let mut combined_b = vec![0.0; tokens * d_out];
        for n in 0..tokens {
            let cw = &mut combined_w[n * block..(n + 1) * block];
            let cb = &mut combined_b[n * d_out..(n + 1) * d_out];
            for mi in 0..m {
                let coef = cv[n * m + mi];
                cw.iter_mut()
                    .zip(&wv[mi * block..(mi + 1) * block])
                    .for_each(|(a, x)| *a += coef * x);
                cb.iter_mut()
                    .zip(&bv[mi * d_out..(mi + 1) * d_out])
                    .for_each(|(a, x)| *a += coef * x);
            }
        }
        let mut out = vec![0.0; batch * tokens * d_out];
        for bi in 0..batch {
            for n in 0..tokens {
                out[(bi * tokens + n) * d_out..][..d_out]
                    .copy_from_slice(&combined_b[n * d_out..(n + 1) * d_out]);
            }
        }
        if batch > 0 {
            for n in 0..tokens {
                gemm(
                    batch,
                    d_in,
                    d_out,
                    &zv[n * d_in..],
                    (tokens * d_in, 1),
                    &combined_w[n * block..],
                    (d_out, 1),
                    &mut out[n * d_out..],
                    (tokens * d_out, 1),
                    1.0,
                );
            }
        }
        self.push(
            vec![batch, tokens, d_out],
            out,
            Op::CaLinear {
                z,
                w,
                b,
                c,
                combined_w,
            },
            &[z, w, b, c],
        )
    }

    /// Builds `[B, 1 + F, d]` tokens: the classification embedding at position 0
    /// followed by one token per feature source.
    pub fn tokenize(&mut self, cls: Var, sources: Vec<TokenSource>) -> Result<Var> {
        let d = match self.shape(cls) {
            [d] => *d,
            s => return Err(Error::Dimension(format!("tokenize: cls shape {s:?}"))),
        };
        let batch = match sources.first() {
            Some(TokenSource::Numeric { values, .. }) => values.len(),
            Some(TokenSource::Categorical { indices, .. }) => indices.len(),
            None => return Err(Error::Dimension("tokenize: no feature columns".into())),
        };
        let tokens = sources.len() + 1;
        let mut inputs = vec![cls];
        for s in &sources {
            let (rows, bias) = match s {
                TokenSource::Numeric {
                    values,
                    weight,
                    bias,
                } => {
                    if self.shape(*weight) != [d] {
                        return Err(Error::Dimension("tokenize: numeric weight width".into()));
                    }
                    inputs.push(*weight);
                    (values.len(), *bias)
                }
                TokenSource::Categorical {
                    indices,
                    table,
                    bias,
                } => {
                    let ts = self.shape(*table);
                    if ts.len() != 2 || ts[1] != d {
                        return Err(Error::Dimension(format!("tokenize: table shape {ts:?}")));
                    }
                    if let Some(&bad) = indices.iter().find(|&&i| i >= ts[0]) {
                        return Err(Error::Data(format!(
                            "category index {bad} outside embedding table of {} rows",
                            ts[0]
                        )));
                    }
                    inputs.push(*table);
                    (indices.len(), *bias)
                }
            };
            if rows != batch {
                return Err(Error::Dimension("tokenize: ragged feature columns".into()));
            }
            if self.shape(bias) != [d] {
                return Err(Error::Dimension("tokenize: bias width".into()));
            }
            inputs.push(bias);
        }
        let mut out = vec![0.0; batch * tokens * d];
        let cls_v = self.value(cls);
        for bi in 0..batch {
            out[bi * tokens * d..][..d].copy_from_slice(cls_v);
        }
        for (f, s) in sources.iter().enumerate() {
            let t = f + 1;
            match s {
                TokenSource::Numeric {
                    values,
                    weight,
                    bias,
                } => {
                    let (wv, bv) = (self.value(*weight), self.value(*bias));
                    for (bi, &x) in values.iter().enumerate() {
                        let o = &mut out[(bi * tokens + t) * d..][..d];
                        for j in 0..d {
                            o[j] = x * wv[j] + bv[j];
                        }
                    }
                }
                TokenSource::Categorical {
                    indices,
                    table,
                    bias,
                } => {
                    let (tv, bv) = (self.value(*table), self.value(*bias));
                    for (bi, &idx) in indices.iter().enumerate() {
                        let o = &mut out[(bi * tokens + t) * d..][..d];
                        let row = &tv[idx * d..(idx + 1) * d];
                        for j in 0..d {
                            o[j] = row[j] + bv[j];
                        }
                    }
                }
            }
        }
        self.push(
            vec![batch, tokens, d],
            out,
            Op::Tokenize { cls, sources },
            &inputs,
        )
    }

    /// `x[:, index, :]` for `x: [B, T, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::Dimension(format!("select_token {index} from {s:?}")));
        }
        let (batch, tokens, d) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * d);
        for bi in 0..batch {
            out.extend_from_slice(&xv[(bi * tokens + index) * d..][..d]);
        }
        self.push(vec![batch, d], out, Op::SelectToken { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        self.push(shape, out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Dimension(format!(
                "mse: {} predictions vs {} targets",
                p.len(),
                target.len()
            )));
        }
        let loss =
            p.iter().zip(target).map(|(a, y)| (a - y) * (a - y)).sum::<f64>() / p.len() as f64;
        self.push(
            Vec::new(),
            vec![loss],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        )
    }

    /// Mean logistic cross-entropy of logits against `{0, 1}` targets.
    pub fn bce_with_logits(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Dimension(format!(
                "bce: {} logits vs {} targets",
                p.len(),
                target.len()
            )));
        }
        if let Some(bad) = target.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("binary target {bad} is not 0 or 1")));
        }
        let loss = p
            .iter()
            .zip(target)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / p.len() as f64;
        self.push(
            Vec::new(),
            vec![loss],
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        )
    }

    /// Reverse sweep from a scalar output. Returns gradients of every
    /// trainable parameter reached by the output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        let mut result = Gradients::default();
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.requires(v) {
            return None;
        }
        let len = numel(&self.nodes[v.0].shape);
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(
        &self,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        result: &mut Gradients,
    ) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => result.accumulate(*id, dy),
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (d_in, d_out) = (ws[0], ws[1]);
                let rows = dy.len() / d_out;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    gemm(
                        rows,
                        d_out,
                        d_in,
                        dy,
                        (d_out, 1),
                        self.value(*w),
                        (1, d_out),
                        dx,
                        (d_in, 1),
                        1.0,
                    );
                }
                if let Some(dw) = self.grad_slot(grads, *w) {
                    gemm(
                        d_in,
                        rows,
                        d_out,
                        self.value(*x),
                        (1, d_in),
                        dy,
                        (d_out, 1),
                        dw,
                        (d_out, 1),
                        1.0,
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.grad_slot(grads, *b) {
                        for row in dy.chunks(d_out) {
                            db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.grad_slot(grads, *v) {
                        g.iter_mut().zip(dy).for_each(|(a, d)| *a += d);
                    }
                }
            }
            Op::AddBroadcast { x, y } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(a, d)| *a += d);
                }
                if let Some(g) = self.grad_slot(grads, *y) {
                    let inner = g.len();
                    for chunk in dy.chunks(inner) {
                        g.iter_mut().zip(chunk).for_each(|(a, d)| *a += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = self.grad_slot(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                }
                if let Some(g) = self.grad_slot(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        if node.value[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    let k = *node.shape.last().unwrap();
                    for ((gr, yr), dr) in g
                        .chunks_mut(k)
                        .zip(node.value.chunks(k))
                        .zip(dy.chunks(k))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = xhat.len() / d;
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    for row in dy.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
                let gv = self.value(*gamma);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = dy[r * d + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(node, dy, grads, (*q, *k, *v), *heads, probs),
            Op::CaLinear {
                z,
                w,
                b,
                c,
                combined_w,
            } => self.calinear_backward(dy, grads, (*z, *w, *b, *c), combined_w),
            Op::Tokenize { cls, sources } => {
                let s = &node.shape;
                let (batch, tokens, d) = (s[0], s[1], s[2]);
                if let Some(g) = self.grad_slot(grads, *cls) {
                    for bi in 0..batch {
                        let row = &dy[bi * tokens * d..][..d];
                        g.iter_mut().zip(row).for_each(|(a, x)| *a += x);
                    }
                }
                for (f, src) in sources.iter().enumerate() {
                    let t = f + 1;
                    match src {
                        TokenSource::Numeric {
                            values,
                            weight,
                            bias,
                        } => {
                            if let Some(g) = self.grad_slot(grads, *weight) {
                                for (bi, &x) in values.iter().enumerate() {
                                    let row = &dy[(bi * tokens + t) * d..][..d];
                                    g.iter_mut().zip(row).for_each(|(a, r)| *a += x * r);
                                }
                            }
                            if let Some(g) = self.grad_slot(grads, *bias) {
                                for bi in 0..batch {
                                    let row = &dy[(bi * tokens + t) * d..][..d];
                                    g.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                                }
                            }
                        }
                        TokenSource::Categorical {
                            indices,
                            table,
                            bias,
                        } => {
                            if let Some(g) = self.grad_slot(grads, *table) {
                                for (bi, &idx) in indices.iter().enumerate() {
                                    let row = &dy[(bi * tokens + t) * d..][..d];
                                    g[idx * d..(idx + 1) * d]
                                        .iter_mut()
                                        .zip(row)
                                        .for_each(|(a, r)| *a += r);
                                }
                            }
                            if let Some(g) = self.grad_slot(grads, *bias) {
                                for bi in 0..batch {
                                    let row = &dy[(bi * tokens + t) * d..][..d];
                                    g.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectToken { x, index } => {
                let s = self.shape(*x).to_vec();
                if let Some(g) = self.grad_slot(grads, *x) {
                    let (batch, tokens, d) = (s[0], s[1], s[2]);
                    for bi in 0..batch {
                        let dst = &mut g[(bi * tokens + index) * d..][..d];
                        dst.iter_mut()
                            .zip(&dy[bi * d..(bi + 1) * d])
                            .for_each(|(a, r)| *a += r);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(a, d)| *a += d);
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    g.iter_mut().for_each(|a| *a += dy[0]);
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                if let Some(g) = self.grad_slot(grads, *pred) {
                    let scale = 2.0 * dy[0] / p.len() as f64;
                    for i in 0..g.len() {
                        g[i] += scale * (p[i] - target[i]);
                    }
                }
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred);
                if let Some(g) = self.grad_slot(grads, *pred) {
                    let scale = dy[0] / p.len() as f64;
                    for i in 0..g.len() {
                        g[i] += scale * (sigmoid(p[i]) - target[i]);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        probs: &[f64],
    ) {
        let s = &node.shape;
        let (batch, tokens, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = batch * tokens * d;
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut dp = vec![0.0; tokens];
        for b in 0..batch {
            let base = b * tokens * d;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tokens {
                    let p = &probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                    let doi = &dy[base + i * d + off..][..dh];
                    for j in 0..tokens {
                        let vj = &vv[base + j * d + off..][..dh];
                        dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let dvj = &mut dv[base + j * d + off..][..dh];
                        dvj.iter_mut().zip(doi).for_each(|(a, g)| *a += p[j] * g);
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..tokens {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for e in 0..dh {
                            dq[base + i * d + off + e] += ds * kv[base + j * d + off + e];
                            dk[base + j * d + off + e] += ds * qv[base + i * d + off + e];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(g) = self.grad_slot(grads, var) {
                g.iter_mut().zip(&local).for_each(|(a, x)| *a += x);
            }
        }
    }

    fn calinear_backward(
        &self,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (z, w, b, c): (Var, Var, Var, Var),
        combined_w: &[f64],
    ) {
        let zs = self.shape(z);
        let (batch, tokens, d_in) = (zs[0], zs[1], zs[2]);
        let ws = self.shape(w);
        let (m, d_out) = (ws[0], ws[2]);
        let block = d_in * d_out;
        if batch == 0 {
            return;
        }
        if let Some(dz) = self.grad_slot(grads, z) {
            for n in 0..tokens {
                gemm(
                    batch,
                    d_out,
                    d_in,
                    &dy[n * d_out..],
                    (tokens * d_out, 1),
                    &combined_w[n * block..],
                    (1, d_out),
                    &mut dz[n * d_in..],
                    (tokens * d_in, 1),
                    1.0,
                );
            }
        }
        let (need_w, need_b, need_c) = (self.requires(w), self.requires(b), self.requires(c));
        if !(need_w || need_b || need_c) {
            return;
        }
        let zv = self.value(z);
        let (wv, bv, cv) = (self.value(w), self.value(b), self.value(c));
        let mut dwn = vec![0.0; block];
        let mut dbn = vec![0.0; d_out];
        let mut dw_acc = if need_w { vec![0.0; m * block] } else { Vec::new() };
        let mut db_acc = if need_b { vec![0.0; m * d_out] } else { Vec::new() };
        let mut dc_acc = if need_c { vec![0.0; tokens * m] } else { Vec::new() };
        for n in 0..tokens {
            gemm(
                d_in,
                batch,
                d_out,
                &zv[n * d_in..],
                (1, tokens * d_in),
                &dy[n * d_out..],
                (tokens * d_out, 1),
                &mut dwn,
                (d_out, 1),
                0.0,
            );
            dbn.iter_mut().for_each(|x| *x = 0.0);
            for bi in 0..batch {
                let row = &dy[(bi * tokens + n) * d_out..][..d_out];
                dbn.iter_mut().zip(row).for_each(|(a, r)| *a += r);
            }
            for mi in 0..m {
                let coef = cv[n * m + mi];
                let wm = &wv[mi * block..(mi + 1) * block];
                let bm = &bv[mi * d_out..(mi + 1) * d_out];
                if need_w {
                    dw_acc[mi * block..(mi + 1) * block]
                        .iter_mut()
                        .zip(&dwn)
                        .for_each(|(a, g)| *a += coef * g);
                }
                if need_b {
                    db_acc[mi * d_out..(mi + 1) * d_out]
                        .iter_mut()
                        .zip(&dbn)
                        .for_each(|(a, g)| *a += coef * g);
                }
                if need_c {
                    let dot_w: f64 = wm.iter().zip(&dwn).map(|(a, b)| a * b).sum();
                    let dot_b: f64 = bm.iter().zip(&dbn).map(|(a, b)| a * b).sum();
                    dc_acc[n * m + mi] += dot_w + dot_b;
                }
            }
        }
        for (var, local) in [(w, dw_acc), (b, db_acc), (c, dc_acc)] {
            if let Some(g) = self.grad_slot(grads, var) {
                g.iter_mut().zip(&local).for_each(|(a, x)| *a += x);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
