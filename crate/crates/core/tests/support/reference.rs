//! Independent plain-array transformer used as the single-basis oracle.

use metafn_core::data::{Batch, ColumnData};
use metafn_core::model::{Assembly, DatasetId, FeatureEmbedding};
use metafn_core::nn::{LayerNorm, ParamId};

/// Plain-array forward pass of a standard FT-Transformer with ordinary FFNs.
mod plain {
    pub struct Dense {
        pub w: Vec<f64>,
        pub b: Vec<f64>,
        pub d_in: usize,
        pub d_out: usize,
    }

    impl Dense {
        pub fn apply(&self, x: &[f64]) -> Vec<f64> {
            (0..self.d_out)
                .map(|o| self.b[o] + (0..self.d_in).map(|i| x[i] * self.w[i * self.d_out + o]).sum::<f64>())
                .collect()
        }
    }

    pub struct Norm {
        pub gamma: Vec<f64>,
        pub beta: Vec<f64>,
        pub eps: f64,
    }

    impl Norm {
        pub fn apply(&self, x: &[f64]) -> Vec<f64> {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * self.gamma[i] + self.beta[i])
                .collect()
        }
    }

    pub struct Block {
        pub attention_norm: Option<Norm>,
        pub q: Dense,
        pub k: Dense,
        pub v: Dense,
        pub o: Dense,
        pub heads: usize,
        pub ffn_norm: Norm,
        pub ffn1: Dense,
        pub ffn2: Dense,
    }

    fn attention(b: &Block, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let q: Vec<_> = x.iter().map(|t| b.q.apply(t)).collect();
        let k: Vec<_> = x.iter().map(|t| b.k.apply(t)).collect();
        let v: Vec<_> = x.iter().map(|t| b.v.apply(t)).collect();
        let d = q[0].len();
        let dh = d / b.heads;
        let mut out = vec![vec![0.0; d]; x.len()];
        for h in 0..b.heads {
            let r = h * dh..(h + 1) * dh;
            for i in 0..x.len() {
                let s: Vec<f64> = (0..x.len())
                    .map(|j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..x.len() {
                    for c in r.clone() {
                        out[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
        }
        out.iter().map(|t| b.o.apply(t)).collect()
    }

    pub fn forward(tokens: Vec<Vec<f64>>, blocks: &[Block], head_norm: &Norm, head: &Dense) -> f64 {
        let mut x = tokens;
        for b in blocks {
            let h: Vec<_> = match &b.attention_norm {
                Some(n) => x.iter().map(|t| n.apply(t)).collect(),
                None => x.clone(),
            };
            let a = attention(b, &h);
            for (t, d) in x.iter_mut().zip(&a) {
                t.iter_mut().zip(d).for_each(|(u, w)| *u += w);
            }
            for t in x.iter_mut() {
                let h = b.ffn_norm.apply(t);
                let mid: Vec<f64> = b.ffn1.apply(&h).into_iter().map(|v| v.max(0.0)).collect();
                let f = b.ffn2.apply(&mid);
                t.iter_mut().zip(&f).for_each(|(u, w)| *u += w);
            }
        }
        let cls: Vec<f64> = head_norm.apply(&x[0]).into_iter().map(|v| v.max(0.0)).collect();
        head.apply(&cls)[0]
    }
}

fn values(a: &Assembly, id: ParamId) -> Vec<f64> {
    a.params.get(id).tensor.data().to_vec()
}

fn dense(a: &Assembly, w: ParamId, b: ParamId) -> plain::Dense {
    let shape = a.params.get(w).tensor.shape().to_vec();
    let (d_in, d_out) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    plain::Dense {
        w: values(a, w),
        b: values(a, b),
        d_in,
        d_out,
    }
}

fn norm(a: &Assembly, n: &LayerNorm) -> plain::Norm {
    plain::Norm {
        gamma: values(a, n.gamma),
        beta: values(a, n.beta),
        eps: n.eps,
    }
}

/// Predictions of the plain transformer whose FFN weights are the first basis
/// map of every CaLinear.
pub fn reference_predict(a: &Assembly, id: DatasetId, batch: &Batch) -> Vec<f64> {
    let parts = a.dataset(id).unwrap();
    let blocks: Vec<plain::Block> = a
        .blocks
        .iter()
        .map(|b| plain::Block {
            attention_norm: b.attention_norm.as_ref().map(|n| norm(a, n)),
            q: dense(a, b.attention.query.weight, b.attention.query.bias),
            k: dense(a, b.attention.key.weight, b.attention.key.bias),
            v: dense(a, b.attention.value.weight, b.attention.value.bias),
            o: dense(a, b.attention.output.weight, b.attention.output.bias),
            heads: b.attention.heads,
            ffn_norm: norm(a, &b.ffn_norm),
            ffn1: dense(a, b.ffn.first.basis_weight, b.ffn.first.basis_bias),
            ffn2: dense(a, b.ffn.second.basis_weight, b.ffn.second.basis_bias),
        })
        .collect();
    let head_norm = norm(a, &parts.head.norm);
    let head = dense(a, parts.head.linear.weight, parts.head.linear.bias);
    let cls = values(a, parts.tokenizer.cls);
    (0..batch.rows())
        .map(|r| {
            let mut tokens = vec![cls.clone()];
            for (emb, col) in parts.tokenizer.features.iter().zip(&batch.columns) {
                tokens.push(match (emb, col) {
                    (FeatureEmbedding::Numeric { weight, bias }, ColumnData::Numeric(x)) => values(a, *weight)
                        .iter()
                        .zip(values(a, *bias))
                        .map(|(w, b)| x[r] * w + b)
                        .collect(),
                    (FeatureEmbedding::Categorical { table, bias, cardinality }, ColumnData::Categorical(ix)) => {
                        let t = values(a, *table);
                        let d = cls.len();
                        let i = ix[r].min(*cardinality);
                        t[i * d..(i + 1) * d].iter().zip(values(a, *bias)).map(|(w, b)| w + b).collect()
                    }
                    _ => unreachable!(),
                });
            }
            plain::forward(tokens, &blocks, &head_norm, &head)
        })
        .collect()
}
