use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore, Role, Scope};
use super::tensor::Tensor;
use crate::data::TaskType;
use crate::error::{Error, Result};

/// Uniform `[-bound, bound]` initialization, `bound = 1/sqrt(fan_in)`.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product")
}

/// Affine map `x · W + b`, `W: [d_in, d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        scope: Scope,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{prefix}.weight"),
            kaiming_uniform(rng, vec![d_in, d_out], d_in),
            scope,
            Role::Weight,
        )?;
        let bias = store.register(
            format!("{prefix}.bias"),
            kaiming_uniform(rng, vec![d_out], d_in),
            scope,
            Role::Bias,
        )?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, eps: f64, scope: Scope) -> Result<Self> {
        let gamma = store.register(
            format!("{prefix}.gamma"),
            Tensor::filled(vec![d], 1.0),
            scope,
            Role::Norm,
        )?;
        let beta = store.register(format!("{prefix}.beta"), Tensor::zeros(vec![d]), scope, Role::Norm)?;
        Ok(Self { gamma, beta, eps })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Multi-head self-attention with query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        d: usize,
        heads: usize,
        scope: Scope,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{prefix}.query"), d, d, scope)?,
            key: Linear::new(store, rng, &format!("{prefix}.key"), d, d, scope)?,
            value: Linear::new(store, rng, &format!("{prefix}.value"), d, d, scope)?,
            output: Linear::new(store, rng, &format!("{prefix}.output"), d, d, scope)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let ctx = g.attention(q, k, v, self.heads)?;
        self.output.forward(g, ctx)
    }

    pub fn params(&self) -> [ParamId; 8] {
        [
            self.query.weight,
            self.query.bias,
            self.key.weight,
            self.key.bias,
            self.value.weight,
            self.value.bias,
            self.output.weight,
            self.output.bias,
        ]
    }
}

/// Cross-entropy on logits for binary tasks, mean squared error for regression.
pub fn compute_loss(g: &mut Graph<'_>, pred: Var, target: &[f64], task: TaskType) -> Result<Var> {
    match task {
        TaskType::Binary => g.bce_with_logits(pred, target),
        TaskType::Regression => g.mse(pred, target),
    }
}

fn eval_store<F>(inputs: &[(&str, &Tensor)], f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids = inputs
        .iter()
        .map(|(name, t)| store.register(*name, (*t).clone(), Scope::Shared, Role::Weight))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::no_grad(&store);
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.tensor(out))
}

/// Value-level `x · W + b` broadcast over the leading axes of `x`.
pub fn apply_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    eval_store(&[("x", x), ("w", w), ("b", b)], |g, v| g.linear(v[0], v[1], Some(v[2])))
}

/// Value-level softmax along the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    eval_store(&[("x", x)], |g, v| g.softmax(v[0]))
}

/// Value-level layer normalization along the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    eval_store(&[("x", x), ("g", gamma), ("b", beta)], |g, v| {
        g.layer_norm(v[0], v[1], v[2], eps)
    })
}

/// Value-level loss; see [`compute_loss`].
pub fn loss_value(pred: &Tensor, target: &[f64], task: TaskType) -> Result<f64> {
    let t = eval_store(&[("p", pred)], |g, v| compute_loss(g, v[0], target, task))?;
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = t(vec![2], vec![1.0, 2.0]);
        let id = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = apply_linear(&x, &id, &t(vec![2], vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);

        let out = apply_linear(&x, &t(vec![2, 1], vec![1.0, 1.0]), &t(vec![1], vec![3.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);

        let zero = t(vec![2], vec![0.0, 0.0]);
        let w = t(vec![2, 2], vec![0.3, -1.2, 4.0, 2.5]);
        let out = apply_linear(&zero, &w, &t(vec![2], vec![5.0, -5.0])).unwrap();
        assert_eq!(out.data(), &[5.0, -5.0]);
    }

    #[test]
    fn linear_rejects_mismatched_inner_dimension() {
        let x = t(vec![3], vec![1.0, 2.0, 3.0]);
        let w = t(vec![2, 2], vec![0.0; 4]);
        let err = apply_linear(&x, &w, &t(vec![2], vec![0.0; 2])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn linear_broadcasts_over_leading_axes() {
        let x = t(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 1.0, 1.0]);
        let w = t(vec![2, 1], vec![2.0, 3.0]);
        let out = apply_linear(&x, &w, &t(vec![1], vec![1.0])).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn softmax_examples() {
        let out = softmax(&t(vec![2], vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
        let out = softmax(&t(vec![2], vec![2f64.ln(), 0.0])).unwrap();
        assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&t(vec![1], vec![5.0])).unwrap().data(), &[1.0]);
        assert!(matches!(
            softmax(&t(vec![3, 0], vec![])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let out = softmax(&t(vec![3], vec![1000.0, 999.0, -1000.0])).unwrap();
        assert!(out.is_finite());
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(vec![2], vec![1.0, 1.0]);
        let zeros = t(vec![2], vec![0.0, 0.0]);
        let out = layer_norm(&t(vec![2], vec![1.0, 3.0]), &ones, &zeros, 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 1.0).abs() < 1e-9);

        let c = t(vec![3], vec![4.0, 4.0, 4.0]);
        let out = layer_norm(&c, &t(vec![3], vec![1.0; 3]), &t(vec![3], vec![0.0; 3]), 1e-5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);

        let sevens = t(vec![2], vec![7.0, 7.0]);
        let out = layer_norm(&t(vec![2], vec![1.0, 3.0]), &zeros, &sevens, 1e-5).unwrap();
        assert_eq!(out.data(), &[7.0, 7.0]);

        assert!(matches!(
            layer_norm(&t(vec![0], vec![]), &t(vec![0], vec![]), &t(vec![0], vec![]), 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let p = t(vec![2, 1], vec![0.5, -1.0]);
        assert_eq!(loss_value(&p, &[0.5, -1.0], TaskType::Regression).unwrap(), 0.0);
        let l = loss_value(&t(vec![1], vec![0.0]), &[1.0], TaskType::Binary).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(
            loss_value(&t(vec![1], vec![0.0]), &[2.0], TaskType::Regression).unwrap(),
            4.0
        );
        assert!(matches!(
            loss_value(&t(vec![1], vec![0.0]), &[2.0], TaskType::Binary),
            Err(Error::Data(_))
        ));
    }

    fn attention_fixture(d: usize, heads: usize) -> (ParamStore, SelfAttention, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng, "attn", d, heads, Scope::Shared).unwrap();
        (store, attn, rng)
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let (store, attn, mut rng) = attention_fixture(4, 2);
        let x = uniform(&mut rng, vec![1, 1, 4], 1.0);
        let mut g = Graph::no_grad(&store);
        let xv = g.constant(x.clone());
        let out = attn.forward(&mut g, xv).unwrap();
        let out = g.tensor(out);

        let p = |id| store.get(id).tensor.clone();
        let v = apply_linear(&x, &p(attn.value.weight), &p(attn.value.bias)).unwrap();
        let expected = apply_linear(&v, &p(attn.output.weight), &p(attn.output.bias)).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let (store, attn, mut rng) = attention_fixture(8, 2);
        let tok = uniform(&mut rng, vec![8], 1.0);
        let mut data = tok.data().to_vec();
        data.extend_from_slice(tok.data());
        let mut g = Graph::no_grad(&store);
        let x = g.constant(Tensor::new(vec![1, 2, 8], data).unwrap());
        let out = attn.forward(&mut g, x).unwrap();
        let v = g.value(out);
        assert_eq!(&v[..8], &v[8..]);
    }

    #[test]
    fn attention_shape_and_heads_check() {
        let (store, attn, mut rng) = attention_fixture(8, 2);
        let mut g = Graph::no_grad(&store);
        let x = g.constant(uniform(&mut rng, vec![2, 3, 8], 1.0));
        let out = attn.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 8]);
        assert!(g.value(out).iter().all(|v| v.is_finite()));

        let mut store = ParamStore::new();
        let err = SelfAttention::new(&mut store, &mut rng, "a", 8, 3, Scope::Shared).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (store, attn, mut rng) = attention_fixture(8, 4);
        let x = uniform(&mut rng, vec![1, 3, 8], 1.0);
        let perm = [2usize, 0, 1];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(&x.data()[p * 8..(p + 1) * 8]);
        }
        let mut g = Graph::no_grad(&store);
        let a = g.constant(x);
        let b = g.constant(Tensor::new(vec![1, 3, 8], px).unwrap());
        let oa = attn.forward(&mut g, a).unwrap();
        let ob = attn.forward(&mut g, b).unwrap();
        let (oa, ob) = (g.value(oa).to_vec(), g.value(ob).to_vec());
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((ob[i * 8 + j] - oa[p * 8 + j]).abs() < 1e-12);
            }
        }
    }
}
