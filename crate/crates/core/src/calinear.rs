//! Calibratable linear layers.
//!
//! A [`CaLinearLayer`] owns `M` shared basis affine maps and a small calibration
//! MLP. Given one context scalar per token, the MLP followed by a softmax yields a
//! row of `M` simplex coefficients, and the token is mapped through the
//! coefficient-weighted sum of the bases. Downstream adaptation only moves the
//! context scalars; the bases and the MLP stay fixed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, uniform, Graph, Linear, ParamId, ParamStore, Role, Scope, Tensor, Var};

/// Hidden width of the calibration MLP.
pub const DEFAULT_CALIBRATION_HIDDEN: usize = 16;

/// Two-layer MLP `1 -> hidden -> M` with ReLU. Softmax is applied by the caller.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationMlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl CalibrationMlp {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        hidden: usize,
        basis_count: usize,
    ) -> Result<Self> {
        let hidden_layer = Linear::new(store, rng, &format!("{prefix}.hidden"), 1, hidden, Scope::Shared)?;
        // Output starts close to zero so that initial coefficients sit near 1/M.
        let weight = store.register(
            format!("{prefix}.output.weight"),
            uniform(rng, vec![hidden, basis_count], 1e-2),
            Scope::Shared,
            Role::Weight,
        )?;
        let bias = store.register(
            format!("{prefix}.output.bias"),
            Tensor::zeros(vec![basis_count]),
            Scope::Shared,
            Role::Bias,
        )?;
        Ok(Self {
            hidden: hidden_layer,
            output: Linear { weight, bias },
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [
            self.hidden.weight,
            self.hidden.bias,
            self.output.weight,
            self.output.bias,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CaLinearLayer {
    /// Stacked basis weights `[M, d_in, d_out]`.
    pub basis_weight: ParamId,
    /// Stacked basis biases `[M, d_out]`.
    pub basis_bias: ParamId,
    pub calibration: CalibrationMlp,
    pub basis_count: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl CaLinearLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        basis_count: usize,
        cal_hidden: usize,
    ) -> Result<Self> {
        if basis_count == 0 {
            return Err(Error::Config("a CaLinear layer needs at least one basis map".into()));
        }
        if d_in == 0 || d_out == 0 || cal_hidden == 0 {
            return Err(Error::Config(format!(
                "CaLinear extents must be positive (d_in={d_in}, d_out={d_out}, hidden={cal_hidden})"
            )));
        }
        let mut weights = Vec::with_capacity(basis_count * d_in * d_out);
        let mut biases = Vec::with_capacity(basis_count * d_out);
        for _ in 0..basis_count {
            weights.extend(kaiming_uniform(rng, vec![d_in, d_out], d_in).into_data());
            biases.extend(kaiming_uniform(rng, vec![d_out], d_in).into_data());
        }
        let basis_weight = store.register(
            format!("{prefix}.basis.weight"),
            Tensor::new(vec![basis_count, d_in, d_out], weights)?,
            Scope::Shared,
            Role::Weight,
        )?;
        let basis_bias = store.register(
            format!("{prefix}.basis.bias"),
            Tensor::new(vec![basis_count, d_out], biases)?,
            Scope::Shared,
            Role::Bias,
        )?;
        let calibration =
            CalibrationMlp::new(store, rng, &format!("{prefix}.calibration"), cal_hidden, basis_count)?;
        Ok(Self {
            basis_weight,
            basis_bias,
            calibration,
            basis_count,
            d_in,
            d_out,
        })
    }

    /// `softmax(MLP(v_n))` for every token; `context: [T]` gives `[T, M]`.
    pub fn coefficients(&self, g: &mut Graph<'_>, context: Var) -> Result<Var> {
        let tokens = match g.shape(context) {
            [t] => *t,
            s => {
                return Err(Error::Dimension(format!(
                    "context vector must be one-dimensional, got {s:?}"
                )))
            }
        };
        let column = g.reshape(context, vec![tokens, 1])?;
        let h = self.calibration.hidden.forward(g, column)?;
        let h = g.relu(h)?;
        let logits = self.calibration.output.forward(g, h)?;
        g.softmax(logits)
    }

    /// `z: [B, T, d_in]`, `c: [T, M]` to `[B, T, d_out]`.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, c: Var) -> Result<Var> {
        let (w, b) = (g.param(self.basis_weight), g.param(self.basis_bias));
        g.calinear(z, w, b, c)
    }

    pub fn basis_params(&self) -> [ParamId; 2] {
        [self.basis_weight, self.basis_bias]
    }
}

/// Per-token simplex weights over the basis maps, `[T, M]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    pub tokens: usize,
    pub basis_count: usize,
    pub values: Vec<f64>,
}

impl CoefficientMatrix {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [tokens, m] => Ok(Self {
                tokens: *tokens,
                basis_count: *m,
                values: t.data().to_vec(),
            }),
            s => Err(Error::Dimension(format!("coefficient matrix shape {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.tokens, self.basis_count], self.values.clone()).expect("shape")
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.basis_count..(n + 1) * self.basis_count]
    }

    /// Whether every row is strictly positive and sums to one within `tol`.
    pub fn on_simplex(&self, tol: f64) -> bool {
        (0..self.tokens).all(|n| {
            let r = self.row(n);
            r.iter().all(|&c| c > 0.0 && c < 1.0 || (self.basis_count == 1 && c == 1.0))
                && (r.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Evaluates the calibration module of `layer` on a context vector.
pub fn calibrate_coefficients(
    store: &ParamStore,
    layer: &CaLinearLayer,
    context: &[f64],
) -> Result<CoefficientMatrix> {
    let mut g = Graph::no_grad(store);
    let v = g.constant(Tensor::from_vec(context.to_vec()));
    let c = layer.coefficients(&mut g, v)?;
    CoefficientMatrix::from_tensor(&g.tensor(c))
}

/// Value-level CaLinear forward with explicit coefficients.
pub fn calinear_forward(
    store: &ParamStore,
    layer: &CaLinearLayer,
    z: &Tensor,
    c: &CoefficientMatrix,
) -> Result<Tensor> {
    let mut g = Graph::no_grad(store);
    let zv = g.constant(z.clone());
    let cv = g.constant(c.to_tensor());
    let out = layer.forward(&mut g, zv, cv)?;
    Ok(g.tensor(out))
}

/// Feed-forward network made of two independent CaLinear layers with a ReLU between.
#[derive(Debug, Clone, Copy)]
pub struct CaLinearFfn {
    pub first: CaLinearLayer,
    pub second: CaLinearLayer,
}

impl CaLinearFfn {
    pub fn new(first: CaLinearLayer, second: CaLinearLayer) -> Result<Self> {
        if first.d_out != second.d_in || first.d_in != second.d_out {
            return Err(Error::Config(format!(
                "CaLinear FFN widths do not chain: {}->{} then {}->{}",
                first.d_in, first.d_out, second.d_in, second.d_out
            )));
        }
        Ok(Self { first, second })
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: Var, c1: Var, c2: Var) -> Result<Var> {
        let h = self.first.forward(g, z, c1)?;
        let h = g.relu(h)?;
        self.second.forward(g, h, c2)
    }
}

/// Value-level CaLinear FFN with explicit per-layer coefficients.
pub fn calinear_ffn_forward(
    store: &ParamStore,
    ffn: &CaLinearFfn,
    z: &Tensor,
    c1: &CoefficientMatrix,
    c2: &CoefficientMatrix,
) -> Result<Tensor> {
    let mut g = Graph::no_grad(store);
    let zv = g.constant(z.clone());
    let c1 = g.constant(c1.to_tensor());
    let c2 = g.constant(c2.to_tensor());
    let out = ffn.forward(&mut g, zv, c1, c2)?;
    Ok(g.tensor(out))
}

/// Ablation variant: coefficients come from a directly learned `[T, M]` logits
/// matrix per dataset instead of the calibration MLP. Bases stay shared.
#[derive(Debug, Clone, Copy)]
pub struct DirectCoefficientLayer {
    pub basis_weight: ParamId,
    pub basis_bias: ParamId,
    pub logits: ParamId,
    pub tokens: usize,
    pub basis_count: usize,
}

impl DirectCoefficientLayer {
    pub fn coefficients(&self, g: &mut Graph<'_>) -> Result<Var> {
        let l = g.param(self.logits);
        g.softmax(l)
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: Var, c: Var) -> Result<Var> {
        let (w, b) = (g.param(self.basis_weight), g.param(self.basis_bias));
        g.calinear(z, w, b, c)
    }
}

/// Registers a zero-initialized logits matrix for `tokens` tokens that replaces
/// the calibration module of `layer`.
pub fn make_direct_coefficient_variant(
    store: &mut ParamStore,
    layer: &CaLinearLayer,
    tokens: usize,
    scope: Scope,
    name: &str,
) -> Result<DirectCoefficientLayer> {
    let logits = store.register(
        name,
        Tensor::zeros(vec![tokens, layer.basis_count]),
        scope,
        Role::CoefficientLogits,
    )?;
    Ok(DirectCoefficientLayer {
        basis_weight: layer.basis_weight,
        basis_bias: layer.basis_bias,
        logits,
        tokens,
        basis_count: layer.basis_count,
    })
}
