//! The XTFormer assembly.
//!
//! A shared stack of pre-norm transformer blocks whose feed-forward networks are
//! CaLinear pairs, wrapped per dataset by a feature tokenizer, an output head and
//! a context vector `v` with one scalar per token. Every parameter lives in a
//! single [`ParamStore`] and is tagged either [`Scope::Shared`] or
//! [`Scope::Dataset`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calinear::{
    make_direct_coefficient_variant, CaLinearFfn, CaLinearLayer, CoefficientMatrix, DirectCoefficientLayer,
    DEFAULT_CALIBRATION_HIDDEN,
};
use crate::data::{Batch, ColumnData, FeatureKind, Schema};
use crate::error::{Error, Result};
use crate::nn::{
    uniform, Graph, LayerNorm, Linear, ParamId, ParamStore, Role, Scope, SelfAttention, Tensor, TokenSource, Var,
};

/// Scale of the standard normal draws used to initialize `v`.
pub const CONTEXT_INIT_STD: f64 = 0.01;

/// How CaLinear coefficients are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientMode {
    /// `softmax(MLP(v_n))` through each layer's calibration MLP.
    #[default]
    Calibrated,
    /// A learnable `[T, M]` logits matrix per dataset and layer.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "M")]
    pub basis_count: usize,
    pub d_ffn: usize,
    pub cal_hidden: usize,
    pub coefficient_mode: CoefficientMode,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 192,
            heads: 8,
            layers: 4,
            basis_count: 4,
            d_ffn: 256,
            cal_hidden: DEFAULT_CALIBRATION_HIDDEN,
            coefficient_mode: CoefficientMode::Calibrated,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("L", self.layers),
            ("M", self.basis_count),
            ("d_ffn", self.d_ffn),
            ("cal_hidden", self.cal_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.d = {} is not divisible by model.heads = {}",
                self.d, self.heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("model.norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Whether two configs build interchangeable shared bodies.
    pub fn shared_compatible(&self, other: &ModelConfig) -> bool {
        self.d == other.d
            && self.heads == other.heads
            && self.layers == other.layers
            && self.basis_count == other.basis_count
            && self.d_ffn == other.d_ffn
            && self.cal_hidden == other.cal_hidden
    }
}

/// One pre-norm transformer block. The first block has no attention norm.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub attention_norm: Option<LayerNorm>,
    pub attention: SelfAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: CaLinearFfn,
}

#[derive(Debug, Clone, Copy)]
pub enum FeatureEmbedding {
    Numeric { weight: ParamId, bias: ParamId },
    /// `table` has `cardinality + 1` rows; the last is the unknown category.
    Categorical { table: ParamId, bias: ParamId, cardinality: usize },
}

#[derive(Debug, Clone)]
pub struct FeatureTokenizer {
    pub cls: ParamId,
    pub features: Vec<FeatureEmbedding>,
}

impl FeatureTokenizer {
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.cls];
        for f in &self.features {
            match *f {
                FeatureEmbedding::Numeric { weight, bias } => out.extend([weight, bias]),
                FeatureEmbedding::Categorical { table, bias, .. } => out.extend([table, bias]),
            }
        }
        out
    }
}

/// Normalization, ReLU and a width-one affine map on the classification token.
#[derive(Debug, Clone, Copy)]
pub struct OutputHead {
    pub norm: LayerNorm,
    pub linear: Linear,
}

impl OutputHead {
    pub fn params(&self) -> [ParamId; 4] {
        [self.norm.gamma, self.norm.beta, self.linear.weight, self.linear.bias]
    }
}

/// Per-dataset parts.
#[derive(Debug, Clone)]
pub struct DatasetParts {
    pub name: String,
    pub schema: Schema,
    pub tokenizer: FeatureTokenizer,
    pub head: OutputHead,
    /// Context vector `[T]`; absent in direct-coefficient mode.
    pub context: Option<ParamId>,
    /// One logits matrix per CaLinear in direct-coefficient mode, block-major.
    pub direct: Vec<DirectCoefficientLayer>,
}

impl DatasetParts {
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.tokenizer.params();
        out.extend(self.head.params());
        out.extend(self.context);
        out.extend(self.direct.iter().map(|l| l.logits));
        out
    }

    pub fn token_count(&self) -> usize {
        self.schema.token_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DatasetId(pub usize);

/// Disjoint cover of every parameter relative to one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Tokenizer, head and context (or coefficient logits) of the dataset.
    pub dataset: Vec<ParamId>,
    /// Normalization parameters of the shared body.
    pub shared_norm: Vec<ParamId>,
    /// Every other shared parameter.
    pub shared_rest: Vec<ParamId>,
    /// Parameters that belong to other attached datasets.
    pub other_datasets: Vec<ParamId>,
}

impl Partition {
    pub fn shared(&self) -> Vec<ParamId> {
        let mut out = self.shared_norm.clone();
        out.extend(&self.shared_rest);
        out.sort();
        out
    }
}

#[derive(Debug, Clone)]
pub struct Assembly {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub blocks: Vec<Block>,
    /// Set once the shared body has been pretrained or loaded from a pretrained
    /// checkpoint.
    pub shared_trained: bool,
    datasets: Vec<Option<DatasetParts>>,
}

impl Assembly {
    /// Builds the shared body from `config.seed`. No datasets are attached.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.layers);
        let (d, m, h) = (config.d, config.basis_count, config.cal_hidden);
        for i in 0..config.layers {
            let p = format!("blocks.{i}");
            let attention_norm = if i == 0 {
                None
            } else {
                Some(LayerNorm::new(&mut params, &format!("{p}.attention_norm"), d, config.norm_eps, Scope::Shared)?)
            };
            let attention =
                SelfAttention::new(&mut params, &mut rng, &format!("{p}.attention"), d, config.heads, Scope::Shared)?;
            let ffn_norm = LayerNorm::new(&mut params, &format!("{p}.ffn_norm"), d, config.norm_eps, Scope::Shared)?;
            let first = CaLinearLayer::new(&mut params, &mut rng, &format!("{p}.ffn.first"), d, config.d_ffn, m, h)?;
            let second = CaLinearLayer::new(&mut params, &mut rng, &format!("{p}.ffn.second"), config.d_ffn, d, m, h)?;
            blocks.push(Block {
                attention_norm,
                attention,
                ffn_norm,
                ffn: CaLinearFfn::new(first, second)?,
            });
        }
        Ok(Self {
            config,
            params,
            blocks,
            shared_trained: false,
            datasets: Vec::new(),
        })
    }

    /// All CaLinear layers, two per block in forward order.
    pub fn calinears(&self) -> Vec<CaLinearLayer> {
        self.blocks.iter().flat_map(|b| [b.ffn.first, b.ffn.second]).collect()
    }

    /// Creates fresh tokenizer, head and context parameters for `schema`.
    ///
    /// Initialization is drawn from a stream derived from the model seed and the
    /// dataset name, so it does not depend on attach order.
    pub fn attach_dataset(&mut self, schema: &Schema) -> Result<DatasetId> {
        schema.validate()?;
        if self.find(&schema.name).is_some() {
            return Err(Error::Usage(format!("dataset `{}` is already attached", schema.name)));
        }
        let id = DatasetId(self.datasets.len());
        let scope = Scope::Dataset(id.0);
        let mut rng = dataset_rng(self.config.seed, &schema.name);
        let d = self.config.d;
        let bound = 1.0 / (d as f64).sqrt();
        let prefix = format!("datasets.{}", schema.name);
        let store = &mut self.params;

        let cls = store.register(
            format!("{prefix}.tokenizer.cls"),
            uniform(&mut rng, vec![d], bound),
            scope,
            Role::Embedding,
        )?;
        let mut features = Vec::new();
        for (col, kind) in schema.feature_columns().zip(schema.features()) {
            let p = format!("{prefix}.tokenizer.{}", col.name);
            let bias = |store: &mut ParamStore, rng: &mut ChaCha8Rng| {
                store.register(format!("{p}.bias"), uniform(rng, vec![d], bound), scope, Role::Bias)
            };
            features.push(match kind {
                FeatureKind::Numeric => {
                    let weight =
                        store.register(format!("{p}.weight"), uniform(&mut rng, vec![d], bound), scope, Role::Embedding)?;
                    FeatureEmbedding::Numeric {
                        weight,
                        bias: bias(store, &mut rng)?,
                    }
                }
                FeatureKind::Categorical { cardinality } => {
                    let table = store.register(
                        format!("{p}.table"),
                        uniform(&mut rng, vec![cardinality + 1, d], bound),
                        scope,
                        Role::Embedding,
                    )?;
                    FeatureEmbedding::Categorical {
                        table,
                        bias: bias(store, &mut rng)?,
                        cardinality,
                    }
                }
            });
        }
        let head = OutputHead {
            norm: LayerNorm::new(store, &format!("{prefix}.head.norm"), d, self.config.norm_eps, scope)?,
            linear: Linear::new(store, &mut rng, &format!("{prefix}.head.linear"), d, 1, scope)?,
        };
        let tokens = schema.token_count();
        let (context, direct) = match self.config.coefficient_mode {
            CoefficientMode::Calibrated => {
                let v = (0..tokens)
                    .map(|_| CONTEXT_INIT_STD * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let ctx = store.register(format!("{prefix}.context"), Tensor::from_vec(v), scope, Role::Context)?;
                (Some(ctx), Vec::new())
            }
            CoefficientMode::Direct => {
                let layers: Vec<CaLinearLayer> = self.blocks.iter().flat_map(|b| [b.ffn.first, b.ffn.second]).collect();
                let direct = layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        make_direct_coefficient_variant(store, l, tokens, scope, &format!("{prefix}.logits.{i}"))
                    })
                    .collect::<Result<_>>()?;
                (None, direct)
            }
        };
        self.datasets.push(Some(DatasetParts {
            name: schema.name.clone(),
            schema: schema.clone(),
            tokenizer: FeatureTokenizer { cls, features },
            head,
            context,
            direct,
        }));
        Ok(id)
    }

    pub fn find(&self, name: &str) -> Option<DatasetId> {
        self.datasets
            .iter()
            .position(|p| p.as_ref().is_some_and(|p| p.name == name))
            .map(DatasetId)
    }

    pub fn dataset(&self, id: DatasetId) -> Result<&DatasetParts> {
        self.datasets
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Usage(format!("dataset id {} is not attached", id.0)))
    }

    /// Attached datasets in attach order.
    pub fn dataset_ids(&self) -> Vec<DatasetId> {
        (0..self.datasets.len())
            .filter(|&i| self.datasets[i].is_some())
            .map(DatasetId)
            .collect()
    }

    /// Removes the dataset from the routing table. Its parameters stay in the
    /// store but are no longer reachable through this id.
    pub fn detach(&mut self, id: DatasetId) -> Result<()> {
        self.dataset(id)?;
        self.datasets[id.0] = None;
        Ok(())
    }

    pub fn partition_parameters(&self, id: DatasetId) -> Result<Partition> {
        self.dataset(id)?;
        let mut part = Partition {
            dataset: Vec::new(),
            shared_norm: Vec::new(),
            shared_rest: Vec::new(),
            other_datasets: Vec::new(),
        };
        for (pid, p) in self.params.iter() {
            match p.scope {
                Scope::Dataset(i) if i == id.0 => part.dataset.push(pid),
                Scope::Dataset(_) => part.other_datasets.push(pid),
                Scope::Shared if p.role == Role::Norm => part.shared_norm.push(pid),
                Scope::Shared => part.shared_rest.push(pid),
            }
        }
        Ok(part)
    }

    /// `[B, T, d]` tokens for a preprocessed batch.
    pub fn tokenize(&self, g: &mut Graph<'_>, id: DatasetId, batch: &Batch) -> Result<Var> {
        let parts = self.dataset(id)?;
        let tok = &parts.tokenizer;
        if batch.columns.len() != tok.features.len() {
            return Err(Error::Data(format!(
                "dataset `{}` expects {} feature columns, batch has {}",
                parts.name,
                tok.features.len(),
                batch.columns.len()
            )));
        }
        let mut sources = Vec::with_capacity(tok.features.len());
        for ((emb, col), spec) in tok.features.iter().zip(&batch.columns).zip(parts.schema.feature_columns()) {
            sources.push(match (*emb, col) {
                (FeatureEmbedding::Numeric { weight, bias }, ColumnData::Numeric(values)) => TokenSource::Numeric {
                    values: values.clone(),
                    weight: g.param(weight),
                    bias: g.param(bias),
                },
                (FeatureEmbedding::Categorical { table, bias, cardinality }, ColumnData::Categorical(indices)) => {
                    TokenSource::Categorical {
                        indices: indices.iter().map(|&i| i.min(cardinality)).collect(),
                        table: g.param(table),
                        bias: g.param(bias),
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "column `{}` of dataset `{}` has the wrong kind",
                        spec.name, parts.name
                    )))
                }
            });
        }
        let cls = g.param(tok.cls);
        g.tokenize(cls, sources)
    }

    /// Coefficient matrices `[T, M]` of every CaLinear, block-major.
    pub fn coefficient_vars(&self, g: &mut Graph<'_>, id: DatasetId) -> Result<Vec<Var>> {
        let parts = self.dataset(id)?;
        match parts.context {
            Some(ctx) => {
                let v = g.param(ctx);
                self.calinears().iter().map(|l| l.coefficients(g, v)).collect()
            }
            None => parts.direct.iter().map(|l| l.coefficients(g)).collect(),
        }
    }

    /// Predictions `[B, 1]`: logits for binary tasks, standardized values for
    /// regression.
    pub fn forward(&self, g: &mut Graph<'_>, id: DatasetId, batch: &Batch) -> Result<Var> {
        let parts = self.dataset(id)?;
        let coefficients = self.coefficient_vars(g, id)?;
        let mut x = self.tokenize(g, id, batch)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let h = match block.attention_norm {
                Some(n) => n.forward(g, x)?,
                None => x,
            };
            let a = block.attention.forward(g, h)?;
            x = g.add(x, a)?;
            let h = block.ffn_norm.forward(g, x)?;
            let f = block.ffn.forward(g, h, coefficients[2 * i], coefficients[2 * i + 1])?;
            x = g.add(x, f)?;
        }
        let cls = g.select_token(x, 0)?;
        let h = parts.head.norm.forward(g, cls)?;
        let h = g.relu(h)?;
        parts.head.linear.forward(g, h)
    }

    /// Value-level predictions for a batch.
    pub fn predict(&self, id: DatasetId, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad(&self.params);
        let out = self.forward(&mut g, id, batch)?;
        Ok(g.value(out).to_vec())
    }

    /// Current coefficient matrices of every CaLinear for one dataset.
    pub fn coefficients(&self, id: DatasetId) -> Result<Vec<CoefficientMatrix>> {
        let mut g = Graph::no_grad(&self.params);
        let vars = self.coefficient_vars(&mut g, id)?;
        vars.iter().map(|&v| CoefficientMatrix::from_tensor(&g.tensor(v))).collect()
    }

    /// Current context vector, if the dataset uses calibrated coefficients.
    pub fn context(&self, id: DatasetId) -> Result<Option<Vec<f64>>> {
        Ok(self
            .dataset(id)?
            .context
            .map(|c| self.params.get(c).tensor.data().to_vec()))
    }
}

fn dataset_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnSpec;
    use crate::data::TaskType;

    fn schema(name: &str, numeric: usize, categorical: &[usize]) -> Schema {
        let mut columns: Vec<ColumnSpec> = (0..numeric).map(|i| ColumnSpec::numeric(format!("n{i}"))).collect();
        for (i, &c) in categorical.iter().enumerate() {
            columns.push(ColumnSpec::categorical(
                format!("c{i}"),
                (0..c).map(|k| format!("v{k}")).collect(),
            ));
        }
        columns.push(ColumnSpec::target("y"));
        Schema {
            name: name.into(),
            task: TaskType::Regression,
            columns,
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            layers: 2,
            basis_count: 3,
            d_ffn: 12,
            ..Default::default()
        }
    }

    fn batch(rows: usize, numeric: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            columns: (0..numeric)
                .map(|_| ColumnData::Numeric((0..rows).map(|_| rng.sample(StandardNormal)).collect()))
                .collect(),
        }
    }

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.d, c.heads, c.layers, c.basis_count, c.d_ffn), (192, 8, 4, 4, 256));
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["L"], 4);
        assert_eq!(json["M"], 4);
    }

    #[test]
    fn tokenizer_examples() {
        let mut a = Assembly::new(small()).unwrap();
        let id = a.attach_dataset(&schema("t", 2, &[])).unwrap();
        let b = Batch {
            columns: vec![ColumnData::Numeric(vec![0.0, 1.0]), ColumnData::Numeric(vec![1.0, 0.0])],
        };
        let mut g = Graph::no_grad(&a.params);
        let t = a.tokenize(&mut g, id, &b).unwrap();
        assert_eq!(g.shape(t), [2, 3, 8]);
        let FeatureEmbedding::Numeric { weight, bias } = a.dataset(id).unwrap().tokenizer.features[0] else {
            panic!()
        };
        let (w, bias) = (a.params.get(weight).tensor.data(), a.params.get(bias).tensor.data());
        let v = g.value(t);
        assert_eq!(&v[8..16], bias);
        let expected: Vec<f64> = w.iter().zip(bias).map(|(w, b)| w + b).collect();
        assert_eq!(&v[24 + 8..24 + 16], expected.as_slice());
    }

    #[test]
    fn default_width_token_shape() {
        let mut a = Assembly::new(ModelConfig {
            layers: 1,
            ..Default::default()
        })
        .unwrap();
        let id = a.attach_dataset(&schema("t", 5, &[])).unwrap();
        let mut g = Graph::no_grad(&a.params);
        let t = a.tokenize(&mut g, id, &batch(3, 5, 0)).unwrap();
        assert_eq!(g.shape(t), [3, 6, 192]);
    }

    #[test]
    fn attach_shapes_and_isolation() {
        let mut a = Assembly::new(small()).unwrap();
        let before = a.params.digests();
        let id = a.attach_dataset(&schema("a", 4, &[3])).unwrap();
        a.attach_dataset(&schema("b", 2, &[])).unwrap();
        assert_eq!(&a.params.digests()[..before.len()], before.as_slice());
        let parts = a.dataset(id).unwrap();
        assert_eq!(a.params.get(parts.context.unwrap()).tensor.len(), 6);
        let FeatureEmbedding::Categorical { table, .. } = parts.tokenizer.features[4] else {
            panic!()
        };
        assert_eq!(a.params.get(table).tensor.shape(), [4, 8]);
        assert!(matches!(a.attach_dataset(&schema("a", 1, &[])), Err(Error::Usage(_))));
        assert_eq!(a.calinears().len(), 4);
    }

    #[test]
    fn attach_order_does_not_change_init() {
        let mut a = Assembly::new(small()).unwrap();
        let mut b = Assembly::new(small()).unwrap();
        a.attach_dataset(&schema("x", 2, &[])).unwrap();
        a.attach_dataset(&schema("y", 3, &[])).unwrap();
        b.attach_dataset(&schema("y", 3, &[])).unwrap();
        b.attach_dataset(&schema("x", 2, &[])).unwrap();
        for (_, p) in a.params.iter() {
            let q = b.params.get(b.params.lookup(&p.name).unwrap());
            assert_eq!(p.tensor, q.tensor, "{}", p.name);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_columns() {
        let mut a = Assembly::new(small()).unwrap();
        let id = a.attach_dataset(&schema("t", 3, &[])).unwrap();
        let b = batch(5, 3, 1);
        let p1 = a.predict(id, &b).unwrap();
        let p2 = a.predict(id, &b).unwrap();
        assert_eq!(p1.len(), 5);
        assert_eq!(
            p1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(a.predict(id, &batch(5, 2, 1)), Err(Error::Data(_))));
        assert!(matches!(a.predict(DatasetId(7), &b), Err(Error::Usage(_))));
        a.detach(id).unwrap();
        assert!(matches!(a.predict(id, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn context_changes_predictions() {
        let mut a = Assembly::new(small()).unwrap();
        let id = a.attach_dataset(&schema("t", 3, &[])).unwrap();
        let b = batch(4, 3, 2);
        let before = a.predict(id, &b).unwrap();
        let ctx = a.dataset(id).unwrap().context.unwrap();
        a.params.get_mut(ctx).tensor.data_mut()[1] += 1.0;
        let after = a.predict(id, &b).unwrap();
        assert!(before.iter().zip(&after).any(|(x, y)| x != y));
    }

    #[test]
    fn partition_is_disjoint_cover() {
        let mut a = Assembly::new(small()).unwrap();
        let id = a.attach_dataset(&schema("a", 2, &[2])).unwrap();
        a.attach_dataset(&schema("b", 1, &[])).unwrap();
        let p = a.partition_parameters(id).unwrap();
        let mut all: Vec<ParamId> = p
            .dataset
            .iter()
            .chain(&p.shared_norm)
            .chain(&p.shared_rest)
            .chain(&p.other_datasets)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, a.params.ids().collect::<Vec<_>>());
        let basis = a.blocks[0].ffn.first.basis_weight;
        assert!(p.shared_rest.contains(&basis));
        let mut own = a.dataset(id).unwrap().params();
        own.sort();
        assert_eq!(own, p.dataset);
    }

    #[test]
    fn direct_mode_replaces_context() {
        let mut a = Assembly::new(ModelConfig {
            coefficient_mode: CoefficientMode::Direct,
            ..small()
        })
        .unwrap();
        let id = a.attach_dataset(&schema("t", 4, &[])).unwrap();
        let parts = a.dataset(id).unwrap();
        assert!(parts.context.is_none());
        assert_eq!(parts.direct.len(), 4);
        assert_eq!(a.params.count(&parts.direct.iter().map(|l| l.logits).collect::<Vec<_>>()), 4 * 5 * 3);
        for c in a.coefficients(id).unwrap() {
            assert!(c.values.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
        assert_eq!(a.predict(id, &batch(2, 4, 0)).unwrap().len(), 2);
    }

    #[test]
    fn invalid_configs() {
        for c in [
            ModelConfig { heads: 3, ..small() },
            ModelConfig { basis_count: 0, ..small() },
            ModelConfig { layers: 0, ..small() },
        ] {
            assert!(matches!(Assembly::new(c), Err(Error::Config(_))));
        }
    }
}
