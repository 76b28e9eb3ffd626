//! Parameter registry and reusable blocks: projections, multi-head
//! attention, MLPs, layer norms and sinusoidal position tables.
//!
//! Parameters live in a [`ParamStore`] under dotted names
//! (`<module>.<block>.<field>`); blocks only hold [`ParamId`]s and bind them
//! into a [`Graph`] on each forward pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ModelError, Result};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named model parameters in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(ModelError::Config(format!(
                "duplicate parameter name {name}"
            )));
        }
        if shape.contains(&0) {
            return Err(ModelError::Config(format!(
                "parameter {name} has empty shape {shape:?}"
            )));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| dist.sample(rng))
            }
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replace a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(TensorError::dim("set_param", slot.shape(), value.shape()).into());
        }
        *slot = value;
        Ok(())
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.value.fill(0.0);
            }
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries
            .iter_mut()
            .for_each(|e| e.trainable = trainable);
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id.0, self.get(id), self.is_trainable(id))
    }
}

/// Join name segments with dots.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine projection `x · Wᵀ + b` over the rows of `x[t×in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.register(
            &join(name, "weight"),
            &[out_dim, in_dim],
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let bias = store.register(&join(name, "bias"), &[out_dim], Init::Zeros)?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        let y = g.matmul_bt(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.register(&join(name, "gain"), &[dim], Init::Ones)?,
            bias: store.register(&join(name, "bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = store.bind(g, self.gain);
        let bias = store.bind(g, self.bias);
        Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }
}

/// Scaled dot-product attention with `heads` heads over `dim` columns.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(ModelError::Config(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            dim,
            q: Linear::new(store, &join(name, "q"), dim, dim)?,
            k: Linear::new(store, &join(name, "k"), dim, dim)?,
            v: Linear::new(store, &join(name, "v"), dim, dim)?,
            o: Linear::new(store, &join(name, "o"), dim, dim)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `mask`, when given, is added to the `t_q×t_k` score matrix of every
    /// head (use `-inf` to block a key).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        kv: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, query, kv, mask)?.0)
    }

    /// Like [`forward`](Self::forward), also returning each head's attention matrix.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        kv: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Vec<Var>)> {
        let tq = g.shape(query)[0];
        let tk = g.shape(kv)[0];
        if tk == 0 {
            return Err(ModelError::Usage("attention over zero keys".into()));
        }
        for v in [query, kv] {
            if g.shape(v).len() != 2 || g.shape(v)[1] != self.dim {
                return Err(TensorError::dim("attention", g.shape(v), &[0, self.dim]).into());
            }
        }
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(TensorError::dim("attention_mask", m.shape(), &[tq, tk]).into());
            }
        }
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let mask = mask.map(|m| g.constant(m.clone()));
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, h * dh, dh)?,
                    g.slice(k, 1, h * dh, dh)?,
                    g.slice(v, 1, h * dh, dh)?,
                )
            };
            let scores = g.matmul_bt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores, 1)?;
            weights.push(attn);
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        Ok((self.o.forward(g, store, cat)?, weights))
    }
}

/// Two projections with a GELU between them.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(ModelError::Config(
                "MLP hidden dim must be at least 1".into(),
            ));
        }
        Ok(MlpBlock {
            fc1: Linear::new(store, &join(name, "fc1"), in_dim, hidden)?,
            fc2: Linear::new(store, &join(name, "fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// `len×dim` table with `sin(p/10000^(2i/dim))` in even and the matching
/// cosine in odd columns.
pub fn sinusoidal_1d(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(ModelError::Config(format!(
            "positional encoding dim {dim} must be even"
        )));
    }
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = p as f64 * freq;
            data[p * dim + 2 * i] = angle.sin();
            data[p * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![len, dim], data)?)
}

/// Row-major `(h·w)×dim` table: first half of the columns encodes the row
/// index, second half the column index.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(ModelError::Config(format!(
            "2-d positional encoding dim {dim} must be divisible by 4"
        )));
    }
    let half = dim / 2;
    let rows = sinusoidal_1d(h, half)?;
    let cols = sinusoidal_1d(w, half)?;
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(rows.row(y));
            data.extend_from_slice(cols.row(x));
        }
    }
    Ok(Tensor::new(vec![h * w, dim], data)?)
}

/// Additive causal mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| {
        if i % t > i / t {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Lookup table `[vocab×dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        let table = store.register(&join(name, "table"), &[vocab, dim], Init::Normal(0.5))?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(ModelError::Usage(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let t = store.bind(g, self.table);
        Ok(g.gather_rows(t, ids)?)
    }
}

/// Pre-norm transformer layer: `x += SelfAttn(LN x)`, optionally
/// `x += CrossAttn(LN x, memory)`, then `x += MLP(LN x)`.
///
/// With every attention output projection and the second MLP projection
/// zeroed the layer is exactly the identity.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub norm_mlp: LayerNorm,
    pub mlp: MlpBlock,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        with_cross: bool,
    ) -> Result<Self> {
        let norm_self = LayerNorm::new(store, &join(name, "norm_self"), dim)?;
        let self_attn = MultiHeadAttention::new(store, &join(name, "self_attn"), dim, heads)?;
        let cross = if with_cross {
            Some((
                LayerNorm::new(store, &join(name, "norm_cross"), dim)?,
                MultiHeadAttention::new(store, &join(name, "cross_attn"), dim, heads)?,
            ))
        } else {
            None
        };
        let norm_mlp = LayerNorm::new(store, &join(name, "norm_mlp"), dim)?;
        let mlp = MlpBlock::new(store, &join(name, "mlp"), dim, dim * mlp_ratio, dim)?;
        Ok(TransformerLayer {
            norm_self,
            self_attn,
            cross,
            norm_mlp,
            mlp,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Option<Var>,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let h = self.norm_self.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, mask)?;
        let mut x = g.add(x, a)?;
        match (&self.cross, memory) {
            (Some((norm, attn)), Some(mem)) => {
                let h = norm.forward(g, store, x)?;
                let a = attn.forward(g, store, h, mem, None)?;
                x = g.add(x, a)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(ModelError::Wiring(
                    "cross-attention layer called without memory".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(ModelError::Wiring(
                    "memory passed to a self-attention-only layer".into(),
                ))
            }
        }
        let h = self.norm_mlp.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        Ok(g.add(x, m)?)
    }
}

/// Build `count` layers named `<name>.<i>`.
pub fn transformer_stack(
    store: &mut ParamStore,
    name: &str,
    count: usize,
    dim: usize,
    heads: usize,
    mlp_ratio: usize,
    with_cross: bool,
) -> Result<Vec<TransformerLayer>> {
    (0..count)
        .map(|i| {
            TransformerLayer::new(
                store,
                &format!("{name}.{i}"),
                dim,
                heads,
                mlp_ratio,
                with_cross,
            )
        })
        .collect()
}

/// Zero every parameter whose name marks it as the last projection of a
/// residual branch (`*.o.*` of attention, `*.fc2.*` of an MLP) under `prefix`.
pub fn zero_residual_branches(store: &mut ParamStore, prefix: &str) {
    let targets: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix) && (n.contains(".o.") || n.contains(".fc2.")))
        .map(str::to_string)
        .collect();
    for name in targets {
        let shape = store.by_name(&name).expect("listed name").shape().to_vec();
        store.set(&name, Tensor::zeros(&shape)).expect("same shape");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{check_gradients, project};
    use rand::SeedableRng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut store = ParamStore::new(0);
        let lin = Linear::new(&mut store, "p", 3, 3).unwrap();
        store.set("p.weight", Tensor::identity(3)).unwrap();
        let x = random(&[4, 3], 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);

        store.set("p.weight", Tensor::zeros(&[3, 3])).unwrap();
        store
            .set(
                "p.bias",
                Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
            )
            .unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = lin.forward(&mut g, &store, xv).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut store = ParamStore::new(0);
        let lin = Linear::new(&mut store, "p", 3, 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(lin.forward(&mut g, &store, x).is_err());
    }

    #[test]
    fn linear_gradients() {
        for seed in 0..5 {
            let x = random(&[4, 5], seed);
            let w = random(&[3, 5], seed + 100);
            let b = random(&[3], seed + 200);
            let proj = random(&[4, 3], seed + 300);
            let report = check_gradients(
                &[x, w, b],
                &|g, v| {
                    let y = g.matmul_bt(v[0], v[1])?;
                    let y = g.add_row(y, v[2])?;
                    project(g, y, &proj)
                },
                1e-6,
                None,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 3).is_err());
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut store = ParamStore::new(3);
        let att = MultiHeadAttention::new(&mut store, "a", 4, 2).unwrap();
        let q = random(&[5, 4], 1);
        let kv = random(&[1, 4], 2);
        let mut g = Graph::new();
        let (qv, kvv) = (g.constant(q), g.constant(kv));
        let out = att.forward(&mut g, &store, qv, kvv, None).unwrap();
        let v = att.v.forward(&mut g, &store, kvv).unwrap();
        let expected = att.o.forward(&mut g, &store, v).unwrap();
        let expected = g.value(expected).row(0).to_vec();
        for r in 0..5 {
            for (a, b) in g.value(out).row(r).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_and_values_give_identical_rows() {
        let mut store = ParamStore::new(4);
        let att = MultiHeadAttention::new(&mut store, "a", 4, 2).unwrap();
        let row = random(&[1, 4], 9);
        let kv = Tensor::from_fn(&[6, 4], |i| row.data()[i % 4]);
        let mut g = Graph::new();
        let qv = g.constant(random(&[3, 4], 5));
        let kvv = g.constant(kv);
        let out = att.forward(&mut g, &store, qv, kvv, None).unwrap();
        let first = g.value(out).row(0).to_vec();
        for r in 1..3 {
            for (a, b) in g.value(out).row(r).iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_shape_is_checked() {
        let mut store = ParamStore::new(4);
        let att = MultiHeadAttention::new(&mut store, "a", 4, 2).unwrap();
        let mut g = Graph::new();
        let q = g.constant(random(&[3, 4], 5));
        assert!(att
            .forward(&mut g, &store, q, q, Some(&Tensor::zeros(&[2, 2])))
            .is_err());
    }

    #[test]
    fn mlp_zero_and_hand_computed() {
        let mut store = ParamStore::new(0);
        let mlp = MlpBlock::new(&mut store, "m", 2, 1, 2).unwrap();
        store.zero_prefix("m");
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 2], 1));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        store
            .set(
                "m.fc1.weight",
                Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
            )
            .unwrap();
        store
            .set("m.fc1.bias", Tensor::new(vec![1], vec![0.5]).unwrap())
            .unwrap();
        store
            .set(
                "m.fc2.weight",
                Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap(),
            )
            .unwrap();
        store
            .set("m.fc2.bias", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        // h = 1 + 2 + 0.5 = 3.5
        let h: f64 = 3.5;
        let gelu = 0.5
            * h
            * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (h + 0.044715 * h.powi(3))).tanh());
        assert!((g.value(y).data()[0] - 3.0 * gelu).abs() < 1e-12);
        assert!((g.value(y).data()[1] - (1.0 - gelu)).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_tables() {
        let t = sinusoidal_1d(5, 6).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_1d(3, 5).is_err());
        assert!(sinusoidal_2d(2, 2, 6).is_err());
    }

    #[test]
    fn two_d_table_is_concatenation_of_independent_one_d_tables() {
        let (h, w, dim) = (4, 4, 8);
        let t = sinusoidal_2d(h, w, dim).unwrap();
        // Independent 1-d construction straight from the formula.
        let one_d = |p: usize, d: usize| -> Vec<f64> {
            (0..d)
                .map(|j| {
                    let i = (j / 2) as f64;
                    let a = p as f64 / 10000f64.powf(2.0 * i / d as f64);
                    if j % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect()
        };
        for y in 0..h {
            for x in 0..w {
                let mut expected = one_d(y, 4);
                expected.extend(one_d(x, 4));
                for (a, b) in t.row(y * w + x).iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask(3);
        assert_eq!(m.at(&[0, 0]), 0.0);
        assert_eq!(m.at(&[0, 1]), f64::NEG_INFINITY);
        assert_eq!(m.at(&[2, 1]), 0.0);
    }
}
