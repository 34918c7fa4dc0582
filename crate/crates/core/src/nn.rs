//! Parameterized layers: linear, LoRA-wrapped linear, layer norm,
//! multi-head attention, feed-forward and embeddings.
//!
//! Layers are descriptors holding parameter names; values live in a
//! [`ParamStore`] and are bound per pass through a [`Binder`].

use rand::Rng;

use crate::autodiff::{Tape, Var, MASK_FILL};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LORA_INIT_STD: f64 = 0.02;

/// Rank, scale and injection points of LoRA adapters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Sublayer names (last path segment, e.g. `q`, `v`) that get adapters.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, targets: vec!["q".into(), "v".into()] }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn wraps(&self, layer_name: &str) -> bool {
        let last = layer_name.rsplit('.').next().unwrap_or(layer_name);
        self.targets.iter().any(|t| t == last)
    }
}

/// Adapter parameters for one modality: names are `<namespace>.<layer>.lora_{a,b}`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterScope<'a> {
    pub namespace: &'a str,
    pub lora: &'a LoraConfig,
}

impl AdapterScope<'_> {
    pub fn adapter_name(&self, layer: &str) -> String {
        format!("{}.{layer}", self.namespace)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { name: name.into(), in_dim, out_dim }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.insert_normal(format!("{}.weight", self.name), vec![self.out_dim, self.in_dim], 1.0 / (self.in_dim as f64).sqrt(), rng)?;
        store.insert_full(format!("{}.bias", self.name), vec![self.out_dim], 0.0)
    }

    /// Fresh adapter for this layer: A ~ N(0, 0.02²), B = 0.
    pub fn init_lora(&self, store: &mut ParamStore, scope: AdapterScope<'_>, rng: &mut impl Rng) -> Result<()> {
        let r = scope.lora.rank;
        if r == 0 || r >= self.in_dim.min(self.out_dim) {
            return Err(Error::Config(format!(
                "LoRA rank {r} must be in 1..{} for `{}`",
                self.in_dim.min(self.out_dim),
                self.name
            )));
        }
        let ns = scope.adapter_name(&self.name);
        store.insert_normal(format!("{ns}.lora_a"), vec![r, self.in_dim], LORA_INIT_STD, rng)?;
        store.insert_full(format!("{ns}.lora_b"), vec![self.out_dim, r], 0.0)
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = b.var(&format!("{}.weight", self.name))?;
        let bias = b.var(&format!("{}.bias", self.name))?;
        x.matmul_t(w)?.add(bias)
    }

    /// Base output plus `(alpha/r)·B·A·x` when `scope` wraps this layer.
    pub fn forward_adapted<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>, scope: Option<AdapterScope<'_>>) -> Result<Var<'t>> {
        let base = self.forward(b, x)?;
        let Some(scope) = scope.filter(|s| s.lora.wraps(&self.name)) else {
            return Ok(base);
        };
        let ns = scope.adapter_name(&self.name);
        let (an, bn) = (format!("{ns}.lora_a"), format!("{ns}.lora_b"));
        if !b.has(&an) || !b.has(&bn) {
            return Err(Error::MissingAdapter { layer: self.name.clone(), adapter: ns });
        }
        let delta = x.matmul_t(b.var(&an)?)?.matmul_t(b.var(&bn)?)?.scale(scope.lora.scale());
        base.add(delta)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert_full(format!("{}.gain", self.name), vec![self.dim], 1.0)?;
        store.insert_full(format!("{}.bias", self.name), vec![self.dim], 0.0)
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let g = b.var(&format!("{}.gain", self.name))?;
        let beta = b.var(&format!("{}.bias", self.name))?;
        x.layer_norm(g, beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub name: String,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, rows: usize, dim: usize) -> Self {
        Self { name: name.into(), rows, dim }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        store.insert_normal(self.table_name(), vec![self.rows, self.dim], std, rng)
    }

    pub fn table_name(&self) -> String {
        format!("{}.table", self.name)
    }

    /// `[ids.len(), dim]`.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, ids: &[usize]) -> Result<Var<'t>> {
        b.var(&self.table_name())?.gather_rows(ids)
    }
}

/// Attention mask layouts for a self-attention sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Bidirectional,
    Causal,
    /// The first `k` positions attend to each other freely; later
    /// positions see the whole prefix and earlier non-prefix positions.
    Prefix(usize),
}

impl MaskMode {
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            MaskMode::Bidirectional => true,
            MaskMode::Causal => j <= i,
            MaskMode::Prefix(k) => {
                if i < k {
                    j < k
                } else {
                    j < k || j <= i
                }
            }
        }
    }
}

/// Blocked positions of shape `[B or 1, 1, Tq, Tk]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    blocked: Vec<bool>,
    shape: [usize; 4],
}

impl AttnMask {
    pub fn from_mode(mode: MaskMode, tq: usize, tk: usize) -> Self {
        let blocked = (0..tq).flat_map(|i| (0..tk).map(move |j| !mode.allows(i, j))).collect();
        Self { blocked, shape: [1, 1, tq, tk] }
    }

    /// Per-sample mask: `mode` over `t` positions, with keys at or past
    /// `valid_lens[b]` blocked for sample `b`.
    pub fn with_padding(mode: MaskMode, t: usize, valid_lens: &[usize]) -> Self {
        let mut blocked = Vec::with_capacity(valid_lens.len() * t * t);
        for &len in valid_lens {
            for i in 0..t {
                for j in 0..t {
                    blocked.push(!mode.allows(i, j) || j >= len);
                }
            }
        }
        Self { blocked, shape: [valid_lens.len(), 1, t, t] }
    }

    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        let [nb, _, tq, tk] = self.shape;
        let b = if nb == 1 { 0 } else { b };
        !self.blocked[(b * tq + i) * tk + j]
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
}

/// Multi-head scaled dot-product attention with Q/K/V/O projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub d_model: usize,
    pub d_kv_in: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, d_model: usize, d_kv_in: usize, heads: usize) -> Result<Self> {
        let name = name.into();
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide model dim {d_model}")));
        }
        Ok(Self {
            q: Linear::new(format!("{name}.q"), d_model, d_model),
            k: Linear::new(format!("{name}.k"), d_kv_in, d_model),
            v: Linear::new(format!("{name}.v"), d_kv_in, d_model),
            o: Linear::new(format!("{name}.o"), d_model, d_model),
            name,
            d_model,
            d_kv_in,
            heads,
        })
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.linears().iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn init_lora(&self, store: &mut ParamStore, scope: AdapterScope<'_>, rng: &mut impl Rng) -> Result<()> {
        for l in self.linears() {
            if scope.lora.wraps(&l.name) {
                l.init_lora(store, scope, rng)?;
            }
        }
        Ok(())
    }

    /// `xq`: `[B, Tq, d_model]`, `xkv`: `[B, Tk, d_kv_in]` → `[B, Tq, d_model]`.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        xq: Var<'t>,
        xkv: Var<'t>,
        mask: Option<&AttnMask>,
        scope: Option<AdapterScope<'_>>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(b, xq, xkv, mask, scope)?.0)
    }

    /// Also returns the attention weights `[B, H, Tq, Tk]`.
    pub fn forward_with_weights<'t>(
        &self,
        b: &Binder<'t, '_>,
        xq: Var<'t>,
        xkv: Var<'t>,
        mask: Option<&AttnMask>,
        scope: Option<AdapterScope<'_>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (qs, ks) = (xq.shape(), xkv.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(Error::Shape(format!("attention inputs {qs:?} and {ks:?}")));
        }
        let (nb, tq, tk) = (qs[0], qs[1], ks[1]);
        let (h, dh) = (self.heads, self.d_model / self.heads);
        let split = |v: Var<'t>, t: usize| v.reshape([nb, t, h, dh])?.permute(&[0, 2, 1, 3]);
        let q = split(self.q.forward_adapted(b, xq, scope)?, tq)?;
        let k = split(self.k.forward_adapted(b, xkv, scope)?, tk)?;
        let v = split(self.v.forward_adapted(b, xkv, scope)?, tk)?;
        let mut scores = q.matmul_t(k)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            let [mb, _, mq, mk] = m.shape;
            if mq != tq || mk != tk || (mb != 1 && mb != nb) {
                return Err(Error::Shape(format!("mask {:?} for attention [{nb},{h},{tq},{tk}]", m.shape)));
            }
            scores = scores.masked_fill(&m.blocked, &m.shape, MASK_FILL)?;
        }
        let weights = scores.softmax(3)?;
        let ctx = weights.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape([nb, tq, self.d_model])?;
        Ok((self.o.forward_adapted(b, ctx, scope)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(name: &str, d: usize, hidden: usize) -> Self {
        Self { fc1: Linear::new(format!("{name}.fc1"), d, hidden), fc2: Linear::new(format!("{name}.fc2"), hidden, d) }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(b, self.fc1.forward(b, x)?.gelu())
    }
}

/// Pre-norm transformer layer: self-attention then feed-forward, each
/// with a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(name: &str, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(format!("{name}.self_attn"), d, d, heads)?,
            ln2: LayerNorm::new(format!("{name}.ln2"), d),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, hidden),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.ln1.init(store)?;
        self.attn.init(store, rng)?;
        self.ln2.init(store)?;
        self.ffn.init(store, rng)
    }

    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        x: Var<'t>,
        mask: Option<&AttnMask>,
        scope: Option<AdapterScope<'_>>,
    ) -> Result<Var<'t>> {
        let h = self.ln1.forward(b, x)?;
        let x = x.add(self.attn.forward(b, h, h, mask, scope)?)?;
        let h = self.ln2.forward(b, x)?;
        x.add(self.ffn.forward(b, h)?)
    }
}

/// A dense linear layer as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub frozen: bool,
}

impl LinearLayer {
    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store.get(&format!("{name}.weight"))?;
        Ok(Self {
            name: name.to_string(),
            weight: w.to_tensor(),
            bias: store.tensor(&format!("{name}.bias"))?,
            frozen: w.frozen,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .matmul_t(tape.constant(self.weight.clone()))?
            .add(tape.constant(self.bias.clone()))?;
        Ok((*y.value()).clone())
    }
}

/// A LoRA adapter as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `[r, in]`
    pub a: Tensor,
    /// `[out, r]`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub target_id: String,
}

impl LoraAdapter {
    pub fn load(store: &ParamStore, scope: AdapterScope<'_>, target: &str) -> Result<Self> {
        let ns = scope.adapter_name(target);
        Ok(Self {
            a: store.tensor(&format!("{ns}.lora_a"))?,
            b: store.tensor(&format!("{ns}.lora_b"))?,
            rank: scope.lora.rank,
            alpha: scope.lora.alpha,
            target_id: target.to_string(),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn check(&self, base: &LinearLayer) -> Result<()> {
        if self.target_id != base.name {
            return Err(Error::Config(format!("adapter targets `{}` but base is `{}`", self.target_id, base.name)));
        }
        let (out, inp) = (base.weight.shape()[0], base.weight.shape()[1]);
        if self.rank == 0 || self.rank >= out.min(inp) {
            return Err(Error::Config(format!("LoRA rank {} must be in 1..{}", self.rank, out.min(inp))));
        }
        if self.a.shape() != [self.rank, inp] || self.b.shape() != [out, self.rank] {
            return Err(Error::Shape(format!(
                "adapter A {:?} / B {:?} do not fit base [{out},{inp}] at rank {}",
                self.a.shape(),
                self.b.shape(),
                self.rank
            )));
        }
        Ok(())
    }

    /// `(alpha/r)·B·A`, shape `[out, in]`.
    pub fn delta(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let d = tape.constant(self.b.clone()).matmul(tape.constant(self.a.clone()))?.scale(self.scale());
        Ok((*d.value()).clone())
    }
}

/// `base(x) + (alpha/r)·B·(A·x)` for row-vector inputs `x: [n, in]`.
pub fn lora_forward(x: &Tensor, base: &LinearLayer, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(base)?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = xv
        .matmul_t(tape.constant(base.weight.clone()))?
        .add(tape.constant(base.bias.clone()))?
        .add(xv.matmul_t(tape.constant(adapter.a.clone()))?.matmul_t(tape.constant(adapter.b.clone()))?.scale(adapter.scale()))?;
    Ok((*y.value()).clone())
}

/// Folds the adapter into the base weight: `W' = W + (alpha/r)·B·A`.
/// The merged layer is frozen.
pub fn lora_merge(base: &LinearLayer, adapter: &LoraAdapter) -> Result<LinearLayer> {
    adapter.check(base)?;
    let delta = adapter.delta()?;
    let mut weight = base.weight.clone();
    for (w, d) in weight.data_mut().iter_mut().zip(delta.data()) {
        *w += d;
    }
    Ok(LinearLayer { name: base.name.clone(), weight, bias: base.bias.clone(), frozen: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn lora_hand_example() {
        let base = LinearLayer {
            name: "l".into(),
            weight: t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            bias: Tensor::zeros([2]),
            frozen: true,
        };
        // rank 1 < min(2,2)
        let ad = LoraAdapter { a: t(&[1, 2], &[1.0, 0.0]), b: t(&[2, 1], &[1.0, 0.0]), rank: 1, alpha: 1.0, target_id: "l".into() };
        let y = lora_forward(&t(&[1, 2], &[2.0, 3.0]), &base, &ad).unwrap();
        assert_eq!(y.data(), &[4.0, 3.0]);
    }

    #[test]
    fn zero_b_is_identity_and_merge_is_bit_exact() {
        let base = LinearLayer {
            name: "l".into(),
            weight: t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]),
            bias: t(&[2], &[0.01, 0.02]),
            frozen: true,
        };
        let ad = LoraAdapter { a: t(&[1, 3], &[0.3, 0.1, -0.7]), b: Tensor::zeros([2, 1]), rank: 1, alpha: 1.0, target_id: "l".into() };
        let x = t(&[1, 3], &[1.0, -2.0, 0.5]);
        assert_eq!(lora_forward(&x, &base, &ad).unwrap(), base.forward(&x).unwrap());
        assert_eq!(lora_merge(&base, &ad).unwrap().weight, base.weight);
    }

    #[test]
    fn merge_adds_ones() {
        let base = LinearLayer {
            name: "l".into(),
            weight: t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            bias: Tensor::zeros([2]),
            frozen: false,
        };
        let ad = LoraAdapter { a: Tensor::ones([1, 2]), b: Tensor::ones([2, 1]), rank: 1, alpha: 1.0, target_id: "l".into() };
        let m = lora_merge(&base, &ad).unwrap();
        assert_eq!(m.weight.data(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(m.frozen);
    }

    #[test]
    fn mismatched_target_and_rank_are_rejected() {
        let base = LinearLayer { name: "l".into(), weight: Tensor::zeros([2, 2]), bias: Tensor::zeros([2]), frozen: true };
        let ad = LoraAdapter { a: Tensor::ones([1, 2]), b: Tensor::ones([2, 1]), rank: 1, alpha: 1.0, target_id: "other".into() };
        assert!(matches!(lora_merge(&base, &ad), Err(Error::Config(_))));
        let ad = LoraAdapter { a: Tensor::ones([2, 2]), b: Tensor::ones([2, 2]), rank: 2, alpha: 1.0, target_id: "l".into() };
        assert!(matches!(lora_forward(&Tensor::ones([1, 2]), &base, &ad), Err(Error::Config(_))));
        let mut store = ParamStore::new();
        let lin = Linear::new("x", 4, 4);
        let cfg = LoraConfig { rank: 4, alpha: 1.0, targets: vec!["x".into()] };
        let err = lin.init_lora(&mut store, AdapterScope { namespace: "adapters.m", lora: &cfg }, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn missing_adapter_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new("blk.q", 4, 4);
        lin.init(&mut store, &mut rng).unwrap();
        let cfg = LoraConfig { rank: 2, alpha: 2.0, targets: vec!["q".into()] };
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Trainable::Nothing);
        let x = tape.constant(Tensor::ones([1, 4]));
        let r = lin.forward_adapted(&b, x, Some(AdapterScope { namespace: "adapters.m", lora: &cfg }));
        assert!(matches!(r, Err(Error::MissingAdapter { .. })));
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new("a", 4, 4, 1).unwrap();
        attn.init(&mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Trainable::Nothing);
        let kv = tape.constant(Tensor::new([1, 1, 4], vec![0.5, -1.0, 0.2, 0.9]).unwrap());
        let expected = {
            let v = attn.v.forward(&b, kv).unwrap();
            attn.o.forward(&b, v).unwrap().value()
        };
        for q in [[1.0, 0.0, 0.0, 0.0], [-3.0, 2.0, 0.1, 7.0]] {
            let xq = tape.constant(Tensor::new([1, 1, 4], q.to_vec()).unwrap());
            let out = attn.forward(&b, xq, kv, None, None).unwrap().value();
            assert!(out.max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn causal_mask_first_position_sees_only_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new("a", 4, 4, 2).unwrap();
        attn.init(&mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Trainable::Nothing);
        let x = tape.constant(Tensor::new([1, 3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let mask = AttnMask::from_mode(MaskMode::Causal, 3, 3);
        let (_, w) = attn.forward_with_weights(&b, x, x, Some(&mask), None).unwrap();
        let w = w.value();
        for h in 0..2 {
            assert!((w.get(&[0, h, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
            for i in 0..3 {
                let row: f64 = (0..3).map(|j| w.get(&[0, h, i, j]).unwrap()).sum();
                assert!((row - 1.0).abs() < 1e-6);
                for j in i + 1..3 {
                    assert!(w.get(&[0, h, i, j]).unwrap() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn prefix_mask_layout() {
        let m = MaskMode::Prefix(2);
        assert!(m.allows(0, 1));
        assert!(!m.allows(0, 2));
        assert!(m.allows(3, 0) && m.allows(3, 2) && m.allows(3, 3));
        assert!(!m.allows(2, 3));
    }
}
