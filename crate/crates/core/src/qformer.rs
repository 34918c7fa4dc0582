//! The alignment core: learnable queries that cross-attend to frozen modal
//! features through a frozen transformer stack, adapted per modality with
//! LoRA, plus the position embedding (PaFE) that steers queries toward a
//! region.
//!
//! Each layer runs joint self-attention over `[queries; text]`, then
//! cross-attention from the query positions to the modal features, then a
//! feed-forward block. Which positions see which is decided by the pass:
//!
//! | pass        | sequence          | self-attention mask              |
//! |-------------|-------------------|----------------------------------|
//! | queries     | queries           | bidirectional                    |
//! | text        | text              | bidirectional (padding masked)   |
//! | grounded    | queries + text    | `Prefix(num_queries)`            |
//! | matching    | queries + text    | bidirectional (padding masked)   |

use rand::Rng;

use crate::autodiff::Var;
use crate::data::vocab::PAD;
use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::nn::{AdapterScope, AttnMask, Embedding, FeedForward, LayerNorm, Linear, LoraConfig, MaskMode, MultiHeadAttention};
use crate::params::{Binder, ParamStore};
use crate::region::{RegionKind, RegionSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Width of the modal feature tokens fed to cross-attention.
    pub d_enc: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self { num_queries: 8, layers: 4, d: 64, heads: 4, ffn_hidden: 128, d_enc: 64, vocab_size: 27, max_text_len: 24 }
    }
}

struct QLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// The shared Q-Former stack (parameters under `qformer.*`).
pub struct QFormer {
    pub cfg: QFormerConfig,
    layers: Vec<QLayer>,
    pub word_emb: Embedding,
    pub pos_emb: Embedding,
    ln_final: LayerNorm,
    pub itc_query_proj: Linear,
    pub itc_text_proj: Linear,
    pub itm_head: Linear,
    pub temp: String,
}

/// Initial value of the contrastive temperature.
pub const TEMP_INIT: f64 = 0.07;

/// Token ids per sample, already framed `[BOS, ..., EOS]`.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub ids: Vec<Vec<usize>>,
}

impl TextBatch {
    pub fn new(ids: Vec<Vec<usize>>) -> Result<Self> {
        if ids.is_empty() || ids.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("empty text in batch".into()));
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.ids.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Row-major `[B, max_len]` ids padded with PAD.
    pub fn padded(&self) -> Vec<usize> {
        let t = self.max_len();
        self.ids.iter().flat_map(|s| s.iter().copied().chain(std::iter::repeat(PAD)).take(t)).collect()
    }

    pub fn lens(&self) -> Vec<usize> {
        self.ids.iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointMode {
    /// Text attends to queries and earlier text; queries see only queries.
    Grounded,
    /// Everything attends to everything (except padding).
    Matching,
}

/// Outputs of a Q-Former pass.
pub struct QFormerOut<'t> {
    /// `[B, num_queries, d]`
    pub query_out: Option<Var<'t>>,
    /// `[B, T_text, d]`
    pub text_out: Option<Var<'t>>,
}

impl QFormer {
    pub fn new(cfg: QFormerConfig) -> Result<Self> {
        let d = cfg.d;
        let layers = (0..cfg.layers)
            .map(|i| {
                Ok(QLayer {
                    ln1: LayerNorm::new(format!("qformer.{i}.ln1"), d),
                    self_attn: MultiHeadAttention::new(format!("qformer.{i}.self_attn"), d, d, cfg.heads)?,
                    ln_cross: LayerNorm::new(format!("qformer.{i}.ln_cross"), d),
                    cross_attn: MultiHeadAttention::new(format!("qformer.{i}.cross_attn"), d, cfg.d_enc, cfg.heads)?,
                    ln2: LayerNorm::new(format!("qformer.{i}.ln2"), d),
                    ffn: FeedForward::new(&format!("qformer.{i}.ffn"), d, cfg.ffn_hidden),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            word_emb: Embedding::new("qformer.word_emb", cfg.vocab_size, d),
            pos_emb: Embedding::new("qformer.pos_emb", cfg.max_text_len, d),
            ln_final: LayerNorm::new("qformer.ln_final", d),
            itc_query_proj: Linear::new("qformer.itc_query_proj", d, d),
            itc_text_proj: Linear::new("qformer.itc_text_proj", d, d),
            itm_head: Linear::new("qformer.itm_head", d, 2),
            temp: "qformer.temp".into(),
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let d = self.cfg.d;
        for l in &self.layers {
            l.ln1.init(store)?;
            l.self_attn.init(store, rng)?;
            l.ln_cross.init(store)?;
            l.cross_attn.init(store, rng)?;
            l.ln2.init(store)?;
            l.ffn.init(store, rng)?;
        }
        self.word_emb.init(store, 1.0 / (d as f64).sqrt(), rng)?;
        self.pos_emb.init(store, 0.02, rng)?;
        self.ln_final.init(store)?;
        self.itc_query_proj.init(store, rng)?;
        self.itc_text_proj.init(store, rng)?;
        self.itm_head.init(store, rng)?;
        store.insert_full(self.temp.clone(), vec![1], TEMP_INIT as f32)
    }

    /// Attention blocks that may carry adapters.
    pub fn attention_blocks(&self) -> impl Iterator<Item = &MultiHeadAttention> {
        self.layers.iter().flat_map(|l| [&l.self_attn, &l.cross_attn])
    }

    fn embed_text<'t>(&self, b: &Binder<'t, '_>, text: &TextBatch) -> Result<Var<'t>> {
        let (nb, t) = (text.len(), text.max_len());
        if t > self.cfg.max_text_len {
            return Err(Error::Invalid(format!("text of {t} tokens exceeds Q-Former limit {}", self.cfg.max_text_len)));
        }
        let words = self.word_emb.forward(b, &text.padded())?.reshape([nb, t, self.cfg.d])?;
        let pos = self.pos_emb.forward(b, &(0..t).collect::<Vec<_>>())?;
        words.add(pos)
    }

    /// Runs the stack. `queries` is `[B, nq, d]` (already including any
    /// position embedding); `feats` is `[B, T, d_enc]`.
    pub fn run<'t>(
        &self,
        b: &Binder<'t, '_>,
        queries: Option<Var<'t>>,
        feats: Option<Var<'t>>,
        text: Option<&TextBatch>,
        joint: JointMode,
        scope: Option<AdapterScope<'_>>,
    ) -> Result<QFormerOut<'t>> {
        let nq = queries.map_or(0, |q| q.shape()[1]);
        let text_emb = text.map(|t| self.embed_text(b, t)).transpose()?;
        let mut x = match (queries, text_emb) {
            (Some(q), Some(t)) => Var::concat(&[q, t], 1)?,
            (Some(q), None) => q,
            (None, Some(t)) => t,
            (None, None) => return Err(Error::Invalid("Q-Former pass needs queries or text".into())),
        };
        let s = x.shape()[1];
        let mask = text.map(|t| {
            let mode = match (queries.is_some(), joint) {
                (true, JointMode::Grounded) => MaskMode::Prefix(nq),
                _ => MaskMode::Bidirectional,
            };
            let lens: Vec<usize> = t.lens().iter().map(|l| nq + l).collect();
            AttnMask::with_padding(mode, s, &lens)
        });
        if queries.is_some() && feats.is_none() {
            return Err(Error::Invalid("query pass without modal features".into()));
        }
        for l in &self.layers {
            let h = l.ln1.forward(b, x)?;
            x = x.add(l.self_attn.forward(b, h, h, mask.as_ref(), scope)?)?;
            if let (Some(f), true) = (feats, nq > 0) {
                let q = if nq < s { x.slice(1, 0, nq)? } else { x };
                let hq = l.ln_cross.forward(b, q)?;
                let q = q.add(l.cross_attn.forward(b, hq, f, None, scope)?)?;
                x = if nq < s { Var::concat(&[q, x.slice(1, nq, s)?], 1)? } else { q };
            }
            let h = l.ln2.forward(b, x)?;
            x = x.add(l.ffn.forward(b, h)?)?;
        }
        x = self.ln_final.forward(b, x)?;
        let query_out = if nq > 0 { Some(if nq < s { x.slice(1, 0, nq)? } else { x }) } else { None };
        let text_out = if nq < s { Some(if nq > 0 { x.slice(1, nq, s)? } else { x }) } else { None };
        Ok(QFormerOut { query_out, text_out })
    }

    /// Vocabulary logits for text outputs (head tied to the word embedding).
    pub fn text_logits<'t>(&self, b: &Binder<'t, '_>, text_out: Var<'t>) -> Result<Var<'t>> {
        text_out.matmul_t(b.var(&self.word_emb.table_name())?)
    }
}

/// Two-layer MLP mapping a 6-wide box encoding to a `d`-wide embedding.
pub struct PafeModule {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PafeModule {
    pub fn new(namespace: &str, hidden: usize, d: usize) -> Self {
        Self { fc1: Linear::new(format!("{namespace}.pafe.fc1"), 6, hidden), fc2: Linear::new(format!("{namespace}.pafe.fc2"), hidden, d) }
    }

    /// `[B, d]` embeddings for a batch of regions.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, regions: &[RegionSpec]) -> Result<Var<'t>> {
        let mut rows = Vec::with_capacity(regions.len() * 6);
        for r in regions {
            r.validate()?;
            rows.extend(r.pafe_input());
        }
        let x = b.tape().constant(Tensor::new([regions.len(), 6], rows)?);
        self.fc2.forward(b, self.fc1.forward(b, x)?.gelu())
    }
}

/// The trainable bundle owned by one modality, stored under
/// `adapters.<modality>.*`: queries, Q-Former and LM LoRA adapters, the
/// LM projection and, for region modalities, PaFE and the box regressor.
pub struct ModalityAdapterSet {
    pub modality: ModalityId,
    pub namespace: String,
    pub queries: String,
    pub lm_proj: Linear,
    pub pafe: Option<PafeModule>,
    pub reg_head: Option<Linear>,
}

impl ModalityAdapterSet {
    pub fn new(modality: ModalityId, d: usize, d_lm: usize, pafe_hidden: usize) -> Self {
        let ns = modality.namespace();
        let region = modality.region_kind();
        Self {
            queries: format!("{ns}.queries"),
            lm_proj: Linear::new(format!("{ns}.lm_proj"), d, d_lm),
            pafe: region.map(|_| PafeModule::new(&ns, pafe_hidden, d)),
            reg_head: region.map(|k| Linear::new(format!("{ns}.reg_head"), d, k.dim())),
            namespace: ns,
            modality,
        }
    }

    pub fn scope<'a>(&'a self, lora: &'a LoraConfig) -> AdapterScope<'a> {
        AdapterScope { namespace: &self.namespace, lora }
    }

    /// Learnable queries broadcast to `[B, nq, d]`, plus the region
    /// embedding when `regions` is given.
    pub fn input_queries<'t>(&self, b: &Binder<'t, '_>, batch: usize, regions: Option<&[RegionSpec]>) -> Result<Var<'t>> {
        let q = b.var(&self.queries)?;
        let (nq, d) = (q.shape()[0], q.shape()[1]);
        match regions {
            None => q.broadcast_to(&[batch, nq, d]),
            Some(rs) => {
                let pafe = self.pafe.as_ref().ok_or_else(|| {
                    Error::Modality(format!("region given for non-region modality {}", self.modality))
                })?;
                if rs.len() != batch {
                    return Err(Error::Shape(format!("{} regions for batch of {batch}", rs.len())));
                }
                let kind = self.modality.region_kind().expect("region modality");
                if let Some(r) = rs.iter().find(|r| r.kind != kind) {
                    return Err(Error::Region(format!("{:?} region for modality {}", r.kind, self.modality)));
                }
                let e = pafe.forward(b, rs)?.reshape([batch, 1, d])?;
                q.broadcast_to(&[batch, nq, d])?.add(e)
            }
        }
    }

    /// Mean-pooled queries → linear → sigmoid: `[B, 4]` or `[B, 6]`.
    pub fn predict_region<'t>(&self, b: &Binder<'t, '_>, query_out: Var<'t>) -> Result<Var<'t>> {
        let head = self
            .reg_head
            .as_ref()
            .ok_or_else(|| Error::Modality(format!("modality {} has no regression head", self.modality)))?;
        Ok(head.forward(b, query_out.mean(1, false)?)?.sigmoid())
    }

    /// Names of every parameter in this set present in `store`.
    pub fn param_names(&self, store: &ParamStore) -> Vec<String> {
        store.names_with_prefix(&self.namespace).cloned().collect()
    }

    pub fn checksum(&self, store: &ParamStore) -> String {
        store.checksum(&self.namespace)
    }
}

/// PaFE embedding of a single region: `[d]`.
pub fn pafe_embed(b: &Binder<'_, '_>, pafe: &PafeModule, region: &RegionSpec) -> Result<Tensor> {
    let e = pafe.forward(b, std::slice::from_ref(region))?;
    let d = e.shape()[1];
    Ok(Tensor::new([d], e.value().data().to_vec())?)
}

/// Box dimension for a modality's regression head.
pub fn region_dim(kind: RegionKind) -> usize {
    kind.dim()
}
