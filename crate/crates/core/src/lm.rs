//! Small decoder-only language model conditioned on a soft prompt.
//!
//! The model sees `[soft prompt; BOS; prefix; target]` and is scored only on
//! the target tokens (and the closing EOS). In [`LmMode::Prefix`] the soft
//! prompt, BOS and the instruction prefix attend bidirectionally; in
//! [`LmMode::Causal`] every position is causal.

use rand::Rng;

use crate::autodiff::Var;
use crate::data::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{AdapterScope, AttnMask, Embedding, LayerNorm, MaskMode, MultiHeadAttention, TransformerBlock};
use crate::params::{Binder, ParamStore, Trainable};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LmConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { d: 64, layers: 4, heads: 4, ffn_hidden: 128, vocab_size: 27, max_len: 48 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmMode {
    Causal,
    #[default]
    Prefix,
}

/// Token side of a prompted sequence: ids are `[BOS, prefix..., target..., EOS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptedSequence {
    pub prefix: Vec<usize>,
    pub target: Vec<usize>,
}

impl PromptedSequence {
    pub fn new(prefix: Vec<usize>, target: Vec<usize>) -> Self {
        Self { prefix, target }
    }

    pub fn ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.prefix.len() + self.target.len() + 2);
        ids.push(BOS);
        ids.extend(&self.prefix);
        ids.extend(&self.target);
        ids.push(EOS);
        ids
    }
}

pub struct ToyLm {
    pub cfg: LmConfig,
    pub tok_emb: Embedding,
    pub pos_emb: Embedding,
    blocks: Vec<TransformerBlock>,
    ln_final: LayerNorm,
}

impl ToyLm {
    pub fn new(cfg: LmConfig) -> Result<Self> {
        let blocks =
            (0..cfg.layers).map(|i| TransformerBlock::new(&format!("lm.{i}"), cfg.d, cfg.heads, cfg.ffn_hidden)).collect::<Result<_>>()?;
        Ok(Self {
            tok_emb: Embedding::new("lm.tok_emb", cfg.vocab_size, cfg.d),
            pos_emb: Embedding::new("lm.pos_emb", cfg.max_len, cfg.d),
            ln_final: LayerNorm::new("lm.ln_final", cfg.d),
            blocks,
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.tok_emb.init(store, 1.0 / (self.cfg.d as f64).sqrt(), rng)?;
        self.pos_emb.init(store, 0.02, rng)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.ln_final.init(store)
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &MultiHeadAttention> {
        self.blocks.iter().map(|b| &b.attn)
    }

    /// Logits `[B, S, V]` for embedded inputs `[B, S, d]`.
    pub fn forward_embedded<'t>(
        &self,
        b: &Binder<'t, '_>,
        x: Var<'t>,
        mask: &AttnMask,
        scope: Option<AdapterScope<'_>>,
    ) -> Result<Var<'t>> {
        let s = x.shape()[1];
        if s > self.cfg.max_len {
            return Err(Error::Invalid(format!("sequence of {s} exceeds LM limit {}", self.cfg.max_len)));
        }
        let pos = self.pos_emb.forward(b, &(0..s).collect::<Vec<_>>())?;
        let mut h = x.add(pos)?;
        for blk in &self.blocks {
            h = blk.forward(b, h, Some(mask), scope)?;
        }
        self.ln_final.forward(b, h)?.matmul_t(b.var(&self.tok_emb.table_name())?)
    }

    /// `[B, P + L, d]`: soft prompt followed by embedded tokens (`ids` is
    /// `[B, L]` row-major).
    fn embed_inputs<'t>(&self, b: &Binder<'t, '_>, soft: Var<'t>, ids: &[usize], l: usize) -> Result<Var<'t>> {
        let sh = soft.shape();
        if sh.len() != 3 || sh[2] != self.cfg.d {
            return Err(Error::Shape(format!("soft prompt {sh:?} for LM width {}", self.cfg.d)));
        }
        if ids.iter().any(|&i| i >= self.cfg.vocab_size) {
            return Err(Error::OutOfVocabulary(format!("token id beyond {}", self.cfg.vocab_size)));
        }
        let tok = self.tok_emb.forward(b, ids)?.reshape([sh[0], l, self.cfg.d])?;
        Var::concat(&[soft, tok], 1)
    }
}

/// Self-attention mask over `[soft (p); tokens]` with `open` leading
/// bidirectional positions and padding past `valid_lens`.
pub fn lm_mask(mode: LmMode, p: usize, open: usize, s: usize, valid_lens: &[usize]) -> AttnMask {
    let m = match mode {
        LmMode::Causal => MaskMode::Causal,
        LmMode::Prefix => MaskMode::Prefix(p + open),
    };
    AttnMask::with_padding(m, s, valid_lens)
}

/// Mean next-token cross-entropy over the target tokens (and closing EOS)
/// of every sequence. `soft` is `[B, P, d]`.
pub fn lm_loss<'t>(
    lm: &ToyLm,
    b: &Binder<'t, '_>,
    soft: Var<'t>,
    seqs: &[PromptedSequence],
    mode: LmMode,
    scope: Option<AdapterScope<'_>>,
) -> Result<Var<'t>> {
    let nb = soft.shape()[0];
    if seqs.len() != nb {
        return Err(Error::Shape(format!("{} sequences for a soft prompt batch of {nb}", seqs.len())));
    }
    if seqs.iter().any(|s| s.target.is_empty()) {
        return Err(Error::Invalid("language-model target is empty".into()));
    }
    let plen = seqs[0].prefix.len();
    if seqs.iter().any(|s| s.prefix.len() != plen) {
        return Err(Error::Invalid("prefixes in a batch must share a length".into()));
    }
    let p = soft.shape()[1];
    // inputs drop the final token; labels are the inputs shifted by one
    let full: Vec<Vec<usize>> = seqs.iter().map(PromptedSequence::ids).collect();
    let l = full.iter().map(|f| f.len() - 1).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(nb * l);
    let mut picks = Vec::new();
    let mut labels = Vec::new();
    for (bi, f) in full.iter().enumerate() {
        let n = f.len() - 1;
        ids.extend(f[..n].iter().copied().chain(std::iter::repeat(PAD)).take(l));
        // input position j predicts f[j+1]; targets start at f[1 + plen]
        for j in plen..n {
            picks.push((bi * (p + l) + p + j, f[j + 1]));
        }
    }
    let s = p + l;
    let valid: Vec<usize> = full.iter().map(|f| p + f.len() - 1).collect();
    let x = lm.embed_inputs(b, soft, &ids, l)?;
    let mask = lm_mask(mode, p, 1 + plen, s, &valid);
    let logits = lm.forward_embedded(b, x, &mask, scope)?;
    let v = lm.cfg.vocab_size;
    let rows: Vec<usize> = picks.iter().map(|&(r, _)| r).collect();
    labels.extend(picks.iter().map(|&(_, t)| t));
    let lp = logits.reshape([nb * s, v])?.gather_rows(&rows)?.log_softmax(1)?;
    Ok(lp.pick_last(&labels)?.mean_all().neg())
}

/// Greedy decoding of up to `max_new` tokens after `[soft; BOS; prefix]`,
/// stopping at EOS. Returns the generated ids without EOS.
pub fn greedy_decode(
    lm: &ToyLm,
    store: &ParamStore,
    soft: &Tensor,
    prefix: &[usize],
    max_new: usize,
    mode: LmMode,
    scope: Option<AdapterScope<'_>>,
) -> Result<Vec<usize>> {
    let sh = soft.shape();
    if sh.len() != 2 {
        return Err(Error::Shape(format!("soft prompt for decoding must be [P, d], got {sh:?}")));
    }
    let p = sh[0];
    let mut ids = vec![BOS];
    ids.extend(prefix);
    let open = ids.len();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if p + ids.len() > lm.cfg.max_len {
            break;
        }
        let tape = crate::autodiff::Tape::new();
        let b = Binder::new(&tape, store, Trainable::Nothing);
        let soft_v = tape.constant(soft.reshape([1, p, sh[1]])?);
        let x = lm.embed_inputs(&b, soft_v, &ids, ids.len())?;
        let s = p + ids.len();
        let mask = lm_mask(mode, p, open, s, &[s]);
        let logits = lm.forward_embedded(&b, x, &mask, scope)?;
        let v = lm.cfg.vocab_size;
        let vals = logits.value();
        let next = argmax(&vals.data()[(s - 1) * v..s * v]);
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ToyLm, ParamStore) {
        let cfg = LmConfig { d: 16, layers: 1, heads: 2, ffn_hidden: 32, vocab_size: 10, max_len: 16 };
        let lm = ToyLm::new(cfg).unwrap();
        let mut store = ParamStore::new();
        lm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (lm, store)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (lm, mut store) = small();
        store.set_tensor("lm.tok_emb.table", &Tensor::zeros([10, 16])).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Trainable::Nothing);
        let soft = tape.constant(Tensor::zeros([2, 3, 16]));
        let seqs = vec![PromptedSequence::new(vec![3], vec![4, 5]), PromptedSequence::new(vec![6], vec![7])];
        let loss = lm_loss(&lm, &b, soft, &seqs, LmMode::Prefix, None).unwrap();
        assert!((loss.item() - (10f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_target_is_rejected() {
        let (lm, store) = small();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Trainable::Nothing);
        let soft = tape.constant(Tensor::zeros([1, 2, 16]));
        let seqs = vec![PromptedSequence::new(vec![3], vec![])];
        assert!(lm_loss(&lm, &b, soft, &seqs, LmMode::Causal, None).is_err());
    }

    #[test]
    fn padding_does_not_change_per_sequence_loss() {
        let (lm, store) = small();
        let loss_of = |seqs: &[PromptedSequence], soft: Tensor| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &store, Trainable::Nothing);
            lm_loss(&lm, &b, tape.constant(soft), seqs, LmMode::Prefix, None).unwrap().item()
        };
        let a = PromptedSequence::new(vec![3], vec![4]);
        let long = PromptedSequence::new(vec![5], vec![6, 7, 8, 9]);
        let soft1 = Tensor::full([1, 2, 16], 0.1);
        let alone = loss_of(std::slice::from_ref(&a), soft1);
        let both = loss_of(&[a, long.clone()], Tensor::full([2, 2, 16], 0.1));
        let long_alone = loss_of(&[long], Tensor::full([1, 2, 16], 0.1));
        // both = (2·alone + 5·long_alone) / 7 token-weighted
        assert!((both - (2.0 * alone + 5.0 * long_alone) / 7.0).abs() < 1e-9);
    }

    #[test]
    fn decode_respects_limits() {
        let (lm, store) = small();
        let out = greedy_decode(&lm, &store, &Tensor::zeros([2, 16]), &[3], 5, LmMode::Prefix, None).unwrap();
        assert!(out.len() <= 5);
        assert!(out.iter().all(|&t| t != EOS && t < 10));
    }
}
