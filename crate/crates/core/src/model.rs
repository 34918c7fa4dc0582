//! The assembled model: frozen encoders, the Q-Former base, the toy LM and
//! one adapter set per registered modality.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::dataset::Payload;
use crate::data::vocab::Vocab;
use crate::encoders::{augment_pointcloud, AugmentConfig, ImageEncoder, ImageEncoderConfig, PointEncoder, PointEncoderConfig};
use crate::error::{Error, Result};
use crate::lm::{greedy_decode, lm_loss, LmConfig, LmMode, PromptedSequence, ToyLm};
use crate::losses::{combine_vars, infonce_with_targets, itc_similarity, itm_loss, reg_loss, token_ce, LossParts};
use crate::modality::ModalityId;
use crate::nn::{AdapterScope, LoraConfig};
use crate::params::{Binder, ParamStore, Trainable};
use crate::qformer::{JointMode, ModalityAdapterSet, QFormer, QFormerConfig, TextBatch};
use crate::region::RegionSpec;
use crate::tensor::Tensor;

/// The modality whose adapter set belongs to the base model.
pub const BASE_MODALITY: ModalityId = ModalityId::ImgText;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub qformer: QFormerConfig,
    pub lm: LmConfig,
    pub image: ImageEncoderConfig,
    pub points: PointEncoderConfig,
    pub lora: LoraConfig,
    pub pafe_hidden: usize,
    pub lm_mode: LmMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vocab = Vocab::grammar().len();
        Self {
            qformer: QFormerConfig { vocab_size: vocab, ..Default::default() },
            lm: LmConfig { vocab_size: vocab, ..Default::default() },
            image: ImageEncoderConfig::default(),
            points: PointEncoderConfig::default(),
            lora: LoraConfig::default(),
            pafe_hidden: 64,
            lm_mode: LmMode::Prefix,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let q = &self.qformer;
        if q.d_enc != self.image.d_enc || q.d_enc != self.points.d_enc {
            return Err(Error::Config(format!(
                "encoder widths {} / {} do not match Q-Former input {}",
                self.image.d_enc, self.points.d_enc, q.d_enc
            )));
        }
        if q.vocab_size != self.lm.vocab_size {
            return Err(Error::Config("Q-Former and LM vocabularies differ".into()));
        }
        if q.num_queries == 0 || self.pafe_hidden == 0 {
            return Err(Error::Config("query count and PaFE width must be positive".into()));
        }
        Ok(())
    }
}

/// One homogeneous training batch.
#[derive(Clone, Debug)]
pub struct ModalBatch {
    pub modality: ModalityId,
    pub ids: Vec<u64>,
    /// Encoded features per sample, each `[T, d_enc]`.
    pub feats: Vec<Tensor>,
    pub regions: Option<Vec<RegionSpec>>,
    /// Caption content ids (no framing).
    pub captions: Vec<Vec<usize>>,
}

impl ModalBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if n == 0 || self.feats.len() != n || self.captions.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} ids, {} feature sets, {} captions",
                self.feats.len(),
                self.captions.len()
            )));
        }
        match (&self.regions, self.modality.is_region()) {
            (Some(r), true) if r.len() == n => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::Region(format!("region list does not fit a {} batch of {n}", self.modality))),
        }
    }
}

/// Per-step switches for [`RegionBlip::batch_losses`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub lambda: f64,
    /// Feed boxes through PaFE (off for the ablation).
    pub use_pafe: bool,
    /// Seeds the choice of in-batch matching negatives.
    pub negative_seed: u64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { lambda: 1.0, use_pafe: true, negative_seed: 0 }
    }
}

/// Loss terms of one batch, on the tape.
pub struct BatchLosses<'t> {
    pub total: Var<'t>,
    pub itc: Var<'t>,
    pub itg: Var<'t>,
    pub itm: Var<'t>,
    pub llm: Var<'t>,
    pub reg: Option<Var<'t>>,
    pub parts: LossParts,
}

pub struct RegionBlip {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub qformer: QFormer,
    pub lm: ToyLm,
    pub image_encoder: ImageEncoder,
    pub point_encoder: PointEncoder,
    pub adapters: BTreeMap<ModalityId, ModalityAdapterSet>,
}

impl RegionBlip {
    /// Builds the layer descriptors for `cfg` around an existing store.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::grammar();
        if vocab.len() != cfg.lm.vocab_size {
            return Err(Error::Config(format!("vocabulary has {} tokens, config says {}", vocab.len(), cfg.lm.vocab_size)));
        }
        let mut m = Self {
            qformer: QFormer::new(cfg.qformer.clone())?,
            lm: ToyLm::new(cfg.lm.clone())?,
            image_encoder: ImageEncoder::new(cfg.image.clone())?,
            point_encoder: PointEncoder::new(cfg.points.clone())?,
            adapters: BTreeMap::new(),
            vocab,
            store,
            cfg,
        };
        for id in ModalityId::ALL {
            if m.store.contains(&format!("{}.queries", id.namespace())) {
                m.adapters.insert(id, m.adapter_descriptor(id));
            }
        }
        Ok(m)
    }

    /// Fresh model: encoders (frozen), LM, Q-Former base and the base
    /// modality's queries and projection.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::from_store(cfg, ParamStore::new())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.image_encoder.init(&mut m.store, &mut rng)?;
        m.point_encoder.init(&mut m.store, &mut rng)?;
        m.store.set_frozen_prefix("image_encoder", true);
        m.store.set_frozen_prefix("point_encoder", true);
        m.lm.init(&mut m.store, &mut rng)?;
        m.qformer.init(&mut m.store, &mut rng)?;
        let set = m.adapter_descriptor(BASE_MODALITY);
        let (nq, d) = (m.cfg.qformer.num_queries, m.cfg.qformer.d);
        m.store.insert_normal(set.queries.clone(), vec![nq, d], 0.02, &mut rng)?;
        set.lm_proj.init(&mut m.store, &mut rng)?;
        m.adapters.insert(BASE_MODALITY, set);
        Ok(m)
    }

    fn adapter_descriptor(&self, id: ModalityId) -> ModalityAdapterSet {
        ModalityAdapterSet::new(id, self.cfg.qformer.d, self.cfg.lm.d, self.cfg.pafe_hidden)
    }

    /// Adds a modality: queries and projection copied from the base set,
    /// fresh LoRA adapters on the Q-Former and LM, and for region
    /// modalities a PaFE module and box regressor. All new tensors are
    /// trainable.
    pub fn register_modality(&mut self, id: ModalityId, seed: u64) -> Result<()> {
        if self.adapters.contains_key(&id) {
            return Err(Error::Modality(format!("modality {id} is already registered")));
        }
        let base = self.adapters.get(&BASE_MODALITY).ok_or_else(|| Error::Modality("base adapter set missing".into()))?;
        let set = self.adapter_descriptor(id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let copy = [
            (base.queries.clone(), set.queries.clone()),
            (format!("{}.weight", base.lm_proj.name), format!("{}.weight", set.lm_proj.name)),
            (format!("{}.bias", base.lm_proj.name), format!("{}.bias", set.lm_proj.name)),
        ];
        for (from, to) in copy {
            let t = self.store.tensor(&from)?;
            self.store.insert_tensor(to, &t)?;
        }
        let scope = set.scope(&self.cfg.lora);
        for attn in self.qformer.attention_blocks().chain(self.lm.attention_blocks()) {
            attn.init_lora(&mut self.store, scope, &mut rng)?;
        }
        if let Some(p) = &set.pafe {
            p.fc1.init(&mut self.store, &mut rng)?;
            p.fc2.init(&mut self.store, &mut rng)?;
        }
        if let Some(h) = &set.reg_head {
            h.init(&mut self.store, &mut rng)?;
        }
        self.store.set_frozen_prefix(&set.namespace, false);
        self.adapters.insert(id, set);
        Ok(())
    }

    pub fn adapter_set(&self, id: ModalityId) -> Result<&ModalityAdapterSet> {
        self.adapters.get(&id).ok_or_else(|| Error::Modality(format!("modality {id} is not registered")))
    }

    /// LoRA scope of a modality; the base modality runs unadapted.
    pub fn scope(&self, id: ModalityId) -> Result<Option<AdapterScope<'_>>> {
        let set = self.adapter_set(id)?;
        Ok((id != BASE_MODALITY).then(|| set.scope(&self.cfg.lora)))
    }

    /// Frozen-encoder features `[T, d_enc]`; point clouds are augmented
    /// first when `augment` carries a seed.
    pub fn encode(&self, payload: &Payload, augment: Option<(u64, &AugmentConfig)>) -> Result<Tensor> {
        match payload {
            Payload::Image(img) => Ok(self.image_encoder.encode(&self.store, img)?.tokens),
            Payload::Points(pc) => {
                let pc = match augment {
                    Some((seed, cfg)) => augment_pointcloud(pc, seed, cfg)?,
                    None => pc.clone(),
                };
                Ok(self.point_encoder.encode(&self.store, &pc)?.tokens)
            }
        }
    }

    fn stack_feats<'t>(&self, tape: &'t Tape, feats: &[&Tensor]) -> Result<Var<'t>> {
        let first = feats.first().ok_or_else(|| Error::Invalid("empty feature batch".into()))?.shape().to_vec();
        if first.len() != 2 || first[1] != self.cfg.qformer.d_enc {
            return Err(Error::Shape(format!("modal features {first:?}, expected [T, {}]", self.cfg.qformer.d_enc)));
        }
        let mut data = Vec::with_capacity(feats.len() * first[0] * first[1]);
        for f in feats {
            if f.shape() != first.as_slice() {
                return Err(Error::Shape(format!("mixed feature shapes {first:?} and {:?}", f.shape())));
            }
            data.extend_from_slice(f.data());
        }
        Ok(tape.constant(Tensor::new([feats.len(), first[0], first[1]], data)?))
    }

    fn regions_for(&self, id: ModalityId, regions: Option<&[RegionSpec]>, use_pafe: bool) -> Result<Option<Vec<RegionSpec>>> {
        match regions {
            Some(_) if !id.is_region() => Err(Error::Modality(format!("region given for non-region modality {id}"))),
            Some(r) if use_pafe => Ok(Some(r.to_vec())),
            _ => Ok(None),
        }
    }

    /// Query outputs `[B, nq, d]` for a batch of encoded features.
    pub fn query_pass<'t>(
        &self,
        b: &Binder<'t, '_>,
        id: ModalityId,
        feats: &[&Tensor],
        regions: Option<&[RegionSpec]>,
        use_pafe: bool,
    ) -> Result<Var<'t>> {
        let set = self.adapter_set(id)?;
        let f = self.stack_feats(b.tape(), feats)?;
        let regions = self.regions_for(id, regions, use_pafe)?;
        let q = set.input_queries(b, feats.len(), regions.as_deref())?;
        let out = self.qformer.run(b, Some(q), Some(f), None, JointMode::Matching, self.scope(id)?)?;
        Ok(out.query_out.expect("query pass yields query outputs"))
    }

    /// Projects query outputs into the LM's embedding space.
    pub fn soft_prompt<'t>(&self, b: &Binder<'t, '_>, id: ModalityId, query_out: Var<'t>) -> Result<Var<'t>> {
        self.adapter_set(id)?.lm_proj.forward(b, query_out)
    }

    pub fn prefix_ids(&self, id: ModalityId) -> Result<Vec<usize>> {
        self.vocab.encode_words(id.prefix())
    }

    /// Every applicable loss of one batch plus their weighted total.
    pub fn batch_losses<'t>(&self, b: &Binder<'t, '_>, batch: &ModalBatch, opts: ForwardOptions) -> Result<BatchLosses<'t>> {
        batch.validate()?;
        let id = batch.modality;
        let set = self.adapter_set(id)?;
        let scope = self.scope(id)?;
        let n = batch.len();
        let tape = b.tape();
        let feat_refs: Vec<&Tensor> = batch.feats.iter().collect();
        let feats = self.stack_feats(tape, &feat_refs)?;
        let regions = self.regions_for(id, batch.regions.as_deref(), opts.use_pafe)?;
        let queries = set.input_queries(b, n, regions.as_deref())?;
        let framed: Vec<Vec<usize>> = batch.captions.iter().map(|c| frame(c)).collect();
        let text = TextBatch::new(framed.clone())?;

        let query_out = self.qformer.run(b, Some(queries), Some(feats), None, JointMode::Matching, scope)?.query_out.expect("queries");
        let text_out = self.qformer.run(b, None, None, Some(&text), JointMode::Matching, scope)?.text_out.expect("text");

        // contrastive: captions that coincide count as positives of each other
        let positives: Vec<f64> =
            (0..n * n).map(|k| f64::from(batch.captions[k / n] == batch.captions[k % n])).collect();
        let temp = b.var(&self.qformer.temp)?.clamp(0.01, 1.0);
        let qf = self.qformer.itc_query_proj.forward(b, query_out)?;
        let tf = self.qformer.itc_text_proj.forward(b, text_out.slice(1, 0, 1)?.reshape([n, self.cfg.qformer.d])?)?;
        let itc = if n >= 2 {
            let sim = itc_similarity(qf, tf, temp)?;
            infonce_with_targets(sim, tape.constant(Tensor::new([n, n], positives)?))?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };

        // grounded generation through the text stream
        let g = self.qformer.run(b, Some(queries), Some(feats), Some(&text), JointMode::Grounded, scope)?;
        let logits = self.qformer.text_logits(b, g.text_out.expect("text"))?;
        let (t, v) = (text.max_len(), self.cfg.qformer.vocab_size);
        let (mut rows, mut labels) = (Vec::new(), Vec::new());
        for (i, f) in framed.iter().enumerate() {
            for j in 0..f.len() - 1 {
                rows.push(i * t + j);
                labels.push(f[j + 1]);
            }
        }
        let itg = token_ce(logits.reshape([n * t, v])?, &rows, &labels)?;

        // matching against one in-batch negative per positive, where one exists
        let mut rng = ChaCha8Rng::seed_from_u64(opts.negative_seed);
        let mut neg_of = Vec::new();
        for i in 0..n {
            let cands: Vec<usize> = (0..n).filter(|&j| batch.captions[j] != batch.captions[i]).collect();
            if let Some(&j) = cands.choose(&mut rng) {
                neg_of.push((i, j));
            }
        }
        let itm = if neg_of.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let m = neg_of.len();
            let qi: Vec<usize> = (0..n).chain(neg_of.iter().map(|&(i, _)| i)).collect();
            let ti: Vec<usize> = (0..n).chain(neg_of.iter().map(|&(_, j)| j)).collect();
            let q2 = gather_batch(queries, &qi)?;
            let f2 = gather_batch(feats, &qi)?;
            let text2 = TextBatch::new(ti.iter().map(|&j| framed[j].clone()).collect())?;
            let o = self.qformer.run(b, Some(q2), Some(f2), Some(&text2), JointMode::Matching, scope)?;
            let pooled = o.query_out.expect("queries").mean(1, false)?;
            let logits = self.qformer.itm_head.forward(b, pooled)?;
            let labels: Vec<usize> = (0..n + m).map(|k| usize::from(k < n)).collect();
            itm_loss(logits, &labels)?
        };

        // language modelling on the projected queries
        let soft = self.soft_prompt(b, id, query_out)?;
        let prefix = self.prefix_ids(id)?;
        let seqs: Vec<PromptedSequence> = batch.captions.iter().map(|c| PromptedSequence::new(prefix.clone(), c.clone())).collect();
        let llm = lm_loss(&self.lm, b, soft, &seqs, self.cfg.lm_mode, scope)?;

        let reg = match (&batch.regions, id.is_region()) {
            (Some(rs), true) => {
                let pred = set.predict_region(b, query_out)?;
                let dim = rs[0].coords.len();
                let target: Vec<f64> = rs.iter().flat_map(|r| r.coords.iter().copied()).collect();
                Some(reg_loss(pred, tape.constant(Tensor::new([n, dim], target)?))?)
            }
            _ => None,
        };
        let parts = LossParts { itc: itc.item(), itg: itg.item(), itm: itm.item(), llm: llm.item(), reg: reg.map(|r| r.item()) };
        let total = combine_vars(itc, itg, itm, llm, reg, opts.lambda)?;
        Ok(BatchLosses { total, itc, itg, itm, llm, reg, parts })
    }

    /// Greedy caption for one encoded sample.
    pub fn caption(&self, id: ModalityId, feats: &Tensor, region: Option<&RegionSpec>, use_pafe: bool, max_new: usize) -> Result<String> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, Trainable::Nothing);
        let q = self.query_pass(&b, id, &[feats], region.map(std::slice::from_ref), use_pafe)?;
        let soft = self.soft_prompt(&b, id, q)?;
        let (nq, d) = (self.cfg.qformer.num_queries, self.cfg.lm.d);
        let soft = soft.value().reshape([nq, d])?;
        let ids = greedy_decode(&self.lm, &self.store, &soft, &self.prefix_ids(id)?, max_new, self.cfg.lm_mode, self.scope(id)?)?;
        Ok(self.vocab.detokenize(&ids))
    }

    /// Predicted normalized box for one encoded sample.
    pub fn predict_region(&self, id: ModalityId, feats: &Tensor, region: Option<&RegionSpec>, use_pafe: bool) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, Trainable::Nothing);
        let q = self.query_pass(&b, id, &[feats], region.map(std::slice::from_ref), use_pafe)?;
        let p = self.adapter_set(id)?.predict_region(&b, q)?;
        let v = p.value();
        Ok(v.data().to_vec())
    }

    /// ITC embeddings of queries (`[nq, d]`) and text (`[d]`), unnormalized.
    pub fn itc_features(&self, id: ModalityId, feats: &Tensor, region: Option<&RegionSpec>, caption: &[usize]) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, Trainable::Nothing);
        let q = self.query_pass(&b, id, &[feats], region.map(std::slice::from_ref), true)?;
        let qf = self.qformer.itc_query_proj.forward(&b, q)?;
        let text = TextBatch::new(vec![frame(caption)])?;
        let t = self.qformer.run(&b, None, None, Some(&text), JointMode::Matching, self.scope(id)?)?.text_out.expect("text");
        let d = self.cfg.qformer.d;
        let tf = self.qformer.itc_text_proj.forward(&b, t.slice(1, 0, 1)?.reshape([1, d])?)?;
        Ok((qf.value().reshape([self.cfg.qformer.num_queries, d])?, tf.value().reshape([d])?))
    }

    /// Names of all tensors that a step on `id` may update.
    pub fn trainable_for(&self, id: ModalityId) -> Result<Trainable> {
        Ok(Trainable::Prefixes(vec![self.adapter_set(id)?.namespace.clone()]))
    }
}

fn frame(content: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(content.len() + 2);
    v.push(crate::data::vocab::BOS);
    v.extend_from_slice(content);
    v.push(crate::data::vocab::EOS);
    v
}

/// Selects batch rows `idx` of `x` (`[B, ...]`).
fn gather_batch<'t>(x: Var<'t>, idx: &[usize]) -> Result<Var<'t>> {
    let s = x.shape();
    let inner: usize = s[1..].iter().product();
    let flat = x.reshape([s[0], inner])?.gather_rows(idx)?;
    let mut shape = s.clone();
    shape[0] = idx.len();
    flat.reshape(shape)
}

/// A probe of a modality's current behaviour: query outputs on fixed inputs.
pub fn probe_outputs(model: &RegionBlip, id: ModalityId, feats: &[Tensor], regions: Option<&[RegionSpec]>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let b = Binder::new(&tape, &model.store, Trainable::Nothing);
    let refs: Vec<&Tensor> = feats.iter().collect();
    let q = model.query_pass(&b, id, &refs, regions, true)?;
    let soft = model.soft_prompt(&b, id, q)?;
    Ok(soft.value().data().to_vec())
}

/// Seed for a modality-specific stream.
pub fn modality_seed(seed: u64, id: ModalityId) -> u64 {
    let idx = ModalityId::ALL.iter().position(|&m| m == id).unwrap_or(0) as u64;
    crate::data::synth::derive_seed(&[seed, 0x6d6f64, idx])
}
