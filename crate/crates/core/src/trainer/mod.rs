//! Optimization and the training loops.
//!
//! ```text
//! pretrain_image_encoder  image_encoder.*          trainable
//! pretrain_lm    lm.*                              trainable
//! pretrain_base  qformer.*, adapters.img_text.*    trainable, LM frozen
//! extend         adapters.<new>.*                  trainable, all else frozen
//! ```

pub mod checkpoint;
pub mod schedule;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::dataset::{load_payload, read_dataset, dataset_file, Payload, Split, TrainSample};
use crate::data::synth::{derive_seed, gen_image_scene, patch_labels, ImageSceneConfig};
use crate::data::vocab::{COLORS, SHAPES};
use crate::encoders::AugmentConfig;
use crate::nn::Linear;
use crate::error::{Error, Result};
use crate::lm::{lm_loss, PromptedSequence};
use crate::losses::{combined_loss, LossReport};
use crate::modality::ModalityId;
use crate::model::{ForwardOptions, ModalBatch, RegionBlip, BASE_MODALITY};
use crate::params::{Binder, ParamStore, Trainable};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use schedule::{lr_at, semi_hybrid_epoch, PlannedBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub modality_order: Vec<ModalityId>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub use_pafe: bool,
    /// Random dropout, scaling and rotation of point clouds per step.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            min_lr: 1e-5,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            total_steps: 2000,
            batch_size: 8,
            lambda: 1.0,
            seed: 0,
            modality_order: vec![ModalityId::ImgRegion, ModalityId::PcText, ModalityId::PcRegion],
            grad_clip: Some(1.0),
            use_pafe: true,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return bad(format!("need 0 < min_lr <= peak_lr, got {} and {}", self.min_lr, self.peak_lr));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad(format!("warmup_steps {} must be below total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 || !self.lambda.is_finite() {
            return bad("weight_decay, eps or lambda out of range".into());
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("`{key}` expects true or false, got `{v}`"))),
            }
        }
        match key {
            "peak_lr" => self.peak_lr = num(key, value)?,
            "min_lr" => self.min_lr = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "modality_order" => {
                self.modality_order = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("unknown modality `{s}` in modality_order"))))
                    .collect::<Result<_>>()?
            }
            "grad_clip" => self.grad_clip = if value == "off" { None } else { Some(num(key, value)?) },
            "use_pafe" => self.use_pafe = flag(key, value)?,
            "augment" => self.augment = flag(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let order: Vec<&str> = self.modality_order.iter().map(|m| m.as_str()).collect();
        let clip = self.grad_clip.map_or("off".to_string(), |c| c.to_string());
        format!(
            "peak_lr = {}\nmin_lr = {}\nwarmup_steps = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\ntotal_steps = {}\n\
             batch_size = {}\nlambda = {}\nseed = {}\nmodality_order = {}\ngrad_clip = {clip}\nuse_pafe = {}\naugment = {}\n",
            self.peak_lr,
            self.min_lr,
            self.warmup_steps,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.total_steps,
            self.batch_size,
            self.lambda,
            self.seed,
            order.join(","),
            self.use_pafe,
            self.augment
        )
    }
}

/// AdamW moments for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Rescales `grads` in place so their global L2 norm is at most `max`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update of every parameter in `grads`.
pub fn adamw_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    for (name, g) in grads {
        if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` contains {v}")));
        }
        let p = store.get(name)?;
        if p.frozen {
            return Err(Error::Invalid(format!("optimizer asked to update frozen `{name}`")));
        }
        if p.shape != g.shape() {
            return Err(Error::Shape(format!("gradient {:?} for `{name}` of shape {:?}", g.shape(), p.shape)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for (i, (w, &gi)) in p.data.iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let (mh, vh) = (m[i] / bc1, v[i] / bc2);
            let w64 = *w as f64;
            *w = (w64 - lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * w64)) as f32;
        }
    }
    Ok(())
}

/// Which parameters a training run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// The Q-Former base and the base modality's queries and projection.
    Base,
    /// Only the adapter set of each batch's modality.
    Adapters,
}

impl Stage {
    pub fn trainable(self, model: &RegionBlip, m: ModalityId) -> Result<Trainable> {
        match self {
            Stage::Base => Ok(Trainable::Prefixes(vec!["qformer".into(), BASE_MODALITY.namespace()])),
            Stage::Adapters => model.trainable_for(m),
        }
    }
}

/// One forward, one backward and one AdamW step over `trainable`.
pub fn train_step(
    model: &mut RegionBlip,
    batch: &ModalBatch,
    trainable: Trainable,
    cfg: &TrainConfig,
    state: &mut AdamState,
    lr: f64,
    negative_seed: u64,
) -> Result<LossReport> {
    let tape = Tape::new();
    let (report, mut grads) = {
        let b = Binder::new(&tape, &model.store, trainable);
        let opts = ForwardOptions { lambda: cfg.lambda, use_pafe: cfg.use_pafe, negative_seed };
        let losses = model.batch_losses(&b, batch, opts)?;
        let report = combined_loss(losses.parts, cfg.lambda)?;
        let grads = tape.backward(losses.total)?;
        (report, b.collect(&grads))
    };
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    adamw_step(&mut model.store, &grads, state, lr, cfg)?;
    Ok(report)
}

/// A modality's samples with decoded payloads and cached image features.
pub struct ModalityData {
    pub modality: ModalityId,
    pub samples: Vec<TrainSample>,
    payloads: Vec<Payload>,
    payload_of: Vec<usize>,
    cached: Vec<Option<Tensor>>,
    captions: Vec<Vec<usize>>,
}

impl ModalityData {
    pub fn load(root: &Path, modality: ModalityId, split: Split, model: &RegionBlip) -> Result<Self> {
        let samples = read_dataset(&dataset_file(root, modality, split))?;
        Self::from_samples(root, modality, samples, model)
    }

    pub fn from_samples(root: &Path, modality: ModalityId, samples: Vec<TrainSample>, model: &RegionBlip) -> Result<Self> {
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let (mut payloads, mut payload_of, mut captions) = (Vec::new(), Vec::new(), Vec::new());
        for s in &samples {
            if s.modality != modality {
                return Err(Error::Invalid(format!("sample {} is {} in a {modality} dataset", s.id, s.modality)));
            }
            let k = match index.get(&s.payload) {
                Some(&k) => k,
                None => {
                    payloads.push(load_payload(root, s)?);
                    index.insert(s.payload.clone(), payloads.len() - 1);
                    payloads.len() - 1
                }
            };
            payload_of.push(k);
            captions.push(model.vocab.encode_words(&s.caption)?);
        }
        let cached = payloads
            .iter()
            .map(|p| match p {
                Payload::Image(_) => model.encode(p, None).map(Some),
                Payload::Points(_) => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { modality, samples, payloads, payload_of, cached, captions })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn caption_ids(&self, i: usize) -> &[usize] {
        &self.captions[i]
    }

    /// Encoded features of sample `i`, augmented when `augment` is given.
    pub fn features(&self, model: &RegionBlip, i: usize, augment: Option<(u64, &AugmentConfig)>) -> Result<Tensor> {
        let k = self.payload_of[i];
        match (&self.cached[k], augment) {
            (Some(f), _) => Ok(f.clone()),
            (None, aug) => model.encode(&self.payloads[k], aug),
        }
    }

    pub fn batch(&self, model: &RegionBlip, indices: &[usize], augment_seed: Option<u64>) -> Result<ModalBatch> {
        let aug_cfg = augment_config(self.modality);
        let feats = indices
            .iter()
            .map(|&i| self.features(model, i, augment_seed.map(|s| (derive_seed(&[s, self.samples[i].id]), &aug_cfg))))
            .collect::<Result<_>>()?;
        let regions = self
            .modality
            .is_region()
            .then(|| indices.iter().map(|&i| self.samples[i].region.clone().expect("validated region sample")).collect());
        Ok(ModalBatch {
            modality: self.modality,
            ids: indices.iter().map(|&i| self.samples[i].id).collect(),
            feats,
            regions,
            captions: indices.iter().map(|&i| self.captions[i].clone()).collect(),
        })
    }
}

/// Point-cloud augmentation used in training. Region boxes are axis
/// aligned, so region clouds are not rotated; caption clouds only slightly,
/// keeping their left-to-right object order.
pub fn augment_config(m: ModalityId) -> AugmentConfig {
    let max_angle = if m.is_region() { 0.0 } else { std::f64::consts::PI / 12.0 };
    AugmentConfig { max_angle, ..Default::default() }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub modality: String,
    pub itc: f64,
    pub itg: f64,
    pub itm: f64,
    pub llm: f64,
    pub reg: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

impl LogRecord {
    pub fn new(step: usize, modality: &str, r: &LossReport, lr: f64) -> Self {
        Self { step, modality: modality.to_string(), itc: r.itc, itg: r.itg, itm: r.itm, llm: r.llm, reg: r.reg, total: r.total, lr }
    }
}

/// Runs `cfg.total_steps` steps of semi-hybrid training over `data`,
/// cycling epochs as needed. `on_step` sees every log record.
pub fn train(
    model: &mut RegionBlip,
    data: &BTreeMap<ModalityId, ModalityData>,
    cfg: &TrainConfig,
    stage: Stage,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    for m in &cfg.modality_order {
        model.adapter_set(*m)?;
        if stage == Stage::Adapters && *m == BASE_MODALITY {
            return Err(Error::Config(format!("{m} belongs to the frozen base and cannot be trained as an adapter")));
        }
    }
    let ids: BTreeMap<ModalityId, Vec<u64>> = data.iter().map(|(m, d)| (*m, d.ids())).collect();
    let mut states: BTreeMap<ModalityId, AdamState> = BTreeMap::new();
    let mut reports = Vec::with_capacity(cfg.total_steps);
    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.total_steps {
        for planned in semi_hybrid_epoch(&ids, &cfg.modality_order, cfg.batch_size, cfg.seed, epoch)? {
            if step >= cfg.total_steps {
                break;
            }
            let d = &data[&planned.modality];
            let aug = (cfg.augment && planned.modality.is_point()).then(|| derive_seed(&[cfg.seed, 0xa46, step as u64]));
            let batch = d.batch(model, &planned.indices, aug)?;
            let lr = lr_at(step + 1, cfg);
            let trainable = stage.trainable(model, planned.modality)?;
            let state = states.entry(planned.modality).or_default();
            let neg_seed = derive_seed(&[cfg.seed, 0x17a, step as u64]);
            let report = train_step(model, &batch, trainable, cfg, state, lr, neg_seed)?;
            on_step(&LogRecord::new(step + 1, planned.modality.as_str(), &report, lr));
            reports.push(report);
            step += 1;
        }
        epoch += 1;
    }
    Ok(reports)
}

/// Caption corpus for language-model pre-training.
#[derive(Clone, Debug)]
pub struct LmExample {
    pub prefix: Vec<usize>,
    pub caption: Vec<usize>,
}

/// Soft prompt that names the caption's content words: their embeddings
/// (plus Gaussian jitter) in caption order, zero-padded to `nq` rows.
pub fn word_prompt(model: &RegionBlip, caption: &[usize], noise: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (nq, d) = (model.cfg.qformer.num_queries, model.cfg.lm.d);
    let skip = [model.vocab.id("a")?, model.vocab.id("and")?];
    let table = model.store.tensor(&model.lm.tok_emb.table_name())?;
    let normal = Normal::new(0.0, noise.max(1e-12)).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut data = vec![0.0; nq * d];
    for (slot, &w) in caption.iter().filter(|w| !skip.contains(w)).take(nq).enumerate() {
        for j in 0..d {
            data[slot * d + j] = table.data()[w * d + j] + if noise > 0.0 { normal.sample(rng) } else { 0.0 };
        }
    }
    Tensor::new([nq, d], data)
}

/// Trains the LM alone on prefix + caption sequences behind word prompts.
pub fn pretrain_lm(model: &mut RegionBlip, corpus: &[LmExample], cfg: &TrainConfig, mut on_step: impl FnMut(&LogRecord)) -> Result<Vec<f64>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("empty language-model corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x11]));
    let mut state = AdamState::default();
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let (nq, d) = (model.cfg.qformer.num_queries, model.cfg.lm.d);
    for step in 0..cfg.total_steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(order.pop().expect("refilled"));
        }
        // prefixes must share a length within a batch
        let plen = corpus[picked[0]].prefix.len();
        picked.retain(|&i| corpus[i].prefix.len() == plen);
        let prompts: Vec<Tensor> = picked.iter().map(|&i| word_prompt(model, &corpus[i].caption, 0.1, &mut rng)).collect::<Result<_>>()?;
        let flat: Vec<f64> = prompts.iter().flat_map(|t| t.data().iter().copied()).collect();
        let tape = Tape::new();
        let (loss, mut grads) = {
            let b = Binder::new(&tape, &model.store, Trainable::Prefixes(vec!["lm".into()]));
            let soft = tape.constant(Tensor::new([picked.len(), nq, d], flat)?);
            let seqs: Vec<PromptedSequence> =
                picked.iter().map(|&i| PromptedSequence::new(corpus[i].prefix.clone(), corpus[i].caption.clone())).collect();
            let loss = lm_loss(&model.lm, &b, soft, &seqs, model.cfg.lm_mode, None)?;
            let grads = tape.backward(loss)?;
            (loss.item(), b.collect(&grads))
        };
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(step + 1, cfg);
        adamw_step(&mut model.store, &grads, &mut state, lr, cfg)?;
        let r = combined_loss(crate::losses::LossParts { llm: loss, ..Default::default() }, cfg.lambda)?;
        on_step(&LogRecord::new(step + 1, "lm", &r, lr));
        losses.push(loss);
    }
    Ok(losses)
}


/// Pre-trains the image encoder on freshly generated scenes to name the
/// color and shape of the object under each patch, then freezes it. The
/// two classification heads are discarded afterwards.
pub fn pretrain_image_encoder(model: &mut RegionBlip, cfg: &TrainConfig, mut on_step: impl FnMut(&LogRecord)) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = model.cfg.image.d_enc;
    let heads = [
        Linear::new("image_encoder.head.color", d, COLORS.len() + 1),
        Linear::new("image_encoder.head.shape", d, SHAPES.len() + 1),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x1e]));
    for h in &heads {
        h.init(&mut model.store, &mut rng)?;
    }
    model.store.set_frozen_prefix("image_encoder", false);
    model.store.set_frozen_prefix("image_encoder.pos", true);
    let scene_cfg = ImageSceneConfig { size: model.cfg.image.image_size, ..Default::default() };
    let mut state = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let scenes: Vec<_> =
            (0..cfg.batch_size).map(|k| gen_image_scene(derive_seed(&[cfg.seed, 0x1f, step as u64, k as u64]), &scene_cfg)).collect();
        let labels: Vec<(usize, usize)> = scenes.iter().flat_map(|s| patch_labels(s, model.cfg.image.patch)).collect();
        let tape = Tape::new();
        let (loss, mut grads) = {
            let b = Binder::new(&tape, &model.store, Trainable::Prefixes(vec!["image_encoder".into()]));
            let imgs: Vec<_> = scenes.iter().map(|s| &s.image).collect();
            let tokens = model.image_encoder.tokens(&b, &imgs)?.reshape([labels.len(), d])?;
            let ce = |head: &Linear, target: Vec<usize>| -> Result<_> {
                Ok(head.forward(&b, tokens)?.log_softmax(1)?.pick_last(&target)?.mean_all().neg())
            };
            let loss = ce(&heads[0], labels.iter().map(|l| l.0).collect())?.add(ce(&heads[1], labels.iter().map(|l| l.1).collect())?)?;
            let grads = tape.backward(loss)?;
            (loss.item(), b.collect(&grads))
        };
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(step + 1, cfg);
        adamw_step(&mut model.store, &grads, &mut state, lr, cfg)?;
        let r = LossReport { itc: 0.0, itg: 0.0, itm: 0.0, llm: 0.0, reg: None, lambda: cfg.lambda, total: loss };
        on_step(&LogRecord::new(step + 1, "image_encoder", &r, lr));
        losses.push(loss);
    }
    model.store.remove_prefix("image_encoder.head");
    model.store.set_frozen_prefix("image_encoder", true);
    Ok(losses)
}
