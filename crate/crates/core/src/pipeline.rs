//! End-to-end stages: data generation, LM and base pre-training,
//! incremental extension, adapter pre-training and evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::data::dataset::{generate_split, GenConfig, Split};
use crate::data::synth::{derive_seed, gen_image_scene, gen_point_scene};
use crate::error::{Error, Result};
use crate::filter::noun_chunks;
use crate::metrics::{corpus_cider, retrieval_recall, EvalReport};
use crate::modality::ModalityId;
use crate::model::{RegionBlip, BASE_MODALITY};
use crate::trainer::{pretrain_lm, train, LmExample, LogRecord, ModalityData, Stage, TrainConfig};

/// Longest caption the decoder may produce.
pub const MAX_CAPTION_TOKENS: usize = 16;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenSummary {
    pub modality: ModalityId,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Writes train and test splits for every modality under `root`.
pub fn gen_data(root: &Path, train_scenes: usize, test_scenes: usize, seed: u64) -> Result<Vec<GenSummary>> {
    let cfg = GenConfig { seed, image: Default::default(), points: Default::default() };
    ModalityId::ALL
        .iter()
        .map(|&m| {
            let train = generate_split(root, m, Split::Train, train_scenes, &cfg)?;
            let test = generate_split(root, m, Split::Test, test_scenes, &cfg)?;
            Ok(GenSummary { modality: m, train_samples: train.len(), test_samples: test.len() })
        })
        .collect()
}

/// Captions of freshly sampled scenes (whole-scene and per-object, image
/// and point cloud) with their modality prefixes.
pub fn lm_corpus(model: &RegionBlip, n_scenes: usize, seed: u64) -> Result<Vec<LmExample>> {
    let gen = GenConfig { seed, image: Default::default(), points: Default::default() };
    let img_prefix = model.vocab.encode_words(ModalityId::ImgText.prefix())?;
    let pc_prefix = model.vocab.encode_words(ModalityId::PcText.prefix())?;
    let mut out = Vec::new();
    for i in 0..n_scenes as u64 {
        let s = gen_image_scene(derive_seed(&[seed, 0x1c, i]), &gen.image);
        let p = gen_point_scene(derive_seed(&[seed, 0x9c, i]), &gen.points);
        let img = std::iter::once(s.caption).chain(s.objects.into_iter().map(|o| o.caption));
        let pc = std::iter::once(p.caption).chain(p.objects.into_iter().map(|o| o.caption));
        for c in img {
            out.push(LmExample { prefix: img_prefix.clone(), caption: model.vocab.encode_words(&c)? });
        }
        for c in pc {
            out.push(LmExample { prefix: pc_prefix.clone(), caption: model.vocab.encode_words(&c)? });
        }
    }
    Ok(out)
}

/// Trains the LM on its own, then freezes it.
pub fn run_pretrain_lm(model: &mut RegionBlip, cfg: &TrainConfig, n_scenes: usize, on_step: impl FnMut(&LogRecord)) -> Result<Vec<f64>> {
    let corpus = lm_corpus(model, n_scenes, cfg.seed)?;
    model.store.set_frozen_prefix("lm", false);
    let losses = pretrain_lm(model, &corpus, cfg, on_step)?;
    model.store.set_frozen_prefix("lm", true);
    Ok(losses)
}

/// Trains the Q-Former base with the base modality's queries and
/// projection on image-text data, then freezes everything.
pub fn run_pretrain_base(model: &mut RegionBlip, root: &Path, cfg: &TrainConfig, on_step: impl FnMut(&LogRecord)) -> Result<()> {
    let mut data = BTreeMap::new();
    data.insert(BASE_MODALITY, ModalityData::load(root, BASE_MODALITY, Split::Train, model)?);
    let cfg = TrainConfig { modality_order: vec![BASE_MODALITY], ..cfg.clone() };
    model.store.set_frozen_prefix("lm", true);
    model.store.set_frozen_prefix("qformer", false);
    model.store.set_frozen_prefix(&BASE_MODALITY.namespace(), false);
    train(model, &data, &cfg, Stage::Base, on_step)?;
    model.store.freeze_all();
    Ok(())
}

/// Registers a new modality on a frozen base.
pub fn extend(model: &mut RegionBlip, modality: ModalityId, seed: u64) -> Result<()> {
    if modality == BASE_MODALITY {
        return Err(Error::Modality(format!("{modality} is part of the base model")));
    }
    if let Some((name, _)) = model.store.iter().find(|(n, p)| !p.frozen && !n.starts_with("adapters.")) {
        return Err(Error::Invalid(format!("base tensor `{name}` is not frozen")));
    }
    model.register_modality(modality, derive_seed(&[seed, 0xe7]))
}

/// Semi-hybrid adapter training over `cfg.modality_order`.
pub fn run_pretrain(model: &mut RegionBlip, root: &Path, cfg: &TrainConfig, on_step: impl FnMut(&LogRecord)) -> Result<()> {
    let mut data = BTreeMap::new();
    for &m in &cfg.modality_order {
        data.insert(m, ModalityData::load(root, m, Split::Train, model)?);
    }
    train(model, &data, cfg, Stage::Adapters, on_step)?;
    Ok(())
}

/// One decoded test sample.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub caption: String,
    pub reference: String,
    pub region: Option<Vec<f64>>,
}

/// Captions (and boxes) for up to `limit` samples of a split.
pub fn predict(model: &RegionBlip, root: &Path, modality: ModalityId, split: Split, use_pafe: bool, limit: Option<usize>) -> Result<Vec<Prediction>> {
    let data = ModalityData::load(root, modality, split, model)?;
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    (0..n)
        .map(|i| {
            let s = &data.samples[i];
            let f = data.features(model, i, None)?;
            let caption = model.caption(modality, &f, s.region.as_ref(), use_pafe, MAX_CAPTION_TOKENS)?;
            let region = match s.region {
                Some(ref r) => Some(model.predict_region(modality, &f, Some(r), use_pafe)?),
                None => None,
            };
            Ok(Prediction { id: s.id, caption, reference: s.caption.clone(), region })
        })
        .collect()
}

/// CIDEr, recall@1 and, for region modalities, box error and object
/// accuracy on a split.
pub fn evaluate(model: &RegionBlip, root: &Path, modality: ModalityId, split: Split, seed: u64, use_pafe: bool, limit: Option<usize>) -> Result<EvalReport> {
    let preds = predict(model, root, modality, split, use_pafe, limit)?;
    let cands: Vec<String> = preds.iter().map(|p| p.caption.clone()).collect();
    let refs: Vec<Vec<String>> = preds.iter().map(|p| vec![p.reference.clone()]).collect();
    let cider = corpus_cider(&cands, &refs)?;

    let data = ModalityData::load(root, modality, split, model)?;
    let (mut qs, mut ts) = (Vec::new(), Vec::new());
    for i in 0..preds.len() {
        let f = data.features(model, i, None)?;
        let (q, t) = model.itc_features(modality, &f, data.samples[i].region.as_ref(), data.caption_ids(i))?;
        qs.push(q);
        ts.push(t);
    }
    let recall_at_1 = if preds.is_empty() { 0.0 } else { retrieval_recall(&qs, &ts, 1)? };

    let (region_l1, object_accuracy) = if modality.is_region() && !preds.is_empty() {
        let mut l1 = 0.0;
        let mut hits = 0;
        for (p, s) in preds.iter().zip(&data.samples) {
            let want = &s.region.as_ref().expect("region sample").coords;
            let got = p.region.as_ref().expect("region prediction");
            l1 += got.iter().zip(want).map(|(a, b)| (a - b).abs()).sum::<f64>() / want.len() as f64;
            let (gc, rc) = (noun_chunks(&p.caption), noun_chunks(&p.reference));
            if !rc.is_empty() && gc.first() == rc.first() {
                hits += 1;
            }
        }
        (Some(l1 / preds.len() as f64), Some(hits as f64 / preds.len() as f64))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        modality,
        split: split.as_str().into(),
        cider,
        recall_at_1,
        n_samples: preds.len(),
        seed,
        region_l1,
        object_accuracy,
    })
}

/// Writes each record as one JSON line.
pub fn jsonl_logger<W: Write>(mut w: W) -> impl FnMut(&LogRecord) {
    move |r: &LogRecord| {
        if let Ok(s) = serde_json::to_string(r) {
            let _ = writeln!(w, "{s}");
        }
    }
}
