//! Learning-rate schedule and the semi-hybrid batch order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::synth::derive_seed;
use crate::error::{Error, Result};
use crate::modality::ModalityId;

use super::TrainConfig;

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return cfg.min_lr;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.min_lr * (1.0 - w) + cfg.peak_lr * w
}

/// One batch of a planned epoch: positions into that modality's dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedBatch {
    pub modality: ModalityId,
    pub indices: Vec<usize>,
    pub ids: Vec<u64>,
}

/// Batches of one epoch: all of `order[0]`'s samples (shuffled), then all
/// of `order[1]`'s, and so on. The final batch of a modality may be short.
pub fn semi_hybrid_epoch(
    datasets: &BTreeMap<ModalityId, Vec<u64>>,
    order: &[ModalityId],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PlannedBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut out = Vec::new();
    for &m in order {
        let ids = datasets.get(&m).ok_or_else(|| Error::Invalid(format!("no dataset for registered modality {m}")))?;
        if ids.is_empty() {
            return Err(Error::Invalid(format!("dataset for modality {m} is empty")));
        }
        let midx = ModalityId::ALL.iter().position(|&x| x == m).expect("known modality") as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, midx]));
        let mut perm: Vec<usize> = (0..ids.len()).collect();
        perm.shuffle(&mut rng);
        for chunk in perm.chunks(batch_size) {
            out.push(PlannedBatch { modality: m, indices: chunk.to_vec(), ids: chunk.iter().map(|&i| ids[i]).collect() });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_pins() {
        let cfg = TrainConfig { total_steps: 1000, ..Default::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(200, &cfg), 1e-4);
        assert_eq!(lr_at(1000, &cfg), 1e-5);
        assert!((lr_at(600, &cfg) - 5.5e-5).abs() < 1e-12);
        assert!((lr_at(199, &cfg) - 1e-4).abs() < 1e-6);
    }

    #[test]
    fn segments_follow_order() {
        use ModalityId::*;
        let mut d = BTreeMap::new();
        d.insert(ImgRegion, vec![1, 2, 3, 4]);
        d.insert(PcText, vec![10, 11]);
        d.insert(PcRegion, vec![20, 21]);
        let plan = semi_hybrid_epoch(&d, &[ImgRegion, PcText, PcRegion], 2, 5, 0).unwrap();
        let mods: Vec<_> = plan.iter().map(|b| b.modality).collect();
        assert_eq!(mods, vec![ImgRegion, ImgRegion, PcText, PcRegion]);
        d.insert(PcText, vec![]);
        assert!(semi_hybrid_epoch(&d, &[PcText], 2, 5, 0).is_err());
    }
}
