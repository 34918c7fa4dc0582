//! Frozen modal feature extractors.
//!
//! Both encoders are randomly initialized and then frozen: a patch MLP for
//! images and a point-group encoder (farthest-point centers, k-nearest
//! neighborhoods, shared per-point MLP with max pooling, one transformer
//! layer) for point clouds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::params::{Binder, ParamStore, Trainable};
use crate::tensor::Tensor;

/// An RGB image with pixels in `[0, 1]`, stored HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageGrid {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!("{height}x{width} image needs {} values, got {}", height * width * 3, pixels.len())));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }
}

/// A point cloud of `[N, 3]` coordinates; color is not used.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Encoder output: `tokens` is `[T, d_enc]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalFeatures {
    pub tokens: Tensor,
    pub modality: FeatureSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Image,
    Point,
}

impl FeatureSource {
    pub fn of(m: ModalityId) -> Self {
        if m.is_point() {
            FeatureSource::Point
        } else {
            FeatureSource::Image
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub hidden: usize,
    pub d_enc: usize,
    /// Heads of the context block over patch tokens.
    pub heads: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self { image_size: 64, patch: 8, hidden: 128, d_enc: 64, heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PointEncoderConfig {
    pub groups: usize,
    pub neighbors: usize,
    pub hidden: usize,
    pub d_enc: usize,
    pub heads: usize,
    /// Concatenate absolute group centers to pooled group features.
    pub center_features: bool,
}

impl Default for PointEncoderConfig {
    fn default() -> Self {
        Self { groups: 32, neighbors: 16, hidden: 64, d_enc: 64, heads: 4, center_features: false }
    }
}

/// Fixed 2D sine-cosine table `[grid·grid, d]`, row-major over patches:
/// the first half of each row encodes the column, the second half the row,
/// with wavelengths spaced geometrically from 2 patches to 4 grids.
/// `d` must be a multiple of 4.
pub fn sincos_2d(grid: usize, d: usize) -> Tensor {
    let freqs = d / 4;
    let (shortest, longest) = (2.0f64, 4.0 * grid as f64);
    let omega: Vec<f64> = (0..freqs)
        .map(|k| {
            let t = if freqs > 1 { k as f64 / (freqs - 1) as f64 } else { 0.0 };
            std::f64::consts::TAU / (shortest * (longest / shortest).powf(t))
        })
        .collect();
    let mut data = Vec::with_capacity(grid * grid * d);
    for py in 0..grid {
        for px in 0..grid {
            for coord in [px as f64, py as f64] {
                for w in &omega {
                    data.extend([(w * coord).sin(), (w * coord).cos()]);
                }
            }
        }
    }
    Tensor::new([grid * grid, d], data).expect("d is a multiple of 4")
}

pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    fc1: Linear,
    fc2: Linear,
    pos: String,
    block: TransformerBlock,
    ln_out: LayerNorm,
}

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig) -> Result<Self> {
        if cfg.d_enc % 4 != 0 {
            return Err(Error::Config(format!("image encoder width {} is not a multiple of 4", cfg.d_enc)));
        }
        if cfg.patch == 0 || cfg.image_size % cfg.patch != 0 {
            return Err(Error::Config(format!("patch {} does not divide image size {}", cfg.patch, cfg.image_size)));
        }
        let pd = cfg.patch * cfg.patch * 3;
        Ok(Self {
            fc1: Linear::new("image_encoder.patch.fc1", pd, cfg.hidden),
            fc2: Linear::new("image_encoder.patch.fc2", cfg.hidden, cfg.d_enc),
            pos: "image_encoder.pos".into(),
            block: TransformerBlock::new("image_encoder.0", cfg.d_enc, cfg.heads, 2 * cfg.d_enc)?,
            ln_out: LayerNorm::new("image_encoder.ln_out", cfg.d_enc),
            cfg,
        })
    }

    pub fn num_tokens(&self) -> usize {
        (self.cfg.image_size / self.cfg.patch).pow(2)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)?;
        self.block.init(store, rng)?;
        self.ln_out.init(store)?;
        let grid = self.cfg.image_size / self.cfg.patch;
        let pos = sincos_2d(grid, self.cfg.d_enc);
        store.insert(self.pos.clone(), pos.shape().to_vec(), pos.data().iter().map(|&v| v as f32).collect())
    }

    /// Row-major patches, each flattened HWC: `[T, P·P·3]`.
    pub fn patchify(&self, img: &ImageGrid) -> Result<Tensor> {
        let p = self.cfg.patch;
        if img.height % p != 0 || img.width % p != 0 {
            return Err(Error::Shape(format!("{}x{} image not divisible by patch {p}", img.height, img.width)));
        }
        let (gh, gw) = (img.height / p, img.width / p);
        let mut data = Vec::with_capacity(img.pixels.len());
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let o = ((py * p + y) * img.width + px * p) * 3;
                    data.extend(img.pixels[o..o + p * 3].iter().map(|&v| v as f64));
                }
            }
        }
        Tensor::new([gh * gw, p * p * 3], data)
    }

    /// Tokens `[B, T, d_enc]` for a batch of images: per-patch MLP, fixed
    /// positions, one self-attention block across patches, layer norm, and
    /// the positions once more.
    pub fn tokens<'t>(&self, b: &Binder<'t, '_>, imgs: &[&ImageGrid]) -> Result<Var<'t>> {
        let (t, d) = (self.num_tokens(), self.cfg.d_enc);
        let mut data = Vec::new();
        for img in imgs {
            if img.height != self.cfg.image_size || img.width != self.cfg.image_size {
                return Err(Error::Shape(format!(
                    "encoder expects {0}x{0} images, got {1}x{2}",
                    self.cfg.image_size, img.height, img.width
                )));
            }
            data.extend_from_slice(self.patchify(img)?.data());
        }
        let x = b.tape().constant(Tensor::new([imgs.len() * t, data.len() / (imgs.len() * t).max(1)], data)?);
        let h = self.fc2.forward(b, self.fc1.forward(b, x)?.gelu())?.reshape([imgs.len(), t, d])?;
        let pos = b.var(&self.pos)?.broadcast_to(&[imgs.len(), t, d])?;
        let h = self.block.forward(b, h.add(pos)?, None, None)?;
        self.ln_out.forward(b, h)?.add(pos)
    }

    pub fn encode(&self, store: &ParamStore, img: &ImageGrid) -> Result<ModalFeatures> {
        let tape = Tape::new();
        let b = Binder::new(&tape, store, Trainable::Nothing);
        let tokens = self.tokens(&b, &[img])?.reshape([self.num_tokens(), self.cfg.d_enc])?;
        Ok(ModalFeatures { tokens: (*tokens.value()).clone(), modality: FeatureSource::Image })
    }
}

pub struct PointEncoder {
    pub cfg: PointEncoderConfig,
    fc1: Linear,
    fc2: Linear,
    proj: Linear,
    block: TransformerBlock,
}

impl PointEncoder {
    pub fn new(cfg: PointEncoderConfig) -> Result<Self> {
        let pooled = cfg.d_enc + if cfg.center_features { 3 } else { 0 };
        Ok(Self {
            fc1: Linear::new("point_encoder.group.fc1", 3, cfg.hidden),
            fc2: Linear::new("point_encoder.group.fc2", cfg.hidden, cfg.d_enc),
            proj: Linear::new("point_encoder.proj", pooled, cfg.d_enc),
            block: TransformerBlock::new("point_encoder.0", cfg.d_enc, cfg.heads, 2 * cfg.d_enc)?,
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)?;
        self.proj.init(store, rng)?;
        self.block.init(store, rng)
    }

    /// Centered neighborhoods `[k, m, 3]` and their centers `[k, 3]`.
    pub fn group(&self, pc: &PointCloud) -> Result<(Tensor, Tensor)> {
        let (k, m) = (self.cfg.groups, self.cfg.neighbors);
        if pc.len() < k.max(m) {
            return Err(Error::Invalid(format!("cloud of {} points cannot form {k} groups of {m}", pc.len())));
        }
        let centers = fps(pc, k, 0)?;
        let mut offsets = Vec::with_capacity(k * m * 3);
        let mut cdata = Vec::with_capacity(k * 3);
        for &c in &centers {
            let cp = pc.points[c];
            for &j in &knn(pc, cp, m) {
                let p = pc.points[j];
                offsets.extend((0..3).map(|a| p[a] as f64 - cp[a] as f64));
            }
            cdata.extend(cp.iter().map(|&v| v as f64));
        }
        Ok((Tensor::new([k, m, 3], offsets)?, Tensor::new([k, 3], cdata)?))
    }

    /// Per-group pooled features `[k, d_enc]` (before the projection).
    pub fn pooled<'t>(&self, b: &Binder<'t, '_>, offsets: &Tensor) -> Result<Var<'t>> {
        let x = b.tape().constant(offsets.clone());
        self.fc2.forward(b, self.fc1.forward(b, x)?.gelu())?.max(1, false)
    }

    pub fn encode(&self, store: &ParamStore, pc: &PointCloud) -> Result<ModalFeatures> {
        let (offsets, centers) = self.group(pc)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, store, Trainable::Nothing);
        let mut feats = self.pooled(&b, &offsets)?;
        if self.cfg.center_features {
            feats = Var::concat(&[feats, tape.constant(centers)], 1)?;
        }
        let tokens = self.proj.forward(&b, feats)?;
        let k = self.cfg.groups;
        let tokens = self.block.forward(&b, tokens.reshape([1, k, self.cfg.d_enc])?, None, None)?;
        let tokens = tokens.reshape([k, self.cfg.d_enc])?;
        Ok(ModalFeatures { tokens: (*tokens.value()).clone(), modality: FeatureSource::Point })
    }
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum()
}

/// Greedy farthest-point sampling from `start`. Each pick maximizes the
/// distance to the nearest already-picked point; ties go to the lowest
/// index.
pub fn fps(pc: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if k > n {
        return Err(Error::Invalid(format!("cannot pick {k} points from {n}")));
    }
    if start >= n {
        return Err(Error::Invalid(format!("start index {start} out of range for {n} points")));
    }
    if k == 0 {
        return Ok(vec![]);
    }
    let mut picked = vec![start];
    let mut nearest: Vec<f64> = pc.points.iter().map(|&p| dist2(p, pc.points[start])).collect();
    let mut taken = vec![false; n];
    taken[start] = true;
    while picked.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in nearest.iter().enumerate() {
            if !taken[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        picked.push(best);
        taken[best] = true;
        let bp = pc.points[best];
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(pc.points[i], bp));
        }
    }
    Ok(picked)
}

/// Indices of the `m` points nearest to `center` (ties by index).
pub fn knn(pc: &PointCloud, center: [f32; 3], m: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = pc.points.iter().enumerate().map(|(i, &p)| (dist2(p, center), i)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().take(m).map(|(_, i)| i).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_drop: f64,
    /// Minimum number of points kept after dropout.
    pub min_points: usize,
    pub scale_range: (f64, f64),
    /// Rotation about z is drawn from `[-max_angle, max_angle]` radians.
    pub max_angle: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_drop: 0.1, min_points: 32, scale_range: (0.8, 1.25), max_angle: std::f64::consts::PI }
    }
}

/// Random point dropout, uniform scaling and rotation about the up (z)
/// axis, in that order.
pub fn augment_pointcloud(pc: &PointCloud, seed: u64, cfg: &AugmentConfig) -> Result<PointCloud> {
    if pc.len() < cfg.min_points {
        return Err(Error::Invalid(format!("cloud of {} points below floor {}", pc.len(), cfg.min_points)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<[f32; 3]> = Vec::new();
    for _ in 0..64 {
        kept = pc.points.iter().copied().filter(|_| !rng.gen_bool(cfg.p_drop.clamp(0.0, 1.0))).collect();
        if kept.len() >= cfg.min_points {
            break;
        }
    }
    if kept.len() < cfg.min_points {
        kept = pc.points.clone();
    }
    let (lo, hi) = cfg.scale_range;
    let s = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let theta = if cfg.max_angle > 0.0 { rng.gen_range(-cfg.max_angle..cfg.max_angle) } else { 0.0 };
    let (sin, cos) = theta.sin_cos();
    let points = kept
        .into_iter()
        .map(|p| {
            let (x, y, z) = (p[0] as f64 * s, p[1] as f64 * s, p[2] as f64 * s);
            [(cos * x - sin * y) as f32, (sin * x + cos * y) as f32, z as f32]
        })
        .collect();
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> PointCloud {
        PointCloud { points: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]] }
    }

    #[test]
    fn fps_picks_the_far_point() {
        assert_eq!(fps(&line(), 2, 0).unwrap(), vec![0, 3]);
        let all = fps(&line(), 4, 2).unwrap();
        assert_eq!(all[0], 2);
        let mut s = all.clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3]);
        assert!(fps(&line(), 5, 0).is_err());
    }

    #[test]
    fn image_token_count_and_positions() {
        let enc = ImageEncoder::new(ImageEncoderConfig::default()).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = ImageGrid::blank(64, 64);
        let f = enc.encode(&store, &img).unwrap();
        assert_eq!(f.tokens.shape(), &[64, 64]);
        let rows: Vec<&[f64]> = f.tokens.data().chunks(64).collect();
        for i in 0..rows.len() {
            for j in 0..i {
                assert_ne!(rows[i], rows[j]);
            }
        }
        let pos = sincos_2d(8, 64);
        assert_eq!(pos.shape(), &[64, 64]);
        assert!(pos.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pos.data()[1], 1.0);
        assert!(enc.encode(&store, &ImageGrid::blank(60, 60)).is_err());
        assert!(ImageEncoder::new(ImageEncoderConfig { image_size: 60, ..Default::default() }).is_err());
        assert!(ImageEncoder::new(ImageEncoderConfig { d_enc: 62, ..Default::default() }).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let pc = PointCloud { points: (0..40).map(|i| [i as f32 * 0.1, (i % 7) as f32, 0.5]).collect() };
        let cfg = AugmentConfig { p_drop: 0.0, min_points: 4, scale_range: (1.0, 1.0), max_angle: 0.0 };
        assert_eq!(augment_pointcloud(&pc, 9, &cfg).unwrap(), pc);
    }

    #[test]
    fn degenerate_cloud_is_valid() {
        let cfg = PointEncoderConfig { groups: 4, neighbors: 8, ..Default::default() };
        let enc = PointEncoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pc = PointCloud { points: vec![[0.3, 0.3, 0.3]; 20] };
        let f = enc.encode(&store, &pc).unwrap();
        assert_eq!(f.tokens.shape(), &[4, 64]);
        assert!(f.tokens.data().iter().all(|v| v.is_finite()));
    }
}
