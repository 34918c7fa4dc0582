//! Box-text mining: find regions, caption them on a white background, and
//! keep a regional caption only when one of its noun chunks closely matches
//! a noun chunk of the whole-image caption.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{load_image, read_dataset};
use crate::data::synth::color_rgb;
use crate::data::vocab::{COLORS, PRIMITIVES, SHAPES};
use crate::encoders::ImageGrid;
use crate::error::{Error, Result};
use crate::region::RegionSpec;

/// A discovered object: pixel mask over the whole image and its tight box.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub mask: Vec<bool>,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)`.
    pub bounds: (usize, usize, usize, usize),
    pub area: usize,
}

impl Component {
    pub fn region(&self, width: usize, height: usize) -> Result<RegionSpec> {
        let (x0, y0, x1, y1) = self.bounds;
        let (w, h) = (width as f64, height as f64);
        RegionSpec::box2d(x0 as f64 / w, y0 as f64 / h, (x1 + 1) as f64 / w, (y1 + 1) as f64 / h)
    }
}

pub trait Segmenter {
    fn segment(&self, img: &ImageGrid) -> Vec<Component>;
}

/// 4-connected components of equal-colored, non-black pixels.
#[derive(Clone, Debug)]
pub struct ColorComponents {
    /// Minimum component area as a fraction of the image.
    pub min_area: f64,
}

impl Default for ColorComponents {
    fn default() -> Self {
        Self { min_area: 0.001 }
    }
}

impl Segmenter for ColorComponents {
    fn segment(&self, img: &ImageGrid) -> Vec<Component> {
        let (w, h) = (img.width, img.height);
        let key = |x: usize, y: usize| img.pixel(x, y).map(|c| (c * 255.0).round() as u8);
        let mut label = vec![usize::MAX; w * h];
        let mut out = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                let k = key(sx, sy);
                if label[sy * w + sx] != usize::MAX || k == [0, 0, 0] {
                    continue;
                }
                let id = out.len();
                let mut mask = vec![false; w * h];
                let (mut x0, mut y0, mut x1, mut y1, mut area) = (sx, sy, sx, sy, 0);
                let mut stack = vec![(sx, sy)];
                label[sy * w + sx] = id;
                while let Some((x, y)) = stack.pop() {
                    mask[y * w + x] = true;
                    area += 1;
                    (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                    let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                    for (nx, ny) in nbrs {
                        if nx < w && ny < h && label[ny * w + nx] == usize::MAX && key(nx, ny) == k {
                            label[ny * w + nx] = id;
                            stack.push((nx, ny));
                        }
                    }
                }
                out.push(Component { mask, bounds: (x0, y0, x1, y1), area });
            }
        }
        let min = self.min_area * (w * h) as f64;
        out.into_iter().filter(|c| c.area as f64 >= min).collect()
    }
}

pub fn discover_regions(img: &ImageGrid, segmenter: &dyn Segmenter) -> Result<Vec<RegionSpec>> {
    segmenter.segment(img).iter().map(|c| c.region(img.width, img.height)).collect()
}

/// Crops `img` to `region`; pixels outside `mask` (whole-image, row
/// major) become white.
pub fn whiten_crop(img: &ImageGrid, region: &RegionSpec, mask: Option<&[bool]>) -> Result<ImageGrid> {
    region.validate()?;
    if region.coords.len() != 4 {
        return Err(Error::Region("crops need a 2-D box".into()));
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let c = &region.coords;
    let (x0, y0) = ((c[0] * w).floor() as usize, (c[1] * h).floor() as usize);
    let (x1, y1) = (((c[2] * w).ceil() as usize).min(img.width), ((c[3] * h).ceil() as usize).min(img.height));
    if x1 <= x0 || y1 <= y0 || (c[2] - c[0]) * w < 1.0 || (c[3] - c[1]) * h < 1.0 {
        return Err(Error::Region(format!("box {c:?} covers less than one pixel")));
    }
    if let Some(m) = mask {
        if m.len() != img.width * img.height {
            return Err(Error::Shape(format!("mask of {} for {}x{} image", m.len(), img.width, img.height)));
        }
    }
    let mut out = ImageGrid::blank(y1 - y0, x1 - x0);
    for y in y0..y1 {
        for x in x0..x1 {
            let keep = mask.map_or(true, |m| m[y * img.width + x]);
            out.set_pixel(x - x0, y - y0, if keep { img.pixel(x, y) } else { [1.0; 3] });
        }
    }
    Ok(out)
}

/// Noun chunks of a grammar caption: `"<color> <shape>"` pairs and bare
/// primitives. Captions with words outside the grammar yield nothing.
pub fn noun_chunks(caption: &str) -> Vec<String> {
    const OTHER: [&str; 13] = ["a", "photo", "of", "point", "cloud", "and", "above", "below", "to", "the", "left", "right", "next"];
    let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
    let known = |w: &str| COLORS.contains(&w) || SHAPES.contains(&w) || PRIMITIVES.contains(&w) || OTHER.contains(&w);
    if words.iter().any(|w| !known(w)) {
        return vec![];
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let w = words[i].as_str();
        if COLORS.contains(&w) {
            match words.get(i + 1) {
                Some(s) if SHAPES.contains(&s.as_str()) => {
                    out.push(format!("{w} {s}"));
                    i += 2;
                    continue;
                }
                _ => return vec![],
            }
        }
        if SHAPES.contains(&w) {
            return vec![];
        }
        if PRIMITIVES.contains(&w) {
            out.push(w.to_string());
        }
        i += 1;
    }
    out
}

pub trait TextEmbedder {
    /// Unit-norm embedding of a noun chunk.
    fn embed(&self, chunk: &str) -> Vec<f64>;
}

/// Weighted bag of words over the grammar's content words, normalized.
/// Colors weigh `sqrt(0.7)` and shapes `sqrt(0.3)`, so two chunks sharing
/// only their color have cosine 0.7 and sharing only their shape 0.3.
#[derive(Clone, Debug)]
pub struct BagOfWords {
    index: HashMap<String, (usize, f64)>,
}

impl Default for BagOfWords {
    fn default() -> Self {
        let mut index = HashMap::new();
        for c in COLORS {
            index.insert(c.to_string(), (index.len(), 0.7f64.sqrt()));
        }
        for s in SHAPES.iter().chain(PRIMITIVES.iter()) {
            index.insert(s.to_string(), (index.len(), 0.3f64.sqrt()));
        }
        Self { index }
    }
}

impl BagOfWords {
    pub fn with_weights(words: &[(&str, f64)]) -> Self {
        Self { index: words.iter().enumerate().map(|(i, &(w, x))| (w.to_string(), (i, x))).collect() }
    }
}

impl TextEmbedder for BagOfWords {
    fn embed(&self, chunk: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.index.len()];
        for w in chunk.split_whitespace() {
            if let Some(&(i, x)) = self.index.get(w) {
                v[i] += x;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

pub struct FilterConfig {
    pub tau: f64,
    pub embedder: Box<dyn TextEmbedder>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { tau: 0.9, embedder: Box::new(BagOfWords::default()) }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub image_id: u64,
    pub region: RegionSpec,
    pub regional_caption: String,
    pub image_caption: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Retain,
    FilterOut,
}

/// Largest chunk-to-chunk similarity between the two captions, or `None`
/// when either has no chunks.
pub fn max_chunk_similarity(image_caption: &str, regional_caption: &str, embedder: &dyn TextEmbedder) -> Option<f64> {
    let (a, b) = (noun_chunks(image_caption), noun_chunks(regional_caption));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let eb: Vec<Vec<f64>> = b.iter().map(|c| embedder.embed(c)).collect();
    let mut best = f64::NEG_INFINITY;
    for c in &a {
        let ea = embedder.embed(c);
        for e in &eb {
            best = best.max(ea.iter().zip(e).map(|(x, y)| x * y).sum());
        }
    }
    Some(best)
}

/// Retains the pair iff the best chunk similarity exceeds `tau`.
pub fn similarity_filter(pair: &CandidatePair, cfg: &FilterConfig) -> Decision {
    match max_chunk_similarity(&pair.image_caption, &pair.regional_caption, cfg.embedder.as_ref()) {
        Some(s) if s > cfg.tau => Decision::Retain,
        _ => Decision::FilterOut,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub input_pairs: usize,
    pub retained: usize,
    pub filtered_by_similarity: usize,
    pub filtered_by_dedup: usize,
    pub filtered_by_language: usize,
}

/// Drops repeated regional captions per image (first kept) and captions
/// with tokens that are not plain ASCII words. Returns the survivors and
/// the counts removed by each rule.
pub fn refine_captions(pairs: Vec<CandidatePair>) -> (Vec<CandidatePair>, usize, usize) {
    let mut seen: BTreeSet<(u64, String)> = BTreeSet::new();
    let (mut dedup, mut lang) = (0, 0);
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if !p.regional_caption.split_whitespace().all(|t| t.chars().all(|c| c.is_ascii_alphabetic())) {
            lang += 1;
        } else if !seen.insert((p.image_id, p.regional_caption.clone())) {
            dedup += 1;
        } else {
            out.push(p);
        }
    }
    (out, dedup, lang)
}

/// Names the object in a whitened crop: nearest palette color of the
/// non-white pixels, shape from how much of the box it fills.
pub fn toy_caption(crop: &ImageGrid) -> String {
    let (mut sum, mut n) = ([0.0f64; 3], 0usize);
    for y in 0..crop.height {
        for x in 0..crop.width {
            let p = crop.pixel(x, y);
            if p != [1.0; 3] {
                (0..3).for_each(|c| sum[c] += p[c] as f64);
                n += 1;
            }
        }
    }
    if n == 0 {
        return String::new();
    }
    let mean = sum.map(|s| s / n as f64);
    let color = COLORS
        .iter()
        .min_by(|a, b| {
            let d = |c: &str| color_rgb(c).iter().zip(&mean).map(|(&x, m)| (x as f64 - m).powi(2)).sum::<f64>();
            d(a).total_cmp(&d(b))
        })
        .expect("palette is non-empty");
    let fill = n as f64 / (crop.width * crop.height) as f64;
    let shape = if fill > 0.9 {
        "square"
    } else if fill > 0.65 {
        "circle"
    } else {
        "triangle"
    };
    format!("a {color} {shape}")
}

/// Runs discovery, toy captioning, refinement and the similarity filter
/// over every image of an image-text dataset file.
pub fn mine_regions(dataset: &Path, cfg: &FilterConfig) -> Result<(Vec<CandidatePair>, MiningStats)> {
    cfg.validate()?;
    let root = dataset.parent().unwrap_or(Path::new("."));
    let seg = ColorComponents::default();
    let mut pairs = Vec::new();
    for s in read_dataset(dataset)? {
        if s.modality.is_point() {
            return Err(Error::Invalid(format!("sample {} is not an image", s.id)));
        }
        let img = load_image(&root.join(&s.payload))?;
        for comp in seg.segment(&img) {
            let region = comp.region(img.width, img.height)?;
            let crop = whiten_crop(&img, &region, Some(&comp.mask))?;
            pairs.push(CandidatePair { image_id: s.id, region, regional_caption: toy_caption(&crop), image_caption: s.caption.clone() });
        }
    }
    let mut stats = MiningStats { input_pairs: pairs.len(), ..Default::default() };
    let (refined, dedup, lang) = refine_captions(pairs);
    stats.filtered_by_dedup = dedup;
    stats.filtered_by_language = lang;
    let (kept, dropped): (Vec<_>, Vec<_>) = refined.into_iter().partition(|p| similarity_filter(p, cfg) == Decision::Retain);
    stats.filtered_by_similarity = dropped.len();
    stats.retained = kept.len();
    Ok((kept, stats))
}
