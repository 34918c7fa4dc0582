//! Seeded synthetic scenes: colored 2-D shapes on a black canvas and
//! point clouds sampled on 3-D primitive surfaces, with grammar captions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::vocab::{COLORS, PRIMITIVES, SHAPES};
use crate::encoders::{ImageGrid, PointCloud};
use crate::region::RegionSpec;

/// Deterministic seed derivation (splitmix64 finalizer over the parts).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn color_rgb(color: &str) -> [f32; 3] {
    match color {
        "red" => [1.0, 0.0, 0.0],
        "green" => [0.0, 1.0, 0.0],
        "blue" => [0.0, 0.0, 1.0],
        "yellow" => [1.0, 1.0, 0.0],
        _ => [1.0, 1.0, 1.0],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    /// Color word; empty for point-cloud primitives.
    pub color: String,
    pub shape: String,
    pub region: RegionSpec,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct ImageScene {
    pub image: ImageGrid,
    pub objects: Vec<SceneObject>,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct PointScene {
    pub cloud: PointCloud,
    pub objects: Vec<SceneObject>,
    /// Index range of each object's points within `cloud`.
    pub spans: Vec<std::ops::Range<usize>>,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSceneConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for ImageSceneConfig {
    fn default() -> Self {
        Self { size: 64, min_objects: 2, max_objects: 4, min_side: 14, max_side: 24 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSceneConfig {
    pub n_points: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for PointSceneConfig {
    fn default() -> Self {
        Self { n_points: 512, min_objects: 1, max_objects: 3 }
    }
}

fn inside(shape: &str, x0: usize, y0: usize, side: usize, px: usize, py: usize) -> bool {
    let s = side as f64;
    let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
    let (cx, cy) = (x0 as f64 + s / 2.0, y0 as f64 + s / 2.0);
    match shape {
        "circle" => (u - cx).powi(2) + (v - cy).powi(2) <= (s / 2.0).powi(2),
        "square" => true,
        _ => {
            // apex at the top, base along the bottom edge
            let t = (v - y0 as f64) / s;
            (u - cx).abs() <= t * s / 2.0
        }
    }
}

/// Rasterizes 2–4 distinct non-overlapping shapes.
pub fn gen_image_scene(seed: u64, cfg: &ImageSceneConfig) -> ImageScene {
    let mut attempt = 0u64;
    loop {
        if let Some(scene) = try_image_scene(derive_seed(&[seed, attempt]), cfg) {
            return scene;
        }
        attempt += 1;
    }
}

fn try_image_scene(seed: u64, cfg: &ImageSceneConfig) -> Option<ImageScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut combos: Vec<(&str, &str)> = COLORS.iter().flat_map(|&c| SHAPES.iter().map(move |&s| (c, s))).collect();
    combos.shuffle(&mut rng);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..n {
        let mut ok = None;
        for _ in 0..200 {
            let side = rng.gen_range(cfg.min_side..=cfg.max_side);
            let x0 = rng.gen_range(0..=cfg.size - side);
            let y0 = rng.gen_range(0..=cfg.size - side);
            let clear = placed.iter().all(|&(px, py, ps)| {
                const M: usize = 2;
                x0 + side + M <= px || px + ps + M <= x0 || y0 + side + M <= py || py + ps + M <= y0
            });
            if clear {
                ok = Some((x0, y0, side));
                break;
            }
        }
        placed.push(ok?);
    }
    let mut image = ImageGrid::blank(cfg.size, cfg.size);
    let mut objects = Vec::with_capacity(n);
    for (&(x0, y0, side), &(color, shape)) in placed.iter().zip(&combos) {
        let rgb = color_rgb(color);
        let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0, 0);
        for py in y0..y0 + side {
            for px in x0..x0 + side {
                if inside(shape, x0, y0, side, px, py) {
                    image.set_pixel(px, py, rgb);
                    minx = minx.min(px);
                    miny = miny.min(py);
                    maxx = maxx.max(px);
                    maxy = maxy.max(py);
                }
            }
        }
        let s = cfg.size as f64;
        let region = RegionSpec::box2d(minx as f64 / s, miny as f64 / s, (maxx + 1) as f64 / s, (maxy + 1) as f64 / s).ok()?;
        objects.push(SceneObject { color: color.into(), shape: shape.into(), region, caption: format!("a {color} {shape}") });
    }
    let caption = scene_caption_2d(&objects);
    Some(ImageScene { image, objects, caption })
}

/// Per-patch targets for encoder pre-training, row-major over a
/// `patch`-pixel grid: `(color, shape)` of the object owning most of the
/// patch's pixels, each 1-based into `COLORS`/`SHAPES`, or `(0, 0)` for
/// background.
pub fn patch_labels(scene: &ImageScene, patch: usize) -> Vec<(usize, usize)> {
    let (w, h) = (scene.image.width, scene.image.height);
    let owner = |x: usize, y: usize| -> Option<usize> {
        if scene.image.pixel(x, y) == [0.0; 3] {
            return None;
        }
        let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        scene.objects.iter().position(|o| {
            let c = &o.region.coords;
            u >= c[0] && u <= c[2] && v >= c[1] && v <= c[3]
        })
    };
    let mut out = Vec::with_capacity((w / patch) * (h / patch));
    for py in 0..h / patch {
        for px in 0..w / patch {
            let mut counts = vec![0usize; scene.objects.len()];
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    if let Some(k) = owner(x, y) {
                        counts[k] += 1;
                    }
                }
            }
            let best = (0..counts.len()).filter(|&k| counts[k] > 0).max_by_key(|&k| counts[k]);
            out.push(match best {
                Some(k) => {
                    let o = &scene.objects[k];
                    let ci = COLORS.iter().position(|&c| c == o.color).expect("known color");
                    let si = SHAPES.iter().position(|&s| s == o.shape).expect("known shape");
                    (ci + 1, si + 1)
                }
                None => (0, 0),
            });
        }
    }
    out
}

fn center2d(r: &RegionSpec) -> (f64, f64) {
    ((r.coords[0] + r.coords[2]) / 2.0, (r.coords[1] + r.coords[3]) / 2.0)
}

fn scene_caption_2d(objects: &[SceneObject]) -> String {
    let mut order: Vec<&SceneObject> = objects.iter().collect();
    order.sort_by(|a, b| center2d(&a.region).0.total_cmp(&center2d(&b.region).0));
    if order.len() == 2 {
        let (a, b) = (center2d(&order[0].region), center2d(&order[1].region));
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let rel = if dy.abs() > dx.abs() {
            if dy > 0.0 {
                "above"
            } else {
                "below"
            }
        } else {
            "to the left of"
        };
        return format!("{} {rel} {}", order[0].caption, order[1].caption);
    }
    order.iter().map(|o| o.caption.as_str()).collect::<Vec<_>>().join(" and ")
}

/// Samples `n` points on the surface of a primitive centered at `center`
/// with characteristic radius `r`.
pub fn sample_primitive(kind: &str, center: [f64; 3], r: f64, n: usize, rng: &mut impl Rng) -> Vec<[f32; 3]> {
    let mut out = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for _ in 0..n {
        let p = match kind {
            "sphere" => {
                let mut v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                v.iter_mut().for_each(|c| *c *= r / norm);
                v
            }
            "cube" => {
                let h = r * 0.8;
                let face = rng.gen_range(0..6);
                let (a, b) = (rng.gen_range(-h..h), rng.gen_range(-h..h));
                let s = if face % 2 == 0 { h } else { -h };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            "cone" => {
                let (rad, height) = (r, 2.0 * r);
                let slant = (rad * rad + height * height).sqrt();
                let lateral = std::f64::consts::PI * rad * slant;
                let base = std::f64::consts::PI * rad * rad;
                let theta = rng.gen_range(0.0..tau);
                if rng.gen_bool(lateral / (lateral + base)) {
                    // distance from apex, area-uniform
                    let t = rng.gen::<f64>().sqrt();
                    [t * rad * theta.cos(), t * rad * theta.sin(), height / 2.0 - t * height]
                } else {
                    let t = rng.gen::<f64>().sqrt() * rad;
                    [t * theta.cos(), t * theta.sin(), -height / 2.0]
                }
            }
            _ => {
                let (big, tube) = (r * 0.7, r * 0.3);
                let (u, v) = (rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
                [(big + tube * v.cos()) * u.cos(), (big + tube * v.cos()) * u.sin(), tube * v.sin()]
            }
        };
        out.push([(p[0] + center[0]) as f32, (p[1] + center[1]) as f32, (p[2] + center[2]) as f32]);
    }
    out
}

/// 1–3 distinct primitives, `n_points` points in total.
pub fn gen_point_scene(seed: u64, cfg: &PointSceneConfig) -> PointScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut kinds: Vec<&str> = PRIMITIVES.to_vec();
    kinds.shuffle(&mut rng);
    let mut points = Vec::with_capacity(cfg.n_points);
    let mut spans = Vec::with_capacity(n);
    for (i, &kind) in kinds.iter().take(n).enumerate() {
        let count = cfg.n_points / n + if i == 0 { cfg.n_points % n } else { 0 };
        let slot = i as f64 - (n as f64 - 1.0) / 2.0;
        let center = [slot * 2.6 + rng.gen_range(-0.3..0.3), rng.gen_range(-0.6..0.6), rng.gen_range(-0.3..0.3)];
        let r = rng.gen_range(0.6..1.0);
        let start = points.len();
        points.extend(sample_primitive(kind, center, r, count, &mut rng));
        spans.push(start..points.len());
    }
    let cloud = PointCloud { points };
    let (lo, extent) = scene_bounds(&cloud);
    let mut objects = Vec::with_capacity(n);
    for (span, &kind) in spans.iter().zip(&kinds) {
        let (mut mn, mut mx) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for p in &cloud.points[span.clone()] {
            for a in 0..3 {
                mn[a] = mn[a].min(p[a] as f64);
                mx[a] = mx[a].max(p[a] as f64);
            }
        }
        let c = [0, 1, 2].map(|a| (((mn[a] + mx[a]) / 2.0 - lo[a]) / extent).clamp(0.0, 1.0));
        let d = [0, 1, 2].map(|a| ((mx[a] - mn[a]) / extent).clamp(1e-6, 1.0));
        let region = RegionSpec::box3d(c, d).expect("normalized box is valid");
        objects.push(SceneObject { color: String::new(), shape: kind.into(), region, caption: format!("a {kind}") });
    }
    let caption = {
        let mut order: Vec<&SceneObject> = objects.iter().collect();
        order.sort_by(|a, b| a.region.coords[0].total_cmp(&b.region.coords[0]));
        order.iter().map(|o| o.caption.as_str()).collect::<Vec<_>>().join(" and ")
    };
    PointScene { cloud, objects, spans, caption }
}

/// Per-axis minimum and the largest axis extent of a cloud.
pub fn scene_bounds(pc: &PointCloud) -> ([f64; 3], f64) {
    let (mut mn, mut mx) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for p in &pc.points {
        for a in 0..3 {
            mn[a] = mn[a].min(p[a] as f64);
            mx[a] = mx[a].max(p[a] as f64);
        }
    }
    let extent = (0..3).map(|a| mx[a] - mn[a]).fold(1e-9, f64::max);
    (mn, extent)
}
