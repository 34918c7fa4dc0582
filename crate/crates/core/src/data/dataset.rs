//! Dataset files: one JSON object per line plus raw `f32` payload blobs.
//!
//! Blob layout: `u64` rank, then `rank` × `u64` extents (all little
//! endian), then the row-major little-endian `f32` values. Images are
//! `[H, W, 3]`, point clouds `[N, 3]`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::{derive_seed, gen_image_scene, gen_point_scene, ImageSceneConfig, PointSceneConfig};
use crate::encoders::{ImageGrid, PointCloud};
use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::region::RegionSpec;

/// First id of the test split; train ids start at 0.
pub const TEST_ID_BASE: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn id_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => TEST_ID_BASE,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub id: u64,
    pub modality: ModalityId,
    /// Blob path relative to the dataset root.
    pub payload: String,
    pub region: Option<RegionSpec>,
    pub caption: String,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::Invalid(format!("sample {} has an empty caption", self.id)));
        }
        match (&self.region, self.modality.region_kind()) {
            (Some(r), Some(kind)) if r.kind == kind => r.validate(),
            (None, None) => Ok(()),
            _ => Err(Error::Invalid(format!("sample {}: region does not match modality {}", self.id, self.modality))),
        }
    }
}

pub fn dataset_file(root: &Path, modality: ModalityId, split: Split) -> PathBuf {
    root.join(format!("{}_{}.jsonl", modality, split.as_str()))
}

pub fn write_dataset(path: &Path, samples: &[TrainSample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        s.validate()?;
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainSample>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingBlob(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.display().to_string(), line: i + 1, msg };
        let s: TrainSample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        s.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_blob(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Blob { path: path.to_path_buf(), msg: format!("shape {shape:?} vs {} values", data.len()) });
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = Vec::with_capacity(8 * (shape.len() + 1) + 4 * data.len());
    bytes.extend((shape.len() as u64).to_le_bytes());
    for &e in shape {
        bytes.extend((e as u64).to_le_bytes());
    }
    for &v in data {
        bytes.extend(v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingBlob(path.to_path_buf()),
        _ => e.into(),
    })?;
    let err = |msg: String| Error::Blob { path: path.to_path_buf(), msg };
    let word = |i: usize| -> Result<u64> {
        bytes
            .get(i * 8..i * 8 + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| err("truncated header".into()))
    };
    let rank = word(0)? as usize;
    if rank > 8 {
        return Err(err(format!("implausible rank {rank}")));
    }
    let shape: Vec<usize> = (1..=rank).map(|i| word(i).map(|v| v as usize)).collect::<Result<_>>()?;
    let body = &bytes[8 * (rank + 1)..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(err(format!("shape {shape:?} needs {} bytes, body has {}", 4 * n, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((shape, data))
}

pub fn load_image(path: &Path) -> Result<ImageGrid> {
    let (shape, data) = read_blob(path)?;
    match shape[..] {
        [h, w, 3] => ImageGrid::new(h, w, data),
        _ => Err(Error::Blob { path: path.to_path_buf(), msg: format!("expected [H,W,3], got {shape:?}") }),
    }
}

pub fn load_points(path: &Path) -> Result<PointCloud> {
    let (shape, data) = read_blob(path)?;
    match shape[..] {
        [_, 3] => Ok(PointCloud { points: data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() }),
        _ => Err(Error::Blob { path: path.to_path_buf(), msg: format!("expected [N,3], got {shape:?}") }),
    }
}

/// Payload of one sample, decoded.
#[derive(Clone, Debug)]
pub enum Payload {
    Image(ImageGrid),
    Points(PointCloud),
}

pub fn load_payload(root: &Path, s: &TrainSample) -> Result<Payload> {
    let p = root.join(&s.payload);
    if s.modality.is_point() {
        load_points(&p).map(Payload::Points)
    } else {
        load_image(&p).map(Payload::Image)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub image: ImageSceneConfig,
    pub points: PointSceneConfig,
}

/// Generates `n_scenes` scenes for one modality and split, writing blobs
/// under `root/blobs/` and the sample list to [`dataset_file`].
///
/// Region modalities emit one sample per object; text modalities one per
/// scene.
pub fn generate_split(root: &Path, modality: ModalityId, split: Split, n_scenes: usize, cfg: &GenConfig) -> Result<Vec<TrainSample>> {
    let mut samples = Vec::new();
    let mut next_id = split.id_base();
    let midx = ModalityId::ALL.iter().position(|&m| m == modality).expect("known modality") as u64;
    let sidx = split.id_base();
    // region captions need at least two objects to be worth disambiguating
    let pcfg = match modality.is_region() {
        true => PointSceneConfig { min_objects: cfg.points.min_objects.max(2), ..cfg.points.clone() },
        false => cfg.points.clone(),
    };
    for scene in 0..n_scenes {
        let seed = derive_seed(&[cfg.seed, midx, sidx, scene as u64]);
        let rel = format!("blobs/{}_{}_{scene:05}.f32", modality, split.as_str());
        let (caption, objects) = if modality.is_point() {
            let s = gen_point_scene(seed, &pcfg);
            let flat: Vec<f32> = s.cloud.points.iter().flatten().copied().collect();
            write_blob(&root.join(&rel), &[s.cloud.len(), 3], &flat)?;
            (s.caption, s.objects)
        } else {
            let s = gen_image_scene(seed, &cfg.image);
            write_blob(&root.join(&rel), &[s.image.height, s.image.width, 3], &s.image.pixels)?;
            (s.caption, s.objects)
        };
        if modality.is_region() {
            for o in objects {
                samples.push(TrainSample { id: next_id, modality, payload: rel.clone(), region: Some(o.region), caption: o.caption });
                next_id += 1;
            }
        } else {
            samples.push(TrainSample { id: next_id, modality, payload: rel, region: None, caption });
            next_id += 1;
        }
    }
    write_dataset(&dataset_file(root, modality, split), &samples)?;
    Ok(samples)
}
