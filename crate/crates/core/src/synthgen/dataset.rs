//! On-disk dataset layout.
//!
//! ```text
//! manifest.json       ids, seeds, split assignment
//! {id}_img.png        8-bit grayscale image
//! {id}_depth.f32      row-major little-endian f32 depth in millimetres
//! {id}_meta.json      intrinsics, depth range and the full scene spec
//! ```

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render, SamplePair};
use super::SceneSpec;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::{DepthMap, GrayImage, DEPTH_MAX_MM, DEPTH_MIN_MM};
use crate::training::{split_indices, Pair, SplitDataset};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_SPLIT: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub format_version: u32,
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub d_min: f64,
    pub d_max: f64,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub split: Split,
    pub image: GrayImage,
    pub depth: DepthMap,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &LoadedSample> {
        self.samples.iter().filter(move |s| s.split == which)
    }

    /// Training pairs partitioned by the manifest's split assignment.
    pub fn to_split_dataset(&self) -> Result<SplitDataset> {
        let pairs = |which| {
            self.split(which)
                .map(|s| Pair::from_maps(&s.image, &s.depth))
                .collect::<Result<Vec<_>>>()
        };
        Ok(SplitDataset {
            train: pairs(Split::Train)?,
            val: pairs(Split::Val)?,
            test: pairs(Split::Test)?,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_context(e, path))
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub fn write_sample(dir: &Path, id: &str, pair: &SamplePair) -> Result<()> {
    pair.image.save_png(&dir.join(format!("{id}_img.png")))?;
    let depth_path = dir.join(format!("{id}_depth.f32"));
    fs::write(&depth_path, pair.depth.to_f32_bytes()).map_err(|e| io_context(e, &depth_path))?;
    let meta = SampleMeta {
        format_version: FORMAT_VERSION,
        id: id.to_string(),
        intrinsics: pair.intrinsics,
        d_min: DEPTH_MIN_MM,
        d_max: DEPTH_MAX_MM,
        spec: pair.spec,
    };
    write_json(&dir.join(format!("{id}_meta.json")), &meta)
}

pub fn read_sample(dir: &Path, id: &str, split: Split) -> Result<LoadedSample> {
    let meta_path = dir.join(format!("{id}_meta.json"));
    let meta: SampleMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(|e| io_context(e, &meta_path))?)?;
    check_version(meta.format_version, &meta_path)?;
    let image = GrayImage::load_png(&dir.join(format!("{id}_img.png")))?;
    let depth_path = dir.join(format!("{id}_depth.f32"));
    let bytes = fs::read(&depth_path).map_err(|e| io_context(e, &depth_path))?;
    let depth = DepthMap::from_f32_bytes(image.width(), image.height(), &bytes)?;
    Ok(LoadedSample {
        id: id.to_string(),
        split,
        image,
        depth,
        meta,
    })
}

fn check_version(v: u32, path: &Path) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format_version {v}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

/// Renders `n` random scenes into `out_dir`.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    resolution: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    if n < 10 {
        return Err(Error::Config(format!(
            "dataset needs at least 10 samples, got {n}"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_context(e, out_dir))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let [train, val, _] = split_indices(n, DATASET_SPLIT, seed);
    let mut splits = vec![Split::Test; n];
    for &i in &train {
        splits[i] = Split::Train;
    }
    for &i in &val {
        splits[i] = Split::Val;
    }
    let mut samples = Vec::with_capacity(n);
    for (i, split) in splits.into_iter().enumerate() {
        let id = format!("{i:06}");
        let mut attempts = 0;
        let (sample_seed, pair) = loop {
            let s = seeds.next_u64();
            match render(&SceneSpec::sample(s), resolution) {
                Ok(pair) => break (s, pair),
                Err(Error::Input(_)) if attempts < 100 => attempts += 1,
                Err(e) => return Err(e),
            }
        };
        write_sample(out_dir, &id, &pair)?;
        samples.push(ManifestEntry {
            id,
            seed: sample_seed,
            split,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        resolution,
        d_min: DEPTH_MIN_MM,
        d_max: DEPTH_MAX_MM,
        samples,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&path).map_err(|e| io_context(e, &path))?)?;
    check_version(manifest.format_version, &path)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| read_sample(dir, &e.id, e.split))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}
