//! Synthetic rendered dataset.
//!
//! Each category is a rigid, chiral marker of six coloured spheres. A sample
//! is the orthographic view of the marker under a Haar-random rotation.
//!
//! On-disk layout written by [`generate_dataset`]:
//!
//! ```text
//! out/
//!   train/manifest.json      DatasetManifest, labels only for the labeled split
//!   train/hidden_truth.json  {"<id>": [9 floats]} for unlabeled samples
//!   train/images/000000.png
//!   test/manifest.json       every record labeled
//!   test/images/000000.png
//! ```
//!
//! Manifest schema (version 1):
//!
//! ```text
//! { "version": 1, "split": "train" | "test", "width": W, "height": H,
//!   "n_categories": K,
//!   "samples": [ { "id": u64, "path": "images/000000.png",
//!                  "category": usize, "label": [9 floats, row-major] | null } ] }
//! ```
//!
//! The hidden-truth sidecar has no loader in this crate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::ImageTensor;
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::so3::{random_rotation, Rotation};

pub const MANIFEST_VERSION: u32 = 1;
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 64,
            height: 64,
        }
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 180, 60],
    [50, 80, 220],
    [235, 200, 40],
    [200, 60, 200],
    [40, 200, 210],
];

/// Sphere centres and radii in marker units (the whole marker fits in the
/// unit ball), plus colours.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub centers: [Vector3<f64>; 6],
    pub radii: [f64; 6],
    pub colors: [[u8; 3]; 6],
}

/// Irregular helix whose pitch, phase and colour order depend on the
/// category.
pub fn marker(category: usize) -> Marker {
    const RHO: [f64; 6] = [0.70, 0.55, 0.75, 0.45, 0.65, 0.60];
    const RADII: [f64; 6] = [0.30, 0.26, 0.22, 0.28, 0.20, 0.24];
    let c = category as f64;
    let step = 1.05 + 0.17 * (c % 5.0);
    let phase = 0.7 * c;
    let mut centers = [Vector3::zeros(); 6];
    for (j, p) in centers.iter_mut().enumerate() {
        let theta = phase + step * j as f64;
        *p = Vector3::new(RHO[j] * theta.cos(), RHO[j] * theta.sin(), -0.55 + 0.22 * j as f64);
    }
    let centroid = centers.iter().sum::<Vector3<f64>>() / 6.0;
    centers.iter_mut().for_each(|p| *p -= centroid);
    let extent = centers
        .iter()
        .zip(RADII)
        .map(|(p, r)| p.norm() + r)
        .fold(0.0, f64::max);
    let dim = (category / 6) % 2 == 1;
    Marker {
        centers: centers.map(|p| p / extent),
        radii: RADII.map(|r| r / extent),
        colors: std::array::from_fn(|j| {
            let base = PALETTE[(j + category) % 6];
            if dim {
                base.map(|v| (v as f64 * 0.6) as u8)
            } else {
                base
            }
        }),
    }
}

/// Orthographic view along −z onto a mid-gray canvas; spheres drawn far to
/// near. Image x follows world x, image y follows −world y.
pub fn render_sample(category: usize, r: &Rotation, cfg: RenderConfig) -> ImageTensor {
    let m = marker(category);
    let (w, h) = (cfg.width, cfg.height);
    let scale = 0.48 * w.min(h) as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut spheres: Vec<(f64, f64, f64, f64, [u8; 3])> = (0..6)
        .map(|j| {
            let p = r.apply(&m.centers[j]);
            (p.z, cx + scale * p.x, cy - scale * p.y, scale * m.radii[j], m.colors[j])
        })
        .collect();
    spheres.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut img = ImageTensor::filled(w, h, BACKGROUND).expect("positive dims");
    for (_, sx, sy, rad, color) in spheres {
        let x0 = (sx - rad).floor().max(0.0) as usize;
        let x1 = ((sx + rad).ceil().max(0.0) as usize).min(w);
        let y0 = (sy - rad).floor().max(0.0) as usize;
        let y1 = ((sy + rad).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - sy;
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - sx;
                if dx * dx + dy * dy <= rad * rad {
                    img.set_pixel(x, y, color);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u64,
    pub path: String,
    pub category: usize,
    pub label: Option<[f64; 9]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub width: usize,
    pub height: usize,
    pub n_categories: usize,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn n_labeled(&self) -> usize {
        self.samples.iter().filter(|s| s.label.is_some()).count()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.samples.len() - self.n_labeled()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: manifest version {} (expected {MANIFEST_VERSION})",
                path.display(),
                m.version
            )));
        }
        if let Some(s) = m.samples.iter().find(|s| s.category >= m.n_categories) {
            return Err(Error::Config(format!("sample {} has category {} ≥ K", s.id, s.category)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub category: usize,
    pub image: ImageTensor,
    pub label: Option<Rotation>,
}

/// A manifest with its images in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads the manifest and every image it references (paths relative to
    /// the manifest's directory).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let samples = manifest
            .samples
            .par_iter()
            .map(|rec| {
                let image = ImageTensor::load_png(&base.join(&rec.path))?;
                if image.width() != manifest.width || image.height() != manifest.height {
                    return Err(Error::Shape(format!("{} has wrong dimensions", rec.path)));
                }
                let label = rec.label.as_ref().map(Rotation::from_row_major).transpose()?;
                Ok(Sample {
                    id: rec.id,
                    category: rec.category,
                    image,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, samples })
    }

    pub fn labeled(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.label.is_some()).collect()
    }

    pub fn unlabeled(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.label.is_none()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_samples: usize,
    pub n_categories: usize,
    pub ratio_labeled: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Size of the separately seeded test split, per category.
    pub test_per_category: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_samples: 2000,
            n_categories: 2,
            ratio_labeled: 0.05,
            seed: 0,
            width: 64,
            height: 64,
            test_per_category: 500,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_labeled > 0.0 && self.ratio_labeled <= 1.0) {
            return Err(Error::Config(format!("labeled ratio {} not in (0, 1]", self.ratio_labeled)));
        }
        if self.n_categories == 0 || self.n_samples < self.n_categories {
            return Err(Error::Config(format!(
                "need n_samples ≥ K ≥ 1 (got n = {}, K = {})",
                self.n_samples, self.n_categories
            )));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config("images must be at least 8×8".into()));
        }
        Ok(())
    }

    /// `floor(ratio · n)`, at least one.
    pub fn n_labeled(&self) -> usize {
        (((self.ratio_labeled * self.n_samples as f64) + 1e-9).floor() as usize).clamp(1, self.n_samples)
    }

    fn render(&self) -> RenderConfig {
        RenderConfig {
            width: self.width,
            height: self.height,
        }
    }
}

/// Haar rotations for ids `0..n`, one generator per id.
pub fn sample_rotations(seed: u64, tag: u64, n: usize) -> Vec<Rotation> {
    (0..n as u64)
        .map(|id| random_rotation(&mut seed::rng(seed, tag, id)))
        .collect()
}

/// Ids of the labeled subset: a seeded shuffle of `0..n`, first `n_l`, sorted.
pub fn labeled_ids(cfg: &GenerateConfig) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..cfg.n_samples as u64).collect();
    ids.shuffle(&mut seed::rng(cfg.seed, stream::SPLIT, 0));
    let mut chosen = ids[..cfg.n_labeled()].to_vec();
    chosen.sort_unstable();
    chosen
}

fn write_split(
    dir: &Path,
    split: &str,
    cfg: &GenerateConfig,
    rotations: &[Rotation],
    categories: impl Fn(usize) -> usize + Sync,
    is_labeled: impl Fn(usize) -> bool + Sync,
) -> Result<DatasetManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let render = cfg.render();
    let samples = (0..rotations.len())
        .into_par_iter()
        .map(|i| {
            let rel = format!("images/{i:06}.png");
            let category = categories(i);
            render_sample(category, &rotations[i], render).save_png(&dir.join(&rel))?;
            Ok(SampleRecord {
                id: i as u64,
                path: rel,
                category,
                label: is_labeled(i).then(|| rotations[i].to_row_major()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: split.to_string(),
        width: cfg.width,
        height: cfg.height,
        n_categories: cfg.n_categories,
        samples,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Paths of the files written by [`generate_dataset`].
pub fn train_manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("train").join("manifest.json")
}

pub fn test_manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("test").join("manifest.json")
}

/// Renders the training split (plus hidden truth) and, when
/// `test_per_category > 0`, the test split. Returns the training manifest.
pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let k = cfg.n_categories;
    let train_dir = out_dir.join("train");
    let rotations = sample_rotations(cfg.seed, stream::ROTATIONS, cfg.n_samples);
    let labeled = labeled_ids(cfg);
    let mut is_labeled = vec![false; cfg.n_samples];
    labeled.iter().for_each(|&i| is_labeled[i as usize] = true);
    let manifest = write_split(&train_dir, "train", cfg, &rotations, |i| i % k, |i| is_labeled[i])?;

    let hidden: BTreeMap<String, [f64; 9]> = (0..cfg.n_samples)
        .filter(|&i| !is_labeled[i])
        .map(|i| (i.to_string(), rotations[i].to_row_major()))
        .collect();
    write_json(&train_dir.join("hidden_truth.json"), &hidden)?;

    if cfg.test_per_category > 0 {
        let n_test = cfg.test_per_category * k;
        let test_rot = sample_rotations(cfg.seed, stream::TEST_SET, n_test);
        write_split(&out_dir.join("test"), "test", cfg, &test_rot, |i| i % k, |_| true)?;
    }
    Ok(manifest)
}

/// Number of pixels whose colour differs.
pub fn pixel_diff_count(a: &ImageTensor, b: &ImageTensor) -> usize {
    a.data()
        .chunks_exact(3)
        .zip(b.data().chunks_exact(3))
        .filter(|(p, q)| p != q)
        .count()
}
