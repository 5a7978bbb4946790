//! Dataset discovery, stratified splitting, image preprocessing, augmentation
//! and deterministic batching.
//!
//! Images live in a class-per-folder tree, `root/<ClassName>/*.{png,jpg,jpeg,bmp}`.
//! Decoded images are `[H, W, 3]` tensors scaled to `[0, 1]`; standardization
//! and augmentation are applied when a batch is assembled.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
pub const TEST_FRACTION: f64 = 0.2;
/// Share of the non-test pool held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub seed: u64,
    /// Files that looked like images but could not be read.
    pub skipped: usize,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Sample positions belonging to `split`, in index order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// `counts[class][split]` with splits ordered train, val, test.
    pub fn counts(&self) -> Vec<[usize; 3]> {
        let mut counts = vec![[0; 3]; self.num_classes()];
        for s in &self.samples {
            let k = match s.split {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            counts[s.class_id][k] += 1;
        }
        counts
    }

    /// Images of one split, decoded lazily at `height × width`.
    pub fn dataset(&self, split: Split, height: usize, width: usize) -> FolderDataset {
        let entries = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| (self.root.join(&s.path), s.class_id))
            .collect();
        FolderDataset { entries, height, width }
    }

    /// Writes the split assignment as `relative_path<TAB>class<TAB>split` lines.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = format!("# seed\t{}\n", self.seed);
        for s in &self.samples {
            let rel = s.path.to_str().ok_or_else(|| Error::data(format!("non UTF-8 path {}", s.path.display())))?;
            if rel.contains('\t') || rel.contains('\n') {
                return Err(Error::data(format!("path {rel:?} cannot be written to a manifest")));
            }
            out.push_str(&format!("{rel}\t{}\t{}\n", self.class_names[s.class_id], s.split));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest written by [`write_manifest`](Self::write_manifest).
    /// Class ids follow the sorted set of class names in the file.
    pub fn read_manifest(root: &Path, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seed = 0;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed") {
                    seed = v.trim().parse().map_err(|_| Error::data(format!("{}: bad seed line", path.display())))?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::data(format!("{}:{}: expected 3 tab-separated fields", path.display(), lineno + 1)));
            }
            rows.push((PathBuf::from(fields[0]), fields[1].to_string(), fields[2].parse::<Split>()?));
        }
        let mut class_names: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        class_names.sort();
        class_names.dedup();
        let samples = rows
            .into_iter()
            .map(|(path, class, split)| {
                let class_id = class_names.binary_search(&class).expect("class collected above");
                Sample { path, class_id, split }
            })
            .collect();
        Ok(Self { root: root.to_path_buf(), class_names, samples, seed, skipped: 0 })
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn readable_image(path: &Path) -> bool {
    ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(image::ImageError::from)
        .and_then(|r| r.into_dimensions())
        .is_ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Scans `root`, assigns class ids in lexicographic order of folder names and
/// draws a stratified train/val/test split from `seed`.
pub fn index_dataset(root: &Path, seed: u64) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut class_names = Vec::new();
    let mut files: Vec<Vec<PathBuf>> = Vec::new();
    let mut skipped = 0;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).map(str::to_string);
        let name = name.ok_or_else(|| Error::data(format!("non UTF-8 class folder {}", dir.display())))?;
        let mut class_files = Vec::new();
        for path in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && has_image_extension(p)) {
            if readable_image(&path) {
                class_files.push(path.strip_prefix(root).expect("inside root").to_path_buf());
            } else {
                log::warn!("skipping unreadable image {}", path.display());
                skipped += 1;
            }
        }
        if class_files.is_empty() {
            return Err(Error::data(format!("class folder {} contains no readable images", dir.display())));
        }
        class_names.push(name);
        files.push(class_files);
    }
    if class_names.len() < 2 {
        return Err(Error::data(format!("{} needs at least two class folders", root.display())));
    }
    if skipped > 0 {
        log::warn!("{skipped} unreadable files skipped");
    }
    let counts: Vec<usize> = files.iter().map(Vec::len).collect();
    let assignment = assign_splits(&counts, seed);
    let samples = files
        .into_iter()
        .zip(assignment)
        .enumerate()
        .flat_map(|(class_id, (paths, splits))| {
            paths.into_iter().zip(splits).map(move |(path, split)| Sample { path, class_id, split })
        })
        .collect();
    Ok(DatasetIndex { root: root.to_path_buf(), class_names, samples, seed, skipped })
}

/// Distributes `round(total)` units over quotas by largest remainder; ties go
/// to the lower index. Each share is the floor or ceiling of its quota.
pub fn apportion(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        shares[i] += 1;
    }
    shares
}

/// Per-class test and validation counts for the stratified hold-out split.
pub fn split_counts(class_counts: &[usize]) -> Vec<(usize, usize)> {
    let n: usize = class_counts.iter().sum();
    let test_quota: Vec<f64> = class_counts.iter().map(|&c| c as f64 * TEST_FRACTION).collect();
    let test = apportion(&test_quota, (n as f64 * TEST_FRACTION).round() as usize);
    let pool = n - test.iter().sum::<usize>();
    let val_quota: Vec<f64> =
        class_counts.iter().map(|&c| c as f64 * (1.0 - TEST_FRACTION) * VAL_FRACTION).collect();
    let val = apportion(&val_quota, (pool as f64 * VAL_FRACTION).round() as usize);
    test.into_iter()
        .zip(val)
        .zip(class_counts)
        .map(|((t, v), &c)| (t, v.min(c - t)))
        .collect()
}

/// Split labels for each class's samples (in their sorted order).
pub fn assign_splits(class_counts: &[usize], seed: u64) -> Vec<Vec<Split>> {
    split_counts(class_counts)
        .into_iter()
        .zip(class_counts)
        .enumerate()
        .map(|(class, ((test, val), &count))| {
            let mut order: Vec<usize> = (0..count).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5b17, class as u64])));
            let mut splits = vec![Split::Train; count];
            for (rank, &i) in order.iter().enumerate() {
                if rank < test {
                    splits[i] = Split::Test;
                } else if rank < test + val {
                    splits[i] = Split::Val;
                }
            }
            splits
        })
        .collect()
}

/// Decodes an image to RGB and resizes it bilinearly to `height × width`,
/// returning `[height, width, 3]` values in `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Tensor<f32>> {
    let decode = |reason: String| Error::Decode { path: path.to_path_buf(), reason };
    let img = ImageReader::open(path)
        .map_err(|e| decode(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode(e.to_string()))?
        .decode()
        .map_err(|e| decode(e.to_string()))?
        .to_rgb8();
    let img = if img.dimensions() == (width as u32, height as u32) {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("rgb buffer")
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[h, w, 3] = t.shape() else {
        return Err(Error::shape(format!("expected [H, W, 3], got {:?}", t.shape())));
    };
    let raw = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::shape("rgb buffer size"))
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: vec![0.5; 3], std: vec![0.5; 3] }
    }
}

impl Normalization {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::config(format!("normalization needs {channels} means and stds")));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("normalization std must be positive and finite"));
        }
        Ok(())
    }

    /// Applies `(x - mean) / std` channel-wise to a channels-last tensor.
    pub fn apply(&self, image: &mut Tensor<f32>) {
        let c = self.mean.len();
        let scale: Vec<f32> = self.std.iter().map(|s| (1.0 / s) as f32).collect();
        let mean: Vec<f32> = self.mean.iter().map(|&m| m as f32).collect();
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            *v = (*v - mean[i % c]) * scale[i % c];
        }
    }
}

/// Pixel-level channel mean and standard deviation over every image in `data`.
/// Channels with (near) zero spread get std 1.
pub fn channel_stats(data: &dyn Dataset) -> Result<Normalization> {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for i in 0..data.len() {
        let img = data.image(i)?;
        for px in img.data().chunks_exact(3) {
            for c in 0..3 {
                let v = f64::from(px[c]);
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += img.len() / 3;
    }
    if n == 0 {
        return Ok(Normalization::default());
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = (0..3)
        .map(|c| {
            let var = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
            if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() }
        })
        .collect();
    Ok(Normalization { mean, std })
}

/// Loads, resizes and standardizes one image.
pub fn load_and_preprocess(path: &Path, height: usize, width: usize, norm: &Normalization) -> Result<Tensor<f32>> {
    let mut img = load_image(path, height, width)?;
    norm.apply(&mut img);
    Ok(img)
}

/// Train-time augmentation: flips, rotation and crop-rescale, then
/// brightness, contrast and saturation jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub hflip: f64,
    pub vflip: f64,
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Crop side as a fraction of the image side, drawn from this range.
    pub crop_min: f64,
    pub crop_max: f64,
    /// Multiplicative jitter ranges, factors drawn from `[1 - x, 1 + x]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip: 0.5,
            vflip: 0.0,
            rotation_deg: 15.0,
            crop_min: 0.8,
            crop_max: 1.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.0,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    /// A policy that does nothing unless fields are switched on.
    pub fn none() -> Self {
        Self {
            enabled: true,
            hflip: 0.0,
            vflip: 0.0,
            rotation_deg: 0.0,
            crop_min: 1.0,
            crop_max: 1.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) { Ok(()) } else { Err(Error::config(format!("augment.{name} must be in [0, 1]"))) }
        };
        prob("hflip", self.hflip)?;
        prob("vflip", self.vflip)?;
        for (name, v) in [
            ("rotation_deg", self.rotation_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("augment.{name} must be non-negative")));
            }
        }
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::config("augment crop range must satisfy 0 < crop_min <= crop_max <= 1"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Applies a randomly drawn transform to a `[H, W, C]` image in `[0, 1]`.
/// The number of random draws is fixed, so streams stay aligned across policies.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut R) -> Tensor<f32> {
    if !policy.enabled {
        return image.clone();
    }
    let hflip = rng.random::<f64>() < policy.hflip;
    let vflip = rng.random::<f64>() < policy.vflip;
    let angle = uniform(rng, -policy.rotation_deg, policy.rotation_deg).to_radians();
    let scale = uniform(rng, policy.crop_min, policy.crop_max);
    let (oy, ox) = (rng.random::<f64>(), rng.random::<f64>());
    let brightness = uniform(rng, 1.0 - policy.brightness, 1.0 + policy.brightness);
    let contrast = uniform(rng, 1.0 - policy.contrast, 1.0 + policy.contrast);
    let saturation = uniform(rng, 1.0 - policy.saturation, 1.0 + policy.saturation);

    let mut out = if angle == 0.0 && scale == 1.0 {
        flip(image, hflip, vflip)
    } else {
        resample(image, hflip, vflip, angle, scale, (oy, ox))
    };
    if brightness != 1.0 || contrast != 1.0 || saturation != 1.0 {
        jitter(&mut out, brightness as f32, contrast as f32, saturation as f32);
    }
    out
}

/// Exact index-mapped flips.
pub fn flip(image: &Tensor<f32>, horizontal: bool, vertical: bool) -> Tensor<f32> {
    if !horizontal && !vertical {
        return image.clone();
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        let sy = if vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            data.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(image.shape(), data).expect("same shape")
}

/// Inverse-mapped flip, rotation about the centre and zoom into a crop of
/// side `scale` placed at fractional offset `offset`, with bilinear sampling
/// and edge replication.
fn resample(image: &Tensor<f32>, hflip: bool, vflip: bool, angle: f64, scale: f64, offset: (f64, f64)) -> Tensor<f32> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let crop_cy = offset.0 * (1.0 - scale) * (h as f64 - 1.0) + scale * cy;
    let crop_cx = offset.1 * (1.0 - scale) * (w as f64 - 1.0) + scale * cx;
    let (sin, cos) = angle.sin_cos();
    let at = |y: usize, x: usize, ch: usize| f64::from(src[(y * w + x) * c + ch]);
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        let fy = if vflip { (h - 1 - y) as f64 } else { y as f64 } - cy;
        for x in 0..w {
            let fx = if hflip { (w - 1 - x) as f64 } else { x as f64 } - cx;
            let sx = (crop_cx + scale * (cos * fx + sin * fy)).clamp(0.0, w as f64 - 1.0);
            let sy = (crop_cy + scale * (-sin * fx + cos * fy)).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - tx) + at(y0, x1, ch) * tx;
                let bottom = at(y1, x0, ch) * (1.0 - tx) + at(y1, x1, ch) * tx;
                data.push((top * (1.0 - ty) + bottom * ty) as f32);
            }
        }
    }
    Tensor::new(image.shape(), data).expect("same shape")
}

fn jitter(image: &mut Tensor<f32>, brightness: f32, contrast: f32, saturation: f32) {
    let c = image.shape()[2];
    let data = image.data_mut();
    data.iter_mut().for_each(|v| *v *= brightness);
    let mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() as f32 / data.len() as f32;
    data.iter_mut().for_each(|v| *v = mean + (*v - mean) * contrast);
    for px in data.chunks_exact_mut(c) {
        let gray = px.iter().sum::<f32>() / c as f32;
        px.iter_mut().for_each(|v| *v = (gray + (*v - gray) * saturation).clamp(0.0, 1.0));
    }
}

/// Random access to labelled images.
pub trait Dataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> usize;

    /// Image `i` as `[H, W, 3]` in `[0, 1]`.
    fn image(&self, i: usize) -> Result<Tensor<f32>>;

    /// Where the sample came from, for reports.
    fn describe(&self, i: usize) -> String {
        format!("#{i}")
    }
}

/// Images decoded from disk on every access.
#[derive(Clone, Debug)]
pub struct FolderDataset {
    entries: Vec<(PathBuf, usize)>,
    height: usize,
    width: usize,
}

impl FolderDataset {
    pub fn from_paths(entries: Vec<(PathBuf, usize)>, height: usize, width: usize) -> Self {
        Self { entries, height, width }
    }

    pub fn path(&self, i: usize) -> &Path {
        &self.entries[i].0
    }
}

impl Dataset for FolderDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn label(&self, i: usize) -> usize {
        self.entries[i].1
    }

    fn image(&self, i: usize) -> Result<Tensor<f32>> {
        load_image(&self.entries[i].0, self.height, self.width)
    }

    fn describe(&self, i: usize) -> String {
        self.entries[i].0.display().to_string()
    }
}

#[derive(Clone, Debug, Default)]
pub struct InMemoryDataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image(&self, i: usize) -> Result<Tensor<f32>> {
        Ok(self.images[i].clone())
    }
}

/// Fully saturated, evenly spaced hues.
pub fn class_colour(class: usize, num_classes: usize) -> [f32; 3] {
    let hue = class as f32 / num_classes as f32 * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Solid class-coloured images with uniform per-pixel noise of amplitude `noise`.
pub fn synthetic_colour_dataset(
    num_classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    noise: f32,
    seed: u64,
) -> InMemoryDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = InMemoryDataset::default();
    for class in 0..num_classes {
        let colour = class_colour(class, num_classes);
        for _ in 0..per_class {
            let data = (0..height * width * 3)
                .map(|i| {
                    let n = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
                    (colour[i % 3] + n).clamp(0.0, 1.0)
                })
                .collect();
            out.images.push(Tensor::new(&[height, width, 3], data).expect("image shape"));
            out.labels.push(class);
        }
    }
    out
}

/// Writes a dataset as a class-per-folder PNG tree.
pub fn write_image_folder(data: &InMemoryDataset, root: &Path, class_names: &[String]) -> Result<()> {
    let mut counters = vec![0usize; class_names.len()];
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let name = class_names.get(label).ok_or_else(|| Error::data(format!("label {label} has no class name")))?;
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{:05}.png", counters[label]));
        counters[label] += 1;
        tensor_to_rgb(img)?.save(&path).map_err(|e| Error::Decode { path: path.clone(), reason: e.to_string() })?;
    }
    Ok(())
}

/// Sample order for one epoch, chunked into batches. The last batch may be short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c4, epoch as u64])));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    /// `[B, H, W, 3]`, standardized.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Assembles standardized, optionally augmented batches from a dataset.
pub struct BatchLoader<'a> {
    pub data: &'a dyn Dataset,
    pub norm: &'a Normalization,
    pub augment: Option<&'a AugmentPolicy>,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl BatchLoader<'_> {
    pub fn num_batches(&self) -> usize {
        self.data.len().div_ceil(self.batch_size.max(1))
    }

    pub fn epoch<T: Scalar>(&self, epoch: usize) -> impl Iterator<Item = Result<Batch<T>>> + '_ {
        epoch_batches(self.data.len(), self.batch_size, self.seed, epoch, self.shuffle)
            .into_iter()
            .map(move |idx| self.load(&idx, epoch))
    }

    /// Loads the given samples; augmentation randomness depends only on
    /// `(seed, epoch, sample index)`.
    pub fn load<T: Scalar>(&self, indices: &[usize], epoch: usize) -> Result<Batch<T>> {
        let mut data = Vec::new();
        let mut shape = None;
        for &i in indices {
            let mut img = self.data.image(i)?;
            if let Some(policy) = self.augment {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0xa09, epoch as u64, i as u64]));
                img = augment(&img, policy, &mut rng);
            }
            self.norm.apply(&mut img);
            match &shape {
                None => shape = Some(img.shape().to_vec()),
                Some(s) if s.as_slice() != img.shape() => {
                    return Err(Error::data(format!("{} has shape {:?}, expected {s:?}", self.data.describe(i), img.shape())));
                }
                Some(_) => {}
            }
            data.extend(img.data().iter().map(|&v| T::from_f64(f64::from(v))));
        }
        let mut full = vec![indices.len()];
        full.extend(shape.ok_or_else(|| Error::data("empty batch"))?);
        Ok(Batch {
            images: Tensor::new(&full, data)?,
            labels: indices.iter().map(|&i| self.data.label(i)).collect(),
            indices: indices.to_vec(),
        })
    }
}
