//! Bitemporal dataset: on-disk layout (A/, B/, label/ + manifest.json),
//! loader, paired augmentation, deterministic train/val split, and a
//! synthetic change-detection generator for desk-scale runs.
//!
//! Synthetic samples pair a textured background with solid shapes; frame B
//! adds or removes shapes (structural change) and sometimes only recolors
//! them (appearance change that must NOT count as change).

use crate::error::{Error, Result};
use crate::netpbm;
use crate::par;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// RGB image, channel-major [3,H,W], values in [0,1].
#[derive(Debug, Clone)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; 3 * h * w] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.h * self.w + y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.h * self.w + y * self.w + x] = v;
    }
}

/// Strictly binary mask [H,W].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Debug, Clone)]
pub struct ChangeSample {
    pub image_a: Image,
    pub image_b: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub count: usize,
    pub image_size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Per-shape probability mass for structural edits (half removal, half addition).
    pub change_prob: f64,
    /// Fraction of samples that only recolor shapes (mask stays empty).
    pub recolor_rate: f64,
    pub noise_sigma: f64,
    /// Leading fraction of ids tagged `train`; the rest are `test`.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 250,
            image_size: 64,
            shapes_min: 1,
            shapes_max: 3,
            change_prob: 0.7,
            recolor_rate: 0.2,
            noise_sigma: 0.05,
            train_fraction: 0.8,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.image_size < 16 {
            return Err(Error::Config("synth: need count >= 1 and image_size >= 16".into()));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return Err(Error::Config("synth: bad shapes range".into()));
        }
        for (v, name) in [
            (self.change_prob, "change_prob"),
            (self.recolor_rate, "recolor_rate"),
            (self.train_fraction, "train_fraction"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth: {name} must be in [0,1]")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("synth: noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum ShapeKind {
    Rect,
    Disc,
}

#[derive(Debug, Clone)]
pub(crate) struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Half extents (rect) or radius in `rx` (disc).
    pub rx: f64,
    pub ry: f64,
    pub color: [f64; 3],
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Rect => (x - self.cx).abs() <= self.rx && (y - self.cy).abs() <= self.ry,
            ShapeKind::Disc => {
                let dx = x - self.cx;
                let dy = y - self.cy;
                dx * dx + dy * dy <= self.rx * self.rx
            }
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        match self.kind {
            ShapeKind::Rect => (self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry),
            ShapeKind::Disc => (self.cx - self.rx, self.cy - self.rx, self.cx + self.rx, self.cy + self.rx),
        }
    }

    fn overlaps(&self, other: &Shape) -> bool {
        let (ax0, ay0, ax1, ay1) = self.bbox();
        let (bx0, by0, bx1, by1) = other.bbox();
        ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Background {
    base: [f64; 3],
    amp: [f64; 3],
    fx: [f64; 3],
    fy: [f64; 3],
    phase: [f64; 3],
}

impl Background {
    fn sample(rng: &mut Rng) -> Self {
        let mut b = Background { base: [0.0; 3], amp: [0.0; 3], fx: [0.0; 3], fy: [0.0; 3], phase: [0.0; 3] };
        for c in 0..3 {
            b.base[c] = rng.uniform(0.30, 0.50);
            b.amp[c] = rng.uniform(0.04, 0.12);
            b.fx[c] = rng.uniform(0.5, 2.0);
            b.fy[c] = rng.uniform(0.5, 2.0);
            b.phase[c] = rng.uniform(0.0, std::f64::consts::TAU);
        }
        b
    }

    fn at(&self, c: usize, x: f64, y: f64, size: f64) -> f64 {
        self.base[c]
            + self.amp[c]
                * (std::f64::consts::TAU * (self.fx[c] * x + self.fy[c] * y) / size + self.phase[c]).sin()
    }
}

fn sample_shape(rng: &mut Rng, size: usize, bg: &Background) -> Shape {
    let s = size as f64;
    let kind = if rng.chance(0.5) { ShapeKind::Rect } else { ShapeKind::Disc };
    let (rx, ry) = match kind {
        ShapeKind::Rect => (rng.uniform(s * 0.16, s * 0.30), rng.uniform(s * 0.16, s * 0.30)),
        ShapeKind::Disc => {
            let r = rng.uniform(s * 0.17, s * 0.28);
            (r, r)
        }
    };
    let cx = rng.uniform(rx + 1.0, s - rx - 1.0);
    let cy = rng.uniform(ry + 1.0, s - ry - 1.0);
    let color = sample_color(rng, bg);
    Shape { kind, cx, cy, rx, ry, color }
}

/// Colors are re-drawn until they contrast with the background mean.
fn sample_color(rng: &mut Rng, bg: &Background) -> [f64; 3] {
    for _ in 0..32 {
        let c = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
        let dist: f64 = (0..3).map(|i| (c[i] - bg.base[i]).abs()).sum();
        if dist >= 1.3 {
            return c;
        }
    }
    [1.0, 1.0, 1.0]
}

fn place_non_overlapping(rng: &mut Rng, size: usize, bg: &Background, existing: &[Shape]) -> Option<Shape> {
    for _ in 0..24 {
        let cand = sample_shape(rng, size, bg);
        if existing.iter().all(|s| !cand.overlaps(s)) {
            return Some(cand);
        }
    }
    None
}

pub(crate) fn render_frame(size: usize, bg: &Background, shapes: &[Shape]) -> Image {
    let mut img = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let mut px = [
                bg.at(0, xf, yf, size as f64),
                bg.at(1, xf, yf, size as f64),
                bg.at(2, xf, yf, size as f64),
            ];
            for s in shapes {
                if s.contains(xf, yf) {
                    px = s.color;
                }
            }
            for c in 0..3 {
                img.set(c, y, x, px[c].clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Pixels whose covering shape set differs between the frames.
pub(crate) fn change_mask(size: usize, changed: &[&Shape]) -> Mask {
    let mut m = Mask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            if changed.iter().any(|s| s.contains(x as f64, y as f64)) {
                m.data[y * size + x] = 1;
            }
        }
    }
    m
}

fn add_noise(img: &mut Image, rng: &mut Rng, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    for v in img.data.iter_mut() {
        *v = (*v + rng.normal() * sigma).clamp(0.0, 1.0);
    }
}

/// Deterministically render sample `idx` of a spec (in-memory, float values).
pub fn synth_sample(spec: &SynthSpec, idx: usize) -> ChangeSample {
    let mut rng = Rng::from_tags(spec.seed, &[idx as u64]);
    let size = spec.image_size;
    let bg = Background::sample(&mut rng);
    let n_shapes = rng.range(spec.shapes_min, spec.shapes_max);
    let mut originals: Vec<Shape> = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        if let Some(s) = place_non_overlapping(&mut rng, size, &bg, &originals) {
            originals.push(s);
        }
    }

    let recolor_only = rng.chance(spec.recolor_rate);
    let mut kept: Vec<Shape> = Vec::new();
    let mut removed: Vec<Shape> = Vec::new();
    let mut added: Vec<Shape> = Vec::new();
    if recolor_only {
        kept = originals.clone();
        if !kept.is_empty() {
            let i = rng.below(kept.len());
            kept[i].color = sample_color(&mut rng, &bg);
        }
    } else {
        for s in &originals {
            if rng.chance(spec.change_prob * 0.5) {
                removed.push(s.clone());
            } else {
                let mut keep = s.clone();
                // occasional appearance drift on surviving shapes
                if rng.chance(0.15) {
                    keep.color = sample_color(&mut rng, &bg);
                }
                kept.push(keep);
            }
        }
        for _ in 0..originals.len() {
            if rng.chance(spec.change_prob * 0.5) {
                if let Some(s) = place_non_overlapping(&mut rng, size, &bg, &originals) {
                    added.push(s);
                }
            }
        }
    }

    let image_a = {
        let mut img = render_frame(size, &bg, &originals);
        add_noise(&mut img, &mut Rng::from_tags(spec.seed, &[idx as u64, 1]), spec.noise_sigma);
        img
    };
    let frame_b_shapes: Vec<Shape> = kept.iter().chain(added.iter()).cloned().collect();
    let image_b = {
        let mut img = render_frame(size, &bg, &frame_b_shapes);
        add_noise(&mut img, &mut Rng::from_tags(spec.seed, &[idx as u64, 2]), spec.noise_sigma);
        img
    };
    let changed: Vec<&Shape> = removed.iter().chain(added.iter()).collect();
    let mask = change_mask(size, &changed);
    ChangeSample { image_a, image_b, mask }
}

fn quantize(img: &Image) -> Vec<u8> {
    // interleave channels for PPM output
    let mut out = Vec::with_capacity(3 * img.h * img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                out.push((img.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn sample_id(idx: usize) -> String {
    format!("{idx:05}")
}

/// Write a synthetic dataset under `root`: A/, B/, label/ and manifest.json.
/// Same spec twice produces byte-identical files.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let rendered = par::map_indices(spec.count, |i| {
        let s = synth_sample(spec, i);
        let mask_bytes: Vec<u8> = s.mask.data.iter().map(|&v| v * 255).collect();
        (quantize(&s.image_a), quantize(&s.image_b), mask_bytes)
    });
    let n_train = (spec.count as f64 * spec.train_fraction).round() as usize;
    let mut entries = Vec::with_capacity(spec.count);
    let size = spec.image_size;
    for (i, (a, b, m)) in rendered.iter().enumerate() {
        let id = sample_id(i);
        netpbm::write_ppm(&root.join("A").join(format!("{id}.ppm")), size, size, a)?;
        netpbm::write_ppm(&root.join("B").join(format!("{id}.ppm")), size, size, b)?;
        netpbm::write_pgm(&root.join("label").join(format!("{id}.pgm")), size, size, m)?;
        let split = if i < n_train { Split::Train } else { Split::Test };
        entries.push(ManifestEntry { id, split });
    }
    let manifest = DatasetManifest { samples: entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    std::fs::write(root.join("manifest.json"), json)?;
    Ok(manifest)
}

#[derive(Debug)]
pub struct LoadedSample {
    pub id: String,
    pub split: Split,
    pub sample: ChangeSample,
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn of_split(&self, split: Split) -> Vec<&ChangeSample> {
        self.samples.iter().filter(|s| s.split == split).map(|s| &s.sample).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn image_from_ppm(path: &Path, id: &str) -> Result<Image> {
    let pnm = netpbm::read_pnm(path)?;
    if pnm.channels != 3 {
        return Err(Error::Data(format!("sample {id}: {} is not RGB", path.display())));
    }
    let (h, w) = (pnm.height, pnm.width);
    let mut img = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(c, y, x, pnm.pixels[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Load a dataset laid out as root/{A,B,label}/<id> with a manifest. Images
/// scale to [0,1]; any nonzero label pixel becomes 1.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest decode: {e}")))?;
    let samples = par::map_ordered(&manifest.samples, |entry| -> Result<LoadedSample> {
        let id = &entry.id;
        let a = image_from_ppm(&root.join("A").join(format!("{id}.ppm")), id)
            .map_err(|e| Error::Data(format!("sample {id} (frame A): {e}")))?;
        let b = image_from_ppm(&root.join("B").join(format!("{id}.ppm")), id)
            .map_err(|e| Error::Data(format!("sample {id} (frame B): {e}")))?;
        let label_path = root.join("label").join(format!("{id}.pgm"));
        let pnm = netpbm::read_pnm(&label_path)
            .map_err(|e| Error::Data(format!("sample {id} (label): {e}")))?;
        if pnm.channels != 1 {
            return Err(Error::Data(format!("sample {id}: mask must be grayscale")));
        }
        if a.h != b.h || a.w != b.w || a.h != pnm.height || a.w != pnm.width {
            return Err(Error::Data(format!(
                "sample {id}: dimensions differ across the triple (A {}x{}, B {}x{}, label {}x{})",
                a.h, a.w, b.h, b.w, pnm.height, pnm.width
            )));
        }
        let mask = Mask {
            h: pnm.height,
            w: pnm.width,
            data: pnm.pixels.iter().map(|&v| u8::from(v != 0)).collect(),
        };
        Ok(LoadedSample { id: id.clone(), split: entry.split, sample: ChangeSample { image_a: a, image_b: b, mask } })
    });
    let mut out = Dataset::default();
    for s in samples {
        out.samples.push(s?);
    }
    Ok(out)
}

/// One crop window and flip decision drawn once and applied identically to
/// both frames and the mask.
pub fn augment(sample: &ChangeSample, rng: &mut Rng, crop_size: usize) -> Result<ChangeSample> {
    let (h, w) = (sample.image_a.h, sample.image_a.w);
    if crop_size > h || crop_size > w {
        return Err(Error::Data(format!("crop {crop_size} larger than image {h}x{w}")));
    }
    let oy = rng.below(h - crop_size + 1);
    let ox = rng.below(w - crop_size + 1);
    let hflip = rng.chance(0.5);
    let vflip = rng.chance(0.5);
    Ok(apply_window(sample, oy, ox, crop_size, hflip, vflip))
}

pub(crate) fn apply_window(
    sample: &ChangeSample,
    oy: usize,
    ox: usize,
    crop: usize,
    hflip: bool,
    vflip: bool,
) -> ChangeSample {
    let map = |y: usize, x: usize| {
        let yy = if vflip { crop - 1 - y } else { y };
        let xx = if hflip { crop - 1 - x } else { x };
        (oy + yy, ox + xx)
    };
    let mut a = Image::zeros(crop, crop);
    let mut b = Image::zeros(crop, crop);
    let mut m = Mask::zeros(crop, crop);
    for y in 0..crop {
        for x in 0..crop {
            let (sy, sx) = map(y, x);
            for c in 0..3 {
                a.set(c, y, x, sample.image_a.get(c, sy, sx));
                b.set(c, y, x, sample.image_b.get(c, sy, sx));
            }
            m.data[y * crop + x] = sample.mask.get(sy, sx);
        }
    }
    ChangeSample { image_a: a, image_b: b, mask: m }
}

/// Deterministic shuffled split of n items; validation side gets
/// round(ratio * n) items.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} samples")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Data(format!("split ratio {ratio} must be in (0,1)")));
    }
    let k = (ratio * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(Error::Data(format!("split of {n} at ratio {ratio} leaves one side empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::from_tags(seed, &[0x5b17]).shuffle(&mut order);
    let mut val: Vec<usize> = order[..k].to_vec();
    let mut train: Vec<usize> = order[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}
