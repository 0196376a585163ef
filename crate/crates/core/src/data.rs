//! Deterministic synthetic image tasks and the binary image corpus.
//!
//! Images are parametric shapes on noisy backgrounds. A class is a
//! (shape, color bin) pair: `shape = c % S`, `color = c / S`. Each family
//! draws its rendering parameters from its own ChaCha stream, so an upstream
//! and a downstream task with the same seed never share draws.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CORPUS_MAGIC: &[u8; 5] = b"PIMG1";

/// Distinct shape outlines available to the renderer.
pub const NUM_SHAPES: usize = 6;
/// Color bins available per palette.
pub const NUM_COLORS: usize = 6;
/// Smallest image side the renderer accepts.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    UpstreamShapes,
    DownstreamVariant,
    /// Label = template · Q + cue, where the cue is the corner holding a white marker.
    InstanceCue,
}

impl Family {
    fn stream(self) -> u64 {
        match self {
            Family::UpstreamShapes => 1,
            Family::DownstreamVariant => 2,
            Family::InstanceCue => 3,
        }
    }
}

fn default_image_size() -> [usize; 3] {
    [3, 16, 16]
}
fn default_cue_positions() -> usize {
    4
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Task group for aggregate rows (e.g. `natural`, `shift`, `instance`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub family: Family,
    /// For `instance_cue` this is the template count times `cue_positions`.
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// `[channels, height, width]`.
    #[serde(default = "default_image_size")]
    pub image_size: [usize; 3],
    pub generator_seed: u64,
    /// Probability that an image is rendered from a uniformly random class instead of its label.
    #[serde(default)]
    pub instance_noise: f64,
    /// Rendering shift for downstream families: 0–2 palette and texture changes, 3+ stronger shifts.
    #[serde(default)]
    pub variant: u32,
    /// Number of marker positions `Q` (`instance_cue` only).
    #[serde(default = "default_cue_positions")]
    pub cue_positions: usize,
    /// `false` deletes the marker, leaving the plain template task.
    #[serde(default = "yes")]
    pub cue: bool,
}

impl DatasetSpec {
    pub fn new(family: Family, num_classes: usize, n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            name: None,
            group: None,
            family,
            num_classes,
            n_train,
            n_test,
            image_size: default_image_size(),
            generator_seed: seed,
            instance_noise: 0.0,
            variant: 0,
            cue_positions: default_cue_positions(),
            cue: true,
        }
    }

    pub fn with_variant(mut self, v: u32) -> Self {
        self.variant = v;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.instance_noise = noise;
        self
    }

    pub fn with_image_size(mut self, size: [usize; 3]) -> Self {
        self.image_size = size;
        self
    }

    pub fn named(mut self, name: impl Into<String>, group: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self.group = Some(group.into());
        self
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| match self.family {
            Family::UpstreamShapes => format!("upstream-{}c", self.num_classes),
            Family::DownstreamVariant => format!("variant{}-{}c", self.variant, self.num_classes),
            Family::InstanceCue => format!("cue-{}c", self.num_classes),
        })
    }

    /// Template classes rendered as shapes; equals `num_classes` outside `instance_cue`.
    pub fn template_classes(&self) -> usize {
        match self.family {
            Family::InstanceCue => self.num_classes / self.cue_positions.max(1),
            _ => self.num_classes,
        }
    }

    /// Label count of the generated data (`template_classes` when the cue is deleted).
    pub fn label_count(&self) -> usize {
        if self.family == Family::InstanceCue && !self.cue {
            self.template_classes()
        } else {
            self.num_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(format!("{}: {m}", self.display_name())));
        let [c, h, w] = self.image_size;
        if c != 3 {
            return fail(format!("renderer draws RGB images, got {c} channels"));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return fail(format!("image {h}x{w} is too small for shapes (minimum {MIN_SIDE}x{MIN_SIDE})"));
        }
        if self.num_classes < 2 {
            return fail("need at least 2 classes".into());
        }
        if !(0.0..=1.0).contains(&self.instance_noise) {
            return fail(format!("instance_noise {} outside [0, 1]", self.instance_noise));
        }
        if self.family == Family::InstanceCue {
            if !(2..=4).contains(&self.cue_positions) {
                return fail("cue_positions must be 2, 3 or 4 (image corners)".into());
            }
            if self.num_classes % self.cue_positions != 0 || self.template_classes() < 1 {
                return fail(format!(
                    "num_classes {} is not a multiple of cue_positions {}",
                    self.num_classes, self.cue_positions
                ));
            }
        }
        if self.template_classes() > NUM_SHAPES * NUM_COLORS {
            return fail(format!("at most {} template classes", NUM_SHAPES * NUM_COLORS));
        }
        Ok(())
    }
}

/// One image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[C, H, W]` in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// Immutable image set stored as one flat `f32` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], num_classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if pixels.len() != per * labels.len() {
            return Err(Error::Contract(format!(
                "{} pixels for {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            image_shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        LabeledImage {
            pixels: Tensor::new(self.image_shape.to_vec(), self.image(i).to_vec()).expect("shape"),
            label: self.labels[i],
        }
    }

    /// `[B, C, H, W]` batch and labels for `indices`.
    pub fn batch<E: Element>(&self, indices: &[usize]) -> (Tensor<E>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| E::of(v as f64)));
        }
        let [c, h, w] = self.image_shape;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(vec![indices.len(), c, h, w], data).expect("shape"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Train and test sets of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub group: Option<String>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Flat,
    Stripes,
    Checker,
    Speckle,
}

struct Style {
    hue_offset: f32,
    saturation: f32,
    texture: Texture,
    bg_range: (f32, f32),
    pixel_noise: f32,
    invert: bool,
}

fn style(family: Family, variant: u32) -> Style {
    match family {
        Family::UpstreamShapes => Style {
            hue_offset: 0.0,
            saturation: 0.9,
            texture: Texture::Flat,
            bg_range: (0.0, 0.25),
            pixel_noise: 0.03,
            invert: false,
        },
        _ => {
            let v = variant as f32;
            Style {
                hue_offset: 30.0 + 23.0 * v,
                saturation: 0.7,
                texture: match variant % 3 {
                    0 => Texture::Stripes,
                    1 => Texture::Checker,
                    _ => Texture::Speckle,
                },
                bg_range: (0.05, 0.35),
                pixel_noise: if variant >= 4 { 0.08 } else { 0.04 },
                invert: variant == 3,
            }
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn color_of(bin: usize, st: &Style) -> [f32; 3] {
    hsv(st.hue_offset + bin as f32 * 360.0 / NUM_COLORS as f32, st.saturation, 0.95)
}

/// Whether local coordinates `(u, v)` (unit radius) fall inside `shape`.
fn inside(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.78,
        2 => v <= 0.75 && v >= -0.95 && u.abs() <= (v + 0.95) * 0.6,
        3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        4 => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        _ => u.abs() + v.abs() <= 1.0,
    }
}

/// Renders one image of template class `class` into `out` (`[3, h, w]`).
fn render(rng: &mut ChaCha8Rng, class: usize, shapes: usize, st: &Style, h: usize, w: usize, out: &mut [f32]) {
    let (shape, bin) = (class % shapes, class / shapes);
    let side = h.min(w) as f32;
    let r = side * rng.random_range(0.26..0.38);
    let margin = r * 0.8;
    let cx = rng.random_range(margin..(w as f32 - margin).max(margin + 1e-3));
    let cy = rng.random_range(margin..(h as f32 - margin).max(margin + 1e-3));
    let theta: f32 = rng.random_range(-0.25..0.25);
    let (sin, cos) = theta.sin_cos();
    let bg = rng.random_range(st.bg_range.0..st.bg_range.1);
    let mut color = color_of(bin, st);
    for ch in &mut color {
        *ch = (*ch + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let period = rng.random_range(2.5..4.0);
    let noise = Normal::new(0.0f32, st.pixel_noise).expect("std");
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let u = (cos * px + sin * py) / r;
            let v = (-sin * px + cos * py) / r;
            let tex = match st.texture {
                Texture::Flat => 1.0,
                Texture::Stripes => 0.8 + 0.2 * ((x as f32 + y as f32) / period * std::f32::consts::TAU + phase).sin(),
                Texture::Checker => {
                    if ((x / 2) + (y / 2)) % 2 == 0 {
                        1.0
                    } else {
                        0.7
                    }
                }
                Texture::Speckle => 0.75 + 0.25 * rng.random::<f32>(),
            };
            let hit = inside(shape, u, v);
            for ch in 0..3 {
                let base = if hit { color[ch] * tex } else { bg };
                let mut val = (base + noise.sample(rng)).clamp(0.0, 1.0);
                if st.invert {
                    val = 1.0 - val;
                }
                out[(ch * h + y) * w + x] = val;
            }
        }
    }
}

/// Paints a white square marker in corner `cue` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
fn paint_marker(cue: usize, h: usize, w: usize, out: &mut [f32]) {
    let s = (h.min(w) / 4).max(2);
    let (y0, x0) = match cue {
        0 => (0, 0),
        1 => (0, w - s),
        2 => (h - s, 0),
        _ => (h - s, w - s),
    };
    for ch in 0..3 {
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                out[(ch * h + y) * w + x] = 1.0;
            }
        }
    }
}

/// Shape kinds used for `classes` template classes.
fn shapes_for(classes: usize) -> usize {
    classes.min(NUM_SHAPES)
}

/// Class-balanced labels in a seed-determined order.
fn balanced_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn stream_rng(spec: &DatasetSpec, family: Family, split: u64, part: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.generator_seed);
    rng.set_stream(family.stream() << 32 | (spec.variant as u64) << 8 | split << 4 | part);
    rng
}

fn generate_split(spec: &DatasetSpec, n: usize, split: u64) -> Dataset {
    let [c, h, w] = spec.image_size;
    let templates = spec.template_classes();
    let shapes = shapes_for(templates);
    // Cue tasks render their templates exactly like the matching downstream task.
    let render_family = match spec.family {
        Family::InstanceCue => Family::DownstreamVariant,
        f => f,
    };
    let st = style(render_family, spec.variant);
    let mut label_rng = stream_rng(spec, render_family, split, 0);
    let mut pixel_rng = stream_rng(spec, render_family, split, 1);
    let template_labels = balanced_labels(&mut label_rng, n, templates);

    let per = c * h * w;
    let mut pixels = vec![0.0f32; n * per];
    for (i, &t) in template_labels.iter().enumerate() {
        let shown = if spec.instance_noise > 0.0 && label_rng.random::<f64>() < spec.instance_noise {
            label_rng.random_range(0..templates)
        } else {
            t
        };
        render(&mut pixel_rng, shown, shapes, &st, h, w, &mut pixels[i * per..(i + 1) * per]);
    }

    if spec.family != Family::InstanceCue || !spec.cue {
        return Dataset::new(spec.image_size, templates, pixels, template_labels).expect("consistent");
    }

    let q = spec.cue_positions;
    let mut cue_rng = stream_rng(spec, Family::InstanceCue, split, 2);
    let mut cues = vec![0; n];
    for t in 0..templates {
        let idx: Vec<usize> = (0..n).filter(|&i| template_labels[i] == t).collect();
        let mut assigned: Vec<usize> = (0..idx.len()).map(|j| j % q).collect();
        assigned.shuffle(&mut cue_rng);
        for (&i, &cue) in idx.iter().zip(&assigned) {
            cues[i] = cue;
        }
    }
    let labels = (0..n)
        .map(|i| {
            paint_marker(cues[i], h, w, &mut pixels[i * per..(i + 1) * per]);
            template_labels[i] * q + cues[i]
        })
        .collect();
    Dataset::new(spec.image_size, spec.num_classes, pixels, labels).expect("consistent")
}

/// Renders the train and test splits of `spec`.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<TaskData> {
    spec.validate()?;
    Ok(TaskData {
        name: spec.display_name(),
        group: spec.group.clone(),
        train: generate_split(spec, spec.n_train, 0),
        test: generate_split(spec, spec.n_test, 1),
    })
}

/// Instance-cue task with `templates` shape classes and `cue_positions` marker corners.
pub fn instance_cue_task(spec: &DatasetSpec) -> Result<TaskData> {
    if spec.family != Family::InstanceCue {
        return Err(Error::Spec("instance_cue_task needs family instance_cue".into()));
    }
    generate_synthetic(spec)
}

/// Six downstream tasks: three template tasks, two shifted renderings and one cue task.
pub fn default_suite(n_train: usize, n_test: usize, seed: u64) -> Vec<DatasetSpec> {
    let dv = |v: u32| DatasetSpec::new(Family::DownstreamVariant, 6, n_train, n_test, seed).with_variant(v);
    vec![
        dv(0).named("stripes", "natural"),
        dv(1).named("checker", "natural"),
        dv(2).named("speckle", "natural"),
        dv(3).named("inverted", "shift"),
        dv(4).named("noisy", "shift"),
        DatasetSpec::new(Family::InstanceCue, 8, n_train, n_test, seed).named("cue", "instance"),
    ]
}

/// Class-stratified subset of `⌊fraction·n⌋` examples in original order.
/// Smaller fractions under the same seed select subsets of larger ones.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let k = (fraction * dataset.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::DatasetTooSmall { n: 0, min: 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_rank: Vec<usize> = (0..dataset.num_classes).collect();
    class_rank.shuffle(&mut rng);
    // Each class's examples in a random order, keyed by their quantile so every
    // prefix of the merged order is stratified.
    let mut keyed = Vec::with_capacity(dataset.len());
    for c in 0..dataset.num_classes {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_c = idx.len() as f64;
        for (j, i) in idx.into_iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n_c, class_rank[c], i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = keyed[..k].iter().map(|e| e.2).collect();
    chosen.sort_unstable();
    Ok(dataset.subset(&chosen))
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// PIMG1 bytes: magic, `u32` count, `u16` H, `u16` W, `u8` channels, then per
/// record `u16` label and `f32` pixels, then a `u64` FNV-1a of all preceding bytes.
pub fn corpus_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let [c, h, w] = dataset.image_shape;
    if h > u16::MAX as usize || w > u16::MAX as usize || c > u8::MAX as usize || dataset.num_classes > 1 << 16 {
        return Err(Error::Config("dataset does not fit the PIMG1 header fields".into()));
    }
    let mut out = Vec::with_capacity(16 + dataset.len() * (2 + 4 * dataset.image_len()));
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(c as u8);
    for i in 0..dataset.len() {
        out.extend_from_slice(&(dataset.labels[i] as u16).to_le_bytes());
        for &v in dataset.image(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Parses PIMG1 bytes. `num_classes` defaults to one more than the largest label.
pub fn parse_corpus(bytes: &[u8], path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let trunc = |offset: usize| Error::Truncated {
        path: path.to_path_buf(),
        offset: offset as u64,
    };
    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    const HEADER: usize = 5 + 4 + 2 + 2 + 1;
    let magic_len = bytes.len().min(5);
    if bytes[..magic_len] != CORPUS_MAGIC[..magic_len] {
        return Err(corrupt("bad magic"));
    }
    if bytes.len() < HEADER {
        return Err(trunc(bytes.len()));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(bytes[11..13].try_into().unwrap()) as usize;
    let c = bytes[13] as usize;
    let per = c * h * w;
    let record = 2 + 4 * per;
    let mut pos = HEADER;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * per);
    for _ in 0..count {
        if bytes.len() < pos + record {
            return Err(trunc(pos));
        }
        labels.push(u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize);
        pixels.extend(
            bytes[pos + 2..pos + record]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
        pos += record;
    }
    if bytes.len() < pos + 8 {
        return Err(trunc(pos));
    }
    if bytes.len() > pos + 8 {
        return Err(corrupt("trailing bytes after records"));
    }
    let stored = u64::from_le_bytes(bytes[pos..].try_into().unwrap());
    if stored != checksum(&bytes[..pos]) {
        return Err(corrupt("checksum mismatch"));
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new([c, h, w], classes, pixels, labels).map_err(|e| corrupt(&e.to_string()))
}

pub fn save_corpus(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, corpus_bytes(dataset)?)?;
    Ok(())
}

pub fn load_corpus(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_corpus(&bytes, path, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_distinct_masks() {
        let grid: Vec<Vec<bool>> = (0..NUM_SHAPES)
            .map(|s| {
                (0..400)
                    .map(|i| inside(s, (i % 20) as f32 / 10.0 - 1.0, (i / 20) as f32 / 10.0 - 1.0))
                    .collect()
            })
            .collect();
        for a in 0..NUM_SHAPES {
            for b in a + 1..NUM_SHAPES {
                let diff = grid[a].iter().zip(&grid[b]).filter(|(x, y)| x != y).count();
                assert!(diff > 20, "shapes {a} and {b} differ in {diff} cells");
            }
        }
    }

    #[test]
    fn rejects_tiny_images() {
        let spec = DatasetSpec::new(Family::UpstreamShapes, 4, 8, 8, 0).with_image_size([3, 4, 4]);
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn pixels_in_unit_range() {
        for spec in default_suite(12, 4, 3) {
            let d = generate_synthetic(&spec).unwrap();
            assert!(d.train.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
