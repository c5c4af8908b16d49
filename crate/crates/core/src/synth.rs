//! Deterministic synthetic fine-grained dataset.
//!
//! Every object is made of K glyphs (shape x color). A class is a fixed
//! K-tuple of glyph types; classes share most of their glyphs, so telling
//! them apart requires identifying individual parts. With `pose_permute`
//! the glyphs land in a fresh random slot order per sample.
//!
//! The texture-only variant ([`food_mode`]) moves the class signal into the
//! background and draws class-independent glyphs on opaque tiles, so part
//! crops carry no label information at all.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PartBox;
use crate::tensor::Tensor;

pub const NUM_SHAPES: usize = 4;

const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.12, 0.12],
    [0.12, 0.78, 0.20],
    [0.15, 0.30, 0.92],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.80],
    [0.10, 0.80, 0.85],
];

const BACKGROUND: f32 = 0.5;
const TILE: f32 = 0.45;
const CLASS_TUPLE_STREAM: u64 = u64::MAX;
const TEST_STREAM_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    fn from_index(i: usize) -> Self {
        [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross][i % NUM_SHAPES]
    }

    /// Whether pixel `(y, x)` of a `side x side` glyph is filled.
    fn covers(self, y: usize, x: usize, side: usize) -> bool {
        let s = side as f32;
        let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
        match self {
            Shape::Circle => {
                let r = s / 2.0;
                (fy - r).powi(2) + (fx - r).powi(2) <= r * r
            }
            Shape::Square => {
                let m = s * 0.1;
                fy >= m && fy <= s - m && fx >= m && fx <= s - m
            }
            Shape::Triangle => {
                // apex at the top centre, base along the bottom edge
                let half = 0.5 * s * fy / s;
                (fx - s / 2.0).abs() <= half
            }
            Shape::Cross => {
                let t = s / 6.0;
                (fy - s / 2.0).abs() <= t || (fx - s / 2.0).abs() <= t
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlyphType {
    pub shape: Shape,
    pub color: usize,
}

impl GlyphType {
    pub fn count() -> usize {
        NUM_SHAPES * PALETTE.len()
    }

    fn from_index(i: usize) -> Self {
        GlyphType {
            shape: Shape::from_index(i % NUM_SHAPES),
            color: i / NUM_SHAPES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub parts_per_object: usize,
    pub image_size: usize,
    pub pose_permute: bool,
    /// Maximum placement offset in pixels around each slot centre.
    pub jitter_radius: usize,
    pub noise_sigma: f64,
    pub train_count: usize,
    pub test_count: usize,
    /// Class signal lives in the background texture only.
    pub texture_only: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            parts_per_object: 4,
            image_size: 64,
            pose_permute: true,
            jitter_radius: 3,
            noise_sigma: 0.05,
            train_count: 2000,
            test_count: 500,
            texture_only: false,
            seed: 0,
        }
    }
}

/// Slot grid derived from a spec.
#[derive(Clone, Copy, Debug)]
struct Layout {
    grid: usize,
    cell: usize,
    glyph: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.parts_per_object < 2 {
            return Err(Error::Config("need at least 2 classes and 2 parts".into()));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        self.layout().map(|_| ())
    }

    fn layout(&self) -> Result<Layout> {
        let grid = (self.parts_per_object as f64).sqrt().ceil() as usize;
        let cell = self.image_size / grid;
        let glyph = cell * 5 / 8;
        if glyph < 5 || glyph + 2 * self.jitter_radius > cell {
            return Err(Error::Config(format!(
                "{} glyphs with jitter {} do not fit a {}px image",
                self.parts_per_object, self.jitter_radius, self.image_size
            )));
        }
        Ok(Layout { grid, cell, glyph })
    }

    /// Glyph tuple of every class. Classes are variations of one shared base
    /// tuple with two slots replaced, so they overlap in most parts.
    pub fn class_tuples(&self) -> Result<Vec<Vec<GlyphType>>> {
        self.validate()?;
        let k = self.parts_per_object;
        let types = GlyphType::count();
        if k > types {
            return Err(Error::Config(format!("at most {types} parts per object")));
        }
        let mut rng = stream_rng(self.seed, CLASS_TUPLE_STREAM);
        let mut all: Vec<usize> = (0..types).collect();
        all.shuffle(&mut rng);
        let base: Vec<usize> = all[..k].to_vec();
        let swap = 2.min(k);
        let mut seen: Vec<Vec<usize>> = Vec::new();
        let mut tuples = Vec::with_capacity(self.num_classes);
        let mut attempts = 0;
        while tuples.len() < self.num_classes {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config("cannot build distinct class tuples".into()));
            }
            let mut t = base.clone();
            let slots: Vec<usize> = rand::seq::index::sample(&mut rng, k, swap).into_vec();
            for s in slots {
                t[s] = rng.gen_range(0..types);
            }
            let mut key = t.clone();
            key.sort_unstable();
            key.dedup();
            if key.len() != k || seen.contains(&key) {
                continue;
            }
            seen.push(key);
            tuples.push(t.into_iter().map(GlyphType::from_index).collect());
        }
        Ok(tuples)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// Ground-truth glyph boxes; diagnostics only.
    pub part_boxes: Vec<PartBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Train and test splits. Sample `i` depends only on `(spec, split, i)`.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let tuples = spec.class_tuples()?;
    let layout = spec.layout()?;
    let split = |count: usize, offset: u64| Dataset {
        spec: spec.clone(),
        samples: (0..count)
            .into_par_iter()
            .map(|i| render(spec, &tuples, layout, i, offset + i as u64))
            .collect(),
    };
    Ok((split(spec.train_count, 0), split(spec.test_count, TEST_STREAM_OFFSET)))
}

/// Texture-only variant of [`generate`].
pub fn food_mode(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    generate(&SynthSpec {
        texture_only: true,
        ..spec.clone()
    })
}

fn class_tint(class: usize, classes: usize) -> [f32; 3] {
    // evenly spaced hues, fixed saturation and value
    let h = class as f32 / classes as f32 * 6.0;
    let (s, v) = (0.55f32, 0.75f32);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
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

fn render(
    spec: &SynthSpec,
    tuples: &[Vec<GlyphType>],
    layout: Layout,
    index: usize,
    stream: u64,
) -> SynthSample {
    let mut rng = stream_rng(spec.seed, stream);
    let size = spec.image_size;
    let plane = size * size;
    let label = index % spec.num_classes;
    let k = spec.parts_per_object;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");

    let mut img = vec![0f32; 3 * plane];
    if spec.texture_only {
        let tint = class_tint(label, spec.num_classes);
        for (c, channel) in img.chunks_mut(plane).enumerate() {
            for v in channel.iter_mut() {
                *v = tint[c] + rng.gen_range(-0.15f32..0.15);
            }
        }
    } else {
        img.fill(BACKGROUND);
    }

    let mut slots: Vec<usize> = (0..layout.grid * layout.grid).collect();
    if spec.pose_permute {
        slots.shuffle(&mut rng);
    }
    let mut boxes = Vec::with_capacity(k);
    for (part, &slot) in slots.iter().take(k).enumerate() {
        let glyph = if spec.texture_only {
            GlyphType::from_index(rng.gen_range(0..GlyphType::count()))
        } else {
            tuples[label][part]
        };
        let r = spec.jitter_radius as i64;
        let (dy, dx) = (rng.gen_range(-r..=r), rng.gen_range(-r..=r));
        let margin = ((layout.cell - layout.glyph) / 2) as i64;
        let row = ((slot / layout.grid * layout.cell) as i64 + margin + dy) as usize;
        let col = ((slot % layout.grid * layout.cell) as i64 + margin + dx) as usize;
        let color = PALETTE[glyph.color];
        for y in 0..layout.glyph {
            for x in 0..layout.glyph {
                let at = (row + y) * size + col + x;
                let fill = if glyph.shape.covers(y, x, layout.glyph) {
                    Some(color)
                } else if spec.texture_only {
                    Some([TILE; 3])
                } else {
                    None
                };
                if let Some(rgb) = fill {
                    for c in 0..3 {
                        img[c * plane + at] = rgb[c];
                    }
                }
            }
        }
        boxes.push(PartBox {
            row,
            col,
            side: layout.glyph,
            score: 1.0,
        });
    }

    if spec.noise_sigma > 0.0 {
        for v in img.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    SynthSample {
        image: Tensor::new(vec![3, size, size], img).expect("shape matches"),
        label,
        part_boxes: boxes,
    }
}

/// Random brightness, contrast and saturation factors, each uniform in
/// `[1 - strength, 1 + strength]`, applied in that order with clamping to
/// `[0, 1]` after every step.
pub fn color_jitter<R: Rng>(image: &Tensor<f32>, strength: f64, rng: &mut R) -> Tensor<f32> {
    let strength = strength.clamp(0.0, 1.0) as f32;
    if strength == 0.0 {
        return image.clone();
    }
    let mut draw = || rng.gen_range(1.0 - strength..=1.0 + strength);
    let (brightness, contrast, saturation) = (draw(), draw(), draw());
    let mut out = image.clone();
    let plane = out.len() / 3;
    let data = out.data_mut();
    let gray = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];

    data.iter_mut()
        .for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));

    let mean = (0..plane).map(|i| gray(data, i)).sum::<f32>() / plane as f32;
    data.iter_mut()
        .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));

    for i in 0..plane {
        let g = gray(data, i);
        for c in 0..3 {
            let v = &mut data[c * plane + i];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: SynthSpec,
    image_shape: [usize; 3],
    dtype: String,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    label: usize,
    part_boxes: Vec<PartBox>,
}

const MANIFEST_FORMAT: &str = "partalign-synth-v1";

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f32
/// images concatenated in manifest order) into `dir`.
pub fn export(dataset: &Dataset, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = dataset.spec.image_size;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        spec: dataset.spec.clone(),
        image_shape: [3, size, size],
        dtype: "f32le".into(),
        samples: dataset
            .samples
            .iter()
            .enumerate()
            .map(|(index, s)| ManifestEntry {
                index,
                label: s.label,
                part_boxes: s.part_boxes.clone(),
            })
            .collect(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&json_path, e))?;

    let bin_path = dir.join(format!("{stem}.bin"));
    let mut bytes = Vec::with_capacity(dataset.len() * 3 * size * size * 4);
    for s in &dataset.samples {
        for v in s.image.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Reads a dataset written by [`export`]; `manifest` is the `.json` path.
pub fn import(manifest: &Path) -> Result<Dataset> {
    let raw = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: Manifest = serde_json::from_slice(&raw)?;
    if m.format != MANIFEST_FORMAT || m.dtype != "f32le" {
        return Err(Error::Config(format!(
            "unsupported dataset format {} / {}",
            m.format, m.dtype
        )));
    }
    let bin_path = manifest.with_extension("bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let per = m.image_shape.iter().product::<usize>();
    if bytes.len() != per * 4 * m.samples.len() {
        return Err(Error::Config(format!(
            "{} holds {} bytes, expected {}",
            bin_path.display(),
            bytes.len(),
            per * 4 * m.samples.len()
        )));
    }
    let samples = m
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let data = bytes[i * per * 4..(i + 1) * per * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(SynthSample {
                image: Tensor::new(m.image_shape.to_vec(), data)?,
                label: e.label,
                part_boxes: e.part_boxes,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: m.spec,
        samples,
    })
}
