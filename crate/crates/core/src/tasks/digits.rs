use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{write_tensor, Tensor};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// 28×28 grayscale digits with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DigitDataset {
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

impl DigitDataset {
    pub fn new(pixels: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::Format(format!("{} pixels for {} labels", pixels.len(), labels.len())));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    /// The images whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[u8]) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&keep)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self { pixels, labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Stacks the chosen images into `[B, 784]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        Tensor::new(&[indices.len(), PIXELS], self.subset(indices).pixels)
    }

    /// Per-pixel mean of the images with label `class`, if any.
    pub fn class_mean(&self, class: u8) -> Option<Vec<f32>> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        if idx.is_empty() {
            return None;
        }
        let mut acc = vec![0.0f64; PIXELS];
        for &i in &idx {
            for (a, &p) in acc.iter_mut().zip(self.image(i)) {
                *a += p as f64;
            }
        }
        Some(acc.into_iter().map(|a| (a / idx.len() as f64) as f32).collect())
    }

    /// Writes `images.atns` (`[n, 28, 28]`) and `labels.txt`. An empty
    /// dataset writes only the (empty) label file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if !self.is_empty() {
            write_tensor(&Tensor::new(&[self.len(), SIDE, SIDE], self.pixels.clone())?, dir.join("images.atns"))?;
        }
        let labels: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        std::fs::write(dir.join("labels.txt"), labels)?;
        Ok(())
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated IDX header")))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Reads an IDX image file (`0x803`, 28×28) and its label file (`0x801`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DigitDataset> {
    let img = read_all(images_path)?;
    let lab = read_all(labels_path)?;
    let magic = read_be_u32(&img, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("image file magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = read_be_u32(&img, 4, "images")? as usize;
    let (rows, cols) = (read_be_u32(&img, 8, "images")? as usize, read_be_u32(&img, 12, "images")? as usize);
    if (rows, cols) != (SIDE, SIDE) {
        return Err(Error::Format(format!("images are {rows}×{cols}, expected {SIDE}×{SIDE}")));
    }
    let body = &img[16..];
    if body.len() != n * PIXELS {
        return Err(Error::Format(format!("image payload has {} bytes, header promises {}", body.len(), n * PIXELS)));
    }
    let magic = read_be_u32(&lab, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("label file magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let nl = read_be_u32(&lab, 4, "labels")? as usize;
    if nl != n || lab.len() != 8 + n {
        return Err(Error::Format(format!("{n} images but {nl} labels")));
    }
    DigitDataset::new(body.iter().map(|&b| b as f32 / 255.0).collect(), lab[8..].to_vec())
}

/// Additive Gaussian noise with standard deviation `sigma`, clipped to `[0, 1]`.
pub fn corrupt(clean: &Tensor, sigma: f32, rng: &mut SplitMix64) -> Tensor {
    let mut out = clean.clone();
    for p in out.data_mut() {
        *p = (*p + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    out
}

// Glyph strokes in a unit box, (x, y) with y pointing down. Arcs are given
// as (cx, cy, rx, ry, start_deg, end_deg) and expanded into polylines.
enum Stroke {
    Line(&'static [(f32, f32)]),
    Arc(f32, f32, f32, f32, f32, f32),
}

fn glyph(class: u8) -> &'static [Stroke] {
    use Stroke::*;
    match class {
        0 => &[Arc(0.5, 0.5, 0.32, 0.45, 0.0, 360.0)],
        1 => &[Line(&[(0.35, 0.2), (0.55, 0.05), (0.55, 0.95)]), Line(&[(0.35, 0.95), (0.75, 0.95)])],
        2 => &[Arc(0.5, 0.3, 0.3, 0.25, 180.0, 380.0), Line(&[(0.78, 0.38), (0.2, 0.95), (0.82, 0.95)])],
        3 => &[Arc(0.48, 0.28, 0.28, 0.23, 160.0, 450.0), Arc(0.48, 0.73, 0.32, 0.23, 270.0, 560.0)],
        4 => &[Line(&[(0.65, 0.95), (0.65, 0.05), (0.15, 0.65), (0.85, 0.65)])],
        5 => &[Line(&[(0.78, 0.05), (0.25, 0.05), (0.22, 0.45)]), Arc(0.48, 0.67, 0.32, 0.28, 220.0, 520.0)],
        6 => &[Line(&[(0.7, 0.05), (0.28, 0.55)]), Arc(0.5, 0.7, 0.28, 0.25, 0.0, 360.0)],
        7 => &[Line(&[(0.15, 0.05), (0.85, 0.05), (0.4, 0.95)]), Line(&[(0.35, 0.5), (0.72, 0.5)])],
        8 => &[Arc(0.5, 0.27, 0.25, 0.22, 0.0, 360.0), Arc(0.5, 0.72, 0.3, 0.23, 0.0, 360.0)],
        _ => &[Arc(0.5, 0.3, 0.28, 0.25, 0.0, 360.0), Line(&[(0.78, 0.3), (0.6, 0.95)])],
    }
}

fn polyline(stroke: &Stroke) -> Vec<(f32, f32)> {
    match *stroke {
        Stroke::Line(pts) => pts.to_vec(),
        Stroke::Arc(cx, cy, rx, ry, a0, a1) => {
            let steps = (((a1 - a0).abs() / 15.0).ceil() as usize).max(2);
            (0..=steps)
                .map(|i| {
                    let a = (a0 + (a1 - a0) * i as f32 / steps as f32).to_radians();
                    (cx + rx * a.cos(), cy + ry * a.sin())
                })
                .collect()
        }
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn render(class: u8, rng: &mut SplitMix64) -> Vec<f32> {
    let width = rng.uniform(12.0, 15.0);
    let height = rng.uniform(17.0, 20.0);
    let x0 = (SIDE as f32 - width) / 2.0 + rng.uniform(-2.0, 2.0);
    let y0 = (SIDE as f32 - height) / 2.0 + rng.uniform(-2.0, 2.0);
    let slant = rng.uniform(-0.15, 0.15);
    let thickness = rng.uniform(0.9, 1.6);
    let segments: Vec<((f32, f32), (f32, f32))> = glyph(class)
        .iter()
        .flat_map(|s| {
            let pts: Vec<(f32, f32)> = polyline(s)
                .into_iter()
                .map(|(u, v)| (x0 + u * width + slant * (0.5 - v) * height, y0 + v * height))
                .collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let mut img = vec![0.0f32; PIXELS];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let p = (c as f32 + 0.5, r as f32 + 0.5);
            let d = segments.iter().map(|&(a, b)| segment_distance(p, a, b)).fold(f32::INFINITY, f32::min);
            img[r * SIDE + c] = (1.0 - (d - thickness).max(0.0)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Procedurally drawn digits: fixed stroke templates with random size,
/// translation, slant and stroke width. Labels cycle through `classes`
/// in random order.
pub fn synth_digits(seed: u64, count: usize, classes: &[u8]) -> Result<DigitDataset> {
    if let Some(&bad) = classes.iter().find(|&&c| c > 9) {
        return Err(Error::contract(format!("digit class {bad} is not in 0..=9")));
    }
    if count > 0 && classes.is_empty() {
        return Err(Error::contract("no digit classes to draw from"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut pixels = Vec::with_capacity(count * PIXELS);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class = classes[rng.below(classes.len())];
        pixels.extend(render(class, &mut rng));
        labels.push(class);
    }
    DigitDataset::new(pixels, labels)
}
