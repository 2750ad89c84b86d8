//! Procedural shapes datasets and the `SADT` container.
//!
//! Server and client data are drawn from disjoint shape families rendered
//! with different styles (stroke width, background texture, intensity
//! curve). They share the same drawing primitives, so features learned on
//! one side carry some information about the other.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bytes::{Reader, Writer};
use crate::error::{bail, Error, Result};
use crate::rng::SaRng;
use crate::tensor::Tensor;

/// Shape families; the first six are the server's, the rest the client's.
pub const FAMILIES: [&str; 10] =
    ["circle", "square", "triangle", "cross", "hbars", "diamond", "disk", "xcross", "vbars", "ring"];

pub const SERVER_FAMILIES: [usize; 6] = [0, 1, 2, 3, 4, 5];
pub const CLIENT_FAMILIES: [usize; 4] = [6, 7, 8, 9];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Server,
    Client,
}

impl Style {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "server" => Ok(Style::Server),
            "client" => Ok(Style::Client),
            other => bail!(Config, "unknown style {:?} (expected server or client)", other),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Server => "server",
            Style::Client => "client",
        }
    }
}

/// Labeled images, channel-last, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn empty(height: usize, width: usize, channels: usize, num_classes: usize) -> Self {
        Self { height, width, channels, num_classes, pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f64], label: u16) -> Result<()> {
        if image.len() != self.image_len() {
            bail!(Dimension, "image has {} values, expected {}", image.len(), self.image_len());
        }
        if label as usize >= self.num_classes {
            bail!(Index, "label {} >= {} classes", label, self.num_classes);
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    /// Images at `idx` as a `[b, H, W, C]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[idx.len(), self.height, self.width, self.channels], data).expect("consistent dataset")
    }

    pub fn all_images(&self) -> Tensor {
        Tensor::new(&[self.len(), self.height, self.width, self.channels], self.pixels.clone())
            .expect("consistent dataset")
    }

    pub fn labels_usize(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.height, self.width, self.channels, self.num_classes);
        for &i in idx {
            out.pixels.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = alloc::vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// `shots` samples per class drawn by `seed`, grouped by class.
    pub fn few_shot(&self, shots: usize, seed: u64) -> Result<Dataset> {
        let mut rng = SaRng::new(seed);
        let mut idx = Vec::new();
        for c in 0..self.num_classes {
            let pool: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] as usize == c).collect();
            if pool.len() < shots {
                bail!(Config, "class {} has {} samples, {} shots requested", c, pool.len(), shots);
            }
            for j in rng.choose_distinct(pool.len(), shots) {
                idx.push(pool[j]);
            }
        }
        Ok(self.subset(&idx))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(HEADER_LEN + self.len() * (2 + 4 * self.image_len()));
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.len() as u32);
        w.u16(self.height as u16);
        w.u16(self.width as u16);
        w.u16(self.channels as u16);
        w.u16(self.num_classes as u16);
        for i in 0..self.len() {
            w.u16(self.labels[i]);
            for &p in self.image(i) {
                w.f32(p as f32);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: String| Error::Format { offset, reason };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), format!("file has {} bytes, header needs {}", bytes.len(), HEADER_LEN)));
        }
        let mut r = Reader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(fmt(0, "bad magic".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let (h, w, c, classes) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
        let record = 2 + 4 * h * w * c;
        let expected = count.checked_mul(record).and_then(|n| n.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(fmt(
                HEADER_LEN,
                format!("header promises {count} records of {record} bytes but file has {} bytes", bytes.len()),
            ));
        }
        let mut ds = Dataset::empty(h, w, c, classes);
        ds.pixels.reserve(count * h * w * c);
        for _ in 0..count {
            let at = r.offset();
            let label = r.u16()?;
            if label as usize >= classes {
                return Err(fmt(at, format!("label {label} >= class count {classes}")));
            }
            ds.labels.push(label);
            for _ in 0..h * w * c {
                ds.pixels.push(r.f32()? as f64);
            }
        }
        Ok(ds)
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"SADT";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

struct StyleParams {
    stroke: (f64, f64),
    contrast: f64,
    gamma: f64,
    noise: f64,
}

fn style_params(style: Style) -> StyleParams {
    match style {
        Style::Server => StyleParams { stroke: (1.3, 1.9), contrast: 0.85, gamma: 1.0, noise: 0.03 },
        Style::Client => StyleParams { stroke: (1.8, 2.4), contrast: 0.75, gamma: 0.85, noise: 0.04 },
    }
}

fn seg_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
    libm::hypot(px - a.0 - t * dx, py - a.1 - t * dy)
}

fn polygon_dist(px: f64, py: f64, pts: &[(f64, f64)]) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..pts.len() {
        d = d.min(seg_dist(px, py, pts[i], pts[(i + 1) % pts.len()]));
    }
    d
}

fn rotate(p: (f64, f64), c: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, co) = (libm::sin(angle), libm::cos(angle));
    (c.0 + p.0 * co - p.1 * s, c.1 + p.0 * s + p.1 * co)
}

/// Coverage in `[0, 1]` of the shape at pixel centre `(px, py)`.
fn coverage(family: usize, px: f64, py: f64, c: (f64, f64), r: f64, angle: f64, stroke: f64) -> f64 {
    let line = |d: f64| (stroke / 2.0 + 0.5 - d).clamp(0.0, 1.0);
    let poly = |corners: &[(f64, f64)]| {
        let pts: Vec<(f64, f64)> = corners.iter().map(|&p| rotate(p, c, angle)).collect();
        line(polygon_dist(px, py, &pts))
    };
    let dist_c = libm::hypot(px - c.0, py - c.1);
    match FAMILIES[family] {
        "circle" => line((dist_c - r).abs()),
        "square" => poly(&[(-r, -r), (r, -r), (r, r), (-r, r)]),
        "triangle" => poly(&[(0.0, -r), (0.87 * r, 0.5 * r), (-0.87 * r, 0.5 * r)]),
        "diamond" => poly(&[(0.0, -r * 1.2), (r, 0.0), (0.0, r * 1.2), (-r, 0.0)]),
        "cross" | "xcross" => {
            let base = if FAMILIES[family] == "xcross" { angle + core::f64::consts::FRAC_PI_4 } else { angle };
            let a1 = rotate((-r, 0.0), c, base);
            let b1 = rotate((r, 0.0), c, base);
            let a2 = rotate((0.0, -r), c, base);
            let b2 = rotate((0.0, r), c, base);
            line(seg_dist(px, py, a1, b1).min(seg_dist(px, py, a2, b2)))
        }
        "hbars" | "vbars" => {
            let base = if FAMILIES[family] == "vbars" { angle + core::f64::consts::FRAC_PI_2 } else { angle };
            let mut d = f64::INFINITY;
            for k in [-1.0, 0.0, 1.0] {
                let off = k * r * 0.7;
                d = d.min(seg_dist(px, py, rotate((-r, off), c, base), rotate((r, off), c, base)));
            }
            line(d)
        }
        "disk" => (r + 0.5 - dist_c).clamp(0.0, 1.0),
        "ring" => line((dist_c - r).abs().min((dist_c - 0.5 * r).abs())),
        _ => 0.0,
    }
}

fn render(family: usize, style: Style, size: usize, rng: &mut SaRng) -> Vec<f64> {
    let sp = style_params(style);
    let half = size as f64 / 2.0;
    let c = (half - 0.5 + (rng.uniform() - 0.5) * 2.0, half - 0.5 + (rng.uniform() - 0.5) * 2.0);
    let r = size as f64 * (0.26 + 0.08 * rng.uniform());
    let angle = (rng.uniform() - 0.5) * 0.3;
    let stroke = sp.stroke.0 + (sp.stroke.1 - sp.stroke.0) * rng.uniform();
    let bg = match style {
        Style::Server => 0.05 + 0.1 * rng.uniform(),
        Style::Client => 0.12 + 0.1 * rng.uniform(),
    };
    let phi = rng.uniform() * core::f64::consts::PI;
    let freq = 0.8 + 0.6 * rng.uniform();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let texture = match style {
                Style::Server => 0.0,
                Style::Client => 0.05 * libm::sin((fx * libm::cos(phi) + fy * libm::sin(phi)) * freq),
            };
            let v = coverage(family, fx, fy, c, r, angle, stroke);
            let mut p = (bg + texture + sp.contrast * v).clamp(0.0, 1.0);
            p = libm::pow(p, sp.gamma);
            p += sp.noise * rng.normal();
            // stored as f32 in SADT files, so round now to keep round-trips exact
            out.push(p.clamp(0.0, 1.0) as f32 as f64);
        }
    }
    out
}

/// Renders `n_per_class` grayscale `size × size` images per family, class-major.
/// Labels are positions within `families`.
pub fn generate_shapes(
    style: Style,
    families: &[usize],
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 {
        bail!(Config, "need at least one sample per class");
    }
    if families.is_empty() || families.iter().any(|&f| f >= FAMILIES.len()) {
        bail!(Config, "families {:?} must index {:?}", families, FAMILIES);
    }
    if size < 8 {
        bail!(Config, "image size {} too small to render shapes", size);
    }
    let mut rng = SaRng::new(seed);
    let mut ds = Dataset::empty(size, size, 1, families.len());
    for (label, &family) in families.iter().enumerate() {
        for _ in 0..n_per_class {
            let img = render(family, style, size, &mut rng);
            ds.push(&img, label as u16)?;
        }
    }
    Ok(ds)
}

/// Client data as used by experiments: a training pool and a disjoint test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit {
    pub pool: Dataset,
    pub test: Dataset,
}

pub fn client_split(size: usize, pool_per_class: usize, test_per_class: usize, seed: u64) -> Result<ClientSplit> {
    Ok(ClientSplit {
        pool: generate_shapes(Style::Client, &CLIENT_FAMILIES, pool_per_class, size, crate::rng::derive_seed(seed, 1))?,
        test: generate_shapes(Style::Client, &CLIENT_FAMILIES, test_per_class, size, crate::rng::derive_seed(seed, 2))?,
    })
}

/// Binary PGM (P5) of one grayscale image.
pub fn to_pgm(image: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.len() + 20);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    for &p in image {
        out.push(libm::round(p.clamp(0.0, 1.0) * 255.0) as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_shapes(Style::Server, &SERVER_FAMILIES, 5, 16, 3).unwrap();
        let b = generate_shapes(Style::Server, &SERVER_FAMILIES, 5, 16, 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.class_histogram(), alloc::vec![5; 6]);
        assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn unknown_style_rejected() {
        assert!(matches!(Style::parse("cartoon"), Err(Error::Config(_))));
        assert!(generate_shapes(Style::Client, &CLIENT_FAMILIES, 0, 16, 1).is_err());
    }

    #[test]
    fn nearest_neighbour_beats_chance() {
        let train = generate_shapes(Style::Server, &SERVER_FAMILIES, 30, 16, 1).unwrap();
        let test = generate_shapes(Style::Server, &SERVER_FAMILIES, 20, 16, 2).unwrap();
        let mut correct = 0;
        for i in 0..test.len() {
            let q = test.image(i);
            let best = (0..train.len())
                .min_by(|&a, &b| {
                    let da: f64 = train.image(a).iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = train.image(b).iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if train.labels[best] == test.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 1.0 / 6.0 + 0.1, "1-NN accuracy {acc}");
    }

    #[test]
    fn container_roundtrip_and_truncation() {
        let a = generate_shapes(Style::Client, &CLIENT_FAMILIES, 2, 16, 4).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 8 * (2 + 4 * 256));
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), a);
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(Dataset::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn golden_single_sample() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SADT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for v in [2u16, 1, 1, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[2, 0]);
        // 0.5, 0.25 as little-endian f32
        bytes.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x80, 0x3e]);
        let ds = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(ds.labels, alloc::vec![2]);
        assert_eq!(ds.pixels, alloc::vec![0.5, 0.25]);
        assert_eq!((ds.height, ds.width, ds.channels), (2, 1, 1));
    }

    #[test]
    fn few_shot_picks_per_class() {
        let a = generate_shapes(Style::Client, &CLIENT_FAMILIES, 10, 16, 5).unwrap();
        let f = a.few_shot(3, 9).unwrap();
        assert_eq!(f.class_histogram(), alloc::vec![3; 4]);
        assert_eq!(f, a.few_shot(3, 9).unwrap());
        assert!(a.few_shot(11, 9).is_err());
    }
}
