//! Synthetic glyph dataset and its packed binary format.
//!
//! Each class is a parametric family: a shape, a fill pattern, a size
//! bucket and an intensity bucket, drawn onto a grayscale canvas. Samples
//! jitter position, scale and rotation and add pixel noise, so classes are
//! separable but not trivially so. Everything is a pure function of the
//! dataset seed.
//!
//! File layout (little-endian): magic "CDSF", u32 version, u32 record
//! count, u16 height, u16 width, u8 channels, u8 reserved, then per record
//! a u32 class id followed by height·width·channels u8 pixels, row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{mix64, Rng};
use crate::tensor::Tensor;

pub const CDSF_MAGIC: [u8; 4] = *b"CDSF";
pub const CDSF_VERSION: u32 = 1;

const SHAPES: usize = 10;
const PATTERNS: usize = 4;
const SIZES: usize = 2;
const INTENSITIES: usize = 2;

/// Number of distinct class families the generator can produce.
pub const FAMILY_CAPACITY: usize = SHAPES * PATTERNS * SIZES * INTENSITIES;

const BACKGROUND: f64 = 30.0;
const NOISE_STD: f64 = 18.0;
const JITTER_PX: f64 = 2.5;

/// Fraction of each class's samples used for training; the rest are the
/// held-out evaluation pool.
pub const TRAIN_FRACTION_NUM: usize = 3;
pub const TRAIN_FRACTION_DEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub classes: u32,
    pub per_class: u32,
    pub size: u16,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 80,
            per_class: 40,
            size: 32,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn indices_of_class(&self, class: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// First ~75% of a class's samples, in record order.
    pub fn train_indices_of_class(&self, class: u32) -> Vec<usize> {
        let all = self.indices_of_class(class);
        let cut = all.len() * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
        all[..cut].to_vec()
    }

    pub fn test_indices_of_class(&self, class: u32) -> Vec<usize> {
        let all = self.indices_of_class(class);
        let cut = all.len() * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
        all[cut..].to_vec()
    }

    /// Image as [C×H×W] floats scaled to [0, 1].
    pub fn image_tensor(&self, index: usize) -> Tensor<f32> {
        let data: Vec<f32> = self.images[index]
            .iter()
            .map(|&p| p as f32 / 255.0)
            .collect();
        Tensor::from_vec(
            vec![
                self.channels as usize,
                self.height as usize,
                self.width as usize,
            ],
            data,
        )
        .expect("record length matches header")
    }
}

#[derive(Clone, Copy, Debug)]
struct Family {
    shape: usize,
    pattern: usize,
    radius_frac: f64,
    foreground: f64,
    half_width: f64,
}

fn family_for_class(seed: u64, class: u32) -> Family {
    // A seeded permutation of the combo space assigns each class a distinct
    // family tuple.
    let mut rng = Rng::new(mix64(seed ^ 0xFA_17_11));
    let perm = rng.permutation(FAMILY_CAPACITY);
    let combo = perm[class as usize];
    let shape = combo % SHAPES;
    let pattern = (combo / SHAPES) % PATTERNS;
    let size = (combo / (SHAPES * PATTERNS)) % SIZES;
    let intensity = combo / (SHAPES * PATTERNS * SIZES);
    Family {
        shape,
        pattern,
        radius_frac: if size == 0 { 0.30 } else { 0.42 },
        foreground: if intensity == 0 { 150.0 } else { 225.0 },
        half_width: 0.38,
    }
}

fn inside_shape(shape: usize, u: f64, v: f64, t: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let boxed = u.abs().max(v.abs());
    match shape {
        0 => r <= 1.0,                                            // disk
        1 => (0.55..=1.0).contains(&r),                           // ring
        2 => boxed <= 1.0,                                        // square
        3 => (0.55..=1.0).contains(&boxed),                       // square outline
        4 => u.abs() + v.abs() <= 1.2,                            // diamond
        5 => v <= 1.0 && v >= -1.0 && u.abs() <= (1.0 - v) / 2.0, // triangle
        6 => boxed <= 1.0 && (u.abs() <= t || v.abs() <= t),      // plus
        7 => boxed <= 1.1 && ((u - v).abs() <= t * 1.4 || (u + v).abs() <= t * 1.4), // x-cross
        8 => u.abs() <= 1.1 && v.abs() <= t,                      // horizontal bar
        _ => u.abs() <= t && v.abs() <= 1.1,                      // vertical bar
    }
}

fn pattern_level(pattern: usize, x: usize, y: usize, phase: usize, fg: f64) -> f64 {
    let dim = fg - 75.0;
    match pattern {
        0 => fg,
        1 => {
            if ((y + phase) / 3) % 2 == 0 {
                fg
            } else {
                dim
            }
        }
        2 => {
            if ((x + phase) / 3) % 2 == 0 {
                fg
            } else {
                dim
            }
        }
        _ => {
            if ((x / 3) + (y / 3) + phase) % 2 == 0 {
                fg
            } else {
                dim
            }
        }
    }
}

fn render_sample(spec: &DatasetSpec, family: &Family, class: u32, sample: u32) -> Vec<u8> {
    let s = spec.size as usize;
    let mut rng = Rng::new(mix64(
        spec.seed ^ mix64(((class as u64) << 32) | sample as u64),
    ));
    let cx = s as f64 / 2.0 + (rng.next_f64() * 2.0 - 1.0) * JITTER_PX;
    let cy = s as f64 / 2.0 + (rng.next_f64() * 2.0 - 1.0) * JITTER_PX;
    let scale = family.radius_frac * s as f64 * (0.88 + 0.24 * rng.next_f64());
    let rot = (rng.next_f64() * 2.0 - 1.0) * 0.35;
    let phase = rng.below(6);
    let (sin, cos) = rot.sin_cos();

    let mut pixels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let dx = (x as f64 + 0.5 - cx) / scale;
            let dy = (y as f64 + 0.5 - cy) / scale;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let base = if inside_shape(family.shape, u, v, family.half_width) {
                pattern_level(family.pattern, x, y, phase, family.foreground)
            } else {
                BACKGROUND
            };
            let noisy = base + NOISE_STD * rng.normal();
            pixels.push(noisy.clamp(0.0, 255.0) as u8);
        }
    }
    pixels
}

/// Deterministic synthetic dataset: `classes`×`per_class` grayscale glyph
/// records, grouped by class in sample order.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.size == 0 {
        return Err(Error::InvalidArgument(
            "classes, per-class and size must be positive".into(),
        ));
    }
    if spec.classes as usize > FAMILY_CAPACITY {
        return Err(Error::InvalidArgument(format!(
            "requested {} classes but the generator has {} distinct families",
            spec.classes, FAMILY_CAPACITY
        )));
    }
    let mut images = Vec::with_capacity((spec.classes * spec.per_class) as usize);
    let mut labels = Vec::with_capacity(images.capacity());
    for class in 0..spec.classes {
        let family = family_for_class(spec.seed, class);
        for sample in 0..spec.per_class {
            images.push(render_sample(spec, &family, class, sample));
            labels.push(class);
        }
    }
    Ok(Dataset {
        height: spec.size,
        width: spec.size,
        channels: 1,
        images,
        labels,
    })
}

pub fn encode_cdsf(dataset: &Dataset) -> Vec<u8> {
    let record = 4 + dataset.images.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(18 + record * dataset.len());
    out.extend_from_slice(&CDSF_MAGIC);
    out.extend_from_slice(&CDSF_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&dataset.height.to_le_bytes());
    out.extend_from_slice(&dataset.width.to_le_bytes());
    out.push(dataset.channels);
    out.push(0); // reserved
    for (image, &label) in dataset.images.iter().zip(&dataset.labels) {
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(image);
    }
    out
}

pub fn decode_cdsf(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 18 {
        return Err(Error::Truncated("header needs 18 bytes".into()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != CDSF_MAGIC {
        return Err(Error::BadMagic {
            expected: CDSF_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CDSF_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u16::from_le_bytes(bytes[12..14].try_into().unwrap());
    let width = u16::from_le_bytes(bytes[14..16].try_into().unwrap());
    let channels = bytes[16];
    let pixel_len = height as usize * width as usize * channels as usize;
    let record_len = 4 + pixel_len;
    let expected = 18 + count * record_len;
    if bytes.len() != expected {
        return Err(Error::Truncated(format!(
            "expected {expected} bytes for {count} records, found {}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut off = 18;
    for _ in 0..count {
        labels.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        images.push(bytes[off + 4..off + record_len].to_vec());
        off += record_len;
    }
    Ok(Dataset {
        height,
        width,
        channels,
        images,
        labels,
    })
}

pub fn write_cdsf(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, encode_cdsf(dataset))?;
    Ok(())
}

pub fn read_cdsf(path: &Path) -> Result<Dataset> {
    decode_cdsf(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            classes: 10,
            per_class: 8,
            size: 32,
            seed: 3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(encode_cdsf(&a), encode_cdsf(&b));
        let c = generate(&DatasetSpec {
            seed: 4,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(encode_cdsf(&a), encode_cdsf(&c));
    }

    #[test]
    fn default_spec_record_count_and_file_size() {
        let ds = generate(&DatasetSpec::default()).unwrap();
        assert_eq!(ds.len(), 3200);
        let bytes = encode_cdsf(&ds);
        assert_eq!(bytes.len(), 18 + 3200 * (4 + 1024));
    }

    #[test]
    fn capacity_limit_is_enforced() {
        let spec = DatasetSpec {
            classes: FAMILY_CAPACITY as u32 + 1,
            ..small_spec()
        };
        assert!(generate(&spec).is_err());
        let ok = DatasetSpec {
            classes: FAMILY_CAPACITY as u32,
            per_class: 1,
            ..small_spec()
        };
        assert!(generate(&ok).is_ok());
    }

    #[test]
    fn roundtrip_is_identical() {
        let ds = generate(&small_spec()).unwrap();
        let bytes = encode_cdsf(&ds);
        let back = decode_cdsf(&bytes).unwrap();
        assert_eq!(ds, back);
        assert_eq!(encode_cdsf(&back), bytes);
    }

    #[test]
    fn bad_magic_and_version_and_truncation() {
        let ds = generate(&small_spec()).unwrap();
        let mut bytes = encode_cdsf(&ds);
        bytes[0] = b'X';
        assert!(matches!(decode_cdsf(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = encode_cdsf(&ds);
        bytes[4] = 9;
        assert!(matches!(
            decode_cdsf(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
        let bytes = encode_cdsf(&ds);
        assert!(matches!(
            decode_cdsf(&bytes[..bytes.len() - 10]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn split_is_75_25() {
        let ds = generate(&small_spec()).unwrap();
        assert_eq!(ds.train_indices_of_class(0).len(), 6);
        assert_eq!(ds.test_indices_of_class(0).len(), 2);
        let train = ds.train_indices_of_class(3);
        let test = ds.test_indices_of_class(3);
        assert!(train.iter().all(|i| !test.contains(i)));
    }

    #[test]
    fn pixel_space_nearest_neighbor_band() {
        // 10-class sanity check: raw-pixel 1-NN must be clearly above chance
        // but below near-perfect, otherwise the benchmark is degenerate.
        let spec = DatasetSpec {
            classes: 10,
            per_class: 40,
            size: 32,
            seed: DatasetSpec::default().seed,
        };
        let ds = generate(&spec).unwrap();
        let mut correct = 0u32;
        let mut total = 0u32;
        for class in 0..10u32 {
            for &ti in &ds.test_indices_of_class(class) {
                let probe = &ds.images[ti];
                let mut best = u64::MAX;
                let mut best_label = 0u32;
                for c2 in 0..10u32 {
                    for &tr in &ds.train_indices_of_class(c2) {
                        let d: u64 = ds.images[tr]
                            .iter()
                            .zip(probe)
                            .map(|(&a, &b)| {
                                let d = a as i64 - b as i64;
                                (d * d) as u64
                            })
                            .sum();
                        if d < best {
                            best = d;
                            best_label = c2;
                        }
                    }
                }
                if best_label == class {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(
            (0.30..=0.95).contains(&acc),
            "1-NN accuracy {acc} outside sanity band"
        );
    }
}
