//! Labeled image datasets, the `VPTMDATA` container, and the synthetic
//! texture generator.
//!
//! ```text
//! magic "VPTMDATA", version u16, H u32, W u32, C u32, N_C u32, count u32,
//! count x { H*W*C u8 pixels (HWC), label u32 }
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedStream;

pub const DATA_MAGIC: &[u8; 8] = b"VPTMDATA";
pub const DATA_VERSION: u16 = 1;
const HEADER_LEN: u64 = 8 + 2 + 5 * 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    /// `len() * H * W * C` bytes, one HWC image after another.
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        n_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = Dataset {
            height,
            width,
            channels,
            n_classes,
            pixels,
            labels,
            split: Split::Train,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.labels.len() * self.image_len() {
            return Err(Error::invalid(format!(
                "{} pixel bytes for {} images of {} bytes",
                self.pixels.len(),
                self.labels.len(),
                self.image_len()
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.n_classes) {
            return Err(Error::invalid(format!(
                "label {l} of image {i} is not below {} classes",
                self.n_classes
            )));
        }
        Ok(())
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

    pub fn image_u8(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Pixels mapped from `[0, 255]` to `[-1, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        self.image_u8(i)
            .iter()
            .map(|&p| p as f64 / 127.5 - 1.0)
            .collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_u8(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            n_classes: self.n_classes,
            pixels: Vec::new(),
            labels: Vec::new(),
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize + self.pixels.len() + 4 * self.len());
        out.extend_from_slice(DATA_MAGIC);
        out.write_u16::<LittleEndian>(DATA_VERSION).unwrap();
        for v in [self.height, self.width, self.channels, self.n_classes, self.len()] {
            out.write_u32::<LittleEndian>(v as u32).unwrap();
        }
        for i in 0..self.len() {
            out.extend_from_slice(self.image_u8(i));
            out.write_u32::<LittleEndian>(self.labels[i] as u32).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let fail = |offset: u64, detail: String| Error::Format { offset, detail };
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| fail(0, "truncated magic".into()))?;
        if &magic != DATA_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(DATA_MAGIC).into(),
                found: String::from_utf8_lossy(&magic).into(),
            });
        }
        let version = cur
            .read_u16::<LittleEndian>()
            .map_err(|_| fail(8, "truncated version".into()))?;
        if version != DATA_VERSION {
            return Err(fail(8, format!("unsupported version {version}")));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            let at = cur.position();
            *h = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| fail(at, "truncated header".into()))? as usize;
        }
        let [height, width, channels, n_classes, count] = header;
        if height == 0 || width == 0 || channels == 0 {
            return Err(fail(10, format!("empty image shape {height}x{width}x{channels}")));
        }
        let image_len = height * width * channels;
        let record = image_len as u64 + 4;
        let mut pixels = Vec::with_capacity(image_len * count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let at = HEADER_LEN + i as u64 * record;
            if at + record > bytes.len() as u64 {
                return Err(fail(
                    bytes.len() as u64,
                    format!("truncated payload: record {i} of {count} needs bytes up to {}", at + record),
                ));
            }
            let start = at as usize;
            pixels.extend_from_slice(&bytes[start..start + image_len]);
            let label_at = start + image_len;
            let label = u32::from_le_bytes(bytes[label_at..label_at + 4].try_into().unwrap()) as usize;
            if label >= n_classes {
                return Err(fail(
                    label_at as u64,
                    format!("label {label} is not below {n_classes} classes"),
                ));
            }
            labels.push(label);
        }
        let end = HEADER_LEN + count as u64 * record;
        if end != bytes.len() as u64 {
            return Err(fail(end, "trailing bytes".into()));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            n_classes,
            pixels,
            labels,
            split: Split::Train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Reads and validates a dataset file, logging its class histogram.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = Dataset::from_bytes(&fs::read(path)?)?;
    log::info!(
        "{}: {} images {}x{}x{}, class histogram {:?}",
        path.display(),
        ds.len(),
        ds.height,
        ds.width,
        ds.channels,
        ds.class_histogram()
    );
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Per-pixel Gaussian noise, in 0..255 units.
    pub noise_std: f64,
    /// Half-width of the uniform phase offset, in radians.
    pub phase_jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn textures(classes: usize, per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            per_class,
            image_size: 32,
            channels: 1,
            noise_std: DEFAULT_NOISE_STD,
            phase_jitter: DEFAULT_PHASE_JITTER,
            seed,
        }
    }
}

/// Orientation, spatial frequency (cycles per image) and base phase of one
/// class's grating.
pub fn class_grating(class: usize, classes: usize) -> (f64, f64, f64) {
    let orientations = classes.div_ceil(2).max(1);
    let theta = PI * (class % orientations) as f64 / orientations as f64;
    let freq = 2.0 + 1.5 * (class / orientations) as f64;
    let phase = 2.0 * PI * class as f64 / classes as f64;
    (theta, freq, phase)
}

pub const DEFAULT_PHASE_JITTER: f64 = 0.5;
pub const DEFAULT_NOISE_STD: f64 = 80.0;

/// Oriented sinusoidal gratings, one orientation / frequency pair per class,
/// with phase jitter, random contrast and pixel noise. Images are emitted in
/// a shuffled class order.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::invalid("synthetic data needs at least two classes"));
    }
    if spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::invalid("synthetic images need a nonzero size"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite() && spec.phase_jitter >= 0.0) {
        return Err(Error::invalid("noise and phase jitter must be finite and non-negative"));
    }
    let seeds = SeedStream::new(spec.seed);
    let mut order: Vec<usize> = (0..spec.classes)
        .flat_map(|c| std::iter::repeat(c).take(spec.per_class))
        .collect();
    order.shuffle(&mut seeds.rng("order"));
    let mut rng = seeds.rng("pixels");
    let noise = Normal::new(0.0, spec.noise_std).unwrap();
    let s = spec.image_size;
    let mut pixels = Vec::with_capacity(order.len() * s * s * spec.channels);
    for &c in &order {
        let (theta, freq, base) = class_grating(c, spec.classes);
        let phase = base + rng.gen_range(-spec.phase_jitter..=spec.phase_jitter);
        let contrast = rng.gen_range(60.0..110.0);
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 * ct + y as f64 * st) / s as f64;
                let wave = (2.0 * PI * freq * u + phase).sin();
                for ch in 0..spec.channels {
                    let tint = 1.0 - 0.15 * ch as f64;
                    let v = 128.0 + tint * contrast * wave + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::new(s, s, spec.channels, spec.classes, pixels, order)
}
