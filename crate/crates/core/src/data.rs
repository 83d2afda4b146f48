//! Synthetic class-conditional latents, the GLT1 latent file format and the
//! differentiable flip/translate/scale augmentation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

pub const GLT1_MAGIC: &[u8; 4] = b"GLT1";
pub const GLT1_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected GLT1, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported GLT1 version {0}")]
    Version(u32),
    #[error("truncated file: header needs {expected} bytes, found {got}")]
    TruncatedHeader { expected: usize, got: usize },
    #[error("truncated body: expected {expected} bytes, found {got}")]
    TruncatedBody { expected: usize, got: usize },
    #[error("trailing bytes: expected {expected} bytes, found {got}")]
    TrailingBytes { expected: usize, got: usize },
    #[error("label {label} at index {index} is outside [0, {num_classes})")]
    Label { index: usize, label: u32, num_classes: u32 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// `count` latents laid out `[count, channels, hw, hw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    pub samples: Vec<f32>,
    pub labels: Vec<u32>,
    pub channels: usize,
    pub hw: usize,
    pub num_classes: usize,
    pub stats: Vec<ChannelStats>,
    pub source: Source,
}

impl LatentDataset {
    pub fn from_parts(samples: Vec<f32>, labels: Vec<u32>, channels: usize, hw: usize, num_classes: usize, source: Source) -> Result<Self, DataError> {
        let mut ds = Self { samples, labels, channels, hw, num_classes, stats: Vec::new(), source };
        ds.validate()?;
        ds.stats = ds.channel_stats();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.hw * self.hw
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.samples[i * n..(i + 1) * n]
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.channels == 0 || self.hw == 0 || self.num_classes == 0 {
            return Err(DataError::Invalid("channels, size and class count must be positive".into()));
        }
        if self.samples.len() != self.labels.len() * self.sample_len() {
            return Err(DataError::Invalid(format!("{} values for {} samples of {}", self.samples.len(), self.labels.len(), self.sample_len())));
        }
        if let Some((index, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l as usize >= self.num_classes) {
            return Err(DataError::Label { index, label, num_classes: self.num_classes as u32 });
        }
        Ok(())
    }

    /// Per-channel mean and standard deviation over every sample.
    pub fn channel_stats(&self) -> Vec<ChannelStats> {
        let plane = self.hw * self.hw;
        (0..self.channels)
            .map(|c| {
                let vals = self.samples.chunks(self.sample_len()).flat_map(|s| &s[c * plane..(c + 1) * plane]);
                let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
                for &v in vals {
                    n += 1;
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
                let mean = sum / n.max(1) as f64;
                ChannelStats { mean, std: (sq / n.max(1) as f64 - mean * mean).max(0.0).sqrt() }
            })
            .collect()
    }

    /// Shifts and scales every channel to zero mean and unit std.
    pub fn normalize(&mut self) {
        let stats = self.channel_stats();
        let plane = self.hw * self.hw;
        let n = self.sample_len();
        for s in self.samples.chunks_mut(n) {
            for (c, st) in stats.iter().enumerate() {
                let inv = if st.std > 0.0 { 1.0 / st.std } else { 1.0 };
                for v in &mut s[c * plane..(c + 1) * plane] {
                    *v = ((*v as f64 - st.mean) * inv) as f32;
                }
            }
        }
        self.stats = self.channel_stats();
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut samples = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            samples.extend_from_slice(self.sample(i));
        }
        let mut out = Self {
            samples,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            stats: Vec::new(),
            ..self.clone_meta()
        };
        out.stats = out.channel_stats();
        out
    }

    fn clone_meta(&self) -> Self {
        Self {
            samples: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            hw: self.hw,
            num_classes: self.num_classes,
            stats: Vec::new(),
            source: self.source,
        }
    }

    /// Deterministic `(train, held_out)` split with `held_out` samples held.
    pub fn split(&self, held_out: usize, seed: u64) -> (Self, Self) {
        let held_out = held_out.min(self.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = index::sample(&mut rng, self.len(), self.len()).into_vec();
        let train = perm.split_off(held_out);
        (self.subset(&train), self.subset(&perm))
    }

    /// Uniform batch with replacement.
    pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> (Vec<T>, Vec<usize>) {
        let mut x = Vec::with_capacity(batch * self.sample_len());
        let mut y = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.random_range(0..self.len());
            x.extend(self.sample(i).iter().map(|&v| T::lit(v as f64)));
            y.push(self.labels[i] as usize);
        }
        (x, y)
    }
}

/// Class-conditional oriented low-frequency fields plus per-sample jitter,
/// normalized per channel.
pub fn gen_synthetic(num_classes: usize, per_class: usize, channels: usize, hw: usize, seed: u64) -> Result<LatentDataset, DataError> {
    if per_class == 0 || num_classes == 0 || channels == 0 || hw == 0 {
        return Err(DataError::Invalid("class count, per-class count, channels and size must be positive".into()));
    }
    const WAVES: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (amplitude, fx, fy, phase) per class, channel and wave.
    let mut waves = Vec::with_capacity(num_classes * channels * WAVES);
    for _ in 0..num_classes * channels * WAVES {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let freq: f64 = rng.random_range(0.5..2.0) * std::f64::consts::TAU / hw as f64;
        waves.push((rng.random_range(0.5..1.0), freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU)));
    }
    let plane = hw * hw;
    let mut samples = Vec::with_capacity(num_classes * per_class * channels * plane);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for i in 0..num_classes * per_class {
        let class = i % num_classes;
        let n: f64 = StandardNormal.sample(&mut rng);
        let gain = 1.0 + 0.15 * n;
        for c in 0..channels {
            let w = &waves[(class * channels + c) * WAVES..(class * channels + c + 1) * WAVES];
            let jitter: Vec<f64> = (0..WAVES)
                .map(|_| {
                    let j: f64 = StandardNormal.sample(&mut rng);
                    0.4 * j
                })
                .collect();
            for y in 0..hw {
                for x in 0..hw {
                    let mut v = 0.0;
                    for (k, &(a, fx, fy, ph)) in w.iter().enumerate() {
                        v += a * (fx * x as f64 + fy * y as f64 + ph + jitter[k]).cos();
                    }
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    samples.push((gain * v + 0.3 * noise) as f32);
                }
            }
        }
        labels.push(class as u32);
    }
    let mut ds = LatentDataset::from_parts(samples, labels, channels, hw, num_classes, Source::Synthetic)?;
    ds.normalize();
    Ok(ds)
}

pub fn encode_latents(ds: &LatentDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (ds.samples.len() + ds.labels.len()));
    out.extend_from_slice(GLT1_MAGIC);
    for v in [GLT1_VERSION, ds.len() as u32, ds.channels as u32, ds.hw as u32, ds.hw as u32, ds.num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &ds.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Glt1Header {
    pub version: u32,
    pub count: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub num_classes: u32,
}

impl Glt1Header {
    pub fn body_len(&self) -> usize {
        let count = self.count as usize;
        4 * count * (self.channels as usize * self.height as usize * self.width as usize) + 4 * count
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<Glt1Header, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::TruncatedHeader { expected: HEADER_LEN, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != GLT1_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::TruncatedHeader { expected: HEADER_LEN, got: bytes.len() });
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("length checked"));
    let h = Glt1Header {
        version: u(0),
        count: u(1),
        channels: u(2),
        height: u(3),
        width: u(4),
        num_classes: u(5),
    };
    if h.version != GLT1_VERSION {
        return Err(DataError::Version(h.version));
    }
    Ok(h)
}

pub fn decode_latents(bytes: &[u8]) -> Result<LatentDataset, DataError> {
    let h = decode_header(bytes)?;
    let expected = HEADER_LEN + h.body_len();
    if bytes.len() < expected {
        return Err(DataError::TruncatedBody { expected, got: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes { expected, got: bytes.len() });
    }
    if h.height != h.width {
        return Err(DataError::Invalid(format!("non-square latents {}x{}", h.height, h.width)));
    }
    let n = h.count as usize * (h.channels * h.height * h.width) as usize;
    let body = &bytes[HEADER_LEN..];
    let word = |i: usize| -> [u8; 4] { body[4 * i..4 * i + 4].try_into().expect("length checked") };
    let samples = (0..n).map(|i| f32::from_le_bytes(word(i))).collect();
    let labels = (0..h.count as usize).map(|i| u32::from_le_bytes(word(n + i))).collect();
    LatentDataset::from_parts(samples, labels, h.channels as usize, h.height as usize, h.num_classes as usize, Source::File)
}

pub fn save_latents(ds: &LatentDataset, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_latents(ds)).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn load_latents(path: &Path) -> Result<LatentDataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    decode_latents(&bytes)
}

/// Augmentation draw for one sample; shared by every level of its stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
    pub scale: Vec<f64>,
}

impl AugParams {
    pub fn identity(channels: usize) -> Self {
        Self { flip: false, dx: 0, dy: 0, scale: vec![1.0; channels] }
    }
}

pub fn max_shift(hw: usize) -> i32 {
    (hw / 8) as i32
}

pub fn draw_aug<R: Rng + ?Sized>(rng: &mut R, batch: usize, channels: usize, hw: usize) -> Vec<AugParams> {
    let s = max_shift(hw);
    (0..batch)
        .map(|_| AugParams {
            flip: rng.random_bool(0.5),
            dx: rng.random_range(-s..=s),
            dy: rng.random_range(-s..=s),
            scale: (0..channels).map(|_| rng.random_range(0.8..=1.2)).collect(),
        })
        .collect()
}

/// Source index per output pixel (`-1` for padding) and per-(sample,
/// channel) scales.
pub fn aug_plan<T: Scalar>(params: &[AugParams], channels: usize, hw: usize) -> (Vec<i32>, Vec<T>) {
    let plane = hw * hw;
    let mut idx = Vec::with_capacity(params.len() * channels * plane);
    let mut scales = Vec::with_capacity(params.len() * channels);
    for (b, p) in params.iter().enumerate() {
        assert_eq!(p.scale.len(), channels, "augmentation scale count");
        for c in 0..channels {
            scales.push(T::lit(p.scale[c]));
            let base = (b * channels + c) * plane;
            for y in 0..hw as i32 {
                for x in 0..hw as i32 {
                    let (sy, sx) = (y - p.dy, x - p.dx);
                    let inside = (0..hw as i32).contains(&sy) && (0..hw as i32).contains(&sx);
                    if inside {
                        let sx = if p.flip { hw as i32 - 1 - sx } else { sx };
                        idx.push(base as i32 + sy * hw as i32 + sx);
                    } else {
                        idx.push(-1);
                    }
                }
            }
        }
    }
    (idx, scales)
}

/// Off-tape augmentation of `[batch, channels, hw, hw]`.
pub fn diff_augment<T: Scalar>(x: &[T], params: &[AugParams], channels: usize, hw: usize) -> Vec<T> {
    let (idx, scales) = aug_plan::<T>(params, channels, hw);
    let plane = hw * hw;
    idx.iter()
        .enumerate()
        .map(|(i, &j)| if j < 0 { T::zero() } else { x[j as usize] * scales[i / plane] })
        .collect()
}

/// Tape augmentation; differentiable with respect to `x`.
pub fn diff_augment_tape<T: Scalar>(g: &mut Graph<T>, x: Var, params: &[AugParams], channels: usize, hw: usize) -> Var {
    let (idx, scales) = aug_plan::<T>(params, channels, hw);
    let rows = params.len() * channels;
    let moved = g.gather(x, Arc::from(idx), &[params.len(), channels, hw, hw]);
    let s = g.constant(scales, &[rows, 1]);
    g.mul_bcast(moved, s, hw * hw, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glt1_header_and_errors() {
        let ds = gen_synthetic(5, 2, 4, 8, 1).unwrap();
        let bytes = encode_latents(&ds);
        let h = decode_header(&bytes).unwrap();
        assert_eq!((h.count, h.channels, h.height, h.width, h.num_classes), (10, 4, 8, 8, 5));
        assert_eq!(bytes.len(), HEADER_LEN + h.body_len());
        let back = decode_latents(&bytes).unwrap();
        assert_eq!(back.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), ds.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.labels, ds.labels);
        assert!(matches!(decode_latents(&bytes[..bytes.len() - 1]), Err(DataError::TruncatedBody { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_latents(&bad), Err(DataError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_latents(&bad), Err(DataError::Version(2))));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode_latents(&bad), Err(DataError::TrailingBytes { .. })));
        let mut bad = bytes;
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_latents(&bad), Err(DataError::Label { label: 9, .. })));
    }

    #[test]
    fn synthetic_is_normalized_and_deterministic() {
        let a = gen_synthetic(10, 20, 4, 8, 3).unwrap();
        let b = gen_synthetic(10, 20, 4, 8, 3).unwrap();
        assert_eq!(encode_latents(&a), encode_latents(&b));
        for s in &a.stats {
            assert!(s.mean.abs() < 1e-3 && (s.std - 1.0).abs() < 1e-3, "{s:?}");
        }
        assert!(gen_synthetic(10, 0, 4, 8, 3).is_err());
    }

    #[test]
    fn augment_identity_and_flip_involution() {
        let x: Vec<f64> = (0..2 * 3 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let id = vec![AugParams::identity(3); 2];
        assert_eq!(diff_augment(&x, &id, 3, 4), x);
        let flip = vec![AugParams { flip: true, ..AugParams::identity(3) }; 2];
        let once = diff_augment(&x, &flip, 3, 4);
        assert_ne!(once, x);
        assert_eq!(diff_augment(&once, &flip, 3, 4), x);
    }
}
