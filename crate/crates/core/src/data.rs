//! Datasets (CIFAR-10 binary batches, synthetic toy sets) and PPM image output.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::arch::{ImageDims, CONTEXT_TOKENS};
use crate::error::{Result, StoicError};
use crate::numerics::{Element, Tensor};

pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_DIMS: ImageDims = ImageDims {
    channels: 3,
    height: 32,
    width: 32,
};

/// Images in [−1, 1], optionally paired index-for-index with `[N, 77, token_dim]` contexts.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor<f32>,
    pub contexts: Option<Tensor<f32>>,
    /// Generating mode per image for synthetic sets.
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor<f32>,
        contexts: Option<Tensor<f32>>,
    ) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] == 0 {
            return Err(StoicError::Dataset(format!(
                "images must be a non-empty [N, C, H, W] tensor, got {:?}",
                images.shape()
            )));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(StoicError::Dataset(
                "pixel values must lie in [-1, 1]".into(),
            ));
        }
        if let Some(ctx) = &contexts {
            if ctx.rank() != 3 || ctx.shape()[0] != images.shape()[0] {
                return Err(StoicError::Dataset(format!(
                    "contexts {:?} do not align with images {:?}",
                    ctx.shape(),
                    images.shape()
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            images,
            contexts,
            labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> ImageDims {
        let s = self.images.shape();
        ImageDims::new(s[1], s[2], s[3])
    }

    pub fn context_dim(&self) -> Option<usize> {
        self.contexts.as_ref().map(|c| c.shape()[2])
    }

    /// Gathers the given rows into a batch.
    pub fn batch<E: Element>(&self, indices: &[usize]) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
        let gather = |t: &Tensor<f32>| -> Result<Tensor<E>> {
            let per = t.numel() / t.shape()[0];
            let mut data = Vec::with_capacity(indices.len() * per);
            for &i in indices {
                if i >= t.shape()[0] {
                    return Err(StoicError::Dataset(format!(
                        "index {i} out of range for {} rows",
                        t.shape()[0]
                    )));
                }
                data.extend(
                    t.data()[i * per..(i + 1) * per]
                        .iter()
                        .map(|&v| E::from_f64(v as f64)),
                );
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::from_vec(data, &shape)
        };
        Ok((
            gather(&self.images)?,
            self.contexts.as_ref().map(gather).transpose()?,
        ))
    }
}

fn byte_to_unit(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// Parses a CIFAR-10 binary batch: 3073-byte records of one label byte then 3·1024
/// channel-planar pixels. Labels are dropped.
pub fn load_cifar10_batch(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| StoicError::io(path, e))?;
    parse_cifar10(&bytes).map(|mut d| {
        d.name = path.display().to_string();
        d
    })
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(StoicError::Dataset("empty CIFAR-10 batch".into()));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(StoicError::Dataset(format!(
            "CIFAR-10 batch length {} is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let data = bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .flat_map(|rec| rec[1..].iter().map(|&b| byte_to_unit(b)))
        .collect();
    let images = Tensor::from_vec(
        data,
        &[n, CIFAR_DIMS.channels, CIFAR_DIMS.height, CIFAR_DIMS.width],
    )?;
    Dataset::new("cifar10", images, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    TwoBlobs,
    Checker,
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyKind::TwoBlobs => "two_blobs",
            ToyKind::Checker => "checker",
        })
    }
}

impl FromStr for ToyKind {
    type Err = StoicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "two_blobs" => Ok(ToyKind::TwoBlobs),
            "checker" => Ok(ToyKind::Checker),
            other => Err(StoicError::Config(format!(
                "unknown toy dataset `{other}` (expected two_blobs or checker)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyOptions {
    pub noise: f64,
    /// Attach mode-identifying contexts of this token width.
    pub context_dim: Option<usize>,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            noise: 0.1,
            context_dim: None,
        }
    }
}

/// Clean pixel value of `mode` at `(y, x)`.
pub fn toy_pixel(kind: ToyKind, mode: u8, y: usize, x: usize) -> f32 {
    let positive = match kind {
        ToyKind::TwoBlobs => mode == 0,
        ToyKind::Checker => ((y / 2 + x / 2) % 2) as u8 == mode,
    };
    if positive {
        0.5
    } else {
        -0.5
    }
}

/// 77 one-hot rows identifying `mode`; token `k` is hot at `(k + mode·⌈d/2⌉) mod d`.
pub fn toy_context(mode: u8, token_dim: usize) -> Vec<f32> {
    let shift = mode as usize * token_dim.div_ceil(2);
    let mut out = vec![0.0; CONTEXT_TOKENS * token_dim];
    for k in 0..CONTEXT_TOKENS {
        out[k * token_dim + (k + shift) % token_dim] = 1.0;
    }
    out
}

pub fn gen_toy_dataset(kind: ToyKind, n: usize, dims: ImageDims, seed: u64) -> Result<Dataset> {
    gen_toy_dataset_with(kind, n, dims, seed, ToyOptions::default())
}

/// Two-mode synthetic images: `two_blobs` are constant ±0.5 planes, `checker` are 2×2-block
/// checkerboards in two phases. Mode by fair coin, Gaussian pixel noise, clipped to [−1, 1].
pub fn gen_toy_dataset_with(
    kind: ToyKind,
    n: usize,
    dims: ImageDims,
    seed: u64,
    opts: ToyOptions,
) -> Result<Dataset> {
    if n == 0 {
        return Err(StoicError::Dataset(
            "toy dataset needs at least one image".into(),
        ));
    }
    if opts.context_dim == Some(1) || opts.context_dim == Some(0) {
        return Err(StoicError::Dataset(
            "context token width must be at least 2 to separate modes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * dims.numel());
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mode = u8::from(rng.random_bool(0.5));
        labels.push(mode);
        for _ in 0..dims.channels {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = toy_pixel(kind, mode, y, x) as f64 + opts.noise * z;
                    images.push(v.clamp(-1.0, 1.0) as f32);
                }
            }
        }
    }
    let images = Tensor::from_vec(images, &[n, dims.channels, dims.height, dims.width])?;
    let contexts = match opts.context_dim {
        Some(d) => {
            let data = labels.iter().flat_map(|&m| toy_context(m, d)).collect();
            Some(Tensor::from_vec(data, &[n, CONTEXT_TOKENS, d])?)
        }
        None => None,
    };
    let mut ds = Dataset::new(kind.to_string(), images, contexts)?;
    ds.labels = Some(labels);
    Ok(ds)
}

/// Pixel byte `round((v + 1)/2 · 255)` clamped to [0, 255].
pub fn pixel_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6) bytes for a `[C, H, W]` image with C ∈ {1, 3}; one channel is replicated.
pub fn encode_ppm<E: Element>(img: &Tensor<E>) -> Result<Vec<u8>> {
    if img.rank() != 3 || !(img.shape()[0] == 1 || img.shape()[0] == 3) {
        return Err(StoicError::shape(
            "write_image",
            format!("expected [1|3, H, W], got {:?}", img.shape()),
        ));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    for p in 0..plane {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            out.push(pixel_byte(d[src * plane + p].as_f64()));
        }
    }
    Ok(out)
}

pub fn write_image<E: Element>(img: &Tensor<E>, path: &Path) -> Result<()> {
    let bytes = encode_ppm(img)?;
    fs::write(path, bytes).map_err(|e| StoicError::io(path, e))
}

/// `(width, height, maxval)` and the payload offset of a P6 file.
pub fn parse_ppm_header(bytes: &[u8]) -> Result<((usize, usize, usize), usize)> {
    let bad = || StoicError::Dataset("malformed PPM header".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P6" || pos >= bytes.len() {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    Ok(((num(fields[1])?, num(fields[2])?, num(fields[3])?), pos + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_layout_and_pixel_map() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[1] = 255;
        bytes[CIFAR_RECORD_BYTES + 1 + 1024] = 0;
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.images.data()[0], 1.0);
        assert_eq!(ds.images.data()[1], -1.0);
        assert!(parse_cifar10(&vec![0u8; 3074]).is_err());
        assert!(parse_cifar10(&[]).is_err());
        assert!(load_cifar10_batch(Path::new("/nonexistent/cifar.bin")).is_err());
    }

    #[test]
    fn toy_sets_are_deterministic_and_clean_without_noise() {
        let dims = ImageDims::new(1, 4, 4);
        let a = gen_toy_dataset(ToyKind::TwoBlobs, 20, dims, 3).unwrap();
        let b = gen_toy_dataset(ToyKind::TwoBlobs, 20, dims, 3).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let clean = gen_toy_dataset_with(
            ToyKind::Checker,
            10,
            dims,
            1,
            ToyOptions {
                noise: 0.0,
                context_dim: None,
            },
        )
        .unwrap();
        assert!(clean.images.data().iter().all(|&v| v == 0.5 || v == -0.5));
    }

    #[test]
    fn contexts_separate_modes() {
        let opts = ToyOptions {
            noise: 0.1,
            context_dim: Some(4),
        };
        let ds =
            gen_toy_dataset_with(ToyKind::TwoBlobs, 16, ImageDims::new(1, 4, 4), 0, opts).unwrap();
        let ctx = ds.contexts.as_ref().unwrap();
        assert_eq!(ctx.shape(), &[16, 77, 4]);
        assert_ne!(toy_context(0, 4), toy_context(1, 4));
        let (imgs, c) = ds.batch::<f64>(&[3, 0]).unwrap();
        assert_eq!(imgs.shape(), &[2, 1, 4, 4]);
        assert_eq!(c.unwrap().shape(), &[2, 77, 4]);
    }

    #[test]
    fn ppm_bytes() {
        let white = Tensor::from_vec(vec![1.0f32], &[1, 1, 1]).unwrap();
        assert_eq!(encode_ppm(&white).unwrap(), b"P6\n1 1\n255\n\xff\xff\xff");
        let black = Tensor::from_vec(vec![-1.0f32, -1.0, -1.0], &[3, 1, 1]).unwrap();
        assert!(encode_ppm(&black).unwrap().ends_with(&[0, 0, 0]));
        let img = Tensor::from_vec(vec![0.0f32; 3 * 2 * 5], &[3, 2, 5]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let ((w, h, max), off) = parse_ppm_header(&bytes).unwrap();
        assert_eq!((w, h, max), (5, 2, 255));
        assert_eq!(bytes.len() - off, 30);
        assert!(encode_ppm(&Tensor::<f32>::zeros(&[2, 1, 1])).is_err());
    }
}
