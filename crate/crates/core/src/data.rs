//! Synthetic paired data with a shared latent, and label-noise corruptions.
//!
//! Each example draws a class `c` (round-robin) and a latent
//! `z = μ_c + spread·ξ`. The image is `A·z + σ·ε` for a fixed random `A`. The
//! text is a bag of tokens: some name the class (from a per-class table of
//! [`CLASS_TOKENS`] ids), the rest quantize a randomly chosen latent coordinate
//! into one of `bins` levels. Matched pairs therefore share both class and
//! instance information.
//!
//! Randomness comes from ChaCha8 streams seeded from the spec, so a seed
//! reproduces the same bytes on every platform.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Token ids reserved per class.
pub const CLASS_TOKENS: usize = 4;
/// Probability that a token position carries a class token.
pub const CLASS_TOKEN_P: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairSpec {
    pub latent_dim: usize,
    pub image_dim: usize,
    pub vocab: usize,
    pub text_len: usize,
    pub n_classes: usize,
    pub n_examples: usize,
    /// Standard deviation of per-instance variation around the class mean.
    pub latent_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticPairSpec {
    fn latent_bins(&self) -> usize {
        self.vocab.saturating_sub(self.n_classes * CLASS_TOKENS) / self.latent_dim.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.latent_dim", self.latent_dim),
            ("data.image_dim", self.image_dim),
            ("data.text_len", self.text_len),
            ("data.n_classes", self.n_classes),
            ("data.n_examples", self.n_examples),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.latent_bins() < 2 {
            return Err(Error::config(
                "data.vocab",
                format!(
                    "{} tokens leave fewer than 2 quantization bins per latent dimension",
                    self.vocab
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.latent_spread >= 0.0) {
            return Err(Error::config("data.noise_sigma", "noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Images, token sequences and class ids, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub images: Matrix,
    pub tokens: Vec<Vec<u32>>,
    pub classes: Vec<u32>,
    /// Clean latents, when known (generated data only).
    pub latents: Option<Matrix>,
    pub vocab: usize,
    pub text_len: usize,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PairDataset {
        let pick = |m: &Matrix| {
            let rows: Vec<Vec<f64>> = indices.iter().map(|&i| m.row(i).to_vec()).collect();
            Matrix::from_rows(&rows).expect("non-empty selection")
        };
        PairDataset {
            images: pick(&self.images),
            tokens: indices.iter().map(|&i| self.tokens[i].clone()).collect(),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            latents: self.latents.as_ref().map(pick),
            vocab: self.vocab,
            text_len: self.text_len,
        }
    }

    /// Disjoint `(first n, rest)` split.
    pub fn split(&self, n: usize) -> Result<(PairDataset, PairDataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::config(
                "data.split",
                format!("cannot split {} examples at {n}", self.len()),
            ));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head), self.select(&tail)))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate(spec: &SyntheticPairSpec) -> Result<PairDataset> {
    spec.validate()?;
    let mut fixed = stream(spec.seed, 0);
    let mut draws = stream(spec.seed, 1);

    let prototypes = Matrix::from_fn(spec.n_classes, spec.latent_dim, |_, _| normal(&mut fixed));
    let mix_scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let mixing = Matrix::from_fn(spec.latent_dim, spec.image_dim, |_, _| normal(&mut fixed) * mix_scale);
    let bins = spec.latent_bins();
    let latent_base = spec.n_classes * CLASS_TOKENS;
    // Latent coordinates are roughly N(0, 1 + spread²); bins cover ±3 std.
    let half_range = 3.0 * (1.0 + spec.latent_spread * spec.latent_spread).sqrt();

    let n = spec.n_examples;
    let mut latents = Matrix::zeros(n, spec.latent_dim);
    let mut tokens = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.n_classes;
        classes.push(c as u32);
        for j in 0..spec.latent_dim {
            latents[(i, j)] = prototypes[(c, j)] + spec.latent_spread * normal(&mut draws);
        }
        let seq = (0..spec.text_len)
            .map(|_| {
                if draws.random_bool(CLASS_TOKEN_P) {
                    (c * CLASS_TOKENS + draws.random_range(0..CLASS_TOKENS)) as u32
                } else {
                    let j = draws.random_range(0..spec.latent_dim);
                    let unit = (latents[(i, j)] + half_range) / (2.0 * half_range);
                    let bin = ((unit * bins as f64).floor().max(0.0) as usize).min(bins - 1);
                    (latent_base + j * bins + bin) as u32
                }
            })
            .collect();
        tokens.push(seq);
    }
    let mut images = latents.matmul(&mixing)?;
    if spec.noise_sigma > 0.0 {
        for v in images.as_mut_slice() {
            *v += spec.noise_sigma * normal(&mut draws);
        }
    }
    Ok(PairDataset {
        images,
        tokens,
        classes,
        latents: Some(latents),
        vocab: spec.vocab,
        text_len: spec.text_len,
    })
}

/// Probabilities for the three corruption channels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Replace an image with uniform noise over the batch's value range.
    pub image_noise_p: f64,
    /// Replace a text with random tokens of random length in `1..=text_len`.
    pub text_scramble_p: f64,
    /// Fraction of the batch whose texts are shuffled among themselves.
    pub misalign_p: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("corruption.image_noise_p", self.image_noise_p),
            ("corruption.text_scramble_p", self.text_scramble_p),
            ("corruption.misalign_p", self.misalign_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("{p} is not a probability")));
            }
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.image_noise_p == 0.0 && self.text_scramble_p == 0.0 && self.misalign_p == 0.0
    }
}

/// How many items each channel touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub images_replaced: usize,
    pub texts_replaced: usize,
    pub pairs_shuffled: usize,
}

/// Applies the corruption channels independently, each from its own stream.
/// Untouched items come back bit-identical.
pub fn corrupt(batch: &PairDataset, spec: &CorruptionSpec) -> Result<(PairDataset, CorruptionReport)> {
    spec.validate()?;
    let mut out = batch.clone();
    let mut report = CorruptionReport::default();
    let n = batch.len();

    if spec.image_noise_p > 0.0 {
        let mut rng = stream(spec.seed, 1);
        let values = batch.images.as_slice();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..n {
            if rng.random_bool(spec.image_noise_p) {
                for v in out.images.row_mut(i) {
                    *v = if hi > lo { rng.random_range(lo..hi) } else { lo };
                }
                report.images_replaced += 1;
            }
        }
    }

    if spec.text_scramble_p > 0.0 {
        let mut rng = stream(spec.seed, 2);
        for seq in out.tokens.iter_mut() {
            if rng.random_bool(spec.text_scramble_p) {
                let len = rng.random_range(1..=batch.text_len.max(1));
                *seq = (0..len).map(|_| rng.random_range(0..batch.vocab as u32)).collect();
                report.texts_replaced += 1;
            }
        }
    }

    if spec.misalign_p > 0.0 {
        let mut rng = stream(spec.seed, 3);
        let k = (spec.misalign_p * n as f64).round() as usize;
        let chosen = sample(&mut rng, n, k.min(n)).into_vec();
        let mut order = chosen.clone();
        order.shuffle(&mut rng);
        let texts: Vec<Vec<u32>> = order.iter().map(|&i| out.tokens[i].clone()).collect();
        for (&slot, text) in chosen.iter().zip(texts) {
            out.tokens[slot] = text;
        }
        report.pairs_shuffled = k;
    }
    Ok((out, report))
}

const MAGIC: &[u8; 4] = b"SGDS";
const FORMAT_VERSION: u32 = 1;
const PAD: u32 = u32::MAX;

/// Writes the columnar binary format: a header (magic, version, n, image dim,
/// max text length, vocab; little-endian), then images as `f64`, token ids as
/// `u32` padded to `text_len` with `u32::MAX`, then class ids as `u32`.
pub fn write_dataset<W: Write>(ds: &PairDataset, mut w: W) -> std::io::Result<()> {
    let text_len = ds.tokens.iter().map(Vec::len).max().unwrap_or(0).max(ds.text_len);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [ds.len(), ds.images.cols(), text_len, ds.vocab] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in ds.images.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    for seq in &ds.tokens {
        for k in 0..text_len {
            w.write_all(&seq.get(k).copied().unwrap_or(PAD).to_le_bytes())?;
        }
    }
    for c in &ds.classes {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated dataset: {e}")))?;
    Ok(buf)
}

/// Reads a dataset written by [`write_dataset`]. Latents are not stored.
pub fn read_dataset<R: Read>(mut r: R) -> Result<PairDataset> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut header = [0usize; 4];
    for h in &mut header {
        *h = u64::from_le_bytes(read_array(&mut r)?) as usize;
    }
    let [n, image_dim, text_len, vocab] = header;
    let mut images = Vec::with_capacity(n * image_dim);
    for _ in 0..n * image_dim {
        images.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        let mut seq = Vec::with_capacity(text_len);
        for _ in 0..text_len {
            let id = u32::from_le_bytes(read_array(&mut r)?);
            if id != PAD {
                seq.push(id);
            }
        }
        tokens.push(seq);
    }
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        classes.push(u32::from_le_bytes(read_array(&mut r)?));
    }
    Ok(PairDataset {
        images: Matrix::from_vec(n, image_dim, images)?,
        tokens,
        classes,
        latents: None,
        vocab,
        text_len,
    })
}
