use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::captioner::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Variance of the summed projection input per view feature, before `tanh`.
const VIEW_GAIN: f64 = 0.5;
const VIEW_BIAS_STD: f64 = 0.1;

pub type ViewTriple<E> = [Tensor<E>; 3];

/// Generator settings. Everything derived from a dataset is a function of
/// these fields and the sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub latent_dim: usize,
    pub time: usize,
    pub dim: usize,
    pub num_symbols: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub sigma: f64,
    /// Three different projections, each blind to a third of the latent
    /// dimensions. When false all views share one full projection.
    pub distinct_views: bool,
}

impl LatentSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            latent_dim: 16,
            time: 8,
            dim: 64,
            num_symbols: 16,
            vocab_size: 64,
            seed,
            sigma: 0.05,
            distinct_views: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.time == 0 || self.dim == 0 {
            return Err(Error::Invalid(format!("latent spec dims must be positive: {self:?}")));
        }
        if self.num_symbols < 2 || self.num_symbols + 3 > self.vocab_size {
            return Err(Error::Invalid(format!(
                "num_symbols {} must be in [2, vocab_size - 3 = {}]",
                self.num_symbols,
                self.vocab_size.saturating_sub(3)
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Invalid(format!("noise sigma {} must be finite and >= 0", self.sigma)));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::synthetic(self.vocab_size)
    }

    /// Caption length including start and end tokens.
    pub fn caption_len(&self) -> usize {
        self.time + 2
    }
}

/// The fixed random maps shared by every sample of a dataset, row-major.
#[derive(Clone, Debug)]
pub struct Projections {
    /// `(latent_dim, num_symbols)`.
    pub codebook: Vec<f64>,
    /// `(latent_dim, D)`.
    pub text: Vec<f64>,
    /// `(latent_dim, D)` each.
    pub views: [Vec<f64>; 3],
    /// `(D)` each.
    pub biases: [Vec<f64>; 3],
}

impl Projections {
    pub fn new(spec: &LatentSpec) -> Result<Self> {
        spec.validate()?;
        let (l, d) = (spec.latent_dim, spec.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    std * v
                })
                .collect()
        };
        let codebook = normal(l * spec.num_symbols, 1.0);
        let text = normal(l * d, (1.0 / l as f64).sqrt());
        let mut views: [Vec<f64>; 3] = Default::default();
        let mut biases: [Vec<f64>; 3] = Default::default();
        for k in 0..3 {
            views[k] = normal(l * d, (VIEW_GAIN / l as f64).sqrt());
            biases[k] = normal(d, VIEW_BIAS_STD);
        }
        if spec.distinct_views {
            for (k, p) in views.iter_mut().enumerate() {
                for row in (0..l).filter(|r| r % 3 == k) {
                    p[row * d..(row + 1) * d].fill(0.0);
                }
            }
        } else {
            views = [views[0].clone(), views[0].clone(), views[0].clone()];
            biases = [biases[0].clone(), biases[0].clone(), biases[0].clone()];
        }
        Ok(Self {
            codebook,
            text,
            views,
            biases,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub sample_id: u64,
    /// Three `(T, D)` views.
    pub views: ViewTriple<f32>,
    /// `(T, D)`.
    pub text_feat: Tensor<f32>,
    /// `(T, latent_dim)`, the stored latent every other field derives from.
    pub latent: Tensor<f32>,
    /// Start token, one symbol token per time step, end token.
    pub caption: Vec<usize>,
}

/// Caption of a latent `(T, latent_dim)`: per step the symbol whose codebook
/// column has the largest inner product (first on ties), as token
/// `3 + symbol`, between the start and end tokens.
pub fn caption_from_latent(spec: &LatentSpec, proj: &Projections, latent: &[f32]) -> Result<Vec<usize>> {
    let (l, s) = (spec.latent_dim, spec.num_symbols);
    if latent.len() != spec.time * l {
        return Err(Error::Invalid(format!("latent of {} values for ({}, {l})", latent.len(), spec.time)));
    }
    let vocab = spec.vocab()?;
    let mut caption = Vec::with_capacity(spec.caption_len());
    caption.push(vocab.bos);
    for z in latent.chunks(l) {
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..s {
            let score: f64 = z.iter().enumerate().map(|(r, &v)| f64::from(v) * proj.codebook[r * s + j]).sum();
            if score > best.1 {
                best = (j, score);
            }
        }
        caption.push(3 + best.0);
    }
    caption.push(vocab.eos);
    Ok(caption)
}

fn project(z: &[f64], t: usize, l: usize, p: &[f64], d: usize, j: usize) -> f64 {
    (0..l).map(|r| z[t * l + r] * p[r * d + j]).sum()
}

/// One sample. Its randomness comes from the dataset seed on stream
/// `sample_id + 1`, so samples can be regenerated individually.
pub fn generate_sample(spec: &LatentSpec, proj: &Projections, sample_id: u64) -> Result<SamplePair> {
    let (t, l, d) = (spec.time, spec.latent_dim, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(sample_id.wrapping_add(1));
    // rounded first so the stored latent reproduces everything exactly
    let latent: Vec<f32> = (0..t * l)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    let z: Vec<f64> = latent.iter().map(|&v| f64::from(v)).collect();
    let caption = caption_from_latent(spec, proj, &latent)?;
    let mut views: Vec<Tensor<f32>> = Vec::with_capacity(3);
    for k in 0..3 {
        let mut v = Vec::with_capacity(t * d);
        for ti in 0..t {
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let pre = proj.biases[k][j] + project(&z, ti, l, &proj.views[k], d, j);
                v.push((pre.tanh() + spec.sigma * noise) as f32);
            }
        }
        views.push(Tensor::new(&[t, d], v)?);
    }
    let text: Vec<f32> = (0..t * d)
        .map(|i| project(&z, i / d, l, &proj.text, d, i % d) as f32)
        .collect();
    let views: ViewTriple<f32> = views
        .try_into()
        .map_err(|_| Error::Invalid("expected three views".into()))?;
    Ok(SamplePair {
        sample_id,
        views,
        text_feat: Tensor::new(&[t, d], text)?,
        latent: Tensor::new(&[t, l], latent)?,
        caption,
    })
}

/// Samples `start_id .. start_id + count`; disjoint id ranges give
/// disjoint splits of the same generator.
pub fn generate_dataset(spec: &LatentSpec, count: usize, start_id: u64) -> Result<super::Dataset> {
    if count == 0 {
        return Err(Error::Invalid("dataset count must be at least 1".into()));
    }
    let proj = Projections::new(spec)?;
    let samples = (0..count as u64)
        .map(|i| generate_sample(spec, &proj, start_id + i))
        .collect::<Result<Vec<_>>>()?;
    super::Dataset::new(spec.clone(), samples)
}
