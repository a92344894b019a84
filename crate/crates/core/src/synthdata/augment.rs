use rand::Rng;

use crate::error::{shape_err, Result};
use crate::numerics::{Real, Tensor};

/// Zeroes random time bands and feature bands of each sample.
///
/// Each band draws its width uniformly from `0..=max_width` and then its
/// start uniformly among the positions where it fits. Bands of one sample
/// are independent and may overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugment {
    pub time_masks: usize,
    pub feature_masks: usize,
    pub max_time_width: usize,
    pub max_feature_width: usize,
}

impl SpecAugment {
    /// Two bands per axis, at most an eighth of the axis wide.
    pub fn desk(time: usize, dim: usize) -> Self {
        Self {
            time_masks: 2,
            feature_masks: 2,
            max_time_width: time / 8,
            max_feature_width: dim / 8,
        }
    }

    pub fn disabled() -> Self {
        Self {
            time_masks: 0,
            feature_masks: 0,
            max_time_width: 0,
            max_feature_width: 0,
        }
    }

    /// `x` is `(B, T, D)`. Returns `x` unchanged when `train` is false.
    pub fn apply<E: Real>(&self, x: &Tensor<E>, train: bool, rng: &mut impl Rng) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 3 {
            return shape_err("spec_augment", format!("expected (B, T, D), got {s:?}"));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if self.max_time_width > t || self.max_feature_width > d {
            return shape_err(
                "spec_augment",
                format!(
                    "mask widths ({}, {}) exceed (T, D) = ({t}, {d})",
                    self.max_time_width, self.max_feature_width
                ),
            );
        }
        let mut out = x.clone();
        if !train {
            return Ok(out);
        }
        let band = |rng: &mut _, max: usize, len: usize| {
            let w = rand::Rng::random_range(rng, 0..=max);
            let start = rand::Rng::random_range(rng, 0..=len - w);
            start..start + w
        };
        for bi in 0..b {
            let sample = &mut out.data_mut()[bi * t * d..(bi + 1) * t * d];
            for _ in 0..self.time_masks {
                for ti in band(rng, self.max_time_width, t) {
                    sample[ti * d..(ti + 1) * d].fill(E::zero());
                }
            }
            for _ in 0..self.feature_masks {
                let r = band(rng, self.max_feature_width, d);
                for ti in 0..t {
                    sample[ti * d + r.start..ti * d + r.end].fill(E::zero());
                }
            }
        }
        Ok(out)
    }
}
