use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::format::Dataset;
use crate::captioner::CaptionBatch;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Index batches for one epoch. With `shuffle` the order is a permutation
/// drawn from `seed` on stream `epoch`; otherwise it is file order. A
/// trailing batch of one sample joins the batch before it.
pub fn epoch_plan(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    let mut plan: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if plan.len() > 1 && batch_size > 1 && plan.last().is_some_and(|b| b.len() == 1) {
        let last = plan.pop().expect("non-empty plan");
        plan.last_mut().expect("two batches").extend(last);
    }
    Ok(plan)
}

/// Samples stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sample_ids: Vec<u64>,
    /// Three `(B, T, D)` views.
    pub views: [Tensor<f32>; 3],
    /// `(B, T, D)`.
    pub text_feat: Tensor<f32>,
    pub captions: CaptionBatch,
}

impl Batch {
    pub fn gather(data: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::Invalid(format!("sample index {i} out of range for {}", data.len())));
        }
        let (t, d) = (data.spec.time, data.spec.dim);
        let shape = [indices.len(), t, d];
        let s = &data.samples;
        let stack = |f: fn(&super::SamplePair) -> &Tensor<f32>| {
            let mut v = Vec::with_capacity(indices.len() * t * d);
            for &i in indices {
                v.extend_from_slice(f(&s[i]).data());
            }
            Tensor::new(&shape, v)
        };
        let views = [stack(|p| &p.views[0])?, stack(|p| &p.views[1])?, stack(|p| &p.views[2])?];
        let captions: Vec<Vec<usize>> = indices.iter().map(|&i| s[i].caption.clone()).collect();
        Ok(Self {
            sample_ids: indices.iter().map(|&i| s[i].sample_id).collect(),
            views,
            text_feat: stack(|p| &p.text_feat)?,
            captions: CaptionBatch::new(&captions, &data.vocab()?)?,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// The batches of one epoch, in plan order.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Self> {
        Ok(Self {
            data,
            plan: epoch_plan(data.len(), batch_size, shuffle, seed, epoch)?.into_iter(),
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.plan.next().map(|idx| Batch::gather(self.data, &idx))
    }
}
