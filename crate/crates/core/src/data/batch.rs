use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabelMap, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Paired mini-batch: labeled source samples and unlabeled target samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source_images: Tensor<f32>,
    pub source_labels: Vec<LabelMap>,
    pub target_images: Tensor<f32>,
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
}

/// Deterministic index schedule over two datasets. Each domain is shuffled
/// independently every epoch; the shorter one simply cycles sooner.
#[derive(Clone, Debug)]
pub struct Batcher {
    source_len: usize,
    target_len: usize,
    batch_size: usize,
    seed: u64,
}

const SOURCE_STREAM: u64 = 0x5u64 << 56;
const TARGET_STREAM: u64 = 0x7u64 << 56;

impl Batcher {
    pub fn new(source_len: usize, target_len: usize, batch_size: usize, seed: u64, paired_target: bool) -> Result<Self> {
        if source_len == 0 || target_len == 0 {
            return Err(Error::Config("source and target datasets must be non-empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if paired_target && batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "vessel mixing needs an even target batch, got {batch_size}"
            )));
        }
        Ok(Self {
            source_len,
            target_len,
            batch_size,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn permutation(&self, stream: u64, epoch: u64, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream ^ epoch.wrapping_mul(0x2545_F491_4F6C_DD1D));
        let mut p: Vec<usize> = (0..len).collect();
        p.shuffle(&mut rng);
        p
    }

    fn pick(&self, stream: u64, len: usize, iteration: u64) -> Vec<usize> {
        let start = iteration * self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..self.batch_size as u64 {
            let pos = start + j;
            let epoch = pos / len as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.permutation(stream, epoch, len)));
            }
            out.push(cached.as_ref().unwrap().1[(pos % len as u64) as usize]);
        }
        out
    }

    /// `(source indices, target indices)` for a given iteration.
    pub fn indices(&self, iteration: u64) -> (Vec<usize>, Vec<usize>) {
        (
            self.pick(SOURCE_STREAM, self.source_len, iteration),
            self.pick(TARGET_STREAM, self.target_len, iteration),
        )
    }

    pub fn batch(&self, source: &[Sample], target: &[Sample], iteration: u64) -> Result<Batch> {
        if source.len() != self.source_len || target.len() != self.target_len {
            return Err(Error::Config("datasets do not match the batcher".into()));
        }
        let (si, ti) = self.indices(iteration);
        let stack = |set: &[Sample], idx: &[usize]| {
            let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &set[i].image).collect();
            Tensor::stack(&imgs)
        };
        Ok(Batch {
            source_images: stack(source, &si)?,
            source_labels: si.iter().map(|&i| source[i].labels.clone()).collect(),
            target_images: stack(target, &ti)?,
            source_ids: si.iter().map(|&i| source[i].id.clone()).collect(),
            target_ids: ti.iter().map(|&i| target[i].id.clone()).collect(),
        })
    }

    pub fn iter<'a>(&'a self, source: &'a [Sample], target: &'a [Sample]) -> BatchIter<'a> {
        BatchIter {
            batcher: self,
            source,
            target,
            iteration: 0,
        }
    }
}

/// Endless batch stream.
pub struct BatchIter<'a> {
    batcher: &'a Batcher,
    source: &'a [Sample],
    target: &'a [Sample],
    iteration: u64,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batcher.batch(self.source, self.target, self.iteration);
        self.iteration += 1;
        Some(b)
    }
}
