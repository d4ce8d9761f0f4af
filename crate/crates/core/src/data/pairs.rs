//! Same-person (identity image, expression image) pair sampling.

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Entry indices of one pair within a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIndex {
    pub x_id: usize,
    pub x0: usize,
}

/// A batch of pairs: identity images, expression images and their person.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x_id: Tensor,
    pub x0: Tensor,
    pub person_ids: Vec<String>,
}

impl TrainingPair {
    pub fn gather(images: &ImageBatch, manifest: &DatasetManifest, pairs: &[PairIndex]) -> Result<Self> {
        let ids: Vec<usize> = pairs.iter().map(|p| p.x_id).collect();
        let x0s: Vec<usize> = pairs.iter().map(|p| p.x0).collect();
        Ok(Self {
            x_id: images.select(&ids)?.into_tensor(),
            x0: images.select(&x0s)?.into_tensor(),
            person_ids: pairs.iter().map(|p| manifest.entries[p.x0].person_id.clone()).collect(),
        })
    }
}

/// Person groups of a manifest with at least two entries each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSampler {
    /// For each entry, the other entries of the same person (empty if unpairable).
    partners: Vec<Vec<usize>>,
    eligible: Vec<usize>,
}

impl PairSampler {
    pub fn new(manifest: &DatasetManifest) -> Result<Self> {
        let mut partners = vec![Vec::new(); manifest.len()];
        for (person, idx) in manifest.by_person() {
            if idx.len() < 2 {
                log::warn!("person {person} has a single entry and is excluded from pairing");
                continue;
            }
            for &i in &idx {
                partners[i] = idx.iter().copied().filter(|&j| j != i).collect();
            }
        }
        let eligible: Vec<usize> = (0..manifest.len()).filter(|&i| !partners[i].is_empty()).collect();
        if eligible.is_empty() {
            return Err(Error::Manifest("no person has two or more entries".into()));
        }
        Ok(Self { partners, eligible })
    }

    /// Expression entries that can be paired.
    pub fn eligible(&self) -> &[usize] {
        &self.eligible
    }

    /// Pairs the expression entry `x0` with a uniformly chosen other image of the same person.
    pub fn pair_for<R: Rng + ?Sized>(&self, x0: usize, rng: &mut R) -> PairIndex {
        let others = &self.partners[x0];
        PairIndex {
            x_id: others[rng.random_range(0..others.len())],
            x0,
        }
    }
}

/// Endless stream of pairs, one shuffled pass over the eligible entries per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairStream {
    sampler: PairSampler,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl PairStream {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<PairIndex> {
        (0..n).map(|_| self.next().expect("stream is endless")).collect()
    }
}

impl Iterator for PairStream {
    type Item = PairIndex;

    fn next(&mut self) -> Option<PairIndex> {
        if self.pos >= self.order.len() {
            self.order = self.sampler.eligible.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let x0 = self.order[self.pos];
        self.pos += 1;
        Some(self.sampler.pair_for(x0, &mut self.rng))
    }
}

pub fn make_pairs(manifest: &DatasetManifest, seed: u64) -> Result<PairStream> {
    Ok(PairStream {
        sampler: PairSampler::new(manifest)?,
        rng: ChaCha8Rng::seed_from_u64(seed),
        order: Vec::new(),
        pos: 0,
        epoch: 0,
    })
}
