//! Synthetic paired-face datasets: generation, manifests, I/O and pairing.

pub mod io;
pub mod manifest;
pub mod pairs;
pub mod synth;

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
pub use manifest::{check_disjoint, DatasetManifest, ManifestEntry, Split};
pub use pairs::{make_pairs, PairIndex, PairSampler, PairStream, TrainingPair};

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "CYCLEFUSE_DATA";

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

impl GeneratedDataset {
    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.train.entries.iter().chain(&self.test.entries)
    }
}

/// Number of held-out persons: 12% of identities, at least two when possible.
pub fn test_person_count(n_identities: usize) -> usize {
    let share = (n_identities as f64 * 0.12).round() as usize;
    share.max(2.min(n_identities.saturating_sub(1)))
}

/// Renders `n_identities × expressions_per_identity` faces into `out_dir`, writing
/// `images/`, `landmarks/`, `train.jsonl` and `test.jsonl`. The last persons form the
/// test split.
pub fn generate_synthetic_dataset(
    n_identities: usize,
    expressions_per_identity: usize,
    resolution: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<GeneratedDataset> {
    if n_identities < 2 {
        return Err(Error::Config("need at least two identities".into()));
    }
    if expressions_per_identity < 2 {
        return Err(Error::Config("need at least two expressions per identity".into()));
    }
    if resolution < 7 {
        return Err(Error::Config(format!("resolution {resolution} too small")));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("landmarks"))?;
    let n_test = test_person_count(n_identities);
    let n_train = n_identities - n_test;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for person in 0..n_identities {
        let split = if person < n_train { Split::Train } else { Split::Test };
        for e in 0..expressions_per_identity {
            let spec = synth::sample_face(seed, person, e);
            let name = format!("p{person:03}_e{e:02}");
            let image_path = format!("images/{name}.png");
            let landmark_path = format!("landmarks/{name}.txt");
            let pixels: Vec<f64> = spec.render(resolution).into_iter().map(|v| 2.0 * v - 1.0).collect();
            let t = Tensor::from_vec(pixels, (3, resolution, resolution), &Device::Cpu)?;
            io::write_png(&out_dir.join(&image_path), &t)?;
            io::write_landmarks(&out_dir.join(&landmark_path), &spec.landmarks())?;
            let entry = ManifestEntry {
                person_id: format!("p{person:03}"),
                expression_id: e as u32,
                severity: spec.severity(),
                image_path,
                landmark_path,
                split,
            };
            match split {
                Split::Train => train.push(entry),
                Split::Test => test.push(entry),
            }
        }
    }
    let mk = |split, entries| DatasetManifest {
        split,
        entries,
        root: out_dir.to_path_buf(),
    };
    let out = GeneratedDataset {
        train: mk(Split::Train, train),
        test: mk(Split::Test, test),
    };
    out.train.write(&out_dir.join("train.jsonl"))?;
    out.test.write(&out_dir.join("test.jsonl"))?;
    check_disjoint(&out.train, &out.test)?;
    Ok(out)
}
