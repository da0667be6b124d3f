//! Dataset ingestion, normalization, and Dirichlet partitioning across clients.
//!
//! The on-disk format is a directory holding `meta.json` (count, height, width,
//! channels, class_count), `images.bin` (raw little-endian f32, row-major
//! count x H x W x Ch, pixels in [0,1]) and `labels.bin` (little-endian i32).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod ingest;

/// Images plus integer labels: the unit of ingestion, partitioning,
/// generation, and evaluation. Pixels live in [0,1].
#[derive(Debug, Clone)]
pub struct LabeledImageDataset {
    pub name: String,
    /// Row-major count x height x width x channels.
    pub images: Vec<f32>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: Vec<u32>,
    pub class_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_count: usize,
}

impl LabeledImageDataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<f32>,
        height: usize,
        width: usize,
        channels: usize,
        labels: Vec<u32>,
        class_count: usize,
    ) -> Result<Self> {
        let pixels_per_image = height * width * channels;
        if pixels_per_image == 0 || images.len() % pixels_per_image != 0 {
            return Err(Error::Validation(format!(
                "image buffer length {} is not a multiple of {}x{}x{}",
                images.len(),
                height,
                width,
                channels
            )));
        }
        let count = images.len() / pixels_per_image;
        let ds = Self {
            name: name.into(),
            images,
            count,
            height,
            width,
            channels,
            labels,
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.count {
            return Err(Error::Validation(format!(
                "label count {} != image count {}",
                self.labels.len(),
                self.count
            )));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| (l as usize) >= self.class_count)
        {
            return Err(Error::Validation(format!(
                "label {} out of range [0, {})",
                bad, self.class_count
            )));
        }
        if let Some(&bad) = self
            .images
            .iter()
            .find(|&&p| !(0.0..=1.0).contains(&p) || !p.is_finite())
        {
            return Err(Error::Validation(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(())
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.images[index * n..(index + 1) * n]
    }

    /// A new dataset containing only the given rows, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        let n = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            name: name.into(),
            images,
            count: indices.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            labels,
            class_count: self.class_count,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = DatasetMeta {
            count: self.count,
            height: self.height,
            width: self.width,
            channels: self.channels,
            class_count: self.class_count,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut buf = Vec::with_capacity(self.images.len() * 4);
        for &p in &self.images {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(dir.join("images.bin"), buf)?;
        let mut lbuf = Vec::with_capacity(self.labels.len() * 4);
        for &l in &self.labels {
            lbuf.extend_from_slice(&(l as i32).to_le_bytes());
        }
        fs::write(dir.join("labels.bin"), lbuf)?;
        Ok(())
    }

    pub fn load(dir: &Path, name: impl Into<String>) -> Result<Self> {
        let read = |file: &str| -> Result<Vec<u8>> {
            let path = dir.join(file);
            fs::read(&path).map_err(|e| Error::IngestFile {
                path: path.clone(),
                reason: e.to_string(),
            })
        };
        let meta: DatasetMeta =
            serde_json::from_slice(&read("meta.json")?).map_err(|e| Error::IngestFile {
                path: dir.join("meta.json"),
                reason: e.to_string(),
            })?;
        let ibytes = read("images.bin")?;
        let expected = meta.count * meta.height * meta.width * meta.channels * 4;
        if ibytes.len() != expected {
            return Err(Error::IngestFile {
                path: dir.join("images.bin"),
                reason: format!("expected {} bytes, found {}", expected, ibytes.len()),
            });
        }
        let images: Vec<f32> = ibytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let lbytes = read("labels.bin")?;
        if lbytes.len() != meta.count * 4 {
            return Err(Error::IngestFile {
                path: dir.join("labels.bin"),
                reason: format!("expected {} bytes, found {}", meta.count * 4, lbytes.len()),
            });
        }
        let mut labels = Vec::with_capacity(meta.count);
        for c in lbytes.chunks_exact(4) {
            let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v < 0 {
                return Err(Error::Validation(format!("negative label {v}")));
            }
            labels.push(v as u32);
        }
        Self::new(
            name,
            images,
            meta.height,
            meta.width,
            meta.channels,
            labels,
            meta.class_count,
        )
    }
}

/// One client's slice of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Row indices into the parent dataset, unique.
    pub indices: Vec<usize>,
    /// Per-class sample counts; sums to `indices.len()`.
    pub label_counts: Vec<usize>,
}

impl ClientShard {
    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }
}

/// Directory layout for ingested datasets under a data root.
pub fn dataset_dir(root: &Path, name: &str, split: &str) -> PathBuf {
    root.join(name).join(split)
}

/// Load an ingested dataset. `name` is one of `fashionmnist`, `pathmnist`,
/// `cifar10`, `custom`; `split` is `train` or `test`.
pub fn load_dataset(name: &str, root: &Path, split: &str) -> Result<LabeledImageDataset> {
    match name {
        "fashionmnist" | "pathmnist" | "cifar10" | "custom" => {}
        other => {
            return Err(Error::Argument(format!(
                "unknown dataset {other:?}; expected fashionmnist, pathmnist, cifar10, or custom"
            )))
        }
    }
    match split {
        "train" | "test" => {}
        other => {
            return Err(Error::Argument(format!(
                "unknown split {other:?}; expected train or test"
            )))
        }
    }
    LabeledImageDataset::load(&dataset_dir(root, name, split), name)
}

/// Class-wise Dirichlet label-skew partition.
///
/// For each class in ascending order, a proportion vector is drawn from
/// Dir(alpha * 1_C) off one seeded stream and the class's sample indices are
/// split accordingly (largest-remainder rounding, contiguous assignment in
/// dataset order). If a shard comes out empty it receives one sample moved
/// from the largest shard, so every client can train a model.
pub fn dirichlet_partition(
    dataset: &LabeledImageDataset,
    client_count: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if client_count == 0 {
        return Err(Error::Partition("client_count must be >= 1".into()));
    }
    if dataset.count == 0 {
        return Err(Error::Partition("dataset is empty".into()));
    }
    if client_count > dataset.count {
        return Err(Error::Partition(format!(
            "cannot split {} samples across {} clients",
            dataset.count, client_count
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Partition(format!("alpha must be positive, got {alpha}")));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); client_count];

    for class in 0..dataset.class_count {
        let class_indices: Vec<usize> = (0..dataset.count)
            .filter(|&i| dataset.labels[i] as usize == class)
            .collect();
        if class_indices.is_empty() {
            continue;
        }
        let proportions = dirichlet_draw(&mut rng, alpha, client_count);
        let counts = largest_remainder_counts(&proportions, class_indices.len());
        let mut offset = 0;
        for (client, &n) in counts.iter().enumerate() {
            per_client[client].extend_from_slice(&class_indices[offset..offset + n]);
            offset += n;
        }
    }

    // Empty-client repair: steal one sample from the largest shard.
    for c in 0..client_count {
        if per_client[c].is_empty() {
            let donor = (0..client_count)
                .max_by_key(|&d| per_client[d].len())
                .expect("nonempty client list");
            if per_client[donor].len() <= 1 {
                return Err(Error::Partition(
                    "not enough samples to give every client at least one".into(),
                ));
            }
            let moved = per_client[donor].pop().expect("donor nonempty");
            per_client[c].push(moved);
        }
    }

    Ok(per_client
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            let mut label_counts = vec![0usize; dataset.class_count];
            for &i in &indices {
                label_counts[dataset.labels[i] as usize] += 1;
            }
            ClientShard {
                client_id,
                indices,
                label_counts,
            }
        })
        .collect())
}

/// One Dirichlet(alpha * 1_n) draw via normalized Gamma variates.
pub fn dirichlet_draw<R: Rng>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0 checked by caller");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        // All draws underflowed (tiny alpha): fall back to a single winner.
        let winner = rng.gen_range(0..n);
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[winner] = 1.0;
        return draws;
    }
    draws.iter_mut().for_each(|d| *d /= total);
    draws
}

/// Integer counts summing to `total`, proportional to `proportions`,
/// rounded by the largest-remainder method (ties to lower index).
pub fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Affine map [0,1] -> [-1,1].
pub fn to_model_range(pixels: &[f32]) -> Vec<f32> {
    pixels.iter().map(|&p| 2.0 * p - 1.0).collect()
}

/// Inverse of [`to_model_range`].
pub fn from_model_range(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&v| (v + 1.0) / 2.0).collect()
}
