//! Synthetic federated classification data.
//!
//! Class `c` is a Gaussian blob around a mean `μ_c ~ N(0, class_mean_scale²·I)`.
//! Samples are distributed over clients per class with Dirichlet label
//! skew, optionally rotated per client (feature skew), and split 25/75 into
//! train and test sets.
//!
//! # Dataset file layout
//!
//! All integers are little-endian `u32`, all features little-endian `f64`.
//!
//! ```text
//! magic      4 bytes  "PFSD"
//! version    u32      1
//! C          u32      number of classes
//! p          u32      input dimension
//! N          u32      number of clients
//! counts     N × (n_train u32, n_test u32)
//! payload    for each client in id order, for split in (train, test):
//!              features  n × p f64, row-major
//!              labels    n u32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, stream_rng};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.25;
const DIRICHLET_RESAMPLES: usize = 100;
const MAGIC: &[u8; 4] = b"PFSD";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSkew {
    None,
    PerClientRotation { angle_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub class_mean_scale: f64,
    pub noise_std: f64,
    pub feature_skew: FeatureSkew,
    pub master_seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "must be >= 2"));
        }
        if self.input_dim < 2 {
            return Err(Error::config("data.input_dim", "must be >= 2"));
        }
        if self.samples_per_class < 8 {
            return Err(Error::config("data.samples_per_class", "must be >= 8"));
        }
        if !(self.noise_std >= 0.0) || !(self.class_mean_scale >= 0.0) {
            return Err(Error::config("data.noise_std", "scales must be non-negative"));
        }
        if let FeatureSkew::PerClientRotation { angle_std } = self.feature_skew {
            if !(angle_std >= 0.0) {
                return Err(Error::config("data.feature_skew.angle_std", "must be >= 0"));
            }
        }
        Ok(())
    }
}

/// How class samples are spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSkew {
    /// Equal shares of every class.
    Iid,
    Dirichlet { alpha: f64 },
}

/// Everything needed to build a [`FederatedDataset`]; the `gen-data` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub spec: DatasetSpec,
    pub num_clients: usize,
    pub label_skew: LabelSkew,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

/// One client's share of the sample pool, as global sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub client_id: usize,
    /// Indices held by this client, grouped by class.
    pub by_class: Vec<Vec<usize>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx` gathered into an `n × dim` tensor plus their labels.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        (Tensor::from_parts(vec![idx.len(), self.dim], data), labels)
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        (
            Tensor::from_parts(vec![self.len(), self.dim], self.features.clone()),
            self.labels.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub train: Samples,
    pub test: Samples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub num_classes: usize,
    pub input_dim: usize,
    pub clients: Vec<ClientData>,
}

/// Per-class allocation matrix `[C][N]` drawn from `Dir(alpha·1_N)`.
///
/// Counts are rounded with the largest-remainder rule so each row sums to
/// its class total. If some client would hold no samples at all, the weights
/// of one class at a time are redrawn (up to 100 redraws); after that, every
/// still-empty client takes one sample from the largest cell.
pub fn dirichlet_label_skew(
    num_classes: usize,
    num_clients: usize,
    alpha: f64,
    counts_per_class: &[usize],
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    dirichlet_allocation(num_classes, num_clients, alpha, counts_per_class, seed, 1)
}

pub(crate) fn dirichlet_allocation(
    num_classes: usize,
    num_clients: usize,
    alpha: f64,
    counts_per_class: &[usize],
    seed: u64,
    min_per_client: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    if num_clients == 0 {
        return Err(Error::Parameter("need at least one client".into()));
    }
    if counts_per_class.len() != num_classes {
        return Err(Error::Parameter(format!(
            "{} class counts for {num_classes} classes",
            counts_per_class.len()
        )));
    }
    let total: usize = counts_per_class.iter().sum();
    if total < num_clients * min_per_client {
        return Err(Error::Partition(format!(
            "{total} samples cannot give {num_clients} clients {min_per_client} each"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = stream_rng(seed, &[stream::PARTITION]);
    let mut draw_row = |count: usize| -> Vec<usize> {
        if num_clients == 1 {
            return vec![count];
        }
        let w: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = w.iter().sum();
        let weights: Vec<f64> = if sum > 0.0 {
            w.iter().map(|v| v / sum).collect()
        } else {
            vec![1.0 / num_clients as f64; num_clients]
        };
        largest_remainder(&weights, count)
    };

    let mut alloc: Vec<Vec<usize>> = counts_per_class.iter().map(|&c| draw_row(c)).collect();
    let short = |alloc: &Vec<Vec<usize>>| -> Vec<usize> {
        (0..num_clients)
            .filter(|&i| alloc.iter().map(|row| row[i]).sum::<usize>() < min_per_client)
            .collect()
    };
    let mut attempt = 0;
    while !short(&alloc).is_empty() && attempt < DIRICHLET_RESAMPLES {
        let c = attempt % num_classes;
        alloc[c] = draw_row(counts_per_class[c]);
        attempt += 1;
    }
    // Round-robin fallback: move single samples out of the fullest cell.
    loop {
        let needy = short(&alloc);
        if needy.is_empty() {
            break;
        }
        for i in needy {
            let mut best: Option<(usize, usize)> = None;
            for (c, row) in alloc.iter().enumerate() {
                for (j, &n) in row.iter().enumerate() {
                    let donor_total: usize = alloc.iter().map(|r| r[j]).sum();
                    if j != i && n > 0 && donor_total > min_per_client {
                        if best.map_or(true, |(bc, bj)| n > alloc[bc][bj]) {
                            best = Some((c, j));
                        }
                    }
                }
            }
            let (c, j) = best.ok_or_else(|| Error::Partition("cannot rebalance allocation".into()))?;
            alloc[c][j] -= 1;
            alloc[c][i] += 1;
        }
    }
    Ok(alloc)
}

/// Integer counts proportional to `weights` that sum exactly to `total`.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Ties go to the lower index.
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles `indices` with `seed` and puts the first `⌈ratio·n⌉` in train.
pub fn split_train_test(indices: &[usize], ratio_train: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if indices.len() < 4 {
        return Err(Error::Partition(format!(
            "need at least 4 samples to split, got {}",
            indices.len()
        )));
    }
    if !(0.0..=1.0).contains(&ratio_train) {
        return Err(Error::Parameter(format!("train ratio {ratio_train} outside [0, 1]")));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut stream_rng(seed, &[stream::SPLIT]));
    let n_train = (ratio_train * indices.len() as f64).ceil() as usize;
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

/// Assigns every sample in the pool to a client and splits each client.
pub fn partition_clients(config: &DataConfig) -> Result<Vec<ClientPartition>> {
    let spec = &config.spec;
    spec.validate()?;
    let n = config.num_clients;
    if n == 0 {
        return Err(Error::config("num_clients", "must be >= 1"));
    }
    let counts = vec![spec.samples_per_class; spec.num_classes];
    let alloc = match config.label_skew {
        LabelSkew::Iid => counts
            .iter()
            .map(|&c| largest_remainder(&vec![1.0 / n as f64; n], c))
            .collect(),
        LabelSkew::Dirichlet { alpha } => {
            dirichlet_allocation(spec.num_classes, n, alpha, &counts, spec.master_seed, 4)?
        }
    };

    let mut by_client: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); spec.num_classes]; n];
    for (c, row) in alloc.iter().enumerate() {
        let mut pool: Vec<usize> = (c * spec.samples_per_class..(c + 1) * spec.samples_per_class).collect();
        pool.shuffle(&mut stream_rng(spec.master_seed, &[stream::PARTITION, c as u64 + 1]));
        let mut offset = 0;
        for (i, &k) in row.iter().enumerate() {
            by_client[i][c] = pool[offset..offset + k].to_vec();
            offset += k;
        }
    }

    by_client
        .into_iter()
        .enumerate()
        .map(|(i, by_class)| {
            let all: Vec<usize> = by_class.iter().flatten().copied().collect();
            let split_seed = crate::rng::derive_seed(spec.master_seed, &[i as u64]);
            let (train, test) = split_train_test(&all, config.train_fraction, split_seed)?;
            Ok(ClientPartition {
                client_id: i,
                by_class,
                train,
                test,
            })
        })
        .collect()
}

/// Class means, one row of length `p` per class.
pub fn class_means(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(spec.master_seed, &[stream::CLASS_MEANS]);
    (0..spec.num_classes)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * spec.class_mean_scale
                })
                .collect()
        })
        .collect()
}

/// Orthogonal `p×p` matrix composed of Givens rotations over every
/// coordinate pair, angles `~ N(0, angle_std²)`, seeded by client id.
pub fn client_rotation(p: usize, angle_std: f64, master_seed: u64, client_id: usize) -> Tensor {
    let mut rng = stream_rng(master_seed, &[stream::ROTATION, client_id as u64]);
    let mut r = Tensor::identity(p);
    let m = r.data_mut();
    for a in 0..p {
        for b in a + 1..p {
            let z: f64 = StandardNormal.sample(&mut rng);
            let (s, c) = (z * angle_std).sin_cos();
            // Left-multiply by G(a, b): only rows a and b change.
            for col in 0..p {
                let (ra, rb) = (m[a * p + col], m[b * p + col]);
                m[a * p + col] = c * ra - s * rb;
                m[b * p + col] = s * ra + c * rb;
            }
        }
    }
    r
}

/// The raw (unrotated) sample with global index `idx`.
fn pool_sample(spec: &DatasetSpec, means: &[Vec<f64>], idx: usize) -> (Vec<f64>, usize) {
    let class = idx / spec.samples_per_class;
    let mut rng = stream_rng(spec.master_seed, &[stream::SAMPLES, idx as u64]);
    let x = means[class]
        .iter()
        .map(|&mu| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mu + spec.noise_std * z
        })
        .collect();
    (x, class)
}

/// Materializes one client's train and test samples.
pub fn generate_samples(spec: &DatasetSpec, partition: &ClientPartition) -> Result<ClientData> {
    spec.validate()?;
    let means = class_means(spec);
    let rotation = match spec.feature_skew {
        FeatureSkew::None => None,
        FeatureSkew::PerClientRotation { angle_std } => Some(client_rotation(
            spec.input_dim,
            angle_std,
            spec.master_seed,
            partition.client_id,
        )),
    };
    let build = |idx: &[usize]| {
        let mut out = Samples::empty(spec.input_dim);
        for &i in idx {
            let (x, y) = pool_sample(spec, &means, i);
            match &rotation {
                Some(r) => {
                    let p = spec.input_dim;
                    for row in r.data().chunks(p) {
                        out.features.push(row.iter().zip(&x).map(|(a, b)| a * b).sum());
                    }
                }
                None => out.features.extend_from_slice(&x),
            }
            out.labels.push(y);
        }
        out
    };
    Ok(ClientData {
        client_id: partition.client_id,
        train: build(&partition.train),
        test: build(&partition.test),
    })
}

pub fn build_federated_dataset(config: &DataConfig) -> Result<FederatedDataset> {
    let parts = partition_clients(config)?;
    let clients = parts
        .iter()
        .map(|p| generate_samples(&config.spec, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(FederatedDataset {
        num_classes: config.spec.num_classes,
        input_dim: config.spec.input_dim,
        clients,
    })
}

impl FederatedDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            self.num_classes as u32,
            self.input_dim as u32,
            self.clients.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.clients {
            out.extend_from_slice(&(c.train.len() as u32).to_le_bytes());
            out.extend_from_slice(&(c.test.len() as u32).to_le_bytes());
        }
        for c in &self.clients {
            for split in [&c.train, &c.test] {
                for v in &split.features {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for &y in &split.labels {
                    out.extend_from_slice(&(y as u32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let u32_at = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated file".into()))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_at(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let num_classes = u32_at(&mut r)? as usize;
        let input_dim = u32_at(&mut r)? as usize;
        let n = u32_at(&mut r)? as usize;
        let counts: Vec<(usize, usize)> = (0..n)
            .map(|_| Ok((u32_at(&mut r)? as usize, u32_at(&mut r)? as usize)))
            .collect::<Result<_>>()?;
        let mut clients = Vec::with_capacity(n);
        for (client_id, (n_train, n_test)) in counts.into_iter().enumerate() {
            let mut read_split = |rows: usize| -> Result<Samples> {
                let mut s = Samples::empty(input_dim);
                for _ in 0..rows * input_dim {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b).map_err(|_| Error::Format("truncated features".into()))?;
                    s.features.push(f64::from_le_bytes(b));
                }
                for _ in 0..rows {
                    let y = u32_at(&mut r)? as usize;
                    if y >= num_classes {
                        return Err(Error::Format(format!("label {y} >= {num_classes}")));
                    }
                    s.labels.push(y);
                }
                Ok(s)
            };
            let train = read_split(n_train)?;
            let test = read_split(n_test)?;
            clients.push(ClientData {
                client_id,
                train,
                test,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            num_classes,
            input_dim,
            clients,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
