//! Dataset ingestion and partitioning across clients.

use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::numerics::{streams, RngStream};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const DIRICHLET_RESEEDS: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Batch,
    pub name: String,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(examples: Batch, name: impl Into<String>, num_classes: usize) -> Result<Self> {
        if let Some(&y) = examples.labels().iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            examples,
            name: name.into(),
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.examples.input_dim()
    }

    /// Global label histogram.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in self.examples.labels() {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            examples: self.examples.select(indices)?,
            name: self.name.clone(),
            num_classes: self.num_classes,
        })
    }

    /// Seeded shuffle, then the first `n_train` rows for training and the next
    /// `n_test` for testing.
    pub fn split(
        &self,
        n_train: usize,
        n_test: usize,
        seed: u64,
    ) -> Result<(LabeledDataset, LabeledDataset)> {
        if n_train == 0 || n_test == 0 || n_train + n_test > self.len() {
            return Err(Error::invalid(format!(
                "cannot split {} examples into {n_train} train and {n_test} test",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        RngStream::new(seed, streams::SPLIT).shuffle(&mut order);
        Ok((
            self.subset(&order[..n_train])?,
            self.subset(&order[n_train..n_train + n_test])?,
        ))
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            path: path.to_string(),
            offset,
            message: "truncated header".into(),
        })
}

/// Parses an IDX image file into `(count, rows * cols, pixels scaled to [0,1])`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Idx {
            path: path.to_string(),
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
        });
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if bytes.len() < expected {
        return Err(Error::Idx {
            path: path.to_string(),
            offset: bytes.len(),
            message: format!("truncated payload, expected {expected} bytes"),
        });
    }
    let pixels = bytes[16..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((count, dim, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Idx {
            path: path.to_string(),
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"),
        });
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Idx {
            path: path.to_string(),
            offset: bytes.len(),
            message: format!("truncated payload, expected {expected} bytes"),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is one more than the
/// largest label present.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let (count, dim, pixels) = parse_idx_images(&std::fs::read(images_path)?, &img_name)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?, &lbl_name)?;
    if labels.len() != count {
        return Err(Error::Idx {
            path: lbl_name,
            offset: 4,
            message: format!("count mismatch: {} labels for {count} images", labels.len()),
        });
    }
    if count == 0 || dim == 0 {
        return Err(Error::Idx {
            path: img_name,
            offset: 4,
            message: "no examples".into(),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(Batch::new(dim, pixels, labels)?, name, num_classes)
}

/// Class means for the synthetic blobs, each pair `separation` apart when
/// `input_dim >= num_classes`; otherwise neighbours on a circle (or a line)
/// are `separation` apart.
fn blob_means(num_classes: usize, input_dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut mu = vec![0.0; input_dim];
            if input_dim >= num_classes {
                mu[c] = separation / std::f64::consts::SQRT_2;
            } else if input_dim >= 2 {
                let r = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                mu[0] = r * angle.cos();
                mu[1] = r * angle.sin();
            } else {
                mu[0] = separation * c as f64;
            }
            mu
        })
        .collect()
}

/// Gaussian class blobs with unit covariance, interleaved by class.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 || input_dim == 0 {
        return Err(Error::invalid("synthetic dataset sizes must be positive"));
    }
    let means = blob_means(num_classes, input_dim, separation);
    let n = num_classes * per_class;
    let mut features = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, mu) in means.iter().enumerate() {
            features.extend(mu.iter().map(|m| m + rng.normal()));
            labels.push(c);
        }
    }
    LabeledDataset::new(Batch::new(input_dim, features, labels)?, "synthetic", num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha_d: f64 },
    Pathological { shards_per_client: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub theta: f64,
}

impl ClientPartition {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

pub fn partition(dataset: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientPartition>> {
    let n = spec.num_clients;
    if n == 0 {
        return Err(Error::Partition("number of clients must be positive".into()));
    }
    if n > dataset.len() {
        return Err(Error::Partition(format!(
            "{n} clients for {} examples; use a larger dataset or fewer clients",
            dataset.len()
        )));
    }
    let rng = RngStream::new(spec.seed, streams::PARTITION);
    let sets = match spec.scheme {
        PartitionScheme::Iid => iid(dataset.len(), n, rng),
        PartitionScheme::Dirichlet { alpha_d } => dirichlet(dataset, n, alpha_d, rng)?,
        PartitionScheme::Pathological { shards_per_client } => {
            pathological(dataset, n, shards_per_client, rng)?
        }
    };
    if let Some(empty) = sets.iter().position(Vec::is_empty) {
        return Err(Error::Partition(format!(
            "client {empty} received no examples; use a larger dataset or fewer clients"
        )));
    }
    let total: usize = sets.iter().map(Vec::len).sum();
    Ok(sets
        .into_iter()
        .enumerate()
        .map(|(client_id, indices)| ClientPartition {
            client_id,
            theta: indices.len() as f64 / total as f64,
            indices,
        })
        .collect())
}

fn iid(len: usize, n: usize, mut rng: RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    let (base, extra) = (len / n, len % n);
    let mut start = 0;
    (0..n)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let chunk = order[start..start + size].to_vec();
            start += size;
            chunk
        })
        .collect()
}

/// Log of a Gamma(shape, 1) draw. Small shapes use the boost
/// `Gamma(a) = Gamma(1 + a) * U^(1/a)` so the result never underflows.
fn log_gamma_draw(shape: f64, rng: &mut RngStream) -> f64 {
    if shape >= 1.0 {
        let direct = Gamma::new(shape, 1.0).expect("positive shape");
        return direct.sample(rng.rng_mut()).ln();
    }
    let boosted = Gamma::new(shape + 1.0, 1.0).expect("positive shape");
    let g = boosted.sample(rng.rng_mut()).ln();
    let u = 1.0 - rng.uniform();
    g + u.ln() / shape
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn dirichlet(
    dataset: &LabeledDataset,
    n: usize,
    alpha_d: f64,
    rng: RngStream,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha_d > 0.0) || !alpha_d.is_finite() {
        return Err(Error::Partition("alpha_d must be positive and finite".into()));
    }
    let counts = dataset.class_counts();
    let total = dataset.len() as f64;
    let mut last = Vec::new();
    for attempt in 0..=DIRICHLET_RESEEDS {
        let mut rng = rng.derive(attempt);
        // log q_i[c] for every client, with q_i ~ Dir(alpha_d * prior)
        let log_q: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = counts
                    .iter()
                    .map(|&k| {
                        if k == 0 {
                            f64::NEG_INFINITY
                        } else {
                            log_gamma_draw(alpha_d * k as f64 / total, &mut rng)
                        }
                    })
                    .collect();
                let norm = log_sum_exp(&raw);
                raw.iter().map(|v| v - norm).collect()
            })
            .collect();
        // per class, cumulative client probabilities proportional to q_i[c]
        let cumulative: Vec<Vec<f64>> = (0..dataset.num_classes)
            .map(|c| {
                let col: Vec<f64> = log_q.iter().map(|q| q[c]).collect();
                let norm = log_sum_exp(&col);
                let mut acc = 0.0;
                col.iter()
                    .map(|v| {
                        acc += (v - norm).exp();
                        acc
                    })
                    .collect()
            })
            .collect();
        let mut sets = vec![Vec::new(); n];
        for (idx, &y) in dataset.examples.labels().iter().enumerate() {
            let u = rng.uniform() * cumulative[y][n - 1];
            let client = cumulative[y].partition_point(|&c| c <= u).min(n - 1);
            sets[client].push(idx);
        }
        if sets.iter().all(|s| !s.is_empty()) {
            return Ok(sets);
        }
        last = sets;
    }
    Ok(last)
}

/// Label-pure shards: each class is cut into contiguous shards, the shard
/// count per class apportioned by largest remainder, and shuffled shards are
/// dealt `shards_per_client` at a time.
fn pathological(
    dataset: &LabeledDataset,
    n: usize,
    shards_per_client: usize,
    mut rng: RngStream,
) -> Result<Vec<Vec<usize>>> {
    if shards_per_client == 0 {
        return Err(Error::Partition("shards_per_client must be positive".into()));
    }
    let total_shards = n * shards_per_client;
    if total_shards > dataset.len() {
        return Err(Error::Partition(format!(
            "{total_shards} shards for {} examples; use a larger dataset or fewer clients",
            dataset.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (idx, &y) in dataset.examples.labels().iter().enumerate() {
        by_class[y].push(idx);
    }
    let len = dataset.len();
    if by_class.iter().filter(|m| !m.is_empty()).count() > total_shards {
        // too few shards for label purity: plain sort-by-label split
        let sorted: Vec<usize> = by_class.concat();
        let (base, extra) = (len / total_shards, len % total_shards);
        let mut start = 0;
        let mut shards: Vec<Vec<usize>> = (0..total_shards)
            .map(|s| {
                let size = base + usize::from(s < extra);
                start += size;
                sorted[start - size..start].to_vec()
            })
            .collect();
        rng.shuffle(&mut shards);
        return Ok(deal(shards, shards_per_client));
    }
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|members| members.len() * total_shards / len)
        .collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    // largest remainder first, ties to the lower class id
    order.sort_by_key(|&c| {
        let rem = by_class[c].len() * total_shards % len;
        (std::cmp::Reverse(rem), c)
    });
    for &c in order.iter().take(total_shards - assigned) {
        quota[c] += 1;
    }
    // every present class needs a shard
    for c in 0..quota.len() {
        if quota[c] == 0 && !by_class[c].is_empty() {
            let donor = (0..quota.len())
                .filter(|&k| quota[k] > 1)
                .max_by_key(|&k| (quota[k], std::cmp::Reverse(k)))
                .expect("enough shards for every class");
            quota[donor] -= 1;
            quota[c] = 1;
        }
    }
    // a class may not have more shards than examples
    for c in 0..quota.len() {
        while quota[c] > by_class[c].len() {
            quota[c] -= 1;
            let target = (0..quota.len())
                .filter(|&k| quota[k] < by_class[k].len())
                .max_by_key(|&k| (by_class[k].len() - quota[k], std::cmp::Reverse(k)))
                .expect("total shards fit in the dataset");
            quota[target] += 1;
        }
    }

    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(total_shards);
    for (members, &q) in by_class.iter().zip(&quota) {
        if q == 0 {
            continue;
        }
        let (base, extra) = (members.len() / q, members.len() % q);
        let mut start = 0;
        for s in 0..q {
            let size = base + usize::from(s < extra);
            shards.push(members[start..start + size].to_vec());
            start += size;
        }
    }
    rng.shuffle(&mut shards);
    Ok(deal(shards, shards_per_client))
}

fn deal(shards: Vec<Vec<usize>>, shards_per_client: usize) -> Vec<Vec<usize>> {
    shards
        .chunks(shards_per_client)
        .map(|group| {
            let mut idx = group.concat();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Per-client label histograms, `[client][class]`.
pub fn label_histograms(dataset: &LabeledDataset, parts: &[ClientPartition]) -> Vec<Vec<usize>> {
    parts
        .iter()
        .map(|p| {
            let mut h = vec![0; dataset.num_classes];
            for &i in &p.indices {
                h[dataset.examples.label(i)] += 1;
            }
            h
        })
        .collect()
}

/// Total-variation distance between two histograms after normalisation.
pub fn tv_distance(a: &[usize], b: &[usize]) -> f64 {
    let sa: usize = a.iter().sum();
    let sb: usize = b.iter().sum();
    if sa == 0 || sb == 0 {
        return if sa == sb { 0.0 } else { 1.0 };
    }
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / sa as f64 - y as f64 / sb as f64).abs())
        .sum::<f64>()
}
