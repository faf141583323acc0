//! Entropy ranking with cluster quotas over an unlabeled pool.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::data;
use crate::io::{BinaryTensor, Manifest, ManifestRecord};
use crate::model::SegNet;
use crate::rng::{self, Slot};
use crate::tensor::Tensor;
use crate::train;

const NORM_TOL: f64 = 1e-6;

/// Per-pixel class probabilities of one patch, `H×W×K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub patch_id: String,
    pub probs: Tensor,
    /// Channel left out of the entropy sum.
    pub background: Option<usize>,
}

impl ProbMap {
    pub fn new(patch_id: impl Into<String>, probs: Tensor, background: Option<usize>) -> Result<Self> {
        let p = ProbMap {
            patch_id: patch_id.into(),
            probs,
            background,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn classes(&self) -> usize {
        *self.probs.shape().last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.probs.shape();
        if shape.len() != 3 || shape[2] == 0 {
            return Err(Error::Validation(format!(
                "{}: prob map must be H×W×K, got {shape:?}",
                self.patch_id
            )));
        }
        if let Some(b) = self.background {
            if b >= shape[2] {
                return Err(Error::Validation(format!("background channel {b} out of range")));
            }
        }
        for (i, row) in self.probs.data().chunks(shape[2]).enumerate() {
            let sum: f64 = row.iter().sum();
            let bad = row.iter().any(|&p| !(-NORM_TOL..=1.0 + NORM_TOL).contains(&p));
            if bad || (sum - 1.0).abs() > NORM_TOL {
                return Err(Error::Validation(format!(
                    "{}: pixel {i} is not a probability vector (sum {sum})",
                    self.patch_id
                )));
            }
        }
        Ok(())
    }
}

/// Mean per-pixel Shannon entropy in nats, summed over every non-background
/// channel, with `0·log 0 = 0`.
pub fn average_entropy(p: &ProbMap) -> Result<f64> {
    p.validate()?;
    let k = p.classes();
    let pixels = p.probs.numel() / k;
    let mut total = 0.0;
    for row in p.probs.data().chunks(k) {
        for (c, &v) in row.iter().enumerate() {
            if Some(c) != p.background && v > 0.0 {
                total -= v * v.ln();
            }
        }
    }
    Ok((total / pixels as f64).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatch {
    pub patch_id: String,
    pub entropy: f64,
    pub cluster: Option<usize>,
}

/// Ascending entropy, ties by patch id.
pub fn rank_by_entropy(mut patches: Vec<ScoredPatch>) -> Vec<ScoredPatch> {
    patches.sort_by(|a, b| {
        a.entropy
            .total_cmp(&b.entropy)
            .then_with(|| a.patch_id.cmp(&b.patch_id))
    });
    patches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// Unit-norm prototypes.
    pub prototypes: Vec<Vec<f64>>,
    pub labeled_counts: Vec<usize>,
    pub total: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn kmeans_pp(features: &[Vec<f64>], m: usize, rng: &mut rng::Stream) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centroids = vec![features[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| dist2(f, &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = features[pick].clone();
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(dist2(f, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Euclidean k-means (k-means++ seeding, Lloyd iterations until every
/// centroid moves less than 1e-6 or 100 rounds). Prototypes are the
/// unit-normalized centroids.
pub fn fit_clusters(features: &[Vec<f64>], m: usize, seed: u64) -> Result<ClusterModel> {
    if m == 0 {
        return Err(Error::Config("need at least one cluster".into()));
    }
    if features.len() < m {
        return Err(Error::Config(format!(
            "{} labeled features for {m} clusters",
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Validation("feature dimensions differ".into()));
    }
    let mut rng = rng::stream(seed, "kmeans", 0, Slot::KMeans);
    let mut centroids = kmeans_pp(features, m, &mut rng);
    for _ in 0..100 {
        let assign: Vec<usize> = features.iter().map(|f| nearest(f, &centroids)).collect();
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (f, &a) in features.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(f) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..m {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(dist2(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < 1e-6 {
            break;
        }
    }
    let mut labeled_counts = vec![0; m];
    for f in features {
        labeled_counts[nearest(f, &centroids)] += 1;
    }
    let prototypes = centroids
        .into_iter()
        .map(|c| {
            let n = norm(&c);
            if n == 0.0 {
                return Err(Error::Validation("cluster centroid has zero norm".into()));
            }
            Ok(c.into_iter().map(|v| v / n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterModel {
        prototypes,
        labeled_counts,
        total: features.len(),
    })
}

/// Cosine-nearest prototype; ties go to the lowest index.
pub fn assign_cluster(feature: &[f64], model: &ClusterModel) -> Result<usize> {
    let n = norm(feature);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Validation("cannot assign a zero-norm feature".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in model.prototypes.iter().enumerate() {
        if p.len() != feature.len() {
            return Err(Error::Dimension {
                op: "assign_cluster",
                lhs: vec![feature.len()],
                rhs: vec![p.len()],
            });
        }
        let cos = feature.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (n * norm(p));
        if cos > best.1 {
            best = (i, cos);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaPlan {
    pub quotas: Vec<usize>,
    pub budget: usize,
}

/// Budget split proportional to `counts`, rounded by largest remainder with
/// ties going to the lower index.
pub fn allocate_quotas_from_counts(counts: &[usize], budget: usize) -> Result<QuotaPlan> {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(Error::Config("no labeled samples to derive quotas from".into()));
    }
    // Exact integer arithmetic: quota_m = floor(B·N_m / N), remainder B·N_m mod N.
    let b = budget as u128;
    let mut quotas: Vec<usize> = counts.iter().map(|&c| (b * c as u128 / total) as usize).collect();
    let mut order: Vec<(u128, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (b * c as u128 % total, i))
        .collect();
    order.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    let short = budget - quotas.iter().sum::<usize>();
    for &(_, i) in order.iter().take(short) {
        quotas[i] += 1;
    }
    Ok(QuotaPlan { quotas, budget })
}

pub fn allocate_quotas(model: &ClusterModel, budget: usize) -> Result<QuotaPlan> {
    allocate_quotas_from_counts(&model.labeled_counts, budget)
}

/// Single ascending pass: accept a patch iff its cluster still has quota.
/// Returns accepted ids in acceptance order.
pub fn select(ranked: &[ScoredPatch], plan: &QuotaPlan) -> Result<Vec<String>> {
    let mut left = plan.quotas.clone();
    let mut out = Vec::new();
    for p in ranked {
        if out.len() == plan.budget {
            break;
        }
        let c = p
            .cluster
            .ok_or_else(|| Error::Validation(format!("patch {} has no cluster", p.patch_id)))?;
        let slot = left
            .get_mut(c)
            .ok_or_else(|| Error::Index(format!("cluster {c} for patch {}", p.patch_id)))?;
        if *slot > 0 {
            *slot -= 1;
            out.push(p.patch_id.clone());
        }
    }
    Ok(out)
}

/// Uniform random subset of `budget` ids, in pool order.
pub fn random_select(ids: &[String], budget: usize, seed: u64) -> Vec<String> {
    let mut rng = rng::stream(seed, "random-select", 0, Slot::RandomSelect);
    let mut keep: Vec<usize> = rng::permutation(ids.len(), &mut rng)
        .into_iter()
        .take(budget)
        .collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| ids[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Entropy,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Strategy::Entropy),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::Config(format!("unknown curation strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateConfig {
    pub clusters: usize,
    /// `None` selects the whole pool.
    pub budget: Option<usize>,
    pub background: Option<usize>,
    pub strategy: Strategy,
}

impl Default for CurateConfig {
    fn default() -> Self {
        CurateConfig {
            clusters: 8,
            budget: None,
            background: Some(0),
            strategy: Strategy::Entropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    /// Nearest-rank quantiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
        Some(Quantiles {
            min: v[0],
            q25: at(0.25),
            median: at(0.5),
            q75: at(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub strategy: Strategy,
    pub clusters: usize,
    pub budget: usize,
    pub pool_size: usize,
    pub selected: usize,
    pub selected_fraction: f64,
    pub labeled_counts: Vec<usize>,
    pub quotas: Vec<usize>,
    pub pool_per_cluster: Vec<usize>,
    pub selected_per_cluster: Vec<usize>,
    pub pool_entropy: Option<Quantiles>,
    pub selected_entropy: Option<Quantiles>,
}

/// One unlabeled candidate with its score inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub patch_id: String,
    pub entropy: f64,
    pub feature: Vec<f64>,
}

/// The in-memory pipeline: cluster labeled features, assign candidates,
/// allocate quotas, rank and select. Returns selected ids in acceptance order.
pub fn curate_scored(
    labeled_features: &[Vec<f64>],
    candidates: &[Candidate],
    config: &CurateConfig,
    seed: u64,
) -> Result<(Vec<String>, CurationReport)> {
    let budget = config.budget.unwrap_or(candidates.len());
    let m = config.clusters;
    let entropies: Vec<f64> = candidates.iter().map(|c| c.entropy).collect();
    let (selected, model, plan, scored) = match config.strategy {
        Strategy::Random => {
            let ids: Vec<String> = candidates.iter().map(|c| c.patch_id.clone()).collect();
            (random_select(&ids, budget, seed), None, None, Vec::new())
        }
        Strategy::Entropy => {
            let model = fit_clusters(labeled_features, m, seed)?;
            let clusters = candidates
                .par_iter()
                .map(|c| assign_cluster(&c.feature, &model))
                .collect::<Result<Vec<_>>>()?;
            let scored: Vec<ScoredPatch> = candidates
                .iter()
                .zip(clusters)
                .map(|(c, k)| ScoredPatch {
                    patch_id: c.patch_id.clone(),
                    entropy: c.entropy,
                    cluster: Some(k),
                })
                .collect();
            let plan = allocate_quotas(&model, budget)?;
            let ranked = rank_by_entropy(scored.clone());
            (select(&ranked, &plan)?, Some(model), Some(plan), scored)
        }
    };
    let clusters = model.as_ref().map_or(0, |md| md.prototypes.len());
    let mut pool_per_cluster = vec![0; clusters];
    let mut selected_per_cluster = vec![0; clusters];
    let chosen: std::collections::HashSet<&str> = selected.iter().map(String::as_str).collect();
    for s in &scored {
        let c = s.cluster.unwrap_or(0);
        pool_per_cluster[c] += 1;
        if chosen.contains(s.patch_id.as_str()) {
            selected_per_cluster[c] += 1;
        }
    }
    let selected_entropy: Vec<f64> = candidates
        .iter()
        .filter(|c| chosen.contains(c.patch_id.as_str()))
        .map(|c| c.entropy)
        .collect();
    let report = CurationReport {
        strategy: config.strategy,
        clusters,
        budget,
        pool_size: candidates.len(),
        selected: selected.len(),
        selected_fraction: if candidates.is_empty() {
            0.0
        } else {
            selected.len() as f64 / candidates.len() as f64
        },
        labeled_counts: model.map(|md| md.labeled_counts).unwrap_or_default(),
        quotas: plan.map(|p| p.quotas).unwrap_or_default(),
        pool_per_cluster,
        selected_per_cluster,
        pool_entropy: Quantiles::of(&entropies),
        selected_entropy: Quantiles::of(&selected_entropy),
    };
    Ok((selected, report))
}

pub fn probs_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("probs").join(format!("{id}.s5t"))
}

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("features").join(format!("{id}.s5t"))
}

fn read_patch_file(path: &Path, id: &str) -> Result<BinaryTensor> {
    if !path.exists() {
        return Err(Error::Ingestion {
            patch_id: id.to_string(),
            path: path.to_path_buf(),
        });
    }
    BinaryTensor::read(path)
}

pub fn read_feature(dir: &Path, id: &str) -> Result<Vec<f64>> {
    Ok(read_patch_file(&feature_path(dir, id), id)?.data.to_f64())
}

pub fn read_probs(dir: &Path, id: &str, background: Option<usize>) -> Result<ProbMap> {
    let path = probs_path(dir, id);
    let t = read_patch_file(&path, id)?.to_tensor();
    ProbMap::new(id, t, background).map_err(|e| Error::format(&path, e.to_string()))
}

/// Which per-patch files [`infer`] writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emit {
    pub probs: bool,
    pub features: bool,
}

impl std::str::FromStr for Emit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut emit = Emit {
            probs: false,
            features: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "probs" => emit.probs = true,
                "features" => emit.features = true,
                other => return Err(Error::Config(format!("unknown emit kind `{other}`"))),
            }
        }
        if !(emit.probs || emit.features) {
            return Err(Error::Config("nothing to emit".into()));
        }
        Ok(emit)
    }
}

/// Run `net` over every record of a manifest and write softmax maps
/// (`H×W×K`, f64) and mean-pooled features under `out`. Returns the number
/// of patches processed.
pub fn infer(net: &SegNet, manifest: &Path, emit: Emit, out: &Path) -> Result<usize> {
    let manifest = Manifest::read(manifest)?;
    let samples = data::load_samples(&manifest)?;
    let size = net.config.image_size;
    if let Some(s) = samples.iter().find(|s| s.image.shape() != [size, size, 3]) {
        return Err(Error::Model(format!(
            "patch {} has shape {:?}, checkpoint expects {size}x{size}x3",
            s.id,
            s.image.shape()
        )));
    }
    samples.par_chunks(8).try_for_each(|chunk| {
        let imgs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let (logits, features) = net.predict(&imgs, 0)?;
        for ((s, l), f) in chunk.iter().zip(&logits).zip(features) {
            if emit.probs {
                let probs = Tensor::new(l.shape().to_vec(), train::softmax_field(l))?;
                BinaryTensor::from_tensor_f64(&probs).write(&probs_path(out, &s.id))?;
            }
            if emit.features {
                let t = Tensor::new(vec![f.len()], f)?;
                BinaryTensor::from_tensor_f64(&t).write(&feature_path(out, &s.id))?;
            }
        }
        Ok(())
    })?;
    Ok(samples.len())
}

/// Inputs of a file-based curation run.
pub struct CurateInputs<'a> {
    pub labeled: &'a Path,
    /// One or more pool manifests, concatenated in order.
    pub unlabeled: &'a [PathBuf],
    /// Directory produced by inference over the labeled manifest.
    pub labeled_infer: &'a Path,
    /// Directory produced by inference over the pool.
    pub unlabeled_infer: &'a Path,
}

/// File-based curation. Writes the curated manifest (pool records in
/// acceptance order) and a JSON report.
pub fn curate(
    inputs: &CurateInputs,
    config: &CurateConfig,
    seed: u64,
    out_manifest: &Path,
    out_report: &Path,
) -> Result<CurationReport> {
    let labeled = Manifest::read(inputs.labeled)?;
    let labeled = labeled.filter(|r| r.split != "val");
    let mut pool: Vec<(ManifestRecord, PathBuf)> = Vec::new();
    for p in inputs.unlabeled {
        let m = Manifest::read(p)?;
        pool.extend(m.records.iter().map(|r| (r.clone(), m.root.clone())));
    }
    let labeled_features = labeled
        .records
        .par_iter()
        .map(|r| read_feature(inputs.labeled_infer, &r.id))
        .collect::<Result<Vec<_>>>()?;
    let candidates = pool
        .par_iter()
        .map(|(r, _)| {
            let feature = read_feature(inputs.unlabeled_infer, &r.id)?;
            let entropy = if config.strategy == Strategy::Entropy {
                average_entropy(&read_probs(inputs.unlabeled_infer, &r.id, config.background)?)?
            } else {
                0.0
            };
            Ok(Candidate {
                patch_id: r.id.clone(),
                entropy,
                feature,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (selected, report) = curate_scored(&labeled_features, &candidates, config, seed)?;
    let by_id: HashMap<&str, &(ManifestRecord, PathBuf)> =
        pool.iter().map(|e| (e.0.id.as_str(), e)).collect();
    let mut records = Vec::with_capacity(selected.len());
    for id in &selected {
        let (rec, root) = by_id[id.as_str()];
        let abs = |rel: &str| Manifest::new(root.clone(), Vec::new()).map(|m| m.resolve(rel));
        records.push(ManifestRecord {
            image: abs(&rec.image)?.to_string_lossy().into_owned(),
            mask: rec
                .mask
                .as_deref()
                .map(|m| abs(m).map(|p| p.to_string_lossy().into_owned()))
                .transpose()?,
            ..rec.clone()
        });
    }
    Manifest::new(PathBuf::new(), records)?.write_relocated(out_manifest)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    crate::io::write_bytes(out_report, json.as_bytes())?;
    Ok(report)
}
