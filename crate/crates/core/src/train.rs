//! Semi-supervised pre-training with confidence-masked pseudo-labels, and the
//! optimizer and evaluation helpers shared with fine-tuning.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugConfig};
use crate::data::{Sample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::metrics::{argmax_map, ConfusionMatrix};
use crate::model::{forward, NetParams, PatchOrder, SegNet};
use crate::rng::{self, Slot};
use crate::tensor::{softmax_slice, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Confidence threshold for pseudo-labels.
    pub tau: f64,
    /// Weight of the unsupervised loss.
    pub lambda: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub steps: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.95,
            lambda: 1.0,
            batch_labeled: 8,
            batch_unlabeled: 8,
            steps: 600,
            lr: 1e-3,
            min_lr: 0.0,
            warmup: 20,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 100,
            aug: AugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid learning rate or weight decay".into()));
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to `min_lr` over `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let progress = (step - self.warmup) as f64 / span as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adaptive moments with decoupled weight decay. Parameters that received no
/// gradient in a step are left untouched, decay included.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: &TrainConfig, net: &SegNet) -> Self {
        let mut state = Vec::new();
        net.params.visit(&mut |_, t| {
            state.push(Moments {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
                t: 0,
            })
        });
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            state,
        }
    }

    pub fn step(&mut self, net: &mut SegNet, grads: &[Option<Vec<f64>>], lr: f64) {
        let mut i = 0;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let state = &mut self.state;
        net.params.for_each_mut(&mut |_, p| {
            let idx = i;
            i += 1;
            let Some(g) = &grads[idx] else { return };
            let s = &mut state[idx];
            s.t += 1;
            let c1 = 1.0 - b1.powi(s.t);
            let c2 = 1.0 - b2.powi(s.t);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                s.m[j] = b1 * s.m[j] + (1.0 - b1) * g[j];
                s.v[j] = b2 * s.v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (s.m[j] / c1) / ((s.v[j] / c2).sqrt() + eps);
                *w -= lr * wd * *w;
                *w -= lr * update;
            }
        });
    }
}

/// Gradients of every bound parameter, in parameter order.
pub fn collect_grads(graph: &Graph, vars: &NetParams<Var>) -> Vec<Option<Vec<f64>>> {
    let mut out = Vec::new();
    vars.visit(&mut |_, v| out.push(graph.grad(*v).map(<[f64]>::to_vec)));
    out
}

/// Per-pixel argmax class and its probability; ties go to the lowest class.
pub fn pseudo_label(probs: &[f64], classes: usize) -> (Vec<u16>, Vec<f64>) {
    let labels = argmax_map(probs, classes);
    let conf = probs
        .chunks(classes)
        .zip(&labels)
        .map(|(row, &l)| row[l as usize])
        .collect();
    (labels, conf)
}

/// Row-wise softmax of an `H×W×K` logit field.
pub fn softmax_field(logits: &Tensor) -> Vec<f64> {
    let k = *logits.shape().last().unwrap();
    let mut out = vec![0.0; logits.numel()];
    for (src, dst) in logits.data().chunks(k).zip(out.chunks_mut(k)) {
        softmax_slice(src, dst);
    }
    out
}

/// Mean over images of the per-image mean pixel cross entropy, skipping
/// ignore-label pixels. `labels[b]` is image `b`'s label map in the row order
/// of `logits`.
pub fn supervised_loss(graph: &mut Graph, logits: Var, labels: &[Vec<u16>], ignore: u16) -> Result<Var> {
    let b = labels.len() as f64;
    let mut flat = Vec::new();
    let mut weights = Vec::new();
    for img in labels {
        let valid = img.iter().filter(|&&l| l != ignore).count();
        let w = if valid == 0 { 0.0 } else { 1.0 / (b * valid as f64) };
        for &l in img {
            if l == ignore {
                flat.push(0);
                weights.push(0.0);
            } else {
                flat.push(l as usize);
                weights.push(w);
            }
        }
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    }
    graph.weighted_cross_entropy(logits, &flat, &weights)
}

/// Cross entropy against pseudo-labels on pixels with confidence `>= tau`,
/// divided by the total pixel count. Returns the loss and the masked-in
/// fraction.
pub fn unsupervised_loss(
    graph: &mut Graph,
    logits: Var,
    pseudo: &[Vec<u16>],
    confidence: &[Vec<f64>],
    tau: f64,
) -> Result<(Var, f64)> {
    let total: usize = pseudo.iter().map(Vec::len).sum();
    let mut flat = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut kept = 0usize;
    for (labels, conf) in pseudo.iter().zip(confidence) {
        for (&l, &c) in labels.iter().zip(conf) {
            flat.push(l as usize);
            if c >= tau {
                kept += 1;
                weights.push(1.0 / total as f64);
            } else {
                weights.push(0.0);
            }
        }
    }
    let frac = if total == 0 { 0.0 } else { kept as f64 / total as f64 };
    if kept == 0 {
        return Ok((graph.constant(Tensor::scalar(0.0)), frac));
    }
    Ok((graph.weighted_cross_entropy(logits, &flat, &weights)?, frac))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "L_s")]
    pub loss_s: f64,
    #[serde(rename = "L_u")]
    pub loss_u: f64,
    pub mask_frac: f64,
    pub lr: f64,
    pub miou_eval: Option<f64>,
}

/// Weak views of a sampled labeled batch: `(image, mask)` pairs.
pub fn labeled_views(
    samples: &[Sample],
    seed: u64,
    tag: &str,
    batch: usize,
    step: u64,
    aug: &AugConfig,
) -> Result<Vec<(Tensor, Vec<u16>)>> {
    if samples.is_empty() {
        return Err(Error::Config(format!("no samples for `{tag}`")));
    }
    rng::epoch_batch(seed, tag, samples.len(), batch, step)
        .into_par_iter()
        .map(|i| {
            let s = &samples[i];
            let mask = s
                .mask
                .as_deref()
                .ok_or_else(|| Error::Validation(format!("labeled sample {} has no mask", s.id)))?;
            let mut r = rng::stream(seed, &s.id, step, Slot::WeakAug);
            let (img, m, _) = augment::weak_augment(&s.image, Some(mask), aug, &mut r);
            Ok((img, m.unwrap()))
        })
        .collect()
}

/// Forward a labeled batch on `dataset_id` and return the supervised loss.
pub fn supervised_branch(
    graph: &mut Graph,
    net: &SegNet,
    vars: &NetParams<Var>,
    views: &[(Tensor, Vec<u16>)],
    dataset_id: usize,
) -> Result<Var> {
    let order = PatchOrder::new(&net.config);
    let imgs: Vec<&Tensor> = views.iter().map(|v| &v.0).collect();
    let out = forward(graph, &net.config, vars, &imgs, dataset_id)?;
    let labels: Vec<Vec<u16>> = views.iter().map(|v| order.to_patch_order(&v.1)).collect();
    supervised_loss(graph, out.logits, &labels, IGNORE_LABEL)
}

fn check_finite(what: &str, v: f64, history: &[StepLog]) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let dump: Vec<String> = history
        .iter()
        .map(|l| serde_json::to_string(l).expect("log serializes"))
        .collect();
    Err(Error::Numeric(format!(
        "non-finite {what} ({v}); step history:\n{}",
        dump.join("\n")
    )))
}

/// Unlabeled-branch intermediates of one step.
pub struct UnlabeledBatch {
    pub strong: Vec<Tensor>,
    pub pseudo: Vec<Vec<u16>>,
    pub confidence: Vec<Vec<f64>>,
}

/// Weak views, no-gradient pseudo-labels, strong views and CutMix.
pub fn unlabeled_batch(net: &SegNet, pool: &[Sample], seed: u64, step: u64, cfg: &TrainConfig) -> Result<UnlabeledBatch> {
    if pool.is_empty() {
        return Err(Error::Config("unlabeled pool is empty".into()));
    }
    let picks = rng::epoch_batch(seed, "unlabeled", pool.len(), cfg.batch_unlabeled, step);
    let weak: Vec<Tensor> = picks
        .par_iter()
        .map(|&i| {
            let s = &pool[i];
            let mut r = rng::stream(seed, &s.id, step, Slot::WeakAug);
            augment::weak_augment(&s.image, None, &cfg.aug, &mut r).0
        })
        .collect();
    let refs: Vec<&Tensor> = weak.iter().collect();
    let (logits, _) = net.predict(&refs, 0)?;
    let k = *logits[0].shape().last().unwrap();
    let (mut pseudo, mut confidence): (Vec<_>, Vec<_>) = logits
        .iter()
        .map(|l| pseudo_label(&softmax_field(l), k))
        .unzip();
    let mut strong: Vec<Tensor> = picks
        .par_iter()
        .zip(&weak)
        .map(|(&i, w)| {
            let mut r = rng::stream(seed, &pool[i].id, step, Slot::StrongAug);
            augment::strong_augment(w, &cfg.aug, &mut r).0
        })
        .collect();
    let mut r = rng::stream(seed, "cutmix", step, Slot::CutMix);
    augment::cutmix_batch(&mut strong, &mut pseudo, &mut confidence, &cfg.aug, &mut r);
    Ok(UnlabeledBatch {
        strong,
        pseudo,
        confidence,
    })
}

/// Loss terms of one step, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: Var,
    pub supervised: Var,
    pub unsupervised: Option<Var>,
    pub mask_frac: f64,
}

/// Build `L_s + λ·L_u` on `graph` for fixed labeled views and, optionally,
/// a fixed unlabeled batch.
pub fn step_loss(
    graph: &mut Graph,
    net: &SegNet,
    vars: &NetParams<Var>,
    views: &[(Tensor, Vec<u16>)],
    unlabeled: Option<&UnlabeledBatch>,
    cfg: &TrainConfig,
) -> Result<StepLoss> {
    let ls = supervised_branch(graph, net, vars, views, 0)?;
    let Some(ub) = unlabeled else {
        return Ok(StepLoss {
            total: ls,
            supervised: ls,
            unsupervised: None,
            mask_frac: 0.0,
        });
    };
    let order = PatchOrder::new(&net.config);
    let refs: Vec<&Tensor> = ub.strong.iter().collect();
    let out = forward(graph, &net.config, vars, &refs, 0)?;
    let pseudo: Vec<Vec<u16>> = ub.pseudo.iter().map(|p| order.to_patch_order(p)).collect();
    let conf: Vec<Vec<f64>> = ub.confidence.iter().map(|c| order.to_patch_order(c)).collect();
    let (lu, frac) = unsupervised_loss(graph, out.logits, &pseudo, &conf, cfg.tau)?;
    let weighted = graph.scale(lu, cfg.lambda);
    Ok(StepLoss {
        total: graph.add(ls, weighted)?,
        supervised: ls,
        unsupervised: Some(lu),
        mask_frac: frac,
    })
}

/// One optimization step of `L_s + λ·L_u` (or `L_s` alone without a pool).
pub fn train_step(
    net: &mut SegNet,
    opt: &mut AdamW,
    labeled: &[Sample],
    unlabeled: Option<&[Sample]>,
    cfg: &TrainConfig,
    seed: u64,
    step: usize,
    history: &[StepLog],
) -> Result<StepLog> {
    let lr = cfg.lr_at(step);
    let s = step as u64;
    let views = labeled_views(labeled, seed, "labeled", cfg.batch_labeled, s, &cfg.aug)?;
    let ub = match unlabeled {
        Some(pool) => Some(unlabeled_batch(net, pool, seed, s, cfg)?),
        None => None,
    };
    let mut g = Graph::new();
    let vars = net.bind(&mut g, true);
    let loss = step_loss(&mut g, net, &vars, &views, ub.as_ref(), cfg)?;
    let log = StepLog {
        step,
        loss_s: g.scalar_value(loss.supervised),
        loss_u: loss.unsupervised.map_or(0.0, |v| g.scalar_value(v)),
        mask_frac: loss.mask_frac,
        lr,
        miou_eval: None,
    };
    let total = loss.total;
    check_finite("loss", g.scalar_value(total), history)?;
    g.backward(total)?;
    let grads = collect_grads(&g, &vars);
    for gr in grads.iter().flatten() {
        if let Some(v) = gr.iter().find(|v| !v.is_finite()) {
            check_finite("gradient", *v, history)?;
        }
    }
    opt.step(net, &grads, lr);
    Ok(log)
}

/// Confusion matrix of `net` on `samples` through decoder `dataset_id`.
pub fn confusion(net: &SegNet, samples: &[Sample], dataset_id: usize) -> Result<ConfusionMatrix> {
    let classes = net.decoder_classes()[dataset_id];
    let parts = samples
        .par_chunks(8)
        .map(|chunk| {
            let imgs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let (logits, _) = net.predict(&imgs, dataset_id)?;
            let mut cm = ConfusionMatrix::new(classes);
            for (l, s) in logits.iter().zip(chunk) {
                let truth = s
                    .mask
                    .as_deref()
                    .ok_or_else(|| Error::Validation(format!("sample {} has no mask", s.id)))?;
                cm.add(&argmax_map(l.data(), classes), truth, IGNORE_LABEL);
            }
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(classes);
    for p in &parts {
        cm.merge(p);
    }
    Ok(cm)
}

/// Train for `cfg.steps` steps. Without an unlabeled pool this is the
/// supervised-only baseline. Returns the trained network and one log per
/// step; `miou_eval` is filled every `eval_every` steps and at the end.
pub fn pretrain(
    mut net: SegNet,
    labeled: &[Sample],
    val: &[Sample],
    unlabeled: Option<&[Sample]>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SegNet, Vec<StepLog>)> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("labeled manifest has no training samples".into()));
    }
    if unlabeled.is_some_and(<[Sample]>::is_empty) {
        return Err(Error::Config("unlabeled manifest is empty".into()));
    }
    let mut opt = AdamW::new(cfg, &net);
    let mut history: Vec<StepLog> = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut log = train_step(&mut net, &mut opt, labeled, unlabeled, cfg, seed, step, &history)?;
        let last = step + 1 == cfg.steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if !val.is_empty() && (last || due) {
            log.miou_eval = Some(confusion(&net, val, 0)?.miou());
        }
        history.push(log);
    }
    Ok((net, history))
}

pub fn write_metrics(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(l).expect("log serializes"));
        text.push('\n');
    }
    crate::io::write_bytes(path, text.as_bytes())
}

/// Plot-ready series aggregated from a metrics log, one entry per line.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlotData {
    pub step: Vec<usize>,
    #[serde(rename = "L_s")]
    pub loss_s: Vec<f64>,
    #[serde(rename = "L_u")]
    pub loss_u: Vec<f64>,
    pub mask_frac: Vec<f64>,
    pub lr: Vec<f64>,
    pub miou_eval: Vec<Option<f64>>,
}

/// Parse a metrics log written by [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<PlotData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = PlotData::default();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let log: StepLog = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.step.push(log.step);
        out.loss_s.push(log.loss_s);
        out.loss_u.push(log.loss_u);
        out.mask_frac.push(log.mask_frac);
        out.lr.push(log.lr);
        out.miou_eval.push(log.miou_eval);
    }
    Ok(out)
}
