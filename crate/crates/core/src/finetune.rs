//! Single- and multi-dataset fine-tuning, with or without FFN experts.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::io::Manifest;
use crate::model::{param_count, Regime, SegNet};
use crate::rng::{self, Slot};
use crate::tensor::Graph;
use crate::train::{self, AdamW, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    /// Manifest holding this dataset's records (matched on `dataset == name`).
    pub manifest: PathBuf,
    /// Separate validation manifest; when absent the `val` split of
    /// `manifest` is used.
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    pub num_classes: usize,
    #[serde(default = "default_ignore")]
    pub ignore_label: u16,
}

fn default_ignore() -> u16 {
    IGNORE_LABEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiDatasetSpec {
    pub datasets: Vec<DatasetEntry>,
}

impl MultiDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("dataset spec lists no datasets".into()));
        }
        let mut seen = HashSet::new();
        for d in &self.datasets {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate dataset name `{}`", d.name)));
            }
            if d.num_classes == 0 {
                return Err(Error::Config(format!("dataset `{}` has zero classes", d.name)));
            }
        }
        Ok(())
    }

    /// Read a spec; relative manifest paths resolve against the spec's
    /// directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: MultiDatasetSpec =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut spec.datasets {
            d.manifest = base.join(&d.manifest);
            d.val_manifest = d.val_manifest.as_ref().map(|v| base.join(v));
        }
        spec.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(spec)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.datasets.iter().map(|d| d.num_classes).collect()
    }
}

/// Train and validation samples of one dataset.
#[derive(Debug, Clone)]
pub struct DatasetSamples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn load_dataset(entry: &DatasetEntry) -> Result<DatasetSamples> {
    let m = Manifest::read(&entry.manifest)?.filter(|r| r.dataset == entry.name);
    let (train, val) = match &entry.val_manifest {
        Some(v) => {
            let vm = Manifest::read(v)?.filter(|r| r.dataset == entry.name);
            (m, vm)
        }
        None => (m.filter(|r| r.split != "val"), m.filter(|r| r.split == "val")),
    };
    let out = DatasetSamples {
        train: data::load_samples(&train)?,
        val: data::load_samples(&val)?,
    };
    if out.train.is_empty() {
        return Err(Error::Config(format!("dataset `{}` has no training samples", entry.name)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    #[default]
    RoundRobin,
    Proportional,
}

/// Which dataset serves each global step, and that dataset's own step count.
#[derive(Debug, Clone)]
pub struct Scheduler {
    mode: ScheduleMode,
    sizes: Vec<usize>,
    served: Vec<u64>,
    seed: u64,
}

impl Scheduler {
    pub fn new(mode: ScheduleMode, sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config("every scheduled dataset must be non-empty".into()));
        }
        Ok(Scheduler {
            mode,
            sizes: sizes.to_vec(),
            served: vec![0; sizes.len()],
            seed,
        })
    }

    /// `(dataset_id, local_step)` for global `step`. Steps must be requested
    /// in order.
    pub fn next(&mut self, step: u64) -> (usize, u64) {
        let t = match self.mode {
            ScheduleMode::RoundRobin => (step % self.sizes.len() as u64) as usize,
            ScheduleMode::Proportional => {
                let total: usize = self.sizes.iter().sum();
                let mut r = rng::stream(self.seed, "schedule", step, Slot::Schedule).random_range(0..total);
                let mut t = 0;
                while r >= self.sizes[t] {
                    r -= self.sizes[t];
                    t += 1;
                }
                t
            }
        };
        let local = self.served[t];
        self.served[t] += 1;
        (t, local)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub schedule: ScheduleMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            train: TrainConfig {
                steps: 300,
                ..TrainConfig::default()
            },
            schedule: ScheduleMode::RoundRobin,
        }
    }
}

/// What happened on one fine-tuning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStep {
    pub step: usize,
    pub dataset: usize,
    pub loss: f64,
}

/// Supervised training of `net` over `datasets`, routing each step to the
/// scheduled dataset's decoder and expert. Sampling streams are keyed by
/// routing index. `observe` runs after every update.
pub fn train_routed(
    net: &mut SegNet,
    datasets: &[&DatasetSamples],
    config: &FinetuneConfig,
    seed: u64,
    mut observe: impl FnMut(&SegNet, &FinetuneStep),
) -> Result<Vec<FinetuneStep>> {
    let cfg = &config.train;
    cfg.validate()?;
    let sizes: Vec<usize> = datasets.iter().map(|d| d.train.len()).collect();
    let mut sched = Scheduler::new(config.schedule, &sizes, seed)?;
    let mut opt = AdamW::new(cfg, net);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (t, local) = sched.next(step as u64);
        let views = train::labeled_views(&datasets[t].train, seed, &format!("route{t}"), cfg.batch_labeled, local, &cfg.aug)?;
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let loss = train::supervised_branch(&mut g, net, &vars, &views, t)?;
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at step {step}")));
        }
        g.backward(loss)?;
        let grads = train::collect_grads(&g, &vars);
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        opt.step(net, &grads, cfg.lr_at(step));
        let rec = FinetuneStep {
            step,
            dataset: t,
            loss: value,
        };
        observe(net, &rec);
        log.push(rec);
    }
    Ok(log)
}

/// Fine-tuned networks: one per dataset under SDF, one shared otherwise.
#[derive(Debug, Clone)]
pub struct Finetuned {
    pub regime: Regime,
    pub names: Vec<String>,
    pub models: Vec<SegNet>,
    pub log: Vec<FinetuneStep>,
}

impl Finetuned {
    /// Network and decoder index serving dataset `t`.
    pub fn route(&self, t: usize) -> (&SegNet, usize) {
        match self.regime {
            Regime::Sdf => (&self.models[t], 0),
            _ => (&self.models[0], t),
        }
    }
}

/// Build the network a regime starts from.
pub fn prepare(init: &SegNet, regime: Regime, classes: &[usize], alpha: f64, seed: u64) -> Result<Vec<SegNet>> {
    if init.config.moe_enabled {
        return Err(Error::Config("fine-tuning starts from a plain-FFN checkpoint".into()));
    }
    match regime {
        Regime::Sdf => classes.iter().map(|&k| init.with_decoders(&[k], seed)).collect(),
        Regime::Mdf => Ok(vec![init.with_decoders(classes, seed)?]),
        Regime::MoeMdf => Ok(vec![init.to_moe(alpha, classes, seed)?]),
    }
}

pub fn finetune(
    init: &SegNet,
    spec: &MultiDatasetSpec,
    data: &[DatasetSamples],
    regime: Regime,
    alpha: f64,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<Finetuned> {
    spec.validate()?;
    let names: Vec<&str> = spec.datasets.iter().map(|d| d.name.as_str()).collect();
    let mut models = prepare(init, regime, &spec.classes(), alpha, seed)?;
    let mut log = Vec::new();
    if regime == Regime::Sdf {
        for (t, net) in models.iter_mut().enumerate() {
            let steps = train_routed(net, &[&data[t]], config, seed, |_, _| {})?;
            log.extend(steps.into_iter().map(|s| FinetuneStep { dataset: t, ..s }));
        }
    } else {
        let refs: Vec<&DatasetSamples> = data.iter().collect();
        log = train_routed(&mut models[0], &refs, config, seed, |_, _| {})?;
    }
    Ok(Finetuned {
        regime,
        names: names.iter().map(|s| s.to_string()).collect(),
        models,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTotals {
    pub single: u64,
    pub multiple: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub datasets: BTreeMap<String, DatasetScore>,
    pub average: f64,
    pub params: ParamTotals,
}

pub fn evaluate(ft: &Finetuned, spec: &MultiDatasetSpec, data: &[DatasetSamples]) -> Result<EvalReport> {
    let mut datasets = BTreeMap::new();
    let mut sum = 0.0;
    for (t, entry) in spec.datasets.iter().enumerate() {
        let (net, id) = ft.route(t);
        let cm = train::confusion(net, &data[t].val, id)?;
        sum += cm.miou();
        datasets.insert(
            entry.name.clone(),
            DatasetScore {
                miou: cm.miou(),
                per_class_iou: cm.per_class_iou(),
            },
        );
    }
    let base = &ft.models[0].config;
    let counts = param_count(base, ft.regime, &spec.classes())?;
    Ok(EvalReport {
        regime: ft.regime,
        datasets,
        average: sum / spec.datasets.len() as f64,
        params: ParamTotals {
            single: counts.total_single,
            multiple: counts.total_multiple,
        },
    })
}

pub const META_FILE: &str = "finetune.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneMeta {
    pub regime: Regime,
    pub datasets: Vec<String>,
    pub checkpoints: Vec<String>,
}

pub fn save(ft: &Finetuned, dir: &Path) -> Result<()> {
    let mut checkpoints = Vec::new();
    for (i, m) in ft.models.iter().enumerate() {
        let name = match ft.regime {
            Regime::Sdf => format!("model_{}.s5ck", ft.names[i]),
            _ => "model.s5ck".to_string(),
        };
        m.save(&dir.join(&name))?;
        checkpoints.push(name);
    }
    let meta = FinetuneMeta {
        regime: ft.regime,
        datasets: ft.names.clone(),
        checkpoints,
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    crate::io::write_bytes(&dir.join(META_FILE), text.as_bytes())?;
    let mut log = String::new();
    for s in &ft.log {
        log.push_str(&serde_json::to_string(s).expect("step serializes"));
        log.push('\n');
    }
    crate::io::write_bytes(&dir.join("finetune_log.jsonl"), log.as_bytes())
}

pub fn load(dir: &Path) -> Result<Finetuned> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: FinetuneMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let models = meta
        .checkpoints
        .iter()
        .map(|c| SegNet::load(&dir.join(c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Finetuned {
        regime: meta.regime,
        names: meta.datasets,
        models,
        log: Vec::new(),
    })
}
