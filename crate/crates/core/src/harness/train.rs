use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::ClipFeatures;
use crate::config::{Task, Topology, TrainConfig};
use crate::error::{io_at, Error, Result, TensorError};
use crate::graph::Graph;
use crate::ledger::MemoryLedger;
use crate::rng::Rng;
use crate::tasks::metrics::binary;
use crate::tasks::{miou, segment_accuracy, Dataset, MetricKind};

use super::assembly::{Assembly, Prediction};
use super::optim::Adam;

const SHUFFLE_STREAM: u64 = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// training metric from the epoch's forward passes
    pub metric: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub topology: Topology,
    pub metric: MetricKind,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_train_metric: f64,
    pub final_test_metric: Option<f64>,
    /// retained bytes of the first training iteration
    pub ledger: MemoryLedger,
    /// per-sample iteration time
    pub iter_ms_mean: f64,
    pub iter_ms_sd: f64,
    pub iterations: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
}

impl RunReport {
    /// Test metric when a test split was evaluated, else the training one.
    pub fn headline_metric(&self) -> f64 {
        self.final_test_metric.unwrap_or(self.final_train_metric)
    }

    /// Writes `epochs.csv`, `summary.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
        let path = dir.join("epochs.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_at(&path, e))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| io_at(&path, e))?;
        }
        w.flush().map_err(|e| io_at(&path, e))?;

        let path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_at(&path, e))?;
        w.serialize(SummaryRow::from(self)).map_err(|e| io_at(&path, e))?;
        w.flush().map_err(|e| io_at(&path, e))?;

        let path = dir.join("summary.json");
        let json = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(&path, json).map_err(|e| io_at(&path, e))
    }
}

#[derive(Serialize)]
struct SummaryRow {
    task: &'static str,
    topology: &'static str,
    metric: &'static str,
    seed: u64,
    final_train: f64,
    final_test: Option<f64>,
    trainable_params: usize,
    total_params: usize,
    trainable_fraction: f64,
    retained_backbone: usize,
    retained_adaptation: usize,
    retained_head: usize,
    retained_data: usize,
    retained_total: usize,
    iter_ms_mean: f64,
    iter_ms_sd: f64,
}

impl From<&RunReport> for SummaryRow {
    fn from(r: &RunReport) -> Self {
        Self {
            task: r.task.name(),
            topology: r.topology.name(),
            metric: r.metric.name(),
            seed: r.seed,
            final_train: r.final_train_metric,
            final_test: r.final_test_metric,
            trainable_params: r.trainable_params,
            total_params: r.total_params,
            trainable_fraction: r.trainable_fraction,
            retained_backbone: r.ledger.backbone,
            retained_adaptation: r.ledger.adaptation,
            retained_head: r.ledger.head,
            retained_data: r.ledger.data,
            retained_total: r.ledger.total(),
            iter_ms_mean: r.iter_ms_mean,
            iter_ms_sd: r.iter_ms_sd,
        }
    }
}


/// Accumulates predictions into one task metric.
#[derive(Default)]
struct MetricAcc {
    labels: (Vec<usize>, Vec<usize>),
    masks: (Vec<Vec<bool>>, Vec<Vec<bool>>),
}

impl MetricAcc {
    fn push(&mut self, pred: Prediction, clip: &crate::tasks::Clip) {
        match pred {
            Prediction::Labels(p) => {
                self.labels.0.extend(p);
                self.labels.1.extend(&clip.labels);
            }
            Prediction::Masks(p) => {
                self.masks.0.extend(p);
                self.masks.1.extend(clip.masks.iter().map(binary));
            }
        }
    }

    fn finish(&self, kind: MetricKind) -> Result<f64> {
        match kind {
            MetricKind::SegmentAccuracy => segment_accuracy(&self.labels.0, &self.labels.1),
            MetricKind::Miou => miou(&self.masks.0, &self.masks.1),
        }
    }
}

/// Non-finite values met while training are numeric failures of that epoch.
fn numeric_in(e: Error, epoch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => {
            Error::Numeric(format!("{op} met a non-finite value in epoch {epoch}"))
        }
        e => e,
    }
}

fn cache_all(asm: &Assembly, ds: &Dataset, precision: crate::tensor::Precision) -> Result<Vec<ClipFeatures>> {
    ds.clips.iter().map(|c| asm.cache(c, precision)).collect()
}

fn use_cache(asm: &Assembly, cfg: &TrainConfig) -> bool {
    cfg.cache_features && asm.topology == Topology::Mettle
}

/// Metric of the current weights over a dataset. Weights enter as constants,
/// so nothing is retained.
pub fn evaluate(asm: &Assembly, ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    asm.check_dataset(ds)?;
    let mut acc = MetricAcc::default();
    let mut g = Graph::new(cfg.precision);
    for clip in &ds.clips {
        g.clear();
        let bind = asm.store.bind_frozen(&mut g);
        let out = asm.forward(&mut g, &bind, clip, None)?;
        acc.push(asm.predict(&g, &out), clip);
    }
    acc.finish(asm.task.metric())
}

/// Mini-batch Adam training for `cfg.epochs` epochs; no early stopping.
/// Trainable weights are rounded to f32 before the final evaluation so a
/// saved checkpoint reproduces the reported metrics exactly.
pub fn train(
    asm: &mut Assembly,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunReport> {
    cfg.validate()?;
    asm.check_dataset(train_ds)?;
    if let Some(t) = test_ds {
        asm.check_dataset(t)?;
    }
    let cache = if use_cache(asm, cfg) { Some(cache_all(asm, train_ds, cfg.precision)?) } else { None };
    let ids = asm.store.trainable();
    let mut adam = Adam::new(ids.clone(), &asm.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = Rng::stream(seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut iter_ms = Vec::new();
    let mut ledger = None;
    let mut g = Graph::new(cfg.precision);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        rng.shuffle(&mut order);
        let mut acc = MetricAcc::default();
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let it = Instant::now();
            g.clear();
            let bind = asm.store.bind(&mut g);
            let mut total = None;
            for &i in batch {
                let clip = &train_ds.clips[i];
                let out = asm
                    .forward(&mut g, &bind, clip, cache.as_ref().map(|c| &c[i]))
                    .map_err(|e| numeric_in(e, epoch))?;
                let l = asm.loss(&mut g, &out, clip).map_err(|e| numeric_in(e, epoch))?;
                acc.push(asm.predict(&g, &out), clip);
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let total = total.expect("chunks are nonempty");
            let loss = g.scale(total, 1.0 / batch.len() as f64)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} in epoch {epoch}")));
            }
            loss_sum += value * batch.len() as f64;
            if ledger.is_none() {
                ledger = Some(g.ledger());
            }
            let grads = g.backward(loss).map_err(|e| numeric_in(Error::from(e), epoch))?;
            let gs = bind.grads(&grads, &ids);
            adam.step(&mut asm.store, &gs)?;
            iter_ms.push(it.elapsed().as_secs_f64() * 1e3 / batch.len() as f64);
        }
        epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train_ds.len() as f64,
            metric: acc.finish(asm.task.metric())?,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    asm.round_params(false);
    let final_train_metric = evaluate(asm, train_ds, cfg)?;
    let final_test_metric = test_ds.map(|t| evaluate(asm, t, cfg)).transpose()?;
    let n = iter_ms.len() as f64;
    let mean = iter_ms.iter().sum::<f64>() / n;
    let sd = if iter_ms.len() > 1 {
        (iter_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(RunReport {
        task: asm.task,
        topology: asm.topology,
        metric: asm.task.metric(),
        seed,
        epochs,
        final_train_metric,
        final_test_metric,
        ledger: ledger.expect("at least one iteration"),
        iter_ms_mean: mean,
        iter_ms_sd: sd,
        iterations: iter_ms.len(),
        trainable_params: asm.store.trainable_count(),
        total_params: asm.store.count(),
        trainable_fraction: asm.trainable_fraction(),
    })
}
