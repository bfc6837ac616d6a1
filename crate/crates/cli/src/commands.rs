use std::io::Write;
use std::path::{Path, PathBuf};

use mettle_core::config::{ExperimentConfig, Task, Topology};
use mettle_core::harness::{self, check, AblationAxis, Assembly};
use mettle_core::tasks::Dataset;
use mettle_core::{weights, Error, Result, Tag, Tensor};
use serde::Serialize;

use crate::Common;

const GRADCHECK_STEP: f64 = 1e-4;

fn io(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

/// Config with its seed resolved; `--seed` wins over the file.
fn load(c: &Common) -> Result<(ExperimentConfig, u64)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    let seed = c
        .seed
        .or(cfg.seed)
        .ok_or_else(|| Error::Config("no seed: pass --seed or set `seed` in the config".into()))?;
    cfg.seed = Some(seed);
    Ok((cfg, seed))
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> Option<PathBuf> {
    c.out.clone().or_else(|| cfg.output_dir.clone())
}

fn require_out(c: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = out_dir(c, cfg)
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `output_dir`".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    Ok(dir)
}

fn write_csv<T: Serialize>(rows: &[T], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = csv::Writer::from_path(p).map_err(|e| io(p, e))?;
            for r in rows {
                w.serialize(r).map_err(|e| io(p, e))?;
            }
            w.flush().map_err(|e| io(p, e))
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in rows {
                w.serialize(r).map_err(|e| io(Path::new("<stdout>"), e))?;
            }
            w.flush().map_err(|e| io(Path::new("<stdout>"), e))
        }
    }
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    std::fs::write(path, text + "\n").map_err(|e| io(path, e))
}

fn clip_tensors(ds: &Dataset) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for (i, clip) in ds.clips.iter().enumerate() {
        for (t, (v, a)) in clip.visual.iter().zip(&clip.audio).enumerate() {
            out.push((format!("clip{i}.t{t}.visual"), v.clone()));
            out.push((format!("clip{i}.t{t}.audio"), a.clone()));
            if let Some(m) = clip.masks.get(t) {
                out.push((format!("clip{i}.t{t}.mask"), m.clone()));
            }
        }
        let labels = clip.labels.iter().map(|&l| l as f64).collect();
        out.push((format!("clip{i}.labels"), Tensor::new(vec![clip.labels.len()], labels, Tag::Data)?));
    }
    Ok(out)
}

pub fn gen_data(c: &Common) -> Result<()> {
    let (cfg, seed) = load(c)?;
    let dir = require_out(c, &cfg)?;
    let (train, test) = harness::datasets(&cfg, seed)?;
    weights::save(&dir.join("train.mtlw"), &clip_tensors(&train)?)?;
    if let Some(t) = &test {
        weights::save(&dir.join("test.mtlw"), &clip_tensors(t)?)?;
    }
    let spec = match cfg.task {
        Task::Classify => serde_json::to_value(&cfg.dataset.classify),
        _ => serde_json::to_value(cfg.seg_spec()).map(|mut v| {
            v["multi_source"] = serde_json::Value::Bool(cfg.task == Task::SegmentMulti);
            v
        }),
    }
    .expect("spec serialises");
    let sidecar = serde_json::json!({
        "task": cfg.task,
        "seed": seed,
        "n_train": train.len(),
        "n_test": test.as_ref().map_or(0, Dataset::len),
        "timestamps": train.timestamps(),
        "label_count": train.label_count,
        "visual": train.visual,
        "audio": train.audio,
        "spec": spec,
    });
    write_json(&sidecar, &dir.join("dataset.json"))
}

pub fn train(c: &Common) -> Result<()> {
    let (cfg, seed) = load(c)?;
    let dir = require_out(c, &cfg)?;
    let (asm, report) = harness::run(&cfg, seed)?;
    report.write(&dir)?;
    let params: Vec<(String, Tensor)> = asm
        .store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.clone()))
        .collect();
    weights::save(&dir.join("weights.mtlw"), &params)?;
    write_json(&cfg, &dir.join("config.json"))?;
    println!(
        "{} {} seed {seed}: train {} test {}",
        cfg.task.name(),
        cfg.topology.name(),
        report.final_train_metric,
        report.final_test_metric.map_or("-".into(), |m| m.to_string())
    );
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    split: &'static str,
    metric: &'static str,
    value: f64,
}

pub fn eval(c: &Common, weights_path: &Path) -> Result<()> {
    let (cfg, seed) = load(c)?;
    let mut asm = Assembly::build(&cfg, seed)?;
    asm.store.load_from(&weights::load(weights_path, Tag::Data)?)?;
    let (train, test) = harness::datasets(&cfg, seed)?;
    let metric = cfg.task.metric().name();
    let mut rows = vec![MetricRow {
        split: "train",
        metric,
        value: harness::evaluate(&asm, &train, &cfg.train)?,
    }];
    if let Some(t) = &test {
        rows.push(MetricRow {
            split: "test",
            metric,
            value: harness::evaluate(&asm, t, &cfg.train)?,
        });
    }
    let path = match out_dir(c, &cfg) {
        Some(d) => {
            std::fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
            Some(d.join("metrics.csv"))
        }
        None => None,
    };
    write_csv(&rows, path.as_deref())
}

#[derive(Serialize)]
struct MemcmpRow {
    task: &'static str,
    seed: u64,
    mettle_retained: usize,
    adapter_retained: usize,
    retained_ratio: f64,
    mettle_below_adapter: bool,
    mettle_backbone_retained: usize,
    adapter_backbone_retained: usize,
    mettle_trainable: usize,
    adapter_trainable: usize,
    total_params: usize,
    mettle_iter_ms: f64,
    adapter_iter_ms: f64,
    mettle_metric: Option<f64>,
    adapter_metric: Option<f64>,
}

pub fn memcmp(c: &Common, reps: usize, with_metric: bool) -> Result<()> {
    let (cfg, seed) = load(c)?;
    let mut mc = cfg.clone();
    mc.topology = Topology::Mettle;
    let mut ac = cfg.clone();
    ac.topology = Topology::Adapter;
    ac.validate()?;
    let clip = harness::dataset(&cfg, seed, mettle_core::tasks::Split::Train)?.clips.remove(0);
    let cmp = harness::compare_memory(
        &Assembly::build(&mc, seed)?,
        &Assembly::build(&ac, seed)?,
        &clip,
        cfg.train.precision,
        reps,
    )?;
    let (mettle_metric, adapter_metric) = if with_metric {
        (
            Some(harness::run(&mc, seed)?.1.headline_metric()),
            Some(harness::run(&ac, seed)?.1.headline_metric()),
        )
    } else {
        (None, None)
    };
    let row = MemcmpRow {
        task: cfg.task.name(),
        seed,
        mettle_retained: cmp.mettle.ledger.total(),
        adapter_retained: cmp.adapter.ledger.total(),
        retained_ratio: cmp.ratio,
        mettle_below_adapter: cmp.mettle.ledger.total() < cmp.adapter.ledger.total(),
        mettle_backbone_retained: cmp.mettle.ledger.backbone,
        adapter_backbone_retained: cmp.adapter.ledger.backbone,
        mettle_trainable: cmp.mettle.trainable_params,
        adapter_trainable: cmp.adapter.trainable_params,
        total_params: cmp.mettle.total_params,
        mettle_iter_ms: cmp.mettle.iter_seconds * 1e3,
        adapter_iter_ms: cmp.adapter.iter_seconds * 1e3,
        mettle_metric,
        adapter_metric,
    };
    let path = match out_dir(c, &cfg) {
        Some(d) => {
            std::fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
            Some(d.join("memcmp.csv"))
        }
        None => None,
    };
    write_csv(&[row], path.as_deref())
}

#[derive(Serialize)]
struct GradcheckRow {
    max_rel_err: f64,
    tolerance: f64,
    coordinates: usize,
    worst_param: String,
    worst_index: usize,
    analytic: f64,
    numeric: f64,
    pass: bool,
}

pub fn gradcheck(c: &Common, tolerance: f64) -> Result<()> {
    let (cfg, seed) = load(c)?;
    let asm = Assembly::build(&cfg, seed)?;
    let clip = harness::dataset(&cfg, seed, mettle_core::tasks::Split::Train)?.clips.remove(0);
    let r = harness::assembly_gradcheck(&asm, &clip, GRADCHECK_STEP, check::LADDER_RUNGS)?;
    let ids = asm.store.trainable();
    let row = GradcheckRow {
        max_rel_err: r.max_rel_err,
        tolerance,
        coordinates: r.coordinates,
        worst_param: ids.get(r.worst.0).map_or(String::new(), |&id| asm.store.name(id).to_string()),
        worst_index: r.worst.1,
        analytic: r.analytic_at_worst,
        numeric: r.numeric_at_worst,
        pass: r.passes(tolerance),
    };
    if let Some(d) = out_dir(c, &cfg) {
        std::fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
        write_csv(std::slice::from_ref(&row), Some(&d.join("gradcheck.csv")))?;
    }
    println!(
        "max_rel_err={:e} coordinates={} worst={}[{}] {}",
        row.max_rel_err,
        row.coordinates,
        row.worst_param,
        row.worst_index,
        if row.pass { "PASS" } else { "FAIL" }
    );
    std::io::stdout().flush().map_err(|e| io(Path::new("<stdout>"), e))?;
    if row.pass {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:e} is not below {tolerance:e}",
            row.max_rel_err
        )))
    }
}

pub fn ablate(c: &Common, axis: &str, grid: &[String]) -> Result<()> {
    let (cfg, seed) = load(c)?;
    let axis: AblationAxis = axis.parse()?;
    let rows = harness::ablate(&cfg, axis, grid, seed)?;
    match out_dir(c, &cfg) {
        Some(d) => harness::ablate::write_rows(&rows, &d.join(format!("ablation_{}.csv", axis.name()))),
        None => write_csv(&rows, None),
    }
}

pub fn schema(out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&ExperimentConfig::schema()).expect("schema serialises") + "\n";
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
