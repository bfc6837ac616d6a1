//! Acceptance suite: one line per criterion, then a nonzero exit if any
//! criterion failed. Run alone with `cargo test -p mettle-cli --test acceptance`;
//! pass criterion numbers (`-- 3 7`) to run a subset.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{adapter_classification_elements, mettle_classification_elements};
use mettle_core::backbone::BackboneConfig;
use mettle_core::config::{ExperimentConfig, Task, Topology};
use mettle_core::harness::audit::step_cost;
use mettle_core::harness::{self, gradient_flow_audit, AblationAxis, Adam, Assembly};
use mettle_core::lcd::{aggregate, distill, LcdConfig, StepNodes};
use mettle_core::mti::inject;
use mettle_core::tasks::data::{clip_templates, seg_templates};
use mettle_core::tasks::metrics::binary;
use mettle_core::tasks::{audio_aware_oracle, miou, nearest_template_oracle, segment_accuracy, Split};
use mettle_core::{Graph, NodeId, ParamStore, Precision, Rng, Tag, Tensor};

const GRADCHECK_TOL: f64 = 1e-6;
const GRADCHECK_SECONDS: f64 = 60.0;
const MEMORY_RATIO_MAX: f64 = 0.5;
const RUNTIME_ITERATIONS: usize = 100;
const CLASSIFY_ACCURACY: f64 = 0.95;
const CLASSIFY_EPOCHS: usize = 60;
const CLASSIFY_SECONDS: f64 = 120.0;
const SEGMENT_MIOU: f64 = 0.80;
const SEGMENT_EPOCHS: usize = 200;
const CROSS_EPOCHS: usize = 120;
const CROSS_GAP: f64 = 0.05;
const SEEDS: [u64; 3] = [0, 1, 2];
const SOFTMAX_TOL: f64 = 1e-9;
const AGGREGATE_TOL: f64 = 1e-12;
const ADAM_TOL: f64 = 1e-12;
const ABLATION_EPOCHS: usize = 20;
const K_SPREAD: f64 = 0.01;

struct Verdict {
    pass: bool,
    /// violations are reported, not failed
    documented: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, documented: false, detail }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mettle(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mettle")).args(args).output().expect("binary runs")
}

fn small(task: Task) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(task);
    cfg.backbone = BackboneConfig::small();
    cfg
}

fn first_clip(cfg: &ExperimentConfig, seed: u64) -> mettle_core::tasks::Clip {
    harness::dataset(cfg, seed, Split::Train).unwrap().clips.remove(0)
}

fn gradients() -> Verdict {
    let config = repo().join("configs/tiny.json");
    let start = Instant::now();
    let out = mettle(&["gradcheck", "--config", config.to_str().unwrap()]);
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let err: f64 = stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_rel_err="))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::INFINITY);
    let coords: usize = stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("coordinates="))
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let cfg = ExperimentConfig::load(&config).unwrap();
    let trainable = Assembly::build(&cfg, 0).unwrap().store.trainable_count();
    verdict(
        out.status.success() && err < GRADCHECK_TOL && coords == trainable && secs < GRADCHECK_SECONDS,
        format!("max rel err {err:e} over {coords}/{trainable} coordinates in {secs:.1} s (tol {GRADCHECK_TOL:e}, {GRADCHECK_SECONDS} s)"),
    )
}

fn audit() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for task in [Task::Classify, Task::SegmentSingle, Task::SegmentMulti] {
        let cfg = ExperimentConfig::tiny(task);
        let clip = first_clip(&cfg, 0);
        let mut asm = Assembly::build(&cfg, 0).unwrap();
        let m = gradient_flow_audit(&asm, &clip, Precision::F64).unwrap();
        let mut acfg = cfg.clone();
        acfg.topology = Topology::Adapter;
        let a = gradient_flow_audit(&Assembly::build(&acfg, 0).unwrap(), &clip, Precision::F64).unwrap();
        let layer: Vec<_> = asm
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with("backbone.visual.s2.l0."))
            .map(|(id, _, _)| id)
            .collect();
        for &id in &layer {
            asm.store.set_trainable(id, true);
        }
        let control = gradient_flow_audit(&asm, &clip, Precision::F64).unwrap();
        ok &= m.passed && m.ledger.backbone == 0 && m.backbone_grad_nodes == 0;
        ok &= !a.passed && a.ledger.backbone > 0;
        ok &= !layer.is_empty() && !control.passed;
        notes.push(format!(
            "{}: mettle {} adapter {} ({} B backbone) control {}",
            task.name(),
            if m.passed { "PASS" } else { "FAIL" },
            if a.passed { "PASS" } else { "FAIL" },
            a.ledger.backbone,
            if control.passed { "PASS" } else { "FAIL" }
        ));
    }
    verdict(ok, notes.join("; "))
}

fn memory() -> Verdict {
    let mut base = ExperimentConfig::new(Task::Classify);
    base.dataset.n_train = 4;
    base.dataset.n_test = 0;
    let frames = base.dataset.classify.timestamps;
    let (common, labels, rank) = (base.lcd.common_dim, base.labels(), base.adapter.bottleneck_rank);
    let width = Precision::F64.width();
    let mut ok = frames == 5;
    let mut adapter_totals = Vec::new();
    let mut ratio_at_8 = f64::NAN;
    let mut oracle_ratio = f64::NAN;
    for per_stage in [1, 2, 3] {
        let mut cfg = base.clone();
        cfg.backbone = cfg.backbone.clone().with_layers(per_stage);
        let depth = cfg.backbone.layers_per_stage.iter().sum::<usize>();
        let clip = first_clip(&cfg, 0);
        let m = step_cost(&Assembly::build(&cfg, 0).unwrap(), &clip, Precision::F64, 1).unwrap().ledger;
        cfg.topology = Topology::Adapter;
        let a = step_cost(&Assembly::build(&cfg, 0).unwrap(), &clip, Precision::F64, 1).unwrap().ledger;
        let mo = mettle_classification_elements(&cfg.backbone, 1, 1, common, labels, frames).times(width);
        let ao = adapter_classification_elements(&cfg.backbone, rank, common, labels, frames).times(width);
        ok &= m.backbone == 0;
        ok &= (m.backbone, m.adaptation, m.head, m.data) == (mo.backbone, mo.adaptation, mo.head, mo.data);
        ok &= (a.backbone, a.adaptation, a.head, a.data) == (ao.backbone, ao.adaptation, ao.head, ao.data);
        adapter_totals.push((depth, a.total()));
        if depth == 8 {
            ratio_at_8 = m.total() as f64 / a.total() as f64;
            oracle_ratio = mo.total() as f64 / ao.total() as f64;
        }
    }
    ok &= adapter_totals.windows(2).all(|w| w[0].1 < w[1].1);
    ok &= ratio_at_8 < MEMORY_RATIO_MAX && ratio_at_8 == oracle_ratio;
    let sweep: Vec<String> = adapter_totals.iter().map(|(l, b)| format!("L={l}: {b} B")).collect();
    verdict(
        ok,
        format!("ratio at L=8 {ratio_at_8:.4} (oracle {oracle_ratio:.4}, max {MEMORY_RATIO_MAX}); adapter {}", sweep.join(", ")),
    )
}

fn runtime() -> Verdict {
    let mut cfg = small(Task::Classify);
    cfg.train.cache_features = false;
    cfg.dataset.n_test = 0;
    cfg.train.epochs = RUNTIME_ITERATIONS.div_ceil(cfg.dataset.n_train.div_ceil(cfg.train.batch_size));
    let (_, m) = harness::run(&cfg, 0).unwrap();
    cfg.topology = Topology::Adapter;
    let (_, a) = harness::run(&cfg, 0).unwrap();
    verdict(
        m.iterations >= RUNTIME_ITERATIONS && a.iterations >= RUNTIME_ITERATIONS && m.iter_ms_mean < a.iter_ms_mean,
        format!(
            "mettle {:.3} ± {:.3} ms, adapter {:.3} ± {:.3} ms per sample over {} iterations",
            m.iter_ms_mean, m.iter_ms_sd, a.iter_ms_mean, a.iter_ms_sd, m.iterations
        ),
    )
}

fn classify_ceiling(cfg: &ExperimentConfig, seed: u64) -> f64 {
    let ds = harness::dataset(cfg, seed, Split::Test).unwrap();
    let tpl = clip_templates(&cfg.dataset.classify, cfg.backbone.visual, cfg.backbone.audio, seed);
    let (p, t): (Vec<usize>, Vec<usize>) = ds
        .clips
        .iter()
        .flat_map(|c| nearest_template_oracle(&tpl, c).into_iter().zip(c.labels.clone()))
        .unzip();
    segment_accuracy(&p, &t).unwrap()
}

fn segment_ceiling(cfg: &ExperimentConfig, seed: u64) -> f64 {
    let spec = cfg.seg_spec();
    let ds = harness::dataset(cfg, seed, Split::Test).unwrap();
    let tpl = seg_templates(&spec, cfg.backbone.visual, cfg.backbone.audio, seed);
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for c in &ds.clips {
        p.extend(audio_aware_oracle(&tpl, &spec, cfg.backbone.visual, c).iter().map(binary));
        t.extend(c.masks.iter().map(binary));
    }
    miou(&p, &t).unwrap()
}

fn learning() -> Verdict {
    let mut cfg = small(Task::Classify);
    let spec = &cfg.dataset.classify;
    let mut ok = spec.classes == 4 && spec.noise == 0.1 && cfg.dataset.n_train == 80;
    cfg.train.epochs = CLASSIFY_EPOCHS;
    let start = Instant::now();
    let (_, c) = harness::run(&cfg, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let acc = c.final_test_metric.unwrap();
    ok &= acc >= CLASSIFY_ACCURACY && secs < CLASSIFY_SECONDS;

    let mut scfg = small(Task::SegmentSingle);
    scfg.train.epochs = SEGMENT_EPOCHS;
    let (_, s) = harness::run(&scfg, 0).unwrap();
    let iou = s.final_test_metric.unwrap();
    ok &= iou >= SEGMENT_MIOU;
    verdict(
        ok,
        format!(
            "classification test accuracy {acc:.3} after {CLASSIFY_EPOCHS} epochs in {secs:.1} s (oracle {:.3}); \
             single-source test mIoU {iou:.3} after {SEGMENT_EPOCHS} epochs (oracle {:.3})",
            classify_ceiling(&cfg, 0),
            segment_ceiling(&scfg, 0)
        ),
    )
}

fn cross_modal() -> Verdict {
    let mut cfg = small(Task::SegmentMulti);
    cfg.train.epochs = CROSS_EPOCHS;
    let mut blind = cfg.clone();
    blind.mti.enable_cross = false;
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let full = harness::run(&cfg, seed).unwrap().1.headline_metric();
        let none = harness::run(&blind, seed).unwrap().1.headline_metric();
        ok &= full - none >= CROSS_GAP;
        notes.push(format!("seed {seed}: {full:.3} vs {none:.3}"));
    }
    verdict(ok, format!("full vs no-cross test mIoU, gap >= {CROSS_GAP}: {}", notes.join(", ")))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mechanisms() -> Verdict {
    let mut rng = Rng::new(7);
    let mut fails = Vec::new();

    // softmax rows over a two-head, three-step LCD in the full assembly
    let mut cfg = ExperimentConfig::tiny(Task::Classify);
    cfg.lcd.heads = 2;
    cfg.lcd.r_audio = 3;
    cfg.lcd.r_visual = 3;
    let asm = Assembly::build(&cfg, 0).unwrap();
    let clip = first_clip(&cfg, 0);
    let mut g = Graph::default();
    let bind = asm.store.bind(&mut g);
    asm.forward(&mut g, &bind, &clip, None).unwrap();
    let probs: Vec<NodeId> = g.nodes().filter(|i| i.op == "softmax_rows").map(|i| i.id).collect();
    let worst = probs
        .iter()
        .flat_map(|&p| {
            let t = g.value(p);
            let c = t.shape()[1];
            t.data().chunks(c).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    if probs.is_empty() || worst > SOFTMAX_TOL {
        fails.push(format!("softmax rows off by {worst:e}"));
    }

    // zero meta-tokens leave visual tokens untouched; one meta-token is broadcast
    let v = rng.normal_tensor(&[6, 4], 1.0, Tag::Data);
    let m1 = rng.normal_tensor(&[1, 4], 1.0, Tag::Adaptation);
    for scaled in [true, false] {
        let mut g = Graph::default();
        let vn = g.constant(&v, Tag::Data);
        let zero = g.constant(&Tensor::zeros(&[3, 4], Tag::Adaptation), Tag::Adaptation);
        let out = inject(&mut g, vn, zero, scaled).unwrap();
        if g.value(out).data() != v.data() {
            fails.push("zero meta-tokens changed the features".into());
        }
        let one = g.constant(&m1, Tag::Adaptation);
        let out = inject(&mut g, vn, one, scaled).unwrap();
        let expect: Vec<f64> = v.data().chunks(4).flat_map(|r| r.iter().zip(m1.data()).map(|(a, b)| a + b)).collect();
        if g.value(out).data() != expect.as_slice() {
            fails.push("one meta-token was not broadcast exactly".into());
        }
    }

    // cross-layer aggregation ignores layer and token order
    let layers: Vec<Tensor> = [2, 1, 3].iter().map(|&k| rng.normal_tensor(&[k, 5], 1.0, Tag::Adaptation)).collect();
    let agg = |ls: &[Tensor]| {
        let mut g = Graph::default();
        let ids: Vec<NodeId> = ls.iter().map(|t| g.constant(t, Tag::Adaptation)).collect();
        let out = aggregate(&mut g, &ids).unwrap();
        g.value(out).clone()
    };
    let reversed: Vec<Tensor> = layers
        .iter()
        .rev()
        .map(|t| {
            let rows: Vec<f64> = t.data().chunks(5).rev().flatten().copied().collect();
            Tensor::new(t.shape().to_vec(), rows, Tag::Adaptation).unwrap()
        })
        .collect();
    let d = max_abs_diff(&agg(&layers), &agg(&reversed));
    if d > AGGREGATE_TOL {
        fails.push(format!("aggregation order changed the result by {d:e}"));
    }

    // all-zero LCD parameters map any tokens to zero; the average-pooling
    // pathway has no parameters, so only the linear one is covered
    let mut g = Graph::default();
    let m = g.leaf(&Tensor::zeros(&[2, 4], Tag::Adaptation).trainable());
    let tokens = g.constant(&rng.normal_tensor(&[5, 4], 3.0, Tag::Data), Tag::Data);
    let mut zero = |s: &[usize]| g.leaf(&Tensor::zeros(s, Tag::Adaptation).trainable());
    let w = StepNodes {
        attn: Some([zero(&[4, 4]), zero(&[4, 4]), zero(&[4, 4])]),
        wg: Some(zero(&[2, 5])),
    };
    let out = distill(&mut g, &LcdConfig::default(), m, tokens, &[w], 3).unwrap();
    if g.value(out).data().iter().any(|&x| x != 0.0) {
        fails.push("zero-parameter LCD moved off zero".into());
    }

    // one Adam step moves each coordinate by lr·g/(|g| + eps)
    let mut store = ParamStore::new();
    let w0 = [0.5, -1.5, 2.0];
    let grad = [0.3, -4.0, 1e-3];
    let id = store.add("w", Tensor::new(vec![3], w0.to_vec(), Tag::Head).unwrap().trainable());
    let (lr, eps) = (0.01, 1e-8);
    let mut adam = Adam::new(vec![id], &store, lr, 0.9, 0.999, eps);
    let gt = Tensor::new(vec![3], grad.to_vec(), Tag::Head).unwrap();
    adam.step(&mut store, &[Some(&gt)]).unwrap();
    let expect: Vec<f64> = w0.iter().zip(grad).map(|(w, g)| w - lr * g / (g.abs() + eps)).collect();
    let d = store.get(id).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if d > ADAM_TOL {
        fails.push(format!("Adam step off by {d:e}"));
    }

    let pass = fails.is_empty();
    verdict(
        pass,
        if pass {
            format!("softmax rows within {worst:.1e} over {} nodes; injection, aggregation, zero fixed point and Adam exact to tolerance", probs.len())
        } else {
            fails.join("; ")
        },
    )
}

fn csv_without_timing(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let keep: Vec<bool> = header.iter().map(|h| !h.ends_with("_ms") && !h.starts_with("iter_ms")).collect();
    let mut rows = vec![header.clone()];
    for rec in r.records() {
        rows.push(rec.unwrap().iter().map(String::from).collect());
    }
    rows.into_iter()
        .map(|row| row.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| v).collect())
        .collect()
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = repo().join("configs/tiny_segment_multi.json");
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for r in &runs {
        let out = mettle(&["train", "--config", config.to_str().unwrap(), "--out", r.to_str().unwrap()]);
        if !out.status.success() {
            return verdict(false, String::from_utf8_lossy(&out.stderr).trim().to_string());
        }
    }
    let mut same = true;
    let mut rows = 0;
    for file in ["epochs.csv", "summary.csv"] {
        let (a, b) = (csv_without_timing(&runs[0].join(file)), csv_without_timing(&runs[1].join(file)));
        rows += a.len() - 1;
        same &= a == b;
    }
    verdict(same, format!("epochs.csv and summary.csv identical over {rows} rows, timing columns excluded"))
}

fn ablation() -> Verdict {
    let mut cfg = small(Task::Classify);
    cfg.train.epochs = ABLATION_EPOCHS;
    let k_grid: Vec<String> = ["1", "2", "4"].map(String::from).to_vec();
    let h_grid: Vec<String> = ["8-4-2-1", "2-2-1-1"].map(String::from).to_vec();
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let ks = harness::ablate(&cfg, AblationAxis::K, &k_grid, seed).unwrap();
        let hs = harness::ablate(&cfg, AblationAxis::HierarchicalK, &h_grid, seed).unwrap();
        let k1 = ks[0].metric;
        let spread = ks.iter().map(|r| (r.metric - k1).abs()).fold(0.0, f64::max);
        let best_uniform = ks.iter().map(|r| r.metric).fold(f64::MIN, f64::max);
        let best_h = hs.iter().map(|r| r.metric).fold(f64::MIN, f64::max);
        ok &= spread <= K_SPREAD && best_h <= best_uniform;
        let fmt = |rows: &[harness::AblationRow]| {
            rows.iter().map(|r| format!("{}={:.3}", r.setting, r.metric)).collect::<Vec<_>>().join(" ")
        };
        notes.push(format!("seed {seed}: K {} | hierarchical {}", fmt(&ks), fmt(&hs)));
    }
    Verdict {
        pass: ok,
        documented: true,
        detail: notes.join("; "),
    }
}

fn main() {
    let criteria: [(usize, &str, fn() -> Verdict); 9] = [
        (1, "gradient correctness", gradients),
        (2, "frozen-backbone audit", audit),
        (3, "memory reduction", memory),
        (4, "runtime direction", runtime),
        (5, "end-to-end learning", learning),
        (6, "cross-modal injection necessity", cross_modal),
        (7, "mechanism invariants", mechanisms),
        (8, "determinism", determinism),
        (9, "ablation trends", ablation),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let status = match (v.pass, v.documented) {
            (true, _) => "PASS",
            (false, true) => "DOCUMENTED",
            (false, false) => "FAIL",
        };
        if !v.pass && !v.documented {
            failed += 1;
        }
        println!("criterion {id} {status} {name} [{:.1} s]: {}", start.elapsed().as_secs_f64(), v.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
