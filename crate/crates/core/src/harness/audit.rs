use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Topology};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ledger::MemoryLedger;
use crate::tasks::Clip;
use crate::tensor::{Precision, Tag};

use super::assembly::Assembly;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub ledger: MemoryLedger,
    /// backbone-tagged nodes that received a gradient
    pub backbone_grad_nodes: usize,
    /// parameter names, or `op#node` for intermediates
    pub offending: Vec<String>,
}

/// One live training step without the optimizer update (the backbone runs
/// in-graph, no cached features). The audit passes when nothing tagged
/// `backbone` is retained and no backbone node receives a gradient.
pub fn gradient_flow_audit(asm: &Assembly, clip: &Clip, precision: Precision) -> Result<AuditReport> {
    let mut g = Graph::new(precision);
    let bind = asm.store.bind(&mut g);
    let out = asm.forward(&mut g, &bind, clip, None)?;
    let loss = asm.loss(&mut g, &out, clip)?;
    let ledger = g.ledger();
    let grads = g.backward(loss)?;
    let names: HashMap<_, _> = asm.store.ids().map(|id| (bind[id], asm.store.name(id))).collect();
    let mut ids: Vec<_> = grads.ids().filter(|&id| g.info(id).tag == Tag::Backbone).collect();
    ids.sort();
    let offending: Vec<String> = ids
        .iter()
        .map(|id| match names.get(id) {
            Some(n) => n.to_string(),
            None => format!("{}#{}", g.info(*id).op, id.index()),
        })
        .collect();
    Ok(AuditReport {
        passed: ledger.backbone == 0 && offending.is_empty(),
        ledger,
        backbone_grad_nodes: offending.len(),
        offending,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyCost {
    pub topology: Topology,
    pub ledger: MemoryLedger,
    pub trainable_params: usize,
    pub total_params: usize,
    /// mean seconds per training iteration (forward, backward, no update)
    pub iter_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryComparison {
    pub mettle: TopologyCost,
    pub adapter: TopologyCost,
    /// mettle total retained bytes over adapter total
    pub ratio: f64,
}

/// Ledger of one live training iteration on `clip`, and the mean time of
/// `reps` such iterations.
pub fn step_cost(asm: &Assembly, clip: &Clip, precision: Precision, reps: usize) -> Result<TopologyCost> {
    let mut g = Graph::new(precision);
    let mut ledger = MemoryLedger::default();
    let start = Instant::now();
    for _ in 0..reps.max(1) {
        g.clear();
        let bind = asm.store.bind(&mut g);
        let out = asm.forward(&mut g, &bind, clip, None)?;
        let loss = asm.loss(&mut g, &out, clip)?;
        ledger = g.ledger();
        g.backward(loss)?;
    }
    Ok(TopologyCost {
        topology: asm.topology,
        ledger,
        trainable_params: asm.store.trainable_count(),
        total_params: asm.store.count(),
        iter_seconds: start.elapsed().as_secs_f64() / reps.max(1) as f64,
    })
}

pub fn compare_memory(
    mettle: &Assembly,
    adapter: &Assembly,
    clip: &Clip,
    precision: Precision,
    reps: usize,
) -> Result<MemoryComparison> {
    if mettle.topology != Topology::Mettle || adapter.topology != Topology::Adapter {
        return Err(Error::Config("compare_memory takes a mettle and an adapter assembly".into()));
    }
    if mettle.backbone.config != adapter.backbone.config || mettle.task != adapter.task {
        return Err(Error::Config("compared assemblies must share backbone and task".into()));
    }
    let m = step_cost(mettle, clip, precision, reps)?;
    let a = step_cost(adapter, clip, precision, reps)?;
    let ratio = m.ledger.total() as f64 / a.ledger.total() as f64;
    Ok(MemoryComparison {
        mettle: m,
        adapter: a,
        ratio,
    })
}

/// Memory comparison with `depth` layers in every stage, for each depth.
/// `base` provides everything but the topology and layer counts.
pub fn depth_sweep(
    base: &ExperimentConfig,
    depths: &[usize],
    clip: &Clip,
    seed: u64,
) -> Result<Vec<(usize, MemoryComparison)>> {
    depths
        .iter()
        .map(|&depth| {
            let mut cfg = base.clone();
            cfg.backbone = cfg.backbone.clone().with_layers(depth);
            cfg.topology = Topology::Mettle;
            let mettle = Assembly::build(&cfg, seed)?;
            cfg.topology = Topology::Adapter;
            let adapter = Assembly::build(&cfg, seed)?;
            Ok((depth, compare_memory(&mettle, &adapter, clip, base.train.precision, 1)?))
        })
        .collect()
}
