use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_at, Error, Result};
use crate::lcd::DpMode;
use crate::mti::InjectOrder;

use super::experiment::run;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// meta-tokens per layer, both streams
    K,
    /// distillation steps, both streams
    R,
    /// per-stage K such as `8-4-2-1`, or `off`
    HierarchicalK,
    Ts,
    Dp,
    /// `on` replaces the linear reduction with average pooling
    AvgpoolDp,
    Cross,
    Intra,
    Order,
    /// 1-based stage whose final layer feeds LCD before injection
    MtiPlacement,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 10] = [
        AblationAxis::K,
        AblationAxis::R,
        AblationAxis::HierarchicalK,
        AblationAxis::Ts,
        AblationAxis::Dp,
        AblationAxis::AvgpoolDp,
        AblationAxis::Cross,
        AblationAxis::Intra,
        AblationAxis::Order,
        AblationAxis::MtiPlacement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::K => "k",
            AblationAxis::R => "r",
            AblationAxis::HierarchicalK => "hierarchical_k",
            AblationAxis::Ts => "ts",
            AblationAxis::Dp => "dp",
            AblationAxis::AvgpoolDp => "avgpool_dp",
            AblationAxis::Cross => "cross",
            AblationAxis::Intra => "intra",
            AblationAxis::Order => "order",
            AblationAxis::MtiPlacement => "mti_placement",
        }
    }

    /// Returns a copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let bad = || Error::Config(format!("ablation {}: cannot use value {value:?}", self.name()));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        let list = |s: &str| s.split('-').map(int).collect::<Result<Vec<_>>>();
        let flag = |s: &str| match s.trim() {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(bad()),
        };
        match self {
            AblationAxis::K => {
                let k = int(value)?;
                cfg.lcd.k_audio = k;
                cfg.lcd.k_visual = k;
            }
            AblationAxis::R => {
                let r = int(value)?;
                cfg.lcd.r_audio = r;
                cfg.lcd.r_visual = r;
            }
            AblationAxis::HierarchicalK => {
                cfg.lcd.k_per_stage = if value.trim() == "off" { None } else { Some(list(value)?) };
            }
            AblationAxis::Ts => cfg.lcd.enable_ts = flag(value)?,
            AblationAxis::Dp => cfg.lcd.dp = if flag(value)? { DpMode::Linear } else { DpMode::Off },
            AblationAxis::AvgpoolDp => {
                cfg.lcd.dp = if flag(value)? { DpMode::AvgPool } else { DpMode::Linear }
            }
            AblationAxis::Cross => cfg.mti.enable_cross = flag(value)?,
            AblationAxis::Intra => cfg.mti.enable_intra = flag(value)?,
            AblationAxis::Order => {
                cfg.mti.order = match value.trim() {
                    "cross_first" => InjectOrder::CrossFirst,
                    "intra_first" => InjectOrder::IntraFirst,
                    _ => return Err(bad()),
                }
            }
            AblationAxis::MtiPlacement => cfg.mti.source_stage = int(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub metric: f64,
    pub trainable_params: usize,
    pub retained_bytes: usize,
    pub iter_ms: f64,
}

/// Trains one model per grid value, all from the same seed.
pub fn ablate(base: &ExperimentConfig, axis: AblationAxis, grid: &[String], seed: u64) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let configs = grid
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    configs
        .iter()
        .zip(grid)
        .map(|(cfg, v)| {
            let (_, report) = run(cfg, seed)?;
            Ok(AblationRow {
                axis: axis.name().to_string(),
                setting: v.clone(),
                metric: report.headline_metric(),
                trainable_params: report.trainable_params,
                retained_bytes: report.ledger.total(),
                iter_ms: report.iter_ms_mean,
            })
        })
        .collect()
}

pub fn write_rows(rows: &[AblationRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_at(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_at(path, e))?;
    }
    w.flush().map_err(|e| io_at(path, e))
}
