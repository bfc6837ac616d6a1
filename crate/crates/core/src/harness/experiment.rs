use crate::config::{ExperimentConfig, Task};
use crate::error::Result;
use crate::tasks::{gen_classification_dataset, gen_segmentation_dataset, Dataset, Split};

use super::assembly::Assembly;
use super::train::{train, RunReport};

pub fn dataset(cfg: &ExperimentConfig, seed: u64, split: Split) -> Result<Dataset> {
    let n = match split {
        Split::Train => cfg.dataset.n_train,
        Split::Test => cfg.dataset.n_test,
    };
    let (v, a) = (cfg.backbone.visual, cfg.backbone.audio);
    match cfg.task {
        Task::Classify => gen_classification_dataset(&cfg.dataset.classify, v, a, seed, n, split),
        _ => gen_segmentation_dataset(&cfg.seg_spec(), v, a, seed, n, split),
    }
}

/// Train split and, when `n_test > 0`, the test split.
pub fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    let train = dataset(cfg, seed, Split::Train)?;
    let test = (cfg.dataset.n_test > 0)
        .then(|| dataset(cfg, seed, Split::Test))
        .transpose()?;
    Ok((train, test))
}

/// Generates data, builds the assembly and trains it.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<(Assembly, RunReport)> {
    cfg.validate()?;
    let (train_ds, test_ds) = datasets(cfg, seed)?;
    let mut asm = Assembly::build(cfg, seed)?;
    let report = train(&mut asm, &train_ds, test_ds.as_ref(), &cfg.train, seed)?;
    Ok((asm, report))
}
