//! End-to-end models: a backbone, the trainable modules of one topology and a
//! task head, all registered in a single [`ParamStore`].

use crate::backbone::{Adapters, Backbone, ClipFeatures, Modality};
use crate::config::{ExperimentConfig, Task, Topology};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lcd::Lcd;
use crate::mti::{Mti, MtiConfig};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tasks::metrics::threshold_logits;
use crate::tasks::{ClassificationHead, Clip, Dataset, FpnHead, FPN_CHANNELS};
use crate::tensor::{NodeId, Precision, Tag, Tensor};
use crate::weights::round_to_f32;

const BACKBONE_STREAM: u64 = 10;
const MODULE_STREAM: u64 = 11;
const HEAD_STREAM: u64 = 12;

#[derive(Clone, Debug)]
pub enum Output {
    /// `[T × labels]`
    Logits(NodeId),
    /// `[H × W]` per frame
    Masks(Vec<NodeId>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Labels(Vec<usize>),
    Masks(Vec<Vec<bool>>),
}

/// Adapter-topology classification readout: mean-pooled final-layer tokens
/// projected to the common width.
#[derive(Clone, Copy, Debug)]
pub struct Readout {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Assembly {
    pub task: Task,
    pub topology: Topology,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub lcd: Option<Lcd>,
    pub mti: Option<Mti>,
    pub adapters: Option<Adapters>,
    /// audio then visual
    pub readout: Option<[Readout; 2]>,
    pub classifier: Option<ClassificationHead>,
    pub fpn: Option<FpnHead>,
}

impl Assembly {
    /// Backbone weights depend only on the seed and the backbone config, so two
    /// topologies built from one seed share them. Every parameter is rounded
    /// to f32 at construction.
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&cfg.backbone, &mut store, &mut Rng::stream(seed, BACKBONE_STREAM))?;
        let mut rng = Rng::stream(seed, MODULE_STREAM);
        let mut head_rng = Rng::stream(seed, HEAD_STREAM);
        let d = cfg.lcd.common_dim;
        let mut asm = Self {
            task: cfg.task,
            topology: cfg.topology,
            store,
            backbone,
            lcd: None,
            mti: None,
            adapters: None,
            readout: None,
            classifier: None,
            fpn: None,
        };
        let store = &mut asm.store;
        let bcfg = &cfg.backbone;
        match cfg.topology {
            Topology::Mettle => {
                asm.lcd = Some(Lcd::build(&cfg.effective_lcd(), bcfg, store, &mut rng)?);
                if cfg.task.is_segmentation() {
                    asm.mti = Some(Mti::build(&cfg.mti, bcfg, d, cfg.lcd.scale_logits, store, &mut rng)?);
                }
            }
            Topology::Adapter => {
                asm.adapters = Some(Adapters::build(bcfg, cfg.adapter, store, &mut rng)?);
                let dims = bcfg.dims();
                let last = dims[dims.len() - 1];
                let mut readout = |m: Modality| Readout {
                    w: store.add(
                        format!("readout.{}.w", m.name()),
                        rng.xavier(last, d, Tag::Adaptation).trainable(),
                    ),
                    b: store.add(
                        format!("readout.{}.b", m.name()),
                        Tensor::zeros(&[d], Tag::Adaptation).trainable(),
                    ),
                };
                let audio = readout(Modality::Audio);
                if cfg.task.is_segmentation() {
                    let cross = adapter_injection(&cfg.mti);
                    asm.mti = Some(Mti::build(&cross, bcfg, d, cfg.lcd.scale_logits, store, &mut rng)?);
                    asm.readout = Some([audio, audio]);
                } else {
                    let visual = readout(Modality::Visual);
                    asm.readout = Some([audio, visual]);
                }
            }
        }
        if cfg.task.is_segmentation() {
            asm.fpn = Some(FpnHead::build(bcfg, FPN_CHANNELS, store, &mut head_rng));
        } else {
            asm.classifier = Some(ClassificationHead::build(d, d, cfg.labels(), store, &mut head_rng));
        }
        asm.round_params(true);
        Ok(asm)
    }

    /// Rounds parameters to f32 in place; `all = false` touches only trainable
    /// ones.
    pub fn round_params(&mut self, all: bool) {
        let ids: Vec<ParamId> = if all { self.store.ids().collect() } else { self.store.trainable() };
        for id in ids {
            let mut data = self.store.get(id).to_vec();
            round_to_f32(&mut data);
            self.store.set_data(id, data).expect("same length");
        }
    }

    /// Backbone layers whose outputs the trainable modules read.
    pub fn needed_layers(&self) -> Vec<usize> {
        let cfg = &self.backbone.config;
        let mut layers: Vec<usize> = match (&self.lcd, self.task.is_segmentation()) {
            (Some(lcd), _) => lcd.visual.layers.iter().map(|b| b.layer).collect(),
            (None, _) => vec![cfg.layer_count() - 1],
        };
        if self.task.is_segmentation() {
            layers.extend(cfg.stage_ends());
        }
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.store.trainable_count() as f64 / self.store.count() as f64
    }

    /// Frozen features of a clip, for reuse across epochs. Only meaningful for
    /// the frozen-backbone topology.
    pub fn cache(&self, clip: &Clip, precision: Precision) -> Result<ClipFeatures> {
        if self.topology != Topology::Mettle {
            return Err(Error::Config("feature caching needs a frozen backbone".into()));
        }
        let (f, _) = self.backbone.forward_frozen(&self.store, &clip.visual, &clip.audio, precision)?;
        Ok(f)
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let cfg = &self.backbone.config;
        if ds.visual != cfg.visual || ds.audio != cfg.audio {
            return Err(Error::Config("dataset geometry does not match the backbone inputs".into()));
        }
        if ds.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        match (&self.classifier, self.task.is_segmentation()) {
            (Some(h), false) if h.labels != ds.label_count => Err(Error::Config(format!(
                "dataset has {} labels, head has {}",
                ds.label_count, h.labels
            ))),
            (_, true) if ds.clips.iter().any(|c| c.masks.len() != c.visual.len()) => {
                Err(Error::Config("segmentation dataset lacks masks".into()))
            }
            _ => Ok(()),
        }
    }

    /// Builds the clip's forward pass in `g`. `cached` replaces the backbone
    /// run with stored features.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        clip: &Clip,
        cached: Option<&ClipFeatures>,
    ) -> Result<Output> {
        match self.topology {
            Topology::Mettle => self.forward_mettle(g, bind, clip, cached),
            Topology::Adapter => self.forward_adapter(g, bind, clip),
        }
    }

    /// `[t][layer]` feature nodes of stream `m`, tagged `data`. Entries for
    /// layers outside [`needed_layers`](Self::needed_layers) are absent.
    fn frozen_features(
        &self,
        g: &mut Graph,
        bind: &Binding,
        clip: &Clip,
        m: Modality,
        cached: Option<&ClipFeatures>,
    ) -> Result<Vec<Vec<Option<NodeId>>>> {
        let needed = self.needed_layers();
        let frames = match m {
            Modality::Visual => &clip.visual,
            Modality::Audio => &clip.audio,
        };
        let n = self.backbone.config.layer_count();
        let mut out = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let mut row = vec![None; n];
            match cached {
                Some(c) => {
                    let f = c.get(m).frames.get(t).ok_or_else(|| {
                        Error::Config(format!("cached features lack frame {t}"))
                    })?;
                    for &l in &needed {
                        row[l] = Some(g.constant(&f[l], Tag::Data));
                    }
                }
                None => {
                    let x = g.constant(frame, Tag::Data);
                    let layers = self.backbone.encode(g, bind, m, x, None)?;
                    let prev = g.set_scope(Tag::Data);
                    for &l in &needed {
                        row[l] = Some(g.tap(layers[l]));
                    }
                    g.set_scope(prev);
                }
            }
            out.push(row);
        }
        Ok(out)
    }

    fn forward_mettle(
        &self,
        g: &mut Graph,
        bind: &Binding,
        clip: &Clip,
        cached: Option<&ClipFeatures>,
    ) -> Result<Output> {
        let lcd = self.lcd.as_ref().expect("mettle assembly has lcd");
        let visual = self.frozen_features(g, bind, clip, Modality::Visual, cached)?;
        let audio = self.frozen_features(g, bind, clip, Modality::Audio, cached)?;
        let pick = |frames: &[Vec<Option<NodeId>>], m: Modality| -> Vec<Vec<NodeId>> {
            frames
                .iter()
                .map(|row| lcd.bank(m).layers.iter().filter_map(|b| row[b.layer]).collect())
                .collect()
        };
        let v_in = pick(&visual, Modality::Visual);
        let a_in = pick(&audio, Modality::Audio);
        if let Some(head) = &self.classifier {
            let agg = lcd.classification_forward(g, bind, &v_in, &a_in)?;
            return Ok(Output::Logits(head.classify(g, bind, agg.audio, agg.visual)?));
        }
        let mti = self.mti.as_ref().expect("segmentation assembly has mti");
        let fpn = self.fpn.as_ref().expect("segmentation assembly has fpn");
        let mv = lcd.distill_frames(g, bind, lcd.bank(Modality::Visual), &v_in)?;
        let ma = lcd.distill_frames(g, bind, lcd.bank(Modality::Audio), &a_in)?;
        let ends = self.backbone.config.stage_ends();
        let mut masks = Vec::with_capacity(visual.len());
        for (t, row) in visual.iter().enumerate() {
            let stages: Vec<NodeId> = ends.iter().map(|&l| row[l].expect("stage ends are needed")).collect();
            let injected = mti.forward(g, bind, &stages, Some(ma[t][0]), Some(mv[t][0]))?;
            masks.push(fpn.decode(g, bind, &injected)?);
        }
        Ok(Output::Masks(masks))
    }

    /// `[1 × d]` readout of one adapted frame.
    fn pooled(&self, g: &mut Graph, bind: &Binding, m: Modality, frame: &Tensor, r: Readout) -> Result<(Vec<NodeId>, NodeId)> {
        let adapters = self.adapters.as_ref().expect("adapter assembly has adapters");
        let x = g.constant(frame, Tag::Data);
        let layers = self.backbone.encode(g, bind, m, x, Some(adapters.get(m)))?;
        let last = *layers.last().expect("at least one layer");
        let prev = g.set_scope(Tag::Adaptation);
        let out = (|| -> Result<NodeId> {
            let mean = g.reduce_mean(last, &[0])?;
            let dim = g.shape(mean)[0];
            let row = g.reshape(mean, &[1, dim])?;
            Ok(g.linear(row, bind[r.w], Some(bind[r.b]))?)
        })();
        g.set_scope(prev);
        Ok((layers, out?))
    }

    fn forward_adapter(&self, g: &mut Graph, bind: &Binding, clip: &Clip) -> Result<Output> {
        let [ra, rv] = self.readout.expect("adapter assembly has readouts");
        if let Some(head) = &self.classifier {
            let mut rows = [Vec::new(), Vec::new()];
            for (i, (m, frames, r)) in [(Modality::Audio, &clip.audio, ra), (Modality::Visual, &clip.visual, rv)]
                .into_iter()
                .enumerate()
            {
                for frame in frames {
                    rows[i].push(self.pooled(g, bind, m, frame, r)?.1);
                }
            }
            let prev = g.set_scope(Tag::Adaptation);
            let a = g.concat_rows(&rows[0]);
            let v = g.concat_rows(&rows[1]);
            g.set_scope(prev);
            return Ok(Output::Logits(head.classify(g, bind, a?, v?)?));
        }
        let mti = self.mti.as_ref().expect("segmentation assembly has mti");
        let fpn = self.fpn.as_ref().expect("segmentation assembly has fpn");
        let adapters = self.adapters.as_ref().expect("adapter assembly has adapters");
        let ends = self.backbone.config.stage_ends();
        let mut masks = Vec::with_capacity(clip.visual.len());
        for (frame, audio) in clip.visual.iter().zip(&clip.audio) {
            let (_, a) = self.pooled(g, bind, Modality::Audio, audio, ra)?;
            let x = g.constant(frame, Tag::Data);
            let layers = self
                .backbone
                .encode(g, bind, Modality::Visual, x, Some(adapters.get(Modality::Visual)))?;
            let stages: Vec<NodeId> = ends.iter().map(|&l| layers[l]).collect();
            let injected = mti.forward(g, bind, &stages, Some(a), None)?;
            masks.push(fpn.decode(g, bind, &injected)?);
        }
        Ok(Output::Masks(masks))
    }

    /// Mean cross-entropy over timestamps, or mean per-frame BCE.
    pub fn loss(&self, g: &mut Graph, out: &Output, clip: &Clip) -> Result<NodeId> {
        let prev = g.set_scope(Tag::Head);
        let res = (|| -> Result<NodeId> {
            match out {
                Output::Logits(l) => Ok(g.cross_entropy_logits(*l, &clip.labels)?),
                Output::Masks(ms) => {
                    if ms.len() != clip.masks.len() {
                        return Err(Error::Config(format!(
                            "{} mask predictions for {} masks",
                            ms.len(),
                            clip.masks.len()
                        )));
                    }
                    let mut total = None;
                    for (&m, gt) in ms.iter().zip(&clip.masks) {
                        let target = g.constant(gt, Tag::Data);
                        let l = g.bce_logits(m, target)?;
                        total = Some(match total {
                            None => l,
                            Some(acc) => g.add(acc, l)?,
                        });
                    }
                    let total = total.ok_or_else(|| Error::Config("clip has no frames".into()))?;
                    Ok(g.scale(total, 1.0 / ms.len() as f64)?)
                }
            }
        })();
        g.set_scope(prev);
        res
    }

    pub fn predict(&self, g: &Graph, out: &Output) -> Prediction {
        match out {
            Output::Logits(l) => {
                let t = g.value(*l);
                Prediction::Labels(
                    (0..t.rows())
                        .map(|r| {
                            let row = t.row(r);
                            let mut best = 0;
                            for (i, &v) in row.iter().enumerate() {
                                if v > row[best] {
                                    best = i;
                                }
                            }
                            best
                        })
                        .collect(),
                )
            }
            Output::Masks(ms) => Prediction::Masks(ms.iter().map(|&m| threshold_logits(g.value(m).data())).collect()),
        }
    }
}

/// Injection used by the adapter baseline: the pooled audio token is written
/// into the visual stages through the cross-modal pathway only.
pub fn adapter_injection(mti: &MtiConfig) -> MtiConfig {
    MtiConfig {
        enable_cross: true,
        enable_intra: false,
        ..mti.clone()
    }
}
