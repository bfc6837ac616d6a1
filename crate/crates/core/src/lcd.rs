//! Layer-centric distillation.
//!
//! Each tapped layer owns `K` learnable meta-tokens. One distillation step is
//!
//! ```text
//! m ← softmax((m W_Q)(v W_K)ᵀ / s) (v W_V)      attention pathway (TS)
//! m ← m + W_g v                                 token-reduction pathway (DP)
//! ```
//!
//! repeated `R` times. The attention output replaces `m` rather than adding
//! to it. Distilled tokens are projected to a common width and, for
//! classification, averaged over layers and tokens.

use std::sync::Arc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Modality};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tag, Tensor};

pub const META_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum DpMode {
    /// `W_g · tokens`
    Linear,
    /// column mean of the tokens, repeated for every meta-token
    AvgPool,
    Off,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    All,
    Final,
    /// 0-based layer indices
    Only(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LcdConfig {
    pub k_audio: usize,
    pub k_visual: usize,
    pub r_audio: usize,
    pub r_visual: usize,
    pub heads: usize,
    /// divide logits by `sqrt(D / heads)`
    pub scale_logits: bool,
    pub common_dim: usize,
    pub share_step_weights: bool,
    pub layers: LayerSelection,
    /// Per-stage meta-token counts overriding `k_audio`/`k_visual`.
    pub k_per_stage: Option<Vec<usize>>,
    pub enable_ts: bool,
    pub dp: DpMode,
}

impl Default for LcdConfig {
    fn default() -> Self {
        Self {
            k_audio: 1,
            k_visual: 1,
            r_audio: 1,
            r_visual: 1,
            heads: 1,
            scale_logits: true,
            common_dim: 64,
            share_step_weights: true,
            layers: LayerSelection::All,
            k_per_stage: None,
            enable_ts: true,
            dp: DpMode::Linear,
        }
    }
}

impl LcdConfig {
    pub fn k(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.k_visual,
            Modality::Audio => self.k_audio,
        }
    }

    pub fn r(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.r_visual,
            Modality::Audio => self.r_audio,
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("lcd: {m}")));
        if self.k_audio == 0 || self.k_visual == 0 {
            return err("meta-token counts must be at least 1".into());
        }
        if self.r_audio == 0 || self.r_visual == 0 {
            return err("distillation steps must be at least 1".into());
        }
        if self.common_dim == 0 {
            return err("common_dim must be positive".into());
        }
        if !self.enable_ts && self.dp == DpMode::Off {
            return err("both distillation pathways are disabled".into());
        }
        if self.enable_ts {
            if self.heads == 0 {
                return err("heads must be at least 1".into());
            }
            for d in backbone.dims() {
                if d % self.heads != 0 {
                    return err(format!("width {d} is not divisible by {} heads", self.heads));
                }
            }
        }
        if let Some(ks) = &self.k_per_stage {
            if ks.len() != backbone.stages {
                return err(format!(
                    "k_per_stage has {} entries for {} stages",
                    ks.len(),
                    backbone.stages
                ));
            }
            if ks.iter().any(|&k| k == 0) {
                return err("k_per_stage entries must be at least 1".into());
            }
        }
        self.layer_indices(backbone).map(|_| ())
    }

    pub fn layer_indices(&self, backbone: &BackboneConfig) -> Result<Vec<usize>> {
        let n = backbone.layer_count();
        let idx = match &self.layers {
            LayerSelection::All => (0..n).collect(),
            LayerSelection::Final => vec![n - 1],
            LayerSelection::Only(v) => v.clone(),
        };
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if idx.is_empty() || sorted.len() != idx.len() || sorted.iter().any(|&l| l >= n) {
            return Err(Error::Config(format!(
                "lcd: layer selection {idx:?} is invalid for {n} layers"
            )));
        }
        Ok(idx)
    }
}

/// `[D × D]` attention projections.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Weights of one distillation step.
#[derive(Clone, Debug)]
pub struct StepParams {
    /// present when the TS pathway is enabled
    pub attn: Option<AttnParams>,
    /// `[K × N]`, present when the DP pathway is linear
    pub wg: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct LayerBank {
    pub layer: usize,
    pub k: usize,
    pub tokens: usize,
    pub dim: usize,
    /// `[K × D]`
    pub meta: ParamId,
    /// one entry when step weights are shared, else `R`
    pub steps: Vec<StepParams>,
    /// `[D × d]` and `[d]`
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// Meta-tokens and distillation weights of one stream.
#[derive(Clone, Debug)]
pub struct MetaTokenBank {
    pub modality: Modality,
    pub steps: usize,
    pub layers: Vec<LayerBank>,
}

impl MetaTokenBank {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for lb in &self.layers {
            ids.push(lb.meta);
            for s in &lb.steps {
                if let Some(a) = s.attn {
                    ids.extend([a.wq, a.wk, a.wv]);
                }
                ids.extend(s.wg);
            }
            ids.extend([lb.proj_w, lb.proj_b]);
        }
        ids
    }
}

/// Both streams' banks plus the settings the forward pass needs.
#[derive(Clone, Debug)]
pub struct Lcd {
    pub config: LcdConfig,
    pub visual: MetaTokenBank,
    pub audio: MetaTokenBank,
}

impl Lcd {
    /// Meta-tokens ~ N(0, 0.02²); attention, reduction and projection weights
    /// Xavier-uniform; projection biases zero. Disabled pathways get no
    /// parameters.
    pub fn build(
        config: &LcdConfig,
        backbone: &BackboneConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate(backbone)?;
        let layers = config.layer_indices(backbone)?;
        let stages = backbone.layer_stages();
        let mut bank = |m: Modality| -> MetaTokenBank {
            let shapes = backbone.layer_shapes(m);
            let r = config.r(m);
            let n_steps = if config.share_step_weights { 1 } else { r };
            let t = Tag::Adaptation;
            let layers = layers
                .iter()
                .map(|&l| {
                    let (n, d) = shapes[l];
                    let k = config
                        .k_per_stage
                        .as_ref()
                        .map_or(config.k(m), |ks| ks[stages[l]]);
                    let p = format!("lcd.{}.l{l}", m.name());
                    let meta = store.add(
                        format!("{p}.meta"),
                        rng.normal_tensor(&[k, d], META_INIT_STD, t).trainable(),
                    );
                    let steps = (0..n_steps)
                        .map(|s| {
                            let attn = config.enable_ts.then(|| {
                                let mut w = |name: &str| {
                                    store.add(
                                        format!("{p}.r{s}.{name}"),
                                        rng.xavier(d, d, t).trainable(),
                                    )
                                };
                                AttnParams {
                                    wq: w("wq"),
                                    wk: w("wk"),
                                    wv: w("wv"),
                                }
                            });
                            let wg = (config.dp == DpMode::Linear).then(|| {
                                store.add(format!("{p}.r{s}.wg"), rng.xavier(k, n, t).trainable())
                            });
                            StepParams { attn, wg }
                        })
                        .collect();
                    let proj_w = store.add(
                        format!("{p}.proj_w"),
                        rng.xavier(d, config.common_dim, t).trainable(),
                    );
                    let proj_b = store.add(
                        format!("{p}.proj_b"),
                        Tensor::zeros(&[config.common_dim], t).trainable(),
                    );
                    LayerBank {
                        layer: l,
                        k,
                        tokens: n,
                        dim: d,
                        meta,
                        steps,
                        proj_w,
                        proj_b,
                    }
                })
                .collect();
            MetaTokenBank {
                modality: m,
                steps: r,
                layers,
            }
        };
        let visual = bank(Modality::Visual);
        let audio = bank(Modality::Audio);
        Ok(Self {
            config: config.clone(),
            visual,
            audio,
        })
    }

    pub fn bank(&self, m: Modality) -> &MetaTokenBank {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.visual.param_ids();
        ids.extend(self.audio.param_ids());
        ids
    }

    /// Distils every layer of `bank` for each frame and projects to the common
    /// width. `frames[t][j]` holds the tokens of `bank.layers[j]` at frame `t`.
    /// Returns `[t][j]` projected meta-tokens `[K × d]`.
    pub fn distill_frames(
        &self,
        g: &mut Graph,
        bind: &Binding,
        bank: &MetaTokenBank,
        frames: &[Vec<NodeId>],
    ) -> Result<Vec<Vec<NodeId>>> {
        let prev = g.set_scope(Tag::Adaptation);
        let out = self.distill_frames_scoped(g, bind, bank, frames);
        g.set_scope(prev);
        out
    }

    fn distill_frames_scoped(
        &self,
        g: &mut Graph,
        bind: &Binding,
        bank: &MetaTokenBank,
        frames: &[Vec<NodeId>],
    ) -> Result<Vec<Vec<NodeId>>> {
        let mut out: Vec<Vec<NodeId>> = vec![Vec::with_capacity(bank.layers.len()); frames.len()];
        for (j, lb) in bank.layers.iter().enumerate() {
            let tokens: Vec<NodeId> = frames
                .iter()
                .map(|f| {
                    f.get(j).copied().ok_or_else(|| {
                        Error::Config(format!("frame has no tokens for LCD layer {}", lb.layer))
                    })
                })
                .collect::<Result<_>>()?;
            for &t in &tokens {
                let shape = g.shape(t);
                if shape != [lb.tokens, lb.dim] {
                    return Err(Error::Config(format!(
                        "layer {} tokens have shape {shape:?}, expected [{}, {}]",
                        lb.layer, lb.tokens, lb.dim
                    )));
                }
            }
            let m0 = bind[lb.meta];
            let mut ms: Vec<NodeId> = vec![m0; tokens.len()];
            for r in 0..bank.steps {
                let sp = &lb.steps[if self.config.share_step_weights { 0 } else { r }];
                let weights = StepWeights::new(g, bind, sp, &self.config)?;
                // At the first step every frame queries with the same tokens.
                let shared = if r == 0 && self.config.enable_ts {
                    Some(weights.query(g, m0)?)
                } else {
                    None
                };
                for (m, &t) in ms.iter_mut().zip(&tokens) {
                    *m = weights.step(g, *m, t, shared.as_deref(), lb.k)?;
                }
            }
            for (f, m) in out.iter_mut().zip(ms) {
                f.push(g.linear(m, bind[lb.proj_w], Some(bind[lb.proj_b]))?);
            }
        }
        Ok(out)
    }

    /// Classification readout: per stream `[T × d]`, each row the mean of all
    /// projected meta-tokens of one frame. `frames` is indexed like
    /// [`distill_frames`](Self::distill_frames).
    pub fn classification_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        visual: &[Vec<NodeId>],
        audio: &[Vec<NodeId>],
    ) -> Result<AggregatedTokens> {
        if visual.len() != audio.len() || visual.is_empty() {
            return Err(Error::Config(format!(
                "need matching nonempty frame lists, got {} visual and {} audio",
                visual.len(),
                audio.len()
            )));
        }
        let prev = g.set_scope(Tag::Adaptation);
        let run = |g: &mut Graph, bank: &MetaTokenBank, frames: &[Vec<NodeId>]| -> Result<NodeId> {
            let distilled = self.distill_frames_scoped(g, bind, bank, frames)?;
            let rows = distilled
                .iter()
                .map(|layers| aggregate(g, layers))
                .collect::<Result<Vec<_>>>()?;
            Ok(g.concat_rows(&rows)?)
        };
        let v = run(g, &self.visual, visual);
        let a = v.and_then(|v| run(g, &self.audio, audio).map(|a| (v, a)));
        g.set_scope(prev);
        let (visual, audio) = a?;
        Ok(AggregatedTokens { visual, audio })
    }
}

/// `[T × d]` per stream.
#[derive(Clone, Copy, Debug)]
pub struct AggregatedTokens {
    pub visual: NodeId,
    pub audio: NodeId,
}

/// Per-head slices of one step's weights, bound in the current graph.
struct StepWeights {
    heads: usize,
    scale: f64,
    dp: DpMode,
    /// `W_Q` and per-head slices of `W_K`, `W_V`
    attn: Option<(NodeId, Vec<NodeId>, Vec<NodeId>)>,
    wg: Option<NodeId>,
}

impl StepWeights {
    fn new(g: &mut Graph, bind: &Binding, sp: &StepParams, cfg: &LcdConfig) -> Result<Self> {
        let nodes = StepNodes {
            attn: sp.attn.map(|a| [bind[a.wq], bind[a.wk], bind[a.wv]]),
            wg: sp.wg.map(|id| bind[id]),
        };
        Self::from_nodes(g, &nodes, cfg)
    }

    fn from_nodes(g: &mut Graph, sp: &StepNodes, cfg: &LcdConfig) -> Result<Self> {
        let heads = cfg.heads.max(1);
        let mut scale = 1.0;
        let attn = match sp.attn.filter(|_| cfg.enable_ts) {
            Some([wq, wk, wv]) => {
                let dh = g.shape(wq)[0] / heads;
                if cfg.scale_logits {
                    scale = 1.0 / (dh as f64).sqrt();
                }
                let mut slices = |w: NodeId| -> Result<Vec<NodeId>> {
                    if heads == 1 {
                        return Ok(vec![w]);
                    }
                    (0..heads)
                        .map(|h| Ok(g.slice_cols(w, h * dh, dh)?))
                        .collect()
                };
                let wk = slices(wk)?;
                let wv = slices(wv)?;
                Some((wq, wk, wv))
            }
            None => None,
        };
        Ok(Self {
            heads,
            scale,
            dp: cfg.dp,
            attn,
            wg: sp.wg,
        })
    }

    /// `(m W_Q)_h W_K,hᵀ` for every head: the query side of the logits,
    /// `[K × D]` per head, so that `logits_h = query_h · tokensᵀ`.
    fn query(&self, g: &mut Graph, m: NodeId) -> Result<Vec<NodeId>> {
        let (wq, wk, _) = self.attn.as_ref().ok_or_else(|| Error::Config("TS pathway is off".into()))?;
        let q = g.matmul(m, *wq)?;
        let dh = g.shape(q)[1] / self.heads;
        (0..self.heads)
            .map(|h| {
                let qh = if self.heads == 1 { q } else { g.slice_cols(q, h * dh, dh)? };
                Ok(g.matmul_nt(qh, wk[h])?)
            })
            .collect()
    }

    fn step(
        &self,
        g: &mut Graph,
        m: NodeId,
        tokens: NodeId,
        shared: Option<&[NodeId]>,
        k: usize,
    ) -> Result<NodeId> {
        let ts = if let Some((_, _, wv)) = &self.attn {
            let query = match shared {
                Some(q) => q.to_vec(),
                None => self.query(g, m)?,
            };
            let mut outs = Vec::with_capacity(self.heads);
            for (h, &qh) in query.iter().enumerate() {
                let logits = g.matmul_nt(qh, tokens)?;
                let logits = if self.scale != 1.0 { g.scale(logits, self.scale)? } else { logits };
                let p = g.softmax_rows(logits)?;
                let ctx = g.matmul(p, tokens)?;
                outs.push(g.matmul(ctx, wv[h])?);
            }
            if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? }
        } else {
            m
        };
        let dp = match self.dp {
            DpMode::Linear => {
                let wg = self.wg.ok_or_else(|| Error::Config("missing W_g".into()))?;
                if g.shape(wg)[0] != k {
                    return Err(Error::Config(format!(
                        "W_g has {} rows for {k} meta-tokens",
                        g.shape(wg)[0]
                    )));
                }
                Some(g.matmul(wg, tokens)?)
            }
            DpMode::AvgPool => {
                let d = g.shape(tokens)[1];
                let mean = g.reduce_mean(tokens, &[0])?;
                let idx: Vec<usize> = (0..k).flat_map(|_| 0..d).collect();
                Some(g.gather(mean, Arc::new(idx), vec![k, d])?)
            }
            DpMode::Off => None,
        };
        Ok(match dp {
            Some(dp) => g.add(ts, dp)?,
            None => ts,
        })
    }
}

/// Weights of one distillation step as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    /// `W_Q`, `W_K`, `W_V`
    pub attn: Option<[NodeId; 3]>,
    pub wg: Option<NodeId>,
}

/// `steps` distillation steps of `m` over `tokens`, using `weights[0]` for
/// every step when `cfg.share_step_weights` and `weights[r]` otherwise. The
/// pathways, heads and scaling follow `cfg`.
pub fn distill(
    g: &mut Graph,
    cfg: &LcdConfig,
    m: NodeId,
    tokens: NodeId,
    weights: &[StepNodes],
    steps: usize,
) -> Result<NodeId> {
    let need = if cfg.share_step_weights { 1 } else { steps };
    if weights.len() < need || steps == 0 {
        return Err(Error::Config(format!(
            "distill: {} weight sets for {steps} steps",
            weights.len()
        )));
    }
    let (gm, gt) = (g.shape(m).to_vec(), g.shape(tokens).to_vec());
    if gm.len() != 2 || gt.len() != 2 || gm[1] != gt[1] {
        return Err(Error::Config(format!(
            "distill: meta-tokens {gm:?} and tokens {gt:?} disagree"
        )));
    }
    let mut m = m;
    for r in 0..steps {
        let w = StepWeights::from_nodes(g, &weights[if cfg.share_step_weights { 0 } else { r }], cfg)?;
        m = w.step(g, m, tokens, None, gm[0])?;
    }
    Ok(m)
}

/// `(1 / ΣK) Σ_l Σ_k m^l_k` over projected `[K_l × d]` meta-tokens; `[1 × d]`.
pub fn aggregate(g: &mut Graph, layers: &[NodeId]) -> Result<NodeId> {
    if layers.is_empty() {
        return Err(Error::Config("aggregate: no layers".into()));
    }
    let all = if layers.len() == 1 { layers[0] } else { g.concat_rows(layers)? };
    let mean = g.reduce_mean(all, &[0])?;
    let d = g.shape(mean)[0];
    Ok(g.reshape(mean, &[1, d])?)
}
