//! Hierarchical transformer encoder for the audio and visual streams.
//!
//! Each stage runs pre-norm self-attention layers at one token resolution;
//! between stages a 2×2 patch merge quarters the token count and doubles the
//! width. The encoder is frozen; an adapter-inserted variant makes it the
//! trainable baseline whose gradients must traverse every layer.

use std::sync::Arc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ledger::MemoryLedger;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{NodeId, Precision, Tag, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visual, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }
}

/// Raw input frame geometry and patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InputGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl InputGeometry {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stages: usize,
    pub layers_per_stage: Vec<usize>,
    pub base_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub visual: InputGeometry,
    pub audio: InputGeometry,
    /// One encoder instance for both streams (patch embeddings stay separate).
    pub shared_weights: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            layers_per_stage: vec![2, 2, 2, 2],
            base_dim: 32,
            heads: 4,
            mlp_ratio: 2,
            visual: InputGeometry {
                height: 64,
                width: 64,
                channels: 3,
                patch: 4,
            },
            audio: InputGeometry {
                height: 32,
                width: 32,
                channels: 1,
                patch: 4,
            },
            shared_weights: false,
        }
    }
}

impl BackboneConfig {
    /// Half the default widths and an 8-pixel visual patch; used where many
    /// training runs have to fit in seconds.
    pub fn small() -> Self {
        Self {
            base_dim: 16,
            heads: 2,
            visual: InputGeometry {
                patch: 8,
                ..Self::default().visual
            },
            ..Self::default()
        }
    }

    /// One layer per stage at width 4..32 on 16×16 inputs.
    pub fn tiny() -> Self {
        Self {
            layers_per_stage: vec![1, 1, 1, 1],
            base_dim: 4,
            heads: 2,
            visual: InputGeometry {
                height: 16,
                width: 16,
                channels: 3,
                patch: 2,
            },
            audio: InputGeometry {
                height: 8,
                width: 8,
                channels: 1,
                patch: 1,
            },
            ..Self::default()
        }
    }

    pub fn with_layers(mut self, per_stage: usize) -> Self {
        self.layers_per_stage = vec![per_stage; self.stages];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.stages == 0 {
            return err("stages must be at least 1".into());
        }
        if self.layers_per_stage.len() != self.stages {
            return err(format!(
                "layers_per_stage has {} entries for {} stages",
                self.layers_per_stage.len(),
                self.stages
            ));
        }
        if self.layers_per_stage.iter().any(|&n| n == 0) {
            return err("every stage needs at least one layer".into());
        }
        if self.base_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return err("base_dim, heads and mlp_ratio must be positive".into());
        }
        for d in self.dims() {
            if d % self.heads != 0 {
                return err(format!("width {d} is not divisible by {} heads", self.heads));
            }
        }
        let step = 1usize << (self.stages - 1);
        for m in Modality::BOTH {
            let geo = self.geometry(m);
            if geo.patch == 0 || geo.channels == 0 {
                return err(format!("{}: patch and channels must be positive", m.name()));
            }
            if geo.height % geo.patch != 0 || geo.width % geo.patch != 0 {
                return err(format!(
                    "{}: {}x{} input is not divisible by patch {}",
                    m.name(),
                    geo.height,
                    geo.width,
                    geo.patch
                ));
            }
            let (gh, gw) = geo.grid();
            if gh == 0 || gw == 0 || gh % step != 0 || gw % step != 0 {
                return err(format!(
                    "{}: patch grid {gh}x{gw} is not divisible by {step}",
                    m.name()
                ));
            }
        }
        Ok(())
    }

    pub fn geometry(&self, m: Modality) -> InputGeometry {
        match m {
            Modality::Visual => self.visual,
            Modality::Audio => self.audio,
        }
    }

    /// Width of each stage.
    pub fn dims(&self) -> Vec<usize> {
        (0..self.stages).map(|s| self.base_dim << s).collect()
    }

    pub fn layer_count(&self) -> usize {
        self.layers_per_stage.iter().sum()
    }

    /// Stage of each layer, in order.
    pub fn layer_stages(&self) -> Vec<usize> {
        self.layers_per_stage
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| std::iter::repeat(s).take(n))
            .collect()
    }

    /// Index of each stage's last layer.
    pub fn stage_ends(&self) -> Vec<usize> {
        self.layers_per_stage
            .iter()
            .scan(0, |acc, &n| {
                *acc += n;
                Some(*acc - 1)
            })
            .collect()
    }

    pub fn stage_grid(&self, m: Modality, stage: usize) -> (usize, usize) {
        let (gh, gw) = self.geometry(m).grid();
        (gh >> stage, gw >> stage)
    }

    pub fn stage_tokens(&self, m: Modality, stage: usize) -> usize {
        let (h, w) = self.stage_grid(m, stage);
        h * w
    }

    /// `(tokens, width)` of every layer's output.
    pub fn layer_shapes(&self, m: Modality) -> Vec<(usize, usize)> {
        let dims = self.dims();
        self.layer_stages()
            .into_iter()
            .map(|s| (self.stage_tokens(m, s), dims[s]))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerParams {
    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo, self.ln2_g,
            self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct StageParams {
    /// `[4·D_prev × D]`, absent for the first stage
    pub merge: Option<ParamId>,
    pub layers: Vec<LayerParams>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// `[patch²·C × D₁]`
    pub embed: ParamId,
    pub stages: Vec<StageParams>,
}

/// Bottleneck adapter on one layer's output: `h + relu(h·down + b_d)·up + b_u`.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub down: ParamId,
    pub down_b: ParamId,
    pub up: ParamId,
    pub up_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub bottleneck_rank: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { bottleneck_rank: 8 }
    }
}

/// Per-layer adapters of both streams.
#[derive(Clone, Debug)]
pub struct Adapters {
    pub visual: Vec<AdapterParams>,
    pub audio: Vec<AdapterParams>,
}

impl Adapters {
    /// Down projections Xavier-initialised, up projections zero, so the adapted
    /// backbone starts out computing the frozen function.
    pub fn build(
        config: &BackboneConfig,
        cfg: AdapterConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.bottleneck_rank == 0 {
            return Err(Error::Config("adapter: bottleneck_rank must be positive".into()));
        }
        let r = cfg.bottleneck_rank;
        let mut make = |m: Modality| -> Vec<AdapterParams> {
            config
                .layer_shapes(m)
                .into_iter()
                .enumerate()
                .map(|(l, (_, d))| {
                    let p = format!("adapter.{}.l{l}", m.name());
                    let t = Tag::Adaptation;
                    AdapterParams {
                        down: store.add(format!("{p}.down"), rng.xavier(d, r, t).trainable()),
                        down_b: store.add(format!("{p}.down_b"), Tensor::zeros(&[r], t).trainable()),
                        up: store.add(format!("{p}.up"), Tensor::zeros(&[r, d], t).trainable()),
                        up_b: store.add(format!("{p}.up_b"), Tensor::zeros(&[d], t).trainable()),
                    }
                })
                .collect()
        };
        let visual = make(Modality::Visual);
        let audio = make(Modality::Audio);
        Ok(Self { visual, audio })
    }

    pub fn get(&self, m: Modality) -> &[AdapterParams] {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub visual: EncoderParams,
    pub audio: EncoderParams,
}

impl Backbone {
    /// Registers randomly initialised, frozen backbone weights in `store`.
    /// Linear maps are Xavier-uniform, layer norms start at identity, biases at 0.
    pub fn build(config: &BackboneConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let visual = build_encoder(config, Modality::Visual, None, store, rng);
        let shared = config.shared_weights.then(|| visual.stages.clone());
        let audio = build_encoder(config, Modality::Audio, shared, store, rng);
        Ok(Self {
            config: config.clone(),
            visual,
            audio,
        })
    }

    pub fn encoder(&self, m: Modality) -> &EncoderParams {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    /// Parameters of one encoder layer of stream `m`.
    pub fn layer(&self, m: Modality, layer: usize) -> &LayerParams {
        let stages = self.config.layer_stages();
        let s = stages[layer];
        let first = stages.iter().position(|&x| x == s).unwrap_or(0);
        &self.encoder(m).stages[s].layers[layer - first]
    }

    /// Every backbone parameter, both streams, without duplicates.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for m in Modality::BOTH {
            let enc = self.encoder(m);
            ids.push(enc.embed);
            for st in &enc.stages {
                ids.extend(st.merge);
                for l in &st.layers {
                    ids.extend(l.ids());
                }
            }
        }
        ids.sort();
        ids.dedup();
        ids
    }

    /// Makes one encoder layer trainable. This breaks the frozen topology and
    /// exists for negative controls.
    pub fn unfreeze_layer(&self, store: &mut ParamStore, m: Modality, layer: usize) {
        for id in self.layer(m, layer).ids() {
            store.set_trainable(id, true);
        }
    }

    /// Runs one stream on a `[H×W×C]` input node and returns every layer's
    /// output tokens. Backbone ops are tagged `backbone`, adapter ops
    /// `adaptation`.
    pub fn encode(
        &self,
        g: &mut Graph,
        bind: &Binding,
        m: Modality,
        input: NodeId,
        adapters: Option<&[AdapterParams]>,
    ) -> Result<Vec<NodeId>> {
        let prev = g.set_scope(Tag::Backbone);
        let out = self.encode_scoped(g, bind, m, input, adapters);
        g.set_scope(prev);
        out
    }

    fn encode_scoped(
        &self,
        g: &mut Graph,
        bind: &Binding,
        m: Modality,
        input: NodeId,
        adapters: Option<&[AdapterParams]>,
    ) -> Result<Vec<NodeId>> {
        let cfg = &self.config;
        let enc = self.encoder(m);
        let geo = cfg.geometry(m);
        let mut x = patchify(g, input, geo, bind[enc.embed])?;
        let mut outputs = Vec::with_capacity(cfg.layer_count());
        for (s, stage) in enc.stages.iter().enumerate() {
            if let Some(w) = stage.merge {
                let (gh, gw) = cfg.stage_grid(m, s - 1);
                x = patch_merge(g, x, gh, gw, bind[w])?;
            }
            for lp in &stage.layers {
                x = encoder_layer(g, x, lp, bind, cfg.heads)?;
                if let Some(ad) = adapters {
                    let a = &ad[outputs.len()];
                    let prev = g.set_scope(Tag::Adaptation);
                    let y = adapter(g, x, a, bind);
                    g.set_scope(prev);
                    x = y?;
                }
                outputs.push(x);
            }
        }
        Ok(outputs)
    }

    /// Frozen forward of a clip: every layer's tokens at every timestamp for
    /// both streams. Weights enter as constants whatever their grad flags, so
    /// nothing is retained.
    pub fn forward_frozen(
        &self,
        store: &ParamStore,
        visual: &[Tensor],
        audio: &[Tensor],
        precision: Precision,
    ) -> Result<(ClipFeatures, MemoryLedger)> {
        if visual.len() != audio.len() {
            return Err(Error::Config(format!(
                "{} visual frames but {} audio frames",
                visual.len(),
                audio.len()
            )));
        }
        let mut ledger = MemoryLedger {
            element_width: precision.width(),
            ..MemoryLedger::default()
        };
        let mut out = ClipFeatures::default();
        let mut g = Graph::new(precision);
        for (m, frames) in [(Modality::Visual, visual), (Modality::Audio, audio)] {
            let mut feats = LayerFeatures::default();
            for frame in frames {
                g.clear();
                let bind = store.bind_frozen(&mut g);
                let x = g.constant(frame, Tag::Data);
                let layers = self.encode(&mut g, &bind, m, x, None)?;
                feats
                    .frames
                    .push(layers.iter().map(|&id| g.value(id).detached()).collect());
                ledger = ledger + g.ledger();
            }
            *out.get_mut(m) = feats;
        }
        Ok((out, ledger))
    }
}

fn build_encoder(
    config: &BackboneConfig,
    m: Modality,
    shared: Option<Vec<StageParams>>,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> EncoderParams {
    let t = Tag::Backbone;
    let geo = config.geometry(m);
    let dims = config.dims();
    let prefix = format!("backbone.{}", m.name());
    let patch_in = geo.patch * geo.patch * geo.channels;
    let embed = store.add(format!("{prefix}.embed"), rng.xavier(patch_in, dims[0], t));
    let stages = shared.unwrap_or_else(|| {
        let owner = if config.shared_weights { "backbone.shared".to_string() } else { prefix };
        (0..config.stages)
            .map(|s| {
                let d = dims[s];
                let merge = (s > 0).then(|| {
                    store.add(format!("{owner}.s{s}.merge"), rng.xavier(4 * dims[s - 1], d, t))
                });
                let layers = (0..config.layers_per_stage[s])
                    .map(|l| {
                        let p = format!("{owner}.s{s}.l{l}");
                        let h = config.mlp_ratio * d;
                        let mut add = |name: &str, v: Tensor| store.add(format!("{p}.{name}"), v);
                        LayerParams {
                            ln1_g: add("ln1_g", Tensor::full(&[d], 1.0, t)),
                            ln1_b: add("ln1_b", Tensor::zeros(&[d], t)),
                            wq: add("wq", rng.xavier(d, d, t)),
                            wk: add("wk", rng.xavier(d, d, t)),
                            wv: add("wv", rng.xavier(d, d, t)),
                            wo: add("wo", rng.xavier(d, d, t)),
                            ln2_g: add("ln2_g", Tensor::full(&[d], 1.0, t)),
                            ln2_b: add("ln2_b", Tensor::zeros(&[d], t)),
                            w1: add("w1", rng.xavier(d, h, t)),
                            b1: add("b1", Tensor::zeros(&[h], t)),
                            w2: add("w2", rng.xavier(h, d, t)),
                            b2: add("b2", Tensor::zeros(&[d], t)),
                        }
                    })
                    .collect();
                StageParams { merge, layers }
            })
            .collect()
    });
    EncoderParams { embed, stages }
}

/// Flat source offsets of non-overlapping patches of an `[H×W×C]` frame:
/// patches in row-major grid order, each flattened as (row, column, channel).
pub fn patch_index(geo: InputGeometry) -> Vec<usize> {
    let (gh, gw) = geo.grid();
    let p = geo.patch;
    let c = geo.channels;
    let mut idx = Vec::with_capacity(geo.numel());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((py * p + dy) * geo.width + px * p + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

/// `[H×W×C]` frame → `[N × D₁]` tokens through a bias-free linear embedding.
pub fn patchify(g: &mut Graph, input: NodeId, geo: InputGeometry, embed: NodeId) -> Result<NodeId> {
    let shape = g.shape(input).to_vec();
    if shape != geo.shape() {
        return Err(Error::Config(format!(
            "input shape {shape:?} does not match geometry {:?}",
            geo.shape()
        )));
    }
    if geo.patch == 0 || geo.height % geo.patch != 0 || geo.width % geo.patch != 0 {
        return Err(Error::Config(format!(
            "{}x{} input is not divisible by patch {}",
            geo.height, geo.width, geo.patch
        )));
    }
    let (gh, gw) = geo.grid();
    let patches = g.gather(
        input,
        Arc::new(patch_index(geo)),
        vec![gh * gw, geo.patch * geo.patch * geo.channels],
    )?;
    Ok(g.matmul(patches, embed)?)
}

/// Concatenates each 2×2 token neighbourhood (top-left, bottom-left,
/// top-right, bottom-right) and maps it to the next width.
pub fn patch_merge(g: &mut Graph, x: NodeId, gh: usize, gw: usize, w: NodeId) -> Result<NodeId> {
    let d = g.shape(x)[1];
    let mut idx = Vec::with_capacity(gh * gw * d);
    for y in (0..gh).step_by(2) {
        for xx in (0..gw).step_by(2) {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let tok = (y + dy) * gw + xx + dx;
                idx.extend(tok * d..(tok + 1) * d);
            }
        }
    }
    let merged = g.gather(x, Arc::new(idx), vec![(gh / 2) * (gw / 2), 4 * d])?;
    Ok(g.matmul(merged, w)?)
}

/// Multi-head scaled dot-product self-attention without the output projection.
pub fn self_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let d = g.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale)?;
        let p = g.softmax_rows(logits)?;
        outs.push(g.matmul(p, vh)?);
    }
    Ok(if heads == 1 { outs[0] } else { g.concat_cols(&outs)? })
}

/// `x + MHSA(LN(x))`, then `+ MLP(LN(·))` with a GELU hidden layer.
pub fn encoder_layer(
    g: &mut Graph,
    x: NodeId,
    p: &LayerParams,
    bind: &Binding,
    heads: usize,
) -> Result<NodeId> {
    let h = g.layer_norm(x, bind[p.ln1_g], bind[p.ln1_b], LN_EPS)?;
    let q = g.matmul(h, bind[p.wq])?;
    let k = g.matmul(h, bind[p.wk])?;
    let v = g.matmul(h, bind[p.wv])?;
    let att = self_attention(g, q, k, v, heads)?;
    let att = g.matmul(att, bind[p.wo])?;
    let x = g.add(x, att)?;
    let h = g.layer_norm(x, bind[p.ln2_g], bind[p.ln2_b], LN_EPS)?;
    let h = g.linear(h, bind[p.w1], Some(bind[p.b1]))?;
    let h = g.gelu(h)?;
    let h = g.linear(h, bind[p.w2], Some(bind[p.b2]))?;
    Ok(g.add(x, h)?)
}

pub fn adapter(g: &mut Graph, x: NodeId, a: &AdapterParams, bind: &Binding) -> Result<NodeId> {
    let h = g.linear(x, bind[a.down], Some(bind[a.down_b]))?;
    let h = g.relu(h)?;
    let h = g.linear(h, bind[a.up], Some(bind[a.up_b]))?;
    Ok(g.add(x, h)?)
}

/// Layer outputs of one stream: `frames[t][l]` is `[N^l × D^l]`.
#[derive(Clone, Debug, Default)]
pub struct LayerFeatures {
    pub frames: Vec<Vec<Tensor>>,
}

impl LayerFeatures {
    pub fn timestamps(&self) -> usize {
        self.frames.len()
    }

    pub fn layers(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ClipFeatures {
    pub visual: LayerFeatures,
    pub audio: LayerFeatures,
}

impl ClipFeatures {
    pub fn get(&self, m: Modality) -> &LayerFeatures {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut LayerFeatures {
        match m {
            Modality::Visual => &mut self.visual,
            Modality::Audio => &mut self.audio,
        }
    }
}
