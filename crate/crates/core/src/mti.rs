//! Meta-token injection into multi-resolution visual features.
//!
//! Audio and visual meta-tokens are aligned to a stage's width by separate
//! linear maps, then written into the stage tokens with residual attention:
//!
//! ```text
//! v ← v + softmax(v m_aᵀ) m_a     cross-modal
//! v ← v + softmax(v m_vᵀ) m_v     intra-modal
//! ```
//!
//! The softmax runs over the meta-tokens of each visual token. Beyond the
//! alignment maps the injection has no parameters.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tag, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum InjectOrder {
    CrossFirst,
    IntraFirst,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MtiConfig {
    pub order: InjectOrder,
    /// 1-based stages receiving injection
    pub stages: Vec<usize>,
    pub enable_cross: bool,
    pub enable_intra: bool,
    /// 1-based stage whose final layer feeds LCD
    pub source_stage: usize,
}

impl Default for MtiConfig {
    fn default() -> Self {
        Self {
            order: InjectOrder::CrossFirst,
            stages: vec![1, 2, 3, 4],
            enable_cross: true,
            enable_intra: true,
            source_stage: 4,
        }
    }
}

impl MtiConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("mti: {m}")));
        if !self.enable_cross && !self.enable_intra {
            return err("at least one of enable_cross and enable_intra must be set".into());
        }
        let n = backbone.stages;
        if self.source_stage == 0 || self.source_stage > n {
            return err(format!("source_stage {} is outside 1..={n}", self.source_stage));
        }
        let mut sorted = self.stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.stages.len() || sorted.iter().any(|&s| s == 0 || s > n) {
            return err(format!("stages {:?} are invalid for {n} stages", self.stages));
        }
        Ok(())
    }

    /// Layer index feeding LCD.
    pub fn source_layer(&self, backbone: &BackboneConfig) -> usize {
        backbone.stage_ends()[self.source_stage - 1]
    }
}

/// Alignment maps of one stage: `[d × D^l]` weight and `[D^l]` bias for each
/// enabled pathway.
#[derive(Clone, Debug)]
pub struct StageAlign {
    pub stage: usize,
    pub audio: Option<(ParamId, ParamId)>,
    pub visual: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Mti {
    pub config: MtiConfig,
    /// one entry per backbone stage; `None` where injection is off
    pub stages: Vec<Option<StageAlign>>,
    pub scale_logits: bool,
}

impl Mti {
    /// Xavier-uniform alignment weights, zero biases.
    pub fn build(
        config: &MtiConfig,
        backbone: &BackboneConfig,
        common_dim: usize,
        scale_logits: bool,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate(backbone)?;
        let t = Tag::Adaptation;
        let dims = backbone.dims();
        let stages = (0..backbone.stages)
            .map(|s| {
                config.stages.contains(&(s + 1)).then(|| {
                    let d = dims[s];
                    let p = format!("mti.s{}", s + 1);
                    let mut pair = |name: &str| {
                        (
                            store.add(format!("{p}.{name}"), rng.xavier(common_dim, d, t).trainable()),
                            store.add(format!("{p}.{name}_b"), Tensor::zeros(&[d], t).trainable()),
                        )
                    };
                    let audio = config.enable_cross.then(|| pair("align_a"));
                    let visual = config.enable_intra.then(|| pair("align_v"));
                    StageAlign { stage: s, audio, visual }
                })
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stages,
            scale_logits,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flatten()
            .flat_map(|s| s.audio.into_iter().chain(s.visual))
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Injects one frame's meta-tokens (`[K_a × d]`, `[K_v × d]`) into that
    /// frame's stage outputs. Stages without injection pass through. Tokens of
    /// a disabled pathway may be omitted.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        stages: &[NodeId],
        meta_audio: Option<NodeId>,
        meta_visual: Option<NodeId>,
    ) -> Result<Vec<NodeId>> {
        if stages.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "mti: {} stage features for {} stages",
                stages.len(),
                self.stages.len()
            )));
        }
        if (self.config.enable_cross && meta_audio.is_none())
            || (self.config.enable_intra && meta_visual.is_none())
        {
            return Err(Error::Config("mti: meta-tokens missing for an enabled pathway".into()));
        }
        let prev = g.set_scope(Tag::Adaptation);
        let out = stages
            .iter()
            .zip(&self.stages)
            .map(|(&v, sa)| match sa {
                None => Ok(v),
                Some(sa) => self.inject_stage(g, bind, sa, v, meta_audio, meta_visual),
            })
            .collect();
        g.set_scope(prev);
        out
    }

    fn inject_stage(
        &self,
        g: &mut Graph,
        bind: &Binding,
        sa: &StageAlign,
        v: NodeId,
        meta_audio: Option<NodeId>,
        meta_visual: Option<NodeId>,
    ) -> Result<NodeId> {
        let pathway = |g: &mut Graph, p: Option<(ParamId, ParamId)>, m: Option<NodeId>| -> Result<Option<NodeId>> {
            match (p, m) {
                (Some((w, b)), Some(m)) => Ok(Some(align(g, m, bind[w], bind[b])?)),
                _ => Ok(None),
            }
        };
        let ma = pathway(g, sa.audio, meta_audio)?;
        let mv = pathway(g, sa.visual, meta_visual)?;
        let steps = match self.config.order {
            InjectOrder::CrossFirst => [ma, mv],
            InjectOrder::IntraFirst => [mv, ma],
        };
        let mut v = v;
        for m in steps.into_iter().flatten() {
            v = inject(g, v, m, self.scale_logits)?;
        }
        Ok(v)
    }
}

/// Per-token linear map `m·w + b`.
pub fn align(g: &mut Graph, m: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    Ok(g.linear(m, w, Some(b))?)
}

/// `v + softmax(v mᵀ [/ sqrt(D)]) m` for `v: [N × D]`, `m: [K × D]`.
pub fn inject(g: &mut Graph, v: NodeId, m: NodeId, scale_logits: bool) -> Result<NodeId> {
    let (vs, ms) = (g.shape(v).to_vec(), g.shape(m).to_vec());
    if vs.len() != 2 || ms.len() != 2 || vs[1] != ms[1] || ms[0] == 0 {
        return Err(Error::Config(format!(
            "inject: visual tokens {vs:?} and meta-tokens {ms:?} disagree"
        )));
    }
    let logits = g.matmul_nt(v, m)?;
    let logits = if scale_logits {
        g.scale(logits, 1.0 / (vs[1] as f64).sqrt())?
    } else {
        logits
    };
    let p = g.softmax_rows(logits)?;
    let r = g.matmul(p, m)?;
    Ok(g.add(v, r)?)
}
