use std::sync::Arc;

use crate::backbone::{BackboneConfig, Modality};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tag, Tensor};

pub const FPN_CHANNELS: usize = 32;

/// Linear classifier over `[ā_t, v̄_t]`.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub w: ParamId,
    pub b: ParamId,
    pub labels: usize,
}

impl ClassificationHead {
    /// `[d_a + d_v × labels]` Xavier-uniform weight, zero bias.
    pub fn build(d_audio: usize, d_visual: usize, labels: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let t = Tag::Head;
        let w = store.add("head.cls.w", rng.xavier(d_audio + d_visual, labels, t).trainable());
        let b = store.add("head.cls.b", Tensor::zeros(&[labels], t).trainable());
        Self { w, b, labels }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    /// `[T × labels]` logits from `[T × d_a]` and `[T × d_v]` tokens.
    pub fn classify(&self, g: &mut Graph, bind: &Binding, audio: NodeId, visual: NodeId) -> Result<NodeId> {
        if g.shape(audio)[0] != g.shape(visual)[0] {
            return Err(Error::Config(format!(
                "classify: {:?} audio and {:?} visual tokens",
                g.shape(audio),
                g.shape(visual)
            )));
        }
        let prev = g.set_scope(Tag::Head);
        let out = (|| -> Result<NodeId> {
            let x = g.concat_cols(&[audio, visual])?;
            Ok(g.linear(x, bind[self.w], Some(bind[self.b]))?)
        })();
        g.set_scope(prev);
        out
    }
}

/// Feature-pyramid decoder: per-stage 1×1 laterals to `F` channels, nearest
/// upsampling to the first stage's grid, a sum, a two-layer pointwise head and
/// a final nearest upsample to the input resolution.
#[derive(Clone, Debug)]
pub struct FpnHead {
    pub lateral: Vec<(ParamId, ParamId)>,
    pub hidden: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
    /// nearest-neighbour source index of each first-stage cell, per stage
    up: Vec<Arc<Vec<usize>>>,
    /// source cell of each output pixel
    pixels: Arc<Vec<usize>>,
    grid: (usize, usize),
    frame: (usize, usize),
}

impl FpnHead {
    pub fn build(backbone: &BackboneConfig, channels: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let t = Tag::Head;
        let f = channels;
        let dims = backbone.dims();
        let lateral = dims
            .iter()
            .enumerate()
            .map(|(s, &d)| {
                (
                    store.add(format!("head.fpn.s{}.w", s + 1), rng.xavier(d, f, t).trainable()),
                    store.add(format!("head.fpn.s{}.b", s + 1), Tensor::zeros(&[f], t).trainable()),
                )
            })
            .collect();
        let hidden = (
            store.add("head.fpn.hidden.w", rng.xavier(f, f, t).trainable()),
            store.add("head.fpn.hidden.b", Tensor::zeros(&[f], t).trainable()),
        );
        let out = (
            store.add("head.fpn.out.w", rng.xavier(f, 1, t).trainable()),
            store.add("head.fpn.out.b", Tensor::zeros(&[1], t).trainable()),
        );
        let grid = backbone.stage_grid(Modality::Visual, 0);
        let up = (0..backbone.stages)
            .map(|s| {
                let (_, gw) = backbone.stage_grid(Modality::Visual, s);
                let mut idx = Vec::with_capacity(grid.0 * grid.1 * f);
                for y in 0..grid.0 {
                    for x in 0..grid.1 {
                        let src = (y >> s) * gw + (x >> s);
                        idx.extend(src * f..(src + 1) * f);
                    }
                }
                Arc::new(idx)
            })
            .collect();
        let geo = backbone.visual;
        let (ph, pw) = (geo.height / grid.0, geo.width / grid.1);
        let mut pixels = Vec::with_capacity(geo.height * geo.width);
        for y in 0..geo.height {
            for x in 0..geo.width {
                pixels.push((y / ph) * grid.1 + x / pw);
            }
        }
        Self {
            lateral,
            hidden,
            out,
            up,
            pixels: Arc::new(pixels),
            grid,
            frame: (geo.height, geo.width),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.lateral.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend([self.hidden.0, self.hidden.1, self.out.0, self.out.1]);
        ids
    }

    /// `[H × W]` mask logits from one frame's stage features.
    pub fn decode(&self, g: &mut Graph, bind: &Binding, stages: &[NodeId]) -> Result<NodeId> {
        if stages.len() != self.lateral.len() {
            return Err(Error::Config(format!(
                "fpn: {} stage features for {} stages",
                stages.len(),
                self.lateral.len()
            )));
        }
        let prev = g.set_scope(Tag::Head);
        let out = self.decode_scoped(g, bind, stages);
        g.set_scope(prev);
        out
    }

    fn decode_scoped(&self, g: &mut Graph, bind: &Binding, stages: &[NodeId]) -> Result<NodeId> {
        let cells = self.grid.0 * self.grid.1;
        let f = g.shape(bind[self.hidden.0])[0];
        let mut sum = None;
        for (s, (&x, &(w, b))) in stages.iter().zip(&self.lateral).enumerate() {
            let lat = g.linear(x, bind[w], Some(bind[b]))?;
            let lat = if s == 0 {
                lat
            } else {
                g.gather(lat, self.up[s].clone(), vec![cells, f])?
            };
            sum = Some(match sum {
                None => lat,
                Some(acc) => g.add(acc, lat)?,
            });
        }
        let h = sum.ok_or_else(|| Error::Config("fpn: no stages".into()))?;
        let h = g.linear(h, bind[self.hidden.0], Some(bind[self.hidden.1]))?;
        let h = g.relu(h)?;
        let logits = g.linear(h, bind[self.out.0], Some(bind[self.out.1]))?;
        Ok(g.gather(logits, self.pixels.clone(), vec![self.frame.0, self.frame.1])?)
    }
}
