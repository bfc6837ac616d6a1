//! Straight-line reference implementations used as test oracles. Nothing here
//! calls into the graph; matrices are plain nested vectors.

#![allow(dead_code)]

use mettle_core::backbone::{BackboneConfig, Modality};
use mettle_core::{Tag, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vector(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn tensor(m: &Mat, tag: Tag) -> Tensor {
    let r = m.len();
    let c = m.first().map_or(0, Vec::len);
    Tensor::new(vec![r, c], m.concat(), tag).unwrap()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (k, &x) in row.iter().enumerate() {
                        s += x * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn scale(a: &Mat, c: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x * c).collect()).collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn softmax(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn layer_norm(a: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mu) * inv * g[j] + b[j])
                .collect()
        })
        .collect()
}

pub fn gelu(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            r.iter()
                .map(|&x| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
                .collect()
        })
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

pub fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// `softmax(v mᵀ [/sqrt D]) m + v`
pub fn inject(v: &Mat, m: &Mat, scaled: bool) -> Mat {
    let mut logits = mm(v, &transpose(m));
    if scaled {
        logits = scale(&logits, 1.0 / (v[0].len() as f64).sqrt());
    }
    add(v, &mm(&softmax(&logits), m))
}

/// One single-head distillation step with both pathways.
pub fn distill_step(m: &Mat, v: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wg: &Mat, scaled: bool) -> Mat {
    let q = mm(m, wq);
    let k = mm(v, wk);
    let mut logits = mm(&q, &transpose(&k));
    if scaled {
        logits = scale(&logits, 1.0 / (m[0].len() as f64).sqrt());
    }
    let ts = mm(&softmax(&logits), &mm(v, wv));
    add(&ts, &mm(wg, v))
}

/// Retained bytes by tag, in ledger field order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Bytes {
    pub backbone: usize,
    pub adaptation: usize,
    pub head: usize,
    pub data: usize,
}

impl Bytes {
    pub fn total(&self) -> usize {
        self.backbone + self.adaptation + self.head + self.data
    }

    pub fn times(self, w: usize) -> Self {
        Self {
            backbone: self.backbone * w,
            adaptation: self.adaptation * w,
            head: self.head * w,
            data: self.data * w,
        }
    }
}

impl std::ops::Add for Bytes {
    type Output = Bytes;
    fn add(self, o: Bytes) -> Bytes {
        Bytes {
            backbone: self.backbone + o.backbone,
            adaptation: self.adaptation + o.adaptation,
            head: self.head + o.head,
            data: self.data + o.data,
        }
    }
}

/// `(N, D, first layer of its stage)` for every layer of stream `m`.
fn layers(cfg: &BackboneConfig, m: Modality) -> Vec<(usize, usize, usize, bool)> {
    let geo = cfg.geometry(m);
    let (gh, gw) = geo.grid();
    let mut out = Vec::new();
    for s in 0..cfg.stages {
        let n = (gh >> s) * (gw >> s);
        let d = cfg.base_dim << s;
        for l in 0..cfg.layers_per_stage[s] {
            out.push((s, n, d, l == 0));
        }
    }
    out
}

/// Element counts saved by one stream of the adapter topology: parameters once,
/// activations for `frames` frames. Every layer after the first has a
/// grad-requiring input, so it saves what its backward needs.
pub fn adapter_stream_elements(cfg: &BackboneConfig, m: Modality, rank: usize, frames: usize) -> Bytes {
    let h = cfg.heads;
    let mut once = Bytes::default();
    let mut per = Bytes::default();
    for (i, &(s, n, d, first_in_stage)) in layers(cfg, m).iter().enumerate() {
        let hid = cfg.mlp_ratio * d;
        if i > 0 {
            if first_in_stage && s > 0 {
                // merge weight, and the merged tokens as LN input
                once.backbone += 4 * (d / 2) * d;
                per.backbone += n * d;
            } else {
                // adapter output feeding LN1
                per.adaptation += n * d;
            }
            once.backbone += d + 3 * d * d + d * d + d + d * hid + hid * d;
            per.backbone += 2 * n * d + h * n * n + n * d + n * d + n * hid;
        }
        // adapter: layer output, relu input and output, up weight, and the
        // down weight once the layer output itself carries a gradient
        per.backbone += n * d;
        per.adaptation += 2 * n * rank;
        once.adaptation += if i > 0 { 2 * d * rank } else { d * rank };
    }
    let mut total = once;
    for _ in 0..frames {
        total = total + per;
    }
    total
}

/// Adapter classification: both streams, pooled readouts and the linear head.
pub fn adapter_classification_elements(
    cfg: &BackboneConfig,
    rank: usize,
    common: usize,
    labels: usize,
    frames: usize,
) -> Bytes {
    let last = cfg.base_dim << (cfg.stages - 1);
    let mut total = Bytes::default();
    for m in Modality::BOTH {
        total = total + adapter_stream_elements(cfg, m, rank, frames);
        total.adaptation += last * common + frames * last;
    }
    total + head_elements(common, labels, frames)
}

/// Linear head on `[T × 2d]`: weight, input and logits.
pub fn head_elements(common: usize, labels: usize, frames: usize) -> Bytes {
    Bytes {
        head: 2 * common * labels + frames * 2 * common + frames * labels,
        ..Bytes::default()
    }
}

/// Frozen-backbone classification with single-head LCD on every layer,
/// both pathways, shared step weights.
pub fn mettle_classification_elements(
    cfg: &BackboneConfig,
    k: usize,
    r: usize,
    common: usize,
    labels: usize,
    frames: usize,
) -> Bytes {
    let mut total = Bytes::default();
    for m in Modality::BOTH {
        for &(_, n, d, _) in &layers(cfg, m) {
            // m0, W_Q, q, W_K, W_V, projection weight
            total.adaptation += k * d + 3 * d * d + k * d + d * common;
            let first = k * n + k * d;
            let later = 2 * k * d + k * n + k * d;
            total.adaptation += frames * (first + (r - 1) * later + k * d);
            total.data += frames * n * d;
        }
    }
    total + head_elements(common, labels, frames)
}
