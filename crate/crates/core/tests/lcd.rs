mod common;

use common::*;
use mettle_core::backbone::{Backbone, BackboneConfig, Modality};
use mettle_core::lcd::{aggregate, distill, DpMode, Lcd, LcdConfig, LayerSelection, StepNodes};
use mettle_core::{Graph, NodeId, ParamStore, Rng, Tag, Tensor};
use proptest::prelude::*;

fn cfg(ts: bool, dp: DpMode) -> LcdConfig {
    LcdConfig {
        enable_ts: ts,
        dp,
        ..LcdConfig::default()
    }
}

struct StepMats {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wg: Mat,
}

fn random_step(rng: &mut Rng, k: usize, n: usize, d: usize) -> StepMats {
    let mut m = |r: usize, c: usize| mat(&rng.normal_tensor(&[r, c], 0.7, Tag::Adaptation));
    StepMats {
        wq: m(d, d),
        wk: m(d, d),
        wv: m(d, d),
        wg: m(k, n),
    }
}

fn bind_step(g: &mut Graph, s: &StepMats) -> StepNodes {
    let mut leaf = |m: &Mat| g.leaf(&tensor(m, Tag::Adaptation).trainable());
    StepNodes {
        attn: Some([leaf(&s.wq), leaf(&s.wk), leaf(&s.wv)]),
        wg: Some(leaf(&s.wg)),
    }
}

fn run_distill(c: &LcdConfig, m: &Mat, v: &Mat, steps: &[StepMats], r: usize) -> Mat {
    let mut g = Graph::default();
    let mn = g.leaf(&tensor(m, Tag::Adaptation).trainable());
    let vn = g.constant(&tensor(v, Tag::Data), Tag::Data);
    let w: Vec<StepNodes> = steps.iter().map(|s| bind_step(&mut g, s)).collect();
    let out = distill(&mut g, c, mn, vn, &w, r).unwrap();
    mat(g.value(out))
}

#[test]
fn zero_tokens_and_zero_meta_tokens_stay_zero() {
    let mut rng = Rng::new(0);
    let s = random_step(&mut rng, 2, 3, 4);
    let zero_m = vec![vec![0.0; 4]; 2];
    let zero_v = vec![vec![0.0; 4]; 3];
    for dp in [DpMode::Linear, DpMode::AvgPool] {
        let out = run_distill(&cfg(true, dp), &zero_m, &zero_v, std::slice::from_ref(&s), 3);
        assert_eq!(out, zero_m);
    }
}

#[test]
fn one_token_one_meta_token() {
    let mut rng = Rng::new(1);
    let s = random_step(&mut rng, 1, 1, 3);
    let m = vec![vec![0.3, -1.0, 2.0]];
    let v = vec![vec![1.5, 0.2, -0.7]];
    let out = run_distill(&cfg(true, DpMode::Linear), &m, &v, std::slice::from_ref(&s), 1);
    // attention over a single token has weight one
    let expect = add(&mm(&v, &s.wv), &scale(&v, s.wg[0][0]));
    assert!(max_diff(&out, &expect) < 1e-12);
}

#[test]
fn single_step_matches_straight_line_oracle() {
    let mut rng = Rng::new(2);
    let (k, n, d) = (2, 3, 2);
    let s = random_step(&mut rng, k, n, d);
    let m = mat(&rng.normal_tensor(&[k, d], 1.0, Tag::Data));
    let v = mat(&rng.normal_tensor(&[n, d], 1.0, Tag::Data));
    for scaled in [true, false] {
        let c = LcdConfig {
            scale_logits: scaled,
            ..LcdConfig::default()
        };
        let out = run_distill(&c, &m, &v, std::slice::from_ref(&s), 1);
        let expect = distill_step(&m, &v, &s.wq, &s.wk, &s.wv, &s.wg, scaled);
        assert!(max_diff(&out, &expect) < 1e-12);
    }
}

#[test]
fn repeated_steps_apply_the_step_repeatedly() {
    let mut rng = Rng::new(3);
    let (k, n, d) = (2, 5, 4);
    let s0 = random_step(&mut rng, k, n, d);
    let s1 = random_step(&mut rng, k, n, d);
    let m = mat(&rng.normal_tensor(&[k, d], 1.0, Tag::Data));
    let v = mat(&rng.normal_tensor(&[n, d], 1.0, Tag::Data));
    let step = |m: &Mat, s: &StepMats| distill_step(m, &v, &s.wq, &s.wk, &s.wv, &s.wg, true);

    let shared = run_distill(&LcdConfig::default(), &m, &v, std::slice::from_ref(&s0), 2);
    assert!(max_diff(&shared, &step(&step(&m, &s0), &s0)) < 1e-12);

    let c = LcdConfig {
        share_step_weights: false,
        ..LcdConfig::default()
    };
    let expect = step(&step(&m, &s0), &s1);
    let separate = run_distill(&c, &m, &v, &[s0, s1], 2);
    assert!(max_diff(&separate, &expect) < 1e-12);
    assert!(max_diff(&separate, &shared) > 1e-6);
}

#[test]
fn pathways_are_separable() {
    let mut rng = Rng::new(4);
    let (k, n, d) = (2, 4, 3);
    let s = random_step(&mut rng, k, n, d);
    let m = mat(&rng.normal_tensor(&[k, d], 1.0, Tag::Data));
    let v = mat(&rng.normal_tensor(&[n, d], 1.0, Tag::Data));
    let one = std::slice::from_ref(&s);
    let both = run_distill(&cfg(true, DpMode::Linear), &m, &v, one, 1);
    let ts = run_distill(&cfg(true, DpMode::Off), &m, &v, one, 1);
    let dp = run_distill(&cfg(false, DpMode::Linear), &m, &v, one, 1);
    assert!(max_diff(&ts, &dp) > 1e-3);
    assert!(max_diff(&both, &ts) > 1e-3);
    // attention output replaces m, the reduction pathway adds to it
    assert!(max_diff(&both, &add(&ts, &mm(&s.wg, &v))) < 1e-12);
    assert!(max_diff(&dp, &add(&m, &mm(&s.wg, &v))) < 1e-12);

    let pooled = run_distill(&cfg(false, DpMode::AvgPool), &m, &v, one, 1);
    let col_mean: Vec<f64> = (0..d).map(|j| v.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    assert!(max_diff(&pooled, &add_row(&m, &col_mean)) < 1e-12);
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = Rng::new(5);
    let (k, n, d) = (3, 7, 4);
    let s = random_step(&mut rng, k, n, d);
    let mut g = Graph::default();
    let mn = g.leaf(&rng.normal_tensor(&[k, d], 5.0, Tag::Adaptation).trainable());
    let vn = g.constant(&rng.normal_tensor(&[n, d], 5.0, Tag::Data), Tag::Data);
    let w = bind_step(&mut g, &s);
    let c = LcdConfig {
        heads: 2,
        ..LcdConfig::default()
    };
    distill(&mut g, &c, mn, vn, &[w], 3).unwrap();
    let probs: Vec<NodeId> = g.nodes().filter(|i| i.op == "softmax_rows").map(|i| i.id).collect();
    assert_eq!(probs.len(), 6);
    for p in probs {
        let t = g.value(p);
        assert_eq!(t.shape(), &[k, n]);
        for row in mat(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn distill_rejects_mismatched_inputs() {
    let mut g = Graph::default();
    let m = g.constant(&Tensor::zeros(&[2, 4], Tag::Adaptation), Tag::Adaptation);
    let v = g.constant(&Tensor::zeros(&[3, 5], Tag::Data), Tag::Data);
    let w = StepNodes { attn: None, wg: None };
    assert!(distill(&mut g, &cfg(false, DpMode::AvgPool), m, v, &[w], 1).is_err());
    let v = g.constant(&Tensor::zeros(&[3, 4], Tag::Data), Tag::Data);
    assert!(distill(&mut g, &cfg(false, DpMode::AvgPool), m, v, &[], 1).is_err());
    assert!(distill(&mut g, &cfg(false, DpMode::AvgPool), m, v, &[w], 0).is_err());
}

fn aggregate_of(layers: &[Mat]) -> Mat {
    let mut g = Graph::default();
    let ids: Vec<NodeId> = layers
        .iter()
        .map(|l| g.constant(&tensor(l, Tag::Adaptation), Tag::Adaptation))
        .collect();
    let out = aggregate(&mut g, &ids).unwrap();
    mat(g.value(out))
}

#[test]
fn aggregate_averages_every_meta_token() {
    let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let b = vec![vec![-2.0, 0.5]];
    assert!(max_diff(&aggregate_of(&[a, b]), &vec![vec![2.0 / 3.0, 6.5 / 3.0]]) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_ignores_layer_and_token_order(
        seed in 0u64..1000,
        ks in prop::collection::vec(1usize..4, 1..5),
        rot in 0usize..4,
    ) {
        let mut rng = Rng::new(seed);
        let layers: Vec<Mat> = ks.iter().map(|&k| mat(&rng.normal_tensor(&[k, 3], 1.0, Tag::Data))).collect();
        let base = aggregate_of(&layers);
        let mut shuffled = layers.clone();
        shuffled.rotate_left(rot % layers.len());
        for l in &mut shuffled {
            l.reverse();
        }
        prop_assert!(max_diff(&base, &aggregate_of(&shuffled)) < 1e-12);
    }

    #[test]
    fn one_step_matches_oracle_for_random_sizes(
        seed in 0u64..1000,
        k in 1usize..4,
        n in 1usize..6,
        d in 1usize..5,
    ) {
        let mut rng = Rng::new(seed);
        let s = random_step(&mut rng, k, n, d);
        let m = mat(&rng.normal_tensor(&[k, d], 1.0, Tag::Data));
        let v = mat(&rng.normal_tensor(&[n, d], 1.0, Tag::Data));
        let out = run_distill(&LcdConfig::default(), &m, &v, std::slice::from_ref(&s), 1);
        let expect = distill_step(&m, &v, &s.wq, &s.wk, &s.wv, &s.wg, true);
        prop_assert!(max_diff(&out, &expect) < 1e-10);
    }
}

struct Built {
    store: ParamStore,
    bb: Backbone,
    lcd: Lcd,
}

fn build(bcfg: &BackboneConfig, lcfg: &LcdConfig) -> Built {
    let mut store = ParamStore::new();
    let bb = Backbone::build(bcfg, &mut store, &mut Rng::new(0)).unwrap();
    let lcd = Lcd::build(lcfg, bcfg, &mut store, &mut Rng::new(1)).unwrap();
    Built { store, bb, lcd }
}

fn clip(bcfg: &BackboneConfig, t: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut rng = Rng::new(seed);
    let mut frames = |m: Modality| -> Vec<Tensor> {
        (0..t).map(|_| rng.normal_tensor(&bcfg.geometry(m).shape(), 1.0, Tag::Data)).collect()
    };
    (frames(Modality::Visual), frames(Modality::Audio))
}

#[test]
fn banks_follow_layer_selection_and_per_stage_counts() {
    let bcfg = BackboneConfig::tiny().with_layers(2);
    let lcfg = LcdConfig {
        k_per_stage: Some(vec![8, 4, 2, 1]),
        ..LcdConfig::default()
    };
    let b = build(&bcfg, &lcfg);
    let ks: Vec<usize> = b.lcd.visual.layers.iter().map(|l| l.k).collect();
    assert_eq!(ks, vec![8, 8, 4, 4, 2, 2, 1, 1]);
    for lb in &b.lcd.audio.layers {
        assert_eq!(b.store.get(lb.meta).shape(), &[lb.k, lb.dim]);
        assert_eq!(b.store.get(lb.steps[0].wg.unwrap()).shape(), &[lb.k, lb.tokens]);
    }

    let only = LcdConfig {
        layers: LayerSelection::Only(vec![3, 7]),
        r_visual: 3,
        share_step_weights: false,
        dp: DpMode::AvgPool,
        ..LcdConfig::default()
    };
    let b = build(&bcfg, &only);
    assert_eq!(b.lcd.visual.layers.iter().map(|l| l.layer).collect::<Vec<_>>(), vec![3, 7]);
    assert_eq!(b.lcd.visual.layers[0].steps.len(), 3);
    assert_eq!(b.lcd.audio.layers[0].steps.len(), 1);
    assert!(b.lcd.visual.layers[0].steps.iter().all(|s| s.wg.is_none()));

    let bad = LcdConfig {
        layers: LayerSelection::Only(vec![8]),
        ..LcdConfig::default()
    };
    assert!(bad.validate(&bcfg).is_err());
    assert!(cfg(false, DpMode::Off).validate(&bcfg).is_err());
}

#[test]
fn more_meta_tokens_mean_more_parameters() {
    let bcfg = BackboneConfig::tiny();
    let count = |k: usize| {
        let lcfg = LcdConfig {
            k_audio: k,
            k_visual: k,
            ..LcdConfig::default()
        };
        build(&bcfg, &lcfg).store.trainable_count()
    };
    assert!(count(1) < count(2) && count(2) < count(4));
}

#[test]
fn single_frame_distillation_shapes() {
    let bcfg = BackboneConfig::tiny();
    let lcfg = LcdConfig {
        k_visual: 3,
        common_dim: 6,
        ..LcdConfig::default()
    };
    let b = build(&bcfg, &lcfg);
    let (v, a) = clip(&bcfg, 1, 2);
    let (feats, _) = b.bb.forward_frozen(&b.store, &v, &a, Default::default()).unwrap();
    let mut g = Graph::default();
    let bind = b.store.bind(&mut g);
    let frames: Vec<Vec<NodeId>> = feats
        .visual
        .frames
        .iter()
        .map(|f| f.iter().map(|t| g.constant(t, Tag::Data)).collect())
        .collect();
    let out = b.lcd.distill_frames(&mut g, &bind, &b.lcd.visual, &frames).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].len(), 4);
    for &id in &out[0] {
        assert_eq!(g.shape(id), &[3, 6]);
        assert_eq!(g.info(id).tag, Tag::Adaptation);
    }
    let short = vec![frames[0][..2].to_vec()];
    assert!(b.lcd.distill_frames(&mut g, &bind, &b.lcd.visual, &short).is_err());
}

#[test]
fn each_layer_distils_only_its_own_tokens() {
    let bcfg = BackboneConfig::tiny();
    let b = build(&bcfg, &LcdConfig::default());
    let (v, a) = clip(&bcfg, 2, 3);
    let (feats, _) = b.bb.forward_frozen(&b.store, &v, &a, Default::default()).unwrap();
    let run = |perturb: Option<usize>| -> Vec<Vec<Tensor>> {
        let mut g = Graph::default();
        let bind = b.store.bind(&mut g);
        let frames: Vec<Vec<NodeId>> = feats
            .audio
            .frames
            .iter()
            .map(|f| {
                f.iter()
                    .enumerate()
                    .map(|(l, t)| {
                        let t = if perturb == Some(l) {
                            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + 1.0).collect(), Tag::Data).unwrap()
                        } else {
                            t.clone()
                        };
                        g.constant(&t, Tag::Data)
                    })
                    .collect()
            })
            .collect();
        let out = b.lcd.distill_frames(&mut g, &bind, &b.lcd.audio, &frames).unwrap();
        out.iter().map(|f| f.iter().map(|&id| g.value(id).clone()).collect()).collect()
    };
    let base = run(None);
    let moved = run(Some(1));
    for (bf, mf) in base.iter().zip(&moved) {
        for (l, (x, y)) in bf.iter().zip(mf).enumerate() {
            assert_eq!(x.data() == y.data(), l != 1, "layer {l}");
        }
    }
}

#[test]
fn classification_readout_is_one_row_per_frame() {
    let bcfg = BackboneConfig::tiny();
    let b = build(&bcfg, &LcdConfig::default());
    let (v, a) = clip(&bcfg, 3, 4);
    let (feats, _) = b.bb.forward_frozen(&b.store, &v, &a, Default::default()).unwrap();
    let mut g = Graph::default();
    let bind = b.store.bind(&mut g);
    let mut nodes = |m: Modality| -> Vec<Vec<NodeId>> {
        feats.get(m).frames.iter().map(|f| f.iter().map(|t| g.constant(t, Tag::Data)).collect()).collect()
    };
    let (vn, an) = (nodes(Modality::Visual), nodes(Modality::Audio));
    let agg = b.lcd.classification_forward(&mut g, &bind, &vn, &an).unwrap();
    assert_eq!(g.shape(agg.visual), &[3, 64]);
    assert_eq!(g.shape(agg.audio), &[3, 64]);
    assert!(b.lcd.classification_forward(&mut g, &bind, &vn, &an[..2]).is_err());

    let loss = g.mean_all(agg.visual).unwrap();
    let grads = g.backward(loss).unwrap();
    for id in b.lcd.visual.param_ids() {
        assert!(grads.contains(bind[id]), "{}", b.store.name(id));
    }
    assert_eq!(g.ledger().backbone, 0);
}
