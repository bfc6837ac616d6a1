//! Synthetic audio-visual clips with planted, recoverable structure.
//!
//! Classification clips carry one class; each timestamp shows that class's
//! low-rank visual and audio templates or, with the background probability,
//! neither. Segmentation frames contain grid-aligned rectangles painted with a
//! template colour; the mask marks the rectangle whose template the audio
//! plays. In the multi-source variant a second, silent rectangle is a
//! distractor.
//!
//! Templates depend only on the seed, so train and test splits (separate
//! random streams of the same seed) share them. All values are rounded to
//! `f32` so datasets survive the tensor container unchanged.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::backbone::InputGeometry;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tag, Tensor};
use crate::weights::round_to_f32;

const TEMPLATE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => TRAIN_STREAM,
            Split::Test => TEST_STREAM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSpec {
    pub timestamps: usize,
    pub classes: usize,
    pub noise: f64,
    pub background_prob: f64,
    pub template_rank: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            timestamps: 5,
            classes: 4,
            noise: 0.1,
            background_prob: 0.2,
            template_rank: 2,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if self.timestamps == 0 || self.classes == 0 || self.template_rank == 0 {
            return err("timestamps, classes and template_rank must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err("noise must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.background_prob) {
            return err("background_prob must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SegSpec {
    pub timestamps: usize,
    pub templates: usize,
    pub noise: f64,
    /// set from the task, not the config file
    #[serde(skip)]
    pub multi_source: bool,
    /// rectangle edges fall on multiples of this many pixels
    pub align: usize,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for SegSpec {
    fn default() -> Self {
        Self {
            timestamps: 5,
            templates: 4,
            noise: 0.1,
            multi_source: false,
            align: 8,
            min_fraction: 0.05,
            max_fraction: 0.4,
        }
    }
}

impl SegSpec {
    pub fn validate(&self, geo: InputGeometry) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("dataset: {m}")));
        if self.timestamps == 0 {
            return err("timestamps must be positive".into());
        }
        if self.templates < 2 {
            return err("segmentation needs at least two templates".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err("noise must be finite and nonnegative".into());
        }
        if self.align == 0 || geo.height % self.align != 0 || geo.width % self.align != 0 {
            return err(format!(
                "{}x{} frame is not divisible by align {}",
                geo.height, geo.width, self.align
            ));
        }
        if !(0.0 < self.min_fraction && self.min_fraction <= self.max_fraction && self.max_fraction < 1.0)
        {
            return err("mask fractions must satisfy 0 < min <= max < 1".into());
        }
        if rect_sizes(self, geo).is_empty() {
            return err("no rectangle size satisfies the mask fraction bounds".into());
        }
        Ok(())
    }
}

/// Class templates for both streams, `[H×W×C]` each.
#[derive(Clone, Debug)]
pub struct ClipTemplates {
    pub visual: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SegTemplates {
    /// one colour per template, length = visual channels
    pub colours: Vec<Vec<f64>>,
    /// audio pattern per template
    pub audio: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Clip {
    /// `[H×W×C]` per timestamp
    pub visual: Vec<Tensor>,
    pub audio: Vec<Tensor>,
    /// event class per timestamp; `classes` marks background
    pub labels: Vec<usize>,
    /// `[H×W]` binary masks per timestamp (segmentation only)
    pub masks: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub visual: InputGeometry,
    pub audio: InputGeometry,
    /// number of label values, background included (classification only)
    pub label_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn timestamps(&self) -> usize {
        self.clips.first().map_or(0, |c| c.visual.len())
    }
}

/// Unit-RMS sum of `rank` separable patterns `u(y) w(x) c(ch)`.
fn low_rank_template(rng: &mut Rng, geo: InputGeometry, rank: usize) -> Vec<f64> {
    let mut t = vec![0.0; geo.numel()];
    for _ in 0..rank {
        let u: Vec<f64> = (0..geo.height).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..geo.width).map(|_| rng.normal()).collect();
        let c: Vec<f64> = (0..geo.channels).map(|_| rng.normal()).collect();
        for y in 0..geo.height {
            for x in 0..geo.width {
                for ch in 0..geo.channels {
                    t[(y * geo.width + x) * geo.channels + ch] += u[y] * w[x] * c[ch];
                }
            }
        }
    }
    let rms = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
    for v in &mut t {
        *v /= rms;
    }
    t
}

pub fn clip_templates(spec: &ClipSpec, visual: InputGeometry, audio: InputGeometry, seed: u64) -> ClipTemplates {
    let mut rng = Rng::stream(seed, TEMPLATE_STREAM);
    let visual = (0..spec.classes)
        .map(|_| low_rank_template(&mut rng, visual, spec.template_rank))
        .collect();
    let audio = (0..spec.classes)
        .map(|_| low_rank_template(&mut rng, audio, spec.template_rank))
        .collect();
    ClipTemplates { visual, audio }
}

/// Colours are redrawn until every pair, and every colour and black, are at
/// least 1 apart.
pub fn seg_templates(spec: &SegSpec, visual: InputGeometry, audio: InputGeometry, seed: u64) -> SegTemplates {
    let mut rng = Rng::stream(seed, TEMPLATE_STREAM);
    let mut colours: Vec<Vec<f64>> = Vec::with_capacity(spec.templates);
    while colours.len() < spec.templates {
        let c: Vec<f64> = (0..visual.channels).map(|_| rng.normal()).collect();
        let far = |o: &[f64]| c.iter().zip(o).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= 1.0;
        if far(&vec![0.0; visual.channels]) && colours.iter().all(|o| far(o)) {
            colours.push(c);
        }
    }
    let audio = (0..spec.templates)
        .map(|_| low_rank_template(&mut rng, audio, 2))
        .collect();
    SegTemplates { colours, audio }
}

fn noisy(rng: &mut Rng, base: &[f64], shape: [usize; 3], noise: f64) -> Tensor {
    let mut data: Vec<f64> = base.iter().map(|&v| v + noise * rng.normal()).collect();
    round_to_f32(&mut data);
    Tensor::new(shape.to_vec(), data, Tag::Data).expect("template matches geometry")
}

/// Class-stratified clips: clip `i` has class `i mod C`.
pub fn gen_classification_dataset(
    spec: &ClipSpec,
    visual: InputGeometry,
    audio: InputGeometry,
    seed: u64,
    n: usize,
    split: Split,
) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.classes {
        return Err(Error::Config(format!(
            "dataset: {n} clips cannot cover {} classes",
            spec.classes
        )));
    }
    let templates = clip_templates(spec, visual, audio, seed);
    let mut rng = Rng::stream(seed, split.stream());
    let zeros_v = vec![0.0; visual.numel()];
    let zeros_a = vec![0.0; audio.numel()];
    let clips = (0..n)
        .map(|i| {
            let class = i % spec.classes;
            let mut clip = Clip {
                visual: Vec::new(),
                audio: Vec::new(),
                labels: Vec::new(),
                masks: Vec::new(),
            };
            for _ in 0..spec.timestamps {
                let background = rng.uniform() < spec.background_prob;
                let (v, a, label) = if background {
                    (&zeros_v, &zeros_a, spec.classes)
                } else {
                    (&templates.visual[class], &templates.audio[class], class)
                };
                clip.visual.push(noisy(&mut rng, v, visual.shape(), spec.noise));
                clip.audio.push(noisy(&mut rng, a, audio.shape(), spec.noise));
                clip.labels.push(label);
            }
            clip
        })
        .collect();
    Ok(Dataset {
        clips,
        visual,
        audio,
        label_count: spec.classes + 1,
    })
}

/// Rectangle sizes `(h, w)` in alignment cells meeting the fraction bounds.
fn rect_sizes(spec: &SegSpec, geo: InputGeometry) -> Vec<(usize, usize)> {
    let (ch, cw) = (geo.height / spec.align, geo.width / spec.align);
    let total = (ch * cw) as f64;
    let mut out = Vec::new();
    for h in 1..=ch {
        for w in 1..=cw {
            let f = (h * w) as f64 / total;
            if f >= spec.min_fraction && f <= spec.max_fraction {
                out.push((h, w));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.y < o.y + o.h && o.y < self.y + self.h && self.x < o.x + o.w && o.x < self.x + self.w
    }
}

fn place(rng: &mut Rng, sizes: &[(usize, usize)], ch: usize, cw: usize) -> Rect {
    let (h, w) = sizes[rng.below(sizes.len())];
    Rect {
        y: rng.below(ch - h + 1),
        x: rng.below(cw - w + 1),
        h,
        w,
    }
}

pub fn gen_segmentation_dataset(
    spec: &SegSpec,
    visual: InputGeometry,
    audio: InputGeometry,
    seed: u64,
    n: usize,
    split: Split,
) -> Result<Dataset> {
    spec.validate(visual)?;
    if n < 2 {
        return Err(Error::Config("dataset: segmentation needs at least 2 clips".into()));
    }
    let templates = seg_templates(spec, visual, audio, seed);
    let mut rng = Rng::stream(seed, split.stream());
    let sizes = rect_sizes(spec, visual);
    let (ch, cw) = (visual.height / spec.align, visual.width / spec.align);
    let mut clips = Vec::with_capacity(n);
    for _ in 0..n {
        let source = rng.below(spec.templates);
        let distractor = (source + 1 + rng.below(spec.templates - 1)) % spec.templates;
        let mut clip = Clip {
            visual: Vec::new(),
            audio: Vec::new(),
            labels: Vec::new(),
            masks: Vec::new(),
        };
        for _ in 0..spec.timestamps {
            let pos = place(&mut rng, &sizes, ch, cw);
            let mut objects = vec![(pos, source)];
            if spec.multi_source {
                let mut attempts = 0;
                let other = loop {
                    let r = place(&mut rng, &sizes, ch, cw);
                    if !r.overlaps(&pos) {
                        break r;
                    }
                    attempts += 1;
                    if attempts == PLACEMENT_ATTEMPTS {
                        return Err(Error::Config(
                            "dataset: cannot place two disjoint rectangles".into(),
                        ));
                    }
                };
                objects.push((other, distractor));
            }
            let c = visual.channels;
            let mut frame = vec![0.0; visual.numel()];
            let mut mask = vec![0.0; visual.height * visual.width];
            for (k, (r, tpl)) in objects.iter().enumerate() {
                for y in r.y * spec.align..(r.y + r.h) * spec.align {
                    for x in r.x * spec.align..(r.x + r.w) * spec.align {
                        let p = y * visual.width + x;
                        frame[p * c..(p + 1) * c].copy_from_slice(&templates.colours[*tpl]);
                        if k == 0 {
                            mask[p] = 1.0;
                        }
                    }
                }
            }
            clip.visual.push(noisy(&mut rng, &frame, visual.shape(), spec.noise));
            clip.audio.push(noisy(&mut rng, &templates.audio[source], audio.shape(), spec.noise));
            clip.labels.push(source);
            clip.masks.push(
                Tensor::new(vec![visual.height, visual.width], mask, Tag::Data)
                    .expect("mask matches geometry"),
            );
        }
        clips.push(clip);
    }
    Ok(Dataset {
        clips,
        visual,
        audio,
        label_count: spec.templates,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Per-timestamp labels from the nearest of the class templates and the
/// all-zero background, summing squared distances over both streams.
pub fn nearest_template_oracle(templates: &ClipTemplates, clip: &Clip) -> Vec<usize> {
    let classes = templates.visual.len();
    clip.visual
        .iter()
        .zip(&clip.audio)
        .map(|(v, a)| {
            let zero_cost = v.data().iter().map(|x| x * x).sum::<f64>()
                + a.data().iter().map(|x| x * x).sum::<f64>();
            let costs = (0..classes)
                .map(|c| sq_dist(v.data(), &templates.visual[c]) + sq_dist(a.data(), &templates.audio[c]))
                .chain(std::iter::once(zero_cost));
            argmin(costs)
        })
        .collect()
}

/// Nearest template (index `templates.len()` meaning background) of each
/// alignment cell's mean colour.
fn cell_templates(t: &SegTemplates, frame: &Tensor, geo: InputGeometry, align: usize) -> Vec<usize> {
    let (ch, cw) = (geo.height / align, geo.width / align);
    let c = geo.channels;
    let zero = vec![0.0; c];
    let mut out = Vec::with_capacity(ch * cw);
    for cy in 0..ch {
        for cx in 0..cw {
            let mut mean = vec![0.0; c];
            for y in cy * align..(cy + 1) * align {
                for x in cx * align..(cx + 1) * align {
                    let p = (y * geo.width + x) * c;
                    for k in 0..c {
                        mean[k] += frame.data()[p + k];
                    }
                }
            }
            for m in &mut mean {
                *m /= (align * align) as f64;
            }
            let costs = t.colours.iter().chain(std::iter::once(&zero)).map(|col| sq_dist(&mean, col));
            out.push(argmin(costs));
        }
    }
    out
}

fn cells_to_mask(cells: &[usize], keep: impl Fn(usize) -> bool, geo: InputGeometry, align: usize) -> Tensor {
    let cw = geo.width / align;
    let mut mask = vec![0.0; geo.height * geo.width];
    for y in 0..geo.height {
        for x in 0..geo.width {
            if keep(cells[(y / align) * cw + x / align]) {
                mask[y * geo.width + x] = 1.0;
            }
        }
    }
    Tensor::new(vec![geo.height, geo.width], mask, Tag::Data).expect("mask matches geometry")
}

/// Marks every cell matching some template, ignoring the audio.
pub fn visual_only_oracle(t: &SegTemplates, spec: &SegSpec, geo: InputGeometry, clip: &Clip) -> Vec<Tensor> {
    let bg = t.colours.len();
    clip.visual
        .iter()
        .map(|f| cells_to_mask(&cell_templates(t, f, geo, spec.align), |k| k != bg, geo, spec.align))
        .collect()
}

/// Marks the cells matching the template the audio is closest to.
pub fn audio_aware_oracle(t: &SegTemplates, spec: &SegSpec, geo: InputGeometry, clip: &Clip) -> Vec<Tensor> {
    clip.visual
        .iter()
        .zip(&clip.audio)
        .map(|(f, a)| {
            let heard = argmin(t.audio.iter().map(|tpl| sq_dist(a.data(), tpl)));
            cells_to_mask(&cell_templates(t, f, geo, spec.align), |k| k == heard, geo, spec.align)
        })
        .collect()
}
