//! The toy detector: conv backbone with WaveNP hooks, one encoder block,
//! DAQS query selection, a small decoder and class/box heads.
//!
//! Images are processed one at a time. [`ToyDetr::forward`] returns the
//! predictions and a [`Tape`] of intermediates; [`ToyDetr::backward`]
//! consumes the tape and accumulates parameter gradients.

use dgdetr_core::daqs::{daqs_backward, daqs_forward_with, DaqsCotangent, DaqsParams, DaqsTrace};
use dgdetr_core::styleaug::{wavenp_backward, wavenp_forward, wavenp_forward_with_noise, NoiseSample, WaveNPConfig, WaveNPTrace};
use dgdetr_core::{FeatureMap, LinearParams, RngStream, Shape4};
use serde::{Deserialize, Serialize};

use crate::layers::{
    attention, attention_backward, conv2d, conv2d_backward, gelu, gelu_grad, im2col, layer_norm,
    layer_norm_backward, linear, linear_backward, sigmoid, softmax_rows, AttnCache, AttnGrads, AttnWeights,
    ConvGeom, LnCache,
};
use crate::params::{slots_mut, Init, Layout, Slot};
use crate::scene::IMAGE_SIZE;
use crate::{Error, Result};

/// Number of stride-2 stages; tokens form a `64 / 2^3` grid.
const STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the three backbone stages; the last is the
    /// token width.
    pub channels: [usize; 3],
    pub heads: usize,
    pub ffn_dim: usize,
    pub decoder_layers: usize,
    /// Number of selected queries.
    pub k: usize,
    pub num_classes: usize,
    /// Width and height of the reference box at each token cell.
    pub anchor_size: f64,
    /// Style projection during selection. When off, selection is plain
    /// top-K over the unprojected tokens.
    pub daqs: bool,
    /// Projection strength at inference.
    pub proj_alpha_infer: f64,
    pub wavenp: WaveNPConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32],
            heads: 4,
            ffn_dim: 64,
            decoder_layers: 2,
            k: 10,
            num_classes: 3,
            anchor_size: 0.25,
            daqs: true,
            proj_alpha_infer: 1.0,
            wavenp: WaveNPConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.channels[2];
        if self.channels.contains(&0) || self.heads == 0 || d % self.heads != 0 {
            return Err(Error::contract(format!("token width {d} must be a positive multiple of heads {}", self.heads)));
        }
        if self.ffn_dim == 0 || self.num_classes == 0 || self.decoder_layers == 0 {
            return Err(Error::contract("ffn_dim, num_classes and decoder_layers must be >= 1"));
        }
        if self.k == 0 || self.k > grid() * grid() {
            return Err(Error::contract(format!("k must lie in 1..={}", grid() * grid())));
        }
        if !(self.anchor_size > 0.0 && self.anchor_size < 1.0) {
            return Err(Error::contract("anchor_size must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.proj_alpha_infer) {
            return Err(Error::contract("proj_alpha_infer must lie in [0, 1]"));
        }
        self.wavenp.validate()?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.channels[2]
    }
}

fn grid() -> usize {
    IMAGE_SIZE >> STAGES
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// WaveNP active, projection strength 1.
    Train,
    /// No WaveNP, configured projection strength.
    Infer,
}

/// Per-stage WaveNP noise of one forward pass (`None`: not perturbed).
pub type StageNoise = Vec<Option<Vec<NoiseSample<f64>>>>;

/// Where train-mode WaveNP noise comes from.
pub enum NoiseSource<'a> {
    Sample(&'a mut RngStream),
    /// Reuses the noise recorded by an earlier pass.
    Replay(&'a StageNoise),
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    gamma: Slot,
    beta: Slot,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: Slot,
    bq: Slot,
    wk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: Slot,
    b: Slot,
}

#[derive(Clone, Copy, Debug)]
struct DecoderIds {
    ln_self: LnIds,
    self_attn: AttnIds,
    ln_cross: LnIds,
    cross_attn: AttnIds,
    ln_ffn: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
struct DaqsIds {
    es_w: Slot,
    es_b: Slot,
    es_gamma: Slot,
    es_beta: Slot,
    ec_w: Slot,
    ec_b: Slot,
}

#[derive(Clone, Debug)]
struct Ids {
    conv: [ConvIds; STAGES],
    pos: Slot,
    enc_ln1: LnIds,
    enc_attn: AttnIds,
    enc_ln2: LnIds,
    enc_ffn: FfnIds,
    daqs: DaqsIds,
    decoder: Vec<DecoderIds>,
    head_ln: LnIds,
    cls_w: Slot,
    cls_b: Slot,
    box_w: Slot,
    box_b: Slot,
}

fn add_ln(l: &mut Layout, name: &str, d: usize) -> LnIds {
    LnIds { gamma: l.add(format!("{name}.gamma"), &[d], Init::Ones), beta: l.add(format!("{name}.beta"), &[d], Init::Zeros) }
}

fn add_attn(l: &mut Layout, name: &str, d: usize) -> AttnIds {
    let std = 1.0 / (d as f64).sqrt();
    let mut weight = |p: &str| l.add(format!("{name}.w{p}"), &[d, d], Init::Normal(std));
    let (wq, wk, wv, wo) = (weight("q"), weight("k"), weight("v"), weight("o"));
    let mut bias = |p: &str| l.add(format!("{name}.b{p}"), &[d], Init::Zeros);
    let (bq, bv, bo) = (bias("q"), bias("v"), bias("o"));
    AttnIds { wq, bq, wk, wv, bv, wo, bo }
}

fn add_ffn(l: &mut Layout, name: &str, d: usize, hidden: usize) -> FfnIds {
    FfnIds {
        w1: l.add(format!("{name}.w1"), &[d, hidden], Init::Normal(1.0 / (d as f64).sqrt())),
        b1: l.add(format!("{name}.b1"), &[hidden], Init::Zeros),
        w2: l.add(format!("{name}.w2"), &[hidden, d], Init::Normal(1.0 / (hidden as f64).sqrt())),
        b2: l.add(format!("{name}.b2"), &[d], Init::Zeros),
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Ids) {
    let mut l = Layout::default();
    let d = cfg.dim();
    let mut c_in = 3;
    let conv = std::array::from_fn(|s| {
        let c_out = cfg.channels[s];
        let patch = c_in * 9;
        let ids = ConvIds {
            w: l.add(format!("backbone.{}.weight", s + 1), &[c_out, patch], Init::Normal((2.0 / patch as f64).sqrt())),
            b: l.add(format!("backbone.{}.bias", s + 1), &[c_out], Init::Zeros),
        };
        c_in = c_out;
        ids
    });
    let pos = l.add("encoder.pos", &[grid() * grid(), d], Init::Normal(0.1));
    let enc_ln1 = add_ln(&mut l, "encoder.ln1", d);
    let enc_attn = add_attn(&mut l, "encoder.attn", d);
    let enc_ln2 = add_ln(&mut l, "encoder.ln2", d);
    let enc_ffn = add_ffn(&mut l, "encoder.ffn", d, cfg.ffn_dim);
    let nc = cfg.num_classes;
    let daqs = DaqsIds {
        // Stored d_out x d_in, as the selection module expects.
        es_w: l.add("daqs.es.weight", &[d, d], Init::Identity),
        es_b: l.add("daqs.es.bias", &[d], Init::Zeros),
        es_gamma: l.add("daqs.es.gamma", &[d], Init::Ones),
        es_beta: l.add("daqs.es.beta", &[d], Init::Zeros),
        ec_w: l.add("daqs.ec.weight", &[nc, d], Init::Normal(1.0 / (d as f64).sqrt())),
        ec_b: l.add("daqs.ec.bias", &[nc], Init::Zeros),
    };
    let decoder = (0..cfg.decoder_layers)
        .map(|i| DecoderIds {
            ln_self: add_ln(&mut l, &format!("decoder.{i}.ln_self"), d),
            self_attn: add_attn(&mut l, &format!("decoder.{i}.self_attn"), d),
            ln_cross: add_ln(&mut l, &format!("decoder.{i}.ln_cross"), d),
            cross_attn: add_attn(&mut l, &format!("decoder.{i}.cross_attn"), d),
            ln_ffn: add_ln(&mut l, &format!("decoder.{i}.ln_ffn"), d),
            ffn: add_ffn(&mut l, &format!("decoder.{i}.ffn"), d, cfg.ffn_dim),
        })
        .collect();
    let head_ln = add_ln(&mut l, "head.ln", d);
    let cls_w = l.add("head.cls.weight", &[d, nc + 1], Init::Normal(1.0 / (d as f64).sqrt()));
    let cls_b = l.add("head.cls.bias", &[nc + 1], Init::Zeros);
    let box_w = l.add("head.box.weight", &[d, 4], Init::Normal(0.01));
    let box_b = l.add("head.box.bias", &[4], Init::Zeros);
    let ids = Ids { conv, pos, enc_ln1, enc_attn, enc_ln2, enc_ffn, daqs, decoder, head_ln, cls_w, cls_b, box_w, box_b };
    (l, ids)
}

/// Outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub k: usize,
    /// `num_classes + 1` columns; the last is background.
    pub classes: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// `k x 4`, `(cx, cy, w, h)` in `[0, 1]`.
    pub boxes: Vec<f64>,
    /// Selected token indices.
    pub indices: Vec<usize>,
    /// `tokens x num_classes` logits of the selection head.
    pub token_logits: Vec<f64>,
}

impl Prediction {
    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn box_row(&self, i: usize) -> [f64; 4] {
        self.boxes[i * 4..i * 4 + 4].try_into().expect("4 coordinates")
    }
}

/// Cotangents of a [`Prediction`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrad {
    pub logits: Vec<f64>,
    pub boxes: Vec<f64>,
    pub token_logits: Vec<f64>,
}

struct StageTape {
    cols: Vec<f64>,
    pre: Vec<f64>,
    wavenp: Option<WaveNPTrace<f64>>,
}

struct FfnTape {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct DecoderTape {
    ln_self: LnCache,
    self_attn: AttnCache,
    ln_cross: LnCache,
    cross_attn: AttnCache,
    ln_ffn: LnCache,
    ffn: FfnTape,
}

/// Forward intermediates of one image.
pub struct Tape {
    stages: Vec<StageTape>,
    enc_ln1: LnCache,
    enc_attn: AttnCache,
    enc_ln2: LnCache,
    enc_ffn: FfnTape,
    daqs: DaqsTrace<f64>,
    decoder: Vec<DecoderTape>,
    head_ln: LnCache,
    head_in: Vec<f64>,
    boxes: Vec<f64>,
    noise: StageNoise,
    indices: Vec<usize>,
}

impl Tape {
    /// WaveNP noise drawn during the pass, for replay.
    pub fn noise(&self) -> &StageNoise {
        &self.noise
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

#[derive(Clone, Debug)]
pub struct ToyDetr {
    config: ModelConfig,
    layout: Layout,
    ids: Ids,
}

impl ToyDetr {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, ids) = build_layout(&config);
        Ok(Self { config, layout, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    pub fn init_params(&self, rng: &mut RngStream) -> Vec<f64> {
        self.layout.initialize(rng)
    }

    fn geoms(&self) -> [ConvGeom; STAGES] {
        let mut c_in = 3;
        let mut size = IMAGE_SIZE;
        std::array::from_fn(|s| {
            let g = ConvGeom { c_in, c_out: self.config.channels[s], h: size, w: size, kernel: 3, stride: 2, pad: 1 };
            c_in = g.c_out;
            size = g.out_h();
            g
        })
    }

    fn selection_alpha(&self, mode: RunMode) -> f64 {
        match (self.config.daqs, mode) {
            (false, _) => 0.0,
            (true, RunMode::Train) => 1.0,
            (true, RunMode::Infer) => self.config.proj_alpha_infer,
        }
    }

    fn daqs_params(&self, p: &[f64]) -> Result<DaqsParams<f64>> {
        let (d, nc, ids) = (self.config.dim(), self.config.num_classes, &self.ids.daqs);
        Ok(DaqsParams {
            es_linear: LinearParams::new(d, d, p[ids.es_w.range()].to_vec(), p[ids.es_b.range()].to_vec())?,
            es_gamma: p[ids.es_gamma.range()].to_vec(),
            es_beta: p[ids.es_beta.range()].to_vec(),
            ec_head: LinearParams::new(d, nc, p[ids.ec_w.range()].to_vec(), p[ids.ec_b.range()].to_vec())?,
            k: self.config.k,
            proj_alpha: self.config.proj_alpha_infer,
        })
    }

    /// Runs one `(1, 3, 64, 64)` image.
    ///
    /// `forced` replaces the top-K choice with a fixed index list. In train
    /// mode `noise` supplies or replays the WaveNP draws.
    pub fn forward(
        &self,
        p: &[f64],
        image: &FeatureMap<f64>,
        mode: RunMode,
        noise: NoiseSource,
        forced: Option<&[usize]>,
    ) -> Result<(Prediction, Tape)> {
        if p.len() != self.layout.total() {
            return Err(Error::contract(format!("expected {} parameters, got {}", self.layout.total(), p.len())));
        }
        if image.shape() != Shape4::new(1, 3, IMAGE_SIZE, IMAGE_SIZE) {
            return Err(Error::contract(format!("image must be (1, 3, 64, 64), got {}", image.shape())));
        }
        let cfg = &self.config;
        let d = cfg.dim();
        let mut noise = noise;

        // Backbone.
        let mut x = image.data().to_vec();
        let mut stages = Vec::with_capacity(STAGES);
        let mut drawn: StageNoise = vec![None; STAGES];
        for (s, g) in self.geoms().iter().enumerate() {
            let ids = self.ids.conv[s];
            let cols = im2col(&x, g);
            let pre = conv2d(&cols, g, &p[ids.w.range()], &p[ids.b.range()]);
            let mut act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
            let mut trace = None;
            if mode == RunMode::Train && cfg.wavenp.enabled && cfg.wavenp.applies_at(s + 1) {
                let fm = FeatureMap::new(Shape4::new(1, g.c_out, g.out_h(), g.out_w()), act)?;
                let (out, t) = match &mut noise {
                    NoiseSource::Sample(rng) => wavenp_forward(&fm, rng, &cfg.wavenp)?,
                    NoiseSource::Replay(recorded) => match recorded.get(s).cloned().flatten() {
                        Some(n) => wavenp_forward_with_noise(&fm, cfg.wavenp.target, n)?,
                        None => wavenp_forward(&fm, &mut RngStream::new(0), &WaveNPConfig::disabled())?,
                    },
                };
                if t.was_applied() {
                    drawn[s] = Some(t.noise().to_vec());
                }
                act = out.into_data();
                trace = Some(t);
            }
            stages.push(StageTape { cols, pre, wavenp: trace });
            x = act;
        }

        // Channel-major map to token rows, plus position embedding.
        let n_tok = grid() * grid();
        let pos = &p[self.ids.pos.range()];
        let mut tokens = vec![0.0; n_tok * d];
        for c in 0..d {
            for t in 0..n_tok {
                tokens[t * d + c] = x[c * n_tok + t] + pos[t * d + c];
            }
        }

        // Encoder block.
        let (a, enc_ln1) = self.ln(p, self.ids.enc_ln1, &tokens);
        let (sa, enc_attn) = attention(&a, &a, d, cfg.heads, self.attn_w(p, self.ids.enc_attn));
        let x1: Vec<f64> = tokens.iter().zip(&sa).map(|(u, v)| u + v).collect();
        let (b, enc_ln2) = self.ln(p, self.ids.enc_ln2, &x1);
        let (f, enc_ffn) = self.ffn(p, self.ids.enc_ffn, b);
        let memory: Vec<f64> = x1.iter().zip(&f).map(|(u, v)| u + v).collect();

        // Query selection on the encoder output.
        let fm = FeatureMap::from_fn(Shape4::new(1, d, grid(), grid()), |_, c, y, xx| memory[(y * grid() + xx) * d + c]);
        let forced_rows = forced.map(|f| vec![f.to_vec()]);
        let (mut sel, daqs) =
            daqs_forward_with(&fm, &self.daqs_params(p)?, self.selection_alpha(mode), forced_rows.as_deref())?;
        let sel = sel.remove(0);
        let token_logits = daqs.logits(0).to_vec();
        let indices = sel.indices.clone();
        let k = indices.len();

        // Decoder.
        let mut q = sel.queries.tokens;
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for ids in &self.ids.decoder {
            let (a, ln_self) = self.ln(p, ids.ln_self, &q);
            let (sa, self_attn) = attention(&a, &a, d, cfg.heads, self.attn_w(p, ids.self_attn));
            q.iter_mut().zip(&sa).for_each(|(u, v)| *u += v);
            let (c, ln_cross) = self.ln(p, ids.ln_cross, &q);
            let (ca, cross_attn) = attention(&c, &memory, d, cfg.heads, self.attn_w(p, ids.cross_attn));
            q.iter_mut().zip(&ca).for_each(|(u, v)| *u += v);
            let (e, ln_ffn) = self.ln(p, ids.ln_ffn, &q);
            let (f, ffn) = self.ffn(p, ids.ffn, e);
            q.iter_mut().zip(&f).for_each(|(u, v)| *u += v);
            decoder.push(DecoderTape { ln_self, self_attn, ln_cross, cross_attn, ln_ffn, ffn });
        }

        // Heads.
        let (z, head_ln) = self.ln(p, self.ids.head_ln, &q);
        let logits = linear(&z, k, &p[self.ids.cls_w.range()], &p[self.ids.cls_b.range()]);
        let mut probs = logits.clone();
        softmax_rows(&mut probs, cfg.num_classes + 1);
        let raw = linear(&z, k, &p[self.ids.box_w.range()], &p[self.ids.box_b.range()]);
        let boxes: Vec<f64> = raw
            .chunks(4)
            .zip(&indices)
            .flat_map(|(r, &t)| {
                let anchor = self.anchor_logits(t);
                (0..4).map(move |i| sigmoid(r[i] + anchor[i]))
            })
            .collect();

        let pred = Prediction {
            k,
            classes: cfg.num_classes + 1,
            logits,
            probs,
            boxes: boxes.clone(),
            indices: indices.clone(),
            token_logits,
        };
        let tape = Tape {
            stages,
            enc_ln1,
            enc_attn,
            enc_ln2,
            enc_ffn,
            daqs,
            decoder,
            head_ln,
            head_in: z,
            boxes,
            noise: drawn,
            indices,
        };
        Ok((pred, tape))
    }

    /// Reference box of token `t` in logit space.
    fn anchor_logits(&self, t: usize) -> [f64; 4] {
        let g = grid() as f64;
        let logit = |v: f64| (v / (1.0 - v)).ln();
        let (cy, cx) = (((t / grid()) as f64 + 0.5) / g, ((t % grid()) as f64 + 0.5) / g);
        let a = self.config.anchor_size;
        [logit(cx), logit(cy), logit(a), logit(a)]
    }

    /// Accumulates the parameter gradient of `<cot, prediction>` into `grads`.
    pub fn backward(&self, p: &[f64], tape: Tape, cot: &PredictionGrad, grads: &mut [f64]) -> Result<()> {
        if grads.len() != self.layout.total() {
            return Err(Error::contract("gradient buffer does not match the parameter layout"));
        }
        let cfg = &self.config;
        let d = cfg.dim();
        let k = tape.indices.len();
        let n_tok = grid() * grid();
        let nc1 = cfg.num_classes + 1;
        if cot.logits.len() != k * nc1 || cot.boxes.len() != k * 4 || cot.token_logits.len() != n_tok * cfg.num_classes {
            return Err(Error::contract("prediction cotangent does not match the forward pass"));
        }
        let Tape { stages, enc_ln1, enc_attn, enc_ln2, enc_ffn, daqs, decoder, head_ln, head_in, boxes, .. } = tape;

        // Heads.
        let d_raw: Vec<f64> = cot.boxes.iter().zip(&boxes).map(|(g, &b)| g * b * (1.0 - b)).collect();
        let mut dz = {
            let [gw, gb] = slots_mut(grads, [self.ids.cls_w, self.ids.cls_b]);
            linear_backward(&head_in, k, &p[self.ids.cls_w.range()], &cot.logits, gw, gb)
        };
        {
            let [gw, gb] = slots_mut(grads, [self.ids.box_w, self.ids.box_b]);
            let dzb = linear_backward(&head_in, k, &p[self.ids.box_w.range()], &d_raw, gw, gb);
            dz.iter_mut().zip(&dzb).for_each(|(a, b)| *a += b);
        }
        let mut dq = self.ln_back(p, self.ids.head_ln, &head_ln, &dz, grads);

        // Decoder.
        let mut d_memory = vec![0.0; n_tok * d];
        for (ids, t) in self.ids.decoder.iter().zip(&decoder).rev() {
            let df = self.ffn_back(p, ids.ffn, &t.ffn, &dq, grads);
            let de = self.ln_back(p, ids.ln_ffn, &t.ln_ffn, &df, grads);
            dq.iter_mut().zip(&de).for_each(|(a, b)| *a += b);

            let w = self.attn_w(p, ids.cross_attn);
            let (dc, dm) = attention_backward(&t.cross_attn, d, cfg.heads, w, attn_grads(grads, ids.cross_attn), &dq);
            d_memory.iter_mut().zip(&dm).for_each(|(a, b)| *a += b);
            let dc = self.ln_back(p, ids.ln_cross, &t.ln_cross, &dc, grads);
            dq.iter_mut().zip(&dc).for_each(|(a, b)| *a += b);

            let w = self.attn_w(p, ids.self_attn);
            let (da, dkv) = attention_backward(&t.self_attn, d, cfg.heads, w, attn_grads(grads, ids.self_attn), &dq);
            let da: Vec<f64> = da.iter().zip(&dkv).map(|(a, b)| a + b).collect();
            let da = self.ln_back(p, ids.ln_self, &t.ln_self, &da, grads);
            dq.iter_mut().zip(&da).for_each(|(a, b)| *a += b);
        }

        // Selection.
        let upstream = DaqsCotangent { queries: vec![dq], scores: vec![vec![0.0; k]], logits: Some(vec![cot.token_logits.clone()]) };
        let g = daqs_backward(daqs, &upstream)?;
        let ids = self.ids.daqs;
        for (slot, src) in [
            (ids.es_w, &g.es_weight),
            (ids.es_b, &g.es_bias),
            (ids.es_gamma, &g.es_gamma),
            (ids.es_beta, &g.es_beta),
            (ids.ec_w, &g.ec_weight),
            (ids.ec_b, &g.ec_bias),
        ] {
            grads[slot.range()].iter_mut().zip(src.iter()).for_each(|(a, b)| *a += b);
        }
        let gf = g.features.data();
        for t in 0..n_tok {
            for c in 0..d {
                d_memory[t * d + c] += gf[c * n_tok + t];
            }
        }

        // Encoder.
        let mut dx = d_memory;
        let df = self.ffn_back(p, self.ids.enc_ffn, &enc_ffn, &dx, grads);
        let db = self.ln_back(p, self.ids.enc_ln2, &enc_ln2, &df, grads);
        dx.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        let w = self.attn_w(p, self.ids.enc_attn);
        let (da, dkv) = attention_backward(&enc_attn, d, cfg.heads, w, attn_grads(grads, self.ids.enc_attn), &dx);
        let da: Vec<f64> = da.iter().zip(&dkv).map(|(a, b)| a + b).collect();
        let da = self.ln_back(p, self.ids.enc_ln1, &enc_ln1, &da, grads);
        dx.iter_mut().zip(&da).for_each(|(a, b)| *a += b);
        grads[self.ids.pos.range()].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);

        // Backbone.
        let mut dact = vec![0.0; n_tok * d];
        for t in 0..n_tok {
            for c in 0..d {
                dact[c * n_tok + t] = dx[t * d + c];
            }
        }
        let geoms = self.geoms();
        for (s, tape) in stages.into_iter().enumerate().rev() {
            let g = &geoms[s];
            if let Some(trace) = tape.wavenp {
                let up = FeatureMap::new(Shape4::new(1, g.c_out, g.out_h(), g.out_w()), dact)?;
                dact = wavenp_backward(trace, &up)?.into_data();
            }
            let dpre: Vec<f64> = dact.iter().zip(&tape.pre).map(|(g, &v)| g * gelu_grad(v)).collect();
            let ids = self.ids.conv[s];
            let [gw, gb] = slots_mut(grads, [ids.w, ids.b]);
            match conv2d_backward(&tape.cols, g, &p[ids.w.range()], &dpre, gw, gb, s > 0) {
                Some(dx) => dact = dx,
                None => break,
            }
        }
        Ok(())
    }

    fn ln(&self, p: &[f64], ids: LnIds, x: &[f64]) -> (Vec<f64>, LnCache) {
        layer_norm(x, self.config.dim(), &p[ids.gamma.range()], &p[ids.beta.range()])
    }

    fn ln_back(&self, p: &[f64], ids: LnIds, cache: &LnCache, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let [gg, gb] = slots_mut(grads, [ids.gamma, ids.beta]);
        layer_norm_backward(cache, self.config.dim(), &p[ids.gamma.range()], dy, gg, gb)
    }

    fn attn_w<'a>(&self, p: &'a [f64], ids: AttnIds) -> AttnWeights<'a> {
        AttnWeights {
            wq: &p[ids.wq.range()],
            bq: &p[ids.bq.range()],
            wk: &p[ids.wk.range()],
            wv: &p[ids.wv.range()],
            bv: &p[ids.bv.range()],
            wo: &p[ids.wo.range()],
            bo: &p[ids.bo.range()],
        }
    }

    fn ffn(&self, p: &[f64], ids: FfnIds, input: Vec<f64>) -> (Vec<f64>, FfnTape) {
        let rows = input.len() / self.config.dim();
        let pre = linear(&input, rows, &p[ids.w1.range()], &p[ids.b1.range()]);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let out = linear(&act, rows, &p[ids.w2.range()], &p[ids.b2.range()]);
        (out, FfnTape { input, pre, act })
    }

    fn ffn_back(&self, p: &[f64], ids: FfnIds, t: &FfnTape, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let rows = t.input.len() / self.config.dim();
        let [gw1, gb1, gw2, gb2] = slots_mut(grads, [ids.w1, ids.b1, ids.w2, ids.b2]);
        let dact = linear_backward(&t.act, rows, &p[ids.w2.range()], dy, gw2, gb2);
        let dpre: Vec<f64> = dact.iter().zip(&t.pre).map(|(g, &v)| g * gelu_grad(v)).collect();
        linear_backward(&t.input, rows, &p[ids.w1.range()], &dpre, gw1, gb1)
    }
}

fn attn_grads(grads: &mut [f64], ids: AttnIds) -> AttnGrads<'_> {
    let [wq, wk, wv, wo, bq, bv, bo] = slots_mut(grads, [ids.wq, ids.wk, ids.wv, ids.wo, ids.bq, ids.bv, ids.bo]);
    AttnGrads { wq, bq, wk, wv, bv, wo, bo }
}
