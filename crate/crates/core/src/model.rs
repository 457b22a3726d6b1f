//! Miniature audio-visual segmentation network and its training loop.
//!
//! Per frame, a three-level strided patch pyramid (strides 4, 8, 16) feeds an
//! AMA block at every level; the remapped map of level `l` is the input of
//! level `l+1`'s encoder. A lateral upsample-and-sum decoder fuses the three
//! levels at stride 4, self-attention across frames mixes time at every
//! pixel, and two linear heads give class logits `m` and Dirichlet logits.
//! Training minimizes `λ_seg·L_seg + λ_cst·L_cst` with Adam.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::ama::{
    ama_block_graph, contrastive_graph, cross_attend_graph, init_attention, init_level,
    multi_head_attention, partition, AmaLevelConfig, AmaWeights, Attention, ContrastiveConfig,
};
use crate::error::{Error, Result};
use crate::grouping::GroupAssignment;
use crate::metrics::{evaluate, ClipPrediction, EvalReport};
use crate::nn::{Bound, ParamStore};
use crate::numerics::{
    grad_check_many, tensor_file, GradCheckReport, Gradients, Graph, Real, Rng, Tensor, Var,
};
use crate::synthdata::{Clip, Dataset, Split};
use crate::uncertainty::normalized_uncertainty_graph;

/// Spatial strides of the three levels.
pub const STRIDES: [usize; 3] = [4, 8, 16];

/// Which parts of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Grouping, merging, compact update and remap; off leaves plain
    /// cross-attention at every level.
    pub sgsm: bool,
    /// Contrastive alignment loss.
    pub cst: bool,
    /// Uncertainty-weighted prediction; off uses `softmax(m)` directly.
    pub ue: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        sgsm: false,
        cst: false,
        ue: false,
    };
    pub const SGSM: Ablation = Ablation {
        sgsm: true,
        cst: false,
        ue: false,
    };
    pub const AMA: Ablation = Ablation {
        sgsm: true,
        cst: true,
        ue: false,
    };
    pub const FULL: Ablation = Ablation {
        sgsm: true,
        cst: true,
        ue: true,
    };

    pub fn name(self) -> &'static str {
        match (self.sgsm, self.cst, self.ue) {
            (false, false, false) => "baseline",
            (true, false, false) => "+sgsm",
            (true, true, false) => "+sgsm+cst",
            (true, true, true) => "full",
            _ => "custom",
        }
    }

    /// Turns one switch off by name: `no-sgsm`, `no-cst` or `no-ue`.
    pub fn disable(&mut self, switch: &str) -> Result<()> {
        match switch {
            "no-sgsm" | "sgsm" => self.sgsm = false,
            "no-cst" | "cst" => self.cst = false,
            "no-ue" | "ue" => self.ue = false,
            other => return Err(Error::Config(format!("unknown ablation switch {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub classes: usize,
    pub audio_dim: usize,
    pub dims: [usize; 3],
    pub groups: [usize; 3],
    pub heads: usize,
    /// Rounds of the compact-representation update.
    pub depth: usize,
    pub decoder_dim: usize,
    pub temporal_heads: usize,
    /// Grouping neighbourhood; `None` uses the default rule per level.
    pub k: Option<usize>,
    pub lambda_seg: f64,
    pub lambda_cst: f64,
    pub contrastive: ContrastiveConfig,
    pub epsilon: f64,
    pub smooth: f64,
    pub ablation: Ablation,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Validation interval in steps; 0 means once per epoch.
    pub eval_every: usize,
    pub beta_sq: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            frames: 4,
            classes: 5,
            audio_dim: 16,
            dims: [16, 32, 32],
            groups: [14, 7, 5],
            heads: 4,
            depth: 2,
            decoder_dim: 16,
            temporal_heads: 4,
            k: None,
            lambda_seg: 1.0,
            lambda_cst: 0.1,
            contrastive: ContrastiveConfig::default(),
            epsilon: crate::uncertainty::EPSILON,
            smooth: 1.0,
            ablation: Ablation::FULL,
            lr: 1e-3,
            steps: 3000,
            batch_size: 1,
            eval_every: 0,
            beta_sq: crate::metrics::BETA_SQ,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for finite-difference checks: 16×16 images,
    /// two frames, three classes.
    pub fn gradcheck() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            frames: 2,
            classes: 3,
            audio_dim: 4,
            dims: [4, 4, 4],
            groups: [6, 3, 1],
            heads: 2,
            decoder_dim: 4,
            temporal_heads: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height % 16 != 0 || self.width % 16 != 0 || self.height == 0 || self.width == 0 {
            return fail(format!(
                "image {}×{} must be a nonzero multiple of 16",
                self.height, self.width
            ));
        }
        if self.frames == 0 || self.classes < 2 || self.audio_dim == 0 {
            return fail("need frames >= 1, classes >= 2 and a positive audio dim".into());
        }
        for l in 0..3 {
            self.level(l).validate()?;
            let tokens = self.tokens(l);
            if self.groups[l] > tokens {
                return fail(format!(
                    "level {l}: {} groups for {tokens} tokens",
                    self.groups[l]
                ));
            }
        }
        if self.decoder_dim == 0
            || self.temporal_heads == 0
            || self.decoder_dim % self.temporal_heads != 0
        {
            return fail("decoder dim must be divisible by the temporal heads".into());
        }
        if !(self.lambda_seg > 0.0) || !(self.lambda_cst >= 0.0) {
            return fail("lambda_seg must be positive and lambda_cst non-negative".into());
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return fail("lr and batch size must be positive".into());
        }
        if !(self.epsilon > 0.0) || !(self.smooth >= 0.0) || !(self.beta_sq > 0.0) {
            return fail("epsilon and beta_sq must be positive, smooth non-negative".into());
        }
        self.contrastive.validate()
    }

    /// Side of the token grid of level `l`, `(rows, cols)`.
    pub fn grid(&self, l: usize) -> (usize, usize) {
        (self.height / STRIDES[l], self.width / STRIDES[l])
    }

    pub fn tokens(&self, l: usize) -> usize {
        let (h, w) = self.grid(l);
        h * w
    }

    pub fn level(&self, l: usize) -> AmaLevelConfig {
        AmaLevelConfig {
            level: l,
            dim: self.dims[l],
            groups: self.groups[l],
            heads: self.heads,
            depth: self.depth,
            k: self.k,
        }
    }

    /// Width of the audio embedding; equal to the last level's dim.
    pub fn audio_embed_dim(&self) -> usize {
        self.dims[2]
    }

    fn contrastive_active(&self) -> bool {
        self.ablation.sgsm && self.ablation.cst && self.lambda_cst > 0.0
    }
}

/// Every learnable tensor of the network, by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub store: ParamStore<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).fork(0x1417);
        let mut s = ParamStore::new();
        let [d1, d2, d3] = cfg.dims;
        let emb = cfg.audio_embed_dim();
        s.add_linear("enc0", 3 * STRIDES[0] * STRIDES[0], d1, true, &mut rng);
        s.add_linear("enc1", 4 * d1, d2, true, &mut rng);
        s.add_linear("enc2", 4 * d2, d3, true, &mut rng);
        s.add_linear("audio", cfg.audio_dim, emb, true, &mut rng);
        for l in 0..3 {
            init_level(&mut s, &format!("ama{l}"), emb, cfg.dims[l], &mut rng);
            s.add_linear(
                &format!("dec.lat{l}"),
                cfg.dims[l],
                cfg.decoder_dim,
                true,
                &mut rng,
            );
        }
        s.add_linear("dec.out", cfg.decoder_dim, cfg.decoder_dim, true, &mut rng);
        init_attention(&mut s, "temporal", cfg.decoder_dim, &mut rng);
        s.add_linear("seg", cfg.decoder_dim, cfg.classes, true, &mut rng);
        s.add_linear("unc", cfg.decoder_dim, cfg.classes, true, &mut rng);
        Ok(ModelParams { store: s })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            store: self.store.cast(),
        }
    }
}

/// Precomputed index tables for one configuration.
#[derive(Clone, Debug)]
pub struct Plan {
    /// Per level ≥ 1: gather from the previous level's `[(T·N)×D]` map to
    /// `[(T·N')×4D]` 2×2 patches.
    merge: [Option<Rc<[usize]>>; 3],
    /// Per level: row of that level feeding each stride-4 position.
    upsample_rows: [Vec<usize>; 3],
    /// `(t, p)` rows to `(p, t)` rows and back.
    to_pixel_major: Vec<usize>,
    to_frame_major: Vec<usize>,
    /// Bilinear stride-4 → full-resolution taps over `[rows×C]`.
    bilinear_idx: Rc<[usize]>,
    bilinear_w: Rc<[f64]>,
}

fn merge_index(frames: usize, h: usize, w: usize, d: usize) -> Rc<[usize]> {
    let (h2, w2) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(frames * h * w * d);
    for t in 0..frames {
        for y in 0..h2 {
            for x in 0..w2 {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let row = t * h * w + (2 * y + dy) * w + 2 * x + dx;
                    index.extend(row * d..(row + 1) * d);
                }
            }
        }
    }
    index.into()
}

impl Plan {
    pub fn new(cfg: &ModelConfig) -> Self {
        let t_len = cfg.frames;
        let (h0, w0) = cfg.grid(0);
        let mut merge: [Option<Rc<[usize]>>; 3] = [None, None, None];
        for l in 1..3 {
            let (h, w) = cfg.grid(l - 1);
            merge[l] = Some(merge_index(t_len, h, w, cfg.dims[l - 1]));
        }
        let upsample_rows = std::array::from_fn(|l| {
            let (hl, wl) = cfg.grid(l);
            let f = STRIDES[l] / STRIDES[0];
            (0..t_len)
                .flat_map(|t| {
                    (0..h0 * w0).map(move |p| t * hl * wl + (p / w0) / f * wl + (p % w0) / f)
                })
                .collect()
        });
        let hw = h0 * w0;
        let to_pixel_major = (0..hw * t_len)
            .map(|r| (r % t_len) * hw + r / t_len)
            .collect();
        let to_frame_major = (0..hw * t_len).map(|r| (r % hw) * t_len + r / hw).collect();

        let c = cfg.classes;
        let f = STRIDES[0];
        let coord = |dst: usize, len: usize| {
            let s = ((dst as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(len - 1), s - i0 as f64)
        };
        let (hh, ww) = (cfg.height, cfg.width);
        let mut idx = Vec::with_capacity(t_len * hh * ww * c * 4);
        let mut wts = Vec::with_capacity(idx.capacity());
        for t in 0..t_len {
            for y in 0..hh {
                let (y0, y1, fy) = coord(y, h0);
                for x in 0..ww {
                    let (x0, x1, fx) = coord(x, w0);
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for k in 0..c {
                        for &(yy, xx, wt) in &taps {
                            idx.push((t * hw + yy * w0 + xx) * c + k);
                            wts.push(wt);
                        }
                    }
                }
            }
        }
        Plan {
            merge,
            upsample_rows,
            to_pixel_major,
            to_frame_major,
            bilinear_idx: idx.into(),
            bilinear_w: wts.into(),
        }
    }
}

/// One clip ready for the network.
#[derive(Clone, Debug)]
pub struct ClipBatch<T: Real = f32> {
    /// `[T×H×W×3]`.
    pub frames: Tensor<T>,
    /// `[T×D_a]`.
    pub audio: Tensor<T>,
    /// `T·H·W` labels.
    pub gt: Vec<usize>,
}

impl<T: Real> ClipBatch<T> {
    pub fn from_clip(clip: &Clip) -> Self {
        ClipBatch {
            frames: clip.sample.frames.cast(),
            audio: clip.sample.audio.cast(),
            gt: clip.sample.gt_labels(),
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
        if self.frames.shape() != [t, h, w, 3]
            || self.audio.shape() != [t, cfg.audio_dim]
            || self.gt.len() != t * h * w
        {
            return Err(Error::Shape {
                op: "forward",
                lhs: self.frames.shape().to_vec(),
                rhs: vec![t, h, w, 3],
            });
        }
        if let Some(&bad) = self.gt.iter().find(|&&l| l >= cfg.classes) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {})",
                cfg.classes
            )));
        }
        Ok(())
    }

    /// Non-overlapping `s×s` patches as rows `(t, y, x)`, columns `(dy, dx, channel)`.
    pub fn patches(&self, stride: usize) -> Tensor<T> {
        let s = self.frames.shape();
        let (t_len, h, w) = (s[0], s[1], s[2]);
        let (hp, wp) = (h / stride, w / stride);
        let cols = stride * stride * 3;
        Tensor::from_fn(&[t_len * hp * wp, cols], |i| {
            let (row, col) = (i / cols, i % cols);
            let (t, y, x) = (row / (hp * wp), (row / wp) % hp, row % wp);
            let (dy, dx, ch) = (col / (stride * 3), (col / 3) % stride, col % 3);
            self.frames.data()[((t * h + y * stride + dy) * w + x * stride + dx) * 3 + ch]
        })
    }
}

/// Discrete choices made during a forward pass; replaying them makes the
/// computation smooth in the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decisions {
    /// `groups[l][t]`.
    pub groups: Vec<Vec<GroupAssignment>>,
    /// Positive and negative group indices per frame.
    pub partitions: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Graph handles produced by [`forward_graph`].
pub struct ForwardOutput {
    /// Class logits `m`, `[(T·h·w)×C]` at stride 4.
    pub m: Var,
    /// Normalized uncertainty, same layout; absent without UE.
    pub delta_norm: Option<Var>,
    /// `m − ln(δ_norm + ε)` (or `m` without UE); its softmax is the
    /// renormalized uncertainty-weighted prediction.
    pub adjusted: Var,
    /// Compact representation per level, `[(T·P)×D]`; absent without SGSM.
    pub compact: Vec<Var>,
    /// Mean contrastive loss over frames, when active.
    pub cst: Option<Var>,
    /// Frames whose positive set was empty.
    pub empty_positive: usize,
    pub decisions: Decisions,
}

/// Full network on one clip.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    plan: &Plan,
    clip: &ClipBatch<T>,
    frozen: Option<&Decisions>,
) -> Result<ForwardOutput> {
    clip.check(cfg)?;
    let t_len = cfg.frames;
    let patches = g.constant(clip.patches(STRIDES[0]));
    let audio_in = g.constant(clip.audio.clone());
    let f_a = bound.linear("audio").forward(g, audio_in);
    let f_a = g.relu(f_a);

    let mut decisions = Decisions::default();
    let mut compact = Vec::new();
    let mut level_out = Vec::with_capacity(3);
    let mut prev: Option<Var> = None;
    for l in 0..3 {
        let input = match (l, prev) {
            (0, _) => patches,
            (_, Some(p)) => {
                let n = cfg.tokens(l);
                let width = 4 * cfg.dims[l - 1];
                let index = plan.merge[l].clone().expect("merge plan");
                g.gather(p, index, &[t_len * n, width])
            }
            _ => unreachable!(),
        };
        let f_v = bound.linear(&format!("enc{l}")).forward(g, input);
        let f_v = g.gelu(f_v);
        let prefix = format!("ama{l}");
        let w = AmaWeights::bind(bound, &prefix);
        let next = if cfg.ablation.sgsm {
            let replay = frozen.map(|d| d.groups[l].as_slice());
            let out = ama_block_graph(g, f_v, f_a, &w, &cfg.level(l), t_len, replay)?;
            decisions.groups.push(out.assignments);
            compact.push(out.compact);
            out.next
        } else {
            cross_attend_graph(g, f_v, f_a, &w, t_len, cfg.heads)
        };
        level_out.push(next);
        prev = Some(next);
    }

    let mut cst = None;
    let mut empty_positive = 0;
    if cfg.contrastive_active() {
        let p = cfg.groups[2];
        let d = cfg.dims[2];
        let gc = g.reshape(compact[2], &[t_len, p, d]);
        let g_hat = g.l2_normalize_last(gc);
        let fa_unit = g.l2_normalize_last(f_a);
        let fa3 = g.reshape(fa_unit, &[t_len, 1, d]);
        let a = g.bmm(g_hat, fa3, true);
        let a = g.reshape(a, &[t_len * p]);
        let mut total: Option<Var> = None;
        for t in 0..t_len {
            let (pos, neg) = match frozen {
                Some(dec) => dec.partitions[t].clone(),
                None => {
                    let row: Vec<f64> = g.value(a).data()[t * p..(t + 1) * p]
                        .iter()
                        .map(|v| v.as_f64())
                        .collect();
                    let (_, pos, neg) = partition(&row, &cfg.contrastive);
                    (pos, neg)
                }
            };
            let shift = |v: &[usize]| -> Vec<usize> { v.iter().map(|&i| t * p + i).collect() };
            let term = contrastive_graph(g, a, &shift(&pos), &shift(&neg), cfg.contrastive.tau);
            if term.empty_positive {
                empty_positive += 1;
            }
            decisions.partitions.push((pos, neg));
            total = Some(match total {
                Some(acc) => g.add(acc, term.loss),
                None => term.loss,
            });
        }
        let total = total.expect("at least one frame");
        cst = Some(g.scale(total, T::lit(1.0 / t_len as f64)));
    }

    // Decoder: lateral projections, nearest upsampling to stride 4, sum.
    let mut fused: Option<Var> = None;
    for (l, &x) in level_out.iter().enumerate() {
        let lat = bound.linear(&format!("dec.lat{l}")).forward(g, x);
        let up = if l == 0 {
            lat
        } else {
            g.gather_rows(lat, &plan.upsample_rows[l])
        };
        fused = Some(match fused {
            Some(acc) => g.add(acc, up),
            None => up,
        });
    }
    let fused = g.gelu(fused.expect("three levels"));
    let fused = bound.linear("dec.out").forward(g, fused);

    let pixels = cfg.tokens(0);
    let temporal = Attention::bind(bound, "temporal");
    let fused = temporal_attention_graph(g, fused, &temporal, plan, pixels, cfg.temporal_heads);

    let m = bound.linear("seg").forward(g, fused);
    let (delta_norm, adjusted) = if cfg.ablation.ue {
        let u = bound.linear("unc").forward(g, fused);
        let dn = normalized_uncertainty_graph(g, u, t_len);
        let shifted = g.shift(dn, T::lit(cfg.epsilon));
        let log_den = g.ln(shifted);
        (Some(dn), g.sub(m, log_den))
    } else {
        (None, m)
    };
    Ok(ForwardOutput {
        m,
        delta_norm,
        adjusted,
        compact,
        cst,
        empty_positive,
        decisions,
    })
}

/// Self-attention across frames at every pixel, with residual. `x` is
/// frame-major `[(T·HW)×D]`.
pub fn temporal_attention_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: &Attention,
    plan: &Plan,
    pixels: usize,
    heads: usize,
) -> Var {
    let pm = g.gather_rows(x, &plan.to_pixel_major);
    let out = multi_head_attention(g, pm, pm, w, pixels, heads);
    g.gather_rows(out, &plan.to_frame_major)
}

/// Tensor form of [`temporal_attention_graph`] on `[T×D×H×W]`.
pub fn temporal_attention<T: Real>(
    fused: &Tensor<T>,
    params: &ParamStore<T>,
    prefix: &str,
    heads: usize,
) -> Result<Tensor<T>> {
    let (t_len, d, h, w) = match *fused.shape() {
        [t, d, h, w] => (t, d, h, w),
        ref s => {
            return Err(Error::Shape {
                op: "temporal_attention",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "dim {d} not divisible by {heads} heads"
        )));
    }
    let hw = h * w;
    // Rows (p, t), columns d.
    let rows = Tensor::from_fn(&[hw * t_len, d], |i| {
        let (r, c) = (i / d, i % d);
        let (p, t) = (r / t_len, r % t_len);
        fused.data()[(t * d + c) * hw + p]
    });
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let attn = Attention::bind(&bound, prefix);
    let x = g.constant(rows);
    let out = multi_head_attention(&mut g, x, x, &attn, hw, heads);
    let out = g.value(out);
    Ok(Tensor::from_fn(fused.shape(), |i| {
        let (t, c, p) = (i / (d * hw), (i / hw) % d, i % hw);
        out.data()[(p * t_len + t) * d + c]
    }))
}

/// Bilinear stride-4 → full resolution of a `[(T·h·w)×C]` map.
pub fn upsample_graph<T: Real>(g: &mut Graph<T>, x: Var, plan: &Plan, cfg: &ModelConfig) -> Var {
    let weights: Rc<[T]> = plan.bilinear_w.iter().map(|&w| T::lit(w)).collect();
    g.taps(
        x,
        plan.bilinear_idx.clone(),
        weights,
        4,
        &[cfg.frames * cfg.height * cfg.width, cfg.classes],
    )
}

/// Segmentation loss parts.
#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
    pub iou: Var,
}

/// `CE + Dice + IoU` from class log-probabilities `[(T·P)×C]`.
///
/// CE is averaged over all pixels. Dice and IoU are computed per frame over
/// the foreground channels, `1 − (2I + s)/(Σp + Σg + s)` and
/// `1 − (I + s)/(Σp + Σg − I + s)` with `I = Σ p·g`, then averaged over frames.
pub fn seg_loss_graph<T: Real>(
    g: &mut Graph<T>,
    log_probs: Var,
    gt: &[usize],
    frames: usize,
    smooth: f64,
) -> SegLoss {
    let (rows, c) = (g.shape(log_probs)[0], g.shape(log_probs)[1]);
    assert_eq!(rows, gt.len(), "seg_loss: one label per row");
    let pick: Vec<usize> = gt.iter().enumerate().map(|(r, &l)| r * c + l).collect();
    let picked = g.gather(log_probs, pick.into(), &[rows]);
    let mean_lp = g.mean(picked);
    let ce = g.scale(mean_lp, -T::one());

    let per_frame = rows / frames * c;
    let probs = g.exp(log_probs);
    let fg_mask = Tensor::from_fn(
        &[rows, c],
        |i| if i % c == 0 { T::zero() } else { T::one() },
    );
    let onehot = Tensor::from_fn(&[rows, c], |i| {
        let (r, k) = (i / c, i % c);
        if k > 0 && gt[r] == k {
            T::one()
        } else {
            T::zero()
        }
    });
    let gt_sum: Vec<T> = (0..frames)
        .map(|t| {
            onehot.data()[t * per_frame..(t + 1) * per_frame]
                .iter()
                .copied()
                .sum()
        })
        .collect();
    let fg_mask = g.constant(fg_mask);
    let onehot = g.constant(onehot);
    let p_fg = g.mul(probs, fg_mask);
    let p_fg = g.reshape(p_fg, &[frames, per_frame]);
    let p_sum = g.sum_last(p_fg);
    let pg = g.mul(probs, onehot);
    let pg = g.reshape(pg, &[frames, per_frame]);
    let inter = g.sum_last(pg);
    let gsum = g.constant(Tensor::from_fn(&[frames], |t| gt_sum[t]));
    let s = T::lit(smooth);

    let denom = g.add(p_sum, gsum);
    let dice_num = g.scale(inter, T::lit(2.0));
    let dice_num = g.shift(dice_num, s);
    let dice_den = g.shift(denom, s);
    let dice_ratio = g.div(dice_num, dice_den);
    let dice_mean = g.mean(dice_ratio);
    let dice = g.scale(dice_mean, -T::one());
    let dice = g.shift(dice, T::one());

    let iou_num = g.shift(inter, s);
    let union = g.sub(denom, inter);
    let iou_den = g.shift(union, s);
    let iou_ratio = g.div(iou_num, iou_den);
    let iou_mean = g.mean(iou_ratio);
    let iou = g.scale(iou_mean, -T::one());
    let iou = g.shift(iou, T::one());

    let sum = g.add(ce, dice);
    let total = g.add(sum, iou);
    SegLoss {
        total,
        ce,
        dice,
        iou,
    }
}

/// `λ_seg·seg + λ_cst·cst`.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    seg: Var,
    cst: Option<Var>,
    cfg: &ModelConfig,
) -> Var {
    let seg = g.scale(seg, T::lit(cfg.lambda_seg));
    match cst {
        Some(c) => {
            let c = g.scale(c, T::lit(cfg.lambda_cst));
            g.add(seg, c)
        }
        None => seg,
    }
}

/// Scalar values of one training evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub seg: f64,
    pub cst: f64,
}

/// Loss of one clip with all intermediate handles.
pub struct ClipLoss {
    pub total: Var,
    pub seg: SegLoss,
    pub forward: ForwardOutput,
}

pub fn clip_loss_graph<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    plan: &Plan,
    clip: &ClipBatch<T>,
    frozen: Option<&Decisions>,
) -> Result<ClipLoss> {
    let forward = forward_graph(g, bound, cfg, plan, clip, frozen)?;
    let up = upsample_graph(g, forward.adjusted, plan, cfg);
    let lp = g.log_softmax_last(up);
    let seg = seg_loss_graph(g, lp, &clip.gt, cfg.frames, cfg.smooth);
    let total = total_loss_graph(g, seg.total, forward.cst, cfg);
    Ok(ClipLoss {
        total,
        seg,
        forward,
    })
}

/// Network outputs for one clip, tensors in `[T×C×h×w]` at stride 4.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Per frame, `H·W` labels at full resolution.
    pub labels: Vec<Vec<usize>>,
    pub m: Tensor,
    pub delta_norm: Option<Tensor>,
    /// Renormalized uncertainty-weighted class probabilities.
    pub probs: Tensor,
    pub decisions: Decisions,
}

fn class_last_to_tchw(x: &Tensor, cfg: &ModelConfig) -> Tensor {
    let (h, w) = cfg.grid(0);
    crate::uncertainty::from_class_last(x, cfg.frames, h, w).expect("layout")
}

pub fn predict(
    params: &ModelParams,
    cfg: &ModelConfig,
    plan: &Plan,
    clip: &ClipBatch,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g, false);
    let out = forward_graph(&mut g, &bound, cfg, plan, clip, None)?;
    let up = upsample_graph(&mut g, out.adjusted, plan, cfg);
    let c = cfg.classes;
    let hw = cfg.height * cfg.width;
    let upv = g.value(up).data();
    let labels = (0..cfg.frames)
        .map(|t| {
            (0..hw)
                .map(|p| {
                    let row = &upv[(t * hw + p) * c..(t * hw + p + 1) * c];
                    (1..c).fold(0, |best, k| if row[k] > row[best] { k } else { best })
                })
                .collect()
        })
        .collect();
    let probs = g.softmax_last(out.adjusted);
    Ok(Prediction {
        labels,
        m: class_last_to_tchw(g.value(out.m), cfg),
        delta_norm: out.delta_norm.map(|d| class_last_to_tchw(g.value(d), cfg)),
        probs: class_last_to_tchw(g.value(probs), cfg),
        decisions: out.decisions,
    })
}

/// Metrics of the model over `clips`.
pub fn evaluate_clips(
    params: &ModelParams,
    cfg: &ModelConfig,
    plan: &Plan,
    clips: &[&Clip],
) -> Result<EvalReport> {
    let preds = clips
        .iter()
        .map(|clip| {
            let batch = ClipBatch::from_clip(clip);
            let p = predict(params, cfg, plan, &batch)?;
            Ok(ClipPrediction {
                id: clip.id,
                kind: clip.spec.kind,
                pred: p.labels,
                gt: (0..cfg.frames).map(|t| clip.sample.gt_frame(t)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds, cfg.classes, cfg.beta_sq)
}

/// Mean normalized uncertainty on the state-change frames of case-2 clips
/// and on every frame of temporally constant clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionUncertainty {
    pub transition_mean: f64,
    pub constant_mean: f64,
    pub transition_frames: usize,
    pub constant_frames: usize,
}

pub fn transition_uncertainty(
    params: &ModelParams,
    cfg: &ModelConfig,
    plan: &Plan,
    clips: &[&Clip],
) -> Result<TransitionUncertainty> {
    if !cfg.ablation.ue {
        return Err(Error::Config("uncertainty maps need the UE branch".into()));
    }
    let (mut tr_sum, mut tr_n, mut c_sum, mut c_n) = (0.0, 0, 0.0, 0);
    for clip in clips {
        let transitions = clip.spec.transition_frames();
        let constant = clip.spec.is_temporally_constant();
        let case2 = clip.spec.kind == crate::synthdata::ClipKind::Case2;
        if !constant && !(case2 && !transitions.is_empty()) {
            continue;
        }
        let p = predict(params, cfg, plan, &ClipBatch::from_clip(clip))?;
        let dn = p.delta_norm.expect("UE branch is on");
        let means = frame_means(&dn);
        if constant {
            c_sum += means.iter().sum::<f64>();
            c_n += means.len();
        } else {
            tr_sum += transitions.iter().map(|&t| means[t]).sum::<f64>();
            tr_n += transitions.len();
        }
    }
    if tr_n == 0 || c_n == 0 {
        return Err(Error::Data(
            "need both case-2 transition frames and constant clips".into(),
        ));
    }
    Ok(TransitionUncertainty {
        transition_mean: tr_sum / tr_n as f64,
        constant_mean: c_sum / c_n as f64,
        transition_frames: tr_n,
        constant_frames: c_n,
    })
}

/// Mean of each frame of a `[T×…]` tensor.
pub fn frame_means(x: &Tensor) -> Vec<f64> {
    let t = x.shape()[0];
    let per = x.numel() / t;
    x.data()
        .chunks(per)
        .map(|c| c.iter().map(|&v| f64::from(v)).sum::<f64>() / per as f64)
        .collect()
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update; parameters without a gradient entry are skipped.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr_t = (self.lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        for (name, p) in params.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                *w -= lr_t * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub val_jf: f64,
    pub val_j: f64,
    pub val_f: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Frames whose contrastive positive set was empty.
    pub empty_positive: usize,
}

impl TrainLog {
    pub fn best_val_jf(&self) -> f64 {
        self.evals
            .iter()
            .map(|e| e.val_jf)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_val_jf(&self) -> f64 {
        self.evals.last().map_or(f64::NAN, |e| e.val_jf)
    }

    /// One line per step and per evaluation, stable formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!(
                "step {} total {:.6} seg {:.6} cst {:.6}\n",
                s.step, s.loss.total, s.loss.seg, s.loss.cst
            ));
        }
        for e in &self.evals {
            out.push_str(&format!(
                "eval epoch {} step {} val_jf {:.6} val_j {:.6} val_f {:.6}\n",
                e.epoch, e.step, e.val_jf, e.val_j, e.val_f
            ));
        }
        out
    }
}

/// Gradients of one clip's loss by parameter name, plus its loss values.
pub fn clip_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    plan: &Plan,
    clip: &ClipBatch,
) -> Result<(BTreeMap<String, Tensor>, LossValues, usize)> {
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g, true);
    let loss = clip_loss_graph(&mut g, &bound, cfg, plan, clip, None)?;
    let values = LossValues {
        total: g.value(loss.total).item().as_f64(),
        seg: g.value(loss.seg.total).item().as_f64(),
        cst: loss.forward.cst.map_or(0.0, |c| g.value(c).item().as_f64()),
    };
    let grads: Gradients<f32> = g.backward(loss.total);
    let named = bound
        .iter()
        .filter_map(|(name, &v)| grads.get(v).map(|t| (name.clone(), t)))
        .collect();
    Ok((named, values, loss.forward.empty_positive))
}

/// Trains from a fresh initialization; `progress` receives one line per
/// evaluation.
pub fn train(
    dataset: &Dataset,
    cfg: &ModelConfig,
    mut progress: impl FnMut(&str),
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let train_clips = dataset.split(Split::Train);
    let val_clips = dataset.split(Split::Val);
    if train_clips.is_empty() || val_clips.is_empty() {
        return Err(Error::Data(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let plan = Plan::new(cfg);
    let batches: Vec<ClipBatch> = train_clips
        .iter()
        .map(|c| ClipBatch::from_clip(c))
        .collect();
    let mut params = ModelParams::init(cfg, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    let order_rng = Rng::new(cfg.seed).fork(0x0D3);
    let steps_per_epoch = batches.len().div_ceil(cfg.batch_size);
    let eval_every = if cfg.eval_every == 0 {
        steps_per_epoch
    } else {
        cfg.eval_every
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    for step in 1..=cfg.steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = LossValues {
            total: 0.0,
            seg: 0.0,
            cst: 0.0,
        };
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..batches.len()).collect();
                order_rng.fork(epoch as u64).shuffle(&mut order);
                cursor = 0;
                epoch += 1;
            }
            let (g, l, empty) = clip_gradients(&params, cfg, &plan, &batches[order[cursor]])?;
            cursor += 1;
            log.empty_positive += empty;
            loss.total += l.total / cfg.batch_size as f64;
            loss.seg += l.seg / cfg.batch_size as f64;
            loss.cst += l.cst / cfg.batch_size as f64;
            for (name, t) in g {
                let t = t.scale(1.0 / cfg.batch_size as f32);
                match grads.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&t)?,
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {:?}", loss),
            });
        }
        adam.step(&mut params.store, &grads);
        if !params.store.all_finite() {
            let bad: Vec<&String> = params
                .store
                .iter()
                .filter(|(_, t)| !t.is_finite())
                .map(|(n, _)| n)
                .collect();
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite parameters {bad:?}"),
            });
        }
        log.steps.push(StepRecord { step, loss });
        if step % eval_every == 0 || step == cfg.steps {
            let report = evaluate_clips(&params, cfg, &plan, &val_clips)?;
            let record = EvalRecord {
                step,
                epoch,
                val_jf: report.jf_mean,
                val_j: report.j,
                val_f: report.f_beta,
            };
            progress(&format!(
                "step {step} epoch {epoch} loss {:.4} val J&F {:.4}",
                loss.total, record.val_jf
            ));
            log.evals.push(record);
        }
    }
    Ok((params, log))
}

/// Finite-difference check of the full loss with respect to every parameter,
/// with grouping and contrastive partitions frozen at their values for the
/// unperturbed parameters.
pub fn model_grad_check(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    clip: &ClipBatch<f64>,
    step: f64,
) -> Result<(Vec<String>, GradCheckReport)> {
    let plan = Plan::new(cfg);
    let decisions = {
        let mut g = Graph::new();
        let bound = params.store.bind(&mut g, false);
        clip_loss_graph(&mut g, &bound, cfg, &plan, clip, None)?
            .forward
            .decisions
    };
    let names: Vec<String> = params.store.names().map(|n| n.to_string()).collect();
    let inputs: Vec<Tensor<f64>> = params.store.iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check_many(
        |g, vars| {
            let bound: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            clip_loss_graph(g, &bound, cfg, &plan, clip, Some(&decisions))
                .expect("shapes were checked on the first pass")
                .total
        },
        &inputs,
        step,
    )?;
    Ok((names, report))
}

/// Writes one TensorFile per parameter, `manifest.txt` and `config.json`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in params.store.iter() {
        let file = format!("{name}.avtk");
        tensor_file::write(dir.join(&file), t)?;
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\t{file}\n", shape.join("x")));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("config.json");
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let dir = dir.as_ref();
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let path = dir.join("manifest.txt");
    let manifest = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut store = ParamStore::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, file] = fields[..] else {
            return Err(Error::Format(format!("bad manifest line {line:?}")));
        };
        let t = tensor_file::read(dir.join(file))?;
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        if dims.join("x") != shape {
            return Err(Error::Mismatch(format!(
                "{name}: manifest says {shape}, file has {}",
                dims.join("x")
            )));
        }
        store.insert(name, t);
    }
    let fresh = ModelParams::<f32>::init(&cfg, cfg.seed)?;
    fresh.store.check_compatible(&store)?;
    Ok((cfg, ModelParams { store }))
}
