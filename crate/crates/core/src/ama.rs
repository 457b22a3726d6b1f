//! Audio-guided modality alignment.
//!
//! One block runs, per feature level:
//! cross-attention from visual tokens to the audio token, density-peaks
//! grouping of the (pre-attention) tokens, per-token relevance scores,
//! relevance-weighted merging of each group into one compact vector, a
//! parameter-free decoder stack refining the compact vectors against all
//! tokens, and finally remapping every compact vector back onto the tokens of
//! its group. The last level's compact vectors are aligned with the audio
//! embedding through a thresholded InfoNCE objective.
//!
//! Every step exists in two forms: a graph form working on [`Var`]s (used by
//! the model and for gradients) and a tensor form for direct use.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{default_k, group_tokens, GroupAssignment};
use crate::nn::{Bound, Linear, Mlp, ParamStore};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};

/// Per-level block configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmaLevelConfig {
    pub level: usize,
    pub dim: usize,
    pub groups: usize,
    pub heads: usize,
    pub depth: usize,
    /// Neighbourhood size for grouping; `None` uses [`default_k`].
    #[serde(default)]
    pub k: Option<usize>,
}

impl AmaLevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "level {}: dim {} not divisible by {} heads",
                self.level, self.dim, self.heads
            )));
        }
        if self.groups == 0 {
            return Err(Error::Config(format!(
                "level {}: need at least one group",
                self.level
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config(format!(
                "level {}: decoder depth must be >= 1",
                self.level
            )));
        }
        Ok(())
    }

    pub fn k_for(&self, tokens: usize) -> usize {
        self.k.unwrap_or_else(|| default_k(tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub sigma_p: f64,
    pub tau: f64,
    pub epsilon_a: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            sigma_p: 5.0,
            tau: 0.1,
            epsilon_a: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.sigma_p > 0.0) {
            return Err(Error::Config("tau and sigma_p must be positive".into()));
        }
        if !(self.epsilon_a > 0.0 && self.epsilon_a < 1.0) {
            return Err(Error::Config("epsilon_a must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-token relevance logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores<T: Real = f32> {
    pub s: Tensor<T>,
}

/// One vector per group, `[P×D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactRepresentation<T: Real = f32> {
    pub g: Tensor<T>,
}

/// Audio/group similarities and the positive/negative split derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentScores<T: Real = f32> {
    pub a: Tensor<T>,
    pub i: Tensor<T>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Query/key/value/output projections of one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        Attention {
            q: bound.linear(&format!("{prefix}.q")),
            k: bound.linear(&format!("{prefix}.k")),
            v: bound.linear(&format!("{prefix}.v")),
            o: bound.linear(&format!("{prefix}.o")),
        }
    }
}

/// Learned weights of one level.
#[derive(Clone, Copy, Debug)]
pub struct AmaWeights {
    pub audio_proj: Linear,
    pub attn: Attention,
    pub relevance: Mlp,
}

/// Adds the weights of one level under `prefix`.
pub fn init_level<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    audio_dim: usize,
    dim: usize,
    rng: &mut Rng,
) {
    store.add_linear(&format!("{prefix}.audio_proj"), audio_dim, dim, true, rng);
    init_attention(store, prefix, dim, rng);
    store.add_linear(&format!("{prefix}.rel.hidden"), dim, dim, true, rng);
    store.add_linear(&format!("{prefix}.rel.out"), dim, 1, true, rng);
}

/// Adds `q`, `k`, `v`, `o` projections `dim → dim` under `prefix`.
pub fn init_attention<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut Rng) {
    for name in ["q", "k", "v", "o"] {
        store.add_linear(&format!("{prefix}.{name}"), dim, dim, true, rng);
    }
}

impl AmaWeights {
    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        AmaWeights {
            audio_proj: bound.linear(&format!("{prefix}.audio_proj")),
            attn: Attention::bind(bound, prefix),
            relevance: Mlp {
                hidden: bound.linear(&format!("{prefix}.rel.hidden")),
                out: bound.linear(&format!("{prefix}.rel.out")),
            },
        }
    }
}

/// `[(B·N)×(H·dh)] → [(B·H)×N×dh]`.
pub fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, batch: usize, heads: usize) -> Var {
    let (rows, d) = (g.shape(x)[0], g.shape(x)[1]);
    let n = rows / batch;
    let dh = d / heads;
    let mut index = Vec::with_capacity(rows * d);
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..n {
                index.extend((0..dh).map(|j| (b * n + i) * d + h * dh + j));
            }
        }
    }
    g.gather(x, index.into(), &[batch * heads, n, dh])
}

/// `[(B·H)×N×dh] → [(B·N)×(H·dh)]`.
pub fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var, batch: usize) -> Var {
    let (bh, n, dh) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    let heads = bh / batch;
    let mut index = Vec::with_capacity(bh * n * dh);
    for b in 0..batch {
        for i in 0..n {
            for h in 0..heads {
                index.extend((0..dh).map(|j| ((b * heads + h) * n + i) * dh + j));
            }
        }
    }
    g.gather(x, index.into(), &[batch * n, heads * dh])
}

/// Multi-head attention with residual, `queries + O(softmax(Q Kᵀ/√dh) V)`,
/// independently for each of `batch` equal row blocks of `queries`
/// (`[(B·N)×D]`) and `keys_values` (`[(B·M)×D]`).
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    keys_values: Var,
    w: &Attention,
    batch: usize,
    heads: usize,
) -> Var {
    let d = g.shape(queries)[1];
    let q = w.q.forward(g, queries);
    let k = w.k.forward(g, keys_values);
    let v = w.v.forward(g, keys_values);
    let qh = split_heads(g, q, batch, heads);
    let kh = split_heads(g, k, batch, heads);
    let vh = split_heads(g, v, batch, heads);
    let logits = g.bmm(qh, kh, true);
    let logits = g.scale(logits, T::lit(1.0 / ((d / heads) as f64).sqrt()));
    let attn = g.softmax_last(logits);
    let ctx = g.bmm(attn, vh, false);
    let ctx = merge_heads(g, ctx, batch);
    let out = w.o.forward(g, ctx);
    g.add(queries, out)
}

/// Visual tokens `f_v: [(B·N)×D]` attend to the projected audio tokens
/// `audio: [(B·M)×D_a]` of their own frame.
pub fn cross_attend_graph<T: Real>(
    g: &mut Graph<T>,
    f_v: Var,
    audio: Var,
    w: &AmaWeights,
    batch: usize,
    heads: usize,
) -> Var {
    let kv = w.audio_proj.forward(g, audio);
    multi_head_attention(g, f_v, kv, &w.attn, batch, heads)
}

/// One relevance logit per token: `[N×D] → [N]`.
pub fn relevance_graph<T: Real>(g: &mut Graph<T>, f_hat: Var, mlp: &Mlp) -> Var {
    let n = g.shape(f_hat)[0];
    let s = mlp.forward(g, f_hat);
    g.reshape(s, &[n])
}

/// Labels of several frames as one id space: frame `b`'s group `l` becomes
/// `offset_b + l`. Returns the ids and the total group count.
pub fn stacked_labels(assignments: &[GroupAssignment]) -> (Rc<[usize]>, usize) {
    let mut ids = Vec::new();
    let mut offset = 0;
    for ga in assignments {
        ids.extend(ga.labels().iter().map(|&l| offset + l));
        offset += ga.num_groups();
    }
    (ids.into(), offset)
}

/// Within-group softmax of the scores, then weighted sum per group. Rows
/// of `f_hat` are the tokens of all frames in order.
pub fn merge_groups_graph<T: Real>(
    g: &mut Graph<T>,
    f_hat: Var,
    scores: Var,
    assignments: &[GroupAssignment],
) -> Var {
    let n = g.shape(f_hat)[0];
    let (labels, p) = stacked_labels(assignments);
    assert_eq!(labels.len(), n, "merge_groups: one label per token");
    // Per-group max, held constant: softmax is shift invariant.
    let s = g.value(scores).data();
    let mut group_max = vec![T::neg_infinity(); p];
    for (&l, &v) in labels.iter().zip(s) {
        group_max[l] = group_max[l].max(v);
    }
    let shift = Tensor::from_fn(&[n], |i| group_max[labels[i]]);
    let shift = g.constant(shift);
    let centered = g.sub(scores, shift);
    let e = g.exp(centered);
    let e_col = g.reshape(e, &[n, 1]);
    let z = g.segment_sum(e_col, labels.clone(), p);
    let z_tok = g.gather(z, labels.clone(), &[n]);
    let w = g.div(e, z_tok);
    let weighted = g.mul_col(f_hat, w);
    g.segment_sum(weighted, labels, p)
}

/// `depth` rounds of `G ← G + softmax(G f_vᵀ/√D + S) f_v` per frame, with
/// `S` added to every row. `compact: [(B·P)×D]`, `f_v: [(B·N)×D]`,
/// `scores: [B·N]`.
pub fn update_compact_graph<T: Real>(
    g: &mut Graph<T>,
    compact: Var,
    f_v: Var,
    scores: Var,
    depth: usize,
    batch: usize,
) -> Var {
    let (rows, d) = (g.shape(f_v)[0], g.shape(f_v)[1]);
    let n = rows / batch;
    let p = g.shape(compact)[0] / batch;
    let inv_sqrt_d = T::lit(1.0 / (d as f64).sqrt());
    let f3 = g.reshape(f_v, &[batch, n, d]);
    let s_index: Vec<usize> = (0..batch)
        .flat_map(|b| (0..p).flat_map(move |_| (0..n).map(move |j| b * n + j)))
        .collect();
    let s3 = g.gather(scores, s_index.into(), &[batch, p, n]);
    let mut cur = g.reshape(compact, &[batch, p, d]);
    for _ in 0..depth {
        let logits = g.bmm(cur, f3, true);
        let logits = g.scale(logits, inv_sqrt_d);
        let logits = g.add(logits, s3);
        let attn = g.softmax_last(logits);
        let update = g.bmm(attn, f3, false);
        cur = g.add(cur, update);
    }
    g.reshape(cur, &[batch * p, d])
}

/// `out[i] = f_v[i] + G[label(i)]`, frames stacked as in [`stacked_labels`].
pub fn remap_graph<T: Real>(
    g: &mut Graph<T>,
    compact: Var,
    assignments: &[GroupAssignment],
    f_v: Var,
) -> Var {
    let (labels, _) = stacked_labels(assignments);
    let gathered = g.gather_rows(compact, &labels);
    g.add(f_v, gathered)
}

/// Splits groups by `sigmoid(σ_p·a)` against `ε_a`; ties belong to neither.
pub fn partition(a: &[f64], cfg: &ContrastiveConfig) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let i: Vec<f64> = a
        .iter()
        .map(|&x| 1.0 / (1.0 + (-x * cfg.sigma_p).exp()))
        .collect();
    let positives = (0..a.len()).filter(|&p| i[p] > cfg.epsilon_a).collect();
    let negatives = (0..a.len()).filter(|&p| i[p] < cfg.epsilon_a).collect();
    (i, positives, negatives)
}

/// `A = f_a · Ĝᵀ` for unit `audio: [D]` and unit rows `g_hat: [P×D]`.
pub fn similarity_graph<T: Real>(g: &mut Graph<T>, audio_unit: Var, g_hat: Var) -> Var {
    let d = g.value(audio_unit).numel();
    let p = g.shape(g_hat)[0];
    let row = g.reshape(audio_unit, &[1, d]);
    let a = g.matmul_nt(row, g_hat);
    g.reshape(a, &[p])
}

/// Outcome of one contrastive evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerm {
    pub loss: Var,
    /// No positive group: the loss is the constant zero.
    pub empty_positive: bool,
}

/// `−log Σ_P e^{A/τ} / (Σ_P e^{A/τ} + Σ_N e^{A/τ})`, stabilized via
/// log-sum-exp. Zero when either set is empty. Indices address the flat
/// data of `a`.
pub fn contrastive_graph<T: Real>(
    g: &mut Graph<T>,
    a: Var,
    positives: &[usize],
    negatives: &[usize],
    tau: f64,
) -> ContrastiveTerm {
    if positives.is_empty() || negatives.is_empty() {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return ContrastiveTerm {
            loss: zero,
            empty_positive: positives.is_empty(),
        };
    }
    let scaled = g.scale(a, T::lit(1.0 / tau));
    let pos = g.gather(scaled, positives.into(), &[positives.len()]);
    let both: Vec<usize> = positives.iter().chain(negatives).copied().collect();
    let all = g.gather(scaled, both.clone().into(), &[both.len()]);
    let lse_pos = g.logsumexp(pos);
    let lse_all = g.logsumexp(all);
    ContrastiveTerm {
        loss: g.sub(lse_all, lse_pos),
        empty_positive: false,
    }
}

/// Result of one block in graph form.
pub struct AmaBlockOutput {
    /// Remapped feature map, input to the next encoder block.
    pub next: Var,
    /// Compact representation after the decoder stack, `[(B·P)×D]`.
    pub compact: Var,
    pub scores: Var,
    /// One assignment per frame.
    pub assignments: Vec<GroupAssignment>,
}

/// Groups the tokens of each of `batch` frames independently.
pub fn group_frames<T: Real>(
    f_v: &Tensor<T>,
    batch: usize,
    cfg: &AmaLevelConfig,
) -> Result<Vec<GroupAssignment>> {
    let (rows, d) = (f_v.shape()[0], f_v.shape()[1]);
    let n = rows / batch;
    (0..batch)
        .map(|b| {
            let frame = Tensor::new(vec![n, d], f_v.data()[b * n * d..(b + 1) * n * d].to_vec())?;
            group_tokens(&frame, cfg.k_for(n), cfg.groups)
        })
        .collect()
}

/// Full block over `batch` stacked frames. `frozen` replays previous
/// groupings instead of recomputing them.
pub fn ama_block_graph<T: Real>(
    g: &mut Graph<T>,
    f_v: Var,
    audio: Var,
    w: &AmaWeights,
    cfg: &AmaLevelConfig,
    batch: usize,
    frozen: Option<&[GroupAssignment]>,
) -> Result<AmaBlockOutput> {
    let f_hat = cross_attend_graph(g, f_v, audio, w, batch, cfg.heads);
    let assignments = match frozen {
        Some(ga) => ga.to_vec(),
        None => group_frames(g.value(f_v), batch, cfg)?,
    };
    if assignments.len() != batch
        || assignments
            .iter()
            .any(|ga| ga.num_groups() != assignments[0].num_groups())
    {
        return Err(Error::Contract(
            "every frame needs the same number of groups".into(),
        ));
    }
    let scores = relevance_graph(g, f_hat, &w.relevance);
    let merged = merge_groups_graph(g, f_hat, scores, &assignments);
    let compact = update_compact_graph(g, merged, f_v, scores, cfg.depth, batch);
    let next = remap_graph(g, compact, &assignments, f_v);
    Ok(AmaBlockOutput {
        next,
        compact,
        scores,
        assignments,
    })
}

// Tensor-level API.

fn check_tokens<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    dim: Option<usize>,
) -> Result<(usize, usize)> {
    match x.shape() {
        [n, d] if dim.map_or(true, |e| e == *d) => Ok((*n, *d)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: dim.map(|d| vec![d]).unwrap_or_default(),
        }),
    }
}

fn audio_tokens<T: Real>(audio: &Tensor<T>) -> Result<Tensor<T>> {
    match audio.shape() {
        [d] => audio.clone().reshape(&[1, *d]),
        [_, _] => Ok(audio.clone()),
        s => Err(Error::Shape {
            op: "cross_attend",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Cross-attention with the weights stored under `prefix`.
pub fn cross_attend<T: Real>(
    f_v: &Tensor<T>,
    audio: &Tensor<T>,
    params: &ParamStore<T>,
    prefix: &str,
    heads: usize,
) -> Result<Tensor<T>> {
    let (_, d) = check_tokens("cross_attend", f_v, None)?;
    let audio = audio_tokens(audio)?;
    let proj = params
        .get(&format!("{prefix}.audio_proj.w"))
        .ok_or_else(|| Error::Config(format!("missing {prefix}.audio_proj")))?;
    if proj.shape() != [audio.shape()[1], d] {
        return Err(Error::Config(format!(
            "audio projection {:?} cannot map audio dim {} to visual dim {d}",
            proj.shape(),
            audio.shape()[1]
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "dim {d} not divisible by {heads} heads"
        )));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let w = AmaWeights {
        audio_proj: bound.linear(&format!("{prefix}.audio_proj")),
        attn: Attention::bind(&bound, prefix),
        relevance: Mlp {
            hidden: bound.linear(&format!("{prefix}.q")),
            out: bound.linear(&format!("{prefix}.q")),
        },
    };
    let fv = g.constant(f_v.clone());
    let a = g.constant(audio);
    let out = cross_attend_graph(&mut g, fv, a, &w, 1, heads);
    Ok(g.value(out).clone())
}

pub fn relevance_scores<T: Real>(
    f_hat: &Tensor<T>,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<RelevanceScores<T>> {
    check_tokens("relevance_scores", f_hat, None)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mlp = Mlp {
        hidden: bound.linear(&format!("{prefix}.rel.hidden")),
        out: bound.linear(&format!("{prefix}.rel.out")),
    };
    let x = g.constant(f_hat.clone());
    let s = relevance_graph(&mut g, x, &mlp);
    Ok(RelevanceScores {
        s: g.value(s).clone(),
    })
}

pub fn merge_groups<T: Real>(
    f_hat: &Tensor<T>,
    scores: &RelevanceScores<T>,
    ga: &GroupAssignment,
) -> Result<CompactRepresentation<T>> {
    let (n, _) = check_tokens("merge_groups", f_hat, None)?;
    if ga.num_tokens() != n || scores.s.numel() != n {
        return Err(Error::Shape {
            op: "merge_groups",
            lhs: f_hat.shape().to_vec(),
            rhs: vec![ga.num_tokens(), scores.s.numel()],
        });
    }
    let mut g = Graph::new();
    let x = g.constant(f_hat.clone());
    let s = g.constant(scores.s.clone().reshape(&[n])?);
    let out = merge_groups_graph(&mut g, x, s, std::slice::from_ref(ga));
    Ok(CompactRepresentation {
        g: g.value(out).clone(),
    })
}

pub fn update_compact<T: Real>(
    compact: &CompactRepresentation<T>,
    f_v: &Tensor<T>,
    scores: &RelevanceScores<T>,
    depth: usize,
) -> Result<CompactRepresentation<T>> {
    let (n, d) = check_tokens("update_compact", f_v, None)?;
    check_tokens("update_compact", &compact.g, Some(d))?;
    if depth == 0 {
        return Err(Error::Param("depth must be >= 1".into()));
    }
    let mut g = Graph::new();
    let c = g.constant(compact.g.clone());
    let x = g.constant(f_v.clone());
    let s = g.constant(scores.s.clone().reshape(&[n])?);
    let out = update_compact_graph(&mut g, c, x, s, depth, 1);
    Ok(CompactRepresentation {
        g: g.value(out).clone(),
    })
}

pub fn remap<T: Real>(
    compact: &CompactRepresentation<T>,
    ga: &GroupAssignment,
    f_v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d) = check_tokens("remap", f_v, None)?;
    check_tokens("remap", &compact.g, Some(d))?;
    if ga.num_tokens() != n || compact.g.shape()[0] != ga.num_groups() {
        return Err(Error::Shape {
            op: "remap",
            lhs: compact.g.shape().to_vec(),
            rhs: f_v.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let c = g.constant(compact.g.clone());
    let x = g.constant(f_v.clone());
    let out = remap_graph(&mut g, c, std::slice::from_ref(ga), x);
    Ok(g.value(out).clone())
}

/// Expects unit-norm `audio: [D]` and unit rows `g_hat: [P×D]`.
pub fn alignment_scores<T: Real>(
    audio: &Tensor<T>,
    g_hat: &Tensor<T>,
    cfg: &ContrastiveConfig,
) -> Result<AlignmentScores<T>> {
    let (p, d) = check_tokens("alignment_scores", g_hat, None)?;
    if audio.numel() != d {
        return Err(Error::Shape {
            op: "alignment_scores",
            lhs: audio.shape().to_vec(),
            rhs: g_hat.shape().to_vec(),
        });
    }
    let a: Vec<f64> = (0..p)
        .map(|r| {
            (0..d)
                .map(|c| audio.data()[c].as_f64() * g_hat.data()[r * d + c].as_f64())
                .sum()
        })
        .collect();
    let (i, positives, negatives) = partition(&a, cfg);
    Ok(AlignmentScores {
        a: Tensor::from_fn(&[p], |k| T::lit(a[k])),
        i: Tensor::from_fn(&[p], |k| T::lit(i[k])),
        positives,
        negatives,
    })
}

/// Loss value plus whether the positive set was empty.
pub fn contrastive_loss<T: Real>(
    scores: &AlignmentScores<T>,
    cfg: &ContrastiveConfig,
) -> (T, bool) {
    let mut g = Graph::new();
    let a = g.constant(scores.a.clone());
    let term = contrastive_graph(&mut g, a, &scores.positives, &scores.negatives, cfg.tau);
    (g.value(term.loss).item(), term.empty_positive)
}

/// Tensor-level block: returns the remapped map and the compact representation.
pub fn ama_block<T: Real>(
    f_v: &Tensor<T>,
    audio: &Tensor<T>,
    params: &ParamStore<T>,
    prefix: &str,
    cfg: &AmaLevelConfig,
) -> Result<(Tensor<T>, CompactRepresentation<T>, GroupAssignment)> {
    cfg.validate()?;
    check_tokens("ama_block", f_v, Some(cfg.dim))?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let w = AmaWeights::bind(&bound, prefix);
    let x = g.constant(f_v.clone());
    let a = g.constant(audio_tokens(audio)?);
    let out = ama_block_graph(&mut g, x, a, &w, cfg, 1, None)?;
    Ok((
        g.value(out.next).clone(),
        CompactRepresentation {
            g: g.value(out.compact).clone(),
        },
        out.assignments.into_iter().next().expect("one frame"),
    ))
}
