//! Finite-difference checks of every differentiable component at tiny shapes.

use crate::ama::{
    ama_block_graph, contrastive_graph, group_frames, init_attention, init_level,
    multi_head_attention, partition, similarity_graph, AmaLevelConfig, AmaWeights, Attention,
    ContrastiveConfig,
};
use crate::error::Result;
use crate::model::{
    clip_loss_graph, model_grad_check, seg_loss_graph, ClipBatch, ModelConfig, ModelParams, Plan,
};
use crate::nn::{Bound, ParamStore};
use crate::numerics::{grad_check_many, Graph, Rng, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const COMPONENT_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub error: f64,
    pub tol: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.error < self.tol
    }
}

fn store_inputs(store: &ParamStore<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    store.iter().map(|(n, t)| (n.clone(), t.clone())).unzip()
}

fn bind_vars(names: &[String], vars: &[Var]) -> Bound {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

/// Contrastive loss on a random similarity vector.
pub fn check_contrastive(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(1);
    let a = rng.uniform_tensor::<f64>(&[8], -1.0, 1.0);
    let (_, pos, neg) = partition(a.data(), &ContrastiveConfig::default());
    let (pos, neg) = if pos.is_empty() || neg.is_empty() {
        (vec![0, 1, 2], vec![3, 4, 5, 6, 7])
    } else {
        (pos, neg)
    };
    let report = grad_check_many(
        |g, v| contrastive_graph(g, v[0], &pos, &neg, 0.1).loss,
        &[a],
        STEP,
    )?;
    Ok(report.max_error())
}

/// Cross-entropy + Dice + IoU through a log-softmax.
pub fn check_seg_loss(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(2);
    let logits = rng.normal_tensor::<f64>(&[2 * 9, 3], 1.5);
    let gt: Vec<usize> = (0..18).map(|_| rng.below(3)).collect();
    let report = grad_check_many(
        |g, v| {
            let lp = g.log_softmax_last(v[0]);
            seg_loss_graph(g, lp, &gt, 2, 1.0).total
        },
        &[logits],
        STEP,
    )?;
    Ok(report.max_error())
}

/// One AMA block on two frames, with its contrastive term, grouping frozen.
pub fn check_ama_block(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(3);
    let (frames, n, d, da) = (2, 12, 4, 6);
    let cfg = AmaLevelConfig {
        level: 0,
        dim: d,
        groups: 4,
        heads: 2,
        depth: 2,
        k: None,
    };
    let mut store = ParamStore::new();
    init_level(&mut store, "l", da, d, &mut rng);
    let f_v = rng.normal_tensor::<f64>(&[frames * n, d], 1.0);
    let audio = rng.normal_tensor::<f64>(&[frames, da], 1.0);
    let groups = group_frames(&f_v, frames, &cfg)?;
    let (mut names, mut inputs) = store_inputs(&store);
    names.extend(["f_v".to_string(), "audio".to_string()]);
    inputs.extend([f_v, audio]);
    let report = grad_check_many(
        |g, vars| {
            let bound = bind_vars(&names, vars);
            let w = AmaWeights::bind(&bound, "l");
            let (f_v, audio) = (bound.var("f_v"), bound.var("audio"));
            let out = ama_block_graph(g, f_v, audio, &w, &cfg, frames, Some(&groups))
                .expect("frozen groups");
            let sq = g.square(out.next);
            let mut loss = g.mean(sq);
            for t in 0..frames {
                let rows: Vec<usize> = (t * cfg.groups..(t + 1) * cfg.groups).collect();
                let gc = g.gather_rows(out.compact, &rows);
                let gh = g.l2_normalize_last(gc);
                let emb = w.audio_proj.forward(g, audio);
                let emb = g.gather_rows(emb, &[t]);
                let emb = g.reshape(emb, &[d]);
                let au = g.l2_normalize_last(emb);
                let a = similarity_graph(g, au, gh);
                let term = contrastive_graph(g, a, &[0, 1], &[2, 3], 0.1).loss;
                loss = g.add(loss, term);
            }
            loss
        },
        &inputs,
        STEP,
    )?;
    Ok(report.max_error())
}

/// Multi-head self-attention across three frames at four pixels.
pub fn check_temporal_attention(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(4);
    let (pixels, frames, d) = (4, 3, 4);
    let mut store = ParamStore::new();
    init_attention(&mut store, "t", d, &mut rng);
    let x = rng.normal_tensor::<f64>(&[pixels * frames, d], 1.0);
    let (mut names, mut inputs) = store_inputs(&store);
    names.push("x".into());
    inputs.push(x);
    let report = grad_check_many(
        |g, vars| {
            let bound = bind_vars(&names, vars);
            let w = Attention::bind(&bound, "t");
            let x = bound.var("x");
            let y = multi_head_attention(g, x, x, &w, pixels, 2);
            let y = g.square(y);
            g.mean(y)
        },
        &inputs,
        STEP,
    )?;
    Ok(report.max_error())
}

/// Full network on a random 16×16, two-frame, three-class clip. With
/// `corrupt`, the Dice term's adjoint is dropped, so the check must fail.
pub fn check_full_model(seed: u64, corrupt: bool) -> Result<f64> {
    let cfg = ModelConfig::gradcheck();
    let params = ModelParams::<f64>::init(&cfg, seed)?;
    let mut rng = Rng::new(seed).fork(5);
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let clip = ClipBatch {
        frames: rng.uniform_tensor(&[t, h, w, 3], 0.0, 1.0),
        audio: rng.normal_tensor(&[t, cfg.audio_dim], 1.0),
        gt: (0..t * h * w).map(|_| rng.below(cfg.classes)).collect(),
    };
    if !corrupt {
        return Ok(model_grad_check(&params, &cfg, &clip, STEP)?.1.max_error());
    }
    let plan = Plan::new(&cfg);
    let decisions = {
        let mut g = Graph::new();
        let bound = params.store.bind(&mut g, false);
        clip_loss_graph(&mut g, &bound, &cfg, &plan, &clip, None)?
            .forward
            .decisions
    };
    let (names, inputs) = store_inputs(&params.store);
    let report = grad_check_many(
        |g, vars| {
            let bound = bind_vars(&names, vars);
            let loss = clip_loss_graph(g, &bound, &cfg, &plan, &clip, Some(&decisions))
                .expect("valid clip");
            let dice = g.value(loss.seg.dice).clone();
            let detached = g.constant(dice);
            let without = g.sub(loss.total, loss.seg.dice);
            g.add(without, detached)
        },
        &inputs,
        STEP,
    )?;
    Ok(report.max_error())
}

/// Every check in order: contrastive, segmentation loss, AMA block, temporal
/// attention, full model.
pub fn run(seed: u64, corrupt: bool) -> Result<Vec<CheckLine>> {
    Ok(vec![
        CheckLine {
            name: "contrastive",
            error: check_contrastive(seed)?,
            tol: COMPONENT_TOL,
        },
        CheckLine {
            name: "seg_loss",
            error: check_seg_loss(seed)?,
            tol: COMPONENT_TOL,
        },
        CheckLine {
            name: "ama_block",
            error: check_ama_block(seed)?,
            tol: COMPONENT_TOL,
        },
        CheckLine {
            name: "temporal_attention",
            error: check_temporal_attention(seed)?,
            tol: COMPONENT_TOL,
        },
        CheckLine {
            name: "full_model",
            error: check_full_model(seed, corrupt)?,
            tol: MODEL_TOL,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_corruption_is_caught() {
        let lines = run(3, false).unwrap();
        for l in &lines {
            assert!(l.passed(), "{l:?}");
        }
        assert!(!check_full_model(3, true).unwrap().lt(&MODEL_TOL));
    }
}
