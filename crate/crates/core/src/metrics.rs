//! Region Jaccard, precision/recall F-measure and their mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::ClipKind;

/// Default `β²`.
pub const BETA_SQ: f64 = 0.3;

/// Per-class and mean Jaccard of one label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Jaccard {
    /// Index `c` holds class `c`; `None` for class 0 and for classes absent
    /// from both maps.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the present foreground classes; 1 when there are none.
    pub mean: f64,
}

fn check_maps(op: &'static str, pred: &[usize], gt: &[usize], classes: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op,
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l >= classes) {
        return Err(Error::Param(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

pub fn jaccard(pred: &[usize], gt: &[usize], classes: usize) -> Result<Jaccard> {
    check_maps("jaccard", pred, gt, classes)?;
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| (c > 0 && union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(Jaccard { per_class, mean })
}

/// Foreground true positives, false positives and false negatives, summed
/// over the per-class binarizations.
pub fn confusion(pred: &[usize], gt: &[usize]) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            if p > 0 {
                tp += 1;
            }
        } else {
            if p > 0 {
                fp += 1;
            }
            if g > 0 {
                fn_ += 1;
            }
        }
    }
    (tp, fp, fn_)
}

/// `(1+β²)·P·R / (β²·P + R)`, micro-averaged over foreground classes.
pub fn fbeta(pred: &[usize], gt: &[usize], beta_sq: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "fbeta",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let (tp, fp, fn_) = confusion(pred, gt);
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    Ok((1.0 + beta_sq) * p * r / (beta_sq * p + r))
}

/// Predicted and ground-truth label maps of every frame of one clip.
#[derive(Clone, Debug)]
pub struct ClipPrediction {
    pub id: usize,
    pub kind: ClipKind,
    pub pred: Vec<Vec<usize>>,
    pub gt: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub id: usize,
    pub kind: ClipKind,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub clips: usize,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean J per class over the frames where the class is present;
    /// `None` for the background and for classes never present.
    pub per_class_j: Vec<Option<f64>>,
    pub j: f64,
    pub f_beta: f64,
    pub jf_mean: f64,
    pub beta_sq: f64,
    pub slices: BTreeMap<String, SliceScore>,
    pub clips: Vec<ClipScore>,
}

fn slice(scores: &[&ClipScore]) -> SliceScore {
    let n = scores.len().max(1) as f64;
    let j = scores.iter().map(|s| s.j).sum::<f64>() / n;
    let f = scores.iter().map(|s| s.f).sum::<f64>() / n;
    SliceScore {
        clips: scores.len(),
        j,
        f,
        jf: (j + f) / 2.0,
    }
}

/// Frame metrics averaged per clip, then over clips.
pub fn evaluate(clips: &[ClipPrediction], classes: usize, beta_sq: f64) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut class_sum = vec![0.0; classes];
    let mut class_n = vec![0usize; classes];
    let mut scores = Vec::with_capacity(clips.len());
    for clip in clips {
        if clip.pred.len() != clip.gt.len() || clip.pred.is_empty() {
            return Err(Error::Shape {
                op: "evaluate",
                lhs: vec![clip.pred.len()],
                rhs: vec![clip.gt.len()],
            });
        }
        let (mut js, mut fs) = (0.0, 0.0);
        for (p, g) in clip.pred.iter().zip(&clip.gt) {
            let jac = jaccard(p, g, classes)?;
            for (c, v) in jac.per_class.iter().enumerate() {
                if let Some(v) = v {
                    class_sum[c] += v;
                    class_n[c] += 1;
                }
            }
            js += jac.mean;
            fs += fbeta(p, g, beta_sq)?;
        }
        let t = clip.pred.len() as f64;
        let (j, f) = (js / t, fs / t);
        scores.push(ClipScore {
            id: clip.id,
            kind: clip.kind,
            j,
            f,
            jf: (j + f) / 2.0,
        });
    }
    let all: Vec<&ClipScore> = scores.iter().collect();
    let overall = slice(&all);
    let mut slices = BTreeMap::new();
    for kind in ClipKind::ALL {
        let part: Vec<&ClipScore> = scores.iter().filter(|s| s.kind == kind).collect();
        if !part.is_empty() {
            slices.insert(kind.name().to_string(), slice(&part));
        }
    }
    Ok(EvalReport {
        per_class_j: (0..classes)
            .map(|c| (class_n[c] > 0).then(|| class_sum[c] / class_n[c] as f64))
            .collect(),
        j: overall.j,
        f_beta: overall.f,
        jf_mean: overall.jf,
        beta_sq,
        slices,
        clips: scores,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: overall row, then one row per slice.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>8} {:>8} {:>8}",
            "slice", "clips", "J", "F", "J&F"
        );
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>8.4} {:>8.4} {:>8.4}",
            "all",
            self.clips.len(),
            self.j,
            self.f_beta,
            self.jf_mean
        );
        for (name, s) in &self.slices {
            let _ = writeln!(
                out,
                "{:<8} {:>6} {:>8.4} {:>8.4} {:>8.4}",
                name, s.clips, s.j, s.f, s.jf
            );
        }
        for (c, v) in self.per_class_j.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(out, "class {c}  J = {v:.4}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half_and_full() -> (Vec<usize>, Vec<usize>) {
        let gt = vec![1; 16];
        let pred: Vec<usize> = (0..16).map(|i| usize::from(i % 4 < 2)).collect();
        (pred, gt)
    }

    #[test]
    fn jaccard_examples() {
        let gt = vec![0, 1, 1, 2, 2, 0];
        let j = jaccard(&gt, &gt, 3).unwrap();
        assert_eq!(j.per_class, vec![None, Some(1.0), Some(1.0)]);
        assert_eq!(j.mean, 1.0);
        let j = jaccard(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(j.mean, 0.0);
        let (pred, gt) = half_and_full();
        assert_eq!(jaccard(&pred, &gt, 2).unwrap().mean, 0.5);
        assert_eq!(jaccard(&[0, 0], &[0, 0], 3).unwrap().mean, 1.0);
        assert!(jaccard(&[0], &[0, 0], 2).is_err());
        assert!(jaccard(&[3], &[0], 2).is_err());
    }

    #[test]
    fn fbeta_examples() {
        let (pred, gt) = half_and_full();
        assert_eq!(fbeta(&gt, &gt, BETA_SQ).unwrap(), 1.0);
        assert_eq!(fbeta(&pred, &gt, BETA_SQ).unwrap(), 0.8125);
        assert_eq!(fbeta(&[1, 1, 0, 0], &[0, 0, 1, 1], BETA_SQ).unwrap(), 0.0);
        assert_eq!(fbeta(&[0, 0], &[0, 0], BETA_SQ).unwrap(), 1.0);
        assert_eq!(fbeta(&[0, 0], &[1, 0], BETA_SQ).unwrap(), 0.0);
    }

    #[test]
    fn evaluation_slices() {
        let gt = vec![vec![0, 1, 1, 0]; 2];
        let perfect = ClipPrediction {
            id: 0,
            kind: ClipKind::Easy,
            pred: gt.clone(),
            gt: gt.clone(),
        };
        let r = evaluate(std::slice::from_ref(&perfect), 2, BETA_SQ).unwrap();
        assert_eq!((r.j, r.f_beta, r.jf_mean), (1.0, 1.0, 1.0));

        let wrong = ClipPrediction {
            id: 1,
            kind: ClipKind::Case2,
            pred: vec![vec![0; 4]; 2],
            gt,
        };
        let r = evaluate(&[perfect.clone(), wrong.clone()], 2, BETA_SQ).unwrap();
        assert_eq!(r.slices["easy"].jf, 1.0);
        assert_eq!(r.slices["case2"].jf, 0.0);
        assert_eq!(r.slices.values().map(|s| s.clips).sum::<usize>(), 2);
        assert_eq!(r.jf_mean, 0.5);
        assert_eq!(r, evaluate(&[perfect, wrong], 2, BETA_SQ).unwrap());
        assert!(r.to_table().contains("case2"));
        assert!(evaluate(&[], 2, BETA_SQ).is_err());
    }

    /// Direct per-class count oracle.
    fn oracle(pred: &[usize], gt: &[usize], classes: usize) -> (f64, f64) {
        let mut js = Vec::new();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for c in 1..classes {
            let i = pred
                .iter()
                .zip(gt)
                .filter(|(&p, &g)| p == c && g == c)
                .count() as f64;
            let pc = pred.iter().filter(|&&p| p == c).count() as f64;
            let gc = gt.iter().filter(|&&g| g == c).count() as f64;
            if pc + gc > 0.0 {
                js.push(i / (pc + gc - i));
            }
            tp += i;
            fp += pc - i;
            fn_ += gc - i;
        }
        let j = if js.is_empty() {
            1.0
        } else {
            js.iter().sum::<f64>() / js.len() as f64
        };
        let f = if tp + fp + fn_ == 0.0 {
            1.0
        } else if tp == 0.0 {
            0.0
        } else {
            let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
            1.3 * p * r / (0.3 * p + r)
        };
        (j, f)
    }

    proptest! {
        #[test]
        fn matches_count_oracle(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let (j, f) = oracle(&pred, &gt, 4);
            let jm = jaccard(&pred, &gt, 4).unwrap().mean;
            let fm = fbeta(&pred, &gt, BETA_SQ).unwrap();
            prop_assert!((j - jm).abs() < 1e-9);
            prop_assert!((f - fm).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&jm) && (0.0..=1.0).contains(&fm));
            prop_assert_eq!(jaccard(&gt, &gt, 4).unwrap().mean, 1.0);
        }
    }
}
