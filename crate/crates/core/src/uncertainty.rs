//! Dirichlet evidence and pixel-wise uncertainty.
//!
//! Public tensors use the `[T×C×H×W]` layout. The graph forms work on
//! class-last matrices `[(T·H·W)×C]`, frame-major, which is what the model
//! produces; [`to_class_last`] and [`from_class_last`] convert between the two.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Stabilizer in the uncertainty-weighted prediction.
pub const EPSILON: f64 = 1e-6;

/// Evidence, per-class variance and its normalized form, all `[T×C×H×W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletField<T: Real = f32> {
    pub alpha: Tensor<T>,
    pub delta: Tensor<T>,
    pub delta_norm: Tensor<T>,
}

impl<T: Real> DirichletField<T> {
    pub fn from_logits(logits: &Tensor<T>) -> Result<Self> {
        let alpha = dirichlet_params(logits)?;
        let delta = pixel_uncertainty(&alpha)?;
        let delta_norm = normalize_uncertainty(&delta)?;
        Ok(DirichletField {
            alpha,
            delta,
            delta_norm,
        })
    }
}

/// Raw logits and uncertainty-weighted scores, `[T×C×H×W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionField<T: Real = f32> {
    pub m: Tensor<T>,
    pub y_hat: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Real> PredictionField<T> {
    /// Argmax class per pixel, `T·H·W` entries.
    pub fn labels(&self) -> Vec<usize> {
        argmax_classes(&self.y_hat)
    }
}

fn dims4<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [t, c, h, w] => Ok([t, c, h, w]),
        ref s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `[T×C×H×W] → [(T·H·W)×C]`.
pub fn to_class_last<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [t, c, h, w] = dims4("to_class_last", x)?;
    let hw = h * w;
    Tensor::new(
        vec![t * hw, c],
        (0..t * hw * c)
            .map(|o| {
                let (row, k) = (o / c, o % c);
                let (f, p) = (row / hw, row % hw);
                x.data()[(f * c + k) * hw + p]
            })
            .collect(),
    )
}

/// Inverse of [`to_class_last`].
pub fn from_class_last<T: Real>(x: &Tensor<T>, t: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let hw = h * w;
    match *x.shape() {
        [rows, c] if rows == t * hw => Tensor::new(
            vec![t, c, h, w],
            (0..t * c * hw)
                .map(|o| {
                    let (f, k, p) = (o / (c * hw), (o / hw) % c, o % hw);
                    x.data()[(f * hw + p) * c + k]
                })
                .collect(),
        ),
        ref s => Err(Error::Shape {
            op: "from_class_last",
            lhs: s.to_vec(),
            rhs: vec![t, h, w],
        }),
    }
}

/// `α = softplus(logits)`.
pub fn dirichlet_params<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    dims4("dirichlet_params", logits)?;
    if !logits.is_finite() {
        return Err(Error::Param("uncertainty logits must be finite".into()));
    }
    Ok(logits.softplus())
}

/// Per-class Dirichlet marginal variance `α_c(S₀−α_c)/(S₀²(S₀+1))`.
pub fn pixel_uncertainty<T: Real>(alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let [t, c, h, w] = dims4("pixel_uncertainty", alpha)?;
    if alpha.data().iter().any(|&a| !(a > T::zero())) {
        return Err(Error::Param("alpha must be strictly positive".into()));
    }
    if c == 1 {
        log::warn!("pixel_uncertainty: single class, variance is identically zero");
        return Ok(Tensor::zeros(alpha.shape()));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); alpha.numel()];
    for f in 0..t {
        for p in 0..hw {
            let at = |k: usize| (f * c + k) * hw + p;
            let s0: f64 = (0..c).map(|k| alpha.data()[at(k)].as_f64()).sum();
            let denom = s0 * s0 * (s0 + 1.0);
            for k in 0..c {
                let a = alpha.data()[at(k)].as_f64();
                out[at(k)] = T::lit(a * (s0 - a) / denom);
            }
        }
    }
    Tensor::new(alpha.shape().to_vec(), out)
}

/// Min-max scaling to `[0, 1]` per frame over all `C×H×W` values; a constant
/// frame maps to zeros.
pub fn normalize_uncertainty<T: Real>(delta: &Tensor<T>) -> Result<Tensor<T>> {
    let [t, ..] = dims4("normalize_uncertainty", delta)?;
    let len = delta.numel() / t;
    let mut out = vec![T::zero(); delta.numel()];
    for f in 0..t {
        let chunk = &delta.data()[f * len..(f + 1) * len];
        let mn = chunk.iter().copied().fold(T::infinity(), T::min);
        let mx = chunk.iter().copied().fold(T::neg_infinity(), T::max);
        let range = mx - mn;
        if range > T::zero() {
            for (o, &v) in out[f * len..(f + 1) * len].iter_mut().zip(chunk) {
                *o = (v - mn) / range;
            }
        }
    }
    Tensor::new(delta.shape().to_vec(), out)
}

/// How class scores are squashed before weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Softmax over the class axis (semantic segmentation).
    Softmax,
    /// Independent sigmoid per class (binary segmentation).
    Sigmoid,
}

/// `ŷ = σ(m) / (δ_norm + ε)`.
pub fn weighted_prediction<T: Real>(
    m: &Tensor<T>,
    delta_norm: &Tensor<T>,
    epsilon: f64,
    activation: Activation,
) -> Result<PredictionField<T>> {
    dims4("weighted_prediction", m)?;
    if m.shape() != delta_norm.shape() {
        return Err(Error::Shape {
            op: "weighted_prediction",
            lhs: m.shape().to_vec(),
            rhs: delta_norm.shape().to_vec(),
        });
    }
    let sigma = match activation {
        Activation::Softmax => m.softmax(1)?,
        Activation::Sigmoid => m.sigmoid(),
    };
    let eps = T::lit(epsilon);
    let y_hat = sigma.zip_map(delta_norm, "weighted_prediction", |s, d| s / (d + eps))?;
    Ok(PredictionField {
        m: m.clone(),
        y_hat,
        epsilon,
    })
}

/// Argmax over the class axis of a `[T×C×H×W]` tensor, lowest class on ties.
pub fn argmax_classes<T: Real>(x: &Tensor<T>) -> Vec<usize> {
    let s = x.shape();
    let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(t * hw);
    for f in 0..t {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if x.data()[(f * c + k) * hw + p] > x.data()[(f * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

// Graph forms on class-last `[rows×C]` matrices.

/// `α_c(S₀−α_c)/(S₀²(S₀+1))` row-wise.
pub fn pixel_uncertainty_graph<T: Real>(g: &mut Graph<T>, alpha: Var) -> Var {
    let c = g.shape(alpha)[1];
    let s0 = g.sum_last(alpha);
    let s0 = g.broadcast_col(s0, c);
    let rest = g.sub(s0, alpha);
    let num = g.mul(alpha, rest);
    let s0_sq = g.square(s0);
    let s0_p1 = g.shift(s0, T::one());
    let den = g.mul(s0_sq, s0_p1);
    g.div(num, den)
}

/// Logits `[rows×C]` to per-frame normalized uncertainty; `frames` splits the
/// rows into equal contiguous frames.
pub fn normalized_uncertainty_graph<T: Real>(g: &mut Graph<T>, logits: Var, frames: usize) -> Var {
    let alpha = g.softplus(logits);
    let delta = pixel_uncertainty_graph(g, alpha);
    g.minmax_segments(delta, frames)
}

/// Log of the renormalized weighted prediction:
/// `log_softmax(m − ln(δ_norm + ε))`, equal to `ln(ŷ / Σ_c ŷ)` for softmax σ.
pub fn weighted_log_probs_graph<T: Real>(
    g: &mut Graph<T>,
    m: Var,
    delta_norm: Var,
    epsilon: f64,
) -> Var {
    let shifted = g.shift(delta_norm, T::lit(epsilon));
    let log_den = g.ln(shifted);
    let adj = g.sub(m, log_den);
    g.log_softmax_last(adj)
}

/// Class-max-reduced 8-bit map per frame of `delta_norm: [T×C×H×W]`, values
/// `round(255·x)`.
pub fn class_max_maps<T: Real>(delta_norm: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let [t, c, h, w] = dims4("class_max_maps", delta_norm)?;
    let hw = h * w;
    Ok((0..t)
        .map(|f| {
            (0..hw)
                .map(|p| {
                    let v = (0..c)
                        .map(|k| delta_norm.data()[(f * c + k) * hw + p].as_f64())
                        .fold(0.0, f64::max);
                    (255.0 * v.clamp(0.0, 1.0)).round() as u8
                })
                .collect()
        })
        .collect())
}

/// Binary P5 PGM.
pub fn encode_pgm(pixels: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes one PGM per frame as `{stem}_t{frame}.pgm` into `dir`; returns the paths.
pub fn write_uncertainty_pgms<T: Real>(
    delta_norm: &Tensor<T>,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<Vec<std::path::PathBuf>> {
    let [_, _, h, w] = dims4("write_uncertainty_pgms", delta_norm)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (f, map) in class_max_maps(delta_norm)?.into_iter().enumerate() {
        let path = dir.join(format!("{stem}_t{f}.pgm"));
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&encode_pgm(&map, w, h))
            .map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Rng};
    use proptest::prelude::*;

    fn t4(c: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, c, 1, vals.len() / c], vals.to_vec()).unwrap()
    }

    #[test]
    fn softplus_examples() {
        let a = dirichlet_params(&Tensor::<f64>::zeros(&[1, 2, 2, 2])).unwrap();
        assert!(a
            .data()
            .iter()
            .all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        let a = dirichlet_params(&Tensor::<f64>::full(&[1, 2, 1, 1], -20.0)).unwrap();
        assert!(a
            .data()
            .iter()
            .all(|&v| v > 0.0 && (v - 2.06e-9).abs() < 1e-10));
        let a = dirichlet_params(&t4(1, &[-1.0, 0.0, 1.0])).unwrap();
        assert!(a.data()[0] < a.data()[1] && a.data()[1] < a.data()[2]);
        assert!(dirichlet_params(&t4(1, &[f64::NAN])).is_err());
    }

    #[test]
    fn uniform_beta_variance() {
        let d = pixel_uncertainty(&t4(2, &[1.0, 1.0])).unwrap();
        for &v in d.data() {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn more_evidence_less_variance() {
        let base = [0.7, 2.0, 1.3];
        let at = |t: f64| pixel_uncertainty(&t4(3, &base.map(|a| a * t))).unwrap();
        let (d1, d10, d100) = (at(1.0), at(10.0), at(100.0));
        for k in 0..3 {
            assert!(d1.data()[k] > d10.data()[k] && d10.data()[k] > d100.data()[k]);
        }
    }

    #[test]
    fn single_class_is_zero() {
        let d = pixel_uncertainty(&t4(1, &[0.5, 3.0])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    /// Sample variance of each marginal from Dirichlet draws via normalized
    /// gammas, with the standard error of the variance estimate.
    fn monte_carlo(alpha: &[f64], draws: usize, rng: &mut Rng) -> Vec<(f64, f64)> {
        let c = alpha.len();
        let mut samples = vec![Vec::with_capacity(draws); c];
        let mut g = vec![0.0; c];
        for _ in 0..draws {
            for k in 0..c {
                g[k] = rng.gamma(alpha[k]);
            }
            let s: f64 = g.iter().sum();
            for k in 0..c {
                samples[k].push(g[k] / s);
            }
        }
        samples
            .iter()
            .map(|xs| {
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
                (var, ((m4 - var * var) / n).sqrt())
            })
            .collect()
    }

    #[test]
    fn matches_monte_carlo() {
        let mut rng = Rng::new(21);
        let alpha = [0.8, 2.5, 1.2, 4.0];
        let d = pixel_uncertainty(&t4(4, &alpha)).unwrap();
        for (k, (var, se)) in monte_carlo(&alpha, 1_000_000, &mut rng)
            .into_iter()
            .enumerate()
        {
            assert!(
                (d.data()[k] - var).abs() < 3.0 * se,
                "class {k}: {} vs {var} ± {se}",
                d.data()[k]
            );
        }
    }

    #[test]
    fn normalization_examples() {
        let z = normalize_uncertainty(&Tensor::<f64>::full(&[2, 2, 2, 2], 0.1)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let x = t4(2, &[0.05, 0.2, 0.1, 0.15]);
        let n = normalize_uncertainty(&x).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
    }

    #[test]
    fn normalization_is_per_frame() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![0.0, 1.0, 10.0, 30.0]).unwrap();
        let n = normalize_uncertainty(&x).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn weighting_examples() {
        let m = t4(2, &[0.6f64.ln(), 0.4f64.ln()]);
        let d = t4(2, &[0.9, 0.1]);
        let p = weighted_prediction(&m, &d, EPSILON, Activation::Softmax).unwrap();
        assert!((p.y_hat.data()[0] - 0.6 / (0.9 + EPSILON)).abs() < 1e-12);
        assert!((p.y_hat.data()[1] - 0.4 / (0.1 + EPSILON)).abs() < 1e-12);
        assert_eq!(p.labels(), vec![1]);
        assert_eq!(argmax_classes(&m), vec![0]);

        let zero = Tensor::zeros(&[1, 2, 1, 1]);
        let p = weighted_prediction(&m, &zero, EPSILON, Activation::Softmax).unwrap();
        assert!((p.y_hat.data()[0] - 0.6 / EPSILON).abs() < 1e-6);
        assert_eq!(p.labels(), vec![0]);

        let p = weighted_prediction(&m, &zero, EPSILON, Activation::Sigmoid).unwrap();
        assert!((p.y_hat.data()[0] - 1.0 / (1.0 + 1.0 / 0.6) / EPSILON).abs() < 1e-3);
    }

    #[test]
    fn layout_round_trip() {
        let x = Rng::new(3).normal_tensor::<f64>(&[2, 3, 2, 4], 1.0);
        let cl = to_class_last(&x).unwrap();
        assert_eq!(cl.shape(), &[16, 3]);
        assert_eq!(cl.at(&[8 + 5, 2]), x.at(&[1, 2, 1, 1]));
        assert_eq!(from_class_last(&cl, 2, 2, 4).unwrap(), x);
    }

    #[test]
    fn graph_forms_match_tensor_forms() {
        let mut rng = Rng::new(4);
        let logits = rng.normal_tensor::<f64>(&[2, 3, 2, 2], 2.0);
        let m = rng.normal_tensor::<f64>(&[2, 3, 2, 2], 1.0);
        let field = DirichletField::from_logits(&logits).unwrap();
        let mut g = Graph::new();
        let l = g.constant(to_class_last(&logits).unwrap());
        let dn = normalized_uncertainty_graph(&mut g, l, 2);
        let got = from_class_last(g.value(dn), 2, 2, 2).unwrap();
        for (a, b) in got.data().iter().zip(field.delta_norm.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mv = g.constant(to_class_last(&m).unwrap());
        let lp = weighted_log_probs_graph(&mut g, mv, dn, EPSILON);
        let probs = from_class_last(&g.value(lp).exp(), 2, 2, 2).unwrap();
        let y = weighted_prediction(&m, &field.delta_norm, EPSILON, Activation::Softmax)
            .unwrap()
            .y_hat;
        let ysum = y.sum_axis(1).unwrap();
        for f in 0..2 {
            for k in 0..3 {
                for p in 0..4 {
                    let want = y.at(&[f, k, p / 2, p % 2]) / ysum.at(&[f, p / 2, p % 2]);
                    assert!((probs.at(&[f, k, p / 2, p % 2]) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn uncertainty_gradient() {
        let x = Rng::new(5).normal_tensor::<f64>(&[6, 3], 1.0);
        let w = Rng::new(6).normal_tensor::<f64>(&[6, 3], 1.0);
        let err = grad_check(
            |g, v| {
                let a = g.softplus(v);
                let d = pixel_uncertainty_graph(g, a);
                let wc = g.constant(w.clone());
                let p = g.mul(d, wc);
                g.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pgm_layout() {
        let dn = Tensor::new(vec![1, 2, 1, 2], vec![0.2f32, 1.0, 0.5, 0.0]).unwrap();
        let maps = class_max_maps(&dn).unwrap();
        assert_eq!(maps, vec![vec![128, 255]]);
        let bytes = encode_pgm(&maps[0], 2, 1);
        assert_eq!(&bytes[..11], b"P5\n2 1\n255\n");
        let dir = tempfile::tempdir().unwrap();
        let paths = write_uncertainty_pgms(&dn, dir.path(), "clip").unwrap();
        assert_eq!(std::fs::read(&paths[0]).unwrap(), bytes);
    }

    proptest! {
        #[test]
        fn variance_bounds_and_mean_sum(alpha in prop::collection::vec(1e-3f64..50.0, 2..6)) {
            let c = alpha.len();
            let d = pixel_uncertainty(&t4(c, &alpha)).unwrap();
            let s0: f64 = alpha.iter().sum();
            prop_assert!((alpha.iter().map(|a| a / s0).sum::<f64>() - 1.0).abs() < 1e-12);
            for &v in d.data() {
                prop_assert!(v > 0.0 && v <= 0.25);
            }
        }

        #[test]
        fn normalization_preserves_order(vals in prop::collection::vec(-5.0f64..5.0, 2..20)) {
            let x = t4(1, &vals);
            let n = normalize_uncertainty(&x).unwrap();
            for i in 0..vals.len() {
                prop_assert!((0.0..=1.0).contains(&n.data()[i]));
                for j in 0..vals.len() {
                    if vals[i] < vals[j] {
                        prop_assert!(n.data()[i] <= n.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn class_constant_weights_keep_argmax(
            m in prop::collection::vec(-4.0f64..4.0, 3),
            d in 0.0f64..1.0,
        ) {
            let mt = t4(3, &m);
            let p = weighted_prediction(&mt, &Tensor::full(&[1, 3, 1, 1], d), EPSILON, Activation::Softmax).unwrap();
            prop_assert_eq!(p.labels(), argmax_classes(&mt));
        }
    }
}
