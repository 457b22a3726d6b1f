//! Density-peaks clustering over k-nearest-neighbour densities (DPC-KNN).
//!
//! Tie rules, relied on by the oracle tests:
//! - "higher density" means strictly higher;
//! - among equally distant candidates the lowest token index wins;
//! - among tokens tied at the global maximum density the lowest index is the
//!   peak, and the other tied tokens point at it;
//! - the `P` centers are the top-`P` tokens by `ρ·d`, ties to the lowest index;
//! - group ids are assigned to centers in increasing token order.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Result of grouping the `N` tokens of one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAssignment {
    labels: Vec<usize>,
    peaks: Vec<usize>,
    densities: Vec<f64>,
    nearest_higher: Vec<Option<usize>>,
}

impl GroupAssignment {
    /// Group index of every token.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Center token of every group.
    pub fn peaks(&self) -> &[usize] {
        &self.peaks
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    /// Nearest token of higher density (`None` for the global peak).
    pub fn nearest_higher(&self) -> &[Option<usize>] {
        &self.nearest_higher
    }

    pub fn num_groups(&self) -> usize {
        self.peaks.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.labels.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Builds an assignment from externally supplied labels, e.g. for
    /// replaying a frozen partition. Every group must be non-empty and each
    /// peak must carry its own label.
    pub fn from_labels(labels: Vec<usize>, peaks: Vec<usize>) -> Result<Self> {
        let p = peaks.len();
        let mut seen = vec![false; p];
        for &l in &labels {
            if l >= p {
                return Err(Error::Param(format!("label {l} >= group count {p}")));
            }
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Param("empty group".into()));
        }
        for (g, &t) in peaks.iter().enumerate() {
            if labels.get(t) != Some(&g) {
                return Err(Error::Param(format!("peak {t} does not carry label {g}")));
            }
        }
        let n = labels.len();
        Ok(GroupAssignment {
            labels,
            peaks,
            densities: vec![1.0; n],
            nearest_higher: vec![None; n],
        })
    }

    /// Text table with one row per token: index, label, density, peak flag.
    pub fn to_table(&self) -> String {
        let mut out = String::from("token_index\tlabel\tdensity\tis_peak\n");
        for (i, (&l, &d)) in self.labels.iter().zip(&self.densities).enumerate() {
            let peak = self.peaks[l] == i;
            let _ = writeln!(out, "{i}\t{l}\t{d:.6}\t{}", u8::from(peak));
        }
        out
    }
}

/// Neighbourhood size used when none is configured: `max(2, ⌊N/16⌋)`,
/// clamped below `N`.
pub fn default_k(n: usize) -> usize {
    (n / 16).max(2).min(n.saturating_sub(1)).max(1)
}

fn features_2d<T: Real>(features: &Tensor<T>) -> Result<(usize, usize)> {
    match features.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::Shape {
            op: "grouping",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Symmetric `N×N` Euclidean distance matrix, accumulated in `f64`.
pub fn pairwise_distances<T: Real>(features: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, d) = features_2d(features)?;
    let x: Vec<f64> = features.data().iter().map(|v| v.as_f64()).collect();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut sq = 0.0;
            for c in 0..d {
                let diff = x[i * d + c] - x[j * d + c];
                sq += diff * diff;
            }
            let v = sq.sqrt();
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    Ok(dist)
}

/// `ρ_i = Σ_{j ∈ kNN(i)} exp(−‖f_i − f_j‖)`, neighbours excluding `i` itself.
pub fn local_density<T: Real>(features: &Tensor<T>, k: usize) -> Result<Tensor<f64>> {
    let (n, _) = features_2d(features)?;
    let dist = pairwise_distances(features)?;
    densities_from_distances(&dist, n, k).map(|rho| Tensor::from_parts(vec![n], rho))
}

fn densities_from_distances(dist: &[f64], n: usize, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k >= n {
        return Err(Error::Param(format!("need 1 <= k < N, got k={k}, N={n}")));
    }
    let mut row = Vec::with_capacity(n - 1);
    Ok((0..n)
        .map(|i| {
            row.clear();
            row.extend((0..n).filter(|&j| j != i).map(|j| dist[i * n + j]));
            row.select_nth_unstable_by(k - 1, f64::total_cmp);
            let nearest = &mut row[..k];
            nearest.sort_unstable_by(f64::total_cmp);
            nearest.iter().map(|&v| (-v).exp()).sum()
        })
        .collect())
}

/// Assigns every token to one of `groups` clusters.
pub fn assign_clusters<T: Real>(
    features: &Tensor<T>,
    densities: &Tensor<f64>,
    groups: usize,
) -> Result<GroupAssignment> {
    let (n, _) = features_2d(features)?;
    if densities.numel() != n {
        return Err(Error::Shape {
            op: "assign_clusters",
            lhs: features.shape().to_vec(),
            rhs: densities.shape().to_vec(),
        });
    }
    let dist = pairwise_distances(features)?;
    assign_from_distances(&dist, densities.data(), groups)
}

fn assign_from_distances(dist: &[f64], rho: &[f64], groups: usize) -> Result<GroupAssignment> {
    let n = rho.len();
    if groups == 0 || groups > n {
        return Err(Error::Param(format!(
            "need 1 <= P <= N, got P={groups}, N={n}"
        )));
    }
    // Tokens by decreasing density, lowest index first among ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    let peak = order[0];

    let mut nearest_higher = vec![None; n];
    let mut delta = vec![0.0; n];
    for i in 0..n {
        if i == peak {
            continue;
        }
        let mut best: Option<usize> = None;
        for j in 0..n {
            if rho[j] > rho[i] && best.map_or(true, |b| dist[i * n + j] < dist[i * n + b]) {
                best = Some(j);
            }
        }
        let h = best.unwrap_or(peak);
        nearest_higher[i] = Some(h);
        delta[i] = dist[i * n + h];
    }
    delta[peak] = delta.iter().copied().fold(0.0, f64::max);

    let mut by_gamma: Vec<usize> = (0..n).collect();
    by_gamma.sort_by(|&a, &b| {
        (rho[b] * delta[b])
            .total_cmp(&(rho[a] * delta[a]))
            .then(a.cmp(&b))
    });
    let mut peaks: Vec<usize> = by_gamma[..groups].to_vec();
    peaks.sort_unstable();

    let mut labels = vec![usize::MAX; n];
    for (g, &t) in peaks.iter().enumerate() {
        labels[t] = g;
    }
    for &i in &order {
        if labels[i] == usize::MAX {
            let h = nearest_higher[i].expect("non-peak tokens have a parent");
            labels[i] = labels[h];
        }
    }
    Ok(GroupAssignment {
        labels,
        peaks,
        densities: rho.to_vec(),
        nearest_higher,
    })
}

/// Density computation followed by cluster assignment, sharing one
/// distance matrix.
pub fn group_tokens<T: Real>(
    features: &Tensor<T>,
    k: usize,
    groups: usize,
) -> Result<GroupAssignment> {
    let (n, _) = features_2d(features)?;
    if n == 1 && groups == 1 {
        // No neighbours to estimate density from; the lone token is its own peak.
        return GroupAssignment::from_labels(vec![0], vec![0]);
    }
    let dist = pairwise_distances(features)?;
    let rho = densities_from_distances(&dist, n, k)?;
    assign_from_distances(&dist, &rho, groups)
}
