use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcmConfig {
    pub n_clusters: usize,
    /// Fuzzifier, > 1.
    pub m: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the largest centroid movement.
    pub tolerance: f64,
}

impl Default for FcmConfig {
    fn default() -> Self {
        FcmConfig {
            n_clusters: 3,
            m: 2.0,
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcmResult {
    /// Ascending.
    pub centroids: Vec<f64>,
    /// Row-major `n_points x n_clusters`, columns in centroid order.
    pub memberships: Vec<f64>,
    pub iterations: usize,
    /// Objective value after each membership update.
    pub objective_history: Vec<f64>,
}

impl FcmResult {
    pub fn membership(&self, point: usize) -> &[f64] {
        let c = self.centroids.len();
        &self.memberships[point * c..(point + 1) * c]
    }

    /// Cluster with the largest membership, lowest index on ties.
    pub fn hard_assignment(&self, point: usize) -> usize {
        let u = self.membership(point);
        let mut best = 0;
        for j in 1..u.len() {
            if u[j] > u[best] {
                best = j;
            }
        }
        best
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn update_memberships(values: &[f64], centroids: &[f64], m: f64, u: &mut [f64]) {
    let c = centroids.len();
    let exponent = 2.0 / (m - 1.0);
    for (i, &x) in values.iter().enumerate() {
        let row = &mut u[i * c..(i + 1) * c];
        if let Some(j) = centroids.iter().position(|&v| v == x) {
            row.fill(0.0);
            row[j] = 1.0;
            continue;
        }
        for j in 0..c {
            let dj = (x - centroids[j]).abs();
            let s: f64 = centroids
                .iter()
                .map(|&ck| (dj / (x - ck).abs()).powf(exponent))
                .sum();
            row[j] = 1.0 / s;
        }
    }
}

/// `sum_i sum_j u_ij^m (x_i - c_j)^2`.
pub fn fcm_objective(values: &[f64], centroids: &[f64], memberships: &[f64], m: f64) -> f64 {
    let c = centroids.len();
    values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            (0..c)
                .map(|j| memberships[i * c + j].powf(m) * (x - centroids[j]).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Fuzzy C-means on scalar data.
///
/// Centroids start at evenly spaced percentiles from the 10th to the 90th
/// (10/50/90 for three clusters), so the result is deterministic.
pub fn fcm_cluster(values: &[f64], cfg: &FcmConfig) -> Result<FcmResult> {
    let c = cfg.n_clusters;
    if c < 2 {
        return Err(Error::invalid("n_clusters must be at least 2"));
    }
    if !(cfg.m > 1.0) {
        return Err(Error::invalid("fuzzifier m must exceed 1"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    sorted.dedup();
    if sorted.len() < c {
        return Err(Error::invalid(format!(
            "need at least {c} distinct values, got {}",
            sorted.len()
        )));
    }
    let mut all = values.to_vec();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut centroids: Vec<f64> = (0..c)
        .map(|k| percentile(&all, 10.0 + 80.0 * k as f64 / (c - 1) as f64))
        .collect();

    let mut u = vec![0.0; values.len() * c];
    let mut history = Vec::new();
    let mut movement = f64::INFINITY;
    for iter in 1..=cfg.max_iterations {
        update_memberships(values, &centroids, cfg.m, &mut u);
        history.push(fcm_objective(values, &centroids, &u, cfg.m));
        movement = 0.0f64;
        for j in 0..c {
            let (mut num, mut den) = (0.0, 0.0);
            for (i, &x) in values.iter().enumerate() {
                let w = u[i * c + j].powf(cfg.m);
                num += w * x;
                den += w;
            }
            if den > 0.0 {
                let next = num / den;
                movement = movement.max((next - centroids[j]).abs());
                centroids[j] = next;
            }
        }
        if movement < cfg.tolerance {
            update_memberships(values, &centroids, cfg.m, &mut u);
            history.push(fcm_objective(values, &centroids, &u, cfg.m));
            return Ok(sort_result(values.len(), centroids, u, iter, history));
        }
    }
    Err(Error::FcmNotConverged {
        iterations: cfg.max_iterations,
        movement,
    })
}

fn sort_result(n: usize, centroids: Vec<f64>, u: Vec<f64>, iterations: usize, history: Vec<f64>) -> FcmResult {
    let c = centroids.len();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| centroids[a].partial_cmp(&centroids[b]).unwrap());
    let mut memberships = vec![0.0; n * c];
    for i in 0..n {
        for (k, &j) in order.iter().enumerate() {
            memberships[i * c + k] = u[i * c + j];
        }
    }
    FcmResult {
        centroids: order.iter().map(|&j| centroids[j]).collect(),
        memberships,
        iterations,
        objective_history: history,
    }
}
