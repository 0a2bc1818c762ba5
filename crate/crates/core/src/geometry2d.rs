//! Robust 2D similarity fitting between matched keypoints, and the pair
//! baseline / angular difference derived from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Keypoint, MatchSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("no consensus: best model has {best} inliers, need 3")]
    NoConsensus { best: usize },
    #[error("point lists differ in length ({0} vs {1})")]
    CountMismatch(usize, usize),
    #[error("pair rejected: {0}")]
    PairRejected(Box<GeometryError>),
}

/// `p' = scale * R(angle) * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity2D {
    pub scale: f64,
    /// Radians in `(-pi, pi]`.
    pub angle: f64,
    pub translation: [f64; 2],
}

impl Similarity2D {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            angle: 0.0,
            translation: [0.0, 0.0],
        }
    }

    /// From the complex form `z' = a z + b`.
    fn from_complex(a: [f64; 2], b: [f64; 2]) -> Self {
        Self {
            scale: a[0].hypot(a[1]),
            angle: a[1].atan2(a[0]),
            translation: b,
        }
    }

    fn linear(&self) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [self.scale * c, self.scale * s]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [ar, ai] = self.linear();
        [
            ar * p[0] - ai * p[1] + self.translation[0],
            ai * p[0] + ar * p[1] + self.translation[1],
        ]
    }

    pub fn transfer_error(&self, p: [f64; 2], q: [f64; 2]) -> f64 {
        let r = self.apply(p);
        (r[0] - q[0]).hypot(r[1] - q[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier transfer-error bound in pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            confidence: 0.99,
            max_iterations: 2000,
            seed: 0,
        }
    }
}

/// Which matches enter the baseline statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSource {
    #[default]
    Inliers,
    AllMatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaStatistic {
    #[default]
    Mean,
    Median,
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct GeometryParams {
    pub ransac: RansacParams,
    pub beta_source: BetaSource,
    pub beta_statistic: BetaStatistic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairGeometry {
    /// Pixels.
    pub beta: f64,
    /// Degrees in `[0, 180]`.
    pub theta: f64,
    pub inlier_count: usize,
    pub model: Similarity2D,
}

/// Exact similarity through two correspondences.
fn two_point(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> Option<Similarity2D> {
    let dp = [p2[0] - p1[0], p2[1] - p1[1]];
    let dq = [q2[0] - q1[0], q2[1] - q1[1]];
    let norm = dp[0] * dp[0] + dp[1] * dp[1];
    if norm < 1e-12 {
        return None;
    }
    // a = dq / dp
    let a = [
        (dq[0] * dp[0] + dq[1] * dp[1]) / norm,
        (dq[1] * dp[0] - dq[0] * dp[1]) / norm,
    ];
    if a[0] == 0.0 && a[1] == 0.0 {
        return None;
    }
    let b = [
        q1[0] - (a[0] * p1[0] - a[1] * p1[1]),
        q1[1] - (a[1] * p1[0] + a[0] * p1[1]),
    ];
    Some(Similarity2D::from_complex(a, b))
}

/// Least-squares similarity with scale (2D Umeyama) over the selected pairs.
pub fn fit_similarity_lsq(points_a: &[[f64; 2]], points_b: &[[f64; 2]]) -> Option<Similarity2D> {
    let n = points_a.len().min(points_b.len());
    if n < 2 {
        return None;
    }
    let mean = |pts: &[[f64; 2]]| {
        let s = pts.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [s[0] / n as f64, s[1] / n as f64]
    };
    let (ma, mb) = (mean(&points_a[..n]), mean(&points_b[..n]));
    let (mut re, mut im, mut var) = (0.0, 0.0, 0.0);
    for (p, q) in points_a.iter().zip(points_b) {
        let (px, py) = (p[0] - ma[0], p[1] - ma[1]);
        let (qx, qy) = (q[0] - mb[0], q[1] - mb[1]);
        re += px * qx + py * qy;
        im += px * qy - py * qx;
        var += px * px + py * py;
    }
    if var <= 0.0 || (re == 0.0 && im == 0.0) {
        return None;
    }
    let a = [re / var, im / var];
    let b = [
        mb[0] - (a[0] * ma[0] - a[1] * ma[1]),
        mb[1] - (a[1] * ma[0] + a[0] * ma[1]),
    ];
    Some(Similarity2D::from_complex(a, b))
}

fn inlier_mask(model: &Similarity2D, a: &[[f64; 2]], b: &[[f64; 2]], threshold: f64) -> Vec<bool> {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| model.transfer_error(p, q) <= threshold)
        .collect()
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let good_sample = inlier_ratio * inlier_ratio;
    if good_sample >= 1.0 {
        return 1;
    }
    if good_sample <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good_sample).ln();
    if n.is_finite() {
        (n.ceil().max(1.0) as usize).min(cap)
    } else {
        cap
    }
}

fn refit(
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    mask: &[bool],
) -> Option<Similarity2D> {
    let (sa, sb): (Vec<_>, Vec<_>) = a
        .iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, q), _)| (*p, *q))
        .unzip();
    fit_similarity_lsq(&sa, &sb)
}

/// Seeded RANSAC over 2-point samples, refit by least squares on the consensus.
pub fn estimate_similarity(
    points_a: &[[f64; 2]],
    points_b: &[[f64; 2]],
    params: &RansacParams,
) -> Result<(Similarity2D, Vec<bool>), GeometryError> {
    let n = points_a.len();
    if n != points_b.len() {
        return Err(GeometryError::CountMismatch(n, points_b.len()));
    }
    if n < 2 {
        return Err(GeometryError::DegenerateInput("fewer than 2 correspondences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let cap = params.max_iterations.max(1);
    let mut needed = cap;
    let mut best: Option<(usize, Similarity2D)> = None;
    let mut iteration = 0;
    while iteration < needed {
        iteration += 1;
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let Some(model) = two_point(points_a[i], points_a[j], points_b[i], points_b[j]) else {
            continue;
        };
        let count = points_a
            .iter()
            .zip(points_b)
            .filter(|(&p, &q)| model.transfer_error(p, q) <= params.threshold)
            .count();
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, model));
            needed = required_iterations(count as f64 / n as f64, params.confidence, cap);
        }
    }
    let Some((best_count, mut model)) = best else {
        return Err(GeometryError::DegenerateInput("every sample was coincident"));
    };
    if best_count < 3 {
        return Err(GeometryError::NoConsensus { best: best_count });
    }

    let mut mask = inlier_mask(&model, points_a, points_b, params.threshold);
    for _ in 0..10 {
        let Some(candidate) = refit(points_a, points_b, &mask) else {
            break;
        };
        let next = inlier_mask(&candidate, points_a, points_b, params.threshold);
        if next.iter().filter(|&&m| m).count() < 3 {
            break;
        }
        model = candidate;
        if next == mask {
            break;
        }
        mask = next;
    }
    let mask = inlier_mask(&model, points_a, points_b, params.threshold);
    let count = mask.iter().filter(|&&m| m).count();
    if count < 3 {
        return Err(GeometryError::NoConsensus { best: count });
    }
    Ok((model, mask))
}

fn statistic(values: &mut [f64], stat: BetaStatistic) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    match stat {
        BetaStatistic::Mean => values.iter().sum::<f64>() / n,
        BetaStatistic::Rms => (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        BetaStatistic::Median => {
            values.sort_by(f64::total_cmp);
            let mid = values.len() / 2;
            if values.len() % 2 == 1 {
                values[mid]
            } else {
                0.5 * (values[mid - 1] + values[mid])
            }
        }
    }
}

/// Matched keypoint coordinates in match order.
pub fn matched_points(
    matches: &MatchSet,
    keypoints_a: &[Keypoint],
    keypoints_b: &[Keypoint],
) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    matches
        .matches()
        .iter()
        .map(|m| {
            let (a, b) = (&keypoints_a[m.index_a], &keypoints_b[m.index_b]);
            ([a.x, a.y], [b.x, b.y])
        })
        .unzip()
}

/// Baseline and angular difference of a matched pair.
pub fn pair_geometry(
    matches: &MatchSet,
    keypoints_a: &[Keypoint],
    keypoints_b: &[Keypoint],
    params: &GeometryParams,
) -> Result<PairGeometry, GeometryError> {
    let reject = |e: GeometryError| GeometryError::PairRejected(Box::new(e));
    if matches.len() < 3 {
        return Err(reject(GeometryError::DegenerateInput("fewer than 3 matches")));
    }
    let (pa, pb) = matched_points(matches, keypoints_a, keypoints_b);
    let (model, mask) = estimate_similarity(&pa, &pb, &params.ransac).map_err(reject)?;
    let mut distances: Vec<f64> = pa
        .iter()
        .zip(&pb)
        .zip(&mask)
        .filter(|(_, &m)| m || params.beta_source == BetaSource::AllMatches)
        .map(|((p, q), _)| (q[0] - p[0]).hypot(q[1] - p[1]))
        .collect();
    Ok(PairGeometry {
        beta: statistic(&mut distances, params.beta_statistic),
        theta: model.angle.abs().to_degrees(),
        inlier_count: mask.iter().filter(|&&m| m).count(),
        model,
    })
}
