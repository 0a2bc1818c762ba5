//! Pair enumeration, constraint gates, scoring and the baseline strategies.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract, match_descriptors, FeatureParams, FrameFeatures, MatchParams, MatchSet};
use crate::geometry2d::{pair_geometry, GeometryParams};
use crate::image_io::FrameSequence;
use crate::optical_flow::{average_motion, track_points_pyramids, FlowParams, FlowPyramid};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("need at least two frames, got {0}")]
    EmptySequence(usize),
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("pair ({i}, {j}) is not a valid ordered pair of {n} frames")]
    BadPair { i: usize, j: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ours,
    Random,
    FirstLast,
    Quartiles,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Ours, Strategy::Random, Strategy::FirstLast, Strategy::Quartiles];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ours => "ours",
            Strategy::Random => "random",
            Strategy::FirstLast => "first_last",
            Strategy::Quartiles => "quartiles",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "ours" => Ok(Strategy::Ours),
            "random" => Ok(Strategy::Random),
            "first_last" => Ok(Strategy::FirstLast),
            "quartiles" => Ok(Strategy::Quartiles),
            _ => Err(format!("unknown strategy `{s}` (ours, random, first-last, quartiles)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Minimum mean flow magnitude, px.
    pub t_flow: f64,
    /// Minimum baseline, px.
    pub t_baseline: f64,
    /// Maximum baseline is `alpha * t_baseline`.
    pub alpha: f64,
    /// Maximum angular difference, degrees.
    pub t_angle: f64,
    pub strategy: Strategy,
    /// Drives the random strategy and RANSAC sampling.
    pub seed: u64,
    pub stride: usize,
    pub beta_normalized: bool,
    /// Fewer tracked points than this makes the flow estimate unreliable.
    pub min_tracked: usize,
    pub features: FeatureParams,
    pub matching: MatchParams,
    pub flow: FlowParams,
    pub geometry: GeometryParams,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            t_flow: 5.0,
            t_baseline: 10.0,
            alpha: 5.0,
            t_angle: 15.0,
            strategy: Strategy::Ours,
            seed: 0,
            stride: 1,
            beta_normalized: false,
            min_tracked: 20,
            features: FeatureParams::default(),
            matching: MatchParams::default(),
            flow: FlowParams::default(),
            geometry: GeometryParams::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let positive = [("t_flow", self.t_flow), ("t_baseline", self.t_baseline), ("t_angle", self.t_angle)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SelectionError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(SelectionError::InvalidConfig(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if self.stride < 1 {
            return Err(SelectionError::InvalidConfig("stride must be >= 1".into()));
        }
        if self.flow.window < 3 || self.flow.window % 2 == 0 {
            return Err(SelectionError::InvalidConfig(format!("flow window must be odd and >= 3, got {}", self.flow.window)));
        }
        Ok(())
    }

    pub fn max_baseline(&self) -> f64 {
        self.alpha * self.t_baseline
    }
}

/// `beta + (1 - theta / t_angle)`, or with beta divided by the maximum
/// baseline when `beta_normalized` is set.
pub fn score_pair(beta: f64, theta: f64, config: &SelectionConfig) -> f64 {
    let beta_term = if config.beta_normalized {
        beta / config.max_baseline()
    } else {
        beta
    };
    beta_term + (1.0 - theta / config.t_angle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    None,
    TooFewMatches,
    FlowBelowThreshold,
    BaselineOutOfRange,
    AngleAboveThreshold,
    GeometryFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairStats {
    pub i: usize,
    pub j: usize,
    /// Mean flow magnitude; absent when an earlier gate already failed.
    #[serde(rename = "F")]
    pub flow: Option<f64>,
    pub beta: Option<f64>,
    pub theta: Option<f64>,
    pub matches: usize,
    pub score: Option<f64>,
    pub feasible: bool,
    /// First failed gate in match, geometry, baseline, angle, flow order.
    pub reason: Rejection,
    /// Every failed gate; only complete for fully evaluated pairs.
    pub violations: Vec<Rejection>,
    pub inliers: Option<usize>,
    pub tracked: Option<usize>,
}

impl PairStats {
    fn empty(i: usize, j: usize) -> Self {
        Self {
            i,
            j,
            flow: None,
            beta: None,
            theta: None,
            matches: 0,
            score: None,
            feasible: false,
            reason: Rejection::None,
            violations: Vec::new(),
            inliers: None,
            tracked: None,
        }
    }
}

/// Per-frame features and pyramids, computed on first use and shared by
/// every pair and strategy.
pub struct PairEvaluator<'a> {
    seq: &'a FrameSequence,
    config: SelectionConfig,
    features: Vec<OnceLock<FrameFeatures>>,
    pyramids: Vec<OnceLock<FlowPyramid>>,
}

impl<'a> PairEvaluator<'a> {
    pub fn new(seq: &'a FrameSequence, config: &SelectionConfig) -> Result<Self, SelectionError> {
        config.validate()?;
        if seq.len() < 2 {
            return Err(SelectionError::EmptySequence(seq.len()));
        }
        Ok(Self {
            seq,
            config: config.clone(),
            features: (0..seq.len()).map(|_| OnceLock::new()).collect(),
            pyramids: (0..seq.len()).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn config(&self) -> &SelectionConfig {
        &self.config
    }

    pub fn sequence(&self) -> &FrameSequence {
        self.seq
    }

    pub fn features(&self, k: usize) -> &FrameFeatures {
        self.features[k].get_or_init(|| extract(&self.seq.frames()[k], &self.config.features))
    }

    fn pyramid(&self, k: usize) -> &FlowPyramid {
        self.pyramids[k].get_or_init(|| {
            FlowPyramid::new(&self.seq.frames()[k], self.config.flow.levels).expect("level count is clamped to the frame size")
        })
    }

    /// Fills the caches for `frames` in parallel.
    pub fn warm(&self, frames: &[usize]) {
        frames.par_iter().for_each(|&k| {
            self.features(k);
            self.pyramid(k);
        });
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<(), SelectionError> {
        if i < j && j < self.seq.len() {
            Ok(())
        } else {
            Err(SelectionError::BadPair { i, j, n: self.seq.len() })
        }
    }

    pub fn match_set(&self, i: usize, j: usize) -> MatchSet {
        let m = match_descriptors(&self.features(i).descriptors, &self.features(j).descriptors, &self.config.matching);
        MatchSet::new(i, j, m).expect("matcher output is one-to-one")
    }

    fn geometry_params(&self) -> GeometryParams {
        let mut g = self.config.geometry;
        g.ransac.seed = self.config.seed;
        g
    }

    fn flow(&self, i: usize, j: usize) -> (f64, usize, bool) {
        let points: Vec<[f64; 2]> = self.features(i).keypoints.iter().map(|k| [k.x, k.y]).collect();
        let flows = track_points_pyramids(self.pyramid(i), self.pyramid(j), &points, &self.config.flow)
            .expect("pyramids of one sequence share a size");
        let stats = average_motion(&flows, self.config.min_tracked);
        (stats.mean_magnitude, stats.tracked_count, stats.reliable)
    }

    /// Runs the gates in order and stops at the first failure.
    pub fn evaluate_gated(&self, i: usize, j: usize) -> Result<PairStats, SelectionError> {
        self.evaluate(i, j, true)
    }

    /// Computes every quantity and lists every violated gate.
    pub fn evaluate_full(&self, i: usize, j: usize) -> Result<PairStats, SelectionError> {
        self.evaluate(i, j, false)
    }

    fn evaluate(&self, i: usize, j: usize, short_circuit: bool) -> Result<PairStats, SelectionError> {
        self.check_pair(i, j)?;
        let cfg = &self.config;
        let mut stats = PairStats::empty(i, j);
        let matches = self.match_set(i, j);
        stats.matches = matches.len();
        let fail = |stats: &mut PairStats, r: Rejection| stats.violations.push(r);

        if matches.len() < 3 {
            fail(&mut stats, Rejection::TooFewMatches);
        } else {
            match pair_geometry(&matches, &self.features(i).keypoints, &self.features(j).keypoints, &self.geometry_params()) {
                Err(_) => fail(&mut stats, Rejection::GeometryFailed),
                Ok(g) => {
                    stats.beta = Some(g.beta);
                    stats.theta = Some(g.theta);
                    stats.inliers = Some(g.inlier_count);
                    if !(g.beta >= cfg.t_baseline && g.beta <= cfg.max_baseline()) {
                        fail(&mut stats, Rejection::BaselineOutOfRange);
                    }
                    if !(g.theta <= cfg.t_angle) {
                        fail(&mut stats, Rejection::AngleAboveThreshold);
                    }
                }
            }
        }
        if !(short_circuit && !stats.violations.is_empty()) {
            let (f, tracked, reliable) = self.flow(i, j);
            stats.flow = Some(f);
            stats.tracked = Some(tracked);
            if !(reliable && f >= cfg.t_flow) {
                fail(&mut stats, Rejection::FlowBelowThreshold);
            }
        }
        if short_circuit {
            stats.violations.truncate(1);
        }
        stats.reason = stats.violations.first().copied().unwrap_or(Rejection::None);
        stats.feasible = stats.violations.is_empty();
        if stats.feasible {
            stats.score = Some(score_pair(stats.beta.unwrap(), stats.theta.unwrap(), cfg));
        }
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub chosen: Option<(usize, usize)>,
    pub strategy: Strategy,
    pub stats: Vec<PairStats>,
}

/// All `(i, j)`, `i < j`, with both indices on the stride grid.
pub fn candidate_pairs(n: usize, stride: usize) -> Vec<(usize, usize)> {
    let grid: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
    let mut out = Vec::new();
    for (a, &i) in grid.iter().enumerate() {
        for &j in &grid[a + 1..] {
            out.push((i, j));
        }
    }
    out
}

/// Highest score among feasible pairs; earlier pairs win ties.
pub fn best_pair(stats: &[PairStats]) -> Option<(usize, usize)> {
    let mut best: Option<(f64, (usize, usize))> = None;
    for s in stats {
        if let (true, Some(score)) = (s.feasible, s.score) {
            let better = match best {
                None => true,
                Some((bs, bp)) => score > bs || (score == bs && (s.i, s.j) < bp),
            };
            if better {
                best = Some((score, (s.i, s.j)));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Q1/Q3 frame indices; for N < 5 the upper index is bumped past the lower.
pub fn quartile_pair(n: usize) -> (usize, usize) {
    let lo = (n - 1) / 4;
    (lo, (3 * (n - 1) / 4).max(lo + 1))
}

/// Uniform over all `n(n-1)/2` ordered pairs.
pub fn random_pair(n: usize, seed: u64) -> (usize, usize) {
    let total = n * (n - 1) / 2;
    let mut k = ChaCha8Rng::seed_from_u64(seed).random_range(0..total);
    for i in 0..n {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    unreachable!("index below the pair count")
}

pub fn select_with(evaluator: &PairEvaluator<'_>, strategy: Strategy) -> Result<SelectionResult, SelectionError> {
    let n = evaluator.sequence().len();
    let cfg = evaluator.config();
    let fixed = match strategy {
        Strategy::Ours => None,
        Strategy::Random => Some(random_pair(n, cfg.seed)),
        Strategy::FirstLast => Some((0, n - 1)),
        Strategy::Quartiles => Some(quartile_pair(n)),
    };
    if let Some((i, j)) = fixed {
        let stats = evaluator.evaluate_full(i, j)?;
        return Ok(SelectionResult { chosen: Some((i, j)), strategy, stats: vec![stats] });
    }
    let grid: Vec<usize> = (0..n).step_by(cfg.stride).collect();
    evaluator.warm(&grid);
    let pairs = candidate_pairs(n, cfg.stride);
    let stats = pairs
        .par_iter()
        .map(|&(i, j)| evaluator.evaluate_gated(i, j))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SelectionResult { chosen: best_pair(&stats), strategy, stats })
}

pub fn select(seq: &FrameSequence, config: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    let evaluator = PairEvaluator::new(seq, config)?;
    select_with(&evaluator, config.strategy)
}

/// `{tool, version, seed, chosen, strategy, config, pairs}`.
pub fn result_json(result: &SelectionResult, config: &SelectionConfig) -> serde_json::Value {
    serde_json::json!({
        "tool": "pairsel",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "chosen": result.chosen.map(|(i, j)| [i, j]),
        "strategy": result.strategy,
        "config": config,
        "pairs": result.stats,
    })
}
