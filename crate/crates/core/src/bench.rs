//! Strategy comparison harness: one shared feature cache, one row per
//! strategy, optional image metrics from externally rendered views.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::image_io::{list_matching, ImageIoError, FrameSequence};
use crate::quality_metrics::{compare, load_metric_image, serialize_db, MetricError, MetricReport};
use crate::selection::{select_with, PairEvaluator, PairStats, Rejection, SelectionConfig, SelectionError, Strategy};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("strategy {strategy}: {source}")]
    Selection { strategy: Strategy, source: SelectionError },
    #[error("strategy {strategy}: {source}")]
    Metrics { strategy: Strategy, source: MetricError },
    #[error("strategy {strategy}: {message}")]
    Renders { strategy: Strategy, message: String },
    #[error(transparent)]
    Setup(#[from] SelectionError),
    #[error(transparent)]
    Listing(#[from] ImageIoError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub chosen: Option<(usize, usize)>,
    pub feasible: bool,
    /// Stats of the chosen pair.
    pub chosen_stats: Option<PairStats>,
    /// Every pair the strategy evaluated.
    pub pairs: Vec<PairStats>,
    pub metrics: Option<Vec<MetricReport>>,
    #[serde(serialize_with = "serialize_opt_db")]
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
}

fn serialize_opt_db<S: serde::Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => serialize_db(x, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub frames: String,
    pub frame_count: usize,
    pub config: SelectionConfig,
    pub rows: Vec<BenchRow>,
    /// Wall-clock only; not reproducible.
    pub timing: Vec<StageTime>,
}

impl BenchReport {
    /// The report with the `timing` key removed.
    pub fn deterministic_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("report is an object").remove("timing");
        v
    }
}

/// Render/reference file pairs for one strategy, matched by position after
/// natural sorting. Uses `<dir>/<strategy>/` when it exists.
pub fn render_pairs(dir: &Path, strategy: Strategy) -> Result<Vec<(PathBuf, PathBuf)>, String> {
    let sub = dir.join(strategy.name());
    let root = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let renders = list_matching(&root, "render_*.png").map_err(|e| e.to_string())?;
    let references = list_matching(&root, "reference_*.png").map_err(|e| e.to_string())?;
    if renders.is_empty() || renders.len() != references.len() {
        return Err(format!(
            "{} has {} render_*.png and {} reference_*.png files",
            root.display(),
            renders.len(),
            references.len()
        ));
    }
    let suffix = |p: &Path, prefix: &str| -> String {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        stem.strip_prefix(prefix).unwrap_or(stem).to_string()
    };
    for (r, q) in renders.iter().zip(&references) {
        if suffix(r, "render_") != suffix(q, "reference_") {
            return Err(format!("{} is not paired with {}", r.display(), q.display()));
        }
    }
    Ok(renders.into_iter().zip(references).collect())
}

fn view_metrics(dir: &Path, strategy: Strategy) -> Result<Vec<MetricReport>, BenchError> {
    let pairs = render_pairs(dir, strategy).map_err(|message| BenchError::Renders { strategy, message })?;
    pairs
        .iter()
        .map(|(r, q)| {
            let wrap = |source| BenchError::Metrics { strategy, source };
            let a = load_metric_image(r).map_err(wrap)?;
            let b = load_metric_image(q).map_err(wrap)?;
            let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            compare(&a, &b, [name(r), name(q)]).map_err(wrap)
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn bench(
    seq: &FrameSequence,
    config: &SelectionConfig,
    strategies: &[Strategy],
    renders: Option<&Path>,
) -> Result<BenchReport, BenchError> {
    let mut timing = Vec::new();
    let clock = Instant::now();
    let evaluator = PairEvaluator::new(seq, config)?;
    let all: Vec<usize> = (0..seq.len()).collect();
    evaluator.warm(&all);
    timing.push(StageTime { stage: "features".into(), seconds: clock.elapsed().as_secs_f64() });

    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let clock = Instant::now();
        let result = select_with(&evaluator, strategy).map_err(|source| BenchError::Selection { strategy, source })?;
        timing.push(StageTime { stage: format!("select:{strategy}"), seconds: clock.elapsed().as_secs_f64() });
        let chosen_stats = result
            .chosen
            .and_then(|(i, j)| result.stats.iter().find(|s| (s.i, s.j) == (i, j)).cloned());
        let feasible = chosen_stats.as_ref().is_some_and(|s| s.feasible);

        let metrics = match renders {
            Some(dir) => {
                let clock = Instant::now();
                let m = view_metrics(dir, strategy)?;
                timing.push(StageTime { stage: format!("metrics:{strategy}"), seconds: clock.elapsed().as_secs_f64() });
                Some(m)
            }
            None => None,
        };
        rows.push(BenchRow {
            strategy,
            chosen: result.chosen,
            feasible,
            chosen_stats,
            pairs: result.stats,
            mean_psnr: metrics.as_ref().and_then(|m| mean(m.iter().map(|r| r.psnr))),
            mean_ssim: metrics.as_ref().and_then(|m| mean(m.iter().map(|r| r.ssim))),
            metrics,
        });
    }
    Ok(BenchReport {
        tool: "pairsel",
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        frames: seq.source().to_string(),
        frame_count: seq.len(),
        config: config.clone(),
        rows,
        timing,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.digits$}"),
        None => "n/a".into(),
    }
}

fn rejection_name(r: Rejection) -> &'static str {
    match r {
        Rejection::None => "none",
        Rejection::TooFewMatches => "too_few_matches",
        Rejection::FlowBelowThreshold => "flow_below_threshold",
        Rejection::BaselineOutOfRange => "baseline_out_of_range",
        Rejection::AngleAboveThreshold => "angle_above_threshold",
        Rejection::GeometryFailed => "geometry_failed",
    }
}

/// Aligned plain-text summary, one line per row.
pub fn render_table(report: &BenchReport) -> String {
    let header = ["strategy", "pair", "feasible", "F", "beta", "theta", "score", "violations", "PSNR", "SSIM"];
    let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for row in &report.rows {
        let s = row.chosen_stats.as_ref();
        let violations = s
            .map(|s| s.violations.iter().map(|r| rejection_name(*r)).collect::<Vec<_>>().join(","))
            .filter(|v| !v.is_empty())
            .unwrap_or_else(|| if row.chosen.is_some() { "-".into() } else { "no feasible pair".into() });
        lines.push(vec![
            row.strategy.to_string(),
            row.chosen.map_or("none".into(), |(i, j)| format!("({i},{j})")),
            if row.feasible { "yes".into() } else { "no".into() },
            fmt_opt(s.and_then(|s| s.flow), 2),
            fmt_opt(s.and_then(|s| s.beta), 2),
            fmt_opt(s.and_then(|s| s.theta), 2),
            fmt_opt(s.and_then(|s| s.score), 3),
            violations,
            fmt_opt(row.mean_psnr, 3),
            fmt_opt(row.mean_ssim, 4),
        ]);
    }
    let widths: Vec<usize> = (0..header.len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
