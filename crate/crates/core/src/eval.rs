//! Classification metrics, depth-stratified reports, multi-run aggregation
//! and the per-stage state export for case studies.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Prediction;
use crate::model::Model;
use crate::tree::{depth_bucket, DepthBucket, PropagationTree};

/// Scores at or above this count as a rumor prediction.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no items to score")]
    Empty,
    #[error("need at least two runs to aggregate, got {0}")]
    TooFewRuns(usize),
    #[error("runs disagree on report rows: {0}")]
    MismatchedRows(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("figure: {0}")]
    Figure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    /// Absent when only one class occurs.
    pub auc: Option<f64>,
    /// F1 of the rumor class; 0 when there are neither rumor labels nor
    /// rumor predictions.
    pub f1: f64,
}

/// Mann-Whitney AUC with ties counted one half, via average ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

pub fn f1_score(preds: &[u8], labels: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= THRESHOLD)).collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(Metrics {
        acc: correct as f64 / labels.len() as f64,
        auc: roc_auc(scores, labels),
        f1: f1_score(&preds, labels),
    })
}

/// Report stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    All,
    Depth(DepthBucket),
    /// Lone source posts (depth 0).
    Degenerate,
}

impl Stratum {
    pub const ORDER: [Stratum; 5] = [
        Stratum::All,
        Stratum::Depth(DepthBucket::D1),
        Stratum::Depth(DepthBucket::D2to5),
        Stratum::Depth(DepthBucket::Dgt5),
        Stratum::Degenerate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Depth(b) => b.name(),
            Stratum::Degenerate => "degenerate",
        }
    }

    pub fn of_depth(depth: usize) -> Stratum {
        depth_bucket(depth).map_or(Stratum::Degenerate, Stratum::Depth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub split: String,
    pub bucket: String,
    /// Metrics are absent for an empty stratum.
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

/// Share of trees per stratum (excluding `All`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketShare {
    pub bucket: String,
    pub count: usize,
    pub fraction: f64,
}

impl BucketShare {
    pub fn percent_2dp(&self) -> f64 {
        (self.fraction * 10_000.0).round() / 100.0
    }
}

pub fn bucket_shares(depths: &[usize]) -> Vec<BucketShare> {
    let total = depths.len();
    Stratum::ORDER[1..]
        .iter()
        .map(|&s| {
            let count = depths.iter().filter(|&&d| Stratum::of_depth(d) == s).count();
            BucketShare {
                bucket: s.name().to_string(),
                count,
                fraction: if total == 0 { 0.0 } else { count as f64 / total as f64 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub rows: Vec<MetricsRow>,
    pub shares: Vec<BucketShare>,
}

/// One row for the whole split and one per depth stratum.
pub fn depth_stratified(
    trees: &[&PropagationTree],
    predictions: &[Prediction],
    run_id: &str,
    split: &str,
) -> Result<StratifiedReport, EvalError> {
    if trees.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            scores: predictions.len(),
            labels: trees.len(),
        });
    }
    let strata: Vec<Stratum> = trees.iter().map(|t| Stratum::of_depth(t.depth())).collect();
    let mut rows = Vec::new();
    for s in Stratum::ORDER {
        let members: Vec<usize> = (0..trees.len())
            .filter(|&i| s == Stratum::All || strata[i] == s)
            .collect();
        let scores: Vec<f64> = members.iter().map(|&i| predictions[i].rumor_probability()).collect();
        let labels: Vec<u8> = members.iter().map(|&i| trees[i].label()).collect();
        let m = (!members.is_empty()).then(|| compute_metrics(&scores, &labels)).transpose()?;
        rows.push(MetricsRow {
            run_id: run_id.to_string(),
            split: split.to_string(),
            bucket: s.name().to_string(),
            acc: m.map(|m| m.acc),
            auc: m.and_then(|m| m.auc),
            f1: m.map(|m| m.f1),
            support: members.len(),
        });
    }
    let depths: Vec<usize> = trees.iter().map(|t| t.depth()).collect();
    Ok(StratifiedReport {
        rows,
        shares: bucket_shares(&depths),
    })
}

pub const METRICS_HEADER: &str = "run_id,split,bucket,acc,auc,f1,support";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            csv_field(&r.run_id),
            csv_field(&r.split),
            csv_field(&r.bucket),
            opt(r.acc),
            opt(r.auc),
            opt(r.f1),
            r.support
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (denominator k - 1).
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub split: String,
    pub bucket: String,
    pub runs: usize,
    /// Present only when every run reports the metric.
    pub acc: Option<MeanStd>,
    pub auc: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub support: usize,
}

/// Mean and sample standard deviation across runs, row by row.
pub fn aggregate_runs(runs: &[Vec<MetricsRow>]) -> Result<Vec<AggregateRow>, EvalError> {
    if runs.len() < 2 {
        return Err(EvalError::TooFewRuns(runs.len()));
    }
    let first = &runs[0];
    for (k, run) in runs.iter().enumerate().skip(1) {
        let same = run.len() == first.len()
            && run
                .iter()
                .zip(first)
                .all(|(a, b)| a.split == b.split && a.bucket == b.bucket);
        if !same {
            return Err(EvalError::MismatchedRows(format!("run {k} differs from run 0")));
        }
    }
    let collect = |i: usize, f: fn(&MetricsRow) -> Option<f64>| -> Option<MeanStd> {
        let vals: Option<Vec<f64>> = runs.iter().map(|r| f(&r[i])).collect();
        vals.map(|v| mean_std(&v))
    };
    Ok((0..first.len())
        .map(|i| AggregateRow {
            split: first[i].split.clone(),
            bucket: first[i].bucket.clone(),
            runs: runs.len(),
            acc: collect(i, |r| r.acc),
            auc: collect(i, |r| r.auc),
            f1: collect(i, |r| r.f1),
            support: first[i].support,
        })
        .collect())
}

pub fn write_aggregate_csv<W: Write>(mut w: W, rows: &[AggregateRow]) -> std::io::Result<()> {
    writeln!(w, "split,bucket,runs,acc_mean,acc_std,auc_mean,auc_std,f1_mean,f1_std,support")?;
    let pair = |m: Option<MeanStd>| (opt(m.map(|x| x.mean)), opt(m.map(|x| x.std)));
    for r in rows {
        let (am, asd) = pair(r.acc);
        let (um, usd) = pair(r.auc);
        let (fm, fsd) = pair(r.f1);
        writeln!(
            w,
            "{},{},{},{am},{asd},{um},{usd},{fm},{fsd},{}",
            csv_field(&r.split),
            csv_field(&r.bucket),
            r.runs,
            r.support
        )?;
    }
    w.flush()
}

/// Per-stage `(unknown, support, denial)` distributions predicted for a tree.
pub fn case_study_table(model: &Model, tree: &PropagationTree) -> Vec<[f64; 3]> {
    crate::encoder::encode(tree, &model.params.encoder, model.config.dynamics).distributions
}

pub fn write_stage_table<W: Write>(mut w: W, stages: &[[f64; 3]]) -> std::io::Result<()> {
    writeln!(w, "stage,unknown,support,denial")?;
    for (t, p) in stages.iter().enumerate() {
        writeln!(w, "{},{:.6},{:.6},{:.6}", t + 1, p[0], p[1], p[2])?;
    }
    w.flush()
}

/// Stacked-area figure of the stage distributions (Denial at the bottom,
/// Support above it, Unknown on top), written as SVG.
pub fn render_stage_figure(path: &Path, title: &str, stages: &[[f64; 3]]) -> Result<(), EvalError> {
    use plotters::prelude::*;
    let fig = |e: &dyn std::fmt::Display| EvalError::Figure(e.to_string());
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fig(&e))?;
    // A single stage is drawn as a flat band from 0.5 to 1.5.
    let points: Vec<(f64, [f64; 3])> = if stages.len() == 1 {
        vec![(0.5, stages[0]), (1.5, stages[0])]
    } else {
        stages.iter().enumerate().map(|(t, p)| ((t + 1) as f64, *p)).collect()
    };
    let x_max = points.last().map_or(1.0, |p| p.0);
    let x_min = points.first().map_or(0.0, |p| p.0);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(40)
        .build_cartesian_2d(x_min..x_max, 0.0..1.0)
        .map_err(|e| fig(&e))?;
    chart
        .configure_mesh()
        .x_desc("stage")
        .y_desc("share")
        .draw()
        .map_err(|e| fig(&e))?;
    type Layer = (&'static str, RGBColor, fn(&[f64; 3]) -> f64);
    let layers: [Layer; 3] = [
        ("unknown", RGBColor(189, 189, 189), |p| p[0] + p[1] + p[2]),
        ("support", RGBColor(49, 130, 189), |p| p[1] + p[2]),
        ("denial", RGBColor(222, 45, 38), |p| p[2]),
    ];
    for (name, color, top) in layers {
        chart
            .draw_series(AreaSeries::new(
                points.iter().map(|(x, p)| (*x, top(p))),
                0.0,
                color.mix(0.85),
            ))
            .map_err(|e| fig(&e))?
            .label(name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| fig(&e))?;
    root.present().map_err(|e| fig(&e))?;
    Ok(())
}

/// Areas under the Support and Denial curves (trapezoidal, unit stage spacing).
pub fn state_areas(stages: &[[f64; 3]]) -> (f64, f64) {
    if stages.len() == 1 {
        return (stages[0][1], stages[0][2]);
    }
    let area = |k: usize| {
        stages
            .windows(2)
            .map(|w| 0.5 * (w[0][k] + w[1][k]))
            .sum::<f64>()
    };
    (area(1), area(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{build_tree, RawNode};
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[0.9, 0.8, 0.3], &[1, 1, 0]).unwrap();
        assert_eq!((m.acc, m.auc, m.f1), (1.0, Some(1.0), 1.0));
        assert_eq!(roc_auc(&[0.9, 0.6, 0.2], &[0, 1, 0]), Some(0.5));
        assert_eq!(f1_score(&[1, 1, 0, 0], &[1, 0, 1, 0]), 0.5);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]), Some(0.5));
        assert_eq!(compute_metrics(&[0.2], &[0]).unwrap().auc, None);
        assert!(matches!(compute_metrics(&[0.2], &[0, 1]), Err(EvalError::LengthMismatch { .. })));
    }

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_and_is_rank_invariant(
            items in proptest::collection::vec((0u8..10, 0u8..=1), 2..40)
        ) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64 / 10.0).collect();
            let labels: Vec<u8> = items.iter().map(|(_, l)| *l).collect();
            if let Some(a) = roc_auc(&scores, &labels) {
                prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
                let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
                prop_assert!((roc_auc(&warped, &labels).unwrap() - a).abs() < 1e-12);
            }
        }
    }

    fn tree_of_depth(depth: usize, label: u8) -> PropagationTree {
        let nodes = (0..=depth as i64)
            .map(|i| RawNode::new(i, (i > 0).then(|| i - 1), "x"))
            .collect();
        build_tree(format!("d{depth}"), label, nodes).unwrap()
    }

    fn pred(p: f64) -> Prediction {
        Prediction {
            probs: [1.0 - p, p],
            logits: [0.0, 0.0],
        }
    }

    #[test]
    fn stratified_supports() {
        let depths = [1, 1, 1, 1, 1, 3, 3, 3, 7, 7];
        let trees: Vec<PropagationTree> = depths.iter().enumerate().map(|(i, &d)| tree_of_depth(d, (i % 2) as u8)).collect();
        let refs: Vec<&PropagationTree> = trees.iter().collect();
        let preds: Vec<Prediction> = (0..10).map(|i| pred(if i % 3 == 0 { 0.7 } else { 0.2 })).collect();
        let report = depth_stratified(&refs, &preds, "r", "test").unwrap();
        let supports: Vec<usize> = report.rows.iter().map(|r| r.support).collect();
        assert_eq!(supports, vec![10, 5, 3, 2, 0]);
        let scores: Vec<f64> = preds.iter().map(|p| p.probs[1]).collect();
        let labels: Vec<u8> = trees.iter().map(|t| t.label()).collect();
        let all = compute_metrics(&scores, &labels).unwrap();
        assert_eq!(report.rows[0].acc, Some(all.acc));
        assert_eq!(report.rows[0].auc, all.auc);
        assert_eq!(report.rows[4].acc, None);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &report.rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("run_id,split,bucket,acc,auc,f1,support\n"));
        assert!(text.contains("r,test,degenerate,,,,0"));
    }

    #[test]
    fn degenerate_trees_have_their_own_bucket() {
        let root = build_tree("r", 0, vec![RawNode::new(0, None, "x")]).unwrap();
        let report = depth_stratified(&[&root], &[pred(0.1)], "r", "test").unwrap();
        assert_eq!(report.rows[4].support, 1);
        assert_eq!(report.rows[1].support, 0);
    }

    #[test]
    fn table_shares_match_weibo_style_distribution() {
        let mut depths = vec![1; 3239];
        depths.extend(vec![3; 2517]);
        depths.extend(vec![9; 281]);
        let shares = bucket_shares(&depths);
        let pct: Vec<f64> = shares.iter().map(BucketShare::percent_2dp).collect();
        assert_eq!(pct, vec![53.65, 41.69, 4.65, 0.0]);
    }

    fn row(bucket: &str, acc: f64) -> MetricsRow {
        MetricsRow {
            run_id: "x".into(),
            split: "test".into(),
            bucket: bucket.into(),
            acc: Some(acc),
            auc: None,
            f1: Some(acc),
            support: 3,
        }
    }

    #[test]
    fn aggregation() {
        let agg = aggregate_runs(&[vec![row("all", 0.8)], vec![row("all", 0.9)]]).unwrap();
        let acc = agg[0].acc.unwrap();
        assert!((acc.mean - 0.85).abs() < 1e-12 && (acc.std - 0.0707).abs() < 1e-4);
        assert_eq!(agg[0].auc, None);
        let same = aggregate_runs(&vec![vec![row("all", 0.7)]; 5]).unwrap();
        assert_eq!(same[0].acc.unwrap().std, 0.0);
        assert!(aggregate_runs(&[vec![row("all", 0.8)]]).is_err());
        assert!(aggregate_runs(&[vec![row("all", 0.8)], vec![row("D1", 0.8)]]).is_err());
    }

    #[test]
    fn stage_figure_and_table() {
        let dir = tempfile::tempdir().unwrap();
        let stages = vec![[0.6, 0.3, 0.1], [0.2, 0.3, 0.5], [0.0, 0.4, 0.6]];
        let path = dir.path().join("f.svg");
        render_stage_figure(&path, "event", &stages).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("denial"));
        render_stage_figure(&dir.path().join("one.svg"), "one", &stages[..1]).unwrap();
        let mut buf = Vec::new();
        write_stage_table(&mut buf, &stages[..1]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
        let (s, d) = state_areas(&stages);
        assert!((s - 0.65).abs() < 1e-12 && (d - 0.85).abs() < 1e-12);
    }
}
