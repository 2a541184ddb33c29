//! Evaluation against simulation ground truth and the per-run curve files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::inference::LabelState;

pub const CSV_HEADER: &str = "step,annotations_total,annotations_per_image,top1,top5,finished_size,finished_precision,unfinished_fraction,mean_precision_targets";

/// Top-1 accuracy level reported in the summary.
pub const SUMMARY_THRESHOLDS: [f64; 1] = [0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub annotations_total: usize,
    pub annotations_per_image: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub finished_size: usize,
    pub finished_precision: Option<f64>,
    pub unfinished_fraction: f64,
    pub mean_precision_targets: Option<f64>,
}

fn truths(truth: &[Option<usize>]) -> Result<Vec<usize>, MetricsError> {
    truth
        .iter()
        .enumerate()
        .map(|(i, t)| t.ok_or(MetricsError::MissingTruth(i)))
        .collect()
}

/// Whether `truth` is among the `k` largest entries of `posterior`. Ties at
/// the boundary are broken towards lower class indices.
pub fn in_top_k(posterior: &[f64], truth: usize, k: usize) -> bool {
    let p = posterior[truth];
    let ahead = posterior
        .iter()
        .enumerate()
        .filter(|&(c, &q)| q > p || (q == p && c < truth))
        .count();
    ahead < k
}

pub fn top_k_accuracy(
    labels: &[LabelState],
    truth: &[Option<usize>],
    k: usize,
) -> Result<f64, MetricsError> {
    let t = truths(truth)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = labels
        .iter()
        .zip(&t)
        .filter(|(l, &y)| in_top_k(&l.posterior, y, k))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy over the finished items.
pub fn finished_precision(
    labels: &[LabelState],
    truth: &[Option<usize>],
    finished: &[bool],
) -> Result<f64, MetricsError> {
    let t = truths(truth)?;
    let mut n = 0usize;
    let mut hits = 0usize;
    for ((l, &y), &f) in labels.iter().zip(&t).zip(finished) {
        if f {
            n += 1;
            hits += usize::from(l.aggregated == y);
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyFinishedSet);
    }
    Ok(hits as f64 / n as f64)
}

/// Mean precision over the target classes `0..k` (the OOD class is
/// excluded). Classes that are never predicted are skipped.
pub fn mean_precision_targets(
    labels: &[LabelState],
    truth: &[Option<usize>],
    k: usize,
) -> Result<Option<f64>, MetricsError> {
    let t = truths(truth)?;
    let mut predicted = vec![0usize; k];
    let mut correct = vec![0usize; k];
    for (l, &y) in labels.iter().zip(&t) {
        if l.aggregated < k {
            predicted[l.aggregated] += 1;
            correct[l.aggregated] += usize::from(l.aggregated == y);
        }
    }
    let precisions: Vec<f64> = predicted
        .iter()
        .zip(&correct)
        .filter(|(p, _)| **p > 0)
        .map(|(&p, &c)| c as f64 / p as f64)
        .collect();
    if precisions.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        precisions.iter().sum::<f64>() / precisions.len() as f64,
    ))
}

/// Builds one metrics row. Truth-dependent fields are `None` when any item
/// lacks ground truth. `ood_k` is the number of target classes on OOD runs.
pub fn step_metrics(
    step: usize,
    annotations_total: usize,
    labels: &[LabelState],
    truth: &[Option<usize>],
    finished: &[bool],
    ood_k: Option<usize>,
) -> StepMetrics {
    let n = labels.len().max(1) as f64;
    let finished_size = finished.iter().filter(|f| **f).count();
    let top5_k = 5.min(labels.first().map_or(5, |l| l.posterior.len()));
    StepMetrics {
        step,
        annotations_total,
        annotations_per_image: annotations_total as f64 / n,
        top1: top_k_accuracy(labels, truth, 1).ok(),
        top5: top_k_accuracy(labels, truth, top5_k).ok(),
        finished_size,
        finished_precision: finished_precision(labels, truth, finished).ok(),
        unfinished_fraction: (labels.len() - finished_size) as f64 / n,
        mean_precision_targets: ood_k
            .and_then(|k| mean_precision_targets(labels, truth, k).ok().flatten()),
    }
}

pub fn write_csv<W: std::io::Write>(rows: &[StepMetrics], out: W) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<StepMetrics>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(MetricsError::Csv(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {}", header.join(",")),
        ))));
    }
    r.deserialize()
        .map(|row| row.map_err(MetricsError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_top1: Option<f64>,
    pub final_ann_per_image: f64,
    pub ann_per_image_at: BTreeMap<String, Option<f64>>,
}

/// Annotations per image at which top-1 first reaches `threshold`,
/// interpolated linearly between the two steps around the crossing.
pub fn ann_per_image_at(rows: &[StepMetrics], threshold: f64) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None;
    for r in rows {
        let Some(acc) = r.top1 else {
            prev = None;
            continue;
        };
        let x = r.annotations_per_image;
        if acc >= threshold {
            return Some(match prev {
                Some((px, pa)) if acc > pa => px + (threshold - pa) / (acc - pa) * (x - px),
                _ => x,
            });
        }
        prev = Some((x, acc));
    }
    None
}

pub fn summarize(rows: &[StepMetrics]) -> Result<Summary, MetricsError> {
    let last = rows.last().ok_or(MetricsError::NoRows)?;
    Ok(Summary {
        final_top1: last.top1,
        final_ann_per_image: last.annotations_per_image,
        ann_per_image_at: SUMMARY_THRESHOLDS
            .iter()
            .map(|&t| (format!("{t}"), ann_per_image_at(rows, t)))
            .collect(),
    })
}

/// Writes `metrics.csv` and `summary.json` into `out_dir`.
pub fn emit_curves(rows: &[StepMetrics], out_dir: &Path) -> Result<Summary, MetricsError> {
    let summary = summarize(rows)?;
    let f = fs::File::create(out_dir.join("metrics.csv"))?;
    write_csv(rows, std::io::BufWriter::new(f))?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(out_dir.join("summary.json"), text)?;
    Ok(summary)
}
