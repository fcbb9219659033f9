//! Detection mAP over temporal IoU thresholds and an attention AUC
//! diagnostic.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Units of interval boundaries.
///
/// Segment intervals are inclusive index ranges and their IoU counts
/// segments; second intervals are continuous `[start, end)` spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalUnit {
    Segments,
    Seconds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub video_id: String,
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// IoU thresholds reported by default: 0.1 to 0.7 in steps of 0.1.
pub const DEFAULT_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
/// Thresholds averaged into the summary column.
pub const AVERAGE_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

pub fn interval_iou(a: (f64, f64), b: (f64, f64), unit: IntervalUnit) -> f64 {
    let pad = match unit {
        IntervalUnit::Segments => 1.0,
        IntervalUnit::Seconds => 0.0,
    };
    let inter = (a.1.min(b.1) - a.0.max(b.0) + pad).max(0.0);
    let union = (a.1 - a.0 + pad) + (b.1 - b.0 + pad) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
        .then(a.video_id.cmp(&b.video_id))
}

/// Average precision for one class with all-point interpolation over the
/// precision envelope. Returns `None` when the class has no ground truth.
///
/// Detections are ranked by score (ties: earlier start, shorter, then video
/// id); each is matched to the highest-IoU unmatched ground-truth instance in
/// its video, and counts as a true positive when that IoU reaches
/// `iou_threshold`.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruthInstance],
    class_id: usize,
    iou_threshold: f64,
    unit: IntervalUnit,
) -> Option<f64> {
    let mut gt_by_video: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for g in ground_truth.iter().filter(|g| g.class_id == class_id) {
        gt_by_video
            .entry(g.video_id.as_str())
            .or_default()
            .push((g.start, g.end));
    }
    let n_gt: usize = gt_by_video.values().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class_id == class_id).collect();
    dets.sort_by(|a, b| detection_order(a, b));

    let mut matched: BTreeMap<&str, Vec<bool>> = gt_by_video
        .iter()
        .map(|(v, g)| (*v, vec![false; g.len()]))
        .collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (rank, d) in dets.iter().enumerate() {
        if let Some(gts) = gt_by_video.get(d.video_id.as_str()) {
            let used = matched.get_mut(d.video_id.as_str()).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (j, &g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let iou = interval_iou((d.start, d.end), g, unit);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }

    // Precision envelope, then sum over recall increments.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

/// mAP per IoU threshold plus the summary average.
#[derive(Debug, Clone, PartialEq)]
pub struct MapTable {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    /// Mean of the entries at 0.1–0.5 when all are present, else the mean
    /// over every reported threshold.
    pub average: f64,
    pub classes: Vec<usize>,
}

impl MapTable {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .map(|i| self.map[i])
    }
}

pub fn mean_ap(
    detections: &[Detection],
    ground_truth: &[GroundTruthInstance],
    thresholds: &[f64],
    unit: IntervalUnit,
) -> Result<MapTable> {
    if ground_truth.is_empty() {
        return Err(Error::invalid("mean_ap", "no ground truth instances"));
    }
    if thresholds.is_empty() {
        return Err(Error::invalid("mean_ap", "no IoU thresholds"));
    }
    let classes: BTreeSet<usize> = ground_truth.iter().map(|g| g.class_id).collect();
    for c in detections.iter().map(|d| d.class_id).collect::<BTreeSet<_>>() {
        if !classes.contains(&c) {
            log::warn!("class {c} has detections but no ground truth; excluded from mAP");
        }
    }
    let map: Vec<f64> = thresholds
        .iter()
        .map(|&thr| {
            let sum: f64 = classes
                .iter()
                .map(|&c| average_precision(detections, ground_truth, c, thr, unit).unwrap_or(0.0))
                .sum();
            sum / classes.len() as f64
        })
        .collect();
    let summary: Vec<f64> = AVERAGE_THRESHOLDS
        .iter()
        .filter_map(|&t| {
            thresholds
                .iter()
                .position(|x| (x - t).abs() < 1e-9)
                .map(|i| map[i])
        })
        .collect();
    let average = if summary.len() == AVERAGE_THRESHOLDS.len() {
        summary.iter().sum::<f64>() / summary.len() as f64
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    Ok(MapTable {
        thresholds: thresholds.to_vec(),
        map,
        average,
        classes: classes.into_iter().collect(),
    })
}

/// Tab-separated mAP table, one row per named run.
pub fn write_report(rows: &[(String, MapTable)], mut out: impl Write) -> std::io::Result<()> {
    let Some((_, first)) = rows.first() else {
        return Ok(());
    };
    write!(out, "run")?;
    for t in &first.thresholds {
        write!(out, "\tmAP@{t}")?;
    }
    writeln!(out, "\tAVG")?;
    for (name, table) in rows {
        write!(out, "{name}")?;
        for v in &table.map {
            write!(out, "\t{v:.4}")?;
        }
        writeln!(out, "\t{:.4}", table.average)?;
    }
    Ok(())
}

/// ROC AUC of `scores` as a detector of `labels == true`, ties counted as
/// half. `None` when only one label value is present.
pub fn attention_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks of the positives (Mann–Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}
