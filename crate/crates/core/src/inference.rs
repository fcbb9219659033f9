//! Localization from trained traces: class thresholding, attention-run
//! proposals, fused confidence scoring and class-wise NMS.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::numerics::{softmax_rows, Matrix};

/// A scored temporal detection over inclusive segment indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl Proposal {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// How the attention threshold for proposal generation is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionThreshold {
    Fixed(f64),
    Rule(ThresholdRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    /// Mean of the video's foreground attention.
    Mean,
}

impl ActionThreshold {
    pub fn resolve(&self, a: &[f64]) -> f64 {
        match self {
            ActionThreshold::Fixed(v) => *v,
            ActionThreshold::Rule(ThresholdRule::Mean) => {
                a.iter().sum::<f64>() / a.len().max(1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub eta_cls: f64,
    pub eta_act: ActionThreshold,
    pub nms_iou: f64,
    /// Weight of the first (RGB) stream when two streams are fused.
    pub theta: f64,
    /// Duration of one segment in seconds.
    pub segment_seconds: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            eta_cls: 0.1,
            eta_act: ActionThreshold::Rule(ThresholdRule::Mean),
            nms_iou: 0.3,
            theta: 0.3,
            // 16-frame segments at 25 fps.
            segment_seconds: 0.64,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid("inference config", format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("eta_cls", self.eta_cls)?;
        unit("nms_iou", self.nms_iou)?;
        unit("theta", self.theta)?;
        if let ActionThreshold::Fixed(v) = self.eta_act {
            unit("eta_act", v)?;
        }
        if !(self.segment_seconds > 0.0 && self.segment_seconds.is_finite()) {
            return Err(Error::invalid("inference config", "segment_seconds must be > 0"));
        }
        Ok(())
    }
}

/// Per-segment class probabilities: row softmax of the segment logits.
pub fn class_activation_sequence(trace: &ForwardTrace) -> Matrix {
    softmax_rows(&trace.c_seg)
}

/// Classes whose video-level score reaches `eta_cls`.
pub fn select_classes(y_hat: &[f64], eta_cls: f64) -> Vec<usize> {
    y_hat
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= eta_cls)
        .map(|(c, _)| c)
        .collect()
}

/// Maximal runs of segments with attention at or above `eta_act`, as
/// inclusive `(start, end)` pairs in temporal order.
pub fn generate_proposals(a: &[f64], eta_act: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &v) in a.iter().enumerate() {
        match (v >= eta_act, open) {
            (true, None) => open = Some(t),
            (false, Some(s)) => {
                runs.push((s, t - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push((s, a.len() - 1));
    }
    runs
}

/// Foreground attention and class activation sequence of one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamView<'a> {
    pub attention: &'a [f64],
    pub cas: &'a Matrix,
}

/// Mean over the proposal's segments of the attention-weighted class score,
/// fused across streams with weight `theta` on the first stream. A single
/// stream gets weight one.
pub fn score_proposal(
    class_id: usize,
    start: usize,
    end: usize,
    streams: &[StreamView],
    theta: f64,
) -> Result<f64> {
    let weights: &[f64] = match streams.len() {
        1 => &[1.0],
        2 => &[theta, 1.0 - theta],
        n => {
            return Err(Error::invalid(
                "score_proposal",
                format!("expected one or two streams, got {n}"),
            ))
        }
    };
    let l = streams[0].attention.len();
    for s in streams {
        if s.attention.len() != l || s.cas.rows() != l {
            return Err(Error::shape(
                "score_proposal",
                format!("stream lengths differ: {} vs {}", l, s.attention.len()),
            ));
        }
        if class_id >= s.cas.cols() {
            return Err(Error::invalid("score_proposal", format!("class {class_id} out of range")));
        }
    }
    if start > end || end >= l {
        return Err(Error::invalid(
            "score_proposal",
            format!("interval ({start}, {end}) invalid for {l} segments"),
        ));
    }
    let mut sum = 0.0;
    for t in start..=end {
        for (s, w) in streams.iter().zip(weights) {
            sum += w * s.attention[t] * s.cas[(t, class_id)];
        }
    }
    Ok(sum / (end - start + 1) as f64)
}

/// IoU of two inclusive segment intervals, counting segments.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

/// Ranking order shared by NMS and evaluation: score descending, then
/// earlier start, then shorter.
pub fn rank_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

/// Greedy non-maximum suppression over proposals of a single class.
pub fn nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept
            .iter()
            .all(|k| temporal_iou((k.start, k.end), (p.start, p.end)) <= iou_threshold)
        {
            kept.push(p);
        }
    }
    kept
}

/// Two-step localization for one video from one or two stream traces
/// (first stream RGB, second flow).
pub fn localize(traces: &[&ForwardTrace], config: &InferenceConfig) -> Result<Vec<Proposal>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::invalid("localize", "no stream traces"))?;
    let classes = first.y_hat.len();
    if traces.iter().any(|t| t.y_hat.len() != classes || t.len() != first.len()) {
        return Err(Error::shape("localize", "streams disagree on classes or length"));
    }
    let mut mean_y = vec![0.0; classes];
    for t in traces {
        for (m, v) in mean_y.iter_mut().zip(&t.y_hat) {
            *m += v / traces.len() as f64;
        }
    }
    let selected = select_classes(&mean_y, config.eta_cls);
    if selected.is_empty() {
        return Ok(Vec::new());
    }

    let cas: Vec<Matrix> = traces.iter().map(|t| class_activation_sequence(t)).collect();
    let views: Vec<StreamView> = traces
        .iter()
        .zip(&cas)
        .map(|(t, c)| StreamView {
            attention: &t.a,
            cas: c,
        })
        .collect();
    let runs: BTreeSet<(usize, usize)> = traces
        .iter()
        .flat_map(|t| generate_proposals(&t.a, config.eta_act.resolve(&t.a)))
        .collect();

    let mut out = Vec::new();
    for &class_id in &selected {
        let candidates = runs
            .iter()
            .map(|&(start, end)| {
                Ok(Proposal {
                    class_id,
                    start,
                    end,
                    score: score_proposal(class_id, start, end, &views, config.theta)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(nms(&candidates, config.nms_iou));
    }
    Ok(out)
}

/// One row of a proposal file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub video_id: String,
    pub class_id: usize,
    pub start_segment: usize,
    pub end_segment: usize,
    pub start_seconds: f64,
    pub end_seconds: f64,
    pub score: f64,
}

impl ProposalRecord {
    /// `end_seconds` is the end of the last covered segment.
    pub fn new(video_id: &str, p: &Proposal, segment_seconds: f64) -> Self {
        Self {
            video_id: video_id.to_string(),
            class_id: p.class_id,
            start_segment: p.start,
            end_segment: p.end,
            start_seconds: p.start as f64 * segment_seconds,
            end_seconds: (p.end + 1) as f64 * segment_seconds,
            score: p.score,
        }
    }
}

pub const PROPOSAL_HEADER: &str =
    "video_id\tclass_id\tstart_segment\tend_segment\tstart_seconds\tend_seconds\tscore";

pub fn write_proposals(records: &[ProposalRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{PROPOSAL_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.video_id,
            r.class_id,
            r.start_segment,
            r.end_segment,
            r.start_seconds,
            r.end_seconds,
            r.score
        )?;
    }
    Ok(())
}

/// Parses a proposal file. The header line is optional.
pub fn read_proposals(input: impl BufRead) -> Result<Vec<ProposalRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<proposals>", e))?;
        if line.trim().is_empty() || (i == 0 && line.starts_with("video_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |reason: &str| Error::invalid("proposal file", format!("line {}: {reason}", i + 1));
        if fields.len() != 7 {
            return Err(bad(&format!("expected 7 fields, found {}", fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad integer {s:?}")));
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let rec = ProposalRecord {
            video_id: fields[0].to_string(),
            class_id: int(fields[1])?,
            start_segment: int(fields[2])?,
            end_segment: int(fields[3])?,
            start_seconds: real(fields[4])?,
            end_seconds: real(fields[5])?,
            score: real(fields[6])?,
        };
        if rec.end_segment < rec.start_segment || !rec.score.is_finite() {
            return Err(bad("end before start or non-finite score"));
        }
        out.push(rec);
    }
    Ok(out)
}
