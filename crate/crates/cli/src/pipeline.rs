//! Dataset-level stages shared by the subcommands: train per stream, run
//! two-step localization over a subset, and score the result.

use std::path::Path;

use aumn::data::{Dataset, Stream, Subset, VideoRecord};
use aumn::evaluation::{attention_auc, mean_ap, Detection, IntervalUnit, MapTable, DEFAULT_THRESHOLDS};
use aumn::inference::{localize, ProposalRecord};
use aumn::model::{encode_memory, forward_with_memory, load_checkpoint, save_checkpoint, ForwardTrace, ModelParams};
use aumn::training::{train, write_history, TrainOutcome};
use aumn::{Error, Result};
use rayon::prelude::*;

use crate::config::RunConfig;

/// Parameters for one stream.
#[derive(Debug, Clone)]
pub struct StreamModel {
    pub stream: Stream,
    pub params: ModelParams,
}

pub fn train_stream(ds: &Dataset, stream: Stream, config: &RunConfig) -> Result<TrainOutcome> {
    let videos = ds.training_videos(Subset::Train, stream)?;
    let dims = config.model.dims(ds.manifest.feature_dim, ds.manifest.classes);
    let outcome = train(&videos, dims, &config.train_config(stream))?;
    if let Some(last) = outcome.history.last() {
        log::info!("{stream}: step {} total loss {:.6}", last.step, last.total);
    }
    Ok(outcome)
}

pub fn checkpoint_path(dir: &Path, stream: Stream) -> std::path::PathBuf {
    dir.join(format!("{stream}.ckpt"))
}

pub fn history_path(dir: &Path, stream: Stream) -> std::path::PathBuf {
    dir.join(format!("{stream}_loss.csv"))
}

pub fn save_stream(dir: &Path, stream: Stream, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(&outcome.params, &checkpoint_path(dir, stream))?;
    let path = history_path(dir, stream);
    let mut buf = Vec::new();
    write_history(&outcome.history, &mut buf).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, buf).map_err(|e| Error::Io { path, source: e })
}

pub fn load_streams(dir: &Path, streams: &[Stream]) -> Result<Vec<StreamModel>> {
    streams
        .iter()
        .map(|&stream| {
            Ok(StreamModel {
                stream,
                params: load_checkpoint(&checkpoint_path(dir, stream))?,
            })
        })
        .collect()
}

/// Localization output for a subset.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub proposals: Vec<ProposalRecord>,
    /// Per-video foreground attention, fused across streams.
    pub attention: Vec<(String, Vec<f64>)>,
}

fn check_models(ds: &Dataset, models: &[StreamModel]) -> Result<()> {
    if models.is_empty() || models.len() > 2 {
        return Err(Error::invalid("streams", "expected one or two stream models"));
    }
    if models.len() == 2 && (models[0].stream != Stream::Rgb || models[1].stream != Stream::Flow) {
        return Err(Error::invalid("streams", "two-stream inference takes rgb then flow"));
    }
    for m in models {
        let d = m.params.dims;
        if d.input_dim != ds.manifest.feature_dim || d.classes != ds.manifest.classes {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "{} model expects D = {}, C = {} but the dataset has D = {}, C = {}",
                    m.stream, d.input_dim, d.classes, ds.manifest.feature_dim, ds.manifest.classes
                ),
            ));
        }
    }
    Ok(())
}

pub fn run_inference(
    ds: &Dataset,
    models: &[StreamModel],
    config: &RunConfig,
    subset: Subset,
) -> Result<InferenceOutput> {
    check_models(ds, models)?;
    let memories = models
        .iter()
        .map(|m| encode_memory(&m.params))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<&VideoRecord> = ds.manifest.records_in(subset).collect();
    let use_sa = config.train.self_attention;
    let inf = &config.inference;
    let per_video = records
        .par_iter()
        .map(|r| {
            let traces = models
                .iter()
                .zip(&memories)
                .map(|(m, mem)| forward_with_memory(&ds.load_features(r, m.stream)?, &m.params, mem, use_sa))
                .collect::<Result<Vec<ForwardTrace>>>()?;
            let refs: Vec<&ForwardTrace> = traces.iter().collect();
            let proposals = localize(&refs, inf)?;
            let attention = fuse_attention(&refs, inf.theta);
            let records: Vec<ProposalRecord> = proposals
                .iter()
                .map(|p| ProposalRecord::new(&r.video_id, p, inf.segment_seconds))
                .collect();
            Ok((records, (r.video_id.clone(), attention)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = InferenceOutput {
        proposals: Vec::new(),
        attention: Vec::with_capacity(per_video.len()),
    };
    for (p, a) in per_video {
        out.proposals.extend(p);
        out.attention.push(a);
    }
    Ok(out)
}

/// θ-weighted mix of the streams' foreground attention.
pub fn fuse_attention(traces: &[&ForwardTrace], theta: f64) -> Vec<f64> {
    match traces {
        [one] => one.a.clone(),
        [rgb, flow] => rgb
            .a
            .iter()
            .zip(&flow.a)
            .map(|(r, f)| theta * r + (1.0 - theta) * f)
            .collect(),
        _ => unreachable!("one or two streams"),
    }
}

pub fn detections(proposals: &[ProposalRecord], unit: IntervalUnit) -> Vec<Detection> {
    proposals
        .iter()
        .map(|p| {
            let (start, end) = match unit {
                IntervalUnit::Segments => (p.start_segment as f64, p.end_segment as f64),
                IntervalUnit::Seconds => (p.start_seconds, p.end_seconds),
            };
            Detection {
                video_id: p.video_id.clone(),
                class_id: p.class_id,
                start,
                end,
                score: p.score,
            }
        })
        .collect()
}

pub fn evaluate(ds: &Dataset, proposals: &[ProposalRecord], subset: Subset) -> Result<MapTable> {
    let gt = ds.manifest.ground_truth(subset);
    let unit = ds.manifest.unit;
    mean_ap(&detections(proposals, unit), &gt, &DEFAULT_THRESHOLDS, unit)
}

/// Pooled segment-level AUC of the attention against the synthetic
/// foreground masks; `None` when masks are missing or one-sided.
pub fn foreground_auc(ds: &Dataset, attention: &[(String, Vec<f64>)]) -> Option<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (id, a) in attention {
        let record = ds.manifest.records.iter().find(|r| &r.video_id == id)?;
        let mask = record.segment_labels()?;
        if mask.len() != a.len() {
            return None;
        }
        scores.extend_from_slice(a);
        labels.extend(mask);
    }
    attention_auc(&scores, &labels)
}

/// One grid row's per-seed and seed-averaged tables.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub per_seed: Vec<(u64, MapTable)>,
    pub mean: MapTable,
}

/// Trains and scores every loss/self-attention toggle of the ablation grid
/// for each configured seed.
pub fn ablate(ds: &Dataset, config: &RunConfig, streams: &[Stream]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, ablation) in aumn::losses::Ablation::grid() {
        let mut per_seed = Vec::new();
        for &seed in &config.ablation.seeds {
            let mut c = config.clone();
            c.train.seed = seed;
            c.train.diversity = ablation.diversity;
            c.train.homogeneity = ablation.homogeneity;
            c.train.sparsity = ablation.sparsity;
            c.train.self_attention = ablation.self_attention;
            let models = streams
                .iter()
                .map(|&stream| {
                    Ok(StreamModel {
                        stream,
                        params: train_stream(ds, stream, &c)?.params,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = run_inference(ds, &models, &c, Subset::Test)?;
            let table = evaluate(ds, &out.proposals, Subset::Test)?;
            log::info!("{name} seed {seed}: AVG mAP {:.4}", table.average);
            per_seed.push((seed, table));
        }
        let mean = average_tables(per_seed.iter().map(|(_, t)| t));
        rows.push(AblationRow { name, per_seed, mean });
    }
    Ok(rows)
}

fn average_tables<'a>(tables: impl Iterator<Item = &'a MapTable>) -> MapTable {
    let tables: Vec<&MapTable> = tables.collect();
    let n = tables.len() as f64;
    let first = tables[0];
    MapTable {
        thresholds: first.thresholds.clone(),
        map: (0..first.map.len())
            .map(|i| tables.iter().map(|t| t.map[i]).sum::<f64>() / n)
            .collect(),
        average: tables.iter().map(|t| t.average).sum::<f64>() / n,
        classes: first.classes.clone(),
    }
}
