//! Inference over dataset splits, COCO-style result files and AP reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::data::{Dataset, Sample};
use crate::coco::{write_json, CocoResult, Rle, SHIP_CATEGORY_ID};
use crate::error::{Error, Result};
use crate::metrics::{coco_summary, AreaBuckets, EvalReport};
use crate::params::ParamStore;
use crate::pipeline::Model;
use crate::types::InstanceSet;

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Where per-image predictions come from.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model {
        model: &'a Model,
        store: &'a ParamStore,
    },
    /// The ground truth itself with score 1; every defined AP is 1.
    Oracle,
    /// No detections at all.
    Empty,
}

impl Predictor<'_> {
    fn predict(&self, sample: &Sample) -> Result<InstanceSet> {
        match self {
            Predictor::Model { model, store } => Ok(model.predict(store, &sample.image)?.instances),
            Predictor::Oracle => Ok(InstanceSet::predictions(
                sample.masks.clone(),
                vec![1.0; sample.masks.len()],
            )),
            Predictor::Empty => Ok(InstanceSet::predictions(Vec::new(), Vec::new())),
        }
    }
}

/// Predictions for every sample, keyed by image id. Images are split across
/// worker threads; the result does not depend on the thread count.
pub fn predict_all(
    samples: &[&Sample],
    predictor: Predictor<'_>,
) -> Result<BTreeMap<u64, InstanceSet>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(samples.len().max(1));
    let chunk = samples.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<(u64, InstanceSet)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| Ok((s.id, predictor.predict(s)?)))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut out = BTreeMap::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// COCO results entries for a set of predictions.
pub fn to_results(predictions: &BTreeMap<u64, InstanceSet>) -> Vec<CocoResult> {
    predictions
        .iter()
        .flat_map(|(&id, set)| {
            let scores = set
                .scores
                .clone()
                .unwrap_or_else(|| vec![1.0; set.masks.len()]);
            set.masks
                .iter()
                .zip(scores)
                .map(move |(m, score)| CocoResult {
                    image_id: id,
                    category_id: SHIP_CATEGORY_ID,
                    segmentation: Rle::from_mask(m),
                    score,
                })
        })
        .collect()
}

/// Mask AP of one split.
pub fn evaluate_split(
    dataset: &Dataset,
    split: &str,
    predictions: &BTreeMap<u64, InstanceSet>,
    buckets: AreaBuckets,
) -> Result<EvalReport> {
    let pairs = dataset
        .split(split)?
        .into_iter()
        .map(|s| {
            let p = predictions
                .get(&s.id)
                .cloned()
                .ok_or_else(|| Error::Input(format!("no predictions for image {}", s.id)))?;
            Ok((p, InstanceSet::ground_truth(s.masks.clone())))
        })
        .collect::<Result<Vec<_>>>()?;
    coco_summary(&pairs, buckets)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    splits: &'a BTreeMap<String, EvalReport>,
    config: &'a ExperimentConfig,
}

/// Fixed-width table with one row per split.
pub fn report_table(reports: &BTreeMap<String, EvalReport>, label: &str) -> String {
    let mut out = EvalReport::table_header(label);
    out.push('\n');
    for (name, r) in reports {
        out.push_str(&r.table_row(name));
        out.push('\n');
    }
    out
}

/// Runs `predictor` on the union of `config.eval.splits` and writes
/// `predictions.json`, `report.json` (with the resolved config embedded) and
/// `report.txt` under `out_dir`.
pub fn evaluate_and_write(
    dataset: &Dataset,
    config: &ExperimentConfig,
    predictor: Predictor<'_>,
    out_dir: &Path,
) -> Result<BTreeMap<String, EvalReport>> {
    let mut ids: Vec<u64> = Vec::new();
    for split in &config.eval.splits {
        ids.extend(dataset.split(split)?.iter().map(|s| s.id));
    }
    ids.sort_unstable();
    ids.dedup();
    let samples: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| ids.binary_search(&s.id).is_ok())
        .collect();
    let predictions = predict_all(&samples, predictor)?;
    let reports = config
        .eval
        .splits
        .iter()
        .map(|split| {
            Ok((
                split.clone(),
                evaluate_split(dataset, split, &predictions, config.eval.buckets)?,
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(PREDICTIONS_FILE), &to_results(&predictions))?;
    write_json(
        &out_dir.join(REPORT_JSON),
        &ReportFile {
            splits: &reports,
            config,
        },
    )?;
    let txt = out_dir.join(REPORT_TXT);
    std::fs::write(&txt, report_table(&reports, "split")).map_err(|e| Error::io(&txt, e))?;
    Ok(reports)
}
