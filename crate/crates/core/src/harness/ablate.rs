//! Module ablation: the same schedule and seeds trained four times with the
//! query generator and the orientation embedding switched on and off.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::data::Dataset;
use super::eval::{evaluate_and_write, Predictor};
use super::train::{run_training, LOSS_CSV};
use crate::coco::write_json;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

/// Step whose loss is reported for every variant.
pub const LOSS_PROBE_STEP: usize = 500;
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TXT: &str = "ablation.txt";
pub const LOSS_CURVES_CSV: &str = "loss_curves.csv";

/// `(label, directory, query generator, orientation embedding)`.
pub const VARIANTS: [(&str, &str, bool, bool); 4] = [
    ("baseline", "baseline", false, false),
    ("+query_gen", "query_gen", true, false),
    ("+orientation", "orientation", false, true),
    ("+both", "both", true, true),
];

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub query_generator: bool,
    pub orientation: bool,
    /// SHA-256 of the variant's resolved configuration.
    pub config_hash: String,
    pub steps: usize,
    pub final_loss: f64,
    /// Total loss at [`LOSS_PROBE_STEP`], absent when the run is shorter.
    pub loss_at_step_500: Option<f64>,
    pub splits: BTreeMap<String, EvalReport>,
}

/// Hex SHA-256 of a configuration's TOML form.
pub fn config_hash(config: &ExperimentConfig) -> String {
    Sha256::digest(config.to_toml().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `config` with the two module flags set.
pub fn variant_config(
    config: &ExperimentConfig,
    query_generator: bool,
    orientation: bool,
) -> ExperimentConfig {
    let mut c = config.clone();
    c.model.use_query_generator = query_generator;
    c.model.use_orientation = orientation;
    c
}

#[derive(Serialize)]
struct AblationFile<'a> {
    variants: &'a [VariantResult],
    config: &'a ExperimentConfig,
}

/// One row per variant: per-split AP columns, then final loss and loss at
/// step 500.
pub fn ablation_table(results: &[VariantResult]) -> String {
    let splits: Vec<&String> = results
        .first()
        .map(|r| r.splits.keys().collect())
        .unwrap_or_default();
    let fields: Vec<&str> = EvalReport::default().fields().iter().map(|f| f.0).collect();
    let mut out = format!("{:<14}", "variant");
    for s in &splits {
        for f in &fields {
            out.push_str(&format!(" {:>14}", format!("{s}/{f}")));
        }
    }
    out.push_str(&format!(" {:>10} {:>10}\n", "loss_final", "loss@500"));
    for r in results {
        out.push_str(&format!("{:<14}", r.name));
        for s in &splits {
            for (_, v) in r.splits[*s].fields() {
                out.push_str(&match v {
                    Some(x) => format!(" {x:>14.4}"),
                    None => format!(" {:>14}", "n/a"),
                });
            }
        }
        let probe = r
            .loss_at_step_500
            .map_or("n/a".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(" {:>10.4} {probe:>10}\n", r.final_loss));
    }
    out
}

/// Trains and evaluates every variant under `out_dir/<variant>/`, then
/// writes `ablation.json`, `ablation.txt` and `loss_curves.csv` (one total
/// loss column per variant).
pub fn run_ablation(
    config: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<Vec<VariantResult>> {
    let mut results = Vec::new();
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for (label, dir, qg, orient) in VARIANTS {
        let cfg = variant_config(config, qg, orient);
        let vdir = out_dir.join(dir);
        log::info!("ablation variant {label}");
        let outcome = run_training(&cfg, dataset, &vdir, None, |_, _| true)?;
        let losses: Vec<f64> = outcome.records.iter().map(|r| r.loss.total).collect();
        let t = &outcome.trainer;
        let splits = evaluate_and_write(
            dataset,
            &cfg,
            Predictor::Model {
                model: &t.model,
                store: &t.store,
            },
            &vdir.join("eval"),
        )?;
        results.push(VariantResult {
            name: label.to_string(),
            query_generator: qg,
            orientation: orient,
            config_hash: config_hash(&cfg),
            steps: losses.len(),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            loss_at_step_500: losses.get(LOSS_PROBE_STEP - 1).copied(),
            splits,
        });
        debug_assert!(vdir.join(LOSS_CSV).exists());
        curves.push(losses);
    }
    write_json(
        &out_dir.join(ABLATION_JSON),
        &AblationFile {
            variants: &results,
            config,
        },
    )?;
    let txt = out_dir.join(ABLATION_TXT);
    std::fs::write(&txt, ablation_table(&results)).map_err(|e| Error::io(&txt, e))?;

    let mut csv = String::from("step");
    for (label, ..) in VARIANTS {
        csv.push(',');
        csv.push_str(label);
    }
    csv.push('\n');
    let n = curves.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..n {
        csv.push_str(&(i + 1).to_string());
        for c in &curves {
            csv.push(',');
            if let Some(v) = c.get(i) {
                csv.push_str(&v.to_string());
            }
        }
        csv.push('\n');
    }
    let path = out_dir.join(LOSS_CURVES_CSV);
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}
