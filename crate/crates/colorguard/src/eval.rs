//! Accuracy, HTER, confusion matrices, and per-dataset report rendering,
//! including the internal/external HTER difference used to judge
//! generalization.
//!
//! The positive class is COLORIZED throughout (the detection target); every
//! report records that convention so confusion matrices stay unambiguous.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{dataset_family, DatasetManifest, Split};
use crate::model::{EnsembleModel, ModelError};
use crate::preprocess::{Batch, Pipeline, PipelineError, PreprocessConfig};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty pipeline: nothing to evaluate")]
    EmptyPipeline,
    #[error("undefined rate: class {0} absent from the evaluation set")]
    UndefinedRate(&'static str),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report io at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Binary counts with COLORIZED as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Fixed convention, serialized for report readers.
    pub positive_class: PositiveClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositiveClass {
    #[serde(rename = "colorized")]
    Colorized,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionMatrix {
            tp,
            tn,
            fp,
            fn_,
            positive_class: PositiveClass::Colorized,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Tallies one (prediction, label) pair; 1 = colorized = positive.
    pub fn record(&mut self, predicted: u8, actual: u8) {
        match (predicted, actual) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (1, 0) => self.fp += 1,
            (0, 1) => self.fn_ += 1,
            _ => unreachable!("binary labels"),
        }
    }
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        ConfusionMatrix::new(0, 0, 0, 0)
    }
}

/// Half total error rate: `0.5 * (FP/(FP+TN) + FN/(FN+TP))`. Lower is
/// better; robust to the 1:3 class imbalance.
///
/// Evaluated as one exact rational division so representable results come out
/// exact (0.5 * (1/10 + 2/10) is 0.15, not 0.15000000000000002).
pub fn hter(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let negatives = (cm.fp + cm.tn) as u128;
    let positives = (cm.fn_ + cm.tp) as u128;
    if negatives == 0 {
        return Err(EvalError::UndefinedRate("negative (natural)"));
    }
    if positives == 0 {
        return Err(EvalError::UndefinedRate("positive (colorized)"));
    }
    let numerator = cm.fp as u128 * positives + cm.fn_ as u128 * negatives;
    let denominator = 2 * negatives * positives;
    Ok(numerator as f64 / denominator as f64)
}

/// Fraction of correct decisions: `(TP+TN) / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyPipeline);
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

/// Anything that maps batches to class predictions; lets the metric plumbing
/// run against stub models in tests as well as real ensembles.
pub trait Classifier {
    fn predict_batch(&self, batch: &Batch) -> Result<Vec<u8>, ModelError>;

    fn classifier_id(&self) -> String {
        "classifier".to_string()
    }
}

impl Classifier for EnsembleModel {
    fn predict_batch(&self, batch: &Batch) -> Result<Vec<u8>, ModelError> {
        self.predict(batch)
    }

    fn classifier_id(&self) -> String {
        self.model_id()
    }
}

/// Runs the classifier over every batch and tallies the confusion counts.
/// Deterministic; invariant to batch size and prefetch depth.
pub fn confusion(model: &impl Classifier, pipe: &Pipeline) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::default();
    for batch in pipe.iter_epoch(0) {
        let batch = batch?;
        let preds = model.predict_batch(&batch)?;
        for (p, l) in preds.iter().zip(&batch.labels) {
            cm.record(*p, *l);
        }
    }
    if cm.total() == 0 {
        return Err(EvalError::EmptyPipeline);
    }
    Ok(cm)
}

/// One evaluated dataset, shaped like a row of the results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub accuracy: f64,
    pub hter: f64,
    pub cm: ConfusionMatrix,
    pub model_id: String,
    /// True when the manifest's dataset family differs from the family the
    /// model was trained on.
    pub cross_dataset: bool,
}

/// The generalization arithmetic: external HTER minus internal HTER, one row
/// per cross-dataset report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HterDifference {
    pub internal_dataset: String,
    pub external_dataset: String,
    /// external − internal; positive means generalization lost ground.
    pub difference: f64,
}

/// Evaluates one manifest: uses its TEST-split records when any exist,
/// otherwise treats the whole manifest as a test set.
pub fn evaluate_manifest(
    model: &impl Classifier,
    manifest: &DatasetManifest,
    cfg: &PreprocessConfig,
    batch_size: usize,
    trained_family: Option<&str>,
) -> Result<EvalReport, EvalError> {
    let has_test = manifest.records.iter().any(|r| r.split == Split::Test);
    let eval_manifest = if has_test {
        let records = manifest
            .records
            .iter()
            .filter(|r| r.split == Split::Test)
            .cloned()
            .collect();
        let mut m = DatasetManifest::new(manifest.name.clone(), manifest.seed, true, records);
        if let Some(base) = manifest.base_dir() {
            m = m.with_base_dir(base);
        }
        m
    } else {
        manifest.clone()
    };

    let pipe = Pipeline::new(eval_manifest, cfg.clone(), batch_size)?;
    let cm = confusion(model, &pipe)?;
    let cross_dataset = trained_family
        .map(|family| dataset_family(&manifest.name) != dataset_family(family))
        .unwrap_or(false);
    Ok(EvalReport {
        dataset_name: manifest.name.clone(),
        accuracy: accuracy(&cm)?,
        hter: hter(&cm)?,
        cm,
        model_id: model.classifier_id(),
        cross_dataset,
    })
}

/// Evaluates each manifest in order, marking cross-dataset rows relative to
/// `trained_family` (usually the checkpoint's `trained_on` manifest name).
pub fn evaluate(
    model: &impl Classifier,
    manifests: &[DatasetManifest],
    cfg: &PreprocessConfig,
    batch_size: usize,
    trained_family: Option<&str>,
) -> Result<Vec<EvalReport>, EvalError> {
    manifests
        .iter()
        .map(|m| evaluate_manifest(model, m, cfg, batch_size, trained_family))
        .collect()
}

/// External−internal HTER rows for a report list. The internal baseline is
/// the first non-cross-dataset report (falling back to the first report);
/// every other report contributes one difference row. Empty for single
/// reports.
pub fn hter_differences(reports: &[EvalReport]) -> Vec<HterDifference> {
    if reports.len() < 2 {
        return Vec::new();
    }
    let internal = reports
        .iter()
        .find(|r| !r.cross_dataset)
        .unwrap_or(&reports[0]);
    reports
        .iter()
        .filter(|r| r.dataset_name != internal.dataset_name)
        .map(|r| HterDifference {
            internal_dataset: internal.dataset_name.clone(),
            external_dataset: r.dataset_name.clone(),
            difference: r.hter - internal.hter,
        })
        .collect()
}

/// Aligned-text rendering: one row per dataset with HTER then Accuracy
/// columns, followed by the generalization differences when present.
pub fn render_report_text(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let name_width = reports
        .iter()
        .map(|r| r.dataset_name.len())
        .chain(["Dataset".len()])
        .max()
        .unwrap_or(7);
    out.push_str(&format!(
        "{:<name_width$}  {:>8}  {:>9}  {:>6} {:>6} {:>6} {:>6}  {}\n",
        "Dataset", "HTER", "Accuracy", "TP", "TN", "FP", "FN", "Scope"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<name_width$}  {:>8.4}  {:>8.2}%  {:>6} {:>6} {:>6} {:>6}  {}\n",
            r.dataset_name,
            r.hter,
            r.accuracy * 100.0,
            r.cm.tp,
            r.cm.tn,
            r.cm.fp,
            r.cm.fn_,
            if r.cross_dataset { "external" } else { "internal" },
        ));
    }
    let diffs = hter_differences(reports);
    if !diffs.is_empty() {
        out.push('\n');
        for d in diffs {
            out.push_str(&format!(
                "HTER difference (external - internal) [{} - {}]: {:+.4}\n",
                d.external_dataset, d.internal_dataset, d.difference
            ));
        }
    }
    out
}

/// Writes `report.json` (the array of reports), `hter_differences.json`
/// (when at least two reports exist), and the table-style `report.txt` into
/// `dir`.
pub fn write_reports(reports: &[EvalReport], dir: &Path) -> Result<(), EvalError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let json_path = dir.join("report.json");
    fs::write(&json_path, serde_json::to_vec_pretty(reports).expect("report json"))
        .map_err(io_err(&json_path))?;

    let diffs = hter_differences(reports);
    if !diffs.is_empty() {
        let diff_path = dir.join("hter_differences.json");
        fs::write(&diff_path, serde_json::to_vec_pretty(&diffs).expect("differences json"))
            .map_err(io_err(&diff_path))?;
    }

    let txt_path = dir.join("report.txt");
    fs::write(&txt_path, render_report_text(reports)).map_err(io_err(&txt_path))?;
    Ok(())
}
