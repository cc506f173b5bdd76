//! Training loop and checkpointing for the two-branch ensemble.
//!
//! Only the trainable branch and the head ever receive updates; the frozen
//! group is never touched by the optimizer, so its checksum is invariant
//! across a whole run. Given fixed seeds the loop is fully reproducible:
//! identical record sequences (up to wall time) and identical weights.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::model::{ArchSpec, EnsembleModel, EnsembleSpec, ModelError};
use crate::preprocess::{Pipeline, PipelineError, PreprocessConfig};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite ({loss}) at epoch {epoch}, batch {batch_index}")]
    NanLoss {
        epoch: usize,
        batch_index: usize,
        loss: f64,
    },
    #[error("empty {0} pipeline: no batches to consume")]
    EmptyPipeline(&'static str),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "ADAM")]
    Adam,
    #[serde(rename = "SGD_MOMENTUM")]
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "SOFTMAX_CROSS_ENTROPY")]
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    /// Optional (natural, colorized) loss weights; off by default because the
    /// reference protocol trains on the raw 1:3 distribution.
    pub class_weights: Option<(f32, f32)>,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            loss: LossKind::SoftmaxCrossEntropy,
            class_weights: None,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    /// Config-boundary validation. `train` itself additionally tolerates a
    /// zero learning rate as a diagnostic (one pass with no updates).
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training curve entry, one JSON object per line in
/// `train_log.jsonl`. `wall_time` is the only field exempt from the
/// determinism contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub wall_time: f64,
}

impl TrainRecord {
    /// The deterministic fields, for reproducibility comparisons.
    pub fn metrics(&self) -> (usize, f64, f64, f64, f64) {
        (
            self.epoch,
            self.train_loss,
            self.train_accuracy,
            self.val_loss,
            self.val_accuracy,
        )
    }
}

/// Optimizer state over the updateable parameter blocks, keyed by position
/// (block order is canonical).
enum Optimizer {
    Adam {
        lr: f64,
        t: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
    SgdMomentum {
        lr: f64,
        velocity: Vec<Vec<f32>>,
    },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0f32; n]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                t: 0,
                m: zeros(),
                v: zeros(),
            },
            OptimizerKind::SgdMomentum => Optimizer::SgdMomentum {
                lr,
                velocity: zeros(),
            },
        }
    }

    fn step(&mut self, params: &mut [(String, &mut [f32])], grads: &[(String, Vec<f32>)]) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Adam { lr, t, m, v } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
                    debug_assert_eq!(param.0, grad.0, "block order");
                    let (m_i, v_i) = (&mut m[i], &mut v[i]);
                    for (j, g) in grad.1.iter().enumerate() {
                        let g = *g as f64;
                        let mj = ADAM_BETA1 * m_i[j] as f64 + (1.0 - ADAM_BETA1) * g;
                        let vj = ADAM_BETA2 * v_i[j] as f64 + (1.0 - ADAM_BETA2) * g * g;
                        m_i[j] = mj as f32;
                        v_i[j] = vj as f32;
                        let update = *lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                        param.1[j] -= update as f32;
                    }
                }
            }
            Optimizer::SgdMomentum { lr, velocity } => {
                for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
                    debug_assert_eq!(param.0, grad.0, "block order");
                    let vel = &mut velocity[i];
                    for (j, g) in grad.1.iter().enumerate() {
                        vel[j] = (SGD_MOMENTUM * vel[j] as f64 + *g as f64) as f32;
                        param.1[j] -= (*lr * vel[j] as f64) as f32;
                    }
                }
            }
        }
    }
}

/// Mean loss and accuracy of `model` over one full pass of `pipe` (epoch 0
/// order; metrics are order-insensitive up to float association).
pub fn evaluate_loss_accuracy(
    model: &EnsembleModel,
    pipe: &Pipeline,
) -> Result<(f64, f64), TrainError> {
    evaluate_epoch(model, pipe, 0)
}

fn evaluate_epoch(model: &EnsembleModel, pipe: &Pipeline, epoch: usize) -> Result<(f64, f64), TrainError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for batch in pipe.iter_epoch(epoch) {
        let batch = batch?;
        let logits = model.forward(&batch)?;
        let loss = crate::nn::softmax_cross_entropy(&logits, &batch.labels, None);
        loss_sum += loss.loss * batch.len() as f64;
        let preds = crate::model::argmax_rows(&logits);
        correct += preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        total += batch.len();
    }
    if total == 0 {
        return Err(TrainError::EmptyPipeline("validation"));
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}

/// Trains the ensemble: updates only the trainable branch and head, emits one
/// [`TrainRecord`] per epoch, and returns the model restored to its
/// best-validation-accuracy weights (first best wins ties).
pub fn train(
    model: EnsembleModel,
    train_pipe: &Pipeline,
    val_pipe: &Pipeline,
    cfg: &TrainConfig,
) -> Result<(EnsembleModel, Vec<TrainRecord>), TrainError> {
    train_with_observer(model, train_pipe, val_pipe, cfg, |_| {})
}

/// [`train`] with a per-epoch callback, used to stream `train_log.jsonl`.
pub fn train_with_observer(
    mut model: EnsembleModel,
    train_pipe: &Pipeline,
    val_pipe: &Pipeline,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<(EnsembleModel, Vec<TrainRecord>), TrainError> {
    if cfg.epochs == 0 {
        return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
    }
    let LossKind::SoftmaxCrossEntropy = cfg.loss;

    let sizes: Vec<usize> = model
        .updateable_params_mut()
        .iter()
        .map(|(_, s)| s.len())
        .collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);

    let mut records = Vec::with_capacity(cfg.epochs);
    type Snapshot = Vec<(String, Vec<f32>)>;
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut seen = 0usize;
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;

        for (batch_index, batch) in train_pipe.iter_epoch(epoch).enumerate() {
            let batch = batch?;
            let grads = model.loss_and_gradients(&batch, cfg.class_weights)?;
            if !grads.loss.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch: epoch + 1,
                    batch_index,
                    loss: grads.loss,
                });
            }
            loss_sum += grads.loss * batch.len() as f64;
            let preds = crate::model::argmax_rows(&grads.logits);
            correct += preds
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += batch.len();

            let flat = EnsembleModel::flatten_gradients(&grads);
            let mut params = model.updateable_params_mut();
            optimizer.step(&mut params, &flat);
        }
        if seen == 0 {
            return Err(TrainError::EmptyPipeline("train"));
        }

        let (val_loss, val_accuracy) = evaluate_epoch(&model, val_pipe, epoch)?;
        let record = TrainRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);

        let improved = best
            .as_ref()
            .map(|(best_acc, _, _)| val_accuracy > *best_acc)
            .unwrap_or(true);
        if improved {
            best = Some((val_accuracy, epoch + 1, model.snapshot_updateable()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if let Some(patience) = cfg.early_stop_patience {
                if stale_epochs >= patience {
                    break;
                }
            }
        }
    }

    if let Some((_, _, snapshot)) = &best {
        model.restore_updateable(snapshot);
    }
    Ok((model, records))
}

/// Epoch of the retained best-validation checkpoint for a record list.
pub fn best_epoch(records: &[TrainRecord]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for r in records {
        let improved = best.map(|(acc, _)| r.val_accuracy > acc).unwrap_or(true);
        if improved {
            best = Some((r.val_accuracy, r.epoch));
        }
    }
    best.map(|(_, e)| e)
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const WEIGHTS_FILE: &str = "weights.bin";
const METADATA_FILE: &str = "metadata.json";
const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint schema version {found} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to rebuild and audit a checkpoint: the declarative spec,
/// both branch architectures, feature dims, concatenation order, the seeds
/// and configs that produced the weights, and an integrity hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub schema_version: u32,
    pub model_id: String,
    pub spec: EnsembleSpec,
    pub feature_dims: (usize, usize),
    pub concat_order: String,
    pub init_seed: u64,
    pub preprocess: PreprocessConfig,
    pub train: Option<TrainConfig>,
    /// Manifest name the model was trained on, for cross-dataset marking.
    pub trained_on: Option<String>,
    pub best_epoch: Option<usize>,
    pub weights_sha256: String,
    pub(crate) frozen_arch: ArchSpec,
    pub(crate) trainable_arch: ArchSpec,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `weights.bin` (all parameter groups, frozen first), the
/// `metadata.json` sidecar, and the training log into `dir`.
pub fn save_checkpoint(
    model: &EnsembleModel,
    records: &[TrainRecord],
    train_cfg: Option<&TrainConfig>,
    preprocess: &PreprocessConfig,
    trained_on: Option<&str>,
    dir: &Path,
) -> Result<CheckpointMetadata, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut weight_bytes = Vec::new();
    blob::write_blocks(&mut weight_bytes, &model.all_params())
        .map_err(io_err(dir))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, &weight_bytes).map_err(io_err(&weights_path))?;

    let (frozen_arch, trainable_arch) = model.arch_specs();
    let metadata = CheckpointMetadata {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model_id: model.model_id(),
        spec: model.spec().clone(),
        feature_dims: model.feature_dims(),
        concat_order: crate::model::CONCAT_ORDER.to_string(),
        init_seed: model.init_seed(),
        preprocess: preprocess.clone(),
        train: train_cfg.cloned(),
        trained_on: trained_on.map(str::to_string),
        best_epoch: best_epoch(records),
        weights_sha256: blob::sha256_hex(&weight_bytes),
        frozen_arch,
        trainable_arch,
    };
    let meta_path = dir.join(METADATA_FILE);
    let json = serde_json::to_vec_pretty(&metadata)
        .map_err(|e| CheckpointError::CorruptCheckpoint(e.to_string()))?;
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;

    let log_path = dir.join(TRAIN_LOG_FILE);
    let mut log = String::new();
    for r in records {
        log.push_str(&serde_json::to_string(r).expect("record serialization"));
        log.push('\n');
    }
    fs::write(&log_path, log).map_err(io_err(&log_path))?;

    Ok(metadata)
}

/// Restores a checkpoint: verifies schema and weight hash, rebuilds both
/// branch architectures from the stored tables, and loads the exact weights.
pub fn load_checkpoint(dir: &Path) -> Result<(EnsembleModel, CheckpointMetadata), CheckpointError> {
    let meta_path = dir.join(METADATA_FILE);
    let meta_bytes = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let metadata: CheckpointMetadata = serde_json::from_slice(&meta_bytes)
        .map_err(|e| CheckpointError::CorruptCheckpoint(format!("metadata: {e}")))?;
    if metadata.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(CheckpointError::SchemaVersionMismatch {
            found: metadata.schema_version,
        });
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let weight_bytes = fs::read(&weights_path).map_err(io_err(&weights_path))?;
    let digest = blob::sha256_hex(&weight_bytes);
    if digest != metadata.weights_sha256 {
        return Err(CheckpointError::CorruptCheckpoint(format!(
            "weight hash {digest} does not match metadata {}",
            metadata.weights_sha256
        )));
    }
    let blocks = blob::read_blocks(&mut weight_bytes.as_slice())
        .map_err(|e| CheckpointError::CorruptCheckpoint(e.to_string()))?;

    let mut model = EnsembleModel::from_arch_specs(
        &metadata.spec,
        metadata.init_seed,
        &metadata.frozen_arch,
        &metadata.trainable_arch,
    )?;
    model.load_param_blocks(&blocks)?;
    if model.feature_dims() != metadata.feature_dims {
        return Err(CheckpointError::CorruptCheckpoint(format!(
            "feature dims {:?} disagree with metadata {:?}",
            model.feature_dims(),
            metadata.feature_dims
        )));
    }
    Ok((model, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_corpus;
    use crate::model::{build_ensemble, BackboneName};
    use crate::preprocess::Batch;
    use ndarray::Array4;

    fn tiny_setup(
        groups: usize,
        seed: u64,
    ) -> (tempfile::TempDir, Pipeline, Pipeline, EnsembleModel) {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_corpus(groups, tmp.path(), seed).unwrap();
        let (train_m, val_m) = crate::data::split_manifest(&manifest, 0.75, seed).unwrap();
        let cfg = PreprocessConfig {
            target_height: 32,
            target_width: 32,
            shuffle_seed: seed,
            ..PreprocessConfig::default()
        };
        let train_pipe = Pipeline::new(train_m, cfg.clone(), 8).unwrap();
        let val_pipe = Pipeline::new(val_m, cfg, 8).unwrap();
        let spec = EnsembleSpec {
            input_shape: (32, 32, 3),
            ..EnsembleSpec::tiny()
        };
        let model = build_ensemble(&spec, seed).unwrap();
        (tmp, train_pipe, val_pipe, model)
    }

    fn probe_batch(n: usize) -> Batch {
        Batch {
            pixels: Array4::from_shape_fn((n, 32, 32, 3), |(b, y, x, c)| {
                ((b * 31 + y * 7 + x * 3 + c) % 256) as f32 / 255.0
            }),
            labels: (0..n).map(|i| (i % 2) as u8).collect(),
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (_tmp, train_pipe, val_pipe, model) = tiny_setup(8, 4);
        let before: Vec<(String, Vec<f32>)> = model.snapshot_updateable();
        let (untrained_loss, untrained_acc) = evaluate_loss_accuracy(&model, &val_pipe).unwrap();

        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (model, records) = train(model, &train_pipe, &val_pipe, &cfg).unwrap();
        assert_eq!(model.snapshot_updateable(), before);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].val_loss, untrained_loss);
        assert_eq!(records[0].val_accuracy, untrained_acc);
    }

    #[test]
    fn identical_seeds_reproduce_record_sequences() {
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (_tmp_a, train_a, val_a, model_a) = tiny_setup(6, 11);
        let (_tmp_b, train_b, val_b, model_b) = tiny_setup(6, 11);
        let (model_a, rec_a) = train(model_a, &train_a, &val_a, &cfg).unwrap();
        let (model_b, rec_b) = train(model_b, &train_b, &val_b, &cfg).unwrap();

        let metrics =
            |r: &[TrainRecord]| r.iter().map(TrainRecord::metrics).collect::<Vec<_>>();
        assert_eq!(metrics(&rec_a), metrics(&rec_b));

        let probe = probe_batch(4);
        assert_eq!(
            model_a.forward(&probe).unwrap(),
            model_b.forward(&probe).unwrap()
        );
    }

    #[test]
    fn training_updates_only_trainable_groups() {
        let (_tmp, train_pipe, val_pipe, model) = tiny_setup(8, 2);
        let frozen_before = model.frozen_checksum();
        let updateable_before = model.snapshot_updateable();

        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (model, _) = train(model, &train_pipe, &val_pipe, &cfg).unwrap();
        assert_eq!(model.frozen_checksum(), frozen_before);
        assert_ne!(
            model.snapshot_updateable(),
            updateable_before,
            "at least one trainable parameter must move"
        );
    }

    #[test]
    fn exploding_rate_reports_nan_loss_with_batch_index() {
        let (_tmp, train_pipe, val_pipe, model) = tiny_setup(8, 9);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e12,
            optimizer: OptimizerKind::SgdMomentum,
            ..TrainConfig::default()
        };
        match train(model, &train_pipe, &val_pipe, &cfg) {
            Err(TrainError::NanLoss { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected NanLoss, got {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let (_tmp, _train, val_pipe, model) = tiny_setup(4, 1);
        let empty = crate::data::DatasetManifest::new("empty", 0, false, Vec::new());
        let cfg = PreprocessConfig {
            target_height: 32,
            target_width: 32,
            ..PreprocessConfig::default()
        };
        let empty_pipe = Pipeline::new(empty, cfg, 4).unwrap();
        let err = train(model, &empty_pipe, &val_pipe, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::EmptyPipeline("train")));
    }

    #[test]
    fn early_stopping_cuts_stale_runs() {
        let (_tmp, train_pipe, val_pipe, model) = tiny_setup(6, 3);
        // lr 0 never improves after the first epoch's snapshot.
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.0,
            early_stop_patience: Some(2),
            ..TrainConfig::default()
        };
        let (_, records) = train(model, &train_pipe, &val_pipe, &cfg).unwrap();
        assert_eq!(records.len(), 3, "1 best epoch + 2 stale epochs");
    }

    #[test]
    fn sgd_momentum_also_learns_deterministically() {
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::SgdMomentum,
            ..TrainConfig::default()
        };
        let (_tmp_a, train_a, val_a, model_a) = tiny_setup(6, 21);
        let (_tmp_b, train_b, val_b, model_b) = tiny_setup(6, 21);
        let before = model_a.snapshot_updateable();
        let (model_a, _) = train(model_a, &train_a, &val_a, &cfg).unwrap();
        let (model_b, _) = train(model_b, &train_b, &val_b, &cfg).unwrap();
        assert_ne!(model_a.snapshot_updateable(), before);
        assert_eq!(model_a.snapshot_updateable(), model_b.snapshot_updateable());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_outputs() {
        let (_tmp, train_pipe, val_pipe, model) = tiny_setup(6, 7);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (model, records) = train(model, &train_pipe, &val_pipe, &cfg).unwrap();

        let probe = probe_batch(3);
        let before = model.forward(&probe).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let pp = PreprocessConfig {
            target_height: 32,
            target_width: 32,
            ..PreprocessConfig::default()
        };
        let meta = save_checkpoint(&model, &records, Some(&cfg), &pp, Some("synthetic-6g"), dir.path()).unwrap();
        assert_eq!(meta.concat_order, "frozen_first");
        assert_eq!(meta.best_epoch, Some(records[0].epoch));

        let (loaded, loaded_meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.forward(&probe).unwrap(), before);
        assert_eq!(loaded_meta.trained_on.as_deref(), Some("synthetic-6g"));
        assert_eq!(loaded_meta.spec, *model.spec());
        assert_eq!(loaded.frozen_checksum(), model.frozen_checksum());

        // The sidecar names the frozen branch with its spec string.
        let raw: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metadata.json")).unwrap())
                .unwrap();
        assert_eq!(raw["spec"]["frozen_branch"]["name"], "TINY_CNN");
        assert_eq!(raw["schema_version"], 1);
        assert!(dir.path().join("train_log.jsonl").exists());
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let (_tmp, train_pipe, val_pipe, model) = tiny_setup(4, 5);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (model, records) = train(model, &train_pipe, &val_pipe, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pp = PreprocessConfig::default();
        save_checkpoint(&model, &records, Some(&cfg), &pp, None, dir.path()).unwrap();

        // Tamper with the recorded weight hash.
        let meta_path = dir.path().join("metadata.json");
        let mut meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
        meta["weights_sha256"] = serde_json::json!("0000");
        fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::CorruptCheckpoint(_))
        ));

        // Unsupported schema version.
        meta["schema_version"] = serde_json::json!(99);
        fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::SchemaVersionMismatch { found: 99 })
        ));
    }

    #[test]
    fn frozen_features_stay_fixed_while_logits_move() {
        let (_tmp, train_pipe, val_pipe, model) = tiny_setup(8, 13);
        let probe = probe_batch(4);
        let (frozen_before, _) = model.feature_tap(&probe).unwrap();
        let logits_before = model.forward(&probe).unwrap();

        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 2e-3,
            ..TrainConfig::default()
        };
        let (model, _) = train(model, &train_pipe, &val_pipe, &cfg).unwrap();
        let (frozen_after, _) = model.feature_tap(&probe).unwrap();
        assert_eq!(frozen_before, frozen_after, "frozen features are bit-stable");
        assert_ne!(logits_before, model.forward(&probe).unwrap());
    }

    #[test]
    fn config_serde_uses_spec_tokens() {
        let cfg = TrainConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["optimizer"], "ADAM");
        assert_eq!(v["loss"], "SOFTMAX_CROSS_ENTROPY");
        let sgd: TrainConfig =
            serde_json::from_value(serde_json::json!({"optimizer": "SGD_MOMENTUM"})).unwrap();
        assert_eq!(sgd.optimizer, OptimizerKind::SgdMomentum);
        assert!(TrainConfig { epochs: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn vgg16_random_frozen_branch_builds_and_runs() {
        // Frozen VGG16 (random weights) + trainable tiny branch at a reduced
        // input size: exercises the flatten path end to end.
        let spec = EnsembleSpec {
            frozen_branch: crate::model::BackboneId::random(BackboneName::Vgg16),
            trainable_branch: crate::model::BackboneId::random(BackboneName::TinyCnn),
            input_shape: (64, 64, 3),
            head_units: 2,
            frozen_flatten: true,
        };
        let model = build_ensemble(&spec, 3).unwrap();
        // 64 / 2^5 = 2, so the flattened frozen width is 2*2*512.
        assert_eq!(model.feature_dims(), (2 * 2 * 512, 32));
        let batch = Batch {
            pixels: Array4::from_elem((1, 64, 64, 3), 0.4),
            labels: vec![1],
        };
        let logits = model.forward(&batch).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
        assert!(logits.iter().all(|v| v.is_finite()));

        // A checkpoint saved from a VGG16-frozen config names the branch in
        // its sidecar and restores to identical outputs.
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &[], None, &PreprocessConfig::default(), None, dir.path()).unwrap();
        let raw: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metadata.json")).unwrap())
                .unwrap();
        assert_eq!(raw["spec"]["frozen_branch"]["name"], "VGG16");
        assert_eq!(raw["model_id"], "vgg16+tiny_cnn");
        let (loaded, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.forward(&batch).unwrap(), logits);
    }
}
