//! End-to-end runs driven by a [`RunConfig`]: build data and model, train,
//! and move trained state in and out of checkpoints.

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::compression::CompressionSpec;
use crate::config::{parse_pairs, ConfigError, RunConfig};
use crate::data::Splits;
use crate::nn::{build_model, Model, ModelError};
use crate::subspace::{Subspace, SubspaceKind};
use crate::train::{steps_per_epoch, train_subspace, History, TrainError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Metadata key recording how many epochs a checkpoint has seen.
pub const EPOCHS_KEY: &str = "checkpoint.epochs";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRun {
    pub config: RunConfig,
    pub model: Model,
    pub subspace: Subspace,
    pub epochs_done: usize,
}

impl TrainedRun {
    /// The subspace kind actually trained (baselines are points).
    pub fn kind(&self) -> SubspaceKind {
        self.subspace.kind()
    }

    /// Compression spec to evaluate with (no warmup: training has ended).
    pub fn eval_spec(&self) -> Result<CompressionSpec, RunError> {
        let mut spec = self.config.run_spec(1)?.compression;
        spec.warmup = None;
        Ok(spec)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = format!("{}{EPOCHS_KEY} = {}\n", self.config.to_text(), self.epochs_done);
        Checkpoint::from_run(&self.model, &self.subspace, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, RunError> {
        let mut config = RunConfig::default();
        let mut epochs_done = None;
        for (k, v, _) in parse_pairs(&ckpt.metadata)? {
            if k == EPOCHS_KEY {
                epochs_done = Some(v.parse().map_err(|_| {
                    CheckpointError::Format(format!("bad {EPOCHS_KEY} value `{v}`"))
                })?);
            } else {
                config.set(&k, &v)?;
            }
        }
        let epochs_done =
            epochs_done.ok_or_else(|| CheckpointError::Format(format!("metadata lacks {EPOCHS_KEY}")))?;
        let splits_shape = sample_shape(&config)?;
        let mut model = build_model(config.model_config(&splits_shape)?)?;
        let subspace = ckpt.restore(&mut model, config.subspace, config.beta)?;
        Ok(Self {
            config,
            model,
            subspace,
            epochs_done,
        })
    }
}

/// Shape of one input sample as the model sees it, without loading data
/// twice for synthetic sources.
pub fn sample_shape(cfg: &RunConfig) -> Result<Vec<usize>, RunError> {
    use crate::config::{Arch, DataSource};
    let image = match cfg.data {
        DataSource::Clusters => return Ok(vec![cfg.dims]),
        DataSource::Stripes => cfg.image_shape.to_vec(),
        DataSource::Idx | DataSource::Cifar => {
            let d = cfg.load_data()?;
            return Ok(d.train.sample_shape().to_vec());
        }
    };
    Ok(match cfg.arch {
        Arch::Mlp => vec![image.iter().product()],
        Arch::SmallCnn => image,
    })
}

/// Builds the untrained model and subspace for `cfg` and samples of shape
/// `sample_shape`.
pub fn init_run(cfg: &RunConfig, sample_shape: &[usize]) -> Result<TrainedRun, RunError> {
    cfg.validate()?;
    let model = build_model(cfg.model_config(sample_shape)?)?;
    let kind = if cfg.is_baseline() { SubspaceKind::Point } else { cfg.subspace };
    let subspace = Subspace::init(&model, kind, cfg.seed, cfg.beta);
    Ok(TrainedRun {
        config: cfg.clone(),
        model,
        subspace,
        epochs_done: 0,
    })
}

/// Trains `cfg` on `splits.train`. `on_epoch` sees the run after every epoch
/// (used for periodic checkpoints).
pub fn train_run(
    cfg: &RunConfig,
    splits: &Splits,
    mut on_epoch: impl FnMut(&TrainedRun) -> Result<(), RunError>,
) -> Result<(TrainedRun, History), RunError> {
    let mut run = init_run(cfg, splits.train.sample_shape())?;
    let total = steps_per_epoch(&splits.train, cfg.train.batch_size) * cfg.train.epochs as u64;
    let spec = cfg.run_spec(total)?;
    let mut hook_err = None;
    let mut hook = |epoch: usize, model: &Model, subspace: &Subspace| {
        let snapshot = TrainedRun {
            config: cfg.clone(),
            model: model.clone(),
            subspace: subspace.clone(),
            epochs_done: epoch,
        };
        on_epoch(&snapshot).map_err(|e| {
            let msg = e.to_string();
            hook_err = Some(e);
            TrainError::Config(msg)
        })
    };
    let result = train_subspace(&mut run.model, &mut run.subspace, &spec, &splits.train, Some(&mut hook));
    if let Some(e) = hook_err {
        return Err(e);
    }
    let history = result?;
    run.epochs_done = cfg.train.epochs;
    Ok((run, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_text(
            "data.dims = 6\ndata.train_per_class = 6\ndata.test_per_class = 2\n\
             model.widths = 16,16\nnorm.groups = 4\ntrain.epochs = 2\ntrain.warmup_epochs = 1\ntrain.batch_size = 16",
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_restores_the_run() {
        let cfg = tiny();
        let splits = cfg.load_data().unwrap();
        let mut seen = Vec::new();
        let (run, h) = train_run(&cfg, &splits, |r| {
            seen.push(r.epochs_done);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [1, 2]);
        assert!(!h.rows.is_empty());
        let bytes = run.to_checkpoint().encode().unwrap();
        let back = TrainedRun::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, run);
        let (again, _) = train_run(&cfg, &splits, |_| Ok(())).unwrap();
        assert_eq!(again.to_checkpoint().encode().unwrap(), bytes);
    }

    #[test]
    fn baseline_configs_train_points() {
        let mut cfg = tiny();
        cfg.set("baseline.kind", "fixed_topk").unwrap();
        cfg.set("subspace.kind", "point").unwrap();
        let splits = cfg.load_data().unwrap();
        let (run, _) = train_run(&cfg, &splits, |_| Ok(())).unwrap();
        assert_eq!(run.kind(), SubspaceKind::Point);
        assert_eq!(run.eval_spec().unwrap().warmup, None);
    }

    #[test]
    fn hook_errors_stop_training() {
        let cfg = tiny();
        let splits = cfg.load_data().unwrap();
        let err = train_run(&cfg, &splits, |_| Err(ConfigError::Invalid("disk full".into()).into())).unwrap_err();
        assert!(err.to_string().contains("disk full"));
    }

    #[test]
    fn metadata_must_record_epochs() {
        let cfg = tiny();
        let run = init_run(&cfg, &[6]).unwrap();
        let mut c = run.to_checkpoint();
        c.metadata = cfg.to_text();
        assert!(TrainedRun::from_checkpoint(&c).is_err());
    }
}
