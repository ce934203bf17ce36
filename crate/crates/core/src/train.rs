//! Mini-batch Adam training.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::HandSample;
use crate::error::{Error, Result};
use crate::losses::{set_loss, total_loss};
use crate::model::HandNet;
use crate::params::{Bound, NetworkParams};
use crate::tensor::{Adam, Tape, Var};

/// Mean losses over one epoch and the learning rate used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l2d: f64,
    pub l3d: f64,
    pub lv: f64,
    pub total: f64,
}

impl fmt::Display for EpochLog {
    /// Shortest round-trip float formatting, so equal lines mean equal bits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={} l2d={} l3d={} lv={} total={}",
            self.epoch, self.lr, self.l2d, self.l3d, self.lv, self.total
        )
    }
}

/// Loss terms of one sample on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub l2d: Var,
    pub l3d: Var,
    pub lv: Var,
    pub total: Var,
}

pub fn sample_loss(
    tape: &mut Tape,
    net: &HandNet,
    params: &Bound,
    cfg: &RunConfig,
    sample: &HandSample,
) -> Result<SampleLoss> {
    let image = tape.leaf(&sample.image);
    let out = net.forward(tape, params, image)?;
    let kp = tape.leaf(&sample.kp2d);
    let j3 = tape.leaf(&sample.joints3d);
    let verts = tape.leaf(&sample.vertices);
    let norm = cfg.per_point_norm;
    let l2d = set_loss(tape, out.kp2d, kp, norm)?;
    let l3d = set_loss(tape, out.joints3d, j3, norm)?;
    let lv = set_loss(tape, out.vertices, verts, norm)?;
    let total = total_loss(tape, l2d, l3d, lv, &cfg.loss)?;
    Ok(SampleLoss { l2d, l3d, lv, total })
}

/// Checks that every sample matches the model's input and output sizes.
pub fn check_samples(cfg: &RunConfig, samples: &[HandSample]) -> Result<()> {
    let m = &cfg.model;
    let s = m.backbone.input_size;
    for smp in samples {
        smp.validate()?;
        let bad = |field: &'static str, detail: String| Error::Validation {
            id: smp.id.clone(),
            field,
            detail,
        };
        if smp.image.shape() != [3, s, s] {
            return Err(bad("image", format!("is {:?}, model expects [3, {s}, {s}]", smp.image.shape())));
        }
        if smp.kp2d.shape()[0] != m.joints {
            return Err(bad("kp2d", format!("has {} joints, model has {}", smp.kp2d.shape()[0], m.joints)));
        }
        if smp.vertices.shape()[0] != m.vertices {
            return Err(bad(
                "vertices",
                format!("has {} rows, model has {}", smp.vertices.shape()[0], m.vertices),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub best: NetworkParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains from `init` and reports each epoch to `on_epoch`. Deterministic
/// for a fixed configuration, data and initial parameters.
pub fn train(
    cfg: &RunConfig,
    net: &HandNet,
    samples: &[HandSample],
    init: NetworkParams,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    check_samples(cfg, samples)?;
    cfg.model.check_params(&init)?;

    let mut params = init;
    params.zero_grad();
    let mut adam = Adam::new(cfg.train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut best = (params.clone(), 0, f64::INFINITY);

    for epoch in 0..cfg.train.epochs {
        if cfg.train.shuffle {
            order.shuffle(&mut rng);
        }
        let lr = cfg.train.lr_at(epoch);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.train.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let l = sample_loss(&mut tape, net, &bound, cfg, &samples[i])?;
                for (acc, v) in sums.iter_mut().zip([l.l2d, l.l3d, l.lv, l.total]) {
                    *acc += tape.value(v)[0];
                }
                terms.push(l.total);
            }
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = tape.add(sum, t)?;
            }
            let loss = tape.scale(sum, 1.0 / terms.len() as f64);
            if !tape.value(loss)[0].is_finite() {
                let path = params.first_non_finite().unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite { epoch, path });
            }
            tape.backward(loss)?;
            params.accumulate_grads(&tape, &bound)?;
            if let Some(path) = params.first_non_finite() {
                return Err(Error::NonFinite { epoch, path });
            }
            for (name, t) in params.iter_mut() {
                adam.step(name, t, lr)?;
            }
            params.zero_grad();
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            lr,
            l2d: sums[0] / n,
            l3d: sums[1] / n,
            lv: sums[2] / n,
            total: sums[3] / n,
        };
        if entry.total < best.2 {
            best = (params.clone(), epoch, entry.total);
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        best: best.0,
        best_epoch: best.1,
        log,
    })
}

/// Files written by [`train_to_dir`].
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_file: PathBuf,
    pub outcome: TrainOutcome,
}

/// Runs [`train`] from seeded initial parameters, writing `train_log.txt`,
/// `final.ckpt` and `best.ckpt` into `out_dir`.
pub fn train_to_dir(
    cfg: &RunConfig,
    net: &HandNet,
    samples: &[HandSample],
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    check_samples(cfg, samples)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_file = out_dir.join("train_log.txt");
    let mut log = std::fs::File::create(&log_file).map_err(|e| Error::io(&log_file, e))?;
    let mut write_err = None;
    let outcome = train(cfg, net, samples, cfg.model.init_params(cfg.seed), |e| {
        if let Err(err) = writeln!(log, "{e}") {
            write_err.get_or_insert(err);
        }
        on_epoch(e);
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_file, e));
    }
    let final_checkpoint = out_dir.join("final.ckpt");
    let best_checkpoint = out_dir.join("best.ckpt");
    checkpoint::save(&outcome.params, &final_checkpoint)?;
    checkpoint::save(&outcome.best, &best_checkpoint)?;
    Ok(TrainArtifacts {
        final_checkpoint,
        best_checkpoint,
        log_file,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_samples, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny_run() -> (RunConfig, HandNet, Vec<HandSample>) {
        let mut cfg = RunConfig {
            model: ModelConfig::miniature(),
            ..Default::default()
        };
        cfg.train.epochs = 4;
        cfg.train.lr_boundary = 2;
        cfg.train.batch_size = 2;
        let net = cfg.network().unwrap();
        let samples = synthetic_samples(3, 1, &SynthConfig::new(8, net.regressor.clone())).unwrap();
        (cfg, net, samples)
    }

    #[test]
    fn logs_schedule_and_is_deterministic() {
        let (cfg, net, samples) = tiny_run();
        let a = train(&cfg, &net, &samples, cfg.model.init_params(0), |_| {}).unwrap();
        let b = train(&cfg, &net, &samples, cfg.model.init_params(0), |_| {}).unwrap();
        let lines = |o: &TrainOutcome| o.log.iter().map(ToString::to_string).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        let lrs: Vec<f64> = a.log.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, [5e-4, 5e-4, 5e-5, 5e-5]);
        assert!(a.log[3].total < a.log[0].total);
    }

    #[test]
    fn mismatched_samples_fail_before_training() {
        let (cfg, net, mut samples) = tiny_run();
        samples[1].vertices = crate::tensor::Tensor::zeros([5, 3]);
        let err = train(&cfg, &net, &samples, cfg.model.init_params(0), |_| panic!("trained")).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "vertices", .. }));
    }

    #[test]
    fn non_finite_parameters_abort_with_path() {
        let (cfg, net, samples) = tiny_run();
        let mut init = cfg.model.init_params(0);
        init.get_mut("mesh.vertex.bias").unwrap().data_mut()[1] = f64::NAN;
        match train(&cfg, &net, &samples, init, |_| {}) {
            Err(Error::NonFinite { epoch, path }) => {
                assert_eq!(epoch, 0);
                assert_eq!(path, "mesh.vertex.bias");
            }
            other => panic!("{other:?}"),
        }
    }
}
