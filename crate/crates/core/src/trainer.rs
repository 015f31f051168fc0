//! Two-stage training.
//!
//! Stage 1 trains the encoders with the baseline objective and in-batch
//! negatives. The stage-1 features are then mined once for hard positives and
//! stage 2 continues from the stage-1 weights with the hard-positive objective.
//!
//! All randomness derives from `TrainConfig::seed`: epoch `e` of the overall
//! schedule (stage-2 epochs continue the count) shuffles and samples from its
//! own ChaCha stream, so a run can be split at any epoch boundary and resumed
//! to an identical trajectory.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{DEFAULT_EPSILON, DEFAULT_TAU};
use crate::encoders::{encode_audio, encode_vision, EncoderParams, EncoderShape};
use crate::error::{Error, Result};
use crate::mining::{build_index, pool_vision, random_index, MiningIndex};
use crate::objective::{batch_loss, evaluate_batch, loss_grad, AnchorPlan, ObjectiveConfig};
use crate::synthdata::{generate, Dataset, FeatureRecord, FeatureSet, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Vanilla,
    Hp,
    RandomHp,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::RandomHp, Mode::Hp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Hp => "hp",
            Mode::RandomHp => "random_hp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "hp" => Ok(Mode::Hp),
            "random_hp" => Ok(Mode::RandomHp),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode {other:?} (expected vanilla, hp or random_hp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub tau: f64,
    /// Mined positives per modality; clamped to `n - 1`.
    pub k: usize,
    pub seed: u64,
    pub stop_grad_mask: bool,
    /// Re-mine every this many stage-2 epochs; 0 mines once.
    pub remine_every: usize,
    pub mode: Mode,
    /// Embedding width `c`.
    pub channels: usize,
    /// Vision patch size `p`.
    pub patch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 30,
            epochs_stage2: 30,
            batch_size: 16,
            learning_rate: 0.05,
            epsilon: DEFAULT_EPSILON,
            tau: DEFAULT_TAU,
            k: 19,
            seed: 0,
            stop_grad_mask: false,
            remine_every: 0,
            mode: Mode::Hp,
            channels: 16,
            patch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size < 3 {
            return bad("batch_size must be at least 3");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() || !self.epsilon.is_finite() {
            return bad("tau must be positive and epsilon finite");
        }
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.channels == 0 || self.patch == 0 {
            return bad("channels and patch must be positive");
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            epsilon: self.epsilon,
            tau: self.tau,
            stop_grad_mask: self.stop_grad_mask,
        }
    }

    /// Encoder shape for a dataset under this configuration.
    pub fn encoder_shape(&self, data: &Dataset) -> Result<EncoderShape> {
        let (image_h, image_w) = data
            .image_size()
            .ok_or_else(|| Error::InvalidConfig("empty dataset".into()))?;
        let (audio_h, audio_w) = data.audio_size().unwrap();
        let shape = EncoderShape {
            channels: self.channels,
            patch: self.patch,
            image_h,
            image_w,
            audio_h,
            audio_w,
        };
        shape.validate()?;
        Ok(shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRecord {
    pub stage: u8,
    /// Epoch index in the overall schedule.
    pub epoch: usize,
    /// Step within the epoch.
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn logs_to_csv(logs: &[TrainLogRecord]) -> String {
    let mut out = String::from("stage,epoch,step,loss,grad_norm\n");
    for r in logs {
        out.push_str(&format!("{},{},{},{},{}\n", r.stage, r.epoch, r.step, r.loss, r.grad_norm));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub logs: Vec<TrainLogRecord>,
    /// The mining index in effect at the end of stage 2, if any.
    pub index: Option<MiningIndex>,
}

/// Which objective a block of epochs optimizes.
#[derive(Debug, Clone)]
pub enum StageObjective {
    /// Base positive only; every other batch member is a negative.
    Baseline,
    /// Sampled hard positives from the index; negatives are batch members in `N_i`.
    HardPositive(MiningIndex),
}

/// `params - learning_rate * grads`.
pub fn sgd_step(params: &EncoderParams, grads: &EncoderParams, learning_rate: f64) -> Result<EncoderParams> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let mut next = params.clone();
    next.add_scaled(grads, -learning_rate)?;
    Ok(next)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Minibatch plans for one shuffled batch.
fn plan_batch(batch: &[usize], objective: &StageObjective, rng: &mut ChaCha8Rng) -> Vec<AnchorPlan> {
    batch
        .iter()
        .map(|&i| match objective {
            StageObjective::Baseline => AnchorPlan {
                anchor: i,
                hard_audio: None,
                hard_vision: None,
                negatives: batch.iter().copied().filter(|&l| l != i).collect(),
            },
            StageObjective::HardPositive(index) => {
                let pa = &index.pos_audio[i];
                let pv = &index.pos_vision[i];
                let j = pa[rng.random_range(0..pa.len())];
                let k = pv[rng.random_range(0..pv.len())];
                AnchorPlan {
                    anchor: i,
                    hard_audio: Some(j),
                    hard_vision: Some(k),
                    negatives: batch
                        .iter()
                        .copied()
                        .filter(|&l| l != i && index.is_negative(i, l))
                        .collect(),
                }
            }
        })
        .collect()
}

/// Runs the given epochs of the overall schedule from `params`, appending to `logs`.
pub fn run_epochs(
    data: &Dataset,
    mut params: EncoderParams,
    cfg: &TrainConfig,
    objective: &StageObjective,
    epochs: Range<usize>,
    stage: u8,
    logs: &mut Vec<TrainLogRecord>,
) -> Result<EncoderParams> {
    let obj = cfg.objective();
    let n = data.len();
    for epoch in epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let plans = plan_batch(batch, objective, &mut rng);
            let diverged = || Error::Diverged {
                stage,
                epoch,
                step,
                last_finite: Box::new(params.clone()),
            };
            let (loss, grads) = match loss_grad(&params, data, &plans, &obj) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            let next = sgd_step(&params, &grads, cfg.learning_rate)?;
            if !next.is_finite() {
                return Err(diverged());
            }
            logs.push(TrainLogRecord {
                stage,
                epoch,
                step,
                loss,
                grad_norm: grads.l2_norm(),
            });
            params = next;
        }
    }
    Ok(params)
}

fn check_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    data.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "dataset of {} samples is smaller than batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    Ok(())
}

pub fn initial_params(data: &Dataset, cfg: &TrainConfig) -> Result<EncoderParams> {
    EncoderParams::init(cfg.encoder_shape(data)?, cfg.seed)
}

/// Stage 1: baseline objective from seeded initial weights.
pub fn train_stage1(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_dataset(data, cfg)?;
    let mut logs = Vec::new();
    let params = run_epochs(
        data,
        initial_params(data, cfg)?,
        cfg,
        &StageObjective::Baseline,
        0..cfg.epochs_stage1,
        1,
        &mut logs,
    )?;
    Ok(TrainOutcome {
        params,
        logs,
        index: None,
    })
}

/// Stage 2 from stage-1 weights. `index` overrides mining for [`Mode::Hp`];
/// [`Mode::RandomHp`] always draws a random index and [`Mode::Vanilla`]
/// continues the baseline objective.
pub fn train_stage2(
    data: &Dataset,
    stage1: &EncoderParams,
    index: Option<&MiningIndex>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_dataset(data, cfg)?;
    if let Some(index) = index {
        if index.n != data.len() {
            return Err(Error::InvalidConfig(format!(
                "index covers {} samples, dataset has {}",
                index.n,
                data.len()
            )));
        }
    }
    let start = cfg.epochs_stage1;
    let end = start + cfg.epochs_stage2;
    let mut logs = Vec::new();
    let mut params = stage1.clone();
    let k = cfg.k.min(data.len() - 1);
    let objective_index = match cfg.mode {
        Mode::Vanilla => None,
        Mode::RandomHp => Some(random_index(data.len(), k, cfg.seed)?),
        Mode::Hp => Some(match index {
            Some(ix) => ix.clone(),
            None => mine(stage1, data, k)?,
        }),
    };
    let Some(mut current) = objective_index else {
        params = run_epochs(data, params, cfg, &StageObjective::Baseline, start..end, 2, &mut logs)?;
        return Ok(TrainOutcome {
            params,
            logs,
            index: None,
        });
    };
    let block = if cfg.mode == Mode::Hp && cfg.remine_every > 0 {
        cfg.remine_every
    } else {
        cfg.epochs_stage2.max(1)
    };
    let mut epoch = start;
    while epoch < end {
        if epoch > start && cfg.mode == Mode::Hp {
            current = mine(&params, data, k)?;
        }
        let stop = (epoch + block).min(end);
        let objective = StageObjective::HardPositive(current.clone());
        params = run_epochs(data, params, cfg, &objective, epoch..stop, 2, &mut logs)?;
        epoch = stop;
    }
    Ok(TrainOutcome {
        params,
        logs,
        index: Some(current),
    })
}

/// Result of the full two-stage schedule.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
}

impl TrainRun {
    pub fn logs(&self) -> Vec<TrainLogRecord> {
        self.stage1.logs.iter().chain(&self.stage2.logs).copied().collect()
    }
}

/// Stage 1, mining according to `cfg.mode`, then stage 2.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    let stage1 = train_stage1(data, cfg)?;
    let stage2 = train_stage2(data, &stage1.params, None, cfg)?;
    Ok(TrainRun { stage1, stage2 })
}

pub fn extract_features(params: &EncoderParams, data: &Dataset) -> Result<FeatureSet> {
    let records = data
        .samples
        .iter()
        .map(|s| {
            Ok(FeatureRecord {
                id: s.id,
                audio: encode_audio(params, &s.audio)?,
                vision: encode_vision(params, &s.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(records)
}

/// Mines an index from precomputed features.
pub fn mine_features(features: &FeatureSet, k: usize) -> Result<MiningIndex> {
    let audio: Vec<Vec<f64>> = features.records.iter().map(|r| r.audio.0.clone()).collect();
    let pooled: Vec<Vec<f64>> = features.records.iter().map(|r| pool_vision(&r.vision)).collect();
    build_index(&audio, &pooled, k)
}

/// Mines an index from the features of `params` on `data`.
pub fn mine(params: &EncoderParams, data: &Dataset, k: usize) -> Result<MiningIndex> {
    mine_features(&extract_features(params, data)?, k)
}

/// Tiny instance used by the gradient checker: 4 samples, `c = 4`, `h = w = 2`.
pub fn tiny_instance(seed: u64) -> Result<(Dataset, TrainConfig)> {
    let data = generate(&SynthConfig {
        n_samples: 4,
        n_classes: 2,
        image_size: (4, 4),
        audio_size: (2, 2),
        object_size: 2,
        distractors: 0,
        noise_std: 0.5,
        seed,
    })?;
    let cfg = TrainConfig {
        batch_size: 4,
        k: 1,
        seed,
        channels: 4,
        patch: 2,
        ..TrainConfig::default()
    };
    Ok((data, cfg))
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that entries that are both ~0 do not blow up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Every anchor gets one hard-positive audio and image from a seeded random
/// index and contrasts against all other samples.
pub fn grad_check_plans(n: usize, seed: u64) -> Result<Vec<AnchorPlan>> {
    let index = random_index(n, 1, seed)?;
    Ok((0..n)
        .map(|i| AnchorPlan {
            anchor: i,
            hard_audio: Some(index.pos_audio[i][0]),
            hard_vision: Some(index.pos_vision[i][0]),
            negatives: (0..n).filter(|&l| l != i).collect(),
        })
        .collect())
}

/// Maximum relative error between the analytic gradient of the objective and
/// central finite differences, over all parameters, at the seeded initial weights.
pub fn grad_check(data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    grad_check_with(&initial_params(data, cfg)?, data, cfg)
}

pub fn grad_check_with(params: &EncoderParams, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let plans = grad_check_plans(data.len(), cfg.seed)?;
    let obj = cfg.objective();
    let (_, analytic) = loss_grad(params, data, &plans, &obj)?;
    // With a stopped mask the reference function holds the masks at their base values.
    let frozen = if cfg.stop_grad_mask {
        Some(evaluate_batch(params, data, &plans, &obj, false, None)?.masks)
    } else {
        None
    };
    let eval = |p: &EncoderParams| -> Result<f64> {
        match &frozen {
            Some(m) => Ok(evaluate_batch(p, data, &plans, &obj, false, Some(m))?.loss),
            None => batch_loss(p, data, &plans, &obj),
        }
    };
    let base = params.to_flat();
    let mut worst: f64 = 0.0;
    for (idx, &an) in analytic.to_flat().iter().enumerate() {
        let mut plus = base.clone();
        plus[idx] += GRAD_CHECK_STEP;
        let mut minus = base.clone();
        minus[idx] -= GRAD_CHECK_STEP;
        let fp = eval(&EncoderParams::from_flat(params.shape, &plus)?)?;
        let fm = eval(&EncoderParams::from_flat(params.shape, &minus)?)?;
        let numeric = (fp - fm) / (2.0 * GRAD_CHECK_STEP);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite difference"));
        }
        worst = worst.max(relative_error(an, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_data(seed: u64) -> Dataset {
        generate(&SynthConfig {
            n_samples: 12,
            n_classes: 3,
            image_size: (8, 8),
            audio_size: (3, 3),
            object_size: 4,
            distractors: 0,
            noise_std: 0.3,
            seed,
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs_stage1: 2,
            epochs_stage2: 2,
            batch_size: 4,
            k: 2,
            channels: 4,
            patch: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("ours".parse::<Mode>().is_err());
    }

    #[test]
    fn sgd_examples() {
        let (data, cfg) = tiny_instance(1).unwrap();
        let p = initial_params(&data, &cfg).unwrap();
        let zero = EncoderParams::zeros(p.shape).unwrap();
        assert_eq!(sgd_step(&p, &zero, 0.5).unwrap(), p);
        let z = sgd_step(&p, &p, 1.0).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let g = EncoderParams::init(p.shape, 99).unwrap();
        let s = sgd_step(&p, &g, 0.25).unwrap();
        for ((a, b), c) in p.iter().zip(g.iter()).zip(s.iter()) {
            assert_eq!(*c, a - 0.25 * b);
        }
        let mut bad = g.clone();
        bad.audio_b[0] = f64::NAN;
        assert!(sgd_step(&p, &bad, 0.1).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = small_data(1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_cfg()
        };
        let out = train_stage1(&data, &cfg).unwrap();
        assert_eq!(out.params, initial_params(&data, &cfg).unwrap());
    }

    #[test]
    fn stage1_is_deterministic() {
        let data = small_data(2);
        let a = train_stage1(&data, &small_cfg()).unwrap();
        let b = train_stage1(&data, &small_cfg()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.logs, b.logs);
    }

    #[test]
    fn vanilla_stage2_continues_stage1_exactly() {
        let data = small_data(4);
        let cfg = TrainConfig {
            mode: Mode::Vanilla,
            ..small_cfg()
        };
        let s1 = train_stage1(&data, &cfg).unwrap();
        let s2 = train_stage2(&data, &s1.params, None, &cfg).unwrap();
        let long = train_stage1(
            &data,
            &TrainConfig {
                epochs_stage1: 4,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(s2.params, long.params);
        let tail: Vec<f64> = long.logs[s1.logs.len()..].iter().map(|r| r.loss).collect();
        assert_eq!(tail, s2.logs.iter().map(|r| r.loss).collect::<Vec<_>>());
    }

    #[test]
    fn saturated_k_has_no_negatives() {
        let data = small_data(5);
        let cfg = TrainConfig {
            k: 100,
            stop_grad_mask: true,
            ..small_cfg()
        };
        let s1 = train_stage1(&data, &cfg).unwrap();
        let s2 = train_stage2(&data, &s1.params, None, &cfg).unwrap();
        assert!(s2.logs.iter().all(|r| r.loss == 0.0 && r.grad_norm == 0.0));
        assert_eq!(s2.params, s1.params);
    }

    #[test]
    fn dataset_smaller_than_batch_is_rejected() {
        let data = small_data(1);
        let cfg = TrainConfig {
            batch_size: 20,
            ..small_cfg()
        };
        assert!(train_stage1(&data, &cfg).is_err());
    }

    #[test]
    fn divergence_reports_last_finite_params() {
        let mut data = small_data(6);
        data.samples[5].audio.data[0] = f64::NAN;
        match train_stage1(&data, &small_cfg()) {
            Err(Error::Diverged { last_finite, stage, .. }) => {
                assert_eq!(stage, 1);
                assert!(last_finite.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn remining_changes_nothing_when_disabled() {
        let data = small_data(7);
        let cfg = small_cfg();
        let s1 = train_stage1(&data, &cfg).unwrap();
        let once = train_stage2(&data, &s1.params, None, &cfg).unwrap();
        let every = train_stage2(
            &data,
            &s1.params,
            None,
            &TrainConfig {
                remine_every: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(once.logs.len(), every.logs.len());
        assert_eq!(once.logs[..3], every.logs[..3]);
    }

    #[test]
    fn log_csv_header() {
        let csv = logs_to_csv(&[TrainLogRecord {
            stage: 1,
            epoch: 0,
            step: 2,
            loss: 0.5,
            grad_norm: 1.25,
        }]);
        assert_eq!(csv, "stage,epoch,step,loss,grad_norm\n1,0,2,0.5,1.25\n");
    }
}
