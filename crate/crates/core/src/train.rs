//! CTC training: limited linear learning-rate decay, Adam, common and
//! ratio-PER early stopping, checkpoints and per-epoch metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{ctc_loss, greedy_decode_ids, min_frames};
use crate::data::Example;
use crate::metrics::{error_rate, Granularity};
use crate::model::{Model, ModelConfig, ModelError, ParameterSet};
use crate::seed;
use crate::specaugment::{self, AugmentSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no usable {0} examples")]
    DataEmpty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `e_k = (1 − k/τ)·e0 + (k/τ)·e_τ` for `k ≤ τ`, then `e_τ`, with `e_τ = e0/100`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub e0: f64,
    pub tau: u32,
}

impl ScheduleConfig {
    pub fn e_tau(&self) -> f64 {
        0.01 * self.e0
    }
}

/// ```
/// use phonorec::train::{lr_at, ScheduleConfig};
/// let s = ScheduleConfig { e0: 5e-4, tau: 35 };
/// assert_eq!(lr_at(&s, 0), 5e-4);
/// assert_eq!(lr_at(&s, 35), 5e-6);
/// assert_eq!(lr_at(&s, 70), 5e-6);
/// ```
pub fn lr_at(s: &ScheduleConfig, k: u32) -> f64 {
    if k >= s.tau {
        return s.e_tau();
    }
    let alpha = k as f64 / s.tau as f64;
    (1.0 - alpha) * s.e0 + alpha * s.e_tau()
}

#[derive(Debug, Error, PartialEq)]
#[error("validation PER is zero")]
pub struct DivZero;

pub fn ratio_per(train_per: f64, val_per: f64) -> Result<f64, DivZero> {
    if val_per == 0.0 {
        Err(DivZero)
    } else {
        Ok(train_per / val_per)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMode {
    Common,
    Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub mode: StopMode,
    pub patience: usize,
    pub min_rel_improve: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Keep training after the ratio zone closes, until the common criterion
    /// stops the run, so both checkpoints come from one run.
    pub both_checkpoints: bool,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            mode: StopMode::Ratio,
            patience: 6,
            min_rel_improve: 1e-3,
            ratio_lo: 0.98,
            ratio_hi: 1.02,
            both_checkpoints: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decision {
    Continue,
    /// The epoch is inside the ratio zone and has the zone's lowest val PER
    /// so far; its weights are the zone checkpoint candidate.
    ZoneImproved,
    /// The zone closed: persist the weights of `epoch`.
    SaveZoneCheckpoint {
        epoch: usize,
        val_per: f64,
        stop: bool,
    },
    Stop,
}

impl Decision {
    pub fn label(&self) -> &'static str {
        match self {
            Decision::Continue => "continue",
            Decision::ZoneImproved => "zone_improved",
            Decision::SaveZoneCheckpoint { stop: true, .. } => "save_zone_checkpoint_stop",
            Decision::SaveZoneCheckpoint { stop: false, .. } => "save_zone_checkpoint",
            Decision::Stop => "stop",
        }
    }

    pub fn stops(&self) -> bool {
        matches!(
            self,
            Decision::Stop | Decision::SaveZoneCheckpoint { stop: true, .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub config: EarlyStopConfig,
    pub best_val_per: f64,
    pub stale_epochs: usize,
    /// `(epoch, val_per)` of the currently open zone.
    pub zone: Vec<(usize, f64)>,
    /// Every closed zone's selected `(epoch, val_per)`.
    pub zone_history: Vec<(usize, f64)>,
    epoch: usize,
}

impl EarlyStopState {
    pub fn new(config: EarlyStopConfig) -> Self {
        assert!(config.ratio_lo < config.ratio_hi && config.patience >= 1);
        Self {
            config,
            best_val_per: f64::INFINITY,
            stale_epochs: 0,
            zone: Vec::new(),
            zone_history: Vec::new(),
            epoch: 0,
        }
    }

    /// Lowest-val-PER epoch of the open zone (earliest on ties).
    pub fn zone_best(&self) -> Option<(usize, f64)> {
        self.zone
            .iter()
            .copied()
            .reduce(|a, b| if b.1 < a.1 { b } else { a })
    }

    fn close_zone(&mut self, stop: bool) -> Decision {
        let (epoch, val_per) = self.zone_best().expect("open zone");
        self.zone.clear();
        self.zone_history.push((epoch, val_per));
        Decision::SaveZoneCheckpoint {
            epoch,
            val_per,
            stop,
        }
    }
}

/// Feeds one finished epoch (numbered from 1) to the state machine.
///
/// The common criterion counts epochs whose val PER fails to improve on
/// the best so far by the relative margin, and stops after `patience` of
/// them in a row. Ratio mode tracks epochs whose `train/val` ratio lies in
/// `[ratio_lo, ratio_hi]`; when the ratio leaves that zone the zone's best
/// epoch is checkpointed and training stops. The common criterion stays
/// active in ratio mode as a backstop. A zero val PER counts as ratio 1.
pub fn step_early_stop(es: &mut EarlyStopState, train_per: f64, val_per: f64) -> Decision {
    es.epoch += 1;
    let improved = es.best_val_per.is_infinite()
        || val_per < es.best_val_per * (1.0 - es.config.min_rel_improve);
    if improved {
        es.best_val_per = val_per;
        es.stale_epochs = 0;
    } else {
        es.stale_epochs += 1;
    }
    let patience_out = es.stale_epochs >= es.config.patience;
    if es.config.mode == StopMode::Common {
        return if patience_out {
            Decision::Stop
        } else {
            Decision::Continue
        };
    }
    let ratio = ratio_per(train_per, val_per).unwrap_or(1.0);
    let in_zone = (es.config.ratio_lo..=es.config.ratio_hi).contains(&ratio);
    if in_zone {
        let prev_best = es.zone_best().map(|b| b.1);
        es.zone.push((es.epoch, val_per));
        if patience_out {
            return es.close_zone(true);
        }
        return match prev_best {
            Some(b) if val_per >= b => Decision::Continue,
            _ => Decision::ZoneImproved,
        };
    }
    if !es.zone.is_empty() {
        return es.close_zone(patience_out || !es.config.both_checkpoints);
    }
    if patience_out {
        Decision::Stop
    } else {
        Decision::Continue
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParameterSet,
    v: ParameterSet,
}

impl Adam {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one update, then rounds parameters to f32 precision.
    pub fn update(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let tensors = params
            .tensors
            .values_mut()
            .zip(grads.tensors.values())
            .zip(self.m.tensors.values_mut().zip(self.v.tensors.values_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        params.round_to_f32();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_fm")]
    pub fm: usize,
    #[serde(default = "default_tm")]
    pub tm: f64,
}

fn default_fm() -> usize {
    14
}

fn default_tm() -> f64 {
    0.0625
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            fm: default_fm(),
            tm: default_tm(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub early_stop: EarlyStopConfig,
    #[serde(default)]
    pub specaugment: SpecAugmentConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Share of training items scored for the per-epoch train PER.
    #[serde(default = "default_train_per_fraction")]
    pub train_per_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    8
}

fn default_epochs() -> usize {
    100
}

fn default_train_per_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_per: f64,
    pub val_per: f64,
    pub ratio_per: f64,
    pub decision: Decision,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_per,val_per,ratio_per,decision";

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_per,
            r.val_per,
            r.ratio_per,
            r.decision.label()
        );
    }
    s
}

/// Everything needed to resume or inspect a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub early_stop: EarlyStopState,
    pub schedule: ScheduleConfig,
    /// Model with the lowest val PER seen.
    pub best_val: Option<(usize, Model)>,
    /// Model saved when a ratio zone closed.
    pub ratio_zone: Option<(usize, Model)>,
}

/// Corpus PER of greedy decodes in eval mode.
pub fn evaluate_per(model: &Model, examples: &[&Example]) -> Result<f64, TrainError> {
    let hyps: Vec<Vec<u32>> = examples
        .par_iter()
        .map(|e| model.infer(&e.features).map(|lat| greedy_decode_ids(&lat)))
        .collect::<Result<_, _>>()?;
    let refs: Vec<Vec<u32>> = examples.iter().map(|e| e.target.clone()).collect();
    Ok(error_rate(&refs, &hyps, Granularity::Phoneme)
        .map(|r| r.rate)
        .unwrap_or(0.0))
}

fn feasible(e: &Example) -> bool {
    ModelConfig::output_frames(e.features.n_frames) >= min_frames(&e.target)
}

/// Summed loss and gradients of `items`, computed per item in parallel and
/// reduced in order.
pub fn batch_gradient(
    model: &Model,
    items: &[&Example],
    aug: Option<&AugmentSpec>,
    seed_value: u64,
    stream: u64,
) -> Result<(f64, ParameterSet), TrainError> {
    let results: Vec<(f64, ParameterSet)> = items
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let item = stream.wrapping_add(i as u64);
            let masked;
            let feats = match aug {
                Some(a) => {
                    masked = specaugment::mask(
                        &e.features,
                        a,
                        &mut seed::rng(seed_value, "specaugment", item),
                    )
                    .0;
                    &masked
                }
                None => &e.features,
            };
            let mut drop_rng = seed::rng(seed_value, "dropout", item);
            let (lat, tape) = model.forward(feats, Some(&mut drop_rng))?;
            let r = ctc_loss(&lat, &e.target).expect("targets are pre-filtered for feasibility");
            Ok((r.neg_log_likelihood, model.backward(tape, &r.grad)))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        grads.add_assign(g);
    }
    Ok((loss, grads))
}

/// Trains on `train`, selecting and stopping on `val`. When `out_dir` is
/// given, `metrics.csv`, `best_val.phrc` and `ratio_zone.phrc` are written
/// there as the run progresses.
pub fn train_loop(
    opts: &TrainOptions,
    train: &[Example],
    val: &[Example],
    out_dir: Option<&Path>,
) -> Result<TrainState, TrainError> {
    let usable = |set: &[Example], name: &str| -> Vec<usize> {
        (0..set.len())
            .filter(|&i| {
                let ok = feasible(&set[i]);
                if !ok {
                    warn!(
                        "skipping {name} item {}: too few frames for its target",
                        set[i].id
                    );
                }
                ok
            })
            .collect()
    };
    let train_idx = usable(train, "train");
    let val_idx = usable(val, "val");
    if train_idx.is_empty() {
        return Err(TrainError::DataEmpty("training"));
    }
    if val_idx.is_empty() {
        return Err(TrainError::DataEmpty("validation"));
    }
    let val_set: Vec<&Example> = val_idx.iter().map(|&i| &val[i]).collect();
    let mut sub = train_idx.clone();
    sub.shuffle(&mut seed::rng(opts.seed, "train-per-subset", 0));
    let n_sub = ((train_idx.len() as f64 * opts.train_per_fraction).ceil() as usize)
        .clamp(1, train_idx.len());
    sub.truncate(n_sub);
    sub.sort_unstable();
    let train_subset: Vec<&Example> = sub.iter().map(|&i| &train[i]).collect();

    let model = Model::build(opts.model.clone(), opts.seed)?;
    let mut state = TrainState {
        optimizer: Adam::new(&model.params),
        model,
        epoch: 0,
        history: Vec::new(),
        early_stop: EarlyStopState::new(opts.early_stop.clone()),
        schedule: opts.schedule,
        best_val: None,
        ratio_zone: None,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let aug = opts.specaugment.enabled.then(|| AugmentSpec {
        fm: opts.specaugment.fm,
        tm: opts.specaugment.tm,
        ..Default::default()
    });
    let batch = opts.batch_size.max(1);
    let mut zone_candidate: Option<Model> = None;

    while state.epoch < opts.max_epochs {
        let k = state.epoch as u32;
        let lr = lr_at(&opts.schedule, k);
        let mut order = train_idx.clone();
        order.shuffle(&mut seed::rng(opts.seed, "shuffle", k as u64));
        let mut total_loss = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let items: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let stream = ((k as u64) << 32) | (b * batch) as u64;
            let (loss, mut grads) =
                batch_gradient(&state.model, &items, aug.as_ref(), opts.seed, stream)?;
            grads.scale(1.0 / items.len() as f64);
            state.optimizer.update(&mut state.model.params, &grads, lr);
            total_loss += loss;
        }
        state.epoch += 1;
        let train_loss = total_loss / order.len() as f64;
        let train_per = evaluate_per(&state.model, &train_subset)?;
        let val_per = evaluate_per(&state.model, &val_set)?;
        let ratio = ratio_per(train_per, val_per).unwrap_or(1.0);
        let decision = step_early_stop(&mut state.early_stop, train_per, val_per);
        info!(
            "epoch {} lr {lr:.3e} loss {train_loss:.4} train PER {train_per:.4} val PER {val_per:.4} ratio {ratio:.4} {}",
            state.epoch,
            decision.label()
        );

        let best_so_far = state
            .best_val
            .as_ref()
            .is_none_or(|(e, _)| val_per < state.history[*e - 1].val_per);
        if best_so_far {
            state.best_val = Some((state.epoch, state.model.clone()));
            if let Some(dir) = out_dir {
                save(&state.model, &dir.join("best_val.phrc"))?;
            }
        }
        match decision {
            Decision::ZoneImproved => zone_candidate = Some(state.model.clone()),
            Decision::SaveZoneCheckpoint { epoch, .. } => {
                let m = if epoch == state.epoch {
                    state.model.clone()
                } else {
                    zone_candidate.take().expect("zone candidate recorded")
                };
                if let Some(dir) = out_dir {
                    save(&m, &dir.join("ratio_zone.phrc"))?;
                }
                state.ratio_zone = Some((epoch, m));
                zone_candidate = None;
            }
            _ => {}
        }
        state.history.push(EpochRecord {
            epoch: state.epoch,
            lr,
            train_loss,
            train_per,
            val_per,
            ratio_per: ratio,
            decision,
        });
        if let Some(dir) = out_dir {
            let path = dir.join("metrics.csv");
            fs::write(&path, metrics_csv(&state.history)).map_err(|source| TrainError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        if decision.stops() {
            break;
        }
    }
    // a zone still open when the epoch budget runs out is closed here
    if let (Some((epoch, _)), Some(m)) = (state.early_stop.zone_best(), zone_candidate) {
        if let Some(dir) = out_dir {
            save(&m, &dir.join("ratio_zone.phrc"))?;
        }
        state.ratio_zone = Some((epoch, m));
    }
    Ok(state)
}

fn save(model: &Model, path: &PathBuf) -> Result<(), TrainError> {
    model.save(path).map_err(TrainError::from)
}
