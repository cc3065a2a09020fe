//! SGD training with momentum, weight decay and a restarting cosine learning
//! rate; batch inference with decoding and NMS.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{assign, AssignConfig, AssignmentMaps};
use crate::codec::{decode, nms, BBox, DeltaVector, Detection};
use crate::data::{flip_horizontal, flip_vertical, Sample, SynthConfig};
use crate::error::{check_dim, Error, Result};
use crate::eval::{best_f1, default_thresholds, pr_sweep};
use crate::loss::{sigmoid, total_loss, LossConfig, PROB_EPS};
use crate::nn::{ParamSet, Real, Tensor};
use crate::pyramid::{Detector, PyramidConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine period in epochs; the schedule restarts after each period.
    pub anneal_period: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random horizontal/vertical flips per sample.
    pub flip: bool,
    /// Synthetic set sizes used when no annotation file is given.
    pub train_samples: usize,
    pub val_samples: usize,
    /// Validate every this many epochs (0 disables).
    pub val_every: usize,
    /// Write the checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Score floor for validation detections before the threshold sweep.
    pub val_score_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.001,
            lr_min: 1e-5,
            momentum: 0.9,
            weight_decay: 0.0005,
            anneal_period: 20.0,
            batch_size: 8,
            epochs: 60,
            seed: 1,
            flip: true,
            train_samples: 512,
            val_samples: 128,
            val_every: 1,
            checkpoint_every: 0,
            val_score_floor: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::Config(format!("need 0 <= lr_min < lr_max, got {} / {}", self.lr_min, self.lr_max)));
        }
        if self.anneal_period < 1.0 {
            return Err(Error::Config("anneal_period must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, as read from a `--config` JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pyramid: PyramidConfig,
    pub assign: AssignConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.assign.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.image_size != self.pyramid.input_size {
            return Err(Error::Config(format!(
                "synth.image_size {} differs from pyramid.input_size {}",
                self.synth.image_size, self.pyramid.input_size
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / T))` with `t` taken modulo `T`.
pub fn lr_schedule(t: f64, period: f64, lr_min: f64, lr_max: f64) -> f64 {
    let phase = if t >= period { t % period } else { t };
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * phase / period).cos())
}

/// `v ← μv − lr(g + wd·θ)`, `θ ← θ + v`.
pub fn sgd_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    velocity: &mut ParamSet<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(velocity)?;
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(velocity.tensors_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi - lr * (gi + wd * *pi);
            *pi = *pi + *vi;
        }
    }
    Ok(())
}

/// Generator for epoch `epoch`: ChaCha8 keyed by the run seed, one stream per epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loc_loss: f64,
    pub cls_loss: f64,
    pub lr: f64,
    /// Best-threshold F1 on the validation set, if it was evaluated.
    pub val_f1: Option<f64>,
    pub val_threshold: Option<f64>,
}

/// Model and optimizer state between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: ParamSet<f32>,
    pub velocity: ParamSet<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let det = Detector::new(config.pyramid.clone())?;
        let params = det.init_params::<f32>(config.train.seed);
        let velocity = params.zeros_like();
        Ok(TrainState {
            config,
            params,
            velocity,
            epoch: 0,
            history: Vec::new(),
        })
    }
}

fn check_input(sample: &Sample, size: usize) -> Result<()> {
    check_dim("sample", "channels", 3, sample.image.c())?;
    check_dim("sample", "height", size, sample.height())?;
    check_dim("sample", "width", size, sample.width())
}

pub struct Trainer {
    pub detector: Detector,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(state: TrainState) -> Result<Self> {
        state.config.validate()?;
        let detector = Detector::new(state.config.pyramid.clone())?;
        detector.zero_params::<f32>().check_layout(&state.params)?;
        Ok(Trainer { detector, state })
    }

    /// One pass over `data` in a seeded order. Returns the mean batch loss parts.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<(f64, f64, f64, f64)> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = self.state.config.clone();
        let tc = &cfg.train;
        let epoch = self.state.epoch;
        let mut rng = epoch_rng(tc.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let grids = cfg.pyramid.grids();
        let batches = order.len().div_ceil(tc.batch_size);
        let (mut sum, mut sum_loc, mut sum_cls) = (0.0, 0.0, 0.0);
        let mut lr = tc.lr_max;
        let mut grads = self.detector.zero_params::<f32>();

        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut maps: Vec<AssignmentMaps> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                check_input(&data[i], cfg.pyramid.input_size)?;
                let mut s = data[i].clone();
                if tc.flip {
                    if rng.random_bool(0.5) {
                        s = flip_horizontal(&s);
                    }
                    if rng.random_bool(0.5) {
                        s = flip_vertical(&s);
                    }
                }
                maps.push(assign(&s.gts, &grids, &cfg.assign)?);
                images.push(s.image);
            }
            let batch = Tensor::stack(&images)?;
            let (heads, cache) = self.detector.forward(&self.state.params, &batch)?;
            let (report, head_grads) = total_loss(&heads, &maps, &cfg.loss)?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite { epoch: epoch + 1, batch: b + 1 });
            }
            grads.tensors_mut().iter_mut().for_each(|t| t.fill(0.0));
            self.detector.backward_into(&self.state.params, &cache, &head_grads, &mut grads)?;
            let t = epoch as f64 + b as f64 / batches as f64;
            lr = lr_schedule(t, tc.anneal_period, tc.lr_min, tc.lr_max);
            sgd_step(&mut self.state.params, &grads, &mut self.state.velocity, lr, tc.momentum, tc.weight_decay)?;
            sum += report.total;
            sum_loc += report.l_loc;
            sum_cls += report.l_cls;
        }
        self.state.epoch += 1;
        let n = batches as f64;
        Ok((sum / n, sum_loc / n, sum_cls / n, lr))
    }

    /// Train until `state.epoch == config.train.epochs`, calling `on_epoch`
    /// after each epoch.
    pub fn train(
        &mut self,
        data: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        let total = self.state.config.train.epochs;
        while self.state.epoch < total {
            let start = Instant::now();
            let (loss, loc, cls, lr) = self.run_epoch(data)?;
            let tc = &self.state.config.train;
            let epoch = self.state.epoch;
            let validate = !val.is_empty() && tc.val_every > 0 && (epoch.is_multiple_of(tc.val_every) || epoch == total);
            let (val_f1, val_threshold) = if validate {
                let (f1, t) = self.validation_f1(val)?;
                (Some(f1), Some(t))
            } else {
                (None, None)
            };
            log::info!(
                "epoch {epoch}/{total} loss {loss:.4} (loc {loc:.4} cls {cls:.4}) lr {lr:.6}{} [{:.1}s]",
                val_f1.map_or(String::new(), |f| format!(" val_f1 {f:.4} @ {:.2}", val_threshold.unwrap_or(0.0))),
                start.elapsed().as_secs_f64()
            );
            self.state.history.push(EpochLog {
                epoch,
                loss,
                loc_loss: loc,
                cls_loss: cls,
                lr,
                val_f1,
                val_threshold,
            });
            on_epoch(&self.state)?;
        }
        Ok(())
    }

    /// Best F1 over the default threshold sweep, and the threshold that gives it.
    pub fn validation_f1(&self, val: &[Sample]) -> Result<(f64, f64)> {
        let floor = self.state.config.train.val_score_floor;
        let dets = predict(&self.detector, &self.state.params, val, floor, DEFAULT_NMS_IOU, self.state.config.train.batch_size)?;
        let gts: Vec<_> = val.iter().map(|s| s.gts.clone()).collect();
        let thresholds: Vec<f64> = default_thresholds().into_iter().filter(|&t| t >= floor).collect();
        let best = best_f1(&pr_sweep(&dets, &gts, &thresholds)).expect("non-empty sweep");
        Ok((best.report.f1, best.threshold))
    }
}

pub const DEFAULT_NMS_IOU: f64 = 0.1;

/// Decode every cell scoring at least `score_thresh` from one image's head
/// outputs, clamp to the image and apply NMS.
pub fn decode_detections<T: Real>(
    detector: &Detector,
    heads: &crate::pyramid::HeadOutputs<T>,
    item: usize,
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let cfg = detector.config();
    let size = cfg.input_size as f64;
    let mut dets = Vec::new();
    for (out, grid) in heads.levels.iter().zip(cfg.grids()) {
        let [_, nc, h, w] = out.cls.shape();
        for y in 0..h {
            for x in 0..w {
                for c in 0..nc {
                    let logit = out.cls.at(item, c, y, x).to_f64().unwrap_or(f64::NAN);
                    let score = sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
                    if score.is_nan() || score < score_thresh {
                        continue;
                    }
                    let delta = DeltaVector::from_array(std::array::from_fn(|k| {
                        out.reg.at(item, k, y, x).to_f64().unwrap_or(f64::NAN)
                    }));
                    let bbox: BBox = decode(&delta, grid.point(y, x), grid.stride as f64).clamp(size, size);
                    if bbox.is_valid() {
                        dets.push(Detection { bbox, score, class: c });
                    }
                }
            }
        }
    }
    nms(&dets, nms_iou)
}

/// Detections for each sample, processed in chunks of `batch_size`.
pub fn predict(
    detector: &Detector,
    params: &ParamSet<f32>,
    samples: &[Sample],
    score_thresh: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>> {
    let size = detector.config().input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        for s in chunk {
            check_input(s, size)?;
        }
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let heads = detector.infer(params, &Tensor::stack(&images)?)?;
        for i in 0..chunk.len() {
            out.push(decode_detections(detector, &heads, i, score_thresh, nms_iou));
        }
    }
    Ok(out)
}
