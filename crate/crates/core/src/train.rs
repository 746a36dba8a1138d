//! Learning-rate schedule, the SBD fit loop and encoder pretraining.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::camera::CameraParams;
use crate::encoder::{camera_to_raw, Encoder, FrameTokens, TapeMemory};
use crate::error::{Error, Result};
use crate::losses::{joint_loss_on, rgb_loss_on, semantic_loss_on, LossWeights};
use crate::optim::{AdamW, OptimizerState};
use crate::rng::SeedStreams;
use crate::sbd::{Branch, Sbd};
use crate::supervision::SupervisionMap;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Keep the encoder fixed and train only the decoder.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-5,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            warmup_epochs: 20,
            schedule: Schedule::Constant,
            epochs: 300,
            batch_size: 8,
            seed: 0,
            freeze_encoder: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            grad_clip: Some(self.grad_clip),
            ..AdamW::default()
        }
    }
}

/// Linear ramp `lr·e/warmup` up to `e = warmup`, then constant or cosine
/// decay reaching 0 at `e = epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr * epoch as f64 / cfg.warmup_epochs as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let span = cfg.epochs.saturating_sub(cfg.warmup_epochs);
            if span == 0 {
                return cfg.lr;
            }
            let x = ((epoch - cfg.warmup_epochs) as f64 / span as f64).min(1.0);
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * x).cos())
        }
    }
}

/// Semantic targets of one branch for every frame of a sequence.
#[derive(Clone, Debug)]
pub struct BranchTargets {
    pub branch: Branch,
    pub maps: Vec<SupervisionMap>,
}

/// One video with its supervision.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub images: Vec<Tensor>,
    pub targets: Vec<BranchTargets>,
    /// Frames whose losses count; the others are held out.
    pub train_frames: Vec<usize>,
}

impl Sequence {
    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if n == 0 {
            return Err(Error::Contract(format!("sequence {} has no frames", self.name)));
        }
        if self.targets.iter().any(|t| t.maps.len() != n) {
            return Err(Error::Contract(format!("sequence {}: targets do not cover every frame", self.name)));
        }
        if self.train_frames.iter().any(|&t| t >= n) {
            return Err(Error::Contract(format!("sequence {}: train frame out of range", self.name)));
        }
        Ok(())
    }
}

/// Structured per-step log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_lang: f64,
    pub l_rgb: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub records: Vec<StepRecord>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Sequence losses built on one tape.
struct SeqLoss {
    total: Var,
    lang: f64,
    rgb: f64,
}

fn sequence_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    enc_p: &Bound,
    sbd: &Sbd,
    sbd_p: &Bound,
    seq: &Sequence,
    tokens: Option<&[FrameTokens]>,
    w: &LossWeights,
) -> Result<SeqLoss> {
    let mut memory = TapeMemory::new(encoder.config.max_memory_frames);
    let mut lang = Vec::new();
    let mut rgb = Vec::new();
    for (t, image) in seq.images.iter().enumerate() {
        let patch = match tokens {
            Some(tok) => tape.leaf(&tok[t].patch_tokens),
            None => {
                let x = encoder.step_on(tape, enc_p, image, &mut memory)?;
                encoder.split_tokens(tape, x)?.1
            }
        };
        if !seq.train_frames.contains(&t) {
            continue;
        }
        let mut features: Vec<(Branch, Var)> = Vec::new();
        let mut feature_of = |tape: &mut Tape, b: Branch| -> Result<Var> {
            if let Some(&(_, f)) = features.iter().find(|(fb, _)| sbd.shares_refine(*fb, b)) {
                return Ok(f);
            }
            let f = sbd.refine_on(tape, sbd_p, b, patch)?;
            features.push((b, f));
            Ok(f)
        };
        let mut frame_lang = Vec::new();
        for tg in &seq.targets {
            if !sbd.config.has(tg.branch) {
                continue;
            }
            let f = feature_of(tape, tg.branch)?;
            let s = sbd.semantic_on(tape, sbd_p, tg.branch, f)?;
            let target = &tg.maps[t];
            let shape = target.values.shape();
            let tv = tape.constant(&[shape[0] * shape[1], shape[2]], target.values.data().to_vec())?;
            frame_lang.push(semantic_loss_on(tape, s, tv, &target.coverage, w)?);
        }
        if !frame_lang.is_empty() {
            let l = joint_loss_on(tape, &frame_lang, &[], &LossWeights { alpha: 1.0, ..w.clone() })?;
            lang.push(l);
        }
        if sbd.config.use_rgb_head {
            let f = feature_of(tape, sbd.rgb_source())?;
            let y = sbd.rgb_on(tape, sbd_p, f)?;
            let target = tape.leaf(image);
            rgb.push(rgb_loss_on(tape, y, target, w)?);
        }
    }
    let lang_v: f64 = lang.iter().map(|&v| tape.scalar_f64(v)).sum();
    let rgb_v: f64 = rgb.iter().map(|&v| tape.scalar_f64(v)).sum();
    let total = joint_loss_on(tape, &lang, &rgb, w)?;
    Ok(SeqLoss {
        total,
        lang: lang_v,
        rgb: rgb_v,
    })
}

/// Trains the decoder (and the encoder unless frozen) on `data`. Each epoch
/// shuffles the sequences, splits them into batches and takes one AdamW
/// step per batch on the mean sequence loss. `log` receives one NDJSON
/// record per step.
pub fn fit(
    encoder: &mut Encoder,
    sbd: &mut Sbd,
    data: &[Sequence],
    cfg: &TrainConfig,
    weights: &LossWeights,
    log: Option<&mut dyn Write>,
) -> Result<FitReport> {
    fit_with_hook(encoder, sbd, data, cfg, weights, log, None)
}

/// Called after every epoch with the epoch number and current weights.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &Encoder, &Sbd) -> Result<()>;

/// [`fit`] with a callback after each epoch (used for periodic checkpoints).
pub fn fit_with_hook(
    encoder: &mut Encoder,
    sbd: &mut Sbd,
    data: &[Sequence],
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut log: Option<&mut dyn Write>,
    mut hook: Option<EpochHook<'_>>,
) -> Result<FitReport> {
    cfg.validate()?;
    weights.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("fit needs at least one sequence".into()));
    }
    for s in data {
        s.validate()?;
    }
    // A frozen encoder produces the same tokens every epoch.
    let cached: Option<Vec<Vec<FrameTokens>>> = if cfg.freeze_encoder {
        Some(data.iter().map(|s| encoder.encode_video(&s.images)).collect::<Result<_>>()?)
    } else {
        None
    };
    let opt = cfg.optimizer();
    let mut state = OptimizerState::default();
    let mut order_rng = SeedStreams::new(cfg.seed).stream("train/order");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = FitReport::default();
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut order_rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            sbd.params.zero_grads();
            encoder.params.zero_grads();
            let (mut l_lang, mut l_rgb, mut l_total) = (0.0, 0.0, 0.0);
            let inv = 1.0 / batch.len() as f32;
            for &i in batch {
                let mut tape = Tape::new();
                let enc_p = encoder.params.bind(&mut tape, !cfg.freeze_encoder);
                let sbd_p = sbd.params.bind(&mut tape, true);
                let tokens = cached.as_ref().map(|c| c[i].as_slice());
                let sl = sequence_loss(&mut tape, encoder, &enc_p, sbd, &sbd_p, &data[i], tokens, weights)?;
                let total = tape.scalar_f64(sl.total);
                if !total.is_finite() {
                    return Err(Error::Training {
                        param: format!("loss/{}", data[i].name),
                        reason: format!("loss became {total} at epoch {epoch}"),
                    });
                }
                let scaled = tape.scale(sl.total, inv);
                let grads = tape.backward(scaled)?;
                sbd.params.absorb(&grads, &sbd_p);
                if !cfg.freeze_encoder {
                    encoder.params.absorb(&grads, &enc_p);
                }
                l_lang += sl.lang / batch.len() as f64;
                l_rgb += sl.rgb / batch.len() as f64;
                l_total += total / batch.len() as f64;
            }
            let mut stores: Vec<&mut ParamStore> = vec![&mut sbd.params];
            if !cfg.freeze_encoder {
                stores.push(&mut encoder.params);
            }
            opt.step(&mut state, &mut stores, lr)?;
            let rec = StepRecord {
                epoch,
                step: state.step,
                l_lang,
                l_rgb,
                l_total,
                lr,
            };
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            epoch_sum += l_total * batch.len() as f64;
            report.records.push(rec);
        }
        let mean = epoch_sum / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6} lr {lr:.3e}");
        report.epoch_loss.push(mean);
        if let Some(h) = hook.as_mut() {
            h(epoch, encoder, sbd)?;
        }
    }
    sbd.params.zero_grads();
    encoder.params.zero_grads();
    Ok(report)
}

/// Ground-truth geometry for one frame.
#[derive(Clone, Debug)]
pub struct GeometryTarget {
    pub depth: Tensor,
    pub camera: CameraParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the camera-parameter term.
    pub camera_weight: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            lr: 1e-3,
            seed: 0,
            camera_weight: 1.0,
        }
    }
}

/// Fits the encoder's depth and camera heads to ground-truth geometry:
/// relative L1 on depth plus squared error on the raw camera encoding.
/// Returns the mean loss per epoch.
pub fn pretrain_encoder(
    encoder: &mut Encoder,
    videos: &[(Vec<Tensor>, Vec<GeometryTarget>)],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if videos.is_empty() {
        return Err(Error::Contract("pretraining needs at least one video".into()));
    }
    let opt = AdamW::default();
    let mut state = OptimizerState::default();
    let mut order_rng = SeedStreams::new(cfg.seed).stream("pretrain/order");
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let size = encoder.config.image_size;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for &i in &order {
            let (images, geo) = &videos[i];
            if images.len() != geo.len() {
                return Err(Error::Contract("pretraining geometry does not match frames".into()));
            }
            encoder.params.zero_grads();
            let mut tape = Tape::new();
            let p = encoder.params.bind(&mut tape, true);
            let mut memory = TapeMemory::new(encoder.config.max_memory_frames);
            let mut terms = Vec::new();
            for (image, g) in images.iter().zip(geo) {
                let x = encoder.step_on(&mut tape, &p, image, &mut memory)?;
                let (cam, patch) = encoder.split_tokens(&mut tape, x)?;
                let depth = encoder.depth_on(&mut tape, &p, patch)?;
                let gt = tape.leaf(&g.depth);
                let diff = tape.sub(depth, gt)?;
                let abs = tape.abs(diff);
                let inv: Vec<f32> = g.depth.data().iter().map(|&d| 1.0 / d.max(1e-3)).collect();
                let inv = tape.constant(g.depth.shape(), inv)?;
                let rel = tape.mul(abs, inv)?;
                terms.push(tape.mean(rel));
                let raw = encoder.camera_raw_on(&mut tape, &p, cam)?;
                let shape = tape.shape(raw).to_vec();
                let target = tape.constant(&shape, camera_to_raw(&g.camera, size).to_vec())?;
                let d = tape.sub(raw, target)?;
                let sq = tape.square(d);
                let m = tape.mean(sq);
                terms.push(tape.scale(m, cfg.camera_weight));
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = tape.add(loss, t)?;
            }
            let loss = tape.scale(loss, 1.0 / images.len() as f32);
            let v = tape.scalar_f64(loss);
            if !v.is_finite() {
                return Err(Error::Training {
                    param: "pretrain".into(),
                    reason: format!("loss became {v} at epoch {epoch}"),
                });
            }
            let grads = tape.backward(loss)?;
            encoder.params.absorb(&grads, &p);
            opt.step(&mut state, &mut [&mut encoder.params], cfg.lr)?;
            sum += v;
        }
        losses.push(sum / videos.len() as f64);
    }
    encoder.params.zero_grads();
    Ok(losses)
}
