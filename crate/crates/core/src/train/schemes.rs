//! The training schemes: target pretraining, preprocessing against a
//! frozen target, target finetuning, joint optimisation, and the
//! adversarial baseline.

use super::{evaluate, stream_seed, EpochRow, RunRecord, TrainConfig};
use crate::data::{BatchStream, MixSpec, SampleSet};
use crate::degrade::{hsv_to_rgb, rgb_to_hsv, DegradeSpec};
use crate::error::{IonError, Result};
use crate::image::Image;
use crate::nn::{is_frozen, pull_grads, state_checksum, IonNet, Mode, Net, StateRecord};
use crate::tensor::{Adam, AdamHyper, Tape, TensorData};
use std::time::Instant;

fn adam_for(cfg: &TrainConfig) -> Adam<f32> {
    Adam::new(AdamHyper { lr: cfg.lr, l2: cfg.l2, ..Default::default() })
}

struct BestTracker {
    best_loss: f64,
    best_epoch: usize,
    since_improve: usize,
}

impl BestTracker {
    fn new() -> Self {
        BestTracker { best_loss: f64::INFINITY, best_epoch: 0, since_improve: 0 }
    }

    /// Returns true when this evaluation improved on the best.
    fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if !self.best_loss.is_finite() || self.best_loss - val_loss > 1e-5 * self.best_loss.abs() {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.since_improve = 0;
            true
        } else {
            self.since_improve += 1;
            false
        }
    }

    fn should_stop(&self, patience: usize) -> bool {
        self.since_improve >= patience
    }
}

/// Trains a target model alone on a (possibly degraded) stream.
/// `pretrain_target` and `finetune_target` are thin wrappers.
fn train_target(
    scheme_name: &str,
    target: &mut dyn Net<f32>,
    train: &SampleSet,
    mix: &MixSpec,
    val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut record = RunRecord::new(scheme_name, cfg);
    let mut opt = adam_for(cfg);
    let stream = BatchStream::new(train, mix, cfg.batch, stream_seed(cfg, "target-stream"), true)?;
    let mut tracker = BestTracker::new();
    let mut best_state: Option<Vec<StateRecord>> = None;
    let (mut last_val_loss, mut last_val_metric) = (f64::NAN, f64::NAN);

    target.set_mode(Mode::Train);
    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0u64;
        for batch in stream.epoch(epoch as u64)? {
            let mut tape = Tape::new();
            let x = tape.leaf(batch.x.clone(), false);
            let logits = target.forward(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(logits, batch.targets.as_slice(), None)?;
            let loss_v = tape.value(loss).data[0] as f64;
            if !loss_v.is_finite() {
                record.aborted = Some(format!("loss became non-finite at epoch {epoch}"));
                break 'epochs;
            }
            tape.backward(loss)?;
            record.backward_calls += 1;
            pull_grads(target, &tape);
            let mut params = target.params_mut();
            if let Err(e) = opt.step(&mut params) {
                record.aborted = Some(e.to_string());
                break 'epochs;
            }
            epoch_loss += loss_v;
            n_batches += 1;
            record.batches += 1;
        }
        let train_loss = epoch_loss / n_batches.max(1) as f64;

        if epoch % cfg.eval_every == 0 {
            let out = evaluate(target, None, val, val.num_classes)?;
            last_val_loss = out.loss;
            last_val_metric = out.metric;
            target.set_mode(Mode::Train);
            if tracker.observe(epoch, out.loss) {
                best_state = Some(target.state());
            }
        }
        record.rows.push(EpochRow {
            epoch,
            train_loss,
            val_loss: last_val_loss,
            val_metric: last_val_metric,
        });
        if tracker.should_stop(cfg.patience) {
            break;
        }
    }

    if let Some(state) = best_state {
        target.load_state(&state)?;
        record.best_epoch = tracker.best_epoch;
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    target.set_mode(Mode::Eval);
    Ok(record)
}

/// Trains a target model from scratch on clean data, early-stopping on
/// validation loss and restoring the best checkpoint.
pub fn pretrain_target(
    target: &mut dyn Net<f32>,
    train: &SampleSet,
    val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    train_target("baseline", target, train, &MixSpec::clean_only(), val, cfg)
}

/// Continues training a warm-started target on a mixed stream.
pub fn finetune_target(
    target: &mut dyn Net<f32>,
    train: &SampleSet,
    mix: &MixSpec,
    val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    train_target("finetune", target, train, mix, val, cfg)
}

/// Trains the preprocessing net against a frozen target: the task loss is
/// backpropagated through the target into the preprocessing net, and only
/// the latter is updated. The target's state is checksummed before and
/// after; any change is an error.
pub fn train_ion_fixed(
    ion: &mut IonNet<f32>,
    target: &mut dyn Net<f32>,
    train: &SampleSet,
    mix: &MixSpec,
    val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    if !is_frozen(target) {
        return Err(IonError::InvalidArg {
            op: "train_ion_fixed",
            detail: "target model must be frozen".into(),
        });
    }
    let start = Instant::now();
    let mut record = RunRecord::new("ion-fixed", cfg);
    record.target_checksum_before = Some(state_checksum(target));
    let mut opt = adam_for(cfg);
    let stream = BatchStream::new(train, mix, cfg.batch, stream_seed(cfg, "ion-stream"), true)?;
    let mut tracker = BestTracker::new();
    let mut best_state: Option<Vec<StateRecord>> = None;
    let (mut last_val_loss, mut last_val_metric) = (f64::NAN, f64::NAN);

    target.set_mode(Mode::Eval);
    'epochs: for epoch in 1..=cfg.max_epochs {
        ion.set_mode(Mode::Train);
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0u64;
        for batch in stream.epoch(epoch as u64)? {
            let mut tape = Tape::new();
            let x = tape.leaf(batch.x.clone(), false);
            let optimised = ion.forward(&mut tape, x)?;
            let logits = target.forward(&mut tape, optimised)?;
            let loss = tape.softmax_cross_entropy(logits, batch.targets.as_slice(), None)?;
            let loss_v = tape.value(loss).data[0] as f64;
            if !loss_v.is_finite() {
                record.aborted = Some(format!("loss became non-finite at epoch {epoch}"));
                break 'epochs;
            }
            tape.backward(loss)?;
            record.backward_calls += 1;
            pull_grads(ion, &tape);
            let mut params = ion.params_mut();
            if let Err(e) = opt.step(&mut params) {
                record.aborted = Some(e.to_string());
                break 'epochs;
            }
            epoch_loss += loss_v;
            n_batches += 1;
            record.batches += 1;
        }
        let train_loss = epoch_loss / n_batches.max(1) as f64;

        if epoch % cfg.eval_every == 0 {
            let out = evaluate(target, Some(ion), val, val.num_classes)?;
            last_val_loss = out.loss;
            last_val_metric = out.metric;
            if tracker.observe(epoch, out.loss) {
                best_state = Some(ion.state());
            }
        }
        record.rows.push(EpochRow {
            epoch,
            train_loss,
            val_loss: last_val_loss,
            val_metric: last_val_metric,
        });
        if tracker.should_stop(cfg.patience) {
            break;
        }
    }

    if let Some(state) = best_state {
        ion.load_state(&state)?;
        record.best_epoch = tracker.best_epoch;
    }
    ion.set_mode(Mode::Eval);
    record.target_checksum_after = Some(state_checksum(target));
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    if record.target_checksum_before != record.target_checksum_after {
        return Err(IonError::InvalidArg {
            op: "train_ion_fixed",
            detail: "frozen target state changed during training".into(),
        });
    }
    Ok(record)
}

/// Joint optimisation: a single backward pass per batch feeds one Adam
/// state per model, updating both simultaneously.
pub fn train_joint(
    ion: &mut IonNet<f32>,
    target: &mut dyn Net<f32>,
    train: &SampleSet,
    mix: &MixSpec,
    val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut record = RunRecord::new("joint", cfg);
    let mut opt_ion = adam_for(cfg);
    let mut opt_target = adam_for(cfg);
    let stream = BatchStream::new(train, mix, cfg.batch, stream_seed(cfg, "joint-stream"), true)?;
    let mut tracker = BestTracker::new();
    let mut best_state: Option<(Vec<StateRecord>, Vec<StateRecord>)> = None;
    let (mut last_val_loss, mut last_val_metric) = (f64::NAN, f64::NAN);

    'epochs: for epoch in 1..=cfg.max_epochs {
        ion.set_mode(Mode::Train);
        target.set_mode(Mode::Train);
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0u64;
        for batch in stream.epoch(epoch as u64)? {
            let mut tape = Tape::new();
            let x = tape.leaf(batch.x.clone(), false);
            let optimised = ion.forward(&mut tape, x)?;
            let logits = target.forward(&mut tape, optimised)?;
            let loss = tape.softmax_cross_entropy(logits, batch.targets.as_slice(), None)?;
            let loss_v = tape.value(loss).data[0] as f64;
            if !loss_v.is_finite() {
                record.aborted = Some(format!("loss became non-finite at epoch {epoch}"));
                break 'epochs;
            }
            tape.backward(loss)?;
            record.backward_calls += 1;
            pull_grads(ion, &tape);
            pull_grads(target, &tape);
            let step = opt_ion
                .step(&mut ion.params_mut())
                .and_then(|_| opt_target.step(&mut target.params_mut()));
            if let Err(e) = step {
                record.aborted = Some(e.to_string());
                break 'epochs;
            }
            epoch_loss += loss_v;
            n_batches += 1;
            record.batches += 1;
        }
        let train_loss = epoch_loss / n_batches.max(1) as f64;

        if epoch % cfg.eval_every == 0 {
            let out = evaluate(target, Some(ion), val, val.num_classes)?;
            last_val_loss = out.loss;
            last_val_metric = out.metric;
            if tracker.observe(epoch, out.loss) {
                best_state = Some((ion.state(), target.state()));
            }
        }
        record.rows.push(EpochRow {
            epoch,
            train_loss,
            val_loss: last_val_loss,
            val_metric: last_val_metric,
        });
        if tracker.should_stop(cfg.patience) {
            break;
        }
    }

    if let Some((gi, ft)) = best_state {
        ion.load_state(&gi)?;
        target.load_state(&ft)?;
        record.best_epoch = tracker.best_epoch;
    }
    ion.set_mode(Mode::Eval);
    target.set_mode(Mode::Eval);
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Outputs of the adversarial baseline run.
pub struct GanRun {
    pub record: RunRecord,
    /// Mean generator L1 component per epoch.
    pub l1_per_epoch: Vec<f64>,
}

/// Extracts the value channel of an RGB image as a `[1,H,W]` tensor plane
/// in [-1,1].
fn value_plane(img: &Image) -> Vec<f32> {
    img.pixels
        .chunks(3)
        .map(|px| 2.0 * px[0].max(px[1]).max(px[2]) - 1.0)
        .collect()
}

/// Adversarial baseline: the generator outputs a single value channel that
/// is scored by the discriminator and pulled towards the original image's
/// value channel by an L1 term. Generator and discriminator alternate 1:1.
pub fn train_gan(
    generator: &mut IonNet<f32>,
    disc: &mut dyn Net<f32>,
    set: &SampleSet,
    degradation: &DegradeSpec,
    cfg: &TrainConfig,
) -> Result<GanRun> {
    cfg.validate()?;
    if generator.cfg.out_channels != 1 {
        return Err(IonError::InvalidArg {
            op: "train_gan",
            detail: format!(
                "generator must output a single channel, has {}",
                generator.cfg.out_channels
            ),
        });
    }
    let start = Instant::now();
    let mut record = RunRecord::new("gan", cfg);
    let mut opt_g = adam_for(cfg);
    let mut opt_d = adam_for(cfg);
    let mix = MixSpec {
        domains: vec![crate::data::DomainSpec {
            name: "degraded".to_string(),
            degrade: degradation.clone(),
            weight: 1.0,
        }],
    };
    let stream = BatchStream::new(set, &mix, cfg.batch, stream_seed(cfg, "gan-stream"), true)?;
    let mut l1_per_epoch = Vec::with_capacity(cfg.max_epochs);
    let l1_weight = cfg.l1_weight as f32;

    generator.set_mode(Mode::Train);
    disc.set_mode(Mode::Train);
    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut sums = (0.0f64, 0.0f64, 0.0f64); // (g_total, d_loss, l1)
        let mut n_batches = 0u64;
        for batch in stream.epoch(epoch as u64)? {
            let bsz = batch.x.shape[0];
            let (h, w) = (batch.x.shape[2], batch.x.shape[3]);
            let mut real_v = Vec::with_capacity(bsz * h * w);
            for &idx in &batch.indices {
                real_v.extend(value_plane(&set.images[idx]));
            }
            let real_v = TensorData::new(vec![bsz, 1, h, w], real_v)?;

            // generator forward for the discriminator step (values only)
            let fake_v = {
                let mut tape = Tape::new();
                let x = tape.leaf(batch.x.clone(), false);
                let y = generator.forward(&mut tape, x)?;
                tape.value(y).clone()
            };

            // discriminator step on real vs generated value channels
            {
                let mut tape = Tape::new();
                let real = tape.leaf(real_v.clone(), false);
                let fake = tape.leaf(fake_v, false);
                let s_real = disc.forward(&mut tape, real)?;
                let s_fake = disc.forward(&mut tape, fake)?;
                let l_real = tape.gan_logistic_loss(s_real, true);
                let l_fake = tape.gan_logistic_loss(s_fake, false);
                let loss_d = tape.add(l_real, l_fake)?;
                let loss_d_v = tape.value(loss_d).data[0] as f64;
                if !loss_d_v.is_finite() {
                    record.aborted = Some(format!("discriminator loss non-finite at epoch {epoch}"));
                    break 'epochs;
                }
                tape.backward(loss_d)?;
                record.backward_calls += 1;
                pull_grads(disc, &tape);
                if let Err(e) = opt_d.step(&mut disc.params_mut()) {
                    record.aborted = Some(e.to_string());
                    break 'epochs;
                }
                sums.1 += loss_d_v;
            }

            // generator step: adversarial + weighted L1 to the original V
            {
                let mut tape = Tape::new();
                let x = tape.leaf(batch.x.clone(), false);
                let target_v = tape.leaf(real_v, false);
                let y = generator.forward(&mut tape, x)?;
                let score = disc.forward(&mut tape, y)?;
                let adv = tape.gan_logistic_loss(score, true);
                let l1 = tape.l1_loss(y, target_v)?;
                let l1_scaled = tape.scale(l1, l1_weight);
                let loss_g = tape.add(adv, l1_scaled)?;
                let loss_g_v = tape.value(loss_g).data[0] as f64;
                let l1_v = tape.value(l1).data[0] as f64;
                if !loss_g_v.is_finite() {
                    record.aborted = Some(format!("generator loss non-finite at epoch {epoch}"));
                    break 'epochs;
                }
                tape.backward(loss_g)?;
                record.backward_calls += 1;
                pull_grads(generator, &tape);
                if let Err(e) = opt_g.step(&mut generator.params_mut()) {
                    record.aborted = Some(e.to_string());
                    break 'epochs;
                }
                sums.0 += loss_g_v;
                sums.2 += l1_v;
            }
            n_batches += 1;
            record.batches += 1;
        }
        let nb = n_batches.max(1) as f64;
        l1_per_epoch.push(sums.2 / nb);
        record.rows.push(EpochRow {
            epoch,
            train_loss: sums.0 / nb,
            val_loss: sums.1 / nb,
            val_metric: sums.2 / nb,
        });
    }
    generator.set_mode(Mode::Eval);
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(GanRun { record, l1_per_epoch })
}

/// Combines a generated value channel with the hue and saturation of the
/// input image: H and S are copied over exactly.
pub fn assemble_v_output(input: &Image, v_gen: &[f32]) -> Result<Image> {
    if v_gen.len() != input.height * input.width {
        return Err(IonError::ShapeMismatch {
            op: "assemble_v_output",
            detail: format!(
                "value plane has {} entries for {} pixels",
                v_gen.len(),
                input.height * input.width
            ),
        });
    }
    let mut hsv = rgb_to_hsv(input)?;
    for (px, &v) in hsv.pixels.chunks_mut(3).zip(v_gen) {
        px[2] = v.clamp(0.0, 1.0);
    }
    hsv_to_rgb(&hsv)
}

/// Runs the trained generator over a fixed set and assembles full images.
pub fn gan_infer_assembled(
    generator: &mut IonNet<f32>,
    degraded: &SampleSet,
) -> Result<Vec<Image>> {
    generator.set_mode(Mode::Eval);
    let mut out = Vec::with_capacity(degraded.len());
    for img in &degraded.images {
        let x = crate::data::images_to_tensor(&[img])?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let y = match generator.forward(&mut tape, xv) {
            Ok(v) => v,
            Err(IonError::UninitializedStats { .. }) => {
                generator.set_mode(Mode::Train);
                let v = generator.forward(&mut tape, xv)?;
                generator.set_mode(Mode::Eval);
                v
            }
            Err(e) => return Err(e),
        };
        let v_plane: Vec<f32> = tape.value(y).data.iter().map(|&t| (t + 1.0) / 2.0).collect();
        out.push(assemble_v_output(img, &v_plane)?);
    }
    Ok(out)
}
