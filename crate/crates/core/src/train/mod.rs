//! Training schemes coupling the preprocessing network to a target model,
//! plus run records, early stopping and evaluation.

mod schemes;

pub use schemes::{finetune_target, pretrain_target, train_gan, train_ion_fixed, train_joint, GanRun};

use crate::data::{BatchTargets, SampleSet, Targets};
use crate::degrade::DegradeSpec;
use crate::error::{IonError, Result};
use crate::image::Image;
use crate::metrics::{confusion, mean_class_iou, ConfusionCounts};
use crate::nn::{IonNet, Mode, Net};
use crate::rng::derive_seed;
use crate::tensor::{Tape, TensorData};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Training scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Baseline,
    IonFixed,
    Finetune,
    IonOnFinetuned,
    Joint,
    Gan,
}

impl Scheme {
    pub fn id(&self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::IonFixed => "ion-fixed",
            Scheme::Finetune => "finetune",
            Scheme::IonOnFinetuned => "ion-on-finetuned",
            Scheme::Joint => "joint",
            Scheme::Gan => "gan",
        }
    }
}

/// Target-model initialisation for the joint scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointInit {
    Random,
    Pretrained,
    Finetuned,
}

/// Hyperparameters shared by every scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    #[serde(default = "default_joint_init")]
    pub joint_init: JointInit,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_l1_weight")]
    pub l1_weight: f64,
    pub seed: u64,
}

fn default_joint_init() -> JointInit {
    JointInit::Pretrained
}
fn default_lr() -> f64 {
    1e-4
}
fn default_l2() -> f64 {
    1e-6
}
fn default_batch() -> usize {
    4
}
fn default_patience() -> usize {
    5
}
fn default_eval_every() -> usize {
    1
}
fn default_l1_weight() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(scheme: Scheme, max_epochs: usize, seed: u64) -> Self {
        TrainConfig {
            scheme,
            joint_init: default_joint_init(),
            lr: default_lr(),
            l2: default_l2(),
            batch: default_batch(),
            max_epochs,
            patience: default_patience(),
            eval_every: default_eval_every(),
            l1_weight: default_l1_weight(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.l2 < 0.0 || self.batch < 1 || self.patience < 1 || self.eval_every < 1
        {
            return Err(IonError::Config(format!(
                "train config needs lr > 0, l2 >= 0, batch >= 1, patience >= 1, eval_every >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-epoch loss and metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

/// The full record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: String,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
    pub backward_calls: u64,
    pub batches: u64,
    pub aborted: Option<String>,
    pub target_checksum_before: Option<u64>,
    pub target_checksum_after: Option<u64>,
    pub config_echo: String,
}

impl RunRecord {
    pub fn new(scheme: &str, cfg: &TrainConfig) -> Self {
        RunRecord {
            scheme: scheme.to_string(),
            seed: cfg.seed,
            rows: Vec::new(),
            best_epoch: 0,
            wall_clock_secs: 0.0,
            backward_calls: 0,
            batches: 0,
            aborted: None,
            target_checksum_before: None,
            target_checksum_after: None,
            config_echo: serde_json::to_string(cfg).unwrap_or_default(),
        }
    }

    /// CSV rows `(epoch, train_loss, val_loss, val_metric)`, RFC-4180 line
    /// endings. Wall-clock lives in the manifest, not here, so replays are
    /// byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_metric\r\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\r\n",
                r.epoch, r.train_loss, r.val_loss, r.val_metric
            ));
        }
        out
    }

    /// Writes `record.csv` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("record.csv"), self.to_csv())?;
        let manifest = serde_json::to_string_pretty(self)
            .map_err(|e| IonError::Format(format!("manifest serialisation: {e}")))?;
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }
}

/// True when the best validation loss has not improved by more than 1e-5
/// relative for `patience` consecutive evaluations.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    if patience == 0 {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut since = 0usize;
    for &v in history {
        if !best.is_finite() || best - v > 1e-5 * best.abs() {
            best = v;
            since = 0;
        } else {
            since += 1;
            if since >= patience {
                return true;
            }
        }
    }
    false
}

/// Derived stream seed helpers, all hanging off the run seed.
pub(crate) fn stream_seed(cfg: &TrainConfig, tag: &str) -> u64 {
    derive_seed(cfg.seed, tag, 0)
}

/// Evaluation output over a fixed set.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub loss: f64,
    /// Classification accuracy or unweighted mean-class IoU.
    pub metric: f64,
    /// Per-image correctness (0/1) or per-image mean-class IoU.
    pub per_image: Vec<f64>,
    /// Aggregate confusion for segmentation sets.
    pub confusion: Option<ConfusionCounts>,
}

/// Applies one degradation to every image of a set with frozen per-image
/// seeds, producing a fixed evaluation set.
pub fn degrade_set(set: &SampleSet, spec: &DegradeSpec, seed: u64) -> Result<SampleSet> {
    let images = crate::degrade::build_fixed_eval_set(&set.images, spec, seed)?;
    Ok(SampleSet { images, targets: set.targets.clone(), num_classes: set.num_classes })
}

/// Assigns validation images to mixture domains round-robin (index modulo
/// domain count) with frozen seeds, for a deterministic mixed validation
/// set.
pub fn round_robin_degrade(set: &SampleSet, mix: &crate::data::MixSpec, seed: u64) -> Result<SampleSet> {
    let mut images = Vec::with_capacity(set.len());
    for (i, img) in set.images.iter().enumerate() {
        let spec = &mix.domains[i % mix.domains.len()].degrade;
        images.push(crate::degrade::apply(img, spec, derive_seed(seed, "valset", i as u64))?);
    }
    Ok(SampleSet { images, targets: set.targets.clone(), num_classes: set.num_classes })
}

const EVAL_BATCH: usize = 8;

/// Runs `target` (optionally composed with a preprocessing net) over a
/// fixed set in evaluation mode and scores it.
///
/// An untrained preprocessing net whose batch-norm statistics were never
/// populated falls back to batch statistics for this evaluation only.
pub fn evaluate(
    target: &mut dyn Net<f32>,
    mut ion: Option<&mut IonNet<f32>>,
    set: &SampleSet,
    k: usize,
) -> Result<EvalOutcome> {
    if let Some(g) = ion.as_deref_mut() {
        g.set_mode(Mode::Eval);
    }
    target.set_mode(Mode::Eval);
    let mut total_loss = 0.0f64;
    let mut total_weight = 0.0f64;
    let mut per_image = Vec::with_capacity(set.len());
    let seg = matches!(set.targets, Targets::Maps(_));
    let mut agg = seg.then(|| ConfusionCounts::zeros(k));

    let mut i = 0usize;
    while i < set.len() {
        let hi = (i + EVAL_BATCH).min(set.len());
        let refs: Vec<&Image> = set.images[i..hi].iter().collect();
        let x = crate::data::images_to_tensor(&refs)?;
        let indices: Vec<usize> = (i..hi).collect();
        let targets = batch_targets_of(set, &indices);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let fed = match ion.as_deref_mut() {
            Some(g) => match g.forward(&mut tape, xv) {
                Ok(v) => v,
                Err(IonError::UninitializedStats { .. }) => {
                    g.set_mode(Mode::Train);
                    let v = g.forward(&mut tape, xv)?;
                    g.set_mode(Mode::Eval);
                    v
                }
                Err(e) => return Err(e),
            },
            None => xv,
        };
        let logits = target.forward(&mut tape, fed)?;
        let loss = tape.softmax_cross_entropy(logits, targets.as_slice(), None)?;
        let weight = targets.as_slice().len() as f64;
        total_loss += tape.value(loss).data[0] as f64 * weight;
        total_weight += weight;

        let preds = argmax_predictions(tape.value(logits));
        match &targets {
            BatchTargets::Labels(gts) => {
                for (p, g) in preds.chunks(1).zip(gts) {
                    per_image.push(if p[0] == *g { 1.0 } else { 0.0 });
                }
            }
            BatchTargets::Maps(gts) => {
                let plane = tape.value(logits).shape[2] * tape.value(logits).shape[3];
                for (bi, _) in indices.iter().enumerate() {
                    let p = &preds[bi * plane..(bi + 1) * plane];
                    let g = &gts[bi * plane..(bi + 1) * plane];
                    let cc = confusion(p, g, k, None)?;
                    per_image.push(mean_class_iou(&cc));
                    if let Some(a) = agg.as_mut() {
                        a.merge(&cc);
                    }
                }
            }
        }
        i = hi;
    }

    let metric = match &set.targets {
        Targets::Labels(_) => per_image.iter().sum::<f64>() / per_image.len().max(1) as f64,
        Targets::Maps(_) => agg.as_ref().map(mean_class_iou).unwrap_or(0.0),
    };
    Ok(EvalOutcome {
        loss: total_loss / total_weight.max(1.0),
        metric,
        per_image,
        confusion: agg,
    })
}

pub(crate) fn batch_targets_of(set: &SampleSet, indices: &[usize]) -> BatchTargets {
    match &set.targets {
        Targets::Labels(l) => BatchTargets::Labels(indices.iter().map(|&i| l[i]).collect()),
        Targets::Maps(m) => {
            let mut flat = Vec::new();
            for &i in indices {
                flat.extend_from_slice(&m[i].ids);
            }
            BatchTargets::Maps(flat)
        }
    }
}

/// Argmax class per position for `[B,K]` or `[B,K,H,W]` logits.
pub fn argmax_predictions(logits: &TensorData<f32>) -> Vec<u32> {
    let (b, k, spatial) = match logits.shape[..] {
        [b, k] => (b, k, 1),
        [b, k, h, w] => (b, k, h * w),
        _ => return Vec::new(),
    };
    let mut out = Vec::with_capacity(b * spatial);
    for bi in 0..b {
        for pos in 0..spatial {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..k {
                let v = logits.data[(bi * k + c) * spatial + pos];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_rule_examples() {
        // strictly decreasing: never stops
        let h: Vec<f64> = (0..20).map(|i| 1.0 / (i + 1) as f64).collect();
        assert!(!early_stop(&h, 3));

        // constant losses, patience 3: stops at evaluation 4
        assert!(!early_stop(&[1.0, 1.0, 1.0], 3));
        assert!(early_stop(&[1.0, 1.0, 1.0, 1.0], 3));

        // improvement at the last evaluation resets the counter
        assert!(!early_stop(&[1.0, 1.0, 1.0, 0.5], 3));

        // sub-threshold improvement does not count
        assert!(early_stop(&[1.0, 1.0 - 1e-9, 1.0 - 2e-9, 1.0 - 3e-9], 3));
    }

    #[test]
    fn argmax_handles_both_layouts() {
        let t = TensorData::new(vec![2, 3], vec![0.1, 0.9, 0.0, 1.0, 0.2, 0.3]).unwrap();
        assert_eq!(argmax_predictions(&t), vec![1, 0]);
        let t = TensorData::new(vec![1, 2, 1, 2], vec![0.1, 0.9, 0.5, 0.2]).unwrap();
        assert_eq!(argmax_predictions(&t), vec![1, 0]);
    }

    #[test]
    fn run_record_csv_shape() {
        let cfg = TrainConfig::new(Scheme::Baseline, 3, 7);
        let mut rec = RunRecord::new("baseline", &cfg);
        rec.rows.push(EpochRow { epoch: 1, train_loss: 0.5, val_loss: 0.25, val_metric: 0.75 });
        let csv = rec.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_metric\r\n"));
        assert!(csv.contains("1,0.5,0.25,0.75\r\n"));
    }
}
