//! Stand-in target networks: a small residual classifier, an
//! encoder-decoder segmenter with skip connections, and a strided-conv
//! discriminator. All are intentionally compact so comparisons between
//! training schemes reflect the scheme, not model capacity.

use super::{load_param, param_record, Conv2d, Linear, Mode, Net, StateRecord};
use crate::error::{IonError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Classifier,
    Segmenter,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetNetConfig {
    pub kind: TargetKind,
    pub width: usize,
    pub depth: usize,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
}

fn default_in_channels() -> usize {
    3
}
fn default_leaky_slope() -> f64 {
    0.01
}

impl TargetNetConfig {
    pub fn classifier(width: usize, depth: usize, num_classes: usize) -> Self {
        TargetNetConfig {
            kind: TargetKind::Classifier,
            width,
            depth,
            num_classes,
            in_channels: 3,
            leaky_slope: 0.01,
        }
    }

    pub fn segmenter(width: usize, depth: usize, num_classes: usize) -> Self {
        TargetNetConfig {
            kind: TargetKind::Segmenter,
            width,
            depth,
            num_classes,
            in_channels: 3,
            leaky_slope: 0.01,
        }
    }

    pub fn discriminator(width: usize) -> Self {
        TargetNetConfig {
            kind: TargetKind::Discriminator,
            width,
            depth: 3,
            num_classes: 2,
            in_channels: 3,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.depth < 1 || self.in_channels < 1 {
            return Err(IonError::Config(format!(
                "target net needs width, depth and in_channels >= 1, got {self:?}"
            )));
        }
        if matches!(self.kind, TargetKind::Classifier | TargetKind::Segmenter)
            && self.num_classes < 2
        {
            return Err(IonError::Config(format!(
                "classifier/segmenter need num_classes >= 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Residual conv classifier: stem conv + pool, `depth` residual blocks each
/// followed by pooling, global average pool, then a linear head to K
/// logits.
pub struct Classifier<T> {
    cfg: TargetNetConfig,
    stem: Conv2d<T>,
    blocks: Vec<(Conv2d<T>, Conv2d<T>)>,
    head: Linear<T>,
}

pub fn build_classifier<T: Scalar>(cfg: &TargetNetConfig, rng: &mut Rng) -> Result<Classifier<T>> {
    cfg.validate()?;
    let w = cfg.width;
    let stem = Conv2d::new("stem", cfg.in_channels, w, 3, 1, 1, rng);
    let blocks = (0..cfg.depth)
        .map(|i| {
            (
                Conv2d::new(&format!("res{i}.a"), w, w, 3, 1, 1, rng),
                Conv2d::new(&format!("res{i}.b"), w, w, 3, 1, 1, rng),
            )
        })
        .collect();
    let head = Linear::new("head", w, cfg.num_classes, rng);
    Ok(Classifier { cfg: cfg.clone(), stem, blocks, head })
}

impl<T: Scalar> Net<T> for Classifier<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let slope = T::from_f64(self.cfg.leaky_slope);
        let mut cur = self.stem.forward(tape, x)?;
        cur = tape.leaky_relu(cur, slope)?;
        cur = tape.maxpool2(cur)?;
        for (a, b) in self.blocks.iter_mut() {
            let h = a.forward(tape, cur)?;
            let h = tape.leaky_relu(h, slope)?;
            let h = b.forward(tape, h)?;
            let sum = tape.add(h, cur)?;
            cur = tape.leaky_relu(sum, slope)?;
            cur = tape.maxpool2(cur)?;
        }
        let pooled = tape.mean_spatial(cur)?;
        self.head.forward(tape, pooled)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.stem.params_mut();
        for (a, b) in self.blocks.iter_mut() {
            out.extend(a.params_mut());
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn state(&self) -> Vec<StateRecord> {
        let mut out = vec![param_record(&self.stem.w), param_record(&self.stem.b)];
        for (a, b) in &self.blocks {
            out.push(param_record(&a.w));
            out.push(param_record(&a.b));
            out.push(param_record(&b.w));
            out.push(param_record(&b.b));
        }
        out.push(param_record(&self.head.w));
        out.push(param_record(&self.head.b));
        out
    }

    fn load_state(&mut self, records: &[StateRecord]) -> Result<()> {
        for p in self.params_mut() {
            load_param(p, records)?;
        }
        Ok(())
    }

    fn set_mode(&mut self, _mode: Mode) {}
}

/// Encoder-decoder segmenter with per-level skip concatenations and a
/// K-channel head at input resolution.
pub struct Segmenter<T> {
    cfg: TargetNetConfig,
    enc: Vec<Conv2d<T>>,
    mid: Conv2d<T>,
    dec: Vec<Conv2d<T>>,
    head: Conv2d<T>,
}

pub fn build_segmenter<T: Scalar>(cfg: &TargetNetConfig, rng: &mut Rng) -> Result<Segmenter<T>> {
    cfg.validate()?;
    let widths: Vec<usize> = (0..cfg.depth).map(|l| cfg.width << l).collect();
    let mut enc = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let cin = if l == 0 { cfg.in_channels } else { widths[l - 1] };
        enc.push(Conv2d::new(&format!("enc{l}"), cin, widths[l], 3, 1, 1, rng));
    }
    let deepest = *widths.last().unwrap();
    let mid = Conv2d::new("mid", deepest, deepest, 3, 1, 1, rng);
    let mut dec = Vec::with_capacity(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let cin = if l == cfg.depth - 1 { deepest } else { widths[l + 1] };
        dec.push(Conv2d::new(&format!("dec{l}"), cin + widths[l], widths[l], 3, 1, 1, rng));
    }
    let head = Conv2d::new("head", cfg.width, cfg.num_classes, 3, 1, 1, rng);
    Ok(Segmenter { cfg: cfg.clone(), enc, mid, dec, head })
}

impl<T: Scalar> Net<T> for Segmenter<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let slope = T::from_f64(self.cfg.leaky_slope);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut cur = x;
        for conv in self.enc.iter_mut() {
            cur = conv.forward(tape, cur)?;
            cur = tape.leaky_relu(cur, slope)?;
            skips.push(cur);
            cur = tape.maxpool2(cur)?;
        }
        cur = self.mid.forward(tape, cur)?;
        cur = tape.leaky_relu(cur, slope)?;
        for (j, conv) in self.dec.iter_mut().enumerate() {
            let skip = skips[self.cfg.depth - 1 - j];
            cur = tape.upsample_bicubic2(cur)?;
            cur = tape.concat_channels(cur, skip)?;
            cur = conv.forward(tape, cur)?;
            cur = tape.leaky_relu(cur, slope)?;
        }
        self.head.forward(tape, cur)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in self.enc.iter_mut() {
            out.extend(c.params_mut());
        }
        out.extend(self.mid.params_mut());
        for c in self.dec.iter_mut() {
            out.extend(c.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn state(&self) -> Vec<StateRecord> {
        let mut out = Vec::new();
        for c in &self.enc {
            out.push(param_record(&c.w));
            out.push(param_record(&c.b));
        }
        out.push(param_record(&self.mid.w));
        out.push(param_record(&self.mid.b));
        for c in &self.dec {
            out.push(param_record(&c.w));
            out.push(param_record(&c.b));
        }
        out.push(param_record(&self.head.w));
        out.push(param_record(&self.head.b));
        out
    }

    fn load_state(&mut self, records: &[StateRecord]) -> Result<()> {
        for p in self.params_mut() {
            load_param(p, records)?;
        }
        Ok(())
    }

    fn set_mode(&mut self, _mode: Mode) {}
}

/// Strided conv stack scoring each image with a single real value.
/// Uses 4x4 stride-2 convolutions so even input sizes halve exactly.
pub struct Discriminator<T> {
    cfg: TargetNetConfig,
    convs: Vec<Conv2d<T>>,
    head: Linear<T>,
}

pub fn build_discriminator<T: Scalar>(
    cfg: &TargetNetConfig,
    rng: &mut Rng,
) -> Result<Discriminator<T>> {
    cfg.validate()?;
    let w = cfg.width;
    let widths = [w, 2 * w, 2 * w];
    let mut convs = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, &cout) in widths.iter().enumerate().take(cfg.depth.min(3)) {
        convs.push(Conv2d::new(&format!("d{i}"), cin, cout, 4, 2, 1, rng));
        cin = cout;
    }
    let head = Linear::new("score", cin, 1, rng);
    Ok(Discriminator { cfg: cfg.clone(), convs, head })
}

impl<T: Scalar> Net<T> for Discriminator<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let slope = T::from_f64(self.cfg.leaky_slope);
        let mut cur = x;
        for conv in self.convs.iter_mut() {
            cur = conv.forward(tape, cur)?;
            cur = tape.leaky_relu(cur, slope)?;
        }
        let pooled = tape.mean_spatial(cur)?;
        self.head.forward(tape, pooled)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in self.convs.iter_mut() {
            out.extend(c.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn state(&self) -> Vec<StateRecord> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(param_record(&c.w));
            out.push(param_record(&c.b));
        }
        out.push(param_record(&self.head.w));
        out.push(param_record(&self.head.b));
        out
    }

    fn load_state(&mut self, records: &[StateRecord]) -> Result<()> {
        for p in self.params_mut() {
            load_param(p, records)?;
        }
        Ok(())
    }

    fn set_mode(&mut self, _mode: Mode) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;

    #[test]
    fn shape_contracts() {
        let mut rng = crate::rng::rng_from(7, "targets", 0);
        let mut cls = build_classifier::<f32>(&TargetNetConfig::classifier(8, 2, 6), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(TensorData::zeros(vec![2, 3, 32, 32]), false);
        let y = cls.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 6]);

        let mut seg = build_segmenter::<f32>(&TargetNetConfig::segmenter(8, 2, 5), &mut rng).unwrap();
        let x = tape.leaf(TensorData::zeros(vec![2, 3, 64, 64]), false);
        let y = seg.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 64, 64]);

        let mut disc = build_discriminator::<f32>(&TargetNetConfig::discriminator(8), &mut rng).unwrap();
        let x = tape.leaf(TensorData::zeros(vec![2, 3, 64, 64]), false);
        let y = disc.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
    }

    #[test]
    fn configs_validate() {
        assert!(TargetNetConfig::classifier(8, 2, 1).validate().is_err());
        assert!(TargetNetConfig::classifier(0, 2, 4).validate().is_err());
        assert!(TargetNetConfig::discriminator(8).validate().is_ok());
    }
}
