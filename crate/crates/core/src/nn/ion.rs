//! The input-preprocessing u-net: a symmetrical encoder/decoder with skip
//! connections, bicubic upsampling and a tanh output head.

use super::{
    load_param, param_record, BatchNorm2d, Conv2d, Mode, Net, StateRecord,
};
use crate::error::{IonError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Architecture switches for the preprocessing u-net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub n_blocks: usize,
    pub base_channels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
}

fn default_in_channels() -> usize {
    3
}
fn default_out_channels() -> usize {
    3
}
fn default_leaky_slope() -> f64 {
    0.01
}

impl UNetConfig {
    pub fn new(n_blocks: usize, base_channels: usize) -> Self {
        UNetConfig {
            n_blocks,
            base_channels,
            in_channels: 3,
            out_channels: 3,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 1 || self.base_channels < 1 {
            return Err(IonError::Config(format!(
                "u-net needs n_blocks >= 1 and base_channels >= 1, got {} and {}",
                self.n_blocks, self.base_channels
            )));
        }
        if !(self.out_channels == 1 || self.out_channels == 3) {
            return Err(IonError::Config(format!(
                "out_channels must be 1 or 3, got {}",
                self.out_channels
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(IonError::Config(format!(
                "leaky_slope must lie in (0,1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Channel widths per block: c1, round(1.5 c1), then each width doubling
/// the one two places earlier (64, 96, 128, 192, 256, 384, 512, ...).
pub fn channel_schedule(base: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let c = match k {
            0 => base,
            1 => (1.5 * base as f64).round() as usize,
            _ => 2 * out[k - 2],
        };
        out.push(c);
    }
    out
}

struct ConvBnBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBnBlock<T> {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        ConvBnBlock {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 1, 1, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, slope: T) -> Result<Var> {
        let x = self.conv.forward(tape, x)?;
        let x = self.bn.forward(tape, x, mode)?;
        tape.leaky_relu(x, slope)
    }
}

/// Shape probe filled in by [`IonNet::forward_traced`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    /// Spatial size of the deepest (post-pool) feature map.
    pub deepest: (usize, usize),
    /// Channel count entering each decoder concatenation, deepest first.
    pub concat_channels: Vec<usize>,
}

/// The preprocessing u-net. Encoder blocks apply two 3x3 conv+BN+leaky-ReLU
/// stages and then pool; skips are taken pre-pool. Decoder blocks upsample,
/// concatenate the matching skip, reduce back to the schedule width and
/// hand the next level its width. A final 3x3 conv (no BN) and tanh map to
/// `out_channels` in (-1, 1).
pub struct IonNet<T> {
    pub cfg: UNetConfig,
    schedule: Vec<usize>,
    enc: Vec<(ConvBnBlock<T>, ConvBnBlock<T>)>,
    dec: Vec<(ConvBnBlock<T>, ConvBnBlock<T>)>,
    head: Conv2d<T>,
    pub mode: Mode,
}

/// Builds the u-net with seeded parameter initialisation.
pub fn build_ion<T: Scalar>(cfg: &UNetConfig, rng: &mut Rng) -> Result<IonNet<T>> {
    cfg.validate()?;
    let n = cfg.n_blocks;
    let sched = channel_schedule(cfg.base_channels, n);
    let mut enc = Vec::with_capacity(n);
    for k in 0..n {
        let cin = if k == 0 { cfg.in_channels } else { sched[k - 1] };
        enc.push((
            ConvBnBlock::new(&format!("enc{k}.a"), cin, sched[k], rng),
            ConvBnBlock::new(&format!("enc{k}.b"), sched[k], sched[k], rng),
        ));
    }
    // decoder runs deepest level first; level k reduces 2*c_k to c_k and
    // then to the width the next shallower level expects
    let mut dec = Vec::with_capacity(n);
    for (j, k) in (0..n).rev().enumerate() {
        let next = if k == 0 { sched[0] } else { sched[k - 1] };
        dec.push((
            ConvBnBlock::new(&format!("dec{j}.a"), 2 * sched[k], sched[k], rng),
            ConvBnBlock::new(&format!("dec{j}.b"), sched[k], next, rng),
        ));
    }
    let head = Conv2d::new("head", sched[0], cfg.out_channels, 3, 1, 1, rng);
    Ok(IonNet { cfg: cfg.clone(), schedule: sched, enc, dec, head, mode: Mode::Train })
}

impl<T: Scalar> IonNet<T> {
    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn forward_traced(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(IonError::ShapeMismatch {
                op: "ion_forward",
                detail: format!("expected [B,C,H,W], got {shape:?}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        let div = 1usize << self.cfg.n_blocks;
        if h % div != 0 || w % div != 0 {
            return Err(IonError::ShapeMismatch {
                op: "ion_forward",
                detail: format!(
                    "input {h}x{w} must be divisible by 2^{} = {div}",
                    self.cfg.n_blocks
                ),
            });
        }
        let slope = T::from_f64(self.cfg.leaky_slope);
        let mode = self.mode;
        let mut skips: Vec<Var> = Vec::with_capacity(self.cfg.n_blocks);
        let mut cur = x;
        for (a, b) in self.enc.iter_mut() {
            cur = a.forward(tape, cur, mode, slope)?;
            cur = b.forward(tape, cur, mode, slope)?;
            skips.push(cur);
            cur = tape.maxpool2(cur)?;
        }
        if let Some(t) = trace.as_deref_mut() {
            let s = tape.shape(cur);
            t.deepest = (s[2], s[3]);
            t.concat_channels.clear();
        }
        for (j, (a, b)) in self.dec.iter_mut().enumerate() {
            let skip = skips[self.cfg.n_blocks - 1 - j];
            cur = tape.upsample_bicubic2(cur)?;
            cur = tape.concat_channels(cur, skip)?;
            if let Some(t) = trace.as_deref_mut() {
                t.concat_channels.push(tape.shape(cur)[1]);
            }
            cur = a.forward(tape, cur, mode, slope)?;
            cur = b.forward(tape, cur, mode, slope)?;
        }
        let out = self.head.forward(tape, cur)?;
        Ok(tape.tanh(out))
    }
}

impl<T: Scalar> Net<T> for IonNet<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.forward_traced(tape, x, None)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (a, b) in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            out.extend(a.conv.params_mut());
            out.extend(a.bn.params_mut());
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn state(&self) -> Vec<StateRecord> {
        let mut out = Vec::new();
        for (a, b) in self.enc.iter().chain(self.dec.iter()) {
            out.push(param_record(&a.conv.w));
            out.push(param_record(&a.conv.b));
            out.push(param_record(&a.bn.gamma));
            out.push(param_record(&a.bn.beta));
            out.extend(a.bn.buffer_records());
            out.push(param_record(&b.conv.w));
            out.push(param_record(&b.conv.b));
            out.push(param_record(&b.bn.gamma));
            out.push(param_record(&b.bn.beta));
            out.extend(b.bn.buffer_records());
        }
        out.push(param_record(&self.head.w));
        out.push(param_record(&self.head.b));
        out
    }

    fn load_state(&mut self, records: &[StateRecord]) -> Result<()> {
        let find = |name: &str| records.iter().find(|r| r.name == name).cloned();
        for (a, b) in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            for blk in [a, b] {
                load_param(&mut blk.conv.w, records)?;
                load_param(&mut blk.conv.b, records)?;
                load_param(&mut blk.bn.gamma, records)?;
                load_param(&mut blk.bn.beta, records)?;
                blk.bn.load_buffers(&find)?;
            }
        }
        load_param(&mut self.head.w, records)?;
        load_param(&mut self.head.b, records)?;
        Ok(())
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;

    #[test]
    fn schedule_matches_the_reference_sequence() {
        assert_eq!(channel_schedule(64, 5), vec![64, 96, 128, 192, 256]);
        assert_eq!(channel_schedule(64, 7), vec![64, 96, 128, 192, 256, 384, 512]);
        assert_eq!(channel_schedule(8, 1), vec![8]);
    }

    #[test]
    fn schedule_doubles_every_other_term() {
        for base in [3usize, 8, 17, 64] {
            let s = channel_schedule(base, 9);
            for k in 0..s.len() - 2 {
                assert_eq!(s[k + 2], 2 * s[k], "base {base} k {k}");
            }
        }
    }

    #[test]
    fn forward_preserves_shape_and_open_interval() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from(42, "ion", 0);
        for n in [2usize, 3, 4] {
            let cfg = UNetConfig::new(n, 4);
            let mut net = build_ion::<f32>(&cfg, &mut rng).unwrap();
            let mut tape = Tape::new();
            let mut data = TensorData::zeros(vec![1, 3, 32, 32]);
            for v in data.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let x = tape.leaf(data, false);
            let mut trace = ForwardTrace::default();
            let y = net.forward_traced(&mut tape, x, Some(&mut trace)).unwrap();
            assert_eq!(tape.shape(y), &[1, 3, 32, 32]);
            assert!(tape.value(y).data.iter().all(|&v| v > -1.0 && v < 1.0));
            let div = 1usize << n;
            assert_eq!(trace.deepest, (32 / div, 32 / div));
            // every decoder concat sees 2 * c_k channels
            let sched = channel_schedule(4, n);
            let expect: Vec<usize> = (0..n).rev().map(|k| 2 * sched[k]).collect();
            assert_eq!(trace.concat_channels, expect);
        }
    }

    #[test]
    fn forward_rejects_indivisible_input() {
        let mut rng = crate::rng::rng_from(42, "ion", 1);
        let cfg = UNetConfig::new(3, 4);
        let mut net = build_ion::<f32>(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(TensorData::zeros(vec![1, 3, 20, 24]), false);
        let err = net.forward(&mut tape, x).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn batch_shape_contract() {
        let mut rng = crate::rng::rng_from(42, "ion", 2);
        let cfg = UNetConfig::new(3, 8);
        let mut net = build_ion::<f32>(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(TensorData::zeros(vec![2, 3, 64, 64]), false);
        let y = net.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 64, 64]);
    }
}
