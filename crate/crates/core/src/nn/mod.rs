//! Network building blocks, the model trait, and checkpointing.

mod checkpoint;
mod ion;
mod targets;

pub use checkpoint::{load_checkpoint, save_checkpoint, StateRecord, CHECKPOINT_VERSION};
pub use ion::{build_ion, channel_schedule, ForwardTrace, IonNet, UNetConfig};
pub use targets::{
    build_classifier, build_discriminator, build_segmenter, Classifier, Discriminator, Segmenter,
    TargetKind, TargetNetConfig,
};

use crate::error::{IonError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorData, Var};
use rand_distr::{Distribution, Normal};

/// Train / eval switch; controls batch-norm statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A model: an ordered list of named parameter tensors plus a forward
/// function. Freezing clears `requires_grad` on every parameter.
pub trait Net<T: Scalar> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn state(&self) -> Vec<StateRecord>;
    fn load_state(&mut self, records: &[StateRecord]) -> Result<()>;
    fn set_mode(&mut self, mode: Mode);
}

pub fn freeze<T: Scalar>(net: &mut dyn Net<T>) {
    for p in net.params_mut() {
        p.requires_grad = false;
        p.grad = None;
    }
}

pub fn unfreeze<T: Scalar>(net: &mut dyn Net<T>) {
    for p in net.params_mut() {
        p.requires_grad = true;
    }
}

pub fn is_frozen<T: Scalar>(net: &mut dyn Net<T>) -> bool {
    net.params_mut().iter().all(|p| !p.requires_grad)
}

/// Total number of scalar parameters.
pub fn param_count<T: Scalar>(net: &mut dyn Net<T>) -> usize {
    net.params_mut().iter().map(|p| p.len()).sum()
}

/// FNV-1a hash over every state record (names, shapes and f32 bit
/// patterns); detects any parameter or running-statistic change.
pub fn state_checksum<T: Scalar>(net: &dyn Net<T>) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for rec in net.state() {
        eat(rec.name.as_bytes());
        for d in &rec.shape {
            eat(&(*d as u64).to_le_bytes());
        }
        for v in &rec.data {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

/// Accumulates tape gradients into every trainable parameter.
pub fn pull_grads<T: Scalar>(net: &mut dyn Net<T>, tape: &Tape<T>) {
    for p in net.params_mut() {
        p.pull_grad(tape);
    }
}

pub fn zero_grads<T: Scalar>(net: &mut dyn Net<T>) {
    for p in net.params_mut() {
        p.zero_grad();
    }
}

fn init_normal<T: Scalar>(name: &str, shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f64, std).expect("std > 0");
    let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(name, TensorData { shape, data }, true)
}

/// 2-d convolution layer with bias. Kaiming-style init for the leaky-ReLU
/// nets used here.
pub struct Conv2d<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv2d {
            w: init_normal(&format!("{name}.w"), vec![cout, cin, k, k], std, rng),
            b: Tensor::new(format!("{name}.b"), TensorData::zeros(vec![cout]), true),
            stride,
            pad,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.w.bind(tape);
        let b = self.b.bind(tape);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Fully connected layer.
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Linear {
            w: init_normal(&format!("{name}.w"), vec![fan_in, fan_out], std, rng),
            b: Tensor::new(format!("{name}.b"), TensorData::zeros(vec![fan_out]), true),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.w.bind(tape);
        let b = self.b.bind(tape);
        tape.linear(x, w, b)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Batch normalisation layer holding learnable gamma/beta plus running
/// statistics (momentum 0.1, biased variance). Evaluation before any
/// training step is an error.
pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub initialized: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Tensor::new(format!("{name}.gamma"), TensorData::full(vec![channels], T::one()), true),
            beta: Tensor::new(format!("{name}.beta"), TensorData::zeros(vec![channels]), true),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batchnorm2d_train(x, gamma, beta, T::from_f64(self.eps))?;
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                if self.initialized {
                    for c in 0..mean.len() {
                        self.running_mean[c] = keep * self.running_mean[c] + m * mean[c];
                        self.running_var[c] = keep * self.running_var[c] + m * var[c];
                    }
                } else {
                    self.running_mean.copy_from_slice(&mean);
                    self.running_var.copy_from_slice(&var);
                    self.initialized = true;
                }
                Ok(y)
            }
            Mode::Eval => {
                if !self.initialized {
                    return Err(IonError::UninitializedStats { layer: self.name.clone() });
                }
                tape.batchnorm2d_eval(
                    x,
                    gamma,
                    beta,
                    &self.running_mean,
                    &self.running_var,
                    T::from_f64(self.eps),
                )
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffer_records(&self) -> Vec<StateRecord> {
        vec![
            StateRecord::from_values(
                format!("{}.running_mean", self.name),
                vec![self.running_mean.len()],
                self.running_mean.iter().map(|v| v.as_f64() as f32).collect(),
            ),
            StateRecord::from_values(
                format!("{}.running_var", self.name),
                vec![self.running_var.len()],
                self.running_var.iter().map(|v| v.as_f64() as f32).collect(),
            ),
            StateRecord::from_values(
                format!("{}.initialized", self.name),
                vec![1],
                vec![if self.initialized { 1.0 } else { 0.0 }],
            ),
        ]
    }

    fn load_buffers(&mut self, find: &dyn Fn(&str) -> Option<StateRecord>) -> Result<()> {
        let mean = find(&format!("{}.running_mean", self.name))
            .ok_or_else(|| IonError::Format(format!("missing record {}.running_mean", self.name)))?;
        let var = find(&format!("{}.running_var", self.name))
            .ok_or_else(|| IonError::Format(format!("missing record {}.running_var", self.name)))?;
        let init = find(&format!("{}.initialized", self.name))
            .ok_or_else(|| IonError::Format(format!("missing record {}.initialized", self.name)))?;
        self.running_mean = mean.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        self.running_var = var.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        self.initialized = init.data[0] != 0.0;
        Ok(())
    }
}

/// Shared state-record plumbing for params.
pub(crate) fn param_record<T: Scalar>(p: &Tensor<T>) -> StateRecord {
    StateRecord::from_values(
        p.name.clone(),
        p.value.shape.clone(),
        p.value.data.iter().map(|v| v.as_f64() as f32).collect(),
    )
}

pub(crate) fn load_param<T: Scalar>(p: &mut Tensor<T>, records: &[StateRecord]) -> Result<()> {
    let rec = records
        .iter()
        .find(|r| r.name == p.name)
        .ok_or_else(|| IonError::Format(format!("missing record {}", p.name)))?;
    if rec.shape != p.value.shape {
        return Err(IonError::Format(format!(
            "record {} has shape {:?}, expected {:?}",
            p.name, rec.shape, p.value.shape
        )));
    }
    p.value.data = rec.data.iter().map(|&v| T::from_f64(v as f64)).collect();
    Ok(())
}
