//! Reverse-mode autodiff tape.
//!
//! Operations are evaluated eagerly and recorded in topological order; each
//! node keeps its forward value plus whatever small context its backward
//! rule needs. `backward` walks the list in reverse, propagating through a
//! per-call scratch buffer and folding the results into each node's
//! persistent gradient accumulator, so repeated calls accumulate.

use super::conv::{
    col2im_add, conv_out_dim, im2col, upsample2_cols, upsample2_cols_adjoint, upsample2_rows,
    upsample2_rows_adjoint,
};
use super::TensorData;
use crate::error::{IonError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    BnTrain { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    ConcatC { a: Var, b: Var },
    SliceC { x: Var, from: usize },
    Tanh { x: Var },
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<u32>, ignore: Option<u32>, counted: usize },
    L1 { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Mul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    MeanSpatial { x: Var },
    GanLogistic { s: Var, real: bool },
}

struct Node<T> {
    value: TensorData<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_calls: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

static TAPE_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            nodes: Vec::new(),
            backward_calls: 0,
        }
    }

    /// Process-unique identity of this tape, used to cache leaf bindings.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of completed `backward` calls on this tape.
    pub fn backward_calls(&self) -> u64 {
        self.backward_calls
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a node, if the backward pass reached it.
    pub fn grad_of(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: TensorData<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: TensorData<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Copies a node's value into a fresh non-differentiable leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    // ---- operators -----------------------------------------------------

    /// 2-d convolution: x [B,Cin,H,W] * w [Cout,Cin,k,k] + b [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(IonError::InvalidArg { op: OP, detail: "stride must be >= 1".into() });
        }
        let (bsz, cin, h, wd) = self.value(x).dims4(OP)?;
        let (cout, wcin, k, k2) = self.value(w).dims4(OP)?;
        if k != k2 {
            return Err(IonError::InvalidArg { op: OP, detail: format!("kernel must be square, got {k}x{k2}") });
        }
        if wcin != cin {
            return Err(IonError::ShapeMismatch {
                op: OP,
                detail: format!("input has Cin={cin} but weight expects Cin={wcin}"),
            });
        }
        if self.value(b).shape != [cout] {
            return Err(IonError::ShapeMismatch {
                op: OP,
                detail: format!("bias shape {:?} does not match Cout={cout}", self.value(b).shape),
            });
        }
        let oh = conv_out_dim(h, k, stride, pad).ok_or_else(|| IonError::ShapeMismatch {
            op: OP,
            detail: format!("height H={h} with k={k}, stride={stride}, pad={pad} gives a non-integral output height"),
        })?;
        let ow = conv_out_dim(wd, k, stride, pad).ok_or_else(|| IonError::ShapeMismatch {
            op: OP,
            detail: format!("width W={wd} with k={k}, stride={stride}, pad={pad} gives a non-integral output width"),
        })?;

        let ckk = cin * k * k;
        let n = oh * ow;
        let mut out = vec![T::zero(); bsz * cout * n];
        let mut cols = vec![T::zero(); ckk * n];
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        for bi in 0..bsz {
            im2col(&xv[bi * cin * h * wd..][..cin * h * wd], cin, h, wd, k, stride, pad, oh, ow, &mut cols);
            let dst = &mut out[bi * cout * n..][..cout * n];
            T::gemm(cout, ckk, n, T::one(), wv, &cols, T::zero(), dst);
            for co in 0..cout {
                let bias = bv[co];
                for v in dst[co * n..][..n].iter_mut() {
                    *v = *v + bias;
                }
            }
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            TensorData { shape: vec![bsz, cout, oh, ow], data: out },
            needs,
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// Batch normalisation over (B,H,W) per channel, training mode.
    /// Returns the node plus the batch mean and biased variance so the
    /// caller can update its running statistics.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        const OP: &str = "batchnorm2d";
        let (b, c, h, w) = self.value(x).dims4(OP)?;
        self.check_bn_params(OP, gamma, beta, c)?;
        let plane = h * w;
        let n = b * plane;
        let n_t = T::from_f64(n as f64);
        let xv = &self.nodes[x.0].value.data;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let sl = &xv[(bi * c + ci) * plane..][..plane];
                s = s + sl.iter().copied().sum();
            }
            let m = s / n_t;
            let mut v = T::zero();
            for bi in 0..b {
                let sl = &xv[(bi * c + ci) * plane..][..plane];
                v = v + sl.iter().map(|&e| (e - m) * (e - m)).sum();
            }
            mean[ci] = m;
            var[ci] = v / n_t;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_forward(x, gamma, beta, &mean, &inv_std);
        let needs = self.needs(&[x, gamma, beta]);
        let node = self.push(
            out,
            needs,
            Op::BnTrain { x, gamma, beta, mean: mean.clone(), inv_std },
        );
        Ok((node, mean, var))
    }

    /// Batch normalisation with fixed statistics (evaluation mode).
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let (_, c, _, _) = self.value(x).dims4(OP)?;
        self.check_bn_params(OP, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(IonError::ShapeMismatch {
                op: OP,
                detail: format!(
                    "running stats have {} channels, input has {c}",
                    running_mean.len()
                ),
            });
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_forward(x, gamma, beta, &mean, &inv_std);
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, needs, Op::BnEval { x, gamma, beta, mean, inv_std }))
    }

    fn check_bn_params(&self, op: &'static str, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape != [c] {
                return Err(IonError::ShapeMismatch {
                    op,
                    detail: format!("{name} shape {:?} does not match C={c}", self.value(v).shape),
                });
            }
        }
        Ok(())
    }

    fn bn_forward(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> TensorData<T> {
        let xd = &self.nodes[x.0].value;
        let (b, c, h, w) = (xd.shape[0], xd.shape[1], xd.shape[2], xd.shape[3]);
        let plane = h * w;
        let g = &self.nodes[gamma.0].value.data;
        let bt = &self.nodes[beta.0].value.data;
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let scale = g[ci] * inv_std[ci];
                let shift = bt[ci] - mean[ci] * scale;
                let src = &xd.data[(bi * c + ci) * plane..][..plane];
                let dst = &mut out[(bi * c + ci) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * scale + shift;
                }
            }
        }
        TensorData { shape: xd.shape.clone(), data: out }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if slope <= T::zero() || slope >= T::one() {
            return Err(IonError::InvalidArg {
                op: "leaky_relu",
                detail: format!("slope must lie in (0,1), got {slope}"),
            });
        }
        let xd = &self.nodes[x.0].value;
        let data = xd.data.iter().map(|&v| if v > T::zero() { v } else { slope * v }).collect();
        let value = TensorData { shape: xd.shape.clone(), data };
        let needs = self.needs(&[x]);
        Ok(self.push(value, needs, Op::LeakyRelu { x, slope }))
    }

    /// 2x2 max pooling with stride 2. Ties route the gradient to the first
    /// element in row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let (b, c, h, w) = self.value(x).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(IonError::ShapeMismatch {
                op: OP,
                detail: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..b * c {
            let plane = &xv[bc * h * w..][..h * w];
            let base = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = (2 * oy) * w + 2 * ox;
                    let idxs = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = idxs[0];
                    for &i in &idxs[1..] {
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                    let o = bc * oh * ow + oy * ow + ox;
                    out[o] = plane[best];
                    argmax[o] = (base + best) as u32;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            TensorData { shape: vec![b, c, oh, ow], data: out },
            needs,
            Op::MaxPool2 { x, argmax },
        ))
    }

    /// Factor-2 bicubic upsampling (a = -0.5, edge clamp).
    pub fn upsample_bicubic2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("upsample_bicubic")?;
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        let mut tmp = vec![T::zero(); 2 * h * w];
        for bc in 0..b * c {
            let src = &xv[bc * h * w..][..h * w];
            upsample2_cols(src, h, w, &mut tmp);
            upsample2_rows(&tmp, 2 * h, w, &mut out[bc * 4 * h * w..][..4 * h * w]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            TensorData { shape: vec![b, c, 2 * h, 2 * w], data: out },
            needs,
            Op::Upsample2 { x },
        ))
    }

    /// Stacks channels: [B,Ca,H,W] ++ [B,Cb,H,W] -> [B,Ca+Cb,H,W].
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (ba, ca, ha, wa) = self.value(a).dims4(OP)?;
        let (bb, cb, hb, wb) = self.value(b).dims4(OP)?;
        if ba != bb || ha != hb || wa != wb {
            return Err(IonError::ShapeMismatch {
                op: OP,
                detail: format!(
                    "non-channel dims must match: [{ba},{ca},{ha},{wa}] vs [{bb},{cb},{hb},{wb}]"
                ),
            });
        }
        let plane = ha * wa;
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![T::zero(); ba * (ca + cb) * plane];
        for bi in 0..ba {
            let dst = &mut out[bi * (ca + cb) * plane..][..(ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&av[bi * ca * plane..][..ca * plane]);
            dst[ca * plane..].copy_from_slice(&bv[bi * cb * plane..][..cb * plane]);
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            TensorData { shape: vec![ba, ca + cb, ha, wa], data: out },
            needs,
            Op::ConcatC { a, b },
        ))
    }

    /// Copies channels `from..to` out of a 4-d tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let (b, c, h, w) = self.value(x).dims4(OP)?;
        if from >= to || to > c {
            return Err(IonError::InvalidArg {
                op: OP,
                detail: format!("range {from}..{to} invalid for C={c}"),
            });
        }
        let plane = h * w;
        let nc = to - from;
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![T::zero(); b * nc * plane];
        for bi in 0..b {
            out[bi * nc * plane..][..nc * plane]
                .copy_from_slice(&xv[(bi * c + from) * plane..][..nc * plane]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            TensorData { shape: vec![b, nc, h, w], data: out },
            needs,
            Op::SliceC { x, from },
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        // Clamp to the open interval: for large |x| the float tanh rounds
        // to exactly +-1, which the output contract excludes.
        let lim = T::below_one();
        let xd = &self.nodes[x.0].value;
        let data = xd.data.iter().map(|&v| v.tanh().min(lim).max(-lim)).collect();
        let value = TensorData { shape: xd.shape.clone(), data };
        let needs = self.needs(&[x]);
        self.push(value, needs, Op::Tanh { x })
    }

    /// Mean cross-entropy of softmaxed logits against integer targets.
    /// Logits are [B,K] with targets [B], or [B,K,H,W] with targets [B*H*W]
    /// row-major. Targets equal to `ignore` are excluded from the mean.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: Option<u32>,
    ) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let ld = &self.nodes[logits.0].value;
        let (b, k, spatial) = match ld.shape[..] {
            [b, k] => (b, k, 1),
            [b, k, h, w] => (b, k, h * w),
            _ => {
                return Err(IonError::ShapeMismatch {
                    op: OP,
                    detail: format!("logits must be [B,K] or [B,K,H,W], got {:?}", ld.shape),
                })
            }
        };
        if targets.len() != b * spatial {
            return Err(IonError::ShapeMismatch {
                op: OP,
                detail: format!("expected {} targets, got {}", b * spatial, targets.len()),
            });
        }
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) != ignore && t as usize >= k {
                return Err(IonError::InvalidArg {
                    op: OP,
                    detail: format!("target {t} at position {i} is out of range for K={k}"),
                });
            }
        }
        let mut probs = vec![T::zero(); ld.len()];
        let mut loss = T::zero();
        let mut counted = 0usize;
        for bi in 0..b {
            for pos in 0..spatial {
                // max-subtraction stabilised softmax across K
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(ld.data[(bi * k + c) * spatial + pos]);
                }
                let mut denom = T::zero();
                for c in 0..k {
                    let e = (ld.data[(bi * k + c) * spatial + pos] - mx).exp();
                    probs[(bi * k + c) * spatial + pos] = e;
                    denom = denom + e;
                }
                for c in 0..k {
                    let i = (bi * k + c) * spatial + pos;
                    probs[i] = probs[i] / denom;
                }
                let t = targets[bi * spatial + pos];
                if Some(t) == ignore {
                    continue;
                }
                counted += 1;
                let p = probs[(bi * k + t as usize) * spatial + pos];
                loss = loss - (p.max(T::from_f64(1e-300))).ln();
            }
        }
        if counted > 0 {
            loss = loss / T::from_f64(counted as f64);
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            TensorData::scalar(loss),
            needs,
            Op::SoftmaxCe { logits, probs, targets: targets.to_vec(), ignore, counted },
        ))
    }

    /// Mean absolute error between two same-shaped tensors.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ad.shape != bd.shape {
            return Err(IonError::ShapeMismatch {
                op: "l1_loss",
                detail: format!("{:?} vs {:?}", ad.shape, bd.shape),
            });
        }
        let n = T::from_f64(ad.len() as f64);
        let loss = ad.data.iter().zip(&bd.data).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
        let needs = self.needs(&[a, b]);
        Ok(self.push(TensorData::scalar(loss), needs, Op::L1 { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ad.shape != bd.shape {
            return Err(IonError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", ad.shape, bd.shape),
            });
        }
        let data = ad.data.iter().zip(&bd.data).map(|(&x, &y)| x + y).collect();
        let value = TensorData { shape: ad.shape.clone(), data };
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ad.shape != bd.shape {
            return Err(IonError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", ad.shape, bd.shape),
            });
        }
        let data = ad.data.iter().zip(&bd.data).map(|(&x, &y)| x * y).collect();
        let value = TensorData { shape: ad.shape.clone(), data };
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xd = &self.nodes[x.0].value;
        let data = xd.data.iter().map(|&v| v * c).collect();
        let value = TensorData { shape: xd.shape.clone(), data };
        let needs = self.needs(&[x]);
        self.push(value, needs, Op::Scale { x, c })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().copied().sum();
        let needs = self.needs(&[x]);
        self.push(TensorData::scalar(s), needs, Op::Sum { x })
    }

    /// Fully connected layer: x [B,F] * w [F,K] + b [K].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "linear";
        let xd = &self.nodes[x.0].value;
        let wd = &self.nodes[w.0].value;
        let (bsz, f) = match xd.shape[..] {
            [bsz, f] => (bsz, f),
            _ => {
                return Err(IonError::ShapeMismatch {
                    op: OP,
                    detail: format!("input must be [B,F], got {:?}", xd.shape),
                })
            }
        };
        let (wf, k) = match wd.shape[..] {
            [wf, k] => (wf, k),
            _ => {
                return Err(IonError::ShapeMismatch {
                    op: OP,
                    detail: format!("weight must be [F,K], got {:?}", wd.shape),
                })
            }
        };
        if wf != f {
            return Err(IonError::ShapeMismatch {
                op: OP,
                detail: format!("input features F={f} but weight expects F={wf}"),
            });
        }
        if self.value(b).shape != [k] {
            return Err(IonError::ShapeMismatch {
                op: OP,
                detail: format!("bias shape {:?} does not match K={k}", self.value(b).shape),
            });
        }
        let mut out = vec![T::zero(); bsz * k];
        T::gemm(bsz, f, k, T::one(), &xd.data, &wd.data, T::zero(), &mut out);
        let bv = &self.nodes[b.0].value.data;
        for row in out.chunks_mut(k) {
            for (o, &bias) in row.iter_mut().zip(bv) {
                *o = *o + bias;
            }
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(TensorData { shape: vec![bsz, k], data: out }, needs, Op::Linear { x, w, b }))
    }

    /// Global average pool: [B,C,H,W] -> [B,C].
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("mean_spatial")?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![T::zero(); b * c];
        for (bc, o) in out.iter_mut().enumerate() {
            *o = xv[bc * plane..][..plane].iter().copied().sum::<T>() * inv;
        }
        let needs = self.needs(&[x]);
        Ok(self.push(TensorData { shape: vec![b, c], data: out }, needs, Op::MeanSpatial { x }))
    }

    /// Non-saturating logistic GAN loss: mean softplus(-s) when scoring
    /// for "real", mean softplus(s) for "fake".
    pub fn gan_logistic_loss(&mut self, scores: Var, target_real: bool) -> Var {
        let sd = &self.nodes[scores.0].value;
        let n = T::from_f64(sd.len() as f64);
        let loss = sd
            .data
            .iter()
            .map(|&s| softplus(if target_real { -s } else { s }))
            .sum::<T>()
            / n;
        let needs = self.needs(&[scores]);
        self.push(TensorData::scalar(loss), needs, Op::GanLogistic { s: scores, real: target_real })
    }

    // ---- backward --------------------------------------------------------

    /// Propagates gradients from a scalar `loss` node to every reachable
    /// node, folding results into each node's persistent accumulator.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(IonError::InvalidArg {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape
                ),
            });
        }
        let mut work: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = work[i].take() else { continue };
            self.propagate(i, &gout, &mut work);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => {
                    for (dst, src) in g.iter_mut().zip(&gout) {
                        *dst = *dst + *src;
                    }
                }
                None => node.grad = Some(gout),
            }
        }
        self.backward_calls += 1;
        Ok(())
    }

    fn accum(work: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        match &mut work[v.0] {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(&contribution) {
                    *dst = *dst + *src;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, i: usize, gout: &[T], work: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (bsz, cin, h, wd) = self.nodes[x.0].value.dims4("conv2d").unwrap();
                let (cout, _, k, _) = self.nodes[w.0].value.dims4("conv2d").unwrap();
                let (oh, ow) = {
                    let s = &self.nodes[i].value.shape;
                    (s[2], s[3])
                };
                let ckk = cin * k * k;
                let n = oh * ow;
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let want_b = self.wants(*b);
                let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
                let mut db = if want_b { vec![T::zero(); cout] } else { Vec::new() };
                let mut cols = vec![T::zero(); ckk * n];
                let mut dcols = vec![T::zero(); ckk * n];
                for bi in 0..bsz {
                    let gy = &gout[bi * cout * n..][..cout * n];
                    if want_w || want_x {
                        im2col(
                            &xv[bi * cin * h * wd..][..cin * h * wd],
                            cin, h, wd, k, *stride, *pad, oh, ow, &mut cols,
                        );
                    }
                    if want_w {
                        // dW += gY [Cout,n] * cols^T [n,ckk]
                        gemm_strided(
                            cout, n, ckk, T::one(),
                            gy, n as isize, 1,
                            &cols, 1, n as isize,
                            T::one(), &mut dw,
                        );
                    }
                    if want_b {
                        for co in 0..cout {
                            db[co] = db[co] + gy[co * n..][..n].iter().copied().sum();
                        }
                    }
                    if want_x {
                        // dcols = W^T [ckk,Cout] * gY [Cout,n]
                        gemm_strided(
                            ckk, cout, n, T::one(),
                            wv, 1, ckk as isize,
                            gy, n as isize, 1,
                            T::zero(), &mut dcols,
                        );
                        col2im_add(
                            &dcols, cin, h, wd, k, *stride, *pad, oh, ow,
                            &mut dx[bi * cin * h * wd..][..cin * h * wd],
                        );
                    }
                }
                if want_x {
                    Self::accum(work, *x, dx);
                }
                if want_w {
                    Self::accum(work, *w, dw);
                }
                if want_b {
                    Self::accum(work, *b, db);
                }
            }
            Op::BnTrain { x, gamma, beta, mean, inv_std } => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4("batchnorm2d").unwrap();
                let plane = h * w;
                let n = b * plane;
                let n_t = T::from_f64(n as f64);
                let xv = &self.nodes[x.0].value.data;
                let gv = &self.nodes[gamma.0].value.data;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxh = vec![T::zero(); c];
                let mut sum_dxh_xh = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let xs = &xv[(bi * c + ci) * plane..][..plane];
                        let gs = &gout[(bi * c + ci) * plane..][..plane];
                        let (m, is) = (mean[ci], inv_std[ci]);
                        for (&xe, &ge) in xs.iter().zip(gs) {
                            let xh = (xe - m) * is;
                            dgamma[ci] = dgamma[ci] + ge * xh;
                            dbeta[ci] = dbeta[ci] + ge;
                            let dxh = ge * gv[ci];
                            sum_dxh[ci] = sum_dxh[ci] + dxh;
                            sum_dxh_xh[ci] = sum_dxh_xh[ci] + dxh * xh;
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let xs = &xv[(bi * c + ci) * plane..][..plane];
                            let gs = &gout[(bi * c + ci) * plane..][..plane];
                            let ds = &mut dx[(bi * c + ci) * plane..][..plane];
                            let (m, is) = (mean[ci], inv_std[ci]);
                            for ((&xe, &ge), de) in xs.iter().zip(gs).zip(ds.iter_mut()) {
                                let xh = (xe - m) * is;
                                let dxh = ge * gv[ci];
                                *de = is / n_t
                                    * (n_t * dxh - sum_dxh[ci] - xh * sum_dxh_xh[ci]);
                            }
                        }
                    }
                    Self::accum(work, *x, dx);
                }
                if self.wants(*gamma) {
                    Self::accum(work, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    Self::accum(work, *beta, dbeta);
                }
            }
            Op::BnEval { x, gamma, beta, mean, inv_std } => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4("batchnorm2d").unwrap();
                let plane = h * w;
                let xv = &self.nodes[x.0].value.data;
                let gv = &self.nodes[gamma.0].value.data;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = if self.wants(*x) { vec![T::zero(); xv.len()] } else { Vec::new() };
                for bi in 0..b {
                    for ci in 0..c {
                        let xs = &xv[(bi * c + ci) * plane..][..plane];
                        let gs = &gout[(bi * c + ci) * plane..][..plane];
                        let (m, is) = (mean[ci], inv_std[ci]);
                        let scale = gv[ci] * is;
                        for (j, (&xe, &ge)) in xs.iter().zip(gs).enumerate() {
                            dgamma[ci] = dgamma[ci] + ge * (xe - m) * is;
                            dbeta[ci] = dbeta[ci] + ge;
                            if !dx.is_empty() {
                                dx[(bi * c + ci) * plane + j] = ge * scale;
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    Self::accum(work, *x, dx);
                }
                if self.wants(*gamma) {
                    Self::accum(work, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    Self::accum(work, *beta, dbeta);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.wants(*x) {
                    let xv = &self.nodes[x.0].value.data;
                    let dx = xv
                        .iter()
                        .zip(gout)
                        .map(|(&xe, &ge)| if xe > T::zero() { ge } else { ge * *slope })
                        .collect();
                    Self::accum(work, *x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] = dx[src as usize] + gout[o];
                    }
                    Self::accum(work, *x, dx);
                }
            }
            Op::Upsample2 { x } => {
                if self.wants(*x) {
                    let (b, c, h, w) = self.nodes[x.0].value.dims4("upsample_bicubic").unwrap();
                    let mut dx = vec![T::zero(); b * c * h * w];
                    let mut tmp = vec![T::zero(); 2 * h * w];
                    for bc in 0..b * c {
                        for v in tmp.iter_mut() {
                            *v = T::zero();
                        }
                        upsample2_rows_adjoint(
                            &gout[bc * 4 * h * w..][..4 * h * w],
                            2 * h, w, &mut tmp,
                        );
                        upsample2_cols_adjoint(&tmp, h, w, &mut dx[bc * h * w..][..h * w]);
                    }
                    Self::accum(work, *x, dx);
                }
            }
            Op::ConcatC { a, b } => {
                let (bsz, ca, h, w) = self.nodes[a.0].value.dims4("concat_channels").unwrap();
                let cb = self.nodes[b.0].value.shape[1];
                let plane = h * w;
                if self.wants(*a) {
                    let mut da = vec![T::zero(); bsz * ca * plane];
                    for bi in 0..bsz {
                        da[bi * ca * plane..][..ca * plane]
                            .copy_from_slice(&gout[bi * (ca + cb) * plane..][..ca * plane]);
                    }
                    Self::accum(work, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bsz * cb * plane];
                    for bi in 0..bsz {
                        db[bi * cb * plane..][..cb * plane].copy_from_slice(
                            &gout[bi * (ca + cb) * plane + ca * plane..][..cb * plane],
                        );
                    }
                    Self::accum(work, *b, db);
                }
            }
            Op::SliceC { x, from } => {
                if self.wants(*x) {
                    let (b, c, h, w) = self.nodes[x.0].value.dims4("slice_channels").unwrap();
                    let nc = self.nodes[i].value.shape[1];
                    let plane = h * w;
                    let mut dx = vec![T::zero(); b * c * plane];
                    for bi in 0..b {
                        dx[(bi * c + from) * plane..][..nc * plane]
                            .copy_from_slice(&gout[bi * nc * plane..][..nc * plane]);
                    }
                    Self::accum(work, *x, dx);
                }
            }
            Op::Tanh { x } => {
                if self.wants(*x) {
                    let yv = &self.nodes[i].value.data;
                    let dx = yv.iter().zip(gout).map(|(&y, &g)| g * (T::one() - y * y)).collect();
                    Self::accum(work, *x, dx);
                }
            }
            Op::SoftmaxCe { logits, probs, targets, ignore, counted } => {
                if self.wants(*logits) && *counted > 0 {
                    let ld = &self.nodes[logits.0].value;
                    let (b, k, spatial) = match ld.shape[..] {
                        [b, k] => (b, k, 1),
                        [b, k, h, w] => (b, k, h * w),
                        _ => unreachable!(),
                    };
                    let g = gout[0] / T::from_f64(*counted as f64);
                    let mut dx = vec![T::zero(); ld.len()];
                    for bi in 0..b {
                        for pos in 0..spatial {
                            let t = targets[bi * spatial + pos];
                            if Some(t) == *ignore {
                                continue;
                            }
                            for c in 0..k {
                                let idx = (bi * k + c) * spatial + pos;
                                let onehot =
                                    if c == t as usize { T::one() } else { T::zero() };
                                dx[idx] = g * (probs[idx] - onehot);
                            }
                        }
                    }
                    Self::accum(work, *logits, dx);
                }
            }
            Op::L1 { a, b } => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let g = gout[0] / T::from_f64(av.len() as f64);
                let signs: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        if x > y {
                            g
                        } else if x < y {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*a) {
                    Self::accum(work, *a, signs.clone());
                }
                if self.wants(*b) {
                    Self::accum(work, *b, signs.iter().map(|&s| -s).collect());
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    Self::accum(work, *a, gout.to_vec());
                }
                if self.wants(*b) {
                    Self::accum(work, *b, gout.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                if self.wants(*a) {
                    Self::accum(work, *a, gout.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    Self::accum(work, *b, gout.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    Self::accum(work, *x, gout.iter().map(|&g| g * *c).collect());
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = self.nodes[x.0].value.len();
                    Self::accum(work, *x, vec![gout[0]; n]);
                }
            }
            Op::Linear { x, w, b } => {
                let xd = &self.nodes[x.0].value;
                let wd = &self.nodes[w.0].value;
                let (bsz, f) = (xd.shape[0], xd.shape[1]);
                let k = wd.shape[1];
                if self.wants(*x) {
                    // dX [B,F] = gY [B,K] * W^T [K,F]
                    let mut dx = vec![T::zero(); bsz * f];
                    gemm_strided(
                        bsz, k, f, T::one(),
                        gout, k as isize, 1,
                        &wd.data, 1, k as isize,
                        T::zero(), &mut dx,
                    );
                    Self::accum(work, *x, dx);
                }
                if self.wants(*w) {
                    // dW [F,K] = X^T [F,B] * gY [B,K]
                    let mut dw = vec![T::zero(); f * k];
                    gemm_strided(
                        f, bsz, k, T::one(),
                        &xd.data, 1, f as isize,
                        gout, k as isize, 1,
                        T::zero(), &mut dw,
                    );
                    Self::accum(work, *w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k];
                    for row in gout.chunks(k) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    Self::accum(work, *b, db);
                }
            }
            Op::MeanSpatial { x } => {
                if self.wants(*x) {
                    let (b, c, h, w) = self.nodes[x.0].value.dims4("mean_spatial").unwrap();
                    let plane = h * w;
                    let inv = T::one() / T::from_f64(plane as f64);
                    let mut dx = vec![T::zero(); b * c * plane];
                    for bc in 0..b * c {
                        let g = gout[bc] * inv;
                        for v in dx[bc * plane..][..plane].iter_mut() {
                            *v = g;
                        }
                    }
                    Self::accum(work, *x, dx);
                }
            }
            Op::GanLogistic { s, real } => {
                if self.wants(*s) {
                    let sv = &self.nodes[s.0].value.data;
                    let n = T::from_f64(sv.len() as f64);
                    let g = gout[0] / n;
                    let dx = sv
                        .iter()
                        .map(|&sc| {
                            let z = if *real { -sc } else { sc };
                            let sig = T::one() / (T::one() + (-z).exp());
                            if *real {
                                -g * sig
                            } else {
                                g * sig
                            }
                        })
                        .collect();
                    Self::accum(work, *s, dx);
                }
            }
        }
    }
}

/// Numerically stable ln(1 + e^z).
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln()
}

/// Row-major-with-strides GEMM: C[m,n] += alpha * A * B (beta scales C).
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
) {
    // Scalar::gemm only covers plain row-major; go through the raw call.
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n,
                alpha.as_f64() as f32,
                a.as_ptr() as *const f32, rsa, csa,
                b.as_ptr() as *const f32, rsb, csb,
                beta.as_f64() as f32,
                c.as_mut_ptr() as *mut f32, n as isize, 1,
            );
        }
    } else {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n,
                alpha.as_f64(),
                a.as_ptr() as *const f64, rsa, csa,
                b.as_ptr() as *const f64, rsb, csb,
                beta.as_f64(),
                c.as_mut_ptr() as *mut f64, n as isize, 1,
            );
        }
    }
}
