//! Synthetic datasets, CIFAR-10 ingestion, and epoch batching with
//! on-the-fly degradation.

mod cifar;
mod draw;
mod shapes_cls;
mod shapes_seg;

pub use cifar::{load_cifar10_binary, parse_cifar10};
pub use shapes_cls::{gen_shapes_cls, CLS_CLASSES, CLS_CLASS_NAMES};
pub use shapes_seg::{
    gen_shapes_seg, LABEL_CIRCLE, LABEL_GROUND, LABEL_POLE, LABEL_RECT, LABEL_SKY, SEG_CLASSES,
    SEG_CLASS_NAMES,
};

use crate::degrade::{self, DegradeSpec};
use crate::error::{IonError, Result};
use crate::image::{Image, LabelMap};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::TensorData;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// One classification sample.
#[derive(Debug, Clone)]
pub struct ClsSample {
    pub image: Image,
    pub label: u32,
    pub domain: String,
}

/// One segmentation sample with a per-pixel label map.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: Image,
    pub labels: LabelMap,
    pub domain: String,
}

/// One named degradation condition inside a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub degrade: DegradeSpec,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// Per-domain sampling weights and degradations for a training stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub domains: Vec<DomainSpec>,
}

impl MixSpec {
    pub fn clean_only() -> Self {
        MixSpec {
            domains: vec![DomainSpec {
                name: "clean".to_string(),
                degrade: DegradeSpec::None,
                weight: 1.0,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(IonError::Config("mix needs at least one domain".into()));
        }
        if self.domains.iter().any(|d| d.weight < 0.0) {
            return Err(IonError::Config("mix weights must be non-negative".into()));
        }
        let total: f64 = self.domains.iter().map(|d| d.weight).sum();
        if total <= 0.0 {
            return Err(IonError::Config("mix weights must sum to > 0".into()));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut crate::rng::Rng) -> usize {
        let total: f64 = self.domains.iter().map(|d| d.weight).sum();
        let mut u = rng.gen_range(0.0..total);
        for (i, d) in self.domains.iter().enumerate() {
            if u < d.weight {
                return i;
            }
            u -= d.weight;
        }
        self.domains.len() - 1
    }
}

/// Ground-truth payloads of a dataset.
#[derive(Debug, Clone)]
pub enum Targets {
    Labels(Vec<u32>),
    Maps(Vec<LabelMap>),
}

/// Images plus targets plus the class count.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub images: Vec<Image>,
    pub targets: Targets,
    pub num_classes: usize,
}

impl SampleSet {
    pub fn from_cls(samples: Vec<ClsSample>, num_classes: usize) -> Self {
        let labels = samples.iter().map(|s| s.label).collect();
        SampleSet {
            images: samples.into_iter().map(|s| s.image).collect(),
            targets: Targets::Labels(labels),
            num_classes,
        }
    }

    pub fn from_seg(samples: Vec<SegSample>, num_classes: usize) -> Self {
        let maps = samples.iter().map(|s| s.labels.clone()).collect();
        SampleSet {
            images: samples.into_iter().map(|s| s.image).collect(),
            targets: Targets::Maps(maps),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: std::ops::Range<usize>) -> SampleSet {
        let images = self.images[indices.clone()].to_vec();
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(l[indices].to_vec()),
            Targets::Maps(m) => Targets::Maps(m[indices].to_vec()),
        };
        SampleSet { images, targets, num_classes: self.num_classes }
    }

    /// Flattened targets for a batch of sample indices, paired with images.
    fn batch_targets(&self, indices: &[usize]) -> BatchTargets {
        match &self.targets {
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
}

/// Targets stacked for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchTargets {
    Labels(Vec<u32>),
    /// Row-major `[B * H * W]` class ids.
    Maps(Vec<u32>),
}

impl BatchTargets {
    pub fn as_slice(&self) -> &[u32] {
        match self {
            BatchTargets::Labels(v) | BatchTargets::Maps(v) => v,
        }
    }
}

/// One training batch: images mapped affinely from [0,1] to [-1,1] and
/// stacked channel-first.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: TensorData<f32>,
    pub targets: BatchTargets,
    pub indices: Vec<usize>,
    pub domains: Vec<usize>,
}

/// Stacks images into a `[B,3,H,W]` tensor in [-1,1].
pub fn images_to_tensor(images: &[&Image]) -> Result<TensorData<f32>> {
    let first = images.first().ok_or_else(|| IonError::InvalidArg {
        op: "images_to_tensor",
        detail: "empty batch".into(),
    })?;
    let (h, w) = (first.height, first.width);
    let mut data = vec![0.0f32; images.len() * 3 * h * w];
    for (bi, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(IonError::ShapeMismatch {
                op: "images_to_tensor",
                detail: format!("image {bi} is {}x{}, expected {h}x{w}", img.height, img.width),
            });
        }
        for y in 0..h {
            for x in 0..w {
                let px = img.get(y, x);
                for c in 0..3 {
                    data[((bi * 3 + c) * h + y) * w + x] = 2.0 * px[c] - 1.0;
                }
            }
        }
    }
    TensorData::new(vec![images.len(), 3, h, w], data)
}

/// Maps a `[B,3,H,W]` tensor in [-1,1] back to unit-range images.
pub fn tensor_to_images(t: &TensorData<f32>) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4("tensor_to_images")?;
    if c != 3 {
        return Err(IonError::ShapeMismatch {
            op: "tensor_to_images",
            detail: format!("expected 3 channels, got {c}"),
        });
    }
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut img = Image::new(h, w, crate::image::ColorSpace::Rgb);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    ((t.data[((bi * 3) * h + y) * w + x] + 1.0) / 2.0).clamp(0.0, 1.0),
                    ((t.data[((bi * 3 + 1) * h + y) * w + x] + 1.0) / 2.0).clamp(0.0, 1.0),
                    ((t.data[((bi * 3 + 2) * h + y) * w + x] + 1.0) / 2.0).clamp(0.0, 1.0),
                ];
                img.set(y, x, px);
            }
        }
        out.push(img);
    }
    Ok(out)
}

/// Epoch-level batching over a sample set with per-sample domain draws and
/// seeded degradation.
///
/// With `regenerate = true`, domain and degradation seeds are derived from
/// `(seed, epoch, index)` so each epoch sees fresh corruptions. With
/// `regenerate = false` they depend on the index alone, so every epoch sees
/// identical pixels.
pub struct BatchStream<'a> {
    pub set: &'a SampleSet,
    pub mix: &'a MixSpec,
    pub batch_size: usize,
    pub seed: u64,
    pub regenerate: bool,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        set: &'a SampleSet,
        mix: &'a MixSpec,
        batch_size: usize,
        seed: u64,
        regenerate: bool,
    ) -> Result<Self> {
        if set.is_empty() {
            return Err(IonError::InvalidArg {
                op: "epoch_batches",
                detail: "dataset is empty".into(),
            });
        }
        if batch_size < 1 {
            return Err(IonError::InvalidArg {
                op: "epoch_batches",
                detail: "batch size must be >= 1".into(),
            });
        }
        mix.validate()?;
        Ok(BatchStream { set, mix, batch_size, seed, regenerate })
    }

    /// Materialises the shuffled, degraded batches of one epoch.
    pub fn epoch(&self, epoch: u64) -> Result<Vec<Batch>> {
        let n = self.set.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng_from(self.seed, "shuffle", epoch);
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut batches = Vec::with_capacity(n.div_ceil(self.batch_size));
        for chunk in order.chunks(self.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut domains = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (domain, degrade_seed) = self.sample_plan(epoch, idx as u64);
                let img =
                    degrade::apply(&self.set.images[idx], &self.mix.domains[domain].degrade, degrade_seed)?;
                images.push(img);
                domains.push(domain);
            }
            let x = images_to_tensor(&images.iter().collect::<Vec<_>>())?;
            batches.push(Batch {
                x,
                targets: self.set.batch_targets(chunk),
                indices: chunk.to_vec(),
                domains,
            });
        }
        Ok(batches)
    }

    /// Domain index and degradation seed for one sample in one epoch.
    pub fn sample_plan(&self, epoch: u64, idx: u64) -> (usize, u64) {
        if self.regenerate {
            let stream = epoch.wrapping_mul(self.set.len() as u64).wrapping_add(idx);
            let mut rng = rng_from(self.seed, "domain", stream);
            let domain = self.mix.draw(&mut rng);
            (domain, derive_seed(self.seed, "degrade", stream))
        } else {
            let mut rng = rng_from(self.seed, "domain_fixed", idx);
            let domain = self.mix.draw(&mut rng);
            (domain, derive_seed(self.seed, "degrade_fixed", idx))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set() -> SampleSet {
        SampleSet::from_cls(gen_shapes_cls(12, 16, 77), CLS_CLASSES)
    }

    fn noisy_mix() -> MixSpec {
        MixSpec {
            domains: vec![
                DomainSpec { name: "clean".into(), degrade: DegradeSpec::None, weight: 1.0 },
                DomainSpec {
                    name: "noisy".into(),
                    degrade: DegradeSpec::Noise { sigma: 0.1 },
                    weight: 1.0,
                },
            ],
        }
    }

    #[test]
    fn regenerate_changes_pixels_across_epochs() {
        let set = tiny_set();
        let mix = MixSpec {
            domains: vec![DomainSpec {
                name: "noisy".into(),
                degrade: DegradeSpec::Noise { sigma: 0.1 },
                weight: 1.0,
            }],
        };
        let stream = BatchStream::new(&set, &mix, 4, 9, true).unwrap();
        let e0 = stream.epoch(0).unwrap();
        let e1 = stream.epoch(1).unwrap();
        assert_ne!(e0[0].x.data, e1[0].x.data);

        let frozen = BatchStream::new(&set, &mix, 4, 9, false).unwrap();
        let f0: Vec<Batch> = frozen.epoch(0).unwrap();
        let f1 = frozen.epoch(1).unwrap();
        // same index set across epochs must map to identical pixels
        let find = |bs: &[Batch], idx: usize| -> Vec<f32> {
            for b in bs {
                if let Some(pos) = b.indices.iter().position(|&i| i == idx) {
                    let plane = b.x.shape[2] * b.x.shape[3] * 3;
                    return b.x.data[pos * plane..(pos + 1) * plane].to_vec();
                }
            }
            panic!("index {idx} not found");
        };
        for idx in 0..set.len() {
            assert_eq!(find(&f0, idx), find(&f1, idx), "sample {idx} changed");
        }
    }

    #[test]
    fn mix_draw_respects_weights_within_binomial_bounds() {
        let mix = MixSpec {
            domains: (0..4)
                .map(|i| DomainSpec {
                    name: format!("d{i}"),
                    degrade: DegradeSpec::None,
                    weight: 1.0,
                })
                .collect(),
        };
        let set = SampleSet::from_cls(gen_shapes_cls(4000, 8, 1), CLS_CLASSES);
        let stream = BatchStream::new(&set, &mix, 4, 5, true).unwrap();
        let mut counts = [0usize; 4];
        for idx in 0..4000u64 {
            let (d, _) = stream.sample_plan(0, idx);
            counts[d] += 1;
        }
        let bound = 3.0 * (1000.0f64 * 0.75).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - 1000.0).abs() <= bound,
                "domain {i} drew {c}, outside 1000 +- {bound:.1}"
            );
        }
    }

    #[test]
    fn batches_lie_in_symmetric_unit_range() {
        let set = tiny_set();
        let mix = noisy_mix();
        let stream = BatchStream::new(&set, &mix, 5, 3, true).unwrap();
        for b in stream.epoch(0).unwrap() {
            assert!(b.x.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            assert_eq!(b.x.shape[1..], [3, 16, 16]);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let set = SampleSet { images: vec![], targets: Targets::Labels(vec![]), num_classes: 2 };
        let mix = MixSpec::clean_only();
        assert!(BatchStream::new(&set, &mix, 4, 1, true).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let set = tiny_set();
        let refs: Vec<&Image> = set.images.iter().take(3).collect();
        let t = images_to_tensor(&refs).unwrap();
        let back = tensor_to_images(&t).unwrap();
        for (a, b) in refs.iter().zip(&back) {
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
