//! Toy pre-activation residual CNNs with one sensing point per stage.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::spca::FeatureMapBatch;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNetSpec {
    /// Output depth of each stage; all even.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Stride of the first block of each stage.
    pub strides: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl ConvNetSpec {
    pub fn new(widths: Vec<usize>, blocks_per_stage: usize, num_classes: usize) -> Result<Self> {
        let strides = (0..widths.len()).map(|i| if i == 0 { 1 } else { 2 }).collect();
        let spec = Self {
            widths,
            blocks_per_stage,
            strides,
            num_classes,
            in_channels: 3,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn teacher(num_classes: usize) -> Self {
        Self::new(vec![16, 32, 64], 2, num_classes).expect("default teacher spec is valid")
    }

    pub fn student(num_classes: usize) -> Self {
        Self::new(vec![8, 16, 32], 1, num_classes).expect("default student spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        if let Some(w) = self.widths.iter().find(|w| **w == 0 || *w % 2 != 0) {
            return Err(Error::Config(format!("stage widths must be even and positive, got {w}")));
        }
        if self.strides.len() != self.widths.len() {
            return Err(Error::Config("one stride per stage".into()));
        }
        if self.blocks_per_stage == 0 || self.num_classes < 2 {
            return Err(Error::Config("need >= 1 block per stage and >= 2 classes".into()));
        }
        Ok(())
    }

    /// Number of sensing points (one per stage end).
    pub fn sensing_points(&self) -> usize {
        self.widths.len()
    }
}

/// How batch-norm layers pick their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running estimates should be updated by the caller.
    Train,
    /// Batch statistics without touching the running estimates.
    Batch,
    /// Running estimates.
    Inference,
}

pub struct SensedForward<'t> {
    pub logits: Var<'t>,
    /// Post-ReLU stage outputs, `N x H x W x D` each.
    pub features: Vec<Var<'t>>,
    /// `(bn name, batch mean, batch variance)` for every BN layer run with
    /// batch statistics.
    pub bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl SensedForward<'_> {
    pub fn feature_batches(&self) -> Result<Vec<FeatureMapBatch>> {
        self.features
            .iter()
            .enumerate()
            .map(|(l, f)| FeatureMapBatch::new(l, (*f.value()).clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub spec: ConvNetSpec,
    /// Trainable tensors. Depth adapters live under `adapter{l}.weight`.
    pub params: ParamSet,
    /// Batch-norm running statistics, `<bn>.mean` / `<bn>.var`.
    pub buffers: ParamSet,
}

fn fan_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-limit..limit)).collect())
}

fn conv_weight(rng: &mut impl Rng, k: usize, cin: usize, cout: usize) -> Tensor {
    fan_uniform(rng, &[k, k, cin, cout], k * k * cin, k * k * cout)
}

impl ConvNet {
    pub fn init(spec: ConvNetSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut net = Self {
            spec,
            params: ParamSet::new(),
            buffers: ParamSet::new(),
        };
        let w0 = net.spec.widths[0];
        net.params.insert("stem.weight", conv_weight(rng, 3, net.spec.in_channels, w0));
        let mut cin = w0;
        for (s, &w) in net.spec.widths.clone().iter().enumerate() {
            for b in 0..net.spec.blocks_per_stage {
                let p = format!("s{s}.b{b}");
                let stride = if b == 0 { net.spec.strides[s] } else { 1 };
                net.add_bn(&format!("{p}.bn1"), cin);
                net.params.insert(format!("{p}.conv1.weight"), conv_weight(rng, 3, cin, w));
                net.add_bn(&format!("{p}.bn2"), w);
                net.params.insert(format!("{p}.conv2.weight"), conv_weight(rng, 3, w, w));
                if cin != w || stride != 1 {
                    net.params.insert(format!("{p}.shortcut.weight"), conv_weight(rng, 1, cin, w));
                }
                cin = w;
            }
        }
        net.add_bn("head.bn", cin);
        let k = net.spec.num_classes;
        net.params.insert("head.fc.weight", fan_uniform(rng, &[cin, k], cin, k));
        net.params.insert("head.fc.bias", Tensor::zeros(&[k]));
        Ok(net)
    }

    fn add_bn(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.var"), Tensor::full(&[c], 1.0));
    }

    /// Adds 1x1 adapters mapping each stage's depth to `target_depths[l]`.
    /// Equal depths start as the identity.
    pub fn attach_adapters(&mut self, target_depths: &[usize], rng: &mut impl Rng) -> Result<()> {
        if target_depths.len() != self.spec.sensing_points() {
            return Err(Error::Config(format!(
                "{} adapter targets for {} sensing points",
                target_depths.len(),
                self.spec.sensing_points()
            )));
        }
        for (l, (&ds, &dt)) in self.spec.widths.iter().zip(target_depths).enumerate() {
            if dt % 2 != 0 {
                return Err(Error::Config(format!("adapter target depth must be even, got {dt}")));
            }
            let w = if ds == dt {
                Tensor::identity(ds).reshape(&[1, 1, ds, dt])?
            } else {
                conv_weight(rng, 1, ds, dt)
            };
            self.params.insert(format!("adapter{l}.weight"), w);
        }
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        self.params.get("adapter0.weight").is_some()
    }

    /// Trainable parameter count excluding adapters.
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| !k.starts_with("adapter"))
            .map(|(_, v)| v.len())
            .sum()
    }

    fn bn<'t>(
        &self,
        bound: &Bound<'t>,
        name: &str,
        x: Var<'t>,
        mode: BnMode,
        updates: &mut Vec<(String, Vec<f64>, Vec<f64>)>,
    ) -> Var<'t> {
        let gamma = bound.get(&format!("{name}.gamma"));
        let beta = bound.get(&format!("{name}.beta"));
        match mode {
            BnMode::Inference => x.batch_norm_fixed(
                gamma,
                beta,
                self.buffers.tensor(&format!("{name}.mean")).data(),
                self.buffers.tensor(&format!("{name}.var")).data(),
                BN_EPS,
            ),
            BnMode::Train | BnMode::Batch => {
                let (y, m, v) = x.batch_norm(gamma, beta, BN_EPS);
                if mode == BnMode::Train {
                    updates.push((name.to_string(), m, v));
                }
                y
            }
        }
    }

    /// Logits plus the post-ReLU output of every stage.
    pub fn forward<'t>(&self, bound: &Bound<'t>, images: Var<'t>, mode: BnMode) -> Result<SensedForward<'t>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[3] != self.spec.in_channels || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "expected N x H x W x {} images, got {shape:?}",
                self.spec.in_channels
            )));
        }
        let mut updates = Vec::new();
        let mut x = images.conv2d(bound.get("stem.weight"), 1, 1);
        let mut features = Vec::with_capacity(self.spec.sensing_points());
        for s in 0..self.spec.sensing_points() {
            for b in 0..self.spec.blocks_per_stage {
                let p = format!("s{s}.b{b}");
                let stride = if b == 0 { self.spec.strides[s] } else { 1 };
                let o = self.bn(bound, &format!("{p}.bn1"), x, mode, &mut updates).relu();
                let shortcut = match bound.try_get(&format!("{p}.shortcut.weight")) {
                    Some(w) => o.conv2d(w, stride, 0),
                    None => x,
                };
                let y = o.conv2d(bound.get(&format!("{p}.conv1.weight")), stride, 1);
                let y = self.bn(bound, &format!("{p}.bn2"), y, mode, &mut updates).relu();
                let y = y.conv2d(bound.get(&format!("{p}.conv2.weight")), 1, 1);
                x = y.add(shortcut);
            }
            features.push(x.relu());
        }
        let h = self.bn(bound, "head.bn", x, mode, &mut updates).relu();
        let logits = h
            .global_avg_pool()
            .matmul(bound.get("head.fc.weight"))
            .add_bias(bound.get("head.fc.bias"));
        Ok(SensedForward {
            logits,
            features,
            bn_updates: updates,
        })
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, Vec<f64>, Vec<f64>)]) {
        for (name, m, v) in updates {
            for (suffix, batch) in [("mean", m), ("var", v)] {
                let buf = self
                    .buffers
                    .get_mut(&format!("{name}.{suffix}"))
                    .expect("bn buffer exists");
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
    }

    /// Convenience forward on a fresh tape; returns logits and sensed maps.
    pub fn forward_sensed(&self, images: &Tensor, mode: BnMode) -> Result<(Tensor, Vec<FeatureMapBatch>)> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let out = self.forward(&bound, tape.constant(images.clone()), mode)?;
        let maps = out.feature_batches()?;
        Ok(((*out.logits.value()).clone(), maps))
    }

    /// Top-1 predictions in inference mode, evaluated in chunks.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let per = images.len() / n.max(1);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::from_parts(shape, images.data()[start * per..end * per].to_vec());
            let (logits, _) = self.forward_sensed(&part, BnMode::Inference)?;
            out.extend((0..logits.rows()).map(|r| argmax(logits.row(r))));
        }
        Ok(out)
    }
}

/// 1x1 convolution applied to a sensed map before stacked PCA.
pub fn depth_adapter<'t>(map: Var<'t>, weight: Var<'t>) -> Var<'t> {
    map.conv2d(weight, 1, 0)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = logits.cols();
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let tape = Tape::new();
    Ok(tape.constant(logits.clone()).cross_entropy(labels).item())
}
