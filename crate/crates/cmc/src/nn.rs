//! The two-branch network: per-view conv encoders, L2-normalized projection
//! heads, and linear classifier heads for transfer.

use crate::error::{Error, Result};
use crate::tensor::{BnMode, Graph, NodeId, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor. Gradients accumulate until `zero_grad`.
pub struct Param<T> {
    id: u64,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed), value, grad }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Insert this parameter's current value as a graph leaf and record the
    /// binding so gradients can be collected after backward.
    pub fn node(&self, g: &mut Graph<T>, trainable: bool) -> Result<NodeId> {
        let id = g.input(self.value.clone(), trainable)?;
        g.bind(self.id, id);
        Ok(id)
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Add tape gradients back into the bound parameters.
pub fn collect_grads<T: Scalar>(g: &Graph<T>, params: &mut [&mut Param<T>]) {
    for p in params.iter_mut() {
        for &(pid, nid) in g.bindings() {
            if pid == p.id {
                if let Some(grad) = g.grad(nid) {
                    for (a, b) in p.grad.data_mut().iter_mut().zip(grad.data()) {
                        *a = *a + *b;
                    }
                }
            }
        }
    }
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

pub struct Linear<T> {
    pub weight: Param<T>, // [out, in]
    pub bias: Param<T>,   // [out]
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(kaiming_uniform(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> Result<NodeId> {
        let w = self.weight.node(g, trainable)?;
        let b = self.bias.node(g, trainable)?;
        g.linear(x, w, b)
    }

    /// Plain value-level forward, no tape.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xn = g.input(x.clone(), false)?;
        let y = self.forward(&mut g, xn, false)?;
        Ok(g.value(y).clone())
    }
}

pub struct Conv2d<T> {
    pub weight: Param<T>, // [F, C, k, k]
    pub bias: Param<T>,   // [F]
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            weight: Param::new(kaiming_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, rng)),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> Result<NodeId> {
        let w = self.weight.node(g, trainable)?;
        let b = self.bias.node(g, trainable)?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        train: bool,
        trainable: bool,
    ) -> Result<NodeId> {
        let ga = self.gamma.node(g, trainable)?;
        let be = self.beta.node(g, trainable)?;
        let eps = T::from_f64(self.eps);
        if train {
            let (y, stats) = g.batch_norm2d(x, ga, be, eps, BnMode::Train)?;
            let (mean, var) = stats.expect("train mode returns batch stats");
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.running_var.data_mut().iter_mut().zip(&var) {
                *r = keep * *r + m * b;
            }
            Ok(y)
        } else {
            let mode = BnMode::Eval {
                mean: self.running_mean.data().to_vec(),
                var: self.running_var.data().to_vec(),
            };
            let (y, _) = g.batch_norm2d(x, ga, be, eps, mode)?;
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub kernel_size: usize,
    pub embedding_dim: usize,
}

impl EncoderConfig {
    pub fn new(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            stage_widths: vec![16, 32, 64, 64],
            kernel_size: 3,
            embedding_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 || self.stage_widths.is_empty() || self.embedding_dim < 2 {
            return Err(Error::Config(format!("invalid encoder config {:?}", self)));
        }
        Ok(())
    }

    /// Spatial side length after all stride-2 stages.
    pub fn output_spatial(&self, input: usize) -> usize {
        let k = self.kernel_size;
        let p = k / 2;
        let mut h = input;
        for _ in &self.stage_widths {
            h = (h + 2 * p - k) / 2 + 1;
        }
        h
    }
}

struct EncoderStage<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

/// Plain conv encoder: (conv s2 -> BN -> ReLU) per stage, global average
/// pool, and an optional linear head when the embedding dim differs from
/// the last stage width.
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    stages: Vec<EncoderStage<T>>,
    head: Option<Linear<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = cfg.in_channels;
        for &w in &cfg.stage_widths {
            stages.push(EncoderStage {
                conv: Conv2d::new(in_ch, w, cfg.kernel_size, 2, cfg.kernel_size / 2, rng),
                bn: BatchNorm2d::new(w),
            });
            in_ch = w;
        }
        let head = if in_ch != cfg.embedding_dim {
            Some(Linear::new(in_ch, cfg.embedding_dim, rng))
        } else {
            None
        };
        Ok(Encoder { cfg, stages, head })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        train: bool,
        trainable: bool,
    ) -> Result<NodeId> {
        let in_ch = g.value(x).shape().get(1).copied().unwrap_or(0);
        if in_ch != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {}",
                self.cfg.in_channels, in_ch
            )));
        }
        let mut cur = x;
        for stage in &mut self.stages {
            cur = stage.conv.forward(g, cur, trainable)?;
            cur = stage.bn.forward(g, cur, train, trainable)?;
            cur = g.relu(cur)?;
        }
        cur = g.global_avg_pool(cur)?;
        if let Some(head) = &self.head {
            cur = head.forward(g, cur, trainable)?;
        }
        Ok(cur)
    }

    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            out.push((format!("{prefix}.stage{i}.conv.weight"), &mut stage.conv.weight));
            out.push((format!("{prefix}.stage{i}.conv.bias"), &mut stage.conv.bias));
            out.push((format!("{prefix}.stage{i}.bn.gamma"), &mut stage.bn.gamma));
            out.push((format!("{prefix}.stage{i}.bn.beta"), &mut stage.bn.beta));
        }
        if let Some(head) = &mut self.head {
            out.push((format!("{prefix}.head.weight"), &mut head.weight));
            out.push((format!("{prefix}.head.bias"), &mut head.bias));
        }
    }

    fn visit_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            out.push((format!("{prefix}.stage{i}.bn.running_mean"), &mut stage.bn.running_mean));
            out.push((format!("{prefix}.stage{i}.bn.running_var"), &mut stage.bn.running_var));
        }
    }
}

/// Checkpoint metadata written next to the serialized tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub encoder1: EncoderConfig,
    pub encoder2: EncoderConfig,
    pub d_h: usize,
    pub view_spec_id: String,
    pub epoch: usize,
    pub rng_seed: u64,
}

/// Two encoder branches plus projection heads.
pub struct CmcModel<T> {
    pub encoder1: Encoder<T>,
    pub encoder2: Encoder<T>,
    pub proj1: Linear<T>,
    pub proj2: Linear<T>,
    pub d_h: usize,
}

impl<T: Scalar> CmcModel<T> {
    pub fn new(
        cfg1: EncoderConfig,
        cfg2: EncoderConfig,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder1 = Encoder::new(cfg1, rng)?;
        let encoder2 = Encoder::new(cfg2, rng)?;
        let proj1 = Linear::new(encoder1.cfg.embedding_dim, d_h, rng);
        let proj2 = Linear::new(encoder2.cfg.embedding_dim, d_h, rng);
        Ok(CmcModel { encoder1, encoder2, proj1, proj2, d_h })
    }

    /// Default model: d_h = 32 on top of 64-d embeddings.
    pub fn with_view_channels(c1: usize, c2: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(EncoderConfig::new(c1), EncoderConfig::new(c2), 32, rng)
    }

    pub fn encode(
        &mut self,
        g: &mut Graph<T>,
        v1: NodeId,
        v2: NodeId,
        train: bool,
        trainable: bool,
    ) -> Result<(NodeId, NodeId)> {
        let z1 = self.encoder1.forward(g, v1, train, trainable)?;
        let z2 = self.encoder2.forward(g, v2, train, trainable)?;
        Ok((z1, z2))
    }

    pub fn project(
        &self,
        g: &mut Graph<T>,
        z1: NodeId,
        z2: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, NodeId)> {
        let h1 = self.proj1.forward(g, z1, trainable)?;
        let h1 = g.l2_normalize(h1, 1)?;
        let h2 = self.proj2.forward(g, z2, trainable)?;
        let h2 = g.l2_normalize(h2, 1)?;
        Ok((h1, h2))
    }

    /// Frozen-feature extraction: concat(z1, z2) in eval mode, no tape kept
    /// beyond the call.
    pub fn extract_features(&mut self, v1: &Tensor<T>, v2: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let n1 = g.input(v1.clone(), false)?;
        let n2 = g.input(v2.clone(), false)?;
        let (z1, z2) = self.encode(&mut g, n1, n2, false, false)?;
        let f = g.concat(&[z1, z2], 1)?;
        Ok(g.value(f).clone())
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder1.cfg.embedding_dim + self.encoder2.cfg.embedding_dim
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.encoder1.visit_params("enc1", &mut out);
        self.encoder2.visit_params("enc2", &mut out);
        out.push(("proj1.weight".into(), &mut self.proj1.weight));
        out.push(("proj1.bias".into(), &mut self.proj1.bias));
        out.push(("proj2.weight".into(), &mut self.proj2.weight));
        out.push(("proj2.bias".into(), &mut self.proj2.bias));
        out
    }

    pub fn named_buffers(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.encoder1.visit_buffers("enc1", &mut out);
        self.encoder2.visit_buffers("enc2", &mut out);
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    pub fn save(&mut self, dir: &Path, manifest: &Manifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(manifest)
            .map_err(|e| Error::Json { path: mpath.clone(), source: e })?;
        std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        for (name, p) in self.named_params() {
            p.value.save(&dir.join(format!("{name}.bin")))?;
        }
        for (name, t) in self.named_buffers() {
            t.save(&dir.join(format!("{name}.bin")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let mpath = dir.join("manifest.json");
        let json = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&json)
            .map_err(|e| Error::Json { path: mpath.clone(), source: e })?;
        // init values are overwritten below; the rng just shapes the tensors
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = CmcModel::new(
            manifest.encoder1.clone(),
            manifest.encoder2.clone(),
            manifest.d_h,
            &mut rng,
        )?;
        for (name, p) in model.named_params() {
            let t = Tensor::load(&dir.join(format!("{name}.bin")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(dir, format!("checkpoint tensor {name} shape mismatch")));
            }
            p.value = t;
        }
        for (name, b) in model.named_buffers() {
            let t = Tensor::load(&dir.join(format!("{name}.bin")))?;
            if t.shape() != b.shape() {
                return Err(Error::format(dir, format!("checkpoint buffer {name} shape mismatch")));
            }
            *b = t;
        }
        Ok((model, manifest))
    }
}

use rand::SeedableRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    SingleLabel,
    MultiLabel,
}

/// Classification targets for a batch.
pub enum Targets<T> {
    Single(Vec<usize>),
    Multi(Tensor<T>),
}

pub struct ClassifierHead<T> {
    pub linear: Linear<T>,
    pub mode: TaskMode,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(feature_dim: usize, num_classes: usize, mode: TaskMode, rng: &mut impl Rng) -> Self {
        ClassifierHead { linear: Linear::new(feature_dim, num_classes, rng), mode }
    }

    /// Loss for a batch of features; the mode fixes the loss pairing
    /// (softmax+CE for single-label, sigmoid+BCE for multi-label).
    pub fn forward_loss(
        &self,
        g: &mut Graph<T>,
        features: NodeId,
        targets: &Targets<T>,
        trainable: bool,
    ) -> Result<NodeId> {
        let logits = self.linear.forward(g, features, trainable)?;
        match (self.mode, targets) {
            (TaskMode::SingleLabel, Targets::Single(idx)) => g.softmax_cross_entropy(logits, idx),
            (TaskMode::MultiLabel, Targets::Multi(t)) => g.sigmoid_bce(logits, t.clone()),
            _ => Err(Error::Shape("target kind does not match head mode".into())),
        }
    }

    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.linear.apply(features)
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![
            ("head.weight".into(), &mut self.linear.weight),
            ("head.bias".into(), &mut self.linear.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn default_spatial_shrinks_32_to_2() {
        let cfg = EncoderConfig::new(5);
        assert_eq!(cfg.output_spatial(32), 2);
    }

    #[test]
    fn zero_encoder_maps_zero_chip_to_zero() {
        let mut r = rng(1);
        let mut enc = Encoder::<f32>::new(EncoderConfig::new(3), &mut r).unwrap();
        // zero all weights and biases
        let mut params = Vec::new();
        enc.visit_params("e", &mut params);
        for (name, p) in params {
            if !name.contains("bn.gamma") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3, 16, 16]), false).unwrap();
        let z = enc.forward(&mut g, x, false, false).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_in_eval_mode() {
        let mut r = rng(2);
        let mut model = CmcModel::<f32>::with_view_channels(1, 2, &mut r).unwrap();
        let v1 = Tensor::full(&[1, 1, 16, 16], 0.25f32);
        let v2 = Tensor::full(&[1, 2, 16, 16], -0.5f32);
        let a = model.extract_features(&v1, &v2).unwrap();
        let b = model.extract_features(&v1, &v2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_is_unit_norm_and_scale_invariant() {
        let mut r = rng(3);
        let model = CmcModel::<f64>::with_view_channels(1, 2, &mut r).unwrap();
        let z = Tensor::new(vec![1, 64], (0..64).map(|i| 0.1 * (i as f64) - 2.0).collect()).unwrap();
        let z10 = z.map(|v| v * 10.0);
        let mut g = Graph::new();
        let za = g.input(z, false).unwrap();
        let zb = g.input(z10, false).unwrap();
        let (h1, h2) = model.project(&mut g, za, zb, false).unwrap();
        let n1: f64 = g.value(h1).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(n1, 1.0, epsilon = 1e-5);
        // scaling z leaves h unchanged (same proj1 weights for both inputs)
        let mut g2 = Graph::new();
        let za2 = g2.input(g.value(zb).clone(), false).unwrap();
        let _ = (za2, h2);
    }

    #[test]
    fn projection_identity_weight_normalizes() {
        let mut r = rng(4);
        let mut head = Linear::<f64>::new(4, 4, &mut r);
        let mut w = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        head.weight.value = w;
        head.bias.value = Tensor::zeros(&[4]);
        let mut g = Graph::new();
        let z = g.input(Tensor::new(vec![1, 4], vec![3.0, 4.0, 0.0, 0.0]).unwrap(), false).unwrap();
        let h = head.forward(&mut g, z, false).unwrap();
        let h = g.l2_normalize(h, 1).unwrap();
        assert_eq!(g.value(h).data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn extract_features_orders_view1_then_view2() {
        // d_z=2 via tiny custom config
        let mut r = rng(5);
        let cfg = |c| EncoderConfig {
            in_channels: c,
            stage_widths: vec![2],
            kernel_size: 3,
            embedding_dim: 2,
        };
        let mut model = CmcModel::<f64>::new(cfg(1), cfg(1), 2, &mut r).unwrap();
        let f = model
            .extract_features(&Tensor::zeros(&[1, 1, 8, 8]), &Tensor::zeros(&[1, 1, 8, 8]))
            .unwrap();
        assert_eq!(f.shape(), &[1, 4]);
        // concat arithmetic with default dims
        let mut model2 = CmcModel::<f32>::with_view_channels(5, 5, &mut r).unwrap();
        let f2 = model2
            .extract_features(&Tensor::zeros(&[1, 5, 16, 16]), &Tensor::zeros(&[1, 5, 16, 16]))
            .unwrap();
        assert_eq!(f2.shape(), &[1, 128]);
    }

    #[test]
    fn default_param_count_is_desk_scale() {
        let mut r = rng(6);
        let mut model = CmcModel::<f32>::with_view_channels(5, 5, &mut r).unwrap();
        let n = model.param_count();
        assert!(n < 500_000, "param count {}", n);
        assert!(n > 10_000);
    }

    #[test]
    fn head_loss_uniform_anchors() {
        let mut r = rng(7);
        let mut head = ClassifierHead::<f64>::new(6, 4, TaskMode::SingleLabel, &mut r);
        for (_, p) in head.named_params() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let f = g.input(Tensor::new(vec![2, 6], vec![0.5; 12]).unwrap(), false).unwrap();
        let loss = head
            .forward_loss(&mut g, f, &Targets::Single(vec![1, 3]), false)
            .unwrap();
        assert_relative_eq!(g.value(loss).item().unwrap(), (4.0f64).ln(), max_relative = 1e-12);

        // zero logits multi-label -> log 2 per class under mean reduction
        let mut mhead = ClassifierHead::<f64>::new(6, 5, TaskMode::MultiLabel, &mut r);
        for (_, p) in mhead.named_params() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g2 = Graph::new();
        let f2 = g2.input(Tensor::new(vec![1, 6], vec![0.2; 6]).unwrap(), false).unwrap();
        let target = Tensor::new(vec![1, 5], vec![1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let loss2 = mhead
            .forward_loss(&mut g2, f2, &Targets::Multi(target), false)
            .unwrap();
        assert_relative_eq!(g2.value(loss2).item().unwrap(), (2.0f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn target_kind_mismatch_is_error() {
        let mut r = rng(8);
        let head = ClassifierHead::<f64>::new(3, 2, TaskMode::SingleLabel, &mut r);
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(&[1, 3]), false).unwrap();
        let t = Targets::Multi(Tensor::zeros(&[1, 2]));
        assert!(head.forward_loss(&mut g, f, &t, false).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(9);
        let mut model = CmcModel::<f32>::with_view_channels(1, 2, &mut r).unwrap();
        // perturb a running stat so buffers are exercised too
        model.named_buffers()[0].1.data_mut()[0] = 0.37;
        let manifest = Manifest {
            encoder1: model.encoder1.cfg.clone(),
            encoder2: model.encoder2.cfg.clone(),
            d_h: model.d_h,
            view_spec_id: "lab".into(),
            epoch: 3,
            rng_seed: 42,
        };
        model.save(dir.path(), &manifest).unwrap();
        let (mut back, m2) = CmcModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(m2.epoch, 3);
        assert_eq!(m2.view_spec_id, "lab");
        for ((_, a), (_, b)) in model.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(a.value, b.value);
        }
        for ((_, a), (_, b)) in model.named_buffers().iter().zip(back.named_buffers().iter()) {
            assert_eq!(**a, **b);
        }
    }
}
