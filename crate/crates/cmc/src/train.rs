//! Self-supervised pretraining loop and the supervised-init alternative.
//!
//! One epoch shuffles the train split, augments each chip, splits it into
//! the two views, and optimizes the two-branch model on the contrastive
//! objective with memory-bank negatives. All randomness is drawn from
//! per-epoch substreams, so a resumed run reproduces an uninterrupted one
//! bit for bit.

use crate::config::substream;
use crate::contrastive::{symmetric_loss, ContrastiveConfig, MemoryBank};
use crate::data::{horizontal_flip, random_resized_crop, ChipDataset};
use crate::error::{Error, Result};
use crate::nn::{collect_grads, ClassifierHead, CmcModel, EncoderConfig, Manifest, Targets, TaskMode};
use crate::optim::{MultiStepSchedule, Optimizer, OptimizerConfig};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::views::ViewSpec;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Side length chips are cropped/resized to before encoding.
    pub chip_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: MultiStepSchedule,
    pub contrastive: ContrastiveConfig,
    pub encoder_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub d_h: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 400,
            batch_size: 100,
            chip_size: 32,
            optimizer: OptimizerConfig::pretrain_sgd(),
            schedule: MultiStepSchedule::new(vec![250, 300, 350], 10.0).unwrap(),
            contrastive: ContrastiveConfig::default(),
            encoder_widths: vec![16, 32, 64, 64],
            embedding_dim: 64,
            d_h: 32,
            seed: 0,
            checkpoint_every: 50,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.chip_size < 1 << self.encoder_widths.len() {
            return Err(Error::Config(format!(
                "chip_size {} too small for {} downsampling stages",
                self.chip_size,
                self.encoder_widths.len()
            )));
        }
        self.optimizer.validate()?;
        self.contrastive.validate()
    }

    fn encoder_config(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            stage_widths: self.encoder_widths.clone(),
            kernel_size: 3,
            embedding_dim: self.embedding_dim,
            ..EncoderConfig::new(in_channels)
        }
    }
}

/// Crop, maybe flip, then split into the two views.
fn augment_and_split(
    chip: &Tensor<f32>,
    spec: &ViewSpec,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let cropped = random_resized_crop(chip, size, size, rng)?;
    let cropped = if rng.gen_bool(0.5) { horizontal_flip(&cropped) } else { cropped };
    let pair = spec.apply(&cropped)?;
    Ok((pair.view1, pair.view2))
}

/// Stack same-shape [C,H,W] tensors into [B,C,H,W].
fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Shape("stack shape mismatch".into()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    epoch: usize,
    losses: Vec<f64>,
}

pub struct PretrainOutcome {
    pub model: CmcModel<f32>,
    /// Mean symmetric loss per completed epoch, from the start of training.
    pub epoch_losses: Vec<f64>,
}

/// Run (or resume) pretraining, writing checkpoints under `out_dir`.
pub fn pretrain(
    ds: &ChipDataset,
    spec: &ViewSpec,
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let train_idx = &ds.splits.train;
    if train_idx.len() < 2 {
        return Err(Error::Degenerate("pretraining needs at least 2 train chips".into()));
    }
    let (c1, c2) = spec.view_channels();
    let ckpt = out_dir.join("checkpoint");
    let n = train_idx.len();
    let k = cfg.contrastive.k.min(n - 1);

    let mut model;
    let mut optimizer = Optimizer::<f32>::new(cfg.optimizer.clone())?;
    let mut bank1;
    let mut bank2;
    let mut start_epoch = 0;
    let mut losses: Vec<f64> = Vec::new();
    if ckpt.join("manifest.json").exists() {
        let (m, manifest) = CmcModel::load(&ckpt)?;
        model = m;
        optimizer.load(&ckpt.join("optimizer"))?;
        bank1 = MemoryBank::load(&ckpt.join("bank1.bin"), cfg.contrastive.bank_momentum)?;
        bank2 = MemoryBank::load(&ckpt.join("bank2.bin"), cfg.contrastive.bank_momentum)?;
        let spath = ckpt.join("trainer.json");
        let state: TrainerState = serde_json::from_str(
            &std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?,
        )
        .map_err(|e| Error::Json { path: spath, source: e })?;
        start_epoch = state.epoch;
        losses = state.losses;
        if manifest.epoch != start_epoch || bank1.len() != n {
            return Err(Error::format(&ckpt, "inconsistent checkpoint state"));
        }
        log::info!("resuming at epoch {start_epoch}");
    } else {
        let mut init_rng = substream(cfg.seed, "init", 0);
        model = CmcModel::new(cfg.encoder_config(c1), cfg.encoder_config(c2), cfg.d_h, &mut init_rng)?;
        bank1 = MemoryBank::new(n, cfg.d_h, cfg.contrastive.bank_momentum, &mut substream(cfg.seed, "bank1", 0))?;
        bank2 = MemoryBank::new(n, cfg.d_h, cfg.contrastive.bank_momentum, &mut substream(cfg.seed, "bank2", 0))?;
    }

    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut substream(cfg.seed, "data", epoch));
        }
        let mut aug_rng = substream(cfg.seed, "augment", epoch);
        let mut neg_rng = substream(cfg.seed, "negatives", epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut v1s = Vec::with_capacity(batch.len());
            let mut v2s = Vec::with_capacity(batch.len());
            let mut neg1 = Vec::with_capacity(batch.len() * k);
            let mut neg2 = Vec::with_capacity(batch.len() * k);
            for &row in batch {
                let chip = ds.chip(train_idx[row])?;
                let (v1, v2) = augment_and_split(&chip, spec, cfg.chip_size, &mut aug_rng)?;
                v1s.push(v1);
                v2s.push(v2);
                neg1.extend(bank1.sample_negatives(row, k, &mut neg_rng));
                neg2.extend(bank2.sample_negatives(row, k, &mut neg_rng));
            }
            let mut g = Graph::<f32>::new();
            let x1 = g.input(stack(&v1s)?, false)?;
            let x2 = g.input(stack(&v2s)?, false)?;
            let (z1, z2) = model.encode(&mut g, x1, x2, true, true)?;
            let (h1, h2) = model.project(&mut g, z1, z2, true)?;
            let loss = symmetric_loss(&mut g, h1, h2, &bank1, &bank2, neg1, neg2, &cfg.contrastive)?;
            g.backward(loss)?;
            let mut params = model.named_params();
            {
                let mut refs: Vec<_> = params.iter_mut().map(|(_, p)| &mut **p).collect();
                collect_grads(&g, &mut refs);
            }
            optimizer.step(&mut params, lr)?;
            for (_, p) in params.iter_mut() {
                p.zero_grad();
            }
            bank1.update(batch, g.value(h1))?;
            bank2.update(batch, g.value(h2))?;
            epoch_loss += g.value(loss).item()?.to_f64();
            batches += 1;
        }
        let mean_loss = epoch_loss / batches as f64;
        losses.push(mean_loss);
        log::info!("epoch {epoch}: loss {mean_loss:.4} lr {lr:.5}");
        let done = epoch + 1 == cfg.epochs;
        if done || (epoch + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&ckpt, &mut model, &mut optimizer, &bank1, &bank2, spec, cfg, epoch + 1, &losses)?;
        }
    }
    write_loss_log(out_dir, &losses)?;
    Ok(PretrainOutcome { model, epoch_losses: losses })
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint(
    ckpt: &Path,
    model: &mut CmcModel<f32>,
    optimizer: &mut Optimizer<f32>,
    bank1: &MemoryBank<f32>,
    bank2: &MemoryBank<f32>,
    spec: &ViewSpec,
    cfg: &PretrainConfig,
    epoch: usize,
    losses: &[f64],
) -> Result<()> {
    let manifest = Manifest {
        encoder1: model.encoder1.cfg.clone(),
        encoder2: model.encoder2.cfg.clone(),
        d_h: cfg.d_h,
        view_spec_id: spec.id().to_string(),
        epoch,
        rng_seed: cfg.seed,
    };
    model.save(ckpt, &manifest)?;
    optimizer.save(&ckpt.join("optimizer"))?;
    bank1.save(&ckpt.join("bank1.bin"))?;
    bank2.save(&ckpt.join("bank2.bin"))?;
    let state = TrainerState { epoch, losses: losses.to_vec() };
    let spath = ckpt.join("trainer.json");
    let json = serde_json::to_string_pretty(&state)
        .map_err(|e| Error::Json { path: spath.clone(), source: e })?;
    std::fs::write(&spath, json).map_err(|e| Error::io(&spath, e))?;
    Ok(())
}

fn write_loss_log(out_dir: &Path, losses: &[f64]) -> Result<()> {
    let path = out_dir.join("pretrain_loss.csv");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "epoch,loss").map_err(|e| Error::io(&path, e))?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupervisedInitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub chip_size: usize,
    pub optimizer: OptimizerConfig,
    pub encoder_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub d_h: usize,
    pub seed: u64,
}

impl Default for SupervisedInitConfig {
    fn default() -> Self {
        SupervisedInitConfig {
            epochs: 30,
            batch_size: 50,
            chip_size: 32,
            optimizer: OptimizerConfig::adam(1e-3, 1e-4),
            encoder_widths: vec![16, 32, 64, 64],
            embedding_dim: 64,
            d_h: 32,
            seed: 0,
        }
    }
}

/// Label-supervised alternative to contrastive pretraining: the same
/// two-branch model trained end to end with a classifier on concat(z1, z2).
/// Writes a checkpoint in the pretraining layout so downstream evaluation
/// is interchangeable.
pub fn supervised_init(
    ds: &ChipDataset,
    spec: &ViewSpec,
    cfg: &SupervisedInitConfig,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    cfg.optimizer.validate()?;
    let train_idx = &ds.splits.train;
    if train_idx.is_empty() {
        return Err(Error::Degenerate("supervised init needs train chips".into()));
    }
    let (c1, c2) = spec.view_channels();
    let mut init_rng = substream(cfg.seed, "init", 0);
    let enc_cfg = |c| EncoderConfig {
        in_channels: c,
        stage_widths: cfg.encoder_widths.clone(),
        kernel_size: 3,
        embedding_dim: cfg.embedding_dim,
        ..EncoderConfig::new(c)
    };
    let mut model = CmcModel::new(enc_cfg(c1), enc_cfg(c2), cfg.d_h, &mut init_rng)?;
    let mut head = ClassifierHead::new(
        model.feature_dim(),
        ds.meta.num_classes,
        ds.meta.task,
        &mut init_rng,
    );
    let mut optimizer = Optimizer::<f32>::new(cfg.optimizer.clone())?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut substream(cfg.seed, "data", epoch));
        }
        let mut aug_rng = substream(cfg.seed, "augment", epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut v1s = Vec::new();
            let mut v2s = Vec::new();
            let mut single = Vec::new();
            let mut multi = Vec::new();
            for &row in batch {
                let i = train_idx[row];
                let chip = ds.chip(i)?;
                let (v1, v2) = augment_and_split(&chip, spec, cfg.chip_size, &mut aug_rng)?;
                v1s.push(v1);
                v2s.push(v2);
                match ds.meta.task {
                    TaskMode::SingleLabel => match ds.label(i) {
                        crate::data::Label::Single(c) => single.push(*c),
                        _ => return Err(Error::Shape("single-label task with multi label".into())),
                    },
                    TaskMode::MultiLabel => multi.extend(ds.label_vector(i)),
                }
            }
            let targets = match ds.meta.task {
                TaskMode::SingleLabel => Targets::Single(single),
                TaskMode::MultiLabel => Targets::Multi(Tensor::new(
                    vec![batch.len(), ds.meta.num_classes],
                    multi,
                )?),
            };
            let mut g = Graph::<f32>::new();
            let x1 = g.input(stack(&v1s)?, false)?;
            let x2 = g.input(stack(&v2s)?, false)?;
            let (z1, z2) = model.encode(&mut g, x1, x2, true, true)?;
            let feats = g.concat(&[z1, z2], 1)?;
            let loss = head.forward_loss(&mut g, feats, &targets, true)?;
            g.backward(loss)?;
            let mut params = model.named_params();
            params.extend(head.named_params());
            {
                let mut refs: Vec<_> = params.iter_mut().map(|(_, p)| &mut **p).collect();
                collect_grads(&g, &mut refs);
            }
            optimizer.step(&mut params, cfg.optimizer.lr)?;
            for (_, p) in params.iter_mut() {
                p.zero_grad();
            }
            epoch_loss += g.value(loss).item()?.to_f64();
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        losses.push(mean);
        log::info!("supervised epoch {epoch}: loss {mean:.4}");
    }
    let ckpt = out_dir.join("checkpoint");
    let manifest = Manifest {
        encoder1: model.encoder1.cfg.clone(),
        encoder2: model.encoder2.cfg.clone(),
        d_h: cfg.d_h,
        view_spec_id: spec.id().to_string(),
        epoch: cfg.epochs,
        rng_seed: cfg.seed,
    };
    model.save(&ckpt, &manifest)?;
    Ok(PretrainOutcome { model, epoch_losses: losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::uniform_loss;
    use crate::data::{generate_synthetic, make_splits, ChipDataset, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dataset(dir: &Path, n: usize) -> ChipDataset {
        let cfg = SynthConfig { n, num_classes: 2, height: 8, width: 8, ..Default::default() };
        let (meta, chips, labels) =
            generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let splits = make_splits(n, 1.0, 0.0, 0).unwrap();
        ChipDataset::create(dir, meta, &chips, &labels, splits).unwrap()
    }

    fn tiny_config(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            batch_size: 4,
            chip_size: 8,
            encoder_widths: vec![4, 8],
            embedding_dim: 8,
            d_h: 8,
            contrastive: ContrastiveConfig { k: 3, ..Default::default() },
            checkpoint_every: 2,
            ..Default::default()
        }
    }

    fn spec() -> ViewSpec {
        ViewSpec::fixed_bands(
            &crate::views::BAND_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            vec![1.0; 10],
            vec![0.5; 10],
        )
        .unwrap()
    }

    #[test]
    fn pretrain_runs_and_stays_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"), 8);
        let out = dir.path().join("run");
        let outcome = pretrain(&ds, &spec(), &tiny_config(3), &out).unwrap();
        assert_eq!(outcome.epoch_losses.len(), 3);
        // logits live in [-1/tau, 1/tau], so each direction is bounded by
        // 2/tau + log(k+1)
        let ceiling = 2.0 * (2.0 / 0.07 + uniform_loss(3));
        for l in &outcome.epoch_losses {
            assert!(l.is_finite() && *l < ceiling, "loss {l}");
        }
        assert!(out.join("checkpoint/manifest.json").exists());
        assert!(out.join("pretrain_loss.csv").exists());
    }

    #[test]
    fn same_seed_same_weights() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"), 8);
        let mut a = pretrain(&ds, &spec(), &tiny_config(2), &dir.path().join("a")).unwrap();
        let mut b = pretrain(&ds, &spec(), &tiny_config(2), &dir.path().join("b")).unwrap();
        for ((na, pa), (nb, pb)) in a.model.named_params().iter().zip(b.model.named_params().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(pa.value.data(), pb.value.data(), "{na} differs");
        }
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"), 8);
        let mut full = pretrain(&ds, &spec(), &tiny_config(4), &dir.path().join("full")).unwrap();
        // interrupted run: 2 epochs, then resume to 4 from the checkpoint
        let part = dir.path().join("part");
        pretrain(&ds, &spec(), &tiny_config(2), &part).unwrap();
        let mut resumed = pretrain(&ds, &spec(), &tiny_config(4), &part).unwrap();
        assert_eq!(full.epoch_losses, resumed.epoch_losses);
        for ((na, pa), (nb, pb)) in
            full.model.named_params().iter().zip(resumed.model.named_params().iter())
        {
            assert_eq!(pa.value.data(), pb.value.data(), "{na} differs after resume");
            let _ = nb;
        }
    }

    #[test]
    fn supervised_init_writes_compatible_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"), 8);
        let cfg = SupervisedInitConfig {
            epochs: 2,
            batch_size: 4,
            chip_size: 8,
            encoder_widths: vec![4, 8],
            embedding_dim: 8,
            d_h: 8,
            ..Default::default()
        };
        let out = dir.path().join("sup");
        let outcome = supervised_init(&ds, &spec(), &cfg, &out).unwrap();
        assert_eq!(outcome.epoch_losses.len(), 2);
        let (model, manifest) = CmcModel::<f32>::load(&out.join("checkpoint")).unwrap();
        assert_eq!(manifest.epoch, 2);
        assert_eq!(model.feature_dim(), 16);
    }
}
