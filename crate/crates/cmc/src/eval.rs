//! Transfer evaluation: frozen-feature linear probe, full finetuning, and
//! the two metrics (accuracy for single-label tasks, macro mAP for
//! multi-label).

use crate::config::substream;
use crate::data::{horizontal_flip, random_resized_crop, resize_bilinear, ChipDataset, Label};
use crate::error::{Error, Result};
use crate::nn::{collect_grads, ClassifierHead, CmcModel, Targets, TaskMode};
use crate::optim::{MultiStepSchedule, Optimizer, OptimizerConfig};
use crate::tensor::{Graph, Tensor};
use crate::views::ViewSpec;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: MultiStepSchedule,
    pub chip_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            batch_size: 256,
            optimizer: OptimizerConfig::adam(1e-3, 0.0),
            schedule: MultiStepSchedule::new(vec![30, 35, 40, 45], 5.0).unwrap(),
            chip_size: 32,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// Preset for large multi-label tasks: higher lr and weight decay.
    pub fn mlrsnet_like() -> Self {
        ProbeConfig { optimizer: OptimizerConfig::adam(1e-2, 1e-2), ..Default::default() }
    }

    /// Preset for small single-label aerial tasks: default lr, decay on.
    pub fn aid_like() -> Self {
        ProbeConfig { optimizer: OptimizerConfig::adam(1e-3, 1e-2), ..Default::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "mlrsnet" => Ok(Self::mlrsnet_like()),
            "aid" => Ok(Self::aid_like()),
            other => Err(Error::Config(format!("unknown probe preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: MultiStepSchedule,
    pub chip_size: usize,
    /// Update batch-norm running statistics during finetuning.
    pub update_bn_stats: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            batch_size: 100,
            optimizer: OptimizerConfig::adam(1e-4, 1e-4),
            schedule: MultiStepSchedule::new(vec![60, 70, 80, 90], 5.0).unwrap(),
            chip_size: 32,
            update_bn_stats: true,
            seed: 0,
        }
    }
}

/// Fraction of exactly-correct predictions.
pub fn accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Shape("accuracy needs matching non-empty slices".into()));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Macro-averaged mean average precision. Per class, instances are ranked
/// by descending score with ties broken by ascending index; AP is the mean
/// of precision-at-rank over the positive ranks. Classes without positives
/// are skipped (and logged); the macro mean runs over the rest.
pub fn macro_map(scores: &Tensor<f32>, targets: &Tensor<f32>) -> Result<f64> {
    let shape = scores.shape();
    if shape.len() != 2 || targets.shape() != shape {
        return Err(Error::Shape(format!(
            "macro_map expects matching [N,C], got {:?} and {:?}",
            shape,
            targets.shape()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let mut aps = Vec::new();
    for class in 0..c {
        let col_scores: Vec<f32> = (0..n).map(|i| scores.data()[i * c + class]).collect();
        let positives: Vec<bool> = (0..n).map(|i| targets.data()[i * c + class] > 0.5).collect();
        let n_pos = positives.iter().filter(|&&p| p).count();
        if n_pos == 0 {
            log::warn!("macro_map: class {class} has no positives, skipped");
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            col_scores[b].partial_cmp(&col_scores[a]).unwrap().then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if positives[i] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / n_pos as f64);
    }
    if aps.is_empty() {
        return Err(Error::Degenerate("macro_map: no class has positives".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub pretrain_source: String,
    pub views: String,
    pub n_pretrain: usize,
    pub protocol: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const LEDGER_HEADER: &str = "task,pretrain_source,views,n_pretrain,protocol,metric,value,seed";

impl ReportRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.task,
            self.pretrain_source,
            self.views,
            self.n_pretrain,
            self.protocol,
            self.metric,
            self.value,
            self.seed
        )
    }
}

/// Append rows to the CSV ledger, writing the header when the file is new.
pub fn append_ledger(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{LEDGER_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    for row in rows {
        writeln!(f, "{}", row.to_csv_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_report_json(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let json = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn targets_for(ds: &ChipDataset, indices: &[usize]) -> Result<Targets<f32>> {
    match ds.meta.task {
        TaskMode::SingleLabel => {
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                match ds.label(i) {
                    Label::Single(c) => out.push(*c),
                    _ => return Err(Error::Shape("single-label task with multi label".into())),
                }
            }
            Ok(Targets::Single(out))
        }
        TaskMode::MultiLabel => {
            let mut flat = Vec::with_capacity(indices.len() * ds.meta.num_classes);
            for &i in indices {
                flat.extend(ds.label_vector(i));
            }
            Ok(Targets::Multi(Tensor::new(vec![indices.len(), ds.meta.num_classes], flat)?))
        }
    }
}

fn single_targets(t: &Targets<f32>) -> &[usize] {
    match t {
        Targets::Single(v) => v,
        _ => unreachable!(),
    }
}

/// Deterministic eval-time view construction: resize, no augmentation.
fn eval_views(
    ds: &ChipDataset,
    i: usize,
    spec: &ViewSpec,
    size: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let chip = resize_bilinear(&ds.chip(i)?, size, size)?;
    let pair = spec.apply(&chip)?;
    Ok((pair.view1, pair.view2))
}

fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Frozen features for the given chips: concat(z1, z2) in eval mode.
pub fn extract_features(
    model: &mut CmcModel<f32>,
    ds: &ChipDataset,
    indices: &[usize],
    spec: &ViewSpec,
    size: usize,
) -> Result<Tensor<f32>> {
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        let mut v1s = Vec::with_capacity(chunk.len());
        let mut v2s = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (v1, v2) = eval_views(ds, i, spec, size)?;
            v1s.push(v1);
            v2s.push(v2);
        }
        rows.push(model.extract_features(&stack(&v1s)?, &stack(&v2s)?)?);
    }
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    Tensor::concat(&refs, 0)
}

fn param_checksum(model: &mut CmcModel<f32>) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for (_, p) in model.named_params() {
        count += p.value.numel();
        sum += p.value.data().iter().map(|&v| v as f64).sum::<f64>();
    }
    (count, sum)
}

fn head_metric(
    head: &ClassifierHead<f32>,
    features: &Tensor<f32>,
    ds: &ChipDataset,
    indices: &[usize],
) -> Result<(String, f64)> {
    let logits = head.logits(features)?;
    let c = ds.meta.num_classes;
    match ds.meta.task {
        TaskMode::SingleLabel => {
            let preds: Vec<usize> = (0..indices.len())
                .map(|i| {
                    let row = &logits.data()[i * c..(i + 1) * c];
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect();
            let targets = targets_for(ds, indices)?;
            Ok(("accuracy".into(), accuracy(&preds, single_targets(&targets))?))
        }
        TaskMode::MultiLabel => {
            let mut flat = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                flat.extend(ds.label_vector(i));
            }
            let targets = Tensor::new(vec![indices.len(), c], flat)?;
            Ok(("macro_map".into(), macro_map(&logits, &targets)?))
        }
    }
}

pub struct EvalOutcome {
    pub head: ClassifierHead<f32>,
    pub metric: String,
    pub value: f64,
    pub train_losses: Vec<f64>,
}

/// Train a linear head on cached frozen features and report the metric on
/// the test split. Encoder weights are guaranteed untouched.
pub fn run_linear_probe(
    model: &mut CmcModel<f32>,
    ds: &ChipDataset,
    spec: &ViewSpec,
    cfg: &ProbeConfig,
) -> Result<EvalOutcome> {
    cfg.optimizer.validate()?;
    let train_idx = &ds.splits.train;
    let test_idx = if ds.splits.test.is_empty() { &ds.splits.val } else { &ds.splits.test };
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Degenerate("probe needs train and test chips".into()));
    }
    let before = param_checksum(model);
    let train_feats = extract_features(model, ds, train_idx, spec, cfg.chip_size)?;
    let test_feats = extract_features(model, ds, test_idx, spec, cfg.chip_size)?;
    let feat_dim = train_feats.shape()[1];
    if feat_dim != model.feature_dim() {
        return Err(Error::Shape("cached feature dim mismatch".into()));
    }
    let mut head = ClassifierHead::new(
        feat_dim,
        ds.meta.num_classes,
        ds.meta.task,
        &mut substream(cfg.seed, "probe-init", 0),
    );
    let mut optimizer = Optimizer::<f32>::new(cfg.optimizer.clone())?;
    let n = train_idx.len();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut substream(cfg.seed, "probe-data", epoch));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let feats = train_feats.index_select(0, batch)?;
            let idx: Vec<usize> = batch.iter().map(|&b| train_idx[b]).collect();
            let targets = targets_for(ds, &idx)?;
            let mut g = Graph::<f32>::new();
            let x = g.input(feats, false)?;
            let loss = head.forward_loss(&mut g, x, &targets, true)?;
            g.backward(loss)?;
            let mut params = head.named_params();
            {
                let mut refs: Vec<_> = params.iter_mut().map(|(_, p)| &mut **p).collect();
                collect_grads(&g, &mut refs);
            }
            optimizer.step(&mut params, lr)?;
            for (_, p) in params.iter_mut() {
                p.zero_grad();
            }
            epoch_loss += g.value(loss).item()? as f64;
            batches += 1;
        }
        losses.push(epoch_loss / batches as f64);
    }
    if param_checksum(model) != before {
        return Err(Error::Numeric("probe mutated encoder parameters".into()));
    }
    let (metric, value) = head_metric(&head, &test_feats, ds, test_idx)?;
    Ok(EvalOutcome { head, metric, value, train_losses: losses })
}

/// Finetune the whole model (encoders + fresh linear head) and report the
/// metric on the test split. Zero epochs evaluates the initialized head
/// directly.
pub fn run_finetune(
    model: &mut CmcModel<f32>,
    ds: &ChipDataset,
    spec: &ViewSpec,
    cfg: &FinetuneConfig,
) -> Result<EvalOutcome> {
    cfg.optimizer.validate()?;
    let train_idx = &ds.splits.train;
    let test_idx = if ds.splits.test.is_empty() { &ds.splits.val } else { &ds.splits.test };
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Degenerate("finetune needs train and test chips".into()));
    }
    let mut head = ClassifierHead::new(
        model.feature_dim(),
        ds.meta.num_classes,
        ds.meta.task,
        &mut substream(cfg.seed, "finetune-init", 0),
    );
    let mut optimizer = Optimizer::<f32>::new(cfg.optimizer.clone())?;
    let n = train_idx.len();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut substream(cfg.seed, "finetune-data", epoch));
        }
        let mut aug_rng = substream(cfg.seed, "finetune-augment", epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut v1s = Vec::with_capacity(batch.len());
            let mut v2s = Vec::with_capacity(batch.len());
            let idx: Vec<usize> = batch.iter().map(|&b| train_idx[b]).collect();
            for &i in &idx {
                let chip = ds.chip(i)?;
                let cropped = random_resized_crop(&chip, cfg.chip_size, cfg.chip_size, &mut aug_rng)?;
                let cropped =
                    if aug_rng.gen_bool(0.5) { horizontal_flip(&cropped) } else { cropped };
                let pair = spec.apply(&cropped)?;
                v1s.push(pair.view1);
                v2s.push(pair.view2);
            }
            let targets = targets_for(ds, &idx)?;
            let mut g = Graph::<f32>::new();
            let x1 = g.input(stack(&v1s)?, false)?;
            let x2 = g.input(stack(&v2s)?, false)?;
            let (z1, z2) = model.encode(&mut g, x1, x2, cfg.update_bn_stats, true)?;
            let feats = g.concat(&[z1, z2], 1)?;
            let loss = head.forward_loss(&mut g, feats, &targets, true)?;
            g.backward(loss)?;
            let mut params = model.named_params();
            params.extend(head.named_params());
            {
                let mut refs: Vec<_> = params.iter_mut().map(|(_, p)| &mut **p).collect();
                collect_grads(&g, &mut refs);
            }
            optimizer.step(&mut params, lr)?;
            for (_, p) in params.iter_mut() {
                p.zero_grad();
            }
            epoch_loss += g.value(loss).item()? as f64;
            batches += 1;
        }
        losses.push(epoch_loss / batches as f64);
    }
    let test_feats = extract_features(model, ds, test_idx, spec, cfg.chip_size)?;
    let (metric, value) = head_metric(&head, &test_feats, ds, test_idx)?;
    Ok(EvalOutcome { head, metric, value, train_losses: losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_splits, SynthConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_anchors() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn map_perfect_ranking_is_one() {
        let scores = t(&[3, 2], vec![0.9, 0.1, 0.8, 0.7, 0.1, 0.9]);
        let targets = t(&[3, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_relative_eq!(macro_map(&scores, &targets).unwrap(), 1.0);
    }

    #[test]
    fn map_single_positive_ranked_second() {
        let scores = t(&[2, 1], vec![0.9, 0.3]);
        let targets = t(&[2, 1], vec![0.0, 1.0]);
        assert_relative_eq!(macro_map(&scores, &targets).unwrap(), 0.5);
    }

    #[test]
    fn map_ties_break_by_index() {
        // identical scores: order is item 0, 1, 2; positive at index 1
        // -> precision 1/2 at its rank
        let scores = t(&[3, 1], vec![0.5, 0.5, 0.5]);
        let targets = t(&[3, 1], vec![0.0, 1.0, 0.0]);
        assert_relative_eq!(macro_map(&scores, &targets).unwrap(), 0.5);
    }

    #[test]
    fn map_skips_empty_classes() {
        let scores = t(&[2, 2], vec![0.9, 0.4, 0.1, 0.6]);
        let targets = t(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        // class 1 has no positives; class 0's positive ranks first
        assert_relative_eq!(macro_map(&scores, &targets).unwrap(), 1.0);
        let none = t(&[2, 2], vec![0.0; 4]);
        assert!(macro_map(&scores, &none).is_err());
    }

    #[test]
    fn map_is_monotone_transform_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores_raw: Vec<f32> = (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets_raw: Vec<f32> =
            (0..18).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let scores = t(&[6, 3], scores_raw.clone());
        let targets = t(&[6, 3], targets_raw);
        let base = macro_map(&scores, &targets).unwrap();
        let squashed = t(&[6, 3], scores_raw.iter().map(|&v| 1.0 / (1.0 + (-3.0 * v).exp())).collect());
        assert_relative_eq!(macro_map(&squashed, &targets).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn ledger_append_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        let row = ReportRow {
            task: "synthetic".into(),
            pretrain_source: "cmc".into(),
            views: "bands".into(),
            n_pretrain: 100,
            protocol: "probe".into(),
            metric: "accuracy".into(),
            value: 0.5,
            seed: 1,
        };
        append_ledger(&path, std::slice::from_ref(&row)).unwrap();
        append_ledger(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], LEDGER_HEADER);
        assert_eq!(lines[1], lines[2]);
    }

    fn tiny_setup(dir: &Path) -> (ChipDataset, ViewSpec, CmcModel<f32>) {
        let cfg = SynthConfig { n: 24, num_classes: 3, height: 8, width: 8, ..Default::default() };
        let (meta, chips, labels) =
            generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let splits = make_splits(24, 0.667, 0.0, 0).unwrap();
        let ds = ChipDataset::create(dir, meta, &chips, &labels, splits).unwrap();
        let spec = ViewSpec::fixed_bands(
            &ds.meta.band_names.clone(),
            vec![1.0; 10],
            vec![0.5; 10],
        )
        .unwrap();
        use crate::nn::EncoderConfig;
        let enc = |c| EncoderConfig {
            stage_widths: vec![4, 8],
            embedding_dim: 8,
            ..EncoderConfig::new(c)
        };
        let model =
            CmcModel::new(enc(5), enc(5), 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (ds, spec, model)
    }

    fn probe_cfg(epochs: usize) -> ProbeConfig {
        ProbeConfig { epochs, batch_size: 8, chip_size: 8, ..Default::default() }
    }

    #[test]
    fn probe_is_deterministic_and_leaves_encoder_alone() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, spec, mut model) = tiny_setup(dir.path());
        let before = param_checksum(&mut model);
        let a = run_linear_probe(&mut model, &ds, &spec, &probe_cfg(3)).unwrap();
        assert_eq!(param_checksum(&mut model), before);
        let b = run_linear_probe(&mut model, &ds, &spec, &probe_cfg(3)).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.metric, "accuracy");
        assert!((0.0..=1.0).contains(&a.value));
        assert_eq!(a.train_losses.len(), 3);
    }

    #[test]
    fn probe_solves_linearly_separable_features() {
        // bypass the encoder: train the head machinery on one-hot features
        let dir = tempfile::tempdir().unwrap();
        let (ds, _, _) = tiny_setup(dir.path());
        let n = ds.len();
        let c = ds.meta.num_classes;
        let mut flat = vec![0f32; n * c];
        for i in 0..n {
            let Label::Single(cl) = ds.label(i) else { panic!() };
            flat[i * c + cl] = 1.0;
        }
        let feats = Tensor::new(vec![n, c], flat).unwrap();
        let mut head = ClassifierHead::new(c, c, TaskMode::SingleLabel, &mut ChaCha8Rng::seed_from_u64(0));
        let mut opt = Optimizer::<f32>::new(OptimizerConfig::adam(0.05, 0.0)).unwrap();
        for _ in 0..200 {
            let idx: Vec<usize> = (0..n).collect();
            let targets = targets_for(&ds, &idx).unwrap();
            let mut g = Graph::<f32>::new();
            let x = g.input(feats.clone(), false).unwrap();
            let loss = head.forward_loss(&mut g, x, &targets, true).unwrap();
            g.backward(loss).unwrap();
            let mut params = head.named_params();
            {
                let mut refs: Vec<_> = params.iter_mut().map(|(_, p)| &mut **p).collect();
                collect_grads(&g, &mut refs);
            }
            opt.step(&mut params, 0.05).unwrap();
            for (_, p) in params.iter_mut() {
                p.zero_grad();
            }
        }
        let idx: Vec<usize> = (0..n).collect();
        let (_, acc) = head_metric(&head, &feats, &ds, &idx).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn finetune_zero_epochs_is_pure_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, spec, mut model) = tiny_setup(dir.path());
        let before = param_checksum(&mut model);
        let cfg = FinetuneConfig { epochs: 0, batch_size: 8, chip_size: 8, ..Default::default() };
        let out = run_finetune(&mut model, &ds, &spec, &cfg).unwrap();
        assert_eq!(param_checksum(&mut model), before);
        assert!(out.train_losses.is_empty());
        assert!((0.0..=1.0).contains(&out.value));
    }

    #[test]
    fn finetune_trains_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, spec, mut model) = tiny_setup(dir.path());
        let cfg = FinetuneConfig {
            epochs: 2,
            batch_size: 8,
            chip_size: 8,
            optimizer: OptimizerConfig::adam(1e-3, 1e-4),
            ..Default::default()
        };
        let before = param_checksum(&mut model);
        let out = run_finetune(&mut model, &ds, &spec, &cfg).unwrap();
        assert_ne!(param_checksum(&mut model), before);
        assert_eq!(out.train_losses.len(), 2);
        assert!(out.train_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn probe_presets_match_protocol() {
        let d = ProbeConfig::default();
        assert_eq!((d.epochs, d.batch_size), (50, 256));
        assert_eq!(d.optimizer.lr, 1e-3);
        assert_eq!(d.schedule.lr_at(1.0, 49), 1.0 / 625.0);
        let m = ProbeConfig::preset("mlrsnet").unwrap();
        assert_eq!((m.optimizer.lr, m.optimizer.weight_decay), (1e-2, 1e-2));
        let a = ProbeConfig::preset("aid").unwrap();
        assert_eq!((a.optimizer.lr, a.optimizer.weight_decay), (1e-3, 1e-2));
        assert!(ProbeConfig::preset("nope").is_err());
        let f = FinetuneConfig::default();
        assert_eq!((f.epochs, f.batch_size), (100, 100));
        assert_eq!((f.optimizer.lr, f.optimizer.weight_decay), (1e-4, 1e-4));
    }
}
