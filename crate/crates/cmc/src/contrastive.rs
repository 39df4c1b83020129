//! Contrastive objective over two views with memory-bank negatives.
//!
//! Each view keeps a bank of per-chip embeddings on the unit sphere. A
//! training pair contrasts the anchor's projection against the positive
//! from the other view plus k bank rows drawn from other chips, with
//! temperature-scaled cosine similarity.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Negatives per anchor.
    pub k: usize,
    /// Softmax temperature.
    pub tau: f64,
    /// When set, both view directions contribute to the loss.
    pub symmetric: bool,
    /// Bank momentum: row <- normalize(m * row + (1 - m) * h).
    pub bank_momentum: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { k: 4096, tau: 0.07, symmetric: true, bank_momentum: 0.5 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return Err(Error::Config("bank momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Loss value for a batch where every candidate scores identically; the
/// softmax is uniform over k + 1 items, so this is the natural "no signal"
/// ceiling to compare training losses against.
pub fn uniform_loss(k: usize) -> f64 {
    ((k + 1) as f64).ln()
}

/// s(a, b) = exp(cos(a, b) / tau) for unit-norm inputs.
pub fn similarity<T: Scalar>(a: &[T], b: &[T], tau: T) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    (dot / tau).exp()
}

/// Per-chip embedding store for one view. Rows stay unit-norm.
#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    rows: Tensor<T>,
    momentum: T,
}

impl<T: Scalar> MemoryBank<T> {
    /// Random unit-vector initialization.
    pub fn new(n: usize, d: usize, momentum: f64, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Shape("memory bank needs n >= 1, d >= 1".into()));
        }
        let mut data = vec![T::zero(); n * d];
        for row in data.chunks_exact_mut(d) {
            loop {
                let mut sq = 0.0f64;
                for v in row.iter_mut() {
                    // Box-Muller pair member; isotropic direction after normalizing
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *v = T::from_f64(g);
                    sq += g * g;
                }
                if sq > 1e-12 {
                    let inv = T::from_f64(1.0 / sq.sqrt());
                    for v in row.iter_mut() {
                        *v = *v * inv;
                    }
                    break;
                }
            }
        }
        Ok(MemoryBank { rows: Tensor::new(vec![n, d], data)?, momentum: T::from_f64(momentum) })
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.rows.data()[i * d..(i + 1) * d]
    }

    /// Draw k negatives uniformly from all rows except `exclude`, with
    /// replacement. k is clamped to n - 1 when the bank is small.
    pub fn sample_negatives(&self, exclude: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.len();
        let k = k.min(n - 1);
        (0..k)
            .map(|_| {
                let i = rng.gen_range(0..n - 1);
                if i >= exclude {
                    i + 1
                } else {
                    i
                }
            })
            .collect()
    }

    /// Momentum update of the given rows with fresh embeddings h [B, D],
    /// renormalized to the unit sphere.
    pub fn update(&mut self, indices: &[usize], h: &Tensor<T>) -> Result<()> {
        let d = self.dim();
        if h.shape() != [indices.len(), d] {
            return Err(Error::Shape(format!(
                "bank update expects [{}, {}], got {:?}",
                indices.len(),
                d,
                h.shape()
            )));
        }
        let n = self.len();
        let m = self.momentum;
        let one_m = T::one() - m;
        let hv = h.data();
        for (b, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::Shape(format!("bank row {} out of {}", i, n)));
            }
            let row = &mut self.rows.data_mut()[i * d..(i + 1) * d];
            let mut sq = T::zero();
            for (rv, &nv) in row.iter_mut().zip(&hv[b * d..(b + 1) * d]) {
                *rv = m * *rv + one_m * nv;
                sq = sq + *rv * *rv;
            }
            let nrm = sq.sqrt();
            if nrm < T::from_f64(1e-12) {
                return Err(Error::Degenerate(format!("bank row {} collapsed to zero", i)));
            }
            for rv in row.iter_mut() {
                *rv = *rv / nrm;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.rows.save(path)
    }

    pub fn load(path: &Path, momentum: f64) -> Result<Self> {
        let rows = Tensor::load(path)?;
        if rows.shape().len() != 2 {
            return Err(Error::format(path, "memory bank must be 2-d"));
        }
        Ok(MemoryBank { rows, momentum: T::from_f64(momentum) })
    }
}

/// One direction of the objective: anchors from one view against positives
/// and bank negatives from the other. `neg_indices` is [B * k] row indices
/// into `bank`.
pub fn one_sided_loss<T: Scalar>(
    g: &mut Graph<T>,
    anchor: NodeId,
    positive: NodeId,
    bank: &MemoryBank<T>,
    neg_indices: Vec<usize>,
    tau: T,
) -> Result<NodeId> {
    g.contrastive_loss(anchor, positive, bank.rows().clone(), neg_indices, tau)
}

/// Full two-view objective. With `symmetric` set this is the sum of both
/// directions; otherwise only view1 anchors contribute.
#[allow(clippy::too_many_arguments)]
pub fn symmetric_loss<T: Scalar>(
    g: &mut Graph<T>,
    h1: NodeId,
    h2: NodeId,
    bank1: &MemoryBank<T>,
    bank2: &MemoryBank<T>,
    neg1: Vec<usize>,
    neg2: Vec<usize>,
    cfg: &ContrastiveConfig,
) -> Result<NodeId> {
    let tau = T::from_f64(cfg.tau);
    let l12 = one_sided_loss(g, h1, h2, bank2, neg2, tau)?;
    if !cfg.symmetric {
        return Ok(l12);
    }
    let l21 = one_sided_loss(g, h2, h1, bank1, neg1, tau)?;
    g.add(l12, l21)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{finite_diff, max_rel_err};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn bank_from_rows(rows: Vec<Vec<f64>>, m: f64) -> MemoryBank<f64> {
        let d = rows[0].len();
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        MemoryBank { rows: Tensor::new(vec![n, d], data).unwrap(), momentum: m }
    }

    fn loss_value(
        anchor: Vec<f64>,
        positive: Vec<f64>,
        bank: &MemoryBank<f64>,
        negs: Vec<usize>,
        tau: f64,
    ) -> f64 {
        let d = anchor.len();
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::new(vec![1, d], anchor).unwrap(), false).unwrap();
        let p = g.input(Tensor::new(vec![1, d], positive).unwrap(), false).unwrap();
        let l = one_sided_loss(&mut g, a, p, bank, negs, tau).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn all_equal_scores_give_uniform_loss() {
        // anchor, positive and every negative coincide -> softmax is uniform
        let v = unit(vec![1.0, 2.0, -0.5]);
        for k in [1usize, 7, 4096] {
            let bank = bank_from_rows(vec![v.clone(); 2], 0.5);
            let negs = vec![0usize; k];
            let loss = loss_value(v.clone(), v.clone(), &bank, negs, 0.07);
            assert_relative_eq!(loss, uniform_loss(k), max_relative = 1e-10);
        }
    }

    #[test]
    fn two_candidate_closed_form() {
        // positive logit 1, negative logit 0 at tau = 1:
        // loss = -log(e / (e + 1)) = ln(1 + e^{-1})
        let a = vec![1.0, 0.0];
        let bank = bank_from_rows(vec![vec![0.0, 1.0]; 2], 0.5);
        let loss = loss_value(a.clone(), a.clone(), &bank, vec![1], 1.0);
        assert_relative_eq!(loss, (1.0 + (-1.0f64).exp()).ln(), max_relative = 1e-12);
    }

    #[test]
    fn loss_decreases_as_pair_aligns() {
        let bank = bank_from_rows(vec![unit(vec![0.3, -0.9, 0.1]); 4], 0.5);
        let a = unit(vec![1.0, 0.2, 0.0]);
        let mut prev = f64::INFINITY;
        for t in [1.2f64, 0.8, 0.4, 0.1] {
            // positive rotated toward the anchor as t shrinks
            let p = unit(vec![t.cos() * 1.0 + 0.2 * t.sin(), 0.2 * t.cos() - t.sin(), 0.0]);
            let loss = loss_value(a.clone(), p, &bank, vec![0, 1, 2], 0.07);
            assert!(loss < prev, "loss {loss} did not drop below {prev} at t={t}");
            prev = loss;
        }
    }

    #[test]
    fn four_item_oracle() {
        // direct exp-sum evaluation, no shared code with the graph op
        let tau = 0.2;
        let a = unit(vec![0.6, 0.8]);
        let p = unit(vec![1.0, -0.1]);
        let n1 = unit(vec![-0.4, 0.9]);
        let n2 = unit(vec![0.0, -1.0]);
        let n3 = unit(vec![0.7, 0.7]);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let sp = (dot(&a, &p) / tau).exp();
        let sn: f64 = [&n1, &n2, &n3].iter().map(|n| (dot(&a, n) / tau).exp()).sum();
        let expected = -(sp / (sp + sn)).ln();
        let bank = bank_from_rows(vec![n1, n2, n3], 0.5);
        let got = loss_value(a, p, &bank, vec![0, 1, 2], tau);
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn negative_order_is_irrelevant() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| unit(vec![(i as f64).sin(), (i as f64).cos(), 0.3]))
            .collect();
        let bank = bank_from_rows(rows, 0.5);
        let a = unit(vec![0.2, -1.0, 0.5]);
        let p = unit(vec![0.9, 0.1, 0.1]);
        let l1 = loss_value(a.clone(), p.clone(), &bank, vec![0, 2, 4, 5], 0.07);
        let l2 = loss_value(a, p, &bank, vec![5, 0, 4, 2], 0.07);
        assert_relative_eq!(l1, l2, max_relative = 1e-12);
    }

    #[test]
    fn symmetric_objective_is_swap_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank1 = MemoryBank::<f64>::new(16, 8, 0.5, &mut rng).unwrap();
        let bank2 = MemoryBank::<f64>::new(16, 8, 0.5, &mut rng).unwrap();
        let h1: Vec<f64> = unit((0..8).map(|i| (i as f64 * 0.7).sin()).collect());
        let h2: Vec<f64> = unit((0..8).map(|i| (i as f64 * 0.3).cos()).collect());
        let cfg = ContrastiveConfig { k: 5, tau: 0.07, symmetric: true, bank_momentum: 0.5 };
        let negs1 = vec![1, 3, 5, 7, 9];
        let negs2 = vec![0, 2, 4, 6, 8];
        let eval = |a: &[f64], b: &[f64], ba: &MemoryBank<f64>, bb: &MemoryBank<f64>, na: &[usize], nb: &[usize]| {
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::new(vec![1, 8], a.to_vec()).unwrap(), false).unwrap();
            let y = g.input(Tensor::new(vec![1, 8], b.to_vec()).unwrap(), false).unwrap();
            let l = symmetric_loss(&mut g, x, y, ba, bb, na.to_vec(), nb.to_vec(), &cfg).unwrap();
            g.value(l).item().unwrap()
        };
        let fwd = eval(&h1, &h2, &bank1, &bank2, &negs1, &negs2);
        let swapped = eval(&h2, &h1, &bank2, &bank1, &negs2, &negs1);
        assert_relative_eq!(fwd, swapped, max_relative = 1e-12);
    }

    #[test]
    fn one_sided_config_drops_second_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank1 = MemoryBank::<f64>::new(8, 4, 0.5, &mut rng).unwrap();
        let bank2 = MemoryBank::<f64>::new(8, 4, 0.5, &mut rng).unwrap();
        let h1 = unit(vec![1.0, 0.5, 0.0, -0.2]);
        let h2 = unit(vec![0.1, 0.9, 0.3, 0.0]);
        let run = |symmetric: bool| {
            let cfg = ContrastiveConfig { k: 3, tau: 0.07, symmetric, bank_momentum: 0.5 };
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::new(vec![1, 4], h1.clone()).unwrap(), false).unwrap();
            let y = g.input(Tensor::new(vec![1, 4], h2.clone()).unwrap(), false).unwrap();
            let l =
                symmetric_loss(&mut g, x, y, &bank1, &bank2, vec![0, 1, 2], vec![3, 4, 5], &cfg)
                    .unwrap();
            g.value(l).item().unwrap()
        };
        let one = run(false);
        let both = run(true);
        assert!(one < both);
        let second = loss_value(h2.clone(), h1.clone(), &bank1, vec![0, 1, 2], 0.07);
        assert_relative_eq!(both, one + second, max_relative = 1e-10);
    }

    #[test]
    fn similarity_matches_definition() {
        let a = unit(vec![3.0, 4.0]);
        let b = unit(vec![4.0, 3.0]);
        // cos = 24/25
        assert_relative_eq!(similarity(&a, &b, 0.07), (24.0_f64 / 25.0 / 0.07).exp(), max_relative = 1e-12);
        assert_relative_eq!(similarity(&a, &a, 0.07), (1.0 / 0.07f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn bank_rows_start_unit_norm_and_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let b1 = MemoryBank::<f32>::new(50, 16, 0.5, &mut r1).unwrap();
        let b2 = MemoryBank::<f32>::new(50, 16, 0.5, &mut r2).unwrap();
        assert_eq!(b1.rows().data(), b2.rows().data());
        for i in 0..b1.len() {
            let n: f32 = b1.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert_relative_eq!(n, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn negatives_exclude_anchor_and_cover_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = MemoryBank::<f32>::new(10, 4, 0.5, &mut rng).unwrap();
        let exclude = 4;
        let mut counts = [0usize; 10];
        let draws = 90_000;
        for _ in 0..draws / 9 {
            for i in bank.sample_negatives(exclude, 9, &mut rng) {
                assert_ne!(i, exclude);
                counts[i] += 1;
            }
        }
        assert_eq!(counts[exclude], 0);
        // chi-square over the 9 admissible rows, 8 dof; 26.12 is p ~ 0.001
        let expected = draws as f64 / 9.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != exclude)
            .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 26.12, "chi2 = {chi2}");
    }

    #[test]
    fn small_bank_clamps_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = MemoryBank::<f32>::new(3, 4, 0.5, &mut rng).unwrap();
        assert_eq!(bank.sample_negatives(0, 100, &mut rng).len(), 2);
    }

    #[test]
    fn bank_update_momentum_extremes() {
        let h = Tensor::new(vec![1, 2], vec![0.0f64, 1.0]).unwrap();

        let mut replace = bank_from_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0]], 0.0);
        replace.update(&[0], &h).unwrap();
        assert_eq!(replace.row(0), &[0.0, 1.0]);
        assert_eq!(replace.row(1), &[1.0, 0.0]);

        let mut frozen = bank_from_rows(vec![vec![1.0, 0.0]], 1.0);
        frozen.update(&[0], &h).unwrap();
        assert_eq!(frozen.row(0), &[1.0, 0.0]);

        // m = 0.5: midpoint of two orthogonal unit vectors renormalized
        let mut half = bank_from_rows(vec![vec![1.0, 0.0]], 0.5);
        half.update(&[0], &h).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(half.row(0)[0], s, max_relative = 1e-12);
        assert_relative_eq!(half.row(0)[1], s, max_relative = 1e-12);
    }

    #[test]
    fn bank_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bank = MemoryBank::<f32>::new(12, 6, 0.5, &mut rng).unwrap();
        let h = Tensor::new(vec![2, 6], vec![0.5f32; 12]).unwrap();
        bank.update(&[3, 7], &h).unwrap();
        let path = dir.path().join("bank.bin");
        bank.save(&path).unwrap();
        let back = MemoryBank::<f32>::load(&path, 0.5).unwrap();
        assert_eq!(bank.rows().data(), back.rows().data());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bank = MemoryBank::<f64>::new(9, 5, 0.5, &mut rng).unwrap();
        // raw (non-unit) inputs pass through l2_normalize inside the graph so
        // the perturbed points stay feasible
        let raw_a: Vec<f64> = (0..5).map(|i| 0.4 + 0.3 * (i as f64).sin()).collect();
        let raw_p: Vec<f64> = (0..5).map(|i| -0.2 + 0.5 * (i as f64).cos()).collect();
        let negs = vec![1usize, 4, 6, 8];
        let f = |a: &[f64], p: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut g = Graph::<f64>::new();
            let an = g.input(Tensor::new(vec![1, 5], a.to_vec()).unwrap(), true).unwrap();
            let pn = g.input(Tensor::new(vec![1, 5], p.to_vec()).unwrap(), true).unwrap();
            let au = g.l2_normalize(an, 1).unwrap();
            let pu = g.l2_normalize(pn, 1).unwrap();
            let l = one_sided_loss(&mut g, au, pu, &bank, negs.clone(), 0.2).unwrap();
            g.backward(l).unwrap();
            (
                g.value(l).item().unwrap(),
                g.grad(an).unwrap().data().to_vec(),
                g.grad(pn).unwrap().data().to_vec(),
            )
        };
        let (_, ga, gp) = f(&raw_a, &raw_p);
        let fd_a = finite_diff(&mut |a| f(a, &raw_p).0, &raw_a, 1e-6);
        let fd_p = finite_diff(&mut |p| f(&raw_a, p).0, &raw_p, 1e-6);
        assert!(max_rel_err(&ga, &fd_a) < 1e-5, "anchor: {ga:?} vs {fd_a:?}");
        assert!(max_rel_err(&gp, &fd_p) < 1e-5, "positive: {gp:?} vs {fd_p:?}");
    }

    #[test]
    fn toy_descent_beats_uniform() {
        // 8 chips, two 6-d "views" as free parameters; 200 SGD steps on the
        // symmetric objective should pull each pair together and push the
        // loss well under the uniform ceiling.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 8;
        let d = 6;
        let k = 5;
        let cfg = ContrastiveConfig { k, tau: 0.2, symmetric: true, bank_momentum: 0.5 };
        let mut p1: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut p2: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut bank1 = MemoryBank::<f64>::new(n, d, cfg.bank_momentum, &mut rng).unwrap();
        let mut bank2 = MemoryBank::<f64>::new(n, d, cfg.bank_momentum, &mut rng).unwrap();
        let mut first = None;
        let mut last = 0.0;
        for step in 0..200 {
            let i = step % n;
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::new(vec![1, d], p1[i].clone()).unwrap(), true).unwrap();
            let y = g.input(Tensor::new(vec![1, d], p2[i].clone()).unwrap(), true).unwrap();
            let xu = g.l2_normalize(x, 1).unwrap();
            let yu = g.l2_normalize(y, 1).unwrap();
            let negs1 = bank1.sample_negatives(i, k, &mut rng);
            let negs2 = bank2.sample_negatives(i, k, &mut rng);
            let l = symmetric_loss(&mut g, xu, yu, &bank1, &bank2, negs1, negs2, &cfg).unwrap();
            g.backward(l).unwrap();
            last = g.value(l).item().unwrap();
            first.get_or_insert(last);
            let lr = 1.0;
            for (pv, gv) in p1[i].iter_mut().zip(g.grad(x).unwrap().data()) {
                *pv -= lr * gv;
            }
            for (pv, gv) in p2[i].iter_mut().zip(g.grad(y).unwrap().data()) {
                *pv -= lr * gv;
            }
            let h1 = Tensor::new(vec![1, d], unit(p1[i].clone())).unwrap();
            let h2 = Tensor::new(vec![1, d], unit(p2[i].clone())).unwrap();
            bank1.update(&[i], &h1).unwrap();
            bank2.update(&[i], &h2).unwrap();
        }
        let ceiling = 2.0 * uniform_loss(k);
        assert!(last < 0.5 * ceiling, "final loss {last} vs ceiling {ceiling}");
        assert!(last < first.unwrap(), "no improvement: {last} vs {:?}", first);
    }
}
