//! SGD with momentum and Adam, plus the multi-step learning-rate schedule.
//! Weight decay is coupled (added to the gradient) for both optimizers and
//! applies to every parameter.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    /// The pretraining recipe: SGD, lr 0.03, momentum 0.9, weight decay 1e-4.
    pub fn pretrain_sgd() -> Self {
        OptimizerConfig {
            kind: OptKind::Sgd,
            lr: 0.03,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptKind::Adam,
            lr,
            momentum: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer config {:?}", self)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiStepSchedule {
    /// 1-indexed epochs after which the reduction takes effect.
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MultiStepSchedule {
    pub fn new(milestones: Vec<usize>, factor: f64) -> Result<Self> {
        if factor <= 1.0 || milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("schedule needs factor > 1 and strictly increasing milestones".into()));
        }
        Ok(MultiStepSchedule { milestones, factor })
    }

    /// lr for a 0-indexed epoch. "Reduced after the Nth epoch" means the
    /// drop is first seen at 0-indexed epoch N.
    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        base_lr / self.factor.powi(drops as i32)
    }
}

struct ParamState<T> {
    momentum_buf: Option<Vec<T>>,
    adam_m: Option<Vec<T>>,
    adam_v: Option<Vec<T>>,
    step: u64,
}

impl<T: Scalar> ParamState<T> {
    fn new() -> Self {
        ParamState { momentum_buf: None, adam_m: None, adam_v: None, step: 0 }
    }
}

pub struct Optimizer<T> {
    pub cfg: OptimizerConfig,
    state: HashMap<String, ParamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, state: HashMap::new() })
    }

    /// Apply one update to every named parameter using its accumulated
    /// gradient. `lr` is the already-scheduled learning rate.
    pub fn step(&mut self, params: &mut [(String, &mut Param<T>)], lr: f64) -> Result<()> {
        let lr = T::from_f64(lr);
        let wd = T::from_f64(self.cfg.weight_decay);
        match self.cfg.kind {
            OptKind::Sgd => {
                let mom = T::from_f64(self.cfg.momentum);
                for (name, p) in params.iter_mut() {
                    let st = self.state.entry(name.clone()).or_insert_with(ParamState::new);
                    let buf = st
                        .momentum_buf
                        .get_or_insert_with(|| vec![T::zero(); p.value.numel()]);
                    for ((w, &g), b) in
                        p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.iter_mut())
                    {
                        let g = g + wd * *w;
                        *b = mom * *b + g;
                        *w = *w - lr * *b;
                        if !w.is_finite() {
                            return Err(Error::NonFinite("sgd_step"));
                        }
                    }
                }
            }
            OptKind::Adam => {
                let (b1, b2) = (T::from_f64(self.cfg.betas.0), T::from_f64(self.cfg.betas.1));
                let eps = T::from_f64(self.cfg.eps);
                for (name, p) in params.iter_mut() {
                    let st = self.state.entry(name.clone()).or_insert_with(ParamState::new);
                    st.step += 1;
                    let bc1 = T::one() - T::from_f64(self.cfg.betas.0.powi(st.step as i32));
                    let bc2 = T::one() - T::from_f64(self.cfg.betas.1.powi(st.step as i32));
                    let n = p.value.numel();
                    let m = st.adam_m.get_or_insert_with(|| vec![T::zero(); n]);
                    let v = st.adam_v.get_or_insert_with(|| vec![T::zero(); n]);
                    for (((w, &g), me), ve) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let g = g + wd * *w;
                        *me = b1 * *me + (T::one() - b1) * g;
                        *ve = b2 * *ve + (T::one() - b2) * g * g;
                        let mhat = *me / bc1;
                        let vhat = *ve / bc2;
                        *w = *w - lr * mhat / (vhat.sqrt() + eps);
                        if !w.is_finite() {
                            return Err(Error::NonFinite("adam_step"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Serialize momentum/moment buffers for exact resumption.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index: Vec<(String, u64)> = Vec::new();
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        for name in names {
            let st = &self.state[name];
            index.push((name.clone(), st.step));
            for (tag, buf) in [
                ("momentum", &st.momentum_buf),
                ("adam_m", &st.adam_m),
                ("adam_v", &st.adam_v),
            ] {
                if let Some(b) = buf {
                    let t = Tensor::new(vec![b.len()], b.clone())?;
                    t.save(&dir.join(format!("{name}.{tag}.bin")))?;
                }
            }
        }
        let ipath = dir.join("optimizer.json");
        let json = serde_json::to_string_pretty(&index)
            .map_err(|e| Error::Json { path: ipath.clone(), source: e })?;
        std::fs::write(&ipath, json).map_err(|e| Error::io(&ipath, e))?;
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let ipath = dir.join("optimizer.json");
        let json = std::fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let index: Vec<(String, u64)> = serde_json::from_str(&json)
            .map_err(|e| Error::Json { path: ipath.clone(), source: e })?;
        self.state.clear();
        for (name, step) in index {
            let mut st = ParamState::new();
            st.step = step;
            for (tag, slot) in [
                ("momentum", &mut st.momentum_buf),
                ("adam_m", &mut st.adam_m),
                ("adam_v", &mut st.adam_v),
            ] {
                let path = dir.join(format!("{name}.{tag}.bin"));
                if path.exists() {
                    *slot = Some(Tensor::<T>::load(&path)?.into_data());
                }
            }
            self.state.insert(name, st);
        }
        Ok(())
    }
}
