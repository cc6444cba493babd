use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use super::config::{OptimizerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Polynomial decay `base_lr * (1 - iter/K)^power`, clamped to 0 past `K`.
pub fn poly_lr(iter: u64, base_lr: f64, schedule: &ScheduleConfig) -> f64 {
    let k = schedule.total_iters;
    if k == 0 || iter >= k {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / k as f64).powf(schedule.poly_power)
}

struct Slot {
    name: String,
    var: Var,
    decay: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Flattened values of any float tensor, widened to f64.
fn values(t: &Tensor) -> Result<Vec<f64>> {
    let flat = t.flatten_all()?;
    Ok(match flat.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?,
        DType::F32 => flat.to_vec1::<f32>()?.into_iter().map(f64::from).collect(),
        _ => flat.to_dtype(DType::F64)?.to_vec1::<f64>()?,
    })
}

trait Float: Copy {
    fn widen(self) -> f64;
    fn narrow(x: f64) -> Self;
}

impl Float for f32 {
    fn widen(self) -> f64 {
        self as f64
    }
    fn narrow(x: f64) -> Self {
        x as f32
    }
}

impl Float for f64 {
    fn widen(self) -> f64 {
        self
    }
    fn narrow(x: f64) -> Self {
        x
    }
}

struct Hyper {
    b1: f64,
    b2: f64,
    eps: f64,
    shrink: f64,
    step: f64,
    root_c2: f64,
}

impl Hyper {
    fn apply<T: Float>(&self, mut p: Vec<T>, g: &[T], m: &mut [f64], v: &mut [f64]) -> Vec<T> {
        for ((p, g), (m, v)) in p.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
            let g = g.widen();
            *m = self.b1 * *m + (1.0 - self.b1) * g;
            *v = self.b2 * *v + (1.0 - self.b2) * g * g;
            *p = T::narrow(p.widen() * self.shrink - self.step * *m / (v.sqrt() / self.root_c2 + self.eps));
        }
        p
    }
}

/// AdamW with decoupled weight decay over one parameter group.
///
/// Moments are kept in f64 whatever the parameter dtype. Parameters that receive no
/// gradient in a step are left untouched, state included.
pub struct AdamW {
    cfg: OptimizerConfig,
    slots: Vec<Slot>,
}

impl AdamW {
    /// Collects the trainable parameters of every store. Names must be unique across stores.
    pub fn new(stores: &[&ParamStore], cfg: &OptimizerConfig) -> Result<Self> {
        let mut slots: Vec<Slot> = Vec::new();
        for store in stores {
            for (name, p) in store.trainable() {
                if slots.iter().any(|s| &s.name == name) {
                    return Err(Error::Contract(format!("parameter `{name}` appears in two stores")));
                }
                let n = p.var.elem_count();
                slots.push(Slot {
                    name: name.clone(),
                    var: p.var.clone(),
                    decay: p.decay,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    steps: 0,
                });
            }
        }
        Ok(Self { cfg: cfg.clone(), slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let [b1, b2] = self.cfg.betas;
        let eps = self.cfg.eps;
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            slot.steps += 1;
            let t = slot.steps as i32;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let shrink = if slot.decay { 1.0 - lr * self.cfg.weight_decay } else { 1.0 };
            let h = Hyper {
                b1,
                b2,
                eps,
                shrink,
                step: lr / c1,
                root_c2: c2.sqrt(),
            };
            let var = slot.var.as_tensor();
            let (g, p) = (g.flatten_all()?, var.flatten_all()?);
            let updated = match var.dtype() {
                DType::F32 => {
                    let p = h.apply(p.to_vec1::<f32>()?, &g.to_vec1::<f32>()?, &mut slot.m, &mut slot.v);
                    Tensor::from_vec(p, var.shape(), var.device())?
                }
                DType::F64 => {
                    let p = h.apply(p.to_vec1::<f64>()?, &g.to_vec1::<f64>()?, &mut slot.m, &mut slot.v);
                    Tensor::from_vec(p, var.shape(), var.device())?
                }
                other => return Err(Error::Contract(format!("AdamW does not support {other:?} parameters"))),
            };
            slot.var.set(&updated)?;
        }
        Ok(())
    }

    /// Moment estimates keyed `m.<name>` / `v.<name>`, plus `steps.<name>` counters, all f64.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            let (shape, dev) = (s.var.shape(), s.var.device());
            out.insert(format!("m.{}", s.name), Tensor::from_vec(s.m.clone(), shape, dev)?);
            out.insert(format!("v.{}", s.name), Tensor::from_vec(s.v.clone(), shape, dev)?);
            out.insert(format!("steps.{}", s.name), Tensor::new(&[s.steps as f64], dev)?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for s in &mut self.slots {
            let get = |k: String| {
                state
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry `{k}`")))
            };
            let m = get(format!("m.{}", s.name))?;
            let v = get(format!("v.{}", s.name))?;
            if m.dims() != s.var.dims() || v.dims() != s.var.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for `{}` has the wrong shape", s.name)));
            }
            let steps = values(&get(format!("steps.{}", s.name))?)?;
            s.m = values(&m)?;
            s.v = values(&v)?;
            s.steps = steps.first().copied().unwrap_or(0.0) as u64;
        }
        Ok(())
    }
}

/// L2 norm of the gradients of every parameter in `store` that received one.
pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if let Some(g) = grads.get(p.var.as_tensor()) {
            sq += values(g)?.iter().map(|x| x * x).sum::<f64>();
        }
    }
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poly_schedule_endpoints() {
        let s = ScheduleConfig {
            total_iters: 2000,
            poly_power: 1.0,
        };
        assert_eq!(poly_lr(0, 6e-5, &s), 6e-5);
        assert!((poly_lr(1000, 6e-5, &s) - 3e-5).abs() < 1e-18);
        assert_eq!(poly_lr(2000, 6e-5, &s), 0.0);
        assert_eq!(poly_lr(5000, 6e-5, &s), 0.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g) (up to eps).
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = store.builder(&mut rng).constant("w", &[3], 1.0, false).unwrap();
        let loss = (&w * &Tensor::new(&[2.0f64, -3.0, 0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(&[&store], &OptimizerConfig::default()).unwrap();
        opt.step(&grads, 0.1).unwrap();
        let after = store.get("w").unwrap().var.as_tensor().to_vec1::<f64>().unwrap();
        for (a, e) in after.iter().zip([0.9, 1.1, 0.9]) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn decay_only_touches_flagged_params() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = {
            let mut bld = store.builder(&mut rng);
            (
                bld.constant("a", &[1], 1.0, true).unwrap(),
                bld.constant("b", &[1], 1.0, false).unwrap(),
            )
        };
        // Zero gradient: only the decoupled decay can move a parameter.
        let loss = ((&a - &a).unwrap() + (&b - &b).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(&[&store], &cfg).unwrap();
        opt.step(&grads, 0.1).unwrap();
        let get = |n: &str| store.get(n).unwrap().var.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((get("a") - 0.95).abs() < 1e-12);
        assert_eq!(get("b"), 1.0);
    }
}
