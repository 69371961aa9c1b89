use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// ADAM with a per-epoch exponential learning-rate schedule that reaches
/// one tenth of the base rate after `total_epochs`.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative per-epoch factor, `0.1^(1/total_epochs)`.
    pub decay: f64,
    total_epochs: usize,
    epochs_done: usize,
    step: u64,
    moments: Vec<Moment>,
}

#[derive(Debug, Clone)]
struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, base_lr: f64, total_epochs: usize) -> Result<Self> {
        if !(base_lr > 0.0) || total_epochs == 0 {
            return Err(Error::Config("base_lr must be > 0 and epochs >= 1".into()));
        }
        Ok(Self {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.1f64.powf(1.0 / total_epochs as f64),
            total_epochs,
            epochs_done: 0,
            step: 0,
            moments: params
                .iter()
                .map(|(_, t)| Moment {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                    t: 0,
                })
                .collect(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * 0.1f64.powf(self.epochs_done as f64 / self.total_epochs as f64)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Applies the per-epoch decay.
    pub fn end_epoch(&mut self) {
        self.epochs_done += 1;
    }

    /// One update. Parameters whose gradient is `None` are left untouched,
    /// moments included.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.moments.len() != params.len() {
            return Err(Error::invalid("gradient list does not match parameter set"));
        }
        let lr = self.lr();
        self.step += 1;
        for ((p, g), mom) in params.tensors_mut().zip(grads).zip(&mut self.moments) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::invalid("gradient shape differs from parameter"));
            }
            mom.t += 1;
            let bc1 = 1.0 - self.beta1.powi(mom.t as i32);
            let bc2 = 1.0 - self.beta2.powi(mom.t as i32);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(&mut mom.m)
                .zip(&mut mom.v)
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![v])).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one(3.0);
        let mut s = AdamState::new(&p, 1e-4, 10).unwrap();
        for _ in 0..5 {
            s.step(&mut p, &[Some(Tensor::vector(vec![0.0]))]).unwrap();
            s.step(&mut p, &[None]).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data()[0], 3.0);
    }

    #[test]
    fn decay_reaches_one_tenth() {
        let p = one(0.0);
        let mut s = AdamState::new(&p, 1e-4, 10).unwrap();
        assert_eq!(s.lr(), 1e-4);
        for _ in 0..10 {
            s.end_epoch();
        }
        assert!((s.lr() - 1e-5).abs() < 1e-12);
        let mut s = AdamState::new(&p, 1e-4, 7).unwrap();
        let mut compounded = s.base_lr;
        for _ in 0..7 {
            s.end_epoch();
            compounded *= s.decay;
        }
        assert!((s.lr() - 1e-5).abs() < 1e-12);
        assert!((compounded - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn minimizes_scalar_quadratic() {
        let mut p = one(2.0);
        let mut s = AdamState::new(&p, 1e-2, 1).unwrap();
        let mut steps = 0;
        while p.get("x").unwrap().data()[0].abs() >= 1e-3 && steps < 10_000 {
            let x = p.get("x").unwrap().data()[0];
            s.step(&mut p, &[Some(Tensor::vector(vec![2.0 * x]))]).unwrap();
            steps += 1;
        }
        assert!(p.get("x").unwrap().data()[0].abs() < 1e-3, "took {steps} steps");
    }
}
