//! AdamW with decoupled weight decay, global-norm clipping and a plateau
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        lr: f64,
        betas: (f64, f64),
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            betas,
            eps,
            weight_decay,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    fn check(&self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len()
            || grads.iter().zip(&self.m).any(|(g, m)| g.shape() != m.shape())
        {
            return Err(Error::invalid("gradients do not match optimizer state"));
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        Ok(())
    }

    /// One update at learning rate `lr * lr_multiplier`. A non-finite
    /// gradient rejects the step and leaves parameters and moments untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr_multiplier: f64,
    ) -> Result<()> {
        self.check(grads)?;
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::invalid("parameters do not match optimizer state"));
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr * lr_multiplier;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
        Ok(())
    }

    /// Gradient part of the update the current second moments would apply to
    /// `grads` if they were frozen: `-lr g / (sqrt(v_hat) + eps)`. Linear in
    /// `grads`; weight decay is not included.
    pub fn frozen_delta(&self, grads: &[Tensor], lr_multiplier: f64) -> Result<Vec<Tensor>> {
        self.check(grads)?;
        if self.t == 0 {
            return Err(Error::invalid("frozen_delta needs at least one prior step"));
        }
        let c2 = 1.0 - self.betas.1.powi(self.t as i32);
        let lr = self.lr * lr_multiplier;
        grads
            .iter()
            .zip(&self.v)
            .map(|(g, v)| {
                let data = g
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(g, v)| -lr * g / ((v / c2).sqrt() + self.eps))
                    .collect();
                Tensor::from_vec(g.shape().to_vec(), data)
            })
            .collect()
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` to global L2 norm `max_norm` if it is larger. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Halves the learning-rate multiplier each time `patience` epochs pass
/// without a new best dev score. The first observation sets the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    patience: usize,
    best: Option<f64>,
    stale_epochs: usize,
    multiplier: f64,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::config("plateau patience must be at least 1"));
        }
        Ok(Self {
            patience,
            best: None,
            stale_epochs: 0,
            multiplier: 1.0,
        })
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records a dev score reached `epochs` epochs after the previous one.
    /// Returns true if it is a new best.
    pub fn observe(&mut self, score: f64, epochs: usize) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.stale_epochs = 0;
            return true;
        }
        self.stale_epochs += epochs;
        while self.stale_epochs >= self.patience {
            self.multiplier *= 0.5;
            self.stale_epochs -= self.patience;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut opt = AdamW::new(&p, 1e-2, (0.9, 0.999), 1e-8, 0.0);
        for _ in 0..5 {
            opt.step(p.iter_mut(), &[Tensor::zeros(&[3])], 1.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = vec![scalar(0.0), scalar(0.0)];
        let mut opt = AdamW::new(&p, 1e-2, (0.9, 0.999), 1e-8, 0.0);
        let g = [scalar(3.0), scalar(-0.1)];
        for _ in 0..50 {
            opt.step(p.iter_mut(), &g, 1.0).unwrap();
        }
        assert!(p[0].item() < 0.0 && p[1].item() > 0.0);
    }

    #[test]
    fn scalar_trajectory_matches_reference() {
        // reference AdamW written out for one scalar
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
        let grads = [0.5, -1.5, 2.0];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x = x - lr * mh / (vh.sqrt() + eps) - lr * wd * x;
            expected.push(x);
        }
        assert!((expected[0] - (1.0 - 0.1 - 0.001)).abs() < 1e-7);

        let mut p = vec![scalar(1.0)];
        let mut opt = AdamW::new(&p, lr, (b1, b2), eps, wd);
        for (g, want) in grads.iter().zip(&expected) {
            opt.step(p.iter_mut(), &[scalar(*g)], 1.0).unwrap();
            assert!((p[0].item() - want).abs() < 1e-15, "{} vs {want}", p[0].item());
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = vec![scalar(1.0)];
        let mut opt = AdamW::new(&p, 0.1, (0.9, 0.999), 1e-8, 0.0);
        let saved = opt.clone();
        assert!(opt.step(p.iter_mut(), &[scalar(f64::NAN)], 1.0).is_err());
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(opt, saved);
    }

    #[test]
    fn frozen_delta_is_linear() {
        let mut p = vec![Tensor::from_vec(vec![2], vec![0.3, -0.2]).unwrap()];
        let mut opt = AdamW::new(&p, 1e-3, (0.9, 0.999), 1e-8, 0.0);
        opt.step(p.iter_mut(), &[Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()], 1.0)
            .unwrap();
        let a = Tensor::from_vec(vec![2], vec![0.4, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![-2.0, 0.7]).unwrap();
        let mut ab = a.clone();
        ab.axpy(0.5, &b);
        let da = opt.frozen_delta(&[a], 1.0).unwrap();
        let db = opt.frozen_delta(&[b], 1.0).unwrap();
        let dab = opt.frozen_delta(&[ab], 1.0).unwrap();
        for i in 0..2 {
            let sum = da[0].data()[i] + 0.5 * db[0].data()[i];
            assert!((dab[0].data()[i] - sum).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_rescales_to_the_limit() {
        let mut g = vec![
            Tensor::from_vec(vec![2], vec![3.0, 0.0]).unwrap(),
            Tensor::from_vec(vec![1], vec![4.0]).unwrap(),
        ];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let before = g.clone();
        clip_global_norm(&mut g, 2.0);
        assert_eq!(g, before);
    }

    #[test]
    fn plateau_halves_every_patience_epochs() {
        for patience in [1, 3, 20] {
            let mut s = PlateauScheduler::new(patience).unwrap();
            assert!(s.observe(1.0, 0));
            for epoch in 1..=5 * patience {
                assert!(!s.observe(1.0, 1));
                let k = (epoch / patience) as i32;
                assert_eq!(s.multiplier(), 0.5f64.powi(k), "epoch {epoch}");
            }
        }
    }

    #[test]
    fn improvement_resets_the_count() {
        let mut s = PlateauScheduler::new(2).unwrap();
        s.observe(0.0, 0);
        s.observe(-1.0, 1);
        assert!(s.observe(0.5, 1));
        s.observe(0.1, 1);
        assert_eq!(s.multiplier(), 1.0);
        s.observe(0.1, 1);
        assert_eq!(s.multiplier(), 0.5);
        assert!(PlateauScheduler::new(0).is_err());
    }
}
