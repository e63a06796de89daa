use mico_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// AdamW state: moment estimates per parameter and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Checks that the moment buffers mirror `params`.
    pub fn check_shapes(&self, params: &ParamStore<f32>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::ParamMismatch(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((name, p), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::ParamMismatch(format!("optimizer moments of `{name}` have the wrong shape")));
            }
        }
        Ok(())
    }

    /// One decoupled-decay step: `p -= lr·wd·p`, then the bias-corrected
    /// adaptive-moment step.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        self.check_shapes(params)?;
        if grads.len() != params.len() {
            return Err(Error::ParamMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::ParamMismatch(format!("gradient of `{}` has the wrong shape", params.name(id))));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[k].data()) {
                let g = g as f64;
                let mut x = *p as f64 * decay;
                let mn = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let vn = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                x -= lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *m = mn as f32;
                *v = vn as f32;
                *p = x as f32;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.add("x", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn unit_step_magnitude() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        opt.update(&mut p, &[Tensor::new(vec![1], vec![1.0]).unwrap()], 0.1).unwrap();
        let x = p.iter().next().unwrap().1.item();
        assert!((x - 0.9).abs() < 1e-6, "{x}");
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        opt.update(&mut p, &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert_eq!(p.iter().next().unwrap().1.item(), 2.0);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.5);
        opt.update(&mut p, &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert!((p.iter().next().unwrap().1.item() - 2.0 * 0.95).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }
}
