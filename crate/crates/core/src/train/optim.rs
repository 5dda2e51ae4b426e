use crate::model::ParamStore;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `grads` is in parameter-store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::from_parts(vec!["w".into()], vec![Tensor::row(vec![1.0, -1.0])]);
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &[vec![3.0, -0.5]]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::from_parts(vec!["w".into()], vec![Tensor::scalar(5.0)]);
        let mut opt = Adam::new(&p, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().item();
            opt.step(&mut p, &[vec![2.0 * (w - 3.0)]]);
        }
        assert!((p.get("w").unwrap().item() - 3.0).abs() < 1e-3);
    }
}
