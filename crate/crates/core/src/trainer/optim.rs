use crate::error::{Error, Result};
use crate::math::{Gradients, ParamStore, Real, Tensor};

/// Adam with decoupled weight decay, applied to tensors of rank >= 2 only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr`; gradients are first scaled so
    /// their global L2 norm is at most `clip`. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, clip: f64) -> Result<f64> {
        if self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, scale) = (T::one(), T::lit(scale));
        let bc1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::lit(self.eps);
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * self.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            if p.value.ndim() >= 2 && self.weight_decay != 0.0 {
                p.value.data_mut().iter_mut().for_each(|w| *w *= decay);
            }
            let g = grads.per_param[i].as_deref();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j] * scale);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Graph;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("vision.w", Tensor::from_f64(&[1, 2], &[1.0, -2.0]).unwrap()).unwrap();
        s.add("vision.b", Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap()).unwrap();
        s
    }

    fn grads(s: &ParamStore<f64>) -> Gradients<f64> {
        let mut g = Graph::new(s);
        let w = g.param(s.id("vision.w").unwrap());
        let b = g.param(s.id("vision.b").unwrap());
        let y = g.add(w, b).unwrap();
        let y = g.mul(y, y).unwrap();
        let l = g.sum_all(y);
        g.backward(l).unwrap()
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut s = store();
        let gr = grads(&s);
        let mut opt = AdamW::new(&s, 0.9, 0.98, 1e-12, 0.0);
        opt.step(&mut s, &gr, 0.1, 1e9).unwrap();
        // bias-corrected first step is lr * sign(g)
        let w = s.by_name("vision.w").unwrap().value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-9 && (w[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut s = store();
        let zero = Gradients {
            per_param: vec![None, None],
        };
        let mut opt = AdamW::new(&s, 0.9, 0.98, 1e-8, 0.5);
        opt.step(&mut s, &zero, 0.1, 1.0).unwrap();
        assert_eq!(s.by_name("vision.w").unwrap().value.data(), &[0.95, -1.9]);
        assert_eq!(s.by_name("vision.b").unwrap().value.data(), &[0.5, 0.5]);
    }

    #[test]
    fn clipping_reports_the_raw_norm() {
        let mut s = store();
        let gr = grads(&s);
        let mut opt = AdamW::new(&s, 0.9, 0.98, 1e-8, 0.0);
        let n = opt.step(&mut s, &gr, 0.1, 1e-3).unwrap();
        // d/dw (w+b)^2 = 2(w+b) = [3, -3], twice (w and b)
        assert!((n - 6.0).abs() < 1e-12);
    }
}
