use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Bias-corrected Adam over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        let m = ids.iter().map(|&id| vec![0.0; params.get(id).len()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; params.get(id).len()]).collect();
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            ids,
            m,
            v,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update in place. Every tracked parameter must have a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for &id in &self.ids {
            match grads.get(id) {
                None => {
                    return Err(Error::contract(format!(
                        "no gradient for parameter {}",
                        params.name(id)
                    )))
                }
                Some(g) if g.shape() != params.get(id).shape() => {
                    return Err(Error::dim("adam", g.shape(), params.get(id).shape()))
                }
                Some(_) => {}
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id).expect("checked").data();
            let theta = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Graph, Tensor};

    fn grads_for(store: &ParamStore, id: ParamId, g: f64) -> Gradients {
        // loss = g * sum(x) has gradient g everywhere
        let mut graph = Graph::new(store);
        let x = graph.param(id);
        let s = graph.sum(x);
        let l = graph.scale(s, g);
        graph.backward(l).unwrap()
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(0.5));
        let mut adam = Adam::new(&s, vec![id], 1e-3).unwrap();
        let g = grads_for(&s, id, 1.0);
        adam.step(&mut s, &g).unwrap();
        let delta = s.get(id).data()[0] - 0.5;
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(vec![0.3, -0.7]));
        let mut adam = Adam::new(&s, vec![id], 1e-2).unwrap();
        let g = grads_for(&s, id, 0.0);
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.get(id).data(), &[0.3, -0.7]);
    }

    #[test]
    fn constant_gradient_step_non_increasing() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(&s, vec![id], 1e-3).unwrap();
        let mut prev = 0.0;
        let mut sizes = Vec::new();
        for _ in 0..2 {
            let g = grads_for(&s, id, 2.0);
            adam.step(&mut s, &g).unwrap();
            let now = s.get(id).data()[0];
            sizes.push((now - prev).abs());
            prev = now;
        }
        assert!(sizes[1] <= sizes[0]);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(1.0));
        let b = s.add("b", Tensor::scalar(1.0));
        let mut adam = Adam::new(&s, vec![a, b], 1e-3).unwrap();
        let g = grads_for(&s, a, 1.0);
        assert!(matches!(adam.step(&mut s, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_non_positive_lr() {
        let s = ParamStore::new();
        assert!(Adam::new(&s, vec![], 0.0).is_err());
    }
}
