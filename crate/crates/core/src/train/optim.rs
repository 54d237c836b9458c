use crate::error::{Error, Result};
use crate::tensor::{global_norm, GradMap, ParameterStore, Tensor};
use std::collections::BTreeMap;

/// AdamW with decoupled weight decay on matrices (`*.w`).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore<f32>, grads: &GradMap<f32>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if !p.trainable {
                return Err(Error::Contract(format!("gradient for frozen parameter {name}")));
            }
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if name.ends_with(".w") { self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = f64::from(gi);
                let mn = self.beta1 * f64::from(*mi) + (1.0 - self.beta1) * gi;
                let vn = self.beta2 * f64::from(*vi) + (1.0 - self.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                let wf = f64::from(*w);
                *w = (wf - self.lr * (update + decay * wf)) as f32;
            }
        }
        Ok(())
    }

    /// Moment buffers as checkpoint records (`optim.m.*`, `optim.v.*`).
    pub fn records(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, map) in [("optim.m.", &self.m), ("optim.v.", &self.v)] {
            for (name, buf) in map {
                let t = Tensor::new(vec![buf.len()], buf.clone()).expect("1-d buffer");
                out.push((format!("{prefix}{name}"), t));
            }
        }
        out
    }

    pub fn restore(&mut self, records: &[(String, Tensor<f32>)], t: u64) {
        self.m.clear();
        self.v.clear();
        for (name, value) in records {
            if let Some(p) = name.strip_prefix("optim.m.") {
                self.m.insert(p.to_string(), value.data().to_vec());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                self.v.insert(p.to_string(), value.data().to_vec());
            }
        }
        self.t = t;
    }
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norms before and after.
pub fn clip_grad_norm(grads: &mut GradMap<f32>, max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    (norm, global_norm(grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        s.insert("a.b", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), ParamSet::Base).unwrap();
        let mut g = GradMap::new();
        g.insert("a.b".into(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut s, &g).unwrap();
        let v = s.get("a.b").unwrap().value.data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let mut s = ParameterStore::new();
        s.insert("x.w", Tensor::full(&[1], 2.0), ParamSet::Base).unwrap();
        s.insert("x.b", Tensor::full(&[1], 2.0), ParamSet::Base).unwrap();
        let mut g = GradMap::new();
        g.insert("x.w".into(), Tensor::zeros(&[1]));
        g.insert("x.b".into(), Tensor::zeros(&[1]));
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut s, &g).unwrap();
        assert!((s.get("x.w").unwrap().value.data()[0] - 1.9).abs() < 1e-6);
        assert_eq!(s.get("x.b").unwrap().value.data()[0], 2.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = GradMap::new();
        g.insert("a".into(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let (before, after) = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-9);
        assert!(after <= 1.0 + 1e-6);
        let (b2, a2) = clip_grad_norm(&mut g, 10.0);
        assert_eq!(b2, a2);
    }

    #[test]
    fn frozen_parameters_are_refused() {
        let mut s = ParameterStore::new();
        s.insert("x.w", Tensor::zeros(&[1]), ParamSet::Base).unwrap();
        s.set_trainable(ParamSet::Base, false);
        let mut g = GradMap::new();
        g.insert("x.w".into(), Tensor::zeros(&[1]));
        assert!(AdamW::new(0.1, 0.0).step(&mut s, &g).is_err());
    }
}
