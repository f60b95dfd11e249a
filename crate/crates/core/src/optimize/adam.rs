use crate::render::{splat_param_mut, SplatGradient};
use crate::scene::GaussianSplat;

use super::Origin;

const N: usize = SplatGradient::LEN;

/// Adam with per-splat moments and step counts, so splats added by
/// densification start with fresh bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<[f64; N]>,
    v: Vec<[f64; N]>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![[0.0; N]; len],
            v: vec![[0.0; N]; len],
            steps: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of every splat; `lr` is indexed like [`SplatGradient::to_array`].
    pub fn step(&mut self, splats: &mut [GaussianSplat], grads: &[SplatGradient], lr: &[f64; N]) {
        assert_eq!(splats.len(), self.len(), "optimizer state out of sync with the scene");
        assert_eq!(grads.len(), self.len(), "gradient count out of sync with the scene");
        for (i, (s, g)) in splats.iter_mut().zip(grads).enumerate() {
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let g = g.to_array();
            for k in 0..N {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[k] * g[k];
                if lr[k] != 0.0 {
                    let update = lr[k] * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *splat_param_mut(s, k) -= update;
                }
            }
        }
    }

    /// Carries moments across a densify/prune pass; new splats start from zero.
    pub fn remap(&mut self, origins: &[Origin]) {
        let pick = |o: &Origin| match *o {
            Origin::Kept(i) => Some(i),
            Origin::New(_) => None,
        };
        self.m = origins.iter().map(|o| pick(o).map_or([0.0; N], |i| self.m[i])).collect();
        self.v = origins.iter().map(|o| pick(o).map_or([0.0; N], |i| self.v[i])).collect();
        self.steps = origins.iter().map(|o| pick(o).map_or(0, |i| self.steps[i])).collect();
    }
}
