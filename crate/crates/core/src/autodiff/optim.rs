use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameter blocks.
///
/// Blocks are matched by position, so every call to [`AdamState::step`] must
/// pass the same parameters in the same order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self, block: usize) -> Option<&[f32]> {
        self.m.get(block).map(Vec::as_slice)
    }

    pub fn second_moment(&self, block: usize) -> Option<&[f32]> {
        self.v.get(block).map(Vec::as_slice)
    }

    /// Applies one bias-corrected Adam update using each tensor's `grad`.
    /// Blocks without a gradient keep their values and moments. Any
    /// non-finite gradient aborts before anything is modified.
    pub fn step<'t, S: AsRef<str>>(
        &mut self,
        params: impl IntoIterator<Item = (S, &'t mut Tensor)>,
    ) -> Result<()> {
        let mut params: Vec<(S, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = &p.grad {
                if g.len() != p.numel() {
                    return Err(Error::Dimension {
                        op: "adam_step",
                        axis: format!("grad of {}", name.as_ref()),
                        expected: p.numel(),
                        got: g.len(),
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of parameter block '{}'", name.as_ref()),
                    });
                }
            }
        }
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        let t = self.t + 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = p.grad.take() else {
                continue;
            };
            let n = g.len();
            if self.m[i].len() != n {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let step = (c.lr as f64 / bc1) as f32;
            let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *x -= step * *mi / (vi.sqrt() * inv_sqrt_bc2 + c.eps);
            }
            p.grad = Some(g);
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: Vec<f32>, grad: Vec<f32>) -> Tensor {
        let mut t = Tensor::new([data.len()], data).unwrap().into_param();
        t.grad = Some(grad);
        t
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = with_grad(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1));
        s.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let g = [0.3f32, -1.7, 4.0];
        let mut p = with_grad(vec![0.5, 0.5, 0.5], g.to_vec());
        let mut s = AdamState::new(AdamConfig::with_lr(0.00025));
        s.step([("p", &mut p)]).unwrap();
        for (x, gi) in p.data().iter().zip(g) {
            // m̂ = g, v̂ = g² after one bias-corrected step
            let gi = gi as f64;
            let m = 0.1 * gi / (1.0 - 0.9);
            let v = 0.001 * gi * gi / (1.0 - 0.999);
            let want = 0.5 - 0.00025 * m / (v.sqrt() + 1e-8);
            assert!((*x as f64 - want).abs() < 1e-7, "{x} vs {want}");
        }
    }

    #[test]
    fn zero_lr_only_advances_t() {
        let mut p = with_grad(vec![1.0], vec![5.0]);
        let mut s = AdamState::new(AdamConfig::with_lr(0.0));
        s.step([("p", &mut p)]).unwrap();
        s.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn nan_gradient_names_block() {
        let mut a = with_grad(vec![1.0], vec![1.0]);
        let mut b = with_grad(vec![1.0], vec![f32::NAN]);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1));
        let err = s.step([("enc.fc1.w", &mut a), ("pi.w", &mut b)]).unwrap_err();
        assert!(err.to_string().contains("pi.w"), "{err}");
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(s.t, 0);
    }
}
