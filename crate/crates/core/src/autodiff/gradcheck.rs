//! Central finite-difference oracle for checking [`Graph::backward`].
//!
//! The forward output `y` is reduced to `L = Σ w·y` with fixed random
//! weights, so every output element contributes. `L` is summed in `f64` from
//! the `f32` forward values, the step actually taken in `f32` is used as the
//! denominator, and two step sizes are combined by Richardson extrapolation
//! to cancel the `h²` truncation term.
//!
//! A coordinate whose stencil flips any ReLU is skipped: the function is not
//! differentiable across the kink and the difference quotient mixes both
//! slopes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::nn::Module;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Denominator floor for the relative error, as a fraction of the
    /// largest analytic gradient magnitude.
    pub floor: f64,
    /// Check only this many coordinates, drawn without replacement from
    /// the ones whose stencil stays on one side of every ReLU.
    pub coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-2,
            floor: 0.1,
            coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates passed over because the stencil crossed a kink.
    pub skipped: usize,
}

/// Loose parameter bag, for checking raw graph ops.
#[derive(Clone, Debug, Default)]
pub struct Params(pub Vec<(String, Tensor)>);

impl Params {
    pub fn push(&mut self, name: &str, t: Tensor) {
        self.0.push((name.to_string(), t.into_param()));
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.0.iter().map(|(_, t)| g.param(t)).collect()
    }
}

impl Module for Params {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.0.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}

/// Uniform tensor on `[-1, 1)`.
pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape product matches data")
}

/// Compares analytic and numeric gradients of every parameter of `m`.
///
/// `forward` must push one bind per parameter of `m`, in `params()` order,
/// and return the output to differentiate.
pub fn check<M, F>(m: &mut M, cfg: &GradCheckConfig, forward: F) -> Result<GradCheckReport>
where
    M: Module,
    F: for<'a> Fn(&'a M, &mut Graph<'a>, &mut Vec<Var>) -> Result<Var>,
{
    m.set_requires_grad(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (weights, analytic) = {
        let mut g = Graph::new();
        let mut binds = Vec::new();
        let y = forward(m, &mut g, &mut binds)?;
        let shape = g.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w: Vec<f32> = (0..n)
            .map(|_| {
                let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                s * rng.gen_range(0.5..1.5)
            })
            .collect();
        let wv = g.input(Tensor::new(shape, w.clone())?);
        let prod = g.mul(y, wv)?;
        let loss = g.sum(prod);
        let mut grads = g.backward(loss)?;
        let names = m.params();
        if binds.len() != names.len() {
            return Err(Error::InvalidArgument(format!(
                "forward bound {} parameters, module has {}",
                binds.len(),
                names.len()
            )));
        }
        let analytic: Vec<Vec<f32>> = binds
            .iter()
            .zip(&names)
            .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (w, analytic)
    };

    let loss_at = |m: &M| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let y = forward(m, &mut g, &mut Vec::new())?;
        let l = g
            .value(y)
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        Ok((l, g.relu_pattern()))
    };
    let (_, pattern) = loss_at(m)?;

    let sizes: Vec<usize> = m.params().iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..total).collect();
    if cfg.coords.is_some_and(|k| k < total) {
        order.shuffle(&mut rng);
    }
    let wanted = cfg.coords.unwrap_or(total);

    let scale = analytic.iter().flatten().fold(0.0f64, |m, &a| m.max((a as f64).abs()));
    let floor = (cfg.floor * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    for flat in order {
        if report.checked == wanted {
            break;
        }
        let (mut p, mut i) = (0, flat);
        while i >= sizes[p] {
            i -= sizes[p];
            p += 1;
        }
        let x0 = m.params()[p].1.data()[i];
        let mut smooth = true;
        let mut diff = |h: f64| -> Result<f64> {
            let xp = (x0 as f64 + h) as f32;
            let xm = (x0 as f64 - h) as f32;
            set(m, p, i, xp);
            let (lp, pp) = loss_at(m)?;
            set(m, p, i, xm);
            let (lm, pm) = loss_at(m)?;
            set(m, p, i, x0);
            smooth &= pp == pattern && pm == pattern;
            Ok((lp - lm) / (xp as f64 - xm as f64))
        };
        let d1 = diff(cfg.h)?;
        let d2 = diff(2.0 * cfg.h)?;
        if !smooth {
            report.skipped += 1;
            continue;
        }
        let numeric = (4.0 * d1 - d2) / 3.0;
        let a = analytic[p][i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((m.params()[p].0.clone(), i));
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn set<M: Module>(m: &mut M, p: usize, i: usize, v: f32) {
    m.params_mut()[p].1.data_mut()[i] = v;
}
