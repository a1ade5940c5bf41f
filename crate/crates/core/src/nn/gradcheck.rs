//! Central finite-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed per input; inputs at or below this size are probed exhaustively.
    pub max_probes: usize,
    /// Gradients below this magnitude are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_probes: 24,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences on a sample of input coordinates.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().trainable()))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.numel()));
        }
        Ok(v.data[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let idx: Vec<usize> = if t.numel() <= opts.max_probes {
            (0..t.numel()).collect()
        } else {
            sample(&mut rng, t.numel(), opts.max_probes).into_vec()
        };
        for i in idx {
            let orig = t.data[i];
            work[ti].data[i] = orig + opts.eps;
            let up = eval(&work)?;
            work[ti].data[i] = orig - opts.eps;
            let down = eval(&work)?;
            work[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic[ti][i], numeric, opts.floor));
            probes += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        probes,
    })
}

/// Same check against the trainable tensors of a parameter set; `f` builds
/// the scalar loss reading parameters from the set it is given.
pub fn gradcheck_params<F>(params: &ParamSet, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut work = params.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    g.backward(out)?;
    g.accumulate_param_grads(&mut work)?;
    let analytic: Vec<(String, Vec<f64>)> = work
        .iter()
        .filter_map(|(n, t)| t.grad.clone().map(|gr| (n.clone(), gr)))
        .collect();

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, ps)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.numel()));
        }
        Ok(v.data[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (name, grad) in &analytic {
        let n = grad.len();
        let idx: Vec<usize> = if n <= opts.max_probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_probes).into_vec()
        };
        for i in idx {
            let orig = work.get(name)?.data[i];
            work.get_mut(name)?.data[i] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(name)?.data[i] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(name)?.data[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            worst = worst.max(relative_error(grad[i], numeric, opts.floor));
            probes += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        probes,
    })
}

/// Reduces any tensor to a scalar through fixed pseudo-random weights so
/// every output element contributes to the checked gradient.
pub fn random_projection(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let n: usize = g.shape(x).iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let flat = g.reshape(x, vec![1, n])?;
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = g.mul_const(flat, &weights)?;
    Ok(g.sum(w))
}
