//! Central finite-difference checking of graph gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::params::Parameterized;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Worst `|analytic − fd| / max(1, |fd|)` over every element of every input.
///
/// `f` maps leaves to an output of any shape; the output is contracted with
/// a fixed random weight tensor so that every output element contributes.
pub fn max_gradient_error<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(g.value(out).shape(), 0.5, 1.5, &mut rng)
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let out = g.value(out);
        Ok(out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let w = g.constant(probe.clone());
    let weighted = g.mul(out, w)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zero).clone();
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            values[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&values)?;
            values[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&values)?;
            values[k].data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Finite-difference check of named parameters inside a model.
///
/// `f` builds the output from the (possibly perturbed) model. Errors are
/// measured as in [`max_gradient_error`].
pub fn param_gradient_error<M, F>(model: &M, names: &[&str], seed: u64, f: F) -> Result<f64>
where
    M: Clone + Parameterized,
    F: for<'m> Fn(&'m M, &mut Graph<'m>) -> Result<Var>,
{
    let (probe, analytic) = {
        let mut g = Graph::new();
        let out = f(model, &mut g)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = Tensor::rand_uniform(g.value(out).shape(), 0.5, 1.5, &mut rng);
        let w = g.constant(probe.clone());
        let weighted = g.mul(out, w)?;
        let loss = g.sum(weighted)?;
        (probe, g.backward(loss)?.named(&g))
    };
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(m, &mut g)?;
        Ok(g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for &name in names {
        let n = work.params_mut().get(name)?.len();
        let zero = Tensor::zeros(work.params_mut().get(name)?.shape());
        let grad = analytic.get(name).unwrap_or(&zero).clone();
        for i in 0..n {
            let x0 = work.params_mut().get(name)?.data()[i];
            work.params_mut().get_mut(name)?.data_mut()[i] = x0 + FD_STEP;
            let up = eval(&work)?;
            work.params_mut().get_mut(name)?.data_mut()[i] = x0 - FD_STEP;
            let down = eval(&work)?;
            work.params_mut().get_mut(name)?.data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((grad.data()[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
