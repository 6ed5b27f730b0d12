#![allow(dead_code)]

use ocnet_core::graph::{Graph, Mode, Var};
use ocnet_core::{ParamStore, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduces `out` to a scalar with fixed random coefficients so every output
/// entry reaches the gradient.
pub fn scalarize(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let coeffs = Tensor::randn(g.value(out).shape(), 1.0, &mut rng(seed));
    let c = g.input(coeffs);
    let prod = g.mul(out, c)?;
    Ok(g.mean(prod))
}

/// Worst element-wise relative error between analytic gradients and central
/// differences, over every input tensor and every parameter `f` binds.
pub fn gradient_error<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    gradient_error_in(Mode::Eval, store, inputs, f)
}

pub fn gradient_error_in<F>(mode: Mode, store: &ParamStore, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-6;
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, store, &vars).unwrap();
        g.value(root).item()
    };

    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, store, &vars).unwrap();
    let grads = g.backward(root).unwrap();

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= H;
            let numeric = (eval(store, &plus) - eval(store, &minus)) / (2.0 * H);
            worst = worst.max(rel(analytic.data()[k], numeric));
        }
    }
    for (name, analytic) in grads.param_grads(&g) {
        for k in 0..analytic.numel() {
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().data_mut()[k] += H;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().data_mut()[k] -= H;
            let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * H);
            worst = worst.max(rel(analytic.data()[k], numeric));
        }
    }
    worst
}
