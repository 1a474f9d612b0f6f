#![allow(dead_code)]

use mkpn::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries on `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Relative error with an absolute floor, so coordinates whose true
/// derivative is ~0 are judged by roundoff-sized differences.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn eval(params: &[Tensor<f64>], build: &impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> (f64, Vec<bool>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone()).unwrap()).collect();
    let loss = build(&mut g, &vars);
    (g.value(loss).data()[0], g.nonsmooth_pattern())
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences with step `h`. `per_param` caps the coordinates visited in
/// each parameter (chosen at random); coordinates whose perturbation
/// crosses a ReLU or |x| kink are skipped.
pub fn grad_check(
    params: &[Tensor<f64>],
    h: f64,
    per_param: Option<usize>,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone()).unwrap()).collect();
    let loss = build(&mut g, &vars);
    let base = g.nonsmooth_pattern();
    g.backward(loss).unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut r = rng(seed);
    let mut out = GradCheck::default();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match per_param {
            Some(k) if k < p.len() => (0..k).map(|_| r.random_range(0..p.len())).collect(),
            _ => (0..p.len()).collect(),
        };
        for i in coords {
            let mut shifted = params.to_vec();
            shifted[pi].data_mut()[i] = p.data()[i] + h;
            let (plus, pat_p) = eval(&shifted, &build);
            shifted[pi].data_mut()[i] = p.data()[i] - h;
            let (minus, pat_m) = eval(&shifted, &build);
            if pat_p != base || pat_m != base {
                out.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(grads[pi].data()[i], numeric);
            out.worst = out.worst.max(e);
            out.checked += 1;
        }
    }
    out
}
