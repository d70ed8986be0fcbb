//! Central finite-difference checks of reverse-mode gradients.

use crate::{Graph, Shape, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; the absolute error
/// when both are (near) zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Fixed projection weights in `[0.5, 1.5)` (splitmix64 stream), so that no
/// gradient cancels by symmetry.
pub fn projection_weights(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut state = seed;
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        0.5 + (z >> 11) as f64 / (1u64 << 53) as f64
    })
}

/// `sum(out * weights)` as a row vector times a column vector.
pub fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let n = g.shape(out).numel();
    let w = g.constant(weights.clone());
    let a = g.reshape(out, Shape::matrix(1, 1, n)).expect("numel preserved");
    let b = g.reshape(w, Shape::matrix(1, n, 1)).expect("numel preserved");
    g.matmul(a, b).expect("matching inner dimension")
}

/// Checks the gradient of `sum(build(inputs) * w)` with respect to every
/// input against central differences. Returns the worst relative error over
/// the inputs.
pub fn gradcheck(inputs: &[Tensor<f64>], seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let w = projection_weights(g.shape(out), seed);
    let prod = project(&mut g, out, &w);
    let grads = g.backward(prod).expect("scalar objective");

    let objective = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        let mut probe = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let fp = objective(&probe);
            probe[i].data_mut()[j] = orig - STEP;
            let fm = objective(&probe);
            probe[i].data_mut()[j] = orig;
            *slot = (fp - fm) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(grads.get(vars[i]).data(), &numeric));
    }
    worst
}
