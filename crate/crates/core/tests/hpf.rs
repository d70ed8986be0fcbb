mod common;

use common::rng;
use forgeloc::hpf::{cw_hpf, hpf_conv, plain_hpf, HpfKernelBank};
use forgeloc_autograd::{Graph, Shape, Tensor};
use rand::RngExt;

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Values on a 1/256 grid, so adding another grid value is exact.
fn dyadic(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| f64::from(r.random_range(0..256u32)) / 256.0)
}

#[test]
fn constant_input_gives_exact_zero() {
    let bank = HpfKernelBank::srm();
    for value in [0.0, 0.3, 1.0, -7.25] {
        let out = cw_hpf(&bank, &Tensor::full(Shape::new(2, 2, 9, 7), value));
        assert_eq!(out.shape(), Shape::new(2, 6, 9, 7));
        assert!(out.data().iter().all(|&v| v == 0.0), "constant {value}");
        let out32 = cw_hpf(&bank, &Tensor::full(Shape::new(1, 3, 8, 8), value as f32));
        assert!(out32.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn constant_shift_leaves_output_bit_identical() {
    let bank = HpfKernelBank::srm();
    let x = dyadic(Shape::new(1, 3, 12, 10), 1);
    for c in [0.5, -0.125, 3.0] {
        let shifted = x.map(|v| v + c);
        assert_eq!(bits(&cw_hpf(&bank, &x)), bits(&cw_hpf(&bank, &shifted)));
    }
}

#[test]
fn response_is_linear_in_scale() {
    let bank = HpfKernelBank::srm();
    let x = dyadic(Shape::new(1, 2, 8, 8), 2);
    let base = cw_hpf(&bank, &x);
    for alpha in [2.0, 0.25, -4.0] {
        // compared by value: a zero response may flip its sign bit
        let scaled = cw_hpf(&bank, &x.map(|v| v * alpha));
        assert_eq!(scaled.data(), base.map(|v| v * alpha).data());
    }
    let alpha = 0.37;
    let scaled = cw_hpf(&bank, &x.map(|v| v * alpha));
    for (a, b) in scaled.data().iter().zip(base.data()) {
        assert!((a - alpha * b).abs() <= 1e-12);
    }
}

#[test]
fn single_channel_block_equals_hpf_conv() {
    let bank = HpfKernelBank::srm();
    let x = dyadic(Shape::new(1, 1, 7, 9), 3).map(|v| v * 0.9 + 0.01);
    assert_eq!(bits(&cw_hpf(&bank, &x)), bits(&hpf_conv(&bank, &x).unwrap()));
}

#[test]
fn impulse_response_is_the_flipped_kernel() {
    let bank = HpfKernelBank::srm();
    let mut impulse = Tensor::zeros(Shape::new(1, 1, 9, 9));
    impulse.set([0, 0, 4, 4], 1.0);
    let out = cw_hpf(&bank, &impulse);
    for j in 0..3 {
        let k = bank.kernel(j);
        for y in 0..9 {
            for x in 0..9 {
                let (dy, dx) = (4 + 2 - y as isize, 4 + 2 - x as isize);
                let want = if (0..5).contains(&dy) && (0..5).contains(&dx) {
                    k[dy as usize * 5 + dx as usize]
                } else {
                    0.0
                };
                assert!((out.at([0, j, y, x]) - want).abs() < 1e-15, "kernel {j} at ({y},{x})");
            }
        }
    }
}

#[test]
fn ramp_gives_constant_first_order_response() {
    let bank = HpfKernelBank::srm();
    let ramp = Tensor::from_fn(Shape::new(1, 1, 6, 8), |[_, _, y, x]| 0.125 * x as f64 + 0.5 * y as f64);
    let out = cw_hpf(&bank, &ramp);
    for y in 0..6 {
        // the last column sees its own replicated edge as right neighbour
        for x in 0..7 {
            assert_eq!(out.at([0, 2, y, x]), 0.125);
        }
        assert_eq!(out.at([0, 2, y, 7]), 0.0);
    }
}

#[test]
fn plain_hpf_sums_channel_responses() {
    let bank = HpfKernelBank::srm();
    let x = dyadic(Shape::new(2, 3, 8, 8), 4);
    let cw = cw_hpf(&bank, &x);
    let mut g = Graph::new();
    let v = g.constant(x);
    let p = plain_hpf(&mut g, &bank, v).unwrap();
    let plain = g.value(p);
    assert_eq!(plain.shape(), Shape::new(2, 3, 8, 8));
    for n in 0..2 {
        for j in 0..3 {
            for y in 0..8 {
                for xx in 0..8 {
                    let want: f64 = (0..3).map(|c| cw.at([n, c * 3 + j, y, xx])).sum();
                    assert!((plain.at([n, j, y, xx]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let bank = HpfKernelBank::srm().depthwise::<f64>();
    let mut r = rng(5);
    let x = Tensor::from_fn(Shape::new(1, 2, 6, 6), |_| r.random_range(0.0..1.0));
    let weights = Tensor::from_fn(Shape::new(1, 6, 6, 6), |_| r.random_range(0.5..1.5));
    let objective = |t: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let y = g.depthwise(v, &bank);
        g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let y = g.depthwise(v, &bank);
    let wv = g.constant(weights.clone());
    let ya = g.reshape(y, Shape::matrix(1, 1, 216)).unwrap();
    let wb = g.reshape(wv, Shape::matrix(1, 216, 1)).unwrap();
    let s = g.matmul(ya, wb).unwrap();
    let analytic = g.backward(s).unwrap().get(v);

    let h = 1e-5;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        diff += (numeric - analytic.data()[i]).powi(2);
        norm += numeric.powi(2);
    }
    assert!((diff / norm).sqrt() < 1e-4);
}
