//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the code paths it is used to check.
#![allow(dead_code)]

use clade::tensor::{PadMode, PaddingSpec, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in [-1, -margin] U [margin, 1]: keeps kinked activations away from 0.
pub fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn padded_value(x: &Tensor<f64>, b: usize, c: usize, r: isize, col: isize, pad: &PaddingSpec) -> f64 {
    let s = x.shape();
    let (h, w) = (s[2] as isize, s[3] as isize);
    let r = r - pad.top as isize;
    let col = col - pad.left as isize;
    let (r, col) = match pad.mode {
        PadMode::Zero => {
            if r < 0 || r >= h || col < 0 || col >= w {
                return 0.0;
            }
            (r, col)
        }
        PadMode::Reflect => {
            let refl = |i: isize, n: isize| if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
            (refl(r, h), refl(col, w))
        }
    };
    x.data()[((b * s[1] + c) * s[2] + r as usize) * s[3] + col as usize]
}

/// Direct nested-loop cross-correlation.
pub fn conv2d_loops(
    x: &Tensor<f64>,
    kernel: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: &PaddingSpec,
) -> Tensor<f64> {
    let xs = x.shape();
    let ks = kernel.shape();
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ks[0], ks[2]);
    let ho = (h + pad.top + pad.bottom - k) / stride + 1;
    let wo = (w + pad.left + pad.right - k) / stride + 1;
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oc in 0..o {
            for r in 0..ho {
                for q in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                    for ic in 0..c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let v = padded_value(
                                    x,
                                    bi,
                                    ic,
                                    (r * stride + kh) as isize,
                                    (q * stride + kw) as isize,
                                    pad,
                                );
                                acc += v * kernel.data()[((oc * c + ic) * k + kh) * k + kw];
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + r) * wo + q] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, ho, wo], out).unwrap()
}

/// Dense matrix of the zero-padded convolution acting on a single-sample
/// input, rows = output entries, columns = input entries.
pub fn conv_matrix(
    in_shape: [usize; 3],
    kernel: &Tensor<f64>,
    stride: usize,
    pad: &PaddingSpec,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n_in: usize = in_shape.iter().product();
    let mut columns = Vec::with_capacity(n_in);
    let mut out_shape = Vec::new();
    for j in 0..n_in {
        let e = Tensor::from_fn(&[1, in_shape[0], in_shape[1], in_shape[2]], |i| if i == j { 1.0 } else { 0.0 });
        let y = conv2d_loops(&e, kernel, None, stride, pad);
        out_shape = y.shape().to_vec();
        columns.push(y.into_data());
    }
    let n_out = columns[0].len();
    let rows = (0..n_out).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    (rows, out_shape)
}

/// Relative error of analytic vs numeric gradients, floored so that
/// near-zero entries are compared absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Central finite-difference check of every input of a scalar function.
/// Returns the largest relative error across all inputs and entries.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap()).collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}
