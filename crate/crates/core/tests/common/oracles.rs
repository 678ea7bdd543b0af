//! Direct-loop reference implementations in f64.

use rand::Rng as _;
use scarceops::rng::Rng;

pub fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Six nested loops over (n, f, oy, ox, c, ki, kj).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_direct(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [f, _, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[fo];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((fo * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

/// Scatter form of the transposed convolution, kernel `[C, F, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_direct(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [_, f, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for fo in 0..f {
            for i in 0..oh * ow {
                out[(b * f + fo) * oh * ow + i] = bias[fo];
            }
        }
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[((b * c + ci) * h + iy) * w + ix];
                    for fo in 0..f {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((b * f + fo) * oh + oy as usize) * ow + ox as usize] +=
                                    v * k[((ci * f + fo) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

pub fn linear_loops(x: &[f64], n: usize, din: usize, w: &[f64], dout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut acc = 0.0;
            for d in 0..din {
                acc += x[i * din + d] * w[o * din + d];
            }
            out[i * dout + o] = acc + b[o];
        }
    }
    out
}

pub fn mse_loop(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s / a.len() as f64
}

pub fn max_abs_diff<A: Copy + Into<f64>>(a: &[A], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x.into() - y).abs()).fold(0.0, f64::max)
}
