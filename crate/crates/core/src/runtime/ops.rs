//! Non-convolution layers and the classification loss.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{RuntimeError, Scalar, Tensor};
use crate::topology::ActivationKind;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() / T::from_f64((2.0 * PI).sqrt());
    (cdf, pdf)
}

pub fn activation_forward<T: Scalar>(x: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    match kind {
        ActivationKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        ActivationKind::Gelu => x.map(|v| v * gelu_parts(v).0),
    }
}

/// Gradient with respect to the activation input `x`.
pub fn activation_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kind: ActivationKind,
) -> Result<Tensor<T>, RuntimeError> {
    if x.dims() != dy.dims() {
        return Err(RuntimeError::ShapeMismatch("activation gradient".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| match kind {
            ActivationKind::Relu => {
                if v > T::zero() {
                    d
                } else {
                    T::zero()
                }
            }
            ActivationKind::Gelu => {
                let (cdf, pdf) = gelu_parts(v);
                d * (cdf + v * pdf)
            }
        })
        .collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// Max pooling; returns the output and the flat input index chosen for each
/// output element (first maximum in row-major window order).
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>), RuntimeError> {
    let [n, c, h, w] = x.nchw()?;
    if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(RuntimeError::NonPositiveSpatial);
    }
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for kx in 0..kernel {
                        let xx = (ox * stride + kx) as isize - padding as isize;
                        if xx < 0 || xx as usize >= w {
                            continue;
                        }
                        let i = base + y as usize * w + xx as usize;
                        if best_i == usize::MAX || xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_dims: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>, RuntimeError> {
    if argmax.len() != dy.len() {
        return Err(RuntimeError::ShapeMismatch("maxpool gradient".into()));
    }
    let mut dx = Tensor::zeros(input_dims);
    for (&i, &d) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += d;
    }
    Ok(dx)
}

/// (N, C, H, W) -> (N, C) spatial mean.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, RuntimeError> {
    let [n, c, h, w] = x.nchw()?;
    let hw = h * w;
    let scale = T::from_f64(hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() / scale)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_dims: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>, RuntimeError> {
    let hw: usize = input_dims[2..].iter().product();
    if dy.len() * hw != input_dims.iter().product::<usize>() {
        return Err(RuntimeError::ShapeMismatch("pool gradient".into()));
    }
    let scale = T::from_f64(hw as f64);
    let mut dx = Vec::with_capacity(dy.len() * hw);
    for &d in dy.data() {
        dx.extend(std::iter::repeat_n(d / scale, hw));
    }
    Tensor::new(input_dims.to_vec(), dx)
}

fn features<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    let n = x.batch();
    (n, x.len().checked_div(n).unwrap_or(0))
}

/// `x W^T + b` for x of shape (N, F) (trailing dims are flattened).
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>, RuntimeError> {
    let (n, f) = features(x);
    let [o, wf] = match w.dims() {
        &[o, wf] => [o, wf],
        d => return Err(RuntimeError::ShapeMismatch(format!("linear weight {d:?}"))),
    };
    if wf != f || b.is_some_and(|b| b.dims() != [o]) {
        return Err(RuntimeError::ShapeMismatch(format!(
            "linear {f} features into weight {:?}",
            w.dims()
        )));
    }
    let mut out = vec![T::zero(); n * o];
    for s in 0..n {
        let xs = &x.data()[s * f..][..f];
        for j in 0..o {
            let wr = &w.data()[j * f..][..f];
            let mut acc = T::zero();
            for (a, b) in xs.iter().zip(wr) {
                acc += *a * *b;
            }
            if let Some(b) = b {
                acc += b.data()[j];
            }
            out[s * o + j] = acc;
        }
    }
    Tensor::new(vec![n, o], out)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>, RuntimeError> {
    let (n, f) = features(x);
    let o = w.dims()[0];
    if dy.dims() != [n, o] || w.dims() != [o, f] {
        return Err(RuntimeError::ShapeMismatch("linear gradient".into()));
    }
    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); o * f];
    let mut db = vec![T::zero(); o];
    for s in 0..n {
        let xs = &x.data()[s * f..][..f];
        let dxs = &mut dx[s * f..][..f];
        for j in 0..o {
            let d = dy.data()[s * o + j];
            db[j] += d;
            let wr = &w.data()[j * f..][..f];
            let dwr = &mut dw[j * f..][..f];
            for k in 0..f {
                dxs[k] += d * wr[k];
                dwr[k] += d * xs[k];
            }
        }
    }
    Ok(LinearGrads {
        dx: Tensor::new(x.dims().to_vec(), dx)?,
        dw: Tensor::new(vec![o, f], dw)?,
        db: Tensor::new(vec![o], db)?,
    })
}

/// Mean negative log-likelihood of `targets` under softmax(logits), and its
/// gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>), RuntimeError> {
    let (n, k) = match logits.dims() {
        &[n, k] => (n, k),
        d => return Err(RuntimeError::ShapeMismatch(format!("logits {d:?}"))),
    };
    if targets.len() != n {
        return Err(RuntimeError::ShapeMismatch(format!(
            "{} targets for {n} rows",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|t| **t >= k) {
        return Err(RuntimeError::TargetOutOfRange { target: t, classes: k });
    }
    let nf = T::from_f64(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for (s, &t) in targets.iter().enumerate() {
        let row = &logits.data()[s * k..][..k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().map(|v| (*v - max).exp()).sum::<T>();
        let lse = max + sum.ln();
        loss += lse - row[t];
        for (j, g) in grad[s * k..][..k].iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == t { T::one() } else { T::zero() }) / nf;
        }
    }
    Ok((loss / nf, Tensor::new(vec![n, k], grad)?))
}
