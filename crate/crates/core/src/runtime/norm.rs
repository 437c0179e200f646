//! Batch normalization (per channel over N, H, W) and channel layer
//! normalization (per position over C).

use super::{RuntimeError, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased batch variance, the quantity folded into the running estimate.
    pub var_unbiased: Tensor<T>,
}

fn check_affine<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    c: usize,
) -> Result<(), RuntimeError> {
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(RuntimeError::ShapeMismatch(format!(
            "affine terms {:?}/{:?} for {c} channels",
            gamma.dims(),
            beta.dims()
        )));
    }
    Ok(())
}

pub struct BnForward<T> {
    pub y: Tensor<T>,
    pub cache: NormCache<T>,
    pub stats: Option<BatchStats<T>>,
}

pub fn batchnorm2d_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<BnForward<T>, RuntimeError> {
    let [n, c, h, w] = x.nchw()?;
    check_affine(gamma, beta, c)?;
    check_affine(running_mean, running_var, c)?;
    let hw = h * w;
    let m = n * hw;
    let eps = T::from_f64(BN_EPS);
    let xd = x.data();
    let channel = |ch: usize| (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut stats = None;
    match mode {
        Mode::Train => {
            let mf = T::from_f64(m as f64);
            let mut unbiased = vec![T::zero(); c];
            for ch in 0..c {
                let mu = channel(ch).map(|i| xd[i]).sum::<T>() / mf;
                let ss = channel(ch).map(|i| (xd[i] - mu) * (xd[i] - mu)).sum::<T>();
                mean[ch] = mu;
                var[ch] = ss / mf;
                unbiased[ch] = if m > 1 {
                    ss / T::from_f64((m - 1) as f64)
                } else {
                    var[ch]
                };
            }
            stats = Some(BatchStats {
                mean: Tensor::new(vec![c], mean.clone())?,
                var_unbiased: Tensor::new(vec![c], unbiased)?,
            });
        }
        Mode::Eval => {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }
    }

    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for i in channel(ch) {
            let xh = (xd[i] - mean[ch]) * inv_std[ch];
            x_hat[i] = xh;
            y[i] = g * xh + b;
        }
    }
    Ok(BnForward {
        y: Tensor::new(x.dims().to_vec(), y)?,
        cache: NormCache { x_hat, inv_std },
        stats,
    })
}

pub struct AffineGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn batchnorm2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    mode: Mode,
) -> Result<AffineGrads<T>, RuntimeError> {
    let [n, c, h, w] = dy.nchw()?;
    let hw = h * w;
    let mf = T::from_f64((n * hw) as f64);
    let dyd = dy.data();
    let xh = &cache.x_hat;
    let channel = |ch: usize| (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let db = channel(ch).map(|i| dyd[i]).sum::<T>();
        let dg = channel(ch).map(|i| dyd[i] * xh[i]).sum::<T>();
        dgamma[ch] = dg;
        dbeta[ch] = db;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        match mode {
            Mode::Train => {
                for i in channel(ch) {
                    dx[i] = scale / mf * (mf * dyd[i] - db - xh[i] * dg);
                }
            }
            Mode::Eval => {
                for i in channel(ch) {
                    dx[i] = scale * dyd[i];
                }
            }
        }
    }
    Ok(AffineGrads {
        dx: Tensor::new(dy.dims().to_vec(), dx)?,
        dgamma: Tensor::new(vec![c], dgamma)?,
        dbeta: Tensor::new(vec![c], dbeta)?,
    })
}

/// Exponential moving average update of running statistics.
pub fn update_running<T: Scalar>(running: &Tensor<T>, batch: &Tensor<T>) -> Tensor<T> {
    let m = T::from_f64(BN_MOMENTUM);
    Tensor::new(
        running.dims().to_vec(),
        running
            .data()
            .iter()
            .zip(batch.data())
            .map(|(r, b)| (T::one() - m) * *r + m * *b)
            .collect(),
    )
    .expect("same dims")
}

pub fn layernorm_channels_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>), RuntimeError> {
    let [n, c, h, w] = x.nchw()?;
    check_affine(gamma, beta, c)?;
    let hw = h * w;
    let cf = T::from_f64(c as f64);
    let eps = T::from_f64(LN_EPS);
    let xd = x.data();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * hw];
    for s in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (s * c + ch) * hw + p;
            let mu = (0..c).map(|ch| xd[idx(ch)]).sum::<T>() / cf;
            let var = (0..c).map(|ch| (xd[idx(ch)] - mu) * (xd[idx(ch)] - mu)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[s * hw + p] = is;
            for ch in 0..c {
                let xh = (xd[idx(ch)] - mu) * is;
                x_hat[idx(ch)] = xh;
                y[idx(ch)] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((Tensor::new(x.dims().to_vec(), y)?, NormCache { x_hat, inv_std }))
}

pub fn layernorm_channels_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
) -> Result<AffineGrads<T>, RuntimeError> {
    let [n, c, h, w] = dy.nchw()?;
    let hw = h * w;
    let cf = T::from_f64(c as f64);
    let dyd = dy.data();
    let xh = &cache.x_hat;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (s * c + ch) * hw + p;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ch in 0..c {
                let d = dyd[idx(ch)] * gamma.data()[ch];
                sum_d += d;
                sum_dx += d * xh[idx(ch)];
                dgamma[ch] += dyd[idx(ch)] * xh[idx(ch)];
                dbeta[ch] += dyd[idx(ch)];
            }
            let is = cache.inv_std[s * hw + p];
            for ch in 0..c {
                let d = dyd[idx(ch)] * gamma.data()[ch];
                dx[idx(ch)] = is / cf * (cf * d - sum_d - xh[idx(ch)] * sum_dx);
            }
        }
    }
    Ok(AffineGrads {
        dx: Tensor::new(dy.dims().to_vec(), dx)?,
        dgamma: Tensor::new(vec![c], dgamma)?,
        dbeta: Tensor::new(vec![c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::gradcheck::{numeric_grad, rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn unit_stats(c: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Tensor::full(&[c], 1.0),
            Tensor::zeros(&[c]),
            Tensor::zeros(&[c]),
            Tensor::full(&[c], 1.0),
        )
    }

    #[test]
    fn eval_with_identity_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let (g, b, m, v) = unit_stats(3);
        let out = batchnorm2d_forward(&x, &g, &b, &m, &v, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (y, x) in out.y.data().iter().zip(x.data()) {
            assert!((y - x * scale).abs() < 1e-15);
        }
        assert!(out.y.max_abs_diff(&x) < 1e-5);
        assert!(out.stats.is_none());
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(&[2, 2, 3, 3], 4.5);
        let (g, _, m, v) = unit_stats(2);
        let beta = Tensor::new(vec![2], vec![0.25, -1.0]).unwrap();
        let out = batchnorm2d_forward(&x, &g, &beta, &m, &v, Mode::Train).unwrap();
        for (i, y) in out.y.data().iter().enumerate() {
            let expected = if (i / 9) % 2 == 0 { 0.25 } else { -1.0 };
            assert!((y - expected).abs() < 1e-12);
        }
        let stats = out.stats.unwrap();
        assert_eq!(stats.mean.data(), &[4.5, 4.5]);
        let rm = update_running(&m, &stats.mean);
        assert!((rm.data()[0] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let (_, _, m, v) = unit_stats(3);
        let probe = random(&[2, 3, 4, 4], &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                let y = batchnorm2d_forward(x, g, b, &m, &v, mode).unwrap().y;
                y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
            };
            let fwd = batchnorm2d_forward(&x, &gamma, &beta, &m, &v, mode).unwrap();
            let grads = batchnorm2d_backward(&probe, &gamma, &fwd.cache, mode).unwrap();
            let nx = numeric_grad(&x, |t| loss(t, &gamma, &beta));
            let ng = numeric_grad(&gamma, |t| loss(&x, t, &beta));
            let nb = numeric_grad(&beta, |t| loss(&x, &gamma, t));
            assert!(rel_error(grads.dx.data(), &nx) < 1e-6, "{mode:?}");
            assert!(rel_error(grads.dgamma.data(), &ng) < 1e-6);
            assert!(rel_error(grads.dbeta.data(), &nb) < 1e-6);
        }
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 3, 3], &mut rng);
        let gamma = random(&[5], &mut rng);
        let beta = random(&[5], &mut rng);
        let probe = random(&[2, 5, 3, 3], &mut rng);
        let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let (y, _) = layernorm_channels_forward(x, g, b).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        let (_, cache) = layernorm_channels_forward(&x, &gamma, &beta).unwrap();
        let grads = layernorm_channels_backward(&probe, &gamma, &cache).unwrap();
        assert!(rel_error(grads.dx.data(), &numeric_grad(&x, |t| loss(t, &gamma, &beta))) < 1e-6);
        assert!(rel_error(grads.dgamma.data(), &numeric_grad(&gamma, |t| loss(&x, t, &beta))) < 1e-6);
        assert!(rel_error(grads.dbeta.data(), &numeric_grad(&beta, |t| loss(&x, &gamma, t))) < 1e-6);
    }
}
