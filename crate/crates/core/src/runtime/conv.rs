//! 2-D cross-correlation with groups. The production path lowers each sample
//! to an im2col matrix and multiplies; the direct path is a plain loop nest.
//! Both accumulate taps in (in-channel, ky, kx) order, so they agree bitwise.

use super::parallel::map_indexed;
use super::{RuntimeError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    p: ConvParams,
) -> Result<Geometry, RuntimeError> {
    let [n, c, h, wd] = x.nchw()?;
    let [oc, cin_g, kh, kw] = w.nchw()?;
    if p.groups == 0 || c % p.groups != 0 || oc % p.groups != 0 || cin_g * p.groups != c {
        return Err(RuntimeError::GroupMismatch {
            channels: c,
            out_channels: oc,
            groups: p.groups,
        });
    }
    if p.stride == 0 || kh == 0 || kw == 0 || h + 2 * p.padding < kh || wd + 2 * p.padding < kw {
        return Err(RuntimeError::NonPositiveSpatial);
    }
    Ok(Geometry {
        n,
        c,
        h,
        w: wd,
        oc,
        cin_g,
        cout_g: oc / p.groups,
        kh,
        kw,
        ho: (h + 2 * p.padding - kh) / p.stride + 1,
        wo: (wd + 2 * p.padding - kw) / p.stride + 1,
        stride: p.stride,
        pad: p.padding,
        groups: p.groups,
    })
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, oc: usize) -> Result<(), RuntimeError> {
    match b {
        Some(b) if b.dims() != [oc] => Err(RuntimeError::ShapeMismatch(format!(
            "bias {:?} for {oc} output channels",
            b.dims()
        ))),
        _ => Ok(()),
    }
}

/// Fills `col` (K x P) for one group of one sample; padded taps are zero.
fn im2col<T: Scalar>(sample: &[T], g: &Geometry, group: usize, col: &mut [T]) {
    let p = g.p();
    for ic in 0..g.cin_g {
        let plane = &sample[(group * g.cin_g + ic) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ic * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    if y < 0 || y as usize >= g.h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if x < 0 || x as usize >= g.w {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `dcol` (K x P) back into one group of a sample gradient.
fn col2im<T: Scalar>(dcol: &[T], g: &Geometry, group: usize, dx: &mut [T]) {
    let p = g.p();
    for ic in 0..g.cin_g {
        let plane = &mut dx[(group * g.cin_g + ic) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &dcol[((ic * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x >= 0 && (x as usize) < g.w {
                            plane[y as usize * g.w + x as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// c (m x n) += a (m x k) * b (k x n), accumulating over k in ascending order.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        let arow = &a[i * k..][..k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..][..n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c (m x k) += a (m x n) * b^T where b is (k x n).
fn gemm_abt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..][..n];
        for kk in 0..k {
            let brow = &b[kk * n..][..n];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * k + kk] += acc;
        }
    }
}

/// c (k x n) += a^T * b where a is (m x k) and b is (m x n).
fn gemm_atb_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let brow = &b[i * n..][..n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..][..n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>, RuntimeError> {
    let g = geometry(x, w, params)?;
    check_bias(b, g.oc)?;
    let (k, p) = (g.k(), g.p());
    let per_in = g.c * g.h * g.w;
    let samples = map_indexed(g.n, |n| {
        let sample = &x.data()[n * per_in..][..per_in];
        let mut out = vec![T::zero(); g.oc * p];
        let mut col = vec![T::zero(); k * p];
        for group in 0..g.groups {
            im2col(sample, &g, group, &mut col);
            let wg = &w.data()[group * g.cout_g * k..][..g.cout_g * k];
            gemm_acc(wg, &col, &mut out[group * g.cout_g * p..][..g.cout_g * p], g.cout_g, k, p);
        }
        if let Some(b) = b {
            for (o, plane) in out.chunks_mut(p).enumerate() {
                let bv = b.data()[o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    });
    Tensor::new(vec![g.n, g.oc, g.ho, g.wo], samples.concat())
}

/// Reference loop nest with the same accumulation order as [`conv2d_forward`].
pub fn conv2d_forward_direct<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>, RuntimeError> {
    let g = geometry(x, w, params)?;
    check_bias(b, g.oc)?;
    let mut out = vec![T::zero(); g.n * g.oc * g.p()];
    let xd = x.data();
    let wd = w.data();
    for n in 0..g.n {
        for oc in 0..g.oc {
            let c0 = oc / g.cout_g * g.cin_g;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ic in 0..g.cin_g {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let y = (oy * g.stride + ky) as isize - g.pad as isize;
                                let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                                let v = if y < 0 || xx < 0 || y as usize >= g.h || xx as usize >= g.w
                                {
                                    T::zero()
                                } else {
                                    xd[((n * g.c + c0 + ic) * g.h + y as usize) * g.w + xx as usize]
                                };
                                acc += wd[((oc * g.cin_g + ic) * g.kh + ky) * g.kw + kx] * v;
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[oc];
                    }
                    out[((n * g.oc + oc) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.oc, g.ho, g.wo], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    params: ConvParams,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>, RuntimeError> {
    let g = geometry(x, w, params)?;
    if dy.dims() != [g.n, g.oc, g.ho, g.wo] {
        return Err(RuntimeError::ShapeMismatch(format!(
            "conv output gradient {:?}, expected {:?}",
            dy.dims(),
            [g.n, g.oc, g.ho, g.wo]
        )));
    }
    let (k, p) = (g.k(), g.p());
    let per_in = g.c * g.h * g.w;
    let per_out = g.oc * p;
    let parts = map_indexed(g.n, |n| {
        let sample = &x.data()[n * per_in..][..per_in];
        let dys = &dy.data()[n * per_out..][..per_out];
        let mut dx = vec![T::zero(); per_in];
        let mut dw = vec![T::zero(); w.len()];
        let mut col = vec![T::zero(); k * p];
        let mut dcol = vec![T::zero(); k * p];
        for group in 0..g.groups {
            im2col(sample, &g, group, &mut col);
            let dyg = &dys[group * g.cout_g * p..][..g.cout_g * p];
            let wg = &w.data()[group * g.cout_g * k..][..g.cout_g * k];
            gemm_abt_acc(dyg, &col, &mut dw[group * g.cout_g * k..][..g.cout_g * k], g.cout_g, p, k);
            dcol.fill(T::zero());
            gemm_atb_acc(wg, dyg, &mut dcol, g.cout_g, k, p);
            col2im(&dcol, &g, group, &mut dx);
        }
        (dx, dw)
    });
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = Vec::with_capacity(x.len());
    for (dxn, dwn) in parts {
        dx.extend(dxn);
        for (a, b) in dw.iter_mut().zip(dwn) {
            *a += b;
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); g.oc];
        for n in 0..g.n {
            for (o, slot) in db.iter_mut().enumerate() {
                *slot += dy.data()[n * per_out + o * p..][..p].iter().copied().sum::<T>();
            }
        }
        Tensor::new(vec![g.oc], db).expect("bias gradient dims")
    });
    Ok(ConvGrads {
        dx: Tensor::new(x.dims().to_vec(), dx)?,
        dw: Tensor::new(w.dims().to_vec(), dw)?,
        db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::gradcheck::{rel_error, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_permutation() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| i as f64);
        // Output channel o reads input channel perm[o].
        let perm = [2, 0, 1];
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if perm[i / 3] == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, None, ConvParams::default()).unwrap();
        for (o, &src) in perm.iter().enumerate() {
            assert_eq!(&y.data()[o * 4..o * 4 + 4], &x.data()[src * 4..src * 4 + 4]);
        }
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, ConvParams::default()).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn direct_and_im2col_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (dims, wdims, params) in [
            ([2, 4, 6, 6], [8, 4, 3, 3], ConvParams { stride: 1, padding: 1, groups: 1 }),
            ([1, 6, 7, 5], [6, 3, 3, 2], ConvParams { stride: 2, padding: 1, groups: 2 }),
            ([2, 4, 5, 5], [4, 1, 3, 3], ConvParams { stride: 1, padding: 2, groups: 4 }),
        ] {
            let x = random(&dims, &mut rng);
            let w = random(&wdims, &mut rng);
            let b = random(&[wdims[0]], &mut rng);
            let fast = conv2d_forward(&x, &w, Some(&b), params).unwrap();
            let slow = conv2d_forward_direct(&x, &w, Some(&b), params).unwrap();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn group_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 4, 3, 3]);
        let w = Tensor::<f32>::zeros(&[6, 4, 1, 1]);
        let p = ConvParams { groups: 4, ..ConvParams::default() };
        assert!(matches!(
            conv2d_forward(&x, &w, None, p),
            Err(RuntimeError::GroupMismatch { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for params in [
            ConvParams { stride: 1, padding: 1, groups: 1 },
            ConvParams { stride: 2, padding: 1, groups: 2 },
        ] {
            let x = random(&[2, 4, 6, 6], &mut rng);
            let w = random(&[8, 4 / params.groups, 3, 3], &mut rng);
            let b = random(&[8], &mut rng);
            let y = conv2d_forward(&x, &w, Some(&b), params).unwrap();
            let probe = random(y.dims(), &mut rng);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                let y = conv2d_forward_direct(x, w, Some(b), params).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
            };
            let grads = conv2d_backward(&x, &w, true, params, &probe).unwrap();
            let nx = numeric_grad(&x, |t| loss(t, &w, &b));
            let nw = numeric_grad(&w, |t| loss(&x, t, &b));
            let nb = numeric_grad(&b, |t| loss(&x, &w, t));
            assert!(rel_error(grads.dx.data(), &nx) < 1e-6);
            assert!(rel_error(grads.dw.data(), &nw) < 1e-6);
            assert!(rel_error(grads.db.unwrap().data(), &nb) < 1e-6);
        }
    }
}
