use super::{GradientStore, ParameterStore, RuntimeError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

fn check_keys<T: Scalar>(
    params: &ParameterStore<T>,
    grads: &GradientStore<T>,
) -> Result<(), RuntimeError> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .map_err(|_| RuntimeError::KeyMismatch(format!("gradient for unknown {name}")))?;
        if p.dims() != g.dims() {
            return Err(RuntimeError::KeyMismatch(format!(
                "{name}: gradient {:?} vs parameter {:?}",
                g.dims(),
                p.dims()
            )));
        }
    }
    Ok(())
}

/// SGD with optional momentum and L2 weight decay; parameters without a
/// gradient are left untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    grads: &GradientStore<T>,
    cfg: &SgdConfig,
) -> Result<(), RuntimeError> {
    check_keys(params, grads)?;
    let lr = T::from_f64(cfg.lr);
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    let (tensors, state) = params.parts_mut();
    for (name, g) in grads.iter() {
        let p = tensors.get_mut(name).expect("checked");
        let d: Vec<T> = p
            .data()
            .iter()
            .zip(g.data())
            .map(|(&pv, &gv)| gv + wd * pv)
            .collect();
        let step: Vec<T> = if cfg.momentum != 0.0 {
            let key = format!("momentum:{name}");
            let buf = match state.get_mut(&key) {
                Some(buf) => {
                    for (b, dv) in buf.data_mut().iter_mut().zip(&d) {
                        *b = mu * *b + *dv;
                    }
                    buf
                }
                None => state
                    .entry(key)
                    .or_insert(Tensor::new(p.dims().to_vec(), d)?),
            };
            buf.data().to_vec()
        } else {
            d
        };
        for (pv, s) in p.data_mut().iter_mut().zip(step) {
            *pv -= lr * s;
        }
    }
    params.step += 1;
    Ok(())
}

/// Adam with bias-corrected moments.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    grads: &GradientStore<T>,
    cfg: &AdamConfig,
) -> Result<(), RuntimeError> {
    check_keys(params, grads)?;
    let t = params.step + 1;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let wd = T::from_f64(cfg.weight_decay);
    let (tensors, state) = params.parts_mut();
    for (name, g) in grads.iter() {
        let p = tensors.get_mut(name).expect("checked");
        let m_key = format!("adam_m:{name}");
        let v_key = format!("adam_v:{name}");
        for key in [&m_key, &v_key] {
            state
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(p.dims()));
        }
        let mut m = state.remove(&m_key).expect("inserted");
        let mut v = state.remove(&v_key).expect("inserted");
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gv = gv + wd * *pv;
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        state.insert(m_key, m);
        state.insert(v_key, v);
    }
    params.step = t;
    Ok(())
}
