//! Graph execution: forward in topological order, reverse-mode backward.

use super::conv::{conv2d_backward, conv2d_forward, ConvParams};
use super::norm::{
    batchnorm2d_backward, batchnorm2d_forward, layernorm_channels_backward,
    layernorm_channels_forward, update_running, Mode, NormCache,
};
use super::ops::{
    activation_backward, activation_forward, global_avg_pool_backward, global_avg_pool_forward,
    linear_backward, linear_forward, maxpool2d_backward, maxpool2d_forward,
};
use super::params::{param_name, ParamRole};
use super::{GradientStore, ParameterStore, RuntimeError, Scalar, Tensor};
use crate::topology::{ComputeGraph, Layer, Linear};

enum Aux<T> {
    None,
    Norm(NormCache<T>),
    Argmax(Vec<usize>),
}

/// Everything the backward pass needs from a forward pass.
pub struct Tape<T> {
    mode: Mode,
    order: Vec<usize>,
    outputs: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
}

pub struct ForwardPass<T> {
    /// (N, K) with columns in `logit_layout` order.
    pub logits: Tensor<T>,
    pub tape: Tape<T>,
    /// New running statistics from train-mode batch norm, to be applied with
    /// [`ParameterStore::apply_updates`].
    pub running_updates: Vec<(String, Tensor<T>)>,
}

fn param<'a, T: Scalar>(
    params: &'a ParameterStore<T>,
    g: &ComputeGraph,
    pos: usize,
    role: ParamRole,
) -> Result<&'a Tensor<T>, RuntimeError> {
    params.get(&param_name(&g.nodes()[pos].id, role))
}

/// Weight and bias rows actually served by a (possibly sliced) linear layer.
fn linear_weights<T: Scalar>(
    l: &Linear,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Option<Tensor<T>>), RuntimeError> {
    if w.dims() != [l.stored_rows(), l.in_features] {
        return Err(RuntimeError::ParameterMismatch(format!(
            "linear weight {:?}, expected {:?}",
            w.dims(),
            [l.stored_rows(), l.in_features]
        )));
    }
    match &l.rows {
        None => Ok((w.clone(), b.cloned())),
        Some(sel) => {
            let f = l.in_features;
            let mut wd = Vec::with_capacity(sel.rows.len() * f);
            for &r in &sel.rows {
                wd.extend_from_slice(&w.data()[r * f..][..f]);
            }
            let bd = b.map(|b| {
                Tensor::new(vec![sel.rows.len()], sel.rows.iter().map(|&r| b.data()[r]).collect())
            });
            Ok((Tensor::new(vec![sel.rows.len(), f], wd)?, bd.transpose()?))
        }
    }
}

fn conv_params(c: &crate::topology::Conv2d) -> ConvParams {
    ConvParams {
        stride: c.stride,
        padding: c.padding,
        groups: c.groups,
    }
}

/// Evaluates `g` on a batch `x` of shape (N, C, H, W).
///
/// In train mode batch norm uses batch statistics; the resulting running
/// statistics are returned rather than written, so the call never mutates
/// `params`.
pub fn forward<T: Scalar>(
    g: &ComputeGraph,
    params: &ParameterStore<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<ForwardPass<T>, RuntimeError> {
    run(g, params, x, mode, true)
}

/// Forward pass that frees intermediate values as soon as they are consumed.
/// Produces the same logits as [`forward`].
pub fn infer<T: Scalar>(
    g: &ComputeGraph,
    params: &ParameterStore<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>, RuntimeError> {
    Ok(run(g, params, x, Mode::Eval, false)?.logits)
}

fn run<T: Scalar>(
    g: &ComputeGraph,
    params: &ParameterStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    keep: bool,
) -> Result<ForwardPass<T>, RuntimeError> {
    if !g.has_shapes() {
        return Err(RuntimeError::ShapesMissing);
    }
    let s = g.input_shape;
    let [n, c, h, w] = x.nchw()?;
    if [c, h, w] != [s.c, s.h, s.w] {
        return Err(RuntimeError::ShapeMismatch(format!(
            "input {:?} for graph input {}x{}x{}",
            x.dims(),
            s.c,
            s.h,
            s.w
        )));
    }
    let order = g.topo_positions()?;
    let nodes = g.nodes();
    let len = nodes.len();

    // Remaining consumers of each value; logits sources are pinned.
    let mut uses = vec![0usize; len];
    for node in nodes {
        for p in &node.preds {
            uses[g.position(p)?] += 1;
        }
    }
    for e in &g.logit_layout {
        uses[g.position(&e.node)?] += 1;
    }

    let mut outputs: Vec<Option<Tensor<T>>> = (0..len).map(|_| None).collect();
    let mut aux: Vec<Aux<T>> = (0..len).map(|_| Aux::None).collect();
    let mut running_updates = Vec::new();

    for &pos in &order {
        let node = &nodes[pos];
        let pred_pos: Vec<usize> = node
            .preds
            .iter()
            .map(|p| g.position(p))
            .collect::<Result<_, _>>()?;
        let input = |i: usize| -> Result<&Tensor<T>, RuntimeError> {
            outputs[pred_pos[i]]
                .as_ref()
                .ok_or_else(|| RuntimeError::ShapeMismatch(format!("{} input freed", node.id)))
        };
        let out = match &node.layer {
            Layer::Input => x.clone(),
            Layer::Conv2d(cv) => {
                let w = param(params, g, pos, ParamRole::Weight)?;
                let b = if cv.has_bias {
                    Some(param(params, g, pos, ParamRole::Bias)?)
                } else {
                    None
                };
                conv2d_forward(input(0)?, w, b, conv_params(cv))?
            }
            Layer::Batchnorm2d { .. } => {
                let r = batchnorm2d_forward(
                    input(0)?,
                    param(params, g, pos, ParamRole::Gamma)?,
                    param(params, g, pos, ParamRole::Beta)?,
                    param(params, g, pos, ParamRole::RunningMean)?,
                    param(params, g, pos, ParamRole::RunningVar)?,
                    mode,
                )?;
                if let Some(stats) = r.stats {
                    for (role, batch) in [
                        (ParamRole::RunningMean, &stats.mean),
                        (ParamRole::RunningVar, &stats.var_unbiased),
                    ] {
                        let current = param(params, g, pos, role)?;
                        running_updates
                            .push((param_name(&node.id, role), update_running(current, batch)));
                    }
                }
                if keep {
                    aux[pos] = Aux::Norm(r.cache);
                }
                r.y
            }
            Layer::LayernormChannels { .. } => {
                let (y, cache) = layernorm_channels_forward(
                    input(0)?,
                    param(params, g, pos, ParamRole::Gamma)?,
                    param(params, g, pos, ParamRole::Beta)?,
                )?;
                if keep {
                    aux[pos] = Aux::Norm(cache);
                }
                y
            }
            Layer::Activation { func } => activation_forward(input(0)?, *func),
            Layer::Maxpool2d(p) => {
                let (y, arg) = maxpool2d_forward(input(0)?, p.kernel, p.stride, p.padding)?;
                if keep {
                    aux[pos] = Aux::Argmax(arg);
                }
                y
            }
            Layer::GlobalAvgPool => global_avg_pool_forward(input(0)?)?,
            Layer::Linear(l) => {
                let w = param(params, g, pos, ParamRole::Weight)?;
                let b = if l.has_bias {
                    Some(param(params, g, pos, ParamRole::Bias)?)
                } else {
                    None
                };
                let (w, b) = linear_weights(l, w, b)?;
                linear_forward(input(0)?, &w, b.as_ref())?
            }
            Layer::Add => input(0)?.add(input(1)?)?,
        };
        outputs[pos] = Some(out);
        if !keep {
            for &p in &pred_pos {
                uses[p] -= 1;
                if uses[p] == 0 {
                    outputs[p] = None;
                }
            }
        }
    }

    let k = g.logit_layout.len();
    let mut logits = vec![T::zero(); n * k];
    for (col, e) in g.logit_layout.iter().enumerate() {
        let src = outputs[g.position(&e.node)?]
            .as_ref()
            .expect("logit sources are kept");
        let width = src.len() / n.max(1);
        if e.offset >= width {
            return Err(RuntimeError::ShapeMismatch(format!(
                "logit offset {} beyond {} outputs of {}",
                e.offset, width, e.node
            )));
        }
        for s in 0..n {
            logits[s * k + col] = src.data()[s * width + e.offset];
        }
    }
    Ok(ForwardPass {
        logits: Tensor::new(vec![n, k], logits)?,
        tape: Tape {
            mode,
            order,
            outputs,
            aux,
        },
        running_updates,
    })
}

fn accumulate<T: Scalar>(
    slot: &mut Option<Tensor<T>>,
    g: Tensor<T>,
) -> Result<(), RuntimeError> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of `sum(dlogits * logits)` with respect to every trainable
/// parameter that influences the logits.
pub fn backward<T: Scalar>(
    g: &ComputeGraph,
    params: &ParameterStore<T>,
    tape: &Tape<T>,
    dlogits: &Tensor<T>,
) -> Result<GradientStore<T>, RuntimeError> {
    let nodes = g.nodes();
    let k = g.logit_layout.len();
    let n = match dlogits.dims() {
        &[n, kk] if kk == k => n,
        d => return Err(RuntimeError::ShapeMismatch(format!("logit gradient {d:?}"))),
    };
    let out = |pos: usize| -> Result<&Tensor<T>, RuntimeError> {
        tape.outputs[pos]
            .as_ref()
            .ok_or_else(|| RuntimeError::ShapeMismatch("tape lacks forward values".into()))
    };

    let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    for (col, e) in g.logit_layout.iter().enumerate() {
        let pos = g.position(&e.node)?;
        let src = out(pos)?;
        let width = src.len() / n.max(1);
        let slot = grads[pos].get_or_insert_with(|| Tensor::zeros(src.dims()));
        for s in 0..n {
            slot.data_mut()[s * width + e.offset] += dlogits.data()[s * k + col];
        }
    }

    let mut store = GradientStore::new();
    for &pos in tape.order.iter().rev() {
        let Some(dy) = grads[pos].take() else {
            continue;
        };
        let node = &nodes[pos];
        let pred_pos: Vec<usize> = node
            .preds
            .iter()
            .map(|p| g.position(p))
            .collect::<Result<_, _>>()?;
        let name = |role| param_name(&node.id, role);
        let dx: Vec<Tensor<T>> = match &node.layer {
            Layer::Input => vec![],
            Layer::Conv2d(cv) => {
                let x = out(pred_pos[0])?;
                let w = param(params, g, pos, ParamRole::Weight)?;
                let r = conv2d_backward(x, w, cv.has_bias, conv_params(cv), &dy)?;
                store.accumulate(name(ParamRole::Weight), r.dw)?;
                if let Some(db) = r.db {
                    store.accumulate(name(ParamRole::Bias), db)?;
                }
                vec![r.dx]
            }
            Layer::Batchnorm2d { .. } | Layer::LayernormChannels { .. } => {
                let Aux::Norm(cache) = &tape.aux[pos] else {
                    return Err(RuntimeError::ShapeMismatch("tape lacks norm cache".into()));
                };
                let gamma = param(params, g, pos, ParamRole::Gamma)?;
                let r = if matches!(node.layer, Layer::Batchnorm2d { .. }) {
                    batchnorm2d_backward(&dy, gamma, cache, tape.mode)?
                } else {
                    layernorm_channels_backward(&dy, gamma, cache)?
                };
                store.accumulate(name(ParamRole::Gamma), r.dgamma)?;
                store.accumulate(name(ParamRole::Beta), r.dbeta)?;
                vec![r.dx]
            }
            Layer::Activation { func } => {
                vec![activation_backward(out(pred_pos[0])?, &dy, *func)?]
            }
            Layer::Maxpool2d(_) => {
                let Aux::Argmax(arg) = &tape.aux[pos] else {
                    return Err(RuntimeError::ShapeMismatch("tape lacks pool indices".into()));
                };
                vec![maxpool2d_backward(out(pred_pos[0])?.dims(), arg, &dy)?]
            }
            Layer::GlobalAvgPool => vec![global_avg_pool_backward(out(pred_pos[0])?.dims(), &dy)?],
            Layer::Linear(l) => {
                let x = out(pred_pos[0])?;
                let w = param(params, g, pos, ParamRole::Weight)?;
                let (ws, _) = linear_weights(l, w, None)?;
                let r = linear_backward(x, &ws, &dy)?;
                let (dw, db) = match &l.rows {
                    None => (r.dw, r.db),
                    Some(sel) => {
                        let f = l.in_features;
                        let mut dw = Tensor::zeros(w.dims());
                        let mut db = Tensor::zeros(&[sel.full_out]);
                        for (i, &row) in sel.rows.iter().enumerate() {
                            for (d, s) in dw.data_mut()[row * f..][..f]
                                .iter_mut()
                                .zip(&r.dw.data()[i * f..][..f])
                            {
                                *d += *s;
                            }
                            db.data_mut()[row] += r.db.data()[i];
                        }
                        (dw, db)
                    }
                };
                store.accumulate(name(ParamRole::Weight), dw)?;
                if l.has_bias {
                    store.accumulate(name(ParamRole::Bias), db)?;
                }
                vec![r.dx]
            }
            Layer::Add => vec![dy.clone(), dy],
        };
        for (p, d) in pred_pos.into_iter().zip(dx) {
            if matches!(nodes[p].layer, Layer::Input) {
                continue;
            }
            accumulate(&mut grads[p], d)?;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::gradcheck::{numeric_grad, rel_error};
    use crate::runtime::init_parameters;
    use crate::runtime::ops::softmax_cross_entropy;
    use crate::topology::{
        build_baseline, ActivationKind, GraphBuilder, LogitEntry, NodeId, ResNetConfig, Shape,
    };
    use crate::taxonomy::CategoryId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ComputeGraph {
        let mut g = ComputeGraph::new(Shape { c: 2, h: 5, w: 5 });
        let input = g.input_id().clone();
        let mut b = GraphBuilder::new(&mut g);
        let c = b.conv("conv", &input, 2, 3, 3, 1, 1, false).unwrap();
        let bn = b.batchnorm("bn", &c, 3).unwrap();
        let r = b.relu("relu", &bn).unwrap();
        let p = b.global_avg_pool("pool", &r).unwrap();
        let fc = b.linear("fc", &p, 3, 4).unwrap();
        g.logit_layout = (0..4)
            .map(|i| LogitEntry {
                category: CategoryId(i),
                node: fc.clone(),
                offset: i,
            })
            .collect();
        g.with_shapes().unwrap()
    }

    #[test]
    fn zero_input_gives_uniform_logits() {
        let g = toy();
        let mut params: ParameterStore<f64> = init_parameters(&g, 3);
        *params.get_mut("fc.bias").unwrap() = Tensor::zeros(&[4]);
        let x = Tensor::zeros(&[2, 2, 5, 5]);
        let out = forward(&g, &params, &x, Mode::Eval).unwrap();
        // conv(0) = 0, eval BN with identity stats keeps 0, relu(0) = 0, pool 0, fc = bias.
        assert!(out.logits.data().iter().all(|v| *v == 0.0));
        let (loss, _) = softmax_cross_entropy(&out.logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let baseline = build_baseline(&ResNetConfig::mini(), 10, Shape { c: 1, h: 28, w: 28 }).unwrap();
        let mut params: ParameterStore<f32> = init_parameters(&baseline, 3);
        *params.get_mut("fc.bias").unwrap() = Tensor::zeros(&[10]);
        let out = infer(&baseline, &params, &Tensor::zeros(&[1, 1, 28, 28])).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_manual_composition() {
        let g = toy();
        let params: ParameterStore<f64> = init_parameters(&g, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[3, 2, 5, 5], |_| rng.random_range(-1.0..1.0));
        let out = forward(&g, &params, &x, Mode::Eval).unwrap();
        let p = |n: &str| params.get(n).unwrap();
        let c = conv2d_forward(&x, p("conv.weight"), None, ConvParams { stride: 1, padding: 1, groups: 1 }).unwrap();
        let bn = batchnorm2d_forward(&c, p("bn.gamma"), p("bn.beta"), p("bn.running_mean"), p("bn.running_var"), Mode::Eval).unwrap();
        let r = activation_forward(&bn.y, ActivationKind::Relu);
        let pool = global_avg_pool_forward(&r).unwrap();
        let fc = linear_forward(&pool, p("fc.weight"), Some(p("fc.bias"))).unwrap();
        assert_eq!(out.logits, fc);
        assert_eq!(infer(&g, &params, &x).unwrap(), fc);
    }

    #[test]
    fn forward_does_not_touch_parameters() {
        let g = toy();
        let params: ParameterStore<f64> = init_parameters(&g, 5);
        let before = params.clone();
        let x = Tensor::full(&[2, 2, 5, 5], 0.3);
        let out = forward(&g, &params, &x, Mode::Train).unwrap();
        assert_eq!(params, before);
        assert_eq!(out.running_updates.len(), 2);
        let mut updated = params.clone();
        updated.apply_updates(out.running_updates).unwrap();
        assert_ne!(updated, before);
    }

    #[test]
    fn input_and_shape_errors() {
        let g = toy();
        let params: ParameterStore<f32> = init_parameters(&g, 5);
        assert!(matches!(
            forward(&g, &params, &Tensor::zeros(&[1, 3, 5, 5]), Mode::Eval),
            Err(RuntimeError::ShapeMismatch(_))
        ));
        let mut bare = ComputeGraph::new(Shape { c: 2, h: 5, w: 5 });
        let input = bare.input_id().clone();
        GraphBuilder::new(&mut bare).relu("r", &input).unwrap();
        assert!(matches!(
            forward(&bare, &params, &Tensor::zeros(&[1, 2, 5, 5]), Mode::Eval),
            Err(RuntimeError::ShapesMissing)
        ));
        let other = build_baseline(&ResNetConfig::mini(), 3, Shape { c: 2, h: 5, w: 5 });
        if let Ok(other) = other {
            assert!(matches!(
                forward(&other, &params, &Tensor::zeros(&[1, 2, 5, 5]), Mode::Eval),
                Err(RuntimeError::ParameterMismatch(_))
            ));
        }
    }

    #[test]
    fn sliced_linear_matches_full_rows() {
        let g = toy();
        let params: ParameterStore<f64> = init_parameters(&g, 9);
        let x = Tensor::full(&[2, 2, 5, 5], 0.5);
        let full = forward(&g, &params, &x, Mode::Eval).unwrap().logits;

        let mut sliced = g.clone();
        let nodes: Vec<_> = sliced.nodes().to_vec();
        let mut rebuilt = ComputeGraph::new(sliced.input_shape);
        for node in nodes.into_iter().skip(1) {
            let mut node = node;
            if let Layer::Linear(l) = &mut node.layer {
                l.rows = Some(crate::topology::RowSelection { full_out: 4, rows: vec![3, 1] });
                l.out_features = 2;
            }
            rebuilt.push(node).unwrap();
        }
        rebuilt.logit_layout = vec![
            LogitEntry { category: CategoryId(3), node: NodeId::new("fc"), offset: 0 },
            LogitEntry { category: CategoryId(1), node: NodeId::new("fc"), offset: 1 },
        ];
        sliced = rebuilt.with_shapes().unwrap();
        let part = forward(&sliced, &params, &x, Mode::Eval).unwrap().logits;
        for s in 0..2 {
            assert_eq!(part.data()[s * 2], full.data()[s * 4 + 3]);
            assert_eq!(part.data()[s * 2 + 1], full.data()[s * 4 + 1]);
        }
    }

    fn loss_of(g: &ComputeGraph, params: &ParameterStore<f64>, x: &Tensor<f64>, t: &[usize], mode: Mode) -> f64 {
        let out = forward(g, params, x, mode).unwrap();
        softmax_cross_entropy(&out.logits, t).unwrap().0
    }

    #[test]
    fn graph_gradient_matches_finite_differences() {
        let g = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params: ParameterStore<f64> = init_parameters(&g, 5);
        for name in ["bn.gamma", "bn.beta", "bn.running_mean"] {
            let t = params.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let x = Tensor::from_fn(&[4, 2, 5, 5], |_| rng.random_range(-1.0..1.0));
        let targets = [0, 1, 2, 3];
        for mode in [Mode::Train, Mode::Eval] {
            let out = forward(&g, &params, &x, mode).unwrap();
            let (_, dl) = softmax_cross_entropy(&out.logits, &targets).unwrap();
            let grads = backward(&g, &params, &out.tape, &dl).unwrap();
            let trainable: Vec<String> = params.trainable().map(|(k, _)| k.clone()).collect();
            assert_eq!(grads.len(), trainable.len());
            for name in trainable {
                let base = params.get(&name).unwrap().clone();
                let numeric = numeric_grad(&base, |t| {
                    let mut p = params.clone();
                    *p.get_mut(&name).unwrap() = t.clone();
                    loss_of(&g, &p, &x, &targets, mode)
                });
                let err = rel_error(grads.get(&name).unwrap().data(), &numeric);
                assert!(err < 1e-6, "{mode:?} {name}: {err}");
            }
        }
    }
}
