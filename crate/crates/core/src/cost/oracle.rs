//! Brute-force MAC tally: evaluates the graph with naive loops and counts
//! every multiply-accumulate executed inside conv and linear kernels. Shapes
//! come from the actual arrays, not from shape inference.

use super::CostError;
use crate::topology::{ComputeGraph, Layer, Shape};

#[derive(Debug, Clone, Copy)]
pub struct OracleGuard {
    /// Largest H*W accepted at the input.
    pub max_pixels: usize,
}

impl Default for OracleGuard {
    fn default() -> Self {
        OracleGuard {
            max_pixels: 64 * 64,
        }
    }
}

struct Act {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Act {
    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            0.0
        } else {
            self.data[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

// Deterministic pseudo-weights; the tally does not depend on values.
fn weight(i: usize) -> f64 {
    ((i as f64) * 0.618_033_988_7).fract() - 0.5
}

pub fn oracle_mac_count(
    g: &ComputeGraph,
    input_shape: Shape,
    guard: OracleGuard,
) -> Result<u64, CostError> {
    let pixels = input_shape.h * input_shape.w;
    if pixels > guard.max_pixels {
        return Err(CostError::InputTooLarge {
            pixels,
            limit: guard.max_pixels,
        });
    }
    let order = g.topo_positions()?;
    let mut acts: Vec<Option<Act>> = (0..g.len()).map(|_| None).collect();
    let mut macs: u64 = 0;

    for i in order {
        let node = &g.nodes()[i];
        let pred = |k: usize| -> &Act {
            acts[g.position(&node.preds[k]).expect("validated")]
                .as_ref()
                .expect("topological order")
        };
        let out = match &node.layer {
            Layer::Input => Act {
                c: input_shape.c,
                h: input_shape.h,
                w: input_shape.w,
                data: (0..input_shape.numel()).map(weight).collect(),
            },
            Layer::Conv2d(c) => {
                let x = pred(0);
                let (kh, kw) = (c.kernel[0], c.kernel[1]);
                let ho = (x.h + 2 * c.padding - kh) / c.stride + 1;
                let wo = (x.w + 2 * c.padding - kw) / c.stride + 1;
                let cin_g = x.c / c.groups;
                let cout_g = c.out_ch / c.groups;
                let mut data = vec![0.0; c.out_ch * ho * wo];
                for oc in 0..c.out_ch {
                    let g0 = oc / cout_g * cin_g;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for ic in 0..cin_g {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let y = (oy * c.stride + ky) as isize - c.padding as isize;
                                        let xx = (ox * c.stride + kx) as isize - c.padding as isize;
                                        let wi = ((oc * cin_g + ic) * kh + ky) * kw + kx;
                                        acc += weight(wi) * x.at(g0 + ic, y, xx);
                                        macs += 1;
                                    }
                                }
                            }
                            data[(oc * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
                Act {
                    c: c.out_ch,
                    h: ho,
                    w: wo,
                    data,
                }
            }
            Layer::Linear(l) => {
                let x = pred(0);
                let features = &x.data;
                let mut data = vec![0.0; l.out_features];
                for (o, slot) in data.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (k, v) in features.iter().enumerate() {
                        acc += weight(o * features.len() + k) * v;
                        macs += 1;
                    }
                    *slot = acc;
                }
                Act {
                    c: l.out_features,
                    h: 1,
                    w: 1,
                    data,
                }
            }
            Layer::Maxpool2d(p) => {
                let x = pred(0);
                let ho = (x.h + 2 * p.padding - p.kernel) / p.stride + 1;
                let wo = (x.w + 2 * p.padding - p.kernel) / p.stride + 1;
                let mut data = vec![f64::NEG_INFINITY; x.c * ho * wo];
                for ch in 0..x.c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for ky in 0..p.kernel {
                                for kx in 0..p.kernel {
                                    let y = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let xx = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < x.h && (xx as usize) < x.w {
                                        let slot = &mut data[(ch * ho + oy) * wo + ox];
                                        *slot = slot.max(x.at(ch, y, xx));
                                    }
                                }
                            }
                        }
                    }
                }
                Act {
                    c: x.c,
                    h: ho,
                    w: wo,
                    data,
                }
            }
            Layer::GlobalAvgPool => {
                let x = pred(0);
                let hw = x.h * x.w;
                Act {
                    c: x.c,
                    h: 1,
                    w: 1,
                    data: x
                        .data
                        .chunks(hw)
                        .map(|p| p.iter().sum::<f64>() / hw as f64)
                        .collect(),
                }
            }
            Layer::Add => {
                let (a, b) = (pred(0), pred(1));
                Act {
                    c: a.c,
                    h: a.h,
                    w: a.w,
                    data: a.data.iter().zip(&b.data).map(|(p, q)| p + q).collect(),
                }
            }
            Layer::Activation { .. } => {
                let x = pred(0);
                Act {
                    c: x.c,
                    h: x.h,
                    w: x.w,
                    data: x.data.iter().map(|v| v.max(0.0)).collect(),
                }
            }
            // Normalization does not change extents and has no MACs in the default convention.
            Layer::Batchnorm2d { .. } | Layer::LayernormChannels { .. } => {
                let x = pred(0);
                Act {
                    c: x.c,
                    h: x.h,
                    w: x.w,
                    data: x.data.clone(),
                }
            }
        };
        acts[i] = Some(out);
    }
    Ok(macs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Conv2d, GraphNode};

    fn conv_graph(input: Shape, conv: Conv2d) -> ComputeGraph {
        let mut g = ComputeGraph::new(input);
        g.push(GraphNode {
            id: "conv".into(),
            layer: Layer::Conv2d(conv),
            preds: vec!["input".into()],
            tag: None,
            out_shape: None,
        })
        .unwrap();
        g
    }

    #[test]
    fn pointwise_conv() {
        let g = conv_graph(
            Shape::new(4, 5, 5),
            Conv2d {
                in_ch: 4,
                out_ch: 8,
                kernel: [1, 1],
                stride: 1,
                padding: 0,
                groups: 1,
                has_bias: false,
            },
        );
        assert_eq!(oracle_mac_count(&g, g.input_shape, OracleGuard::default()).unwrap(), 800);
    }

    #[test]
    fn grouped_conv() {
        let g = conv_graph(
            Shape::new(8, 6, 6),
            Conv2d {
                in_ch: 8,
                out_ch: 8,
                kernel: [3, 3],
                stride: 1,
                padding: 0,
                groups: 2,
                has_bias: false,
            },
        );
        assert_eq!(oracle_mac_count(&g, g.input_shape, OracleGuard::default()).unwrap(), 4608);
    }

    #[test]
    fn guard() {
        let g = ComputeGraph::new(Shape::new(1, 65, 64));
        assert!(matches!(
            oracle_mac_count(&g, g.input_shape, OracleGuard::default()),
            Err(CostError::InputTooLarge { .. })
        ));
    }
}
