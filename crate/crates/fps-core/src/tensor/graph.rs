//! Tape-based reverse-mode autodiff.
//!
//! Ops append nodes in topological order and register one vector-Jacobian
//! closure per parent edge; `backward` walks the tape in reverse, so node
//! index order is already a valid reverse-topological order.
//!
//! Shape errors inside ops are programming errors and panic; the public
//! network layers validate shapes and return `Result` before building graph.

use num_complex::Complex64;

use crate::kspace::{fft2, ifft2, ComplexImage};
use crate::tensor::conv;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type Vjp = Box<dyn Fn(&Tensor) -> Tensor>;

struct Edge {
    parent: usize,
    vjp: Vjp,
}

struct Node {
    value: Tensor,
    edges: Vec<Edge>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, edges: Vec<Edge>) -> Var {
        self.nodes.push(Node { value, edges });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf (input or parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, vec![])
    }

    /// Reverse pass from a scalar root. Returns one gradient slot per node;
    /// unreached nodes stay `None`.
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor>> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = self.nodes.iter().map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            for edge in &self.nodes[id].edges {
                let contrib = (edge.vjp)(&g);
                grads[edge.parent] = Some(match grads[edge.parent].take() {
                    Some(acc) => acc.add(&contrib),
                    None => contrib,
                });
            }
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(
            value,
            vec![
                Edge { parent: a.0, vjp: Box::new(|g| g.clone()) },
                Edge { parent: b.0, vjp: Box::new(|g| g.clone()) },
            ],
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(
            value,
            vec![
                Edge { parent: a.0, vjp: Box::new(|g| g.clone()) },
                Edge { parent: b.0, vjp: Box::new(|g| g.scale(-1.0)) },
            ],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let value = va.mul(&vb);
        self.push(
            value,
            vec![
                Edge { parent: a.0, vjp: Box::new(move |g| g.mul(&vb)) },
                Edge { parent: b.0, vjp: Box::new(move |g| g.mul(&va)) },
            ],
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(
            value,
            vec![Edge { parent: a.0, vjp: Box::new(move |g| g.scale(c)) }],
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let value = x.map(|v| v.max(0.0));
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| g.zip(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            }],
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let s2 = s.clone();
        self.push(
            s,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| g.zip(&s2, |gv, sv| gv * sv * (1.0 - sv))),
            }],
        )
    }

    // ---- reductions and broadcasts ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let shape = self.value(a).shape().to_vec();
        let value = Tensor::scalar(self.value(a).mean());
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| Tensor::full(&shape, g.item() / n)),
            }],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| Tensor::full(&shape, g.item())),
            }],
        )
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean per channel (GAP).
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let [b, c, h, w] = dims4(self.value(a));
        let x = self.value(a).data();
        let hw = h * w;
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            out[bc] = x[bc * hw..(bc + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let value = Tensor::from_vec(&[b, c], out);
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| {
                    let gd = g.data();
                    let mut dx = vec![0.0; b * c * hw];
                    for bc in 0..b * c {
                        let gv = gd[bc] / hw as f64;
                        dx[bc * hw..(bc + 1) * hw].fill(gv);
                    }
                    Tensor::from_vec(&[b, c, h, w], dx)
                }),
            }],
        )
    }

    /// `(B, C) -> (B, C, H, W)` broadcast over space.
    pub fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 2, "broadcast_spatial expects (B, C)");
        let (b, c) = (shape[0], shape[1]);
        let x = self.value(a).data();
        let hw = h * w;
        let mut out = vec![0.0; b * c * hw];
        for bc in 0..b * c {
            out[bc * hw..(bc + 1) * hw].fill(x[bc]);
        }
        let value = Tensor::from_vec(&[b, c, h, w], out);
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| {
                    let gd = g.data();
                    let mut dx = vec![0.0; b * c];
                    for bc in 0..b * c {
                        dx[bc] = gd[bc * hw..(bc + 1) * hw].iter().sum();
                    }
                    Tensor::from_vec(&[b, c], dx)
                }),
            }],
        )
    }

    /// `(B, C, H, W) * w[c]`, per-channel scale.
    pub fn scale_channels(&mut self, a: Var, wv: Var) -> Var {
        let [b, c, h, w] = dims4(self.value(a));
        assert_eq!(self.value(wv).shape(), &[c], "scale_channels weight shape");
        let x = self.value(a).clone();
        let ws = self.value(wv).clone();
        let hw = h * w;
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let scale = ws.data()[ci];
                for k in 0..hw {
                    out[base + k] = x.data()[base + k] * scale;
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out);
        let ws2 = ws.clone();
        let x2 = x.clone();
        self.push(
            value,
            vec![
                Edge {
                    parent: a.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let mut dx = vec![0.0; b * c * hw];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                let scale = ws2.data()[ci];
                                for k in 0..hw {
                                    dx[base + k] = gd[base + k] * scale;
                                }
                            }
                        }
                        Tensor::from_vec(&[b, c, h, w], dx)
                    }),
                },
                Edge {
                    parent: wv.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let mut dw = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                let mut acc = 0.0;
                                for k in 0..hw {
                                    acc += gd[base + k] * x2.data()[base + k];
                                }
                                dw[ci] += acc;
                            }
                        }
                        Tensor::from_vec(&[c], dw)
                    }),
                },
            ],
        )
    }

    /// `(B, C, H, W) * w[b, c]`, per-sample per-channel scale.
    pub fn scale_bc(&mut self, a: Var, wv: Var) -> Var {
        let [b, c, h, w] = dims4(self.value(a));
        assert_eq!(self.value(wv).shape(), &[b, c], "scale_bc weight shape");
        let x = self.value(a).clone();
        let ws = self.value(wv).clone();
        let hw = h * w;
        let mut out = vec![0.0; b * c * hw];
        for bc in 0..b * c {
            let scale = ws.data()[bc];
            for k in 0..hw {
                out[bc * hw + k] = x.data()[bc * hw + k] * scale;
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out);
        let ws2 = ws.clone();
        let x2 = x.clone();
        self.push(
            value,
            vec![
                Edge {
                    parent: a.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let mut dx = vec![0.0; b * c * hw];
                        for bc in 0..b * c {
                            let scale = ws2.data()[bc];
                            for k in 0..hw {
                                dx[bc * hw + k] = gd[bc * hw + k] * scale;
                            }
                        }
                        Tensor::from_vec(&[b, c, h, w], dx)
                    }),
                },
                Edge {
                    parent: wv.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let mut dw = vec![0.0; b * c];
                        for bc in 0..b * c {
                            let mut acc = 0.0;
                            for k in 0..hw {
                                acc += gd[bc * hw + k] * x2.data()[bc * hw + k];
                            }
                            dw[bc] = acc;
                        }
                        Tensor::from_vec(&[b, c], dw)
                    }),
                },
            ],
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape = self.value(a).shape().to_vec();
        let value = self.value(a).reshaped(shape);
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| g.reshaped(&old_shape)),
            }],
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = permute_tensor(self.value(a), axes);
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| permute_tensor(g, &inverse)),
            }],
        )
    }

    /// Concatenate along the channel axis of `(B, C, H, W)` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [b, _, h, w] = dims4(self.value(parts[0]));
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, ph, pw] = dims4(self.value(p));
            assert_eq!((pb, ph, pw), (b, h, w), "concat_channels spatial mismatch");
            channels.push(pc);
        }
        let c_total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = vec![0.0; b * c_total * hw];
        let mut offset = 0usize;
        for (&p, &pc) in parts.iter().zip(channels.iter()) {
            let x = self.value(p).data();
            for bi in 0..b {
                let dst = (bi * c_total + offset) * hw;
                let src = bi * pc * hw;
                out[dst..dst + pc * hw].copy_from_slice(&x[src..src + pc * hw]);
            }
            offset += pc;
        }
        let value = Tensor::from_vec(&[b, c_total, h, w], out);
        let mut edges = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for (&p, &pc) in parts.iter().zip(channels.iter()) {
            let off = offset;
            edges.push(Edge {
                parent: p.0,
                vjp: Box::new(move |g| {
                    let gd = g.data();
                    let mut dx = vec![0.0; b * pc * hw];
                    for bi in 0..b {
                        let src = (bi * c_total + off) * hw;
                        let dst = bi * pc * hw;
                        dx[dst..dst + pc * hw].copy_from_slice(&gd[src..src + pc * hw]);
                    }
                    Tensor::from_vec(&[b, pc, h, w], dx)
                }),
            });
            offset += pc;
        }
        self.push(value, edges)
    }

    /// Channels `[lo, hi)` of a `(B, C, H, W)` tensor.
    pub fn slice_channels(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let [b, c, h, w] = dims4(self.value(a));
        assert!(lo < hi && hi <= c, "slice_channels range {lo}..{hi} of {c}");
        let pc = hi - lo;
        let hw = h * w;
        let x = self.value(a).data();
        let mut out = vec![0.0; b * pc * hw];
        for bi in 0..b {
            let src = (bi * c + lo) * hw;
            let dst = bi * pc * hw;
            out[dst..dst + pc * hw].copy_from_slice(&x[src..src + pc * hw]);
        }
        let value = Tensor::from_vec(&[b, pc, h, w], out);
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| {
                    let gd = g.data();
                    let mut dx = vec![0.0; b * c * hw];
                    for bi in 0..b {
                        let dst = (bi * c + lo) * hw;
                        let src = bi * pc * hw;
                        dx[dst..dst + pc * hw].copy_from_slice(&gd[src..src + pc * hw]);
                    }
                    Tensor::from_vec(&[b, c, h, w], dx)
                }),
            }],
        )
    }

    /// Cyclic roll of the spatial axes of a `(B, H, W, C)` token grid.
    pub fn roll_hw(&mut self, a: Var, dy: i64, dx: i64) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 4, "roll_hw expects (B, H, W, C)");
        let value = roll_tensor(self.value(a), dy, dx);
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| roll_tensor(g, -dy, -dx)),
            }],
        )
    }

    // ---- linear algebra ----

    /// `(N, K) @ (K, M) + bias(M)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xs = self.value(x).clone();
        let ws = self.value(w).clone();
        let bs = self.value(bias).clone();
        let (n, k) = dims2(&xs);
        let (k2, m) = dims2(&ws);
        assert_eq!(k, k2, "linear inner dims");
        assert_eq!(bs.shape(), &[m], "linear bias");
        let mut out = vec![0.0; n * m];
        conv::dgemm_rm(n, k, m, xs.data(), ws.data(), &mut out);
        for row in out.chunks_exact_mut(m) {
            for (o, b) in row.iter_mut().zip(bs.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_vec(&[n, m], out);
        let ws2 = ws.clone();
        let xs2 = xs.clone();
        self.push(
            value,
            vec![
                Edge {
                    parent: x.0,
                    vjp: Box::new(move |g| {
                        // dx = g @ w^T
                        let mut dx = vec![0.0; n * k];
                        conv::dgemm_rm_nt(n, m, k, g.data(), ws2.data(), &mut dx);
                        Tensor::from_vec(&[n, k], dx)
                    }),
                },
                Edge {
                    parent: w.0,
                    vjp: Box::new(move |g| {
                        // dw = x^T @ g
                        let mut dw = vec![0.0; k * m];
                        conv::dgemm_rm_tn(k, n, m, xs2.data(), g.data(), &mut dw);
                        Tensor::from_vec(&[k, m], dw)
                    }),
                },
                Edge {
                    parent: bias.0,
                    vjp: Box::new(move |g| {
                        let mut db = vec![0.0; m];
                        for row in g.data().chunks_exact(m) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::from_vec(&[m], db)
                    }),
                },
            ],
        )
    }

    /// Batched `(G, M, K) @ (G, K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (g_a, m, k) = dims3(&av);
        let (g_b, k2, n) = dims3(&bv);
        assert_eq!(g_a, g_b, "matmul batch dims");
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; g_a * m * n];
        for gi in 0..g_a {
            conv::dgemm_rm(
                m,
                k,
                n,
                &av.data()[gi * m * k..(gi + 1) * m * k],
                &bv.data()[gi * k * n..(gi + 1) * k * n],
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        let value = Tensor::from_vec(&[g_a, m, n], out);
        let av2 = av.clone();
        let bv2 = bv.clone();
        self.push(
            value,
            vec![
                Edge {
                    parent: a.0,
                    vjp: Box::new(move |g| {
                        let mut da = vec![0.0; g_a * m * k];
                        for gi in 0..g_a {
                            conv::dgemm_rm_nt(
                                m,
                                n,
                                k,
                                &g.data()[gi * m * n..(gi + 1) * m * n],
                                &bv2.data()[gi * k * n..(gi + 1) * k * n],
                                &mut da[gi * m * k..(gi + 1) * m * k],
                            );
                        }
                        Tensor::from_vec(&[g_a, m, k], da)
                    }),
                },
                Edge {
                    parent: b.0,
                    vjp: Box::new(move |g| {
                        let mut db = vec![0.0; g_a * k * n];
                        for gi in 0..g_a {
                            conv::dgemm_rm_tn(
                                k,
                                m,
                                n,
                                &av2.data()[gi * m * k..(gi + 1) * m * k],
                                &g.data()[gi * m * n..(gi + 1) * m * n],
                                &mut db[gi * k * n..(gi + 1) * k * n],
                            );
                        }
                        Tensor::from_vec(&[g_a, k, n], db)
                    }),
                },
            ],
        )
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, a: Var) -> Var {
        self.permute(a, &[0, 2, 1])
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let shape = x.shape().to_vec();
        let d = *shape.last().expect("softmax needs rank >= 1");
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let s = Tensor::from_vec(&shape, out);
        let s2 = s.clone();
        self.push(
            s,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| {
                    let mut dx = vec![0.0; g.len()];
                    for (row, (gr, sr)) in dx
                        .chunks_exact_mut(d)
                        .zip(g.data().chunks_exact(d).zip(s2.data().chunks_exact(d)))
                        .map(|(a, b)| (a, b))
                    {
                        let dot: f64 = gr.iter().zip(sr.iter()).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            row[i] = sr[i] * (gr[i] - dot);
                        }
                    }
                    Tensor::from_vec(s2.shape(), dx)
                }),
            }],
        )
    }

    /// Layer normalization over the last axis with learnable affine.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(a).clone();
        let gm = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let shape = x.shape().to_vec();
        let d = *shape.last().expect("layer_norm needs rank >= 1");
        assert_eq!(gm.shape(), &[d]);
        assert_eq!(bt.shape(), &[d]);
        let rows = x.len() / d;
        let mut norm = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                norm[r * d + i] = (row[i] - mean) * is;
            }
        }
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for i in 0..d {
                out[r * d + i] = norm[r * d + i] * gm.data()[i] + bt.data()[i];
            }
        }
        let value = Tensor::from_vec(&shape, out);
        let norm_t = Tensor::from_vec(&shape, norm);
        let norm_for_x = norm_t.clone();
        let norm_for_g = norm_t.clone();
        let gm2 = gm.clone();
        let shape2 = shape.clone();
        self.push(
            value,
            vec![
                Edge {
                    parent: a.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let nd = norm_for_x.data();
                        let mut dx = vec![0.0; gd.len()];
                        for r in 0..rows {
                            let mut sum_gg = 0.0;
                            let mut sum_ggn = 0.0;
                            for i in 0..d {
                                let gg = gd[r * d + i] * gm2.data()[i];
                                sum_gg += gg;
                                sum_ggn += gg * nd[r * d + i];
                            }
                            for i in 0..d {
                                let gg = gd[r * d + i] * gm2.data()[i];
                                dx[r * d + i] = inv_std[r]
                                    * (gg - sum_gg / d as f64
                                        - nd[r * d + i] * sum_ggn / d as f64);
                            }
                        }
                        Tensor::from_vec(&shape2, dx)
                    }),
                },
                Edge {
                    parent: gamma.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let nd = norm_for_g.data();
                        let mut dg = vec![0.0; d];
                        for r in 0..gd.len() / d {
                            for i in 0..d {
                                dg[i] += gd[r * d + i] * nd[r * d + i];
                            }
                        }
                        Tensor::from_vec(&[d], dg)
                    }),
                },
                Edge {
                    parent: beta.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let mut db = vec![0.0; d];
                        for r in 0..gd.len() / d {
                            for i in 0..d {
                                db[i] += gd[r * d + i];
                            }
                        }
                        Tensor::from_vec(&[d], db)
                    }),
                },
            ],
        )
    }

    /// Batch normalization over `(B, H, W)` per channel, using batch
    /// statistics (training mode). Returns the output plus the per-channel
    /// batch mean and biased variance for the caller's running buffers.
    pub fn batch_norm_train(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Tensor, Tensor) {
        let x = self.value(a).clone();
        let gm = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let [b, c, h, w] = dims4(&x);
        assert_eq!(gm.shape(), &[c]);
        assert_eq!(bt.shape(), &[c]);
        let n = b * h * w;
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                acc += x.data()[base..base + hw].iter().sum::<f64>();
            }
            mean[ci] = acc / n as f64;
            let mut vacc = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    vacc += (x.data()[base + k] - mean[ci]).powi(2);
                }
            }
            var[ci] = vacc / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut norm = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    let nv = (x.data()[base + k] - mean[ci]) * inv_std[ci];
                    norm[base + k] = nv;
                    out[base + k] = nv * gm.data()[ci] + bt.data()[ci];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out);
        let norm_t = Tensor::from_vec(&[b, c, h, w], norm);
        let norm_for_x = norm_t.clone();
        let norm_for_g = norm_t.clone();
        let gm2 = gm.clone();
        let inv_std_x = inv_std.clone();
        let out_var = self.push(
            value,
            vec![
                Edge {
                    parent: a.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let nd = norm_for_x.data();
                        let mut dx = vec![0.0; gd.len()];
                        for ci in 0..c {
                            let mut sum_g = 0.0;
                            let mut sum_gn = 0.0;
                            for bi in 0..b {
                                let base = (bi * c + ci) * hw;
                                for k in 0..hw {
                                    sum_g += gd[base + k];
                                    sum_gn += gd[base + k] * nd[base + k];
                                }
                            }
                            let scale = gm2.data()[ci] * inv_std_x[ci];
                            for bi in 0..b {
                                let base = (bi * c + ci) * hw;
                                for k in 0..hw {
                                    dx[base + k] = scale
                                        * (gd[base + k]
                                            - sum_g / n as f64
                                            - nd[base + k] * sum_gn / n as f64);
                                }
                            }
                        }
                        Tensor::from_vec(&[b, c, h, w], dx)
                    }),
                },
                Edge {
                    parent: gamma.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let nd = norm_for_g.data();
                        let mut dg = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                for k in 0..hw {
                                    dg[ci] += gd[base + k] * nd[base + k];
                                }
                            }
                        }
                        Tensor::from_vec(&[c], dg)
                    }),
                },
                Edge {
                    parent: beta.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let mut db = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                db[ci] += gd[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_vec(&[c], db)
                    }),
                },
            ],
        );
        (out_var, Tensor::from_vec(&[c], mean), Tensor::from_vec(&[c], var))
    }

    /// Batch normalization with frozen running statistics (inference mode).
    pub fn batch_norm_infer(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Var {
        let [b, c, h, w] = dims4(self.value(a));
        assert_eq!(running_mean.shape(), &[c]);
        assert_eq!(running_var.shape(), &[c]);
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * w;
        let x = self.value(a).clone();
        let gm = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let mut out = vec![0.0; x.len()];
        let mut norm = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    let nv = (x.data()[base + k] - running_mean.data()[ci]) * inv_std[ci];
                    norm[base + k] = nv;
                    out[base + k] = nv * gm.data()[ci] + bt.data()[ci];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out);
        let norm_t = Tensor::from_vec(&[b, c, h, w], norm);
        let norm_for_g = norm_t.clone();
        let gm2 = gm.clone();
        let inv_std2 = inv_std.clone();
        self.push(
            value,
            vec![
                Edge {
                    parent: a.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let mut dx = vec![0.0; gd.len()];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                let scale = gm2.data()[ci] * inv_std2[ci];
                                for k in 0..hw {
                                    dx[base + k] = gd[base + k] * scale;
                                }
                            }
                        }
                        Tensor::from_vec(&[b, c, h, w], dx)
                    }),
                },
                Edge {
                    parent: gamma.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let nd = norm_for_g.data();
                        let mut dg = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                for k in 0..hw {
                                    dg[ci] += gd[base + k] * nd[base + k];
                                }
                            }
                        }
                        Tensor::from_vec(&[c], dg)
                    }),
                },
                Edge {
                    parent: beta.0,
                    vjp: Box::new(move |g| {
                        let gd = g.data();
                        let mut db = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                db[ci] += gd[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_vec(&[c], db)
                    }),
                },
            ],
        )
    }

    // ---- spatial kernels (implementations in conv.rs) ----

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).clone();
        let ws = self.value(w).clone();
        let bs = self.value(bias).clone();
        let value = conv::conv2d_forward(&xs, &ws, &bs, stride, pad);
        let (xc, wc) = (xs.clone(), ws.clone());
        let (xg, wg) = (xs, ws);
        self.push(
            value,
            vec![
                Edge {
                    parent: x.0,
                    vjp: Box::new(move |g| conv::conv2d_backward_input(g, &wc, xc.shape(), stride, pad)),
                },
                Edge {
                    parent: w.0,
                    vjp: Box::new(move |g| conv::conv2d_backward_weight(g, &xg, wg.shape(), stride, pad)),
                },
                Edge {
                    parent: bias.0,
                    vjp: Box::new(move |g| conv::conv2d_backward_bias(g)),
                },
            ],
        )
    }

    /// Per-sample dynamic grouped convolution: kernels `(B, G, k, k)` shared
    /// by the `C/G` channels of each group, centered, zero padded, stride 1.
    pub fn dyn_group_conv(&mut self, x: Var, kernels: Var) -> Var {
        let xs = self.value(x).clone();
        let ks = self.value(kernels).clone();
        let [_, gk, kh, kw] = dims4(&ks);
        let value = conv::dyn_group_conv_forward(&xs, &ks);
        let (xc, kc) = (xs.clone(), ks.clone());
        self.push(
            value,
            vec![
                Edge {
                    parent: x.0,
                    vjp: Box::new(move |g| conv::dyn_group_conv_backward_input(g, &kc)),
                },
                Edge {
                    parent: kernels.0,
                    vjp: Box::new(move |g| {
                        conv::dyn_group_conv_backward_kernels(g, &xc, gk, kh, kw)
                    }),
                },
            ],
        )
    }

    pub fn avg_pool2d(&mut self, a: Var, kh: usize, kw: usize) -> Var {
        let xs = self.value(a).clone();
        let value = conv::avg_pool2d_forward(&xs, kh, kw);
        let in_shape = xs.shape().to_vec();
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| conv::avg_pool2d_backward(g, &in_shape, kh, kw)),
            }],
        )
    }

    pub fn upsample_nearest(&mut self, a: Var, fh: usize, fw: usize) -> Var {
        let xs = self.value(a).clone();
        let value = conv::upsample_nearest_forward(&xs, fh, fw);
        let in_shape = xs.shape().to_vec();
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| conv::upsample_nearest_backward(g, &in_shape, fh, fw)),
            }],
        )
    }

    pub fn bilinear_resize(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let xs = self.value(a).clone();
        let value = conv::bilinear_forward(&xs, oh, ow);
        let in_shape = xs.shape().to_vec();
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g| conv::bilinear_backward(g, &in_shape)),
            }],
        )
    }

    // ---- losses ----

    /// Mean absolute difference over all entries.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.shape(), bv.shape(), "l1_mean shapes");
        let n = av.len() as f64;
        let value = Tensor::scalar(
            av.data()
                .iter()
                .zip(bv.data().iter())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n,
        );
        let (a1, b1) = (av.clone(), bv.clone());
        let (a2, b2) = (av, bv);
        self.push(
            value,
            vec![
                Edge {
                    parent: a.0,
                    vjp: Box::new(move |g| {
                        let gs = g.item() / n;
                        a1.zip(&b1, |x, y| gs * signum0(x - y))
                    }),
                },
                Edge {
                    parent: b.0,
                    vjp: Box::new(move |g| {
                        let gs = g.item() / n;
                        a2.zip(&b2, |x, y| -gs * signum0(x - y))
                    }),
                },
            ],
        )
    }

    /// Mean modulus of the unitary 2-D spectrum of `a - b`, per trailing
    /// `(H, W)` plane, averaged over every entry. Equals
    /// `mean(|fft2(a) - fft2(b)|)` by linearity of the transform.
    pub fn spectral_l1_mean(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.shape(), bv.shape(), "spectral_l1_mean shapes");
        let shape = av.shape().to_vec();
        assert!(shape.len() >= 2, "spectral_l1_mean needs trailing (H, W)");
        let w = shape[shape.len() - 1];
        let h = shape[shape.len() - 2];
        let planes = av.len() / (h * w);
        let n = av.len() as f64;

        let mut loss = 0.0;
        // unit phasors of the spectrum entries, reused by the backward pass
        let mut phasors: Vec<Vec<Complex64>> = Vec::with_capacity(planes);
        for p in 0..planes {
            let base = p * h * w;
            let diff: Vec<f64> = (0..h * w)
                .map(|k| av.data()[base + k] - bv.data()[base + k])
                .collect();
            let img = ComplexImage::from_real(h, w, diff).expect("finite plane");
            let spec = fft2(&img).expect("fft of finite plane");
            let mut unit = vec![Complex64::default(); h * w];
            for i in 0..h {
                for j in 0..w {
                    let z = spec.get(i, j);
                    let m = z.norm();
                    loss += m;
                    if m > 0.0 {
                        unit[i * w + j] = z / m;
                    }
                }
            }
            phasors.push(unit);
        }
        let value = Tensor::scalar(loss / n);

        let grad_field = move || -> Tensor {
            // d mean|F d| / dd = Re(F^H u) / n with u the unit phasors
            let mut out = vec![0.0; planes * h * w];
            for (p, unit) in phasors.iter().enumerate() {
                let re: Vec<f64> = unit.iter().map(|c| c.re).collect();
                let im: Vec<f64> = unit.iter().map(|c| c.im).collect();
                let spec = ComplexImage::from_planes(h, w, re, im).expect("finite");
                let back = ifft2(&spec).expect("ifft");
                out[p * h * w..(p + 1) * h * w].copy_from_slice(back.re());
            }
            Tensor::from_vec(&shape, out)
        };
        let field = grad_field();
        let field_b = field.clone();
        self.push(
            value,
            vec![
                Edge {
                    parent: a.0,
                    vjp: Box::new(move |g| field.scale(g.item() / n)),
                },
                Edge {
                    parent: b.0,
                    vjp: Box::new(move |g| field_b.scale(-g.item() / n)),
                },
            ],
        )
    }
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected rank-2, got {s:?}");
    (s[0], s[1])
}

pub(crate) fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected rank-3, got {s:?}");
    (s[0], s[1], s[2])
}

pub(crate) fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    assert_eq!(axes.len(), in_shape.len(), "permute rank mismatch");
    let rank = axes.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // input stride per output axis; walk output coords as an odometer and
    // copy the innermost axis as a strided run
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let data = t.data();
    let mut out = Vec::with_capacity(t.len());
    if rank == 0 {
        return Tensor::from_vec(&out_shape, data.to_vec());
    }
    let inner_n = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut base = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_n]);
        } else {
            let mut src = base;
            for _ in 0..inner_n {
                out.push(data[src]);
                src += inner_stride;
            }
        }
        // advance the odometer over the outer axes
        for i in (0..rank - 1).rev() {
            idx[i] += 1;
            base += strides[i];
            if idx[i] < out_shape[i] {
                break;
            }
            base -= strides[i] * out_shape[i];
            idx[i] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn roll_tensor(t: &Tensor, dy: i64, dx: i64) -> Tensor {
    let s = t.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let data = t.data();
    let mut out = vec![0.0; t.len()];
    let wrap = |v: i64, n: usize| -> usize { (v.rem_euclid(n as i64)) as usize };
    for bi in 0..b {
        for y in 0..h {
            let sy = wrap(y as i64 - dy, h);
            for x in 0..w {
                let sx = wrap(x as i64 - dx, w);
                let dst = ((bi * h + y) * w + x) * c;
                let src = ((bi * h + sy) * w + sx) * c;
                out[dst..dst + c].copy_from_slice(&data[src..src + c]);
            }
        }
    }
    Tensor::from_vec(s, out)
}
