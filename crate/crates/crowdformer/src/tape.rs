//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; the
//! tape is rebuilt from scratch every training step. [`Var`] is an index into
//! the tape. Shape misuse is a programmer error and panics; non-finite values
//! produced by any op abort immediately rather than propagating.

use crate::par::for_each_chunk_mut;
use crate::tensor::{window_count, Tensor};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        assert!(value.is_finite(), "non-finite leaf value");
        self.nodes.push(Node { value, parents: vec![], requires_grad, backward: None });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by [`Tape::backward`], if the node required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    fn push(&mut self, op: &str, value: Tensor, parents: Vec<usize>, backward: BackFn) -> Var {
        assert!(value.is_finite(), "non-finite value produced by op `{op}`");
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        self.nodes.push(Node { value, parents, requires_grad, backward });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across repeated
    /// calls until the tape is dropped.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut flowing: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        flowing[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(out_grad) = flowing[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = back(&out_grad, &node.value, &parent_vals);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut flowing[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            // Leaves and intermediate taps keep their accumulated gradient.
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&out_grad),
                slot => *slot = Some(out_grad),
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data);
        self.push("add", out, vec![a.0, b.0], Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "sub",
            out,
            vec![a.0, b.0],
            Box::new(|g, _, _| {
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                vec![g.clone(), neg]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "mul",
            out,
            vec![a.0, b.0],
            Box::new(|g, _, ps| {
                let (a, b) = (ps[0], ps[1]);
                let da = g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let db = g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Tensor::new(a.shape(), da), Tensor::new(a.shape(), db)]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "scale",
            out,
            vec![a.0],
            Box::new(move |g, _, _| {
                let mut d = g.clone();
                d.scale_assign(c);
                vec![d]
            }),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x + c).collect();
        let out = Tensor::new(va.shape(), data);
        self.push("add_const", out, vec![a.0], Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "relu",
            out,
            vec![a.0],
            Box::new(|g, _, ps| {
                let d = g
                    .data()
                    .iter()
                    .zip(ps[0].data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Tensor::new(ps[0].shape(), d)]
            }),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "gelu",
            out,
            vec![a.0],
            Box::new(|g, _, ps| {
                let d = g
                    .data()
                    .iter()
                    .zip(ps[0].data())
                    .map(|(g, &x)| {
                        let t = (C * (x + A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                vec![Tensor::new(ps[0].shape(), d)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| sigmoid_stable(x)).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "sigmoid",
            out,
            vec![a.0],
            Box::new(|g, out, _| {
                let d = g.data().iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                vec![Tensor::new(out.shape(), d)]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "exp",
            out,
            vec![a.0],
            Box::new(|g, out, _| {
                let d = g.data().iter().zip(out.data()).map(|(g, e)| g * e).collect();
                vec![Tensor::new(out.shape(), d)]
            }),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "ln",
            out,
            vec![a.0],
            Box::new(|g, _, ps| {
                let d = g.data().iter().zip(ps[0].data()).map(|(g, x)| g / x).collect();
                vec![Tensor::new(ps[0].shape(), d)]
            }),
        )
    }

    /// |x|, with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.abs()).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(
            "abs",
            out,
            vec![a.0],
            Box::new(|g, _, ps| {
                let d = g
                    .data()
                    .iter()
                    .zip(ps[0].data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Tensor::new(ps[0].shape(), d)]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum());
        self.push(
            "sum_all",
            out,
            vec![a.0],
            Box::new(|g, _, ps| vec![Tensor::full(ps[0].shape(), g.item())]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshaped(shape);
        self.push(
            "reshape",
            out,
            vec![a.0],
            Box::new(|g, _, ps| vec![g.reshaped(ps[0].shape())]),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = transpose_val(va);
        self.push("transpose", out, vec![a.0], Box::new(|g, _, _| vec![transpose_val(g)]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (n, m) = as_2d(va.shape());
        assert!(start < end && end <= n, "slice_rows [{start},{end}) of {n}");
        let out = Tensor::new(&[end - start, m], va.data()[start * m..end * m].to_vec());
        self.push(
            "slice_rows",
            out,
            vec![a.0],
            Box::new(move |g, _, ps| {
                let mut d = Tensor::zeros(ps[0].shape());
                let m = ps[0].shape()[1];
                d.data_mut()[start * m..end * m].copy_from_slice(g.data());
                vec![d]
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (n, m) = as_2d(va.shape());
        assert!(start < end && end <= m, "slice_cols [{start},{end}) of {m}");
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * m + start..i * m + end]);
        }
        let out = Tensor::new(&[n, w], data);
        self.push(
            "slice_cols",
            out,
            vec![a.0],
            Box::new(move |g, _, ps| {
                let (n, m) = as_2d(ps[0].shape());
                let w = end - start;
                let mut d = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    d.data_mut()[i * m + start..i * m + end]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![d]
            }),
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (na, ma) = as_2d(va.shape());
        let (nb, mb) = as_2d(vb.shape());
        assert_eq!(ma, mb, "concat_rows width mismatch");
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let out = Tensor::new(&[na + nb, ma], data);
        self.push(
            "concat_rows",
            out,
            vec![a.0, b.0],
            Box::new(move |g, _, _| {
                let ga = Tensor::new(&[na, ma], g.data()[..na * ma].to_vec());
                let gb = Tensor::new(&[nb, ma], g.data()[na * ma..].to_vec());
                vec![ga, gb]
            }),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (na, ma) = as_2d(va.shape());
        let (nb, mb) = as_2d(vb.shape());
        assert_eq!(na, nb, "concat_cols height mismatch");
        let mut data = Vec::with_capacity(na * (ma + mb));
        for i in 0..na {
            data.extend_from_slice(&va.data()[i * ma..(i + 1) * ma]);
            data.extend_from_slice(&vb.data()[i * mb..(i + 1) * mb]);
        }
        let out = Tensor::new(&[na, ma + mb], data);
        self.push(
            "concat_cols",
            out,
            vec![a.0, b.0],
            Box::new(move |g, _, _| {
                let m = ma + mb;
                let mut ga = Tensor::zeros(&[na, ma]);
                let mut gb = Tensor::zeros(&[nb, mb]);
                for i in 0..na {
                    ga.data_mut()[i * ma..(i + 1) * ma]
                        .copy_from_slice(&g.data()[i * m..i * m + ma]);
                    gb.data_mut()[i * mb..(i + 1) * mb]
                        .copy_from_slice(&g.data()[i * m + ma..(i + 1) * m]);
                }
                vec![ga, gb]
            }),
        )
    }

    // ---- broadcast ----

    /// Adds a length-m vector to every row of an [n, m] matrix.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Var {
        let (va, vv) = (self.value(a), self.value(v));
        let (n, m) = as_2d(va.shape());
        assert_eq!(vv.numel(), m, "add_row_vec width mismatch");
        let mut data = va.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += vv.data()[j];
            }
        }
        let out = Tensor::new(&[n, m], data);
        self.push(
            "add_row_vec",
            out,
            vec![a.0, v.0],
            Box::new(move |g, _, ps| {
                let mut dv = Tensor::zeros(ps[1].shape());
                for i in 0..n {
                    for j in 0..m {
                        dv.data_mut()[j] += g.data()[i * m + j];
                    }
                }
                vec![g.clone(), dv]
            }),
        )
    }

    /// Multiplies row i of an [n, m] matrix by v[i].
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Var {
        let (va, vv) = (self.value(a), self.value(v));
        let (n, m) = as_2d(va.shape());
        assert_eq!(vv.numel(), n, "scale_rows height mismatch");
        let mut data = va.data().to_vec();
        for i in 0..n {
            let s = vv.data()[i];
            for x in &mut data[i * m..(i + 1) * m] {
                *x *= s;
            }
        }
        let out = Tensor::new(&[n, m], data);
        self.push(
            "scale_rows",
            out,
            vec![a.0, v.0],
            Box::new(move |g, _, ps| {
                let (a, v) = (ps[0], ps[1]);
                let mut da = g.clone();
                let mut dv = Tensor::zeros(v.shape());
                for i in 0..n {
                    let s = v.data()[i];
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += g.data()[i * m + j] * a.data()[i * m + j];
                        da.data_mut()[i * m + j] *= s;
                    }
                    dv.data_mut()[i] = acc;
                }
                vec![da, dv]
            }),
        )
    }

    /// Elementwise x / s for a scalar variable s.
    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v / sv).collect();
        let out = Tensor::new(vx.shape(), data);
        self.push(
            "div_by_scalar",
            out,
            vec![x.0, s.0],
            Box::new(move |g, out, _| {
                let dx = g.data().iter().map(|g| g / sv).collect();
                let ds = -g.data().iter().zip(out.data()).map(|(g, o)| g * o).sum::<f64>() / sv;
                vec![Tensor::new(out.shape(), dx), Tensor::scalar(ds)]
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = matmul_val(va, vb);
        self.push(
            "matmul",
            out,
            vec![a.0, b.0],
            Box::new(|g, _, ps| {
                let (a, b) = (ps[0], ps[1]);
                vec![matmul_nt(g, b), matmul_tn(a, g)]
            }),
        )
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = softmax_rows_val(va);
        self.push(
            "softmax_rows",
            out,
            vec![a.0],
            Box::new(|g, out, _| {
                let (n, m) = as_2d(out.shape());
                let mut d = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let s = &out.data()[i * m..(i + 1) * m];
                    let go = &g.data()[i * m..(i + 1) * m];
                    let dot: f64 = s.iter().zip(go).map(|(s, g)| s * g).sum();
                    for j in 0..m {
                        d.data_mut()[i * m + j] = s[j] * (go[j] - dot);
                    }
                }
                vec![d]
            }),
        )
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, d) = as_2d(vx.shape());
        assert_eq!(vg.numel(), d, "layer_norm gamma width");
        assert_eq!(vb.numel(), d, "layer_norm beta width");
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &vx.data()[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mu) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(&[n, d], data);
        self.push(
            "layer_norm",
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |g, _, ps| {
                let (x, gamma) = (ps[0], ps[1]);
                let (n, d) = as_2d(x.shape());
                let df = d as f64;
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgamma = Tensor::zeros(ps[1].shape());
                let mut dbeta = Tensor::zeros(ps[2].shape());
                for i in 0..n {
                    let row = &x.data()[i * d..(i + 1) * d];
                    let go = &g.data()[i * d..(i + 1) * d];
                    let mu = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / df;
                    let inv = 1.0 / (var + EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let dxhat: Vec<f64> =
                        go.iter().zip(gamma.data()).map(|(g, w)| g * w).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx.data_mut()[i * d + j] = inv / df
                            * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        dgamma.data_mut()[j] += go[j] * xhat[j];
                        dbeta.data_mut()[j] += go[j];
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    // ---- window ops ----

    /// Sliding-window extraction: [c, h, w] -> [N, c*k*k] with zero padding.
    /// Token layout is channel-major, then window row, then window column.
    pub fn unfold(&mut self, x: Var, k: usize, s: usize, p: usize) -> Var {
        let vx = self.value(x);
        let out = unfold_val(vx, k, s, p);
        self.push(
            "unfold",
            out,
            vec![x.0],
            Box::new(move |g, _, ps| {
                let shape = ps[0].shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let gh = window_count(h, k, s, p).unwrap();
                let gw = window_count(w, k, s, p).unwrap();
                let mut dx = Tensor::zeros(shape);
                for gy in 0..gh {
                    for gx in 0..gw {
                        let row = (gy * gw + gx) * c * k * k;
                        for ci in 0..c {
                            for dy in 0..k {
                                let y = (gy * s + dy) as isize - p as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for dx_ in 0..k {
                                    let xx = (gx * s + dx_) as isize - p as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    dx.data_mut()[(ci * h + y as usize) * w + xx as usize] +=
                                        g.data()[row + (ci * k + dy) * k + dx_];
                                }
                            }
                        }
                    }
                }
                vec![dx]
            }),
        )
    }

    /// 2-D convolution: x [cin, h, w], w [cout, cin, k, k], b [cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let out = conv2d_val(vx, vw, vb, stride, pad);
        self.push(
            "conv2d",
            out,
            vec![x.0, w.0, b.0],
            Box::new(move |g, _, ps| conv2d_back(g, ps[0], ps[1], stride, pad)),
        )
    }

    /// 2-D transposed convolution: x [cin, h, w], w [cin, cout, k, k], b [cout].
    /// Output spatial size is (h-1)*stride - 2*pad + k.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let out = conv_transpose2d_val(vx, vw, vb, stride, pad);
        self.push(
            "conv_transpose2d",
            out,
            vec![x.0, w.0, b.0],
            Box::new(move |g, _, ps| conv_transpose2d_back(g, ps[0], ps[1], stride, pad)),
        )
    }

    /// Average pooling over non-padded k x k windows with the given stride.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, s: usize) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        assert_eq!(shape.len(), 3, "avg_pool2d expects [c, h, w]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let ho = window_count(h, k, s, 0).expect("pool window larger than input");
        let wo = window_count(w, k, s, 0).expect("pool window larger than input");
        let norm = 1.0 / (k * k) as f64;
        let mut data = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += vx.data()[(ci * h + oy * s + dy) * w + ox * s + dx];
                        }
                    }
                    data[(ci * ho + oy) * wo + ox] = acc * norm;
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], data);
        self.push(
            "avg_pool2d",
            out,
            vec![x.0],
            Box::new(move |g, _, ps| {
                let shape = ps[0].shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let ho = window_count(h, k, s, 0).unwrap();
                let wo = window_count(w, k, s, 0).unwrap();
                let norm = 1.0 / (k * k) as f64;
                let mut dx = Tensor::zeros(shape);
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g.data()[(ci * ho + oy) * wo + ox] * norm;
                            for dy in 0..k {
                                for dx_ in 0..k {
                                    dx.data_mut()[(ci * h + oy * s + dy) * w + ox * s + dx_] += go;
                                }
                            }
                        }
                    }
                }
                vec![dx]
            }),
        )
    }

    // ---- fused Sinkhorn steps ----
    //
    // The n x n softmax matrices inside the unrolled iterations are recomputed
    // in backward from the stored potentials, keeping tape memory at O(n) per
    // half-step instead of O(n^2).

    /// One log-domain Sinkhorn half-step: f_i = log_a_i - lse_j(logK_ij + g_j).
    /// `log_kernel` is -C/eps for the row update, its transpose for the column
    /// update.
    pub fn sinkhorn_half_step(&mut self, g: Var, log_a: Var, log_kernel: Rc<Tensor>) -> Var {
        let (n, m) = as_2d(log_kernel.shape());
        let vg = self.value(g);
        let vla = self.value(log_a);
        assert_eq!(vg.numel(), m, "sinkhorn_half_step: g length");
        assert_eq!(vla.numel(), n, "sinkhorn_half_step: log_a length");
        let mut data = vec![0.0; n];
        {
            let gd = vg.data();
            let la = vla.data();
            let kd = log_kernel.data();
            for (i, out) in data.iter_mut().enumerate() {
                *out = la[i] - lse_row(&kd[i * m..(i + 1) * m], gd);
            }
        }
        let out = Tensor::new(&[n], data);
        let kern = Rc::clone(&log_kernel);
        self.push(
            "sinkhorn_half_step",
            out,
            vec![g.0, log_a.0],
            Box::new(move |gout, fval, ps| {
                let (gvec, la) = (ps[0], ps[1]);
                let kd = kern.data();
                let mut dg = Tensor::zeros(gvec.shape());
                for i in 0..n {
                    let lse = la.data()[i] - fval.data()[i];
                    let gi = gout.data()[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let krow = &kd[i * m..(i + 1) * m];
                    let gd = gvec.data();
                    let dgd = dg.data_mut();
                    for j in 0..m {
                        let e = krow[j] + gd[j] - lse;
                        if e > EXP_CUTOFF {
                            dgd[j] -= gi * e.exp();
                        }
                    }
                }
                vec![dg, gout.clone()]
            }),
        )
    }

    /// Grid variant of [`Tape::sinkhorn_half_step`] for separable squared-
    /// Euclidean costs: logK_(yi,xi),(yj,xj) = ky[yi][yj] + kx[xi][xj]. The
    /// log-sum-exp factorizes into two 1-D stages, O(n(h+w)) per step.
    pub fn sinkhorn_half_step_grid(
        &mut self,
        g: Var,
        log_a: Var,
        ky: Rc<Tensor>,
        kx: Rc<Tensor>,
    ) -> Var {
        let (h, w) = (ky.shape()[0], kx.shape()[0]);
        assert_eq!(ky.shape(), &[h, h]);
        assert_eq!(kx.shape(), &[w, w]);
        let n = h * w;
        assert_eq!(self.value(g).numel(), n, "sinkhorn_half_step_grid: g length");
        assert_eq!(self.value(log_a).numel(), n, "sinkhorn_half_step_grid: log_a length");
        // T[yj][xi] = lse_xj(kx[xi][xj] + g[yj][xj])
        let mut t = vec![0.0; n];
        {
            let gd = self.value(g).data();
            for yj in 0..h {
                let grow = &gd[yj * w..(yj + 1) * w];
                for xi in 0..w {
                    t[yj * w + xi] = lse_row(&kx.data()[xi * w..(xi + 1) * w], grow);
                }
            }
        }
        // f[yi][xi] = log_a[yi][xi] - lse_yj(ky[yi][yj] + T[yj][xi])
        let mut data = vec![0.0; n];
        {
            let la = self.value(log_a).data();
            for yi in 0..h {
                let krow = &ky.data()[yi * h..(yi + 1) * h];
                for xi in 0..w {
                    let mut mx = f64::NEG_INFINITY;
                    for yj in 0..h {
                        let v = krow[yj] + t[yj * w + xi];
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut acc = 0.0;
                    for yj in 0..h {
                        let e = krow[yj] + t[yj * w + xi] - mx;
                        if e > EXP_CUTOFF {
                            acc += e.exp();
                        }
                    }
                    data[yi * w + xi] = la[yi * w + xi] - (mx + acc.ln());
                }
            }
        }
        let out = Tensor::new(&[n], data);
        let (kyc, kxc) = (Rc::clone(&ky), Rc::clone(&kx));
        self.push(
            "sinkhorn_half_step_grid",
            out,
            vec![g.0, log_a.0],
            Box::new(move |gout, fval, ps| {
                let (gvec, la) = (ps[0], ps[1]);
                let gd = gvec.data();
                let df = gout.data();
                // L[yi][xi] = la - f; P2 = exp(ky + T - L) softmax over yj;
                // P1 = exp(kx + g - T) softmax over xj; S = P2 * P1.
                let mut l = vec![0.0; n];
                for i in 0..n {
                    l[i] = la.data()[i] - fval.data()[i];
                }
                // M[yj][xi] = sum_yi df[yi][xi] * exp(ky[yi][yj] + T[yj][xi] - L[yi][xi])
                let mut mbuf = vec![0.0; n];
                for yj in 0..h {
                    for xi in 0..w {
                        let tv = t[yj * w + xi];
                        let mut acc = 0.0;
                        for yi in 0..h {
                            let d = df[yi * w + xi];
                            if d == 0.0 {
                                continue;
                            }
                            let e = kyc.data()[yi * h + yj] + tv - l[yi * w + xi];
                            if e > EXP_CUTOFF {
                                acc += d * e.exp();
                            }
                        }
                        mbuf[yj * w + xi] = acc;
                    }
                }
                // dg[yj][xj] = -sum_xi M[yj][xi] * exp(kx[xi][xj] + g[yj][xj] - T[yj][xi])
                let mut dg = Tensor::zeros(gvec.shape());
                for yj in 0..h {
                    for xj in 0..w {
                        let gv = gd[yj * w + xj];
                        let mut acc = 0.0;
                        for xi in 0..w {
                            let mv = mbuf[yj * w + xi];
                            if mv == 0.0 {
                                continue;
                            }
                            let e = kxc.data()[xi * w + xj] + gv - t[yj * w + xi];
                            if e > EXP_CUTOFF {
                                acc += mv * e.exp();
                            }
                        }
                        dg.data_mut()[yj * w + xj] = -acc;
                    }
                }
                vec![dg, gout.clone()]
            }),
        )
    }

    /// Transport plan from dual potentials: P_ij = exp(logK_ij + f_i + g_j).
    pub fn sinkhorn_plan_from_potentials(&mut self, f: Var, g: Var, log_kernel: Rc<Tensor>) -> Var {
        let (n, m) = as_2d(log_kernel.shape());
        let (vf, vg) = (self.value(f), self.value(g));
        assert_eq!(vf.numel(), n);
        assert_eq!(vg.numel(), m);
        let mut data = vec![0.0; n * m];
        let kd = log_kernel.data();
        for i in 0..n {
            let fi = vf.data()[i];
            for j in 0..m {
                let e = kd[i * m + j] + fi + vg.data()[j];
                data[i * m + j] = if e > EXP_CUTOFF { e.exp() } else { 0.0 };
            }
        }
        let out = Tensor::new(&[n, m], data);
        self.push(
            "sinkhorn_plan",
            out,
            vec![f.0, g.0],
            Box::new(move |gout, plan, ps| {
                let mut df = Tensor::zeros(ps[0].shape());
                let mut dg = Tensor::zeros(ps[1].shape());
                for i in 0..n {
                    for j in 0..m {
                        let v = gout.data()[i * m + j] * plan.data()[i * m + j];
                        df.data_mut()[i] += v;
                        dg.data_mut()[j] += v;
                    }
                }
                vec![df, dg]
            }),
        )
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lse_row(krow: &[f64], g: &[f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for (k, gv) in krow.iter().zip(g) {
        let v = k + gv;
        if v > mx {
            mx = v;
        }
    }
    let mut acc = 0.0;
    for (k, gv) in krow.iter().zip(g) {
        let e = k + gv - mx;
        if e > EXP_CUTOFF {
            acc += e.exp();
        }
    }
    mx + acc.ln()
}

/// Exponents this far below a row's maximum underflow past f64 epsilon of the
/// dominating term; skipping them is value-neutral and saves most exp calls.
const EXP_CUTOFF: f64 = -37.0;

pub(crate) fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n, m] => (*n, *m),
        [n] => (1, *n),
        _ => panic!("expected a matrix or vector, got shape {shape:?}"),
    }
}

// ---- value-level kernels (shared by forward and backward) ----

pub fn matmul_val(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = as_2d(a.shape());
    let (k2, m) = as_2d(b.shape());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = Tensor::zeros(&[n, m]);
    let (ad, bd) = (a.data(), b.data());
    for_each_chunk_mut(out.data_mut(), m, |i, row| {
        for kk in 0..k {
            let aik = ad[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * m..(kk + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    out
}

/// a * b^T
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = as_2d(a.shape());
    let (m, k2) = as_2d(b.shape());
    assert_eq!(k, k2);
    let mut out = Tensor::zeros(&[n, m]);
    let (ad, bd) = (a.data(), b.data());
    for_each_chunk_mut(out.data_mut(), m, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// a^T * b
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = as_2d(a.shape());
    let (n2, m) = as_2d(b.shape());
    assert_eq!(n, n2);
    let mut out = Tensor::zeros(&[k, m]);
    let (ad, bd) = (a.data(), b.data());
    for_each_chunk_mut(out.data_mut(), m, |kk, row| {
        for i in 0..n {
            let aik = ad[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[i * m..(i + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    out
}

fn transpose_val(a: &Tensor) -> Tensor {
    let (n, m) = as_2d(a.shape());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..n {
        for j in 0..m {
            out.data_mut()[j * n + i] = a.data()[i * m + j];
        }
    }
    out
}

pub fn softmax_rows_val(a: &Tensor) -> Tensor {
    let (n, m) = as_2d(a.shape());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let row = &a.data()[i * m..(i + 1) * m];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let orow = &mut out.data_mut()[i * m..(i + 1) * m];
        let mut acc = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            acc += *o;
        }
        for o in orow.iter_mut() {
            *o /= acc;
        }
    }
    out
}

pub fn unfold_val(x: &Tensor, k: usize, s: usize, p: usize) -> Tensor {
    let shape = x.shape();
    assert_eq!(shape.len(), 3, "unfold expects [c, h, w]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let gh = window_count(h, k, s, p)
        .unwrap_or_else(|| panic!("unfold window k={k} larger than padded height {h}+2*{p}"));
    let gw = window_count(w, k, s, p)
        .unwrap_or_else(|| panic!("unfold window k={k} larger than padded width {w}+2*{p}"));
    let row_len = c * k * k;
    let mut out = Tensor::zeros(&[gh * gw, row_len]);
    let xd = x.data();
    for_each_chunk_mut(out.data_mut(), row_len, |j, row| {
        let (gy, gx) = (j / gw, j % gw);
        for ci in 0..c {
            for dy in 0..k {
                let y = (gy * s + dy) as isize - p as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let xx = (gx * s + dx) as isize - p as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    row[(ci * k + dy) * k + dx] = xd[(ci * h + y as usize) * w + xx as usize];
                }
            }
        }
    });
    out
}

fn conv2d_val(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv2d input [cin, h, w]");
    assert_eq!(ws.len(), 4, "conv2d weight [cout, cin, k, k]");
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], cin, "conv2d channel mismatch");
    assert_eq!(ws[3], k, "conv2d square kernel");
    assert_eq!(b.numel(), cout, "conv2d bias length");
    let ho = window_count(h, k, stride, pad).expect("conv2d kernel larger than padded input");
    let wo = window_count(wd, k, stride, pad).expect("conv2d kernel larger than padded input");
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    for_each_chunk_mut(out.data_mut(), ho * wo, |co, plane| {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bd[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx >= wd as isize {
                                continue;
                            }
                            acc += xd[(ci * h + y as usize) * wd + xx as usize]
                                * wdat[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                plane[oy * wo + ox] = acc;
            }
        }
    });
    out
}

fn conv2d_back(g: &Tensor, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    let gs = g.shape();
    let (ho, wo) = (gs[1], gs[2]);
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(&[cout]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = gd[(co * ho + oy) * wo + ox];
                db.data_mut()[co] += go;
                if go == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx >= wd as isize {
                                continue;
                            }
                            let xi = (ci * h + y as usize) * wd + xx as usize;
                            let wi = ((co * cin + ci) * k + ky) * k + kx;
                            dx.data_mut()[xi] += go * wdat[wi];
                            dw.data_mut()[wi] += go * xd[xi];
                        }
                    }
                }
            }
        }
    }
    vec![dx, dw, db]
}

fn conv_transpose2d_val(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv_transpose2d input [cin, h, w]");
    assert_eq!(ws.len(), 4, "conv_transpose2d weight [cin, cout, k, k]");
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[1], ws[2]);
    assert_eq!(ws[0], cin, "conv_transpose2d channel mismatch");
    assert_eq!(b.numel(), cout);
    let ho = (h - 1) * stride + k - 2 * pad;
    let wo = (wd - 1) * stride + k - 2 * pad;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    for_each_chunk_mut(out.data_mut(), ho * wo, |co, plane| {
        for (idx, o) in plane.iter_mut().enumerate() {
            let (oy, ox) = (idx / wo, idx % wo);
            let mut acc = bd[co];
            for ky in 0..k {
                let num_y = oy + pad;
                if num_y < ky || (num_y - ky) % stride != 0 {
                    continue;
                }
                let y = (num_y - ky) / stride;
                if y >= h {
                    continue;
                }
                for kx in 0..k {
                    let num_x = ox + pad;
                    if num_x < kx || (num_x - kx) % stride != 0 {
                        continue;
                    }
                    let xx = (num_x - kx) / stride;
                    if xx >= wd {
                        continue;
                    }
                    for ci in 0..cin {
                        acc += xd[(ci * h + y) * wd + xx]
                            * wdat[((ci * cout + co) * k + ky) * k + kx];
                    }
                }
            }
            *o = acc;
        }
    });
    out
}

fn conv_transpose2d_back(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Vec<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[1], ws[2]);
    let gs = g.shape();
    let (ho, wo) = (gs[1], gs[2]);
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(&[cout]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for co in 0..cout {
        for v in gd[co * ho * wo..(co + 1) * ho * wo].iter() {
            db.data_mut()[co] += v;
        }
    }
    for ci in 0..cin {
        for y in 0..h {
            for xx in 0..wd {
                let xv = xd[(ci * h + y) * wd + xx];
                for co in 0..cout {
                    for ky in 0..k {
                        let oy = y * stride + ky;
                        if oy < pad || oy - pad >= ho {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = xx * stride + kx;
                            if ox < pad || ox - pad >= wo {
                                continue;
                            }
                            let go = gd[(co * ho + oy - pad) * wo + (ox - pad)];
                            let wi = ((ci * cout + co) * k + ky) * k + kx;
                            dx.data_mut()[(ci * h + y) * wd + xx] += go * wdat[wi];
                            dw.data_mut()[wi] += go * xv;
                        }
                    }
                }
            }
        }
    }
    vec![dx, dw, db]
}
