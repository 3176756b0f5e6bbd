//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and, if any input is
//! tracked, a closure mapping the output gradient to input gradients. A tape
//! can be differentiated several times from different scalar roots, which the
//! multi-loss student step relies on.

use std::cell::RefCell;
use std::rc::Rc;

use crate::linalg::{softmax_in_place, EPS};
use crate::tensor::{dot, gemm, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of one scalar root with respect to the tape's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero when `v` does not influence the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let tracked = t.requires_grad();
        self.insert(t, Vec::new(), None, tracked)
    }

    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.insert(t, Vec::new(), None, true)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.insert(t, Vec::new(), None, false)
    }

    fn insert(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        tracked: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let tracked = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].tracked)
        };
        let bw: Option<BackwardFn> = if tracked { Some(Box::new(backward)) } else { None };
        self.insert(value, ids, bw, tracked)
    }

    /// Differentiates the scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].tracked {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_grads = bw(&g, &need);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &n) in node.parents.iter().zip(parent_grads).zip(&need) {
                let (Some(pg), true) = (pg, n) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

fn shaped(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape.to_vec(), data)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn same_shape(&self, other: &Var<'t>, op: &str) {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "add");
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape
            .push(v, &[*self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "sub");
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.push(v, &[*self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        })
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "mul");
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.tape.push(v, &[*self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |x, y| x * y)),
                need[1].then(|| g.zip_map(&a, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let v = self.value().map(|x| x * k);
        self.tape.push(v, &[*self], move |g, _| vec![Some(g.map(|x| x * k))])
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        let v = self.value().map(|x| x + k);
        self.tape.push(v, &[*self], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|a| a.max(0.0));
        self.tape.push(v, &[*self], move |g, _| {
            vec![Some(g.zip_map(&x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid));
        let saved = y.clone();
        self.tape.push((*y).clone(), &[*self], move |g, _| {
            vec![Some(g.zip_map(&saved, |gi, s| gi * s * (1.0 - s)))]
        })
    }

    pub fn abs(&self) -> Var<'t> {
        let x = self.value();
        let v = x.map(f64::abs);
        self.tape.push(v, &[*self], move |g, _| {
            vec![Some(g.zip_map(&x, |gi, xi| gi * sign0(xi)))]
        })
    }

    /// `ln(x + EPS)`.
    pub fn ln_eps(&self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|a| (a + EPS).ln());
        self.tape.push(v, &[*self], move |g, _| {
            vec![Some(g.zip_map(&x, |gi, xi| gi / (xi + EPS)))]
        })
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(Tensor::scalar(x.sum()), &[*self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over the last axis, keeping it with extent 1.
    pub fn row_mean(&self) -> Var<'t> {
        let x = self.value();
        let c = x.last_dim();
        let mut shape = x.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        let v: Vec<f64> = x.data().chunks(c).map(|r| r.iter().sum::<f64>() / c as f64).collect();
        let in_shape = x.shape().to_vec();
        self.tape.push(shaped(&shape, v), &[*self], move |g, _| {
            let mut out = Vec::with_capacity(g.len() * c);
            for &gi in g.data() {
                out.extend(std::iter::repeat(gi / c as f64).take(c));
            }
            vec![Some(shaped(&in_shape, out))]
        })
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let v = (*x).clone().reshape(shape).expect("reshape extent");
        self.tape.push(v, &[*self], move |g, _| {
            vec![Some(g.clone().reshape(&in_shape).expect("reshape extent"))]
        })
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.push(v, &[*self], |g, _| vec![Some(g.transpose())])
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, p, q) = (a.rows(), a.cols(), b.cols());
        assert_eq!(m, b.rows(), "concat_cols row mismatch");
        let mut v = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            v.extend_from_slice(a.row(r));
            v.extend_from_slice(b.row(r));
        }
        self.tape.push(shaped(&[m, p + q], v), &[*self, other], move |g, need| {
            let ga = need[0].then(|| {
                shaped(&[m, p], (0..m).flat_map(|r| g.row(r)[..p].to_vec()).collect())
            });
            let gb = need[1].then(|| {
                shaped(&[m, q], (0..m).flat_map(|r| g.row(r)[p..].to_vec()).collect())
            });
            vec![ga, gb]
        })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let v: Vec<f64> = (0..m).flat_map(|r| x.row(r)[start..end].to_vec()).collect();
        self.tape.push(shaped(&[m, w], v), &[*self], move |g, _| {
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                out[r * n + start..r * n + end].copy_from_slice(g.row(r));
            }
            vec![Some(shaped(&[m, n], out))]
        })
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = a.matmul(&b).expect("matmul shapes");
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        self.tape.push(v, &[*self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut out, 0.0);
                shaped(&[m, k], out)
            });
            let gb = need[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut out, 0.0);
                shaped(&[k, n], out)
            });
            vec![ga, gb]
        })
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let c = x.last_dim();
        assert_eq!(b.len(), c, "add_bias width");
        let mut v = x.data().to_vec();
        for row in v.chunks_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(a, bb)| *a += bb);
        }
        let b_shape = b.shape().to_vec();
        self.tape.push(shaped(x.shape(), v), &[*self, bias], move |g, need| {
            let gb = need[1].then(|| shaped(&b_shape, column_sums(g.data(), c)));
            vec![need[0].then(|| g.clone()), gb]
        })
    }

    /// Multiplies by a vector along the last axis.
    pub fn mul_bias(&self, scale: Var<'t>) -> Var<'t> {
        let (x, s) = (self.value(), scale.value());
        let c = x.last_dim();
        assert_eq!(s.len(), c, "mul_bias width");
        let mut v = x.data().to_vec();
        for row in v.chunks_mut(c) {
            row.iter_mut().zip(s.data()).for_each(|(a, ss)| *a *= ss);
        }
        let s_shape = s.shape().to_vec();
        self.tape.push(shaped(x.shape(), v), &[*self, scale], move |g, need| {
            let gx = need[0].then(|| {
                let mut out = g.data().to_vec();
                for row in out.chunks_mut(c) {
                    row.iter_mut().zip(s.data()).for_each(|(a, ss)| *a *= ss);
                }
                shaped(x.shape(), out)
            });
            let gs = need[1].then(|| {
                let prod: Vec<f64> = g.data().iter().zip(x.data()).map(|(a, b)| a * b).collect();
                shaped(&s_shape, column_sums(&prod, c))
            });
            vec![gx, gs]
        })
    }

    /// Scales row `r` (leading axis) by the constant `factors[r]`.
    pub fn scale_rows(&self, factors: Vec<f64>) -> Var<'t> {
        let x = self.value();
        let per = x.len() / x.shape()[0];
        assert_eq!(factors.len(), x.shape()[0], "scale_rows length");
        let apply = move |d: &[f64], f: &[f64]| -> Vec<f64> {
            d.chunks(per).zip(f).flat_map(|(r, &k)| r.iter().map(move |v| v * k)).collect()
        };
        let v = apply(x.data(), &factors);
        let shape = x.shape().to_vec();
        self.tape.push(shaped(&shape, v), &[*self], move |g, _| {
            vec![Some(shaped(&shape, apply(g.data(), &factors)))]
        })
    }

    /// `x / (‖x‖ + EPS)` along the last axis.
    pub fn normalize_rows(&self) -> Var<'t> {
        let x = self.value();
        let c = x.last_dim();
        let norms: Vec<f64> = x.data().chunks(c).map(|r| dot(r, r).sqrt()).collect();
        let v: Vec<f64> = x
            .data()
            .chunks(c)
            .zip(&norms)
            .flat_map(|(r, &n)| r.iter().map(move |a| a / (n + EPS)))
            .collect();
        self.tape.push(shaped(x.shape(), v), &[*self], move |g, _| {
            let mut out = Vec::with_capacity(g.len());
            for ((gr, xr), &n) in g.data().chunks(c).zip(x.data().chunks(c)).zip(&norms) {
                let r = n + EPS;
                let coef = if n > 0.0 { dot(xr, gr) / (r * r * n) } else { 0.0 };
                out.extend(gr.iter().zip(xr).map(|(gi, xi)| gi / r - xi * coef));
            }
            vec![Some(shaped(x.shape(), out))]
        })
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let c = x.last_dim();
        let mut y = x.data().to_vec();
        y.chunks_mut(c).for_each(softmax_in_place);
        let y = Rc::new(shaped(x.shape(), y));
        let saved = y.clone();
        self.tape.push((*y).clone(), &[*self], move |g, _| {
            let mut out = Vec::with_capacity(g.len());
            for (gr, yr) in g.data().chunks(c).zip(saved.data().chunks(c)) {
                let inner = dot(gr, yr);
                out.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - inner)));
            }
            vec![Some(shaped(saved.shape(), out))]
        })
    }

    // ---- relational ops over a batch of N row vectors ----------------

    /// `N x K -> N² x K` with row `v·N + w` equal to `h_v − h_w`.
    pub fn pairwise_diff(&self) -> Var<'t> {
        let h = self.value();
        let (n, k) = (h.rows(), h.cols());
        let mut v = Vec::with_capacity(n * n * k);
        for a in 0..n {
            for b in 0..n {
                v.extend(h.row(a).iter().zip(h.row(b)).map(|(x, y)| x - y));
            }
        }
        self.tape.push(shaped(&[n * n, k], v), &[*self], move |g, _| {
            let mut out = vec![0.0; n * k];
            for a in 0..n {
                for b in 0..n {
                    let gr = g.row(a * n + b);
                    for j in 0..k {
                        out[a * k + j] += gr[j];
                        out[b * k + j] -= gr[j];
                    }
                }
            }
            vec![Some(shaped(&[n, k], out))]
        })
    }

    /// `N x K -> N² x K` with row `v·N + w` equal to `c_v ⊙ c_w`.
    pub fn pairwise_hadamard(&self) -> Var<'t> {
        let c = self.value();
        let (n, k) = (c.rows(), c.cols());
        let mut v = Vec::with_capacity(n * n * k);
        for a in 0..n {
            for b in 0..n {
                v.extend(c.row(a).iter().zip(c.row(b)).map(|(x, y)| x * y));
            }
        }
        self.tape.push(shaped(&[n * n, k], v), &[*self], move |g, _| {
            let mut out = vec![0.0; n * k];
            for a in 0..n {
                for b in 0..n {
                    let gr = g.row(a * n + b);
                    for j in 0..k {
                        out[a * k + j] += gr[j] * c.data()[b * k + j];
                        out[b * k + j] += gr[j] * c.data()[a * k + j];
                    }
                }
            }
            vec![Some(shaped(&[n, k], out))]
        })
    }

    /// `F: N x R x D`, constant `u: N x R` -> `N x D` with row `n = u_nᵀ F_n`.
    pub fn project_rows(&self, u: Tensor) -> Var<'t> {
        let f = self.value();
        let (n, r, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        assert_eq!(u.shape(), &[n, r], "project_rows weights");
        let mut v = vec![0.0; n * d];
        for i in 0..n {
            gemm(1, r, d, u.row(i), false, &f.data()[i * r * d..(i + 1) * r * d], false, &mut v[i * d..(i + 1) * d], 0.0);
        }
        self.tape.push(shaped(&[n, d], v), &[*self], move |g, _| {
            let mut out = vec![0.0; n * r * d];
            for i in 0..n {
                gemm(r, 1, d, u.row(i), false, g.row(i), false, &mut out[i * r * d..(i + 1) * r * d], 0.0);
            }
            vec![Some(shaped(&[n, r, d], out))]
        })
    }

    /// Row-wise sphere-to-plane map `(p + o) / cos(acos(p·o)/2)² − 2o`.
    ///
    /// The derivative of the denominator with respect to `p·o` is exactly 1/2.
    pub fn stereographic_rows(&self, center: Rc<Vec<f64>>) -> Var<'t> {
        let p = self.value();
        let d = p.last_dim();
        assert_eq!(center.len(), d, "stereographic center width");
        let dens: Vec<f64> = p.data().chunks(d).map(|r| stereo_denominator(dot(r, &center))).collect();
        let mut v = Vec::with_capacity(p.len());
        for (r, &den) in p.data().chunks(d).zip(&dens) {
            v.extend(r.iter().zip(center.iter()).map(|(pi, oi)| (pi + oi) / den - 2.0 * oi));
        }
        self.tape.push(shaped(p.shape(), v), &[*self], move |g, _| {
            let mut out = Vec::with_capacity(g.len());
            for ((gr, pr), &den) in g.data().chunks(d).zip(p.data().chunks(d)).zip(&dens) {
                let gp: f64 = gr.iter().zip(pr).zip(center.iter()).map(|((gi, pi), oi)| gi * (pi + oi)).sum();
                let coef = 0.5 * gp / (den * den);
                out.extend(gr.iter().zip(center.iter()).map(|(gi, oi)| gi / den - coef * oi));
            }
            vec![Some(shaped(p.shape(), out))]
        })
    }

    // ---- network layers ----------------------------------------------

    /// NHWC convolution with HWIO weights `[kh, kw, cin, cout]`.
    pub fn conv2d(&self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad);
        let cols = Rc::new(geo.im2col(x.data()));
        let mut out = vec![0.0; geo.out_rows() * geo.cout];
        gemm(geo.out_rows(), geo.patch(), geo.cout, &cols, false, w.data(), false, &mut out, 0.0);
        let out_shape = [geo.n, geo.oh, geo.ow, geo.cout];
        let (x_shape, w_shape) = (x.shape().to_vec(), w.shape().to_vec());
        drop(x);
        self.tape.push(shaped(&out_shape, out), &[*self, weight], move |g, need| {
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; geo.patch() * geo.cout];
                gemm(geo.patch(), geo.out_rows(), geo.cout, &cols, true, g.data(), false, &mut gw, 0.0);
                shaped(&w_shape, gw)
            });
            let gx = need[0].then(|| {
                let mut gcols = vec![0.0; geo.out_rows() * geo.patch()];
                gemm(geo.out_rows(), geo.cout, geo.patch(), g.data(), false, w.data(), true, &mut gcols, 0.0);
                shaped(&x_shape, geo.col2im(&gcols))
            });
            vec![gx, gw]
        })
    }

    /// Batch normalization over every axis but the last, using batch
    /// statistics. Returns the output plus the batch mean and biased variance.
    pub fn batch_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        let x = self.value();
        let c = x.last_dim();
        let m = (x.len() / c) as f64;
        let mean = column_sums(x.data(), c).into_iter().map(|s| s / m).collect::<Vec<_>>();
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        for row in xhat.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let gm = gamma.value();
        let bt = beta.value();
        let mut y = xhat.clone();
        for row in y.chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * gm.data()[j] + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        let g_shape = gm.shape().to_vec();
        let out = self.tape.push(shaped(&shape, y), &[*self, gamma, beta], move |g, need| {
            let gsum = column_sums(g.data(), c);
            let gx_hat: Vec<f64> = g.data().iter().zip(&xhat).map(|(a, b)| a * b).collect();
            let gxsum = column_sums(&gx_hat, c);
            let gx = need[0].then(|| {
                let mut out = Vec::with_capacity(g.len());
                for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        let k = gm.data()[j] * inv_std[j] / m;
                        out.push(k * (m * gr[j] - gsum[j] - hr[j] * gxsum[j]));
                    }
                }
                shaped(&shape, out)
            });
            vec![
                gx,
                need[1].then(|| shaped(&g_shape, gxsum.clone())),
                need[2].then(|| shaped(&g_shape, gsum.clone())),
            ]
        });
        (out, mean, var)
    }

    /// Batch normalization with fixed statistics; differentiable in `x`,
    /// `gamma` and `beta`.
    pub fn batch_norm_fixed(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var<'t> {
        let shift: Vec<f64> = mean.iter().map(|m| -m).collect();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let tape = self.tape;
        let shift = tape.constant(Tensor::from_parts(vec![shift.len()], shift));
        let inv = tape.constant(Tensor::from_parts(vec![inv.len()], inv));
        self.add_bias(shift).mul_bias(inv).mul_bias(gamma).add_bias(beta)
    }

    /// `N x H x W x C -> N x C`.
    pub fn global_avg_pool(&self) -> Var<'t> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let mut v = vec![0.0; n * c];
        for i in 0..n {
            let sums = column_sums(&x.data()[i * hw * c..(i + 1) * hw * c], c);
            for j in 0..c {
                v[i * c + j] = sums[j] / hw as f64;
            }
        }
        self.tape.push(shaped(&[n, c], v), &[*self], move |g, _| {
            let mut out = Vec::with_capacity(n * hw * c);
            for i in 0..n {
                for _ in 0..hw {
                    out.extend(g.row(i).iter().map(|gi| gi / hw as f64));
                }
            }
            vec![Some(shaped(&s, out))]
        })
    }

    /// Mean softmax cross-entropy against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var<'t> {
        let x = self.value();
        let (n, k) = (x.rows(), x.cols());
        assert_eq!(labels.len(), n, "cross_entropy label count");
        let mut probs = x.data().to_vec();
        probs.chunks_mut(k).for_each(softmax_in_place);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "label {y} out of range for {k} classes");
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let labels = labels.to_vec();
        self.tape.push(Tensor::scalar(loss / n as f64), &[*self], move |g, _| {
            let scale = g.item() / n as f64;
            let mut out = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                out[i * k + y] -= 1.0;
            }
            out.iter_mut().for_each(|v| *v *= scale);
            vec![Some(shaped(&[n, k], out))]
        })
    }

    /// Mean over rows of `KLD(softmax(self) ‖ softmax(other))`.
    pub fn kld_softmax_rows(&self, other: Var<'t>) -> Var<'t> {
        let p = self.softmax_rows();
        let q = other.softmax_rows();
        let rows = self.value().len() / self.value().last_dim();
        p.mul(p.ln_eps().sub(q.ln_eps())).sum().scale(1.0 / rows as f64)
    }
}

/// `cos(acos(d) / 2)²`, with `d` clamped into the domain of `acos`.
pub(crate) fn stereo_denominator(d: f64) -> f64 {
    let c = (d.clamp(-1.0, 1.0).acos() / 2.0).cos();
    c * c
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn column_sums(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in data.chunks(c) {
        out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NHWC");
        assert_eq!(w.len(), 4, "conv2d weight must be [kh, kw, cin, cout]");
        assert_eq!(x[3], w[2], "conv2d channel mismatch: input {x:?}, weight {w:?}");
        assert!(stride >= 1);
        let oh = (x[1] + 2 * pad - w[0]) / stride + 1;
        let ow = (x[2] + 2 * pad - w[1]) / stride + 1;
        Self {
            n: x[0],
            h: x[1],
            w: x[2],
            cin: x[3],
            kh: w[0],
            kw: w[1],
            cout: w[3],
            oh,
            ow,
            stride,
            pad,
        }
    }

    fn out_rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Visits `(col offset, input offset)` pairs of every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (b * self.oh + oy) * self.ow + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = row * patch + (ky * self.kw + kx) * self.cin;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.out_rows() * self.patch()];
        let c = self.cin;
        self.for_each_tap(|col, src| cols[col..col + c].copy_from_slice(&x[src..src + c]));
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n * self.h * self.w * self.cin];
        let c = self.cin;
        self.for_each_tap(|col, src| {
            x[src..src + c].iter_mut().zip(&cols[col..col + c]).for_each(|(a, b)| *a += b);
        });
        x
    }
}
