//! Differentiable tensor operations.
//!
//! Shape violations panic with a message naming the operation and both
//! shapes; shape checking at API boundaries is the harness's job.

use std::rc::Rc;

use super::kernels::{col2im_t, im2col_t, mm, mm_nt, mm_ow, mm_tn, mm_tn_ow};
use super::{c, Real, Tensor};

fn check_same_shape<F: Real>(op: &str, a: &Tensor<F>, b: &Tensor<F>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "dimension error in {op}: shapes {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Numerically stable ln(1 + eˣ).
pub(crate) fn softplus_scalar<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl<F: Real> Tensor<F> {
    fn unary(
        &self,
        f: impl Fn(F) -> F,
        // derivative as a function of (input, output)
        df: impl Fn(F, F) -> F + 'static,
    ) -> Tensor<F> {
        let out: Vec<F> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = Rc::new(out);
        let y_for_back = Rc::clone(&y);
        Tensor::from_op_shared(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, grads| {
                let xd = x.data_rc();
                let acc = grads.buf(&x);
                for i in 0..g.len() {
                    acc[i] = acc[i] + g[i] * df(xd[i], y_for_back[i]);
                }
            }),
        )
    }

    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        check_same_shape("add", self, other);
        let out: Vec<F> = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, grads| {
                for t in [&a, &b] {
                    if t.needs_grad() {
                        let acc = grads.buf(t);
                        for i in 0..g.len() {
                            acc[i] = acc[i] + g[i];
                        }
                    }
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        check_same_shape("sub", self, other);
        let out: Vec<F> = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, grads| {
                if a.needs_grad() {
                    let acc = grads.buf(&a);
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i];
                    }
                }
                if b.needs_grad() {
                    let acc = grads.buf(&b);
                    for i in 0..g.len() {
                        acc[i] = acc[i] - g[i];
                    }
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        check_same_shape("mul", self, other);
        let out: Vec<F> = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, grads| {
                if a.needs_grad() {
                    let bd = b.data_rc();
                    let acc = grads.buf(&a);
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] * bd[i];
                    }
                }
                if b.needs_grad() {
                    let ad = a.data_rc();
                    let acc = grads.buf(&b);
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] * ad[i];
                    }
                }
            }),
        )
    }

    pub fn div(&self, other: &Tensor<F>) -> Tensor<F> {
        check_same_shape("div", self, other);
        let out: Vec<F> = self.data().iter().zip(other.data()).map(|(&a, &b)| a / b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, grads| {
                let (ad, bd) = (a.data_rc(), b.data_rc());
                if a.needs_grad() {
                    let acc = grads.buf(&a);
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] / bd[i];
                    }
                }
                if b.needs_grad() {
                    let acc = grads.buf(&b);
                    for i in 0..g.len() {
                        acc[i] = acc[i] - g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                }
            }),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.unary(|x| -x, |_, _| -F::one())
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<F> {
        let sv = c::<F>(s);
        self.unary(move |x| x + sv, |_, _| F::one())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<F> {
        let sv = c::<F>(s);
        self.unary(move |x| x * sv, move |_, _| sv)
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(
            |x| x.max(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.unary(sigmoid_scalar, |_, y| y * (F::one() - y))
    }

    /// x · sigmoid(x). The sigmoid values are kept for the backward pass;
    /// exp is the dominant cost here and recomputing it would double it.
    pub fn silu(&self) -> Tensor<F> {
        let sig: Vec<F> = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let out: Vec<F> = self.data().iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, grads| {
                let xd = x.data_rc();
                let acc = grads.buf(&x);
                for i in 0..g.len() {
                    let s = sig[i];
                    acc[i] = acc[i] + g[i] * s * (F::one() + xd[i] * (F::one() - s));
                }
            }),
        )
    }

    /// tanh-approximated GELU; the derivative matches the approximation.
    pub fn gelu(&self) -> Tensor<F> {
        let k = c::<F>(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = c::<F>(0.044_715);
        let half = c::<F>(0.5);
        let three = c::<F>(3.0);
        self.unary(
            move |x| half * x * (F::one() + (k * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let u = k * (x + a * x * x * x);
                let t = u.tanh();
                let sech2 = F::one() - t * t;
                half * (F::one() + t) + half * x * sech2 * k * (F::one() + three * a * x * x)
            },
        )
    }

    pub fn softplus(&self) -> Tensor<F> {
        self.unary(softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<F> {
        self.unary(|x| x.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        self.unary(|x| x.sqrt(), |_, y| c::<F>(0.5) / y)
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.unary(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    /// Clamp to [0,1]; subgradient passes through on the closed interval and
    /// is zero outside.
    pub fn clamp01(&self) -> Tensor<F> {
        self.unary(
            |x| x.max(F::zero()).min(F::one()),
            |x, _| {
                if x >= F::zero() && x <= F::one() {
                    F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let mut s = F::zero();
        for &x in self.data() {
            s = s + x;
        }
        let x = self.clone();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&x);
                for a in acc.iter_mut() {
                    *a = *a + g[0];
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.len();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "dimension error in reshape: {:?} -> {:?}",
            self.shape(),
            shape
        );
        let x = self.clone();
        Tensor::from_op_shared(
            shape.to_vec(),
            self.data_rc(),
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&x);
                for i in 0..g.len() {
                    acc[i] = acc[i] + g[i];
                }
            }),
        )
    }

    pub fn transpose2d(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "dimension error in transpose2d: shape {:?}", self.shape());
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let x = self.clone();
        Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&x);
                for i in 0..m {
                    for j in 0..n {
                        acc[i * n + j] = acc[i * n + j] + g[j * m + i];
                    }
                }
            }),
        )
    }

    /// Swaps the last two axes of a rank-3 tensor: [b, m, n] -> [b, n, m].
    pub fn transpose_12(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 3, "dimension error in transpose_12: shape {:?}", self.shape());
        let (b, m, n) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let d = self.data();
        let mut out = vec![F::zero(); b * m * n];
        for k in 0..b {
            let base = k * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = d[base + i * n + j];
                }
            }
        }
        let x = self.clone();
        Tensor::from_op(
            vec![b, n, m],
            out,
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&x);
                for k in 0..b {
                    let base = k * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            acc[base + i * n + j] = acc[base + i * n + j] + g[base + j * m + i];
                        }
                    }
                }
            }),
        )
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<F> {
        let shape = self.shape();
        assert!(
            axis < shape.len() && start + len <= shape[axis],
            "dimension error in narrow: axis {axis} range {start}..{} of shape {:?}",
            start + len,
            shape
        );
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let d = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let x = self.clone();
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&x);
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * mid + start) * inner;
                    for i in 0..len * inner {
                        acc[dst + i] = acc[dst + i] + g[src + i];
                    }
                }
            }),
        )
    }

    /// Concatenates two [B,C,H,W] maps along the channel axis.
    pub fn concat_channel(&self, other: &Tensor<F>) -> Tensor<F> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 4
                && sb.len() == 4
                && sa[0] == sb[0]
                && sa[2] == sb[2]
                && sa[3] == sb[3],
            "dimension error in concat_channel: shapes {sa:?} vs {sb:?}"
        );
        let (bsz, c1, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let c2 = sb[1];
        let plane = h * w;
        let mut out = Vec::with_capacity(bsz * (c1 + c2) * plane);
        for b in 0..bsz {
            out.extend_from_slice(&self.data()[b * c1 * plane..(b + 1) * c1 * plane]);
            out.extend_from_slice(&other.data()[b * c2 * plane..(b + 1) * c2 * plane]);
        }
        let (a, bt) = (self.clone(), other.clone());
        Tensor::from_op(
            vec![bsz, c1 + c2, h, w],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, grads| {
                let stride = (c1 + c2) * plane;
                if a.needs_grad() {
                    let acc = grads.buf(&a);
                    for b in 0..bsz {
                        for i in 0..c1 * plane {
                            acc[b * c1 * plane + i] = acc[b * c1 * plane + i] + g[b * stride + i];
                        }
                    }
                }
                if bt.needs_grad() {
                    let acc = grads.buf(&bt);
                    for b in 0..bsz {
                        for i in 0..c2 * plane {
                            acc[b * c2 * plane + i] =
                                acc[b * c2 * plane + i] + g[b * stride + c1 * plane + i];
                        }
                    }
                }
            }),
        )
    }

    /// [m,k] · [k,n]
    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "dimension error in matmul: shapes {sa:?} vs {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        mm(self.data(), other.data(), m, k, n, &mut out);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, grads| {
                if a.needs_grad() {
                    let bd = b.data_rc();
                    let acc = grads.buf(&a);
                    mm_nt(g, &bd, m, n, k, acc); // dA = G · Bᵀ
                }
                if b.needs_grad() {
                    let ad = a.data_rc();
                    let acc = grads.buf(&b);
                    mm_tn(&ad, g, k, m, n, acc); // dB = Aᵀ · G
                }
            }),
        )
    }

    /// Batched [B,m,k] · [B,k,n].
    pub fn bmm(&self, other: &Tensor<F>) -> Tensor<F> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "dimension error in bmm: shapes {sa:?} vs {sb:?}"
        );
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bsz * m * n];
        for i in 0..bsz {
            mm(
                &self.data()[i * m * k..(i + 1) * m * k],
                &other.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            vec![bsz, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, grads| {
                if a.needs_grad() {
                    let bd = b.data_rc();
                    let acc = grads.buf(&a);
                    for i in 0..bsz {
                        mm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut acc[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if b.needs_grad() {
                    let ad = a.data_rc();
                    let acc = grads.buf(&b);
                    for i in 0..bsz {
                        mm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut acc[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }),
        )
    }

    /// Batched [B,m,k] · [B,n,k]ᵀ.
    pub fn bmm_nt(&self, other: &Tensor<F>) -> Tensor<F> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            "dimension error in bmm_nt: shapes {sa:?} vs {sb:?}"
        );
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![F::zero(); bsz * m * n];
        for i in 0..bsz {
            mm_nt(
                &self.data()[i * m * k..(i + 1) * m * k],
                &other.data()[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            vec![bsz, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, grads| {
                if a.needs_grad() {
                    let bd = b.data_rc();
                    let acc = grads.buf(&a);
                    for i in 0..bsz {
                        mm(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut acc[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if b.needs_grad() {
                    let ad = a.data_rc();
                    let acc = grads.buf(&b);
                    for i in 0..bsz {
                        mm_tn(
                            &g[i * m * n..(i + 1) * m * n],
                            &ad[i * m * k..(i + 1) * m * k],
                            n,
                            m,
                            k,
                            &mut acc[i * n * k..(i + 1) * n * k],
                        );
                    }
                }
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<F> {
        let d = *self.shape().last().expect("softmax_last on rank-0 tensor");
        let rows = self.len() / d;
        let x = self.data();
        let mut out = vec![F::zero(); self.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut sum = F::zero();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o = *o / sum;
            }
        }
        let xt = self.clone();
        let y = Rc::new(out);
        let yb = Rc::clone(&y);
        Tensor::from_op_shared(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&xt);
                for r in 0..rows {
                    let yr = &yb[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = F::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot = dot + gv * yv;
                    }
                    for i in 0..d {
                        acc[r * d + i] = acc[r * d + i] + yr[i] * (gr[i] - dot);
                    }
                }
            }),
        )
    }

    /// Layer normalization over the last axis with learned affine.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Tensor<F> {
        let d = *self.shape().last().expect("layer_norm on rank-0 tensor");
        assert!(
            gamma.shape() == [d] && beta.shape() == [d],
            "dimension error in layer_norm: input {:?}, gamma {:?}, beta {:?}",
            self.shape(),
            gamma.shape(),
            beta.shape()
        );
        let rows = self.len() / d;
        let x = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let epsv = c::<F>(eps);
        let nd = c::<F>(d as f64);
        let mut out = vec![F::zero(); self.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut means = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mu = F::zero();
            for &v in row {
                mu = mu + v;
            }
            mu = mu / nd;
            let mut var = F::zero();
            for &v in row {
                var = var + (v - mu) * (v - mu);
            }
            var = var / nd;
            let is = F::one() / (var + epsv).sqrt();
            means[r] = mu;
            inv_std[r] = is;
            for i in 0..d {
                out[r * d + i] = gd[i] * (row[i] - mu) * is + bd[i];
            }
        }
        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, grads| {
                let xd = xt.data_rc();
                let gmd = gt.data_rc();
                // x̂ recomputed from saved statistics.
                for r in 0..rows {
                    let (mu, is) = (means[r], inv_std[r]);
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xd[r * d..(r + 1) * d];
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for i in 0..d {
                        let xh = (xr[i] - mu) * is;
                        let gl = gr[i] * gmd[i];
                        s1 = s1 + gl;
                        s2 = s2 + gl * xh;
                    }
                    let nd = c::<F>(d as f64);
                    if xt.needs_grad() {
                        let acc = grads.buf(&xt);
                        for i in 0..d {
                            let xh = (xr[i] - mu) * is;
                            let gl = gr[i] * gmd[i];
                            acc[r * d + i] = acc[r * d + i] + (gl - s1 / nd - xh * s2 / nd) * is;
                        }
                    }
                    if gt.needs_grad() {
                        let acc = grads.buf(&gt);
                        for i in 0..d {
                            let xh = (xr[i] - mu) * is;
                            acc[i] = acc[i] + gr[i] * xh;
                        }
                    }
                    if bt.needs_grad() {
                        let acc = grads.buf(&bt);
                        for i in 0..d {
                            acc[i] = acc[i] + gr[i];
                        }
                    }
                }
            }),
        )
    }

    /// Group normalization over [B,C,H,W] with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Tensor<F> {
        let s = self.shape();
        assert!(
            s.len() == 4 && s[1] % groups == 0 && gamma.shape() == [s[1]] && beta.shape() == [s[1]],
            "dimension error in group_norm: input {:?}, groups {groups}, gamma {:?}",
            s,
            gamma.shape()
        );
        let (bsz, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let gsize = ch / groups;
        let plane = h * w;
        let glen = gsize * plane;
        let x = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let epsv = c::<F>(eps);
        let nd = c::<F>(glen as f64);
        let mut out = vec![F::zero(); self.len()];
        let mut means = vec![F::zero(); bsz * groups];
        let mut inv_std = vec![F::zero(); bsz * groups];
        for b in 0..bsz {
            for g0 in 0..groups {
                let base = b * ch * plane + g0 * glen;
                let seg = &x[base..base + glen];
                let mut mu = F::zero();
                for &v in seg {
                    mu = mu + v;
                }
                mu = mu / nd;
                let mut var = F::zero();
                for &v in seg {
                    var = var + (v - mu) * (v - mu);
                }
                var = var / nd;
                let is = F::one() / (var + epsv).sqrt();
                means[b * groups + g0] = mu;
                inv_std[b * groups + g0] = is;
                for ci in 0..gsize {
                    let cglob = g0 * gsize + ci;
                    for p in 0..plane {
                        let idx = base + ci * plane + p;
                        out[idx] = gd[cglob] * (x[idx] - mu) * is + bd[cglob];
                    }
                }
            }
        }
        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, grads| {
                let xd = xt.data_rc();
                let gmd = gt.data_rc();
                // Per-channel gamma/beta sums fall out of the s1/s2 pass, so
                // they are collected there instead of in extra sweeps.
                let mut dgamma = vec![F::zero(); ch];
                let mut dbeta = vec![F::zero(); ch];
                for b in 0..bsz {
                    for g0 in 0..groups {
                        let base = b * ch * plane + g0 * glen;
                        let (mu, is) = (means[b * groups + g0], inv_std[b * groups + g0]);
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for ci in 0..gsize {
                            let cglob = g0 * gsize + ci;
                            let gm = gmd[cglob];
                            let mut dg = F::zero();
                            let mut db = F::zero();
                            for p in 0..plane {
                                let idx = base + ci * plane + p;
                                let xh = (xd[idx] - mu) * is;
                                let gl = g[idx] * gm;
                                s1 = s1 + gl;
                                s2 = s2 + gl * xh;
                                dg = dg + g[idx] * xh;
                                db = db + g[idx];
                            }
                            dgamma[cglob] = dgamma[cglob] + dg;
                            dbeta[cglob] = dbeta[cglob] + db;
                        }
                        if xt.needs_grad() {
                            let acc = grads.buf(&xt);
                            for ci in 0..gsize {
                                let cglob = g0 * gsize + ci;
                                let gm = gmd[cglob];
                                for p in 0..plane {
                                    let idx = base + ci * plane + p;
                                    let xh = (xd[idx] - mu) * is;
                                    let gl = g[idx] * gm;
                                    acc[idx] = acc[idx] + (gl - s1 / nd - xh * s2 / nd) * is;
                                }
                            }
                        }
                    }
                }
                if gt.needs_grad() {
                    let acc = grads.buf(&gt);
                    for i in 0..ch {
                        acc[i] = acc[i] + dgamma[i];
                    }
                }
                if bt.needs_grad() {
                    let acc = grads.buf(&bt);
                    for i in 0..ch {
                        acc[i] = acc[i] + dbeta[i];
                    }
                }
            }),
        )
    }

    /// Adds a [D] bias to a tensor whose last axis is D.
    pub fn add_bias_last(&self, bias: &Tensor<F>) -> Tensor<F> {
        let d = *self.shape().last().expect("add_bias_last on rank-0 tensor");
        assert_eq!(
            bias.shape(),
            &[d],
            "dimension error in add_bias_last: input {:?}, bias {:?}",
            self.shape(),
            bias.shape()
        );
        let rows = self.len() / d;
        let bd = bias.data();
        let mut out = Vec::with_capacity(self.len());
        for r in 0..rows {
            for i in 0..d {
                out.push(self.data()[r * d + i] + bd[i]);
            }
        }
        let (xt, bt) = (self.clone(), bias.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, grads| {
                if xt.needs_grad() {
                    let acc = grads.buf(&xt);
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i];
                    }
                }
                if bt.needs_grad() {
                    let acc = grads.buf(&bt);
                    for r in 0..rows {
                        for i in 0..d {
                            acc[i] = acc[i] + g[r * d + i];
                        }
                    }
                }
            }),
        )
    }

    /// Adds a [C] bias to a [B,C,H,W] map.
    pub fn add_bias_channel(&self, bias: &Tensor<F>) -> Tensor<F> {
        let s = self.shape();
        assert!(
            s.len() == 4 && bias.shape() == [s[1]],
            "dimension error in add_bias_channel: input {s:?}, bias {:?}",
            bias.shape()
        );
        let (bsz, ch, plane) = (s[0], s[1], s[2] * s[3]);
        let bd = bias.data();
        let mut out = Vec::with_capacity(self.len());
        for b in 0..bsz {
            for ci in 0..ch {
                let base = (b * ch + ci) * plane;
                for p in 0..plane {
                    out.push(self.data()[base + p] + bd[ci]);
                }
            }
        }
        let (xt, bt) = (self.clone(), bias.clone());
        Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, grads| {
                if xt.needs_grad() {
                    let acc = grads.buf(&xt);
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i];
                    }
                }
                if bt.needs_grad() {
                    let acc = grads.buf(&bt);
                    for b in 0..bsz {
                        for ci in 0..ch {
                            let base = (b * ch + ci) * plane;
                            for p in 0..plane {
                                acc[ci] = acc[ci] + g[base + p];
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Adds a per-sample per-channel vector [B,C] to a [B,C,H,W] map.
    pub fn add_channel_vec(&self, v: &Tensor<F>) -> Tensor<F> {
        let s = self.shape();
        assert!(
            s.len() == 4 && v.shape() == [s[0], s[1]],
            "dimension error in add_channel_vec: input {s:?}, vec {:?}",
            v.shape()
        );
        let (bsz, ch, plane) = (s[0], s[1], s[2] * s[3]);
        let vd = v.data();
        let mut out = Vec::with_capacity(self.len());
        for b in 0..bsz {
            for ci in 0..ch {
                let base = (b * ch + ci) * plane;
                for p in 0..plane {
                    out.push(self.data()[base + p] + vd[b * ch + ci]);
                }
            }
        }
        let (xt, vt) = (self.clone(), v.clone());
        Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |g, grads| {
                if xt.needs_grad() {
                    let acc = grads.buf(&xt);
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i];
                    }
                }
                if vt.needs_grad() {
                    let acc = grads.buf(&vt);
                    for b in 0..bsz {
                        for ci in 0..ch {
                            let base = (b * ch + ci) * plane;
                            let mut s0 = F::zero();
                            for p in 0..plane {
                                s0 = s0 + g[base + p];
                            }
                            acc[b * ch + ci] = acc[b * ch + ci] + s0;
                        }
                    }
                }
            }),
        )
    }

    /// Feature-wise linear modulation of tokens: y[b,n,d] = x·γ[b,d] + β[b,d].
    pub fn film_tokens(&self, gamma: &Tensor<F>, beta: &Tensor<F>) -> Tensor<F> {
        let s = self.shape();
        assert!(
            s.len() == 3 && gamma.shape() == [s[0], s[2]] && beta.shape() == [s[0], s[2]],
            "dimension error in film_tokens: tokens {s:?}, gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        );
        let (bsz, n, d) = (s[0], s[1], s[2]);
        let (gd, bd) = (gamma.data(), beta.data());
        let x = self.data();
        let mut out = Vec::with_capacity(self.len());
        for b in 0..bsz {
            for t in 0..n {
                for i in 0..d {
                    out.push(x[(b * n + t) * d + i] * gd[b * d + i] + bd[b * d + i]);
                }
            }
        }
        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, grads| {
                let xd = xt.data_rc();
                let gmd = gt.data_rc();
                if xt.needs_grad() {
                    let acc = grads.buf(&xt);
                    for b in 0..bsz {
                        for t in 0..n {
                            for i in 0..d {
                                let idx = (b * n + t) * d + i;
                                acc[idx] = acc[idx] + g[idx] * gmd[b * d + i];
                            }
                        }
                    }
                }
                if gt.needs_grad() {
                    let acc = grads.buf(&gt);
                    for b in 0..bsz {
                        for t in 0..n {
                            for i in 0..d {
                                let idx = (b * n + t) * d + i;
                                acc[b * d + i] = acc[b * d + i] + g[idx] * xd[idx];
                            }
                        }
                    }
                }
                if bt.needs_grad() {
                    let acc = grads.buf(&bt);
                    for b in 0..bsz {
                        for t in 0..n {
                            for i in 0..d {
                                acc[b * d + i] = acc[b * d + i] + g[(b * n + t) * d + i];
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Cross-correlation of [B,Ci,H,W] with [Co,Ci,kh,kw], zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<F> {
        let s = self.shape();
        let ws = weight.shape();
        assert!(
            s.len() == 4 && ws.len() == 4 && s[1] == ws[1],
            "dimension error in conv2d: input {s:?}, kernel {ws:?}"
        );
        let (bsz, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        assert!(
            h + 2 * ph >= kh && w + 2 * pw >= kw,
            "dimension error in conv2d: kernel {ws:?} larger than padded input {s:?}"
        );
        if let Some(b) = bias {
            assert_eq!(
                b.shape(),
                &[co],
                "dimension error in conv2d: bias {:?} vs {co} output channels",
                b.shape()
            );
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let kcols = ci * kh * kw;
        let osz = oh * ow;
        let mut out = vec![F::zero(); bsz * co * osz];
        let mut cols_t = vec![F::zero(); kcols * osz];
        for b in 0..bsz {
            im2col_t(
                &self.data()[b * ci * h * w..(b + 1) * ci * h * w],
                ci, h, w, kh, kw, sh, sw, ph, pw, oh, ow, &mut cols_t,
            );
            // y_b[co, osz] = W[co, kcols] · cols_t[kcols, osz]
            mm_ow(
                weight.data(),
                &cols_t,
                co,
                kcols,
                osz,
                &mut out[b * co * osz..(b + 1) * co * osz],
            );
        }
        if let Some(bt) = bias {
            let bd = bt.data();
            for b in 0..bsz {
                for cc in 0..co {
                    let base = (b * co + cc) * osz;
                    for p in 0..osz {
                        out[base + p] = out[base + p] + bd[cc];
                    }
                }
            }
        }
        let xt = self.clone();
        let wt = weight.clone();
        let bias_t = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            vec![bsz, co, oh, ow],
            out,
            parents,
            Box::new(move |g, grads| {
                let xd = xt.data_rc();
                let wd = wt.data_rc();
                let mut cols_t = vec![F::zero(); kcols * osz];
                let mut gt = if wt.needs_grad() { vec![F::zero(); osz * co] } else { vec![] };
                // dW is built transposed so both matmuls read row-major.
                let mut dwt = if wt.needs_grad() { vec![F::zero(); kcols * co] } else { vec![] };
                let mut dcols_t = if xt.needs_grad() { vec![F::zero(); kcols * osz] } else { vec![] };
                let mut dx = if xt.needs_grad() { vec![F::zero(); xd.len()] } else { vec![] };
                for b in 0..bsz {
                    let gb = &g[b * co * osz..(b + 1) * co * osz];
                    if wt.needs_grad() {
                        im2col_t(
                            &xd[b * ci * h * w..(b + 1) * ci * h * w],
                            ci, h, w, kh, kw, sh, sw, ph, pw, oh, ow, &mut cols_t,
                        );
                        for cc in 0..co {
                            let grow = &gb[cc * osz..(cc + 1) * osz];
                            for (p, &gv) in grow.iter().enumerate() {
                                gt[p * co + cc] = gv;
                            }
                        }
                        // dWᵀ[kcols, co] += cols_t[kcols, osz] · G_bᵀ[osz, co]
                        mm(&cols_t, &gt, kcols, osz, co, &mut dwt);
                    }
                    if xt.needs_grad() {
                        // dcols_t[kcols, osz] = Wᵀ · G_b[co, osz]
                        mm_tn_ow(&wd, gb, kcols, co, osz, &mut dcols_t);
                        col2im_t(
                            &dcols_t,
                            ci, h, w, kh, kw, sh, sw, ph, pw, oh, ow,
                            &mut dx[b * ci * h * w..(b + 1) * ci * h * w],
                        );
                    }
                }
                if wt.needs_grad() {
                    let acc = grads.buf(&wt);
                    for cc in 0..co {
                        for kr in 0..kcols {
                            acc[cc * kcols + kr] = acc[cc * kcols + kr] + dwt[kr * co + cc];
                        }
                    }
                }
                if xt.needs_grad() {
                    let acc = grads.buf(&xt);
                    for i in 0..dx.len() {
                        acc[i] = acc[i] + dx[i];
                    }
                }
                if let Some(bt) = &bias_t {
                    if bt.needs_grad() {
                        let acc = grads.buf(bt);
                        for b in 0..bsz {
                            for cc in 0..co {
                                let base = (b * co + cc) * osz;
                                let mut s0 = F::zero();
                                for p in 0..osz {
                                    s0 = s0 + g[base + p];
                                }
                                acc[cc] = acc[cc] + s0;
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of [B,C,H,W].
    pub fn upsample_nearest_2x(&self) -> Tensor<F> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "dimension error in upsample_nearest_2x: shape {s:?}");
        let (bsz, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let x = self.data();
        let mut out = vec![F::zero(); bsz * ch * 4 * h * w];
        for bc in 0..bsz * ch {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    dst[(2 * i) * 2 * w + 2 * j] = v;
                    dst[(2 * i) * 2 * w + 2 * j + 1] = v;
                    dst[(2 * i + 1) * 2 * w + 2 * j] = v;
                    dst[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
                }
            }
        }
        let xt = self.clone();
        Tensor::from_op(
            vec![bsz, ch, 2 * h, 2 * w],
            out,
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&xt);
                for bc in 0..bsz * ch {
                    let gsrc = &g[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                    let dst = &mut acc[bc * h * w..(bc + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = dst[i * w + j]
                                + gsrc[(2 * i) * 2 * w + 2 * j]
                                + gsrc[(2 * i) * 2 * w + 2 * j + 1]
                                + gsrc[(2 * i + 1) * 2 * w + 2 * j]
                                + gsrc[(2 * i + 1) * 2 * w + 2 * j + 1];
                        }
                    }
                }
            }),
        )
    }

    /// Splits [B,1,H,W] into non-overlapping p·p patches: [B, (H/p)(W/p), p²].
    pub fn patchify(&self, p: usize) -> Tensor<F> {
        let s = self.shape();
        assert!(
            s.len() == 4 && s[1] == 1 && s[2] % p == 0 && s[3] % p == 0,
            "dimension error in patchify: shape {s:?} with patch {p}"
        );
        let (bsz, h, w) = (s[0], s[2], s[3]);
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let x = self.data();
        let mut out = vec![F::zero(); bsz * n * p * p];
        for b in 0..bsz {
            for py in 0..gh {
                for px in 0..gw {
                    let t = py * gw + px;
                    for dy in 0..p {
                        for dx in 0..p {
                            out[(b * n + t) * p * p + dy * p + dx] =
                                x[b * h * w + (py * p + dy) * w + (px * p + dx)];
                        }
                    }
                }
            }
        }
        let xt = self.clone();
        Tensor::from_op(
            vec![bsz, n, p * p],
            out,
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&xt);
                for b in 0..bsz {
                    for py in 0..gh {
                        for px in 0..gw {
                            let t = py * gw + px;
                            for dy in 0..p {
                                for dx in 0..p {
                                    let xi = b * h * w + (py * p + dy) * w + (px * p + dx);
                                    acc[xi] = acc[xi] + g[(b * n + t) * p * p + dy * p + dx];
                                }
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Scalar node with an externally supplied gradient, used to splice
    /// non-tensor computations (persistence matching) into the tape.
    /// Forward value is `value`; backward adds `upstream · grad[i]` to
    /// `self`.
    pub fn inject_scalar_with_grad(&self, value: F, grad: Vec<F>) -> Tensor<F> {
        assert_eq!(
            grad.len(),
            self.len(),
            "dimension error in inject_scalar_with_grad: grad len {} vs input {:?}",
            grad.len(),
            self.shape()
        );
        let xt = self.clone();
        Tensor::from_op(
            vec![1],
            vec![value],
            vec![self.clone()],
            Box::new(move |g, grads| {
                let acc = grads.buf(&xt);
                for i in 0..grad.len() {
                    acc[i] = acc[i] + g[0] * grad[i];
                }
            }),
        )
    }
}
