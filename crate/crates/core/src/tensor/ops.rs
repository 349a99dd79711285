//! Elementwise, reduction, layout and normalization operations.

use super::{gemm, numel, BackwardFn, Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and
    /// output.
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + Send + Sync + 'static) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        Tensor::make(self.shape().to_vec(), out, &[self], move || -> BackwardFn<T> {
            Box::new(move |g, y, _| {
                let xd = x.data();
                let gx = g
                    .iter()
                    .zip(xd.iter())
                    .zip(y)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            })
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `ln(1 + e^x)` in the overflow-safe form `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|v| -v, |_, _| -T::one())
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&self, floor: f64) -> Tensor<T> {
        let floor = T::of(floor);
        self.unary(
            move |v| v.max(floor).ln(),
            move |x, _| if x > floor { T::one() / x } else { T::zero() },
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary(move |v| v + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary(move |v| v * c, move |_, _| c)
    }

    fn binary(
        &self,
        other: &Tensor<T>,
        name: &str,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + Send + Sync + 'static,
        db: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Tensor<T>> {
        same_shape(name, self, other)?;
        let out: Vec<T> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::make(self.shape().to_vec(), out, &[self, other], move || -> BackwardFn<T> {
            Box::new(move |g, _, needs| {
                let ad = a.data();
                let bd = b.data();
                let grad = |d: &dyn Fn(T, T) -> T| -> Vec<T> {
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&g, (&x, &y))| g * d(x, y))
                        .collect()
                };
                vec![
                    needs[0].then(|| grad(&da)),
                    needs[1].then(|| grad(&db)),
                ]
            })
        }))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::make(Vec::new(), vec![total], &[self], move || -> BackwardFn<T> {
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])])
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums every axis except the first: `[K, ...] -> [K]`.
    pub fn sum_trailing(&self) -> Tensor<T> {
        let k = self.shape()[0];
        let inner = self.numel() / k;
        let out: Vec<T> = self
            .data()
            .chunks_exact(inner)
            .map(|c| c.iter().copied().sum())
            .collect();
        Tensor::make(vec![k], out, &[self], move || -> BackwardFn<T> {
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(k * inner);
                for &gk in g {
                    gx.extend(std::iter::repeat(gk).take(inner));
                }
                vec![Some(gx)]
            })
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::make(shape.to_vec(), self.to_vec(), &[self], || -> BackwardFn<T> {
            Box::new(|g, _, _| vec![Some(g.to_vec())])
        }))
    }

    /// `[R, C] -> [C, R]`.
    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(Error::shape(format!("transpose2d on {:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose(&self.data(), r, c);
        Ok(Tensor::make(vec![c, r], out, &[self], move || -> BackwardFn<T> {
            Box::new(move |g, _, _| vec![Some(transpose(g, c, r))])
        }))
    }

    /// `[C, D, H, W] -> [D*H*W, C]`.
    pub fn channels_last(&self) -> Result<Tensor<T>> {
        if self.ndim() < 2 {
            return Err(Error::shape(format!("channels_last on {:?}", self.shape())));
        }
        let c = self.shape()[0];
        let l = self.numel() / c;
        let out = transpose(&self.data(), c, l);
        Ok(Tensor::make(vec![l, c], out, &[self], move || -> BackwardFn<T> {
            Box::new(move |g, _, _| vec![Some(transpose(g, l, c))])
        }))
    }

    /// `[D*H*W, C] -> [C, D, H, W]`.
    pub fn channels_first(&self, dims: [usize; 3]) -> Result<Tensor<T>> {
        let l = numel(&dims);
        if self.ndim() != 2 || self.shape()[0] != l {
            return Err(Error::shape(format!(
                "channels_first: {:?} vs dims {dims:?}",
                self.shape()
            )));
        }
        let c = self.shape()[1];
        let out = transpose(&self.data(), l, c);
        Ok(Tensor::make(
            vec![c, dims[0], dims[1], dims[2]],
            out,
            &[self],
            move || -> BackwardFn<T> { Box::new(move |g, _, _| vec![Some(transpose(g, c, l))]) },
        ))
    }

    /// Row gather on `[L, C]`: row `t` of the result is row `order[t]`.
    /// `order` must be a permutation of `0..L`.
    pub fn gather_rows(&self, order: &[usize]) -> Result<Tensor<T>> {
        let (l, c) = rows_cols(self, "gather_rows")?;
        if order.len() != l {
            return Err(Error::shape(format!("gather_rows: {} indices for {l} rows", order.len())));
        }
        let out = permute_rows(&self.data(), c, order, false);
        let order = order.to_vec();
        Ok(Tensor::make(vec![l, c], out, &[self], move || -> BackwardFn<T> {
            Box::new(move |g, _, _| vec![Some(permute_rows(g, c, &order, true))])
        }))
    }

    /// Inverse of [`Tensor::gather_rows`]: row `order[t]` of the result is
    /// row `t` of the input.
    pub fn scatter_rows(&self, order: &[usize]) -> Result<Tensor<T>> {
        let (l, c) = rows_cols(self, "scatter_rows")?;
        if order.len() != l {
            return Err(Error::shape(format!("scatter_rows: {} indices for {l} rows", order.len())));
        }
        let out = permute_rows(&self.data(), c, order, true);
        let order = order.to_vec();
        Ok(Tensor::make(vec![l, c], out, &[self], move || -> BackwardFn<T> {
            Box::new(move |g, _, _| vec![Some(permute_rows(g, c, &order, false))])
        }))
    }

    /// Columns `start..start+len` of a `[M, N]` tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (m, n) = rows_cols(self, "narrow_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::shape(format!("narrow_cols {start}+{len} of {n}")));
        }
        let d = self.data();
        let mut out = Vec::with_capacity(m * len);
        for row in d.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        drop(d);
        Ok(Tensor::make(vec![m, len], out, &[self], move || -> BackwardFn<T> {
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); m * n];
                for (row, grow) in gx.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                    row[start..start + len].copy_from_slice(grow);
                }
                vec![Some(gx)]
            })
        }))
    }

    /// On `[K, V...]`, picks `x[index[v], v]` for every trailing position.
    pub fn pick(&self, index: &[usize]) -> Result<Tensor<T>> {
        let k = self.shape()[0];
        let v = self.numel() / k;
        if index.len() != v {
            return Err(Error::shape(format!("pick: {} indices for {v} positions", index.len())));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= k) {
            return Err(Error::shape(format!("pick: class index {bad} >= {k}")));
        }
        let d = self.data();
        let out: Vec<T> = index.iter().enumerate().map(|(p, &i)| d[i * v + p]).collect();
        drop(d);
        let index = index.to_vec();
        Ok(Tensor::make(self.shape()[1..].to_vec(), out, &[self], move || -> BackwardFn<T> {
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); k * v];
                for (p, (&i, &gp)) in index.iter().zip(g).enumerate() {
                    gx[i * v + p] = gp;
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Per-position layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = *self.shape().last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm: affine {:?}/{:?} for width {c}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / c;
        let (out, xhat, rstd) = normalize(
            &self.data(),
            &gamma.data(),
            &beta.data(),
            rows,
            c,
            |_, j| j,
            T::of(eps),
        );
        let gamma_t = gamma.clone();
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            move || -> BackwardFn<T> {
                Box::new(move |g, _, needs| {
                    normalize_backward(g, &xhat, &rstd, &gamma_t.data(), rows, c, |_, j| j, c, needs)
                })
            },
        ))
    }

    /// Group normalization on `[C, spatial...]`.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let c = self.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("group_norm: {c} channels into {groups} groups")));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("group_norm: affine shape"));
        }
        let spatial = self.numel() / c;
        let per_group = c / groups;
        let set = per_group * spatial;
        // element j of group r belongs to channel r*per_group + j/spatial
        let chan = move |r: usize, j: usize| r * per_group + j / spatial;
        let (out, xhat, rstd) = normalize(
            &self.data(),
            &gamma.data(),
            &beta.data(),
            groups,
            set,
            chan,
            T::of(eps),
        );
        let gamma_t = gamma.clone();
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            move || -> BackwardFn<T> {
                Box::new(move |g, _, needs| {
                    normalize_backward(g, &xhat, &rstd, &gamma_t.data(), groups, set, chan, c, needs)
                })
            },
        ))
    }

    /// Causal depthwise convolution along the sequence axis of `[L, E]`
    /// with kernel `[E, k]` (left zero padding).
    pub fn causal_conv1d(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (l, e) = rows_cols(self, "causal_conv1d")?;
        if weight.ndim() != 2 || weight.shape()[0] != e || bias.shape() != [e] {
            return Err(Error::shape("causal_conv1d: weight/bias shape"));
        }
        let k = weight.shape()[1];
        let out = {
            let (x, w, b) = (self.data(), weight.data(), bias.data());
            let mut out = vec![T::zero(); l * e];
            for t in 0..l {
                for ch in 0..e {
                    let mut acc = b[ch];
                    for j in 0..k {
                        let src = t as isize - (k - 1 - j) as isize;
                        if src >= 0 {
                            acc += w[ch * k + j] * x[src as usize * e + ch];
                        }
                    }
                    out[t * e + ch] = acc;
                }
            }
            out
        };
        let (xt, wt) = (self.clone(), weight.clone());
        Ok(Tensor::make(vec![l, e], out, &[self, weight, bias], move || -> BackwardFn<T> {
            Box::new(move |g, _, needs| {
                let (x, w) = (xt.data(), wt.data());
                let mut gx = vec![T::zero(); l * e];
                let mut gw = vec![T::zero(); e * k];
                let mut gb = vec![T::zero(); e];
                for t in 0..l {
                    for ch in 0..e {
                        let go = g[t * e + ch];
                        gb[ch] += go;
                        for j in 0..k {
                            let src = t as isize - (k - 1 - j) as isize;
                            if src >= 0 {
                                let s = src as usize * e + ch;
                                gw[ch * k + j] += go * x[s];
                                gx[s] += go * w[ch * k + j];
                            }
                        }
                    }
                }
                vec![needs[0].then_some(gx), needs[1].then_some(gw), needs[2].then_some(gb)]
            })
        }))
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn rows_cols<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    if x.ndim() != 2 {
        return Err(Error::shape(format!("{op} expects [rows, cols], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn transpose<T: Scalar>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    const B: usize = 32;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
    }
    out
}

/// `inverse == false`: out[t] = src[order[t]]; otherwise out[order[t]] = src[t].
fn permute_rows<T: Scalar>(src: &[T], c: usize, order: &[usize], inverse: bool) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (t, &o) in order.iter().enumerate() {
        let (to, from) = if inverse { (o, t) } else { (t, o) };
        out[to * c..(to + 1) * c].copy_from_slice(&src[from * c..(from + 1) * c]);
    }
    out
}

/// Normalizes `sets` contiguous runs of length `len`; `chan(set, j)` gives
/// the affine channel of element `j` in run `set`. Returns output, the
/// normalized values and the reciprocal standard deviation per run.
fn normalize<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    sets: usize,
    len: usize,
    chan: impl Fn(usize, usize) -> usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(sets);
    let n = T::of(len as f64);
    for s in 0..sets {
        let run = &x[s * len..(s + 1) * len];
        let mean = run.iter().copied().sum::<T>() / n;
        let var = run.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in run.iter().enumerate() {
            let h = (v - mean) * r;
            let ch = chan(s, j);
            xhat[s * len + j] = h;
            out[s * len + j] = h * gamma[ch] + beta[ch];
        }
    }
    (out, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
fn normalize_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    sets: usize,
    len: usize,
    chan: impl Fn(usize, usize) -> usize,
    channels: usize,
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let mut gx = vec![T::zero(); g.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    let n = T::of(len as f64);
    for s in 0..sets {
        let base = s * len;
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for j in 0..len {
            let ch = chan(s, j);
            let go = g[base + j];
            let h = xhat[base + j];
            ggamma[ch] += go * h;
            gbeta[ch] += go;
            let dh = go * gamma[ch];
            sum_dh += dh;
            sum_dh_h += dh * h;
        }
        let r = rstd[s];
        for j in 0..len {
            let ch = chan(s, j);
            let dh = g[base + j] * gamma[ch];
            let h = xhat[base + j];
            gx[base + j] = r * (dh - sum_dh / n - h * sum_dh_h / n);
        }
    }
    vec![
        needs[0].then_some(gx),
        needs[1].then_some(ggamma),
        needs[2].then_some(gbeta),
    ]
}

/// Affine map along the last axis: `x[..., C_in] -> x W^T + b`.
pub fn linear_map<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if weight.ndim() != 2 {
        return Err(Error::shape("linear_map: weight must be [C_out, C_in]"));
    }
    let (cout, cin) = (weight.shape()[0], weight.shape()[1]);
    if x.shape().last() != Some(&cin) {
        return Err(Error::shape(format!(
            "linear_map: input {:?} vs weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("linear_map: bias shape"));
        }
    }
    let m = x.numel() / cin;
    let mut out = vec![T::zero(); m * cout];
    if let Some(b) = bias {
        let b = b.data();
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(&b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(
        m,
        cin,
        cout,
        T::one(),
        (&x.data(), cin as isize, 1),
        (&weight.data(), 1, cin as isize),
        beta,
        &mut out,
        cout as isize,
        1,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    let (xt, wt) = (x.clone(), weight.clone());
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    Ok(Tensor::make(shape, out, &parents, move || -> BackwardFn<T> {
        Box::new(move |g, _, needs| {
            let mut res = Vec::with_capacity(3);
            res.push(needs[0].then(|| {
                let mut gx = vec![T::zero(); m * cin];
                gemm(
                    m,
                    cout,
                    cin,
                    T::one(),
                    (g, cout as isize, 1),
                    (&wt.data(), cin as isize, 1),
                    T::zero(),
                    &mut gx,
                    cin as isize,
                    1,
                );
                gx
            }));
            res.push(needs[1].then(|| {
                let mut gw = vec![T::zero(); cout * cin];
                gemm(
                    cout,
                    m,
                    cin,
                    T::one(),
                    (g, 1, cout as isize),
                    (&xt.data(), cin as isize, 1),
                    T::zero(),
                    &mut gw,
                    cin as isize,
                    1,
                );
                gw
            }));
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for row in g.chunks_exact(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    gb
                }));
            }
            res
        })
    }))
}

/// Softmax over the leading (class) axis with max subtraction.
pub fn softmax_channel<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = x.shape()[0];
    let v = x.numel() / k;
    let mut out = vec![T::zero(); k * v];
    {
        let d = x.data();
        for p in 0..v {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(d[c * v + p]);
            }
            let mut s = T::zero();
            for c in 0..k {
                let e = (d[c * v + p] - m).exp();
                out[c * v + p] = e;
                s += e;
            }
            let inv = T::one() / s;
            for c in 0..k {
                out[c * v + p] *= inv;
            }
        }
    }
    Tensor::make(x.shape().to_vec(), out, &[x], move || -> BackwardFn<T> {
        Box::new(move |g, y, _| {
            let mut gx = vec![T::zero(); k * v];
            for p in 0..v {
                let mut dot = T::zero();
                for c in 0..k {
                    dot += g[c * v + p] * y[c * v + p];
                }
                for c in 0..k {
                    gx[c * v + p] = y[c * v + p] * (g[c * v + p] - dot);
                }
            }
            vec![Some(gx)]
        })
    })
}

/// Concatenates along the leading axis; trailing shapes must agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
    let tail = &first.shape()[1..];
    if parts.iter().any(|p| &p.shape()[1..] != tail) {
        return Err(Error::shape("concat_channels: trailing shapes differ"));
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Ok(Tensor::make(shape, out, parts, move || -> BackwardFn<T> {
        Box::new(move |g, _, needs| {
            let mut off = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&n, &need)| {
                    let s = need.then(|| g[off..off + n].to_vec());
                    off += n;
                    s
                })
                .collect()
        })
    }))
}
