//! 3D convolution (cross-correlation), max pooling and nearest upsampling on
//! `[C, D, H, W]` tensors.

use rayon::prelude::*;

use super::{gemm, BackwardFn, Scalar, Tensor};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per work item.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    groups: usize,
    k: usize,
    stride: usize,
    pad: usize,
    din: [usize; 3],
    dout: [usize; 3],
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn kc(&self) -> usize {
        self.cin_g() * self.k * self.k * self.k
    }
    fn in_size(&self) -> usize {
        self.din.iter().product()
    }
    fn out_size(&self) -> usize {
        self.dout.iter().product()
    }
    /// Output rows are `(od, oh)` pairs; each holds `dout[2]` voxels.
    fn rows(&self) -> usize {
        self.dout[0] * self.dout[1]
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    fn chunks(&self) -> Vec<(usize, usize)> {
        let per_row = self.kc() * self.dout[2];
        let rows_per = (COLS_BUDGET / per_row.max(1)).max(1);
        let rows = self.rows();
        (0..rows)
            .step_by(rows_per)
            .map(|r0| (r0, (r0 + rows_per).min(rows)))
            .collect()
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row,
    /// for unit stride.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (wi, wo) = (self.din[2] as isize, self.dout[2] as isize);
        let shift = kx as isize - self.pad as isize;
        let lo = (-shift).clamp(0, wo);
        let hi = (wi - shift).clamp(lo, wo);
        (lo as usize, hi as usize)
    }

    /// Fills `cols[kc, (r1-r0)*W_out]` for input group `g`.
    fn im2col<T: Scalar>(&self, x: &[T], g: usize, (r0, r1): (usize, usize), cols: &mut [T]) {
        let [_, hi, wi] = self.din;
        let [_, ho, wo] = self.dout;
        let ncols = (r1 - r0) * wo;
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let in_sz = self.in_size();
        let mut row = 0;
        for ci in 0..self.cin_g() {
            let xc = &x[(g * self.cin_g() + ci) * in_sz..][..in_sz];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut cols[row * ncols..(row + 1) * ncols];
                        for (ri, r) in (r0..r1).enumerate() {
                            let (od, oh) = (r / ho, r % ho);
                            let iz = od as isize * s - p + kz as isize;
                            let iy = oh as isize * s - p + ky as isize;
                            let out = &mut dst[ri * wo..(ri + 1) * wo];
                            if iz < 0 || iz >= self.din[0] as isize || iy < 0 || iy >= hi as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(iz as usize * hi + iy as usize) * wi..][..wi];
                            if s == 1 {
                                let (lo, hi_) = self.valid_cols(kx);
                                out[..lo].fill(T::zero());
                                out[hi_..].fill(T::zero());
                                let first = (lo as isize - p + kx as isize) as usize;
                                out[lo..hi_].copy_from_slice(&src[first..first + hi_ - lo]);
                                continue;
                            }
                            for (ow, o) in out.iter_mut().enumerate() {
                                let ix = ow as isize * s - p + kx as isize;
                                *o = if ix >= 0 && ix < wi as isize { src[ix as usize] } else { T::zero() };
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adds `cols` back into the input-gradient buffer of group `g`.
    fn col2im<T: Scalar>(&self, cols: &[T], g: usize, (r0, r1): (usize, usize), gx: &mut [T]) {
        let [_, hi, wi] = self.din;
        let [_, ho, wo] = self.dout;
        let ncols = (r1 - r0) * wo;
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let in_sz = self.in_size();
        let mut row = 0;
        for ci in 0..self.cin_g() {
            let gc = &mut gx[(g * self.cin_g() + ci) * in_sz..][..in_sz];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &cols[row * ncols..(row + 1) * ncols];
                        for (ri, r) in (r0..r1).enumerate() {
                            let (od, oh) = (r / ho, r % ho);
                            let iz = od as isize * s - p + kz as isize;
                            let iy = oh as isize * s - p + ky as isize;
                            if iz < 0 || iz >= self.din[0] as isize || iy < 0 || iy >= hi as isize {
                                continue;
                            }
                            let dst = &mut gc[(iz as usize * hi + iy as usize) * wi..][..wi];
                            if s == 1 {
                                let (lo, hi_) = self.valid_cols(kx);
                                let first = (lo as isize - p + kx as isize) as usize;
                                for (d, &v) in dst[first..first + hi_ - lo].iter_mut().zip(&src[ri * wo + lo..ri * wo + hi_]) {
                                    *d += v;
                                }
                                continue;
                            }
                            for (ow, &v) in src[ri * wo..(ri + 1) * wo].iter().enumerate() {
                                let ix = ow as isize * s - p + kx as isize;
                                if ix >= 0 && ix < wi as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

fn spatial(x_shape: &[usize], what: &str) -> Result<[usize; 3]> {
    if x_shape.len() != 4 {
        return Err(Error::shape(format!("{what} expects [C, D, H, W], got {x_shape:?}")));
    }
    Ok([x_shape[1], x_shape[2], x_shape[3]])
}

/// 3D cross-correlation. `weight` is `[C_out, C_in/groups, k, k, k]`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let din = spatial(x.shape(), "conv3d")?;
    let cin = x.shape()[0];
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::shape(format!("conv3d weight {ws:?}")));
    }
    let (cout, k) = (ws[0], ws[2]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || ws[1] != cin / groups {
        return Err(Error::shape(format!(
            "conv3d: {cin} input channels, weight {ws:?}, groups {groups}"
        )));
    }
    if k % 2 == 0 || stride == 0 {
        return Err(Error::shape(format!("conv3d: kernel {k} stride {stride}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv3d: bias shape"));
        }
    }
    let mut dout = [0; 3];
    for a in 0..3 {
        let span = din[a] + 2 * padding;
        if span < k || (span - k) % stride != 0 {
            return Err(Error::shape(format!(
                "conv3d: extent {} with padding {padding}, kernel {k}, stride {stride} is not integral",
                din[a]
            )));
        }
        dout[a] = (span - k) / stride + 1;
    }
    let geo = Geometry { cin, cout, groups, k, stride, pad: padding, din, dout };

    let out = {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.map(|b| b.data());
        forward(&geo, &xd, &wd, bd.as_deref().map(|v| v.as_slice()))
    };
    let (xt, wt) = (x.clone(), weight.clone());
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    Ok(Tensor::make(
        vec![cout, dout[0], dout[1], dout[2]],
        out,
        &parents,
        move || -> BackwardFn<T> {
            Box::new(move |g, _, needs| {
                let (gx, gw) = backward(&geo, &xt.data(), &wt.data(), g, needs[0], needs[1]);
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(needs[2].then(|| {
                        g.chunks_exact(geo.out_size()).map(|c| c.iter().copied().sum()).collect()
                    }));
                }
                res
            })
        },
    ))
}

fn forward<T: Scalar>(geo: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let out_sz = geo.out_size();
    let mut out = vec![T::zero(); geo.cout * out_sz];
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_exact_mut(out_sz).enumerate() {
            chunk.fill(b[c]);
        }
    }
    if geo.depthwise() && !geo.pointwise() {
        depthwise_forward(geo, x, w, &mut out);
        return out;
    }
    let (cin_g, cout_g, kc) = (geo.cin_g(), geo.cout_g(), geo.kc());
    if geo.pointwise() {
        let in_sz = geo.in_size();
        for g in 0..geo.groups {
            gemm(
                cout_g,
                cin_g,
                in_sz,
                T::one(),
                (&w[g * cout_g * kc..], kc as isize, 1),
                (&x[g * cin_g * in_sz..], in_sz as isize, 1),
                T::one(),
                &mut out[g * cout_g * out_sz..],
                out_sz as isize,
                1,
            );
        }
        return out;
    }
    let chunks = geo.chunks();
    let tasks: Vec<(usize, (usize, usize))> = (0..geo.groups)
        .flat_map(|g| chunks.iter().map(move |&c| (g, c)))
        .collect();
    let optr = SendPtr(out.as_mut_ptr());
    let wo = geo.dout[2];
    tasks.par_iter().for_each_init(Vec::new, |cols, &(g, (r0, r1))| {
        let ncols = (r1 - r0) * wo;
        cols.resize(kc * ncols, T::zero());
        geo.im2col(x, g, (r0, r1), cols);
        let wg = &w[g * cout_g * kc..(g + 1) * cout_g * kc];
        let p = optr;
        // SAFETY: task (g, r0..r1) writes only channels g*cout_g.. of output
        // rows r0..r1, which no other task touches; indices stay within
        // cout * out_sz.
        unsafe {
            T::gemm_raw(
                cout_g,
                kc,
                ncols,
                T::one(),
                wg.as_ptr(),
                kc as isize,
                1,
                cols.as_ptr(),
                ncols as isize,
                1,
                T::one(),
                p.0.add(g * cout_g * out_sz + r0 * wo),
                out_sz as isize,
                1,
            );
        }
    });
    out
}

fn depthwise_forward<T: Scalar>(geo: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let (in_sz, out_sz, k3) = (geo.in_size(), geo.out_size(), geo.k.pow(3));
    out.par_chunks_mut(out_sz).enumerate().for_each(|(c, oc)| {
        let xc = &x[c * in_sz..(c + 1) * in_sz];
        let wc = &w[c * k3..(c + 1) * k3];
        depthwise_visit(geo, |o, i, kidx| oc[o] += wc[kidx] * xc[i]);
    });
}

/// Calls `f(out_index, in_index, kernel_index)` for every in-bounds tap.
fn depthwise_visit(geo: &Geometry, mut f: impl FnMut(usize, usize, usize)) {
    let [di, hi, wi] = geo.din;
    let [dd, ho, wo] = geo.dout;
    let (k, s, p) = (geo.k, geo.stride as isize, geo.pad as isize);
    for od in 0..dd {
        for oh in 0..ho {
            for ow in 0..wo {
                let o = (od * ho + oh) * wo + ow;
                for kz in 0..k {
                    let iz = od as isize * s - p + kz as isize;
                    if iz < 0 || iz >= di as isize {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = oh as isize * s - p + ky as isize;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ow as isize * s - p + kx as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            let i = (iz as usize * hi + iy as usize) * wi + ix as usize;
                            f(o, i, (kz * k + ky) * k + kx);
                        }
                    }
                }
            }
        }
    }
}

fn backward<T: Scalar>(
    geo: &Geometry,
    x: &[T],
    w: &[T],
    g: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (in_sz, out_sz) = (geo.in_size(), geo.out_size());
    let (cin_g, cout_g, kc) = (geo.cin_g(), geo.cout_g(), geo.kc());
    let mut gx = need_x.then(|| vec![T::zero(); geo.cin * in_sz]);
    let mut gw = need_w.then(|| vec![T::zero(); geo.cout * kc]);

    if geo.depthwise() && !geo.pointwise() {
        let k3 = geo.k.pow(3);
        if let Some(gx) = gx.as_mut() {
            gx.par_chunks_mut(in_sz).enumerate().for_each(|(c, gxc)| {
                let wc = &w[c * k3..(c + 1) * k3];
                let gc = &g[c * out_sz..(c + 1) * out_sz];
                depthwise_visit(geo, |o, i, kidx| gxc[i] += wc[kidx] * gc[o]);
            });
        }
        if let Some(gw) = gw.as_mut() {
            gw.par_chunks_mut(k3).enumerate().for_each(|(c, gwc)| {
                let xc = &x[c * in_sz..(c + 1) * in_sz];
                let gc = &g[c * out_sz..(c + 1) * out_sz];
                depthwise_visit(geo, |o, i, kidx| gwc[kidx] += gc[o] * xc[i]);
            });
        }
        return (gx, gw);
    }

    if geo.pointwise() {
        for grp in 0..geo.groups {
            let gg = &g[grp * cout_g * out_sz..];
            if let Some(gw) = gw.as_mut() {
                gemm(
                    cout_g,
                    in_sz,
                    cin_g,
                    T::one(),
                    (gg, out_sz as isize, 1),
                    (&x[grp * cin_g * in_sz..], 1, in_sz as isize),
                    T::zero(),
                    &mut gw[grp * cout_g * kc..],
                    kc as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                gemm(
                    cin_g,
                    cout_g,
                    in_sz,
                    T::one(),
                    (&w[grp * cout_g * kc..], 1, kc as isize),
                    (gg, out_sz as isize, 1),
                    T::zero(),
                    &mut gx[grp * cin_g * in_sz..],
                    in_sz as isize,
                    1,
                );
            }
        }
        return (gx, gw);
    }

    if geo.stride == 1 {
        if let Some(gx) = gx.as_mut() {
            *gx = transposed_input_grad(geo, w, g);
        }
        if !need_w {
            return (gx, gw);
        }
    }

    let wo = geo.dout[2];
    let mut cols = Vec::new();
    let mut gcols = Vec::new();
    for grp in 0..geo.groups {
        for (r0, r1) in geo.chunks() {
            let ncols = (r1 - r0) * wo;
            let gchunk = &g[grp * cout_g * out_sz + r0 * wo..];
            if let Some(gw) = gw.as_mut() {
                cols.resize(kc * ncols, T::zero());
                geo.im2col(x, grp, (r0, r1), &mut cols);
                gemm(
                    cout_g,
                    ncols,
                    kc,
                    T::one(),
                    (gchunk, out_sz as isize, 1),
                    (&cols, 1, ncols as isize),
                    T::one(),
                    &mut gw[grp * cout_g * kc..],
                    kc as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut().filter(|_| geo.stride != 1) {
                gcols.resize(kc * ncols, T::zero());
                gemm(
                    kc,
                    cout_g,
                    ncols,
                    T::one(),
                    (&w[grp * cout_g * kc..], 1, kc as isize),
                    (gchunk, out_sz as isize, 1),
                    T::zero(),
                    &mut gcols,
                    ncols as isize,
                    1,
                );
                geo.col2im(&gcols, grp, (r0, r1), gx);
            }
        }
    }
    (gx, gw)
}

/// Input gradient of a unit-stride convolution, computed as a forward
/// convolution of `g` with the spatially flipped, channel-transposed kernel.
fn transposed_input_grad<T: Scalar>(geo: &Geometry, w: &[T], g: &[T]) -> Vec<T> {
    let t = Geometry {
        cin: geo.cout,
        cout: geo.cin,
        groups: geo.groups,
        k: geo.k,
        stride: 1,
        pad: geo.k - 1 - geo.pad,
        din: geo.dout,
        dout: geo.din,
    };
    let (cin_g, cout_g, k3) = (geo.cin_g(), geo.cout_g(), geo.k.pow(3));
    let mut wt = vec![T::zero(); w.len()];
    for grp in 0..geo.groups {
        for co in 0..cout_g {
            for ci in 0..cin_g {
                let src = &w[((grp * cout_g + co) * cin_g + ci) * k3..][..k3];
                let dst = &mut wt[((grp * cin_g + ci) * cout_g + co) * k3..][..k3];
                for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                    *d = v;
                }
            }
        }
    }
    forward(&t, g, &wt, None)
}

/// 2x2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximal element in window order.
pub fn max_pool3d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [d, h, w] = spatial(x.shape(), "max_pool3d")?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max_pool3d: extents {:?} not divisible by 2", [d, h, w])));
    }
    let c = x.shape()[0];
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let in_sz = d * h * w;
    let out_sz = od * oh * ow;
    let mut out = vec![T::zero(); c * out_sz];
    let mut arg = vec![0usize; c * out_sz];
    {
        let xd = x.data();
        for ch in 0..c {
            let xc = &xd[ch * in_sz..];
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut bi = 0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                    if xc[i] > best {
                                        best = xc[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        let o = ch * out_sz + (z * oh + y) * ow + xx;
                        out[o] = best;
                        arg[o] = ch * in_sz + bi;
                    }
                }
            }
        }
    }
    let n_in = c * in_sz;
    Ok(Tensor::make(vec![c, od, oh, ow], out, &[x], move || -> BackwardFn<T> {
        Box::new(move |g, _, _| {
            let mut gx = vec![T::zero(); n_in];
            for (&a, &gv) in arg.iter().zip(g) {
                gx[a] += gv;
            }
            vec![Some(gx)]
        })
    }))
}

/// Nearest-neighbour 2x upsampling of every spatial axis.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [d, h, w] = spatial(x.shape(), "upsample_nearest2x")?;
    let c = x.shape()[0];
    let (ud, uh, uw) = (2 * d, 2 * h, 2 * w);
    let in_sz = d * h * w;
    let out_sz = ud * uh * uw;
    let mut out = vec![T::zero(); c * out_sz];
    {
        let xd = x.data();
        out.par_chunks_mut(out_sz).enumerate().for_each(|(ch, oc)| {
            let xc = &xd[ch * in_sz..(ch + 1) * in_sz];
            for z in 0..ud {
                for y in 0..uh {
                    let src = &xc[((z / 2) * h + y / 2) * w..][..w];
                    let dst = &mut oc[(z * uh + y) * uw..][..uw];
                    for (xx, o) in dst.iter_mut().enumerate() {
                        *o = src[xx / 2];
                    }
                }
            }
        });
    }
    Ok(Tensor::make(vec![c, ud, uh, uw], out, &[x], move || -> BackwardFn<T> {
        Box::new(move |g, _, _| {
            let mut gx = vec![T::zero(); c * in_sz];
            for ch in 0..c {
                for z in 0..ud {
                    for y in 0..uh {
                        for xx in 0..uw {
                            gx[ch * in_sz + ((z / 2) * h + y / 2) * w + xx / 2] +=
                                g[ch * out_sz + (z * uh + y) * uw + xx];
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Direct six-loop cross-correlation used as an oracle.
    fn naive_conv(
        x: &[f64],
        cin: usize,
        din: [usize; 3],
        w: &[f64],
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f64> {
        let dout: Vec<usize> = din.iter().map(|&d| (d + 2 * pad - k) / stride + 1).collect();
        let (cin_g, cout_g) = (cin / groups, cout / groups);
        let mut out = vec![0.0; cout * dout.iter().product::<usize>()];
        for co in 0..cout {
            let g = co / cout_g;
            for z in 0..dout[0] {
                for y in 0..dout[1] {
                    for xx in 0..dout[2] {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xx * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= din[0] || iy >= din[1] || ix >= din[2] {
                                            continue;
                                        }
                                        let c = g * cin_g + ci;
                                        acc += x[((c * din[0] + iz) * din[1] + iy) * din[2] + ix]
                                            * w[(((co * cin_g + ci) * k + kz) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((co * dout[0] + z) * dout[1] + y) * dout[2] + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_depthwise() {
        let x = Tensor::from_vec(&[3, 2, 2, 2], pseudo(24, 1)).unwrap();
        let w = Tensor::from_vec(&[3, 1, 1, 1, 1], vec![1.0; 3]).unwrap();
        let b = Tensor::zeros(&[3]);
        let y = conv3d(&x, &w, Some(&b), 1, 0, 3).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn constant_input_all_ones_kernel() {
        let x = Tensor::from_vec(&[1, 4, 4, 4], vec![0.5f64; 64]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3, 3], vec![1.0; 27]).unwrap();
        let y = conv3d(&x, &w, None, 1, 1, 1).unwrap().to_vec();
        for z in 1..3 {
            for yy in 1..3 {
                for xx in 1..3 {
                    assert!((y[(z * 4 + yy) * 4 + xx] - 13.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_shape() {
        let x = Tensor::<f32>::zeros(&[2, 8, 8, 8]);
        let w = Tensor::<f32>::zeros(&[16, 2, 3, 3, 3]);
        assert_eq!(conv3d(&x, &w, None, 1, 1, 1).unwrap().shape(), &[16, 8, 8, 8]);
    }

    #[test]
    fn non_integral_extent_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        assert!(conv3d(&x, &w, None, 2, 0, 1).is_err());
        let w2 = Tensor::<f32>::zeros(&[2, 2, 3, 3, 3]);
        assert!(conv3d(&x, &w2, None, 1, 1, 1).is_err());
    }

    #[test]
    fn matches_direct_loops() {
        for &(cin, cout, k, stride, pad, groups, d) in &[
            (2, 3, 3, 1, 1, 1, [4, 5, 3]),
            (4, 4, 3, 1, 1, 2, [3, 3, 4]),
            (3, 3, 3, 1, 1, 3, [4, 3, 5]),
            (2, 4, 1, 1, 0, 1, [3, 3, 3]),
            (2, 2, 3, 2, 1, 1, [5, 5, 5]),
        ] {
            let x = pseudo(cin * d.iter().product::<usize>(), 3);
            let w = pseudo(cout * (cin / groups) * k * k * k, 7);
            let xt = Tensor::from_vec(&[cin, d[0], d[1], d[2]], x.clone()).unwrap();
            let wt = Tensor::from_vec(&[cout, cin / groups, k, k, k], w.clone()).unwrap();
            let got = conv3d(&xt, &wt, None, stride, pad, groups).unwrap().to_vec();
            let want = naive_conv(&x, cin, d, &w, cout, k, stride, pad, groups);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for &(cin, cout, k, pad, groups) in
            &[(2, 3, 3, 1, 1), (2, 2, 3, 1, 2), (3, 2, 1, 0, 1), (2, 2, 3, 1, 1)]
        {
            let x = Tensor::from_vec(&[cin, 3, 4, 3], pseudo(cin * 36, 11)).unwrap();
            let w = Tensor::from_vec(&[cout, cin / groups, k, k, k], pseudo(cout * cin / groups * k * k * k, 5))
                .unwrap();
            let b = Tensor::from_vec(&[cout], pseudo(cout, 9)).unwrap();
            let weights = Tensor::from_vec(&[cout, 3, 4, 3], pseudo(cout * 36, 13)).unwrap();
            let r = grad_check(
                &[x, w, b],
                |p| conv3d(&p[0], &p[1], Some(&p[2]), 1, pad, groups)?.mul(&weights).map(|t| t.sum()),
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn pool_values_and_gradient() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(max_pool3d(&x).unwrap().to_vec(), vec![7.0]);
        let c = Tensor::from_vec(&[2, 4, 4, 4], vec![3.0f64; 128]).unwrap();
        let y = max_pool3d(&c).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2, 2]);
        assert!(y.to_vec().iter().all(|&v| v == 3.0));

        // ties: gradient to the first maximal element only
        let t = Tensor::<f64>::param(&[1, 2, 2, 2], vec![1.0, 5.0, 5.0, 0.0, 5.0, 1.0, 2.0, 3.0]).unwrap();
        max_pool3d(&t).unwrap().sum().backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let x = Tensor::from_vec(&[2, 4, 2, 4], pseudo(64, 21)).unwrap();
        let r = grad_check(&[x], |p| Ok(max_pool3d(&p[0])?.sum()), 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(max_pool3d(&Tensor::<f64>::zeros(&[1, 3, 2, 2])).is_err());
    }

    #[test]
    fn upsample_gradient() {
        let x = Tensor::from_vec(&[2, 2, 1, 2], pseudo(8, 4)).unwrap();
        let wts = Tensor::from_vec(&[2, 4, 2, 4], pseudo(64, 8)).unwrap();
        let r = grad_check(&[x], |p| Ok(upsample_nearest2x(&p[0])?.mul(&wts)?.sum()), 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
