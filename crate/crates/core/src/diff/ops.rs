//! Forward and gradient rules for every [`Primitive`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::{Mode, Primitive};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Values a primitive keeps from its forward pass for the gradient rule.
#[derive(Clone, Debug, PartialEq)]
pub enum Saved {
    None,
    /// Per-element dropout multiplier (0 or `1/(1-rate)`).
    Mask(Vec<f64>),
    /// Flat input index selected for each output element.
    Argmax(Vec<usize>),
    /// Normalized input and per-row (layer norm) or per-channel (batch norm) inverse std.
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Batch-norm training pass: normalized input plus the batch statistics.
    BatchStats {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

/// Logits are clamped to `±SIGMOID_LIMIT` so that outputs stay strictly inside
/// `(0, 1)` in double precision.
pub const SIGMOID_LIMIT: f64 = 36.0;

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-SIGMOID_LIMIT, SIGMOID_LIMIT);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn expect_inputs(prim: &Primitive, inputs: &[&Tensor4], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::shape(
            prim.name(),
            format!("expected {allowed:?} inputs, got {}", inputs.len()),
        ))
    }
}

fn unit_param(prim: &Primitive, t: &Tensor4, what: &str) -> Result<f64> {
    if t.shape() == [1, 1, 1, 1] {
        Ok(t.data()[0])
    } else {
        Err(Error::shape(
            prim.name(),
            format!("{what} must be (1,1,1,1), got {:?}", t.shape()),
        ))
    }
}

// ---------------------------------------------------------------------------
// broadcasting

fn broadcast_shape(op: &'static str, a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?} (axis {i})"),
                ))
            }
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let dense = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { dense[i] };
    }
    s
}

/// Visit every output index with the matching flat offsets into both operands.
fn for_each_broadcast(
    out: [usize; 4],
    sa: [usize; 4],
    sb: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut o = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out[3] {
                    f(o, base_a + i3 * sa[3], base_b + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

fn binary_forward(
    prim: &Primitive,
    a: &Tensor4,
    b: &Tensor4,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor4> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(prim.name(), a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = Tensor4::zeros(out_shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(out_shape, sa, sb, |o, ia, ib| od[o] = f(ad[ia], bd[ib]));
    Ok(out)
}

/// Accumulate `g · ∂out/∂a` and `g · ∂out/∂b` into operand-shaped buffers.
fn binary_backward(
    a: &Tensor4,
    b: &Tensor4,
    g: &Tensor4,
    da: impl Fn(f64, f64) -> f64,
    db: impl Fn(f64, f64) -> f64,
) -> (Tensor4, Tensor4) {
    let out_shape = g.shape();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut ga = Tensor4::zeros(a.shape());
    let mut gb = Tensor4::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    {
        let gad = ga.data_mut();
        let gbd = gb.data_mut();
        for_each_broadcast(out_shape, sa, sb, |o, ia, ib| {
            gad[ia] += gd[o] * da(ad[ia], bd[ib]);
            gbd[ib] += gd[o] * db(ad[ia], bd[ib]);
        });
    }
    (ga, gb)
}

// ---------------------------------------------------------------------------
// convolution

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_geom(prim: &Primitive, x: &Tensor4, w: &Tensor4, stride: usize, pad: usize) -> Result<ConvGeom> {
    let [_, cin, h, wd] = x.shape();
    let [_, wcin, kh, kw] = w.shape();
    if wcin != cin {
        return Err(Error::shape(
            prim.name(),
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape(
            prim.name(),
            format!("kernel {kh}x{kw} (stride {stride}, padding {pad}) does not fit {h}x{wd}"),
        ));
    }
    Ok(ConvGeom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
    })
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_bias(prim: &Primitive, bias: Option<&&Tensor4>, cout: usize) -> Result<Option<Vec<f64>>> {
    match bias {
        None => Ok(None),
        Some(b) if b.len() == cout => Ok(Some(b.data().to_vec())),
        Some(b) => Err(Error::shape(
            prim.name(),
            format!("bias {:?} does not match {cout} output channels", b.shape()),
        )),
    }
}

fn conv2d_forward(prim: &Primitive, inputs: &[&Tensor4], stride: usize, pad: usize) -> Result<Tensor4> {
    expect_inputs(prim, inputs, &[2, 3])?;
    let (x, w) = (inputs[0], inputs[1]);
    let g = conv_geom(prim, x, w, stride, pad)?;
    let batch = x.batch();
    let cout = w.batch();
    let bias = conv_bias(prim, inputs.get(2), cout)?;
    let (k, p) = (g.rows(), g.cols());
    let mut out = Tensor4::zeros([batch, cout, g.ho, g.wo]);
    let mut col = if g.pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let in_len = g.cin * g.h * g.w;
    for b in 0..batch {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let ob = &mut out.data_mut()[b * cout * p..(b + 1) * cout * p];
        let colref: &[f64] = if g.pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut col);
            &col
        };
        gemm(cout, k, p, w.data(), false, colref, false, 0.0, ob);
        if let Some(bias) = &bias {
            for (co, bv) in bias.iter().enumerate() {
                for v in &mut ob[co * p..(co + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    prim: &Primitive,
    inputs: &[&Tensor4],
    gout: &Tensor4,
    stride: usize,
    pad: usize,
) -> Result<Vec<Option<Tensor4>>> {
    let (x, w) = (inputs[0], inputs[1]);
    let g = conv_geom(prim, x, w, stride, pad)?;
    let cout = w.batch();
    let (k, p) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    let mut gx = Tensor4::zeros(x.shape());
    let mut gw = Tensor4::zeros(w.shape());
    let mut gb = vec![0.0; cout];
    let mut col = if g.pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcol = if g.pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..x.batch() {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let gyb = &gout.data()[b * cout * p..(b + 1) * cout * p];
        let colref: &[f64] = if g.pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut col);
            &col
        };
        gemm(cout, p, k, gyb, false, colref, true, 1.0, gw.data_mut());
        let gxb = &mut gx.data_mut()[b * in_len..(b + 1) * in_len];
        if g.pointwise() {
            gemm(k, cout, p, w.data(), true, gyb, false, 0.0, gxb);
        } else {
            gemm(k, cout, p, w.data(), true, gyb, false, 0.0, &mut dcol);
            col2im(&g, &dcol, gxb);
        }
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += gyb[co * p..(co + 1) * p].iter().sum::<f64>();
        }
    }
    let mut grads = vec![Some(gx), Some(gw)];
    if let Some(bias) = inputs.get(2) {
        grads.push(Some(Tensor4::from_vec(bias.shape(), gb)?));
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// token-wise linear algebra

fn matmul_dims(prim: &Primitive, a: &Tensor4, b: &Tensor4, transpose_rhs: bool) -> Result<(usize, usize, usize)> {
    let [ba, ca, n, k] = a.shape();
    let [bb, cb, r0, r1] = b.shape();
    let (kb, m) = if transpose_rhs { (r1, r0) } else { (r0, r1) };
    if kb != k || !(bb == ba || bb == 1) || !(cb == ca || cb == 1) {
        return Err(Error::shape(
            prim.name(),
            format!("{:?} x {:?} (transpose_rhs={transpose_rhs})", a.shape(), b.shape()),
        ));
    }
    Ok((n, k, m))
}

fn rhs_offset(b: &Tensor4, bi: usize, ci: usize) -> usize {
    let [bb, cb, r0, r1] = b.shape();
    let bi = if bb == 1 { 0 } else { bi };
    let ci = if cb == 1 { 0 } else { ci };
    (bi * cb + ci) * r0 * r1
}

fn matmul_forward(prim: &Primitive, a: &Tensor4, b: &Tensor4, transpose_rhs: bool) -> Result<Tensor4> {
    let (n, k, m) = matmul_dims(prim, a, b, transpose_rhs)?;
    let [ba, ca, _, _] = a.shape();
    let mut out = Tensor4::zeros([ba, ca, n, m]);
    for bi in 0..ba {
        for ci in 0..ca {
            let ao = (bi * ca + ci) * n * k;
            let bo = rhs_offset(b, bi, ci);
            let oo = (bi * ca + ci) * n * m;
            gemm(
                n,
                k,
                m,
                &a.data()[ao..ao + n * k],
                false,
                &b.data()[bo..bo + k * m],
                transpose_rhs,
                0.0,
                &mut out.data_mut()[oo..oo + n * m],
            );
        }
    }
    Ok(out)
}

fn matmul_backward(a: &Tensor4, b: &Tensor4, g: &Tensor4, transpose_rhs: bool) -> (Tensor4, Tensor4) {
    let [ba, ca, n, k] = a.shape();
    let m = g.width();
    let mut ga = Tensor4::zeros(a.shape());
    let mut gb = Tensor4::zeros(b.shape());
    for bi in 0..ba {
        for ci in 0..ca {
            let ao = (bi * ca + ci) * n * k;
            let bo = rhs_offset(b, bi, ci);
            let go = (bi * ca + ci) * n * m;
            let gs = &g.data()[go..go + n * m];
            let bs = &b.data()[bo..bo + k * m];
            // dA = G · Bᵀ, with B stored k×m (or m×k when transposed)
            gemm(n, m, k, gs, false, bs, !transpose_rhs, 0.0, &mut ga.data_mut()[ao..ao + n * k]);
            let as_ = &a.data()[ao..ao + n * k];
            let gbs = &mut gb.data_mut()[bo..bo + k * m];
            if transpose_rhs {
                gemm(m, n, k, gs, true, as_, false, 1.0, gbs);
            } else {
                gemm(k, n, m, as_, true, gs, false, 1.0, gbs);
            }
        }
    }
    (ga, gb)
}

fn linear_dims(prim: &Primitive, inputs: &[&Tensor4]) -> Result<(usize, usize, usize)> {
    expect_inputs(prim, inputs, &[2, 3])?;
    let (x, w) = (inputs[0], inputs[1]);
    let din = x.width();
    let [w0, w1, wi, dout] = w.shape();
    if (w0, w1, wi) != (1, 1, din) {
        return Err(Error::shape(
            prim.name(),
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [1, 1, 1, dout] {
            return Err(Error::shape(
                prim.name(),
                format!("bias {:?} vs output width {dout}", b.shape()),
            ));
        }
    }
    Ok((x.len() / din.max(1), din, dout))
}

fn linear_forward(prim: &Primitive, inputs: &[&Tensor4]) -> Result<Tensor4> {
    let (rows, din, dout) = linear_dims(prim, inputs)?;
    let x = inputs[0];
    let [b, c, n, _] = x.shape();
    let mut out = Tensor4::zeros([b, c, n, dout]);
    gemm(rows, din, dout, x.data(), false, inputs[1].data(), false, 0.0, out.data_mut());
    if let Some(bias) = inputs.get(2) {
        for row in out.data_mut().chunks_exact_mut(dout) {
            for (v, bv) in row.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

fn linear_backward(prim: &Primitive, inputs: &[&Tensor4], g: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
    let (rows, din, dout) = linear_dims(prim, inputs)?;
    let (x, w) = (inputs[0], inputs[1]);
    let mut gx = Tensor4::zeros(x.shape());
    let mut gw = Tensor4::zeros(w.shape());
    gemm(rows, dout, din, g.data(), false, w.data(), true, 0.0, gx.data_mut());
    gemm(din, rows, dout, x.data(), true, g.data(), false, 0.0, gw.data_mut());
    let mut grads = vec![Some(gx), Some(gw)];
    if inputs.len() == 3 {
        let mut gb = Tensor4::zeros([1, 1, 1, dout]);
        for row in g.data().chunks_exact(dout) {
            for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
        grads.push(Some(gb));
    }
    Ok(grads)
}

fn layer_norm_forward(prim: &Primitive, inputs: &[&Tensor4], eps: f64) -> Result<(Tensor4, Saved)> {
    expect_inputs(prim, inputs, &[3])?;
    let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
    let d = x.width();
    if gamma.shape() != [1, 1, 1, d] || beta.shape() != [1, 1, 1, d] {
        return Err(Error::shape(
            prim.name(),
            format!("affine params must be (1,1,1,{d}), got {:?} / {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let mut out = Tensor4::zeros(x.shape());
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for ((row, xh), o) in x
        .data()
        .chunks_exact(d)
        .zip(xhat.chunks_exact_mut(d))
        .zip(out.data_mut().chunks_exact_mut(d))
    {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            xh[j] = (row[j] - mean) * is;
            o[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((out, Saved::Norm { xhat, inv_std }))
}

fn layer_norm_backward(inputs: &[&Tensor4], g: &Tensor4, saved: &Saved) -> Result<Vec<Option<Tensor4>>> {
    let Saved::Norm { xhat, inv_std } = saved else {
        return Err(Error::Invalid("layer_norm: missing saved statistics".into()));
    };
    let (x, gamma) = (inputs[0], inputs[1]);
    let d = x.width();
    let mut gx = Tensor4::zeros(x.shape());
    let mut gg = Tensor4::zeros(gamma.shape());
    let mut gbeta = Tensor4::zeros(gamma.shape());
    let mut dxhat = vec![0.0; d];
    for (r, ((gr, xh), gxr)) in g
        .data()
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(gx.data_mut().chunks_exact_mut(d))
        .enumerate()
    {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            gg.data_mut()[j] += gr[j] * xh[j];
            gbeta.data_mut()[j] += gr[j];
            dxhat[j] = gr[j] * gamma.data()[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let scale = inv_std[r] / d as f64;
        for j in 0..d {
            gxr[j] = scale * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
        }
    }
    Ok(vec![Some(gx), Some(gg), Some(gbeta)])
}

fn softmax_forward(x: &Tensor4) -> Tensor4 {
    let d = x.width();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn softmax_backward(out: &Tensor4, g: &Tensor4) -> Tensor4 {
    let d = out.width();
    let mut gx = Tensor4::zeros(out.shape());
    for ((s, gr), gxr) in out
        .data()
        .chunks_exact(d)
        .zip(g.data().chunks_exact(d))
        .zip(gx.data_mut().chunks_exact_mut(d))
    {
        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            gxr[j] = s[j] * (gr[j] - dot);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// batch norm

fn batch_norm_forward(prim: &Primitive, inputs: &[&Tensor4], mode: Mode, eps: f64) -> Result<(Tensor4, Saved)> {
    expect_inputs(prim, inputs, &[5])?;
    let x = inputs[0];
    let [b, c, h, w] = x.shape();
    for (t, what) in inputs[1..].iter().zip(["gamma", "beta", "running_mean", "running_var"]) {
        if t.shape() != [1, c, 1, 1] {
            return Err(Error::shape(
                prim.name(),
                format!("{what} must be (1,{c},1,1), got {:?}", t.shape()),
            ));
        }
    }
    let (gamma, beta) = (inputs[1].data(), inputs[2].data());
    let plane = h * w;
    let count = (b * plane) as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += x.plane_slice(bi, ci).iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for bi in 0..b {
                    v += x.plane_slice(bi, ci).iter().map(|t| (t - m) * (t - m)).sum::<f64>();
                }
                mean[ci] = m;
                var[ci] = v / count;
            }
            (mean, var)
        }
        Mode::Infer => (inputs[3].data().to_vec(), inputs[4].data().to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Tensor4::zeros(x.shape());
    let mut xhat = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let src = x.plane_slice(bi, ci);
            let dst = &mut out.data_mut()[off..off + plane];
            for j in 0..plane {
                let xh = (src[j] - mean[ci]) * inv_std[ci];
                xhat[off + j] = xh;
                dst[j] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    let saved = match mode {
        Mode::Train => Saved::BatchStats {
            xhat,
            inv_std,
            mean,
            var,
        },
        Mode::Infer => Saved::Norm { xhat, inv_std },
    };
    Ok((out, saved))
}

fn batch_norm_backward(inputs: &[&Tensor4], g: &Tensor4, saved: &Saved, mode: Mode) -> Result<Vec<Option<Tensor4>>> {
    let (xhat, inv_std) = match saved {
        Saved::BatchStats { xhat, inv_std, .. } | Saved::Norm { xhat, inv_std } => (xhat, inv_std),
        _ => return Err(Error::Invalid("batch_norm2d: missing saved statistics".into())),
    };
    let x = inputs[0];
    let gamma = inputs[1].data();
    let [b, c, h, w] = x.shape();
    let plane = h * w;
    let count = (b * plane) as f64;
    let mut gx = Tensor4::zeros(x.shape());
    let mut gg = Tensor4::zeros([1, c, 1, 1]);
    let mut gbeta = Tensor4::zeros([1, c, 1, 1]);
    let mut gmean = Tensor4::zeros([1, c, 1, 1]);
    let mut gvar = Tensor4::zeros([1, c, 1, 1]);
    for ci in 0..c {
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            for j in 0..plane {
                sg += g.data()[off + j];
                sgx += g.data()[off + j] * xhat[off + j];
            }
        }
        gg.data_mut()[ci] = sgx;
        gbeta.data_mut()[ci] = sg;
        let k = gamma[ci] * inv_std[ci];
        // inference normalizes with the running inputs, so they receive gradient too
        gmean.data_mut()[ci] = -k * sg;
        gvar.data_mut()[ci] = -0.5 * k * inv_std[ci] * sgx;
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            for j in 0..plane {
                let gy = g.data()[off + j];
                gx.data_mut()[off + j] = match mode {
                    Mode::Train => k / count * (count * gy - sg - xhat[off + j] * sgx),
                    Mode::Infer => k * gy,
                };
            }
        }
    }
    Ok(match mode {
        Mode::Train => vec![Some(gx), Some(gg), Some(gbeta), None, None],
        Mode::Infer => vec![Some(gx), Some(gg), Some(gbeta), Some(gmean), Some(gvar)],
    })
}

// ---------------------------------------------------------------------------
// index rearrangements

/// For each output element, the flat input index it copies from.
fn gather_map(prim: &Primitive, inputs: &[&Tensor4]) -> Result<([usize; 4], Vec<usize>)> {
    let x = inputs[0];
    let [b, c, h, w] = x.shape();
    let mut idx = Vec::with_capacity(x.len());
    let shape = match *prim {
        Primitive::SliceChannels { start, len } => {
            if len == 0 || start + len > c {
                return Err(Error::shape(prim.name(), format!("[{start}, {}) of {c}", start + len)));
            }
            for bi in 0..b {
                let s = (bi * c + start) * h * w;
                idx.extend(s..s + len * h * w);
            }
            [b, len, h, w]
        }
        Primitive::PixelShuffle { factor: r } => {
            if r == 0 || c % (r * r) != 0 {
                return Err(Error::shape(
                    prim.name(),
                    format!("{c} channels not divisible by factor² = {}", r * r),
                ));
            }
            let co = c / (r * r);
            for bi in 0..b {
                for ci in 0..co {
                    for y in 0..h * r {
                        for xx in 0..w * r {
                            let src_c = ci * r * r + (y % r) * r + (xx % r);
                            idx.push(((bi * c + src_c) * h + y / r) * w + xx / r);
                        }
                    }
                }
            }
            [b, co, h * r, w * r]
        }
        Primitive::Upsample2 => {
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            idx.push(((bi * c + ci) * h + y / 2) * w + xx / 2);
                        }
                    }
                }
            }
            [b, c, 2 * h, 2 * w]
        }
        Primitive::Patchify { patch: p } => {
            if p == 0 || h % p != 0 || w % p != 0 {
                return Err(Error::Divisibility {
                    height: h,
                    width: w,
                    divisor: p,
                });
            }
            let (gh, gw) = (h / p, w / p);
            for bi in 0..b {
                for ci in 0..c {
                    for py in 0..gh {
                        for px in 0..gw {
                            for dy in 0..p {
                                for dx in 0..p {
                                    idx.push(((bi * c + ci) * h + py * p + dy) * w + px * p + dx);
                                }
                            }
                        }
                    }
                }
            }
            [b, c, gh * gw, p * p]
        }
        Primitive::Unpatchify {
            patch: p,
            height,
            width,
        } => {
            if p == 0 || height % p != 0 || width % p != 0 {
                return Err(Error::Divisibility {
                    height,
                    width,
                    divisor: p,
                });
            }
            let (gh, gw) = (height / p, width / p);
            if h != gh * gw || w != p * p {
                return Err(Error::shape(
                    prim.name(),
                    format!("tokens {:?} do not tile {height}x{width} with patch {p}", x.shape()),
                ));
            }
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..height {
                        for xx in 0..width {
                            let token = (y / p) * gw + xx / p;
                            let k = (y % p) * p + xx % p;
                            idx.push(((bi * c + ci) * h + token) * w + k);
                        }
                    }
                }
            }
            [b, c, height, width]
        }
        Primitive::SwapChannelHeight => {
            for bi in 0..b {
                for y in 0..h {
                    for ci in 0..c {
                        let s = ((bi * c + ci) * h + y) * w;
                        idx.extend(s..s + w);
                    }
                }
            }
            [b, h, c, w]
        }
        Primitive::SplitHeads { heads } => {
            if heads == 0 || w % heads != 0 {
                return Err(Error::shape(prim.name(), format!("width {w} not divisible by {heads} heads")));
            }
            let dh = w / heads;
            for bi in 0..b {
                for ci in 0..c {
                    for hd in 0..heads {
                        for n in 0..h {
                            let s = ((bi * c + ci) * h + n) * w + hd * dh;
                            idx.extend(s..s + dh);
                        }
                    }
                }
            }
            [b, c * heads, h, dh]
        }
        Primitive::MergeHeads { heads } => {
            if heads == 0 || c % heads != 0 {
                return Err(Error::shape(prim.name(), format!("{c} channels not divisible by {heads} heads")));
            }
            let co = c / heads;
            for bi in 0..b {
                for ci in 0..co {
                    for n in 0..h {
                        for hd in 0..heads {
                            let s = ((bi * c + ci * heads + hd) * h + n) * w;
                            idx.extend(s..s + w);
                        }
                    }
                }
            }
            [b, co, h, w * heads]
        }
        _ => unreachable!("gather_map called for {}", prim.name()),
    };
    Ok((shape, idx))
}

fn is_gather(prim: &Primitive) -> bool {
    matches!(
        prim,
        Primitive::SliceChannels { .. }
            | Primitive::PixelShuffle { .. }
            | Primitive::Upsample2
            | Primitive::Patchify { .. }
            | Primitive::Unpatchify { .. }
            | Primitive::SwapChannelHeight
            | Primitive::SplitHeads { .. }
            | Primitive::MergeHeads { .. }
    )
}

fn max_pool_forward(prim: &Primitive, x: &Tensor4) -> Result<(Tensor4, Saved)> {
    let [b, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Divisibility {
            height: h,
            width: w,
            divisor: 2,
        });
    }
    let _ = prim;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([b, c, ho, wo]);
    let mut arg = Vec::with_capacity(out.len());
    let xd = x.data();
    let mut o = 0;
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.data_mut()[o] = xd[best];
                arg.push(best);
                o += 1;
            }
        }
    }
    Ok((out, Saved::Argmax(arg)))
}

/// Sub-pixel rearrangement `(B, C·r², H, W) → (B, C, H·r, W·r)`.
pub fn pixel_shuffle(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    let prim = Primitive::PixelShuffle { factor };
    let (shape, idx) = gather_map(&prim, &[x])?;
    Tensor4::from_vec(shape, idx.iter().map(|&i| x.data()[i]).collect())
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(y: &Tensor4, factor: usize) -> Result<Tensor4> {
    let [b, c, h, w] = y.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Divisibility {
            height: h,
            width: w,
            divisor: factor,
        });
    }
    let src_shape = [b, c * factor * factor, h / factor, w / factor];
    let probe = Tensor4::zeros(src_shape);
    let (_, idx) = gather_map(&Primitive::PixelShuffle { factor }, &[&probe])?;
    let mut out = Tensor4::zeros(src_shape);
    for (o, &i) in idx.iter().enumerate() {
        out.data_mut()[i] = y.data()[o];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// motion attention and loss

struct AttnCoeffs {
    k: f64,
    m: f64,
    dk_dalpha: f64,
    dm_dbeta: f64,
}

fn attn_coeffs(alpha: f64, beta: f64, eps: f64) -> AttnCoeffs {
    let ta = alpha.tanh();
    let denom = 0.45 * ta.abs() + eps;
    let tb = beta.tanh();
    AttnCoeffs {
        k: 5.0 / denom,
        m: 0.6 * tb,
        dk_dalpha: -5.0 * 0.45 * ta.signum() * (1.0 - ta * ta) / (denom * denom),
        dm_dbeta: 0.6 * (1.0 - tb * tb),
    }
}

/// `k(α) = 5 / (0.45|tanh α| + eps)`.
pub(crate) fn attention_slope(alpha: f64, eps: f64) -> f64 {
    attn_coeffs(alpha, 0.0, eps).k
}

/// `m(β) = 0.6 tanh β`.
pub(crate) fn attention_offset(beta: f64) -> f64 {
    0.6 * beta.tanh()
}

#[inline]
fn wbce_term(p: f64, y: f64) -> f64 {
    (1.0 - p).powi(2) * y * p.ln() + p * p * (1.0 - y) * (1.0 - p).ln()
}

#[inline]
fn wbce_dterm_dp(p: f64, y: f64) -> f64 {
    y * (-2.0 * (1.0 - p) * p.ln() + (1.0 - p).powi(2) / p)
        + (1.0 - y) * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p))
}

// ---------------------------------------------------------------------------
// dispatch

/// Evaluate a primitive. Pure: identical inputs give bit-identical outputs.
pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor4]) -> Result<(Tensor4, Saved)> {
    if inputs.is_empty() {
        return Err(Error::shape(prim.name(), "no inputs"));
    }
    for t in inputs {
        t.ensure_finite(prim.name())?;
    }
    let x = inputs[0];
    let out = match prim {
        Primitive::Conv2d { stride, padding } => conv2d_forward(prim, inputs, *stride, *padding)?,
        Primitive::Relu => x.map(|v| v.max(0.0)),
        Primitive::Sigmoid => x.map(sigmoid),
        Primitive::Tanh => x.map(f64::tanh),
        Primitive::Add => {
            expect_inputs(prim, inputs, &[2])?;
            binary_forward(prim, x, inputs[1], |a, b| a + b)?
        }
        Primitive::Subtract => {
            expect_inputs(prim, inputs, &[2])?;
            binary_forward(prim, x, inputs[1], |a, b| a - b)?
        }
        Primitive::Multiply => {
            expect_inputs(prim, inputs, &[2])?;
            binary_forward(prim, x, inputs[1], |a, b| a * b)?
        }
        Primitive::MatMul { transpose_rhs } => {
            expect_inputs(prim, inputs, &[2])?;
            matmul_forward(prim, x, inputs[1], *transpose_rhs)?
        }
        Primitive::LayerNorm { eps } => return layer_norm_forward(prim, inputs, *eps),
        Primitive::Softmax => softmax_forward(x),
        Primitive::Concat => Tensor4::concat_channels(inputs)?,
        Primitive::Dropout { rate, mode, seed } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
            }
            if *mode == Mode::Infer || *rate == 0.0 {
                x.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
                    .collect();
                let out = Tensor4::from_vec(
                    x.shape(),
                    x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
                )?;
                return Ok((out, Saved::Mask(mask)));
            }
        }
        Primitive::MaxPool2d => return max_pool_forward(prim, x),
        Primitive::BatchNorm2d { mode, eps } => return batch_norm_forward(prim, inputs, *mode, *eps),
        Primitive::Linear => linear_forward(prim, inputs)?,
        Primitive::Scale { factor } => x.map(|v| v * factor),
        Primitive::Sum => Tensor4::scalar(x.sum()),
        Primitive::MotionAttention { eps } => {
            expect_inputs(prim, inputs, &[3])?;
            let alpha = unit_param(prim, inputs[1], "alpha")?;
            let beta = unit_param(prim, inputs[2], "beta")?;
            let c = attn_coeffs(alpha, beta, *eps);
            x.map(|v| sigmoid(c.k * (v.abs() - c.m)))
        }
        Primitive::Wbce { clamp } => {
            expect_inputs(prim, inputs, &[2])?;
            let y = inputs[1];
            if x.shape() != y.shape() {
                return Err(Error::shape(prim.name(), format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            let n = x.len() as f64;
            let s: f64 = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &t)| wbce_term(p.clamp(*clamp, 1.0 - clamp), t))
                .sum();
            Tensor4::scalar(-s / n)
        }
        p if is_gather(p) => {
            let (shape, idx) = gather_map(p, inputs)?;
            Tensor4::from_vec(shape, idx.iter().map(|&i| x.data()[i]).collect())?
        }
        _ => unreachable!(),
    };
    Ok((out, Saved::None))
}

/// Gradient rule: given upstream `g = ∂L/∂out`, return `∂L/∂input` for each input
/// (`None` where an input is not differentiable).
pub(crate) fn backward(
    prim: &Primitive,
    inputs: &[&Tensor4],
    out: &Tensor4,
    saved: &Saved,
    g: &Tensor4,
) -> Result<Vec<Option<Tensor4>>> {
    let x = inputs[0];
    let grads = match prim {
        Primitive::Conv2d { stride, padding } => return conv2d_backward(prim, inputs, g, *stride, *padding),
        Primitive::Relu => vec![Some(x.zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?)],
        Primitive::Sigmoid => vec![Some(out.zip_map(g, |s, gv| gv * s * (1.0 - s))?)],
        Primitive::Tanh => vec![Some(out.zip_map(g, |t, gv| gv * (1.0 - t * t))?)],
        Primitive::Add => {
            let (ga, gb) = binary_backward(x, inputs[1], g, |_, _| 1.0, |_, _| 1.0);
            vec![Some(ga), Some(gb)]
        }
        Primitive::Subtract => {
            let (ga, gb) = binary_backward(x, inputs[1], g, |_, _| 1.0, |_, _| -1.0);
            vec![Some(ga), Some(gb)]
        }
        Primitive::Multiply => {
            let (ga, gb) = binary_backward(x, inputs[1], g, |_, b| b, |a, _| a);
            vec![Some(ga), Some(gb)]
        }
        Primitive::MatMul { transpose_rhs } => {
            let (ga, gb) = matmul_backward(x, inputs[1], g, *transpose_rhs);
            vec![Some(ga), Some(gb)]
        }
        Primitive::LayerNorm { .. } => return layer_norm_backward(inputs, g, saved),
        Primitive::Softmax => vec![Some(softmax_backward(out, g))],
        Primitive::Concat => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for t in inputs {
                grads.push(Some(g.slice_channels(start, t.channels())?));
                start += t.channels();
            }
            grads
        }
        Primitive::Dropout { .. } => match saved {
            Saved::Mask(mask) => vec![Some(Tensor4::from_vec(
                g.shape(),
                g.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
            )?)],
            _ => vec![Some(g.clone())],
        },
        Primitive::MaxPool2d => {
            let Saved::Argmax(arg) = saved else {
                return Err(Error::Invalid("max_pool2d: missing argmax".into()));
            };
            let mut gx = Tensor4::zeros(x.shape());
            for (o, &i) in arg.iter().enumerate() {
                gx.data_mut()[i] += g.data()[o];
            }
            vec![Some(gx)]
        }
        Primitive::BatchNorm2d { mode, .. } => return batch_norm_backward(inputs, g, saved, *mode),
        Primitive::Linear => return linear_backward(prim, inputs, g),
        Primitive::Scale { factor } => vec![Some(g.map(|v| v * factor))],
        Primitive::Sum => {
            let gv = g.data()[0];
            vec![Some(Tensor4::filled(x.shape(), gv))]
        }
        Primitive::MotionAttention { eps } => {
            let alpha = inputs[1].data()[0];
            let beta = inputs[2].data()[0];
            let c = attn_coeffs(alpha, beta, *eps);
            let mut gx = Tensor4::zeros(x.shape());
            let (mut ga, mut gb) = (0.0, 0.0);
            for (((&xv, &a), &gv), gxv) in x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .zip(gx.data_mut())
            {
                let dz = gv * a * (1.0 - a);
                let sign = if xv > 0.0 {
                    1.0
                } else if xv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *gxv = dz * c.k * sign;
                ga += dz * (xv.abs() - c.m) * c.dk_dalpha;
                gb += dz * (-c.k) * c.dm_dbeta;
            }
            vec![Some(gx), Some(Tensor4::scalar(ga)), Some(Tensor4::scalar(gb))]
        }
        Primitive::Wbce { clamp } => {
            let y = inputs[1];
            let n = x.len() as f64;
            let gl = g.data()[0];
            let gp = x.zip_map(y, |p, t| {
                if p < *clamp || p > 1.0 - clamp {
                    0.0
                } else {
                    -gl * wbce_dterm_dp(p, t) / n
                }
            })?;
            let gy = x.zip_map(y, |p, _| {
                let p = p.clamp(*clamp, 1.0 - clamp);
                -gl * ((1.0 - p).powi(2) * p.ln() - p * p * (1.0 - p).ln()) / n
            })?;
            vec![Some(gp), Some(gy)]
        }
        p if is_gather(p) => {
            let (_, idx) = gather_map(p, inputs)?;
            let mut gx = Tensor4::zeros(x.shape());
            for (o, &i) in idx.iter().enumerate() {
                gx.data_mut()[i] += g.data()[o];
            }
            vec![Some(gx)]
        }
        _ => unreachable!(),
    };
    Ok(grads)
}
