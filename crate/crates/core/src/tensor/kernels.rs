// Raw forward/backward kernels behind the tape ops. Everything here works on
// whole tensors and loops over the batch; the tape only wires these together.

use super::{cst, ConvWeights, PadMode, PaddingSpec, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

// cols[(c*k + kh)*k + kw, oh*wo + ow] = x[c, oh*s + kh, ow*s + kw]
fn im2col<T: Scalar>(x: &[T], g: ConvGeom, cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..g.ho {
                    let src = &plane[(oh * g.stride + kh) * g.w..];
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if g.stride == 1 {
                        out.copy_from_slice(&src[kw..kw + g.wo]);
                    } else {
                        for (ow, o) in out.iter_mut().enumerate() {
                            *o = src[ow * g.stride + kw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: ConvGeom, x: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.ho {
                    let base = (oh * g.stride + kh) * g.w + kw;
                    for ow in 0..g.wo {
                        plane[base + ow * g.stride] += src[oh * g.wo + ow];
                    }
                }
            }
        }
    }
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be at least 1"));
    }
    Ok(())
}

/// Geometry of an unpadded convolution of `x` with `w`.
pub(crate) fn conv_geom(x: &[usize; 4], w: &[usize; 4], stride: usize) -> Result<ConvGeom> {
    check_stride("conv2d", stride)?;
    let [_, c, h, wd] = *x;
    let [_, wc, k, k2] = *w;
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but kernel expects {wc}"),
        ));
    }
    if k != k2 {
        return Err(Error::shape("conv2d", format!("kernel {k}x{k2} is not square")));
    }
    if k > h || k > wd {
        return Err(Error::shape(
            "conv2d",
            format!("{k}x{k} kernel does not fit a {h}x{wd} (padded) input"),
        ));
    }
    Ok(ConvGeom {
        c,
        h,
        w: wd,
        k,
        stride,
        ho: (h - k) / stride + 1,
        wo: (wd - k) / stride + 1,
    })
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let xs = x.dims4("conv2d")?;
    let ws = w.dims4("conv2d")?;
    let g = conv_geom(&xs, &ws, stride)?;
    let out_c = ws[0];
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {out_c} output channels", b.shape()),
            ));
        }
    }
    let batch = xs[0];
    let n = g.cols();
    let mut out = vec![T::zero(); batch * out_c * n];
    let mut cols = vec![T::zero(); g.rows() * n];
    let in_len = g.c * g.h * g.w;
    for b in 0..batch {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dst = &mut out[b * out_c * n..(b + 1) * out_c * n];
        T::gemm(out_c, g.rows(), n, w.data(), false, &cols, false, dst, false);
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(n).enumerate() {
                let bv = bias.data()[o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![batch, out_c, g.ho, g.wo], out)
}

/// Gradients of an unpadded convolution: (d input, d kernel, d bias).
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &[T],
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let xs = x.dims4("conv2d").expect("validated in forward");
    let ws = w.dims4("conv2d").expect("validated in forward");
    let g = conv_geom(&xs, &ws, stride).expect("validated in forward");
    let out_c = ws[0];
    let batch = xs[0];
    let n = g.cols();
    let in_len = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    let mut db = vec![T::zero(); out_c];
    let mut cols = vec![T::zero(); g.rows() * n];
    for b in 0..batch {
        let gb = &grad[b * out_c * n..(b + 1) * out_c * n];
        for (o, chunk) in gb.chunks(n).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[b * in_len..(b + 1) * in_len], g, &mut cols);
            T::gemm(out_c, n, g.rows(), gb, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(g.rows(), out_c, n, w.data(), true, gb, false, &mut cols, false);
            col2im_add(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

/// Geometry of the convolution whose adjoint the transposed op computes:
/// the full (uncropped) output plays the role of the convolution input.
pub(crate) fn conv_t_geom(
    x: &[usize; 4],
    w: &[usize; 4],
    stride: usize,
    crop: &PaddingSpec,
) -> Result<(ConvGeom, usize, usize)> {
    check_stride("conv_transpose2d", stride)?;
    let [_, c, h, wd] = *x;
    let [wc, out_c, k, k2] = *w;
    if wc != c {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input has {c} channels but kernel expects {wc}"),
        ));
    }
    if k != k2 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("kernel {k}x{k2} is not square"),
        ));
    }
    let full_h = (h - 1) * stride + k;
    let full_w = (wd - 1) * stride + k;
    if crop.total_h() >= full_h || crop.total_w() >= full_w {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("padding {crop:?} removes the whole {full_h}x{full_w} output"),
        ));
    }
    let g = ConvGeom {
        c: out_c,
        h: full_h,
        w: full_w,
        k,
        stride,
        ho: h,
        wo: wd,
    };
    Ok((g, full_h - crop.total_h(), full_w - crop.total_w()))
}

pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    crop: &PaddingSpec,
) -> Result<Tensor<T>> {
    let xs = x.dims4("conv_transpose2d")?;
    let ws = w.dims4("conv_transpose2d")?;
    let (g, oh, ow) = conv_t_geom(&xs, &ws, stride, crop)?;
    let out_c = ws[1];
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("bias {:?} for {out_c} output channels", b.shape()),
            ));
        }
    }
    let batch = xs[0];
    let in_c = xs[1];
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    let mut full = vec![T::zero(); out_c * g.h * g.w];
    let mut out = vec![T::zero(); batch * out_c * oh * ow];
    for b in 0..batch {
        let xb = &x.data()[b * in_c * n..(b + 1) * in_c * n];
        T::gemm(g.rows(), in_c, n, w.data(), true, xb, false, &mut cols, false);
        full.iter_mut().for_each(|v| *v = T::zero());
        col2im_add(&cols, g, &mut full);
        let dst = &mut out[b * out_c * oh * ow..(b + 1) * out_c * oh * ow];
        for c in 0..out_c {
            let bv = bias.map_or(T::zero(), |t| t.data()[c]);
            for r in 0..oh {
                let src = &full[c * g.h * g.w + (r + crop.top) * g.w + crop.left..];
                let row = &mut dst[(c * oh + r) * ow..(c * oh + r + 1) * ow];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o = s + bv;
                }
            }
        }
    }
    Tensor::new(vec![batch, out_c, oh, ow], out)
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &[T],
    stride: usize,
    crop: &PaddingSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let xs = x.dims4("conv_transpose2d").expect("validated in forward");
    let ws = w.dims4("conv_transpose2d").expect("validated in forward");
    let (g, oh, ow) = conv_t_geom(&xs, &ws, stride, crop).expect("validated in forward");
    let batch = xs[0];
    let in_c = xs[1];
    let out_c = ws[1];
    let n = g.cols();
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    let mut db = vec![T::zero(); out_c];
    let mut full = vec![T::zero(); out_c * g.h * g.w];
    let mut cols = vec![T::zero(); g.rows() * n];
    for b in 0..batch {
        let gb = &grad[b * out_c * oh * ow..(b + 1) * out_c * oh * ow];
        for c in 0..out_c {
            let plane = &gb[c * oh * ow..(c + 1) * oh * ow];
            db[c] += plane.iter().copied().sum::<T>();
            for r in 0..oh {
                let dst = &mut full[c * g.h * g.w + (r + crop.top) * g.w + crop.left..];
                dst[..ow].copy_from_slice(&plane[r * ow..(r + 1) * ow]);
            }
        }
        im2col(&full, g, &mut cols);
        let xb = &x.data()[b * in_c * n..(b + 1) * in_c * n];
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[b * in_c * n..(b + 1) * in_c * n];
            T::gemm(in_c, g.rows(), n, w.data(), false, &cols, false, dst, false);
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(in_c, n, g.rows(), xb, false, &cols, true, dw, true);
        }
    }
    (dx, dw, db)
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn check_pad(h: usize, w: usize, spec: &PaddingSpec) -> Result<()> {
    if spec.mode == PadMode::Reflect
        && (spec.top.max(spec.bottom) >= h || spec.left.max(spec.right) >= w)
    {
        return Err(Error::shape(
            "pad2d",
            format!("reflection padding {spec:?} needs more than a {h}x{w} input"),
        ));
    }
    Ok(())
}

/// Spatially pads a `[B, C, H, W]` tensor.
pub fn pad2d<T: Scalar>(x: &Tensor<T>, spec: &PaddingSpec) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4("pad2d")?;
    check_pad(h, w, spec)?;
    let ph = h + spec.total_h();
    let pw = w + spec.total_w();
    let mut out = vec![T::zero(); b * c * ph * pw];
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.chunks_mut(ph * pw)) {
        for r in 0..ph {
            let sr = r as isize - spec.top as isize;
            let src_r = match spec.mode {
                PadMode::Zero if sr < 0 || sr >= h as isize => continue,
                PadMode::Zero => sr as usize,
                PadMode::Reflect => reflect_index(sr, h),
            };
            for col in 0..pw {
                let sc = col as isize - spec.left as isize;
                let src_c = match spec.mode {
                    PadMode::Zero if sc < 0 || sc >= w as isize => continue,
                    PadMode::Zero => sc as usize,
                    PadMode::Reflect => reflect_index(sc, w),
                };
                plane_out[r * pw + col] = plane_in[src_r * w + src_c];
            }
        }
    }
    Tensor::new(vec![b, c, ph, pw], out)
}

pub(crate) fn pad2d_backward<T: Scalar>(
    grad: &[T],
    in_shape: &[usize],
    spec: &PaddingSpec,
) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let ph = h + spec.total_h();
    let pw = w + spec.total_w();
    let numel: usize = in_shape.iter().product();
    let mut dx = vec![T::zero(); numel];
    for (plane_g, plane_dx) in grad.chunks(ph * pw).zip(dx.chunks_mut(h * w)) {
        for r in 0..ph {
            let sr = r as isize - spec.top as isize;
            let src_r = match spec.mode {
                PadMode::Zero if sr < 0 || sr >= h as isize => continue,
                PadMode::Zero => sr as usize,
                PadMode::Reflect => reflect_index(sr, h),
            };
            for col in 0..pw {
                let sc = col as isize - spec.left as isize;
                let src_c = match spec.mode {
                    PadMode::Zero if sc < 0 || sc >= w as isize => continue,
                    PadMode::Zero => sc as usize,
                    PadMode::Reflect => reflect_index(sc, w),
                };
                plane_dx[src_r * w + src_c] += plane_g[r * pw + col];
            }
        }
    }
    dx
}

/// Flat indices of the kernel entries feeding output channel `group` when
/// channels live on `axis` (0 for conv kernels, 1 for transposed kernels).
fn demod_groups(shape: &[usize], axis: usize) -> (usize, impl Fn(usize, usize) -> usize + '_) {
    let spatial: usize = shape[2..].iter().product();
    let groups = shape[axis];
    let per_group = shape.iter().product::<usize>() / groups;
    let index = move |g: usize, j: usize| -> usize {
        if axis == 0 {
            g * per_group + j
        } else {
            let a = j / spatial;
            let s = j % spatial;
            (a * shape[1] + g) * spatial + s
        }
    };
    (per_group, index)
}

/// Demodulated kernel and the per-group `1/sqrt(sum w^2 + eps)` factors.
pub(crate) fn demodulate_forward<T: Scalar>(
    w: &Tensor<T>,
    eps: T,
    axis: usize,
) -> (Tensor<T>, Vec<T>) {
    let shape = w.shape();
    let groups = shape[axis];
    let (per_group, index) = demod_groups(shape, axis);
    let mut out = w.clone();
    let mut inv = Vec::with_capacity(groups);
    for g in 0..groups {
        let ss: T = (0..per_group).map(|j| w.data()[index(g, j)].powi(2)).sum();
        let r = (ss + eps).sqrt().recip();
        for j in 0..per_group {
            let i = index(g, j);
            out.data_mut()[i] = w.data()[i] * r;
        }
        inv.push(r);
    }
    (out, inv)
}

pub(crate) fn demodulate_backward<T: Scalar>(
    w: &Tensor<T>,
    inv: &[T],
    grad: &[T],
    axis: usize,
) -> Vec<T> {
    let shape = w.shape();
    let (per_group, index) = demod_groups(shape, axis);
    let mut dw = vec![T::zero(); w.numel()];
    for (g, &r) in inv.iter().enumerate() {
        let dot: T = (0..per_group)
            .map(|j| {
                let i = index(g, j);
                grad[i] * w.data()[i]
            })
            .sum();
        let r3 = r * r * r;
        for j in 0..per_group {
            let i = index(g, j);
            dw[i] = r * grad[i] - w.data()[i] * r3 * dot;
        }
    }
    dw
}

/// Normalizes each output channel's filter by the root of its energy plus
/// `eps`. The bias is left untouched.
pub fn demodulate_weights<T: Scalar>(weights: &ConvWeights<T>, eps: f64) -> ConvWeights<T> {
    ConvWeights {
        kernel: demodulate_forward(&weights.kernel, cst(eps), 0).0,
        bias: weights.bias.clone(),
    }
}

/// [`demodulate_weights`] for a transposed kernel laid out `[in, out, k, k]`.
pub fn demodulate_transposed_weights<T: Scalar>(
    weights: &ConvWeights<T>,
    eps: f64,
) -> ConvWeights<T> {
    ConvWeights {
        kernel: demodulate_forward(&weights.kernel, cst(eps), 1).0,
        bias: weights.bias.clone(),
    }
}

/// Per (sample, channel) normalization. Returns the normalized values and
/// the inverse standard deviations used.
pub(crate) fn instance_norm_forward<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Vec<T>, Vec<T>)> {
    let [_, _, h, w] = x.dims4("instance_norm")?;
    let n = h * w;
    if n < 2 {
        return Err(Error::shape(
            "instance_norm",
            format!("needs at least 2 spatial positions, got {h}x{w}"),
        ));
    }
    let nf: T = cst(n as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv = Vec::with_capacity(x.numel() / n);
    for (plane, out) in x.data().chunks(n).zip(xhat.chunks_mut(n)) {
        let mean = plane.iter().copied().sum::<T>() / nf;
        let var = plane.iter().map(|&v| (v - mean).powi(2)).sum::<T>() / nf;
        let r = (var + eps).sqrt().recip();
        for (o, &v) in out.iter_mut().zip(plane) {
            *o = (v - mean) * r;
        }
        inv.push(r);
    }
    Ok((xhat, inv))
}

/// Gradient w.r.t. the input given the gradient w.r.t. `xhat`.
pub(crate) fn instance_norm_backward<T: Scalar>(
    xhat: &[T],
    inv: &[T],
    dxhat: &[T],
    n: usize,
) -> Vec<T> {
    let nf: T = cst(n as f64);
    let mut dx = vec![T::zero(); xhat.len()];
    for (p, &r) in inv.iter().enumerate() {
        let range = p * n..(p + 1) * n;
        let xh = &xhat[range.clone()];
        let g = &dxhat[range.clone()];
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for ((d, &gi), &xi) in dx[range].iter_mut().zip(g).zip(xh) {
            *d = r / nf * (nf * gi - sum_g - xi * sum_gx);
        }
    }
    dx
}
