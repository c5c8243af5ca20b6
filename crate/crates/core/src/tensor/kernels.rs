//! Forward and backward kernels. All functions are pure; accumulation order is fixed
//! so results are bit-reproducible.

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const DICE_SMOOTH: f64 = 1e-5;

/// Output extent of a strided, padded window along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl ConvGeom {
    fn new<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        let [n, ci, d, h, wd] = x.dims5()?;
        let [co, wci, kd, kh, kw] = w.dims5().map_err(|_| {
            Error::invalid(format!("conv kernel must be Cout,Cin,kD,kH,kW, got {:?}", w.shape()))
        })?;
        if wci != ci {
            return Err(Error::invalid(format!(
                "conv kernel expects {wci} input channels, input has {ci}"
            )));
        }
        let input = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = conv_out_extent(input[ax], kernel[ax], stride[ax], pad[ax])
                .filter(|&e| e > 0)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "conv on spatial {input:?} with kernel {kernel:?}, stride {stride:?}, pad {pad:?} has zero output extent"
                    ))
                })?;
        }
        Ok(ConvGeom { n, ci, co, input, kernel, stride, pad, output })
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    /// 1x1x1, stride 1, no padding: the input sample already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Valid output index range `[lo, hi)` along an axis for kernel tap `k`.
    fn valid_range(&self, ax: usize, k: usize) -> (usize, usize) {
        let (s, p, inp, out) = (self.stride[ax], self.pad[ax] as isize, self.input[ax] as isize, self.output[ax]);
        let off = k as isize - p;
        // need 0 <= o*s + off < inp
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
        let hi_excl = if inp - off <= 0 { 0 } else { ((inp - off - 1) as usize) / s + 1 };
        (lo.min(out), hi_excl.min(out).max(lo.min(out)))
    }
}

/// Output z-planes per column chunk, sized so a chunk stays cache resident.
fn planes_per_chunk(g: &ConvGeom) -> usize {
    const CHUNK_ELEMS: usize = 1 << 18;
    let plane = g.output[1] * g.output[2];
    (CHUNK_ELEMS / (g.ci * g.kvol() * plane).max(1)).clamp(1, g.output[0])
}

/// Column matrix for output planes `z0..z1`: `ci * kvol` rows of `(z1 - z0) * oh * ow`.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut [T], z0: usize, z1: usize) {
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let p = (z1 - z0) * oh * ow;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (zlo, zhi) = g.valid_range(0, a);
            let (zlo, zhi) = (zlo.clamp(z0, z1), zhi.clamp(z0, z1));
            for b in 0..kh {
                let (ylo, yhi) = g.valid_range(1, b);
                for e in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, e);
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.fill(T::zero());
                    for z in zlo..zhi {
                        let iz = z * g.stride[0] + a - g.pad[0];
                        for y in ylo..yhi {
                            let iy = y * g.stride[1] + b - g.pad[1];
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let drow = &mut dst[((z - z0) * oh + y) * ow..((z - z0) * oh + y + 1) * ow];
                            if xlo == xhi {
                                continue;
                            }
                            if g.stride[2] == 1 {
                                let off = xlo + e - g.pad[2];
                                drow[xlo..xhi].copy_from_slice(&src[off..off + (xhi - xlo)]);
                            } else {
                                for xo in xlo..xhi {
                                    drow[xo] = src[xo * g.stride[2] + e - g.pad[2]];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds a column chunk for output planes `z0..z1` back onto the input grid.
fn col2im<T: Element>(g: &ConvGeom, col: &[T], x: &mut [T], z0: usize, z1: usize) {
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let p = (z1 - z0) * oh * ow;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (zlo, zhi) = g.valid_range(0, a);
            let (zlo, zhi) = (zlo.clamp(z0, z1), zhi.clamp(z0, z1));
            for b in 0..kh {
                let (ylo, yhi) = g.valid_range(1, b);
                for e in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, e);
                    let src = &col[row * p..(row + 1) * p];
                    for z in zlo..zhi {
                        let iz = z * g.stride[0] + a - g.pad[0];
                        for y in ylo..yhi {
                            let iy = y * g.stride[1] + b - g.pad[1];
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let srow = &src[((z - z0) * oh + y) * ow..((z - z0) * oh + y + 1) * ow];
                            for xo in xlo..xhi {
                                let ix = xo * g.stride[2] + e - g.pad[2];
                                dst[ix] = dst[ix] + srow[xo];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_bias<T: Element>(b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.numel() != channels {
            return Err(Error::invalid(format!(
                "bias has {} elements, expected {channels}",
                b.numel()
            )));
        }
    }
    Ok(())
}

/// 3-D cross-correlation. Output extent per axis is `floor((in + 2p - k) / s) + 1`.
pub fn conv3d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    check_bias(b, g.co)?;
    let k = g.ci * g.kvol();
    let (pin, pout) = (g.in_vox(), g.out_vox());
    let plane = g.output[1] * g.output[2];
    let zc = planes_per_chunk(&g);
    let mut out = vec![T::zero(); g.n * g.co * pout];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * zc * plane] };
    for s in 0..g.n {
        let xs = &x.data()[s * g.ci * pin..(s + 1) * g.ci * pin];
        let os = &mut out[s * g.co * pout..(s + 1) * g.co * pout];
        if g.is_pointwise() {
            // SAFETY: w is co x k row-major, xs is k x pout, os is co x pout.
            unsafe {
                T::gemm(g.co, k, pout, T::one(), w.data().as_ptr(), k as isize, 1, xs.as_ptr(), pout as isize, 1, T::zero(), os.as_mut_ptr(), pout as isize, 1);
            }
        } else {
            for z0 in (0..g.output[0]).step_by(zc) {
                let z1 = (z0 + zc).min(g.output[0]);
                let pc = (z1 - z0) * plane;
                im2col(&g, xs, &mut col, z0, z1);
                // SAFETY: w is co x k, the chunk is k x pc, output columns z0*plane.. with row stride pout.
                unsafe {
                    T::gemm(
                        g.co,
                        k,
                        pc,
                        T::one(),
                        w.data().as_ptr(),
                        k as isize,
                        1,
                        col.as_ptr(),
                        pc as isize,
                        1,
                        T::zero(),
                        os.as_mut_ptr().add(z0 * plane),
                        pout as isize,
                        1,
                    );
                }
            }
        }
        if let Some(b) = b {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut os[c * pout..(c + 1) * pout] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.co, g.output[0], g.output[1], g.output[2]], out)
}

/// Gradients of [`conv3d`] with respect to input, kernel and (optionally) bias.
pub fn conv3d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    stride: [usize; 3],
    pad: [usize; 3],
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    let k = g.ci * g.kvol();
    let (pin, pout) = (g.in_vox(), g.out_vox());
    if gy.shape() != [g.n, g.co, g.output[0], g.output[1], g.output[2]] {
        return Err(Error::invalid("conv3d upstream gradient has the wrong shape"));
    }
    let plane = g.output[1] * g.output[2];
    let zc = if g.is_pointwise() { g.output[0] } else { planes_per_chunk(&g) };
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * zc * plane] };
    let mut gcol = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * zc * plane] };
    for s in 0..g.n {
        let xs = &x.data()[s * g.ci * pin..(s + 1) * g.ci * pin];
        let gys = &gy.data()[s * g.co * pout..(s + 1) * g.co * pout];
        let gxs = &mut gx[s * g.ci * pin..(s + 1) * g.ci * pin];
        for z0 in (0..g.output[0]).step_by(zc) {
            let z1 = (z0 + zc).min(g.output[0]);
            let pc = (z1 - z0) * plane;
            let (cols, crs): (&[T], usize) = if g.is_pointwise() {
                (xs, pout)
            } else {
                im2col(&g, xs, &mut col, z0, z1);
                (&col, pc)
            };
            let gyc = gys[z0 * plane..].as_ptr();
            // SAFETY: gw (co x k) += gy chunk (co x pc, row stride pout) * cols^T (pc x k).
            unsafe {
                T::gemm(
                    g.co,
                    pc,
                    k,
                    T::one(),
                    gyc,
                    pout as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    crs as isize,
                    T::one(),
                    gw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            let (target, trs): (*mut T, usize) =
                if g.is_pointwise() { (gxs.as_mut_ptr(), pout) } else { (gcol.as_mut_ptr(), pc) };
            // SAFETY: target (k x pc) = w^T (k x co) * gy chunk (co x pc).
            unsafe {
                T::gemm(
                    k,
                    g.co,
                    pc,
                    T::one(),
                    w.data().as_ptr(),
                    1,
                    k as isize,
                    gyc,
                    pout as isize,
                    1,
                    T::zero(),
                    target,
                    trs as isize,
                    1,
                );
            }
            if !g.is_pointwise() {
                col2im(&g, &gcol, gxs, z0, z1);
            }
        }
    }
    let gb = with_bias.then(|| channel_sums(gy));
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(w.shape().to_vec(), gw)?, gb))
}

/// Per-channel sum over batch and spatial positions of an `N, C, ...` tensor.
fn channel_sums<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let v = t.numel() / (n * c);
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * v;
            *o = *o + t.data()[base..base + v].iter().copied().sum::<T>();
        }
    }
    raw(&[c], out)
}

fn raw<T: Element>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor { shape: shape.to_vec(), data }
}

struct TransposeGeom {
    n: usize,
    ci: usize,
    co: usize,
    input: [usize; 3],
    stride: [usize; 3],
}

impl TransposeGeom {
    fn new<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: [usize; 3]) -> Result<Self> {
        let [n, ci, d, h, wd] = x.dims5()?;
        let [wci, co, kd, kh, kw] = w.dims5().map_err(|_| {
            Error::invalid(format!("transpose conv kernel must be Cin,Cout,kD,kH,kW, got {:?}", w.shape()))
        })?;
        if stride.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::invalid(format!("unsupported transpose conv stride {stride:?}")));
        }
        if [kd, kh, kw] != stride {
            return Err(Error::invalid(format!(
                "transpose conv kernel {:?} must equal its stride {stride:?}",
                [kd, kh, kw]
            )));
        }
        if wci != ci {
            return Err(Error::invalid(format!(
                "transpose conv kernel expects {wci} input channels, input has {ci}"
            )));
        }
        Ok(TransposeGeom { n, ci, co, input: [d, h, wd], stride })
    }

    fn output(&self) -> [usize; 3] {
        [self.input[0] * self.stride[0], self.input[1] * self.stride[1], self.input[2] * self.stride[2]]
    }

    fn kvol(&self) -> usize {
        self.stride.iter().product()
    }

    /// Visits (tap, input voxel, output voxel) for every tap; kernel == stride so
    /// each output voxel is reached exactly once.
    fn for_each_tap(&self, mut f: impl FnMut(usize, &mut dyn FnMut(&mut dyn FnMut(usize, usize)))) {
        let [d, h, w] = self.input;
        let [_, oh, ow] = self.output();
        let [sd, sh, sw] = self.stride;
        let mut t = 0;
        for a in 0..sd {
            for b in 0..sh {
                for e in 0..sw {
                    let mut visit = |g: &mut dyn FnMut(usize, usize)| {
                        for z in 0..d {
                            for y in 0..h {
                                for x in 0..w {
                                    let pi = (z * h + y) * w + x;
                                    let po = ((z * sd + a) * oh + (y * sh + b)) * ow + (x * sw + e);
                                    g(pi, po);
                                }
                            }
                        }
                    };
                    f(t, &mut visit);
                    t += 1;
                }
            }
        }
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping taps).
/// Kernel layout is `Cin, Cout, kD, kH, kW`.
pub fn transpose_conv3d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let g = TransposeGeom::new(x, w, stride)?;
    check_bias(b, g.co)?;
    let out_sp = g.output();
    let pin: usize = g.input.iter().product();
    let pout: usize = out_sp.iter().product();
    let kv = g.kvol();
    let mut out = vec![T::zero(); g.n * g.co * pout];
    let mut y = vec![T::zero(); g.co * pin];
    for s in 0..g.n {
        let xs = &x.data()[s * g.ci * pin..(s + 1) * g.ci * pin];
        let os = &mut out[s * g.co * pout..(s + 1) * g.co * pout];
        g.for_each_tap(|t, visit| {
            // SAFETY: y (co x pin) = W_t^T (co x ci) * x_s (ci x pin).
            unsafe {
                T::gemm(
                    g.co,
                    g.ci,
                    pin,
                    T::one(),
                    w.data().as_ptr().add(t),
                    kv as isize,
                    (g.co * kv) as isize,
                    xs.as_ptr(),
                    pin as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr(),
                    pin as isize,
                    1,
                );
            }
            visit(&mut |pi, po| {
                for c in 0..g.co {
                    os[c * pout + po] = y[c * pin + pi];
                }
            });
        });
        if let Some(b) = b {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut os[c * pout..(c + 1) * pout] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.co, out_sp[0], out_sp[1], out_sp[2]], out)
}

pub fn transpose_conv3d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    stride: [usize; 3],
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let g = TransposeGeom::new(x, w, stride)?;
    let out_sp = g.output();
    let pin: usize = g.input.iter().product();
    let pout: usize = out_sp.iter().product();
    let kv = g.kvol();
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gt = vec![T::zero(); g.co * pin];
    for s in 0..g.n {
        let xs = &x.data()[s * g.ci * pin..(s + 1) * g.ci * pin];
        let gys = &gy.data()[s * g.co * pout..(s + 1) * g.co * pout];
        let gxs = &mut gx[s * g.ci * pin..(s + 1) * g.ci * pin];
        g.for_each_tap(|t, visit| {
            visit(&mut |pi, po| {
                for c in 0..g.co {
                    gt[c * pin + pi] = gys[c * pout + po];
                }
            });
            // SAFETY: gx_s (ci x pin) += W_t (ci x co) * G_t (co x pin);
            // gW_t (ci x co) += x_s (ci x pin) * G_t^T (pin x co).
            unsafe {
                T::gemm(
                    g.ci,
                    g.co,
                    pin,
                    T::one(),
                    w.data().as_ptr().add(t),
                    (g.co * kv) as isize,
                    kv as isize,
                    gt.as_ptr(),
                    pin as isize,
                    1,
                    T::one(),
                    gxs.as_mut_ptr(),
                    pin as isize,
                    1,
                );
                T::gemm(
                    g.ci,
                    pin,
                    g.co,
                    T::one(),
                    xs.as_ptr(),
                    pin as isize,
                    1,
                    gt.as_ptr(),
                    1,
                    pin as isize,
                    T::one(),
                    gw.as_mut_ptr().add(t),
                    (g.co * kv) as isize,
                    kv as isize,
                );
            }
        });
    }
    let gb = with_bias.then(|| channel_sums(gy));
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(w.shape().to_vec(), gw)?, gb))
}

/// Saved statistics from an instance-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T: Element> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-(sample, channel) normalization over spatial voxels followed by a
/// per-channel affine transform.
pub fn instance_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let [n, c, ..] = x.dims5()?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::invalid(format!(
            "instance norm affine parameters must have {c} elements, got {} and {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let v = x.numel() / (n * c);
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * v;
            let xs = &x.data()[base..base + v];
            let mean = xs.iter().map(|e| e.as_f64()).sum::<f64>() / v as f64;
            let var = xs.iter().map(|e| (e.as_f64() - mean).powi(2)).sum::<f64>() / v as f64;
            let istd = 1.0 / (var + eps).sqrt();
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            let meant = T::from_f64(mean);
            let istdt = T::from_f64(istd);
            for i in 0..v {
                let xh = (xs[i] - meant) * istdt;
                xhat[base + i] = xh;
                y[base + i] = gm * xh + bt;
            }
            inv_std.push(istdt);
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        NormCache { normalized: Tensor::new(shape, xhat)?, inv_std },
    ))
}

pub fn instance_norm_backward<T: Element>(
    gy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (gy.shape()[0], gy.shape()[1]);
    let v = gy.numel() / (n * c);
    let mut gx = vec![T::zero(); gy.numel()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let xhat = cache.normalized.data();
    let vt = T::from_f64(v as f64);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * v;
            let g = &gy.data()[base..base + v];
            let xh = &xhat[base..base + v];
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            ggamma[ch] = ggamma[ch] + sum_gx;
            gbeta[ch] = gbeta[ch] + sum_g;
            let scale = gamma.data()[ch] * cache.inv_std[s * c + ch];
            let mean_g = sum_g / vt;
            let mean_gx = sum_gx / vt;
            for i in 0..v {
                gx[base + i] = scale * (g[i] - mean_g - xh[i] * mean_gx);
            }
        }
    }
    (
        raw(gy.shape(), gx),
        raw(&[c], ggamma),
        raw(&[c], gbeta),
    )
}

pub fn leaky_relu<T: Element>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    x.map(|v| if v >= T::zero() { v } else { s * v })
}

pub fn leaky_relu_backward<T: Element>(x: &Tensor<T>, slope: f64, gy: &Tensor<T>) -> Tensor<T> {
    let s = T::from_f64(slope);
    let data = x.data().iter().zip(gy.data()).map(|(&v, &g)| if v >= T::zero() { g } else { s * g }).collect();
    raw(x.shape(), data)
}

fn check_factors(factors: [usize; 3]) -> Result<()> {
    if factors.iter().any(|&f| f != 1 && f != 2) {
        return Err(Error::invalid(format!("upsample factors must be 1 or 2, got {factors:?}")));
    }
    Ok(())
}

pub fn upsample_nearest<T: Element>(x: &Tensor<T>, factors: [usize; 3]) -> Result<Tensor<T>> {
    check_factors(factors)?;
    let [n, c, d, h, w] = x.dims5()?;
    let [od, oh, ow] = [d * factors[0], h * factors[1], w * factors[2]];
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    for nc in 0..n * c {
        let src = &x.data()[nc * d * h * w..(nc + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let row = &src[((z / factors[0]) * h + y / factors[1]) * w..][..w];
                for xo in 0..ow {
                    out.push(row[xo / factors[2]]);
                }
            }
        }
    }
    Tensor::new(vec![n, c, od, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Element>(gy: &Tensor<T>, factors: [usize; 3]) -> Result<Tensor<T>> {
    let [n, c, od, oh, ow] = gy.dims5()?;
    let [d, h, w] = [od / factors[0], oh / factors[1], ow / factors[2]];
    let mut gx = vec![T::zero(); n * c * d * h * w];
    for nc in 0..n * c {
        let src = &gy.data()[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        let dst = &mut gx[nc * d * h * w..(nc + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let i = ((z / factors[0]) * h + y / factors[1]) * w + xo / factors[2];
                    dst[i] = dst[i] + src[(z * oh + y) * ow + xo];
                }
            }
        }
    }
    Tensor::new(vec![n, c, d, h, w], gx)
}

/// Source index pair and weight of the upper neighbour for half-pixel linear
/// interpolation along one axis.
fn linear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Trilinear upsampling, half-pixel (`align_corners = false`) convention.
pub fn upsample_trilinear<T: Element>(x: &Tensor<T>, factors: [usize; 3]) -> Result<Tensor<T>> {
    check_factors(factors)?;
    let [n, c, d, h, w] = x.dims5()?;
    let (tz, ty, tx) = (linear_taps(d, factors[0]), linear_taps(h, factors[1]), linear_taps(w, factors[2]));
    let (od, oh, ow) = (tz.len(), ty.len(), tx.len());
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    for nc in 0..n * c {
        let src = &x.data()[nc * d * h * w..(nc + 1) * d * h * w];
        let at = |z: usize, y: usize, xx: usize| src[(z * h + y) * w + xx].as_f64();
        for &(z0, z1, lz) in &tz {
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let c00 = at(z0, y0, x0) * (1.0 - lx) + at(z0, y0, x1) * lx;
                    let c01 = at(z0, y1, x0) * (1.0 - lx) + at(z0, y1, x1) * lx;
                    let c10 = at(z1, y0, x0) * (1.0 - lx) + at(z1, y0, x1) * lx;
                    let c11 = at(z1, y1, x0) * (1.0 - lx) + at(z1, y1, x1) * lx;
                    let c0 = c00 * (1.0 - ly) + c01 * ly;
                    let c1 = c10 * (1.0 - ly) + c11 * ly;
                    out.push(T::from_f64(c0 * (1.0 - lz) + c1 * lz));
                }
            }
        }
    }
    Tensor::new(vec![n, c, od, oh, ow], out)
}

pub fn upsample_trilinear_backward<T: Element>(
    gy: &Tensor<T>,
    input_spatial: [usize; 3],
    factors: [usize; 3],
) -> Result<Tensor<T>> {
    let [n, c, od, oh, ow] = gy.dims5()?;
    let [d, h, w] = input_spatial;
    let (tz, ty, tx) = (linear_taps(d, factors[0]), linear_taps(h, factors[1]), linear_taps(w, factors[2]));
    let mut gx = vec![0.0f64; n * c * d * h * w];
    for nc in 0..n * c {
        let src = &gy.data()[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        let dst = &mut gx[nc * d * h * w..(nc + 1) * d * h * w];
        let mut o = 0;
        for &(z0, z1, lz) in &tz {
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let g = src[o].as_f64();
                    o += 1;
                    for (zi, wz) in [(z0, 1.0 - lz), (z1, lz)] {
                        for (yi, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                            for (xi, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                                dst[(zi * h + yi) * w + xi] += g * wz * wy * wx;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, d, h, w], gx.into_iter().map(T::from_f64).collect())
}

/// Concatenates two `N, C, ...` tensors along channels, `a` first.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() < 2 || a.ndim() != b.ndim() || a.shape()[0] != b.shape()[0] || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::invalid(format!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.shape()[0];
    let (ca, cb) = (a.shape()[1], b.shape()[1]);
    let v: usize = a.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * ca * v..(s + 1) * ca * v]);
        out.extend_from_slice(&b.data()[s * cb * v..(s + 1) * cb * v]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Tensor::new(shape, out)
}

/// Splits a channel-concatenated gradient back into its `a` and `b` parts.
pub fn split_channels<T: Element>(g: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = g.shape()[0];
    let c = g.shape()[1];
    if ca == 0 || ca >= c {
        return Err(Error::invalid(format!("cannot split {c} channels at {ca}")));
    }
    let cb = c - ca;
    let v: usize = g.shape()[2..].iter().product();
    let mut a = Vec::with_capacity(n * ca * v);
    let mut b = Vec::with_capacity(n * cb * v);
    for s in 0..n {
        let base = s * c * v;
        a.extend_from_slice(&g.data()[base..base + ca * v]);
        b.extend_from_slice(&g.data()[base + ca * v..base + c * v]);
    }
    let mut sa = g.shape().to_vec();
    sa[1] = ca;
    let mut sb = g.shape().to_vec();
    sb[1] = cb;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("cannot add {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("cannot multiply {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Softmax over the channel axis of an `N, C, ...` tensor.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() < 2 {
        return Err(Error::invalid("softmax needs an N,C,... tensor"));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let v = x.numel() / (n * c);
    let mut out = vec![T::zero(); x.numel()];
    let mut buf = vec![0.0f64; c];
    for s in 0..n {
        for p in 0..v {
            let idx = |ch: usize| (s * c + ch) * v + p;
            let m = (0..c).map(|ch| x.data()[idx(ch)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ch, b) in buf.iter_mut().enumerate() {
                *b = (x.data()[idx(ch)].as_f64() - m).exp();
                z += *b;
            }
            for (ch, b) in buf.iter().enumerate() {
                out[idx(ch)] = T::from_f64(b / z);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward<T: Element>(p: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (p.shape()[0], p.shape()[1]);
    let v = p.numel() / (n * c);
    let mut gx = vec![T::zero(); p.numel()];
    for s in 0..n {
        for q in 0..v {
            let idx = |ch: usize| (s * c + ch) * v + q;
            let dot: T = (0..c).map(|ch| gy.data()[idx(ch)] * p.data()[idx(ch)]).sum();
            for ch in 0..c {
                gx[idx(ch)] = p.data()[idx(ch)] * (gy.data()[idx(ch)] - dot);
            }
        }
    }
    raw(p.shape(), gx)
}

/// Foreground channel range the soft Dice averages over. Background (channel 0)
/// is excluded when there is at least one foreground class.
fn dice_classes(c: usize) -> std::ops::Range<usize> {
    if c > 1 {
        1..c
    } else {
        0..c
    }
}

fn dice_terms<T: Element>(p: &Tensor<T>, y: &Tensor<T>) -> Result<(usize, usize, usize, Vec<(f64, f64)>)> {
    if p.shape() != y.shape() || p.ndim() < 2 {
        return Err(Error::invalid(format!(
            "dice needs matching N,C,... tensors, got {:?} and {:?}",
            p.shape(),
            y.shape()
        )));
    }
    let (n, c) = (p.shape()[0], p.shape()[1]);
    let v = p.numel() / (n * c);
    let mut terms = vec![(0.0, 0.0); c];
    for s in 0..n {
        for (ch, t) in terms.iter_mut().enumerate() {
            let base = (s * c + ch) * v;
            for i in base..base + v {
                let (pv, yv) = (p.data()[i].as_f64(), y.data()[i].as_f64());
                t.0 += pv * yv;
                t.1 += pv + yv;
            }
        }
    }
    Ok((n, c, v, terms))
}

/// Batch soft Dice loss `1 - mean_c (2 I_c + eps) / (S_c + eps)` over foreground
/// channels, where `I_c = sum p*y` and `S_c = sum p + sum y`.
pub fn soft_dice_loss<T: Element>(p: &Tensor<T>, y_onehot: &Tensor<T>) -> Result<T> {
    let (_, c, _, terms) = dice_terms(p, y_onehot)?;
    let classes = dice_classes(c);
    let k = classes.len() as f64;
    let mean_dice: f64 = classes
        .map(|ch| {
            let (i, s) = terms[ch];
            (2.0 * i + DICE_SMOOTH) / (s + DICE_SMOOTH)
        })
        .sum::<f64>()
        / k;
    Ok(T::from_f64(1.0 - mean_dice))
}

pub fn soft_dice_loss_backward<T: Element>(p: &Tensor<T>, y_onehot: &Tensor<T>, g: T) -> Result<Tensor<T>> {
    let (n, c, v, terms) = dice_terms(p, y_onehot)?;
    let classes = dice_classes(c);
    let k = classes.len() as f64;
    let mut gp = vec![T::zero(); p.numel()];
    let g = g.as_f64();
    for ch in classes {
        let (i, s) = terms[ch];
        let den = s + DICE_SMOOTH;
        let num = 2.0 * i + DICE_SMOOTH;
        for smp in 0..n {
            let base = (smp * c + ch) * v;
            for j in base..base + v {
                let yv = y_onehot.data()[j].as_f64();
                let d_dice = (2.0 * yv * den - num) / (den * den);
                gp[j] = T::from_f64(-g * d_dice / k);
            }
        }
    }
    Ok(raw(p.shape(), gp))
}

const CE_FLOOR: f64 = 1e-12;

fn check_labels<T: Element>(p: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize, usize)> {
    if p.ndim() < 2 {
        return Err(Error::invalid("cross entropy needs an N,C,... tensor"));
    }
    let (n, c) = (p.shape()[0], p.shape()[1]);
    let v = p.numel() / (n * c);
    if labels.len() != n * v {
        return Err(Error::invalid(format!(
            "{} labels supplied for {} voxels",
            labels.len(),
            n * v
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c, v))
}

/// Mean negative log-likelihood of integer `labels` (`N * voxels`, sample-major)
/// under channel probabilities `p`.
pub fn cross_entropy<T: Element>(p: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, c, v) = check_labels(p, labels)?;
    let mut total = 0.0;
    for s in 0..n {
        for q in 0..v {
            let l = labels[s * v + q];
            total -= p.data()[(s * c + l) * v + q].as_f64().max(CE_FLOOR).ln();
        }
    }
    Ok(T::from_f64(total / (n * v) as f64))
}

pub fn cross_entropy_backward<T: Element>(p: &Tensor<T>, labels: &[usize], g: T) -> Result<Tensor<T>> {
    let (n, c, v) = check_labels(p, labels)?;
    let mut gp = vec![T::zero(); p.numel()];
    let m = (n * v) as f64;
    for s in 0..n {
        for q in 0..v {
            let l = labels[s * v + q];
            let i = (s * c + l) * v + q;
            let pv = p.data()[i].as_f64();
            if pv > CE_FLOOR {
                gp[i] = T::from_f64(-g.as_f64() / (pv * m));
            }
        }
    }
    Ok(raw(p.shape(), gp))
}

/// One-hot encoding of integer labels into an `N, C, spatial...` tensor.
pub fn one_hot<T: Element>(labels: &[usize], n: usize, classes: usize, spatial: &[usize]) -> Result<Tensor<T>> {
    let v: usize = spatial.iter().product();
    if labels.len() != n * v {
        return Err(Error::invalid("label count does not match the requested shape"));
    }
    let mut data = vec![T::zero(); n * classes * v];
    for s in 0..n {
        for q in 0..v {
            let l = labels[s * v + q];
            if l >= classes {
                return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
            }
            data[(s * classes + l) * v + q] = T::one();
        }
    }
    let mut shape = vec![n, classes];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn pointwise_identity_conv() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 2, 3, 4], |i| i as f32 * 0.5 - 3.0);
        let w = Tensor::<f32>::full(&[1, 1, 1, 1, 1], 1.0);
        let b = Tensor::<f32>::zeros(&[1]);
        let y = conv3d(&x, &w, Some(&b), [1; 3], [0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_cube_convolution() {
        // 2x2x2 ones, 3^3 ones kernel, pad 1: every output window covers all 8 voxels.
        let x = Tensor::<f32>::full(&[1, 1, 2, 2, 2], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d(&x, &w, None, [1; 3], [1; 3]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn strided_conv_halves_extent() {
        let x = Tensor::<f32>::zeros(&[1, 1, 128, 128, 128]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        let y = conv3d(&x, &w, None, [2; 3], [1; 3]).unwrap();
        assert_eq!(&y.shape()[2..], &[64, 64, 64]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3, 3]);
        assert!(matches!(conv3d(&x, &w, None, [1; 3], [1; 3]), Err(Error::InvalidInput(_))));
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        assert!(matches!(conv3d(&x, &w, None, [1; 3], [0; 3]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn transpose_conv_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        assert_eq!(transpose_conv3d(&x, &w, None, [2, 2, 2]).unwrap().shape(), &[1, 1, 8, 8, 8]);
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2, 1]);
        assert_eq!(transpose_conv3d(&x, &w, None, [2, 2, 1]).unwrap().shape(), &[1, 1, 8, 8, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        assert!(transpose_conv3d(&x, &w, None, [3, 3, 3]).is_err());
    }

    #[test]
    fn transpose_conv_constant_passthrough() {
        // Brute force: with k == stride every output voxel gets exactly one tap.
        let c = 1.75f64;
        let x = Tensor::<f64>::full(&[1, 1, 2, 2, 2], c);
        let w = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 1.0);
        let y = transpose_conv3d(&x, &w, None, [2, 2, 2]).unwrap();
        let mut oracle = vec![0.0; 64];
        for (i, &xv) in x.data().iter().enumerate() {
            let (z, yy, xx) = (i / 4, (i / 2) % 2, i % 2);
            for t in 0..8 {
                let (a, b, e) = (t / 4, (t / 2) % 2, t % 2);
                oracle[((2 * z + a) * 4 + 2 * yy + b) * 4 + 2 * xx + e] += xv * w.data()[t];
            }
        }
        assert_eq!(y.data(), oracle.as_slice());
        assert!(y.data().iter().all(|&v| v == c));
    }

    #[test]
    fn instance_norm_cases() {
        let g1 = t(&[1], vec![1.0]);
        let b0 = t(&[1], vec![0.0]);
        let x = t(&[1, 1, 1, 2, 2], vec![3.0; 4]);
        let (y, _) = instance_norm(&x, &g1, &b0, INSTANCE_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = t(&[1, 1, 1, 2, 2], vec![-1.0, 1.0, -1.0, 1.0]);
        let (y, _) = instance_norm(&x, &g1, &b0, INSTANCE_NORM_EPS).unwrap();
        for (o, e) in y.data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((o - e).abs() < 1e-5, "{o} vs {e}");
        }

        let (y, _) = instance_norm(&x, &t(&[1], vec![0.0]), &t(&[1], vec![5.0]), INSTANCE_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));

        // single voxel: zero variance guarded by eps
        let x = t(&[1, 1, 1, 1, 1], vec![42.0]);
        let (y, _) = instance_norm(&x, &g1, &b0, INSTANCE_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn leaky_relu_values() {
        let x = t(&[3], vec![2.0, -2.0, 0.0]);
        let y = leaky_relu(&x, LEAKY_RELU_SLOPE);
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[1] + 0.02).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn nearest_upsampling() {
        let x = t(&[1, 1, 1, 1, 2], vec![3.0, 7.0]);
        let y = upsample_nearest(&x, [1, 1, 2]).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0, 7.0, 7.0]);
        let x = Tensor::<f64>::full(&[1, 2, 4, 4, 8], 2.5);
        let y = upsample_nearest(&x, [2, 2, 1]).unwrap();
        assert_eq!(&y.shape()[2..], &[8, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn trilinear_half_pixel() {
        let x = t(&[1, 1, 1, 1, 2], vec![0.0, 1.0]);
        let y = upsample_trilinear(&x, [1, 1, 2]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 3, 2], |i| i as f64);
        assert_eq!(upsample_trilinear(&x, [1, 1, 1]).unwrap(), x);
        let x = Tensor::<f64>::full(&[1, 1, 2, 2, 2], -4.0);
        assert!(upsample_trilinear(&x, [2, 2, 2]).unwrap().data().iter().all(|&v| (v + 4.0).abs() < 1e-12));
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::<f64>::from_fn(&[1, 4, 8, 8, 8], |i| i as f64);
        let b = Tensor::<f64>::zeros(&[1, 4, 8, 8, 8]);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 8, 8, 8, 8]);
        let (ra, rb) = split_channels(&c, 4).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
        let bad = Tensor::<f64>::zeros(&[1, 4, 8, 8, 4]);
        assert!(concat_channels(&a, &bad).is_err());
    }

    #[test]
    fn softmax_uniform_and_losses() {
        let x = Tensor::<f64>::zeros(&[1, 4, 1, 1, 3]);
        let p = softmax_channels(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));

        // perfect prediction
        let labels = vec![0usize, 1, 2];
        let y = one_hot::<f64>(&labels, 1, 3, &[1, 1, 3]).unwrap();
        assert!(soft_dice_loss(&y, &y).unwrap().abs() < 1e-9);
        assert!(cross_entropy(&y, &labels).unwrap().abs() < 1e-12);

        // K=2, p=0.5 everywhere, two voxels, one labelled foreground:
        // I = 0.5, S = 1.0 + 1 = 2 -> dice = (1 + eps) / (2 + eps)
        let p = Tensor::<f64>::full(&[1, 2, 1, 1, 2], 0.5);
        let y = one_hot::<f64>(&[0, 1], 1, 2, &[1, 1, 2]).unwrap();
        let expected = 1.0 - (1.0 + DICE_SMOOTH) / (2.0 + DICE_SMOOTH);
        assert!((soft_dice_loss(&p, &y).unwrap() - expected).abs() < 1e-12);
        assert!((cross_entropy(&p, &[0, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
