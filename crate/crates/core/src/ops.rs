//! CPU kernels that plug into candle's autodiff graph as custom ops.
//!
//! Candle's own CPU convolution backward is a scalar loop, and its pooling
//! backward only supports `kernel == stride`. The ops here are im2col + GEMM
//! convolution, strided max pooling, clamp-to-border bilinear sampling and a
//! reflect-padded 3x3 box filter, each with an analytic backward pass. All of
//! them accept `f32` and `f64` storage.

use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Storage, Tensor,
    WithDType,
};
use num_traits::Float;

pub(crate) trait Real: WithDType + num_traits::Float {
    /// `c = a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: callers size `a`, `b` and `c` to the strided extents passed here.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("custom op expects a contiguous operand"),
    }
}

/// Runs `f` over the contiguous CPU data of `t`.
fn with_data<T: WithDType, R>(
    t: &Tensor,
    f: impl FnOnce(&[T]) -> candle_core::Result<R>,
) -> candle_core::Result<R> {
    let t = t.contiguous()?;
    let (storage, layout) = t.storage_and_layout();
    match &*storage {
        Storage::Cpu(cpu) => f(slice::<T>(cpu, layout)?),
        _ => bail!("only the cpu device is supported"),
    }
}

fn dims4(shape: &Shape) -> candle_core::Result<(usize, usize, usize, usize)> {
    shape.dims4()
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Shape, k: &Shape, stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (b, ci, h, w) = dims4(x)?;
        let (co, ci_k, kh, kw) = dims4(k)?;
        if ci != ci_k {
            bail!("conv2d: input has {ci} channels, kernel expects {ci_k}");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            bail!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}");
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            b,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output indices `o` in `[lo, hi)` for which `o * stride + k - pad` lands in `[0, len)`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        (len + pad - k).div_ceil(stride)
    } else {
        0
    };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

/// Unfolds one sample `x` (ci, h, w) into `cols[row][oy * wo + ox]` with
/// `row = (c * kh + ki) * kw + kj`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.n();
    for c in 0..g.ci {
        let src = &x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(g.ho, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(g.wo, g.w, kj, g.stride, g.pad);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = xlo + kj - g.pad;
                        drow[xlo..xhi].copy_from_slice(&srow[start..start + (xhi - xlo)]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate().take(xhi).skip(xlo) {
                            *d = srow[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for one sample: accumulates `cols` into `x`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.n();
    for c in 0..g.ci {
        let dst = &mut x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(g.ho, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(g.wo, g.w, kj, g.stride, g.pad);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let start = xlo + kj - g.pad;
                        for (d, v) in drow[start..start + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                            *d = *d + *v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            drow[ox * g.stride + kj - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// A 1x1 stride-1 unpadded kernel needs no unfolding.
fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

fn conv_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let plane = g.ci * g.h * g.w;
    let mut cols = vec![T::zero(); if is_pointwise(g) { 0 } else { k * n }];
    let mut out = vec![T::zero(); g.b * g.co * n];
    for b in 0..g.b {
        let xb = &x[b * plane..][..plane];
        let cb: &[T] = if is_pointwise(g) {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.co * n..][..g.co * n];
        T::gemm(g.co, k, n, w, (k as isize, 1), cb, (n as isize, 1), T::zero(), ob);
    }
    out
}

/// 2-D convolution without bias, NCHW layout, square stride and zero padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dOp {
    fn fwd_t<T: Real>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.shape(), l2.shape(), self.stride, self.padding)?;
        let out = conv_forward(slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, &g);
        Ok((T::to_cpu_storage_owned(out), Shape::from((g.b, g.co, g.ho, g.wo))))
    }

    fn bwd_t<T: Real>(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(input.shape(), kernel.shape(), self.stride, self.padding)?;
        let (k, n) = (g.k(), g.n());
        let plane = g.ci * g.h * g.w;
        let grad_kernel = if kernel.track_op() {
            let gw = with_data::<T, _>(input, |x| {
                with_data::<T, _>(grad, |gr| {
                    let mut cols = vec![T::zero(); if is_pointwise(&g) { 0 } else { k * n }];
                    let mut gw = vec![T::zero(); g.co * k];
                    for b in 0..g.b {
                        let xb = &x[b * plane..][..plane];
                        let cb: &[T] = if is_pointwise(&g) {
                            xb
                        } else {
                            im2col(xb, &g, &mut cols);
                            &cols
                        };
                        let gb = &gr[b * g.co * n..][..g.co * n];
                        let beta = if b == 0 { T::zero() } else { T::one() };
                        T::gemm(g.co, n, k, gb, (n as isize, 1), cb, (1, n as isize), beta, &mut gw);
                    }
                    Ok(gw)
                })
            })?;
            Some(Tensor::from_vec(gw, kernel.shape(), kernel.device())?)
        } else {
            None
        };
        let grad_input = if input.track_op() {
            let gi = with_data::<T, _>(kernel, |w| {
                with_data::<T, _>(grad, |gr| {
                    let mut gcols = vec![T::zero(); if is_pointwise(&g) { 0 } else { k * n }];
                    let mut gi = vec![T::zero(); g.b * plane];
                    for b in 0..g.b {
                        let gb = &gr[b * g.co * n..][..g.co * n];
                        let dst = &mut gi[b * plane..][..plane];
                        let wt = (1, k as isize);
                        if is_pointwise(&g) {
                            T::gemm(k, g.co, n, w, wt, gb, (n as isize, 1), T::zero(), dst);
                        } else {
                            T::gemm(k, g.co, n, w, wt, gb, (n as isize, 1), T::zero(), &mut gcols);
                            col2im(&gcols, &g, dst);
                        }
                    }
                    Ok(gi)
                })
            })?;
            Some(Tensor::from_vec(gi, input.shape(), input.device())?)
        } else {
            None
        };
        Ok((grad_input, grad_kernel))
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => self.fwd_t::<f32>(s1, l1, s2, l2),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => self.fwd_t::<f64>(s1, l1, s2, l2),
            _ => bail!("conv2d: unsupported or mixed dtypes"),
        }
    }

    fn bwd(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        match input.dtype() {
            DType::F32 => self.bwd_t::<f32>(input, kernel, grad),
            DType::F64 => self.bwd_t::<f64>(input, kernel, grad),
            dt => bail!("conv2d: unsupported dtype {dt:?}"),
        }
    }
}

/// Convolves `input` (N, C, H, W) with `kernel` (O, C, kh, kw).
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    input
        .contiguous()?
        .apply_op2(&kernel.contiguous()?, Conv2dOp { stride, padding })
}

// ---------------------------------------------------------------------------
// Max pooling

#[derive(Clone, Copy, Debug)]
pub struct MaxPool2dOp {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2dOp {
    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Index into the (h, w) plane of the maximum in each output window.
    fn argmax<T: Real>(&self, plane: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                idx.push(best_i);
            }
        }
        idx
    }

    fn fwd_t<T: Real>(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l.shape())?;
        let (ho, wo) = self.out_dims(h, w);
        let x = slice::<T>(s, l)?;
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in x.chunks_exact(h * w) {
            out.extend(self.argmax(plane, h, w, ho, wo).into_iter().map(|i| plane[i]));
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, ho, wo))))
    }

    fn bwd_t<T: Real>(&self, arg: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = arg.dims4()?;
        let (ho, wo) = self.out_dims(h, w);
        let gi = with_data::<T, _>(arg, |x| {
            with_data::<T, _>(grad, |g| {
                let mut gi = vec![T::zero(); b * c * h * w];
                for (p, plane) in x.chunks_exact(h * w).enumerate() {
                    let gplane = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gi[p * h * w..(p + 1) * h * w];
                    for (o, i) in self.argmax(plane, h, w, ho, wo).into_iter().enumerate() {
                        dst[i] += gplane[o];
                    }
                }
                Ok(gi)
            })
        })?;
        Tensor::from_vec(gi, arg.shape(), arg.device())
    }
}

impl CustomOp1 for MaxPool2dOp {
    fn name(&self) -> &'static str {
        "max-pool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(_) => self.fwd_t::<f32>(s, l),
            CpuStorage::F64(_) => self.fwd_t::<f64>(s, l),
            _ => bail!("max-pool2d: unsupported dtype"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = match arg.dtype() {
            DType::F32 => self.bwd_t::<f32>(arg, grad)?,
            DType::F64 => self.bwd_t::<f64>(arg, grad)?,
            dt => bail!("max-pool2d: unsupported dtype {dt:?}"),
        };
        Ok(Some(g))
    }
}

pub fn max_pool2d(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    input.contiguous()?.apply_op1(MaxPool2dOp {
        kernel,
        stride,
        padding,
    })
}

// ---------------------------------------------------------------------------
// Pointwise activations

/// ReLU or ELU (alpha = 1) with a single-pass backward computed from the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    fn fwd_t<T: Real>(self, x: &[T]) -> Vec<T> {
        match self {
            Activation::Relu => x.iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect(),
            Activation::Elu => x
                .iter()
                .map(|v| if *v > T::zero() { *v } else { Float::exp(*v) - T::one() })
                .collect(),
        }
    }

    fn bwd_t<T: Real>(self, res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let out = with_data::<T, _>(res, |y| {
            with_data::<T, _>(grad, |g| {
                Ok(y.iter()
                    .zip(g)
                    .map(|(y, g)| match (self, *y > T::zero()) {
                        (_, true) => *g,
                        (Activation::Relu, false) => T::zero(),
                        (Activation::Elu, false) => *g * (*y + T::one()),
                    })
                    .collect::<Vec<T>>())
            })
        })?;
        Tensor::from_vec(out, res.shape(), res.device())
    }
}

impl CustomOp1 for Activation {
    fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(_) => f32::to_cpu_storage_owned(self.fwd_t(slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => f64::to_cpu_storage_owned(self.fwd_t(slice::<f64>(s, l)?)),
            _ => bail!("{}: unsupported dtype", self.name()),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(match res.dtype() {
            DType::F32 => self.bwd_t::<f32>(res, grad)?,
            DType::F64 => self.bwd_t::<f64>(res, grad)?,
            dt => bail!("{}: unsupported dtype {dt:?}", self.name()),
        }))
    }
}

pub fn relu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Activation::Relu)
}

pub fn elu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Activation::Elu)
}

// ---------------------------------------------------------------------------
// Nearest-neighbour ×2 upsampling

/// Repeats every pixel of `(B, C, H, W)` into a 2×2 block.
#[derive(Clone, Copy, Debug)]
pub struct Upsample2xOp;

impl Upsample2xOp {
    fn fwd_t<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len() * 4);
        for p in 0..planes {
            for row in x[p * h * w..][..h * w].chunks_exact(w) {
                let start = out.len();
                out.extend(row.iter().flat_map(|v| [*v, *v]));
                out.extend_from_within(start..start + 2 * w);
            }
        }
        out
    }

    fn bwd_t<T: Real>(arg: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = arg.dims4()?;
        let out = with_data::<T, _>(grad, |g| {
            let mut out = Vec::with_capacity(b * c * h * w);
            for pair in g.chunks_exact(4 * w) {
                let (top, bottom) = pair.split_at(2 * w);
                out.extend(
                    top.chunks_exact(2)
                        .zip(bottom.chunks_exact(2))
                        .map(|(t, u)| t[0] + t[1] + u[0] + u[1]),
                );
            }
            Ok(out)
        })?;
        Tensor::from_vec(out, arg.shape(), arg.device())
    }
}

impl CustomOp1 for Upsample2xOp {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l.shape())?;
        let out = match s {
            CpuStorage::F32(_) => f32::to_cpu_storage_owned(Self::fwd_t(slice::<f32>(s, l)?, b * c, h, w)),
            CpuStorage::F64(_) => f64::to_cpu_storage_owned(Self::fwd_t(slice::<f64>(s, l)?, b * c, h, w)),
            _ => bail!("upsample: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(match arg.dtype() {
            DType::F32 => Self::bwd_t::<f32>(arg, grad)?,
            DType::F64 => Self::bwd_t::<f64>(arg, grad)?,
            dt => bail!("upsample: unsupported dtype {dt:?}"),
        }))
    }
}

pub fn upsample_nearest_2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2xOp)
}

// ---------------------------------------------------------------------------
// Per-channel bias and batch normalisation

/// Adds `bias` (C) to every channel of `input` (B, C, H, W).
#[derive(Clone, Copy, Debug)]
pub struct BiasAddOp;

impl BiasAddOp {
    fn fwd_t<T: Real>(
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1.shape())?;
        let bias = slice::<T>(s2, l2)?;
        if bias.len() != c {
            bail!("bias-add: {} biases for {c} channels", bias.len());
        }
        let x = slice::<T>(s1, l1)?;
        let mut out = x.to_vec();
        for (p, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let v = bias[p % c];
            plane.iter_mut().for_each(|o| *o = *o + v);
        }
        debug_assert_eq!(out.len(), b * c * h * w);
        Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
    }

    fn bwd_t<T: Real>(bias: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let (_, c, h, w) = grad.dims4()?;
        let gb = with_data::<T, _>(grad, |g| {
            let mut acc = vec![0f64; c];
            for (p, plane) in g.chunks_exact(h * w).enumerate() {
                acc[p % c] += plane.iter().map(|v| WithDType::to_f64(*v)).sum::<f64>();
            }
            Ok(acc.into_iter().map(<T as WithDType>::from_f64).collect::<Vec<T>>())
        })?;
        Tensor::from_vec(gb, bias.shape(), bias.device())
    }
}

impl CustomOp2 for BiasAddOp {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => Self::fwd_t::<f32>(s1, l1, s2, l2),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => Self::fwd_t::<f64>(s1, l1, s2, l2),
            _ => bail!("bias-add: unsupported or mixed dtypes"),
        }
    }

    fn bwd(
        &self,
        input: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = if bias.track_op() {
            Some(match grad.dtype() {
                DType::F32 => Self::bwd_t::<f32>(bias, grad)?,
                DType::F64 => Self::bwd_t::<f64>(bias, grad)?,
                dt => bail!("bias-add: unsupported dtype {dt:?}"),
            })
        } else {
            None
        };
        let gi = if input.track_op() { Some(grad.clone()) } else { None };
        Ok((gi, gb))
    }
}

pub fn bias_add(input: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    input.contiguous()?.apply_op2(&bias.contiguous()?, BiasAddOp)
}

/// Per-channel mean and biased variance of `x` (B, C, H, W), accumulated in f64.
pub fn channel_stats(x: &Tensor) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
    let (_, c, h, w) = x.dims4()?;
    let stats = |data: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (p, v) in data {
            sum[p % c] += v;
            sq[p % c] += v * v;
        }
        (sum, sq)
    };
    let (sum, sq) = match x.dtype() {
        DType::F32 => with_data::<f32, _>(x, |d| {
            Ok(stats(&mut d.iter().enumerate().map(|(i, v)| (i / (h * w), *v as f64))))
        })?,
        DType::F64 => with_data::<f64, _>(x, |d| {
            Ok(stats(&mut d.iter().enumerate().map(|(i, v)| (i / (h * w), *v))))
        })?,
        dt => bail!("channel stats: unsupported dtype {dt:?}"),
    };
    let n = (x.elem_count() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0))
        .collect();
    Ok((mean, var))
}

/// Training-mode batch normalisation of `input` (B, C, H, W) with batch
/// statistics, scale `gamma` (C) and shift `beta` (C).
#[derive(Clone, Copy, Debug)]
pub struct BatchNormOp {
    pub eps: f64,
}

/// Per-channel mean and `1 / sqrt(var + eps)`.
fn bn_stats<T: Real>(x: &[T], c: usize, plane: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for (p, chunk) in x.chunks_exact(plane).enumerate() {
        let (mut s, mut q) = (0f64, 0f64);
        for v in chunk {
            let v = WithDType::to_f64(*v);
            s += v;
            q += v * v;
        }
        sum[p % c] += s;
        sq[p % c] += q;
    }
    let n = (x.len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let inv_std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| 1.0 / ((q / n - m * m).max(0.0) + eps).sqrt())
        .collect();
    (mean, inv_std)
}

impl BatchNormOp {
    fn fwd_t<T: Real>(
        &self,
        (s1, l1): (&CpuStorage, &Layout),
        (s2, l2): (&CpuStorage, &Layout),
        (s3, l3): (&CpuStorage, &Layout),
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = dims4(l1.shape())?;
        let x = slice::<T>(s1, l1)?;
        let gamma = slice::<T>(s2, l2)?;
        let beta = slice::<T>(s3, l3)?;
        if gamma.len() != c || beta.len() != c {
            bail!("batch-norm: parameter length does not match {c} channels");
        }
        let (mean, inv_std) = bn_stats(x, c, h * w, self.eps);
        let mut out = Vec::with_capacity(x.len());
        for (p, chunk) in x.chunks_exact(h * w).enumerate() {
            let ch = p % c;
            let scale = WithDType::to_f64(gamma[ch]) * inv_std[ch];
            let shift = WithDType::to_f64(beta[ch]) - mean[ch] * scale;
            let (scale, shift) = (<T as WithDType>::from_f64(scale), <T as WithDType>::from_f64(shift));
            out.extend(chunk.iter().map(|v| *v * scale + shift));
        }
        Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
    }

    fn bwd_t<T: Real>(
        &self,
        input: &Tensor,
        gamma: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let (_, c, h, w) = input.dims4()?;
        let plane = h * w;
        let eps = self.eps;
        let (gi, gg, gb) = with_data::<T, _>(input, |x| {
            with_data::<T, _>(gamma, |gm| {
                with_data::<T, _>(grad, |g| {
                    let (mean, inv_std) = bn_stats(x, c, plane, eps);
                    let n = (x.len() / c) as f64;
                    let mut sum_dy = vec![0f64; c];
                    let mut sum_dy_xhat = vec![0f64; c];
                    for (p, (xc, gc)) in x.chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
                        let ch = p % c;
                        let (m, is) = (mean[ch], inv_std[ch]);
                        let (mut a, mut b) = (0f64, 0f64);
                        for (xv, gv) in xc.iter().zip(gc) {
                            let gv = WithDType::to_f64(*gv);
                            a += gv;
                            b += gv * (WithDType::to_f64(*xv) - m) * is;
                        }
                        sum_dy[ch] += a;
                        sum_dy_xhat[ch] += b;
                    }
                    let mut gi = Vec::with_capacity(x.len());
                    for (p, (xc, gc)) in x.chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
                        let ch = p % c;
                        let k = WithDType::to_f64(gm[ch]) * inv_std[ch];
                        let (mdy, mdyx) = (sum_dy[ch] / n, sum_dy_xhat[ch] / n);
                        let (m, is) = (mean[ch], inv_std[ch]);
                        gi.extend(xc.iter().zip(gc).map(|(xv, gv)| {
                            let xhat = (WithDType::to_f64(*xv) - m) * is;
                            <T as WithDType>::from_f64(k * (WithDType::to_f64(*gv) - mdy - xhat * mdyx))
                        }));
                    }
                    let cast = |v: Vec<f64>| v.into_iter().map(<T as WithDType>::from_f64).collect::<Vec<T>>();
                    Ok((gi, cast(sum_dy_xhat), cast(sum_dy)))
                })
            })
        })?;
        Ok((
            Tensor::from_vec(gi, input.shape(), input.device())?,
            Tensor::from_vec(gg, gamma.shape(), gamma.device())?,
            Tensor::from_vec(gb, gamma.shape(), gamma.device())?,
        ))
    }
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.fwd_t::<f32>((s1, l1), (s2, l2), (s3, l3)),
            CpuStorage::F64(_) => self.fwd_t::<f64>((s1, l1), (s2, l2), (s3, l3)),
            _ => bail!("batch-norm: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        input: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gi, gg, gb) = match input.dtype() {
            DType::F32 => self.bwd_t::<f32>(input, gamma, grad)?,
            DType::F64 => self.bwd_t::<f64>(input, gamma, grad)?,
            dt => bail!("batch-norm: unsupported dtype {dt:?}"),
        };
        Ok((Some(gi), Some(gg), Some(gb)))
    }
}

pub fn batch_norm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> candle_core::Result<Tensor> {
    input
        .contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormOp { eps })
}

// ---------------------------------------------------------------------------
// Bilinear sampling

/// Samples `image` (B, C, H, W) at pixel coordinates `grid` (B, Ho, Wo, 2),
/// with coordinates clamped to `[0, W-1] x [0, H-1]`.
#[derive(Clone, Copy, Debug)]
pub struct BilinearSampleOp;

struct Tap<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    wx: T,
    wy: T,
    /// Whether x / y were inside the image (clamped coordinates have zero slope).
    inside_x: bool,
    inside_y: bool,
}

fn tap<T: Real>(gx: T, gy: T, h: usize, w: usize) -> Tap<T> {
    let xmax = <T as WithDType>::from_f64((w - 1) as f64);
    let ymax = <T as WithDType>::from_f64((h - 1) as f64);
    let inside_x = gx >= T::zero() && gx <= xmax;
    let inside_y = gy >= T::zero() && gy <= ymax;
    let x = Float::min(Float::max(gx, T::zero()), xmax);
    let y = Float::min(Float::max(gy, T::zero()), ymax);
    let x0 = x.floor();
    let y0 = y.floor();
    let (x0i, y0i) = (WithDType::to_f64(x0) as usize, WithDType::to_f64(y0) as usize);
    let x1i = (x0i + 1).min(w - 1);
    let y1i = (y0i + 1).min(h - 1);
    Tap {
        i00: y0i * w + x0i,
        i01: y0i * w + x1i,
        i10: y1i * w + x0i,
        i11: y1i * w + x1i,
        wx: x - x0,
        wy: y - y0,
        inside_x,
        inside_y,
    }
}

impl BilinearSampleOp {
    fn fwd_t<T: Real>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1.shape())?;
        let (bg, ho, wo, two) = dims4(l2.shape())?;
        if bg != b || two != 2 {
            bail!("bilinear-sample: grid {:?} incompatible with image {:?}", l2.shape(), l1.shape());
        }
        let img = slice::<T>(s1, l1)?;
        let grid = slice::<T>(s2, l2)?;
        let n = ho * wo;
        let mut out = vec![T::zero(); b * c * n];
        let one = T::one();
        for bi in 0..b {
            for p in 0..n {
                let gi = (bi * n + p) * 2;
                let t = tap(grid[gi], grid[gi + 1], h, w);
                for ci in 0..c {
                    let plane = &img[(bi * c + ci) * h * w..][..h * w];
                    let top = plane[t.i00] * (one - t.wx) + plane[t.i01] * t.wx;
                    let bot = plane[t.i10] * (one - t.wx) + plane[t.i11] * t.wx;
                    out[(bi * c + ci) * n + p] = top * (one - t.wy) + bot * t.wy;
                }
            }
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, ho, wo))))
    }

    fn bwd_t<T: Real>(
        &self,
        image: &Tensor,
        grid: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = image.dims4()?;
        let (_, ho, wo, _) = grid.dims4()?;
        let n = ho * wo;
        let want_img = image.track_op();
        let want_grid = grid.track_op();
        let one = T::one();
        let (gimg, ggrid) = with_data::<T, _>(image, |img| {
            with_data::<T, _>(grid, |gr| {
                with_data::<T, _>(grad, |g| {
                    let mut gimg = if want_img {
                        vec![T::zero(); b * c * h * w]
                    } else {
                        Vec::new()
                    };
                    let mut ggrid = if want_grid {
                        vec![T::zero(); b * n * 2]
                    } else {
                        Vec::new()
                    };
                    for bi in 0..b {
                        for p in 0..n {
                            let gi = (bi * n + p) * 2;
                            let t = tap(gr[gi], gr[gi + 1], h, w);
                            let (mut dx, mut dy) = (T::zero(), T::zero());
                            for ci in 0..c {
                                let off = (bi * c + ci) * h * w;
                                let go = g[(bi * c + ci) * n + p];
                                if want_img {
                                    let dst = &mut gimg[off..off + h * w];
                                    dst[t.i00] += go * (one - t.wx) * (one - t.wy);
                                    dst[t.i01] += go * t.wx * (one - t.wy);
                                    dst[t.i10] += go * (one - t.wx) * t.wy;
                                    dst[t.i11] += go * t.wx * t.wy;
                                }
                                if want_grid {
                                    let plane = &img[off..off + h * w];
                                    let (a, bb, cc, d) =
                                        (plane[t.i00], plane[t.i01], plane[t.i10], plane[t.i11]);
                                    dx += go * ((one - t.wy) * (bb - a) + t.wy * (d - cc));
                                    dy += go * ((one - t.wx) * (cc - a) + t.wx * (d - bb));
                                }
                            }
                            if want_grid {
                                if t.inside_x {
                                    ggrid[gi] = dx;
                                }
                                if t.inside_y {
                                    ggrid[gi + 1] = dy;
                                }
                            }
                        }
                    }
                    Ok((gimg, ggrid))
                })
            })
        })?;
        let gimg = if want_img {
            Some(Tensor::from_vec(gimg, image.shape(), image.device())?)
        } else {
            None
        };
        let ggrid = if want_grid {
            Some(Tensor::from_vec(ggrid, grid.shape(), grid.device())?)
        } else {
            None
        };
        Ok((gimg, ggrid))
    }
}

impl CustomOp2 for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => self.fwd_t::<f32>(s1, l1, s2, l2),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => self.fwd_t::<f64>(s1, l1, s2, l2),
            _ => bail!("bilinear-sample: unsupported or mixed dtypes"),
        }
    }

    fn bwd(
        &self,
        image: &Tensor,
        grid: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        match image.dtype() {
            DType::F32 => self.bwd_t::<f32>(image, grid, grad),
            DType::F64 => self.bwd_t::<f64>(image, grid, grad),
            dt => bail!("bilinear-sample: unsupported dtype {dt:?}"),
        }
    }
}

pub fn bilinear_sample_raw(image: &Tensor, grid: &Tensor) -> candle_core::Result<Tensor> {
    image
        .contiguous()?
        .apply_op2(&grid.contiguous()?, BilinearSampleOp)
}

// ---------------------------------------------------------------------------
// 3x3 box filter with reflection padding

/// Mean over each 3x3 neighbourhood, borders reflected (`x[-1] = x[1]`).
#[derive(Clone, Copy, Debug)]
pub struct ReflectBox3Op;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// 3-tap reflected sum along a line of `n` elements spaced `stride` apart,
/// or its transpose. `dst` is accumulated into.
fn line3<T: Real>(src: &[T], dst: &mut [T], n: usize, stride: usize, lanes: usize, adjoint: bool) {
    for i in 0..n {
        let taps = [reflect(i as isize - 1, n), i, reflect(i as isize + 1, n)];
        for j in taps {
            let (from, to) = if adjoint { (i, j) } else { (j, i) };
            let (s, d) = (&src[from * stride..from * stride + lanes], &mut dst[to * stride..to * stride + lanes]);
            for (o, v) in d.iter_mut().zip(s) {
                *o = *o + *v;
            }
        }
    }
}

/// Applies the box filter (`adjoint == false`) or its transpose, as separable
/// row and column passes.
fn box3<T: Real>(x: &[T], h: usize, w: usize, adjoint: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut tmp = vec![T::zero(); h * w];
    let ninth = T::from_f64(1.0 / 9.0);
    for (src, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        // columns: whole rows at once
        line3(src, &mut tmp, h, w, w, adjoint);
        for (row_in, row_out) in tmp.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
            for i in 0..w {
                let taps = [reflect(i as isize - 1, w), i, reflect(i as isize + 1, w)];
                if adjoint {
                    for j in taps {
                        row_out[j] = row_out[j] + row_in[i];
                    }
                } else {
                    row_out[i] = row_in[taps[0]] + row_in[taps[1]] + row_in[taps[2]];
                }
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * ninth);
    }
    out
}

impl CustomOp1 for ReflectBox3Op {
    fn name(&self) -> &'static str {
        "reflect-box3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, _, h, w) = dims4(l.shape())?;
        if h < 2 || w < 2 {
            bail!("reflect-box3 needs at least 2x2 planes");
        }
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(box3(slice::<f32>(s, l)?, h, w, false)),
            CpuStorage::F64(_) => CpuStorage::F64(box3(slice::<f64>(s, l)?, h, w, false)),
            _ => bail!("reflect-box3: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let g = match grad.dtype() {
            DType::F32 => {
                let v = with_data::<f32, _>(grad, |g| Ok(box3(g, h, w, true)))?;
                Tensor::from_vec(v, arg.shape(), arg.device())?
            }
            DType::F64 => {
                let v = with_data::<f64, _>(grad, |g| Ok(box3(g, h, w, true)))?;
                Tensor::from_vec(v, arg.shape(), arg.device())?
            }
            dt => bail!("reflect-box3: unsupported dtype {dt:?}"),
        };
        Ok(Some(g))
    }
}

pub fn reflect_box3(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(ReflectBox3Op)
}
