//! Raw numeric kernels over flat buffers. No graph bookkeeping here.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let [_, c, h, w] = *input else {
            return Err(Error::shape(OP, "input rank", 4, input.len()));
        };
        let [o, i, kh, kw] = *weight else {
            return Err(Error::shape(OP, "weight rank", 4, weight.len()));
        };
        if i != c {
            return Err(Error::shape(OP, "input channels (dim 1)", i, c));
        }
        if kh != kw {
            return Err(Error::shape(OP, "kernel width (dim 3)", kh, kw));
        }
        if bias != [o] {
            return Err(Error::shape(OP, "bias length", o, bias.iter().product()));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if kh == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::invalid(
                OP,
                format!("kernel {kh}x{kw} does not fit padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        Ok(Self {
            in_channels: c,
            out_channels: o,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_positions()
    }

    /// 1×1, stride 1, no padding: the input plane is already the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold one sample `C×H×W` into a `(C·K·K) × (OH·OW)` column matrix.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_positions();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `C×H×W`.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.out_positions();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one sample. `scratch` must hold `patch_len·P`.
pub fn conv_forward_sample<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let p = g.out_positions();
    let kk = g.patch_len();
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        scratch.resize(kk * p, T::zero());
        im2col(g, x, scratch);
        scratch
    };
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[o]);
    }
    T::gemm(
        g.out_channels,
        kk,
        p,
        T::one(),
        weight,
        (kk as isize, 1),
        cols,
        (p as isize, 1),
        T::one(),
        out,
        (p as isize, 1),
    );
}

/// Backward convolution of one sample.
///
/// Writes this sample's weight-gradient contribution into `dw_part`
/// (overwritten, not accumulated) and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_sample<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dw_part: Option<&mut [T]>,
    dx: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let p = g.out_positions();
    let kk = g.patch_len();
    if let Some(dw) = dw_part {
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            scratch.resize(kk * p, T::zero());
            im2col(g, x, scratch);
            scratch
        };
        // dW = dOut · colsᵀ
        T::gemm(
            g.out_channels,
            p,
            kk,
            T::one(),
            dout,
            (p as isize, 1),
            cols,
            (1, p as isize),
            T::zero(),
            dw,
            (kk as isize, 1),
        );
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            // dx += Wᵀ · dOut
            T::gemm(
                kk,
                g.out_channels,
                p,
                T::one(),
                weight,
                (1, kk as isize),
                dout,
                (p as isize, 1),
                T::one(),
                dx,
                (p as isize, 1),
            );
        } else {
            scratch.resize(kk * p, T::zero());
            T::gemm(
                kk,
                g.out_channels,
                p,
                T::one(),
                weight,
                (1, kk as isize),
                dout,
                (p as isize, 1),
                T::zero(),
                scratch,
                (p as isize, 1),
            );
            col2im(g, scratch, dx);
        }
    }
}

/// Source coordinate for output index `i` under the half-pixel
/// (align-corners = false) convention, clamped to the input extent.
#[inline]
pub fn half_pixel_source(i: usize, in_len: usize, out_len: usize) -> f64 {
    let scale = in_len as f64 / out_len as f64;
    let src = (i as f64 + 0.5) * scale - 0.5;
    src.clamp(0.0, (in_len - 1) as f64)
}

/// Bilinear resize of one `H×W` plane into `out_h×out_w`.
pub fn resize_plane<T: Real>(src: &[T], h: usize, w: usize, dst: &mut [T], out_h: usize, out_w: usize) {
    if h == out_h && w == out_w {
        dst.copy_from_slice(src);
        return;
    }
    let cols: Vec<(usize, usize, T)> = (0..out_w)
        .map(|j| {
            let sx = half_pixel_source(j, w, out_w);
            let x0 = sx.floor() as usize;
            (x0, (x0 + 1).min(w - 1), T::of(sx - x0 as f64))
        })
        .collect();
    for i in 0..out_h {
        let sy = half_pixel_source(i, h, out_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = T::of(sy - y0 as f64);
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = r0[x0] * (T::one() - fx) + r0[x1] * fx;
            let bottom = r1[x0] * (T::one() - fx) + r1[x1] * fx;
            dst[i * out_w + j] = top * (T::one() - fy) + bottom * fy;
        }
    }
}

/// Bilinear resize of an NCHW tensor. Not differentiable; see
/// [`super::Graph::bilinear_resize`].
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output size must be at least 1x1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("bilinear_resize", "input has an empty spatial extent"));
    }
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        resize_plane(src, h, w, dst, out_h, out_w);
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}
