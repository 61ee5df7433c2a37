//! Convolution and pooling kernels (im2col + gemm). Cross-correlation, no
//! kernel flip.

use super::{invalid, Result, Scalar};

/// Output extent of a strided, padded window. Errors when the window does not
/// tile the padded input exactly.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(invalid(
            "conv2d",
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    if (padded - kernel) % stride != 0 {
        return Err(invalid(
            "conv2d",
            format!("non-integral output size ({padded} - {kernel}) / {stride} + 1"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn pool_output_size(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    conv2d_output_size(input, kernel, stride, 0)
        .map_err(|_| invalid("avgpool2d", format!("window {kernel}/{stride} does not tile {input}")))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, wd], &[f, wc, kh, kw]) = (x, w) else {
            return Err(invalid(
                "conv2d",
                format!("expected NCHW input and FCkk kernel, got {x:?} and {w:?}"),
            ));
        };
        if c != wc {
            return Err(invalid(
                "conv2d",
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        let ho = conv2d_output_size(h, kh, stride, pad)?;
        let wo = conv2d_output_size(wd, kw, stride, pad)?;
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_pixels(&self) -> usize {
        self.h * self.w
    }

    /// Input offset for (channel-local) kernel tap and output pixel, if inside
    /// the unpadded image.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kj).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let pixels = self.out_pixels();
        for c in 0..self.c {
            let plane = &image[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * pixels..(row + 1) * pixels];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.source(ki, kj, oy, ox) {
                                Some(src) => plane[src],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let pixels = self.out_pixels();
        for c in 0..self.c {
            let plane = &mut image[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * pixels..(row + 1) * pixels];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(dst) = self.source(ki, kj, oy, ox) {
                                plane[dst] = plane[dst] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (patch, pixels) = (g.patch(), g.out_pixels());
    let mut out = vec![T::zero(); g.n * g.f * pixels];
    let mut cols = vec![T::zero(); patch * pixels];
    let in_len = g.c * g.in_pixels();
    for n in 0..g.n {
        g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * g.f * pixels..(n + 1) * g.f * pixels];
        T::gemm(
            g.f,
            patch,
            pixels,
            T::one(),
            w,
            (patch as isize, 1),
            &cols,
            (pixels as isize, 1),
            T::zero(),
            dst,
        );
    }
    out
}

/// Returns `(grad_x, grad_w)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (patch, pixels) = (g.patch(), g.out_pixels());
    let in_len = g.c * g.in_pixels();
    let mut gx = want_x.then(|| vec![T::zero(); g.n * in_len]);
    let mut gw = want_w.then(|| vec![T::zero(); g.f * patch]);
    let mut cols = vec![T::zero(); patch * pixels];
    for n in 0..g.n {
        let go = &grad_out[n * g.f * pixels..(n + 1) * g.f * pixels];
        if let Some(gw) = gw.as_mut() {
            g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
            // gw (f × patch) += go (f × pixels) · colsᵀ (pixels × patch)
            T::gemm(
                g.f,
                pixels,
                patch,
                T::one(),
                go,
                (pixels as isize, 1),
                &cols,
                (1, pixels as isize),
                T::one(),
                gw,
            );
        }
        if let Some(gx) = gx.as_mut() {
            // gcols (patch × pixels) = wᵀ (patch × f) · go (f × pixels)
            T::gemm(
                patch,
                g.f,
                pixels,
                T::one(),
                w,
                (1, patch as isize),
                go,
                (pixels as isize, 1),
                T::zero(),
                &mut cols,
            );
            g.col2im_add(&cols, &mut gx[n * in_len..(n + 1) * in_len]);
        }
    }
    (gx, gw)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], k: usize, stride: usize) -> Result<Self> {
        let &[n, c, h, w] = x else {
            return Err(invalid("avgpool2d", format!("expected NCHW input, got {x:?}")));
        };
        if k == 0 {
            return Err(invalid("avgpool2d", "window must be positive"));
        }
        Ok(Self {
            planes: n * c,
            h,
            w,
            k,
            stride,
            ho: pool_output_size(h, k, stride)?,
            wo: pool_output_size(w, k, stride)?,
        })
    }
}

pub(crate) fn avgpool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let norm = T::of(1.0 / (g.k * g.k) as f64);
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    for p in 0..g.planes {
        let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                for i in 0..g.k {
                    let row = (oy * g.stride + i) * g.w + ox * g.stride;
                    for j in 0..g.k {
                        acc = acc + plane[row + j];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Scalar>(g: &PoolGeom, grad_out: &[T]) -> Vec<T> {
    let norm = T::of(1.0 / (g.k * g.k) as f64);
    let mut gx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let plane = &mut gx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = grad_out[(p * g.ho + oy) * g.wo + ox] * norm;
                for i in 0..g.k {
                    let row = (oy * g.stride + i) * g.w + ox * g.stride;
                    for j in 0..g.k {
                        plane[row + j] = plane[row + j] + go;
                    }
                }
            }
        }
    }
    gx
}
