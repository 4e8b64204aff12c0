//! im2col-based 2D convolution and its adjoint (transposed convolution).

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Stride and zero padding of a 2D convolution, `(y, x)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dGeom {
    pub const fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self { stride, pad }
    }

    /// Stride 1, padding `k / 2`: preserves extent for odd kernels.
    pub const fn same(k: usize) -> Self {
        Self::new((1, 1), (k / 2, k / 2))
    }
}

/// Patch layout shared by im2col and col2im.
#[derive(Debug, Clone, Copy)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sy: usize,
    sx: usize,
    py: usize,
    px: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    // Visits every (column-matrix index, image index) pair that lands inside the image.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.sy + ky) as isize - self.py as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let img_row = (c * self.h + iy as usize) * self.w;
                        let col_row = row * p + oy * self.ow;
                        for ox in 0..self.ow {
                            let ix = (ox * self.sx + kx) as isize - self.px as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(col_row + ox, img_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each(|ci, ii| cols[ci] = img[ii]);
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        self.for_each(|ci, ii| img[ii] = img[ii] + cols[ci]);
    }
}

fn out_extent(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = len + 2 * p;
    if padded < k || s == 0 {
        return None;
    }
    Some((padded - k) / s + 1)
}

struct ConvShapes {
    n: usize,
    cin: usize,
    cout: usize,
    patches: Patches,
}

fn conv_shapes<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: Conv2dGeom) -> Result<ConvShapes> {
    let (n, cin, h, wd) = x.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = w.dims4("conv2d")?;
    if wcin != cin {
        return Err(TensorError::Channels {
            op: "conv2d",
            got: cin,
            expected: wcin,
        });
    }
    if b.len() != cout {
        return Err(TensorError::Channels {
            op: "conv2d bias",
            got: b.len(),
            expected: cout,
        });
    }
    let oh = out_extent(h, kh, g.stride.0, g.pad.0).ok_or(TensorError::OutputExtent { op: "conv2d" })?;
    let ow = out_extent(wd, kw, g.stride.1, g.pad.1).ok_or(TensorError::OutputExtent { op: "conv2d" })?;
    Ok(ConvShapes {
        n,
        cin,
        cout,
        patches: Patches {
            c: cin,
            h,
            w: wd,
            kh,
            kw,
            sy: g.stride.0,
            sx: g.stride.1,
            py: g.pad.0,
            px: g.pad.1,
            oh,
            ow,
        },
    })
}

/// Cross-correlation with zero padding. `x: (N,Cin,H,W)`, `w: (Cout,Cin,kh,kw)`, `b: (Cout)`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: Conv2dGeom) -> Result<Tensor<T>> {
    let s = conv_shapes(x, w, b, g)?;
    let pt = s.patches;
    let (k, p) = (pt.rows(), pt.cols());
    let in_plane = s.cin * pt.h * pt.w;
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); s.n * s.cout * p];
    for bi in 0..s.n {
        pt.im2col(&x.data()[bi * in_plane..(bi + 1) * in_plane], &mut cols);
        let ob = &mut out[bi * s.cout * p..(bi + 1) * s.cout * p];
        for (co, row) in ob.chunks_mut(p).enumerate() {
            row.fill(b.data()[co]);
        }
        T::gemm(
            s.cout,
            k,
            p,
            T::one(),
            w.data(),
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            T::one(),
            ob,
            p as isize,
            1,
        );
    }
    Tensor::new([s.n, s.cout, pt.oh, pt.ow], out)
}

/// Gradients of [`conv2d_forward`] accumulated into `dx`, `dw`, `db` where present.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: Conv2dGeom,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) -> Result<()> {
    let s = conv_shapes(x, w, b, g)?;
    let pt = s.patches;
    let (k, p) = (pt.rows(), pt.cols());
    let in_plane = s.cin * pt.h * pt.w;
    let out_plane = s.cout * p;
    if let Some(db) = db {
        for bi in 0..s.n {
            for (co, row) in dy[bi * out_plane..(bi + 1) * out_plane].chunks(p).enumerate() {
                db[co] = db[co] + row.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
    }
    let mut cols = vec![T::zero(); k * p];
    if let Some(dw) = dw {
        for bi in 0..s.n {
            pt.im2col(&x.data()[bi * in_plane..(bi + 1) * in_plane], &mut cols);
            // dW (Cout,K) += dY (Cout,P) * cols^T (P,K)
            T::gemm(
                s.cout,
                p,
                k,
                T::one(),
                &dy[bi * out_plane..(bi + 1) * out_plane],
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
    }
    if let Some(dx) = dx {
        for bi in 0..s.n {
            // dcols (K,P) = W^T (K,Cout) * dY (Cout,P)
            T::gemm(
                k,
                s.cout,
                p,
                T::one(),
                w.data(),
                1,
                k as isize,
                &dy[bi * out_plane..(bi + 1) * out_plane],
                p as isize,
                1,
                T::zero(),
                &mut cols,
                p as isize,
                1,
            );
            pt.col2im_add(&cols, &mut dx[bi * in_plane..(bi + 1) * in_plane]);
        }
    }
    Ok(())
}

struct TransposeShapes {
    n: usize,
    cin: usize,
    cout: usize,
    // Patch layout over the *output* image, whose patch grid is the input extent.
    patches: Patches,
}

fn transpose_shapes<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: Conv2dGeom) -> Result<TransposeShapes> {
    let (n, cin, h, wd) = x.dims4("conv2d_transpose")?;
    let (wcin, cout, kh, kw) = w.dims4("conv2d_transpose")?;
    if wcin != cin {
        return Err(TensorError::Channels {
            op: "conv2d_transpose",
            got: cin,
            expected: wcin,
        });
    }
    if b.len() != cout {
        return Err(TensorError::Channels {
            op: "conv2d_transpose bias",
            got: b.len(),
            expected: cout,
        });
    }
    let extent = |len: usize, s: usize, p: usize, k: usize| -> Option<usize> {
        let full = (len - 1) * s + k;
        (full > 2 * p && s > 0).then(|| full - 2 * p)
    };
    let oh = extent(h, g.stride.0, g.pad.0, kh).ok_or(TensorError::OutputExtent { op: "conv2d_transpose" })?;
    let ow = extent(wd, g.stride.1, g.pad.1, kw).ok_or(TensorError::OutputExtent { op: "conv2d_transpose" })?;
    Ok(TransposeShapes {
        n,
        cin,
        cout,
        patches: Patches {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            sy: g.stride.0,
            sx: g.stride.1,
            py: g.pad.0,
            px: g.pad.1,
            oh: h,
            ow: wd,
        },
    })
}

/// Adjoint of [`conv2d_forward`]'s input map. `w: (Cin,Cout,kh,kw)`;
/// output extent `(H-1)*s - 2p + k`.
pub fn conv2d_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: Conv2dGeom,
) -> Result<Tensor<T>> {
    let s = transpose_shapes(x, w, b, g)?;
    let pt = s.patches;
    let (r, p) = (pt.rows(), pt.cols());
    let out_plane = s.cout * pt.h * pt.w;
    let mut cols = vec![T::zero(); r * p];
    let mut out = vec![T::zero(); s.n * out_plane];
    for bi in 0..s.n {
        // cols (R,P) = W^T (R,Cin) * x (Cin,P)
        T::gemm(
            r,
            s.cin,
            p,
            T::one(),
            w.data(),
            1,
            r as isize,
            &x.data()[bi * s.cin * p..(bi + 1) * s.cin * p],
            p as isize,
            1,
            T::zero(),
            &mut cols,
            p as isize,
            1,
        );
        let ob = &mut out[bi * out_plane..(bi + 1) * out_plane];
        pt.col2im_add(&cols, ob);
        for (co, plane) in ob.chunks_mut(pt.h * pt.w).enumerate() {
            let bias = b.data()[co];
            plane.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    Tensor::new([s.n, s.cout, pt.h, pt.w], out)
}

pub fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: Conv2dGeom,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) -> Result<()> {
    let s = transpose_shapes(x, w, b, g)?;
    let pt = s.patches;
    let (r, p) = (pt.rows(), pt.cols());
    let out_plane = s.cout * pt.h * pt.w;
    let in_plane = s.cin * p;
    if let Some(db) = db {
        for bi in 0..s.n {
            for (co, plane) in dy[bi * out_plane..(bi + 1) * out_plane].chunks(pt.h * pt.w).enumerate() {
                db[co] = db[co] + plane.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return Ok(());
    }
    let mut cols = vec![T::zero(); r * p];
    let mut dx = dx;
    let mut dw = dw;
    for bi in 0..s.n {
        pt.im2col(&dy[bi * out_plane..(bi + 1) * out_plane], &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            // dx (Cin,P) += W (Cin,R) * cols (R,P)
            T::gemm(
                s.cin,
                r,
                p,
                T::one(),
                w.data(),
                r as isize,
                1,
                &cols,
                p as isize,
                1,
                T::one(),
                &mut dx[bi * in_plane..(bi + 1) * in_plane],
                p as isize,
                1,
            );
        }
        if let Some(dw) = dw.as_deref_mut() {
            // dW (Cin,R) += x (Cin,P) * cols^T (P,R)
            T::gemm(
                s.cin,
                p,
                r,
                T::one(),
                &x.data()[bi * in_plane..(bi + 1) * in_plane],
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                T::one(),
                dw,
                r as isize,
                1,
            );
        }
    }
    Ok(())
}
