//! 2x2 max pooling with recorded argmax, the matching unpooling, and nearest upsampling.

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Argmax positions recorded by a 2x2/stride-2 max pooling.
///
/// One entry per pooled cell, holding the flat `y * W + x` offset of the
/// winning input pixel inside its `(H, W)` channel plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl PoolIndices {
    /// Builds an index map by hand; every entry must address the `(H, W)` plane.
    pub fn new(input_shape: [usize; 4], argmax: Vec<usize>) -> Result<Self> {
        let [n, c, h, w] = input_shape;
        if argmax.len() != n * c * (h / 2) * (w / 2) {
            return Err(TensorError::Invalid(format!(
                "{} indices for pooled shape of {input_shape:?}",
                argmax.len()
            )));
        }
        Ok(Self { input_shape, argmax })
    }

    /// Shape of the tensor that was pooled (and the shape unpooling restores).
    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn pooled_shape(&self) -> [usize; 4] {
        let [n, c, h, w] = self.input_shape;
        [n, c, h / 2, w / 2]
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

pub fn maxpool2x2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddExtent { op: "maxpool2d", h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                // Row-major scan, strict comparison: first maximum wins.
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                out.push(plane[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new([n, c, oh, ow], out)?,
        PoolIndices {
            input_shape: [n, c, h, w],
            argmax,
        },
    ))
}

/// Routes each pooled gradient to its argmax cell.
pub fn maxpool2x2_backward<T: Scalar>(idx: &PoolIndices, dy: &[T], dx: &mut [T]) {
    let [_, _, h, w] = idx.input_shape;
    let pooled = (h / 2) * (w / 2);
    for (cell, (&g, &pos)) in dy.iter().zip(&idx.argmax).enumerate() {
        let plane = cell / pooled;
        let i = plane * h * w + pos;
        dx[i] = dx[i] + g;
    }
}

fn check_unpool<T: Scalar>(x: &Tensor<T>, idx: &PoolIndices, out_shape: [usize; 4]) -> Result<()> {
    let [n, c, h, w] = out_shape;
    let pooled = [n, c, h / 2, w / 2];
    if x.shape() != pooled || idx.pooled_shape() != pooled {
        return Err(TensorError::ShapeMismatch {
            op: "maxunpool2d",
            lhs: x.shape().to_vec(),
            rhs: idx.pooled_shape().to_vec(),
        });
    }
    if let Some(&bad) = idx.argmax.iter().find(|&&p| p >= h * w) {
        return Err(TensorError::IndexOutOfBounds {
            op: "maxunpool2d",
            index: bad,
            plane: h * w,
        });
    }
    Ok(())
}

pub fn maxunpool2x2_forward<T: Scalar>(x: &Tensor<T>, idx: &PoolIndices, out_shape: [usize; 4]) -> Result<Tensor<T>> {
    check_unpool(x, idx, out_shape)?;
    let [n, c, h, w] = out_shape;
    let pooled = (h / 2) * (w / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for (cell, (&v, &pos)) in x.data().iter().zip(&idx.argmax).enumerate() {
        out[(cell / pooled) * h * w + pos] = v;
    }
    Tensor::new(out_shape, out)
}

/// Gathers the output gradient at the recorded positions.
pub fn maxunpool2x2_backward<T: Scalar>(idx: &PoolIndices, out_shape: [usize; 4], dy: &[T], dx: &mut [T]) {
    let [_, _, h, w] = out_shape;
    let pooled = (h / 2) * (w / 2);
    for (cell, (g, &pos)) in dx.iter_mut().zip(&idx.argmax).enumerate() {
        *g = *g + dy[(cell / pooled) * h * w + pos];
    }
}

pub fn upsample_nearest2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample_nearest2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / 2]);
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

pub fn upsample_nearest2x_backward<T: Scalar>(in_shape: &[usize], dy: &[T], dx: &mut [T]) {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    for (plane, dplane) in dy.chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (oy / 2) * w + ox / 2;
                dplane[i] = dplane[i] + plane[oy * ow + ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_picks_max_and_records_index() {
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax(), &[3]); // (1, 1) in a 2-wide plane
    }

    #[test]
    fn ties_resolve_to_top_left() {
        let x = Tensor::<f64>::full([1, 2, 4, 4], 7.0);
        let (y, idx) = maxpool2x2_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert_eq!(&idx.argmax()[..4], &[0, 2, 8, 10]);
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 3, 4]);
        assert!(matches!(maxpool2x2_forward(&x), Err(TensorError::OddExtent { .. })));
    }

    #[test]
    fn unpool_places_value() {
        let idx = PoolIndices::new([1, 1, 2, 2], vec![0]).unwrap();
        let x = Tensor::<f64>::from_f64([1, 1, 1, 1], &[5.0]).unwrap();
        let y = maxunpool2x2_forward(&x, &idx, [1, 1, 2, 2]).unwrap();
        assert_eq!(y.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unpool_rejects_out_of_bounds_index() {
        let idx = PoolIndices::new([1, 1, 2, 2], vec![4]).unwrap();
        let x = Tensor::<f64>::from_f64([1, 1, 1, 1], &[5.0]).unwrap();
        assert!(matches!(
            maxunpool2x2_forward(&x, &idx, [1, 1, 2, 2]),
            Err(TensorError::IndexOutOfBounds { .. })
        ));
    }

    #[test]
    fn unpool_of_pool_is_sparse_at_argmax() {
        let x = Tensor::<f64>::from_fn([1, 2, 4, 6], |i| ((i * 37) % 11) as f64 + 0.1 * i as f64);
        let (y, idx) = maxpool2x2_forward(&x).unwrap();
        let u = maxunpool2x2_forward(&y, &idx, [1, 2, 4, 6]).unwrap();
        let nonzero = u.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, y.len());
        for (cell, &pos) in idx.argmax().iter().enumerate() {
            let plane = cell / 6;
            assert_eq!(u.data()[plane * 24 + pos], x.data()[plane * 24 + pos]);
        }
    }
}
