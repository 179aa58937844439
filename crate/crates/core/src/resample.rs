//! Factor-of-two bilinear resampling.
//!
//! Both operators sample on the pixel-center grid. Downscaling by two on
//! that grid reduces to averaging each 2x2 block. Upscaling interpolates
//! linearly between the two nearest source centers; the outermost half
//! pixel on each side continues the edge slope instead of clamping, so
//! linear ramps are reproduced exactly up to the borders.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Halves both spatial dimensions by 2x2 averaging.
pub fn downscale(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(Error::OddDimension {
            height: s.height,
            width: s.width,
        });
    }
    let out_shape = Shape::new(s.channels, s.height / 2, s.width / 2);
    Ok(Tensor::from_fn(out_shape, |c, y, x| {
        let (y0, x0) = (2 * y, 2 * x);
        0.25 * ((image.get(c, y0, x0) + image.get(c, y0, x0 + 1))
            + (image.get(c, y0 + 1, x0) + image.get(c, y0 + 1, x0 + 1)))
    }))
}

/// Source index and weight of the second tap for output sample `o` when
/// doubling a line of `n` samples.
#[inline]
fn taps(o: usize, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let s = o as f64 / 2.0 - 0.25;
    let i0 = (s.floor().max(0.0) as usize).min(n - 2);
    (i0, s - i0 as f64)
}

/// Doubles both spatial dimensions by bilinear interpolation.
pub fn upscale(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w) = (s.height, s.width);
    let out_shape = Shape::new(s.channels, 2 * h, 2 * w);
    // rows first, then columns
    let mut rows = Tensor::zeros(Shape::new(s.channels, h, 2 * w));
    for c in 0..s.channels {
        for y in 0..h {
            for ox in 0..2 * w {
                let (i0, t) = taps(ox, w);
                let a = image.get(c, y, i0);
                let v = if w == 1 {
                    a
                } else {
                    a + t * (image.get(c, y, i0 + 1) - a)
                };
                rows.set(c, y, ox, v);
            }
        }
    }
    Tensor::from_fn(out_shape, |c, oy, x| {
        let (i0, t) = taps(oy, h);
        let a = rows.get(c, i0, x);
        if h == 1 {
            a
        } else {
            a + t * (rows.get(c, i0 + 1, x) - a)
        }
    })
}
