//! Factor-two trilinear upsampling (half-pixel centers, edge clamped).
//!
//! Trilinear interpolation is separable, so the operator is applied one axis
//! at a time. Along one axis, output `2i` blends `0.75·x[i] + 0.25·x[i-1]`
//! and output `2i+1` blends `0.75·x[i] + 0.25·x[i+1]`, with indices clamped.

use crate::tensor::{cast, Scalar};

/// Upsamples one axis of a `[outer, n, inner]` view.
fn up_axis<T: Scalar>(src: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (a, b): (T, T) = (cast(0.75), cast(0.25));
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        let s = &src[o * n * inner..][..n * inner];
        let d = &mut out[o * 2 * n * inner..][..2 * n * inner];
        for i in 0..n {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(n - 1);
            for j in 0..inner {
                let c = s[i * inner + j];
                d[2 * i * inner + j] = a * c + b * s[prev * inner + j];
                d[(2 * i + 1) * inner + j] = a * c + b * s[next * inner + j];
            }
        }
    }
    out
}

/// Adjoint of [`up_axis`].
fn up_axis_adjoint<T: Scalar>(grad: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (a, b): (T, T) = (cast(0.75), cast(0.25));
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let g = &grad[o * 2 * n * inner..][..2 * n * inner];
        let d = &mut out[o * n * inner..][..n * inner];
        for i in 0..n {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(n - 1);
            for j in 0..inner {
                let ge = g[2 * i * inner + j];
                let go = g[(2 * i + 1) * inner + j];
                d[i * inner + j] += a * (ge + go);
                d[prev * inner + j] += b * ge;
                d[next * inner + j] += b * go;
            }
        }
    }
    out
}

/// Upsamples a `[c, d, h, w]` tensor to `[c, 2d, 2h, 2w]`.
pub fn upsample2x<T: Scalar>(x: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let t = up_axis(x, c * d * h, w, 1);
    let t = up_axis(&t, c * d, h, 2 * w);
    up_axis(&t, c, d, 4 * h * w)
}

pub fn upsample2x_adjoint<T: Scalar>(g: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let t = up_axis_adjoint(g, c, d, 4 * h * w);
    let t = up_axis_adjoint(&t, c * d, h, 2 * w);
    up_axis_adjoint(&t, c * d * h, w, 1)
}
