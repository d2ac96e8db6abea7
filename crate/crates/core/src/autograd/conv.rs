//! Direct 3D convolution kernels.
//!
//! The input is zero padded and split along the width axis into `stride`
//! phases so every kernel tap reads a contiguous row. All reductions run in
//! a fixed order, so results are reproducible bit for bit.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, input: [usize; 3]) -> Option<Self> {
        let mut output = [0; 3];
        for (o, &n) in output.iter_mut().zip(&input) {
            if n + 2 * pad < kernel {
                return None;
            }
            *o = (n + 2 * pad - kernel) / stride + 1;
        }
        Some(ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            pad,
            input,
            output,
        })
    }

    fn padded(&self) -> [usize; 3] {
        [
            self.input[0] + 2 * self.pad,
            self.input[1] + 2 * self.pad,
            self.input[2] + 2 * self.pad,
        ]
    }

    /// Width of one phase row in the split buffer.
    fn phase_width(&self) -> usize {
        self.padded()[2].div_ceil(self.stride)
    }

    /// Split buffer length, with slack so full-width tiles can overrun the
    /// last row.
    fn split_len(&self) -> usize {
        let [dp, hp, _] = self.padded();
        self.cin * dp * hp * self.stride * self.phase_width() + 2 * LANES + self.kernel
    }

    fn row_offset(&self, ci: usize, z: usize, y: usize) -> usize {
        let [dp, hp, _] = self.padded();
        ((ci * dp + z) * hp + y) * self.stride * self.phase_width()
    }

    fn weight_index(&self, co: usize, ci: usize, kd: usize, kh: usize, kw: usize) -> usize {
        let k = self.kernel;
        (((co * self.cin + ci) * k + kd) * k + kh) * k + kw
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel.pow(3)
    }

    pub fn output_len(&self) -> usize {
        self.cout * self.output.iter().product::<usize>()
    }
}

/// Pads and phase-splits `input` (`[cin, D, H, W]`).
fn split_input<T: Scalar>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let [d, h, w] = g.input;
    let s = g.stride;
    let pw = g.phase_width();
    let mut out = vec![T::zero(); g.split_len()];
    for ci in 0..g.cin {
        for z in 0..d {
            for y in 0..h {
                let src = &input[((ci * d + z) * h + y) * w..][..w];
                let base = g.row_offset(ci, z + g.pad, y + g.pad);
                for (x, &v) in src.iter().enumerate() {
                    let xp = x + g.pad;
                    out[base + (xp % s) * pw + xp / s] = v;
                }
            }
        }
    }
    out
}

/// Inverse of [`split_input`] for gradients: gathers the unpadded region.
fn unsplit<T: Scalar>(g: &ConvGeom, split: &[T]) -> Vec<T> {
    let [d, h, w] = g.input;
    let s = g.stride;
    let pw = g.phase_width();
    let mut out = vec![T::zero(); g.cin * d * h * w];
    for ci in 0..g.cin {
        for z in 0..d {
            for y in 0..h {
                let dst = &mut out[((ci * d + z) * h + y) * w..][..w];
                let base = g.row_offset(ci, z + g.pad, y + g.pad);
                for (x, v) in dst.iter_mut().enumerate() {
                    let xp = x + g.pad;
                    *v = split[base + (xp % s) * pw + xp / s];
                }
            }
        }
    }
    out
}

/// Lanes per register tile along the width axis.
const LANES: usize = 8;

#[inline(always)]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Weights reordered to `[ci][tap][co]` so a block of output channels is
/// contiguous for each input tap.
fn reorder_weights<T: Scalar>(g: &ConvGeom, weight: &[T]) -> Vec<T> {
    let taps = g.kernel.pow(3);
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..taps {
                out[(ci * taps + t) * g.cout + co] = weight[(co * g.cin + ci) * taps + t];
            }
        }
    }
    out
}

/// Offset of every `(ci, tap)` source row relative to the row of the
/// output position's top-left-front corner.
fn tap_offsets(g: &ConvGeom) -> Vec<usize> {
    let (k, s, pw) = (g.kernel, g.stride, g.phase_width());
    let mut offs = Vec::with_capacity(g.cin * k * k * k);
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    offs.push(g.row_offset(ci, kd, kh) + (kw % s) * pw + kw / s);
                }
            }
        }
    }
    offs
}

fn forward_block<T: Scalar, const CB: usize>(
    g: &ConvGeom,
    split: &[T],
    wt: &[T],
    bias: Option<&[T]>,
    co0: usize,
    out: &mut [T],
) {
    let [od, oh, ow] = g.output;
    let s = g.stride;
    let plane = od * oh * ow;
    let offs = tap_offsets(g);
    let max_off = offs.iter().copied().max().unwrap_or(0);
    assert!(offs.len() * g.cout <= wt.len() && co0 + CB <= g.cout);
    let mut init = [T::zero(); CB];
    if let Some(b) = bias {
        init.copy_from_slice(&b[co0..co0 + CB]);
    }
    for z in 0..od {
        for y in 0..oh {
            let mut xt = 0;
            while xt < ow {
                let base = g.row_offset(0, z * s, y * s) + xt;
                assert!(base + max_off + LANES <= split.len());
                let mut acc = [[T::zero(); LANES]; CB];
                for (row, &b) in acc.iter_mut().zip(&init) {
                    *row = [b; LANES];
                }
                for (t, &off) in offs.iter().enumerate() {
                    // SAFETY: `base + off + LANES <= split.len()` by the assert
                    // above and `t * cout + co0 + CB <= wt.len()` since t < cin * taps.
                    let (src, wrow) = unsafe {
                        (
                            &*(split.as_ptr().add(base + off) as *const [T; LANES]),
                            &*(wt.as_ptr().add(t * g.cout + co0) as *const [T; CB]),
                        )
                    };
                    for b in 0..CB {
                        let wv = wrow[b];
                        for l in 0..LANES {
                            acc[b][l] = wv.mul_add(src[l], acc[b][l]);
                        }
                    }
                }
                let n = LANES.min(ow - xt);
                for (b, row) in acc.iter().enumerate() {
                    out[(co0 + b) * plane + (z * oh + y) * ow + xt..][..n].copy_from_slice(&row[..n]);
                }
                xt += LANES;
            }
        }
    }
}

pub fn conv3d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let split = split_input(g, input);
    let wt = reorder_weights(g, weight);
    let mut out = vec![T::zero(); g.output_len()];
    let mut co = 0;
    while co < g.cout {
        let rem = g.cout - co;
        if rem >= 8 {
            forward_block::<T, 8>(g, &split, &wt, bias, co, &mut out);
            co += 8;
        } else if rem >= 4 {
            forward_block::<T, 4>(g, &split, &wt, bias, co, &mut out);
            co += 4;
        } else {
            forward_block::<T, 1>(g, &split, &wt, bias, co, &mut out);
            co += 1;
        }
    }
    out
}

/// Gradient with respect to the convolution input.
pub fn conv3d_backward_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    if g.stride == 1 && g.pad < g.kernel {
        // Stride-1 adjoint is a correlation with the flipped, transposed kernel.
        let k = g.kernel;
        let adj = ConvGeom::new(g.cout, g.cin, k, 1, k - 1 - g.pad, g.output).expect("adjoint geometry");
        debug_assert_eq!(adj.output, g.input);
        let mut flipped = vec![T::zero(); weight.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            flipped[adj.weight_index(ci, co, k - 1 - kd, k - 1 - kh, k - 1 - kw)] =
                                weight[g.weight_index(co, ci, kd, kh, kw)];
                        }
                    }
                }
            }
        }
        return conv3d_forward(&adj, grad_out, &flipped, None);
    }
    let [od, oh, ow] = g.output;
    let (k, s, pw) = (g.kernel, g.stride, g.phase_width());
    let plane = od * oh * ow;
    let mut gsplit = vec![T::zero(); g.split_len()];
    for ci in 0..g.cin {
        for z in 0..od {
            for y in 0..oh {
                for kd in 0..k {
                    for kh in 0..k {
                        let base = g.row_offset(ci, z * s + kd, y * s + kh);
                        for kw in 0..k {
                            let dst = &mut gsplit[base + (kw % s) * pw + kw / s..][..ow];
                            for co in 0..g.cout {
                                let grow = &grad_out[co * plane + (z * oh + y) * ow..][..ow];
                                axpy(dst, weight[g.weight_index(co, ci, kd, kh, kw)], grow);
                            }
                        }
                    }
                }
            }
        }
    }
    unsplit(g, &gsplit)
}

fn params_block<T: Scalar, const CB: usize, const KW: usize>(
    g: &ConvGeom,
    split: &[T],
    gpad: &[T],
    co0: usize,
    gw: &mut [T],
) {
    let [od, oh, ow] = g.output;
    let (k, s, pw) = (g.kernel, g.stride, g.phase_width());
    assert_eq!(k, KW);
    let owp = ow.div_ceil(LANES) * LANES;
    let taps = k * k * k;
    let kw_offs: [usize; KW] = std::array::from_fn(|kw| (kw % s) * pw + kw / s);
    assert!(gpad.len() >= g.cout * od * oh * owp && co0 + CB <= g.cout);
    for z in 0..od {
        for ci in 0..g.cin {
            for kd in 0..k {
                for kh in 0..k {
                    let mut acc = [[[T::zero(); LANES]; CB]; KW];
                    for y in 0..oh {
                        let row = g.row_offset(ci, z * s + kd, y * s + kh);
                        assert!(row + kw_offs[KW - 1] + owp <= split.len());
                        let mut xt = 0;
                        while xt < owp {
                            // SAFETY: bounds asserted above for both buffers.
                            let grs: [&[T; LANES]; CB] = std::array::from_fn(|b| unsafe {
                                &*(gpad.as_ptr().add((((co0 + b) * od + z) * oh + y) * owp + xt) as *const [T; LANES])
                            });
                            for kw in 0..KW {
                                let src =
                                    unsafe { &*(split.as_ptr().add(row + kw_offs[kw] + xt) as *const [T; LANES]) };
                                for b in 0..CB {
                                    for l in 0..LANES {
                                        acc[kw][b][l] = grs[b][l].mul_add(src[l], acc[kw][b][l]);
                                    }
                                }
                            }
                            xt += LANES;
                        }
                    }
                    for (kw, per_co) in acc.iter().enumerate() {
                        let tap = (kd * k + kh) * k + kw;
                        for (b, lanes) in per_co.iter().enumerate() {
                            let mut sum = T::zero();
                            for &v in lanes {
                                sum += v;
                            }
                            gw[((co0 + b) * g.cin + ci) * taps + tap] += sum;
                        }
                    }
                }
            }
        }
    }
}

fn params_dispatch<T: Scalar, const CB: usize>(g: &ConvGeom, split: &[T], gpad: &[T], co0: usize, gw: &mut [T]) {
    match g.kernel {
        1 => params_block::<T, CB, 1>(g, split, gpad, co0, gw),
        2 => params_block::<T, CB, 2>(g, split, gpad, co0, gw),
        3 => params_block::<T, CB, 3>(g, split, gpad, co0, gw),
        4 => params_block::<T, CB, 4>(g, split, gpad, co0, gw),
        k => panic!("unsupported kernel size {k}"),
    }
}

/// Gradients with respect to weight and bias.
pub fn conv3d_backward_params<T: Scalar>(g: &ConvGeom, input: &[T], grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let split = split_input(g, input);
    let [od, oh, ow] = g.output;
    let owp = ow.div_ceil(LANES) * LANES;
    let plane = od * oh * ow;
    // Output gradient with rows zero-padded to whole tiles.
    let mut gpad = vec![T::zero(); g.cout * od * oh * owp];
    for r in 0..g.cout * od * oh {
        gpad[r * owp..][..ow].copy_from_slice(&grad_out[r * ow..][..ow]);
    }
    let gb = (0..g.cout)
        .map(|co| grad_out[co * plane..][..plane].iter().copied().sum())
        .collect();
    let mut gw = vec![T::zero(); g.weight_len()];
    let mut co = 0;
    while co < g.cout {
        let rem = g.cout - co;
        if rem >= 4 {
            params_dispatch::<T, 4>(g, &split, &gpad, co, &mut gw);
            co += 4;
        } else {
            params_dispatch::<T, 1>(g, &split, &gpad, co, &mut gw);
            co += 1;
        }
    }
    (gw, gb)
}

/// Geometry of a transposed convolution whose kernel equals its stride, so
/// output blocks do not overlap. Weight layout is `[cin, cout, k, k, k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub input: [usize; 3],
}

impl ConvTransposeGeom {
    pub fn output(&self) -> [usize; 3] {
        self.input.map(|n| n * self.kernel)
    }

    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * self.kernel.pow(3)
    }

    fn weight_index(&self, ci: usize, co: usize, a: usize, b: usize, c: usize) -> usize {
        let k = self.kernel;
        (((ci * self.cout + co) * k + a) * k + b) * k + c
    }
}

pub fn conv_transpose3d_forward<T: Scalar>(
    g: &ConvTransposeGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output();
    let k = g.kernel;
    let iplane = d * h * w;
    let oplane = od * oh * ow;
    let mut out = vec![T::zero(); g.cout * oplane];
    for co in 0..g.cout {
        let b0 = bias.map_or(T::zero(), |b| b[co]);
        out[co * oplane..][..oplane].iter_mut().for_each(|v| *v = b0);
        for ci in 0..g.cin {
            let ich = &input[ci * iplane..][..iplane];
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let wv = weight[g.weight_index(ci, co, a, b, c)];
                        for z in 0..d {
                            for y in 0..h {
                                let src = &ich[(z * h + y) * w..][..w];
                                let dst = &mut out[co * oplane + ((z * k + a) * oh + y * k + b) * ow..][..ow];
                                for (x, &v) in src.iter().enumerate() {
                                    dst[x * k + c] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose3d_backward_input<T: Scalar>(g: &ConvTransposeGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output();
    let k = g.kernel;
    let iplane = d * h * w;
    let oplane = od * oh * ow;
    let mut gin = vec![T::zero(); g.cin * iplane];
    for ci in 0..g.cin {
        for co in 0..g.cout {
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let wv = weight[g.weight_index(ci, co, a, b, c)];
                        for z in 0..d {
                            for y in 0..h {
                                let src = &grad_out[co * oplane + ((z * k + a) * oh + y * k + b) * ow..][..ow];
                                let dst = &mut gin[ci * iplane + (z * h + y) * w..][..w];
                                for (x, v) in dst.iter_mut().enumerate() {
                                    *v += wv * src[x * k + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub fn conv_transpose3d_backward_params<T: Scalar>(
    g: &ConvTransposeGeom,
    input: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output();
    let k = g.kernel;
    let iplane = d * h * w;
    let oplane = od * oh * ow;
    let mut gw = vec![T::zero(); g.weight_len()];
    let gb = (0..g.cout)
        .map(|co| grad_out[co * oplane..][..oplane].iter().copied().sum())
        .collect();
    for ci in 0..g.cin {
        let ich = &input[ci * iplane..][..iplane];
        for co in 0..g.cout {
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let mut acc = T::zero();
                        for z in 0..d {
                            for y in 0..h {
                                let src = &ich[(z * h + y) * w..][..w];
                                let gr = &grad_out[co * oplane + ((z * k + a) * oh + y * k + b) * ow..][..ow];
                                for (x, &v) in src.iter().enumerate() {
                                    acc += v * gr[x * k + c];
                                }
                            }
                        }
                        gw[g.weight_index(ci, co, a, b, c)] = acc;
                    }
                }
            }
        }
    }
    (gw, gb)
}
