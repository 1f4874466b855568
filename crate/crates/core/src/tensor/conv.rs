//! 3D convolution and transposed convolution kernels (im2col + GEMM).
//!
//! Kernel taps that can never land inside the input for the given geometry
//! (e.g. the outer temporal taps when the temporal extent is 1) are pruned
//! before the GEMM. They would only ever multiply zero padding, so the
//! result is identical and the gradient of a pruned weight is exactly zero.

use serde::{Deserialize, Serialize};

use super::Element;
use crate::error::{Error, Result};

/// Stride, zero padding and (transposed only) output padding per axis `(T, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    #[serde(default)]
    pub output_padding: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvGeom {
            stride,
            padding,
            output_padding: [0; 3],
        }
    }

    pub fn unit() -> Self {
        Self::new([1; 3], [0; 3])
    }

    pub fn with_output_padding(mut self, output_padding: [usize; 3]) -> Self {
        self.output_padding = output_padding;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.stride.contains(&0) {
            return Err(Error::Invalid(format!("zero stride in {:?}", self.stride)));
        }
        Ok(())
    }
}

/// Output extent of a convolution along `(T, H, W)`.
pub fn conv_out_dims(input: [usize; 3], kernel: [usize; 3], geom: &ConvGeom) -> Result<[usize; 3]> {
    geom.validate()?;
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = input[a] + 2 * geom.padding[a];
        if kernel[a] == 0 || kernel[a] > padded {
            return Err(Error::Shape(format!(
                "kernel {kernel:?} does not fit padded input {input:?} (padding {:?})",
                geom.padding
            )));
        }
        out[a] = (padded - kernel[a]) / geom.stride[a] + 1;
    }
    Ok(out)
}

/// Output extent of a transposed convolution: `(D-1)·s - 2p + k + output_padding`.
pub fn deconv_out_dims(input: [usize; 3], kernel: [usize; 3], geom: &ConvGeom) -> Result<[usize; 3]> {
    geom.validate()?;
    let mut out = [0; 3];
    for a in 0..3 {
        if input[a] == 0 || kernel[a] == 0 {
            return Err(Error::Shape(format!("empty input {input:?} or kernel {kernel:?}")));
        }
        if geom.output_padding[a] >= geom.stride[a].max(1) && geom.output_padding[a] > 0 {
            return Err(Error::Invalid(format!(
                "output padding {:?} must be smaller than stride {:?}",
                geom.output_padding, geom.stride
            )));
        }
        let full = (input[a] - 1) * geom.stride[a] + kernel[a] + geom.output_padding[a];
        if full <= 2 * geom.padding[a] {
            return Err(Error::Shape(format!(
                "transposed convolution of {input:?} with kernel {kernel:?} and padding {:?} is empty",
                geom.padding
            )));
        }
        out[a] = full - 2 * geom.padding[a];
    }
    Ok(out)
}

/// Kernel taps that touch the source volume for at least one position.
#[derive(Debug, Clone)]
struct Taps {
    /// (kt, kh, kw) per active tap.
    offsets: Vec<[usize; 3]>,
    /// Flat index into the full `kT·kH·kW` kernel volume.
    flat: Vec<usize>,
}

impl Taps {
    fn active(src: [usize; 3], pos: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let axis = |a: usize| -> Vec<usize> {
            (0..kernel[a])
                .filter(|&k| {
                    (0..pos[a]).any(|o| {
                        let at = (o * stride[a] + k) as isize - pad[a] as isize;
                        at >= 0 && (at as usize) < src[a]
                    })
                })
                .collect()
        };
        let (kt, kh, kw) = (axis(0), axis(1), axis(2));
        let mut offsets = Vec::with_capacity(kt.len() * kh.len() * kw.len());
        let mut flat = Vec::with_capacity(offsets.capacity());
        for &t in &kt {
            for &h in &kh {
                for &w in &kw {
                    offsets.push([t, h, w]);
                    flat.push((t * kernel[1] + h) * kernel[2] + w);
                }
            }
        }
        Taps { offsets, flat }
    }

    fn len(&self) -> usize {
        self.offsets.len()
    }
}

/// Gathers `src[c, pos·s - p + k]` into a `[channels·taps, positions]` matrix.
fn im2col<T: Element>(
    src: &[T],
    channels: usize,
    src_dims: [usize; 3],
    pos_dims: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    taps: &Taps,
) -> Vec<T> {
    let [sd, sh, sw] = src_dims;
    let [pd, ph, pw] = pos_dims;
    let positions = pd * ph * pw;
    let mut cols = vec![T::zero(); channels * taps.len() * positions];
    for c in 0..channels {
        let plane = &src[c * sd * sh * sw..(c + 1) * sd * sh * sw];
        for (ti, &[kt, kh, kw]) in taps.offsets.iter().enumerate() {
            let row = &mut cols[(c * taps.len() + ti) * positions..][..positions];
            for ot in 0..pd {
                let it = (ot * stride[0] + kt) as isize - pad[0] as isize;
                if it < 0 || it as usize >= sd {
                    continue;
                }
                for oh in 0..ph {
                    let ih = (oh * stride[1] + kh) as isize - pad[1] as isize;
                    if ih < 0 || ih as usize >= sh {
                        continue;
                    }
                    let src_row = &plane[(it as usize * sh + ih as usize) * sw..][..sw];
                    let dst = &mut row[(ot * ph + oh) * pw..][..pw];
                    if stride[2] == 1 {
                        // contiguous run: columns ow with 0 <= ow + kw - p < sw
                        let lo = pad[2].saturating_sub(kw);
                        let hi = (sw + pad[2]).saturating_sub(kw).min(pw);
                        if lo < hi {
                            let s0 = lo + kw - pad[2];
                            dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * stride[2] + kw) as isize - pad[2] as isize;
                            if iw >= 0 && (iw as usize) < sw {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters and accumulates columns back onto `dst`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    channels: usize,
    dst: &mut [T],
    dst_dims: [usize; 3],
    pos_dims: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    taps: &Taps,
) {
    let [sd, sh, sw] = dst_dims;
    let [pd, ph, pw] = pos_dims;
    let positions = pd * ph * pw;
    for c in 0..channels {
        let plane = &mut dst[c * sd * sh * sw..(c + 1) * sd * sh * sw];
        for (ti, &[kt, kh, kw]) in taps.offsets.iter().enumerate() {
            let row = &cols[(c * taps.len() + ti) * positions..][..positions];
            for ot in 0..pd {
                let it = (ot * stride[0] + kt) as isize - pad[0] as isize;
                if it < 0 || it as usize >= sd {
                    continue;
                }
                for oh in 0..ph {
                    let ih = (oh * stride[1] + kh) as isize - pad[1] as isize;
                    if ih < 0 || ih as usize >= sh {
                        continue;
                    }
                    let dst_row = &mut plane[(it as usize * sh + ih as usize) * sw..][..sw];
                    let src = &row[(ot * ph + oh) * pw..][..pw];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * stride[2] + kw) as isize - pad[2] as isize;
                        if iw >= 0 && (iw as usize) < sw {
                            let d = &mut dst_row[iw as usize];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// `w[r, c2, tap]` → `[rows, c2·taps]` restricted to active taps.
fn gather_weight<T: Element>(w: &[T], rows: usize, inner: usize, kvol: usize, taps: &Taps) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * inner * taps.len());
    for r in 0..rows {
        for c in 0..inner {
            let base = (r * inner + c) * kvol;
            out.extend(taps.flat.iter().map(|&f| w[base + f]));
        }
    }
    out
}

fn scatter_weight<T: Element>(wmat: &[T], dw: &mut [T], rows: usize, inner: usize, kvol: usize, taps: &Taps) {
    let mut i = 0;
    for r in 0..rows {
        for c in 0..inner {
            let base = (r * inner + c) * kvol;
            for &f in &taps.flat {
                dw[base + f] = dw[base + f] + wmat[i];
                i += 1;
            }
        }
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

/// Shape bookkeeping shared by forward and backward passes.
#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    batch: usize,
    c_in: usize,
    c_out: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    kernel: [usize; 3],
    geom: ConvGeom,
    transposed: bool,
    taps: Taps,
}

impl ConvPlan {
    /// `input` is `[B, C_in, T, H, W]`; `weight` is `[C_out, C_in, kT, kH, kW]`
    /// for a convolution or `[C_in, C_out, kT, kH, kW]` when `transposed`.
    pub(crate) fn new(input: &[usize], weight: &[usize], bias: Option<&[usize]>, geom: ConvGeom, transposed: bool) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 {
            return Err(Error::Shape(format!(
                "expected 5-D input and weight, got input {input:?} and weight {weight:?}"
            )));
        }
        let (c_in_w, c_out) = if transposed { (weight[0], weight[1]) } else { (weight[1], weight[0]) };
        if input[1] != c_in_w {
            return Err(Error::Shape(format!(
                "input {input:?} has {} channels but weight {weight:?} expects {c_in_w}",
                input[1]
            )));
        }
        if let Some(b) = bias {
            if b != [c_out] {
                return Err(Error::Shape(format!(
                    "bias {b:?} does not match {c_out} output channels of weight {weight:?}"
                )));
            }
        }
        let in_dims = dims3(input);
        let kernel = dims3(weight);
        let (out_dims, taps) = if transposed {
            let out = deconv_out_dims(in_dims, kernel, &geom)?;
            let taps = Taps::active(out, in_dims, kernel, geom.stride, geom.padding);
            (out, taps)
        } else {
            if geom.output_padding != [0; 3] {
                return Err(Error::Invalid("output padding only applies to transposed convolution".into()));
            }
            let out = conv_out_dims(in_dims, kernel, &geom)?;
            let taps = Taps::active(in_dims, out, kernel, geom.stride, geom.padding);
            (out, taps)
        };
        Ok(ConvPlan {
            batch: input[0],
            c_in: input[1],
            c_out,
            in_dims,
            out_dims,
            kernel,
            geom,
            transposed,
            taps,
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.out_dims;
        vec![self.batch, self.c_out, d, h, w]
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_vol(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub(crate) fn forward<T: Element>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let (ci, co, nt) = (self.c_in, self.c_out, self.taps.len());
        let (iv, ov) = (self.in_vol(), self.out_vol());
        let s = self.geom.stride;
        let p = self.geom.padding;
        let mut out = vec![T::zero(); self.batch * co * ov];
        if self.transposed {
            let wmat = gather_weight(w, ci, co, self.kvol(), &self.taps);
            let mut cols = vec![T::zero(); co * nt * iv];
            for b in 0..self.batch {
                let xb = &x[b * ci * iv..][..ci * iv];
                // cols[co·nt, iv] = wmatᵀ · xb
                T::gemm(co * nt, ci, iv, &wmat, (1, co * nt), xb, (iv, 1), &mut cols, false);
                let ob = &mut out[b * co * ov..][..co * ov];
                col2im(&cols, co, ob, self.out_dims, self.in_dims, s, p, &self.taps);
            }
        } else {
            let wmat = gather_weight(w, co, ci, self.kvol(), &self.taps);
            for b in 0..self.batch {
                let xb = &x[b * ci * iv..][..ci * iv];
                let cols = im2col(xb, ci, self.in_dims, self.out_dims, s, p, &self.taps);
                let ob = &mut out[b * co * ov..][..co * ov];
                T::gemm(co, ci * nt, ov, &wmat, (ci * nt, 1), &cols, (ov, 1), ob, false);
            }
        }
        if let Some(bias) = bias {
            for chunk in out.chunks_mut(ov).enumerate() {
                let (idx, plane) = chunk;
                let bv = bias[idx % co];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        out
    }

    /// Returns `(d_input, d_weight, d_bias)`, each computed only when requested.
    pub(crate) fn backward<T: Element>(
        &self,
        x: &[T],
        w: &[T],
        dout: &[T],
        want: [bool; 3],
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
        let (ci, co, nt) = (self.c_in, self.c_out, self.taps.len());
        let (iv, ov) = (self.in_vol(), self.out_vol());
        let kvol = self.kvol();
        let s = self.geom.stride;
        let p = self.geom.padding;
        let mut dx = want[0].then(|| vec![T::zero(); self.batch * ci * iv]);
        let mut dwmat = want[1].then(|| vec![T::zero(); ci * co * nt]);
        if self.transposed {
            let wmat = gather_weight(w, ci, co, kvol, &self.taps);
            for b in 0..self.batch {
                let gb = &dout[b * co * ov..][..co * ov];
                let g = im2col(gb, co, self.out_dims, self.in_dims, s, p, &self.taps);
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * ci * iv..][..ci * iv];
                    T::gemm(ci, co * nt, iv, &wmat, (co * nt, 1), &g, (iv, 1), dxb, false);
                }
                if let Some(dw) = dwmat.as_mut() {
                    let xb = &x[b * ci * iv..][..ci * iv];
                    // dw[ci, co·nt] += xb[ci, iv] · gᵀ
                    T::gemm(ci, iv, co * nt, xb, (iv, 1), &g, (1, iv), dw, true);
                }
            }
        } else {
            let wmat = gather_weight(w, co, ci, kvol, &self.taps);
            let mut dcols = want[0].then(|| vec![T::zero(); ci * nt * ov]);
            for b in 0..self.batch {
                let gb = &dout[b * co * ov..][..co * ov];
                if let Some(dw) = dwmat.as_mut() {
                    let xb = &x[b * ci * iv..][..ci * iv];
                    let cols = im2col(xb, ci, self.in_dims, self.out_dims, s, p, &self.taps);
                    // dw[co, ci·nt] += gb[co, ov] · colsᵀ
                    T::gemm(co, ov, ci * nt, gb, (ov, 1), &cols, (1, ov), dw, true);
                }
                if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols.as_mut()) {
                    T::gemm(ci * nt, co, ov, &wmat, (1, ci * nt), gb, (ov, 1), dcols, false);
                    let dxb = &mut dx[b * ci * iv..][..ci * iv];
                    col2im(dcols, ci, dxb, self.in_dims, self.out_dims, s, p, &self.taps);
                }
            }
        }
        let dw = dwmat.map(|m| {
            let mut dw = vec![T::zero(); ci * co * kvol];
            if self.transposed {
                scatter_weight(&m, &mut dw, ci, co, kvol, &self.taps);
            } else {
                scatter_weight(&m, &mut dw, co, ci, kvol, &self.taps);
            }
            dw
        });
        let db = want[2].then(|| {
            let mut db = vec![T::zero(); co];
            for (idx, plane) in dout.chunks(ov).enumerate() {
                db[idx % co] = db[idx % co] + plane.iter().copied().sum::<T>();
            }
            db
        });
        (dx, dw, db)
    }
}
