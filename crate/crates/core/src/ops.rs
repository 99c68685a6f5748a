//! Numeric kernels behind the graph primitives.
//!
//! Convolution is im2col + a row-wise axpy GEMM. Every accumulation runs in a
//! fixed sequential order per output element, so results are bit-identical
//! across runs and across worker counts; rayon only splits independent output
//! rows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Real, Tensor};

/// Border handling for convolution padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Mirror an out-of-range index without repeating the edge sample
/// (`abc|cb` style). Valid for overhang up to `n - 1`.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0 && i > -n && i < 2 * n - 1);
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn shape_err(op: &'static str, expected: String, actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected,
        actual: fmt_shape(actual),
    }
}

// ── Convolution ─────────────────────────────────────────────────────────

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: PadMode,
}

impl ConvDims {
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn p(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn conv2d_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> Result<ConvDims> {
    let (n, c_in, h, width) = x.dims4("conv2d")?;
    let (c_out, wc_in, kh, kw) = w.dims4("conv2d")?;
    if wc_in != c_in {
        return Err(shape_err(
            "conv2d",
            format!("weight with {} input channels", c_in),
            w.shape(),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err("conv2d", format!("bias of shape {}", c_out), b.shape()));
        }
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: stride must be 1 or 2, got {}",
            stride
        )));
    }
    if mode == PadMode::Reflect && (padding + 1 > h || padding + 1 > width) {
        return Err(Error::InvalidArgument(format!(
            "conv2d: reflect padding {} too large for {}x{} input",
            padding, h, width
        )));
    }
    if h + 2 * padding < kh || width + 2 * padding < kw {
        return Err(shape_err(
            "conv2d",
            format!("input at least {}x{} after padding {}", kh, kw, padding),
            x.shape(),
        ));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (width + 2 * padding - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w: width,
        c_out,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
        mode,
    })
}

/// Lower one sample into the `K x P` patch matrix (row `k` = one kernel tap).
fn im2col<T: Real>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    let p = d.p();
    let pad = d.padding as isize;
    for ci in 0..d.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let k = (ci * d.kh + ky) * d.kw + kx;
                let row = &mut cols[k * p..(k + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * d.stride) as isize + ky as isize - pad;
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        match d.mode {
                            PadMode::Zero => out_row.fill(T::zero()),
                            PadMode::Reflect => {
                                let ry = reflect_index(iy, h);
                                fill_row(plane, ry, w, kx as isize - pad, d.stride, d.mode, out_row);
                            }
                        }
                        continue;
                    }
                    fill_row(plane, iy as usize, w, kx as isize - pad, d.stride, d.mode, out_row);
                }
            }
        }
    }
}

/// Copy one output row of patches from input row `iy`, handling horizontal
/// overhang. The stride-1 interior is a straight slice copy.
fn fill_row<T: Real>(
    plane: &[T],
    iy: usize,
    w: usize,
    x_off: isize,
    stride: usize,
    mode: PadMode,
    out_row: &mut [T],
) {
    let src = &plane[iy * w..(iy + 1) * w];
    let ow = out_row.len();
    if stride == 1 {
        // ix = ox + x_off; in bounds for ox in [lo, hi)
        let lo = (-x_off).max(0).min(ow as isize) as usize;
        let hi = ((w as isize - x_off).max(0) as usize).min(ow);
        for (ox, slot) in out_row[..lo].iter_mut().enumerate() {
            *slot = border_value(src, ox as isize + x_off, w, mode);
        }
        if lo < hi {
            let start = (lo as isize + x_off) as usize;
            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
        }
        for (i, slot) in out_row[hi..].iter_mut().enumerate() {
            *slot = border_value(src, (hi + i) as isize + x_off, w, mode);
        }
    } else {
        for (ox, slot) in out_row.iter_mut().enumerate() {
            *slot = border_value(src, (ox * stride) as isize + x_off, w, mode);
        }
    }
}

#[inline]
fn border_value<T: Real>(src: &[T], ix: isize, w: usize, mode: PadMode) -> T {
    if ix >= 0 && (ix as usize) < w {
        src[ix as usize]
    } else {
        match mode {
            PadMode::Zero => T::zero(),
            PadMode::Reflect => src[reflect_index(ix, w)],
        }
    }
}

/// out[co] = bias[co] + sum_k w[co,k] * cols[k]; deterministic k-order.
fn gemm_rows<T: Real>(w: &[T], cols: &[T], bias: Option<&[T]>, k: usize, p: usize, out: &mut [T]) {
    let run = |co: usize, out_row: &mut [T]| {
        let b = bias.map_or(T::zero(), |b| b[co]);
        out_row.fill(b);
        let w_row = &w[co * k..(co + 1) * k];
        for (ki, &wk) in w_row.iter().enumerate() {
            let col_row = &cols[ki * p..(ki + 1) * p];
            for (o, &c) in out_row.iter_mut().zip(col_row) {
                *o += wk * c;
            }
        }
    };
    let c_out = out.len() / p;
    if c_out * k * p >= 1 << 16 {
        out.par_chunks_mut(p)
            .enumerate()
            .for_each(|(co, row)| run(co, row));
    } else {
        for (co, row) in out.chunks_mut(p).enumerate() {
            run(co, row);
        }
    }
}

const DOT_LANES: usize = 8;

/// Dot product with eight independent accumulator lanes (fixed combine
/// order, so still deterministic).
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); DOT_LANES];
    let a_chunks = a.chunks_exact(DOT_LANES);
    let b_chunks = b.chunks_exact(DOT_LANES);
    let mut tail = T::zero();
    for (&x, &y) in a_chunks.remainder().iter().zip(b_chunks.remainder()) {
        tail += x * y;
    }
    for (av, bv) in a_chunks.zip(b_chunks) {
        for l in 0..DOT_LANES {
            acc[l] += av[l] * bv[l];
        }
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Four simultaneous dot products against a shared right-hand side; one
/// pass over `b` serves four weight-gradient entries.
fn dot_lanes_x4<T: Real>(a: [&[T]; 4], b: &[T]) -> [T; 4] {
    let mut acc = [[T::zero(); DOT_LANES]; 4];
    let n = b.len();
    let chunks = n / DOT_LANES;
    for i in 0..chunks {
        let base = i * DOT_LANES;
        let bv = &b[base..base + DOT_LANES];
        for (r, a_row) in a.iter().enumerate() {
            let av = &a_row[base..base + DOT_LANES];
            for l in 0..DOT_LANES {
                acc[r][l] += av[l] * bv[l];
            }
        }
    }
    let mut out = [T::zero(); 4];
    for r in 0..4 {
        let mut tail = T::zero();
        for i in chunks * DOT_LANES..n {
            tail += a[r][i] * b[i];
        }
        let s01 = acc[r][0] + acc[r][1];
        let s23 = acc[r][2] + acc[r][3];
        let s45 = acc[r][4] + acc[r][5];
        let s67 = acc[r][6] + acc[r][7];
        out[r] = ((s01 + s23) + (s45 + s67)) + tail;
    }
    out
}

pub(crate) struct ConvOutput<T: Real> {
    pub out: Tensor<T>,
    /// Saved patch matrices, one `K x P` block per sample, reused in backward.
    pub cols: Vec<T>,
}

pub(crate) fn conv2d_forward_full<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    d: &ConvDims,
) -> ConvOutput<T> {
    let (k, p) = (d.k(), d.p());
    let mut cols = vec![T::zero(); d.n * k * p];
    let mut out = vec![T::zero(); d.n * d.c_out * p];
    let in_plane = d.c_in * d.h * d.w;
    for s in 0..d.n {
        let sample_cols = &mut cols[s * k * p..(s + 1) * k * p];
        im2col(&x.data()[s * in_plane..(s + 1) * in_plane], d, sample_cols);
        gemm_rows(
            w.data(),
            sample_cols,
            bias.map(|b| b.data()),
            k,
            p,
            &mut out[s * d.c_out * p..(s + 1) * d.c_out * p],
        );
    }
    let out = Tensor::new(vec![d.n, d.c_out, d.oh, d.ow], out).expect("conv output shape");
    ConvOutput { out, cols }
}

pub(crate) struct ConvGrads<T: Real> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    w: &Tensor<T>,
    cols: &[T],
    dout: &[T],
    d: &ConvDims,
    needs_dx: bool,
    needs_db: bool,
) -> ConvGrads<T> {
    let (k, p) = (d.k(), d.p());
    let mut dw = vec![T::zero(); d.c_out * k];
    let mut db = if needs_db {
        Some(vec![T::zero(); d.c_out])
    } else {
        None
    };
    let mut dx = if needs_dx {
        Some(vec![T::zero(); d.n * d.c_in * d.h * d.w])
    } else {
        None
    };
    let mut dcol = vec![T::zero(); k * p];

    for s in 0..d.n {
        let sample_cols = &cols[s * k * p..(s + 1) * k * p];
        let sample_dout = &dout[s * d.c_out * p..(s + 1) * d.c_out * p];

        // dW[co,k] += dout[co] . cols[k]; four channels share each pass
        // over a cols row.
        dw.par_chunks_mut(4 * k).enumerate().for_each(|(chunk, dw_rows)| {
            let co0 = chunk * 4;
            let rows = dw_rows.len() / k;
            if rows == 4 {
                let g: [&[T]; 4] = [
                    &sample_dout[co0 * p..(co0 + 1) * p],
                    &sample_dout[(co0 + 1) * p..(co0 + 2) * p],
                    &sample_dout[(co0 + 2) * p..(co0 + 3) * p],
                    &sample_dout[(co0 + 3) * p..(co0 + 4) * p],
                ];
                for ki in 0..k {
                    let col_row = &sample_cols[ki * p..(ki + 1) * p];
                    let dots = dot_lanes_x4(g, col_row);
                    for r in 0..4 {
                        dw_rows[r * k + ki] += dots[r];
                    }
                }
            } else {
                for (r, dw_row) in dw_rows.chunks_mut(k).enumerate() {
                    let g_row = &sample_dout[(co0 + r) * p..(co0 + r + 1) * p];
                    for (ki, slot) in dw_row.iter_mut().enumerate() {
                        *slot += dot_lanes(g_row, &sample_cols[ki * p..(ki + 1) * p]);
                    }
                }
            }
        });

        if let Some(db) = db.as_mut() {
            for (co, slot) in db.iter_mut().enumerate() {
                let g_row = &sample_dout[co * p..(co + 1) * p];
                let mut acc = T::zero();
                for &g in g_row {
                    acc += g;
                }
                *slot += acc;
            }
        }

        if let Some(dx) = dx.as_mut() {
            // dcol[k] = sum_co w[co,k] * dout[co]
            dcol.par_chunks_mut(p).enumerate().for_each(|(ki, row)| {
                row.fill(T::zero());
                for co in 0..d.c_out {
                    let wk = w.data()[co * k + ki];
                    let g_row = &sample_dout[co * p..(co + 1) * p];
                    for (r, &g) in row.iter_mut().zip(g_row) {
                        *r += wk * g;
                    }
                }
            });
            col2im_add(
                &dcol,
                d,
                &mut dx[s * d.c_in * d.h * d.w..(s + 1) * d.c_in * d.h * d.w],
            );
        }
    }
    ConvGrads { dx, dw, db }
}

/// Scatter-add the patch-matrix gradient back onto the input plane,
/// folding padding contributions through the border rule.
fn col2im_add<T: Real>(dcol: &[T], d: &ConvDims, dx: &mut [T]) {
    let (h, w, oh, ow, p) = (d.h, d.w, d.oh, d.ow, d.p());
    let pad = d.padding as isize;
    for ci in 0..d.c_in {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let k = (ci * d.kh + ky) * d.kw + kx;
                let row = &dcol[k * p..(k + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * d.stride) as isize + ky as isize - pad;
                    let grad_row = &row[oy * ow..(oy + 1) * ow];
                    let ry = if iy >= 0 && iy < h as isize {
                        iy as usize
                    } else {
                        match d.mode {
                            PadMode::Zero => continue,
                            PadMode::Reflect => reflect_index(iy, h),
                        }
                    };
                    let x_off = kx as isize - pad;
                    if d.stride == 1 {
                        let lo = (-x_off).max(0).min(ow as isize) as usize;
                        let hi = ((w as isize - x_off).max(0) as usize).min(ow);
                        for (ox, &g) in grad_row[..lo].iter().enumerate() {
                            scatter_border(plane, ry, ox as isize + x_off, w, d.mode, g);
                        }
                        if lo < hi {
                            let start = ry * w + (lo as isize + x_off) as usize;
                            for (slot, &g) in
                                plane[start..start + (hi - lo)].iter_mut().zip(&grad_row[lo..hi])
                            {
                                *slot += g;
                            }
                        }
                        for (i, &g) in grad_row[hi..].iter().enumerate() {
                            scatter_border(plane, ry, (hi + i) as isize + x_off, w, d.mode, g);
                        }
                    } else {
                        for (ox, &g) in grad_row.iter().enumerate() {
                            scatter_border(plane, ry, (ox * d.stride) as isize + x_off, w, d.mode, g);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn scatter_border<T: Real>(plane: &mut [T], ry: usize, ix: isize, w: usize, mode: PadMode, g: T) {
    if ix >= 0 && (ix as usize) < w {
        plane[ry * w + ix as usize] += g;
    } else if mode == PadMode::Reflect {
        plane[ry * w + reflect_index(ix, w)] += g;
    }
}

// ── Pooling / resampling / concatenation ────────────────────────────────

/// 2x2 max-pool with stride 2. Ties route to the first maximal element in
/// row-major order. Returns flat input indices of the winners.
pub(crate) fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4("max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(
            "max_pool2",
            "even spatial extents".to_string(),
            x.shape(),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    let data = x.data();
    for nc in 0..n * c {
        let plane = nc * h * w;
        let out_plane = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = plane + 2 * oy * w + 2 * ox;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                let mut best_v = data[cand[0]];
                for &i in &cand[1..] {
                    if data[i] > best_v {
                        best_v = data[i];
                        best = i;
                    }
                }
                out[out_plane + oy * ow + ox] = best_v;
                argmax[out_plane + oy * ow + ox] = best as u32;
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out).expect("pool output shape"),
        argmax,
    ))
}

pub(crate) fn maxpool2_backward<T: Real>(dout: &[T], argmax: &[u32], numel_in: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); numel_in];
    for (&g, &i) in dout.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour x2 upsampling.
pub(crate) fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let data = x.data();
    for nc in 0..n * c {
        let src_plane = &data[nc * h * w..(nc + 1) * h * w];
        let dst_plane = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            let src_row = &src_plane[(oy / 2) * w..(oy / 2 + 1) * w];
            let dst_row = &mut dst_plane[oy * ow..(oy + 1) * ow];
            for (ox, slot) in dst_row.iter_mut().enumerate() {
                *slot = src_row[ox / 2];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn upsample2_backward<T: Real>(dout: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let g_plane = &dout[nc * oh * ow..(nc + 1) * oh * ow];
        let dst_plane = &mut dx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
            let dst_row = &mut dst_plane[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, &g) in g_row.iter().enumerate() {
                dst_row[ox / 2] += g;
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub(crate) fn concat_channels_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if n != nb || h != hb || w != wb {
        return Err(shape_err(
            "concat_channels",
            format!("{}xCx{}x{}", n, h, w),
            b.shape(),
        ));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); n * (ca + cb) * plane];
    for s in 0..n {
        let dst = &mut out[s * (ca + cb) * plane..(s + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

pub(crate) fn concat_channels_backward<T: Real>(
    dout: &[T],
    n: usize,
    ca: usize,
    cb: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); n * ca * plane];
    let mut db = vec![T::zero(); n * cb * plane];
    for s in 0..n {
        let src = &dout[s * (ca + cb) * plane..(s + 1) * (ca + cb) * plane];
        da[s * ca * plane..(s + 1) * ca * plane].copy_from_slice(&src[..ca * plane]);
        db[s * cb * plane..(s + 1) * cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    (da, db)
}
