//! Raw numeric kernels shared by the tape's forward and backward passes.
//!
//! Spatial kernels operate on *windows*: a rectangular sub-region of a
//! feature map whose full extent is `height x width`. Zero padding is applied
//! only at the true border of the full map, so a window-restricted
//! computation produces the same values as the full-map computation at every
//! cell inside the output window.

/// A rectangular region `[row, row + rows) x [col, col + cols)` of a
/// `height x width` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row: 0,
            col: 0,
            rows: height,
            cols: width,
            height,
            width,
        }
    }

    pub fn pixel(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            row,
            col,
            rows: 1,
            cols: 1,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_full(&self) -> bool {
        self.row == 0 && self.col == 0 && self.rows == self.height && self.cols == self.width
    }

    /// Whether `other` (same frame) lies inside `self`.
    pub fn contains(&self, other: &Window) -> bool {
        self.height == other.height
            && self.width == other.width
            && other.row >= self.row
            && other.col >= self.col
            && other.row + other.rows <= self.row + self.rows
            && other.col + other.cols <= self.col + self.cols
    }

    /// Smallest window covering both. Both must share a frame.
    pub fn union(&self, other: &Window) -> Window {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        let r0 = self.row.min(other.row);
        let c0 = self.col.min(other.col);
        let r1 = (self.row + self.rows).max(other.row + other.rows);
        let c1 = (self.col + self.cols).max(other.col + other.cols);
        Window {
            row: r0,
            col: c0,
            rows: r1 - r0,
            cols: c1 - c0,
            height: self.height,
            width: self.width,
        }
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn conv_input_range(
    start: usize,
    len: usize,
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    if len == 0 {
        return (0, 0);
    }
    let lo = (start * stride) as isize - padding as isize;
    let hi = ((start + len - 1) * stride + kernel - 1) as isize - padding as isize;
    let lo = lo.max(0) as usize;
    let hi = hi.min(extent as isize - 1);
    if hi < lo as isize {
        return (lo.min(extent), 0);
    }
    (lo, hi as usize - lo + 1)
}

/// Input window a convolution needs to produce `out` exactly.
pub fn conv_input_window(
    out: &Window,
    in_height: usize,
    in_width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Window {
    let (row, rows) = conv_input_range(out.row, out.rows, in_height, kernel, stride, padding);
    let (col, cols) = conv_input_range(out.col, out.cols, in_width, kernel, stride, padding);
    Window {
        row,
        col,
        rows,
        cols,
        height: in_height,
        width: in_width,
    }
}

/// Source taps of a 2x bilinear upsample (align-corners false) for one
/// output coordinate: `(lower index, upper index, weight of upper)`.
pub fn upsample_taps(out_index: usize, in_extent: usize) -> (usize, usize, f64) {
    let src = ((out_index as f64 + 0.5) * 0.5 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_extent - 1);
    let hi = if lo + 1 < in_extent { lo + 1 } else { lo };
    (lo, hi, src - lo as f64)
}

/// Input window a 2x upsample needs to produce `out` exactly.
pub fn upsample_input_window(out: &Window, in_height: usize, in_width: usize) -> Window {
    let range = |start: usize, len: usize, extent: usize| {
        if len == 0 {
            return (0, 0);
        }
        let (lo, _, _) = upsample_taps(start, extent);
        let (_, hi, _) = upsample_taps(start + len - 1, extent);
        (lo, hi - lo + 1)
    };
    let (row, rows) = range(out.row, out.rows, in_height);
    let (col, cols) = range(out.col, out.cols, in_width);
    Window {
        row,
        col,
        rows,
        cols,
        height: in_height,
        width: in_width,
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`), all row-major.
///
/// `a` is `m x k` (stored `k x m` when `a_trans`), `b` is `k x n` (stored
/// `n x k` when `b_trans`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
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
        );
    }
}

/// Geometry of one windowed convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_win: Window,
    pub out_win: Window,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// For each output row (or column), the local input offset of tap 0, or
    /// a signed offset that may fall outside the window (padding).
    fn tap_origin(&self, out_local: usize, rows: bool) -> isize {
        let (out_start, in_start) = if rows {
            (self.out_win.row, self.in_win.row)
        } else {
            (self.out_win.col, self.in_win.col)
        };
        ((out_start + out_local) * self.stride) as isize - self.padding as isize - in_start as isize
    }

    fn in_bounds(&self, local: isize, rows: bool) -> bool {
        let (global_start, extent, window_len) = if rows {
            (self.in_win.row, self.in_win.height, self.in_win.rows)
        } else {
            (self.in_win.col, self.in_win.width, self.in_win.cols)
        };
        let global = local + global_start as isize;
        if global < 0 || global >= extent as isize {
            return false;
        }
        assert!(
            local >= 0 && (local as usize) < window_len,
            "convolution input window does not cover a required tap"
        );
        true
    }
}

/// Output positions `[lo, hi)` along one axis whose tap at offset `k` lands
/// inside the map, plus the local input index used by position `lo`.
#[derive(Clone, Copy)]
struct Span {
    lo: usize,
    hi: usize,
    src: usize,
}

fn axis_spans(g: &ConvGeom, rows: bool) -> Vec<Span> {
    let out_len = if rows { g.out_win.rows } else { g.out_win.cols };
    (0..g.kernel)
        .map(|k| {
            let mut span = Span { lo: 0, hi: 0, src: 0 };
            let mut found = false;
            for o in 0..out_len {
                let i = g.tap_origin(o, rows) + k as isize;
                if g.in_bounds(i, rows) {
                    if !found {
                        span = Span { lo: o, hi: o + 1, src: i as usize };
                        found = true;
                    } else {
                        span.hi = o + 1;
                    }
                }
            }
            span
        })
        .collect()
}

/// Unfolds the input window into a `[C_in*k*k, P]` patch matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_win.area();
    let (k, s) = (g.kernel, g.stride);
    let (iw_rows, iw_cols) = (g.in_win.rows, g.in_win.cols);
    let ocols = g.out_win.cols;
    let row_spans = axis_spans(g, true);
    let col_spans = axis_spans(g, false);
    let mut cols = vec![0.0; g.patch_len() * p];
    for ci in 0..g.in_channels {
        let plane = &input[ci * iw_rows * iw_cols..(ci + 1) * iw_rows * iw_cols];
        for (ky, ry) in row_spans.iter().enumerate() {
            for (kx, cx) in col_spans.iter().enumerate() {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                let n = cx.hi - cx.lo;
                for oy in ry.lo..ry.hi {
                    let iy = ry.src + (oy - ry.lo) * s;
                    let src_row = &plane[iy * iw_cols..(iy + 1) * iw_cols];
                    let dst_row = &mut dst[oy * ocols + cx.lo..oy * ocols + cx.hi];
                    if s == 1 {
                        dst_row.copy_from_slice(&src_row[cx.src..cx.src + n]);
                    } else {
                        for (j, d) in dst_row.iter_mut().enumerate() {
                            *d = src_row[cx.src + j * s];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `[C_in*k*k, P]` patch-gradient matrix back onto the input.
pub fn col2im(dcols: &[f64], g: &ConvGeom, dinput: &mut [f64]) {
    let p = g.out_win.area();
    let (k, s) = (g.kernel, g.stride);
    let (iw_rows, iw_cols) = (g.in_win.rows, g.in_win.cols);
    let ocols = g.out_win.cols;
    let row_spans = axis_spans(g, true);
    let col_spans = axis_spans(g, false);
    for ci in 0..g.in_channels {
        let plane = &mut dinput[ci * iw_rows * iw_cols..(ci + 1) * iw_rows * iw_cols];
        for (ky, ry) in row_spans.iter().enumerate() {
            for (kx, cx) in col_spans.iter().enumerate() {
                let r = (ci * k + ky) * k + kx;
                let src = &dcols[r * p..(r + 1) * p];
                for oy in ry.lo..ry.hi {
                    let iy = ry.src + (oy - ry.lo) * s;
                    let dst_row = &mut plane[iy * iw_cols..(iy + 1) * iw_cols];
                    let src_row = &src[oy * ocols + cx.lo..oy * ocols + cx.hi];
                    for (j, &v) in src_row.iter().enumerate() {
                        dst_row[cx.src + j * s] += v;
                    }
                }
            }
        }
    }
}

/// Returns `(output [C_out, P], patch matrix)`.
pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let p = g.out_win.area();
    let mut out = vec![0.0; g.out_channels * p];
    gemm(
        g.out_channels,
        g.patch_len(),
        p,
        kernel,
        false,
        &cols,
        false,
        &mut out,
        false,
    );
    (out, cols)
}

/// Accumulates kernel and input gradients of a windowed convolution.
pub fn conv2d_backward(
    dout: &[f64],
    kernel: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    dkernel: Option<&mut [f64]>,
    dinput: Option<&mut [f64]>,
) {
    let p = g.out_win.area();
    let ckk = g.patch_len();
    if let Some(dk) = dkernel {
        gemm(g.out_channels, p, ckk, dout, false, cols, true, dk, true);
    }
    if let Some(di) = dinput {
        let mut dcols = vec![0.0; ckk * p];
        gemm(ckk, g.out_channels, p, kernel, true, dout, false, &mut dcols, false);
        col2im(&dcols, g, di);
    }
}

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    weight: Vec<f64>,
}

fn axis_taps(out_start: usize, out_len: usize, in_extent: usize, in_start: usize) -> AxisTaps {
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        weight: Vec::with_capacity(out_len),
    };
    for o in out_start..out_start + out_len {
        let (lo, hi, w) = upsample_taps(o, in_extent);
        taps.lo.push(lo - in_start);
        taps.hi.push(hi - in_start);
        taps.weight.push(w);
    }
    taps
}

/// 2x bilinear upsample of `[C, in_win]` onto `[C, out_win]`.
pub fn upsample2x_forward(
    input: &[f64],
    channels: usize,
    in_win: &Window,
    out_win: &Window,
) -> Vec<f64> {
    let ty = axis_taps(out_win.row, out_win.rows, in_win.height, in_win.row);
    let tx = axis_taps(out_win.col, out_win.cols, in_win.width, in_win.col);
    let (ir, ic) = (in_win.rows, in_win.cols);
    let mut out = vec![0.0; channels * out_win.area()];
    for c in 0..channels {
        let src = &input[c * ir * ic..(c + 1) * ir * ic];
        let dst = &mut out[c * out_win.area()..(c + 1) * out_win.area()];
        for oy in 0..out_win.rows {
            let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.weight[oy]);
            for ox in 0..out_win.cols {
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.weight[ox]);
                let top = src[y0 * ic + x0] * (1.0 - wx) + src[y0 * ic + x1] * wx;
                let bottom = src[y1 * ic + x0] * (1.0 - wx) + src[y1 * ic + x1] * wx;
                dst[oy * out_win.cols + ox] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

pub fn upsample2x_backward(
    dout: &[f64],
    channels: usize,
    in_win: &Window,
    out_win: &Window,
    dinput: &mut [f64],
) {
    let ty = axis_taps(out_win.row, out_win.rows, in_win.height, in_win.row);
    let tx = axis_taps(out_win.col, out_win.cols, in_win.width, in_win.col);
    let (ir, ic) = (in_win.rows, in_win.cols);
    for c in 0..channels {
        let src = &dout[c * out_win.area()..(c + 1) * out_win.area()];
        let dst = &mut dinput[c * ir * ic..(c + 1) * ir * ic];
        for oy in 0..out_win.rows {
            let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.weight[oy]);
            for ox in 0..out_win.cols {
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.weight[ox]);
                let g = src[oy * out_win.cols + ox];
                dst[y0 * ic + x0] += g * (1.0 - wy) * (1.0 - wx);
                dst[y0 * ic + x1] += g * (1.0 - wy) * wx;
                dst[y1 * ic + x0] += g * wy * (1.0 - wx);
                dst[y1 * ic + x1] += g * wy * wx;
            }
        }
    }
}

/// Copies the `to` sub-window out of a `[C, from]` tensor.
pub fn crop_forward(input: &[f64], channels: usize, from: &Window, to: &Window) -> Vec<f64> {
    let (dr, dc) = (to.row - from.row, to.col - from.col);
    let mut out = Vec::with_capacity(channels * to.area());
    for c in 0..channels {
        for r in 0..to.rows {
            let base = c * from.area() + (r + dr) * from.cols + dc;
            out.extend_from_slice(&input[base..base + to.cols]);
        }
    }
    out
}

pub fn crop_backward(dout: &[f64], channels: usize, from: &Window, to: &Window, dinput: &mut [f64]) {
    let (dr, dc) = (to.row - from.row, to.col - from.col);
    for c in 0..channels {
        for r in 0..to.rows {
            let base = c * from.area() + (r + dr) * from.cols + dc;
            let src = &dout[(c * to.rows + r) * to.cols..(c * to.rows + r + 1) * to.cols];
            for (d, s) in dinput[base..base + to.cols].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}
