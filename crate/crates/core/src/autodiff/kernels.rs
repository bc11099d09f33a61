//! Dense kernels behind the graph ops. Convolution is explicit
//! cross-correlation lowered to GEMM through an im2col buffer.

/// `c = a · b + beta · c` with arbitrary row/column strides.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n` with row stride `c_row_stride`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k.max(1) - 1) * a_strides.1);
    assert!(b.len() > (k.max(1) - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c_row_stride >= n && c.len() >= (m - 1) * c_row_stride + n);
    // SAFETY: the asserts above bound every index sgemm can touch.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.hout * self.wout
    }

    fn transposes_cleanly(&self) -> bool {
        self.stride == 1 && self.kh == self.kw && self.padding < self.kh && !self.is_pointwise()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kj - padding` lies inside `[0, w)`.
    fn valid_range(&self, k: usize, out: usize, extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1, exclusive bound
        let last = extent as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.clamp(0, out as isize) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Rows of output positions processed per im2col band, sized so a band's
/// patch matrix stays around 256 KiB.
fn band_rows(g: &ConvGeometry) -> usize {
    const BAND_FLOATS: usize = 64 * 1024;
    (BAND_FLOATS / (g.patch_len() * g.wout).max(1)).clamp(1, g.hout)
}

/// Patch matrix `[patch, (oy1-oy0)·wout]` for output rows `oy0..oy1`.
fn im2col(x: &[f32], g: &ConvGeometry, oy0: usize, oy1: usize, cols: &mut [f32]) {
    let band = (oy1 - oy0) * g.wout;
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (vy_lo, vy_hi) = g.valid_range(ki, g.hout, g.h);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.wout, g.w);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * band..(row + 1) * band];
                for oy in oy0..oy1 {
                    let dst_row = &mut dst[(oy - oy0) * g.wout..(oy - oy0 + 1) * g.wout];
                    if oy < vy_lo || oy >= vy_hi {
                        dst_row.fill(0.0);
                        continue;
                    }
                    dst_row[..ox_lo].fill(0.0);
                    dst_row[ox_hi..].fill(0.0);
                    let iy = oy * g.stride + ki - g.padding;
                    let src_row = &src[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.padding;
                        dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * g.stride + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a band of patch gradients back onto the input plane.
fn col2im(cols: &[f32], g: &ConvGeometry, oy0: usize, oy1: usize, dx: &mut [f32]) {
    let band = (oy1 - oy0) * g.wout;
    for ci in 0..g.cin {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (vy_lo, vy_hi) = g.valid_range(ki, g.hout, g.h);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.wout, g.w);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * band..(row + 1) * band];
                for oy in oy0.max(vy_lo)..oy1.min(vy_hi) {
                    let iy = oy * g.stride + ki - g.padding;
                    let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[(oy - oy0) * g.wout..(oy - oy0 + 1) * g.wout];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.padding;
                        let d = &mut dst_row[ix0..ix0 + (ox_hi - ox_lo)];
                        for (d, s) in d.iter_mut().zip(&src_row[ox_lo..ox_hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox * g.stride + kj - g.padding] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn bands(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let step = band_rows(g);
    let hout = g.hout;
    (0..hout).step_by(step).map(move |oy0| (oy0, (oy0 + step).min(hout)))
}

pub(crate) fn conv2d_forward(x: &[f32], kernel: &[f32], bias: Option<&[f32]>, g: &ConvGeometry) -> Vec<f32> {
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![0.0f32; g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; patch * band_rows(g) * g.wout] };
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        if g.is_pointwise() {
            gemm(g.cout, patch, plane, kernel, (patch, 1), xn, (plane, 1), 0.0, on, plane);
        } else {
            for (oy0, oy1) in bands(g) {
                let band = (oy1 - oy0) * g.wout;
                im2col(xn, g, oy0, oy1, &mut cols);
                gemm(g.cout, patch, band, kernel, (patch, 1), &cols, (band, 1), 0.0, &mut on[oy0 * g.wout..], plane);
            }
        }
        if let Some(bias) = bias {
            for (co, chunk) in on.chunks_exact_mut(plane).enumerate() {
                let b = bias[co];
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
    }
    out
}

/// Input gradient of a stride-1 convolution, computed as a forward
/// convolution of `grad_out` with the spatially flipped, channel-transposed
/// kernel.
fn input_grad_as_conv(kernel: &[f32], grad_out: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let mut flipped = vec![0.0f32; kernel.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let src = ((co * g.cin + ci) * g.kh + ki) * g.kw + kj;
                    let dst = ((ci * g.cout + co) * g.kh + (g.kh - 1 - ki)) * g.kw + (g.kw - 1 - kj);
                    flipped[dst] = kernel[src];
                }
            }
        }
    }
    let t = ConvGeometry {
        n: g.n,
        cin: g.cout,
        h: g.hout,
        w: g.wout,
        cout: g.cin,
        kh: g.kh,
        kw: g.kw,
        stride: 1,
        padding: g.kh - 1 - g.padding,
        hout: g.h,
        wout: g.w,
    };
    conv2d_forward(grad_out, &flipped, None, &t)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_x, need_k, need_b) = need;
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let patch = g.patch_len();
    if need_x && g.transposes_cleanly() {
        let mut grads = conv2d_backward(x, kernel, grad_out, g, (false, need_k, need_b));
        grads.input = Some(input_grad_as_conv(kernel, grad_out, g));
        return grads;
    }
    let mut dx = need_x.then(|| vec![0.0f32; g.n * in_len]);
    let mut dk = need_k.then(|| vec![0.0f32; g.cout * patch]);
    let mut db = need_b.then(|| vec![0.0f32; g.cout]);
    let band_len = if g.is_pointwise() { 0 } else { patch * band_rows(g) * g.wout };
    let mut cols = if need_k { vec![0.0f32; band_len] } else { Vec::new() };
    let mut dcols = if need_x { vec![0.0f32; band_len] } else { Vec::new() };

    for n in 0..g.n {
        let gon = &grad_out[n * g.cout * plane..(n + 1) * g.cout * plane];
        let xn = &x[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            if let Some(dk) = dk.as_mut() {
                gemm(g.cout, plane, patch, gon, (plane, 1), xn, (1, plane), 1.0, dk, patch);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                gemm(patch, g.cout, plane, kernel, (1, patch), gon, (plane, 1), 1.0, dxn, plane);
            }
        } else {
            for (oy0, oy1) in bands(g) {
                let band = (oy1 - oy0) * g.wout;
                let go = &gon[oy0 * g.wout..];
                if let Some(dk) = dk.as_mut() {
                    im2col(xn, g, oy0, oy1, &mut cols);
                    // dK[cout, patch] += dOut[cout, band] · colsᵀ[band, patch]
                    gemm(g.cout, band, patch, go, (plane, 1), &cols, (1, band), 1.0, dk, patch);
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols[patch, band] = Kᵀ[patch, cout] · dOut[cout, band]
                    gemm(patch, g.cout, band, kernel, (1, patch), go, (plane, 1), 0.0, &mut dcols, band);
                    col2im(&dcols, g, oy0, oy1, &mut dx[n * in_len..(n + 1) * in_len]);
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gon.chunks_exact(plane).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}
