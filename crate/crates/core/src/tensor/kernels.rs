//! Raw numeric kernels behind the tape operators. Convolution is lowered to
//! im2col followed by a GEMM.

/// Output extent of a sliding window: `floor((size + 2·pad − window)/stride) + 1`,
/// or `None` when the padded input is smaller than the window.
pub fn out_extent(size: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || window == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, unit stride, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// `c = a·b + beta·c` on row-major operands, with optional transposition of
/// `a` (stored k×m) and `b` (stored n×k).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n extents addressed
    // by the strides above (checked by the debug asserts).
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

fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch() * p]
    };
    for n in 0..g.batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (o, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        let b = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        gemm(g.c_out, g.patch(), p, weight, false, b, false, 1.0, y);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv_backward(
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    want_input: bool,
) -> ConvGrads {
    let p = g.positions();
    let k = g.patch();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut dweight = vec![0.0; g.c_out * k];
    let mut dbias = vec![0.0; g.c_out];
    let mut dinput = want_input.then(|| vec![0.0; g.batch * in_len]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if pointwise || !want_input {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for n in 0..g.batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let dy = &dout[n * out_len..(n + 1) * out_len];
        for (o, row) in dy.chunks_exact(p).enumerate() {
            dbias[o] += row.iter().sum::<f64>();
        }
        let b = if pointwise {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        // dW[o, k] += dY[o, p] · cols[k, p]^T
        gemm(g.c_out, p, k, dy, false, b, true, 1.0, &mut dweight);
        if let Some(dx_all) = dinput.as_mut() {
            let dx = &mut dx_all[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(k, g.c_out, p, weight, true, dy, false, 1.0, dx);
            } else {
                gemm(k, g.c_out, p, weight, true, dy, false, 0.0, &mut dcols);
                col2im(&dcols, g, dx);
            }
        }
    }
    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub batch: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Window maxima plus the flat input index each one came from. Ties go to
/// the first element in row-major scan order; padding never wins.
pub(crate) fn maxpool_forward(input: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let planes = g.batch * g.c;
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    let mut argmax = Vec::with_capacity(planes * g.ho * g.wo);
    for plane in 0..planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.ho {
            let y0 = (oy * g.sh) as isize - g.ph as isize;
            for ox in 0..g.wo {
                let x0 = (ox * g.sw) as isize - g.pw as isize;
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for dy in 0..g.kh as isize {
                    let iy = y0 + dy;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.kw as isize {
                        let ix = x0 + dx;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
