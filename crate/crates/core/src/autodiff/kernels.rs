//! Dense loops behind matmul and the 2-D convolutions.
//!
//! Convolution tensors are laid out `[channel, freq, time]`; kernels are
//! `[out, in, kf, kt]`. A transposed convolution is evaluated as the data
//! gradient of the matching forward convolution.

/// `out[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `ga[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            ga[i * k + p] += acc;
        }
    }
}

/// `gb[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (o, &gv) in gbrow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Sizes of a forward convolution from an input of `in_f x in_t` to an output
/// of `out_f x out_t`. Input index = `out * stride + tap - pad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub in_f: usize,
    pub in_t: usize,
    pub out_f: usize,
    pub out_t: usize,
    pub kf: usize,
    pub kt: usize,
    pub stride_f: usize,
    pub stride_t: usize,
    pub pad_f: usize,
    pub pad_t: usize,
}

impl ConvDims {
    fn w_index(&self, co: usize, ci: usize, j: usize, i: usize) -> usize {
        ((co * self.cin + ci) * self.kf + j) * self.kt + i
    }

    /// Output rows whose tap `j` lands inside the input.
    fn valid_f(&self, fo: usize, j: usize) -> Option<usize> {
        let fi = (fo * self.stride_f + j) as isize - self.pad_f as isize;
        (fi >= 0 && (fi as usize) < self.in_f).then_some(fi as usize)
    }

    /// Range of output columns whose tap `i` lands inside the input.
    fn t_range(&self, i: usize) -> (usize, usize) {
        let st = self.stride_t as isize;
        let off = i as isize - self.pad_t as isize;
        // need 0 <= to*st + off < in_t
        let lo = if off >= 0 { 0 } else { (-off + st - 1) / st };
        let hi = (self.in_t as isize - off + st - 1) / st;
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(self.out_t);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.cout * d.out_f * d.out_t];
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for j in 0..d.kf {
                for i in 0..d.kt {
                    let wv = w[d.w_index(co, ci, j, i)];
                    let (lo, hi) = d.t_range(i);
                    for fo in 0..d.out_f {
                        let Some(fi) = d.valid_f(fo, j) else { continue };
                        let orow = (co * d.out_f + fo) * d.out_t;
                        let xrow = (ci * d.in_f + fi) * d.in_t;
                        for to in lo..hi {
                            let ti = to * d.stride_t + i - d.pad_t;
                            out[orow + to] += wv * x[xrow + ti];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `gx += dL/dx` given `gout = dL/dout`.
pub(crate) fn conv_backward_data(w: &[f64], gout: &[f64], gx: &mut [f64], d: &ConvDims) {
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for j in 0..d.kf {
                for i in 0..d.kt {
                    let wv = w[d.w_index(co, ci, j, i)];
                    let (lo, hi) = d.t_range(i);
                    for fo in 0..d.out_f {
                        let Some(fi) = d.valid_f(fo, j) else { continue };
                        let orow = (co * d.out_f + fo) * d.out_t;
                        let xrow = (ci * d.in_f + fi) * d.in_t;
                        for to in lo..hi {
                            let ti = to * d.stride_t + i - d.pad_t;
                            gx[xrow + ti] += wv * gout[orow + to];
                        }
                    }
                }
            }
        }
    }
}

/// `gw += dL/dw` given the forward input `x` and `gout = dL/dout`.
pub(crate) fn conv_backward_weight(x: &[f64], gout: &[f64], gw: &mut [f64], d: &ConvDims) {
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for j in 0..d.kf {
                for i in 0..d.kt {
                    let (lo, hi) = d.t_range(i);
                    let mut acc = 0.0;
                    for fo in 0..d.out_f {
                        let Some(fi) = d.valid_f(fo, j) else { continue };
                        let orow = (co * d.out_f + fo) * d.out_t;
                        let xrow = (ci * d.in_f + fi) * d.in_t;
                        for to in lo..hi {
                            let ti = to * d.stride_t + i - d.pad_t;
                            acc += x[xrow + ti] * gout[orow + to];
                        }
                    }
                    gw[d.w_index(co, ci, j, i)] += acc;
                }
            }
        }
    }
}
