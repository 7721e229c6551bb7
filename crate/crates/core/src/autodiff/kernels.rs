//! Raw numeric kernels shared by the tape ops. All buffers are row-major.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `da[m×k] += g[m×n] · bᵀ`
pub fn matmul_grad_a(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `db[k×n] += aᵀ · g[m×n]`
pub fn matmul_grad_b(g: &[f64], a: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in db_row.iter_mut().zip(g_row) {
                *d += aip * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Visits every (output index, input index, weight index) triple that
    /// contributes to the convolution; padding taps are skipped.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for fi in 0..self.filters {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_idx = (fi * oh + oy) * ow + ox;
                    for c in 0..self.channels {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                let in_idx =
                                    (c * self.height + iy as usize) * self.width + ix as usize;
                                let w_idx = ((fi * self.channels + c) * k + ky) * k + kx;
                                f(out_idx, in_idx, w_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], w: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; geo.filters * geo.out_height() * geo.out_width()];
    geo.for_each_tap(|o, i, wi| out[o] += x[i] * w[wi]);
    out
}

pub fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    geo: &ConvGeometry,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    geo.for_each_tap(|o, i, wi| {
        let go = g[o];
        if let Some(dx) = dx.as_deref_mut() {
            dx[i] += go * w[wi];
        }
        if let Some(dw) = dw.as_deref_mut() {
            dw[wi] += go * x[i];
        }
    });
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let m = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&eye, &m, 2, 2, 2), m.to_vec());
        assert_eq!(matmul(&[1.0, 0.0], &[0.0, 5.0], 1, 2, 1), vec![0.0]);
    }

    #[test]
    fn conv_output_size() {
        let geo = ConvGeometry {
            channels: 1,
            height: 32,
            width: 32,
            filters: 8,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((geo.out_height(), geo.out_width()), (16, 16));
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
    }
}
