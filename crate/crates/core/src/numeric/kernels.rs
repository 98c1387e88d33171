//! Raw forward/backward kernels for the heavier tape operations.

use rayon::prelude::*;

use super::tensor::gemm;

/// Geometry of a square-kernel 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let mut cols = vec![0.0; g.patch_len() * plane];
    for c in 0..g.in_channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let dst = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[iy as usize * g.width + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `weight` is `[out, in, k, k]`, `bias` is `[out]`. Returns `[N, out, Ho, Wo]` data.
pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let out_len = g.out_channels * plane;
    let mut out = vec![0.0; g.batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(o, xs)| {
            let cols = im2col(g, xs);
            gemm(
                g.out_channels,
                g.patch_len(),
                plane,
                weight,
                false,
                &cols,
                false,
                o,
                false,
            );
            for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                let b = bias[oc];
                chunk.iter_mut().for_each(|v| *v += b);
            }
        });
    out
}

/// Gradients of a convolution: `(dx, dweight, dbias)`. Per-sample weight
/// gradients are reduced in sample order so the result does not depend on
/// the thread count.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = g.out_plane();
    let out_len = g.out_channels * plane;
    let wlen = g.out_channels * g.patch_len();
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = x
        .par_chunks(g.in_len())
        .zip(grad_out.par_chunks(out_len))
        .map(|(xs, go)| {
            let cols = im2col(g, xs);
            let mut dw = vec![0.0; wlen];
            // dW = dOut [O, P] * cols^T [P, CKK]
            gemm(
                g.out_channels,
                plane,
                g.patch_len(),
                go,
                false,
                &cols,
                true,
                &mut dw,
                false,
            );
            let db: Vec<f64> = go.chunks(plane).map(|c| c.iter().sum()).collect();
            let dx = if need_dx {
                let mut dcols = vec![0.0; g.patch_len() * plane];
                gemm(
                    g.patch_len(),
                    g.out_channels,
                    plane,
                    weight,
                    true,
                    go,
                    false,
                    &mut dcols,
                    false,
                );
                let mut dx = vec![0.0; g.in_len()];
                col2im_add(g, &dcols, &mut dx);
                dx
            } else {
                Vec::new()
            };
            (dx, dw, db)
        })
        .collect();

    let mut dweight = vec![0.0; wlen];
    let mut dbias = vec![0.0; g.out_channels];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * g.in_len()));
    for (sdx, sdw, sdb) in per_sample {
        dweight.iter_mut().zip(&sdw).for_each(|(a, b)| *a += b);
        dbias.iter_mut().zip(&sdb).for_each(|(a, b)| *a += b);
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&sdx);
        }
    }
    (dx, dweight, dbias)
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(x)))` with max subtraction.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Attention probabilities `softmax(q k^T * scale)` for one `len x d` block.
pub fn block_attention_probs(q: &[f64], k: &[f64], len: usize, d: usize, scale: f64) -> Vec<f64> {
    let mut p = vec![0.0; len * len];
    gemm(len, d, len, q, false, k, true, &mut p, false);
    for row in p.chunks_mut(len) {
        row.iter_mut().for_each(|v| *v *= scale);
        softmax_in_place(row);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_copies_input() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            height: 3,
            width: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = conv2d_forward(&g, &x, &w, &[0.5]);
        let expected: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert_eq!(y, expected);
    }

    #[test]
    fn strided_output_size() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 1,
            out_channels: 4,
            height: 64,
            width: 64,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!((g.out_height(), g.out_width()), (32, 32));
    }

    #[test]
    fn logsumexp_handles_large_values() {
        let v = [1000.0, 1000.0];
        let got = logsumexp(v.iter().copied());
        assert!((got - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
