//! Same-padded 2-D convolution over planar `[channel][row][col]` buffers.

/// Output rows `y` for which `y + k - r` stays inside `0..n` (r = radius).
#[inline]
fn valid_range(n: usize, k: usize, r: usize) -> (usize, usize) {
    let lo = r.saturating_sub(k);
    let hi = (n + r).saturating_sub(k).min(n);
    (lo, hi.max(lo))
}

pub(crate) struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvShape {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn wi(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_c + i) * self.kernel + ky) * self.kernel + kx
    }
}

/// `out[o] = bias[o] + sum_i w[o, i] * in[i]` with zero padding.
pub(crate) fn forward(s: &ConvShape, input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let (h, w, plane, r) = (s.height, s.width, s.plane(), s.kernel / 2);
    for o in 0..s.out_c {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..s.in_c {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..s.kernel {
                let (y0, y1) = valid_range(h, ky, r);
                for kx in 0..s.kernel {
                    let wv = weights[s.wi(o, i, ky, kx)];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(w, kx, r);
                    for y in y0..y1 {
                        let iy = y + ky - r;
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        let src = &in_plane[iy * w + x0 + kx - r..iy * w + x1 + kx - r];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and writes the input gradient when
/// `grad_in` is given.
pub(crate) fn backward(
    s: &ConvShape,
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let (h, w, plane, r) = (s.height, s.width, s.plane(), s.kernel / 2);
    if let Some(g) = grad_in.as_deref_mut() {
        g.fill(0.0);
    }
    for o in 0..s.out_c {
        let g_plane = &grad_out[o * plane..(o + 1) * plane];
        grad_b[o] += g_plane.iter().sum::<f64>();
        for i in 0..s.in_c {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..s.kernel {
                let (y0, y1) = valid_range(h, ky, r);
                for kx in 0..s.kernel {
                    let (x0, x1) = valid_range(w, kx, r);
                    let idx = s.wi(o, i, ky, kx);
                    let wv = weights[idx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - r;
                        let g = &g_plane[y * w + x0..y * w + x1];
                        let src_range = iy * w + x0 + kx - r..iy * w + x1 + kx - r;
                        acc += g
                            .iter()
                            .zip(&in_plane[src_range.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let dst = &mut gi[i * plane..(i + 1) * plane][src_range];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    grad_w[idx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges() {
        // 3x3 kernel, radius 1, width 5
        assert_eq!(valid_range(5, 0, 1), (1, 5));
        assert_eq!(valid_range(5, 1, 1), (0, 5));
        assert_eq!(valid_range(5, 2, 1), (0, 4));
        // 5x5 kernel on a 5-wide image
        assert_eq!(valid_range(5, 0, 2), (2, 5));
        assert_eq!(valid_range(5, 4, 2), (0, 3));
    }

    #[test]
    fn matches_direct_convolution() {
        let s = ConvShape {
            in_c: 2,
            out_c: 2,
            kernel: 3,
            height: 4,
            width: 5,
        };
        let input: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let weights: Vec<f64> = (0..36).map(|v| (v as f64 * 0.91).cos()).collect();
        let bias = [0.5, -0.25];
        let mut out = vec![0.0; 40];
        forward(&s, &input, &weights, &bias, &mut out);
        for o in 0..2 {
            for y in 0..4i64 {
                for x in 0..5i64 {
                    let mut v = bias[o];
                    for i in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (y + ky - 1, x + kx - 1);
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    v += weights[s.wi(o, i, ky as usize, kx as usize)]
                                        * input[i * 20 + (iy * 5 + ix) as usize];
                                }
                            }
                        }
                    }
                    let got = out[o * 20 + (y * 5 + x) as usize];
                    assert!((got - v).abs() < 1e-12);
                }
            }
        }
    }
}
