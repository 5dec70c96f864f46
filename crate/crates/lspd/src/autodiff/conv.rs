//! Same-padded 2D cross-correlation kernels (forward and both backward
//! passes). Inner loops run over contiguous row slices so the compiler can
//! vectorize them.

/// `out[o, y, x] = bias[o] + sum_{i, ky, kx} w[o, i, ky, kx] * x[i, y+ky-ph, x+kx-pw]`
/// with zero padding and stride 1.
pub fn forward(
    x: &[f32],
    (ci, h, w): (usize, usize, usize),
    weight: &[f32],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f32],
) -> Vec<f32> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0f32; co * h * w];
    for o in 0..co {
        let out_ch = &mut out[o * h * w..(o + 1) * h * w];
        out_ch.fill(bias[o]);
        for i in 0..ci {
            let x_ch = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let sy = ky as isize - ph as isize;
                let y_lo = (-sy).max(0) as usize;
                let y_hi = ((h as isize - sy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let alpha = weight[((o * ci + i) * kh + ky) * kw + kx];
                    let sx = kx as isize - pw as isize;
                    let x_lo = (-sx).max(0) as usize;
                    let x_hi = ((w as isize - sx).min(w as isize)) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let src_row = ((y as isize + sy) as usize) * w;
                        let src = &x_ch[src_row + ((x_lo as isize + sx) as usize)
                            ..src_row + ((x_hi as isize + sx) as usize)];
                        let dst = &mut out_ch[y * w + x_lo..y * w + x_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += alpha * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input: scatter of `dy` through the kernel.
pub fn backward_input(
    dy: &[f32],
    (ci, h, w): (usize, usize, usize),
    weight: &[f32],
    (co, kh, kw): (usize, usize, usize),
) -> Vec<f32> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![0.0f32; ci * h * w];
    for i in 0..ci {
        let dx_ch = &mut dx[i * h * w..(i + 1) * h * w];
        for o in 0..co {
            let dy_ch = &dy[o * h * w..(o + 1) * h * w];
            for ky in 0..kh {
                let sy = ky as isize - ph as isize;
                let y_lo = (-sy).max(0) as usize;
                let y_hi = ((h as isize - sy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let alpha = weight[((o * ci + i) * kh + ky) * kw + kx];
                    let sx = kx as isize - pw as isize;
                    let x_lo = (-sx).max(0) as usize;
                    let x_hi = ((w as isize - sx).min(w as isize)) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let dst_row = ((y as isize + sy) as usize) * w;
                        let dst = &mut dx_ch[dst_row + ((x_lo as isize + sx) as usize)
                            ..dst_row + ((x_hi as isize + sx) as usize)];
                        let src = &dy_ch[y * w + x_lo..y * w + x_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += alpha * s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients with respect to the kernel and bias.
pub fn backward_weight(
    x: &[f32],
    dy: &[f32],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
) -> (Vec<f32>, Vec<f32>) {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dw = vec![0.0f32; co * ci * kh * kw];
    let mut db = vec![0.0f32; co];
    for o in 0..co {
        let dy_ch = &dy[o * h * w..(o + 1) * h * w];
        db[o] = dy_ch.iter().map(|&v| v as f64).sum::<f64>() as f32;
        for i in 0..ci {
            let x_ch = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let sy = ky as isize - ph as isize;
                let y_lo = (-sy).max(0) as usize;
                let y_hi = ((h as isize - sy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let sx = kx as isize - pw as isize;
                    let x_lo = (-sx).max(0) as usize;
                    let x_hi = ((w as isize - sx).min(w as isize)) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    for y in y_lo..y_hi {
                        let src_row = ((y as isize + sy) as usize) * w;
                        let src = &x_ch[src_row + ((x_lo as isize + sx) as usize)
                            ..src_row + ((x_hi as isize + sx) as usize)];
                        let g = &dy_ch[y * w + x_lo..y * w + x_hi];
                        let mut row_acc = 0.0f32;
                        for (a, b) in src.iter().zip(g) {
                            row_acc += a * b;
                        }
                        acc += row_acc as f64;
                    }
                    dw[((o * ci + i) * kh + ky) * kw + kx] = acc as f32;
                }
            }
        }
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution oracle.
    fn forward_naive(
        x: &[f32],
        (ci, h, w): (usize, usize, usize),
        weight: &[f32],
        (co, kh, kw): (usize, usize, usize),
        bias: &[f32],
    ) -> Vec<f32> {
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let mut out = vec![0.0f32; co * h * w];
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = bias[o] as f64;
                    for i in 0..ci {
                        for ky in 0..kh as isize {
                            for kx in 0..kw as isize {
                                let yy = y + ky - ph;
                                let xc = xx + kx - pw;
                                if yy >= 0 && yy < h as isize && xc >= 0 && xc < w as isize {
                                    let xv = x[i * h * w + yy as usize * w + xc as usize];
                                    let wv = weight
                                        [((o * ci + i) * kh + ky as usize) * kw + kx as usize];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                    }
                    out[o * h * w + y as usize * w + xx as usize] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ci, h, w) = (2, 7, 6);
        let (co, kh, kw) = (3, 5, 5);
        let x: Vec<f32> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wgt: Vec<f32> = (0..co * ci * kh * kw)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let bias: Vec<f32> = (0..co).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let fast = forward(&x, (ci, h, w), &wgt, (co, kh, kw), &bias);
        let slow = forward_naive(&x, (ci, h, w), &wgt, (co, kh, kw), &bias);
        for (a, b) in fast.iter().zip(&slow) {
            assert!(
                (a - b).abs() <= 1e-5 * b.abs().max(1.0),
                "conv mismatch {a} vs {b}"
            );
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        // 1x1 kernel with weight 1 and zero bias.
        let x: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let out = forward(&x, (1, 3, 4), &[1.0], (1, 1, 1), &[0.0]);
        assert_eq!(out, x);
    }

    #[test]
    fn all_ones_kernel_sums_window_on_constant_image() {
        let c = 0.75f32;
        let x = vec![c; 9 * 9];
        let wgt = vec![1.0f32; 25];
        let out = forward(&x, (1, 9, 9), &wgt, (1, 5, 5), &[0.0]);
        // Interior pixel sees the whole 5x5 window.
        let center = out[4 * 9 + 4];
        assert!((center - 25.0 * c).abs() < 1e-5, "center {center}");
    }
}
