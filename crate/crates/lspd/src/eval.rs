//! Image-quality metrics and checkpoint evaluation tables.

use crate::error::{Error, Result};
use crate::linops::{LinearOperator, SubsetPartition};
use crate::simdata::{Dataset, Split};
use crate::unroll::UnrollNet;
use std::sync::Arc;

/// Peak signal-to-noise ratio in dB with `peak = max(ref) - min(ref)`.
/// Identical images return the `+inf` sentinel; a constant reference is an
/// error because the peak would be zero.
pub fn psnr(x: &[f32], reference: &[f32]) -> Result<f64> {
    if x.len() != reference.len() {
        return Err(Error::DimMismatch {
            expected: reference.len(),
            got: x.len(),
            context: "psnr image length",
        });
    }
    let lo = reference.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = reference.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let peak = hi - lo;
    if !(peak > 0.0) {
        return Err(Error::Metric("psnr reference image is constant".into()));
    }
    let mse: f64 = x
        .iter()
        .zip(reference)
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = ((i as f64) - c).powi(2) + ((j as f64) - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all positions where the 11x11 Gaussian window fits,
/// with the data range taken from the reference image.
pub fn ssim(x: &[f32], reference: &[f32], height: usize, width: usize) -> Result<f64> {
    if x.len() != reference.len() || x.len() != height * width {
        return Err(Error::DimMismatch {
            expected: height * width,
            got: x.len(),
            context: "ssim image shape",
        });
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let lo = reference.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = reference.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let peak = hi - lo;
    if !(peak > 0.0) {
        return Err(Error::Metric("ssim reference image is constant".into()));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let w = gaussian_window();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for top in 0..=(height - SSIM_WINDOW) {
        for left in 0..=(width - SSIM_WINDOW) {
            let mut mu_x = 0.0f64;
            let mut mu_y = 0.0f64;
            let mut sxx = 0.0f64;
            let mut syy = 0.0f64;
            let mut sxy = 0.0f64;
            for i in 0..SSIM_WINDOW {
                let row = (top + i) * width + left;
                for j in 0..SSIM_WINDOW {
                    let wv = w[i * SSIM_WINDOW + j];
                    let a = x[row + j] as f64;
                    let b = reference[row + j] as f64;
                    mu_x += wv * a;
                    mu_y += wv * b;
                    sxx += wv * a * a;
                    syy += wv * b * b;
                    sxy += wv * a * b;
                }
            }
            let var_x = sxx - mu_x * mu_x;
            let var_y = syy - mu_y * mu_y;
            let cov = sxy - mu_x * mu_y;
            let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
            let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Quality metrics plus the operator-call accounting for one reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct MetricResult {
    pub psnr: f64,
    pub ssim: f64,
    /// Full-operator equivalents spent per forward pass; NaN for baselines
    /// that never touch the operator.
    pub operator_calls: f64,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub index: usize,
    pub metrics: MetricResult,
}

#[derive(Clone, Debug)]
pub struct EvalTable {
    pub label: String,
    pub rows: Vec<EvalRow>,
    pub mean: MetricResult,
}

fn aggregate(label: &str, rows: Vec<EvalRow>) -> EvalTable {
    let n = rows.len().max(1) as f64;
    let mean = MetricResult {
        psnr: rows.iter().map(|r| r.metrics.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.metrics.ssim).sum::<f64>() / n,
        operator_calls: rows.iter().map(|r| r.metrics.operator_calls).sum::<f64>() / n,
    };
    EvalTable {
        label: label.to_string(),
        rows,
        mean,
    }
}

/// Evaluates a trained network on one dataset split. Ground truth must be
/// present for every item of the split.
pub fn evaluate(
    net: &UnrollNet,
    op: &Arc<LinearOperator>,
    part: &Arc<SubsetPartition>,
    ds: &Dataset,
    split: Split,
    label: &str,
) -> Result<EvalTable> {
    if ds.geometry.n_pixels() != op.cols() {
        return Err(Error::DimMismatch {
            expected: op.cols(),
            got: ds.geometry.n_pixels(),
            context: "dataset geometry vs operator",
        });
    }
    let size = ds.geometry.image_size;
    let mut rows = Vec::new();
    for (index, item) in ds.items.iter().enumerate() {
        if item.split != split {
            continue;
        }
        let truth = item.truth.as_ref().ok_or_else(|| {
            Error::Metric("evaluation split item is missing ground truth".into())
        })?;
        let (recon, counter) = net.reconstruct(op, part, &item.sinogram, &item.fbp_init, None)?;
        rows.push(EvalRow {
            index,
            metrics: MetricResult {
                psnr: psnr(&recon, truth)?,
                ssim: ssim(&recon, truth, size, size)?,
                operator_calls: counter.full_equivalents(op.rows()),
            },
        });
    }
    Ok(aggregate(label, rows))
}

/// Checkpoint-free baseline row: the stored FBP initializations scored
/// against ground truth.
pub fn evaluate_fbp(ds: &Dataset, split: Split) -> Result<EvalTable> {
    let size = ds.geometry.image_size;
    let mut rows = Vec::new();
    for (index, item) in ds.items.iter().enumerate() {
        if item.split != split {
            continue;
        }
        let truth = item.truth.as_ref().ok_or_else(|| {
            Error::Metric("evaluation split item is missing ground truth".into())
        })?;
        rows.push(EvalRow {
            index,
            metrics: MetricResult {
                psnr: psnr(&item.fbp_init, truth)?,
                ssim: ssim(&item.fbp_init, truth, size, size)?,
                operator_calls: f64::NAN,
            },
        });
    }
    Ok(aggregate("fbp", rows))
}

fn fmt_calls(v: f64) -> String {
    if v.is_nan() {
        "-".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Renders evaluation tables as CSV. The peak convention is recorded in the
/// header so the numbers are interpretable.
pub fn tables_to_csv(tables: &[EvalTable]) -> String {
    let mut out = String::new();
    out.push_str("# psnr/ssim peak = max(ref) - min(ref)\n");
    out.push_str("method,image,psnr,ssim,operator_calls\n");
    for table in tables {
        for row in &table.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                table.label,
                row.index,
                row.metrics.psnr,
                row.metrics.ssim,
                fmt_calls(row.metrics.operator_calls)
            ));
        }
        out.push_str(&format!(
            "{},mean,{:.6},{:.6},{}\n",
            table.label,
            table.mean.psnr,
            table.mean.ssim,
            fmt_calls(table.mean.operator_calls)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_identical_images_is_infinite() {
        let img = vec![0.0f32, 0.5, 1.0, 0.25];
        assert!(psnr(&img, &img).unwrap().is_infinite());
    }

    #[test]
    fn psnr_constant_reference_errors() {
        let x = vec![0.1f32; 4];
        let r = vec![0.7f32; 4];
        assert!(psnr(&x, &r).is_err());
    }

    #[test]
    fn psnr_closed_form_binary_reference() {
        // ref in {0,1}, x = ref + 0.1 -> mse = 0.01, peak = 1, psnr = 20.
        let reference: Vec<f32> = (0..16).map(|i| (i % 2) as f32).collect();
        let x: Vec<f32> = reference.iter().map(|&v| v + 0.1).collect();
        let val = psnr(&x, &reference).unwrap();
        assert!((val - 20.0).abs() < 1e-5, "psnr {val}");
    }

    #[test]
    fn psnr_matches_two_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reference: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x: Vec<f32> = reference
            .iter()
            .map(|&v| v + rng.gen_range(-0.05..0.05))
            .collect();
        let mse = x
            .iter()
            .zip(&reference)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / 64.0;
        let peak = reference.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64
            - reference.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let oracle = 10.0 * (peak * peak / mse).log10();
        assert!((psnr(&x, &reference).unwrap() - oracle).abs() <= 1e-10);
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img: Vec<f32> = (0..(16 * 16)).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(ssim(&img, &img, 16, 16).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_binary_image_is_low() {
        // Checkerboard-of-blocks binary image against its inversion.
        let n = 32;
        let mut img = vec![0.0f32; n * n];
        for r in 0..n {
            for c in 0..n {
                if (r / 8 + c / 8) % 2 == 0 {
                    img[r * n + c] = 1.0;
                }
            }
        }
        let inv: Vec<f32> = img.iter().map(|&v| 1.0 - v).collect();
        let score = ssim(&inv, &img, n, n).unwrap();
        assert!(score < 0.1, "ssim of inverted image {score}");
    }

    #[test]
    fn ssim_shift_invariance_with_fixed_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reference: Vec<f32> = (0..(16 * 16)).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x: Vec<f32> = reference
            .iter()
            .map(|&v| v + rng.gen_range(-1e-4..1e-4))
            .collect();
        let base = ssim(&x, &reference, 16, 16).unwrap();
        let c = 0.3f32;
        let x_shift: Vec<f32> = x.iter().map(|&v| v + c).collect();
        let r_shift: Vec<f32> = reference.iter().map(|&v| v + c).collect();
        let shifted = ssim(&x_shift, &r_shift, 16, 16).unwrap();
        assert!(
            (base - shifted).abs() <= 1e-7,
            "shift changed ssim by {}",
            (base - shifted).abs()
        );
    }

    #[test]
    fn ssim_rejects_small_images() {
        let img = vec![0.0f32; 64];
        assert!(ssim(&img, &img, 8, 8).is_err());
    }

    #[test]
    fn ssim_matches_naive_reference_implementation() {
        // Independent re-implementation with explicit double loops.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 14;
        let w = 13;
        let reference: Vec<f32> = (0..(h * w)).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x: Vec<f32> = reference
            .iter()
            .map(|&v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0))
            .collect();

        let lo = reference.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = reference.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let peak = hi - lo;
        let c1 = (0.01 * peak).powi(2);
        let c2 = (0.03 * peak).powi(2);
        let mut win = vec![0.0f64; 121];
        let mut sum = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
                win[i * 11 + j] = (-d2 / 4.5).exp();
                sum += win[i * 11 + j];
            }
        }
        for v in win.iter_mut() {
            *v /= sum;
        }
        let mut total = 0.0;
        let mut count = 0;
        for top in 0..=(h - 11) {
            for left in 0..=(w - 11) {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let a = x[(top + i) * w + left + j] as f64;
                        let b = reference[(top + i) * w + left + j] as f64;
                        let wv = win[i * 11 + j];
                        mx += wv * a;
                        my += wv * b;
                        sxx += wv * a * a;
                        syy += wv * b * b;
                        sxy += wv * a * b;
                    }
                }
                let num = (2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2);
                let den =
                    (mx * mx + my * my + c1) * ((sxx - mx * mx) + (syy - my * my) + c2);
                total += num / den;
                count += 1;
            }
        }
        let oracle = total / count as f64;
        let got = ssim(&x, &reference, h, w).unwrap();
        assert!((got - oracle).abs() <= 1e-6, "got {got}, oracle {oracle}");
    }
}
