//! Filtered backprojection.
//!
//! The sinogram is ramp-filtered per angle in the frequency domain (Ram-Lak,
//! optionally Hann-apodized), backprojected through the matched adjoint and
//! scaled by `pi / (2 * n_angles)`.

use super::{LinearOperator, ScanGeometry};
use crate::error::{Error, Result};
use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FbpFilter {
    RamLak,
    #[default]
    Hann,
}

/// Reusable filtering/backprojection plan for one geometry.
pub struct FbpPlan {
    n_angles: usize,
    n_rays: usize,
    pad: usize,
    // Frequency response scaled by 1/pad so that fft -> multiply -> ifft is
    // normalized.
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl FbpPlan {
    pub fn new(geom: &ScanGeometry, filter: FbpFilter) -> Self {
        let pad = (2 * geom.n_rays).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(pad);
        let ifft = planner.plan_fft_inverse(pad);
        // Frequency response of the band-limited ramp, obtained by
        // transforming its space-domain kernel (h[0] = 1/4, h[n] = -1/(pi n)^2
        // for odd n). Sampling |f| directly would null the DC bin and shift
        // the reconstruction mean.
        let mut kernel = vec![Complex64::default(); pad];
        kernel[0].re = 0.25;
        for n in (1..pad / 2 + 1).step_by(2) {
            let v = -1.0 / (std::f64::consts::PI * n as f64).powi(2);
            kernel[n].re = v;
            kernel[pad - n].re = v;
        }
        let mut kernel_fft = kernel;
        planner.plan_fft_forward(pad).process(&mut kernel_fft);
        let response = (0..pad)
            .map(|k| {
                let f = if k <= pad / 2 {
                    k as f64 / pad as f64
                } else {
                    (k as f64 - pad as f64) / pad as f64
                };
                let ramp = 2.0 * kernel_fft[k].re;
                let shaped = match filter {
                    FbpFilter::RamLak => ramp,
                    FbpFilter::Hann => {
                        ramp * 0.5 * (1.0 + (2.0 * std::f64::consts::PI * f).cos())
                    }
                };
                shaped / pad as f64
            })
            .collect();
        Self {
            n_angles: geom.n_angles,
            n_rays: geom.n_rays,
            pad,
            response,
            fft,
            ifft,
            scale: std::f64::consts::PI / (2.0 * geom.n_angles as f64),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Ramp-filters each angle row of the sinogram. The frequency response is
    /// real and even, so this operation is its own transpose.
    pub fn filter_sinogram(&self, b: &[f32]) -> Result<Vec<f32>> {
        if b.len() != self.n_angles * self.n_rays {
            return Err(Error::DimMismatch {
                expected: self.n_angles * self.n_rays,
                got: b.len(),
                context: "fbp sinogram length",
            });
        }
        let mut out = vec![0.0f32; b.len()];
        let mut buf = vec![Complex64::default(); self.pad];
        for a in 0..self.n_angles {
            let row = &b[a * self.n_rays..(a + 1) * self.n_rays];
            for c in buf.iter_mut() {
                *c = Complex64::default();
            }
            for (c, &v) in buf.iter_mut().zip(row) {
                c.re = v as f64;
            }
            self.fft.process(&mut buf);
            for (c, &h) in buf.iter_mut().zip(&self.response) {
                c.re *= h;
                c.im *= h;
            }
            self.ifft.process(&mut buf);
            for (o, c) in out[a * self.n_rays..(a + 1) * self.n_rays]
                .iter_mut()
                .zip(&buf)
            {
                *o = c.re as f32;
            }
        }
        Ok(out)
    }

    /// Full reconstruction: filter, backproject, scale.
    pub fn reconstruct(&self, op: &LinearOperator, b: &[f32]) -> Result<Vec<f32>> {
        let filtered = self.filter_sinogram(b)?;
        let back = op.adjoint(&filtered)?;
        Ok(back.iter().map(|&v| (v as f64 * self.scale) as f32).collect())
    }
}

/// Filtered backprojection of a sinogram; serves as the x0 initializer for
/// the unrolled networks and as the classical baseline.
pub fn fbp(
    op: &LinearOperator,
    geom: &ScanGeometry,
    b: &[f32],
    filter: FbpFilter,
) -> Result<Vec<f32>> {
    FbpPlan::new(geom, filter).reconstruct(op, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::psnr;
    use crate::linops::assemble_projector;
    use crate::simdata::{make_phantom, PhantomKind};

    #[test]
    fn fbp_of_zero_is_zero() {
        let geom = ScanGeometry::parallel(8, 6, 8);
        let op = assemble_projector(&geom).unwrap();
        let x = fbp(&op, &geom, &vec![0.0; 48], FbpFilter::RamLak).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fbp_is_exactly_linear_in_powers_of_two() {
        let geom = ScanGeometry::parallel(16, 12, 16);
        let op = assemble_projector(&geom).unwrap();
        let phantom = make_phantom(PhantomKind::SheppLogan, 16, 0).unwrap();
        let b = op.apply(phantom.image()).unwrap();
        let b2: Vec<f32> = b.iter().map(|&v| 2.0 * v).collect();
        let x1 = fbp(&op, &geom, &b, FbpFilter::Hann).unwrap();
        let x2 = fbp(&op, &geom, &b2, FbpFilter::Hann).unwrap();
        for (a, b) in x1.iter().zip(&x2) {
            assert_eq!(2.0 * a, *b, "doubling the data must double the image");
        }
    }

    #[test]
    fn fbp_reconstructs_phantom_at_dense_sampling() {
        // Noiseless, densely sampled: quality is pinned from a reference run.
        let geom = ScanGeometry::parallel(64, 180, 64);
        let op = assemble_projector(&geom).unwrap();
        let phantom = make_phantom(PhantomKind::SheppLogan, 64, 0).unwrap();
        let b = op.apply(phantom.image()).unwrap();
        let recon = fbp(&op, &geom, &b, FbpFilter::RamLak).unwrap();
        let score = psnr(&recon, phantom.image()).unwrap();
        assert!(score >= 25.0, "fbp psnr {score} below floor");
        // Reference value recorded on first successful run.
        let reference = 28.05;
        assert!(
            (score - reference).abs() <= 0.5,
            "fbp psnr {score} drifted from pinned {reference}"
        );
    }
}
