//! Ray-traced sparse projector assembly.
//!
//! Every ray is traced through the pixel grid with exact pixel-intersection
//! lengths, so the assembled matrix is a fixed sparse operator and its stored
//! transpose is the exact adjoint. The image square is `[-s/2, s/2]^2` in
//! pixel units, pixel (0, 0) at the top-left; row `r` of angle `a` occupies
//! operator row `a * n_rays + r`.

use super::{AngleBlocks, GeometryMode, LinearOperator, ScanGeometry};
use crate::error::Result;

/// Assembles the sparse forward projector for a scan geometry.
pub fn assemble_projector(geom: &ScanGeometry) -> Result<LinearOperator> {
    geom.validate()?;
    let size = geom.image_size;
    let angles = geom.angles();
    let mut rows = Vec::with_capacity(geom.n_measurements());
    for &phi in &angles {
        let (sin_p, cos_p) = (phi.sin(), phi.cos());
        for r in 0..geom.n_rays {
            let t = (r as f64 - (geom.n_rays as f64 - 1.0) / 2.0) * geom.detector_spacing;
            let (p0, dir) = match geom.mode {
                GeometryMode::Parallel => {
                    // Offset along (cos, sin), integrate along (-sin, cos).
                    ((t * cos_p, t * sin_p), (-sin_p, cos_p))
                }
                GeometryMode::Fan => {
                    let dist = geom.source_distance * size as f64;
                    let src = (dist * cos_p, dist * sin_p);
                    let det = (t * -sin_p, t * cos_p);
                    let d = (det.0 - src.0, det.1 - src.1);
                    let norm = (d.0 * d.0 + d.1 * d.1).sqrt();
                    (src, (d.0 / norm, d.1 / norm))
                }
            };
            rows.push(trace_ray(p0, dir, size));
        }
    }
    LinearOperator::from_rows(
        geom.n_measurements(),
        geom.n_pixels(),
        rows,
        Some(AngleBlocks {
            n_angles: geom.n_angles,
            n_rays: geom.n_rays,
        }),
    )
}

/// Intersection lengths of the unit-direction line `p0 + t * dir` with every
/// pixel of the `size x size` grid centered at the origin.
fn trace_ray(p0: (f64, f64), dir: (f64, f64), size: usize) -> Vec<(u32, f32)> {
    let half = size as f64 / 2.0;
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (p, d) in [(p0.0, dir.0), (p0.1, dir.1)] {
        if d.abs() < 1e-14 {
            if p <= -half || p >= half {
                return Vec::new();
            }
        } else {
            let ta = (-half - p) / d;
            let tb = (half - p) / d;
            let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
    }
    if !(t1 > t0) {
        return Vec::new();
    }

    // All grid-line crossing parameters inside the clip window.
    let mut ts = Vec::with_capacity(2 * size + 4);
    ts.push(t0);
    ts.push(t1);
    for (p, d) in [(p0.0, dir.0), (p0.1, dir.1)] {
        if d.abs() > 1e-14 {
            for i in 0..=size {
                let t = ((-half + i as f64) - p) / d;
                if t > t0 && t < t1 {
                    ts.push(t);
                }
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut out: Vec<(u32, f32)> = Vec::with_capacity(2 * size);
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= 1e-12 {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let x = p0.0 + tm * dir.0;
        let y = p0.1 + tm * dir.1;
        let cc = ((x + half).floor() as i64).clamp(0, size as i64 - 1) as usize;
        let rr = ((half - y).floor() as i64).clamp(0, size as i64 - 1) as usize;
        let idx = (rr * size + cc) as u32;
        match out.last_mut() {
            Some(last) if last.0 == idx => last.1 += len as f32,
            _ => out.push((idx, len as f32)),
        }
    }
    out
}
