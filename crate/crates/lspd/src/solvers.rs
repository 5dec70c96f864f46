//! Classical model-based baselines: proximal operators and the primal-dual
//! hybrid gradient iterations the unrolled networks mirror.

use crate::error::{Error, Result};
use crate::linops::{CallCounter, LinearOperator, SubsetPartition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Proximal map of the conjugate of the least-squares fidelity
/// `f_b(z) = 0.5 ||z - b||^2`: `prox_{sigma f*}(y) = (y - sigma b) / (1 + sigma)`.
pub fn prox_fstar_ls(y: &[f32], sigma: f32, b: &[f32]) -> Vec<f32> {
    assert_eq!(y.len(), b.len());
    assert!(sigma > 0.0);
    let denom = 1.0 + sigma;
    y.iter()
        .zip(b)
        .map(|(&yv, &bv)| (yv - sigma * bv) / denom)
        .collect()
}

fn tv_gradient(z: &[f32], h: usize, w: usize, gx: &mut [f32], gy: &mut [f32]) {
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            gx[idx] = if j + 1 < w { z[idx + 1] - z[idx] } else { 0.0 };
            gy[idx] = if i + 1 < h { z[idx + w] - z[idx] } else { 0.0 };
        }
    }
}

fn tv_divergence(px: &[f32], py: &[f32], h: usize, w: usize, out: &mut [f32]) {
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let dx = if j == 0 {
                px[idx]
            } else if j + 1 < w {
                px[idx] - px[idx - 1]
            } else {
                -px[idx - 1]
            };
            let dy = if i == 0 {
                py[idx]
            } else if i + 1 < h {
                py[idx] - py[idx - w]
            } else {
                -py[idx - w]
            };
            out[idx] = dx + dy;
        }
    }
}

/// Isotropic TV value with forward differences and Neumann boundary.
pub fn tv_value(z: &[f32], h: usize, w: usize) -> f64 {
    let mut total = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let dx = if j + 1 < w {
                (z[idx + 1] - z[idx]) as f64
            } else {
                0.0
            };
            let dy = if i + 1 < h {
                (z[idx + w] - z[idx]) as f64
            } else {
                0.0
            };
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    total
}

pub struct TvProx {
    pub image: Vec<f32>,
    pub duality_gap: f64,
}

/// Proximal map of `lambda * TV_iso` via fast gradient projection on the
/// dual, reporting the final duality gap.
pub fn prox_tv(x: &[f32], h: usize, w: usize, lambda: f32, iters: usize) -> TvProx {
    assert_eq!(x.len(), h * w);
    if lambda <= 0.0 {
        return TvProx {
            image: x.to_vec(),
            duality_gap: 0.0,
        };
    }
    let n = h * w;
    let mut px = vec![0.0f32; n];
    let mut py = vec![0.0f32; n];
    let mut qx = vec![0.0f32; n];
    let mut qy = vec![0.0f32; n];
    let mut div = vec![0.0f32; n];
    let mut z = vec![0.0f32; n];
    let mut gx = vec![0.0f32; n];
    let mut gy = vec![0.0f32; n];
    let step = 1.0 / (8.0 * lambda);
    let mut t = 1.0f32;
    for _ in 0..iters {
        tv_divergence(&qx, &qy, h, w, &mut div);
        for i in 0..n {
            z[i] = x[i] - lambda * div[i];
        }
        tv_gradient(&z, h, w, &mut gx, &mut gy);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        for i in 0..n {
            let cand_x = qx[i] - step * gx[i];
            let cand_y = qy[i] - step * gy[i];
            let norm = (cand_x * cand_x + cand_y * cand_y).sqrt().max(1.0);
            let new_x = cand_x / norm;
            let new_y = cand_y / norm;
            qx[i] = new_x + momentum * (new_x - px[i]);
            qy[i] = new_y + momentum * (new_y - py[i]);
            px[i] = new_x;
            py[i] = new_y;
        }
        t = t_next;
    }
    tv_divergence(&px, &py, h, w, &mut div);
    for i in 0..n {
        z[i] = x[i] - lambda * div[i];
    }
    // gap = primal(z) - dual(p) with dual(p) = 0.5||x||^2 - 0.5||x - lambda div p||^2.
    let primal: f64 = z
        .iter()
        .zip(x)
        .map(|(&zv, &xv)| 0.5 * ((zv - xv) as f64).powi(2))
        .sum::<f64>()
        + lambda as f64 * tv_value(&z, h, w);
    let dual: f64 = x
        .iter()
        .zip(&z)
        .map(|(&xv, &zv)| 0.5 * (xv as f64).powi(2) - 0.5 * (zv as f64).powi(2))
        .sum();
    TvProx {
        image: z,
        duality_gap: primal - dual,
    }
}

/// PDHG configuration. `sigma * tau * ||A||^2 <= 1` is enforced at
/// construction (classical stability condition).
#[derive(Clone, Copy, Debug)]
pub struct PdhgConfig {
    pub sigma: f32,
    pub tau: f32,
    pub beta: f32,
    pub iters: usize,
    pub tv_weight: f32,
    pub tv_inner_iters: usize,
}

impl PdhgConfig {
    pub fn new(
        sigma: f32,
        tau: f32,
        beta: f32,
        iters: usize,
        tv_weight: f32,
        op_norm: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0 && tau > 0.0) {
            return Err(Error::Config("pdhg steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config("momentum beta must be in [0, 1]".into()));
        }
        if tv_weight < 0.0 {
            return Err(Error::Config("tv weight must be nonnegative".into()));
        }
        if sigma as f64 * tau as f64 * op_norm * op_norm > 1.0 + 1e-9 {
            return Err(Error::Config(
                "sigma * tau * ||A||^2 must be <= 1".into(),
            ));
        }
        Ok(Self {
            sigma,
            tau,
            beta,
            iters,
            tv_weight,
            tv_inner_iters: 100,
        })
    }

    /// Standard convergent default: `sigma = tau = 0.99 / ||A||`, `beta = 1`.
    pub fn default_steps(op_norm: f64, iters: usize, tv_weight: f32) -> Result<Self> {
        let s = (0.99 / op_norm.max(1e-12)) as f32;
        Self::new(s, s, 1.0, iters, tv_weight, op_norm)
    }
}

/// Per-iteration objective (and PSNR when ground truth is given) trace.
#[derive(Clone, Debug, Default)]
pub struct SolveTrace {
    pub objective: Vec<f64>,
    pub psnr: Vec<f64>,
    pub counter: CallCounter,
}

impl SolveTrace {
    /// CSV with columns `iter,objective,psnr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,objective,psnr\n");
        for (k, obj) in self.objective.iter().enumerate() {
            let p = self
                .psnr
                .get(k)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            out.push_str(&format!("{k},{obj:.10e},{p}\n"));
        }
        out
    }
}

fn objective(
    op: &LinearOperator,
    b: &[f32],
    x: &[f32],
    tv_weight: f32,
    h: usize,
    w: usize,
) -> Result<f64> {
    let ax = op.apply(x)?;
    let fit: f64 = ax
        .iter()
        .zip(b)
        .map(|(&a, &bb)| 0.5 * ((a - bb) as f64).powi(2))
        .sum();
    Ok(fit + tv_weight as f64 * tv_value(x, h, w))
}

fn push_metrics(
    trace: &mut SolveTrace,
    op: &LinearOperator,
    b: &[f32],
    x: &[f32],
    cfg: &PdhgConfig,
    h: usize,
    w: usize,
    truth: Option<&[f32]>,
) -> Result<f64> {
    let obj = objective(op, b, x, cfg.tv_weight, h, w)?;
    trace.objective.push(obj);
    if let Some(t) = truth {
        trace.psnr.push(crate::eval::psnr(x, t)?);
    }
    Ok(obj)
}

/// Primal-dual hybrid gradient for `0.5||Ax - b||^2 + tv_weight * TV(x)`.
pub fn pdhg_solve(
    op: &LinearOperator,
    b: &[f32],
    cfg: &PdhgConfig,
    x0: &[f32],
    truth: Option<&[f32]>,
) -> Result<(Vec<f32>, SolveTrace)> {
    let d = op.cols();
    let size = (d as f64).sqrt().round() as usize;
    let (h, w) = if size * size == d { (size, size) } else { (1, d) };
    let mut trace = SolveTrace::default();
    let mut x = x0.to_vec();
    let mut xbar = x0.to_vec();
    let mut y = vec![0.0f32; op.rows()];
    let initial = push_metrics(&mut trace, op, b, &x, cfg, h, w, truth)?;
    let blow_up = 1e3 * initial.max(1e-12);
    for _ in 0..cfg.iters {
        let ax = op.apply(&xbar)?;
        trace.counter.count_forward(op.rows());
        let v: Vec<f32> = y
            .iter()
            .zip(&ax)
            .map(|(&yv, &av)| yv + cfg.sigma * av)
            .collect();
        y = prox_fstar_ls(&v, cfg.sigma, b);
        let aty = op.adjoint(&y)?;
        trace.counter.count_adjoint(op.rows());
        let stepped: Vec<f32> = x
            .iter()
            .zip(&aty)
            .map(|(&xv, &g)| xv - cfg.tau * g)
            .collect();
        let x_new = if cfg.tv_weight > 0.0 {
            prox_tv(&stepped, h, w, cfg.tau * cfg.tv_weight, cfg.tv_inner_iters).image
        } else {
            stepped
        };
        for i in 0..d {
            xbar[i] = x_new[i] + cfg.beta * (x_new[i] - x[i]);
        }
        x = x_new;
        let obj = push_metrics(&mut trace, op, b, &x, cfg, h, w, truth)?;
        if obj > blow_up {
            return Err(Error::Divergence);
        }
    }
    Ok((x, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsetSchedule {
    Cyclic,
    UniformRandom { seed: u64 },
}

/// Ordered-subsets PDHG: per-iteration dual update on one subset with stored
/// per-subset adjoint memories whose sum drives the primal step. With a
/// single subset this reproduces [`pdhg_solve`] iterate for iterate.
pub fn spdhg_solve(
    op: &LinearOperator,
    b: &[f32],
    part: &SubsetPartition,
    cfg: &PdhgConfig,
    x0: &[f32],
    schedule: SubsetSchedule,
    truth: Option<&[f32]>,
) -> Result<(Vec<f32>, SolveTrace)> {
    let d = op.cols();
    let size = (d as f64).sqrt().round() as usize;
    let (h, w) = if size * size == d { (size, size) } else { (1, d) };
    let m = part.m();
    let mut trace = SolveTrace::default();
    let mut x = x0.to_vec();
    let mut xbar = x0.to_vec();
    let mut y = vec![0.0f32; op.rows()];
    let mut memories: Vec<Vec<f32>> = vec![vec![0.0f32; d]; m];
    let mut rng = match schedule {
        SubsetSchedule::UniformRandom { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        SubsetSchedule::Cyclic => None,
    };
    let initial = push_metrics(&mut trace, op, b, &x, cfg, h, w, truth)?;
    let blow_up = 1e3 * initial.max(1e-12);
    for k in 0..cfg.iters {
        let i = match &mut rng {
            Some(r) => r.gen_range(0..m),
            None => k % m,
        };
        let rows = part.rows_of(i)?;
        let sax = op.apply_subset(&xbar, part, i)?;
        trace.counter.count_forward(part.q());
        let b_sub: Vec<f32> = rows.iter().map(|&r| b[r]).collect();
        let y_sub: Vec<f32> = rows.iter().map(|&r| y[r]).collect();
        let v: Vec<f32> = y_sub
            .iter()
            .zip(&sax)
            .map(|(&yv, &av)| yv + cfg.sigma * av)
            .collect();
        let y_new = prox_fstar_ls(&v, cfg.sigma, &b_sub);
        for (&r, &yv) in rows.iter().zip(&y_new) {
            y[r] = yv;
        }
        memories[i] = op.adjoint_subset(&y_new, part, i)?;
        trace.counter.count_adjoint(part.q());
        // Summed adjoint memory drives the primal step.
        let mut total = vec![0.0f64; d];
        for mem in &memories {
            for (t, &v) in total.iter_mut().zip(mem) {
                *t += v as f64;
            }
        }
        let stepped: Vec<f32> = x
            .iter()
            .zip(&total)
            .map(|(&xv, &g)| xv - cfg.tau * g as f32)
            .collect();
        let x_new = if cfg.tv_weight > 0.0 {
            prox_tv(&stepped, h, w, cfg.tau * cfg.tv_weight, cfg.tv_inner_iters).image
        } else {
            stepped
        };
        for idx in 0..d {
            xbar[idx] = x_new[idx] + cfg.beta * (x_new[idx] - x[idx]);
        }
        x = x_new;
        let obj = push_metrics(&mut trace, op, b, &x, cfg, h, w, truth)?;
        if obj > blow_up {
            return Err(Error::Divergence);
        }
    }
    Ok((x, trace))
}
