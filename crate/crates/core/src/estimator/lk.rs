use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::imaging::{sample_at, to_gray, warp_jacobian, ImagePlane};
use crate::warp::{compose, invert, matrix_to_params, params_to_pixel_warp, PixelWarp, WarpParams};

/// Inverse-compositional Gauss–Newton settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkOptions {
    pub levels: usize,
    pub iterations: usize,
    /// Convergence threshold on `‖Δh‖`.
    pub tol: f64,
    /// Huber threshold on intensity residuals; `None` gives plain SSD.
    pub huber: Option<f64>,
}

impl Default for LkOptions {
    fn default() -> Self {
        LkOptions {
            levels: 3,
            iterations: 50,
            tol: 1e-6,
            huber: Some(0.05),
        }
    }
}

impl LkOptions {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument("LK needs at least one level and one iteration".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("LK tolerance {} must be > 0", self.tol)));
        }
        if let Some(d) = self.huber {
            if !(d > 0.0) {
                return Err(Error::InvalidArgument(format!("Huber threshold {d} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkResult {
    pub h: WarpParams,
    pub converged: bool,
    /// Set when the normal equations were singular (e.g. no texture); `h`
    /// is then the initial estimate.
    pub degenerate: bool,
    /// Mean robust cost at the finest level.
    pub residual: f64,
}

/// `x_coarse = (x_fine − 0.5) / 2` for 2×2 box downsampling.
fn level_map(levels: usize) -> Matrix3<f64> {
    let d = Matrix3::new(0.5, 0.0, -0.25, 0.0, 0.5, -0.25, 0.0, 0.0, 1.0);
    (0..levels).fold(Matrix3::identity(), |acc, _| d * acc)
}

fn to_level(h: &WarpParams, fine: (usize, usize), coarse: (usize, usize), k: usize) -> Result<WarpParams> {
    if k == 0 {
        return Ok(*h);
    }
    let d = level_map(k);
    let di = d.try_inverse().expect("level map is invertible");
    let p = params_to_pixel_warp(h, fine.0, fine.1)?;
    matrix_to_params(&PixelWarp::new(d * p.matrix() * di, coarse.0, coarse.1)?, h.model())
}

fn from_level(h: &WarpParams, fine: (usize, usize), coarse: (usize, usize), k: usize) -> Result<WarpParams> {
    if k == 0 {
        return Ok(*h);
    }
    let d = level_map(k);
    let di = d.try_inverse().expect("level map is invertible");
    let p = params_to_pixel_warp(h, coarse.0, coarse.1)?;
    matrix_to_params(&PixelWarp::new(di * p.matrix() * d, fine.0, fine.1)?, h.model())
}

struct LevelSolve {
    cost: f64,
    delta: Option<DVector<f64>>,
}

/// One linearization: residuals of `p2(W(x; h)) − p1(x)` against the
/// precomputed template Jacobian.
fn linearize(
    tmpl: &ImagePlane,
    jac: &crate::imaging::WarpJacobian,
    image: &ImagePlane,
    h: &WarpParams,
    huber: Option<f64>,
) -> Result<LevelSolve> {
    let (w, ht) = (tmpl.width(), tmpl.height());
    let dof = h.model().dof();
    let warped = sample_at(image, &params_to_pixel_warp(h, w, ht)?, w, ht);
    let mut hess = DMatrix::<f64>::zeros(dof, dof);
    let mut grad = DVector::<f64>::zeros(dof);
    let (mut cost, mut n) = (0.0, 0usize);
    for p in 0..w * ht {
        if !(jac.mask[p] && warped.mask()[p] && tmpl.mask()[p]) {
            continue;
        }
        let r = warped.data()[p] - tmpl.data()[p];
        let (weight, c) = match huber {
            Some(d) if r.abs() > d => (d / r.abs(), d * (r.abs() - 0.5 * d)),
            _ => (1.0, 0.5 * r * r),
        };
        cost += c;
        n += 1;
        let row = jac.row(p, 0);
        for i in 0..dof {
            grad[i] += weight * row[i] * r;
            for j in i..dof {
                hess[(i, j)] += weight * row[i] * row[j];
            }
        }
    }
    if n == 0 {
        return Ok(LevelSolve {
            cost: f64::INFINITY,
            delta: None,
        });
    }
    for i in 0..dof {
        for j in 0..i {
            hess[(i, j)] = hess[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(hess.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let delta = if hi <= 1e-12 * n as f64 || lo <= 1e-10 * hi {
        None
    } else {
        hess.cholesky().map(|c| c.solve(&grad))
    };
    Ok(LevelSolve {
        cost: cost / n as f64,
        delta,
    })
}

/// Coarse-to-fine inverse-compositional alignment: finds `h` with
/// `p2 ≈ warp(p1, h)` in the model of `h0`, starting from `h0`.
pub fn lk_refine(p1: &ImagePlane, p2: &ImagePlane, h0: &WarpParams, opts: &LkOptions) -> Result<LkResult> {
    opts.validate()?;
    if p1.width() != p2.width() || p1.height() != p2.height() {
        return Err(Error::ShapeMismatch("LK pair differs in size".into()));
    }
    let (g1, g2) = (to_gray(p1), to_gray(p2));
    let mut pyr = vec![(g1, g2)];
    while pyr.len() < opts.levels {
        let (a, b) = pyr.last().expect("nonempty");
        if a.width() < 32 || a.height() < 32 {
            break;
        }
        let next = (a.downsample2(), b.downsample2());
        pyr.push(next);
    }
    let fine = (p1.width(), p1.height());
    let model = h0.model();
    let ident = WarpParams::identity(model);
    let mut h = *h0;
    let mut converged = false;
    let mut best = (f64::INFINITY, *h0);
    for k in (0..pyr.len()).rev() {
        let (tmpl, image) = &pyr[k];
        let dims = (tmpl.width(), tmpl.height());
        let jac = warp_jacobian(tmpl, &ident)?;
        let mut hk = to_level(&h, fine, dims, k)?;
        converged = false;
        for _ in 0..opts.iterations {
            let step = linearize(tmpl, &jac, image, &hk, opts.huber)?;
            if k == 0 && step.cost < best.0 {
                best = (step.cost, hk);
            }
            let Some(delta) = step.delta else {
                if k == 0 {
                    return Ok(LkResult {
                        h: *h0,
                        converged: false,
                        degenerate: true,
                        residual: step.cost,
                    });
                }
                break;
            };
            let d = WarpParams::from_slice(model, delta.as_slice())?;
            // W(h) ← W(h) · W(Δ)⁻¹
            match invert(&d).and_then(|di| compose(&hk, &di)) {
                Ok(next) => hk = next,
                Err(_) => break,
            }
            if delta.norm() < opts.tol {
                converged = true;
                break;
            }
        }
        h = from_level(&hk, fine, dims, k)?;
    }
    let (tmpl, image) = &pyr[0];
    let jac = warp_jacobian(tmpl, &ident)?;
    let last = linearize(tmpl, &jac, image, &h, opts.huber)?;
    if last.cost < best.0 {
        best = (last.cost, h);
    }
    if !best.0.is_finite() {
        return Err(Error::DegenerateInput("LK pair has no overlapping valid pixels".into()));
    }
    Ok(LkResult {
        h: best.1,
        converged,
        degenerate: false,
        residual: best.0,
    })
}
