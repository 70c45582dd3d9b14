//! Warp parameterizations and their pixel-domain matrices.
//!
//! Parameters live in a normalized frame where the image spans `[-1, 1]`
//! on both axes. The pixel-domain warp is `M · S(h) · M⁻¹` with
//! `M = [[W/2, 0, W/2], [0, H/2, H/2], [0, 0, 1]]`, so a warp maps frame-t
//! pixel coordinates to frame-(t+1) pixel coordinates and the image
//! center `(W/2, H/2)` is fixed by every warp with zero translation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Warp family. Translation and Scale are subgroups of PseudoSimilarity,
/// which is a subgroup of Similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WarpModel {
    Translation,
    Scale,
    PseudoSimilarity,
    Similarity,
}

impl WarpModel {
    pub const ALL: [WarpModel; 4] = [
        WarpModel::Translation,
        WarpModel::Scale,
        WarpModel::PseudoSimilarity,
        WarpModel::Similarity,
    ];

    /// Degrees of freedom.
    pub const fn dof(self) -> usize {
        match self {
            WarpModel::Translation => 2,
            WarpModel::Scale => 1,
            WarpModel::PseudoSimilarity => 3,
            WarpModel::Similarity => 4,
        }
    }

    pub const fn tag(self) -> &'static str {
        match self {
            WarpModel::Translation => "T",
            WarpModel::Scale => "S",
            WarpModel::PseudoSimilarity => "PS",
            WarpModel::Similarity => "Sim",
        }
    }

    /// Whether every warp of `other` is also a warp of `self`.
    pub fn contains(self, other: WarpModel) -> bool {
        use WarpModel::*;
        matches!(
            (self, other),
            (Similarity, _)
                | (PseudoSimilarity, Translation | Scale | PseudoSimilarity)
                | (Translation, Translation)
                | (Scale, Scale)
        )
    }

    fn has_scale(self) -> bool {
        !matches!(self, WarpModel::Translation)
    }

    fn has_translation(self) -> bool {
        !matches!(self, WarpModel::Scale)
    }
}

impl fmt::Display for WarpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for WarpModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t" | "translation" => Ok(WarpModel::Translation),
            "s" | "scale" => Ok(WarpModel::Scale),
            "ps" | "pseudo-similarity" | "pseudosimilarity" => Ok(WarpModel::PseudoSimilarity),
            "sim" | "similarity" => Ok(WarpModel::Similarity),
            other => Err(Error::InvalidArgument(format!("unknown warp model `{other}`"))),
        }
    }
}

/// Normalized warp vector `(s, tx, ty[, theta])` tagged with its model.
///
/// Fields that are inactive for the model are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpParams {
    model: WarpModel,
    s: f64,
    tx: f64,
    ty: f64,
    theta: f64,
}

impl WarpParams {
    pub fn identity(model: WarpModel) -> Self {
        WarpParams {
            model,
            s: 0.0,
            tx: 0.0,
            ty: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        WarpParams {
            tx,
            ty,
            ..Self::identity(WarpModel::Translation)
        }
    }

    pub fn scale(s: f64) -> Self {
        WarpParams {
            s,
            ..Self::identity(WarpModel::Scale)
        }
    }

    pub fn pseudo_similarity(s: f64, tx: f64, ty: f64) -> Self {
        WarpParams {
            s,
            tx,
            ty,
            ..Self::identity(WarpModel::PseudoSimilarity)
        }
    }

    pub fn similarity(s: f64, tx: f64, ty: f64, theta: f64) -> Self {
        WarpParams {
            model: WarpModel::Similarity,
            s,
            tx,
            ty,
            theta,
        }
    }

    /// Builds parameters from the active-coordinate vector of `model`
    /// (see [`WarpParams::to_vec`] for the ordering).
    pub fn from_slice(model: WarpModel, v: &[f64]) -> Result<Self> {
        if v.len() != model.dof() {
            return Err(Error::ShapeMismatch(format!(
                "{model} warp needs {} values, got {}",
                model.dof(),
                v.len()
            )));
        }
        Ok(match model {
            WarpModel::Translation => Self::translation(v[0], v[1]),
            WarpModel::Scale => Self::scale(v[0]),
            WarpModel::PseudoSimilarity => Self::pseudo_similarity(v[0], v[1], v[2]),
            WarpModel::Similarity => Self::similarity(v[0], v[1], v[2], v[3]),
        })
    }

    /// Active coordinates: T → (tx, ty), S → (s), PS → (s, tx, ty),
    /// Sim → (s, tx, ty, theta).
    pub fn to_vec(&self) -> Vec<f64> {
        match self.model {
            WarpModel::Translation => vec![self.tx, self.ty],
            WarpModel::Scale => vec![self.s],
            WarpModel::PseudoSimilarity => vec![self.s, self.tx, self.ty],
            WarpModel::Similarity => vec![self.s, self.tx, self.ty, self.theta],
        }
    }

    pub fn model(&self) -> WarpModel {
        self.model
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn tx(&self) -> f64 {
        self.tx
    }

    pub fn ty(&self) -> f64 {
        self.ty
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn is_identity(&self) -> bool {
        self.s == 0.0 && self.tx == 0.0 && self.ty == 0.0 && self.theta == 0.0
    }

    /// Re-tags the parameters in a larger model, zero-padding the new
    /// coordinates. Exact because the source model is a subgroup.
    pub fn lift(&self, model: WarpModel) -> Result<Self> {
        if !model.contains(self.model) {
            return Err(Error::InvalidArgument(format!(
                "cannot lift a {} warp into {model}",
                self.model
            )));
        }
        Ok(WarpParams { model, ..*self })
    }

    pub(crate) fn check_domain(&self) -> Result<()> {
        if !(1.0 + self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::ParameterDomain(format!(
                "scale offset s = {} leaves 1 + s non-positive",
                self.s
            )));
        }
        if !(self.tx.is_finite() && self.ty.is_finite() && self.theta.is_finite()) {
            return Err(Error::ParameterDomain("non-finite warp parameter".into()));
        }
        Ok(())
    }

    /// `S(h)` in the normalized frame.
    pub fn normalized_matrix(&self) -> Matrix3<f64> {
        let k = 1.0 + self.s;
        let (sn, c) = self.theta.sin_cos();
        Matrix3::new(
            k * c,
            -k * sn,
            self.tx,
            k * sn,
            k * c,
            self.ty,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Invertible 3×3 map between pixel coordinates of two frames of a
/// `width × height` image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelWarp {
    m: Matrix3<f64>,
    width: usize,
    height: usize,
}

fn normalization(width: usize, height: usize) -> (Matrix3<f64>, Matrix3<f64>) {
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    let m = Matrix3::new(hw, 0.0, hw, 0.0, hh, hh, 0.0, 0.0, 1.0);
    let m_inv = Matrix3::new(1.0 / hw, 0.0, -1.0, 0.0, 1.0 / hh, -1.0, 0.0, 0.0, 1.0);
    (m, m_inv)
}

impl PixelWarp {
    pub fn new(m: Matrix3<f64>, width: usize, height: usize) -> Result<Self> {
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::ParameterDomain(format!(
                "pixel warp is singular (det = {det:e})"
            )));
        }
        Ok(PixelWarp { m, width, height })
    }

    pub fn identity(width: usize, height: usize) -> Self {
        PixelWarp {
            m: Matrix3::identity(),
            width,
            height,
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn inverse(&self) -> PixelWarp {
        // det was checked at construction
        let m = self.m.try_inverse().expect("invertible by construction");
        PixelWarp { m, ..*self }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn after(&self, other: &PixelWarp) -> PixelWarp {
        PixelWarp {
            m: self.m * other.m,
            ..*self
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let u = m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)];
        let v = m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)];
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w == 1.0 {
            (u, v)
        } else {
            (u / w, v / w)
        }
    }

    /// Whether the bottom row is exactly `(0, 0, 1)`.
    pub fn is_affine(&self) -> bool {
        self.m[(2, 0)] == 0.0 && self.m[(2, 1)] == 0.0 && self.m[(2, 2)] == 1.0
    }
}

pub fn params_to_pixel_warp(h: &WarpParams, width: usize, height: usize) -> Result<PixelWarp> {
    h.check_domain()?;
    if width < 2 || height < 2 {
        return Err(Error::InvalidArgument(format!(
            "image must be at least 2×2, got {width}×{height}"
        )));
    }
    let (m, m_inv) = normalization(width, height);
    PixelWarp::new(m * h.normalized_matrix() * m_inv, width, height)
}

pub fn warp_points(w: &PixelWarp, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    pts.iter()
        .map(|p| {
            let (x, y) = w.apply(p[0], p[1]);
            [x, y]
        })
        .collect()
}

/// Least-squares projection of `w` onto `model`: minimizes the mean
/// squared pixel displacement over the four image corners.
pub fn matrix_to_params(w: &PixelWarp, model: WarpModel) -> Result<WarpParams> {
    let (m, m_inv) = normalization(w.width, w.height);
    let n = m_inv * w.m * m;
    project_normalized(&n, model, w.width as f64 / 2.0, w.height as f64 / 2.0)
}

/// Least-squares projection of normalized parameters onto another model
/// (corner residuals weighted equally in both axes).
pub fn project(h: &WarpParams, model: WarpModel) -> Result<WarpParams> {
    h.check_domain()?;
    if h.model == model {
        return Ok(*h);
    }
    project_normalized(&h.normalized_matrix(), model, 1.0, 1.0)
}

/// Projection in the normalized frame; `sx`, `sy` weight the residuals so
/// they are measured in pixels.
fn project_normalized(n: &Matrix3<f64>, model: WarpModel, sx: f64, sy: f64) -> Result<WarpParams> {
    const CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let dof = model.dof();
    let mut a = DMatrix::<f64>::zeros(8, dof);
    let mut y = DVector::<f64>::zeros(8);
    for (i, &(u, v)) in CORNERS.iter().enumerate() {
        let p = n * Vector3::new(u, v, 1.0);
        if !(p.z.abs() > 1e-300) {
            return Err(Error::NumericalDegeneracy(
                "warp sends an image corner to infinity".into(),
            ));
        }
        let (tu, tv) = (p.x / p.z, p.y / p.z);
        let (ru, rv) = (2 * i, 2 * i + 1);
        match model {
            WarpModel::Translation => {
                a[(ru, 0)] = sx;
                a[(rv, 1)] = sy;
                y[ru] = sx * (tu - u);
                y[rv] = sy * (tv - v);
            }
            WarpModel::Scale => {
                a[(ru, 0)] = sx * u;
                a[(rv, 0)] = sy * v;
                y[ru] = sx * (tu - u);
                y[rv] = sy * (tv - v);
            }
            WarpModel::PseudoSimilarity => {
                a[(ru, 0)] = sx * u;
                a[(ru, 1)] = sx;
                a[(rv, 0)] = sy * v;
                a[(rv, 2)] = sy;
                y[ru] = sx * (tu - u);
                y[rv] = sy * (tv - v);
            }
            WarpModel::Similarity => {
                // linear in (a, b, tx, ty) with a = (1+s)cosθ, b = (1+s)sinθ
                a[(ru, 0)] = sx * u;
                a[(ru, 1)] = -sx * v;
                a[(ru, 2)] = sx;
                a[(rv, 0)] = sy * v;
                a[(rv, 1)] = sy * u;
                a[(rv, 3)] = sy;
                y[ru] = sx * tu;
                y[rv] = sy * tv;
            }
        }
    }
    let ata = a.transpose() * &a;
    let aty = a.transpose() * &y;
    let eig_min = ata.symmetric_eigenvalues().min();
    let eig_max = ata.symmetric_eigenvalues().max();
    if !(eig_min > eig_max * 1e-12) {
        return Err(Error::NumericalDegeneracy(
            "corner system is rank deficient".into(),
        ));
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::NumericalDegeneracy("corner system is not positive definite".into()))?
        .solve(&aty);
    let h = match model {
        WarpModel::Similarity => {
            let (ca, cb) = (sol[0], sol[1]);
            WarpParams::similarity(ca.hypot(cb) - 1.0, sol[2], sol[3], cb.atan2(ca))
        }
        _ => WarpParams::from_slice(model, sol.as_slice())?,
    };
    h.check_domain()?;
    Ok(h)
}

/// Composition in the matrix sense: `S(compose(a, b)) = S(a) · S(b)`, so
/// `b` is applied first.
pub fn compose(a: &WarpParams, b: &WarpParams) -> Result<WarpParams> {
    if a.model != b.model {
        return Err(Error::InvalidArgument(format!(
            "cannot compose {} with {}",
            a.model, b.model
        )));
    }
    a.check_domain()?;
    b.check_domain()?;
    let n = a.normalized_matrix() * b.normalized_matrix();
    project_normalized(&n, a.model, 1.0, 1.0)
}

pub fn invert(h: &WarpParams) -> Result<WarpParams> {
    h.check_domain()?;
    let n = h
        .normalized_matrix()
        .try_inverse()
        .ok_or_else(|| Error::ParameterDomain("warp is not invertible".into()))?;
    project_normalized(&n, h.model, 1.0, 1.0)
}

/// `∂W(x; h)/∂h` at pixel `(x, y)`: one `[dx, dy]` row per active
/// coordinate, in [`WarpParams::to_vec`] order.
pub fn point_jacobian(h: &WarpParams, x: f64, y: f64, width: usize, height: usize) -> Vec<[f64; 2]> {
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    let (u, v) = ((x - hw) / hw, (y - hh) / hh);
    let (sn, c) = h.theta.sin_cos();
    let k = 1.0 + h.s;
    let ds = [hw * (c * u - sn * v), hh * (sn * u + c * v)];
    let dtx = [hw, 0.0];
    let dty = [0.0, hh];
    let dth = [hw * k * (-sn * u - c * v), hh * k * (c * u - sn * v)];
    match h.model {
        WarpModel::Translation => vec![dtx, dty],
        WarpModel::Scale => vec![ds],
        WarpModel::PseudoSimilarity => vec![ds, dtx, dty],
        WarpModel::Similarity => vec![ds, dtx, dty, dth],
    }
}

/// `∂ invert(h) / ∂h` as a row-major `dof × dof` matrix (row = output).
pub fn invert_jacobian(h: &WarpParams) -> Vec<Vec<f64>> {
    let k = 1.0 + h.s;
    let (sn, c) = h.theta.sin_cos();
    let (tx, ty) = (h.tx, h.ty);
    match h.model {
        WarpModel::Translation => vec![vec![-1.0, 0.0], vec![0.0, -1.0]],
        WarpModel::Scale => vec![vec![-1.0 / (k * k)]],
        WarpModel::PseudoSimilarity => vec![
            vec![-1.0 / (k * k), 0.0, 0.0],
            vec![tx / (k * k), -1.0 / k, 0.0],
            vec![ty / (k * k), 0.0, -1.0 / k],
        ],
        WarpModel::Similarity => {
            let px = c * tx + sn * ty;
            let py = -sn * tx + c * ty;
            vec![
                vec![-1.0 / (k * k), 0.0, 0.0, 0.0],
                vec![px / (k * k), -c / k, -sn / k, -py / k],
                vec![py / (k * k), sn / k, -c / k, px / k],
                vec![0.0, 0.0, 0.0, -1.0],
            ]
        }
    }
}

impl WarpParams {
    /// Whether the model carries a scale coordinate.
    pub fn has_scale(&self) -> bool {
        self.model.has_scale()
    }

    pub fn has_translation(&self) -> bool {
        self.model.has_translation()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn oracle_map(h: &WarpParams, w: f64, hgt: f64, x: f64, y: f64) -> (f64, f64) {
        // explicit M · S · M⁻¹ · (x, y, 1)
        let m = [[w / 2.0, 0.0, w / 2.0], [0.0, hgt / 2.0, hgt / 2.0], [0.0, 0.0, 1.0]];
        let mi = [[2.0 / w, 0.0, -1.0], [0.0, 2.0 / hgt, -1.0], [0.0, 0.0, 1.0]];
        let k = 1.0 + h.s();
        let s = [[k, 0.0, h.tx()], [0.0, k, h.ty()], [0.0, 0.0, 1.0]];
        let mul = |a: &[[f64; 3]; 3], p: [f64; 3]| -> [f64; 3] {
            let mut r = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    r[i] += a[i][j] * p[j];
                }
            }
            r
        };
        let p = mul(&m, mul(&s, mul(&mi, [x, y, 1.0])));
        (p[0] / p[2], p[1] / p[2])
    }

    #[test]
    fn zero_warp_is_identity_matrix() {
        let w = params_to_pixel_warp(&WarpParams::identity(WarpModel::PseudoSimilarity), 128, 128)
            .unwrap();
        assert_eq!(*w.matrix(), Matrix3::identity());
    }

    #[test]
    fn pixel_warp_matches_matrix_product() {
        let h = WarpParams::pseudo_similarity(0.0, 0.2, 0.0);
        let w = params_to_pixel_warp(&h, 128, 128).unwrap();
        let (x, y) = w.apply(64.0, 64.0);
        let (ox, oy) = oracle_map(&h, 128.0, 128.0, 64.0, 64.0);
        assert_relative_eq!(x, ox, epsilon = 1e-12);
        assert_relative_eq!(x, 76.8, epsilon = 1e-12);
        assert_relative_eq!(y, oy, epsilon = 1e-12);
        assert_relative_eq!(y, 64.0, epsilon = 1e-12);

        let h = WarpParams::pseudo_similarity(0.1, 0.0, 0.0);
        let w = params_to_pixel_warp(&h, 128, 128).unwrap();
        let (x, y) = w.apply(128.0, 128.0);
        assert_relative_eq!(x, 134.4, epsilon = 1e-12);
        assert_relative_eq!(y, 134.4, epsilon = 1e-12);
        let (cx, cy) = w.apply(64.0, 64.0);
        assert_eq!((cx, cy), (64.0, 64.0));
    }

    #[test]
    fn rejects_non_invertible_scale() {
        let h = WarpParams::pseudo_similarity(-1.0, 0.0, 0.0);
        assert!(matches!(
            params_to_pixel_warp(&h, 64, 64),
            Err(Error::ParameterDomain(_))
        ));
        assert!(matches!(invert(&WarpParams::scale(-1.5)), Err(Error::ParameterDomain(_))));
    }

    #[test]
    fn compose_examples() {
        let a = WarpParams::pseudo_similarity(0.0, 0.1, 0.0);
        let b = WarpParams::pseudo_similarity(0.0, 0.05, 0.0);
        let c = compose(&a, &b).unwrap();
        assert_relative_eq!(c.tx(), 0.15, epsilon = 1e-15);
        assert_eq!(c.ty(), 0.0);
        let a = WarpParams::pseudo_similarity(0.1, 0.0, 0.0);
        let c = compose(&a, &a).unwrap();
        assert_relative_eq!(c.s(), 0.21, epsilon = 1e-14);
        let h = WarpParams::pseudo_similarity(0.03, -0.2, 0.11);
        let id = WarpParams::identity(WarpModel::PseudoSimilarity);
        let c = compose(&h, &id).unwrap();
        assert_relative_eq!(c.s(), h.s(), epsilon = 1e-15);
        assert_relative_eq!(c.tx(), h.tx(), epsilon = 1e-15);
        assert_relative_eq!(c.ty(), h.ty(), epsilon = 1e-15);
    }

    #[test]
    fn invert_examples() {
        let id = WarpParams::identity(WarpModel::PseudoSimilarity);
        assert_eq!(invert(&id).unwrap().to_vec(), vec![0.0, 0.0, 0.0]);
        let h = invert(&WarpParams::pseudo_similarity(0.0, 0.3, -0.1)).unwrap();
        assert_relative_eq!(h.tx(), -0.3, epsilon = 1e-15);
        assert_relative_eq!(h.ty(), 0.1, epsilon = 1e-15);
        let h = invert(&WarpParams::pseudo_similarity(0.1, 0.0, 0.0)).unwrap();
        assert_relative_eq!(h.s(), 1.0 / 1.1 - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mixed_models_do_not_compose() {
        let a = WarpParams::translation(0.1, 0.0);
        let b = WarpParams::scale(0.1);
        assert!(compose(&a, &b).is_err());
    }

    #[test]
    fn warp_points_examples() {
        let w = PixelWarp::identity(128, 128);
        assert_eq!(warp_points(&w, &[[10.0, 20.0]]), vec![[10.0, 20.0]]);
        let w = params_to_pixel_warp(&WarpParams::scale(0.1), 128, 128).unwrap();
        assert_eq!(warp_points(&w, &[[64.0, 64.0]]), vec![[64.0, 64.0]]);
    }

    #[test]
    fn perspective_perturbation_projects_near_unperturbed() {
        let h = WarpParams::pseudo_similarity(0.08, -0.05, 0.12);
        // perturb the perspective row of the normalized PS matrix
        let mut s = h.normalized_matrix();
        s[(2, 0)] += 1e-6;
        s[(2, 1)] -= 1e-6;
        let (m, m_inv) = normalization(128, 128);
        let wp = PixelWarp::new(m * s * m_inv, 128, 128).unwrap();
        let fit = matrix_to_params(&wp, WarpModel::PseudoSimilarity).unwrap();

        // brute-force grid search with successive refinement
        let corners = [[0.0, 0.0], [128.0, 0.0], [128.0, 128.0], [0.0, 128.0]];
        let target = warp_points(&wp, &corners);
        let cost = |p: [f64; 3]| -> f64 {
            let cand = WarpParams::pseudo_similarity(p[0], p[1], p[2]);
            let cw = params_to_pixel_warp(&cand, 128, 128).unwrap();
            warp_points(&cw, &corners)
                .iter()
                .zip(&target)
                .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
                .sum()
        };
        let mut best = [0.0, 0.0, 0.0];
        let mut step = 0.02;
        for _ in 0..12 {
            let center = best;
            let mut best_cost = f64::INFINITY;
            for i in -6..=6 {
                for j in -6..=6 {
                    for k in -6..=6 {
                        let p = [
                            center[0] + i as f64 * step,
                            center[1] + j as f64 * step,
                            center[2] + k as f64 * step,
                        ];
                        let c = cost(p);
                        if c < best_cost {
                            best_cost = c;
                            best = p;
                        }
                    }
                }
            }
            step /= 4.0;
        }
        assert!((fit.s() - best[0]).abs() < 1e-6);
        assert!((fit.tx() - best[1]).abs() < 1e-6);
        assert!((fit.ty() - best[2]).abs() < 1e-6);
        assert!((fit.s() - h.s()).abs() < 1e-4);
        assert!((fit.tx() - h.tx()).abs() < 1e-4);
        assert!((fit.ty() - h.ty()).abs() < 1e-4);
    }

    #[test]
    fn point_jacobian_matches_finite_differences() {
        let h = WarpParams::similarity(0.07, 0.1, -0.2, 0.3);
        let (x, y) = (17.0, 90.0);
        let jac = point_jacobian(&h, x, y, 160, 120);
        let base = h.to_vec();
        for (i, row) in jac.iter().enumerate() {
            let eps = 1e-6;
            let mut hp = base.clone();
            let mut hm = base.clone();
            hp[i] += eps;
            hm[i] -= eps;
            let wp = params_to_pixel_warp(&WarpParams::from_slice(h.model(), &hp).unwrap(), 160, 120).unwrap();
            let wm = params_to_pixel_warp(&WarpParams::from_slice(h.model(), &hm).unwrap(), 160, 120).unwrap();
            let (xp, yp) = wp.apply(x, y);
            let (xm, ym) = wm.apply(x, y);
            assert_relative_eq!(row[0], (xp - xm) / (2.0 * eps), epsilon = 1e-5, max_relative = 1e-7);
            assert_relative_eq!(row[1], (yp - ym) / (2.0 * eps), epsilon = 1e-5, max_relative = 1e-7);
        }
    }

    #[test]
    fn invert_jacobian_matches_finite_differences() {
        for h in [
            WarpParams::translation(0.2, -0.1),
            WarpParams::scale(0.3),
            WarpParams::pseudo_similarity(-0.2, 0.15, 0.05),
            WarpParams::similarity(0.1, -0.3, 0.2, -0.4),
        ] {
            let jac = invert_jacobian(&h);
            let base = h.to_vec();
            for j in 0..base.len() {
                let eps = 1e-6;
                let mut hp = base.clone();
                let mut hm = base.clone();
                hp[j] += eps;
                hm[j] -= eps;
                let ip = invert(&WarpParams::from_slice(h.model(), &hp).unwrap()).unwrap().to_vec();
                let im = invert(&WarpParams::from_slice(h.model(), &hm).unwrap()).unwrap().to_vec();
                for i in 0..base.len() {
                    let fd = (ip[i] - im[i]) / (2.0 * eps);
                    assert_relative_eq!(jac[i][j], fd, epsilon = 1e-7);
                }
            }
        }
    }
}
