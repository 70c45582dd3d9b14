//! Training objectives: supervised parameter regression, photometric
//! distances with regularizers, and the teacher/student losses. Every
//! loss returns its value together with an analytic gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imaging::{
    gaussian_kernel, preprocess, separable_filter, ssim_stats, ssim_value, warp_jacobian, ImagePlane,
    Preprocess, SSIM_C1, SSIM_C2, SSIM_RADIUS, SSIM_SIGMA,
};
use crate::warp::{invert, invert_jacobian, WarpParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    L1,
    Charbonnier,
    Ssim,
    Robust,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::L1 => "l1",
            MetricKind::Charbonnier => "charbonnier",
            MetricKind::Ssim => "ssim",
            MetricKind::Robust => "robust",
        }
    }
}

/// A photometric distance and its hyperparameters. `alpha` means the
/// exponent for Charbonnier, the L1 blend weight for SSIM and the latent
/// shape for Robust; it is unused by L1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub alpha: f64,
    pub c: f64,
    pub eps: f64,
    pub eps_alpha: f64,
}

impl MetricSpec {
    pub fn l1() -> Self {
        MetricSpec {
            kind: MetricKind::L1,
            alpha: 0.0,
            c: 1.0,
            eps: 1e-3,
            eps_alpha: 1e-3,
        }
    }

    pub fn charbonnier() -> Self {
        MetricSpec {
            kind: MetricKind::Charbonnier,
            alpha: 0.45,
            ..Self::l1()
        }
    }

    pub fn ssim() -> Self {
        MetricSpec {
            kind: MetricKind::Ssim,
            alpha: 0.15,
            ..Self::l1()
        }
    }

    pub fn robust() -> Self {
        MetricSpec {
            kind: MetricKind::Robust,
            alpha: 0.0,
            c: 0.1,
            ..Self::l1()
        }
    }

    pub fn default_for(kind: MetricKind) -> Self {
        match kind {
            MetricKind::L1 => Self::l1(),
            MetricKind::Charbonnier => Self::charbonnier(),
            MetricKind::Ssim => Self::ssim(),
            MetricKind::Robust => Self::robust(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::InvalidArgument(format!("metric scale c = {} must be > 0", self.c)));
        }
        if !(self.eps > 0.0) || !(self.eps_alpha >= 0.0) {
            return Err(Error::InvalidArgument("metric eps must be > 0".into()));
        }
        if self.kind == MetricKind::Ssim && !(self.alpha >= 0.0) {
            return Err(Error::InvalidArgument("ssim blend alpha must be >= 0".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("metric alpha must be finite".into()));
        }
        Ok(())
    }

    /// Shape constants `(b, d)` of the robust loss.
    pub fn robust_shape(&self) -> (f64, f64) {
        let e = self.alpha.exp();
        let alpha_hat = if e.is_infinite() {
            2.0 - 2.0 * self.eps_alpha
        } else {
            (2.0 - 2.0 * self.eps_alpha) * e / (e + 1.0)
        };
        let b = (2.0 - alpha_hat).abs() + self.eps;
        // alpha_hat is a scaled logistic and never negative, so the second
        // branch is unreachable; kept to mirror the definition.
        let d = if alpha_hat >= 0.0 {
            alpha_hat + self.eps
        } else {
            alpha_hat - self.eps
        };
        (b, d)
    }
}

/// Joint mask of two images, optionally restricted further.
fn joint_mask(a: &ImagePlane, b: &ImagePlane, restrict: Option<&[bool]>) -> Vec<bool> {
    a.mask()
        .iter()
        .zip(b.mask())
        .enumerate()
        .map(|(i, (x, y))| *x && *y && restrict.is_none_or(|r| r[i]))
        .collect()
}

/// Mean distance between `a` and `b` over jointly valid pixels (and all
/// channels), with the per-element gradient with respect to `a`.
pub fn photometric_distance(a: &ImagePlane, b: &ImagePlane, m: &MetricSpec) -> Result<(f64, Vec<f64>)> {
    photometric_distance_masked(a, b, m, None)
}

/// [`photometric_distance`] evaluated only where `restrict` is true.
pub fn photometric_distance_masked(
    a: &ImagePlane,
    b: &ImagePlane,
    m: &MetricSpec,
    restrict: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    a.check_same_shape(b)?;
    m.validate()?;
    let mask = joint_mask(a, b, restrict);
    let n_valid = mask.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::DegenerateInput("no jointly valid pixels".into()));
    }
    let c = a.channels();
    let n = (n_valid * c) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut grad = vec![0.0; ad.len()];
    let mut value = 0.0;

    let pointwise = |f: &dyn Fn(f64) -> (f64, f64), grad: &mut Vec<f64>| -> f64 {
        let mut acc = 0.0;
        for (p, &valid) in mask.iter().enumerate() {
            if !valid {
                continue;
            }
            for ch in 0..c {
                let i = p * c + ch;
                let (v, g) = f(ad[i] - bd[i]);
                acc += v;
                grad[i] = g / n;
            }
        }
        acc / n
    };

    match m.kind {
        MetricKind::L1 => {
            value = pointwise(&|r| (r.abs(), sign(r)), &mut grad);
        }
        MetricKind::Charbonnier => {
            let (alpha, e2) = (m.alpha, m.eps * m.eps);
            value = pointwise(
                &|r| {
                    let q = r * r + e2;
                    (q.powf(alpha), 2.0 * alpha * r * q.powf(alpha - 1.0))
                },
                &mut grad,
            );
        }
        MetricKind::Robust => {
            let (b, d) = m.robust_shape();
            let c2 = m.c * m.c;
            value = pointwise(
                &|r| {
                    let q = r * r / (c2 * b) + 1.0;
                    ((b / d) * (q.powf(d / 2.0) - 1.0), (r / c2) * q.powf(d / 2.0 - 1.0))
                },
                &mut grad,
            );
        }
        MetricKind::Ssim => {
            let l1 = pointwise(&|r| (r.abs(), sign(r)), &mut grad);
            for g in grad.iter_mut() {
                *g *= m.alpha;
            }
            value += m.alpha * l1;
            let (w, h) = (a.width(), a.height());
            let valid: Vec<f64> = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let kernel = gaussian_kernel(SSIM_SIGMA, SSIM_RADIUS);
            for ch in 0..c {
                let ca: Vec<f64> = (0..w * h).map(|i| ad[i * c + ch]).collect();
                let cb: Vec<f64> = (0..w * h).map(|i| bd[i * c + ch]).collect();
                let st = ssim_stats(&ca, &cb, &valid, w, h);
                // dS/dmu_a, dS/dvar_a, dS/dcov pre-divided by the window norm
                let mut fa = vec![0.0; w * h];
                let mut fb = vec![0.0; w * h];
                let mut fbm = vec![0.0; w * h];
                let mut fc = vec![0.0; w * h];
                let mut fcm = vec![0.0; w * h];
                for i in 0..w * h {
                    if !mask[i] {
                        continue;
                    }
                    let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
                    let (va, vb, cv) = (st.var_a[i], st.var_b[i], st.cov[i]);
                    let s = ssim_value(ma, mb, va, vb, cv);
                    value += (1.0 - s) / 2.0 / n;
                    let n1 = 2.0 * ma * mb + SSIM_C1;
                    let n2 = 2.0 * cv + SSIM_C2;
                    let d1 = ma * ma + mb * mb + SSIM_C1;
                    let d2 = va + vb + SSIM_C2;
                    let ds_dmu = s * (2.0 * mb / n1 - 2.0 * ma / d1);
                    let ds_dvar = -s / d2;
                    let ds_dcov = 2.0 * s / n2;
                    let z = st.norm[i];
                    fa[i] = ds_dmu / z;
                    fb[i] = ds_dvar / z;
                    fbm[i] = ds_dvar * ma / z;
                    fc[i] = ds_dcov / z;
                    fcm[i] = ds_dcov * mb / z;
                }
                let [ga, gb, gbm, gc, gcm] =
                    [fa, fb, fbm, fc, fcm].map(|f| separable_filter(&f, w, h, &kernel));
                for p in 0..w * h {
                    if !mask[p] {
                        continue;
                    }
                    let dsum = ga[p] + 2.0 * ca[p] * gb[p] - 2.0 * gbm[p] + cb[p] * gc[p] - gcm[p];
                    grad[p * c + ch] += -0.5 * dsum / n;
                }
            }
        }
    }
    Ok((value, grad))
}

#[inline]
fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One weighted term of an unsupervised objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub weight: f64,
    pub metric: MetricSpec,
    pub input: Preprocess,
}

/// Metric term plus weighted regularizers, written in shorthand as e.g.
/// `ssim(raw) + 0.1*l1(highpass)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub metric: LossTerm,
    pub regularizers: Vec<LossTerm>,
}

impl LossSpec {
    pub fn new(metric: MetricSpec, input: Preprocess) -> Self {
        LossSpec {
            metric: LossTerm {
                weight: 1.0,
                metric,
                input,
            },
            regularizers: Vec::new(),
        }
    }

    pub fn with_regularizer(mut self, weight: f64, metric: MetricSpec, input: Preprocess) -> Self {
        self.regularizers.push(LossTerm { weight, metric, input });
        self
    }

    pub fn terms(&self) -> impl Iterator<Item = &LossTerm> {
        std::iter::once(&self.metric).chain(self.regularizers.iter())
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.terms() {
            t.metric.validate()?;
            if !(t.weight >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {} must be >= 0",
                    t.weight
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            if t.weight != 1.0 {
                write!(f, "{}*", t.weight)?;
            }
            let d = MetricSpec::default_for(t.metric.kind);
            write!(f, "{}({}", t.metric.kind.name(), t.input)?;
            if t.metric.alpha != d.alpha {
                write!(f, ", alpha={}", t.metric.alpha)?;
            }
            if t.metric.c != d.c {
                write!(f, ", c={}", t.metric.c)?;
            }
            if t.metric.eps != d.eps {
                write!(f, ", eps={}", t.metric.eps)?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    /// `term (+ term)*` where `term = [weight '*'] name '(' mode (',' key '=' value)* ')'`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("loss `{s}`: {msg}"));
        let mut terms = Vec::new();
        for raw in split_top_level(s) {
            let raw = raw.trim();
            if raw.is_empty() {
                return Err(bad("empty term".into()));
            }
            let (weight, call) = match raw.split_once('*') {
                Some((w, rest)) if !w.contains('(') => (
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("bad weight `{}`", w.trim())))?,
                    rest.trim(),
                ),
                _ => (1.0, raw),
            };
            let open = call.find('(').ok_or_else(|| bad(format!("expected `(` in `{call}`")))?;
            if !call.ends_with(')') {
                return Err(bad(format!("expected `)` at end of `{call}`")));
            }
            let name = call[..open].trim().to_ascii_lowercase();
            let kind = match name.as_str() {
                "l1" => MetricKind::L1,
                "charbonnier" | "chab" => MetricKind::Charbonnier,
                "ssim" => MetricKind::Ssim,
                "robust" => MetricKind::Robust,
                other => return Err(bad(format!("unknown metric `{other}`"))),
            };
            let mut metric = MetricSpec::default_for(kind);
            let mut args = call[open + 1..call.len() - 1].split(',');
            let input: Preprocess = args.next().unwrap_or("raw").trim().parse()?;
            for kv in args {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=value, got `{}`", kv.trim())))?;
                let v: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad number `{}`", v.trim())))?;
                match k.trim() {
                    "alpha" => metric.alpha = v,
                    "c" => metric.c = v,
                    "eps" => metric.eps = v,
                    "eps_alpha" => metric.eps_alpha = v,
                    other => return Err(bad(format!("unknown metric key `{other}`"))),
                }
            }
            terms.push(LossTerm { weight, metric, input });
        }
        let mut it = terms.into_iter();
        let metric = it.next().ok_or_else(|| bad("no metric term".into()))?;
        let spec = LossSpec {
            metric,
            regularizers: it.collect(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0usize);
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            // a `+` directly after `e`/`E` is an exponent sign
            '+' if depth == 0 && !s[..i].ends_with(['e', 'E']) => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn params_rows(a: &[WarpParams], b: &[WarpParams]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    for (x, y) in a.iter().zip(b) {
        if x.model() != y.model() {
            return Err(Error::InvalidArgument(format!(
                "cannot compare {} with {} parameters",
                x.model(),
                y.model()
            )));
        }
    }
    Ok((a.iter().map(|p| p.to_vec()).collect(), b.iter().map(|p| p.to_vec()).collect()))
}

/// Batch mean of `‖pred − truth‖₂` over raw coordinate rows, with the
/// gradient with respect to each prediction row.
pub fn l2_rows(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    let n = preds.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::ShapeMismatch(format!("row of {} vs {}", p.len(), t.len())));
        }
        let d: Vec<f64> = p.iter().zip(t).map(|(x, y)| x - y).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        value += norm;
        grads.push(if norm > 0.0 {
            d.iter().map(|v| v / norm / n).collect()
        } else {
            vec![0.0; d.len()]
        });
    }
    Ok((value / n, grads))
}

/// Batch mean of `‖pred − truth‖₂` and its gradient with respect to each
/// prediction.
pub fn loss_supervised(preds: &[WarpParams], truths: &[WarpParams]) -> Result<(f64, Vec<Vec<f64>>)> {
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    let (p, t) = params_rows(preds, truths)?;
    l2_rows(&p, &t)
}

/// Gradients of the three-term teacher/student objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads {
    pub teacher: Vec<Vec<f64>>,
    pub student: Vec<Vec<f64>>,
}

/// [`loss_projection`] over raw coordinate rows.
pub fn projection_rows(
    truths: &[Vec<f64>],
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    lambdas: (f64, f64, f64),
) -> Result<(f64, ProjectionGrads)> {
    let (l1, l2, l3) = lambdas;
    let (v1, g_t1) = l2_rows(teacher, truths)?;
    let (v2, g_s2) = l2_rows(student, truths)?;
    let (v3, g_s3) = l2_rows(student, teacher)?;
    let teacher_g = g_t1
        .iter()
        .zip(&g_s3)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| l1 * x - l3 * y).collect())
        .collect();
    let student_g = g_s2
        .iter()
        .zip(&g_s3)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| l2 * x + l3 * y).collect())
        .collect();
    Ok((
        l1 * v1 + l2 * v2 + l3 * v3,
        ProjectionGrads {
            teacher: teacher_g,
            student: student_g,
        },
    ))
}

/// `λ1·Ls(truth, teacher) + λ2·Ls(truth, student) + λ3·Ls(teacher, student)`.
pub fn loss_projection(
    truths: &[WarpParams],
    teacher: &[WarpParams],
    student: &[WarpParams],
    lambdas: (f64, f64, f64),
) -> Result<(f64, ProjectionGrads)> {
    if truths.len() != teacher.len() || truths.len() != student.len() {
        return Err(Error::ShapeMismatch("projection batches differ in length".into()));
    }
    let (t, h) = params_rows(truths, teacher)?;
    let (_, s) = params_rows(truths, student)?;
    projection_rows(&t, &h, &s, lambdas)
}

/// `Ls(teacher, student)` with the gradient on the student only.
pub fn loss_distill(teacher: &[WarpParams], student: &[WarpParams]) -> Result<(f64, Vec<Vec<f64>>)> {
    loss_supervised(student, teacher)
}

/// Photometric objective of warping `p1` by `h` onto `p2`, with the
/// gradient with respect to the active coordinates of `h`.
pub fn loss_unsupervised(
    p1: &ImagePlane,
    p2: &ImagePlane,
    h: &WarpParams,
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>)> {
    loss_unsupervised_masked(p1, p2, h, spec, None)
}

/// [`loss_unsupervised`] restricted to pixels where `restrict` is true,
/// which freezes the evaluation set across nearby `h`.
pub fn loss_unsupervised_masked(
    p1: &ImagePlane,
    p2: &ImagePlane,
    h: &WarpParams,
    spec: &LossSpec,
    restrict: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    if p1.width() != p2.width() || p1.height() != p2.height() {
        return Err(Error::ShapeMismatch("unsupervised pair differs in size".into()));
    }
    // backward warp: out(x) = p1(W(h)^-1 x) = p1(W(g) x) with g = h^-1
    let g = invert(h)?;
    let dg_dh = invert_jacobian(h);
    let dof = h.model().dof();
    let mut value = 0.0;
    let mut grad_g = vec![0.0; dof];
    for term in spec.terms() {
        if term.weight == 0.0 {
            continue;
        }
        let a = preprocess(p1, term.input);
        let b = preprocess(p2, term.input);
        let jac = warp_jacobian(&a, &g)?;
        let mut warped = ImagePlane::new(a.width(), a.height(), a.channels(), jac.values.clone())?;
        warped.set_mask(jac.mask.clone())?;
        let (v, gpix) = photometric_distance_masked(&warped, &b, &term.metric, restrict)?;
        value += term.weight * v;
        let c = a.channels();
        for p in 0..a.width() * a.height() {
            if !jac.mask[p] {
                continue;
            }
            for ch in 0..c {
                let gp = gpix[p * c + ch];
                if gp == 0.0 {
                    continue;
                }
                for (k, r) in jac.row(p, ch).iter().enumerate() {
                    grad_g[k] += term.weight * gp * r;
                }
            }
        }
    }
    let grad_h = (0..dof)
        .map(|j| (0..dof).map(|i| grad_g[i] * dg_dh[i][j]).sum())
        .collect();
    Ok((value, grad_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::warp_image;
    use crate::warp::WarpModel;
    use approx::assert_relative_eq;

    fn tex(w: usize, h: usize, phase: f64) -> ImagePlane {
        ImagePlane::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            (0.5 + 0.25 * (0.23 * x + phase).sin() * (0.19 * y).cos() + 0.1 * (0.05 * (x - y)).cos())
                .clamp(0.0, 1.0)
        })
    }

    #[test]
    fn zero_residual_values() {
        let a = tex(24, 24, 0.0);
        for kind in [MetricKind::L1, MetricKind::Ssim, MetricKind::Robust] {
            let (v, _) = photometric_distance(&a, &a, &MetricSpec::default_for(kind)).unwrap();
            assert!(v.abs() < 1e-12, "{kind:?} {v}");
        }
        let m = MetricSpec::charbonnier();
        let (v, _) = photometric_distance(&a, &a, &m).unwrap();
        assert_relative_eq!(v, (1e-6f64).powf(0.45), max_relative = 1e-12);
    }

    #[test]
    fn l1_of_unit_difference() {
        let a = ImagePlane::constant(8, 8, 1, 1.0);
        let b = ImagePlane::constant(8, 8, 1, 0.0);
        let (v, _) = photometric_distance(&a, &b, &MetricSpec::l1()).unwrap();
        assert_relative_eq!(v, 1.0);
    }

    #[test]
    fn robust_pseudo_huber_point() {
        let a = ImagePlane::constant(1, 1, 1, 1.0);
        let b = ImagePlane::constant(1, 1, 1, 0.0);
        let m = MetricSpec {
            kind: MetricKind::Robust,
            alpha: 0.0,
            c: 1.0,
            eps: 1e-12,
            eps_alpha: 0.0,
        };
        let (v, _) = photometric_distance(&a, &b, &m).unwrap();
        assert_relative_eq!(v, 2f64.sqrt() - 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_identical_is_zero_for_any_alpha() {
        let a = tex(20, 20, 0.4);
        for alpha in [0.0, 0.15, 3.0] {
            let m = MetricSpec {
                alpha,
                ..MetricSpec::ssim()
            };
            assert!(photometric_distance(&a, &a, &m).unwrap().0.abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let a = ImagePlane::constant(4, 4, 1, 0.5);
        let mut b = a.clone();
        b.set_mask(vec![false; 16]).unwrap();
        assert!(matches!(
            photometric_distance(&a, &b, &MetricSpec::l1()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn supervised_examples() {
        let t = WarpParams::pseudo_similarity(0.1, 0.2, -0.1);
        assert_eq!(loss_supervised(&[t], &[t]).unwrap().0, 0.0);
        let p = WarpParams::pseudo_similarity(0.2, 0.2, -0.1);
        assert_relative_eq!(loss_supervised(&[p], &[t]).unwrap().0, 0.1, epsilon = 1e-15);
        let z = WarpParams::identity(WarpModel::PseudoSimilarity);
        let a = WarpParams::pseudo_similarity(0.0, 0.1, 0.0);
        let b = WarpParams::pseudo_similarity(0.0, 0.0, 0.3);
        assert_relative_eq!(loss_supervised(&[a, b], &[z, z]).unwrap().0, 0.2, epsilon = 1e-15);
        let (_, g) = loss_supervised(&[t], &[t]).unwrap();
        assert_eq!(g[0], vec![0.0; 3]);
    }

    #[test]
    fn projection_and_distill_examples() {
        let t = WarpParams::pseudo_similarity(0.05, 0.1, -0.1);
        let (v, _) = loss_projection(&[t], &[t], &[t], (1.0, 1.0, 0.1)).unwrap();
        assert_eq!(v, 0.0);
        let s = WarpParams::pseudo_similarity(0.05, 0.1 + 0.06, -0.1 + 0.08);
        let (v, _) = loss_projection(&[t], &[t], &[s], (1.0, 1.0, 0.1)).unwrap();
        assert_relative_eq!(v, 0.11, epsilon = 1e-12);
        let u = WarpParams::pseudo_similarity(0.0, 0.0, 0.02);
        let (a, _) = loss_projection(&[t], &[s], &[u], (0.7, 0.7, 0.3)).unwrap();
        let (b, _) = loss_projection(&[t], &[u], &[s], (0.7, 0.7, 0.3)).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-15);

        assert_eq!(loss_distill(&[t], &[t]).unwrap().0, 0.0);
        let s = WarpParams::pseudo_similarity(0.05, 0.1 + 0.15, -0.1 - 0.2);
        let (v, g) = loss_distill(&[t], &[s]).unwrap();
        assert_relative_eq!(v, 0.25, epsilon = 1e-12);
        assert_relative_eq!(g[0][1], 0.6, epsilon = 1e-12);
        assert_relative_eq!(g[0][2], -0.8, epsilon = 1e-12);
    }

    #[test]
    fn unsupervised_on_exact_pair_hits_interpolation_floor() {
        let big = tex(96, 96, 0.3);
        let h = WarpParams::pseudo_similarity(0.04, 0.05, -0.03);
        let p2 = warp_image(&big, &h).unwrap();
        let spec = LossSpec::new(MetricSpec::l1(), Preprocess::Raw);
        let (v, _) = loss_unsupervised(&big, &p2, &h, &spec).unwrap();
        assert!(v <= 2.0 / 255.0, "{v}");
        let with_zero = spec.clone().with_regularizer(0.0, MetricSpec::ssim(), Preprocess::HighPass);
        assert_eq!(loss_unsupervised(&big, &p2, &h, &with_zero).unwrap().0, v);
    }

    #[test]
    fn shorthand_round_trip() {
        let spec: LossSpec = "ssim(raw) + 0.1*l1(highpass)".parse().unwrap();
        assert_eq!(spec.metric.metric.kind, MetricKind::Ssim);
        assert_eq!(spec.regularizers.len(), 1);
        assert_eq!(spec.regularizers[0].weight, 0.1);
        assert_eq!(spec.regularizers[0].input, Preprocess::HighPass);
        let again: LossSpec = spec.to_string().parse().unwrap();
        assert_eq!(again, spec);
        let r: LossSpec = "robust(gray, alpha=1.5, c=0.05) + 5.0*l1(corner)".parse().unwrap();
        assert_eq!(r.metric.metric.alpha, 1.5);
        assert_eq!(r.metric.metric.c, 0.05);
        assert!("ssim(raw) + l2(gray)".parse::<LossSpec>().is_err());
        assert!("".parse::<LossSpec>().is_err());
        assert!("robust(gray, c=0)".parse::<LossSpec>().is_err());
    }

    fn fd_check_metric(m: MetricSpec) {
        let a = tex(18, 16, 0.1);
        let mut b = tex(18, 16, 0.9);
        let mut mask = vec![true; 18 * 16];
        mask[5] = false;
        mask[100] = false;
        b.set_mask(mask).unwrap();
        let (_, g) = photometric_distance(&a, &b, &m).unwrap();
        let eps = 1e-6;
        for &i in &[0usize, 17, 40, 77, 150, 200, 287] {
            let mut ap = a.clone();
            ap.data_mut()[i] += eps;
            let mut am = a.clone();
            am.data_mut()[i] -= eps;
            let fd = (photometric_distance(&ap, &b, &m).unwrap().0 - photometric_distance(&am, &b, &m).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "{:?} pixel {i}: fd {fd} analytic {}", m.kind, g[i]);
        }
    }

    #[test]
    fn metric_gradients_match_finite_differences() {
        fd_check_metric(MetricSpec::l1());
        fd_check_metric(MetricSpec::charbonnier());
        fd_check_metric(MetricSpec::ssim());
        fd_check_metric(MetricSpec::robust());
        fd_check_metric(MetricSpec { alpha: 1.3, c: 0.3, ..MetricSpec::robust() });
        fd_check_metric(MetricSpec { alpha: 0.0, ..MetricSpec::ssim() });
    }

    #[test]
    fn unsupervised_gradient_matches_finite_differences() {
        let p1 = tex(40, 40, 0.2);
        let truth = WarpParams::pseudo_similarity(0.05, 0.06, -0.04);
        let p2 = warp_image(&tex(40, 40, 0.5), &truth).unwrap();
        let h = WarpParams::pseudo_similarity(0.02, 0.03, 0.01);
        let spec: LossSpec = "charbonnier(raw) + 0.5*ssim(gray)".parse().unwrap();
        let frozen: Vec<bool> = {
            let g = invert(&h).unwrap();
            let j = warp_jacobian(&p1, &g).unwrap();
            let inner = |i: usize| {
                let (x, y) = ((i % 40) as f64, (i / 40) as f64);
                x > 4.0 && x < 35.0 && y > 4.0 && y < 35.0
            };
            j.mask.iter().zip(p2.mask()).enumerate().map(|(i, (a, b))| *a && *b && inner(i)).collect()
        };
        let (_, g) = loss_unsupervised_masked(&p1, &p2, &h, &spec, Some(&frozen)).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut hp = h.to_vec();
            hp[k] += eps;
            let mut hm = h.to_vec();
            hm[k] -= eps;
            let hp = WarpParams::from_slice(h.model(), &hp).unwrap();
            let hm = WarpParams::from_slice(h.model(), &hm).unwrap();
            let fd = (loss_unsupervised_masked(&p1, &p2, &hp, &spec, Some(&frozen)).unwrap().0
                - loss_unsupervised_masked(&p1, &p2, &hm, &spec, Some(&frozen)).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "coord {k}: fd {fd} analytic {}", g[k]);
        }
    }
}
