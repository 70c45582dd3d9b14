//! Visual-inertial dead reckoning: Madgwick attitude filtering, rotation
//! compensation of frame pairs, pixel-to-metric velocity scaling and
//! trajectory alignment for evaluation.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::estimator::{cascade_estimate_counted, CascadeEstimator};
use crate::imaging::{sample_at, warp_image, ImagePlane};
use crate::sim::{camera_to_body, AltSample, CameraIntrinsics, FrameSource, ImuSample, SensorLog, TrajectorySample};
use crate::warp::{compose, PixelWarp, WarpParams};

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeState {
    /// World ← body.
    pub q: UnitQuaternion<f64>,
    pub beta: f64,
    pub t_last: f64,
}

impl AttitudeState {
    pub fn new(q: UnitQuaternion<f64>, beta: f64, t: f64) -> Self {
        AttitudeState { q, beta, t_last: t }
    }

    /// Orientation whose predicted gravity and north match `accel` and
    /// `mag` exactly.
    pub fn from_accel_mag(accel: &Vector3<f64>, mag: &Vector3<f64>, beta: f64, t: f64) -> Result<Self> {
        let up = accel
            .try_normalize(1e-12)
            .ok_or_else(|| Error::DegenerateInput("zero accelerometer reading".into()))?;
        let east = mag
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::DegenerateInput("magnetometer parallel to gravity".into()))?;
        let north = up.cross(&east);
        // rows are the world axes expressed in body axes
        let r = Matrix3::from_rows(&[east.transpose(), north.transpose(), up.transpose()]);
        let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
        Ok(AttitudeState::new(q, beta, t))
    }
}

/// Objective `f(q) = [Rᵀ(0,0,1) − a; Rᵀ(0,by,bz) − m]` and its Jacobian
/// with respect to `(w, x, y, z)`; `a`, `m` unit, `b` the world field
/// reference. Without a magnetometer only the gravity rows are used.
fn objective(q: &Quaternion<f64>, a: &Vector3<f64>, m: Option<(&Vector3<f64>, f64, f64)>) -> (Vec<f64>, Vec<[f64; 4]>) {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let mut f = vec![
        2.0 * (x * z - w * y) - a.x,
        2.0 * (y * z + w * x) - a.y,
        1.0 - 2.0 * (x * x + y * y) - a.z,
    ];
    let mut j = vec![
        [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
        [0.0, -4.0 * x, -4.0 * y, 0.0],
    ];
    if let Some((m, by, bz)) = m {
        f.push(2.0 * by * (x * y + w * z) + 2.0 * bz * (x * z - w * y) - m.x);
        f.push(by * (1.0 - 2.0 * (x * x + z * z)) + 2.0 * bz * (y * z + w * x) - m.y);
        f.push(2.0 * by * (y * z - w * x) + bz * (1.0 - 2.0 * (x * x + y * y)) - m.z);
        j.push([
            2.0 * by * z - 2.0 * bz * y,
            2.0 * by * y + 2.0 * bz * z,
            2.0 * by * x - 2.0 * bz * w,
            2.0 * by * w + 2.0 * bz * x,
        ]);
        j.push([2.0 * bz * x, -4.0 * by * x + 2.0 * bz * w, 2.0 * bz * z, -4.0 * by * z + 2.0 * bz * y]);
        j.push([-2.0 * by * x, -2.0 * by * w - 4.0 * bz * x, 2.0 * by * z - 4.0 * bz * y, 2.0 * by * y]);
    }
    (f, j)
}

/// One 9-DoF Madgwick step: gyro integration plus a normalized gradient
/// step of size `beta` towards the accelerometer/magnetometer fit. A zero
/// accelerometer reading gives a gyro-only step; a zero magnetometer
/// reading drops the heading correction.
pub fn madgwick_update(
    state: &AttitudeState,
    gyro: &Vector3<f64>,
    accel: &Vector3<f64>,
    mag: &Vector3<f64>,
    dt: f64,
) -> Result<AttitudeState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("attitude step dt = {dt} must be > 0")));
    }
    let q = *state.q.quaternion();
    let mut q_dot = q * Quaternion::from_imag(*gyro) * 0.5;
    if let Some(a) = accel.try_normalize(1e-12) {
        let m = mag.try_normalize(1e-12).map(|m| {
            // reference field: measured direction rotated to world, with
            // the horizontal part along north
            let h = state.q * m;
            (m, h.x.hypot(h.y), h.z)
        });
        let (f, j) = objective(&q, &a, m.as_ref().map(|(m, by, bz)| (m, *by, *bz)));
        let mut grad = Vector4::<f64>::zeros();
        for (fi, ji) in f.iter().zip(&j) {
            for k in 0..4 {
                grad[k] += ji[k] * fi;
            }
        }
        let n = grad.norm();
        if n > 0.0 {
            let g = grad / n;
            q_dot -= Quaternion::new(g[0], g[1], g[2], g[3]) * state.beta;
        }
    }
    let next = q + q_dot * dt;
    Ok(AttitudeState {
        q: UnitQuaternion::from_quaternion(next),
        beta: state.beta,
        t_last: state.t_last + dt,
    })
}

/// Relative camera rotation taking frame `t1` directions into frame `t`.
fn camera_rotation(q_t: &UnitQuaternion<f64>, q_t1: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let c = camera_to_body();
    c.transpose() * (q_t.inverse() * q_t1).to_rotation_matrix().into_inner() * c
}

/// `K · R(t ← t1) · K⁻¹`: maps pixels of frame `t1` to where they would be
/// seen with the orientation of frame `t`.
pub fn derotate(q_t: &UnitQuaternion<f64>, q_t1: &UnitQuaternion<f64>, k: &CameraIntrinsics) -> PixelWarp {
    if q_t == q_t1 {
        return PixelWarp::identity(k.width, k.height);
    }
    let km = k.matrix();
    let k_inv = km.try_inverse().expect("intrinsics are invertible");
    PixelWarp::new(km * camera_rotation(q_t, q_t1) * k_inv, k.width, k.height).expect("rotation homography is invertible")
}

/// Metric velocity from a patch warp: `(vx, vy)` is the ground's apparent
/// velocity along the image axes and `vz` the altitude rate (a zoom-in
/// means descent).
pub fn pixel_to_metric_velocity(
    h: &WarpParams,
    z: f64,
    k: &CameraIntrinsics,
    dt: f64,
    width: usize,
    height: usize,
) -> Result<Vector3<f64>> {
    if !(z > 0.0) {
        return Err(Error::InvalidArgument(format!("altitude {z} must be > 0")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step {dt} must be > 0")));
    }
    let tx_px = h.tx() * width as f64 / 2.0;
    let ty_px = h.ty() * height as f64 / 2.0;
    let s = h.s();
    if !(1.0 + s > 0.0) {
        return Err(Error::ParameterDomain(format!("scale 1 + s = {} must be > 0", 1.0 + s)));
    }
    Ok(Vector3::new(
        tx_px * z / (k.fx * dt),
        ty_px * z / (k.fy * dt),
        -z * s / ((1.0 + s) * dt),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryState {
    pub t: f64,
    pub position: Vector3<f64>,
    pub altitude: f64,
}

/// One world-frame velocity reading for [`dead_reckon`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocitySample {
    pub t: f64,
    pub velocity: Vector3<f64>,
    pub altitude: f64,
}

/// Trapezoidal integration of world velocities, starting at `origin` at
/// the first sample time.
pub fn dead_reckon(origin: Vector3<f64>, stream: &[VelocitySample]) -> Result<Vec<OdometryState>> {
    let mut out = Vec::with_capacity(stream.len());
    let Some(first) = stream.first() else {
        return Ok(out);
    };
    let mut p = origin;
    out.push(OdometryState {
        t: first.t,
        position: p,
        altitude: first.altitude,
    });
    for w in stream.windows(2) {
        let dt = w[1].t - w[0].t;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "velocity timestamps must increase, got {} after {}",
                w[1].t, w[0].t
            )));
        }
        p += (w[0].velocity + w[1].velocity) * (0.5 * dt);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalDegeneracy(format!("position diverged at t = {}", w[1].t)));
        }
        out.push(OdometryState {
            t: w[1].t,
            position: p,
            altitude: w[1].altitude,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryError {
    /// Mean absolute error per axis after alignment.
    pub per_axis: Vector3<f64>,
    pub rmse: f64,
    /// Ground-truth path length over the compared time range.
    pub length: f64,
}

impl TrajectoryError {
    pub fn rmse_pct(&self) -> f64 {
        100.0 * self.rmse / self.length
    }
}

fn interpolate_position(gt: &[TrajectorySample], t: f64) -> Option<Vector3<f64>> {
    let i = gt.partition_point(|s| s.t <= t);
    if i == 0 {
        return (gt.first()?.t == t).then(|| gt[0].position);
    }
    if i == gt.len() {
        let last = gt.last()?;
        return (last.t == t).then_some(last.position);
    }
    let (a, b) = (&gt[i - 1], &gt[i]);
    let u = (t - a.t) / (b.t - a.t);
    Some(a.position + (b.position - a.position) * u)
}

/// Rigid alignment minimizing `Σ ‖R eᵢ + t − gᵢ‖²`.
pub fn rigid_align(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if est.len() != gt.len() || est.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "alignment needs at least 3 matched points, got {} and {}",
            est.len(),
            gt.len()
        )));
    }
    let n = est.len() as f64;
    let ce = est.iter().sum::<Vector3<f64>>() / n;
    let cg = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        cov += (g - cg) * (e - ce).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    Ok((r, cg - r * ce))
}

/// Aligns `est` to `gt` (resampled at the estimate timestamps) with a
/// rigid transform and reports the residual errors.
pub fn align_and_rmse(est: &[TrajectorySample], gt: &[TrajectorySample]) -> Result<TrajectoryError> {
    if gt.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::InvalidArgument("ground-truth timestamps must increase".into()));
    }
    let (mut e, mut g, mut times) = (Vec::new(), Vec::new(), Vec::new());
    for s in est {
        if let Some(p) = interpolate_position(gt, s.t) {
            e.push(s.position);
            g.push(p);
            times.push(s.t);
        }
    }
    if e.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "only {} estimate samples overlap the ground truth, need 3",
            e.len()
        )));
    }
    let (r, t) = rigid_align(&e, &g)?;
    let mut abs = Vector3::zeros();
    let mut sq = 0.0;
    for (a, b) in e.iter().zip(&g) {
        let d = r * a + t - b;
        abs += d.abs();
        sq += d.norm_squared();
    }
    let n = e.len() as f64;
    let (t0, t1) = (times[0], times[times.len() - 1]);
    let mut length = 0.0;
    let mut prev = g[0];
    for s in gt.iter().filter(|s| s.t > t0 && s.t < t1) {
        length += (s.position - prev).norm();
        prev = s.position;
    }
    length += (g[g.len() - 1] - prev).norm();
    Ok(TrajectoryError {
        per_axis: abs / n,
        rmse: (sq / n).sqrt(),
        length,
    })
}

pub const EVAL_HEADER: &str = "trajectory,err_x,err_y,err_z,rmse,length_m,rmse_pct";

pub fn eval_csv(rows: &[(String, TrajectoryError)]) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for (name, e) in rows {
        let _ = writeln!(
            out,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
            e.per_axis.x,
            e.per_axis.y,
            e.per_axis.z,
            e.rmse,
            e.length,
            e.rmse_pct()
        );
    }
    out
}

pub fn write_eval(rows: &[(String, TrajectoryError)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, eval_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VioConfig {
    pub stride: usize,
    pub patch: usize,
    pub beta: f64,
    pub origin: Vector3<f64>,
    /// Start each pair from the previous step's warp (constant image
    /// velocity), so the estimator only sees the change in motion.
    pub motion_prior: bool,
    /// Estimates implying a faster speed (m/s) are treated as tracking
    /// failures. Non-positive disables the check.
    pub max_speed: f64,
}

impl Default for VioConfig {
    fn default() -> Self {
        VioConfig {
            stride: 4,
            patch: 128,
            beta: DEFAULT_BETA,
            origin: Vector3::zeros(),
            motion_prior: true,
            max_speed: 4.0 * crate::sim::MAX_SPEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VioOutput {
    /// Positions at the midpoints of the frame pairs, with the filtered
    /// attitude there.
    pub trajectory: Vec<TrajectorySample>,
    pub velocities: Vec<VelocitySample>,
    /// Steps whose estimate was degenerate and reused the last velocity.
    pub held: usize,
}

/// Filtered attitudes at every IMU sample, initialized from the first
/// accelerometer and magnetometer readings.
pub fn filter_attitude(imu: &[ImuSample], beta: f64) -> Result<Vec<AttitudeState>> {
    let first = imu
        .first()
        .ok_or_else(|| Error::DegenerateInput("empty IMU log".into()))?;
    let mut state = AttitudeState::from_accel_mag(&first.accel, &first.mag, beta, first.t)?;
    let mut out = vec![state];
    for w in imu.windows(2) {
        let dt = w[1].t - w[0].t;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "IMU timestamps must increase, got {} after {}",
                w[1].t, w[0].t
            )));
        }
        state = madgwick_update(&state, &w[1].gyro, &w[1].accel, &w[1].mag, dt)?;
        state.t_last = w[1].t;
        out.push(state);
    }
    Ok(out)
}

fn attitude_at(states: &[AttitudeState], t: f64) -> Result<UnitQuaternion<f64>> {
    let i = states.partition_point(|s| s.t_last <= t);
    if i == 0 || (i == states.len() && states[i - 1].t_last < t) {
        return Err(Error::DegenerateInput(format!("no IMU coverage at t = {t}")));
    }
    let a = &states[i - 1];
    if a.t_last == t || i == states.len() {
        return Ok(a.q);
    }
    let b = &states[i];
    let u = (t - a.t_last) / (b.t_last - a.t_last);
    Ok(a.q.slerp(&b.q, u))
}

fn altitude_at(alt: &[AltSample], t: f64) -> Result<f64> {
    let i = alt.partition_point(|s| s.t <= t);
    let err = || Error::DegenerateInput(format!("no altimeter coverage at t = {t}"));
    if i == 0 {
        return Err(err());
    }
    let a = &alt[i - 1];
    if a.t == t {
        return Ok(a.z);
    }
    let b = alt.get(i).ok_or_else(err)?;
    Ok(a.z + (b.z - a.z) * (t - a.t) / (b.t - a.t))
}

/// Centre `patch × patch` crop of `frame` after applying `pre` (a warp
/// taking frame pixels to the output frame).
fn centre_patch(frame: &ImagePlane, pre: &PixelWarp, k: &CameraIntrinsics, patch: usize) -> Result<ImagePlane> {
    let half = patch as f64 / 2.0;
    let shift = PixelWarp::new(
        Matrix3::new(1.0, 0.0, k.cx - half, 0.0, 1.0, k.cy - half, 0.0, 0.0, 1.0),
        patch,
        patch,
    )?;
    Ok(sample_at(frame, &pre.inverse().after(&shift), patch, patch))
}

/// Dead-reckons a flight from frame pairs `stride` apart. Each pair is
/// derotated with the filtered attitude, the centre patches are aligned,
/// and the warp is scaled to a metric velocity with the attitude-adjusted
/// altimeter reading.
pub fn run_vio(
    frames: &dyn FrameSource,
    log: &SensorLog,
    estimator: &CascadeEstimator,
    k: &CameraIntrinsics,
    cfg: &VioConfig,
) -> Result<VioOutput> {
    if cfg.stride == 0 {
        return Err(Error::InvalidArgument("frame stride must be >= 1".into()));
    }
    if cfg.patch < 8 || cfg.patch > k.width.min(k.height) {
        return Err(Error::InvalidArgument(format!(
            "patch size {} must be in 8..={}",
            cfg.patch,
            k.width.min(k.height)
        )));
    }
    if frames.len() <= cfg.stride {
        return Err(Error::DegenerateInput(format!(
            "{} frames are too few for stride {}",
            frames.len(),
            cfg.stride
        )));
    }
    let states = filter_attitude(&log.imu, cfg.beta)?;
    let identity = PixelWarp::identity(k.width, k.height);
    let mut stream = Vec::new();
    let mut attitudes = Vec::new();
    let mut last_v = Vector3::zeros();
    let mut last_h: Option<WarpParams> = None;
    let mut held = 0;
    let mut prev: Option<(usize, ImagePlane)> = None;
    let mut i = 0;
    while i + cfg.stride < frames.len() {
        let j = i + cfg.stride;
        let (t0, t1) = (frames.time(i), frames.time(j));
        let (q0, q1) = (attitude_at(&states, t0)?, attitude_at(&states, t1)?);
        let f0 = match prev.take() {
            Some((idx, f)) if idx == i => f,
            _ => frames.frame(i)?,
        };
        let f1 = frames.frame(j)?;
        let p0 = centre_patch(&f0, &identity, k, cfg.patch)?;
        let p1 = centre_patch(&f1, &derotate(&q0, &q1, k), k, cfg.patch)?;
        let dt = t1 - t0;
        let z_raw = altitude_at(&log.altimeter, 0.5 * (t0 + t1))?;
        let (roll, pitch, _) = q0.euler_angles();
        let z = z_raw * roll.cos() * pitch.cos();
        let r_wc = q0.to_rotation_matrix().into_inner() * camera_to_body();
        let measure = |prior: Option<&WarpParams>| -> Result<Option<(WarpParams, Vector3<f64>)>> {
            let (h, skipped) = match prior {
                Some(prior) => {
                    let warped = warp_image(&p0, prior)?;
                    let (r, n) = cascade_estimate_counted(&warped, &p1, &estimator.cascade, &estimator.kind)?;
                    (compose(&r, &prior.lift(r.model())?)?, n)
                }
                None => cascade_estimate_counted(&p0, &p1, &estimator.cascade, &estimator.kind)?,
            };
            if skipped > 0 {
                return Ok(None);
            }
            // the camera moves against the apparent ground motion
            let v = r_wc * -pixel_to_metric_velocity(&h, z, k, dt, cfg.patch, cfg.patch)?;
            let plausible = cfg.max_speed <= 0.0 || v.norm() <= cfg.max_speed;
            Ok(plausible.then_some((h, v)))
        };
        let tolerate = |r: Result<Option<(WarpParams, Vector3<f64>)>>| match r {
            Err(Error::DegenerateInput(_)) | Err(Error::NumericalDegeneracy(_)) | Err(Error::ParameterDomain(_)) => {
                Ok(None)
            }
            other => other,
        };
        let mut found = tolerate(measure(last_h.as_ref().filter(|_| cfg.motion_prior)))?;
        if found.is_none() && cfg.motion_prior && last_h.is_some() {
            found = tolerate(measure(None))?;
        }
        let v = match found {
            Some((h, v)) => {
                last_h = Some(h);
                v
            }
            None => {
                held += 1;
                last_v
            }
        };
        last_v = v;
        let tm = 0.5 * (t0 + t1);
        stream.push(VelocitySample {
            t: tm,
            velocity: v,
            altitude: z_raw,
        });
        attitudes.push(attitude_at(&states, tm)?);
        prev = Some((j, f1));
        i = j;
    }
    let odo = dead_reckon(cfg.origin, &stream)?;
    let trajectory = odo
        .iter()
        .zip(attitudes)
        .map(|(o, q)| TrajectorySample {
            t: o.t,
            position: o.position,
            attitude: q,
        })
        .collect();
    Ok(VioOutput {
        trajectory,
        velocities: stream,
        held,
    })
}

/// Ground-truth poses at the given times.
pub fn ground_truth(traj: &crate::sim::Trajectory, times: &[f64]) -> Vec<TrajectorySample> {
    times.iter().map(|&t| traj.sample(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn objective_jacobian_matches_differences() {
        let q = Quaternion::new(0.9, 0.1, -0.3, 0.2).normalize();
        let a = Vector3::new(0.1, 0.2, 0.97).normalize();
        let m = Vector3::new(0.3, 0.9, -0.2).normalize();
        let (_, j) = objective(&q, &a, Some((&m, 0.8, -0.4)));
        let h = 1e-6;
        for k in 0..4 {
            let mut c = [q.w, q.i, q.j, q.k];
            c[k] += h;
            let qp = Quaternion::new(c[0], c[1], c[2], c[3]);
            c[k] -= 2.0 * h;
            let qm = Quaternion::new(c[0], c[1], c[2], c[3]);
            let (fp, _) = objective(&qp, &a, Some((&m, 0.8, -0.4)));
            let (fm, _) = objective(&qm, &a, Some((&m, 0.8, -0.4)));
            for r in 0..6 {
                assert_relative_eq!((fp[r] - fm[r]) / (2.0 * h), j[r][k], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn equilibrium_is_kept() {
        let s = AttitudeState::new(UnitQuaternion::identity(), DEFAULT_BETA, 0.0);
        let mut cur = s;
        for _ in 0..100 {
            cur = madgwick_update(&cur, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 9.81), &Vector3::y(), 0.01).unwrap();
        }
        assert!(cur.q.angle_to(&s.q) < 1e-6);
        assert!(madgwick_update(&s, &Vector3::zeros(), &Vector3::z(), &Vector3::y(), 0.0).is_err());
    }

    #[test]
    fn gyro_only_yaw() {
        let mut s = AttitudeState::new(UnitQuaternion::identity(), 0.0, 0.0);
        for _ in 0..1000 {
            s = madgwick_update(&s, &Vector3::new(0.0, 0.0, 0.1), &Vector3::z(), &Vector3::y(), 0.01).unwrap();
            assert!((s.q.quaternion().norm() - 1.0).abs() < 1e-9);
        }
        let (_, _, yaw) = s.q.euler_angles();
        assert!((yaw - 1.0).abs() < 1e-3, "{yaw}");
    }

    #[test]
    fn tilted_static_converges() {
        let roll = 10f64.to_radians();
        let truth = UnitQuaternion::from_euler_angles(roll, 0.0, 0.0);
        let accel = truth.inverse() * Vector3::new(0.0, 0.0, 9.81);
        let mag = truth.inverse() * Vector3::y();
        let mut s = AttitudeState::new(UnitQuaternion::identity(), DEFAULT_BETA, 0.0);
        for _ in 0..500 {
            s = madgwick_update(&s, &Vector3::zeros(), &accel, &mag, 0.01).unwrap();
        }
        let (r, _, _) = s.q.euler_angles();
        assert!((r - roll).abs() < 1f64.to_radians(), "{}", r.to_degrees());
    }

    #[test]
    fn zero_accel_is_gyro_only() {
        let s = AttitudeState::new(UnitQuaternion::identity(), DEFAULT_BETA, 0.0);
        let a = madgwick_update(&s, &Vector3::new(0.0, 0.0, 0.1), &Vector3::zeros(), &Vector3::y(), 0.01).unwrap();
        let b = AttitudeState {
            beta: 0.0,
            ..s
        };
        let b = madgwick_update(&b, &Vector3::new(0.0, 0.0, 0.1), &Vector3::z(), &Vector3::y(), 0.01).unwrap();
        assert!(a.q.angle_to(&b.q) < 1e-15);
    }

    #[test]
    fn initial_attitude_from_sensors() {
        let truth = UnitQuaternion::from_euler_angles(0.1, -0.05, 2.0);
        let accel = truth.inverse() * Vector3::new(0.0, 0.0, 9.81);
        let mag = truth.inverse() * Vector3::y();
        let s = AttitudeState::from_accel_mag(&accel, &mag, 0.1, 0.0).unwrap();
        assert!(s.q.angle_to(&truth) < 1e-12);
    }

    #[test]
    fn derotation_examples() {
        let k = CameraIntrinsics::default();
        let q = UnitQuaternion::from_euler_angles(0.01, 0.02, 0.3);
        assert_eq!(derotate(&q, &q, &k).matrix(), &Matrix3::identity());

        let d = 0.15;
        let w = derotate(&UnitQuaternion::identity(), &UnitQuaternion::from_euler_angles(0.0, 0.0, d), &k);
        let (c, s) = ((-d).cos(), (-d).sin());
        let rot = Matrix3::new(c, -s, k.cx - c * k.cx + s * k.cy, s, c, k.cy - s * k.cx - c * k.cy, 0.0, 0.0, 1.0);
        assert_relative_eq!(w.matrix(), &rot, epsilon = 1e-9);

        let d = 0.01;
        let w = derotate(&UnitQuaternion::identity(), &UnitQuaternion::from_euler_angles(0.0, d, 0.0), &k);
        let (x, y) = w.apply(k.cx, k.cy);
        let shift = (x - k.cx).hypot(y - k.cy);
        assert!((shift - k.fx * d).abs() < 0.02 * k.fx * d, "{shift}");
    }

    #[test]
    fn velocity_examples() {
        let k = CameraIntrinsics::new(400.0, 400.0, 64.0, 64.0, 128, 128).unwrap();
        let zero = pixel_to_metric_velocity(&WarpParams::identity(crate::warp::WarpModel::PseudoSimilarity), 2.0, &k, 0.1, 128, 128).unwrap();
        assert_eq!(zero, Vector3::zeros());
        let h = WarpParams::pseudo_similarity(0.0, 10.0 / 64.0, 0.0);
        let v = pixel_to_metric_velocity(&h, 2.0, &k, 0.1, 128, 128).unwrap();
        assert_relative_eq!(v.x, 0.5, epsilon = 1e-12);
        let h = WarpParams::pseudo_similarity(0.01, 0.0, 0.0);
        let v = pixel_to_metric_velocity(&h, 2.0, &k, 0.1, 128, 128).unwrap();
        assert_relative_eq!(v.z, 2.0 * (1.0 / 1.01 - 1.0) / 0.1, epsilon = 1e-12);
        assert!((v.z + 0.198).abs() < 1e-3);
        assert!(pixel_to_metric_velocity(&h, 0.0, &k, 0.1, 128, 128).is_err());
        assert!(pixel_to_metric_velocity(&h, 1.0, &k, -0.1, 128, 128).is_err());
    }

    fn vs(t: f64, v: Vector3<f64>) -> VelocitySample {
        VelocitySample {
            t,
            velocity: v,
            altitude: 1.0,
        }
    }

    #[test]
    fn dead_reckoning_examples() {
        let s: Vec<_> = (0..=10).map(|i| vs(i as f64 * 0.1, Vector3::x())).collect();
        let out = dead_reckon(Vector3::zeros(), &s).unwrap();
        assert_relative_eq!(out.last().unwrap().position.x, 1.0, epsilon = 1e-12);

        let s: Vec<_> = (0..=100).map(|i| vs(i as f64, Vector3::zeros())).collect();
        assert!(dead_reckon(Vector3::zeros(), &s).unwrap().iter().all(|o| o.position == Vector3::zeros()));

        let n = (std::f64::consts::PI / 1e-3).round() as usize;
        let h = std::f64::consts::PI / n as f64;
        let s: Vec<_> = (0..=n)
            .map(|i| {
                let t = i as f64 * h;
                vs(t, Vector3::new(t.cos(), t.sin(), 0.0))
            })
            .collect();
        let p = dead_reckon(Vector3::zeros(), &s).unwrap().last().unwrap().position;
        assert!(p.x.abs() < 1e-3 && (p.y - 2.0).abs() < 1e-3, "{p:?}");

        let bad = [vs(1.0, Vector3::x()), vs(0.5, Vector3::x())];
        assert!(dead_reckon(Vector3::zeros(), &bad).is_err());
    }

    fn samples(points: &[Vector3<f64>]) -> Vec<TrajectorySample> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectorySample {
                t: i as f64,
                position: *p,
                attitude: UnitQuaternion::identity(),
            })
            .collect()
    }

    fn helix(n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.05;
                Vector3::new(t.cos(), t.sin(), 0.1 * t)
            })
            .collect()
    }

    #[test]
    fn alignment_examples() {
        let gt = samples(&helix(200));
        let e = align_and_rmse(&gt, &gt).unwrap();
        assert!(e.rmse < 1e-12 && e.per_axis.norm() < 1e-12);

        let moved: Vec<_> = helix(200).iter().map(|p| p + Vector3::new(3.0, -1.0, 0.5)).collect();
        assert!(align_and_rmse(&samples(&moved), &gt).unwrap().rmse < 1e-9);

        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.05).unwrap();
        let noisy: Vec<_> = helix(1000)
            .iter()
            .map(|p| p + Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)))
            .collect();
        let e = align_and_rmse(&samples(&noisy), &samples(&helix(1000))).unwrap();
        assert!((0.07..=0.11).contains(&e.rmse), "{}", e.rmse);

        assert!(align_and_rmse(&gt[..2], &gt).is_err());
    }
}
