//! Simulated flights of a down-facing camera over a textured ground plane:
//! trajectory shapes, frame rendering and IMU/altimeter synthesis.
//!
//! World frame is ENU with gravity along −z. Body axes are forward, left,
//! up; the camera looks along body −z with image x along body x and image
//! y along body −y.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bench::mix_seed;
use crate::corpus::detail_texture;
use crate::error::{Error, Result};
use crate::imaging::{sample_at, ImagePlane};
use crate::warp::PixelWarp;

pub const GRAVITY: f64 = 9.81;
pub const IMU_RATE: f64 = 100.0;
pub const ALTIMETER_RATE: f64 = 20.0;
pub const CAMERA_RATE: f64 = 90.0;
pub const MEAN_SPEED: f64 = 0.5;
pub const MAX_SPEED: f64 = 1.5;
/// Coarsest feature size of procedural ground textures, in metres.
pub const FEATURE_SIZE: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!("focal lengths ({fx}, {fy}) must be > 0")));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, centred principal point and the given diagonal field
    /// of view.
    pub fn from_diagonal_fov(width: usize, height: usize, fov_deg: f64) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::InvalidArgument(format!("field of view {fov_deg} must be in (0, 180)")));
        }
        let half_diag = (width as f64).hypot(height as f64) / 2.0;
        let f = half_diag / (fov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics::from_diagonal_fov(640, 480, 22.0).expect("valid defaults")
    }
}

/// Rotation taking camera axes to body axes.
pub fn camera_to_body() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub position: Vector3<f64>,
    /// World ← body.
    pub attitude: UnitQuaternion<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Hover,
    Circle,
    /// A 270° arc flown out and back.
    Moon,
    Line,
    Figure8,
    Square,
}

impl Shape {
    pub const FLIGHTS: [Shape; 5] = [Shape::Circle, Shape::Moon, Shape::Line, Shape::Figure8, Shape::Square];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Hover => "hover",
            Shape::Circle => "circle",
            Shape::Moon => "moon",
            Shape::Line => "line",
            Shape::Figure8 => "figure8",
            Shape::Square => "square",
        }
    }

    /// Radius for circle and moon, length for line, lobe half-width for
    /// figure8, side for square.
    pub fn default_size(self) -> f64 {
        match self {
            Shape::Hover => 0.0,
            Shape::Circle | Shape::Moon | Shape::Figure8 => 1.5,
            Shape::Line => 3.0,
            Shape::Square => 2.0,
        }
    }

    /// Heading follows the path tangent for curved shapes and stays at 0
    /// for the others.
    fn tangent_heading(self) -> bool {
        matches!(self, Shape::Circle | Shape::Moon | Shape::Figure8)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Shape::Hover, Shape::Circle, Shape::Moon, Shape::Line, Shape::Figure8, Shape::Square]
            .into_iter()
            .find(|sh| sh.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown trajectory shape `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryParams {
    pub shape: Shape,
    pub size: f64,
    /// Seconds per cycle; `None` picks the period giving the default mean
    /// speed.
    pub period: Option<f64>,
    pub altitude: f64,
    /// Amplitude and period of the sinusoidal altitude variation.
    pub altitude_amplitude: f64,
    pub altitude_period: f64,
    pub duration: f64,
    /// Tilt the body along the thrust direction needed for the
    /// acceleration, as a multirotor would.
    pub tilt: bool,
}

impl TrajectoryParams {
    pub fn new(shape: Shape) -> Self {
        TrajectoryParams {
            shape,
            size: shape.default_size(),
            period: None,
            altitude: 2.0,
            altitude_amplitude: 0.3,
            altitude_period: 20.0,
            duration: 60.0,
            tilt: true,
        }
    }
}

/// An analytic trajectory; positions, velocities and accelerations are
/// closed-form, body rates come from differencing the attitude.
#[derive(Debug, Clone)]
pub struct Trajectory {
    params: TrajectoryParams,
    period: f64,
    start: [f64; 2],
}

fn smootherstep(u: f64) -> (f64, f64, f64) {
    let u2 = u * u;
    (
        u * u2 * (10.0 - 15.0 * u + 6.0 * u2),
        30.0 * u2 * (1.0 - u) * (1.0 - u),
        60.0 * u * (1.0 - 3.0 * u + 2.0 * u2),
    )
}

type Planar = ([f64; 2], [f64; 2], [f64; 2], f64);

impl Trajectory {
    pub fn new(params: TrajectoryParams) -> Result<Self> {
        if !(params.duration > 0.0) {
            return Err(Error::InvalidArgument(format!("duration {} must be > 0", params.duration)));
        }
        if params.shape != Shape::Hover && !(params.size > 0.0) {
            return Err(Error::InvalidArgument(format!("trajectory size {} must be > 0", params.size)));
        }
        if !(params.altitude - params.altitude_amplitude.abs() > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "altitude {} ± {} must stay above the ground",
                params.altitude, params.altitude_amplitude
            )));
        }
        if params.altitude_amplitude != 0.0 && !(params.altitude_period > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "altitude period {} must be > 0",
                params.altitude_period
            )));
        }
        if let Some(p) = params.period {
            if !(p > 0.0) {
                return Err(Error::InvalidArgument(format!("period {p} must be > 0")));
            }
        }
        let mut traj = Trajectory {
            params,
            period: 1.0,
            start: [0.0; 2],
        };
        traj.period = match params.period {
            Some(p) => p,
            None if params.shape == Shape::Hover => 1.0,
            // cycle length at unit period equals the speed needed
            None => traj.cycle_length() / MEAN_SPEED,
        };
        traj.start = traj.planar_raw(0.0).0;
        let peak = traj.peak_speed();
        if peak > MAX_SPEED {
            return Err(Error::InvalidArgument(format!(
                "{} of size {} and period {:.3} s peaks at {peak:.3} m/s, above {MAX_SPEED} m/s",
                params.shape, params.size, traj.period
            )));
        }
        Ok(traj)
    }

    pub fn params(&self) -> &TrajectoryParams {
        &self.params
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn duration(&self) -> f64 {
        self.params.duration
    }

    fn cycle_length(&self) -> f64 {
        let n = 20_000;
        let speed = |i: usize| {
            let (_, v, _, _) = self.planar_raw(self.period * i as f64 / n as f64);
            v[0].hypot(v[1])
        };
        // Simpson over one cycle
        let h = self.period / n as f64;
        let mut acc = speed(0) + speed(n);
        for i in 1..n {
            acc += speed(i) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    fn peak_speed(&self) -> f64 {
        let span = self.params.duration.min(self.period.max(self.params.altitude_period));
        let n = (span * 1000.0).ceil() as usize;
        (0..=n)
            .map(|i| self.velocity(span * i as f64 / n as f64).norm())
            .fold(0.0, f64::max)
    }

    /// Planar position, velocity, acceleration and heading before the
    /// start offset is removed.
    fn planar_raw(&self, t: f64) -> Planar {
        let r = self.params.size;
        let w = 2.0 * std::f64::consts::PI / self.period;
        // curve c(θ) and its derivatives, then the chain rule through θ(t)
        let along = |c: [f64; 2], d1: [f64; 2], d2: [f64; 2], th1: f64, th2: f64| -> Planar {
            let v = [d1[0] * th1, d1[1] * th1];
            let a = [d2[0] * th1 * th1 + d1[0] * th2, d2[1] * th1 * th1 + d1[1] * th2];
            (c, v, a, d1[1].atan2(d1[0]))
        };
        match self.params.shape {
            Shape::Hover => ([0.0; 2], [0.0; 2], [0.0; 2], 0.0),
            Shape::Circle => {
                let th = w * t;
                let (s, c) = th.sin_cos();
                along([r * c, r * s], [-r * s, r * c], [-r * c, -r * s], w, 0.0)
            }
            Shape::Moon => {
                let span = 1.5 * std::f64::consts::PI;
                let (sw, cw) = (w * t).sin_cos();
                let th = 0.5 * span * (1.0 - cw);
                let th1 = 0.5 * span * w * sw;
                let th2 = 0.5 * span * w * w * cw;
                let (s, c) = th.sin_cos();
                along([r * c, r * s], [-r * s, r * c], [-r * c, -r * s], th1, th2)
            }
            Shape::Line => {
                let th = w * t;
                let (s, c) = th.sin_cos();
                let h = 0.5 * r;
                let (p, v, a, _) = along([h * s, 0.0], [h * c, 0.0], [-h * s, 0.0], w, 0.0);
                (p, v, a, 0.0)
            }
            Shape::Figure8 => {
                let th = w * t;
                let (s, c) = th.sin_cos();
                let (s2, c2) = (2.0 * th).sin_cos();
                along([r * s, 0.5 * r * s2], [r * c, r * c2], [-r * s, -2.0 * r * s2], w, 0.0)
            }
            Shape::Square => {
                const CORNERS: [[f64; 2]; 5] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
                let side_t = self.period / 4.0;
                let phase = (t / side_t).max(0.0);
                let k = (phase.floor() as usize) % 4;
                let u = phase - phase.floor();
                let (sg, sg1, sg2) = smootherstep(u);
                let (a, b) = (CORNERS[k], CORNERS[k + 1]);
                let d = [r * (b[0] - a[0]), r * (b[1] - a[1])];
                (
                    [r * a[0] + sg * d[0], r * a[1] + sg * d[1]],
                    [sg1 / side_t * d[0], sg1 / side_t * d[1]],
                    [sg2 / (side_t * side_t) * d[0], sg2 / (side_t * side_t) * d[1]],
                    0.0,
                )
            }
        }
    }

    fn vertical(&self, t: f64) -> (f64, f64, f64) {
        let p = &self.params;
        if p.altitude_amplitude == 0.0 {
            return (p.altitude, 0.0, 0.0);
        }
        let w = 2.0 * std::f64::consts::PI / p.altitude_period;
        let (s, c) = (w * t).sin_cos();
        let a = p.altitude_amplitude;
        (p.altitude + a * s, a * w * c, -a * w * w * s)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let (p, ..) = self.planar_raw(t);
        Vector3::new(p[0] - self.start[0], p[1] - self.start[1], self.vertical(t).0)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let (_, v, ..) = self.planar_raw(t);
        Vector3::new(v[0], v[1], self.vertical(t).1)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let (_, _, a, _) = self.planar_raw(t);
        Vector3::new(a[0], a[1], self.vertical(t).2)
    }

    /// Body-to-world rotation.
    pub fn rotation(&self, t: f64) -> Matrix3<f64> {
        let heading = if self.params.shape.tangent_heading() {
            self.planar_raw(t).3
        } else {
            0.0
        };
        let up = if self.params.tilt {
            (self.acceleration(t) + Vector3::new(0.0, 0.0, GRAVITY)).normalize()
        } else {
            Vector3::z()
        };
        let fwd = Vector3::new(heading.cos(), heading.sin(), 0.0);
        let x = (fwd - up * fwd.dot(&up)).normalize();
        let y = up.cross(&x);
        Matrix3::from_columns(&[x, y, up])
    }

    pub fn attitude(&self, t: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation(t)))
    }

    /// Angular velocity in body axes, from a central difference of the
    /// rotation.
    pub fn body_rate(&self, t: f64) -> Vector3<f64> {
        const H: f64 = 1e-4;
        let r = self.rotation(t);
        let dr = (self.rotation(t + H) - self.rotation(t - H)) / (2.0 * H);
        let s = r.transpose() * dr;
        Vector3::new(s[(2, 1)] - s[(1, 2)], s[(0, 2)] - s[(2, 0)], s[(1, 0)] - s[(0, 1)]) * 0.5
    }

    pub fn sample(&self, t: f64) -> TrajectorySample {
        TrajectorySample {
            t,
            position: self.position(t),
            attitude: self.attitude(t),
        }
    }

    /// Length of the flown path over the whole duration.
    pub fn path_length(&self) -> f64 {
        let n = ((self.params.duration * 1000.0).ceil() as usize).max(2);
        let h = self.params.duration / n as f64;
        let speed = |i: usize| self.velocity(h * i as f64).norm();
        let mut acc = speed(0) + speed(n);
        for i in 1..n {
            acc += speed(i) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        // Simpson needs an even count; n is rounded up so it may be odd
        if n % 2 == 1 {
            let trapz = (1..n).map(speed).sum::<f64>() + 0.5 * (speed(0) + speed(n));
            return trapz * h;
        }
        acc * h / 3.0
    }

    /// Sample times `k / rate` covering the duration.
    pub fn times(&self, rate: f64) -> Vec<f64> {
        let n = (self.params.duration * rate + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 / rate).collect()
    }
}

/// Poses at `rate` Hz over the whole duration.
pub fn gen_trajectory(params: TrajectoryParams, rate: f64) -> Result<Vec<TrajectorySample>> {
    if !(rate > 0.0) {
        return Err(Error::InvalidArgument(format!("sample rate {rate} must be > 0")));
    }
    let traj = Trajectory::new(params)?;
    Ok(traj.times(rate).into_iter().map(|t| traj.sample(t)).collect())
}

/// A ground image with a known metric scale, centred on the world origin
/// with image up pointing north.
#[derive(Debug, Clone)]
pub struct GroundTexture {
    pub image: ImagePlane,
    pub m_per_px: f64,
}

impl GroundTexture {
    pub fn new(image: ImagePlane, m_per_px: f64) -> Result<Self> {
        if !(m_per_px > 0.0) {
            return Err(Error::InvalidArgument(format!("texture scale {m_per_px} m/px must be > 0")));
        }
        if image.width() < 2 || image.height() < 2 {
            return Err(Error::InvalidArgument("ground texture must be at least 2x2".into()));
        }
        Ok(GroundTexture { image, m_per_px })
    }

    /// Procedural texture covering `[-half_extent, half_extent]²` metres,
    /// with features from [`FEATURE_SIZE`] down to two texture pixels.
    pub fn procedural(half_extent: f64, m_per_px: f64, seed: u64) -> Result<Self> {
        if !(half_extent > 0.0 && m_per_px > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "texture extent {half_extent} m and scale {m_per_px} m/px must be > 0"
            )));
        }
        let n = (2.0 * half_extent / m_per_px).ceil() as usize;
        GroundTexture::new(detail_texture(n, n, FEATURE_SIZE / m_per_px, seed), m_per_px)
    }

    /// Procedural texture large enough for every view along `traj`, with
    /// room for tilts up to 15°.
    pub fn covering(traj: &Trajectory, k: &CameraIntrinsics, m_per_px: f64, seed: u64) -> Result<Self> {
        let p = traj.params();
        let half_diag = (k.width as f64 / k.fx).hypot(k.height as f64 / k.fy) / 2.0;
        let reach = (p.altitude + p.altitude_amplitude.abs()) * (half_diag.atan() + 15f64.to_radians()).tan();
        let extent = traj
            .times(100.0)
            .into_iter()
            .map(|t| {
                let q = traj.position(t);
                q.x.abs().max(q.y.abs())
            })
            .fold(0.0, f64::max);
        GroundTexture::procedural(extent + reach + 0.1, m_per_px, seed)
    }

    /// Texture pixel → ground metres.
    fn ground_from_texture(&self) -> Matrix3<f64> {
        let (hw, hh) = (self.image.width() as f64 / 2.0, self.image.height() as f64 / 2.0);
        let s = self.m_per_px;
        Matrix3::new(s, 0.0, -s * hw, 0.0, -s, s * hh, 0.0, 0.0, 1.0)
    }
}

/// Homography taking ground-plane metres `(x, y, 1)` to image pixels.
pub fn ground_to_image(pose: &TrajectorySample, k: &CameraIntrinsics) -> Matrix3<f64> {
    let r_wc = pose.attitude.to_rotation_matrix().into_inner() * camera_to_body();
    let r_cw = r_wc.transpose();
    let t = -(r_cw * pose.position);
    let rt = Matrix3::from_columns(&[r_cw.column(0).into_owned(), r_cw.column(1).into_owned(), t]);
    k.matrix() * rt
}

/// Renders the camera view at `pose` by sampling the ground through the
/// plane-induced homography.
pub fn render_view(ground: &GroundTexture, pose: &TrajectorySample, k: &CameraIntrinsics) -> Result<ImagePlane> {
    if !(pose.position.z > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "camera altitude {} must be above the ground plane",
            pose.position.z
        )));
    }
    let h = ground_to_image(pose, k);
    let h_inv = h
        .try_inverse()
        .ok_or_else(|| Error::NumericalDegeneracy("camera looks along the ground plane".into()))?;
    let tex_from_ground = ground
        .ground_from_texture()
        .try_inverse()
        .expect("texture map is invertible");
    let m = tex_from_ground * h_inv;
    let r_wc = pose.attitude.to_rotation_matrix().into_inner() * camera_to_body();
    let k_inv = k.matrix().try_inverse().expect("intrinsics are invertible");
    let (w, ht) = (k.width, k.height);
    let corners = [(0.0, 0.0), (w as f64 - 1.0, 0.0), (w as f64 - 1.0, ht as f64 - 1.0), (0.0, ht as f64 - 1.0)];
    for (u, v) in corners {
        let ray = r_wc * (k_inv * Vector3::new(u, v, 1.0));
        if !(ray.z < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frame corner ({u}, {v}) does not see the ground at t = {}",
                pose.t
            )));
        }
        let p = m * Vector3::new(u, v, 1.0);
        let (tx, ty) = (p.x / p.z, p.y / p.z);
        let (tw, th) = (ground.image.width() as f64, ground.image.height() as f64);
        if !(tx >= 0.0 && ty >= 0.0 && tx <= tw - 2.0 && ty <= th - 2.0) {
            return Err(Error::InvalidArgument(format!(
                "frame corner ({u}, {v}) at t = {} falls outside the ground texture (texture pixel ({tx:.1}, {ty:.1}))",
                pose.t
            )));
        }
    }
    Ok(sample_at(&ground.image, &PixelWarp::new(m, w, ht)?, w, ht))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
    pub mag_sigma: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gyro_sigma: 0.005,
            accel_sigma: 0.05,
            mag_sigma: 0.01,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig {
            gyro_sigma: 0.0,
            accel_sigma: 0.0,
            mag_sigma: 0.0,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gyro", self.gyro_sigma),
            ("accel", self.accel_sigma),
            ("mag", self.mag_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} noise sigma {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
    /// Unit magnetic field direction in body axes.
    pub mag: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltSample {
    pub t: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensorLog {
    pub imu: Vec<ImuSample>,
    pub altimeter: Vec<AltSample>,
    pub camera: Vec<f64>,
}

/// Standard normal draws scaled by `sigma`; zero sigma draws nothing so
/// noise-free logs are exact.
fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("sigma checked");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// IMU readings at [`IMU_RATE`]: body rate, specific force and magnetic
/// north, each with bias and white noise.
pub fn synth_imu(traj: &Trajectory, noise: &NoiseConfig, seed: u64) -> Result<Vec<ImuSample>> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let north = Vector3::y();
    let g = Vector3::new(0.0, 0.0, -GRAVITY);
    Ok(traj
        .times(IMU_RATE)
        .into_iter()
        .map(|t| {
            let r = traj.rotation(t);
            let gyro = traj.body_rate(t) + Vector3::from(noise.gyro_bias) + gauss3(&mut rng, noise.gyro_sigma);
            let accel = r.transpose() * (traj.acceleration(t) - g)
                + Vector3::from(noise.accel_bias)
                + gauss3(&mut rng, noise.accel_sigma);
            let mag = (r.transpose() * north + gauss3(&mut rng, noise.mag_sigma)).normalize();
            ImuSample { t, gyro, accel, mag }
        })
        .collect())
}

/// Altitude readings at [`ALTIMETER_RATE`] with Gaussian noise.
pub fn synth_altimeter(traj: &Trajectory, sigma: f64, seed: u64) -> Result<Vec<AltSample>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("altimeter sigma {sigma} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("sigma checked");
    Ok(traj
        .times(ALTIMETER_RATE)
        .into_iter()
        .map(|t| {
            let z = traj.position(t).z;
            AltSample {
                t,
                z: if sigma == 0.0 { z } else { z + n.sample(&mut rng) },
            }
        })
        .collect())
}

/// All sensor streams of one flight; the streams use independent seeds
/// derived from `seed`.
pub fn simulate_sensors(traj: &Trajectory, noise: &NoiseConfig, alt_sigma: f64, seed: u64) -> Result<SensorLog> {
    Ok(SensorLog {
        imu: synth_imu(traj, noise, mix_seed(seed, 1))?,
        altimeter: synth_altimeter(traj, alt_sigma, mix_seed(seed, 2))?,
        camera: traj.times(CAMERA_RATE),
    })
}

/// A timed sequence of camera frames.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;

    fn time(&self, index: usize) -> f64;

    fn frame(&self, index: usize) -> Result<ImagePlane>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frames rendered on demand from a trajectory.
pub struct SimFrames<'a> {
    pub trajectory: &'a Trajectory,
    pub ground: &'a GroundTexture,
    pub camera: CameraIntrinsics,
    pub times: Vec<f64>,
}

impl FrameSource for SimFrames<'_> {
    fn len(&self) -> usize {
        self.times.len()
    }

    fn time(&self, index: usize) -> f64 {
        self.times[index]
    }

    fn frame(&self, index: usize) -> Result<ImagePlane> {
        let t = *self.times.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("frame {index} out of range for {} frames", self.times.len()))
        })?;
        render_view(self.ground, &self.trajectory.sample(t), &self.camera)
    }
}

/// Frames stored as `frame_NNNNNN.png` next to a `frames.csv` index.
pub struct DirFrames {
    dir: PathBuf,
    entries: Vec<(usize, f64)>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

impl DirFrames {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let rows = read_csv(dir.join("frames.csv"), &["index", "t"])?;
        let entries: Vec<(usize, f64)> = rows.iter().map(|r| (r[0] as usize, r[1])).collect();
        if entries.windows(2).any(|w| !(w[1].1 > w[0].1)) {
            return Err(Error::format(dir.join("frames.csv"), "frame timestamps are not increasing"));
        }
        Ok(DirFrames { dir, entries })
    }
}

impl FrameSource for DirFrames {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn time(&self, index: usize) -> f64 {
        self.entries[index].1
    }

    fn frame(&self, index: usize) -> Result<ImagePlane> {
        let (id, _) = *self.entries.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("frame {index} out of range for {} frames", self.entries.len()))
        })?;
        ImagePlane::load(self.dir.join(frame_file_name(id)))
    }
}

/// Renders every `every`-th frame in parallel and writes the PNGs plus
/// `frames.csv`.
pub fn write_frames(source: &dyn FrameSource, dir: impl AsRef<Path>, every: usize) -> Result<usize> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let every = every.max(1);
    let picked: Vec<usize> = (0..source.len()).step_by(every).collect();
    picked
        .par_iter()
        .try_for_each(|&i| source.frame(i)?.save_png(dir.join(frame_file_name(i))))?;
    let mut csv = String::from("index,t\n");
    for &i in &picked {
        let _ = writeln!(csv, "{i},{}", source.time(i));
    }
    let path = dir.join("frames.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(picked.len())
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn imu_csv(imu: &[ImuSample]) -> String {
    let mut out = String::from("t,gx,gy,gz,ax,ay,az,mx,my,mz\n");
    for s in imu {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z, s.mag.x, s.mag.y, s.mag.z
        );
    }
    out
}

pub fn alt_csv(alt: &[AltSample]) -> String {
    let mut out = String::from("t,z\n");
    for s in alt {
        let _ = writeln!(out, "{},{}", s.t, s.z);
    }
    out
}

/// Trajectory rows `t,x,y,z,qw,qx,qy,qz`.
pub fn trajectory_csv(samples: &[TrajectorySample]) -> String {
    let mut out = String::from("t,x,y,z,qw,qx,qy,qz\n");
    for s in samples {
        let q = s.attitude.quaternion();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.t, s.position.x, s.position.y, s.position.z, q.w, q.i, q.j, q.k
        );
    }
    out
}

pub fn write_sensor_log(log: &SensorLog, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("imu.csv"), imu_csv(&log.imu))?;
    write_text(&dir.join("alt.csv"), alt_csv(&log.altimeter))
}

pub fn write_trajectory(samples: &[TrajectorySample], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), trajectory_csv(samples))
}

/// Reads a numeric CSV whose header must equal `header`.
pub fn read_csv(path: impl AsRef<Path>, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    if head != header {
        return Err(Error::format(
            path,
            format!("expected header `{}`, found `{}`", header.join(","), head.join(",")),
        ));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
            if row.len() != header.len() {
                return Err(Error::format(
                    path,
                    format!("line {}: expected {} fields, found {}", i + 2, header.len(), row.len()),
                ));
            }
            Ok(row)
        })
        .collect()
}

pub fn read_sensor_log(dir: impl AsRef<Path>, frames: &dyn FrameSource) -> Result<SensorLog> {
    let dir = dir.as_ref();
    let imu = read_csv(dir.join("imu.csv"), &["t", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz"])?
        .into_iter()
        .map(|r| ImuSample {
            t: r[0],
            gyro: Vector3::new(r[1], r[2], r[3]),
            accel: Vector3::new(r[4], r[5], r[6]),
            mag: Vector3::new(r[7], r[8], r[9]),
        })
        .collect();
    let altimeter = read_csv(dir.join("alt.csv"), &["t", "z"])?
        .into_iter()
        .map(|r| AltSample { t: r[0], z: r[1] })
        .collect();
    Ok(SensorLog {
        imu,
        altimeter,
        camera: (0..frames.len()).map(|i| frames.time(i)).collect(),
    })
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectorySample>> {
    let path = path.as_ref();
    read_csv(path, &["t", "x", "y", "z", "qw", "qx", "qy", "qz"])?
        .into_iter()
        .map(|r| {
            let q = nalgebra::Quaternion::new(r[4], r[5], r[6], r[7]);
            if !(q.norm() > 0.0) {
                return Err(Error::format(path, format!("zero quaternion at t = {}", r[0])));
            }
            Ok(TrajectorySample {
                t: r[0],
                position: Vector3::new(r[1], r[2], r[3]),
                attitude: UnitQuaternion::from_quaternion(q),
            })
        })
        .collect()
}
