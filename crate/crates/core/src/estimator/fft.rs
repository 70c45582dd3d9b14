use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::imaging::{sample_at, to_gray, ImagePlane};
use crate::warp::{params_to_pixel_warp, WarpParams};

/// Phase-correlation result: `p2(x) ≈ p1(x − t)`, `t` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FftShift {
    pub tx: f64,
    pub ty: f64,
    /// Height of the correlation peak relative to the total correlation
    /// energy; 1 for an exact circular shift.
    pub confidence: f64,
    pub confident: bool,
}

const MIN_CONFIDENCE: f64 = 0.01;
const SCALE_RANGE: (f64, f64) = (-0.5, 1.0);

struct Spectrum {
    n: usize,
    data: Vec<Complex64>,
}

fn fft2(field: &[f64], w: usize, h: usize, n: usize, inverse: bool) -> Spectrum {
    let mut data = vec![Complex64::new(0.0, 0.0); n * n];
    for y in 0..h {
        for x in 0..w {
            data[y * n + x].re = field[y * w + x];
        }
    }
    transform(&mut data, n, inverse);
    Spectrum { n, data }
}

fn transform(data: &mut [Complex64], n: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
}

/// Zero-mean intensities over the valid region, zero elsewhere.
fn centered(img: &ImagePlane) -> Vec<f64> {
    let g = to_gray(img);
    let valid = g.valid_count().max(1) as f64;
    let mean = g
        .data()
        .iter()
        .zip(g.mask())
        .filter(|(_, m)| **m)
        .map(|(v, _)| v)
        .sum::<f64>()
        / valid;
    g.data()
        .iter()
        .zip(g.mask())
        .map(|(v, m)| if *m { v - mean } else { 0.0 })
        .collect()
}

fn hann(k: f64, n: f64) -> f64 {
    0.5 * (1.0 + (2.0 * PI * k / n).cos())
}

fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    // neighbours equal up to roundoff: the peak is centred
    if den.abs() < 1e-300 || (l - r).abs() <= 1e-12 * c.abs() {
        0.0
    } else {
        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
    }
}

/// Phase correlation with Hann apodization of the cross-power spectrum,
/// integer peak search and parabolic sub-pixel refinement. The images are
/// zero-padded to a power-of-two square.
pub fn fft_translation(p1: &ImagePlane, p2: &ImagePlane) -> Result<FftShift> {
    if p1.width() != p2.width() || p1.height() != p2.height() {
        return Err(Error::ShapeMismatch("FFT pair differs in size".into()));
    }
    let (w, h) = (p1.width(), p1.height());
    let n = w.max(h).next_power_of_two();
    let f1 = fft2(&centered(p1), w, h, n, false);
    let f2 = fft2(&centered(p2), w, h, n, false);
    let nf = n as f64;
    let signed = |k: usize| if k < n / 2 { k as f64 } else { k as f64 - nf };
    let mut cross: Vec<Complex64> = f2
        .data
        .iter()
        .zip(&f1.data)
        .enumerate()
        .map(|(i, (a, b))| {
            let c = a * b.conj();
            let m = c.norm();
            if m < 1e-12 {
                Complex64::new(0.0, 0.0)
            } else {
                let (ky, kx) = (i / n, i % n);
                c / m * hann(signed(kx), nf) * hann(signed(ky), nf)
            }
        })
        .collect();
    let energy: f64 = cross.iter().map(|c| c.norm()).sum();
    transform(&mut cross, n, true);
    let corr: Vec<f64> = cross.iter().map(|c| c.re).collect();
    let (peak, &pv) = corr
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let confidence = if energy > 0.0 { pv / energy } else { 0.0 };
    let (py, px) = (peak / n, peak % n);
    let at = |x: usize, y: usize| corr[(y % n) * n + (x % n)];
    let dx = parabolic(at(px + n - 1, py), pv, at(px + 1, py));
    let dy = parabolic(at(px, py + n - 1), pv, at(px, py + 1));
    Ok(FftShift {
        tx: signed(px) + dx,
        ty: signed(py) + dy,
        confidence,
        confident: confidence >= MIN_CONFIDENCE,
    })
}

/// Log-polar magnitude spectrum `L(ρ, θ)`, `θ ∈ [0, π)`, of the
/// Hann-windowed image.
fn log_polar(img: &ImagePlane, n_rho: usize, n_theta: usize, r_min: f64, r_max: f64) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let n = w.max(h).next_power_of_two();
    let field: Vec<f64> = centered(img)
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let wx = 0.5 * (1.0 - (2.0 * PI * x / (w as f64 - 1.0)).cos());
            let wy = 0.5 * (1.0 - (2.0 * PI * y / (h as f64 - 1.0)).cos());
            v * wx * wy
        })
        .collect();
    let spec = fft2(&field, w, h, n, false);
    // centred log magnitude
    let half = n / 2;
    let mag: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = (i / n, i % n);
            let (sy, sx) = ((y + half) % n, (x + half) % n);
            spec.data[sy * spec.n + sx].norm().ln_1p()
        })
        .collect();
    let at = |x: f64, y: f64| -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let g = |xx: usize, yy: usize| mag[yy.min(n - 1) * n + xx.min(n - 1)];
        (g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx) * (1.0 - fy) + (g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx) * fy
    };
    let step = (r_max / r_min).ln() / (n_rho - 1) as f64;
    let mut out = vec![0.0; n_rho * n_theta];
    for t in 0..n_theta {
        let th = PI * t as f64 / n_theta as f64;
        let (s, c) = th.sin_cos();
        for r in 0..n_rho {
            let rad = r_min * (step * r as f64).exp();
            out[t * n_rho + r] = at(half as f64 + rad * c, half as f64 + rad * s);
        }
    }
    out
}

/// Scale from a 1-D correlation of log-polar spectra along log-radius
/// (summed over angle), then translation from phase correlation of the
/// descaled pair. Returns `None` when the translation peak is not
/// confident.
pub fn fft_scale_translation(p1: &ImagePlane, p2: &ImagePlane) -> Result<Option<WarpParams>> {
    if p1.width() != p2.width() || p1.height() != p2.height() {
        return Err(Error::ShapeMismatch("FFT pair differs in size".into()));
    }
    let (w, h) = (p1.width(), p1.height());
    let n = w.max(h).next_power_of_two() as f64;
    let (n_rho, n_theta) = (256usize, 180usize);
    let (r_min, r_max) = (2.0, 0.45 * n);
    let step = (r_max / r_min).ln() / (n_rho - 1) as f64;
    let prep = |img: &ImagePlane| -> Vec<f64> {
        // derivative along log-radius removes the spectral slope
        let lp = log_polar(img, n_rho, n_theta, r_min, r_max);
        let mut d = vec![0.0; (n_rho - 1) * n_theta];
        for t in 0..n_theta {
            for r in 0..n_rho - 1 {
                d[t * (n_rho - 1) + r] = lp[t * n_rho + r + 1] - lp[t * n_rho + r];
            }
        }
        d
    };
    let (a, b) = (prep(p1), prep(p2));
    let len = n_rho - 1;
    // zoom by k shrinks the spectrum: b(ρ) = a(ρ + ln k)
    let score = |shift: i64| -> f64 {
        let (mut sab, mut saa, mut sbb, mut sa, mut sb, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for t in 0..n_theta {
            for r in 0..len as i64 {
                let ra = r + shift;
                if ra < 0 || ra >= len as i64 {
                    continue;
                }
                let (x, y) = (a[t * len + ra as usize], b[t * len + r as usize]);
                sab += x * y;
                saa += x * x;
                sbb += y * y;
                sa += x;
                sb += y;
                cnt += 1.0;
            }
        }
        if cnt < 2.0 {
            return f64::NEG_INFINITY;
        }
        let cov = sab - sa * sb / cnt;
        let va = saa - sa * sa / cnt;
        let vb = sbb - sb * sb / cnt;
        if va <= 0.0 || vb <= 0.0 {
            0.0
        } else {
            cov / (va * vb).sqrt()
        }
    };
    let lo = ((1.0 + SCALE_RANGE.0).ln() / step).floor() as i64;
    let hi = ((1.0 + SCALE_RANGE.1).ln() / step).ceil() as i64;
    let scores: Vec<(i64, f64)> = (lo..=hi).map(|k| (k, score(k))).collect();
    let (best_i, &(best_k, best_v)) = scores
        .iter()
        .enumerate()
        .max_by(|x, y| x.1 .1.total_cmp(&y.1 .1))
        .expect("nonempty range");
    let frac = if best_i > 0 && best_i + 1 < scores.len() {
        parabolic(scores[best_i - 1].1, best_v, scores[best_i + 1].1)
    } else {
        0.0
    };
    let s = ((best_k as f64 + frac) * step).exp() - 1.0;

    // q(x) = p2(W_s x) is p1 shifted by t / (1 + s)
    let descaled = sample_at(p2, &params_to_pixel_warp(&WarpParams::scale(s), w, h)?, w, h);
    let shift = fft_translation(p1, &descaled)?;
    if !shift.confident {
        return Ok(None);
    }
    let k = 1.0 + s;
    Ok(Some(WarpParams::pseudo_similarity(
        s,
        k * shift.tx / (w as f64 / 2.0),
        k * shift.ty / (h as f64 / 2.0),
    )))
}
