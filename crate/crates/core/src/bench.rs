//! Synthetic pair protocol, pixel error metrics and benchmark reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::estimator::PairEstimator;
use crate::imaging::{sample_at, ImagePlane};
use crate::warp::{params_to_pixel_warp, PixelWarp, WarpParams};

pub const CROP_SIZE: usize = 300;
pub const PATCH_SIZE: usize = 128;

/// Half-widths of the uniform warp distribution `(|s|, |tx|, |ty|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpRange {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl WarpRange {
    pub const GAMMA1: WarpRange = WarpRange {
        s: 0.25,
        tx: 0.20,
        ty: 0.20,
    };
    pub const GAMMA2: WarpRange = WarpRange {
        s: 0.50,
        tx: 0.40,
        ty: 0.40,
    };
    pub const ZERO: WarpRange = WarpRange {
        s: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(s: f64, tx: f64, ty: f64) -> Result<Self> {
        let r = WarpRange { s, tx, ty };
        if [s, tx, ty].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("warp range {s},{tx},{ty} must be >= 0")));
        }
        if s >= 1.0 {
            return Err(Error::ParameterDomain(format!("scale range {s} reaches 1 + s <= 0")));
        }
        Ok(r)
    }

    /// `gamma1`, `gamma2` or `s,tx,ty`.
    pub fn parse(text: &str) -> Result<(String, Self)> {
        match text.trim() {
            "gamma1" | "g1" => Ok(("gamma1".into(), Self::GAMMA1)),
            "gamma2" | "g2" => Ok(("gamma2".into(), Self::GAMMA2)),
            other => {
                let v: Vec<f64> = other
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::InvalidArgument(format!("bad warp range `{other}`")))?;
                if v.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "warp range `{other}` needs three values s,tx,ty"
                    )));
                }
                Ok((other.to_string(), Self::new(v[0], v[1], v[2])?))
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> WarpParams {
        let mut u = || rng.random_range(-1.0..=1.0);
        let (a, b, c) = (u(), u(), u());
        WarpParams::pseudo_similarity(a * self.s, b * self.tx, c * self.ty)
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A training or evaluation sample.
#[derive(Debug, Clone)]
pub struct Pair {
    pub p1: ImagePlane,
    pub p2: ImagePlane,
    pub truth: WarpParams,
}

/// Random 300×300 crop `I1`, `I2 = warp(I1, h)`, and the centre 128×128
/// patches of both. `h` is expressed in patch-normalized coordinates.
pub fn gen_pair(src: &ImagePlane, range: &WarpRange, seed: u64) -> Result<Pair> {
    if src.width() < CROP_SIZE || src.height() < CROP_SIZE {
        return Err(Error::InvalidArgument(format!(
            "source image {}x{} is smaller than {CROP_SIZE}x{CROP_SIZE}",
            src.width(),
            src.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(0..=src.width() - CROP_SIZE);
    let y0 = rng.random_range(0..=src.height() - CROP_SIZE);
    let truth = range.sample(&mut rng);
    let off = ((CROP_SIZE - PATCH_SIZE) / 2) as f64;
    let (cx, cy) = (x0 as f64 + off, y0 as f64 + off);
    let shift = |dx: f64, dy: f64| {
        PixelWarp::new(
            nalgebra::Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
            PATCH_SIZE,
            PATCH_SIZE,
        )
        .expect("translation is invertible")
    };
    let p1 = src.crop(cx as usize, cy as usize, PATCH_SIZE, PATCH_SIZE)?;
    // p2(x) = I1(W⁻¹ x) in patch coordinates, read from the full source
    let w = params_to_pixel_warp(&truth, PATCH_SIZE, PATCH_SIZE)?;
    let p2 = sample_at(src, &shift(cx, cy).after(&w.inverse()), PATCH_SIZE, PATCH_SIZE);
    Ok(Pair { p1, p2, truth })
}

/// Draws pair `index` of a deterministic pair set over a corpus.
pub fn corpus_pair(corpus: &dyn Corpus, range: &WarpRange, seed: u64, index: usize) -> Result<Pair> {
    if corpus.is_empty() {
        return Err(Error::DegenerateInput("empty corpus".into()));
    }
    let pair_seed = mix_seed(seed, index as u64);
    let image = (mix_seed(pair_seed, 0xC0) % corpus.len() as u64) as usize;
    gen_pair(&corpus.image(image)?, range, pair_seed)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median pixel scale and translation errors.
pub fn metric_errors(preds: &[WarpParams], truths: &[WarpParams], width: usize, height: usize) -> Result<(f64, f64)> {
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::DegenerateInput("no samples to score".into()));
    }
    let (w, h) = (width as f64, height as f64);
    let diag = ((w * w + h * h) / 2.0).sqrt();
    let mut es: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| diag * (p.s() - t.s()).abs()).collect();
    let mut et: Vec<f64> = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (w * (p.tx() - t.tx())).hypot(h * (p.ty() - t.ty())) / 2.0)
        .collect();
    Ok((median(&mut es), median(&mut et)))
}

/// Accuracy relative to the identity prediction, in percent.
pub fn accuracy(e_scale: f64, e_trans: f64, id_scale: f64, id_trans: f64) -> Result<f64> {
    let denom = id_scale + id_trans;
    if !(denom > 0.0) {
        return Err(Error::DegenerateInput("identity errors are zero".into()));
    }
    Ok((1.0 - (e_scale + e_trans) / denom) * 100.0)
}

/// Monte-Carlo errors of always predicting the zero warp.
pub fn identity_baseline(range: &WarpRange, width: usize, height: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truths: Vec<WarpParams> = (0..n).map(|_| range.sample(&mut rng)).collect();
    let zeros = vec![WarpParams::pseudo_similarity(0.0, 0.0, 0.0); n];
    metric_errors(&zeros, &truths, width, height)
}

/// One row of a benchmark report.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub estimator: String,
    pub gamma: String,
    pub e_scale: f64,
    pub e_trans: f64,
    pub accuracy: f64,
    pub n: usize,
    pub params: usize,
    pub flops: usize,
    pub ms_per_pair: Option<f64>,
    pub failures: usize,
}

pub const REPORT_HEADER: &str = "estimator,gamma,e_scale_px,e_trans_px,accuracy_pct,n,params,flops,ms_per_pair,failures";

pub fn report_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in records {
        let ms = r.ms_per_pair.map(|v| format!("{v:.3}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.2},{},{},{},{},{}",
            r.estimator, r.gamma, r.e_scale, r.e_trans, r.accuracy, r.n, r.params, r.flops, ms, r.failures
        );
    }
    out
}

pub fn write_report(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_csv(records)).map_err(|e| Error::io(path, e))
}

/// Options for [`run_benchmark`].
#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub n_pairs: usize,
    pub seed: u64,
    /// Record wall time per pair; off by default so reports are
    /// reproducible byte for byte.
    pub timing: bool,
}

/// Scores every estimator on one shared pair set per range. Each range
/// gets an identity row first; an estimator that fails on a pair is
/// scored with the identity prediction for it and the failure tallied.
pub fn run_benchmark(
    corpus: &dyn Corpus,
    estimators: &[&dyn PairEstimator],
    ranges: &[(String, WarpRange)],
    opts: &BenchOptions,
) -> Result<Vec<BenchRecord>> {
    if corpus.is_empty() {
        return Err(Error::DegenerateInput("empty corpus".into()));
    }
    if opts.n_pairs == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one pair".into()));
    }
    let mut records = Vec::new();
    for (gamma_id, range) in ranges {
        let pairs: Vec<Pair> = (0..opts.n_pairs)
            .into_par_iter()
            .map(|i| corpus_pair(corpus, range, opts.seed, i))
            .collect::<Result<_>>()?;
        let truths: Vec<WarpParams> = pairs.iter().map(|p| p.truth).collect();
        let zeros = vec![WarpParams::pseudo_similarity(0.0, 0.0, 0.0); pairs.len()];
        let (id_s, id_t) = metric_errors(&zeros, &truths, PATCH_SIZE, PATCH_SIZE)?;
        records.push(BenchRecord {
            estimator: "identity".into(),
            gamma: gamma_id.clone(),
            e_scale: id_s,
            e_trans: id_t,
            accuracy: 0.0,
            n: pairs.len(),
            params: 0,
            flops: 0,
            ms_per_pair: None,
            failures: 0,
        });
        for est in estimators {
            if est.name() == "identity" {
                continue;
            }
            let start = Instant::now();
            let outcomes: Vec<Option<WarpParams>> = pairs
                .par_iter()
                .map(|p| est.estimate(&p.p1, &p.p2).ok())
                .collect();
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            let failures = outcomes.iter().filter(|o| o.is_none()).count();
            let preds: Vec<WarpParams> = outcomes
                .into_iter()
                .map(|o| o.unwrap_or(WarpParams::pseudo_similarity(0.0, 0.0, 0.0)))
                .collect();
            let (es, et) = metric_errors(&preds, &truths, PATCH_SIZE, PATCH_SIZE)?;
            let (params, flops) = est.cost();
            records.push(BenchRecord {
                estimator: est.name(),
                gamma: gamma_id.clone(),
                e_scale: es,
                e_trans: et,
                accuracy: accuracy(es, et, id_s, id_t).unwrap_or(0.0),
                n: pairs.len(),
                params,
                flops,
                ms_per_pair: opts.timing.then(|| elapsed / pairs.len() as f64),
                failures,
            });
        }
    }
    Ok(records)
}
