//! Frame-pair warp estimators and the cascade runner that chains them.

mod fft;
mod lk;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub use fft::{fft_scale_translation, fft_translation, FftShift};
pub use lk::{lk_refine, LkOptions, LkResult};

use crate::error::{Error, Result};
use crate::imaging::{preprocess, to_gray, warp_image, ImagePlane};
use crate::nn::ModelWeights;
use crate::warp::{compose, WarpModel, WarpParams};

/// Ordered warp blocks, e.g. `Tx2,Sx2` (two translation blocks, then two
/// scale blocks).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CascadeConfig {
    blocks: Vec<WarpModel>,
}

impl CascadeConfig {
    pub fn new(blocks: Vec<WarpModel>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("cascade needs at least one block".into()));
        }
        Ok(CascadeConfig { blocks })
    }

    pub fn single(model: WarpModel) -> Self {
        CascadeConfig { blocks: vec![model] }
    }

    pub fn blocks(&self) -> &[WarpModel] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Model in which increments are accumulated: Similarity if any block
    /// estimates rotation, PseudoSimilarity otherwise.
    pub fn accumulation_model(&self) -> WarpModel {
        if self.blocks.contains(&WarpModel::Similarity) {
            WarpModel::Similarity
        } else {
            WarpModel::PseudoSimilarity
        }
    }
}

impl fmt::Display for CascadeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut i = 0;
        let mut first = true;
        while i < self.blocks.len() {
            let m = self.blocks[i];
            let run = self.blocks[i..].iter().take_while(|&&b| b == m).count();
            if !first {
                f.write_str(",")?;
            }
            write!(f, "{}x{}", m.tag(), run)?;
            first = false;
            i += run;
        }
        Ok(())
    }
}

impl FromStr for CascadeConfig {
    type Err = Error;

    /// Comma-separated `TAG[xN]`, where the multiplier may be written as
    /// `x`, `*` or `×`.
    fn from_str(s: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let (tag, count) = match part.find(['x', '*', '×']) {
                Some(i) => {
                    let sep_len = part[i..].chars().next().map_or(1, char::len_utf8);
                    let n = part[i + sep_len..].trim().parse::<usize>().map_err(|_| {
                        Error::InvalidArgument(format!("bad block multiplicity in `{part}`"))
                    })?;
                    (part[..i].trim(), n)
                }
                None => (part, 1),
            };
            if count == 0 {
                return Err(Error::InvalidArgument(format!("zero multiplicity in `{part}`")));
            }
            let model: WarpModel = tag.parse()?;
            blocks.extend(std::iter::repeat_n(model, count));
        }
        CascadeConfig::new(blocks)
    }
}

/// How each cascade block is computed.
#[derive(Debug, Clone)]
pub enum EstimatorKind {
    /// Always returns the zero increment.
    Identity,
    LucasKanade(LkOptions),
    Fft,
    /// Per-block conv regressor; the weights carry their own cascade.
    Cnn(Arc<ModelWeights>),
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            EstimatorKind::LucasKanade(o) => o.validate(),
            _ => Ok(()),
        }
    }
}

/// A block increment that raises the mean absolute residual by more than
/// this is rejected and the block acts as identity.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// Mean absolute difference over pixels valid in both images, `None`
/// when they do not overlap.
pub fn mean_abs_residual(a: &ImagePlane, b: &ImagePlane) -> Option<f64> {
    let c = a.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (&ma, &mb)) in a.mask().iter().zip(b.mask()).enumerate() {
        if ma && mb {
            for k in 0..c {
                sum += (a.data()[i * c + k] - b.data()[i * c + k]).abs();
            }
            n += c;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Runs a cascade with an arbitrary block estimator. Block `i` sees
/// `warp(p1, h_acc)` and `p2` and returns an increment in its own model,
/// or `None` when it cannot estimate (the block is then skipped). The
/// increment is applied after the accumulated warp, unless it makes the
/// photometric residual worse by more than [`RESIDUAL_TOL`].
pub fn cascade_with<F>(p1: &ImagePlane, p2: &ImagePlane, cfg: &CascadeConfig, mut block: F) -> Result<WarpParams>
where
    F: FnMut(usize, WarpModel, &ImagePlane, &ImagePlane) -> Result<Option<WarpParams>>,
{
    let acc_model = cfg.accumulation_model();
    let mut h_acc = WarpParams::identity(acc_model);
    let mut warped = p1.clone();
    let mut residual = mean_abs_residual(&warped, p2);
    for (i, &model) in cfg.blocks().iter().enumerate() {
        let Some(delta) = block(i, model, &warped, p2)? else {
            continue;
        };
        if delta.model() != model {
            return Err(Error::InvalidArgument(format!(
                "block {i} returned a {} warp, expected {model}",
                delta.model()
            )));
        }
        if delta.is_identity() {
            continue;
        }
        let lifted = delta.lift(acc_model)?;
        let candidate = if h_acc.is_identity() {
            lifted
        } else {
            compose(&lifted, &h_acc)?
        };
        let next = match warp_image(p1, &candidate) {
            Ok(w) => w,
            Err(Error::ParameterDomain(_)) => continue,
            Err(e) => return Err(e),
        };
        let r = mean_abs_residual(&next, p2);
        let worse = match (residual, r) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(before), Some(after)) => after > before + RESIDUAL_TOL,
        };
        if !worse {
            h_acc = candidate;
            warped = next;
            residual = r;
        }
    }
    Ok(h_acc)
}

/// Estimates the warp taking `p1` to `p2` with a cascade of `est` blocks.
pub fn cascade_estimate(p1: &ImagePlane, p2: &ImagePlane, cfg: &CascadeConfig, est: &EstimatorKind) -> Result<WarpParams> {
    cascade_estimate_counted(p1, p2, cfg, est).map(|(h, _)| h)
}

/// Like [`cascade_estimate`], also returning how many blocks could not
/// estimate and were skipped.
pub fn cascade_estimate_counted(
    p1: &ImagePlane,
    p2: &ImagePlane,
    cfg: &CascadeConfig,
    est: &EstimatorKind,
) -> Result<(WarpParams, usize)> {
    if !p1.same_shape(p2) {
        return Err(Error::ShapeMismatch(format!(
            "pair shapes differ: {}x{}x{} vs {}x{}x{}",
            p1.width(),
            p1.height(),
            p1.channels(),
            p2.width(),
            p2.height(),
            p2.channels()
        )));
    }
    est.validate()?;
    let mut skipped = 0;
    let mut count = |r: Option<WarpParams>| {
        skipped += usize::from(r.is_none());
        r
    };
    let h = match est {
        EstimatorKind::Identity => cascade_with(p1, p2, cfg, |_, m, _, _| Ok(Some(WarpParams::identity(m)))),
        EstimatorKind::LucasKanade(opts) => {
            let (g1, g2) = (to_gray(p1), to_gray(p2));
            cascade_with(&g1, &g2, cfg, |_, m, a, b| {
                let r = lk_refine(a, b, &WarpParams::identity(m), opts)?;
                Ok(count((!r.degenerate).then_some(r.h)))
            })
        }
        EstimatorKind::Fft => {
            let (g1, g2) = (to_gray(p1), to_gray(p2));
            cascade_with(&g1, &g2, cfg, |_, m, a, b| fft_block(a, b, m).map(&mut count))
        }
        EstimatorKind::Cnn(weights) => {
            if weights.cascade() != cfg {
                return Err(Error::InvalidArgument(format!(
                    "weights were trained for cascade {}, not {cfg}",
                    weights.cascade()
                )));
            }
            let mode = weights.input_mode();
            let b = preprocess(p2, mode);
            cascade_with(p1, p2, cfg, |i, _, a, _| {
                let stack = ImagePlane::stack(&[&preprocess(a, mode), &b])?;
                weights.forward_block(i, &stack).map(Some)
            })
        }
    }?;
    Ok((h, skipped))
}

fn fft_block(a: &ImagePlane, b: &ImagePlane, model: WarpModel) -> Result<Option<WarpParams>> {
    let (w, h) = (a.width() as f64, a.height() as f64);
    match model {
        WarpModel::Translation => {
            let r = fft_translation(a, b)?;
            Ok(r.confident.then(|| WarpParams::translation(r.tx / (w / 2.0), r.ty / (h / 2.0))))
        }
        WarpModel::Scale => Ok(fft_scale_translation(a, b)?.map(|p| WarpParams::scale(p.s()))),
        WarpModel::PseudoSimilarity => fft_scale_translation(a, b),
        WarpModel::Similarity => Err(Error::InvalidArgument(
            "the FFT estimator does not recover rotation".into(),
        )),
    }
}

/// Anything that maps an image pair to a warp; used by the benchmark.
pub trait PairEstimator: Sync {
    fn name(&self) -> String;

    fn estimate(&self, p1: &ImagePlane, p2: &ImagePlane) -> Result<WarpParams>;

    /// `(parameters, multiply-accumulates)` per pair, zero for classical
    /// methods.
    fn cost(&self) -> (usize, usize) {
        (0, 0)
    }
}

/// A named cascade of one estimator kind.
#[derive(Debug, Clone)]
pub struct CascadeEstimator {
    pub name: String,
    pub cascade: CascadeConfig,
    pub kind: EstimatorKind,
}

impl CascadeEstimator {
    pub fn new(name: impl Into<String>, cascade: CascadeConfig, kind: EstimatorKind) -> Self {
        CascadeEstimator {
            name: name.into(),
            cascade,
            kind,
        }
    }
}

impl PairEstimator for CascadeEstimator {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn estimate(&self, p1: &ImagePlane, p2: &ImagePlane) -> Result<WarpParams> {
        cascade_estimate(p1, p2, &self.cascade, &self.kind)
    }

    fn cost(&self) -> (usize, usize) {
        match &self.kind {
            EstimatorKind::Cnn(w) => w.count_params_flops(),
            _ => (0, 0),
        }
    }
}
