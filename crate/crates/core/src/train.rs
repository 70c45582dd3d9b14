//! ADAM, the supervised and photometric training loops over synthetic
//! pairs, and the teacher/student compression pathways.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bench::{gen_pair, mix_seed, Pair, WarpRange, PATCH_SIZE};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::estimator::CascadeConfig;
use crate::imaging::{preprocess, warp_image, ImagePlane, Preprocess};
use crate::loss::{l2_rows, loss_unsupervised, projection_rows, LossSpec};
use crate::nn::{block_backward, block_forward, sanitize_increment, Layout, ModelWeights, Scalar, SMALL_WIDTHS};
use crate::warp::{compose, invert, project, WarpParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update; increments `state.t` first.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "ADAM over {} params with {} grads and {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] as f64;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] = (params[i] as f64 - cfg.lr * mh / (vh.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

/// What the network is trained against.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// ℓ₂ distance to the synthetic ground truth.
    Supervised,
    /// Photometric loss of the predicted warp; needs no labels.
    Photometric(LossSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    pub objective: Objective,
    pub gamma: WarpRange,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub input_mode: Preprocess,
    pub widths: Vec<usize>,
    /// Share of corpus images held out for validation (at least one).
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch: 32,
            epochs: 100,
            objective: Objective::Supervised,
            gamma: WarpRange::GAMMA1,
            patience: 5,
            seed: 0,
            input_mode: Preprocess::Gray,
            widths: SMALL_WIDTHS.to_vec(),
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", self.adam.lr)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.epochs == 0 || self.epochs > 100 {
            return Err(Error::InvalidArgument(format!("epochs {} must be in 1..=100", self.epochs)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {} must be in [0, 1)",
                self.val_fraction
            )));
        }
        if let Objective::Photometric(spec) = &self.objective {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
    }
    out
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub weights: ModelWeights,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Compression pathway for [`train_student`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StudentMode {
    /// Train the small network on labels alone.
    Scratch,
    /// Train teacher and student jointly with the three-term loss.
    Projection { lambdas: (f64, f64, f64) },
    /// Match the frozen teacher's predictions.
    Distill,
}

impl StudentMode {
    pub const DEFAULT_LAMBDAS: (f64, f64, f64) = (1.0, 1.0, 0.1);
}

#[derive(Debug, Clone)]
enum Mode {
    Supervised,
    Photometric(LossSpec),
    Distill,
    Projection((f64, f64, f64)),
}

/// Supervised residual label of a block: the part of `truth` left after
/// `h_acc`, projected to the block's model.
pub fn residual_label(truth: &WarpParams, h_acc: &WarpParams, model: crate::warp::WarpModel) -> Result<WarpParams> {
    let t = truth.lift(h_acc.model())?;
    let r = if h_acc.is_identity() {
        t
    } else {
        compose(&t, &invert(h_acc)?)?
    };
    project(&r, model)
}

fn split(len: usize, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if len < 2 {
        return Err(Error::DegenerateInput(format!(
            "corpus of {len} images cannot be split into train and validation"
        )));
    }
    let n_val = ((len as f64 * cfg.val_fraction).round() as usize).clamp(1, len - 1);
    Ok(((0..len - n_val).collect(), (len - n_val..len).collect()))
}

fn stack_inputs<T: Scalar>(warped: &[ImagePlane], p2s: &[ImagePlane], mode: Preprocess) -> Result<Vec<T>> {
    let parts: Vec<Vec<T>> = warped
        .par_iter()
        .zip(p2s)
        .map(|(a, b)| {
            let s = ImagePlane::stack(&[&preprocess(a, mode), b])?;
            Ok(s.data().iter().map(|&v| T::of(v)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

fn warp_all(pairs: &[Pair], h_acc: &[WarpParams]) -> Result<Vec<ImagePlane>> {
    pairs
        .par_iter()
        .zip(h_acc)
        .map(|(p, h)| {
            if h.is_identity() {
                Ok(p.p1.clone())
            } else {
                warp_image(&p.p1, h)
            }
        })
        .collect()
}

fn rows<T: Scalar>(out: &[T], dof: usize) -> Vec<Vec<f64>> {
    out.chunks_exact(dof)
        .map(|r| r.iter().map(|v| v.to_f64().expect("finite network output")).collect())
        .collect()
}

fn flat<T: Scalar>(g: &[Vec<f64>]) -> Vec<T> {
    g.iter().flatten().map(|&v| T::of(v)).collect()
}

fn accumulate(h_acc: &mut [WarpParams], deltas: &[WarpParams]) -> Result<()> {
    for (h, d) in h_acc.iter_mut().zip(deltas) {
        let lifted = d.lift(h.model())?;
        *h = if h.is_identity() { lifted } else { compose(&lifted, h)? };
    }
    Ok(())
}

/// Batched cascade inference.
pub fn predict_batch(weights: &ModelWeights, pairs: &[Pair]) -> Result<Vec<WarpParams>> {
    let acc = weights.cascade().accumulation_model();
    let mode = weights.input_mode();
    let p2s: Vec<ImagePlane> = pairs.par_iter().map(|p| preprocess(&p.p2, mode)).collect();
    let mut h_acc = vec![WarpParams::identity(acc); pairs.len()];
    for lay in &weights.layout().blocks {
        let warped = warp_all(pairs, &h_acc)?;
        let x = stack_inputs::<f32>(&warped, &p2s, mode)?;
        let (out, _) = block_forward(lay, &weights.params, x, pairs.len());
        let deltas = rows(&out, lay.dense.fout)
            .iter()
            .map(|r| sanitize_increment(lay.model, r))
            .collect::<Result<Vec<_>>>()?;
        accumulate(&mut h_acc, &deltas)?;
    }
    Ok(h_acc)
}

/// Supervised objective of a batch: the sum over blocks of the mean
/// squared distance between each block's output and its residual label,
/// with its gradient and the final cascade predictions. Block inputs are
/// warped by the earlier blocks' predictions, but no gradient flows
/// through those warps.
pub fn supervised_loss_grad<T: Scalar>(
    layout: &Layout,
    params: &[T],
    pairs: &[Pair],
    mode: Preprocess,
) -> Result<(f64, Vec<T>, Vec<WarpParams>)> {
    let blocks: Vec<_> = layout.blocks.iter().map(|b| b.model).collect();
    let acc = CascadeConfig::new(blocks)?.accumulation_model();
    let p2s: Vec<ImagePlane> = pairs.par_iter().map(|p| preprocess(&p.p2, mode)).collect();
    let mut h_acc = vec![WarpParams::identity(acc); pairs.len()];
    let mut grad = vec![T::zero(); params.len()];
    let mut loss = 0.0;
    for lay in &layout.blocks {
        let warped = warp_all(pairs, &h_acc)?;
        let x = stack_inputs::<T>(&warped, &p2s, mode)?;
        let (out, cache) = block_forward(lay, params, x, pairs.len());
        let out_rows = rows(&out, lay.dense.fout);
        let labels: Vec<Vec<f64>> = pairs
            .iter()
            .zip(&h_acc)
            .map(|(p, h)| residual_label(&p.truth, h, lay.model).map(|l| l.to_vec()))
            .collect::<Result<_>>()?;
        let (l, dout) = l2_rows(&out_rows, &labels)?;
        loss += l;
        block_backward(lay, params, &cache, &flat::<T>(&dout), &mut grad);
        let deltas = out_rows
            .iter()
            .map(|r| sanitize_increment(lay.model, r))
            .collect::<Result<Vec<_>>>()?;
        accumulate(&mut h_acc, &deltas)?;
    }
    Ok((loss, grad, h_acc))
}

/// Mean ℓ₂ error of final predictions against the pairs' truths.
fn final_error(preds: &[WarpParams], pairs: &[Pair]) -> Result<f64> {
    let p: Vec<Vec<f64>> = preds.iter().map(|h| h.to_vec()).collect();
    let t: Vec<Vec<f64>> = pairs
        .iter()
        .zip(preds)
        .map(|(pair, h)| pair.truth.lift(h.model()).map(|t| t.to_vec()))
        .collect::<Result<_>>()?;
    Ok(l2_rows(&p, &t)?.0)
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    mode: Mode,
    student: ModelWeights,
    teacher: Option<ModelWeights>,
    adam_s: AdamState,
    adam_t: Option<AdamState>,
}

impl Trainer<'_> {
    /// One optimization step on a batch; returns the mean final-cascade
    /// ℓ₂ error of the student before the update.
    fn step(&mut self, pairs: &[Pair]) -> Result<f64> {
        if let Mode::Supervised = self.mode {
            let input_mode = self.student.input_mode();
            let (_, grad, h_acc) = supervised_loss_grad(self.student.layout(), &self.student.params, pairs, input_mode)?;
            let err = final_error(&h_acc, pairs)?;
            adam_step(&mut self.student.params, &grad, &mut self.adam_s, &self.cfg.adam)?;
            return Ok(err);
        }
        let bsz = pairs.len();
        let input_mode = self.student.input_mode();
        let acc = self.student.cascade().accumulation_model();
        let p2s: Vec<ImagePlane> = pairs.par_iter().map(|p| preprocess(&p.p2, input_mode)).collect();
        let mut h_acc = vec![WarpParams::identity(acc); bsz];
        let mut grad_s = vec![0.0f32; self.student.params.len()];
        let mut grad_t = self.teacher.as_ref().map(|t| vec![0.0f32; t.params.len()]);
        let n_blocks = self.student.layout().blocks.len();
        for i in 0..n_blocks {
            let lay = self.student.layout().blocks[i].clone();
            let dof = lay.dense.fout;
            let warped = warp_all(pairs, &h_acc)?;
            let x = stack_inputs::<f32>(&warped, &p2s, input_mode)?;
            let teacher_x = self.teacher.as_ref().map(|_| x.clone());
            let (out_s, cache_s) = block_forward(&lay, &self.student.params, x, bsz);
            let rows_s = rows(&out_s, dof);
            let labels = || -> Result<Vec<Vec<f64>>> {
                pairs
                    .iter()
                    .zip(&h_acc)
                    .map(|(p, h)| residual_label(&p.truth, h, lay.model).map(|l| l.to_vec()))
                    .collect()
            };
            let dout_s: Vec<Vec<f64>> = match &self.mode {
                Mode::Supervised => unreachable!("supervised steps return early"),
                Mode::Photometric(spec) => rows_s
                    .par_iter()
                    .zip(&warped)
                    .zip(pairs)
                    .map(|((r, w), p)| {
                        let delta = sanitize_increment(lay.model, r)?;
                        Ok(match loss_unsupervised(w, &p.p2, &delta, spec) {
                            Ok((_, g)) => g.iter().map(|v| v / bsz as f64).collect(),
                            // no overlap left for this sample
                            Err(Error::DegenerateInput(_)) => vec![0.0; dof],
                            Err(e) => return Err(e),
                        })
                    })
                    .collect::<Result<_>>()?,
                Mode::Distill => {
                    let t = self.teacher.as_ref().expect("distillation has a teacher");
                    let (out_t, _) = block_forward(&t.layout().blocks[i], &t.params, teacher_x.expect("teacher input"), bsz);
                    l2_rows(&rows_s, &rows(&out_t, dof))?.1
                }
                Mode::Projection(lambdas) => {
                    let t = self.teacher.as_ref().expect("projection has a teacher");
                    let t_lay = &t.layout().blocks[i];
                    let (out_t, cache_t) = block_forward(t_lay, &t.params, teacher_x.expect("teacher input"), bsz);
                    let (_, g) = projection_rows(&labels()?, &rows(&out_t, dof), &rows_s, *lambdas)?;
                    block_backward(
                        t_lay,
                        &t.params,
                        &cache_t,
                        &flat::<f32>(&g.teacher),
                        grad_t.as_mut().expect("teacher gradient"),
                    );
                    g.student
                }
            };
            block_backward(&lay, &self.student.params, &cache_s, &flat::<f32>(&dout_s), &mut grad_s);
            let deltas = rows_s
                .iter()
                .map(|r| sanitize_increment(lay.model, r))
                .collect::<Result<Vec<_>>>()?;
            accumulate(&mut h_acc, &deltas)?;
        }
        let err = final_error(&h_acc, pairs)?;
        adam_step(&mut self.student.params, &grad_s, &mut self.adam_s, &self.cfg.adam)?;
        if let (Some(t), Some(g), Some(state)) = (self.teacher.as_mut(), grad_t.as_ref(), self.adam_t.as_mut()) {
            adam_step(&mut t.params, g, state, &self.cfg.adam)?;
        }
        Ok(err)
    }

    fn run(mut self, corpus: &dyn Corpus) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let (train_idx, val_idx) = split(corpus.len(), cfg)?;
        let val_seed = mix_seed(cfg.seed, u64::MAX);
        let val_pairs: Vec<Pair> = val_idx
            .par_iter()
            .enumerate()
            .map(|(j, &img)| gen_pair(&corpus.image(img)?, &cfg.gamma, mix_seed(val_seed, j as u64)))
            .collect::<Result<_>>()?;
        let mut history = Vec::new();
        let mut best = (f64::INFINITY, self.student.clone(), 0usize);
        for epoch in 1..=cfg.epochs {
            let epoch_seed = mix_seed(cfg.seed, epoch as u64);
            let mut order = train_idx.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            let (mut total, mut count) = (0.0, 0usize);
            for (c, chunk) in order.chunks(cfg.batch).enumerate() {
                let pairs: Vec<Pair> = chunk
                    .par_iter()
                    .enumerate()
                    .map(|(k, &img)| {
                        let seed = mix_seed(epoch_seed, (c * cfg.batch + k) as u64);
                        gen_pair(&corpus.image(img)?, &cfg.gamma, seed)
                    })
                    .collect::<Result<_>>()?;
                total += self.step(&pairs)? * pairs.len() as f64;
                count += pairs.len();
            }
            let mut val = 0.0;
            for chunk in val_pairs.chunks(cfg.batch.max(1)) {
                val += final_error(&predict_batch(&self.student, chunk)?, chunk)? * chunk.len() as f64;
            }
            let val_loss = val / val_pairs.len() as f64;
            history.push(EpochRecord {
                epoch,
                train_loss: total / count.max(1) as f64,
                val_loss,
            });
            if val_loss < best.0 {
                best = (val_loss, self.student.clone(), epoch);
            } else if cfg.patience > 0 && epoch - best.2 >= cfg.patience {
                break;
            }
        }
        Ok(TrainOutcome {
            weights: best.1,
            history,
            best_epoch: best.2,
        })
    }
}

fn check_corpus(corpus: &dyn Corpus, cfg: &TrainConfig) -> Result<usize> {
    if corpus.len() < cfg.batch.min(2).max(2) {
        return Err(Error::DegenerateInput(format!(
            "corpus has {} images, need at least 2",
            corpus.len()
        )));
    }
    let first = corpus.image(0)?;
    if first.width() < crate::bench::CROP_SIZE || first.height() < crate::bench::CROP_SIZE {
        return Err(Error::InvalidArgument(format!(
            "corpus images must be at least {0}x{0}, first is {1}x{2}",
            crate::bench::CROP_SIZE,
            first.width(),
            first.height()
        )));
    }
    Ok(preprocess(&first, cfg.input_mode).channels())
}

/// Trains a fresh regressor for `cascade` on synthetic pairs from
/// `corpus`. Deterministic in `cfg.seed`.
pub fn train(corpus: &dyn Corpus, cfg: &TrainConfig, cascade: &CascadeConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let channels = check_corpus(corpus, cfg)?;
    let weights = ModelWeights::new(cascade.clone(), PATCH_SIZE, 2 * channels, &cfg.widths, cfg.input_mode, cfg.seed)?;
    let n = weights.params.len();
    let mode = match &cfg.objective {
        Objective::Supervised => Mode::Supervised,
        Objective::Photometric(spec) => Mode::Photometric(spec.clone()),
    };
    Trainer {
        cfg,
        mode,
        student: weights,
        teacher: None,
        adam_s: AdamState::new(n),
        adam_t: None,
    }
    .run(corpus)
}

/// Trains a small student (`cfg.widths`, `cascade`) from `teacher`. The
/// cascades must have the same block models; in the projection and
/// distillation modes both networks see the student's block inputs.
pub fn train_student(
    corpus: &dyn Corpus,
    teacher: &ModelWeights,
    mode: StudentMode,
    cfg: &TrainConfig,
    cascade: &CascadeConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if teacher.cascade().blocks() != cascade.blocks() {
        return Err(Error::InvalidArgument(format!(
            "student cascade {cascade} must match teacher cascade {}",
            teacher.cascade()
        )));
    }
    if teacher.input_mode() != cfg.input_mode {
        return Err(Error::InvalidArgument(format!(
            "teacher uses {} input, config asks for {}",
            teacher.input_mode(),
            cfg.input_mode
        )));
    }
    let channels = check_corpus(corpus, cfg)?;
    if teacher.layout().input_channels != 2 * channels {
        return Err(Error::ShapeMismatch(format!(
            "teacher expects {} input channels, corpus gives {}",
            teacher.layout().input_channels,
            2 * channels
        )));
    }
    let student = ModelWeights::new(cascade.clone(), PATCH_SIZE, 2 * channels, &cfg.widths, cfg.input_mode, cfg.seed)?;
    let n = student.params.len();
    let (mode, teacher, adam_t) = match mode {
        StudentMode::Scratch => (Mode::Supervised, None, None),
        StudentMode::Distill => (Mode::Distill, Some(teacher.clone()), None),
        StudentMode::Projection { lambdas } => (
            Mode::Projection(lambdas),
            Some(teacher.clone()),
            Some(AdamState::new(teacher.params.len())),
        ),
    };
    Trainer {
        cfg,
        mode,
        student,
        teacher,
        adam_s: AdamState::new(n),
        adam_t,
    }
    .run(corpus)
}
