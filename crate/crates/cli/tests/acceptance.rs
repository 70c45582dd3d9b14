//! End-to-end acceptance checks. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector3};
use prgflow::bench::{identity_baseline, run_benchmark, BenchOptions, Pair, WarpRange, PATCH_SIZE};
use prgflow::corpus::{procedural_texture, ProceduralCorpus};
use prgflow::estimator::{
    fft_scale_translation, fft_translation, CascadeConfig, CascadeEstimator, EstimatorKind, LkOptions, PairEstimator,
};
use prgflow::fusion::{align_and_rmse, madgwick_update, run_vio, AttitudeState, VioConfig, DEFAULT_BETA};
use prgflow::imaging::{gaussian_blur, warp_image, ImagePlane, Preprocess};
use prgflow::loss::{
    loss_distill, loss_supervised, loss_unsupervised_masked, photometric_distance, projection_rows, LossSpec,
    MetricKind, MetricSpec,
};
use prgflow::nn::{init_params, Layout, ModelWeights};
use prgflow::sim::{
    gen_trajectory, simulate_sensors, CameraIntrinsics, GroundTexture, NoiseConfig, Shape, SimFrames, Trajectory,
    TrajectoryParams,
};
use prgflow::train::{supervised_loss_grad, train, train_student, AdamConfig, StudentMode, TrainConfig, TrainOutcome};
use prgflow::warp::{compose, invert, matrix_to_params, params_to_pixel_warp, WarpModel, WarpParams};
use prgflow_cli::commands::compression_csv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: pass/fail plus a one-line summary.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- 1

fn identity_anchor() -> Verdict {
    let t = Instant::now();
    let (_, g1) = identity_baseline(&WarpRange::GAMMA1, PATCH_SIZE, PATCH_SIZE, 100_000, 1).unwrap();
    let (_, g2) = identity_baseline(&WarpRange::GAMMA2, PATCH_SIZE, PATCH_SIZE, 100_000, 2).unwrap();
    let el = t.elapsed();
    let pass = (g1 - 10.21).abs() <= 0.2 && (g2 - 20.4).abs() <= 0.3 && within(el, 10.0);
    verdict(pass, format!("e_trans γ1 {g1:.3} px, γ2 {g2:.3} px, {:.2} s", el.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

fn random_params(rng: &mut ChaCha8Rng, model: WarpModel) -> WarpParams {
    let s = rng.random_range(-0.5..0.5);
    let tx = rng.random_range(-1.0..1.0);
    let ty = rng.random_range(-1.0..1.0);
    let th = rng.random_range(-0.7..0.7);
    match model {
        WarpModel::Translation => WarpParams::translation(tx, ty),
        WarpModel::Scale => WarpParams::scale(s),
        WarpModel::PseudoSimilarity => WarpParams::pseudo_similarity(s, tx, ty),
        WarpModel::Similarity => WarpParams::similarity(s, tx, ty, th),
    }
}

fn max_gap(a: &WarpParams, b: &WarpParams) -> f64 {
    a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn warp_algebra() -> Verdict {
    let t = Instant::now();
    let models = [
        WarpModel::Translation,
        WarpModel::Scale,
        WarpModel::PseudoSimilarity,
        WarpModel::Similarity,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let m = models[i % 4];
        let (a, b, c) = (random_params(&mut rng, m), random_params(&mut rng, m), random_params(&mut rng, m));
        let id = WarpParams::identity(m);
        let inv = invert(&a).unwrap();
        let gaps = [
            max_gap(
                &compose(&compose(&a, &b).unwrap(), &c).unwrap(),
                &compose(&a, &compose(&b, &c).unwrap()).unwrap(),
            ),
            max_gap(&compose(&a, &id).unwrap(), &a),
            max_gap(&compose(&id, &a).unwrap(), &a),
            max_gap(&compose(&a, &inv).unwrap(), &id),
            max_gap(&compose(&inv, &a).unwrap(), &id),
            max_gap(&matrix_to_params(&params_to_pixel_warp(&a, 128, 128).unwrap(), m).unwrap(), &a),
        ];
        worst = gaps.iter().fold(worst, |w, g| w.max(*g));
    }
    let el = t.elapsed();
    verdict(
        worst <= 1e-10 && within(el, 5.0),
        format!("10000 draws, worst deviation {worst:.2e}, {:.2} s", el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 3

/// `‖fd − g‖ / ‖fd‖` with 64-bit central differences along every
/// coordinate of `x`.
fn fd_relative_error(x: &[f64], grad: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    let mut p = x.to_vec();
    for k in 0..x.len() {
        p[k] = x[k] + eps;
        let plus = f(&p);
        p[k] = x[k] - eps;
        let minus = f(&p);
        p[k] = x[k];
        let fd = (plus - minus) / (2.0 * eps);
        diff += (fd - grad[k]).powi(2);
        norm += fd * fd;
    }
    if norm == 0.0 {
        return diff.sqrt();
    }
    (diff / norm).sqrt()
}

fn smooth(size: usize, seed: u64) -> ImagePlane {
    gaussian_blur(&procedural_texture(size, size, seed), 1.0)
}

fn random_metric(rng: &mut ChaCha8Rng, kind: MetricKind) -> MetricSpec {
    let base = MetricSpec::default_for(kind);
    match kind {
        MetricKind::L1 => base,
        MetricKind::Charbonnier => MetricSpec {
            alpha: rng.random_range(0.2..1.1),
            ..base
        },
        MetricKind::Ssim => MetricSpec {
            alpha: rng.random_range(0.0..1.0),
            ..base
        },
        MetricKind::Robust => MetricSpec {
            alpha: rng.random_range(-3.0..3.0),
            c: rng.random_range(0.05..1.0),
            ..base
        },
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dof: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dof).map(|_| rng.random_range(-0.5..0.5)).collect()).collect()
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.concat()
}

fn unflatten(x: &[f64], dof: usize) -> Vec<Vec<f64>> {
    x.chunks(dof).map(|c| c.to_vec()).collect()
}

fn rows_to_params(rows: &[Vec<f64>]) -> Vec<WarpParams> {
    rows.iter().map(|r| WarpParams::pseudo_similarity(r[0], r[1], r[2])).collect()
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let draws = 100;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.max(err),
        None => worst.push((name, err)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    for d in 0..draws as u64 {
        // the four photometric metrics, gradient with respect to the first image
        for (name, kind) in [
            ("l1", MetricKind::L1),
            ("charbonnier", MetricKind::Charbonnier),
            ("ssim", MetricKind::Ssim),
            ("robust", MetricKind::Robust),
        ] {
            let m = random_metric(&mut rng, kind);
            let (a, b) = (smooth(12, 2 * d), smooth(12, 2 * d + 1));
            let (_, g) = photometric_distance(&a, &b, &m).unwrap();
            let err = fd_relative_error(a.data(), &g, 1e-6, |x| {
                let mut p = a.clone();
                p.data_mut().copy_from_slice(x);
                photometric_distance(&p, &b, &m).unwrap().0
            });
            record(name, err);
        }

        // supervised ℓ2 loss over a batch of warps
        let preds = random_rows(&mut rng, 4, 3);
        let truths = random_rows(&mut rng, 4, 3);
        let tp = rows_to_params(&truths);
        let (_, g) = loss_supervised(&rows_to_params(&preds), &tp).unwrap();
        let err = fd_relative_error(&flatten(&preds), &flatten(&g), 1e-6, |x| {
            loss_supervised(&rows_to_params(&unflatten(x, 3)), &tp).unwrap().0
        });
        record("supervised", err);

        // unsupervised chain: warp parameters -> warped image -> metric
        let kinds = [MetricKind::L1, MetricKind::Charbonnier, MetricKind::Ssim, MetricKind::Robust];
        let metric = random_metric(&mut rng, kinds[d as usize % 4]);
        let spec = LossSpec::new(metric, Preprocess::Gray).with_regularizer(0.1, MetricSpec::l1(), Preprocess::HighPass);
        let n = 32;
        let p1 = smooth(n, 1000 + d);
        let truth = WarpParams::pseudo_similarity(
            rng.random_range(-0.08..0.08),
            rng.random_range(-0.08..0.08),
            rng.random_range(-0.08..0.08),
        );
        let p2 = warp_image(&p1, &truth).unwrap();
        let h = WarpParams::pseudo_similarity(
            rng.random_range(-0.08..0.08),
            rng.random_range(-0.08..0.08),
            rng.random_range(-0.08..0.08),
        );
        // a fixed interior evaluation set, valid for every nearby warp
        let inner: Vec<bool> = (0..n * n)
            .map(|i| {
                let (x, y) = (i % n, i / n);
                (6..n - 6).contains(&x) && (6..n - 6).contains(&y)
            })
            .collect();
        let eval = |x: &[f64]| {
            let h = WarpParams::pseudo_similarity(x[0], x[1], x[2]);
            loss_unsupervised_masked(&p1, &p2, &h, &spec, Some(&inner)).unwrap()
        };
        let (_, g) = eval(&h.to_vec());
        record("unsupervised chain", fd_relative_error(&h.to_vec(), &g, 1e-7, |x| eval(x).0));

        // compression objectives
        let truths = random_rows(&mut rng, 4, 3);
        let teacher = random_rows(&mut rng, 4, 3);
        let student = random_rows(&mut rng, 4, 3);
        let lambdas = (1.0, 1.0, 0.1);
        let (_, g) = projection_rows(&truths, &teacher, &student, lambdas).unwrap();
        let err_t = fd_relative_error(&flatten(&teacher), &flatten(&g.teacher), 1e-6, |x| {
            projection_rows(&truths, &unflatten(x, 3), &student, lambdas).unwrap().0
        });
        let err_s = fd_relative_error(&flatten(&student), &flatten(&g.student), 1e-6, |x| {
            projection_rows(&truths, &teacher, &unflatten(x, 3), lambdas).unwrap().0
        });
        record("projection", err_t.max(err_s));
        let tp = rows_to_params(&teacher);
        let (_, g) = loss_distill(&tp, &rows_to_params(&student)).unwrap();
        let err = fd_relative_error(&flatten(&student), &flatten(&g), 1e-6, |x| {
            loss_distill(&tp, &rows_to_params(&unflatten(x, 3))).unwrap().0
        });
        record("distill", err);

        // reduced conv regressor trained on residual labels
        let layout = Layout::new(&[WarpModel::PseudoSimilarity], 16, 2, &[4, 4, 8]).unwrap();
        let params: Vec<f64> = init_params(&layout, d);
        let pairs: Vec<Pair> = (0..2)
            .map(|i| {
                let p1 = smooth(16, 5000 + 2 * d + i);
                let truth = WarpParams::pseudo_similarity(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                );
                let p2 = warp_image(&p1, &truth).unwrap();
                Pair { p1, p2, truth }
            })
            .collect();
        let (_, g, _) = supervised_loss_grad(&layout, &params, &pairs, Preprocess::Gray).unwrap();
        let err = fd_relative_error(&params, &g, 1e-6, |x| {
            supervised_loss_grad(&layout, x, &pairs, Preprocess::Gray).unwrap().0
        });
        record("conv net", err);
    }
    let el = t.elapsed();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        max < 1e-4 && within(el, 120.0),
        format!("{draws} draws each, worst rel. err: {}; {:.1} s", summary.join(", "), el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 4

fn lk_accuracy() -> Verdict {
    let t = Instant::now();
    let corpus = ProceduralCorpus::new(100, 300, 4);
    let cascade: CascadeConfig = "Tx2,Sx2".parse().unwrap();
    let lk = CascadeEstimator::new("lk", cascade, EstimatorKind::LucasKanade(LkOptions::default()));
    let opts = BenchOptions {
        n_pairs: 500,
        seed: 4,
        timing: false,
    };
    let records = run_benchmark(&corpus, &[&lk], &[("gamma1".into(), WarpRange::GAMMA1)], &opts).unwrap();
    let r = records.iter().find(|r| r.estimator == "lk").unwrap();
    let el = t.elapsed();
    verdict(
        r.e_scale < 2.5 && r.e_trans < 2.0 && within(el, 300.0),
        format!(
            "T×2,S×2 on 500 γ1 pairs: e_scale {:.3} px, e_trans {:.3} px, {} failures, {:.1} s",
            r.e_scale,
            r.e_trans,
            r.failures,
            el.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn circular_shift(p: &ImagePlane, dx: i64, dy: i64) -> ImagePlane {
    let (w, h) = (p.width() as i64, p.height() as i64);
    ImagePlane::from_fn(p.width(), p.height(), |x, y| {
        p.get((x as i64 - dx).rem_euclid(w) as usize, (y as i64 - dy).rem_euclid(h) as usize, 0)
    })
}

fn fft_baseline() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0;
    for i in 0..100 {
        let p = procedural_texture(128, 128, 100 + i);
        let (dx, dy) = (rng.random_range(-60i64..=60), rng.random_range(-60i64..=60));
        let r = fft_translation(&p, &circular_shift(&p, dx, dy)).unwrap();
        if r.tx == dx as f64 && r.ty == dy as f64 {
            exact += 1;
        }
    }
    let mut worst = 0.0f64;
    for i in 0..10 {
        let p = procedural_texture(128, 128, 300 + i);
        let zoomed = warp_image(&p, &WarpParams::scale(0.10)).unwrap();
        let s = fft_scale_translation(&p, &zoomed).unwrap().map_or(f64::NAN, |h| h.s());
        worst = if s.is_nan() { f64::INFINITY } else { worst.max((s - 0.10).abs()) };
    }
    let el = t.elapsed();
    verdict(
        exact == 100 && worst <= 0.01 && within(el, 60.0),
        format!(
            "{exact}/100 integer shifts exact, zoom s=0.10 recovered within {worst:.4} on 10 pairs, {:.1} s",
            el.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 6, 7

const TRAIN_IMAGES: usize = 2000;
const EPOCHS: usize = 20;

fn desk_config() -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        patience: 0,
        ..TrainConfig::default()
    }
}

fn train_corpus() -> ProceduralCorpus {
    ProceduralCorpus::new(TRAIN_IMAGES, 300, 1)
}

fn single_ps() -> CascadeConfig {
    CascadeConfig::single(WarpModel::PseudoSimilarity)
}

/// Accuracy against the identity prediction on pairs from images never
/// seen in training.
fn held_out_accuracy(weights: &ModelWeights) -> f64 {
    let test = ProceduralCorpus::new(200, 300, 99);
    let w = Arc::new(weights.clone());
    let est = CascadeEstimator::new("cnn", w.cascade().clone(), EstimatorKind::Cnn(w));
    let opts = BenchOptions {
        n_pairs: 300,
        seed: 7,
        timing: false,
    };
    let records = run_benchmark(&test, &[&est as &dyn PairEstimator], &[("gamma1".into(), WarpRange::GAMMA1)], &opts)
        .unwrap();
    records.iter().find(|r| r.estimator == "cnn").unwrap().accuracy
}

struct Teacher {
    outcome: TrainOutcome,
    elapsed: Duration,
}

static TEACHER: OnceLock<Teacher> = OnceLock::new();

fn teacher() -> &'static Teacher {
    TEACHER.get_or_init(|| {
        let t = Instant::now();
        let outcome = train(&train_corpus(), &desk_config(), &single_ps()).unwrap();
        Teacher {
            outcome,
            elapsed: t.elapsed(),
        }
    })
}

fn desk_training() -> Verdict {
    let first = teacher();
    let rerun = train(&train_corpus(), &desk_config(), &single_ps()).unwrap();
    let same_history = first.outcome.history.len() == rerun.history.len()
        && first.outcome.history.iter().zip(&rerun.history).all(|(a, b)| {
            a.epoch == b.epoch
                && a.train_loss.to_bits() == b.train_loss.to_bits()
                && a.val_loss.to_bits() == b.val_loss.to_bits()
        });
    let same_weights = first.outcome.weights == rerun.weights;
    let acc = held_out_accuracy(&first.outcome.weights);
    let minutes = first.elapsed.as_secs_f64() / 60.0;
    verdict(
        acc >= 40.0 && same_history && same_weights && minutes < 60.0,
        format!(
            "{EPOCHS} epochs on {TRAIN_IMAGES} images: accuracy {acc:.2}%, rerun bit-exact: {}, training {minutes:.1} min",
            same_history && same_weights
        ),
    )
}

fn compression() -> Verdict {
    let teacher = &teacher().outcome.weights;
    let cfg = TrainConfig {
        widths: vec![4, 8, 8, 4],
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..desk_config()
    };
    let corpus = train_corpus();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, mode) in [
        ("scratch", StudentMode::Scratch),
        (
            "projection",
            StudentMode::Projection {
                lambdas: StudentMode::DEFAULT_LAMBDAS,
            },
        ),
        ("distill", StudentMode::Distill),
    ] {
        let t = Instant::now();
        let student = train_student(&corpus, teacher, mode, &cfg, &single_ps()).unwrap().weights;
        let acc = held_out_accuracy(&student);
        let csv = compression_csv(teacher, &student);
        let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        let (tp, sp, ratio) = (row[0], row[1], row[2]);
        let ok = acc >= 30.0 && sp <= 0.1 * tp && ratio >= 10.0;
        pass &= ok;
        parts.push(format!(
            "{name} {acc:.2}% ({sp}/{tp} params, {ratio:.2}x, {:.1} min)",
            t.elapsed().as_secs_f64() / 60.0
        ));
    }
    verdict(pass, parts.join("; "))
}

// ---------------------------------------------------------------- 8

fn fly(shape: Shape, noisy: bool) -> f64 {
    let traj = Trajectory::new(TrajectoryParams {
        duration: 60.0,
        ..TrajectoryParams::new(shape)
    })
    .unwrap();
    let k = CameraIntrinsics::default();
    let ground = GroundTexture::covering(&traj, &k, 0.002, 5).unwrap();
    let (noise, alt_sigma) = if noisy {
        (NoiseConfig::default(), 0.02)
    } else {
        (NoiseConfig::zero(), 0.0)
    };
    let log = simulate_sensors(&traj, &noise, alt_sigma, 11).unwrap();
    let frames = SimFrames {
        trajectory: &traj,
        ground: &ground,
        camera: k,
        times: log.camera.clone(),
    };
    let est = CascadeEstimator::new("lk", single_ps(), EstimatorKind::LucasKanade(LkOptions::default()));
    let vc = VioConfig {
        stride: 4,
        ..VioConfig::default()
    };
    let out = run_vio(&frames, &log, &est, &k, &vc).unwrap();
    let gt = gen_trajectory(*traj.params(), 100.0).unwrap();
    align_and_rmse(&out.trajectory, &gt).unwrap().rmse_pct()
}

fn simulated_flights() -> Verdict {
    let t = Instant::now();
    let mut runs = vec![("circle (default noise)", fly(Shape::Circle, true))];
    for shape in [Shape::Moon, Shape::Line, Shape::Figure8, Shape::Square] {
        runs.push((shape.name(), fly(shape, false)));
    }
    let el = t.elapsed();
    let pass = runs.iter().all(|(_, e)| *e <= 3.0) && within(el, 600.0);
    let summary: Vec<String> = runs.iter().map(|(n, e)| format!("{n} {e:.2}%")).collect();
    verdict(
        pass,
        format!("aligned RMSE / path length: {}; {:.0} s", summary.join(", "), el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 9

fn attitude_filter() -> Verdict {
    // roll seen by a static accelerometer: atan2(a_y, a_z)
    let roll = 10f64.to_radians();
    let truth = UnitQuaternion::from_euler_angles(roll, 0.0, 0.0);
    let accel = truth.inverse() * Vector3::new(0.0, 0.0, 9.81);
    let mag = truth.inverse() * Vector3::y();
    let oracle = accel.y.atan2(accel.z);
    let mut worst = 0.0f64;
    for init in [
        UnitQuaternion::identity(),
        UnitQuaternion::from_euler_angles(-0.1, 0.1, 0.0),
        UnitQuaternion::from_euler_angles(0.2, 0.0, 0.05),
    ] {
        let mut s = AttitudeState::new(init, DEFAULT_BETA, 0.0);
        for _ in 0..500 {
            s = madgwick_update(&s, &Vector3::zeros(), &accel, &mag, 0.01).unwrap();
        }
        let (r, _, _) = s.q.euler_angles();
        worst = worst.max((r - oracle).abs().to_degrees());
    }

    let mut s = AttitudeState::new(UnitQuaternion::identity(), 0.0, 0.0);
    for _ in 0..1000 {
        s = madgwick_update(&s, &Vector3::new(0.0, 0.0, 0.1), &Vector3::z(), &Vector3::y(), 0.01).unwrap();
    }
    let (_, _, yaw) = s.q.euler_angles();
    let yaw_err = (yaw - 1.0).abs();
    verdict(
        worst < 1.0 && yaw_err < 1e-3,
        format!("static roll error after 5 s {worst:.3}°, gyro-only yaw error over 10 s {:.4}%", 100.0 * yaw_err),
    )
}

// ---------------------------------------------------------------- 10

fn prgflow(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_prgflow"))
        .args(args)
        .env_remove("PRGFLOW_THREADS")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "prgflow {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn thread_independence() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let flight = d("flight");
    prgflow(&["simflight", "--duration", "5", "--out", &flight]);
    let resolved = format!("{flight}/config.resolved.ini");
    let mut same = Vec::new();
    for threads in ["1", "8"] {
        prgflow(&[
            "--threads",
            threads,
            "bench",
            "--n",
            "16",
            "--estimators",
            "identity,lk,fft",
            "--set",
            "data.procedural=16",
            "--out",
            &d(&format!("bench{threads}")),
        ]);
        prgflow(&[
            "--threads",
            threads,
            "--config",
            &resolved,
            "fuse",
            "--input",
            &flight,
            "--out",
            &d(&format!("fuse{threads}")),
        ]);
    }
    for (a, b) in [
        ("bench1/report.csv", "bench8/report.csv"),
        ("fuse1/trajectory.csv", "fuse8/trajectory.csv"),
        ("fuse1/velocities.csv", "fuse8/velocities.csv"),
    ] {
        same.push((a, read(&dir.path().join(a)) == read(&dir.path().join(b))));
    }
    let summary: Vec<String> = same
        .iter()
        .map(|(n, s)| format!("{} {}", n.split('/').nth(1).unwrap(), if *s { "identical" } else { "differ" }))
        .collect();
    verdict(same.iter().all(|(_, s)| *s), format!("--threads 1 vs 8: {}", summary.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("identity baseline anchor", identity_anchor),
        ("warp group laws", warp_algebra),
        ("analytic gradients", gradients),
        ("LK cascade accuracy", lk_accuracy),
        ("FFT baseline", fft_baseline),
        ("desk-scale training", desk_training),
        ("compression students", compression),
        ("simulated flights", simulated_flights),
        ("attitude filter", attitude_filter),
        ("thread-count determinism", thread_independence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {:2}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id.ends_with(f.as_str())) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!("{id} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
