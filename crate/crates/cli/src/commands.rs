use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use prgflow::bench::{corpus_pair, mix_seed, report_csv, run_benchmark, BenchOptions, WarpRange};
use prgflow::corpus::{Corpus, DirCorpus, ProceduralCorpus};
use prgflow::estimator::{fft_scale_translation, fft_translation, CascadeConfig, CascadeEstimator, EstimatorKind, LkOptions, PairEstimator};
use prgflow::fusion::{align_and_rmse, eval_csv, run_vio, VioConfig, VelocitySample};
use prgflow::imaging::ImagePlane;
use prgflow::loss::LossSpec;
use prgflow::nn::{ModelWeights, LARGE_WIDTHS, SMALL_WIDTHS};
use prgflow::sim::{
    gen_trajectory, read_sensor_log, read_trajectory, simulate_sensors, trajectory_csv, write_frames,
    write_sensor_log, CameraIntrinsics, DirFrames, GroundTexture, NoiseConfig, Shape, SimFrames, Trajectory,
    TrajectoryParams, IMU_RATE,
};
use prgflow::train::{history_csv, train, train_student, AdamConfig, Objective, StudentMode, TrainConfig};

use crate::config::{ConfigError, RunConfig};
use crate::Failure;

pub const RESOLVED_CONFIG: &str = "config.resolved.ini";

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Data(e.0)
    }
}

impl From<prgflow::Error> for Failure {
    fn from(e: prgflow::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

fn create_dir(dir: &Path) -> Res<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

/// Creates the output directory and records the configuration used.
pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Res<()> {
    create_dir(out)?;
    write(&out.join(RESOLVED_CONFIG), &cfg.to_text())
}

fn seed(cfg: &RunConfig) -> Res<u64> {
    Ok(cfg.parse("run", "seed")?)
}

fn corpus(cfg: &RunConfig) -> Res<Box<dyn Corpus>> {
    match cfg.path("data", "corpus") {
        Some(dir) => Ok(Box::new(DirCorpus::open(&dir)?)),
        None => {
            let count: usize = cfg.parse("data", "procedural")?;
            let size: usize = cfg.parse("data", "size")?;
            if count == 0 {
                return Err(Failure::Data("config key `data.procedural`: need at least one image".into()));
            }
            Ok(Box::new(ProceduralCorpus::new(count, size, cfg.parse("data", "seed")?)))
        }
    }
}

fn range(cfg: &RunConfig, section: &str, key: &str) -> Res<(String, WarpRange)> {
    WarpRange::parse(cfg.str(section, key))
        .map_err(|e| Failure::Data(format!("config key `{section}.{key}`: {e}")))
}

fn cascade(cfg: &RunConfig) -> Res<CascadeConfig> {
    Ok(cfg.parse("cascade", "blocks")?)
}

fn widths(cfg: &RunConfig, key: &str) -> Res<Vec<usize>> {
    match cfg.str("train", key) {
        "small" => Ok(SMALL_WIDTHS.to_vec()),
        "large" => Ok(LARGE_WIDTHS.to_vec()),
        _ => {
            let w: Vec<usize> = cfg.list("train", key)?;
            if w.len() != 4 || w.contains(&0) {
                return Err(Failure::Data(format!(
                    "config key `train.{key}`: need `small`, `large` or four positive widths"
                )));
            }
            Ok(w)
        }
    }
}

fn train_config(cfg: &RunConfig, widths_key: &str) -> Res<TrainConfig> {
    let objective = match cfg.str("loss", "loss") {
        "supervised" => Objective::Supervised,
        text => Objective::Photometric(
            text.parse::<LossSpec>()
                .map_err(|e| Failure::Data(format!("config key `loss.loss`: {e}")))?,
        ),
    };
    let tc = TrainConfig {
        adam: AdamConfig {
            lr: cfg.parse("train", "lr")?,
            ..AdamConfig::default()
        },
        batch: cfg.parse("train", "batch")?,
        epochs: cfg.parse("train", "epochs")?,
        objective,
        gamma: range(cfg, "data", "gamma")?.1,
        patience: cfg.parse("train", "patience")?,
        seed: seed(cfg)?,
        input_mode: cfg.parse("train", "input")?,
        widths: widths(cfg, widths_key)?,
        val_fraction: cfg.parse("train", "val_fraction")?,
    };
    tc.validate()?;
    Ok(tc)
}

fn load_model(path: &Path) -> Res<Arc<ModelWeights>> {
    Ok(Arc::new(ModelWeights::load(path)?))
}

/// `identity`, `lk`, `fft`, `cnn` (uses `cascade.model`) or a path to a
/// weights file.
fn estimator(name: &str, cfg: &RunConfig) -> Res<CascadeEstimator> {
    let casc = cascade(cfg)?;
    let kind = match name {
        "identity" => EstimatorKind::Identity,
        "lk" => EstimatorKind::LucasKanade(LkOptions::default()),
        "fft" => EstimatorKind::Fft,
        "cnn" => {
            let path = cfg
                .path("cascade", "model")
                .ok_or_else(|| Failure::Data("estimator `cnn` needs config key `cascade.model`".into()))?;
            let w = load_model(&path)?;
            return Ok(CascadeEstimator::new("cnn", w.cascade().clone(), EstimatorKind::Cnn(w)));
        }
        path if path.ends_with(".prgw") => {
            let w = load_model(Path::new(path))?;
            let label = Path::new(path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "cnn".into());
            return Ok(CascadeEstimator::new(label, w.cascade().clone(), EstimatorKind::Cnn(w)));
        }
        other => {
            return Err(Failure::Data(format!(
                "unknown estimator `{other}` (expected identity, lk, fft, cnn or a .prgw file)"
            )))
        }
    };
    Ok(CascadeEstimator::new(name, casc, kind))
}

pub fn gen_data(cfg: &RunConfig, n: usize, out: &Path) -> Res<()> {
    prepare_out(out, cfg)?;
    let corpus = corpus(cfg)?;
    let (_, range) = range(cfg, "data", "gamma")?;
    let seed = seed(cfg)?;
    let mut csv = String::from("index,s,tx,ty\n");
    for i in 0..n {
        let p = corpus_pair(corpus.as_ref(), &range, seed, i)?;
        p.p1.save_png(out.join(format!("pair_{i:06}_1.png")))?;
        p.p2.save_png(out.join(format!("pair_{i:06}_2.png")))?;
        let _ = writeln!(csv, "{i},{},{},{}", p.truth.s(), p.truth.tx(), p.truth.ty());
    }
    write(&out.join("pairs.csv"), &csv)?;
    println!("wrote {n} pairs to {}", out.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Res<()> {
    prepare_out(out, cfg)?;
    let corpus = corpus(cfg)?;
    let tc = train_config(cfg, "widths")?;
    let outcome = train(corpus.as_ref(), &tc, &cascade(cfg)?)?;
    outcome.weights.save(out.join("model.prgw"))?;
    write(&out.join("history.csv"), &history_csv(&outcome.history))?;
    let (params, flops) = outcome.weights.count_params_flops();
    println!(
        "trained {} epochs, best epoch {}, {params} parameters, {flops} multiply-accumulates per pair",
        outcome.history.len(),
        outcome.best_epoch
    );
    Ok(())
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Res<()> {
    prepare_out(out, cfg)?;
    let corpus = corpus(cfg)?;
    let names: Vec<String> = cfg.list("bench", "estimators")?;
    if names.is_empty() {
        return Err(Failure::Data("config key `bench.estimators` is empty".into()));
    }
    let ests = names.iter().map(|n| estimator(n, cfg)).collect::<Res<Vec<_>>>()?;
    let refs: Vec<&dyn PairEstimator> = ests.iter().map(|e| e as &dyn PairEstimator).collect();
    let gammas = cfg
        .str("bench", "gammas")
        .split(';')
        .flat_map(|group| split_ranges(group.trim()))
        .map(|g| WarpRange::parse(&g).map_err(|e| Failure::Data(format!("config key `bench.gammas`: {e}"))))
        .collect::<Res<Vec<_>>>()?;
    let opts = BenchOptions {
        n_pairs: cfg.parse("bench", "n")?,
        seed: seed(cfg)?,
        timing: cfg.bool("bench", "timing")?,
    };
    let records = run_benchmark(corpus.as_ref(), &refs, &gammas, &opts)?;
    let csv = report_csv(&records);
    write(&out.join("report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// `gamma1,gamma2` lists named ranges; numeric ranges `s,tx,ty` are
/// separated by `;` so their commas stay inside one entry.
fn split_ranges(group: &str) -> Vec<String> {
    if group.is_empty() {
        return Vec::new();
    }
    if group.split(',').all(|p| p.trim().parse::<f64>().is_ok()) {
        return vec![group.to_string()];
    }
    group.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

pub fn fft_align(a: &Path, b: &Path, out: Option<&Path>, cfg: &RunConfig) -> Res<()> {
    let p1 = ImagePlane::load(a)?;
    let p2 = ImagePlane::load(b)?;
    let (w, h) = (p1.width() as f64, p1.height() as f64);
    let shift = fft_translation(&p1, &p2)?;
    let full = fft_scale_translation(&p1, &p2)?;
    let mut csv = String::from("s,tx,ty,tx_px,ty_px,confident\n");
    match full {
        Some(p) => {
            let _ = writeln!(csv, "{},{},{},{},{},1", p.s(), p.tx(), p.ty(), p.tx() * w / 2.0, p.ty() * h / 2.0);
        }
        None => {
            let _ = writeln!(
                csv,
                "0,{},{},{},{},{}",
                shift.tx / (w / 2.0),
                shift.ty / (h / 2.0),
                shift.tx,
                shift.ty,
                u8::from(shift.confident)
            );
        }
    }
    if let Some(out) = out {
        prepare_out(out, cfg)?;
        write(&out.join("fft.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn camera(cfg: &RunConfig) -> Res<CameraIntrinsics> {
    Ok(CameraIntrinsics::from_diagonal_fov(
        cfg.parse("sim", "width")?,
        cfg.parse("sim", "height")?,
        cfg.parse("sim", "fov_deg")?,
    )?)
}

fn noise(cfg: &RunConfig) -> Res<NoiseConfig> {
    match cfg.str("sim", "noise") {
        "default" => Ok(NoiseConfig::default()),
        "zero" | "none" => Ok(NoiseConfig::zero()),
        other => Err(Failure::Data(format!(
            "config key `sim.noise`: `{other}` is not one of default, zero"
        ))),
    }
}

pub fn trajectory(cfg: &RunConfig) -> Res<Trajectory> {
    let shape: Shape = cfg.parse("sim", "shape")?;
    let mut params = TrajectoryParams::new(shape);
    if cfg.str("sim", "size") != "default" {
        params.size = cfg.parse("sim", "size")?;
    }
    params.duration = cfg.parse("sim", "duration")?;
    params.altitude = cfg.parse("sim", "altitude")?;
    params.altitude_amplitude = cfg.parse("sim", "altitude_amplitude")?;
    Ok(Trajectory::new(params)?)
}

pub fn simflight(cfg: &RunConfig, out: &Path) -> Res<()> {
    prepare_out(out, cfg)?;
    let seed = seed(cfg)?;
    let traj = trajectory(cfg)?;
    let k = camera(cfg)?;
    let log = simulate_sensors(&traj, &noise(cfg)?, cfg.parse("sim", "alt_sigma")?, mix_seed(seed, 10))?;
    write_sensor_log(&log, out)?;
    let gt = gen_trajectory(*traj.params(), IMU_RATE)?;
    write(&out.join("gt.csv"), &trajectory_csv(&gt))?;
    let ground = GroundTexture::covering(&traj, &k, cfg.parse("sim", "m_per_px")?, mix_seed(seed, 11))?;
    let frames = SimFrames {
        trajectory: &traj,
        ground: &ground,
        camera: k,
        times: log.camera.clone(),
    };
    let n = write_frames(&frames, out.join("frames"), cfg.parse("sim", "frame_every")?)?;
    println!(
        "{} flight: {:.2} m path, {} IMU samples, {n} frames in {}",
        traj.params().shape,
        traj.path_length(),
        log.imu.len(),
        out.display()
    );
    Ok(())
}

pub fn fuse(cfg: &RunConfig, input: &Path, out: &Path) -> Res<()> {
    prepare_out(out, cfg)?;
    let frames = DirFrames::open(input.join("frames"))?;
    let log = read_sensor_log(input, &frames)?;
    let k = camera(cfg)?;
    let est = estimator(cfg.str("cascade", "estimator"), cfg)?;
    let vc = VioConfig {
        stride: cfg.parse("fuse", "stride")?,
        patch: cfg.parse("fuse", "patch")?,
        beta: cfg.parse("fuse", "beta")?,
        motion_prior: cfg.bool("fuse", "motion_prior")?,
        max_speed: cfg.parse("fuse", "max_speed")?,
        ..VioConfig::default()
    };
    let result = run_vio(&frames, &log, &est, &k, &vc)?;
    write(&out.join("trajectory.csv"), &trajectory_csv(&result.trajectory))?;
    write(&out.join("velocities.csv"), &velocity_csv(&result.velocities))?;
    println!(
        "{} velocity samples, {} held after degenerate estimates",
        result.velocities.len(),
        result.held
    );
    Ok(())
}

fn velocity_csv(samples: &[VelocitySample]) -> String {
    let mut csv = String::from("t,vx,vy,vz,altitude\n");
    for s in samples {
        let _ = writeln!(csv, "{},{},{},{},{}", s.t, s.velocity.x, s.velocity.y, s.velocity.z, s.altitude);
    }
    csv
}

pub fn eval_traj(cfg: &RunConfig, est: &Path, gt: &Path, name: &str, out: &Path) -> Res<()> {
    prepare_out(out, cfg)?;
    let e = read_trajectory(est)?;
    let g = read_trajectory(gt)?;
    let err = align_and_rmse(&e, &g)?;
    let csv = eval_csv(&[(name.to_string(), err)]);
    write(&out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn compress(cfg: &RunConfig, out: &Path) -> Res<()> {
    prepare_out(out, cfg)?;
    let teacher_path: PathBuf = cfg
        .path("train", "teacher")
        .ok_or_else(|| Failure::Data("compress needs config key `train.teacher`".into()))?;
    let teacher = ModelWeights::load(&teacher_path)?;
    let mode = match cfg.str("train", "mode") {
        "scratch" => StudentMode::Scratch,
        "distill" => StudentMode::Distill,
        "projection" => {
            let l: Vec<f64> = cfg.list("train", "lambdas")?;
            if l.len() != 3 {
                return Err(Failure::Data("config key `train.lambdas`: need three weights".into()));
            }
            StudentMode::Projection { lambdas: (l[0], l[1], l[2]) }
        }
        other => {
            return Err(Failure::Data(format!(
                "config key `train.mode`: `{other}` is not one of scratch, distill, projection"
            )))
        }
    };
    let tc = train_config(cfg, "student_widths")?;
    let corpus = corpus(cfg)?;
    let outcome = train_student(corpus.as_ref(), &teacher, mode, &tc, teacher.cascade())?;
    outcome.weights.save(out.join("student.prgw"))?;
    write(&out.join("history.csv"), &history_csv(&outcome.history))?;
    let csv = compression_csv(&teacher, &outcome.weights);
    write(&out.join("compression.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Parameter and multiply-accumulate counts of a teacher/student pair.
pub fn compression_csv(teacher: &ModelWeights, student: &ModelWeights) -> String {
    let (tp, tf) = teacher.count_params_flops();
    let (sp, sf) = student.count_params_flops();
    format!(
        "teacher_params,student_params,param_ratio,teacher_flops,student_flops,flop_ratio\n{tp},{sp},{:.4},{tf},{sf},{:.4}\n",
        tp as f64 / sp.max(1) as f64,
        tf as f64 / sf.max(1) as f64
    )
}
