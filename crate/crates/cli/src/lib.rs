//! Library side of the `spectra` binary. Every subcommand is a function
//! here taking a [`RunConfig`] and a writer for its console report, so the
//! tests can drive the same code paths without spawning processes.
//!
//! Artifacts under `out`:
//!
//! | command       | files                                                        |
//! |---------------|--------------------------------------------------------------|
//! | `synth`       | `scene.manifest`, `scene.bsq`, `scene.gt`                    |
//! | `train`       | `model.ckpt`, `train_log.tsv`, `loss_log.tsv`, `config.txt`  |
//! | `eval`        | `metrics.txt`, `classification_map.ppm`, `ground_truth.ppm`  |
//! | `predict-map` | `prediction_map.ppm`                                         |
//! | `gradcheck`   | `gradcheck.tsv`                                              |
//! | `ablate`      | `ablation.tsv`                                               |

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmtnet::autodiff::GradCheckOptions;
use cmtnet::data::{load_cube, normalize, stratified_split, synth_scene, write_scene, GroundTruth, HsiCube, Sample};
use cmtnet::eval::{evaluate, predict_samples, write_map, MetricsReport};
use cmtnet::model::{gradcheck_model, save_checkpoint, load_checkpoint, Checkpoint, ModelConfig, ModelGradCheck, ModelParams, MODEL_GRADCHECK_STEP};
use cmtnet::train::{train, train_with, TrainLog};

pub use config::{known_keys, parse_overrides, RunConfig};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] cmtnet::Error),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    /// 1 runtime failure, 2 bad arguments or configuration, 3 failed check.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(cmtnet::Error::Config(_) | cmtnet::Error::InvalidArgument(_)) => 2,
            CliError::Runtime(_) => 1,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(cmtnet::Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| cmtnet::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| cmtnet::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Writes the synthetic scene described by `cfg.synth` and returns its manifest.
pub fn cmd_synth(cfg: &RunConfig, w: &mut dyn Write) -> CliResult<PathBuf> {
    let (cube, gt) = synth_scene(&cfg.synth)?;
    create_dir(&cfg.out)?;
    let manifest = write_scene(&cfg.out, "scene", &cube, &gt)?;
    let p = &cfg.synth;
    writeln!(
        w,
        "{}×{}×{} scene, {} classes, sigma {}, seed {}",
        p.height, p.width, p.bands, p.classes, p.sigma, p.seed
    )?;
    writeln!(w, "{:>5}  {:<10}  {:>7}", "class", "name", "pixels")?;
    for (i, (name, count)) in gt.classes().iter().zip(gt.class_counts()).enumerate() {
        writeln!(w, "{:>5}  {:<10}  {:>7}", i + 1, name, count)?;
    }
    writeln!(w, "wrote {}", manifest.display())?;
    Ok(manifest)
}

/// Loads `path`, standardizing the cube when asked to.
pub fn load_scene(path: &Path, standardize: bool) -> CliResult<(HsiCube, GroundTruth)> {
    let (cube, gt) = load_cube(path)?;
    let cube = if standardize { normalize(&cube) } else { cube };
    Ok((cube, gt))
}

fn data_path(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| CliError::Usage("no scene given; pass --data or set `data` in the config".into()))
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
    pub params: ModelParams,
}

/// Splits the scene, trains from a seeded initialization and writes the
/// checkpoint, both logs and the effective config.
pub fn cmd_train(cfg: &RunConfig, w: &mut dyn Write) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let data = data_path(cfg)?;
    let (cube, gt) = load_scene(data, cfg.normalize)?;
    let model = cfg.model_for(cube.bands(), gt.num_classes())?;
    let tc = &cfg.train;
    let split = stratified_split(&gt, tc.train_fraction, tc.seed)?;
    let samples = split.train_samples();
    writeln!(w, "{model}")?;
    writeln!(
        w,
        "{} training pixels ({:?} per class), {} test pixels",
        samples.len(),
        split.train_counts(),
        split.test_samples().len()
    )?;
    let params = ModelParams::init(&model, tc.seed)?;
    let mut io_err = None;
    let (params, log) = train_with(params, &cube, &samples, tc, |r| {
        if r.epoch == 1 || r.epoch % 10 == 0 || r.epoch == tc.epochs {
            if let Err(e) = writeln!(
                w,
                "epoch {:>4}/{}  loss {:.6}  train acc {:.4}",
                r.epoch, tc.epochs, r.loss, r.train_acc
            ) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }

    create_dir(&cfg.out)?;
    let meta = BTreeMap::from([
        ("data".to_string(), data.display().to_string()),
        ("epochs".to_string(), tc.epochs.to_string()),
        ("normalize".to_string(), cfg.normalize.to_string()),
        ("seed".to_string(), tc.seed.to_string()),
        ("train_fraction".to_string(), tc.train_fraction.to_string()),
    ]);
    let checkpoint = cfg.out.join("model.ckpt");
    let ckpt = Checkpoint { params, meta };
    save_checkpoint(&checkpoint, &ckpt)?;
    log.write(&cfg.out)?;
    write_file(&cfg.out.join("config.txt"), &cfg.dump())?;
    writeln!(w, "wrote {}", checkpoint.display())?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        params: ckpt.params,
    })
}

struct Restored {
    ckpt: Checkpoint,
    cube: HsiCube,
    gt: GroundTruth,
}

fn meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> CliResult<T> {
    ckpt.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Usage(format!("checkpoint has no usable `meta.{key}`")))
}

/// Loads the checkpoint and the scene it was trained on (or `cfg.data`).
fn restore(cfg: &RunConfig) -> CliResult<Restored> {
    let ckpt = load_checkpoint(&cfg.checkpoint_path())?;
    let data = match &cfg.data {
        Some(d) => d.clone(),
        None => PathBuf::from(meta::<String>(&ckpt, "data")?),
    };
    let standardize = ckpt
        .meta
        .get("normalize")
        .map_or(cfg.normalize, |v| v == "true");
    let (cube, gt) = load_scene(&data, standardize)?;
    let mc = ckpt.params.config();
    if mc.bands != cube.bands() || mc.classes != gt.num_classes() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} bands and {} classes, scene has {} and {}",
            mc.bands,
            mc.classes,
            cube.bands(),
            gt.num_classes()
        )));
    }
    Ok(Restored { ckpt, cube, gt })
}

/// Metrics on the test pixels of the training split, plus maps.
pub fn cmd_eval(cfg: &RunConfig, w: &mut dyn Write) -> CliResult<MetricsReport> {
    cfg.validate()?;
    let Restored { ckpt, cube, gt } = restore(cfg)?;
    let seed: u64 = meta(&ckpt, "seed")?;
    let fraction: f64 = meta(&ckpt, "train_fraction")?;
    let split = stratified_split(&gt, fraction, seed)?;
    let (report, raster) = evaluate(&ckpt.params, &cube, &gt, &split, cfg.eval_batch)?;
    write!(w, "{}", report.table(gt.classes()))?;

    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("metrics.txt"), &report.to_kv().render())?;
    let (h, wd) = (gt.height(), gt.width());
    write_map(&cfg.out.join("classification_map.ppm"), &raster, h, wd, gt.palette())?;
    write_map(&cfg.out.join("ground_truth.ppm"), gt.labels(), h, wd, gt.palette())?;
    writeln!(w, "wrote metrics.txt, classification_map.ppm, ground_truth.ppm to {}", cfg.out.display())?;
    Ok(report)
}

/// Classifies every pixel of the scene, labeled or not.
pub fn cmd_predict_map(cfg: &RunConfig, w: &mut dyn Write) -> CliResult<Vec<u16>> {
    cfg.validate()?;
    let Restored { ckpt, cube, gt } = restore(cfg)?;
    let (h, wd) = (gt.height(), gt.width());
    let pixels: Vec<Sample> = (0..h * wd)
        .map(|i| Sample {
            row: i / wd,
            col: i % wd,
            label: 0,
        })
        .collect();
    let pred = predict_samples(&ckpt.params, &cube, &pixels, cfg.eval_batch)?;
    let raster: Vec<u16> = pred.iter().map(|&p| p as u16 + 1).collect();
    let path = cfg.out.join("prediction_map.ppm");
    create_dir(&cfg.out)?;
    write_map(&path, &raster, h, wd, gt.palette())?;
    let mut counts = vec![0usize; gt.num_classes()];
    for &p in &pred {
        counts[p] += 1;
    }
    writeln!(w, "{:>5}  {:<10}  {:>7}", "class", "name", "pixels")?;
    for (i, (name, n)) in gt.classes().iter().zip(&counts).enumerate() {
        writeln!(w, "{:>5}  {:<10}  {:>7}", i + 1, name, n)?;
    }
    writeln!(w, "wrote {}", path.display())?;
    Ok(raster)
}

/// Bands, patch side and classes of the gradient-check network.
pub const GRADCHECK_GEOMETRY: (usize, usize, usize) = (10, 7, 3);

/// Finite-difference check of the whole training loss. The architecture
/// comes from `cfg` at a fixed small geometry; fails with
/// [`CliError::Verification`] when any parameter exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig, w: &mut dyn Write) -> CliResult<ModelGradCheck> {
    let (bands, patch_size, classes) = GRADCHECK_GEOMETRY;
    let model = ModelConfig {
        patch_size,
        ..cfg.model_for(bands, classes)?
    };
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = GradCheckOptions {
        step: MODEL_GRADCHECK_STEP,
        coords_per_input: Some(6),
        seed: cfg.train.seed,
    };
    writeln!(w, "{model}")?;
    let start = Instant::now();
    let report = gradcheck_model(&model, cfg.train.seed, &opts)?;
    let width = report.groups.iter().map(|(n, _)| n.len()).max().unwrap_or(5);
    let mut tsv = String::from("parameter\tmax_rel_error\n");
    for (name, err) in &report.groups {
        writeln!(w, "{name:<width$}  {err:.3e}")?;
        let _ = writeln!(tsv, "{name}\t{err:e}");
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("gradcheck.tsv"), &tsv)?;
    writeln!(
        w,
        "{} coordinates in {:.1} s",
        report.coords_checked,
        start.elapsed().as_secs_f64()
    )?;
    let max = report.max_rel_error;
    if max <= GRADCHECK_TOLERANCE {
        writeln!(w, "max rel err {max:.3e} ≤ 1e-5: PASS")?;
        Ok(report)
    } else {
        writeln!(w, "max rel err {max:.3e} > 1e-5: FAIL")?;
        Err(CliError::Verification(format!(
            "gradient check failed: max relative error {max:.3e}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub case: u8,
    pub report: MetricsReport,
}

/// Trains and evaluates cases 1 to 5 on one split with one seed, running up
/// to `threads` cases at once. Rows come back in case order either way.
pub fn cmd_ablate(cfg: &RunConfig, threads: usize, w: &mut dyn Write) -> CliResult<Vec<AblationRow>> {
    cfg.validate()?;
    let (cube, gt) = load_scene(data_path(cfg)?, cfg.normalize)?;
    let tc = &cfg.train;
    let split = stratified_split(&gt, tc.train_fraction, tc.seed)?;
    let samples = split.train_samples();
    let models = (1..=5u8)
        .map(|case| {
            cfg.model_for(cube.bands(), gt.num_classes())
                .map(|m| ModelConfig { case, ..m })
        })
        .collect::<CliResult<Vec<_>>>()?;
    writeln!(
        w,
        "{} training pixels, {} test pixels, seed {}, {} epochs",
        samples.len(),
        split.test_samples().len(),
        tc.seed,
        tc.epochs
    )?;

    let run = |m: &ModelConfig| -> cmtnet::Result<MetricsReport> {
        let params = ModelParams::init(m, tc.seed)?;
        let (params, _) = train(params, &cube, &samples, tc)?;
        Ok(evaluate(&params, &cube, &gt, &split, cfg.eval_batch)?.0)
    };
    let threads = threads.clamp(1, models.len());
    let mut reports = Vec::with_capacity(models.len());
    for chunk in models.chunks(threads) {
        let done: Vec<cmtnet::Result<MetricsReport>> = if threads == 1 {
            chunk.iter().map(&run).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|m| s.spawn(|| run(m))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("ablation worker panicked"))
                    .collect()
            })
        };
        for r in done {
            reports.push(r?);
        }
    }

    let rows: Vec<AblationRow> = models
        .iter()
        .zip(reports)
        .map(|(m, report)| AblationRow { case: m.case, report })
        .collect();
    let mut tsv = String::from("case\toa\taa\tkappa\n");
    writeln!(w, "{:>4}  {:>8}  {:>8}  {:>8}", "Case", "OA(%)", "AA(%)", "k×100")?;
    for r in &rows {
        let m = &r.report;
        writeln!(
            w,
            "{:>4}  {:>8.2}  {:>8.2}  {:>8.2}",
            r.case,
            100.0 * m.oa,
            100.0 * m.aa,
            100.0 * m.kappa
        )?;
        let _ = writeln!(tsv, "{}\t{}\t{}\t{}", r.case, m.oa, m.aa, m.kappa);
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("ablation.tsv"), &tsv)?;
    Ok(rows)
}

/// Parallelism cap from `SPECTRA_THREADS`; 1 when unset.
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var("SPECTRA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("SPECTRA_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}
