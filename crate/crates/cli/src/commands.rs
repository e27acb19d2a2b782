use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use faps_core::config::{RunConfig, TrainerSpec};
use faps_core::geometry::{enumerate_space, policy_to_box, AlignmentPolicy};
use faps_core::imaging::{align_direct, align_via_canvas, read_pnm, write_pnm, ImageBuffer, ImageError};
use faps_core::search::{run_search, EventLog, SearchMode, SearchResult};
use faps_core::trainers::{run_grid, SyntheticTrainer};
use serde::Serialize;

use crate::args::{AlignArgs, AlignPath, Common, ReportArgs};
use crate::error::CliError;
use crate::inputs::{parse_policy, read_landmarks};

/// The effective configuration: file (or defaults) plus flag overrides.
pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.search.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.search.mode = mode.into();
    }
    if let Some(out) = &common.out {
        cfg.io.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg.io.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), CliError> {
    let fail = |e: io::Error| CliError::runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(fail)?);
    write(&mut w).map_err(fail)?;
    w.flush().map_err(fail)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn synthetic_trainer(cfg: &RunConfig) -> Result<SyntheticTrainer, CliError> {
    match cfg.synthetic_trainer() {
        Some(t) => t.map_err(CliError::usage),
        None => {
            let TrainerSpec::External { name } = &cfg.trainer else { unreachable!() };
            Err(CliError::usage(format!("trainer `{name}` is external; this binary only runs the synthetic trainer")))
        }
    }
}

pub fn space(cfg: &RunConfig, out: &mut impl Write) -> Result<(), CliError> {
    let policies = enumerate_space(&cfg.space);
    let write = |out: &mut dyn Write| -> Result<(), Box<dyn std::error::Error>> {
        writeln!(out, "{}", policies.len())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "delta", "left", "top", "side"])?;
        for p in &policies {
            let b = policy_to_box(*p, cfg.space.canvas)?;
            w.serialize((p.m, p.delta, b.left, b.top, b.side))?;
        }
        w.flush()?;
        Ok(())
    };
    write(out).map_err(CliError::runtime)
}

pub fn align(cfg: &RunConfig, args: &AlignArgs, out: &mut impl Write) -> Result<(), CliError> {
    let policy = parse_policy(&args.policy, &cfg.space)?;
    let landmarks = read_landmarks(&args.landmarks)?;
    if landmarks.len() != cfg.template.landmarks.len() {
        return Err(CliError::usage(format!(
            "{} has {} landmarks but the template has {}",
            args.landmarks.display(),
            landmarks.len(),
            cfg.template.landmarks.len()
        )));
    }
    let img = read_pnm(&args.image).map_err(|e| CliError::usage(format!("{}: {e}", args.image.display())))?;
    let dir = out_dir(cfg)?;
    let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
    let run = |name: &str, f: fn(&ImageBuffer, _, AlignmentPolicy, _) -> Result<ImageBuffer, ImageError>| {
        let aligned = f(&img, &landmarks, policy, &cfg.template).map_err(CliError::runtime)?;
        let path = dir.join(format!("aligned_{name}.{ext}"));
        write_pnm(&aligned, &path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
        Ok::<_, CliError>(aligned)
    };
    let direct =
        matches!(args.path, AlignPath::Direct | AlignPath::Both).then(|| run("direct", align_direct)).transpose()?;
    let canvas = matches!(args.path, AlignPath::Canvas | AlignPath::Both)
        .then(|| run("canvas", align_via_canvas))
        .transpose()?;
    if args.report {
        let (Some(a), Some(b)) = (&direct, &canvas) else {
            return Err(CliError::usage("--report needs --path both"));
        };
        // compare what was written, i.e. after 8-bit quantization
        let quantized = |i: &ImageBuffer| ImageBuffer::from_u8(i.width(), i.height(), i.channels(), &i.to_u8());
        let (qa, qb) = (quantized(a).map_err(CliError::runtime)?, quantized(b).map_err(CliError::runtime)?);
        let (max, mean) = qa.abs_diff_stats(&qb).expect("same output size");
        writeln!(out, "max_abs_diff,{max}\nmean_abs_diff,{mean:.6}").map_err(CliError::runtime)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    best_policy: AlignmentPolicy,
    best_accuracy: f64,
    best_member: usize,
    best_epoch: u32,
    trainer_steps: u64,
    population_size: usize,
    total_epochs: u32,
    seed: u64,
    mode: SearchMode,
    lineage: &'a [Vec<faps_core::search::Lineage>],
}

impl<'a> SearchSummary<'a> {
    fn new(r: &'a SearchResult, cfg: &RunConfig) -> Self {
        Self {
            best_policy: r.best_policy,
            best_accuracy: r.best_accuracy,
            best_member: r.best_member,
            best_epoch: r.best_epoch,
            trainer_steps: r.trainer_steps,
            population_size: cfg.search.population_size,
            total_epochs: cfg.search.total_epochs,
            seed: cfg.search.seed,
            mode: cfg.search.mode,
            lineage: &r.lineage,
        }
    }
}

fn write_log(dir: &Path, log: &mut EventLog, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    log.header.trainer = serde_json::to_value(&cfg.trainer).ok();
    let path = dir.join("events.jsonl");
    write_file(&path, |w| log.write_jsonl(w))?;
    Ok(path)
}

pub fn search(cfg: &RunConfig, out: &mut impl Write) -> Result<(), CliError> {
    let trainer = synthetic_trainer(cfg)?;
    let dir = out_dir(cfg)?;
    log::info!("searching with seed {} in {:?} mode", cfg.search.seed, cfg.search.mode);
    match run_search(&cfg.search, &cfg.space, &trainer) {
        Ok(mut r) => {
            write_log(dir, &mut r.log, cfg)?;
            write_json(&dir.join("result.json"), &SearchSummary::new(&r, cfg))?;
            writeln!(out, "best_policy {} accuracy {:.6} steps {}", r.best_policy, r.best_accuracy, r.trainer_steps)
                .map_err(CliError::runtime)
        }
        Err(mut failure) => {
            let path = write_log(dir, &mut failure.log, cfg)?;
            Err(CliError::runtime(format!("{}; partial log kept at {}", failure.error, path.display())))
        }
    }
}

#[derive(Serialize)]
struct GridSummary {
    best_policy: AlignmentPolicy,
    best_accuracy: f64,
    trainer_steps: u64,
    candidates: usize,
    epochs: u32,
}

pub fn grid(cfg: &RunConfig, out: &mut impl Write) -> Result<(), CliError> {
    let trainer = synthetic_trainer(cfg)?;
    let dir = out_dir(cfg)?;
    let epochs = cfg.search.total_epochs;
    let g = run_grid(&cfg.space, &trainer, epochs).map_err(CliError::runtime)?;
    let csv_path = dir.join("grid.csv");
    write_file(&csv_path, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["m", "delta", "accuracy"])?;
        for e in &g.table {
            c.serialize((e.policy.m, e.policy.delta, e.accuracy))?;
        }
        c.flush()
    })?;
    let summary = GridSummary {
        best_policy: g.best_policy,
        best_accuracy: g.best_accuracy,
        trainer_steps: g.trainer_steps,
        candidates: g.table.len(),
        epochs,
    };
    write_json(&dir.join("result.json"), &summary)?;
    writeln!(out, "best_policy {} accuracy {:.6} steps {}", g.best_policy, g.best_accuracy, g.trainer_steps)
        .map_err(CliError::runtime)
}

/// Writes the trajectory to `<out>/trajectory.csv` when `--out` is given,
/// otherwise to `out`.
pub fn report(args: &ReportArgs, out_flag: Option<&Path>, out: &mut impl Write) -> Result<(), CliError> {
    let file = File::open(&args.log).map_err(|e| CliError::usage(format!("{}: {e}", args.log.display())))?;
    let log = EventLog::read_jsonl(BufReader::new(file))
        .map_err(|e| CliError::usage(format!("{}: {e}", args.log.display())))?;
    let emit = |w: &mut dyn Write| -> Result<(), csv::Error> {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["epoch", "member_id", "m", "delta", "val_acc"])?;
        for p in log.trajectory() {
            c.serialize((p.epoch, p.member, p.policy.m, p.policy.delta, p.val_acc))?;
        }
        c.flush()?;
        Ok(())
    };
    match out_flag {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(CliError::runtime)?;
            write_file(&dir.join("trajectory.csv"), |w| emit(w).map_err(io::Error::other))
        }
        None => emit(out).map_err(CliError::runtime),
    }
}
