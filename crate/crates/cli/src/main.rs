mod spec;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vmcr_core::data::{load_dataset, resize_normalize, synth_dataset, write_dataset, DomainConfig};
use vmcr_core::gradsuite::{self, TOLERANCE};
use vmcr_core::metrics::{markdown_table, read_metrics_csv, write_metrics, write_metrics_csv, Averaging, MetricsRow};
use vmcr_core::perturb::{default_sigma, gen_mask};
use vmcr_core::trainer::{
    evaluate_threaded, perturbation_loss_maps, read_checkpoint, write_checkpoint, LogWriter, Mode, TrainData, Trainer,
};

use spec::ExperimentSpec;

/// Iteration at which the mixing-vs-flip loss maps are recorded.
const PROBE_ITERATION: u64 = 200;

#[derive(Parser)]
#[command(name = "vmcr", version, about = "Vessel-mixing consistency training for artery/vein segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference check of every op and of the U-Net loss.
    Gradcheck {
        /// Restrict to one op (e.g. conv2d).
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
        seeds: u64,
    },
    /// Render a synthetic dataset.
    GenData {
        /// TOML file with the domain's rendering parameters.
        #[arg(long)]
        domain: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Defaults to the domain file's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Write one guidance mask as a PNG.
    GenMask {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        /// Defaults to min(h, w) / 8.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode of an experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV to write; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the student instead of the teacher.
        #[arg(long)]
        student: bool,
        /// Macro-average the aggregate row over images.
        #[arg(long = "macro")]
        macro_avg: bool,
    },
    /// Collate run directories into one markdown table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
}

fn threads() -> Result<usize> {
    match std::env::var("VMCR_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!(vmcr_core::Error::Config(format!("VMCR_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

/// Runs `fill` on a fresh staging directory next to `out` and renames it
/// into place once everything has been written.
fn atomic_dir(out: &Path, force: bool, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() && !force {
        bail!("{} already exists; pass --force to replace it", out.display());
    }
    let name = out
        .file_name()
        .with_context(|| format!("{} has no final component", out.display()))?
        .to_string_lossy()
        .into_owned();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;
    if let Err(e) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(&staging, out)?;
    Ok(())
}

fn cmd_gradcheck(op: Option<String>, seeds: u64) -> Result<ExitCode> {
    let results = gradsuite::run_suite(op.as_deref(), seeds, None)?;
    let mut failed = 0;
    let mut last = "";
    for r in &results {
        if r.op != last {
            let worst = results
                .iter()
                .filter(|c| c.op == r.op)
                .map(|c| c.report.max_rel_error)
                .fold(0.0, f64::max);
            let bad = results.iter().filter(|c| c.op == r.op && !c.passed()).count();
            println!(
                "{:<12} worst {:.2e} over {} seeds {}",
                r.op,
                worst,
                seeds,
                if bad == 0 { "ok" } else { "FAILED" }
            );
            last = r.op;
        }
        if !r.passed() {
            failed += 1;
            println!(
                "  seed {}: error {:.3e} at input {} index {} (analytic {:.6e}, numeric {:.6e})",
                r.seed, r.report.max_rel_error, r.report.worst_input, r.report.worst_index, r.report.analytic, r.report.numeric
            );
        }
    }
    println!("{} of {} cases below {TOLERANCE:e}", results.len() - failed, results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_gen_data(domain: &Path, n: usize, size: usize, out_dir: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let text = fs::read_to_string(domain).with_context(|| format!("reading {}", domain.display()))?;
    let cfg: DomainConfig = toml::from_str(&text)
        .map_err(|e| vmcr_core::Error::Config(format!("{}: {}", domain.display(), e.to_string().trim_end())))?;
    cfg.validate()?;
    let samples = synth_dataset(&cfg, n, size, seed.unwrap_or(cfg.seed))?;
    atomic_dir(out_dir, force, |dir| Ok(write_dataset(dir, &samples)?))?;
    println!("wrote {n} samples to {}", out_dir.display());
    Ok(())
}

fn cmd_gen_mask(h: usize, w: usize, sigma: Option<f64>, seed: u64, out: &Path) -> Result<()> {
    let m = gen_mask(h, w, sigma.unwrap_or_else(|| default_sigma(h, w)), seed)?;
    m.write_png(out)?;
    println!("{}: ones fraction {:.4}", out.display(), m.ones_fraction());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mode: Option<Mode>,
    iterations: Option<u64>,
    size: Option<usize>,
    sigma: Option<f64>,
    force: bool,
) -> Result<()> {
    let mut spec = ExperimentSpec::load(config)?;
    let t = &mut spec.train;
    if let Some(s) = seed {
        t.seed = s;
    }
    if let Some(m) = mode {
        t.mode = m;
    }
    if let Some(i) = iterations {
        t.iterations = i;
    }
    if let Some(s) = size {
        t.image_size = s;
    }
    if sigma.is_some() {
        t.mask_sigma = sigma;
    }
    spec.validate()?;
    let out = out
        .or_else(|| spec.out_dir.clone())
        .context("no output directory: pass --out or set out_dir in the config")?;
    spec.out_dir = Some(out.clone());
    let cfg = spec.train.clone();

    let source = spec.source.splits(cfg.seed, 0, cfg.image_size)?;
    let target = spec.target.splits(cfg.seed, 1, cfg.image_size)?;
    if cfg.mode == Mode::TargetOnly && target.train.iter().all(|s| s.labels.vessel().iter().all(|&v| v == 0)) {
        bail!(vmcr_core::Error::Data("target-only needs labeled target training data".into()));
    }
    let data = TrainData::for_mode(cfg.mode, &source.train, &source.val, &target.train, &target.val);
    let threads = threads()?;

    atomic_dir(&out, force, |dir| {
        fs::write(dir.join("config.toml"), toml::to_string(&spec)?)?;
        let mut log = LogWriter::new(fs::File::create(dir.join("log.csv"))?)?;
        let mut tr = Trainer::new(cfg.clone())?;
        let mut on_row = |r: &vmcr_core::trainer::LogRow| {
            if r.iteration % 100 == 0 || r.iteration == cfg.iterations {
                eprintln!(
                    "[{}] {:>6}/{} L_S {:.4} total {:.4} ({:.0}s)",
                    cfg.mode, r.iteration, cfg.iterations, r.report.supervised, r.report.total, r.wall_time
                );
            }
            log.write(r)
        };
        let probe = PROBE_ITERATION.min(cfg.iterations);
        tr.run_until(&data, probe, &mut on_row)?;
        let batch = tr.batch_at(&data, probe)?;
        if batch.target_images.shape()[0] >= 2 {
            let mask = gen_mask(cfg.image_size, cfg.image_size, cfg.sigma(), cfg.seed ^ 0x5EED)?;
            let x1 = batch.target_images.index0(0)?;
            let x2 = batch.target_images.index0(1)?;
            let (mix, flip) =
                perturbation_loss_maps(&cfg.model, &tr.models.student, &tr.models.teacher, &x1, &x2, &mask)?;
            mix.write_png(dir, &format!("lossmap_mix_it{probe}"))?;
            flip.write_png(dir, &format!("lossmap_flip_it{probe}"))?;
            mask.write_png(&dir.join(format!("mask_it{probe}.png")))?;
            fs::write(
                dir.join("probe.csv"),
                format!("iteration,mix_mean,flip_mean\n{probe},{},{}\n", mix.mean, flip.mean),
            )?;
        }
        tr.run(&data, &mut on_row)?;
        log.flush()?;
        write_checkpoint(&dir.join("checkpoint.vmcr"), &tr)?;
        if target.test.is_empty() {
            eprintln!("no target test split; skipping metrics.csv");
        } else {
            let rows = evaluate_threaded(&cfg.model, tr.eval_params(), &target.test, Averaging::Micro, threads)?;
            write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
            let agg = rows.last().expect("aggregate row");
            println!("{} seed {}: target F1/Acc/Sen/Sp {}", cfg.mode, cfg.seed, vmcr_core::metrics::format_cell(agg));
        }
        Ok(())
    })
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>, student: bool, macro_avg: bool) -> Result<()> {
    let tr = read_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let size = tr.config.image_size;
    let samples = load_dataset(data)?
        .iter()
        .map(|s| resize_normalize(s, size))
        .collect::<vmcr_core::Result<Vec<_>>>()?;
    let params = if student { &tr.models.student } else { tr.eval_params() };
    let averaging = if macro_avg { Averaging::Macro } else { Averaging::Micro };
    let rows = evaluate_threaded(&tr.config.model, params, &samples, averaging, threads()?)?;
    match out {
        Some(p) => {
            write_metrics_csv(p, &rows)?;
            let agg = rows.last().expect("aggregate row");
            println!("{}: F1/Acc/Sen/Sp {}", p.display(), vmcr_core::metrics::format_cell(agg));
        }
        None => write_metrics(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn mean_of(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>, title: Option<String>) -> Result<()> {
    let mut by_mode: Vec<(Mode, Vec<MetricsRow>)> = Vec::new();
    let mut names = Vec::new();
    for dir in runs {
        let spec: ExperimentSpec = toml::from_str(
            &fs::read_to_string(dir.join("config.toml")).with_context(|| format!("{}: not a run directory", dir.display()))?,
        )?;
        let rows = read_metrics_csv(&dir.join("metrics.csv"))?;
        let agg = rows
            .into_iter()
            .rev()
            .find(|r| r.aggregate)
            .with_context(|| format!("{}: metrics.csv has no aggregate row", dir.display()))?;
        names.push(spec.name.clone());
        match by_mode.iter_mut().find(|(m, _)| *m == spec.train.mode) {
            Some((_, v)) => v.push(agg),
            None => by_mode.push((spec.train.mode, vec![agg])),
        }
    }
    by_mode.sort_by_key(|(m, _)| Mode::ALL.iter().position(|x| x == m));
    let table: Vec<(String, MetricsRow)> = by_mode
        .iter()
        .map(|(mode, rows)| {
            let mut avg = rows[0].clone();
            avg.f1 = mean_of(rows, |r| r.f1);
            avg.acc = mean_of(rows, |r| r.acc);
            avg.sen = mean_of(rows, |r| r.sen);
            avg.sp = mean_of(rows, |r| r.sp);
            let label = if rows.len() > 1 {
                format!("{} (mean of {})", mode.label(), rows.len())
            } else {
                mode.label().to_string()
            };
            (label, avg)
        })
        .collect();
    names.dedup();
    let title = title.unwrap_or_else(|| names.join(", "));
    let md = markdown_table(&title, &table);
    match out {
        Some(p) => fs::write(p, &md)?,
        None => print!("{md}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Gradcheck { op, seeds } => return cmd_gradcheck(op, seeds),
        Cmd::GenData {
            domain,
            n,
            size,
            out_dir,
            seed,
            force,
        } => cmd_gen_data(&domain, n, size, &out_dir, seed, force)?,
        Cmd::GenMask { h, w, sigma, seed, out } => cmd_gen_mask(h, w, sigma, seed, &out)?,
        Cmd::Train {
            config,
            seed,
            out,
            mode,
            iterations,
            size,
            sigma,
            force,
        } => cmd_train(&config, seed, out, mode, iterations, size, sigma, force)?,
        Cmd::Eval {
            checkpoint,
            data,
            out,
            student,
            macro_avg,
        } => cmd_eval(&checkpoint, &data, out.as_deref(), student, macro_avg)?,
        Cmd::Report { runs, out, title } => cmd_report(&runs, out.as_deref(), title)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
