use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adt_core::adtf::read_field;
use adt_core::error::{Error, Result};
use adt_core::field::argmax_labels;
use adt_core::operators::{InterventionSchedule, TreatmentContext};
use adt_core::solver::{rollout, SolverConfig};
use adt_core::synth::{write_dataset, Benchmark, VesselConfig, VoronoiConfig};
use adt_harness::config::{DataConfig, ExperimentConfig};
use adt_harness::experiments::{ablation_run, parse_values, sensitivity_sweep, Runner, Source, SweepAxis};
use adt_harness::train::{evaluate, load_model, train, ExperimentResult};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Argmax colours for `export-png`, indexed by class and reused cyclically.
const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [213, 94, 0],
    [240, 228, 66],
    [0, 114, 178],
    [204, 121, 167],
];

#[derive(Parser)]
#[command(name = "adt", version, about = "Anatomy simulation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchmarkKind {
    Voronoi,
    Vessel,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, value_enum)]
        benchmark: BenchmarkKind,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training; one model directory per fold.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll a trained model forward from a baseline field.
    Simulate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Treatment context (JSON); no treatment when omitted.
        #[arg(long)]
        treatment: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model on every pair of a dataset.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vary one setting and tabulate DSC and HD95.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the four ablation settings.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the argmax labels of a field as a colour PNG.
    ExportPng {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
}

fn experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(v)?)
}

fn fold_summary(r: &ExperimentResult) -> String {
    let mut s = String::from("fold,dsc_macro,dsc_tumor,hd95_macro,cldice_macro,diverged\n");
    for f in &r.folds {
        let cells = match &f.headline {
            Some(h) => format!(
                "{},{},{},{}",
                h.dsc_macro,
                h.dsc_tumor,
                h.hd95_macro.map_or("UNDEFINED".into(), |v| v.to_string()),
                h.cldice_macro
            ),
            None => "COLLAPSED,COLLAPSED,COLLAPSED,COLLAPSED".into(),
        };
        s.push_str(&format!("{},{cells},{}\n", f.fold, f.diverged.is_some()));
    }
    s
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            benchmark,
            count,
            seed,
            config,
            out,
        } => {
            let b = match (benchmark, &config) {
                (BenchmarkKind::Voronoi, Some(p)) => Benchmark::Voronoi(read_json::<VoronoiConfig>(p)?),
                (BenchmarkKind::Voronoi, None) => Benchmark::Voronoi(VoronoiConfig::default()),
                (BenchmarkKind::Vessel, Some(p)) => Benchmark::Vessel(read_json::<VesselConfig>(p)?),
                (BenchmarkKind::Vessel, None) => Benchmark::Vessel(VesselConfig::default()),
            };
            let pairs = b.generate(seed, count)?;
            write_dataset(&pairs, &out, b.tumor_class(), Some(&b))?;
            println!("wrote {} {} pairs to {}", pairs.len(), b.name(), out.display());
        }
        Cmd::Train { data, config, out } => {
            let exp = experiment(config.as_deref())?;
            let source = Source::load(&DataConfig {
                dir: Some(data),
                ..exp.data.clone()
            })?;
            let o = train(source.data(), &exp.train, &exp.solver)?;
            for (fit, fold) in o.fits.iter().zip(&o.result.folds) {
                let dir = out.join(format!("fold_{}", fit.fold));
                fit.save(&dir)?;
                if let Some(r) = &fold.report {
                    write_text(&dir.join("report.csv"), &r.to_csv())?;
                }
            }
            write_json(&out.join("result.json"), &o.result)?;
            write_text(&out.join("summary.csv"), &fold_summary(&o.result))?;
            let dsc = o.result.dsc();
            println!(
                "trained {} folds in {:.1}s, macro DSC {:.4} ± {:.4}",
                o.fits.len(),
                o.result.seconds,
                dsc.mean.unwrap_or(f64::NAN),
                dsc.std.unwrap_or(f64::NAN)
            );
        }
        Cmd::Simulate {
            params,
            baseline,
            schedule,
            treatment,
            config,
            out,
        } => {
            let model = load_model(&params)?;
            let solver: SolverConfig = match &config {
                Some(p) => experiment(Some(p))?.solver,
                None => SolverConfig::default(),
            };
            let p0 = read_field(&baseline)?;
            let schedule = match &schedule {
                Some(p) => InterventionSchedule::load_json(p)?,
                None => InterventionSchedule::empty(),
            };
            let ctx = match &treatment {
                Some(p) => {
                    let c: TreatmentContext = read_json(p)?;
                    c.validate()?;
                    c
                }
                None => TreatmentContext::none(model.params.kill_rates.len()),
            };
            let traj = rollout(&p0, &model.params, &ctx, &schedule, &solver, model.residual.as_ref())?;
            traj.save(&out, &solver)?;
            println!("wrote {} states to {}", traj.states.len(), out.display());
        }
        Cmd::Eval {
            params,
            data,
            config,
            out,
        } => {
            let exp = experiment(config.as_deref())?;
            let model = load_model(&params)?;
            let source = Source::load(&DataConfig {
                dir: Some(data),
                ..DataConfig::default()
            })?;
            let all: Vec<usize> = (0..source.pairs.len()).collect();
            let report = evaluate(&model, source.data(), &all, &exp.solver, &exp.train.skeleton)?;
            write_text(&out, &report.to_csv())?;
            let m = report.class_summary(None).expect("macro row");
            println!("macro DSC {:.4} over {} pairs", m.dsc.mean.unwrap_or(f64::NAN), all.len());
        }
        Cmd::Sweep {
            axis,
            values,
            config,
            out,
        } => {
            let exp = ExperimentConfig::load(&config)?;
            let values = parse_values(&values)?;
            let source = Source::load(&exp.data)?;
            let table = sensitivity_sweep(&Runner::new(), &source, axis, &values, &exp)?;
            write_text(&out.join(format!("sweep_{}.csv", axis.name())), &table.to_csv())?;
            write_json(&out.join(format!("sweep_{}.json", axis.name())), &table)?;
            print!("{}", table.to_csv());
        }
        Cmd::Ablate { data, config, out } => {
            let exp = experiment(config.as_deref())?;
            let source = Source::load(&DataConfig {
                dir: Some(data),
                ..exp.data.clone()
            })?;
            let table = ablation_run(&Runner::new(), &source, &exp.train, &exp.solver)?;
            write_text(&out.join("ablation.csv"), &table.to_csv())?;
            write_json(&out.join("ablation.json"), &table)?;
            print!("{}", table.to_csv());
        }
        Cmd::ExportPng { field, out, scale } => {
            if scale == 0 {
                return Err(Error::InvalidConfig("scale must be ≥ 1".into()));
            }
            let f = read_field(&field)?;
            let g = f.grid();
            let labels = argmax_labels(&f);
            let img = image::RgbImage::from_fn(g.width as u32 * scale, g.height as u32 * scale, |x, y| {
                let l = labels[(y / scale) as usize * g.width + (x / scale) as usize];
                image::Rgb(PALETTE[l % PALETTE.len()])
            });
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            img.save(&out)
                .map_err(|e| Error::io(&out, std::io::Error::other(e.to_string())))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("ADT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
