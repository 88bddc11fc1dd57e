//! `mmsynth`: phantom generation, preprocessing, training, synthesis,
//! refinement, evaluation and difference maps from one entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use mmsynth::config::{RunConfig, RunDir};
use mmsynth::error::Result;
use mmsynth::evaluation::write_difference_maps;
use mmsynth::inference::{MmgSynthesizer, Synthesizer};
use mmsynth::io::{read_case, read_volume, write_json, write_volume, Split};
use mmsynth::phantom::write_phantom_dataset;
use mmsynth::pipeline;
use mmsynth::training::{derive_seed, load_cen_model, load_mmg_model};
use mmsynth::types::Modality;
use mmsynth::volumetric::refine_volume;

#[derive(Parser, Debug)]
#[command(name = "mmsynth", version, about = "Missing-modality brain MRI synthesis")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON or TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_enum, default_value_t = DeviceArg::Cpu)]
    device: DeviceArg,
    /// Run directory name under $SLAMDIMM_RUNS (default: command name and seed).
    #[arg(long, global = true)]
    run: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DeviceArg {
    Cpu,
    Accelerator,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Validation => Some(Split::Validation),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clip, trim and normalize every case of a dataset.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic phantom dataset.
    Phantom {
        #[arg(long, default_value_t = 4)]
        cases: usize,
        /// Dataset directory (default: `<run>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        val_fraction: f64,
    },
    /// Train the slice model.
    TrainMmg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the volumetric refiner on frozen slice-model outputs.
    TrainCen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mmg: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Synthesize one missing modality of a case, slice by slice.
    Synthesize {
        /// Case directory (holding a manifest).
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        mmg: PathBuf,
        #[arg(long)]
        missing: Modality,
        /// Also write the exact four-channel input the model saw.
        #[arg(long)]
        debug_dump: bool,
    },
    /// Refine a synthesized volume with the volumetric refiner.
    Refine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cen: PathBuf,
        #[arg(long)]
        modality: Modality,
    },
    /// Score synthesized (and optionally refined) volumes against ground truth.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mmg: PathBuf,
        #[arg(long)]
        cen: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
        split: SplitArg,
        /// Evaluate only this missing modality (default: all four).
        #[arg(long)]
        missing: Option<Modality>,
    },
    /// Difference maps (O-M, O-C, M-C) for one axial slice.
    PlotDiff {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        mmg: PathBuf,
        #[arg(long)]
        cen: Option<PathBuf>,
        #[arg(long)]
        case_id: Option<String>,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        slice: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Preprocess { .. } => "preprocess",
            Command::Phantom { .. } => "phantom",
            Command::TrainMmg { .. } => "train-mmg",
            Command::TrainCen { .. } => "train-cen",
            Command::Synthesize { .. } => "synthesize",
            Command::Refine { .. } => "refine",
            Command::Evaluate { .. } => "evaluate",
            Command::PlotDiff { .. } => "plot-diff",
        }
    }
}

fn device(arg: DeviceArg) -> Result<Device> {
    match arg {
        DeviceArg::Cpu => Ok(Device::Cpu),
        DeviceArg::Accelerator => {
            let d = Device::cuda_if_available(0)?;
            if d.is_cpu() {
                warn!("no accelerator available in this build; running on cpu");
            }
            Ok(d)
        }
    }
}

fn case_id_of(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.train.seed = seed;
    }
    match &cli.command {
        Command::TrainMmg { epochs: Some(e), .. } => cfg.train.mmg.epochs = *e,
        Command::TrainCen { epochs: Some(e), .. } => cfg.train.cen.epochs = *e,
        _ => {}
    }
    cfg.validate()?;
    let seed = cfg.train.seed;
    let name = cli
        .global
        .run
        .clone()
        .unwrap_or_else(|| format!("{}-seed{seed}", cli.command.name()));
    let run = RunDir::create(&RunDir::root_from_env(), &name, cli.global.force)?;
    let args: Vec<String> = std::env::args().collect();
    run.record(
        &cfg,
        &args,
        &json!({
            "root_seed": seed,
            "mmg_init": derive_seed(seed, "mmg-init"),
            "mmg_train": derive_seed(seed, "mmg-train"),
            "cen_init": derive_seed(seed, "cen-init"),
            "cen_train": derive_seed(seed, "cen-train"),
        }),
    )?;
    let dev = device(cli.global.device)?;
    info!("run directory {}", run.path.display());

    match cli.command {
        Command::Preprocess { input, out } => {
            let ids = pipeline::preprocess_dataset(&cfg, &input, &out, cli.global.workers)?;
            write_json(&run.join("preprocessed.json"), &json!({ "output": out, "cases": ids }))?;
        }
        Command::Phantom {
            cases,
            out,
            val_fraction,
        } => {
            let out = out.unwrap_or_else(|| run.join("data"));
            let spec = mmsynth::phantom::PhantomSpec {
                seed: cfg.phantom.seed.wrapping_add(seed),
                ..cfg.phantom.clone()
            };
            let manifests = write_phantom_dataset(&out, cases, &spec, val_fraction)?;
            write_json(&run.join("phantom.json"), &json!({ "output": out, "cases": manifests }))?;
        }
        Command::TrainMmg { data, resume, .. } => {
            let s = pipeline::train_mmg(&cfg, &data, &run.path, &dev, resume.as_deref())?;
            write_json(
                &run.join("summary.json"),
                &json!({ "last": s.last, "best": s.best, "best_val_ssim": s.best_val_ssim, "steps": s.steps }),
            )?;
        }
        Command::TrainCen { data, mmg, .. } => {
            let s = pipeline::train_cen(&cfg, &data, &mmg, &run.path, &dev)?;
            write_json(&run.join("summary.json"), &json!({ "last": s.last, "steps": s.steps }))?;
        }
        Command::Synthesize {
            case,
            mmg,
            missing,
            debug_dump,
        } => {
            let (full, _) = read_case(&case)?;
            let (model, sched, _) = load_mmg_model(&mmg, &dev)?;
            let masked = full.with_zeroed(missing);
            if debug_dump {
                for (m, v) in &masked.volumes {
                    write_volume(&run.join("debug").join(format!("{}_input_{m}.nii.gz", full.case_id)), v)?;
                }
            }
            let synth = MmgSynthesizer {
                model: &model,
                sched: &sched,
                cfg: cfg.inference,
            };
            let seed = mmsynth::evaluation::case_seed(seed, &full.case_id, missing);
            let out = synth.synthesize(&masked, missing, seed)?;
            write_volume(&run.join(format!("{}_{missing}_mmg.nii.gz", full.case_id)), &out)?;
        }
        Command::Refine { input, cen, modality } => {
            let v = read_volume(&input, modality)?;
            let (model, _) = load_cen_model(&cen, &dev)?;
            let plan = cfg.windows.plan(v.depth())?;
            let out = refine_volume(&v, &model, &plan)?;
            let stem = input
                .file_name()
                .map(|s| s.to_string_lossy().trim_end_matches(".nii.gz").to_string())
                .unwrap_or_else(|| "volume".into());
            write_volume(&run.join(format!("{stem}_cen.nii.gz")), &out)?;
        }
        Command::Evaluate {
            data,
            mmg,
            cen,
            split,
            missing,
        } => {
            let list: Vec<Modality> = missing.map(|m| vec![m]).unwrap_or_else(|| Modality::ALL.to_vec());
            pipeline::evaluate_dataset(&cfg, &data, split.split(), &mmg, cen.as_deref(), &list, &run.path, &dev)?;
        }
        Command::PlotDiff {
            original,
            mmg,
            cen,
            case_id,
            modality,
            slice,
        } => {
            let o = read_volume(&original, modality)?;
            let m = read_volume(&mmg, modality)?;
            let c = cen.map(|p| read_volume(&p, modality)).transpose()?;
            let id = case_id.unwrap_or_else(|| case_id_of(&original));
            write_difference_maps(&run.path, &id, &o, &m, c.as_ref(), slice)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({ "error": { "kind": e.kind(), "code": e.exit_code(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
