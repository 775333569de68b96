use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use causal_tune::config::RunConfig;
use causal_tune::cten::{self, CtenTensor};
use causal_tune::experiment::{
    ablate, build_model, compare_with_baseline, decompose, eval_model, gradcheck_suite, load_params, median,
    params_from_cten, params_to_cten, selftest, sweep, train, write_ablation_csv, write_comparison_csv,
    write_sweep_csv,
};
use causal_tune::filtering::{FilterConfig, FilterMode, DEFAULT_RH, DEFAULT_RL};
use causal_tune::image::Image;
use causal_tune::spectral::{Backend, FeatureMap};
use causal_tune::synthbench::{corrupt, gen_scene, Corruption, CorruptionKind};
use causal_tune::{Error, Result};

#[derive(Parser)]
#[command(
    name = "causal-tune",
    version,
    about = "Frequency-domain causal feature refinement on a toy frozen backbone"
)]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split an image or tensor into causal and non-causal parts.
    Decompose {
        /// PPM image or CTEN file (first tensor, or the one named by --tensor).
        #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
        input: Option<PathBuf>,
        #[arg(long)]
        tensor: Option<String>,
        /// Use a generated scene instead of a file.
        #[arg(long)]
        scene: Option<u64>,
        /// Corrupt the generated scene first.
        #[arg(long, requires = "scene")]
        corruption: Option<CorruptionKind>,
        #[arg(long, default_value_t = DEFAULT_RL)]
        rl: f64,
        #[arg(long, default_value_t = DEFAULT_RH)]
        rh: f64,
        #[arg(long, default_value = "band-pass")]
        mode: FilterMode,
        #[arg(long, default_value = "dct")]
        backend: Backend,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Train and evaluate one model per cutoff pair.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        rl_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        rh_grid: Vec<f64>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and head; writes checkpoint.cten, loss.csv, summary.txt.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides output.dir.
        #[arg(long)]
        outdir: Option<PathBuf>,
    },
    /// Score a checkpoint; writes class_iou.csv and miou.csv.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        outdir: Option<PathBuf>,
    },
    /// Filter-mode by backend matrix.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',')]
        filter_modes: Option<Vec<FilterMode>>,
        #[arg(long, value_delimiter = ',')]
        backends: Option<Vec<Backend>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapter model against the head-only baseline over several seeds.
    Trend {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; exits 3 on a tolerance breach.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fast invariant checks across all modules.
    Selftest,
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_input(
    input: Option<&Path>,
    tensor: Option<&str>,
    scene: Option<u64>,
    c: Option<CorruptionKind>,
) -> Result<FeatureMap> {
    if let Some(seed) = scene {
        let mut img = gen_scene(seed).image;
        if let Some(kind) = c {
            img = corrupt(&img, &Corruption::sample(kind, seed))?;
        }
        return img.to_feature_map();
    }
    let path = input.ok_or_else(|| Error::Usage("no input given".into()))?;
    let bytes = fs::read(path)?;
    if bytes.starts_with(cten::MAGIC) {
        let tensors = cten::read(&bytes[..])?;
        let t = match tensor {
            Some(name) => tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("no tensor '{name}' in {}", path.display())))?,
            None => tensors
                .first()
                .ok_or_else(|| Error::Format(format!("{} holds no tensors", path.display())))?,
        };
        t.to_feature_map()
    } else {
        Image::read_ppm(&bytes[..])?.to_feature_map()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decompose {
            input,
            tensor,
            scene,
            corruption,
            rl,
            rh,
            mode,
            backend,
            outdir,
        } => {
            let f = load_input(input.as_deref(), tensor.as_deref(), scene, corruption)?;
            let d = decompose(&f, &FilterConfig { rl, rh, mode, backend })?;
            fs::create_dir_all(&outdir)?;
            cten::write_file(
                &outdir.join("causal.cten"),
                &[CtenTensor::from_feature_map("causal", &d.causal)?],
            )?;
            cten::write_file(
                &outdir.join("noncausal.cten"),
                &[CtenTensor::from_feature_map("noncausal", &d.noncausal)?],
            )?;
            d.filter.write_csv(create_file(&outdir.join("gain.csv"))?)?;
            d.write_summary(create_file(&outdir.join("summary.txt"))?)?;
            println!("reconstruction max abs error {:e}", d.reconstruction_error);
            if d.reconstruction_error > 1e-9 {
                return Err(Error::Numeric(format!(
                    "reconstruction error {:e} exceeds 1e-9",
                    d.reconstruction_error
                )));
            }
        }
        Command::Sweep {
            rl_grid,
            rh_grid,
            config,
            out,
        } => {
            let cfg = config.load()?;
            let rows = sweep(&cfg, &rl_grid, &rh_grid)?;
            write_sweep_csv(&rows, create_file(&out)?)?;
            println!("{} cutoff pairs written to {}", rows.len(), out.display());
        }
        Command::Train { config, steps, outdir } => {
            let mut cfg = config.load()?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let dir = outdir.unwrap_or_else(|| cfg.output.dir.clone());
            let mut model = build_model(&cfg)?;
            let report = train(&cfg, &mut model)?;
            fs::create_dir_all(&dir)?;
            cten::write_file(&dir.join("checkpoint.cten"), &params_to_cten(&model.params)?)?;
            report.write_curve_csv(create_file(&dir.join("loss.csv"))?)?;
            let mut summary = create_file(&dir.join("summary.txt"))?;
            writeln!(summary, "steps={}", cfg.train.steps)?;
            writeln!(summary, "initial_loss={}", report.initial_loss)?;
            writeln!(summary, "final_loss={}", report.final_loss)?;
            writeln!(summary, "loss_reduction={}", report.loss_reduction())?;
            writeln!(summary, "backbone_hash_before={}", report.backbone_hash_before)?;
            writeln!(summary, "backbone_hash_after={}", report.backbone_hash_after)?;
            summary.flush()?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            println!(
                "loss {:.6} -> {:.6} ({:.1}% reduction); checkpoint in {}",
                report.initial_loss,
                report.final_loss,
                100.0 * report.loss_reduction(),
                dir.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            outdir,
        } => {
            let cfg = config.load()?;
            let dir = outdir.unwrap_or_else(|| cfg.output.dir.clone());
            let mut model = build_model(&cfg)?;
            load_params(&mut model, params_from_cten(&cten::read_file(&checkpoint)?)?)?;
            let report = eval_model(&cfg, &model)?;
            fs::create_dir_all(&dir)?;
            report.write_class_csv(create_file(&dir.join("class_iou.csv"))?)?;
            report.write_miou_csv(create_file(&dir.join("miou.csv"))?)?;
            for d in &report.domains {
                println!("{:<12} {:.4}", d.domain, d.summary.miou);
            }
        }
        Command::Ablate {
            config,
            filter_modes,
            backends,
            out,
        } => {
            let cfg = config.load()?;
            let modes = filter_modes.unwrap_or_else(|| FilterMode::ALL.to_vec());
            let backends = backends.unwrap_or_else(|| Backend::ALL.to_vec());
            let rows = ablate(&cfg, &modes, &backends)?;
            write_ablation_csv(&rows, create_file(&out)?)?;
            for r in &rows {
                println!(
                    "{:<17} {:<5} clean {:.4}  corrupted avg {:.4}",
                    r.mode,
                    r.backend,
                    r.eval.clean_miou(),
                    r.eval.corrupted_average()
                );
            }
        }
        Command::Trend { config, seeds, out } => {
            let cfg = config.load()?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = compare_with_baseline(&cfg, &seeds)?;
            write_comparison_csv(&rows, create_file(&out)?)?;
            let a: Vec<f64> = rows.iter().map(|r| r.adapter).collect();
            let b: Vec<f64> = rows.iter().map(|r| r.baseline).collect();
            println!(
                "median corrupted avg mIoU: adapter {:.4}, baseline {:.4}",
                median(&a),
                median(&b)
            );
        }
        Command::Gradcheck { config, seed } => {
            let cfg = config.load()?;
            let suite = gradcheck_suite(&cfg, seed)?;
            for e in &suite.entries {
                info!("{e}");
                if !e.passed() {
                    eprintln!("{e}");
                }
            }
            for name in ["refine", "pipeline"] {
                println!(
                    "{name}: {} coordinates, max relative error {:.3e}",
                    suite.coordinates(name),
                    suite.max_error(name)
                );
            }
            if !suite.passed() {
                return Err(Error::Numeric("gradient check tolerance exceeded".into()));
            }
        }
        Command::Selftest => {
            let results = selftest()?;
            let mut failed = 0;
            for r in &results {
                println!("{} {} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} self checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
