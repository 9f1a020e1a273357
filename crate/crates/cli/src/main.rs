//! `frpt` command-line entry point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use frpt::backbone::{Backbone, BackboneArch};
use frpt::model::{Ablation, FrptParams};
use frpt::synthdata::{self, Dataset, SynthSpec};
use frpt::training::{self, TrainConfig};
use frpt::{imageio, retrieval, verify, FrptError};

const USAGE: u8 = 2;
const RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "frpt", version, about = "Fine-grained retrieval prompt tuning over a frozen backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and species set.
    GenData {
        /// Generator settings as JSON; missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the desk backbone as a species classifier.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train prompt parameters over a frozen backbone.
    Train(TrainArgs),
    /// Recall@{1,2,4,8} of a checkpoint on the test split, as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write `<stem>.orig.pgm`, `<stem>.warped.pgm` and `<stem>.map.pgm`.
    Warp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the full default run configuration as JSON.
    Config,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_dpp: bool,
    #[arg(long)]
    no_cah: bool,
    #[arg(long)]
    no_in: bool,
    #[arg(long)]
    finetune: bool,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

/// Contents of `train --config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    train: TrainConfig,
    ablation: Ablation,
    /// Images kept per training subcategory; all when absent.
    shots: Option<usize>,
}

impl RunConfig {
    fn apply(mut self, a: &TrainArgs) -> Self {
        let ab = &mut self.ablation;
        ab.use_dpp &= !a.no_dpp;
        ab.use_cah &= !a.no_cah;
        ab.use_in &= !a.no_in;
        ab.finetune |= a.finetune;
        self.shots = a.shots.or(self.shots);
        self.train.seed = a.seed.unwrap_or(self.train.seed);
        self.train.epochs = a.epochs.unwrap_or(self.train.epochs);
        self
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<FrptError> for CliError {
    fn from(e: FrptError) -> Self {
        let usage = match &e {
            FrptError::Config(_) | FrptError::Json(_) | FrptError::Leak(_) => true,
            FrptError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        let text = e.to_string();
        if usage {
            CliError::Usage(text)
        } else {
            CliError::Runtime(text)
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| FrptError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn gen_data(spec: Option<&Path>, out: &Path) -> CliResult {
    let spec: SynthSpec = read_json(spec)?;
    let manifest = synthdata::gen_synthetic(&spec, out)?;
    println!("wrote {} images to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn pretrain(data: &Path, out: &Path, seed: u64) -> CliResult {
    let ds = Dataset::open(data)?;
    let train = ds.species_samples(synthdata::SPECIES_TRAIN)?;
    let heldout = ds.species_samples(synthdata::SPECIES_HELDOUT)?;
    let init = Backbone::<f32>::init(&BackboneArch::desk(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (backbone, report) = training::pretrain_backbone(&training::pretrain_config(seed), &init, &train, &heldout)?;
    backbone.save(out)?;
    println!(
        "held-out species accuracy {:.4} (chance {:.4}); backbone written to {}",
        report.heldout_accuracy,
        report.chance,
        out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult {
    let run = read_json::<RunConfig>(a.config.as_deref())?.apply(a);
    run.train.validate()?;
    if run.shots == Some(0) {
        return Err(CliError::Usage("--shots must be at least 1".into()));
    }
    let ds = Dataset::open(&a.data)?;
    ds.manifest.check_open_set()?;
    let backbone = Backbone::load(&a.backbone)?;
    let mut samples = ds.subcat_samples(synthdata::TRAIN)?;
    if let Some(n) = run.shots {
        samples = training::take_shots(&samples, n);
    }
    fs::create_dir_all(&a.out).map_err(|e| FrptError::io(&a.out, e))?;
    let text = serde_json::to_string_pretty(&run).map_err(FrptError::from)?;
    let cfg_path = a.out.join("config.json");
    fs::write(&cfg_path, text + "\n").map_err(|e| FrptError::io(&cfg_path, e))?;

    let (classes, _) = training::relabel(&samples);
    let image_size = samples.first().map_or(0, |s| s.image.shape()[1]);
    let preview = FrptParams::init(
        &backbone,
        image_size,
        classes.len(),
        &run.ablation,
        run.train.gaussian_std,
        run.train.reduction,
        run.train.epsilon,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    println!("{}: {}", run.ablation.label(), preview.parameter_banner());
    if run.ablation.finetune {
        println!("fine-tuned backbone parameters: {}", backbone.parameter_count());
    }
    let outcome = training::train(&run.train, &samples, &backbone, &run.ablation, Some(&a.out))?;
    if let Some(last) = outcome.log.last() {
        println!("epoch {}: loss {:.4}, train recall@1 {:.4}", last.epoch, last.loss, last.recall1);
    }
    println!("checkpoint written to {}", a.out.join(training::CHECKPOINT).display());
    Ok(())
}

fn eval(checkpoint: &Path, backbone: &Path, data: &Path, out: Option<&Path>) -> CliResult {
    let (params, tuned) = FrptParams::load(checkpoint)?;
    let backbone = match tuned {
        Some(b) => b,
        None => Backbone::load(backbone)?,
    };
    let ds = Dataset::open(data)?;
    let test = ds.subcat_samples(synthdata::TEST)?;
    let image_size = test.first().map_or(0, |s| s.image.shape()[1]);
    params.check_compatible(&backbone, image_size)?;
    let index = retrieval::build_index(&test, &backbone, &params)?;
    let recalls = retrieval::recall_at_ks(&index, &[1, 2, 4, 8])?;
    let mut csv = String::from("k,recall\n");
    for r in &recalls {
        csv.push_str(&format!("{},{}\n", r.k, r.recall));
    }
    match out {
        Some(path) => fs::write(path, &csv).map_err(|e| FrptError::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn gradcheck(scale: &str, trials: usize, seed: u64) -> CliResult {
    if scale != "desk" {
        return Err(CliError::Usage(format!("unknown scale {scale:?}; only \"desk\" is supported")));
    }
    let reports = verify::gradient_suite(trials, seed)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{:<24} {:>6} {:>8} {:>8} {:>8} {:>12}  status", "operation", "trials", "checked", "refined", "excluded", "max_rel_err");
    for r in &reports {
        let c = &r.check;
        let status = if r.passes() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>8} {:>8} {:>8} {:>12.3e}  {status}",
            r.name, r.trials, c.checked, c.refined, c.excluded, c.max_rel_error
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passes()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn warp(checkpoint: &Path, backbone: &Path, image: &Path, stem: &Path) -> CliResult {
    let (params, tuned) = FrptParams::load(checkpoint)?;
    let backbone = match tuned {
        Some(b) => b,
        None => Backbone::load(backbone)?,
    };
    let img = imageio::read_rgb(image)?;
    params.check_compatible(&backbone, img.shape()[1])?;
    let (warped, map) = params.warp_view(&backbone, &img)?;
    let name = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    imageio::write_pgm(&name(".orig.pgm"), &imageio::luminance(&img)?)?;
    imageio::write_pgm(&name(".warped.pgm"), &imageio::luminance(&warped)?)?;
    imageio::write_pgm(&name(".map.pgm"), &imageio::stretch(&map))?;
    println!("wrote {}.{{orig,warped,map}}.pgm", stem.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { spec, out } => gen_data(spec.as_deref(), &out),
        Command::Pretrain { data, out, seed } => pretrain(&data, &out, seed),
        Command::Train(a) => train(&a),
        Command::Eval { checkpoint, backbone, data, out } => eval(&checkpoint, &backbone, &data, out.as_deref()),
        Command::Gradcheck { scale, trials, seed } => gradcheck(&scale, trials, seed),
        Command::Warp { checkpoint, backbone, image, out } => warp(&checkpoint, &backbone, &image, &out),
        Command::Config => {
            let text = serde_json::to_string_pretty(&RunConfig::default()).map_err(FrptError::from)?;
            println!("{text}");
            Ok(())
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("error: usage: {}", one_line(text.trim_start_matches("error: ")));
            return ExitCode::from(USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: usage: {}", one_line(&m));
            ExitCode::from(USAGE)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: runtime: {}", one_line(&m));
            ExitCode::from(RUNTIME)
        }
    }
}
