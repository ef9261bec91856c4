mod stages;
mod store;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use zest::baselines::Baseline;
use zest::classifier::{reports_csv, reports_jsonl, summarize, summary_csv, summary_table, EvalReport};
use zest::experiment::{ExperimentConfig, SweepParam};
use zest::synth::{generate_csv, ProfileSet};

use stages::{write_text, Run, Stage};
use store::Lock;

#[derive(Parser)]
#[command(name = "zest", version, about = "Zero-shot IoT device fingerprinting experiments")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic packet trace as CSV.
    Synth(SynthArgs),
    /// Build the sequence dataset from the configured source.
    Ingest(Common),
    /// Train SANE on the seen devices of one partition.
    TrainSane(SeedArgs),
    /// Extract latents and per-device attribute vectors.
    ExtractAttrs(SeedArgs),
    /// Train the conditional VAE on seen-device latents.
    TrainCvae(SeedArgs),
    /// Generate balanced pseudo latents for every device.
    GenPseudo(SeedArgs),
    /// Fit the ZSL and GZSL classifiers on pseudo data.
    TrainClf(SeedArgs),
    /// Score the classifiers on real test latents.
    Eval(SeedArgs),
    /// Run one comparison baseline (vae-k, seqcr, seqcs, deft).
    Baseline {
        name: Baseline,
        #[command(flatten)]
        args: SeedArgs,
    },
    /// All stages over every partition seed, with a mean ± std report.
    Pipeline(PipelineArgs),
    /// Repeat the pipeline for each value of one setting.
    Sweep {
        /// attr-dim, unseen, encoders or heads.
        param: SweepParam,
        #[arg(required = true)]
        values: Vec<usize>,
        #[command(flatten)]
        args: PipelineArgs,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; flags below override it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Synthetic preset (separable-12, hard-12).
    #[arg(long, conflicts_with_all = ["profiles", "csv"])]
    preset: Option<String>,
    /// Synthetic device profile file.
    #[arg(long, conflicts_with = "csv")]
    profiles: Option<PathBuf>,
    /// Packet CSV trace.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Packets per sequence (n).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Number of unseen devices per partition.
    #[arg(long)]
    unseen: Option<usize>,
    /// SANE training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Sessions per synthetic device.
    #[arg(long)]
    sessions: Option<usize>,
    /// Packets per synthetic session.
    #[arg(long)]
    packets: Option<usize>,
}

#[derive(Args, Clone)]
struct SeedArgs {
    #[command(flatten)]
    common: Common,
    /// Partition seed (default: the first configured seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Use partition seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    /// Baselines to run (default: all four).
    #[arg(long, value_delimiter = ',')]
    baselines: Option<Vec<Baseline>>,
    /// Skip the baselines.
    #[arg(long, conflicts_with = "baselines")]
    no_baselines: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, conflicts_with = "profiles")]
    preset: Option<String>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    packets: Option<usize>,
    /// CSV destination.
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the profiles used, as TOML.
    #[arg(long)]
    emit_profiles: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        let source = (&self.preset, &self.profiles, &self.csv);
        if source.0.is_some() || source.1.is_some() || source.2.is_some() {
            cfg.data.preset = self.preset.clone();
            cfg.data.profiles = self.profiles.clone();
            cfg.data.csv = self.csv.clone();
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(n) = self.seq_len {
            cfg.sane.seq_len = n;
        }
        if let Some(u) = self.unseen {
            cfg.num_unseen = u;
        }
        if let Some(e) = self.epochs {
            cfg.sane.epochs = e;
        }
        if self.sessions.is_some() {
            cfg.data.sessions = self.sessions;
        }
        if self.packets.is_some() {
            cfg.data.packets_per_session = self.packets;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SeedArgs {
    fn run(&self) -> Result<(Run, u64, Lock)> {
        let cfg = self.common.config()?;
        let seed = self.seed.unwrap_or(cfg.seeds[0]);
        let lock = Lock::acquire(&cfg.output)?;
        Ok((Run::new(cfg.output.clone(), cfg), seed, lock))
    }
}

impl PipelineArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.common.config()?;
        if let Some(n) = self.seeds {
            if n == 0 {
                bail!("--seeds must be at least 1");
            }
            cfg.seeds = (0..n).collect();
        }
        Ok(cfg)
    }

    fn baselines(&self) -> Vec<Baseline> {
        if self.no_baselines {
            Vec::new()
        } else {
            self.baselines.clone().unwrap_or_else(|| Baseline::ALL.to_vec())
        }
    }
}

fn stage_error(stage: Stage, seed: u64) -> String {
    format!("stage `{}` failed (seed {seed})", stage.command())
}

fn print_reports(reports: &[EvalReport]) {
    print!("{}", reports_csv(reports));
}

/// Runs every seed in `dir` and writes the aggregate reports there.
fn pipeline(cfg: ExperimentConfig, dir: &Path, baselines: &[Baseline]) -> Result<Vec<EvalReport>> {
    let _lock = Lock::acquire(dir)?;
    let seeds = cfg.seeds.clone();
    let run = Run::new(dir, cfg);
    let mut reports = Vec::new();
    for seed in seeds {
        reports.extend(run.partition(seed, baselines).with_context(|| format!("pipeline failed (seed {seed})"))?);
    }
    let summaries = summarize(&reports);
    write_text(&dir.join("report.csv"), &reports_csv(&reports))?;
    write_text(&dir.join("report.jsonl"), &reports_jsonl(&reports))?;
    write_text(&dir.join("summary.csv"), &summary_csv(&summaries))?;
    write_text(&dir.join("summary.txt"), &summary_table(&summaries))?;
    Ok(reports)
}

fn sweep(param: SweepParam, values: &[usize], args: &PipelineArgs) -> Result<()> {
    let base = args.config()?;
    let root = base.output.join(format!("sweep-{param}"));
    let _lock = Lock::acquire(&root)?;
    let mut csv = String::from("param,value,method,setting,runs,mean,std\n");
    let mut table = String::new();
    for &value in values {
        let mut cfg = base.clone();
        param
            .apply(&mut cfg, value)
            .with_context(|| format!("{param} = {value} is not a valid setting"))?;
        let dir = root.join(format!("{param}-{value}"));
        cfg.output = dir.clone();
        let reports = pipeline(cfg, &dir, &args.baselines())?;
        let summaries = summarize(&reports);
        for s in &summaries {
            csv.push_str(&format!(
                "{param},{value},{},{},{},{:.6},{:.6}\n",
                s.method, s.setting, s.runs, s.mean, s.std
            ));
        }
        table.push_str(&format!("{param} = {value}\n{}\n", summary_table(&summaries)));
    }
    write_text(&root.join("summary.csv"), &csv)?;
    write_text(&root.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut profiles = match (&args.preset, &args.profiles) {
        (_, Some(path)) => ProfileSet::load(path)?,
        (Some(name), None) => ProfileSet::preset(name)?,
        (None, None) => ProfileSet::preset("separable-12")?,
    };
    if args.sessions.is_some() || args.packets.is_some() {
        let first = &profiles.devices[0];
        let s = args.sessions.unwrap_or(first.sessions);
        let p = args.packets.unwrap_or(first.packets_per_session);
        profiles = profiles.with_sessions(s, p);
    }
    generate_csv(&profiles, args.seed, store::create(&args.output)?)?;
    if let Some(path) = &args.emit_profiles {
        write_text(path, &profiles.to_toml())?;
    }
    log::info!("wrote {}", args.output.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Ingest(common) => {
            let cfg = common.config()?;
            let _lock = Lock::acquire(&cfg.output)?;
            let run = Run::new(cfg.output.clone(), cfg);
            let ds = run.ingest().context("stage `ingest` failed")?;
            println!("{} sequences from {} devices", ds.points.len(), ds.num_devices());
            Ok(())
        }
        Command::TrainSane(a) => {
            let (run, seed, _lock) = a.run()?;
            let (_, _, eval) = run.train_sane(seed).with_context(|| stage_error(Stage::TrainSane, seed))?;
            println!("seen test accuracy {:.4}", eval.accuracy);
            Ok(())
        }
        Command::ExtractAttrs(a) => {
            let (run, seed, _lock) = a.run()?;
            let (_, attrs) = run.extract_attrs(seed).with_context(|| stage_error(Stage::ExtractAttrs, seed))?;
            println!("{} attribute vectors", attrs.len());
            Ok(())
        }
        Command::TrainCvae(a) => {
            let (run, seed, _lock) = a.run()?;
            let dec = run.train_cvae(seed).with_context(|| stage_error(Stage::TrainCvae, seed))?;
            println!("decoder {}", dec.checksum());
            Ok(())
        }
        Command::GenPseudo(a) => {
            let (run, seed, _lock) = a.run()?;
            let p = run.gen_pseudo(seed).with_context(|| stage_error(Stage::GenPseudo, seed))?;
            println!("{} pseudo latents", p.len());
            Ok(())
        }
        Command::TrainClf(a) => {
            let (run, seed, _lock) = a.run()?;
            let (zsl, gzsl) = run.train_clf(seed).with_context(|| stage_error(Stage::TrainClf, seed))?;
            println!(
                "gzsl classes {:?}, zsl classes {:?}",
                gzsl.classes,
                zsl.map(|m| m.classes).unwrap_or_default()
            );
            Ok(())
        }
        Command::Eval(a) => {
            let (run, seed, _lock) = a.run()?;
            print_reports(&run.eval(seed).with_context(|| stage_error(Stage::Eval, seed))?);
            Ok(())
        }
        Command::Baseline { name, args } => {
            let (run, seed, _lock) = args.run()?;
            let stage = Stage::Baseline(name);
            print_reports(&run.baseline(name, seed).with_context(|| stage_error(stage, seed))?);
            Ok(())
        }
        Command::Pipeline(args) => {
            let cfg = args.config()?;
            let dir = cfg.output.clone();
            let reports = pipeline(cfg, &dir, &args.baselines())?;
            print!("{}", summary_table(&summarize(&reports)));
            Ok(())
        }
        Command::Sweep { param, values, args } => sweep(param, &values, &args),
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = execute(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
