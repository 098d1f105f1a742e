use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attmotion::harness::{
    self, export_motion, Ablation, CodesFile, ExportFormat, RunConfig, Stage1Model, Stage2Model,
};
use attmotion::motion::load_motion;
use attmotion::gla::dump_attention;
use attmotion::text::split_words;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "attmotion", version, about = "Text-to-motion generation with body-part and word-level attention")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Switches off a component (bpst, local, global). For `eval`, each named
    /// ablation is trained under `<out>/ablate-<name>` and compared instead.
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the toy corpus into `<out>/corpus`.
    GenCorpus,
    /// Train (or resume) the motion tokenizer.
    TrainStage1,
    /// Train the code generator on frozen Stage-1 codes.
    TrainStage2,
    /// Generate a motion for a sentence.
    Generate {
        #[arg(long)]
        text: String,
        /// Motion output (.json or .csv); codes go next to it as `<stem>.codes.json`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Generation index; different indices draw different samples.
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Evaluate both checkpoints on the held-out split.
    Eval,
    /// Write the code-to-word cross-attention of one generation as CSV.
    DumpAttn {
        #[arg(long)]
        text: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Convert a codes file or a motion file to JSON or CSV.
    ExportMotion {
        #[arg(long, conflicts_with = "motion", required_unless_present = "motion")]
        codes: Option<PathBuf>,
        #[arg(long)]
        motion: Option<PathBuf>,
        /// Format follows the extension: `.csv` or JSON otherwise.
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn with_ablations(mut cfg: RunConfig, ablations: &[Ablation]) -> RunConfig {
    for &a in ablations {
        cfg = cfg.with_ablation(a);
    }
    cfg
}

fn codes_path_for(motion: &Path) -> PathBuf {
    let stem = motion.file_stem().and_then(|s| s.to_str()).unwrap_or("generated");
    motion.with_file_name(format!("{stem}.codes.json"))
}

fn run(cli: Cli) -> Result<()> {
    let base = load_config(&cli)?;
    match &cli.command {
        Command::GenCorpus => {
            let manifest = harness::gen_corpus(&base)?;
            println!("{}", manifest.display());
        }
        Command::TrainStage1 => {
            let cfg = with_ablations(base, &cli.ablate);
            let samples = harness::load_samples(&cfg)?;
            let t = harness::run_stage1(&cfg, &samples)?;
            if let Some(last) = t.curve.last() {
                println!("stage1 step {} rec {:.4}", last.step, last.rec);
            }
            println!("{}", cfg.stage1_path().display());
        }
        Command::TrainStage2 => {
            let cfg = with_ablations(base, &cli.ablate);
            let samples = harness::load_samples(&cfg)?;
            let t = harness::run_stage2(&cfg, &samples)?;
            if let Some(last) = t.curve.last() {
                println!("stage2 step {} loss {:.4}", last.step, last.loss);
            }
            println!("{}", cfg.stage2_path().display());
        }
        Command::Generate { text, output, index } => {
            let cfg = with_ablations(base, &cli.ablate);
            let s2 = Stage2Model::load(&cfg.stage2_path())?;
            let s1 = Stage1Model::load(&cfg.stage1_path())?;
            let gen = s2.generate(text, cfg.seed, *index)?;
            if gen.degenerate {
                bail!(attmotion::Error::DegenerateGeneration);
            }
            let motion = s1.codes_to_motion(&gen.codes.codes)?;
            let path = output.clone().unwrap_or_else(|| cfg.out_dir().join("generated.json"));
            export_motion(&motion, &path, ExportFormat::for_path(&path))?;
            CodesFile::new(gen.codes.codes.clone(), Some(text.clone())).save(&codes_path_for(&path))?;
            println!("{}", path.display());
        }
        Command::Eval => {
            let samples = harness::load_samples(&base)?;
            let report = if cli.ablate.is_empty() {
                harness::run_eval(&base, &samples)?
            } else {
                harness::run_ablations(&base, &samples, &cli.ablate)?
            };
            println!("{}", report.to_json()?);
        }
        Command::DumpAttn { text, output, index } => {
            let cfg = with_ablations(base, &cli.ablate);
            let s2 = Stage2Model::load(&cfg.stage2_path())?;
            let gen = s2.generate(text, cfg.seed, *index)?;
            if gen.attention.is_empty() {
                bail!("no cross-attention to dump (degenerate generation or local attention ablated)");
            }
            let path = output.clone().unwrap_or_else(|| cfg.out_dir().join("attention.csv"));
            dump_attention(&gen.attention, &split_words(text), &path)?;
            println!("{}", path.display());
        }
        Command::ExportMotion { codes, motion, output } => {
            let m = match (codes, motion) {
                (Some(c), _) => {
                    let codes = CodesFile::load(c)?;
                    let cfg = with_ablations(base, &cli.ablate);
                    Stage1Model::load(&cfg.stage1_path())?.codes_to_motion(&codes.codes)?
                }
                (None, Some(m)) => {
                    if !m.exists() {
                        bail!(attmotion::Error::MissingInput(m.clone()));
                    }
                    load_motion(m)?
                }
                (None, None) => bail!("one of --codes or --motion is required"),
            };
            export_motion(&m, output, ExportFormat::for_path(output))
                .with_context(|| format!("writing {}", output.display()))?;
            println!("{}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATTMOTION_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
