mod settings;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use talkhead_core::audio::{AudioClip, MelSpectrogram};
use talkhead_core::data::{generate_corpus, load_corpus, write_corpus, CorpusManifest, Split};
use talkhead_core::encoders::IdentityLabel;
use talkhead_core::error::ErrorClass;
use talkhead_core::evaluation::evaluate_generation;
use talkhead_core::gradcheck::{format_table, run_all, DEFAULT_RTOL};
use talkhead_core::mesh::{MeshTopology, MotionSequence, Template};
use talkhead_core::metrics::{sequence_fdd, sequence_lve, EvalReport, SequenceRow};
use talkhead_core::training::{load_model, Trainer};
use talkhead_core::{Error, Result};

use settings::GlobalConfig;

#[derive(Debug, Parser)]
#[command(name = "talkhead", about = "Speech-driven 3D talking-head animation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `train.batch_size=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args, Default)]
struct AblationFlags {
    /// Drop the adversarial term.
    #[arg(long = "disable-adv")]
    adv: bool,
    /// Drop the style cosine-similarity term.
    #[arg(long = "disable-cos")]
    cos: bool,
    /// Drop the orthogonality term.
    #[arg(long = "disable-orth")]
    orth: bool,
    /// Drop the mutual-information term.
    #[arg(long = "disable-info")]
    info: bool,
    /// Drop the contrastive term.
    #[arg(long = "disable-cts")]
    cts: bool,
    /// Feed raw displacements instead of graph-attention features.
    #[arg(long = "disable-e_g")]
    e_g: bool,
    /// Remove the audio style branch and its disentanglement terms.
    #[arg(long = "disable-audio-disent")]
    audio_disent: bool,
    /// Remove the motion style branch and its disentanglement terms.
    #[arg(long = "disable-motion-disent")]
    motion_disent: bool,
}

impl AblationFlags {
    fn overrides(&self) -> Vec<String> {
        [
            (self.adv, "adversarial"),
            (self.cos, "cosine"),
            (self.orth, "orthogonality"),
            (self.info, "mutual_info"),
            (self.cts, "contrastive"),
            (self.e_g, "graph_encoder"),
            (self.audio_disent, "audio_disentanglement"),
            (self.motion_disent, "motion_disentanglement"),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, key)| format!("train.ablations.{key}=true"))
        .collect()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted speaking styles.
    SynthData {
        /// Output directory; defaults to `paths.data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run stage one then stage two and write checkpoints and the loss log.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        ablations: AblationFlags,
    },
    /// Animate a neutral face from speech.
    Generate {
        /// Trained weights (`.ptkc`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// 16 kHz mono WAV.
        #[arg(long)]
        audio: PathBuf,
        /// Index of the neutral template to animate.
        #[arg(long)]
        identity: usize,
        /// Motion sequence whose style replaces the bootstrapped motion style.
        #[arg(long)]
        style_reference: Option<PathBuf>,
        /// Output motion sequence (`.ptkm`).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ablations: AblationFlags,
    },
    /// Report LVE, FDD and style silhouette on a corpus split.
    Eval {
        /// Trained weights (`.ptkc`).
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        /// Score ground truth against itself instead of generated motion.
        #[arg(long)]
        ground_truth: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        ablations: AblationFlags,
    },
    /// Check analytic gradients of every loss and layer against finite differences.
    Gradcheck,
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<GlobalConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("data.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    overrides.extend(extra);
    GlobalConfig::resolve(common.config.as_deref(), &overrides)
}

fn synth_data(cfg: &GlobalConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let corpus = generate_corpus(&cfg.data)?;
    write_corpus(&corpus, &dir)?;
    let count = |s| corpus.split(s).count();
    println!(
        "wrote {} sequences (train {}, val {}, test {}) for {} identities on a {}-vertex mesh to {}",
        corpus.examples.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        corpus.identities(),
        corpus.topology.vertex_count(),
        dir.display()
    );
    Ok(())
}

fn train(cfg: &GlobalConfig, resume: Option<PathBuf>) -> Result<()> {
    let corpus = load_corpus(&cfg.paths.manifest())?;
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    std::fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    std::fs::write(cfg.paths.output_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut trainer = match &resume {
        Some(p) => Trainer::resume(&cfg.model, &cfg.train, &corpus, p)?,
        None => Trainer::new(&cfg.model, &cfg.train, &corpus)?,
    };
    let log_path = cfg.paths.output_dir.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)?;
    writeln!(log, "{}", trainer.log_header())?;
    let s1 = cfg.train.stage1_steps;
    let total = cfg.train.total_steps();
    let every = cfg.checkpoint_every;
    while trainer.step() < total {
        let record = trainer.train_step()?;
        writeln!(log, "{}", record.log_line())?;
        let done = trainer.step();
        if done == s1 {
            trainer.save_checkpoint(&cfg.paths.checkpoint_dir.join("stage1.ptkc"))?;
        }
        if every.is_some_and(|e| done % e == 0) {
            trainer.save_checkpoint(&cfg.paths.checkpoint_dir.join(format!("step_{done:06}.ptkc")))?;
        }
    }
    log.flush()?;
    let final_path = cfg.paths.checkpoint_dir.join("final.ptkc");
    trainer.save_checkpoint(&final_path)?;
    println!(
        "trained {total} steps; checkpoint {} ; log {}",
        final_path.display(),
        log_path.display()
    );
    Ok(())
}

fn topology_for(cfg: &GlobalConfig, manifest: &CorpusManifest, manifest_path: &Path) -> Result<MeshTopology> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let path = cfg.paths.topology.clone().unwrap_or_else(|| base.join(&manifest.topology));
    MeshTopology::load(&path)
}

fn generate(
    cfg: &GlobalConfig,
    checkpoint: &Path,
    audio: &Path,
    identity: usize,
    style_reference: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let manifest_path = cfg.paths.manifest();
    let manifest = CorpusManifest::load(&manifest_path)?;
    let topology = topology_for(cfg, &manifest, &manifest_path)?;
    let k = manifest.identities();
    let label = IdentityLabel::new(identity, k)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let template = Template::load(&base.join(&manifest.templates[identity]))?;
    let dtype = cfg.train.precision.dtype();
    let (model, _store) = load_model(checkpoint, &cfg.model, &cfg.train.ablations, &topology, k, dtype)?;
    let clip = AudioClip::load_wav(audio)?;
    let fps = cfg.data.fps;
    let frames = clip.frame_count(fps);
    let mel = MelSpectrogram::new(cfg.model.mel.clone())?.compute_tensor(&clip, dtype)?;
    let reference = style_reference.map(MotionSequence::load).transpose()?;
    let seq = model.generate(&mel, label, &template, frames, fps, reference.as_ref())?;
    seq.save(out)?;
    println!("wrote {} frames to {}", seq.len(), out.display());
    Ok(())
}

fn eval(cfg: &GlobalConfig, checkpoint: Option<&Path>, ground_truth: bool, json: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(&cfg.paths.manifest())?;
    let limit = cfg.eval.max_sequences.unwrap_or(usize::MAX);
    let examples: Vec<_> = corpus.split(cfg.eval.split).take(limit).collect();
    if examples.is_empty() {
        return Err(Error::Input(format!("split {:?} has no sequences", cfg.eval.split)));
    }
    let dtype = cfg.train.precision.dtype();
    let mel = MelSpectrogram::new(cfg.model.mel.clone())?;
    let report = match (checkpoint, ground_truth) {
        (Some(ckpt), false) => {
            let (model, _store) = load_model(
                ckpt,
                &cfg.model,
                &cfg.train.ablations,
                &corpus.topology,
                corpus.identities(),
                dtype,
            )?;
            evaluate_generation(&model, examples.iter().copied(), &corpus.topology, &mel, dtype)?
        }
        _ => {
            let lips = corpus.topology.lip_vertices();
            let upper = corpus.topology.upper_face_vertices();
            let rows = examples
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    Ok(SequenceRow {
                        name: format!("{i:05}"),
                        lve: sequence_lve(&e.motion, &e.motion, &lips)?,
                        fdd: sequence_fdd(&e.motion, &e.motion, &e.template, &upper)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            EvalReport::from_rows(rows, None)?
        }
    };
    print!("{}", report.to_table());
    if let Some(path) = json {
        std::fs::write(path, report.to_json()? + "\n")?;
    }
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let results = run_all(0, DEFAULT_RTOL)?;
    print!("{}", format_table(&results));
    Ok(results.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SynthData { out } => synth_data(&resolve(&cli.common, vec![])?, out)?,
        Command::Train { resume, ablations } => train(&resolve(&cli.common, ablations.overrides())?, resume)?,
        Command::Generate {
            checkpoint,
            audio,
            identity,
            style_reference,
            out,
            ablations,
        } => generate(
            &resolve(&cli.common, ablations.overrides())?,
            &checkpoint,
            &audio,
            identity,
            style_reference.as_deref(),
            &out,
        )?,
        Command::Eval {
            checkpoint,
            ground_truth,
            json,
            ablations,
        } => eval(
            &resolve(&cli.common, ablations.overrides())?,
            checkpoint.as_deref(),
            ground_truth,
            json.as_deref(),
        )?,
        Command::Gradcheck => {
            if !gradcheck()? {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Config => 2,
        ErrorClass::Io => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Other => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
