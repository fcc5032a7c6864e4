use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use wurstkit::config::RunConfigFile;
use wurstkit::eval::audit::{fid_audit, latency_bench};
use wurstkit::eval::extractor::{cache_dir, FeatureExtractor};
use wurstkit::eval::manipulate::Manipulation;
use wurstkit::eval::{fid, inception_score};
use wurstkit::image::write_png;
use wurstkit::io::{atomic_write, write_json};
use wurstkit::pipeline::{compression_report, generate, sample_stage_c, PassCounter};
use wurstkit::system::{Stage, System};
use wurstkit::tensor::Tensor;
use wurstkit::training::checkpoint::{interpolate_weights, Checkpoint};
use wurstkit::training::dataset::{synth_dataset, DatasetManifest, ImageCache, SynthSpec};
use wurstkit::training::{load_stage_checkpoint, load_stages, run_training, RunOutput};
use wurstkit::{Error, Result};

/// Three-stage cascaded latent diffusion at desk scale.
#[derive(Parser, Debug)]
#[command(name = "wurstkit", version, about)]
struct Cli {
    /// JSON run configuration; flags override its values [default: built-in defaults]
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command [default: the config value, 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for matrix products [default: available parallelism]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory holding stage checkpoints and loss curves
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one stage; upstream checkpoints must exist in the workdir
    Train(TrainArgs),
    /// Generate images from a prompt with the full pipeline
    Sample(SampleArgs),
    /// Interpolate two checkpoints of the same stage
    Merge(MergeArgs),
    /// Decode semantic latents straight to pixels with the probe decoder
    ProbeDecode(ProbeArgs),
    /// FID, Inception Score and the FID robustness audit
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Inference benchmarks
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Corpus tools
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Print a checkpoint manifest, parameter counts and the compression report
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// stage-a, stage-b, stage-c, baseline or probe
    stage: String,
    /// Training manifest (JSON lines) or directory of PNGs [default: synthetic corpus]
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Size of the synthetic corpus when --data is absent
    #[arg(long, default_value_t = 1000)]
    synth: usize,
    /// Optimizer steps [default: the config value]
    #[arg(long)]
    steps: Option<u64>,
    /// Batch size [default: the config value, 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: the config value, 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from the stage checkpoint in the workdir
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Text prompt
    #[arg(long)]
    prompt: String,
    /// Images to generate
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Stage C sampling steps [default: the config value, 60]
    #[arg(long)]
    steps_c: Option<usize>,
    /// Stage B sampling steps [default: the config value, 12]
    #[arg(long)]
    steps_b: Option<usize>,
    /// Stage C guidance scale [default: the config value, 4]
    #[arg(long)]
    guidance_c: Option<f64>,
    /// Stage B guidance scale [default: the config value, 4]
    #[arg(long)]
    guidance_b: Option<f64>,
    /// Output directory
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MergeArgs {
    /// First checkpoint (weight 1 - lambda)
    #[arg(long)]
    a: PathBuf,
    /// Second checkpoint (weight lambda)
    #[arg(long)]
    b: PathBuf,
    /// Interpolation weight in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Output checkpoint
    #[arg(long, default_value = "merged.ckpt")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Semantic latent file written by `sample`
    #[arg(long, conflicts_with = "prompt", required_unless_present = "prompt")]
    latent: Option<PathBuf>,
    /// Sample a semantic latent with Stage C from this prompt
    #[arg(long)]
    prompt: Option<String>,
    /// Output directory
    #[arg(long, default_value = "probe")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// FID between two image sets
    Fid {
        /// Manifest or directory of PNGs
        #[arg(long)]
        set_a: PathBuf,
        /// Manifest or directory of PNGs
        #[arg(long)]
        set_b: PathBuf,
    },
    /// FID of manipulated copies of a corpus against the corpus
    FidAudit {
        /// Manifest or directory of PNGs [default: synthetic corpus]
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Size of the synthetic corpus when --corpus is absent
        #[arg(long, default_value_t = 1000)]
        synth: usize,
        /// Output directory for audit.csv and audit.json
        #[arg(long, default_value = "audit")]
        out: PathBuf,
    },
    /// Inception Score of an image set
    Is {
        /// Manifest or directory of PNGs
        #[arg(long)]
        set: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Wall time and denoiser passes per stage
    Latency {
        /// Comma-separated batch sizes
        #[arg(long, value_delimiter = ',', default_value = "1,4")]
        batch_sizes: Vec<usize>,
        /// Output directory for latency.csv and latency.json
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Render a procedural corpus and write its manifest
    Synth {
        /// JSON corpus specification [default: built-in vocabularies]
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Number of records
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Manifest path (JSON lines)
        #[arg(long, default_value = "corpus.jsonl")]
        out: PathBuf,
        /// Also write every image as PNG next to the manifest
        #[arg(long)]
        png: bool,
    },
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
}

struct Ctx {
    cfg: RunConfigFile,
    seed: Option<u64>,
    workdir: PathBuf,
}

impl Ctx {
    fn system(&self) -> Result<System> {
        System::new(self.cfg.system(), self.seed.unwrap_or(0))
    }

    fn system_with(&self, stages: &[Stage]) -> Result<System> {
        let mut sys = self.system()?;
        load_stages(&mut sys, &self.workdir, stages)?;
        Ok(sys)
    }

    fn sampler(&self) -> wurstkit::pipeline::SamplerConfig {
        let mut s = self.cfg.sampler.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    std::env::set_var("MATMUL_NUM_THREADS", threads.to_string());
    let cfg = match &cli.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    let ctx = Ctx { cfg, seed: cli.seed, workdir: cli.workdir };
    match cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::Sample(a) => sample(&ctx, a),
        Command::Merge(a) => merge(a),
        Command::ProbeDecode(a) => probe_decode(&ctx, a),
        Command::Eval(e) => eval(&ctx, e),
        Command::Bench(BenchCommand::Latency { batch_sizes, out }) => {
            let sys = ctx.system_with(&[Stage::StageA, Stage::StageB, Stage::StageC])?;
            let report = latency_bench(&sys, &ctx.sampler(), &batch_sizes)?;
            std::fs::create_dir_all(&out)?;
            emit(&out.join("latency.csv"), report.to_csv().as_bytes())?;
            write_json(&out.join("latency.json"), &report)?;
            println!("{}", out.join("latency.json").display());
            Ok(())
        }
        Command::Dataset(DatasetCommand::Synth { spec, count, out, png }) => {
            let mut spec: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => SynthSpec::default(),
            };
            spec.count = count;
            let m = synth_dataset(&spec, ctx.seed.unwrap_or(0))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            m.save(&out)?;
            if png {
                let dir = out.with_extension("");
                std::fs::create_dir_all(&dir)?;
                for i in 0..m.len() {
                    write_png(&dir.join(format!("{i:05}.png")), &m.load_image::<f32>(i)?)?;
                }
            }
            println!("{}", out.display());
            Ok(())
        }
        Command::Inspect(a) => inspect(&ctx, a),
    }
}

fn emit(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes)
}

fn load_set(path: &Path) -> Result<Tensor<f32>> {
    let m = if path.is_dir() { DatasetManifest::ingest_folder(path)? } else { DatasetManifest::load(path)? };
    if m.is_empty() {
        return Err(Error::Precondition(format!("empty image set {}", path.display())));
    }
    m.batch((0..m.len()).collect::<Vec<_>>().as_slice())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let stage = Stage::parse(&a.stage)?;
    let mut tc = ctx.cfg.train.for_stage(stage).clone();
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    if let Some(seed) = ctx.seed {
        tc.seed = seed;
    }
    let manifest = match &a.data {
        Some(p) if p.is_dir() => DatasetManifest::ingest_folder(p)?,
        Some(p) => DatasetManifest::load(p)?,
        None => synth_dataset(&SynthSpec { count: a.synth, image_size: ctx.cfg.shapes.image_size, ..Default::default() }, 0)?,
    };
    let data = ImageCache::build(&manifest)?;
    let mut sys = ctx.system()?;
    for &up in stage.upstream() {
        let path = RunOutput::new(&ctx.workdir).checkpoint(up);
        if !path.exists() {
            return Err(Error::Precondition(format!("training {stage} needs a {up} checkpoint at {}", path.display())));
        }
        load_stage_checkpoint(&mut sys, up, &Checkpoint::load(&path)?)?;
    }
    std::fs::create_dir_all(&ctx.workdir)?;
    let out = RunOutput::new(&ctx.workdir);
    let resume = if a.resume { Some(Checkpoint::load(&out.checkpoint(stage))?) } else { None };
    eprintln!("training {stage}: {} steps, batch {}, lr {}", tc.steps, tc.batch_size, tc.lr);
    run_training(&mut sys, stage, &tc, &data, Some(&out), resume.as_ref())?;
    println!("{}", out.checkpoint(stage).display());
    println!("{}", out.loss_csv(stage).display());
    Ok(())
}

fn sample(ctx: &Ctx, a: SampleArgs) -> Result<()> {
    let mut sc = ctx.sampler();
    if let Some(v) = a.steps_c {
        sc.steps_c = v;
    }
    if let Some(v) = a.steps_b {
        sc.steps_b = v;
    }
    if let Some(v) = a.guidance_c {
        sc.guidance_c = v;
    }
    if let Some(v) = a.guidance_b {
        sc.guidance_b = v;
    }
    if a.count == 0 {
        return Err(Error::Domain("--count must be >= 1".into()));
    }
    let sys = ctx.system_with(&[Stage::StageA, Stage::StageB, Stage::StageC])?;
    let prompts = vec![a.prompt.as_str(); a.count];
    let g = generate(&sys, &prompts, &sc)?;
    std::fs::create_dir_all(&a.out)?;
    for i in 0..a.count {
        let p = a.out.join(format!("sample_{i:03}.png"));
        write_png(&p, &g.images.index0(i))?;
        println!("{}", p.display());
    }
    let mut latent = Checkpoint::new("semantic-latent", 0, json!({ "prompt": a.prompt }));
    latent.insert("latent", g.semantic.clone())?;
    latent.save(&a.out.join("semantic.ckpt"))?;
    write_json(&a.out.join("generation.json"), &g.record)?;
    println!("{}", a.out.join("semantic.ckpt").display());
    println!("{}", a.out.join("generation.json").display());
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    let ca = Checkpoint::load(&a.a)?;
    let cb = Checkpoint::load(&a.b)?;
    let merged = interpolate_weights(&ca, &cb, a.lambda)?;
    merged.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn probe_decode(ctx: &Ctx, a: ProbeArgs) -> Result<()> {
    let (latent, sys) = match (&a.latent, &a.prompt) {
        (Some(path), _) => {
            let sys = ctx.system_with(&[Stage::Probe])?;
            (Checkpoint::load(path)?.get("latent")?.clone(), sys)
        }
        (None, Some(prompt)) => {
            let sys = ctx.system_with(&[Stage::StageC, Stage::Probe])?;
            let counter = PassCounter::default();
            (sample_stage_c(&sys, &[prompt.as_str()], &ctx.sampler(), &counter)?, sys)
        }
        (None, None) => return Err(Error::Config("probe-decode needs --latent or --prompt".into())),
    };
    let images = sys.probe.decode(&sys.store, &latent)?;
    std::fs::create_dir_all(&a.out)?;
    for i in 0..images.dim(0) {
        let p = a.out.join(format!("probe_{i:03}.png"));
        write_png(&p, &images.index0(i))?;
        println!("{}", p.display());
    }
    Ok(())
}

fn eval(ctx: &Ctx, e: EvalCommand) -> Result<()> {
    let fx = FeatureExtractor::load_or_train(ctx.cfg.eval.extractor.clone(), &cache_dir())?;
    match e {
        EvalCommand::Fid { set_a, set_b } => {
            let (a, b) = (load_set(&set_a)?, load_set(&set_b)?);
            let value = fid(&fx.stats(&a)?, &fx.stats(&b)?)?;
            let out = json!({ "fid": value, "n_a": a.dim(0), "n_b": b.dim(0), "extractor_version": fx.version() });
            println!("{out}");
        }
        EvalCommand::Is { set } => {
            let imgs = load_set(&set)?;
            let (_, probs) = fx.run(&imgs)?;
            let out = json!({ "is": inception_score(&probs)?, "n": imgs.dim(0), "extractor_version": fx.version() });
            println!("{out}");
        }
        EvalCommand::FidAudit { corpus, synth, out } => {
            let images = match corpus {
                Some(p) => load_set(&p)?,
                None => {
                    let spec = SynthSpec { count: synth, image_size: ctx.cfg.shapes.image_size, ..Default::default() };
                    ImageCache::<f32>::build(&synth_dataset(&spec, ctx.seed.unwrap_or(0))?)?.images
                }
            };
            let report = fid_audit(&images, &Manipulation::audit_set(), &fx)?;
            std::fs::create_dir_all(&out)?;
            emit(&out.join("audit.csv"), report.to_csv().as_bytes())?;
            write_json(&out.join("audit.json"), &report)?;
            println!("{}", out.join("audit.csv").display());
            println!("{}", out.join("audit.json").display());
        }
    }
    Ok(())
}

fn inspect(ctx: &Ctx, a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = ck.manifest();
    let tensors: Vec<_> = manifest.tensors.iter().map(|t| json!({ "name": t.name, "shape": t.shape })).collect();
    let sys_cfg = ctx.cfg.system();
    let report = compression_report(&sys_cfg.stage_a_shape()?, &sys_cfg.semantic_shape()?)?;
    let out = json!({
        "format_version": manifest.format_version,
        "stage": manifest.stage,
        "step": manifest.step,
        "sha256": ck.sha256()?,
        "parameters": ck.num_parameters(),
        "tensor_count": tensors.len(),
        "tensors": tensors,
        "provenance": manifest.provenance,
        "compression": {
            "stage_a": report.stage_a.to_string(),
            "total": report.semantic.to_string(),
            "stage_a_to_semantic": report.a_to_semantic.to_string(),
        },
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
