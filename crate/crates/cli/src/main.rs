use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use gvedit::control::ConditionMaps;
use gvedit::exec::Execution;
use gvedit::flow_smoothing::{masks_from_flow, smooth_latents, FlowField};
use gvedit::metrics::evaluate;
use gvedit::pipeline::{load_config, Manifest, Pipeline, PipelineConfig, PipelineError, Stage};
use gvedit::tensor_io::{read_tensor4, write_tensor4};
use gvedit::video_model::{load_frames, parse_groundings, save_frames, EditSpec, FrameSequence, PhraseEdit, VideoGrounding};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gvedit", version, about = "Training-free grounded video editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode, invert every frame and optimize its null-text contexts.
    Invert(InvertArgs),
    /// Flow-guided smoothing of a latent clip.
    Smooth(SmoothArgs),
    /// Full grounded edit of a clip.
    Edit(EditArgs),
    /// Text alignment and frame consistency of a clip.
    Eval(EvalArgs),
}

/// Flags shared by every subcommand; each one overrides a config key.
#[derive(Args, Clone)]
struct Common {
    /// Config JSON, or the manifest of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// seeds.global
    #[arg(long)]
    seed: Option<u64>,
    /// diffusion.num_inference_steps
    #[arg(long)]
    steps: Option<usize>,
    /// diffusion.guidance_scale
    #[arg(long)]
    guidance: Option<f64>,
    /// Run every stage on one thread (execution = "sequential").
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of numbered frames or an animated GIF.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Source prompt used for inversion.
    #[arg(long)]
    prompt: Option<String>,
}

#[derive(Args)]
struct SmoothArgs {
    #[command(flatten)]
    common: Common,
    /// Latents `[N, h, w, c]` in the binary tensor layout.
    #[arg(long)]
    latents: Option<PathBuf>,
    /// Flow field `[N-1, H, W, 2]` in the binary tensor layout.
    #[arg(long, conflicts_with = "frames")]
    flow: Option<PathBuf>,
    /// Frames to estimate flow from when no flow file is given.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// smoothing.flow_threshold
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Groundings JSON document.
    #[arg(long)]
    groundings: Option<PathBuf>,
    /// Condition maps `[N, H, W, cc]` in the binary tensor layout.
    #[arg(long)]
    conditions: Option<PathBuf>,
    /// edit.source_prompt
    #[arg(long)]
    source_prompt: Option<String>,
    /// edit.target_prompt
    #[arg(long)]
    target_prompt: Option<String>,
    /// Phrase substitution `FROM=TO`; repeatable, replaces edit.phrase_map.
    #[arg(long = "replace", value_name = "FROM=TO")]
    replacements: Vec<String>,
    /// smoothing.flow_threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// control.scale
    #[arg(long)]
    control_scale: Option<f64>,
    /// grounding.inpainting
    #[arg(long)]
    inpainting: Option<bool>,
    /// Also write the final latents as latents.bin.
    #[arg(long)]
    save_latents: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Target prompt to score against.
    #[arg(long)]
    prompt: Option<String>,
    /// providers.embedder.kind
    #[arg(long)]
    embedder: Option<String>,
}

/// A failure tagged with the exit code it maps to.
enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if matches!(e.stage, Stage::Validation | Stage::Providers) {
            Failure::Input(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Resolved config plus the manifest it came from, if any.
struct Setup {
    config: PipelineConfig,
    previous: Option<Manifest>,
}

impl Setup {
    fn load(common: &Common) -> Result<Self, Failure> {
        let (mut config, previous) = match &common.config {
            Some(path) => load_config(path)?,
            None => (PipelineConfig::default(), None),
        };
        if let Some(s) = common.seed {
            config.seeds.global = s;
        }
        if let Some(s) = common.steps {
            config.diffusion.num_inference_steps = s;
        }
        if let Some(w) = common.guidance {
            config.diffusion.guidance_scale = w;
        }
        if common.sequential {
            config.execution = Execution::Sequential;
        }
        Ok(Self { config, previous })
    }

    /// A path given on the command line, else the one recorded in the manifest.
    fn input(&self, flag: &Option<PathBuf>, role: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| {
            let m = self.previous.as_ref()?;
            m.inputs.iter().find(|i| i.role == role).map(|i| i.path.clone())
        })
    }

    fn require(&self, flag: &Option<PathBuf>, role: &str) -> Result<PathBuf, Failure> {
        self.input(flag, role).ok_or_else(|| Failure::Input(anyhow!("--{role} is required")))
    }

    fn argument(&self, flag: &Option<String>, key: &str) -> Option<String> {
        flag.clone().or_else(|| self.previous.as_ref()?.arguments.get(key)?.as_str().map(str::to_string))
    }
}

fn read_frames(path: &Path) -> Result<FrameSequence, Failure> {
    load_frames(path).with_context(|| format!("cannot load frames from {}", path.display())).input()
}

fn read_groundings(path: &Path) -> Result<VideoGrounding, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read groundings file {}", path.display())).input()?;
    parse_groundings(&text).with_context(|| format!("invalid groundings file {}", path.display())).input()
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display())).runtime()
}

fn finish(mut manifest: Manifest, out: &Path, outputs: Vec<PathBuf>) -> Result<(), Failure> {
    manifest.outputs = outputs;
    let path = out.join("manifest.json");
    manifest.write(&path).with_context(|| format!("cannot write {}", path.display())).runtime()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn record_input(manifest: &mut Manifest, role: &str, path: &Path) -> Result<(), Failure> {
    manifest.add_input(role, path).with_context(|| format!("cannot read {}", path.display())).input()
}

fn run_invert(a: InvertArgs) -> Result<(), Failure> {
    let setup = Setup::load(&a.common)?;
    let frames_path = setup.require(&a.frames, "frames")?;
    let prompt = setup.argument(&a.prompt, "prompt").unwrap_or_default();
    let frames = read_frames(&frames_path)?;
    let pipeline = Pipeline::new(setup.config.clone())?;

    let mut manifest = Manifest::new("invert", pipeline.config());
    record_input(&mut manifest, "frames", &frames_path)?;
    manifest.arguments.insert("prompt".into(), json!(prompt));

    let inv = pipeline.invert(&frames, &prompt)?;
    let out = &a.common.out;
    prepare_out(out)?;
    let (noisy, clean, nulls, report) =
        (out.join("inverted.bin"), out.join("clean.bin"), out.join("nulls.bin"), out.join("null_opt.json"));
    write_tensor4(&noisy, &inv.noisiest()).runtime()?;
    write_tensor4(&clean, &inv.clean).runtime()?;
    inv.nulls.write(&nulls).runtime()?;
    fs::write(&report, serde_json::to_string_pretty(&inv.reports).runtime()?).runtime()?;
    finish(manifest, out, vec![noisy, clean, nulls, report])
}

fn run_smooth(a: SmoothArgs) -> Result<(), Failure> {
    let mut setup = Setup::load(&a.common)?;
    if let Some(t) = a.threshold {
        setup.config.smoothing.flow_threshold = t;
    }
    let latents_path = setup.require(&a.latents, "latents")?;
    let latents = read_tensor4(&latents_path).input()?;
    let pipeline = Pipeline::new(setup.config.clone())?;
    let mut manifest = Manifest::new("smooth", pipeline.config());
    record_input(&mut manifest, "latents", &latents_path)?;

    let (n, h, w, _) = latents.dim();
    let threshold = pipeline.config().smoothing.flow_threshold;
    let smoothed = if let Some(flow_path) = setup.input(&a.flow, "flow") {
        record_input(&mut manifest, "flow", &flow_path)?;
        let flow = FlowField::read(&flow_path).input()?;
        if flow.pairs() + 1 != n {
            return Err(Failure::Input(anyhow!("{} has {} pairs for {n} latent frames", flow_path.display(), flow.pairs())));
        }
        let masks = masks_from_flow(pipeline.config().execution, &flow, threshold, (h, w)).input()?;
        smooth_latents(&latents, &masks).runtime()?
    } else if let Some(frames_path) = setup.input(&a.frames, "frames") {
        record_input(&mut manifest, "frames", &frames_path)?;
        let frames = read_frames(&frames_path)?;
        if frames.len() != n {
            return Err(Failure::Input(anyhow!("{} frames for {n} latent frames", frames.len())));
        }
        pipeline.smooth(&frames, &latents)?
    } else {
        return Err(Failure::Input(anyhow!("either --flow or --frames is required")));
    };

    prepare_out(&a.common.out)?;
    let path = a.common.out.join("latents.bin");
    write_tensor4(&path, &smoothed).runtime()?;
    finish(manifest, &a.common.out, vec![path])
}

fn parse_replacement(s: &str) -> Result<PhraseEdit, Failure> {
    let (from, to) = s.split_once('=').ok_or_else(|| Failure::Input(anyhow!("--replace expects FROM=TO, got {s:?}")))?;
    Ok(PhraseEdit { from: from.trim().to_string(), to: to.trim().to_string() })
}

fn run_edit(a: EditArgs) -> Result<(), Failure> {
    let mut setup = Setup::load(&a.common)?;
    let cfg = &mut setup.config;
    if let Some(t) = a.threshold {
        cfg.smoothing.flow_threshold = t;
    }
    if let Some(s) = a.control_scale {
        cfg.control.scale = s;
    }
    if a.inpainting.is_some() {
        cfg.grounding.inpainting = a.inpainting;
    }
    let base = cfg.edit.clone();
    let phrase_map = if a.replacements.is_empty() {
        base.as_ref().map(|e| e.phrase_map().to_vec()).unwrap_or_default()
    } else {
        a.replacements.iter().map(|r| parse_replacement(r)).collect::<Result<_, _>>()?
    };
    let source = a.source_prompt.clone().or_else(|| base.as_ref().map(|e| e.source_prompt().to_string())).unwrap_or_default();
    let target = a.target_prompt.clone().or_else(|| base.as_ref().map(|e| e.target_prompt().to_string())).unwrap_or_default();
    let spec = EditSpec::new(phrase_map, source, target).context("invalid edit").input()?;
    cfg.edit = Some(spec.clone());

    let frames_path = setup.require(&a.frames, "frames")?;
    let groundings_path = setup.require(&a.groundings, "groundings")?;
    let conditions_path = setup.input(&a.conditions, "conditions");
    let frames = read_frames(&frames_path)?;
    let grounding = read_groundings(&groundings_path)?;
    let conditions = match &conditions_path {
        Some(p) => {
            let data = read_tensor4(p).input()?;
            Some(ConditionMaps::new(data).with_context(|| format!("invalid condition maps {}", p.display())).input()?)
        }
        None => None,
    };
    let pipeline = Pipeline::new(setup.config.clone())?;

    let mut manifest = Manifest::new("edit", pipeline.config());
    record_input(&mut manifest, "frames", &frames_path)?;
    record_input(&mut manifest, "groundings", &groundings_path)?;
    if let Some(p) = &conditions_path {
        record_input(&mut manifest, "conditions", p)?;
    }
    manifest.arguments.insert("save_latents".into(), json!(a.save_latents));

    let result = pipeline.edit(&frames, &grounding, &spec, conditions.as_ref())?;
    for phrase in &result.unmatched_phrases {
        eprintln!("warning: edit phrase {phrase:?} matches no grounding entity");
    }
    let out = &a.common.out;
    prepare_out(out)?;
    let mut outputs = save_frames(out, &result.frames).runtime()?;
    if a.save_latents {
        let p = out.join("latents.bin");
        write_tensor4(&p, &result.latents).runtime()?;
        outputs.push(p);
    }
    finish(manifest, out, outputs)
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    let mut setup = Setup::load(&a.common)?;
    if let Some(kind) = &a.embedder {
        setup.config.providers.embedder.kind = kind.clone();
    }
    let frames_path = setup.require(&a.frames, "frames")?;
    let prompt = setup
        .argument(&a.prompt, "prompt")
        .ok_or_else(|| Failure::Input(anyhow!("--prompt is required")))?;
    let frames = read_frames(&frames_path)?;
    let registry = setup.config.registry()?;

    let mut manifest = Manifest::new("eval", &setup.config);
    record_input(&mut manifest, "frames", &frames_path)?;
    manifest.arguments.insert("prompt".into(), json!(prompt));

    let report = evaluate(&frames, &prompt, registry.embedder.as_ref(), setup.config.execution).input()?;
    let out = &a.common.out;
    prepare_out(out)?;
    let path = out.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&report).runtime()? + "\n").runtime()?;
    println!("text_align {:.6} frame_consistency {:.6}", report.text_align, report.frame_consistency);
    finish(manifest, out, vec![path])
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Invert(a) => run_invert(a),
        Command::Smooth(a) => run_smooth(a),
        Command::Edit(a) => run_edit(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
