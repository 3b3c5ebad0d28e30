//! Command-line surface binding the library into workflow commands:
//! synthetic corpus generation, ingestion, two-phase training, conditional
//! sampling, refinement, constraint-driven post-processing, evaluation, and
//! SVG rendering.
//!
//! Configuration precedence is flags > JSON config file > built-in defaults.
//! Every failure prints one machine-readable `error[CODE]: message` line to
//! stderr and exits with the code's dedicated status; argument-parse errors
//! exit 1. All file outputs are written atomically (temp file + rename).

use crate::checkpoint::{load_checkpoint_for_schema, save_checkpoint, write_atomic};
use crate::conditioning::{make_mask, ConditionMask, TaskKind};
use crate::constraints::{ConstraintWeightSchedule, WeightOrientation};
use crate::corpus::{generate_synthetic, read_corpus, write_corpus, SyntheticGridSpec};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::layout::{decode_layout, encode_layout, Layout, LayoutSchema, StateVector};
use crate::metrics::evaluate;
use crate::postprocess::{postprocess_layout, PostConfig};
use crate::render::render_svg;
use crate::rng::derive_stream;
use crate::sampler::{ddim_refine_batch, ddim_sample_batch, Conditioning};
use crate::schedule::{default_schedule, NoiseSchedule, SamplerConfig};
use crate::training::{AlignmentKind, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Default pixel canvas for unconditional sampling (US letter at 96 dpi,
/// matching the synthetic corpus default).
pub const DEFAULT_CANVAS: (u32, u32) = (816, 1056);

/// Stream tag separating CLI conditioning-mask draws from training and
/// sampling streams derived from the same base seed.
const CLI_MASK_STREAM_TAG: u64 = 0x434C_4931;

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

/// Layout dimensions section of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaSection {
    pub n_classes: usize,
    pub max_elements: usize,
}

impl Default for SchemaSection {
    fn default() -> Self {
        let s = LayoutSchema::default();
        SchemaSection { n_classes: s.n_classes, max_elements: s.max_elements }
    }
}

/// Network dimensions section (schema-independent part of the denoiser).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        ModelSection {
            embed_dim: d.embed_dim,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            ffn_dim: d.ffn_dim,
            time_embed_dim: d.time_embed_dim,
        }
    }
}

/// Root of the JSON config file. Every section is optional and partially
/// specifiable; omitted fields keep their built-in defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub schema: SchemaSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub post: PostConfig,
    pub grid: SyntheticGridSpec,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "lace",
    version,
    about = "Layout generation with constrained continuous diffusion"
)]
pub struct Cli {
    /// JSON config file; individual flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Number of element classes.
    #[arg(long, global = true)]
    pub classes: Option<usize>,

    /// Maximum elements per layout.
    #[arg(long, global = true)]
    pub max_elements: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grid corpus (aligned and overlap-free by
    /// construction).
    Synth(SynthArgs),
    /// Validate a JSONL corpus, report statistics, optionally rewrite it.
    Ingest(IngestArgs),
    /// Train the denoiser (phase 1 unconstrained, phase 2 constrained).
    Train(TrainArgs),
    /// Sample layouts from a checkpoint (unconditional or conditioned).
    Sample(SampleArgs),
    /// Re-denoise perturbed layouts through a partial reverse walk.
    Refine(RefineArgs),
    /// Snap near-alignments in generated layouts by constrained descent.
    Post(PostArgs),
    /// Score generated layouts against a reference corpus.
    Eval(EvalArgs),
    /// Render layouts to SVG files.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of layouts to generate.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Grid columns (1 or 2).
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub rows_min: Option<usize>,
    #[arg(long)]
    pub rows_max: Option<usize>,
    /// Label palette size (defaults to the full class set).
    #[arg(long)]
    pub palette: Option<usize>,
    /// Margin around the grid, as a fraction of the canvas.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Gap between cells, as a fraction of the canvas.
    #[arg(long)]
    pub gutter: Option<f64>,
    /// Canvas in pixels, e.g. 816x1056.
    #[arg(long, value_parser = parse_canvas)]
    pub canvas: Option<(u32, u32)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "corpus.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL corpus to read.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Write the validated corpus back out (round-trip).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// CSV training log (step,l_simple,l_mse,c_align,c_overlap,total,lr,grad_norm).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also save the model as it stood at the end of phase 1.
    #[arg(long)]
    pub phase1_out: Option<PathBuf>,
    /// Overwrite the checkpoint every N steps while training.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Print a progress line every N steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Steps with constraints off.
    #[arg(long)]
    pub phase1_steps: Option<usize>,
    /// Steps with the timestep-weighted constraints on.
    #[arg(long)]
    pub phase2_steps: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Base of the constraint-weight curve, in (0,1).
    #[arg(long)]
    pub beta_w: Option<f64>,
    /// Orientation of the constraint-weight curve over timesteps.
    #[arg(long, value_parser = parse_orientation)]
    pub constraint_orientation: Option<WeightOrientation>,
    /// Alignment penalty flavor: local or global.
    #[arg(long, value_parser = parse_alignment)]
    pub alignment: Option<AlignmentKind>,
    /// Include the overlap penalty in phase 2: on or off.
    #[arg(long, value_parser = parse_switch)]
    pub overlap: Option<bool>,
    /// Upper bound on the fraction revealed by the completion task.
    #[arg(long)]
    pub complete_frac_max: Option<f64>,
    /// Batch/task/noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight-initialization seed (defaults to the training seed).
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub time_embed_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint to sample from.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Task: uncond, c (classes given), csz (classes+sizes given), or
    /// complete (a revealed subset of elements).
    #[arg(long, value_parser = parse_task, default_value = "uncond")]
    pub task: TaskKind,
    /// Unconditional sample count (conditioned tasks take one sample per
    /// condition line instead).
    #[arg(long)]
    pub count: Option<usize>,
    /// JSONL layouts providing the conditions (required unless uncond).
    #[arg(long)]
    pub cond: Option<PathBuf>,
    /// Denoiser queries per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stochasticity: 0 = deterministic, 1 = ancestral-variance noise.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Canvas for decoding unconditional samples, e.g. 816x1056.
    #[arg(long, value_parser = parse_canvas)]
    pub canvas: Option<(u32, u32)>,
    /// Upper bound on the fraction revealed by the completion task.
    #[arg(long)]
    pub complete_frac_max: Option<f64>,
    #[arg(long, default_value = "samples.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Perturbed layouts to refine (JSONL).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "refined.jsonl")]
    pub out: PathBuf,
    /// Start the partial reverse walk at the largest timestep whose
    /// constraint weight still reaches this value.
    #[arg(long, default_value_t = 0.1)]
    pub tau_from_omega: f64,
    /// Start the partial reverse walk at this exact timestep instead of
    /// deriving it from the constraint-weight schedule.
    #[arg(long, conflicts_with = "tau_from_omega")]
    pub tau: Option<usize>,
    #[arg(long)]
    pub beta_w: Option<f64>,
    #[arg(long, value_parser = parse_orientation)]
    pub constraint_orientation: Option<WeightOrientation>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PostArgs {
    /// Layouts to post-process (JSONL).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "post.jsonl")]
    pub out: PathBuf,
    /// Near-alignment threshold in scaled canvas units; also rescales the
    /// optimizer step proportionally.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Include the overlap penalty: on or off.
    #[arg(long, value_parser = parse_switch)]
    pub overlap: Option<bool>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated layouts (JSONL).
    #[arg(long)]
    pub gen: PathBuf,
    /// Reference layouts (JSONL).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Layouts to render (JSONL).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Directory for the SVG files.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// File name prefix: <prefix>-0000.svg, ...
    #[arg(long, default_value = "layout")]
    pub prefix: String,
}

// ---------------------------------------------------------------------------
// Flag value parsers
// ---------------------------------------------------------------------------

fn parse_canvas(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH (e.g. 816x1056), got '{s}'"))?;
    let w: u32 = w.trim().parse().map_err(|e| format!("bad width '{w}': {e}"))?;
    let h: u32 = h.trim().parse().map_err(|e| format!("bad height '{h}': {e}"))?;
    if w == 0 || h == 0 {
        return Err("canvas dimensions must be positive".into());
    }
    Ok((w, h))
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on|off, got '{other}'")),
    }
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    TaskKind::parse_token(s).map_err(|e| e.to_string())
}

fn parse_alignment(s: &str) -> std::result::Result<AlignmentKind, String> {
    AlignmentKind::parse_token(s).map_err(|e| e.to_string())
}

fn parse_orientation(s: &str) -> std::result::Result<WeightOrientation, String> {
    match s {
        "small-t-active" => Ok(WeightOrientation::SmallTActive),
        "large-t-active" => Ok(WeightOrientation::LargeTActive),
        other => Err(format!("expected small-t-active|large-t-active, got '{other}'")),
    }
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Parses argv and runs the selected command, returning the process exit
/// code. All human-facing error formatting happens here.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.render().to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[E_ARGS]: {first}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            e.exit_code()
        }
    }
}

/// Everything a handler needs that is independent of its own flags.
struct Ctx {
    file: FileConfig,
    schema: LayoutSchema,
    schedule: NoiseSchedule,
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = load_file_config(&cli.config)?;
    let schema = LayoutSchema::new(
        cli.classes.unwrap_or(file.schema.n_classes),
        cli.max_elements.unwrap_or(file.schema.max_elements),
    )?;
    let ctx = Ctx { file, schema, schedule: default_schedule() };
    match cli.command {
        Command::Synth(args) => cmd_synth(&ctx, args),
        Command::Ingest(args) => cmd_ingest(&ctx, args),
        Command::Train(args) => cmd_train(&ctx, args),
        Command::Sample(args) => cmd_sample(&ctx, args),
        Command::Refine(args) => cmd_refine(&ctx, args),
        Command::Post(args) => cmd_post(&ctx, args),
        Command::Eval(args) => cmd_eval(&ctx, args),
        Command::Render(args) => cmd_render(&ctx, args),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Prints one status line to stdout, ignoring write failures so a closed
/// pipe (e.g. `lace ingest ... | head`) aborts the output, not the work.
fn say(line: std::fmt::Arguments) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

macro_rules! say {
    ($($arg:tt)*) => { say(format_args!($($arg)*)) };
}

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

fn cmd_synth(ctx: &Ctx, args: SynthArgs) -> Result<()> {
    let mut spec = ctx.file.grid.clone();
    spec.n_classes = spec.n_classes.min(ctx.schema.n_classes);
    set(&mut spec.columns, args.cols);
    set(&mut spec.rows_min, args.rows_min);
    set(&mut spec.rows_max, args.rows_max);
    set(&mut spec.n_classes, args.palette);
    set(&mut spec.margin, args.margin);
    set(&mut spec.gutter, args.gutter);
    set(&mut spec.canvas, args.canvas);
    set(&mut spec.seed, args.seed);
    let layouts = generate_synthetic(&spec, args.count, &ctx.schema)?;
    write_corpus(&args.out, &layouts)?;
    say!("wrote {} layouts to {}", layouts.len(), args.out.display());
    Ok(())
}

fn cmd_ingest(ctx: &Ctx, args: IngestArgs) -> Result<()> {
    let (layouts, report) = read_corpus(&args.input, &ctx.schema)?;
    say!("{}", report.to_string().trim_end());
    if let Some(out) = args.out {
        write_corpus(&out, &layouts)?;
        say!("wrote {} layouts to {}", layouts.len(), out.display());
    }
    Ok(())
}

fn resolve_model_config(ctx: &Ctx, args: &TrainArgs) -> DenoiserConfig {
    let m = &ctx.file.model;
    let mut config = DenoiserConfig {
        n_classes: ctx.schema.n_classes,
        max_elements: ctx.schema.max_elements,
        embed_dim: m.embed_dim,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        ffn_dim: m.ffn_dim,
        time_embed_dim: m.time_embed_dim,
    };
    set(&mut config.embed_dim, args.embed_dim);
    set(&mut config.n_layers, args.layers);
    set(&mut config.n_heads, args.heads);
    set(&mut config.ffn_dim, args.ffn_dim);
    set(&mut config.time_embed_dim, args.time_embed_dim);
    config
}

fn resolve_train_config(ctx: &Ctx, args: &TrainArgs) -> TrainConfig {
    let mut config = ctx.file.train.clone();
    set(&mut config.batch_size, args.batch_size);
    set(&mut config.learning_rate, args.lr);
    set(&mut config.warmup_steps, args.warmup_steps);
    set(&mut config.phase1_steps, args.phase1_steps);
    set(&mut config.phase2_steps, args.phase2_steps);
    set(&mut config.grad_clip, args.grad_clip);
    set(&mut config.beta_w, args.beta_w);
    set(&mut config.orientation, args.constraint_orientation);
    set(&mut config.alignment_kind, args.alignment);
    set(&mut config.use_overlap, args.overlap);
    set(&mut config.complete_frac_max, args.complete_frac_max);
    set(&mut config.seed, args.seed);
    config
}

fn cmd_train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let (corpus, report) = read_corpus(&args.corpus, &ctx.schema)?;
    say!("corpus: kept {} layouts, skipped {}", report.kept, report.skipped.len());

    let config = resolve_train_config(ctx, &args);
    let model_config = resolve_model_config(ctx, &args);
    let init_seed = args.init_seed.unwrap_or(config.seed);
    let model: Denoiser<f32> = Denoiser::init(model_config, init_seed)?;
    let hash = ctx.schedule.content_hash();
    let total = config.total_steps();
    let phase1_steps = config.phase1_steps;
    let mut trainer = Trainer::new(model, &ctx.schedule, &ctx.schema, config)?;

    let mut csv = String::from("step,l_simple,l_mse,c_align,c_overlap,total,lr,grad_norm\n");
    let mut phase1_saved = false;
    for _ in 0..total {
        if !phase1_saved && trainer.step_count() == phase1_steps {
            if let Some(p) = &args.phase1_out {
                save_checkpoint(&trainer.model, hash, p)?;
                say!("saved phase-1 model to {}", p.display());
            }
            phase1_saved = true;
        }
        let stats = trainer.train_step(&corpus)?;
        csv.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
            stats.step,
            stats.l_simple,
            stats.l_mse,
            stats.c_align,
            stats.c_overlap,
            stats.total,
            stats.lr,
            stats.grad_norm
        ));
        let done = trainer.step_count();
        if done % args.log_every == 0 || done == total {
            say!(
                "step {}/{} phase{} l_simple {:.4} l_mse {:.4} c_align {:.4} c_olp {:.4} lr {:.2e}",
                done,
                total,
                if trainer.in_phase2() { 2 } else { 1 },
                stats.l_simple,
                stats.l_mse,
                stats.c_align,
                stats.c_overlap,
                stats.lr
            );
        }
        if let Some(every) = args.checkpoint_every {
            if every > 0 && done % every == 0 && done != total {
                save_checkpoint(&trainer.model, hash, &args.out)?;
            }
        }
    }
    if !phase1_saved {
        if let Some(p) = &args.phase1_out {
            save_checkpoint(&trainer.model, hash, p)?;
            say!("saved phase-1 model to {}", p.display());
        }
    }
    save_checkpoint(&trainer.model, hash, &args.out)?;
    say!("saved checkpoint to {} after {} steps", args.out.display(), trainer.step_count());
    if let Some(log) = &args.log {
        write_atomic(log, csv.as_bytes())?;
        say!("wrote training log to {}", log.display());
    }
    Ok(())
}

fn load_model(ctx: &Ctx, path: &Path) -> Result<Denoiser<f32>> {
    let (model, hash) = load_checkpoint_for_schema::<f32>(path, &ctx.schema)?;
    if hash != ctx.schedule.content_hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} was trained under a different noise schedule",
            path.display()
        )));
    }
    Ok(model)
}

fn resolve_sampler(
    ctx: &Ctx,
    steps: Option<usize>,
    eta: Option<f64>,
    seed: Option<u64>,
) -> SamplerConfig {
    let mut config = ctx.file.sampler;
    set(&mut config.num_steps, steps);
    set(&mut config.eta, eta);
    set(&mut config.seed, seed);
    config
}

fn cmd_sample(ctx: &Ctx, args: SampleArgs) -> Result<()> {
    if args.task == TaskKind::Refinement {
        return Err(Error::Config("refinement has its own subcommand: lace refine".into()));
    }
    let model = load_model(ctx, &args.ckpt)?;
    let sampler = resolve_sampler(ctx, args.steps, args.eta, args.seed);
    let frac_max = args.complete_frac_max.unwrap_or(ctx.file.train.complete_frac_max);

    let decoded = if args.task == TaskKind::Uncond {
        if args.cond.is_some() {
            return Err(Error::Config(
                "unconditional sampling takes no --cond file (pick a conditioned task)".into(),
            ));
        }
        let count = args.count.unwrap_or(8);
        if count == 0 {
            return Err(Error::Config("--count must be positive".into()));
        }
        let canvas = args.canvas.unwrap_or(DEFAULT_CANVAS);
        let conds = vec![None; count];
        let states = ddim_sample_batch(&model, &ctx.schedule, &sampler, &ctx.schema, &conds)?;
        states.iter().map(|s| decode_layout(s, &ctx.schema, canvas)).collect::<Vec<_>>()
    } else {
        let cond_path = args.cond.as_ref().ok_or_else(|| {
            Error::Config(format!("task '{}' needs --cond layouts", args.task.token()))
        })?;
        if args.count.is_some() {
            return Err(Error::Config(
                "--count conflicts with --cond: one sample is drawn per condition line".into(),
            ));
        }
        let (cond_layouts, _) = read_corpus(cond_path, &ctx.schema)?;
        let mut masks: Vec<ConditionMask> = Vec::with_capacity(cond_layouts.len());
        let mut knowns: Vec<StateVector> = Vec::with_capacity(cond_layouts.len());
        for (i, layout) in cond_layouts.iter().enumerate() {
            let mut rng = derive_stream(sampler.seed, CLI_MASK_STREAM_TAG, i as u64);
            masks.push(make_mask(args.task, layout, &ctx.schema, frac_max, &mut rng)?);
            knowns.push(encode_layout(layout, &ctx.schema)?);
        }
        let conds: Vec<Option<Conditioning<'_>>> = masks
            .iter()
            .zip(&knowns)
            .map(|(mask, known)| Some(Conditioning { mask, known }))
            .collect();
        let states = ddim_sample_batch(&model, &ctx.schedule, &sampler, &ctx.schema, &conds)?;
        states
            .iter()
            .zip(&cond_layouts)
            .map(|(s, c)| decode_layout(s, &ctx.schema, c.canvas))
            .collect()
    };

    write_corpus(&args.out, &decoded)?;
    say!(
        "wrote {} {} samples to {}",
        decoded.len(),
        args.task.token(),
        args.out.display()
    );
    Ok(())
}

fn cmd_refine(ctx: &Ctx, args: RefineArgs) -> Result<()> {
    let model = load_model(ctx, &args.ckpt)?;
    let sampler = resolve_sampler(ctx, args.steps, args.eta, args.seed);
    let tau = match args.tau {
        Some(tau) => {
            ctx.schedule.check_t(tau)?;
            tau
        }
        None => {
            let beta_w = args.beta_w.unwrap_or(ctx.file.train.beta_w);
            let orientation = args.constraint_orientation.unwrap_or(ctx.file.train.orientation);
            let weights = ConstraintWeightSchedule::new(beta_w, ctx.schedule.len(), orientation)?;
            weights.threshold_step(args.tau_from_omega).ok_or_else(|| {
                Error::Config(format!(
                    "no timestep reaches constraint weight {} (beta_w {}, {} orientation)",
                    args.tau_from_omega,
                    beta_w,
                    match orientation {
                        WeightOrientation::SmallTActive => "small-t-active",
                        WeightOrientation::LargeTActive => "large-t-active",
                    }
                ))
            })?
        }
    };
    say!("partial reverse walk starts at timestep tau = {tau}");

    let (layouts, _) = read_corpus(&args.input, &ctx.schema)?;
    let mut starts: Vec<StateVector> = Vec::with_capacity(layouts.len());
    let mut masks: Vec<ConditionMask> = Vec::with_capacity(layouts.len());
    let mut knowns: Vec<StateVector> = Vec::with_capacity(layouts.len());
    for layout in &layouts {
        let mut rng = derive_stream(sampler.seed, CLI_MASK_STREAM_TAG, starts.len() as u64);
        let state = encode_layout(layout, &ctx.schema)?;
        masks.push(make_mask(TaskKind::Refinement, layout, &ctx.schema, 0.0, &mut rng)?);
        knowns.push(state.clone());
        starts.push(state);
    }
    let conds: Vec<Option<Conditioning<'_>>> = masks
        .iter()
        .zip(&knowns)
        .map(|(mask, known)| Some(Conditioning { mask, known }))
        .collect();
    let states =
        ddim_refine_batch(&model, &ctx.schedule, &sampler, &ctx.schema, tau, starts, &conds)?;
    let refined: Vec<Layout> = states
        .iter()
        .zip(&layouts)
        .map(|(s, l)| decode_layout(s, &ctx.schema, l.canvas))
        .collect();
    write_corpus(&args.out, &refined)?;
    say!("refined {} layouts into {}", refined.len(), args.out.display());
    Ok(())
}

fn cmd_post(ctx: &Ctx, args: PostArgs) -> Result<()> {
    let mut config = match args.delta {
        Some(delta) => PostConfig::with_delta(delta),
        None => ctx.file.post.clone(),
    };
    set(&mut config.use_overlap, args.overlap);
    set(&mut config.max_iters, args.max_iters);
    config.validate()?;

    let (layouts, _) = read_corpus(&args.input, &ctx.schema)?;
    let mut out = Vec::with_capacity(layouts.len());
    let mut aborted = 0usize;
    let mut before_sum = 0.0;
    let mut after_sum = 0.0;
    for layout in &layouts {
        let outcome = postprocess_layout(layout, &config)?;
        aborted += outcome.aborted_non_finite as usize;
        before_sum += outcome.objective_before;
        after_sum += outcome.objective_after;
        out.push(outcome.layout);
    }
    write_corpus(&args.out, &out)?;
    let n = out.len() as f64;
    say!(
        "post-processed {} layouts: mean objective {:.6} -> {:.6}{}",
        out.len(),
        before_sum / n,
        after_sum / n,
        if aborted > 0 {
            format!(" ({aborted} aborted on non-finite gradients and passed through)")
        } else {
            String::new()
        }
    );
    say!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, args: EvalArgs) -> Result<()> {
    let (generated, _) = read_corpus(&args.gen, &ctx.schema)?;
    let (reference, _) = read_corpus(&args.reference, &ctx.schema)?;
    let report = evaluate(&generated, &reference)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            write_atomic(path, json.as_bytes())?;
            say!("wrote report to {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_render(ctx: &Ctx, args: RenderArgs) -> Result<()> {
    let (layouts, _) = read_corpus(&args.input, &ctx.schema)?;
    std::fs::create_dir_all(&args.out_dir)?;
    for (i, layout) in layouts.iter().enumerate() {
        let svg = render_svg(layout);
        let path = args.out_dir.join(format!("{}-{:04}.svg", args.prefix, i));
        write_atomic(&path, svg.as_bytes())?;
    }
    say!("rendered {} SVGs into {}", layouts.len(), args.out_dir.display());
    Ok(())
}
