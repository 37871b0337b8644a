//! Command-line entry point: storyboard generation end to end, plus the
//! individual stages (ingest, ground, edit, morph, personalize, metrics) as
//! separate subcommands for scripting and inspection.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use storyreel::diffusion::{DiffusionBackend, NoiseSchedule, ScheduleKind};
use storyreel::editing::{edit_segment, EditConfig, SegmentSource};
use storyreel::grounding::{retrieve, FileTextEncoder, GroundingWeights};
use storyreel::imaging;
use storyreel::metrics::{metrics_report, MetricOutcome};
use storyreel::morphing::{generate_transition, FinetuneOptions, TransitionSpec};
use storyreel::personalize::{personalize, SubjectSpec};
use storyreel::pipeline::{
    self, build_backend, default_query_encoder, resolve_store_path, BackendConfig, StoryboardConfig,
};
use storyreel::store::FeatureStore;

#[derive(Parser)]
#[command(name = "storyreel", version, about = "Retrieval-grounded long video generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manage a feature store.
    #[command(subcommand)]
    Store(StoreCommand),
    /// Retrieve the best-matching video moments for a list of queries.
    Ground(GroundArgs),
    /// Edit one retrieved segment under an edited query.
    Edit(EditArgs),
    /// Generate morphing transition frames between two edited segments.
    Morph(MorphArgs),
    /// Bind a rare token to a subject by fine-tuning backend weights.
    Personalize(PersonalizeArgs),
    /// Run the full storyboard pipeline.
    Generate(GenerateArgs),
    /// Score a frame directory with built-in and plugin metrics.
    Metrics(MetricsArgs),
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Ingest a video: precomputed clip features plus a frame directory.
    Ingest(IngestArgs),
    /// Print a summary of the store contents.
    Info {
        #[arg(long)]
        store: PathBuf,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    video_id: String,
    /// Directory of PNG frames in temporal (filename) order.
    #[arg(long)]
    frames: PathBuf,
    /// Feature matrix file (rows = clips); `<file>.json` sidecar declares
    /// clip count and dimension.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    fps: f64,
}

#[derive(Args)]
struct GroundArgs {
    /// Text file with one query per line.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 1)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Weight archive with w_mm, b_mm, reducer; defaults when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = storyreel::grounding::DEFAULT_JOINT_DIM)]
    joint_dim: usize,
    /// JSON file mapping query text to precomputed embeddings; replaces the
    /// built-in deterministic encoder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    /// Segment description JSON: store, video_id, start_clip, end_clip,
    /// query.
    #[arg(long)]
    segment: PathBuf,
    /// The edited query q'.
    #[arg(long)]
    query_edit: String,
    /// Edit configuration JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MorphArgs {
    /// Directory of the preceding edited segment (frames + segment.json).
    #[arg(long)]
    prev: PathBuf,
    /// Directory of the following edited segment.
    #[arg(long)]
    next: PathBuf,
    /// Interpolation grid density; emits n-1 frames.
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    finetune_steps: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha_min: f64,
    /// Backend weight archive; a pretrained toy backend when omitted.
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Also write the two endpoint LoRA deltas into the output directory
    /// for auditing.
    #[arg(long)]
    save_loras: bool,
}

#[derive(Args)]
struct PersonalizeArgs {
    /// Directory with 3-5 subject images.
    #[arg(long)]
    images: PathBuf,
    /// Rare identifier token, e.g. "[V]".
    #[arg(long)]
    token: String,
    /// Subject class name, e.g. "dog".
    #[arg(long)]
    class: String,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Output weight archive for the personalized backend.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    resolution: u32,
    #[arg(long, default_value_t = 50)]
    t_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha_min: f64,
    /// Backend weight archive to start from; a pretrained toy backend when
    /// omitted.
    #[arg(long)]
    backend: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Storyboard configuration JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Personalized backend weight archive; overrides the configured
    /// backend and any in-config personalization stage.
    #[arg(long)]
    personalize: Option<PathBuf>,
    /// Worker threads; results are identical for any value.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    frames: PathBuf,
    /// Metric plugin executables; each receives the frame directory and
    /// prints a score.
    #[arg(long = "plugin")]
    plugins: Vec<PathBuf>,
}

/// Input description for `edit`.
#[derive(Debug, Deserialize)]
struct SegmentJob {
    store: PathBuf,
    video_id: String,
    start_clip: usize,
    end_clip: usize,
    query: String,
}

/// `edit` configuration file: edit parameters plus backend choice.
#[derive(Debug, Default, Deserialize)]
struct EditJobConfig {
    #[serde(default)]
    edit: EditConfig,
    #[serde(default)]
    backend: BackendConfig,
}

/// Audit record written next to edited frames; `morph` reads it back.
#[derive(Debug, Serialize, Deserialize)]
struct SegmentAudit {
    source: SegmentSource,
    query: String,
    edited_query: String,
    frame_count: usize,
    resolution: u32,
    steps: usize,
    noise_fingerprints: Vec<String>,
}

const SEGMENT_AUDIT_FILE: &str = "segment.json";

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Store(cmd) => run_store(cmd),
        Command::Ground(args) => run_ground(args),
        Command::Edit(args) => run_edit(args),
        Command::Morph(args) => run_morph(args),
        Command::Personalize(args) => run_personalize(args),
        Command::Generate(args) => run_generate(args),
        Command::Metrics(args) => run_metrics(args),
    }
}

fn run_store(cmd: StoreCommand) -> Result<()> {
    match cmd {
        StoreCommand::Ingest(args) => {
            let mut store = FeatureStore::open(&args.store)?;
            let record = store
                .ingest(&args.video_id, &args.frames, &args.features, args.fps)
                .with_context(|| format!("ingesting {}", args.video_id))?;
            println!(
                "ingested {}: {} clips, {} frames, dim {}",
                record.video_id,
                record.num_clips,
                record.total_frames(),
                record.clip_features.cols
            );
        }
        StoreCommand::Info { store } => {
            let store = FeatureStore::open(&store)?;
            println!(
                "store: {} videos, feature dim {}",
                store.len(),
                store.feature_dim().map_or("unset".to_string(), |d| d.to_string())
            );
            for record in store.records() {
                println!(
                    "  {}  clips={} frames={} fps={}",
                    record.video_id,
                    record.num_clips,
                    record.total_frames(),
                    record.fps
                );
            }
        }
    }
    Ok(())
}

fn run_ground(args: GroundArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.queries)
        .with_context(|| format!("reading queries from {}", args.queries.display()))?;
    let queries: Vec<String> =
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if queries.is_empty() {
        bail!("no queries in {}", args.queries.display());
    }
    let store = FeatureStore::open(&resolve_store_path(&args.store))?;
    let weights = match &args.weights {
        Some(path) => GroundingWeights::load(path)?,
        None => {
            let dim =
                store.feature_dim().context("store is empty; ingest videos before grounding")?;
            GroundingWeights::default_for(dim, args.joint_dim)
        }
    };
    let results = match &args.embeddings {
        Some(path) => {
            let encoder = FileTextEncoder::load(path)?;
            retrieve(&queries, &store, &weights, &encoder, args.top_k)?
        }
        None => {
            let encoder = default_query_encoder(weights.projection.dim());
            retrieve(&queries, &store, &weights, &encoder, args.top_k)?
        }
    };
    let json = serde_json::to_string_pretty(&results)?;
    std::fs::write(&args.out, json).with_context(|| format!("writing {}", args.out.display()))?;
    for r in &results {
        match r.candidates.first() {
            Some(best) => println!(
                "{:?} -> {} clips {}..={} (score {:.4}){}",
                r.query,
                best.video_id,
                best.start_clip,
                best.end_clip,
                best.score,
                if r.exhausted { " [corpus exhausted]" } else { "" }
            ),
            None => println!("{:?} -> no match", r.query),
        }
    }
    Ok(())
}

fn run_edit(args: EditArgs) -> Result<()> {
    let job: SegmentJob = read_json(&args.segment)?;
    let config: EditJobConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => EditJobConfig::default(),
    };
    let schedule = config.edit.noise_schedule()?;
    let backend = build_backend(&config.backend, &schedule)?;

    let store = FeatureStore::open(&resolve_store_path(&job.store))?;
    let frame_paths = store.get_frames(&job.video_id, (job.start_clip, job.end_clip))?;
    let frames =
        frame_paths.iter().map(|p| imaging::load_frame(p)).collect::<Result<Vec<_>, _>>()?;

    let segment =
        edit_segment(&frames, &job.query, &args.query_edit, &config.edit, backend.as_ref())?;
    std::fs::create_dir_all(&args.out)?;
    for (i, frame) in segment.frames.iter().enumerate() {
        imaging::save_frame(&args.out.join(imaging::frame_file_name(i)), frame)?;
    }
    let audit = SegmentAudit {
        source: SegmentSource {
            video_id: job.video_id.clone(),
            start_clip: job.start_clip,
            end_clip: job.end_clip,
        },
        query: job.query.clone(),
        edited_query: args.query_edit.clone(),
        frame_count: segment.frames.len(),
        resolution: segment.resolution,
        steps: config.edit.steps,
        noise_fingerprints: segment
            .noise_fingerprints
            .iter()
            .map(|f| format!("{f:016x}"))
            .collect(),
    };
    write_json(&args.out.join(SEGMENT_AUDIT_FILE), &audit)?;
    println!(
        "edited {} frames from {} clips {}..={} into {}",
        segment.frames.len(),
        job.video_id,
        job.start_clip,
        job.end_clip,
        args.out.display()
    );
    Ok(())
}

fn run_morph(args: MorphArgs) -> Result<()> {
    let prev_audit: SegmentAudit = read_json(&args.prev.join(SEGMENT_AUDIT_FILE))?;
    let next_audit: SegmentAudit = read_json(&args.next.join(SEGMENT_AUDIT_FILE))?;
    let prev_frames = imaging::list_frame_files(&args.prev)?;
    let next_frames = imaging::list_frame_files(&args.next)?;
    let frame_i = imaging::load_frame(prev_frames.last().expect("non-empty frame list"))?;
    let frame_j = imaging::load_frame(next_frames.first().expect("non-empty frame list"))?;

    let schedule = NoiseSchedule::make(args.steps, ScheduleKind::Linear, args.alpha_min)?;
    let backend = load_or_default_backend(args.backend.as_deref(), &schedule)?;

    let spec = TransitionSpec {
        n: args.n,
        frame_i,
        frame_j,
        query_i: prev_audit.edited_query.clone(),
        query_j: next_audit.edited_query.clone(),
        finetune: FinetuneOptions {
            steps: args.finetune_steps,
            rank: args.rank,
            lr: args.lr,
            seed: args.seed,
        },
    };
    let transition = generate_transition(&spec, backend.as_ref(), &schedule)?;
    std::fs::create_dir_all(&args.out)?;
    for (i, frame) in transition.frames.iter().enumerate() {
        imaging::save_frame(&args.out.join(imaging::frame_file_name(i)), frame)?;
    }
    if args.save_loras {
        transition.delta_i.save(&args.out.join("prev.lora"))?;
        transition.delta_j.save(&args.out.join("next.lora"))?;
    }
    write_json(
        &args.out.join("transition.json"),
        &serde_json::json!({
            "n": args.n,
            "frame_count": transition.frames.len(),
            "alphas": transition.alphas,
            "query_i": prev_audit.edited_query,
            "query_j": next_audit.edited_query,
            "seed": args.seed,
        }),
    )?;
    println!(
        "morphed {} -> {}: {} transition frames in {}",
        args.prev.display(),
        args.next.display(),
        transition.frames.len(),
        args.out.display()
    );
    Ok(())
}

fn run_personalize(args: PersonalizeArgs) -> Result<()> {
    let images = imaging::load_frames_dir(&args.images)?;
    let schedule = NoiseSchedule::make(args.t_steps, ScheduleKind::Linear, args.alpha_min)?;
    let backend = load_or_default_backend(args.backend.as_deref(), &schedule)?;
    let spec = SubjectSpec {
        identifier_token: args.token.clone(),
        class_name: args.class.clone(),
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        resolution: args.resolution,
    };
    let (tuned, report) = personalize(backend.as_ref(), &spec, &images, &schedule)?;
    tuned.save_weights(&args.out)?;
    println!(
        "personalized {:?} ({} images, {} steps): loss {:.6} -> {:.6}, weights in {}",
        spec.prompt(),
        images.len(),
        args.steps,
        report.initial_running_loss,
        report.final_running_loss,
        args.out.display()
    );
    Ok(())
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let mut config: StoryboardConfig = read_json(&args.config)?;
    if let Some(weights) = &args.personalize {
        config.backend = BackendConfig::Archive { path: weights.clone() };
        config.personalization = None;
    }
    let manifest = match args.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .context("building worker pool")?;
            pool.install(|| pipeline::generate(&config, &args.out))?
        }
        None => pipeline::generate(&config, &args.out)?,
    };
    println!(
        "generated {} frames ({} segments, {} transitions) in {}",
        manifest.total_frames,
        manifest.segments.len(),
        manifest.transitions.len(),
        args.out.display()
    );
    if let Some(score) = manifest.metrics.get(storyreel::metrics::TEMPORAL_FLICKERING) {
        println!("temporal_flickering: {score:.4}");
    }
    Ok(())
}

fn run_metrics(args: MetricsArgs) -> Result<()> {
    let entries = metrics_report(&args.frames, &args.plugins)?;
    println!("{:<28} score", "metric");
    for entry in &entries {
        let rendered = match &entry.outcome {
            MetricOutcome::Score { value } => format!("{value:.4}"),
            MetricOutcome::Unavailable => "unavailable".to_string(),
            MetricOutcome::Failed { exit_code, detail } => match exit_code {
                Some(code) => format!("failed (exit code {code}) {detail}"),
                None => format!("failed {detail}"),
            },
        };
        println!("{:<28} {rendered}", entry.name);
    }
    Ok(())
}

fn load_or_default_backend(
    archive: Option<&Path>,
    schedule: &NoiseSchedule,
) -> Result<Box<dyn DiffusionBackend>> {
    let config = match archive {
        Some(path) => BackendConfig::Archive { path: path.to_path_buf() },
        None => BackendConfig::default(),
    };
    Ok(build_backend(&config, schedule)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}
