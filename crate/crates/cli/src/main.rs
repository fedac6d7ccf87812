//! `landmark-align`: silver landmark bootstrapping, route templates and
//! wayfinding metrics from the command line.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use landmark_core::alignment::{AlignmentConfig, OptimizerConfig};
use landmark_core::data::{
    load_corpus, read_json, read_jsonl, write_bytes, write_json, write_jsonl, write_text, Corpus,
    Detection, NavGraph, PoseTrace, StationaryThresholds,
};
use landmark_core::embeddings::{EmbeddingProvider, DEFAULT_DIM};
use landmark_core::geometry::{render_mask_pgm, RefinementGrid};
use landmark_core::metrics::Episode;
use landmark_core::phrases::{write_conllu, ExtractionRules};
use landmark_core::pipeline::{
    align_corpus, encode_corpus, evaluate_corpus, extract_corpus_phrases, load_heads, load_parses,
    pool_corpus, pooled_landmark_sets, prepare_detector_corpus, refine_corpus, run_pipeline,
    silver_landmark_sets, InputPaths, InstructionPhrases, LandmarkSource, PipelineConfig,
    PooledRecord, ProviderConfig, SilverRecord, Stoplists,
};
use landmark_core::report::{render_alignment_svg, render_alignment_text};
use landmark_core::route::TemplateMode;
use landmark_core::synthetic::{gen_ambiguity_corpus, gen_separable_corpus, gen_synthetic_corpus};

const DEFAULT_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "landmark-align", version, about)]
struct Cli {
    /// Seed for all randomness [default: 7]
    #[arg(long, global = true, env = "LANDMARK_ALIGN_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract landmark phrases from dependency parses
    ExtractPhrases(ExtractArgs),
    /// Align landmark phrases with pose-trace frames
    Align(AlignArgs),
    /// Train the text and image projection heads
    Finetune(FinetuneArgs),
    /// Refine silver landmark views by local search
    Refine(RefineArgs),
    /// Pool detections along each instruction's path
    PoolDetections(PoolArgs),
    /// Encode route templates from landmarks
    EncodeTemplate(EncodeArgs),
    /// Build detector inputs and targets for each path pano
    PrepareDetector(DetectorArgs),
    /// Score agent episodes against reference paths
    Evaluate(EvaluateArgs),
    /// Render alignment grids as text or SVG
    Report(ReportArgs),
    /// Write a synthetic mini-corpus and its companion corpora
    GenSyntheticCorpus(GenArgs),
    /// Run every stage from a JSON config
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Directory with instructions.jsonl, traces.jsonl and graph.json
    #[arg(long)]
    corpus: PathBuf,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        let d = &self.corpus;
        load_corpus(
            d.join("instructions.jsonl"),
            d.join("traces.jsonl"),
            d.join("graph.json"),
        )
        .with_context(|| format!("loading corpus from {}", d.display()))
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProviderKind {
    Synthetic,
    File,
}

#[derive(Args, Debug)]
struct ProviderArgs {
    /// Embedding source
    #[arg(long, value_enum, default_value_t = ProviderKind::Synthetic)]
    provider: ProviderKind,
    /// Embedding dimension of the synthetic provider
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    /// Scene file that conditions synthetic image embeddings
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Directory with embeddings.idx.json and embeddings.f32 (file provider)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Trained projection heads; identity when absent
    #[arg(long)]
    heads: Option<PathBuf>,
}

impl ProviderArgs {
    fn config(&self, corpus_dir: Option<&Path>) -> Result<ProviderConfig> {
        Ok(match self.provider {
            ProviderKind::Synthetic => ProviderConfig::Synthetic {
                dim: self.dim,
                seed: None,
                scene: self.scene.clone(),
            },
            ProviderKind::File => {
                let dir = match (&self.embeddings, corpus_dir) {
                    (Some(d), _) => d.clone(),
                    (None, Some(d)) => d.to_path_buf(),
                    (None, None) => bail!("--provider file needs --embeddings"),
                };
                ProviderConfig::File {
                    index: dir.join("embeddings.idx.json"),
                    payload: dir.join("embeddings.f32"),
                }
            }
        })
    }

    fn build(
        &self,
        corpus_dir: Option<&Path>,
        seed: u64,
        stage: &'static str,
    ) -> Result<(
        Box<dyn EmbeddingProvider>,
        landmark_core::embeddings::ProjectionHeads,
    )> {
        let provider = self
            .config(corpus_dir)?
            .build(seed)
            .map_err(|e| e.in_stage(stage, None))?;
        let heads = load_heads(self.heads.as_deref(), provider.dim())
            .map_err(|e| e.in_stage(stage, None))?;
        Ok((provider, heads))
    }
}

#[derive(Args, Debug)]
struct AlignmentArgs {
    /// Weight of the squared timestamp difference
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Constant BLANK logit
    #[arg(long, default_value_t = 0.0)]
    blank_logit: f64,
    /// Softmax temperature
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Heading change (degrees) below which a frame is stationary
    #[arg(long, default_value_t = 1.0)]
    stationary_heading: f64,
    /// Pitch change (degrees) below which a frame is stationary
    #[arg(long, default_value_t = 1.0)]
    stationary_pitch: f64,
    /// Position change (meters) below which a frame is stationary
    #[arg(long, default_value_t = 0.05)]
    stationary_position: f64,
}

impl AlignmentArgs {
    fn config(&self) -> AlignmentConfig {
        AlignmentConfig {
            lambda: self.lambda,
            blank_logit: self.blank_logit,
            temperature: self.temperature,
        }
    }

    fn thresholds(&self) -> StationaryThresholds {
        StationaryThresholds {
            heading_deg: self.stationary_heading,
            pitch_deg: self.stationary_pitch,
            position_m: self.stationary_position,
        }
    }
}

#[derive(Args, Debug)]
struct PhraseSourceArgs {
    /// CoNLL-U parses; defaults to parses.conllu in the corpus directory
    #[arg(long)]
    parses: Option<PathBuf>,
    /// Directory with stoplist.{en,hi,te}.txt overrides
    #[arg(long)]
    stoplists: Option<PathBuf>,
    /// Previously extracted phrases; extracted from the parses when absent
    #[arg(long)]
    phrases: Option<PathBuf>,
}

impl PhraseSourceArgs {
    fn phrases(&self, corpus: &Corpus, corpus_dir: &Path) -> Result<Vec<InstructionPhrases>> {
        if let Some(p) = &self.phrases {
            return Ok(read_jsonl(p)?);
        }
        let parses_path = self
            .parses
            .clone()
            .unwrap_or_else(|| corpus_dir.join("parses.conllu"));
        let parses = load_parses(&parses_path).map_err(|e| e.in_stage("extract-phrases", None))?;
        let stoplists = match &self.stoplists {
            Some(d) => Stoplists::load_dir(d)?,
            None => Stoplists::builtin(),
        };
        Ok(extract_corpus_phrases(
            corpus,
            &parses,
            &stoplists,
            &ExtractionRules::default(),
        )?)
    }
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    source: PhraseSourceArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    source: PhraseSourceArgs,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    alignment: AlignmentArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    source: PhraseSourceArgs,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    alignment: AlignmentArgs,
    /// Optimizer steps
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Instructions per step; the full corpus when absent
    #[arg(long)]
    batch_size: Option<usize>,
    /// Where to write the per-step loss curve (JSON array)
    #[arg(long)]
    losses: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RefineArgs {
    /// Silver landmarks to refine
    #[arg(long)]
    silver: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Heading offsets (degrees)
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-40,-30,-20,-10,0,10,20,30,40"
    )]
    heading_offsets: Vec<f64>,
    /// Pitch offsets (degrees)
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-20,-10,0,10,20"
    )]
    pitch_offsets: Vec<f64>,
    /// Square fields of view (degrees)
    #[arg(long, value_delimiter = ',', default_value = "30,45,60,75,90")]
    fovs: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PoolArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Detections in the unrotated 512×256 frame
    #[arg(long)]
    detections: PathBuf,
    /// Landmarks kept per path pano
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    /// Skip this many top-ranked detections
    #[arg(long, default_value_t = 0)]
    rank_offset: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Image,
    Rewrite,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Silver (or refined) landmarks
    #[arg(long, conflicts_with_all = ["pooled", "detections"])]
    silver: Option<PathBuf>,
    /// Pooled detections
    #[arg(long, conflicts_with = "detections")]
    pooled: Option<PathBuf>,
    /// Raw detections, pooled with --ratio and --rank-offset
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Landmark reference style
    #[arg(long, value_enum, default_value_t = ModeArg::Image)]
    mode: ModeArg,
    /// Landmarks kept per path pano when pooling raw detections
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    /// Skip this many top-ranked detections when pooling
    #[arg(long, default_value_t = 0)]
    rank_offset: usize,
    /// Field of view of the outbound landmark (degrees)
    #[arg(long, default_value_t = 60.0)]
    outbound_fov: f64,
    /// Also write the de-duplicated landmark lists here
    #[arg(long)]
    landmarks_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Silver or refined landmarks providing targets
    #[arg(long)]
    silver: PathBuf,
    /// Unpadded image width (pixels)
    #[arg(long, default_value_t = 512.0)]
    width: f64,
    /// Image height (pixels)
    #[arg(long, default_value_t = 256.0)]
    height: f64,
    /// Directory for 8-bit PGM masks of markers and targets
    #[arg(long)]
    emit_raster: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Success threshold (meters)
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
    /// Instructions for word counts missing from the episodes
    #[arg(long)]
    instructions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Text,
    Svg,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    silver: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    /// Only this instruction; required for SVG when several are present
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Instructions in the mini-corpus
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Items in the ambiguity and separable corpora
    #[arg(long, default_value_t = 20)]
    companion_count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Pipeline config (JSON); relative paths resolve against its directory
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} target={} {}",
                record.level().as_str().to_lowercase(),
                record.target(),
                record.args()
            )
        })
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("msg=\"{err:#}\"");
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::ExtractPhrases(a) => {
            let corpus = a.corpus.load()?;
            let phrases = a.source.phrases(&corpus, &a.corpus.corpus)?;
            write_jsonl(&a.out, &phrases)?;
        }
        Command::Align(a) => {
            let corpus = a.corpus.load()?;
            let phrases = a.source.phrases(&corpus, &a.corpus.corpus)?;
            let (provider, heads) = a.provider.build(Some(&a.corpus.corpus), seed, "align")?;
            let silver = align_corpus(
                &corpus,
                &phrases,
                provider.as_ref(),
                &heads,
                &a.alignment.config(),
                &a.alignment.thresholds(),
            )?;
            write_jsonl(&a.out, &silver)?;
        }
        Command::Finetune(a) => finetune(a, seed)?,
        Command::Refine(a) => {
            let silver: Vec<SilverRecord> = read_jsonl(&a.silver)?;
            let (provider, heads) = a.provider.build(None, seed, "refine")?;
            let grid = RefinementGrid {
                heading_offsets: a.heading_offsets,
                pitch_offsets: a.pitch_offsets,
                fovs: a.fovs,
            };
            if grid.is_empty() {
                bail!("refinement grid is empty");
            }
            let refined = refine_corpus(&silver, provider.as_ref(), &heads, &grid)?;
            write_jsonl(&a.out, &refined)?;
        }
        Command::PoolDetections(a) => {
            let corpus = a.corpus.load()?;
            let detections: Vec<Detection> = read_jsonl(&a.detections)?;
            let pooled = pool_corpus(&corpus, &detections, a.ratio, a.rank_offset)?;
            write_jsonl(&a.out, &pooled)?;
        }
        Command::EncodeTemplate(a) => {
            let corpus = a.corpus.load()?;
            let sets = if let Some(p) = &a.silver {
                silver_landmark_sets(&read_jsonl::<SilverRecord>(p)?)
            } else if let Some(p) = &a.pooled {
                pooled_landmark_sets(&read_jsonl::<PooledRecord>(p)?)?
            } else if let Some(p) = &a.detections {
                let detections: Vec<Detection> = read_jsonl(p)?;
                pooled_landmark_sets(&pool_corpus(&corpus, &detections, a.ratio, a.rank_offset)?)?
            } else {
                bail!("one of --silver, --pooled or --detections is required");
            };
            let mode = match a.mode {
                ModeArg::Image => TemplateMode::Image,
                ModeArg::Rewrite => TemplateMode::Rewrite,
            };
            let (kept, templates) = encode_corpus(&corpus, &sets, mode, a.outbound_fov)?;
            if let Some(p) = &a.landmarks_out {
                write_jsonl(p, &kept)?;
            }
            write_jsonl(&a.out, &templates)?;
        }
        Command::PrepareDetector(a) => {
            let corpus = a.corpus.load()?;
            let sets = silver_landmark_sets(&read_jsonl::<SilverRecord>(&a.silver)?);
            let records = prepare_detector_corpus(&corpus, &sets, a.width, a.height)?;
            if let Some(dir) = &a.emit_raster {
                for r in &records {
                    let name =
                        format!("{}_{:02}_{}.pgm", r.instruction_id, r.path_index, r.pano_id);
                    write_bytes(dir.join(name), &render_mask_pgm(&r.example))?;
                }
            }
            write_jsonl(&a.out, &records)?;
        }
        Command::Evaluate(a) => {
            let episodes: Vec<Episode> = read_jsonl(&a.episodes)?;
            let graph: NavGraph = read_json(&a.graph)?;
            let corpus = match &a.instructions {
                Some(p) => Some(Corpus::new(read_jsonl(p)?, Vec::new(), graph.clone())?),
                None => None,
            };
            let report = evaluate_corpus(&episodes, &graph, a.threshold, corpus.as_ref())?;
            write_json(&a.out, &report)?;
        }
        Command::Report(a) => report(a)?,
        Command::GenSyntheticCorpus(a) => gen_corpus(a, seed)?,
        Command::Run(a) => {
            let mut cfg = PipelineConfig::load(&a.config)
                .with_context(|| format!("reading {}", a.config.display()))?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(out) = a.out {
                cfg.output_dir = out;
            }
            run_pipeline(&cfg)?;
        }
    }
    Ok(())
}

fn finetune(a: FinetuneArgs, seed: u64) -> Result<()> {
    use landmark_core::alignment::{finetune, frame_key, TrainingExample};
    use landmark_core::data::subsample_frames;

    let corpus = a.corpus.load()?;
    let phrases = a.source.phrases(&corpus, &a.corpus.corpus)?;
    let (provider, heads) = a.provider.build(Some(&a.corpus.corpus), seed, "finetune")?;
    let thresholds = a.alignment.thresholds();
    let mut examples = Vec::new();
    for ip in phrases.iter().filter(|p| !p.phrases.is_empty()) {
        let trace = corpus
            .trace(&ip.instruction_id)
            .with_context(|| format!("no trace for `{}`", ip.instruction_id))?;
        let kept = subsample_frames(trace, &thresholds);
        let text_keys: Vec<String> = ip.phrases.iter().map(|p| p.text.clone()).collect();
        let image_keys: Vec<String> = kept.frames.iter().map(frame_key).collect();
        examples.push(
            TrainingExample::from_keys(
                &text_keys,
                &image_keys,
                ip.phrases.iter().map(|p| p.time_s).collect(),
                kept.frames.iter().map(|f| f.time_s).collect(),
                provider.as_ref(),
            )
            .map_err(|e| e.in_stage("finetune", Some(&ip.instruction_id)))?,
        );
    }
    if examples.is_empty() {
        bail!("no instruction has landmark phrases to train on");
    }
    let opt = OptimizerConfig {
        steps: a.steps,
        learning_rate: a.learning_rate,
        seed,
        batch_size: a.batch_size,
        ..Default::default()
    };
    let outcome = finetune(&examples, heads, &a.alignment.config(), &opt)
        .map_err(|e| e.in_stage("finetune", None))?;
    log::info!(
        "stage=finetune steps={} initial_loss={} final_loss={}",
        a.steps,
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    outcome.heads.save(&a.out)?;
    if let Some(p) = &a.losses {
        write_json(p, &outcome.losses)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let silver: Vec<SilverRecord> = read_jsonl(&a.silver)?;
    let traces: Vec<PoseTrace> = read_jsonl(&a.traces)?;
    let chosen: Vec<&SilverRecord> = silver
        .iter()
        .filter(|r| {
            a.instruction
                .as_ref()
                .is_none_or(|id| &r.instruction_id == id)
        })
        .collect();
    if chosen.is_empty() {
        bail!("no matching alignment in {}", a.silver.display());
    }
    let frames_of = |id: &str| -> Result<usize> {
        traces
            .iter()
            .find(|t| t.instruction_id == id)
            .map(|t| t.frames.len())
            .with_context(|| format!("no trace for `{id}`"))
    };
    let out = match a.format {
        ReportFormat::Text => {
            let mut s = String::new();
            for r in &chosen {
                s.push_str(&render_alignment_text(r, frames_of(&r.instruction_id)?)?);
                s.push('\n');
            }
            s
        }
        ReportFormat::Svg => {
            if chosen.len() > 1 {
                bail!("SVG output covers one instruction; pass --instruction");
            }
            render_alignment_svg(chosen[0], frames_of(&chosen[0].instruction_id)?)?
        }
    };
    write_text(&a.out, &out)?;
    Ok(())
}

fn gen_corpus(a: GenArgs, seed: u64) -> Result<()> {
    let c = gen_synthetic_corpus(seed, a.count)?;
    let d = &a.out;
    write_jsonl(d.join("instructions.jsonl"), &c.instructions)?;
    write_jsonl(d.join("traces.jsonl"), &c.traces)?;
    write_json(d.join("graph.json"), &c.graph)?;
    write_text(d.join("parses.conllu"), &write_conllu(&c.parses))?;
    write_json(d.join("scene.json"), &c.scene)?;
    write_jsonl(d.join("detections.jsonl"), &c.detections)?;
    write_jsonl(d.join("episodes.jsonl"), &c.episodes)?;
    write_jsonl(d.join("gold.jsonl"), &c.gold)?;
    write_json(
        d.join("ambiguity.json"),
        &gen_ambiguity_corpus(seed, a.companion_count),
    )?;
    write_json(
        d.join("separable.json"),
        &gen_separable_corpus(seed, a.companion_count),
    )?;
    let cfg = PipelineConfig {
        inputs: InputPaths {
            instructions: "instructions.jsonl".into(),
            traces: "traces.jsonl".into(),
            graph: "graph.json".into(),
            parses: "parses.conllu".into(),
            detections: Some("detections.jsonl".into()),
            episodes: Some("episodes.jsonl".into()),
            stoplists: None,
            heads: None,
        },
        output_dir: "out".into(),
        provider: ProviderConfig::Synthetic {
            dim: DEFAULT_DIM,
            seed: None,
            scene: Some("scene.json".into()),
        },
        alignment: AlignmentConfig::default(),
        stationary: StationaryThresholds::default(),
        refinement: RefinementGrid::default(),
        landmarks: LandmarkSource::Silver,
        ratio: 1.0,
        rank_offset: 0,
        outbound_fov_deg: 60.0,
        template_mode: TemplateMode::Image,
        success_threshold_m: 3.0,
        seed,
        workers: None,
    };
    write_json(d.join("pipeline.json"), &cfg)?;
    log::info!(
        "stage=gen-synthetic-corpus instructions={} out={}",
        a.count,
        d.display()
    );
    Ok(())
}
