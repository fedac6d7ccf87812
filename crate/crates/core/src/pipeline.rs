//! Stage functions over whole corpora and the end-to-end run.
//!
//! Every stage maps in-memory records to records; file handling lives in
//! [`run_pipeline`] and the command-line front end. Per-instruction work is
//! fanned out on the worker pool and collected in input order, so outputs
//! do not depend on scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{build_logit_matrix, decode_alignment, AlignmentConfig};
use crate::data::{
    load_corpus, read_jsonl, subsample_with_indices, write_json, write_jsonl, Corpus, Detection,
    Language, StationaryThresholds,
};
use crate::embeddings::{
    EmbeddingProvider, EmbeddingTable, ProjectionHeads, SyntheticProvider, DEFAULT_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{
    prepare_detector_example, refine_landmark, DetectorExample, PerspectiveSpec, RefinementGrid,
};
use crate::metrics::{
    corpus_report, evaluate_episodes, Episode, ReportTable, DEFAULT_SUCCESS_THRESHOLD_M,
};
use crate::phrases::{
    extract_instruction_phrases, group_by_instruction, parse_conllu, ExtractionRules,
    LandmarkPhrase, ParsedSentence, Stoplist,
};
use crate::route::{
    add_outbound_landmarks, dedup_route_landmarks, detections_to_landmarks, encode_template,
    pool_detections, LandmarkKind, PathContext, PooledDetection, RouteLandmark, RouteTemplate,
    TemplateMode, DEFAULT_OUTBOUND_FOV,
};
use crate::synthetic::{Scene, SceneProvider};

/// Rounding applied to every real written by the pipeline, so outputs are
/// stable across platforms whose math libraries differ in the last bits.
pub const OUTPUT_PRECISION: f64 = 1e-6;

pub fn round_output(x: f64) -> f64 {
    if x.is_finite() {
        let r = (x / OUTPUT_PRECISION).round() * OUTPUT_PRECISION;
        if r == 0.0 {
            0.0
        } else {
            r
        }
    } else {
        x
    }
}

fn round_view(v: &PerspectiveSpec) -> PerspectiveSpec {
    PerspectiveSpec {
        heading_deg: round_output(v.heading_deg),
        pitch_deg: round_output(v.pitch_deg),
        hfov_deg: round_output(v.hfov_deg),
        vfov_deg: round_output(v.vfov_deg),
    }
}

/// Runs `f` over `items` on the worker pool, keeping input order.
fn par_map<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    /// Hash-seeded vectors; with a scene, image embeddings reflect the
    /// objects each view sees.
    Synthetic {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scene: Option<PathBuf>,
    },
    /// Precomputed vectors from an index/payload pair.
    File { index: PathBuf, payload: PathBuf },
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Synthetic {
            dim: DEFAULT_DIM,
            seed: None,
            scene: None,
        }
    }
}

impl ProviderConfig {
    /// Builds the provider; a synthetic provider without its own seed uses
    /// `seed`.
    pub fn build(&self, seed: u64) -> Result<Box<dyn EmbeddingProvider>> {
        match self {
            ProviderConfig::Synthetic {
                dim,
                seed: own,
                scene,
            } => {
                if *dim == 0 {
                    return Err(Error::Invariant(
                        "embedding dimension must be positive".into(),
                    ));
                }
                let seed = own.unwrap_or(seed);
                Ok(match scene {
                    Some(path) => {
                        let scene: Scene = crate::data::read_json(path)?;
                        Box::new(SceneProvider::new(*dim, seed, scene))
                    }
                    None => Box::new(SyntheticProvider::new(*dim, seed)),
                })
            }
            ProviderConfig::File { index, payload } => {
                Ok(Box::new(EmbeddingTable::load(index, payload)?))
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        match self {
            ProviderConfig::Synthetic { scene, .. } => {
                if let Some(p) = scene {
                    *p = base.join(&*p);
                }
            }
            ProviderConfig::File { index, payload } => {
                *index = base.join(&*index);
                *payload = base.join(&*payload);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkSource {
    /// Refined silver landmarks from alignment.
    #[default]
    Silver,
    /// Pooled detector outputs.
    Detections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub instructions: PathBuf,
    pub traces: PathBuf,
    pub graph: PathBuf,
    pub parses: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<PathBuf>,
    /// Directory holding `stoplist.{en,hi,te}.txt` overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stoplists: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: InputPaths,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub stationary: StationaryThresholds,
    #[serde(default)]
    pub refinement: RefinementGrid,
    #[serde(default)]
    pub landmarks: LandmarkSource,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default)]
    pub rank_offset: usize,
    #[serde(default = "default_outbound_fov")]
    pub outbound_fov_deg: f64,
    #[serde(default = "default_mode")]
    pub template_mode: TemplateMode,
    #[serde(default = "default_threshold")]
    pub success_threshold_m: f64,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; all cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_ratio() -> f64 {
    1.0
}

fn default_outbound_fov() -> f64 {
    DEFAULT_OUTBOUND_FOV
}

fn default_mode() -> TemplateMode {
    TemplateMode::Image
}

fn default_threshold() -> f64 {
    DEFAULT_SUCCESS_THRESHOLD_M
}

impl PipelineConfig {
    /// Reads a config file; relative paths are taken relative to its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: PipelineConfig = crate::data::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| *p = base.join(&*p);
        let i = &mut self.inputs;
        for p in [
            &mut i.instructions,
            &mut i.traces,
            &mut i.graph,
            &mut i.parses,
        ] {
            join(p);
        }
        for p in [
            &mut i.detections,
            &mut i.episodes,
            &mut i.stoplists,
            &mut i.heads,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        join(&mut self.output_dir);
        self.provider.resolve(base);
    }

    pub fn validate(&self) -> Result<()> {
        self.alignment.validate()?;
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(Error::Invariant(format!(
                "ratio must be positive, got {}",
                self.ratio
            )));
        }
        if !(self.outbound_fov_deg > 0.0 && self.outbound_fov_deg < 180.0) {
            return Err(Error::Invariant(format!(
                "outbound fov must lie in (0, 180), got {}",
                self.outbound_fov_deg
            )));
        }
        if !(self.success_threshold_m > 0.0 && self.success_threshold_m.is_finite()) {
            return Err(Error::Invariant(
                "success threshold must be positive".into(),
            ));
        }
        if self.refinement.is_empty() {
            return Err(Error::Invariant("refinement grid is empty".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Invariant("worker count must be positive".into()));
        }
        if self.landmarks == LandmarkSource::Detections && self.inputs.detections.is_none() {
            return Err(Error::Invariant(
                "landmarks from detections need a detections file".into(),
            ));
        }
        Ok(())
    }
}

/// Stoplists per language, built in unless overridden from a directory.
#[derive(Debug, Clone)]
pub struct Stoplists(BTreeMap<Language, Stoplist>);

impl Stoplists {
    pub fn builtin() -> Self {
        Stoplists(
            Language::all()
                .into_iter()
                .map(|l| (l, Stoplist::builtin(l)))
                .collect(),
        )
    }

    /// Loads `stoplist.{code}.txt` for every language present in `dir`,
    /// falling back to the built-in list otherwise.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut out = Self::builtin();
        for l in Language::all() {
            let path = dir.join(format!("stoplist.{}.txt", l.code()));
            if path.exists() {
                out.0.insert(l, Stoplist::load(&path)?);
            }
        }
        Ok(out)
    }

    pub fn get(&self, language: Language) -> &Stoplist {
        &self.0[&language]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionPhrases {
    pub instruction_id: String,
    pub phrases: Vec<LandmarkPhrase>,
}

/// Landmark phrases of every instruction, in corpus order. Instructions
/// without parses get no phrases.
pub fn extract_corpus_phrases(
    corpus: &Corpus,
    parses: &[ParsedSentence],
    stoplists: &Stoplists,
    rules: &ExtractionRules,
) -> Result<Vec<InstructionPhrases>> {
    let grouped = group_by_instruction(parses)?;
    if let Some(id) = grouped.keys().find(|id| corpus.instruction(id).is_none()) {
        return Err(Error::DanglingReference {
            kind: "parse",
            id: id.clone(),
            target: id.clone(),
        });
    }
    par_map(&corpus.instructions, |ins| {
        let phrases = match grouped.get(&ins.id) {
            Some(sentences) => extract_instruction_phrases(
                &ins.id,
                sentences,
                Some(&ins.text),
                stoplists.get(ins.language),
                rules,
            )
            .map_err(|e| e.in_stage("extract-phrases", Some(&ins.id)))?,
            None => {
                log::warn!(
                    "stage=extract-phrases instruction={} msg=\"no parse\"",
                    ins.id
                );
                Vec::new()
            }
        };
        Ok(InstructionPhrases {
            instruction_id: ins.id.clone(),
            phrases,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverLandmark {
    pub order: usize,
    pub text: String,
    /// Index of the best frame in the original trace.
    pub frame_index: usize,
    pub pano_id: String,
    pub heading_deg: f64,
    pub pitch_deg: f64,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    /// Log posterior of this phrase at its best frame.
    pub log_prob: f64,
    /// First and last original frame indices of the decoded run.
    pub run_start: usize,
    pub run_end: usize,
    /// Refinement similarity, present once refined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl SilverLandmark {
    pub fn view(&self) -> PerspectiveSpec {
        PerspectiveSpec::new(
            self.heading_deg,
            self.pitch_deg,
            self.hfov_deg,
            self.vfov_deg,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverRecord {
    pub instruction_id: String,
    /// Frames left after dropping stationary ones.
    pub num_frames: usize,
    pub landmarks: Vec<SilverLandmark>,
}

/// Aligns each instruction's phrases with its subsampled pose trace.
pub fn align_corpus(
    corpus: &Corpus,
    phrases: &[InstructionPhrases],
    provider: &dyn EmbeddingProvider,
    heads: &ProjectionHeads,
    cfg: &AlignmentConfig,
    thresholds: &StationaryThresholds,
) -> Result<Vec<SilverRecord>> {
    cfg.validate()?;
    par_map(phrases, |ip| {
        align_instruction(corpus, ip, provider, heads, cfg, thresholds)
            .map_err(|e| e.in_stage("align", Some(&ip.instruction_id)))
    })
}

fn align_instruction(
    corpus: &Corpus,
    ip: &InstructionPhrases,
    provider: &dyn EmbeddingProvider,
    heads: &ProjectionHeads,
    cfg: &AlignmentConfig,
    thresholds: &StationaryThresholds,
) -> Result<SilverRecord> {
    let trace = corpus
        .trace(&ip.instruction_id)
        .ok_or_else(|| Error::DanglingReference {
            kind: "phrases",
            id: ip.instruction_id.clone(),
            target: "trace".into(),
        })?;
    let (kept, indices) = subsample_with_indices(trace, thresholds);
    let mut record = SilverRecord {
        instruction_id: ip.instruction_id.clone(),
        num_frames: kept.frames.len(),
        landmarks: Vec::new(),
    };
    if ip.phrases.is_empty() {
        return Ok(record);
    }
    let logits = build_logit_matrix(&ip.phrases, &kept.frames, provider, heads, cfg)?;
    let result = decode_alignment(&logits, cfg)?;
    let post = logits.posteriors(cfg);
    for (i, phrase) in ip.phrases.iter().enumerate() {
        let best = result.best_frame[i];
        let (a, b) = result.runs[i];
        let f = &kept.frames[best];
        record.landmarks.push(SilverLandmark {
            order: phrase.order,
            text: phrase.text.clone(),
            frame_index: indices[best],
            pano_id: f.pano_id.clone(),
            heading_deg: round_output(f.heading_deg),
            pitch_deg: round_output(f.pitch_deg),
            hfov_deg: round_output(f.hfov_deg),
            vfov_deg: round_output(f.vfov_deg),
            log_prob: round_output(post.label(i, best)),
            run_start: indices[a],
            run_end: indices[b],
            score: None,
        });
    }
    Ok(record)
}

/// Replaces each silver view by the best-matching nearby view.
pub fn refine_corpus(
    silver: &[SilverRecord],
    provider: &dyn EmbeddingProvider,
    heads: &ProjectionHeads,
    grid: &RefinementGrid,
) -> Result<Vec<SilverRecord>> {
    par_map(silver, |rec| {
        let mut out = rec.clone();
        for lm in &mut out.landmarks {
            let best = refine_landmark(&lm.view(), &lm.pano_id, &lm.text, provider, heads, grid)
                .map_err(|e| e.in_stage("refine", Some(&rec.instruction_id)))?;
            let v = round_view(&best.view);
            lm.heading_deg = v.heading_deg;
            lm.pitch_deg = v.pitch_deg;
            lm.hfov_deg = v.hfov_deg;
            lm.vfov_deg = v.vfov_deg;
            lm.score = Some(round_output(best.score));
        }
        Ok(out)
    })
}

pub fn silver_route_landmarks(record: &SilverRecord) -> Vec<RouteLandmark> {
    record
        .landmarks
        .iter()
        .map(|l| RouteLandmark {
            pano_id: l.pano_id.clone(),
            view: l.view(),
            kind: LandmarkKind::Silver,
            phrase: Some(l.text.clone()),
            score: l.score,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRecord {
    pub instruction_id: String,
    pub detections: Vec<PooledDetection>,
}

/// Pools detections along every instruction's path.
pub fn pool_corpus(
    corpus: &Corpus,
    detections: &[Detection],
    ratio: f64,
    rank_offset: usize,
) -> Result<Vec<PooledRecord>> {
    for d in detections {
        d.validate()?;
    }
    par_map(&corpus.instructions, |ins| {
        Ok(PooledRecord {
            instruction_id: ins.id.clone(),
            detections: pool_detections(detections, &ins.path, ratio, rank_offset)
                .map_err(|e| e.in_stage("pool-detections", Some(&ins.id)))?,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub instruction_id: String,
    pub landmarks: Vec<RouteLandmark>,
}

pub fn silver_landmark_sets(silver: &[SilverRecord]) -> Vec<LandmarkSet> {
    silver
        .iter()
        .map(|r| LandmarkSet {
            instruction_id: r.instruction_id.clone(),
            landmarks: silver_route_landmarks(r),
        })
        .collect()
}

pub fn pooled_landmark_sets(pooled: &[PooledRecord]) -> Result<Vec<LandmarkSet>> {
    pooled
        .iter()
        .map(|r| {
            let mut landmarks = detections_to_landmarks(&r.detections)
                .map_err(|e| e.in_stage("pool-detections", Some(&r.instruction_id)))?;
            for l in &mut landmarks {
                l.view = round_view(&l.view);
            }
            Ok(LandmarkSet {
                instruction_id: r.instruction_id.clone(),
                landmarks,
            })
        })
        .collect()
}

/// Adds outbound views, removes near-duplicates and encodes a template per
/// instruction.
pub fn encode_corpus(
    corpus: &Corpus,
    sets: &[LandmarkSet],
    mode: TemplateMode,
    outbound_fov_deg: f64,
) -> Result<(Vec<LandmarkSet>, Vec<RouteTemplate>)> {
    let done = par_map(sets, |set| {
        let ins =
            corpus
                .instruction(&set.instruction_id)
                .ok_or_else(|| Error::DanglingReference {
                    kind: "landmarks",
                    id: set.instruction_id.clone(),
                    target: set.instruction_id.clone(),
                })?;
        let stage = |e: Error| e.in_stage("encode-template", Some(&ins.id));
        let ctx = PathContext::from_graph(&ins.path, &corpus.graph, None).map_err(stage)?;
        let mut augmented = add_outbound_landmarks(&set.landmarks, &ctx, outbound_fov_deg);
        for l in &mut augmented {
            l.view = round_view(&l.view);
        }
        let kept = dedup_route_landmarks(&augmented);
        let template = encode_template(&ins.id, &kept, &ctx, ins.language, mode).map_err(stage)?;
        Ok((
            LandmarkSet {
                instruction_id: ins.id.clone(),
                landmarks: kept,
            },
            template,
        ))
    })?;
    Ok(done.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub instruction_id: String,
    pub pano_id: String,
    pub path_index: usize,
    #[serde(flatten)]
    pub example: DetectorExample,
}

/// One detector example per path pano with an outbound direction; targets
/// are the landmarks on that pano.
pub fn prepare_detector_corpus(
    corpus: &Corpus,
    sets: &[LandmarkSet],
    width: f64,
    height: f64,
) -> Result<Vec<DetectorRecord>> {
    let per = par_map(sets, |set| {
        let ins =
            corpus
                .instruction(&set.instruction_id)
                .ok_or_else(|| Error::DanglingReference {
                    kind: "landmarks",
                    id: set.instruction_id.clone(),
                    target: set.instruction_id.clone(),
                })?;
        let stage = |e: Error| e.in_stage("prepare-detector", Some(&ins.id));
        let ctx = PathContext::from_graph(&ins.path, &corpus.graph, None).map_err(stage)?;
        let mut out = Vec::new();
        for (k, pano) in ctx
            .path
            .iter()
            .enumerate()
            .take(ctx.len().saturating_sub(1))
        {
            let views: Vec<PerspectiveSpec> = set
                .landmarks
                .iter()
                .filter(|l| &l.pano_id == pano && l.kind != LandmarkKind::Outbound)
                .map(|l| l.view)
                .collect();
            let mut example = prepare_detector_example(
                &views,
                ctx.inbound_deg(k),
                ctx.outbound_deg[k],
                width,
                height,
            )
            .map_err(stage)?;
            example.rotation_deg = round_output(example.rotation_deg);
            for r in example
                .inbound_marker
                .iter_mut()
                .chain(&mut example.outbound_marker)
                .chain(&mut example.target_boxes)
            {
                r.x0 = round_output(r.x0);
                r.y0 = round_output(r.y0);
                r.x1 = round_output(r.x1);
                r.y1 = round_output(r.y1);
            }
            out.push(DetectorRecord {
                instruction_id: ins.id.clone(),
                pano_id: pano.clone(),
                path_index: k,
                example,
            });
        }
        Ok(out)
    })?;
    Ok(per.into_iter().flatten().collect())
}

/// Scores episodes; word counts come from the episodes or, failing that,
/// from the matching instruction.
pub fn evaluate_corpus(
    episodes: &[Episode],
    graph: &crate::data::NavGraph,
    threshold_m: f64,
    corpus: Option<&Corpus>,
) -> Result<ReportTable> {
    let metrics = evaluate_episodes(episodes, graph, threshold_m)?;
    let counts: Vec<usize> = episodes
        .iter()
        .filter_map(|e| {
            e.word_count.or_else(|| {
                let id = e.instruction_id.as_deref()?;
                corpus?.instruction(id).map(|i| i.word_count())
            })
        })
        .collect();
    let report = corpus_report(&metrics, &counts)?;
    Ok(ReportTable::from(&report))
}

/// File names written by [`run_pipeline`].
pub mod outputs {
    pub const PHRASES: &str = "phrases.jsonl";
    pub const SILVER: &str = "silver.jsonl";
    pub const REFINED: &str = "refined.jsonl";
    pub const POOLED: &str = "pooled.jsonl";
    pub const LANDMARKS: &str = "landmarks.jsonl";
    pub const TEMPLATES: &str = "templates.jsonl";
    pub const REPORT: &str = "report.json";
}

pub fn load_heads(path: Option<&Path>, dim: usize) -> Result<ProjectionHeads> {
    match path {
        Some(p) => {
            let heads = ProjectionHeads::load(p)?;
            if heads.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: heads.dim(),
                });
            }
            Ok(heads)
        }
        None => Ok(ProjectionHeads::identity(dim)),
    }
}

pub fn load_parses(path: &Path) -> Result<Vec<ParsedSentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conllu(&text)
}

/// Runs every stage and writes its output under `output_dir`; returns the
/// written paths in stage order.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    #[cfg(feature = "parallel")]
    if let Some(n) = cfg.workers {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Invariant(format!("cannot start worker pool: {e}")))?;
        return pool.install(|| run_stages(cfg));
    }
    run_stages(cfg)
}

fn run_stages(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let inputs = &cfg.inputs;
    let out = |name: &str| cfg.output_dir.join(name);
    let mut written = Vec::new();
    let corpus = load_corpus(&inputs.instructions, &inputs.traces, &inputs.graph)
        .map_err(|e| e.in_stage("load", None))?;
    log::info!(
        "stage=load instructions={} traces={}",
        corpus.instructions.len(),
        corpus.traces.len()
    );

    let parses = load_parses(&inputs.parses).map_err(|e| e.in_stage("extract-phrases", None))?;
    let stoplists = match &inputs.stoplists {
        Some(dir) => Stoplists::load_dir(dir)?,
        None => Stoplists::builtin(),
    };
    let phrases =
        extract_corpus_phrases(&corpus, &parses, &stoplists, &ExtractionRules::default())?;
    write_jsonl(out(outputs::PHRASES), &phrases)?;
    written.push(out(outputs::PHRASES));

    let provider = cfg
        .provider
        .build(cfg.seed)
        .map_err(|e| e.in_stage("align", None))?;
    let heads = load_heads(inputs.heads.as_deref(), provider.dim())
        .map_err(|e| e.in_stage("align", None))?;
    let silver = align_corpus(
        &corpus,
        &phrases,
        provider.as_ref(),
        &heads,
        &cfg.alignment,
        &cfg.stationary,
    )?;
    write_jsonl(out(outputs::SILVER), &silver)?;
    written.push(out(outputs::SILVER));

    let refined = refine_corpus(&silver, provider.as_ref(), &heads, &cfg.refinement)?;
    write_jsonl(out(outputs::REFINED), &refined)?;
    written.push(out(outputs::REFINED));

    let sets = match cfg.landmarks {
        LandmarkSource::Silver => silver_landmark_sets(&refined),
        LandmarkSource::Detections => {
            let path = inputs.detections.as_ref().expect("validated above");
            let detections: Vec<Detection> =
                read_jsonl(path).map_err(|e| e.in_stage("pool-detections", None))?;
            let pooled = pool_corpus(&corpus, &detections, cfg.ratio, cfg.rank_offset)?;
            write_jsonl(out(outputs::POOLED), &pooled)?;
            written.push(out(outputs::POOLED));
            pooled_landmark_sets(&pooled)?
        }
    };

    let (kept, templates) = encode_corpus(&corpus, &sets, cfg.template_mode, cfg.outbound_fov_deg)?;
    write_jsonl(out(outputs::LANDMARKS), &kept)?;
    written.push(out(outputs::LANDMARKS));
    write_jsonl(out(outputs::TEMPLATES), &templates)?;
    written.push(out(outputs::TEMPLATES));

    if let Some(path) = &inputs.episodes {
        let episodes: Vec<Episode> = read_jsonl(path).map_err(|e| e.in_stage("evaluate", None))?;
        let report = evaluate_corpus(
            &episodes,
            &corpus.graph,
            cfg.success_threshold_m,
            Some(&corpus),
        )?;
        write_json(out(outputs::REPORT), &report)?;
        written.push(out(outputs::REPORT));
    }
    for p in &written {
        log::info!("stage=write path={}", p.display());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_rounding() {
        assert_eq!(round_output(0.1234564), 0.123456);
        assert_eq!(round_output(-1e-9), 0.0);
        assert!(round_output(-1e-9).is_sign_positive());
        assert!(round_output(f64::NEG_INFINITY).is_infinite());
    }

    #[test]
    fn config_defaults_and_validation() {
        let json = r#"{"inputs":{"instructions":"i.jsonl","traces":"t.jsonl","graph":"g.json","parses":"p.conllu"},"output_dir":"out"}"#;
        let cfg: PipelineConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.ratio, 1.0);
        assert_eq!(cfg.outbound_fov_deg, 60.0);
        assert_eq!(cfg.success_threshold_m, 3.0);
        assert_eq!(cfg.alignment, AlignmentConfig::default());
        assert_eq!(cfg.provider, ProviderConfig::default());
        cfg.validate().unwrap();

        let bad = PipelineConfig {
            ratio: 0.0,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            landmarks: LandmarkSource::Detections,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(
            &json.replace("\"output_dir\"", "\"typo\":1,\"output_dir\"")
        )
        .is_err());
    }
}
