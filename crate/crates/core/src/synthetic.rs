//! Synthetic worlds: a scene-aware embedding provider, a small navigation
//! corpus with parses, traces and detections, and constructed corpora for
//! exercising the timestamp bias and head finetuning.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    alignment_precision, decode_alignment, frame_key, logits_from_embeddings, AlignmentConfig,
    TrainingExample,
};
use crate::angles::{circular_distance, wrap_360};
use crate::data::{
    Detection, Instruction, Language, NavGraph, PixelBox, PoseFrame, PoseTrace, Token,
    DETECTION_HEIGHT, DETECTION_WIDTH,
};
use crate::embeddings::{
    normalize_in_place, parse_view_key, EmbeddingProvider, Modality, ProjectionHeads,
    SyntheticProvider,
};
use crate::error::{Error, Result};
use crate::geometry::{perspective_to_bbox, PerspectiveSpec, DEFAULT_EDGE_SAMPLES};
use crate::metrics::Episode;
use crate::phrases::{ParsedSentence, ParsedToken};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub heading_deg: f64,
    pub pitch_deg: f64,
    /// Angular size of the object.
    pub size_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub panos: BTreeMap<String, Vec<SceneObject>>,
}

/// How strongly `obj` shows up in `view`: high when the object is centred
/// and roughly fills the field of view.
pub fn object_visibility(obj: &SceneObject, view: &PerspectiveSpec) -> f64 {
    let dh = circular_distance(obj.heading_deg, view.heading_deg) / (view.hfov_deg / 2.0);
    let dp = (obj.pitch_deg - view.pitch_deg) / (view.vfov_deg / 2.0);
    let centred = (-2.0 * (dh * dh + dp * dp)).exp();
    let fov = (view.hfov_deg + view.vfov_deg) / 2.0;
    let scale = (fov / obj.size_deg).ln();
    centred * (-scale * scale).exp()
}

/// Text embeddings are the base provider's, keyed by lowercased text. The
/// image embedding of a view key mixes the text embeddings of the objects
/// it sees, weighted by visibility, with key-specific noise; unknown panos
/// and non-view keys fall back to pure noise.
#[derive(Debug, Clone)]
pub struct SceneProvider {
    pub base: SyntheticProvider,
    pub scene: Scene,
    /// Norm of the noise component.
    pub noise: f64,
}

pub const DEFAULT_SCENE_NOISE: f64 = 0.5;

impl SceneProvider {
    pub fn new(dim: usize, seed: u64, scene: Scene) -> Self {
        SceneProvider {
            base: SyntheticProvider::new(dim, seed),
            scene,
            noise: DEFAULT_SCENE_NOISE,
        }
    }
}

impl EmbeddingProvider for SceneProvider {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn embed(&self, modality: Modality, key: &str) -> Result<Vec<f64>> {
        match modality {
            Modality::Text => self.base.embed(Modality::Text, &key.to_lowercase()),
            Modality::Image => {
                let Some(objects) = parse_view_key(key)
                    .and_then(|(pano, view)| self.scene.panos.get(&pano).map(|objs| (objs, view)))
                else {
                    return self.base.embed(Modality::Image, key);
                };
                let (objects, view) = objects;
                let dim = self.base.dim();
                let scale = self.noise / (dim as f64).sqrt();
                let mut v: Vec<f64> = self
                    .base
                    .gaussian(Modality::Image, key)
                    .iter()
                    .map(|x| x * scale)
                    .collect();
                for obj in objects {
                    let w = object_visibility(obj, &view);
                    if w > 1e-9 {
                        let t = self.base.embed(Modality::Text, &obj.label.to_lowercase())?;
                        for (a, b) in v.iter_mut().zip(&t) {
                            *a += w * b;
                        }
                    }
                }
                normalize_in_place(&mut v).ok_or(Error::DegenerateProjection)?;
                Ok(v)
            }
        }
    }
}

/// Landmark vocabulary: each entry is a space-separated phrase whose last
/// word is the head noun; earlier words are adjectives or noun compounds.
pub const VOCABULARY: &[(&str, &[&str])] = &[
    ("chair", &[]),
    ("brown chair", &["ADJ"]),
    ("sofa", &[]),
    ("commode", &[]),
    ("lamp", &[]),
    ("painting", &[]),
    ("wooden table", &["ADJ"]),
    ("plant", &[]),
    ("mirror", &[]),
    ("bed", &[]),
    ("foot mat", &["NOUN"]),
    ("fireplace", &[]),
    ("bookshelf", &[]),
    ("staircase", &[]),
    ("glass door", &["NOUN"]),
    ("white cabinet", &["ADJ"]),
];

const WORD_GAP_S: f64 = 0.3;
const FRAME_GAP_S: f64 = 0.5;
const VIEW_FOV: f64 = 60.0;
const GRID_SIDE: usize = 5;
const GRID_SPACING_M: f64 = 3.0;

/// Nearest multiple of `step` (a power of ten), as the double closest to
/// its decimal form.
fn round_to(x: f64, step: f64) -> f64 {
    let per_unit = (1.0 / step).round();
    (x * per_unit).round() / per_unit
}

struct Word {
    text: String,
    upos: &'static str,
    head: usize,
    deprel: &'static str,
}

fn word(text: &str, upos: &'static str, head: usize, deprel: &'static str) -> Word {
    Word {
        text: text.to_owned(),
        upos,
        head,
        deprel,
    }
}

/// Words of a landmark noun phrase attached to `governor` with `rel`,
/// starting at sentence position `first`; returns the words and the head
/// noun's position.
fn noun_phrase(
    label: &str,
    det: Option<&str>,
    first: usize,
    governor: usize,
    rel: &'static str,
) -> (Vec<Word>, usize) {
    let modifiers = VOCABULARY
        .iter()
        .find(|(l, _)| *l == label)
        .map(|(_, m)| *m)
        .unwrap_or(&[]);
    let parts: Vec<&str> = label.split(' ').collect();
    let offset = usize::from(det.is_some());
    let head = first + offset + parts.len() - 1;
    let mut out = Vec::new();
    if let Some(d) = det {
        out.push(word(d, "DET", head, "det"));
    }
    for (k, p) in parts.iter().enumerate() {
        if k + 1 == parts.len() {
            out.push(word(p, "NOUN", governor, rel));
        } else {
            let (upos, rel) = match modifiers.get(k).copied() {
                Some("NOUN") => ("NOUN", "compound"),
                _ => ("ADJ", "amod"),
            };
            out.push(word(p, upos, head, rel));
        }
    }
    (out, head)
}

/// One sentence mentioning `label`; returns words and the head noun's
/// 1-based position.
fn landmark_sentence(label: &str, style: usize) -> (Vec<Word>, usize) {
    match style % 3 {
        0 => {
            let mut w = vec![
                word("walk", "VERB", 0, "root"),
                word("towards", "ADP", 0, "case"),
            ];
            let (np, head) = noun_phrase(label, Some("the"), 3, 1, "obl");
            w[1].head = head;
            w.extend(np);
            w.push(word(".", "PUNCT", 1, "punct"));
            (w, head)
        }
        1 => {
            let mut w = vec![
                word("turn", "VERB", 0, "root"),
                word("left", "ADV", 1, "advmod"),
                word("at", "ADP", 0, "case"),
            ];
            let (np, head) = noun_phrase(label, Some("the"), 4, 1, "obl");
            w[2].head = head;
            w.extend(np);
            w.push(word(".", "PUNCT", 1, "punct"));
            (w, head)
        }
        _ => {
            let mut w = vec![
                word("you", "PRON", 3, "nsubj"),
                word("will", "AUX", 3, "aux"),
                word("see", "VERB", 0, "root"),
            ];
            let (np, head) = noun_phrase(label, Some("a"), 4, 3, "obj");
            w.extend(np);
            let right = head + 3;
            w.push(word("on", "ADP", right, "case"));
            w.push(word("your", "PRON", right, "nmod:poss"));
            w.push(word("right", "NOUN", 3, "obl"));
            w.push(word(".", "PUNCT", 3, "punct"));
            (w, head)
        }
    }
}

fn closing_sentence() -> Vec<Word> {
    vec![
        word("stop", "VERB", 0, "root"),
        word("at", "ADP", 4, "case"),
        word("the", "DET", 4, "det"),
        word("end", "NOUN", 1, "obl"),
        word(".", "PUNCT", 1, "punct"),
    ]
}

/// Accumulates instruction text, timestamped tokens and parses.
#[derive(Default)]
struct TextBuilder {
    text: String,
    tokens: Vec<Token>,
    sentences: Vec<ParsedSentence>,
}

impl TextBuilder {
    /// Appends a sentence whose word `anchor` (1-based) is spoken at
    /// `anchor_time`; returns the time of the last word.
    fn sentence(
        &mut self,
        instruction_id: &str,
        words: &[Word],
        anchor: usize,
        anchor_time: f64,
    ) -> f64 {
        let start = self.tokens.last().map_or(0.0, |t| t.time_s + WORD_GAP_S);
        let first_time = (anchor_time - WORD_GAP_S * (anchor - 1) as f64).max(start);
        let mut parsed = Vec::with_capacity(words.len());
        let mut time = first_time;
        for (k, w) in words.iter().enumerate() {
            if !self.text.is_empty() && w.upos != "PUNCT" {
                self.text.push(' ');
            }
            let text = if k == 0 {
                capitalize(&w.text)
            } else {
                w.text.clone()
            };
            let start_char = self.text.len();
            self.text.push_str(&text);
            let time_s = round_to(time, 0.01);
            self.tokens.push(Token {
                text: text.clone(),
                start_char,
                end_char: self.text.len(),
                time_s,
            });
            parsed.push(ParsedToken {
                index: k + 1,
                text,
                lemma: w.text.clone(),
                upos: w.upos.to_owned(),
                head: w.head,
                deprel: w.deprel.to_owned(),
                start_char,
                end_char: self.text.len(),
                time_s,
            });
            time += WORD_GAP_S;
        }
        self.sentences.push(ParsedSentence {
            instruction_id: Some(instruction_id.to_owned()),
            sent_id: Some(format!("{instruction_id}-{}", self.sentences.len() + 1)),
            tokens: parsed,
        });
        time - WORD_GAP_S
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Inclusive frame ranges where each landmark of an instruction is in view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRanges {
    pub instruction_id: String,
    pub ranges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub instructions: Vec<Instruction>,
    pub traces: Vec<PoseTrace>,
    pub graph: NavGraph,
    pub parses: Vec<ParsedSentence>,
    pub scene: Scene,
    pub detections: Vec<Detection>,
    pub episodes: Vec<Episode>,
    pub gold: Vec<GoldRanges>,
}

fn pano_id(r: usize, c: usize) -> String {
    format!("p{r}{c}")
}

fn grid_world(rng: &mut ChaCha8Rng) -> (NavGraph, Scene) {
    let mut graph = NavGraph::default();
    let mut scene = Scene::default();
    for r in 0..GRID_SIDE {
        for c in 0..GRID_SIDE {
            let id = pano_id(r, c);
            graph.panos.insert(
                id.clone(),
                [c as f64 * GRID_SPACING_M, r as f64 * GRID_SPACING_M, 1.5],
            );
            if c + 1 < GRID_SIDE {
                graph.edges.push((id.clone(), pano_id(r, c + 1)));
            }
            if r + 1 < GRID_SIDE {
                graph.edges.push((id.clone(), pano_id(r + 1, c)));
            }
            let base = rng.random_range(0.0..360.0);
            let objects = (0..3)
                .map(|k| SceneObject {
                    label: VOCABULARY
                        .choose(rng)
                        .expect("vocabulary is non-empty")
                        .0
                        .to_owned(),
                    heading_deg: round_to(
                        wrap_360(base + 120.0 * k as f64 + rng.random_range(-15.0..15.0)),
                        0.1,
                    ),
                    pitch_deg: round_to(rng.random_range(-10.0..10.0), 0.1),
                    size_deg: round_to(rng.random_range(30.0..50.0), 0.1),
                })
                .collect();
            scene.panos.insert(id, objects);
        }
    }
    (graph, scene)
}

fn neighbours(graph: &NavGraph, pano: &str) -> Vec<String> {
    let mut out: Vec<String> = graph
        .edges
        .iter()
        .filter_map(|(a, b)| {
            if a == pano {
                Some(b.clone())
            } else if b == pano {
                Some(a.clone())
            } else {
                None
            }
        })
        .collect();
    out.sort();
    out
}

fn random_path(graph: &NavGraph, rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    let ids: Vec<&String> = graph.panos.keys().collect();
    loop {
        let mut path = vec![(*ids.choose(rng).expect("graph is non-empty")).clone()];
        while path.len() < len {
            let options: Vec<String> = neighbours(graph, path.last().expect("path is non-empty"))
                .into_iter()
                .filter(|n| !path.contains(n))
                .collect();
            match options.choose(rng) {
                Some(n) => path.push(n.clone()),
                None => break,
            }
        }
        if path.len() == len {
            return path;
        }
    }
}

fn frame(time_s: f64, pano: &str, position: [f64; 3], heading: f64, pitch: f64) -> PoseFrame {
    PoseFrame {
        time_s: round_to(time_s, 0.01),
        pano_id: pano.to_owned(),
        heading_deg: round_to(wrap_360(heading), 0.1) % 360.0,
        pitch_deg: round_to(pitch.clamp(-90.0, 90.0), 0.1),
        hfov_deg: VIEW_FOV,
        vfov_deg: VIEW_FOV,
        position,
    }
}

fn agent_path(reference: &[String], graph: &NavGraph, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut agent = reference.to_vec();
    match rng.random_range(0..4) {
        1 if agent.len() > 1 => {
            agent.pop();
        }
        2 => {
            let last = agent.last().expect("path is non-empty").clone();
            if let Some(n) = neighbours(graph, &last).choose(rng) {
                agent.push(n.clone());
                agent.push(last);
            }
        }
        3 if agent.len() > 1 => {
            let before = agent[agent.len() - 2].clone();
            let last = agent.pop().expect("path is non-empty");
            let wrong: Vec<String> = neighbours(graph, &before)
                .into_iter()
                .filter(|n| *n != last && !agent.contains(n))
                .collect();
            agent.push(wrong.choose(rng).cloned().unwrap_or(last));
        }
        _ => {}
    }
    agent
}

/// Generates a small navigation world with `count` English instructions.
/// Each pano on a route is described by one sentence about one of its
/// objects; the trace looks at that object while it is mentioned and
/// includes stationary dwell frames.
pub fn gen_synthetic_corpus(seed: u64, count: usize) -> Result<SyntheticCorpus> {
    if count == 0 {
        return Err(Error::EmptyInput("instruction count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (graph, scene) = grid_world(&mut rng);
    let mut out = SyntheticCorpus {
        instructions: Vec::new(),
        traces: Vec::new(),
        graph: graph.clone(),
        parses: Vec::new(),
        scene: scene.clone(),
        detections: Vec::new(),
        episodes: Vec::new(),
        gold: Vec::new(),
    };
    for n in 0..count {
        let id = format!("syn-{n:03}");
        let len = rng.random_range(3..=5);
        let path = random_path(&graph, &mut rng, len);
        let mut text = TextBuilder::default();
        let mut frames = Vec::new();
        let mut ranges = Vec::new();
        let mut t = 0.0;
        for (k, pano) in path.iter().enumerate() {
            let pos = graph.position(pano)?;
            let objects = &scene.panos[pano];
            let lm = objects
                .choose(&mut rng)
                .expect("every pano has objects")
                .clone();
            for _ in 0..2 {
                let h = lm.heading_deg + 180.0 + rng.random_range(-40.0..40.0);
                frames.push(frame(t, pano, pos, h, 0.0));
                t += FRAME_GAP_S;
            }
            let look_start = frames.len();
            let look_time = t;
            for _ in 0..3 {
                let h = lm.heading_deg + rng.random_range(-4.0..4.0);
                let p = lm.pitch_deg + rng.random_range(-3.0..3.0);
                frames.push(frame(t, pano, pos, h, p));
                t += FRAME_GAP_S;
            }
            ranges.push((look_start, frames.len() - 1));
            let last = frames.last().expect("look frames were pushed").clone();
            for _ in 0..2 {
                frames.push(PoseFrame {
                    time_s: round_to(t, 0.01),
                    ..last.clone()
                });
                t += FRAME_GAP_S;
            }
            let (words, head) = landmark_sentence(&lm.label, rng.random_range(0..3));
            let end = text.sentence(&id, &words, head, look_time + 0.75);
            if let Some(next) = path.get(k + 1) {
                let out_h = crate::angles::bearing(pos, graph.position(next)?);
                frames.push(frame(
                    t,
                    pano,
                    pos,
                    out_h + rng.random_range(-20.0..20.0),
                    0.0,
                ));
                t += FRAME_GAP_S;
                frames.push(frame(t, pano, pos, out_h, 0.0));
                t += FRAME_GAP_S;
            }
            t = t.max(end + FRAME_GAP_S);
        }
        let closing = closing_sentence();
        text.sentence(&id, &closing, 1, t);
        let instruction = Instruction {
            id: id.clone(),
            language: Language::En,
            text: text.text,
            tokens: text.tokens,
            path: path.clone(),
        };
        out.episodes.push(Episode {
            instruction_id: Some(id.clone()),
            reference_path: path.clone(),
            agent_path: agent_path(&path, &graph, &mut rng),
            word_count: Some(instruction.word_count()),
        });
        out.instructions.push(instruction);
        out.traces.push(PoseTrace {
            instruction_id: id.clone(),
            frames,
        });
        out.parses.extend(text.sentences);
        out.gold.push(GoldRanges {
            instruction_id: id,
            ranges,
        });
    }
    out.detections = scene_detections(&scene, &mut rng)?;
    Ok(out)
}

/// One detection per scene object plus an occasional low-scoring false
/// positive, in the unrotated detector frame.
fn scene_detections(scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (pano, objects) in &scene.panos {
        let mut views: Vec<(PerspectiveSpec, f64)> = objects
            .iter()
            .map(|o| {
                let v = PerspectiveSpec::square(o.heading_deg, o.pitch_deg, o.size_deg);
                (v, round_to(rng.random_range(0.4..0.99), 0.001))
            })
            .collect();
        if rng.random_bool(0.3) {
            let v = PerspectiveSpec::square(round_to(rng.random_range(0.0..360.0), 0.1), 0.0, 25.0);
            views.push((v, round_to(rng.random_range(0.05..0.4), 0.001)));
        }
        for (v, score) in views {
            let b =
                perspective_to_bbox(&v, DETECTION_WIDTH, DETECTION_HEIGHT, DEFAULT_EDGE_SAMPLES)?;
            let x1 = if b.x1 >= DETECTION_WIDTH {
                b.x1 - DETECTION_WIDTH
            } else {
                b.x1
            };
            out.push(Detection {
                pano_id: pano.clone(),
                bbox: PixelBox {
                    x0: round_to(b.x0, 0.01),
                    y0: round_to(b.y0, 0.01),
                    x1: round_to(x1, 0.01),
                    y1: round_to(b.y1, 0.01),
                },
                score,
            });
        }
    }
    Ok(out)
}

/// One item of the ambiguity corpus: phrases with utterance times, the
/// frames of a single-pano trace, and each phrase's gold frame range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityItem {
    pub id: String,
    pub phrases: Vec<String>,
    pub phrase_times: Vec<f64>,
    pub frames: Vec<PoseFrame>,
    pub gold: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityCorpus {
    pub scene: Scene,
    pub items: Vec<AmbiguityItem>,
}

const AMBIGUITY_MENTIONS: usize = 4;
const AMBIGUITY_STRIDE: usize = 8;
const CEILING_PITCH: f64 = 75.0;
const ROOM_OBJECT_SIZE: f64 = 60.0;

/// Knobs of the single-room timed corpora.
#[derive(Debug, Clone, Copy)]
struct RoomShape {
    /// How far off-centre the annotator looks at a named object.
    glance_offset_deg: f64,
    /// Seconds between that glance and naming the object.
    lag_s: f64,
    /// Whether named objects get a same-label twin looked at squarely.
    twins: bool,
}

/// Instructions where some named objects have a same-label twin in the
/// room. The annotator glances at the named object off-centre just before
/// naming it and looks squarely at the twin several seconds away, so
/// similarity alone prefers the twin and only the time of utterance
/// identifies the right view. Between glances the annotator looks up at
/// the ceiling, where nothing is visible.
pub fn gen_ambiguity_corpus(seed: u64, count: usize) -> AmbiguityCorpus {
    gen_room_corpus(
        seed,
        count,
        "amb",
        RoomShape {
            glance_offset_deg: 12.0,
            lag_s: 0.7,
            twins: true,
        },
    )
}

/// Instructions where each named object is looked at squarely while it is
/// named and nothing else in the room shares its label: each phrase
/// embedding is close to its true frame's embedding up to noise.
pub fn gen_separable_corpus(seed: u64, count: usize) -> AmbiguityCorpus {
    gen_room_corpus(
        seed,
        count,
        "sep",
        RoomShape {
            glance_offset_deg: 0.0,
            lag_s: 0.0,
            twins: false,
        },
    )
}

fn gen_room_corpus(seed: u64, count: usize, prefix: &str, shape: RoomShape) -> AmbiguityCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::default();
    let mut items = Vec::new();
    for n in 0..count {
        let id = format!("{prefix}-{n:03}");
        let pano = format!("{prefix}-room{n:03}");
        let mut labels: Vec<&str> = VOCABULARY.iter().map(|(l, _)| *l).collect();
        labels.shuffle(&mut rng);
        let named: Vec<&str> = labels[..AMBIGUITY_MENTIONS].to_vec();
        // Objects sit on distinct 30°-spaced slots at eye level.
        let mut slots: Vec<f64> = (0..12).map(|k| 30.0 * k as f64).collect();
        slots.shuffle(&mut rng);
        let mut objects = Vec::new();
        let mut twins = Vec::new();
        for (i, label) in named.iter().enumerate() {
            objects.push(SceneObject {
                label: label.to_string(),
                heading_deg: slots[2 * i],
                pitch_deg: 0.0,
                size_deg: ROOM_OBJECT_SIZE,
            });
            if shape.twins && (i % 2 == 0 || rng.random_bool(0.5)) {
                let twin = SceneObject {
                    label: label.to_string(),
                    heading_deg: slots[2 * i + 1],
                    pitch_deg: 0.0,
                    size_deg: ROOM_OBJECT_SIZE,
                };
                twins.push((i, twin.clone()));
                objects.push(twin);
            }
        }
        let total = AMBIGUITY_STRIDE * AMBIGUITY_MENTIONS + 2;
        let mut views: Vec<(f64, f64)> = (0..total)
            .map(|_| {
                (
                    round_to(rng.random_range(0.0..360.0), 0.1) % 360.0,
                    CEILING_PITCH,
                )
            })
            .collect();
        let mut gold = Vec::new();
        let mut phrase_times = Vec::new();
        for (i, name) in named.iter().enumerate().take(AMBIGUITY_MENTIONS) {
            let g = 2 + AMBIGUITY_STRIDE * i;
            let named_obj = &objects
                .iter()
                .find(|o| &o.label == name)
                .expect("named object exists");
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            views[g] = (
                wrap_360(named_obj.heading_deg + side * shape.glance_offset_deg),
                0.0,
            );
            gold.push((g, g));
            phrase_times.push(g as f64 + shape.lag_s);
            if let Some((_, twin)) = twins.iter().find(|(k, _)| *k == i) {
                let at = if i % 2 == 0 { g + 4 } else { g - 4 };
                views[at] = (twin.heading_deg, 0.0);
            }
        }
        let frames = views
            .iter()
            .enumerate()
            .map(|(j, (h, p))| frame(j as f64, &pano, [0.0, 0.0, 1.5], *h, *p))
            .collect();
        scene.panos.insert(pano, objects);
        items.push(AmbiguityItem {
            id,
            phrases: named.iter().map(|s| s.to_string()).collect(),
            phrase_times,
            frames,
            gold,
        });
    }
    AmbiguityCorpus { scene, items }
}

/// How the logit matrix is formed when scoring the ambiguity corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogitVariant {
    /// Similarity plus the timestamp bias with weight `lambda`.
    Full { lambda: f64 },
    /// Timestamp bias only; similarity forced to zero.
    BiasOnly,
}

impl AmbiguityItem {
    pub fn training_example(&self, provider: &dyn EmbeddingProvider) -> Result<TrainingExample> {
        let image_keys: Vec<String> = self.frames.iter().map(frame_key).collect();
        TrainingExample::from_keys(
            &self.phrases,
            &image_keys,
            self.phrase_times.clone(),
            self.frames.iter().map(|f| f.time_s).collect(),
            provider,
        )
    }
}

/// Best frame per phrase of every example after projecting through `heads`.
pub fn example_best_frames(
    examples: &[TrainingExample],
    heads: &ProjectionHeads,
    variant: LogitVariant,
) -> Result<Vec<Vec<usize>>> {
    examples
        .iter()
        .map(|ex| {
            let text = crate::alignment::project_rows(&ex.text, &heads.text.weight)?;
            let image = crate::alignment::project_rows(&ex.image, &heads.image.weight)?;
            let (cfg, logits) = match variant {
                LogitVariant::Full { lambda } => {
                    let cfg = AlignmentConfig {
                        lambda,
                        ..Default::default()
                    };
                    let l = logits_from_embeddings(
                        &text,
                        &image,
                        &ex.phrase_times,
                        &ex.frame_times,
                        &cfg,
                    )?;
                    (cfg, l)
                }
                LogitVariant::BiasOnly => {
                    let cfg = AlignmentConfig::default();
                    let mut l = logits_from_embeddings(
                        &text,
                        &image,
                        &ex.phrase_times,
                        &ex.frame_times,
                        &cfg,
                    )?;
                    let sim = text.dot(&image.t());
                    l.values -= &sim;
                    (cfg, l)
                }
            };
            Ok(decode_alignment(&logits, &cfg)?.best_frame)
        })
        .collect()
}

/// Alignment precision (×100) of the ambiguity corpus under a logit variant.
pub fn ambiguity_precision(
    corpus: &AmbiguityCorpus,
    provider: &dyn EmbeddingProvider,
    heads: &ProjectionHeads,
    variant: LogitVariant,
) -> Result<f64> {
    let examples = corpus
        .items
        .iter()
        .map(|it| it.training_example(provider))
        .collect::<Result<Vec<_>>>()?;
    let predicted = example_best_frames(&examples, heads, variant)?;
    let gold: Vec<Vec<(usize, usize)>> = corpus.items.iter().map(|it| it.gold.clone()).collect();
    alignment_precision(&predicted, &gold)
}
