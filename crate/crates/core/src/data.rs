//! Corpus types, their on-disk JSON/JSONL formats and validation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::angles::circular_distance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Hi,
    Te,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Hi => "hi",
            Language::Te => "te",
        }
    }

    pub fn english_name(self) -> &'static str {
        match self {
            Language::En => "English",
            Language::Hi => "Hindi",
            Language::Te => "Telugu",
        }
    }

    pub fn all() -> [Language; 3] {
        [Language::En, Language::Hi, Language::Te]
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(Language::En),
            "hi" => Ok(Language::Hi),
            "te" => Ok(Language::Te),
            other => Err(Error::Invariant(format!("unknown language `{other}`"))),
        }
    }
}

/// A timestamped word. Offsets are byte offsets into the instruction text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub language: Language,
    pub text: String,
    pub tokens: Vec<Token>,
    pub path: Vec<String>,
}

impl Instruction {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Invariant(format!(
                "instruction `{}`: {msg}",
                self.id
            )))
        };
        if self.path.is_empty() {
            return fail("empty path".into());
        }
        let mut prev: Option<&Token> = None;
        for (k, tok) in self.tokens.iter().enumerate() {
            if tok.start_char >= tok.end_char {
                return fail(format!("token {k} has empty span"));
            }
            if tok.end_char > self.text.len()
                || !self.text.is_char_boundary(tok.start_char)
                || !self.text.is_char_boundary(tok.end_char)
            {
                return fail(format!(
                    "token {k} span is not a valid byte range of the text"
                ));
            }
            if !(tok.time_s.is_finite() && tok.time_s >= 0.0) {
                return fail(format!("token {k} has invalid timestamp {}", tok.time_s));
            }
            if let Some(p) = prev {
                if p.end_char > tok.start_char {
                    return fail(format!("token {k} overlaps or precedes its predecessor"));
                }
                if p.time_s > tok.time_s {
                    return fail(format!("token {k} timestamp decreases"));
                }
            }
            prev = Some(tok);
        }
        Ok(())
    }

    /// Whitespace word count.
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub time_s: f64,
    pub pano_id: String,
    pub heading_deg: f64,
    pub pitch_deg: f64,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub position: [f64; 3],
}

impl PoseFrame {
    pub fn validate(&self) -> Result<()> {
        let ok = self.time_s.is_finite()
            && self.time_s >= 0.0
            && (0.0..360.0).contains(&self.heading_deg)
            && (-90.0..=90.0).contains(&self.pitch_deg)
            && self.hfov_deg > 0.0
            && self.hfov_deg <= 360.0
            && self.vfov_deg > 0.0
            && self.vfov_deg <= 180.0
            && self.position.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!(
                "frame at t={} on pano `{}` has out-of-range pose",
                self.time_s, self.pano_id
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrace {
    pub instruction_id: String,
    pub frames: Vec<PoseFrame>,
}

impl PoseTrace {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Invariant(format!(
                "trace for `{}` has no frames",
                self.instruction_id
            )));
        }
        for f in &self.frames {
            f.validate()?;
        }
        if self.frames.windows(2).any(|w| w[0].time_s > w[1].time_s) {
            return Err(Error::Invariant(format!(
                "trace for `{}` has decreasing timestamps",
                self.instruction_id
            )));
        }
        Ok(())
    }
}

/// Navigation graph: pano positions plus undirected edges weighted by
/// Euclidean length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NavGraph {
    pub panos: BTreeMap<String, [f64; 3]>,
    pub edges: Vec<(String, String)>,
}

impl NavGraph {
    pub fn position(&self, pano: &str) -> Result<[f64; 3]> {
        self.panos
            .get(pano)
            .copied()
            .ok_or_else(|| Error::UnknownPano(pano.to_owned()))
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        let (pa, pb) = (self.position(a)?, self.position(b)?);
        Ok(euclidean(pa, pb))
    }

    pub fn validate(&self) -> Result<()> {
        for (a, b) in &self.edges {
            for end in [a, b] {
                if !self.panos.contains_key(end) {
                    return Err(Error::DanglingReference {
                        kind: "edge",
                        id: format!("{a}-{b}"),
                        target: end.clone(),
                    });
                }
            }
            if self.distance(a, b)? <= 0.0 {
                return Err(Error::Invariant(format!("edge {a}-{b} has zero length")));
            }
        }
        if self.panos.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite pano position".into()));
        }
        Ok(())
    }
}

pub fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Axis-aligned box in unpadded equirectangular pixels. `x1 < x0` marks a
/// box crossing the horizontal seam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub pano_id: String,
    pub bbox: PixelBox,
    pub score: f64,
}

/// Image size detections are expressed in.
pub const DETECTION_WIDTH: f64 = 512.0;
pub const DETECTION_HEIGHT: f64 = 256.0;

impl Detection {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        let in_x = |x: f64| (0.0..=DETECTION_WIDTH).contains(&x);
        let ok = (0.0..=1.0).contains(&self.score)
            && in_x(b.x0)
            && in_x(b.x1)
            && b.x0 != b.x1
            && 0.0 <= b.y0
            && b.y0 < b.y1
            && b.y1 <= DETECTION_HEIGHT;
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!(
                "detection on `{}` is out of bounds or has an invalid score",
                self.pano_id
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub instructions: Vec<Instruction>,
    pub traces: Vec<PoseTrace>,
    pub graph: NavGraph,
}

impl Corpus {
    pub fn new(
        instructions: Vec<Instruction>,
        traces: Vec<PoseTrace>,
        graph: NavGraph,
    ) -> Result<Self> {
        if instructions.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        graph.validate()?;
        let mut ids = HashSet::new();
        for ins in &instructions {
            ins.validate()?;
            if !ids.insert(ins.id.as_str()) {
                return Err(Error::Invariant(format!(
                    "duplicate instruction id `{}`",
                    ins.id
                )));
            }
            for pano in &ins.path {
                if !graph.panos.contains_key(pano) {
                    return Err(Error::DanglingReference {
                        kind: "instruction",
                        id: ins.id.clone(),
                        target: pano.clone(),
                    });
                }
            }
        }
        for tr in &traces {
            tr.validate()?;
            if !ids.contains(tr.instruction_id.as_str()) {
                return Err(Error::DanglingReference {
                    kind: "trace",
                    id: tr.instruction_id.clone(),
                    target: tr.instruction_id.clone(),
                });
            }
        }
        Ok(Corpus {
            instructions,
            traces,
            graph,
        })
    }

    pub fn instruction(&self, id: &str) -> Option<&Instruction> {
        self.instructions.iter().find(|i| i.id == id)
    }

    pub fn trace(&self, instruction_id: &str) -> Option<&PoseTrace> {
        self.traces
            .iter()
            .find(|t| t.instruction_id == instruction_id)
    }
}

pub fn load_corpus(
    instructions_path: impl AsRef<Path>,
    traces_path: impl AsRef<Path>,
    graph_path: impl AsRef<Path>,
) -> Result<Corpus> {
    let instructions = read_jsonl(instructions_path)?;
    let traces = read_jsonl(traces_path)?;
    let graph = read_json(graph_path)?;
    Corpus::new(instructions, traces, graph)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                path: path.to_owned(),
                line: k + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Canonical JSONL: one compact object per line, trailing newline.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    write_text(path, &to_jsonl(records))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Thresholds below which consecutive frames count as stationary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryThresholds {
    pub heading_deg: f64,
    pub pitch_deg: f64,
    pub position_m: f64,
}

impl Default for StationaryThresholds {
    fn default() -> Self {
        StationaryThresholds {
            heading_deg: 1.0,
            pitch_deg: 1.0,
            position_m: 0.05,
        }
    }
}

impl StationaryThresholds {
    pub fn is_stationary(&self, from: &PoseFrame, to: &PoseFrame) -> bool {
        circular_distance(from.heading_deg, to.heading_deg) < self.heading_deg
            && (from.pitch_deg - to.pitch_deg).abs() < self.pitch_deg
            && euclidean(from.position, to.position) < self.position_m
    }
}

/// Drops frames where the camera has not moved since the last kept frame.
/// The first frame is always kept.
pub fn subsample_frames(trace: &PoseTrace, thresholds: &StationaryThresholds) -> PoseTrace {
    subsample_with_indices(trace, thresholds).0
}

/// Like [`subsample_frames`], also returning the original index of every
/// kept frame.
pub fn subsample_with_indices(
    trace: &PoseTrace,
    thresholds: &StationaryThresholds,
) -> (PoseTrace, Vec<usize>) {
    let mut kept: Vec<usize> = Vec::new();
    for (j, frame) in trace.frames.iter().enumerate() {
        match kept.last() {
            Some(&last) if thresholds.is_stationary(&trace.frames[last], frame) => {}
            _ => kept.push(j),
        }
    }
    let frames = kept.iter().map(|&j| trace.frames[j].clone()).collect();
    (
        PoseTrace {
            instruction_id: trace.instruction_id.clone(),
            frames,
        },
        kept,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: f64, h: f64) -> PoseFrame {
        PoseFrame {
            time_s: t,
            pano_id: "p".into(),
            heading_deg: h,
            pitch_deg: 0.0,
            hfov_deg: 60.0,
            vfov_deg: 60.0,
            position: [0.0, 0.0, 1.5],
        }
    }

    #[test]
    fn identical_frames_collapse() {
        let trace = PoseTrace {
            instruction_id: "i".into(),
            frames: (0..60).map(|k| frame(k as f64 / 60.0, 12.0)).collect(),
        };
        let out = subsample_frames(&trace, &StationaryThresholds::default());
        assert_eq!(out.frames.len(), 1);
        assert_eq!(out.frames[0], trace.frames[0]);
    }

    #[test]
    fn alternating_headings_survive() {
        let trace = PoseTrace {
            instruction_id: "i".into(),
            frames: (0..20)
                .map(|k| frame(k as f64, if k % 2 == 0 { 0.0 } else { 90.0 }))
                .collect(),
        };
        let out = subsample_frames(&trace, &StationaryThresholds::default());
        assert_eq!(out, trace);
    }

    #[test]
    fn heading_delta_is_circular() {
        let trace = PoseTrace {
            instruction_id: "i".into(),
            frames: vec![frame(0.0, 359.8), frame(0.1, 0.3)],
        };
        assert_eq!(
            subsample_frames(&trace, &StationaryThresholds::default())
                .frames
                .len(),
            1
        );
    }

    #[test]
    fn bad_angles_are_rejected() {
        let mut f = frame(0.0, 360.0);
        assert!(f.validate().is_err());
        f.heading_deg = 10.0;
        f.pitch_deg = 91.0;
        assert!(f.validate().is_err());
        f.pitch_deg = 0.0;
        f.vfov_deg = 180.5;
        assert!(f.validate().is_err());
    }

    #[test]
    fn instruction_invariants() {
        let mut ins = Instruction {
            id: "a".into(),
            language: Language::En,
            text: "go to the chair".into(),
            tokens: vec![
                Token {
                    text: "go".into(),
                    start_char: 0,
                    end_char: 2,
                    time_s: 0.5,
                },
                Token {
                    text: "to".into(),
                    start_char: 3,
                    end_char: 5,
                    time_s: 0.7,
                },
            ],
            path: vec!["p".into()],
        };
        assert!(ins.validate().is_ok());
        ins.tokens[1].time_s = 0.1;
        assert!(ins.validate().is_err());
        ins.tokens[1].time_s = 0.9;
        ins.tokens[1].start_char = 1;
        assert!(ins.validate().is_err());
        ins.tokens[1].start_char = 3;
        ins.path.clear();
        assert!(ins.validate().is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = Corpus::new(vec![], vec![], NavGraph::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"a\":1}\n\nnot json\n";
        let err = parse_jsonl::<serde_json::Value>(text, Path::new("x.jsonl")).unwrap_err();
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }
}
