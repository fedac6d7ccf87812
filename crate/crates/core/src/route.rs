//! Route context, detection pooling and generator input templates.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::angles::{bearing, wrap_360};
use crate::data::{Detection, Language, NavGraph, DETECTION_HEIGHT, DETECTION_WIDTH};
use crate::embeddings::view_key;
use crate::error::{Error, Result};
use crate::geometry::{bbox_to_perspective, dedup_indices, EquirectBBox, PerspectiveSpec};

pub const BIN_WIDTH_DEG: f64 = 30.0;
pub const BIN_COUNT: u8 = 12;
/// Detections kept per pano before pooling.
pub const PER_PANO_CAP: usize = 3;
pub const DEFAULT_OUTBOUND_FOV: f64 = 60.0;

pub const ORIENTATION_PHRASES: [&str; 12] = [
    "ahead is",
    "slight right is",
    "right is",
    "hard right is",
    "behind to the right is",
    "behind slight right is",
    "behind is",
    "behind slight left is",
    "behind to the left is",
    "hard left is",
    "left is",
    "slight left is",
];

pub const ACTION_PHRASES: [&str; 12] = [
    "go straight",
    "go slight right",
    "go right",
    "go hard right",
    "go behind right",
    "turn around right",
    "turn 180",
    "turn around left",
    "go behind left",
    "go hard left",
    "go left",
    "go slight left",
];

/// Twelve 30° bins with bin 0 centred on straight ahead.
pub fn discretize_angle(angle_deg: f64) -> u8 {
    let shifted = wrap_360(angle_deg + BIN_WIDTH_DEG / 2.0);
    ((shifted / BIN_WIDTH_DEG).floor() as u8).min(BIN_COUNT - 1)
}

/// Centre angle of a bin.
pub fn bin_center(bin: u8) -> f64 {
    bin as f64 * BIN_WIDTH_DEG
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseTables {
    pub orientation: Vec<String>,
    pub action: Vec<String>,
}

impl Default for PhraseTables {
    fn default() -> Self {
        PhraseTables {
            orientation: ORIENTATION_PHRASES.iter().map(|s| s.to_string()).collect(),
            action: ACTION_PHRASES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PhraseTables {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let tables: PhraseTables = crate::data::read_json(path)?;
        if tables.orientation.len() != BIN_COUNT as usize
            || tables.action.len() != BIN_COUNT as usize
        {
            return Err(Error::Invariant(
                "phrase tables need exactly 12 entries each".into(),
            ));
        }
        Ok(tables)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathContext {
    pub path: Vec<String>,
    pub positions: Vec<[f64; 3]>,
    pub initial_heading_deg: f64,
    /// Bearing from pano `k` to pano `k+1`; one shorter than the path.
    pub outbound_deg: Vec<f64>,
}

impl PathContext {
    pub fn from_graph(
        path: &[String],
        graph: &NavGraph,
        initial_heading_deg: Option<f64>,
    ) -> Result<Self> {
        if path.is_empty() {
            return Err(Error::EmptyInput("path"));
        }
        let positions = path
            .iter()
            .map(|p| graph.position(p))
            .collect::<Result<Vec<_>>>()?;
        let outbound_deg: Vec<f64> = positions.windows(2).map(|w| bearing(w[0], w[1])).collect();
        let initial = initial_heading_deg
            .map(wrap_360)
            .or_else(|| outbound_deg.first().copied())
            .unwrap_or(0.0);
        Ok(PathContext {
            path: path.to_vec(),
            positions,
            initial_heading_deg: initial,
            outbound_deg,
        })
    }

    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }

    /// Heading of arrival at pano `k`, i.e. the previous step's outbound.
    pub fn inbound_deg(&self, k: usize) -> Option<f64> {
        (k > 0).then(|| self.outbound_deg[k - 1])
    }

    pub fn index_of(&self, pano: &str) -> Option<usize> {
        self.path.iter().position(|p| p == pano)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkKind {
    Detected,
    Silver,
    Outbound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteLandmark {
    pub pano_id: String,
    pub view: PerspectiveSpec,
    pub kind: LandmarkKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RouteLandmark {
    pub fn embedding_key(&self) -> String {
        view_key(&self.pano_id, &self.view)
    }
}

/// Detection box as an equirectangular box on the 512×256 detector image.
pub fn detection_bbox(det: &Detection) -> EquirectBBox {
    EquirectBBox {
        width: DETECTION_WIDTH,
        height: DETECTION_HEIGHT,
        x0: det.bbox.x0,
        y0: det.bbox.y0,
        x1: det.bbox.x1,
        y1: det.bbox.y1,
        wraps: det.bbox.x1 < det.bbox.x0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledDetection {
    pub path_index: usize,
    pub detection: Detection,
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Top three detections per path pano, merged, cut to `round(ratio·T)` by
/// score after skipping `rank_offset` entries, then ordered by path position
/// and score.
pub fn pool_detections(
    detections: &[Detection],
    path: &[String],
    ratio: f64,
    rank_offset: usize,
) -> Result<Vec<PooledDetection>> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Invariant(format!(
            "pooling ratio must be positive, got {ratio}"
        )));
    }
    let mut pool: Vec<(usize, usize, &Detection)> = Vec::new();
    for (k, pano) in path.iter().enumerate() {
        if path[..k].contains(pano) {
            continue;
        }
        let mut mine: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .filter(|(_, d)| &d.pano_id == pano)
            .collect();
        mine.sort_by(|a, b| by_score_desc(a.1.score, b.1.score).then(a.0.cmp(&b.0)));
        pool.extend(mine.into_iter().take(PER_PANO_CAP).map(|(i, d)| (k, i, d)));
    }
    pool.sort_by(|a, b| {
        by_score_desc(a.2.score, b.2.score)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let want = (ratio * path.len() as f64).round() as usize;
    let mut picked: Vec<(usize, usize, &Detection)> =
        pool.into_iter().skip(rank_offset).take(want).collect();
    picked.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(by_score_desc(a.2.score, b.2.score))
            .then(a.1.cmp(&b.1))
    });
    Ok(picked
        .into_iter()
        .map(|(k, _, d)| PooledDetection {
            path_index: k,
            detection: d.clone(),
        })
        .collect())
}

pub fn detections_to_landmarks(pooled: &[PooledDetection]) -> Result<Vec<RouteLandmark>> {
    pooled
        .iter()
        .map(|p| {
            Ok(RouteLandmark {
                pano_id: p.detection.pano_id.clone(),
                view: bbox_to_perspective(&detection_bbox(&p.detection))?,
                kind: LandmarkKind::Detected,
                phrase: None,
                score: Some(p.detection.score),
            })
        })
        .collect()
}

/// Adds a view towards the next pano at every pano but the last. The result
/// is grouped by path position with each outbound view last in its group;
/// landmarks on panos off the path keep their order at the end.
pub fn add_outbound_landmarks(
    selected: &[RouteLandmark],
    ctx: &PathContext,
    fov_deg: f64,
) -> Vec<RouteLandmark> {
    let mut out = Vec::with_capacity(selected.len() + ctx.len());
    for (k, pano) in ctx.path.iter().enumerate() {
        if ctx.path[..k].contains(pano) {
            continue;
        }
        out.extend(selected.iter().filter(|l| &l.pano_id == pano).cloned());
        if let Some(&heading) = ctx.outbound_deg.get(k) {
            out.push(RouteLandmark {
                pano_id: pano.clone(),
                view: PerspectiveSpec::square(heading, 0.0, fov_deg),
                kind: LandmarkKind::Outbound,
                phrase: None,
                score: None,
            });
        }
    }
    out.extend(
        selected
            .iter()
            .filter(|l| ctx.index_of(&l.pano_id).is_none())
            .cloned(),
    );
    out
}

/// Drops landmarks within 5° of an earlier kept landmark on the same pano.
pub fn dedup_route_landmarks(landmarks: &[RouteLandmark]) -> Vec<RouteLandmark> {
    dedup_indices(landmarks.iter().map(|l| (l.pano_id.as_str(), &l.view)))
        .into_iter()
        .map(|k| landmarks[k].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateMode {
    /// Landmarks are referenced by image-embedding key.
    Image,
    /// Silver landmarks are replaced by their phrase text.
    Rewrite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRef {
    pub pano_id: String,
    pub heading_deg: f64,
    pub pitch_deg: f64,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub kind: LandmarkKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TemplateItem {
    Orientation { bin: u8, landmark: LandmarkRef },
    Action { bin: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTemplate {
    pub instruction_id: String,
    pub language: Language,
    pub mode: TemplateMode,
    pub items: Vec<TemplateItem>,
    pub prompt: String,
}

pub fn prompt_for(language: Language) -> String {
    format!(
        "Translate placeholder template to {}:",
        language.english_name()
    )
}

impl RouteTemplate {
    /// Prompt plus items.
    pub fn item_count(&self) -> usize {
        self.items.len() + 1
    }

    /// Flat text form: prompt, then orientation phrase and landmark
    /// placeholder pairs interleaved with action phrases.
    pub fn render_text(&self, tables: &PhraseTables) -> String {
        let mut parts = vec![self.prompt.clone()];
        for item in &self.items {
            match item {
                TemplateItem::Orientation { bin, landmark } => {
                    parts.push(tables.orientation[*bin as usize].clone());
                    parts.push(match (&landmark.phrase, &landmark.embedding_key) {
                        (Some(p), _) => p.clone(),
                        (None, Some(k)) => format!("<image:{k}>"),
                        (None, None) => "<image>".into(),
                    });
                }
                TemplateItem::Action { bin } => parts.push(tables.action[*bin as usize].clone()),
            }
        }
        parts.join(" ")
    }
}

/// Encodes landmarks along a path. Within each pano, landmarks keep their
/// input order with outbound views moved last; each is preceded by its
/// orientation bin relative to the current facing. Between panos an action
/// bin gives the turn towards the next pano, and the facing advances by that
/// bin's centre angle.
pub fn encode_template(
    instruction_id: &str,
    landmarks: &[RouteLandmark],
    ctx: &PathContext,
    language: Language,
    mode: TemplateMode,
) -> Result<RouteTemplate> {
    if let Some(l) = landmarks
        .iter()
        .find(|l| ctx.index_of(&l.pano_id).is_none())
    {
        return Err(Error::UnknownPano(l.pano_id.clone()));
    }
    let mut items = Vec::new();
    let mut facing = ctx.initial_heading_deg;
    for (k, pano) in ctx.path.iter().enumerate() {
        if !ctx.path[..k].contains(pano) {
            let here = landmarks.iter().filter(|l| &l.pano_id == pano);
            let ordered = here
                .clone()
                .filter(|l| l.kind != LandmarkKind::Outbound)
                .chain(here.filter(|l| l.kind == LandmarkKind::Outbound));
            for l in ordered {
                let use_phrase = mode == TemplateMode::Rewrite && l.phrase.is_some();
                items.push(TemplateItem::Orientation {
                    bin: discretize_angle(l.view.heading_deg - facing),
                    landmark: LandmarkRef {
                        pano_id: l.pano_id.clone(),
                        heading_deg: l.view.heading_deg,
                        pitch_deg: l.view.pitch_deg,
                        hfov_deg: l.view.hfov_deg,
                        vfov_deg: l.view.vfov_deg,
                        kind: l.kind,
                        embedding_key: (!use_phrase).then(|| l.embedding_key()),
                        phrase: if use_phrase { l.phrase.clone() } else { None },
                    },
                });
            }
        }
        if let Some(&out) = ctx.outbound_deg.get(k) {
            let bin = discretize_angle(out - facing);
            items.push(TemplateItem::Action { bin });
            facing = wrap_360(facing + bin_center(bin));
        }
    }
    Ok(RouteTemplate {
        instruction_id: instruction_id.to_owned(),
        language,
        mode,
        items,
        prompt: prompt_for(language),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PixelBox;
    use std::collections::BTreeMap;

    #[test]
    fn angle_bins() {
        assert_eq!(discretize_angle(0.0), 0);
        assert_eq!(discretize_angle(14.9), 0);
        assert_eq!(discretize_angle(15.0), 1);
        assert_eq!(discretize_angle(-15.0), 0);
        assert_eq!(discretize_angle(-15.1), 11);
        assert_eq!(discretize_angle(90.0), 3);
        assert_eq!(discretize_angle(180.0), 6);
        assert_eq!(discretize_angle(720.0), 0);
        assert_eq!(ACTION_PHRASES[6], "turn 180");
        assert_eq!(ORIENTATION_PHRASES[0], "ahead is");
    }

    fn det(pano: &str, score: f64) -> Detection {
        Detection {
            pano_id: pano.into(),
            bbox: PixelBox {
                x0: 100.0,
                y0: 100.0,
                x1: 140.0,
                y1: 140.0,
            },
            score,
        }
    }

    fn path(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn per_pano_cap() {
        let dets: Vec<_> = [0.9, 0.8, 0.7, 0.6, 0.5]
            .iter()
            .map(|&s| det("a", s))
            .collect();
        let out = pool_detections(&dets, &path(&["a", "b", "c", "d"]), 1.0, 0).unwrap();
        let scores: Vec<f64> = out.iter().map(|p| p.detection.score).collect();
        assert_eq!(scores, [0.9, 0.8, 0.7]);
    }

    #[test]
    fn pooling_orders_by_path_then_score() {
        let dets = vec![det("b", 0.9), det("a", 0.2), det("a", 0.4), det("x", 1.0)];
        let out = pool_detections(&dets, &path(&["a", "b"]), 1.0, 0).unwrap();
        let got: Vec<(&str, f64)> = out
            .iter()
            .map(|p| (p.detection.pano_id.as_str(), p.detection.score))
            .collect();
        assert_eq!(got, [("a", 0.4), ("b", 0.9)]);
        let shifted = pool_detections(&dets, &path(&["a", "b"]), 1.0, 1).unwrap();
        let got: Vec<f64> = shifted.iter().map(|p| p.detection.score).collect();
        assert_eq!(got, [0.4, 0.2]);
        assert!(pool_detections(&dets, &path(&["a"]), 0.0, 0).is_err());
    }

    fn graph(points: &[(&str, [f64; 3])]) -> NavGraph {
        let panos: BTreeMap<String, [f64; 3]> =
            points.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let edges = points
            .windows(2)
            .map(|w| (w[0].0.to_string(), w[1].0.to_string()))
            .collect();
        NavGraph { panos, edges }
    }

    #[test]
    fn outbound_views() {
        let g = graph(&[
            ("a", [0.0, 0.0, 0.0]),
            ("b", [0.0, 3.0, 0.0]),
            ("c", [3.0, 3.0, 0.0]),
        ]);
        let ctx = PathContext::from_graph(&path(&["a", "b", "c"]), &g, None).unwrap();
        let out = add_outbound_landmarks(&[], &ctx, DEFAULT_OUTBOUND_FOV);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|l| l.kind == LandmarkKind::Outbound));
        assert!((out[0].view.heading_deg - 0.0).abs() < 1e-12);
        assert!((out[1].view.heading_deg - 90.0).abs() < 1e-12);
        assert_eq!(ctx.inbound_deg(2), Some(ctx.outbound_deg[1]));
        assert_eq!(ctx.inbound_deg(0), None);
    }

    #[test]
    fn single_pano_template() {
        let g = graph(&[("a", [0.0, 0.0, 0.0])]);
        let ctx = PathContext::from_graph(&path(&["a"]), &g, None).unwrap();
        let lm = RouteLandmark {
            pano_id: "a".into(),
            view: PerspectiveSpec::square(0.0, 0.0, 60.0),
            kind: LandmarkKind::Detected,
            phrase: None,
            score: Some(0.5),
        };
        let t = encode_template("i", &[lm], &ctx, Language::En, TemplateMode::Image).unwrap();
        assert_eq!(t.item_count(), 2);
        let text = t.render_text(&PhraseTables::default());
        assert!(text
            .starts_with("Translate placeholder template to English: ahead is <image:a@h=0.000"));
    }

    #[test]
    fn right_turn_template() {
        let g = graph(&[("a", [0.0, 0.0, 0.0]), ("b", [3.0, 0.0, 0.0])]);
        let ctx = PathContext::from_graph(&path(&["a", "b"]), &g, Some(0.0)).unwrap();
        let lm = RouteLandmark {
            pano_id: "a".into(),
            view: PerspectiveSpec::square(90.0, 0.0, 60.0),
            kind: LandmarkKind::Silver,
            phrase: Some("sofa".into()),
            score: None,
        };
        let t = encode_template(
            "i",
            std::slice::from_ref(&lm),
            &ctx,
            Language::Hi,
            TemplateMode::Rewrite,
        )
        .unwrap();
        assert_eq!(t.prompt, "Translate placeholder template to Hindi:");
        match &t.items[0] {
            TemplateItem::Orientation { bin, landmark } => {
                assert_eq!(*bin, 3);
                assert_eq!(landmark.phrase.as_deref(), Some("sofa"));
                assert!(landmark.embedding_key.is_none());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.items[1], TemplateItem::Action { bin: 3 });

        let stranger = RouteLandmark {
            pano_id: "zz".into(),
            ..lm
        };
        assert!(matches!(
            encode_template("i", &[stranger], &ctx, Language::En, TemplateMode::Image),
            Err(Error::UnknownPano(_))
        ));
    }

    #[test]
    fn template_json_shape() {
        let item = TemplateItem::Action { bin: 4 };
        assert_eq!(
            serde_json::to_string(&item).unwrap(),
            r#"{"kind":"action","bin":4}"#
        );
    }
}
