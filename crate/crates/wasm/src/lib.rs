//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers or a JSON string and returns a JSON
//! string, so the page needs no generated type glue beyond the functions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use landmark_core::alignment::{decode_alignment, logits_from_embeddings, AlignmentConfig};
use landmark_core::data::Language;
use landmark_core::geometry::{
    bbox_to_perspective, perspective_to_bbox, PerspectiveSpec, DEFAULT_EDGE_SAMPLES,
};
use landmark_core::route::{
    add_outbound_landmarks, discretize_angle, encode_template, LandmarkKind, PathContext,
    PhraseTables, RouteLandmark, TemplateMode, DEFAULT_OUTBOUND_FOV,
};

fn to_js<E: std::fmt::Display>(e: E) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn json<T: Serialize>(value: &T) -> Result<String, JsValue> {
    serde_json::to_string(value).map_err(to_js)
}

#[derive(Serialize)]
struct Projection {
    bbox: landmark_core::geometry::EquirectBBox,
    recovered: PerspectiveSpec,
}

/// Equirectangular box of a perspective view, plus the view recovered from
/// that box.
#[wasm_bindgen]
pub fn project_view(
    heading_deg: f64,
    pitch_deg: f64,
    hfov_deg: f64,
    vfov_deg: f64,
    width: f64,
    height: f64,
) -> Result<String, JsValue> {
    let spec = PerspectiveSpec::new(heading_deg, pitch_deg, hfov_deg, vfov_deg);
    let bbox = perspective_to_bbox(&spec, width, height, DEFAULT_EDGE_SAMPLES).map_err(to_js)?;
    let recovered = bbox_to_perspective(&bbox).map_err(to_js)?;
    json(&Projection { bbox, recovered })
}

#[derive(Deserialize)]
struct AlignRequest {
    /// `m × n` phrase/frame similarities, row-major.
    similarity: Vec<Vec<f64>>,
    phrase_times: Vec<f64>,
    frame_times: Vec<f64>,
    lambda: f64,
    blank_logit: f64,
    temperature: f64,
}

#[derive(Serialize)]
struct AlignResponse {
    runs: Vec<(usize, usize)>,
    best_frame: Vec<usize>,
    log_prob: f64,
    /// `(m+1) × n` posteriors; the last row is BLANK.
    posteriors: Vec<Vec<f64>>,
}

/// Forced alignment of a toy similarity matrix under a timestamp bias.
#[wasm_bindgen]
pub fn align(request_json: &str) -> Result<String, JsValue> {
    let req: AlignRequest = serde_json::from_str(request_json).map_err(to_js)?;
    let m = req.similarity.len();
    let n = req.similarity.first().map_or(0, Vec::len);
    if req.similarity.iter().any(|r| r.len() != n) {
        return Err(JsValue::from_str("similarity rows differ in length"));
    }
    // Unit rows against an identity image basis reproduce the similarities.
    let text = Array2::from_shape_fn((m, n), |(i, j)| req.similarity[i][j]);
    let image = Array2::eye(n);
    let cfg = AlignmentConfig {
        lambda: req.lambda,
        blank_logit: req.blank_logit,
        temperature: req.temperature,
    };
    cfg.validate().map_err(to_js)?;
    let logits = logits_from_embeddings(&text, &image, &req.phrase_times, &req.frame_times, &cfg)
        .map_err(to_js)?;
    let result = decode_alignment(&logits, &cfg).map_err(to_js)?;
    let post = logits.posteriors(&cfg).probabilities();
    json(&AlignResponse {
        runs: result.runs,
        best_frame: result.best_frame,
        log_prob: result.log_prob,
        posteriors: post.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

/// Angle bin (0–11) of a relative heading.
#[wasm_bindgen]
pub fn angle_bin(angle_deg: f64) -> u8 {
    discretize_angle(angle_deg)
}

#[derive(Deserialize)]
struct RouteStep {
    /// Bearing towards the next pano; absent on the last step.
    #[serde(default)]
    outbound_deg: Option<f64>,
    #[serde(default)]
    landmarks: Vec<StepLandmark>,
}

#[derive(Deserialize)]
struct StepLandmark {
    label: String,
    heading_deg: f64,
}

#[derive(Deserialize)]
struct RouteRequest {
    initial_heading_deg: f64,
    steps: Vec<RouteStep>,
}

#[derive(Serialize)]
struct RouteResponse {
    text: String,
    template: landmark_core::route::RouteTemplate,
}

/// Template for a hand-written route: each step is a pano with optional
/// named landmarks and the bearing to the next pano.
#[wasm_bindgen]
pub fn encode_route(request_json: &str) -> Result<String, JsValue> {
    let req: RouteRequest = serde_json::from_str(request_json).map_err(to_js)?;
    if req.steps.is_empty() {
        return Err(JsValue::from_str("a route needs at least one step"));
    }
    let path: Vec<String> = (0..req.steps.len()).map(|k| format!("s{k}")).collect();
    let mut outbound_deg = Vec::new();
    for (k, step) in req.steps.iter().enumerate().take(req.steps.len() - 1) {
        outbound_deg.push(
            step.outbound_deg
                .ok_or_else(|| JsValue::from_str(&format!("step {k} needs outbound_deg")))?,
        );
    }
    let ctx = PathContext {
        positions: vec![[0.0; 3]; path.len()],
        path: path.clone(),
        initial_heading_deg: req.initial_heading_deg,
        outbound_deg,
    };
    let selected: Vec<RouteLandmark> = req
        .steps
        .iter()
        .zip(&path)
        .flat_map(|(step, pano)| {
            step.landmarks.iter().map(move |l| RouteLandmark {
                pano_id: pano.clone(),
                view: PerspectiveSpec::square(l.heading_deg, 0.0, 60.0),
                kind: LandmarkKind::Silver,
                phrase: Some(l.label.clone()),
                score: None,
            })
        })
        .collect();
    let landmarks = add_outbound_landmarks(&selected, &ctx, DEFAULT_OUTBOUND_FOV);
    let template = encode_template(
        "demo",
        &landmarks,
        &ctx,
        Language::En,
        TemplateMode::Rewrite,
    )
    .map_err(to_js)?;
    let text = template.render_text(&PhraseTables::default());
    json(&RouteResponse { text, template })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_round_trips() {
        let out: serde_json::Value =
            serde_json::from_str(&project_view(90.0, 0.0, 60.0, 60.0, 512.0, 256.0).unwrap())
                .unwrap();
        let h = out["recovered"]["heading_deg"].as_f64().unwrap();
        assert!((h - 90.0).abs() < 1e-6, "{h}");
    }

    #[test]
    fn alignment_follows_similarity() {
        let req = r#"{"similarity":[[5,0,0],[0,0,5]],"phrase_times":[0,2],"frame_times":[0,1,2],
                      "lambda":1,"blank_logit":0,"temperature":1}"#;
        let out: serde_json::Value = serde_json::from_str(&align(req).unwrap()).unwrap();
        assert_eq!(out["best_frame"], serde_json::json!([0, 2]));
        assert_eq!(out["posteriors"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn route_text_mentions_landmarks() {
        let req = r#"{"initial_heading_deg":0,"steps":[
            {"outbound_deg":90,"landmarks":[{"label":"sofa","heading_deg":0}]},
            {"landmarks":[{"label":"commode","heading_deg":180}]}]}"#;
        let out: serde_json::Value = serde_json::from_str(&encode_route(req).unwrap()).unwrap();
        let text = out["text"].as_str().unwrap();
        assert!(text.contains("ahead is sofa"), "{text}");
        assert!(text.contains("go hard right"), "{text}");
        assert!(text.contains("commode"), "{text}");
        assert_eq!(angle_bin(-90.0), 9);
    }
}
