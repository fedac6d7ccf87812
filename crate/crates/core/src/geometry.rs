//! Spherical and equirectangular geometry.
//!
//! Equirectangular pixels map headings linearly onto columns, with heading 0
//! at the left edge and heading 180 on the centre column:
//! `x = heading / 360 · W`, `y = (0.5 − pitch / 180) · H`. Longitudes are
//! taken relative to the image centre, so equivalently
//! `x = (lon / 360 + 0.5) · W` with `lon = heading − 180`.
//!
//! World directions use x east, y north, z up. Headings turn clockwise from
//! +y; pitch is elevation above the horizon.

use serde::{Deserialize, Serialize};

use crate::angles::{circular_distance, wrap_360};
use crate::data::PoseFrame;
use crate::embeddings::{similarity, view_key, EmbeddingProvider, Modality, ProjectionHeads};
use crate::error::{Error, Result};

/// Boundary samples per frustum edge.
pub const DEFAULT_EDGE_SAMPLES: usize = 64;
/// Upper clamp for fields of view recovered from boxes.
pub const MAX_PERSPECTIVE_FOV: f64 = 179.0;
pub const PAD_DEG: f64 = 90.0;
pub const MARKER_SIZE_PX: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveSpec {
    pub heading_deg: f64,
    pub pitch_deg: f64,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
}

impl PerspectiveSpec {
    pub fn new(heading_deg: f64, pitch_deg: f64, hfov_deg: f64, vfov_deg: f64) -> Self {
        PerspectiveSpec {
            heading_deg,
            pitch_deg,
            hfov_deg,
            vfov_deg,
        }
    }

    pub fn square(heading_deg: f64, pitch_deg: f64, fov_deg: f64) -> Self {
        Self::new(heading_deg, pitch_deg, fov_deg, fov_deg)
    }

    pub fn from_frame(frame: &PoseFrame) -> Self {
        Self::new(
            frame.heading_deg,
            frame.pitch_deg,
            frame.hfov_deg,
            frame.vfov_deg,
        )
    }

    /// Pinhole view checks: heading in `[0,360)`, pitch in `[-90,90]`,
    /// both fields of view in `(0,180)`.
    pub fn validate(&self) -> Result<()> {
        let fov_ok = |f: f64| f > 0.0 && f < 180.0;
        if (0.0..360.0).contains(&self.heading_deg)
            && (-90.0..=90.0).contains(&self.pitch_deg)
            && fov_ok(self.hfov_deg)
            && fov_ok(self.vfov_deg)
        {
            Ok(())
        } else {
            Err(Error::Invariant(format!(
                "perspective spec out of range: {self:?}"
            )))
        }
    }

    /// Same view with the heading turned by `deg`.
    pub fn rotated(&self, deg: f64) -> Self {
        PerspectiveSpec {
            heading_deg: wrap_360(self.heading_deg + deg),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquirectBBox {
    pub width: f64,
    pub height: f64,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    /// True when the box crosses the horizontal seam (`x1 < x0`).
    pub wraps: bool,
}

impl EquirectBBox {
    /// Horizontal extent in pixels, accounting for the seam.
    pub fn pixel_width(&self) -> f64 {
        if self.wraps {
            self.x1 + self.width - self.x0
        } else {
            self.x1 - self.x0
        }
    }

    /// Whether pixel position `(x, y)` lies inside the box.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let x = x.rem_euclid(self.width);
        let in_x = if self.wraps {
            x >= self.x0 || x <= self.x1
        } else {
            // Full-width boxes end at W, which is column 0 again.
            (x >= self.x0 && x <= self.x1) || (self.x1 >= self.width && x == 0.0)
        };
        in_x && y >= self.y0 && y <= self.y1
    }
}

pub fn heading_to_x(heading_deg: f64, width: f64) -> f64 {
    wrap_360(heading_deg) / 360.0 * width
}

pub fn pitch_to_y(pitch_deg: f64, height: f64) -> f64 {
    (0.5 - pitch_deg / 180.0) * height
}

fn direction(heading_deg: f64, pitch_deg: f64) -> [f64; 3] {
    let (h, p) = (heading_deg.to_radians(), pitch_deg.to_radians());
    [p.cos() * h.sin(), p.cos() * h.cos(), p.sin()]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `(heading, pitch)` of a world direction, heading in `[0, 360)`.
fn to_angles(d: [f64; 3]) -> (f64, f64) {
    let heading = wrap_360(d[0].atan2(d[1]).to_degrees());
    let pitch = d[2].atan2(d[0].hypot(d[1])).to_degrees();
    (heading, pitch)
}

/// Shortest circular arc covering every heading: `(start, width)`.
fn minimal_arc(headings: &mut [f64]) -> (f64, f64) {
    headings.sort_by(f64::total_cmp);
    let n = headings.len();
    let mut best_gap = -1.0;
    let mut start = headings[0];
    for k in 0..n {
        let next = if k + 1 < n {
            headings[k + 1]
        } else {
            headings[0] + 360.0
        };
        let gap = next - headings[k];
        if gap > best_gap {
            best_gap = gap;
            start = if k + 1 < n {
                headings[k + 1]
            } else {
                headings[0]
            };
        }
    }
    (start, 360.0 - best_gap)
}

fn bbox_from_ranges(
    start_heading: f64,
    arc: f64,
    pitch_lo: f64,
    pitch_hi: f64,
    w: f64,
    h: f64,
) -> EquirectBBox {
    let y0 = pitch_to_y(pitch_hi.min(90.0), h).max(0.0);
    let y1 = pitch_to_y(pitch_lo.max(-90.0), h).min(h);
    if arc >= 360.0 - 1e-9 {
        return EquirectBBox {
            width: w,
            height: h,
            x0: 0.0,
            y0,
            x1: w,
            y1,
            wraps: false,
        };
    }
    let x0 = heading_to_x(start_heading, w);
    let mut x1 = x0 + arc / 360.0 * w;
    let wraps = x1 > w;
    if wraps {
        x1 -= w;
    }
    EquirectBBox {
        width: w,
        height: h,
        x0,
        y0,
        x1,
        y1,
        wraps,
    }
}

/// Minimal enclosing equirectangular box of a perspective view, found by
/// sampling the frustum boundary.
///
/// Fields of view of 180° or more are not pinhole views; they are treated
/// as plain angular ranges around the view centre.
pub fn perspective_to_bbox(
    spec: &PerspectiveSpec,
    width: f64,
    height: f64,
    edge_samples: usize,
) -> Result<EquirectBBox> {
    let fov_ok = |f: f64, max: f64| f.is_finite() && f > 0.0 && f <= max;
    if !fov_ok(spec.hfov_deg, 360.0) || !fov_ok(spec.vfov_deg, 180.0) {
        return Err(Error::DegenerateFov(format!(
            "hfov {} vfov {}",
            spec.hfov_deg, spec.vfov_deg
        )));
    }
    if !(width > 0.0 && height > 0.0) || edge_samples == 0 {
        return Err(Error::Invariant(
            "image size and sample count must be positive".into(),
        ));
    }

    if spec.hfov_deg >= 180.0 || spec.vfov_deg >= 180.0 {
        return Ok(bbox_from_ranges(
            spec.heading_deg - spec.hfov_deg / 2.0,
            spec.hfov_deg.min(360.0),
            spec.pitch_deg - spec.vfov_deg / 2.0,
            spec.pitch_deg + spec.vfov_deg / 2.0,
            width,
            height,
        ));
    }

    let fwd = direction(spec.heading_deg, spec.pitch_deg);
    let h = spec.heading_deg.to_radians();
    let right = [h.cos(), -h.sin(), 0.0];
    let up = cross(right, fwd);
    let tx = (spec.hfov_deg / 2.0).to_radians().tan();
    let ty = (spec.vfov_deg / 2.0).to_radians().tan();

    let mut headings = Vec::with_capacity(4 * (edge_samples + 1) + 1);
    let mut pitch_lo = spec.pitch_deg;
    let mut pitch_hi = spec.pitch_deg;
    headings.push(wrap_360(spec.heading_deg));
    let mut visit = |sx: f64, sy: f64| {
        let d = [0, 1, 2].map(|k| fwd[k] + sx * tx * right[k] + sy * ty * up[k]);
        let (hd, pt) = to_angles(d);
        headings.push(hd);
        pitch_lo = pitch_lo.min(pt);
        pitch_hi = pitch_hi.max(pt);
    };
    for k in 0..=edge_samples {
        let s = -1.0 + 2.0 * k as f64 / edge_samples as f64;
        visit(s, 1.0);
        visit(s, -1.0);
        visit(1.0, s);
        visit(-1.0, s);
    }

    // A pole inside the frustum makes the box span every heading.
    let mut full_width = false;
    for (pole, sign) in [([0.0, 0.0, 1.0], 1.0), ([0.0, 0.0, -1.0], -1.0)] {
        let zc = dot(fwd, pole);
        if zc > 0.0 && (dot(right, pole) / zc).abs() <= tx && (dot(up, pole) / zc).abs() <= ty {
            full_width = true;
            if sign > 0.0 {
                pitch_hi = 90.0;
            } else {
                pitch_lo = -90.0;
            }
        }
    }
    let (start, arc) = if full_width {
        (0.0, 360.0)
    } else {
        minimal_arc(&mut headings)
    };
    Ok(bbox_from_ranges(
        start, arc, pitch_lo, pitch_hi, width, height,
    ))
}

/// View whose centre is the box centre and whose fields of view equal the
/// box's angular extent, clamped below 180°.
pub fn bbox_to_perspective(bbox: &EquirectBBox) -> Result<PerspectiveSpec> {
    let pw = bbox.pixel_width();
    let ph = bbox.y1 - bbox.y0;
    if !(pw > 0.0 && ph > 0.0) {
        return Err(Error::ZeroAreaBox);
    }
    let cx = bbox.x0 + pw / 2.0;
    let cy = (bbox.y0 + bbox.y1) / 2.0;
    let clamp = |f: f64| f.clamp(f64::MIN_POSITIVE, MAX_PERSPECTIVE_FOV);
    Ok(PerspectiveSpec {
        heading_deg: wrap_360(cx / bbox.width * 360.0),
        pitch_deg: (0.5 - cy / bbox.height) * 180.0,
        hfov_deg: clamp(pw / bbox.width * 360.0),
        vfov_deg: clamp(ph / bbox.height * 180.0),
    })
}

/// Non-wrapping pixel rectangle, used in padded detector coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorExample {
    pub width: f64,
    pub height: f64,
    pub padded_width: f64,
    /// Heading offset added to every direction so the outbound one lands on
    /// the centre column.
    pub rotation_deg: f64,
    pub pad_deg: f64,
    pub inbound_marker: Vec<PixelRect>,
    pub outbound_marker: Vec<PixelRect>,
    pub target_boxes: Vec<PixelRect>,
}

impl DetectorExample {
    pub fn pad_px(&self) -> f64 {
        (self.padded_width - self.width) / 2.0
    }
}

/// Copies of the unpadded interval `[a, b)` (which may extend past `W`) that
/// land in the padded image, shifted into padded coordinates.
fn padded_copies(a: f64, b: f64, w: f64, pad: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for k in [-1.0, 0.0, 1.0] {
        let lo = (a + k * w).max(-pad);
        let hi = (b + k * w).min(w + pad);
        if hi > lo {
            out.push((lo + pad, hi + pad));
        }
    }
    out
}

/// Rotates the pano so the outbound direction is centred, pads 90° of
/// wrapped image onto each side, and emits marker blocks and target boxes
/// in padded pixel coordinates.
pub fn prepare_detector_example(
    landmarks: &[PerspectiveSpec],
    inbound_deg: Option<f64>,
    outbound_deg: f64,
    width: f64,
    height: f64,
) -> Result<DetectorExample> {
    let rotation = wrap_360(180.0 - outbound_deg);
    let pad = width * PAD_DEG / 360.0;
    let mut targets = Vec::new();
    for spec in landmarks {
        let bbox =
            perspective_to_bbox(&spec.rotated(rotation), width, height, DEFAULT_EDGE_SAMPLES)?;
        let a = bbox.x0;
        let b = a + bbox.pixel_width();
        for (x0, x1) in padded_copies(a, b, width, pad) {
            targets.push(PixelRect {
                x0,
                y0: bbox.y0,
                x1,
                y1: bbox.y1,
            });
        }
    }
    let marker = |heading: f64| {
        let cx = heading_to_x(heading + rotation, width);
        let cy = height / 2.0;
        let half = MARKER_SIZE_PX / 2.0;
        padded_copies(cx - half, cx + half, width, pad)
            .into_iter()
            .map(|(x0, x1)| PixelRect {
                x0,
                y0: cy - half,
                x1,
                y1: cy + half,
            })
            .collect::<Vec<_>>()
    };
    Ok(DetectorExample {
        width,
        height,
        padded_width: width + 2.0 * pad,
        rotation_deg: rotation,
        pad_deg: PAD_DEG,
        inbound_marker: inbound_deg.map(marker).unwrap_or_default(),
        outbound_marker: marker(outbound_deg),
        target_boxes: targets,
    })
}

pub const MASK_TARGET: u8 = 64;
pub const MASK_INBOUND: u8 = 128;
pub const MASK_OUTBOUND: u8 = 255;

/// 8-bit binary PGM of the padded example: target boxes, then inbound and
/// outbound markers painted on top.
pub fn render_mask_pgm(example: &DetectorExample) -> Vec<u8> {
    let w = example.padded_width.round() as usize;
    let h = example.height.round() as usize;
    let mut pixels = vec![0u8; w * h];
    let mut paint = |r: &PixelRect, value: u8| {
        for y in 0..h {
            let yc = y as f64 + 0.5;
            if yc < r.y0 || yc >= r.y1 {
                continue;
            }
            for x in 0..w {
                let xc = x as f64 + 0.5;
                if xc >= r.x0 && xc < r.x1 {
                    pixels[y * w + x] = value;
                }
            }
        }
    };
    for r in &example.target_boxes {
        paint(r, MASK_TARGET);
    }
    for r in &example.inbound_marker {
        paint(r, MASK_INBOUND);
    }
    for r in &example.outbound_marker {
        paint(r, MASK_OUTBOUND);
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementGrid {
    pub heading_offsets: Vec<f64>,
    pub pitch_offsets: Vec<f64>,
    /// Square fields of view.
    pub fovs: Vec<f64>,
}

impl Default for RefinementGrid {
    fn default() -> Self {
        RefinementGrid {
            heading_offsets: (-4..=4).map(|k| 10.0 * k as f64).collect(),
            pitch_offsets: (-2..=2).map(|k| 10.0 * k as f64).collect(),
            fovs: vec![30.0, 45.0, 60.0, 75.0, 90.0],
        }
    }
}

impl RefinementGrid {
    pub fn is_empty(&self) -> bool {
        self.heading_offsets.is_empty() || self.pitch_offsets.is_empty() || self.fovs.is_empty()
    }

    /// The selected view followed by every grid candidate, in grid order.
    pub fn candidates(&self, selected: &PerspectiveSpec) -> Vec<PerspectiveSpec> {
        let mut out = vec![*selected];
        for &dh in &self.heading_offsets {
            for &dp in &self.pitch_offsets {
                for &f in &self.fovs {
                    out.push(PerspectiveSpec::square(
                        wrap_360(selected.heading_deg + dh),
                        (selected.pitch_deg + dp).clamp(-90.0, 90.0),
                        f,
                    ));
                }
            }
        }
        out
    }
}

/// Whether two views' angular footprints intersect with positive area.
pub fn views_overlap(a: &PerspectiveSpec, b: &PerspectiveSpec) -> bool {
    let h_ok = a.hfov_deg + b.hfov_deg >= 720.0
        || circular_distance(a.heading_deg, b.heading_deg) < (a.hfov_deg + b.hfov_deg) / 2.0;
    let v_ok = (a.pitch_deg - b.pitch_deg).abs() < (a.vfov_deg + b.vfov_deg) / 2.0;
    h_ok && v_ok
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredView {
    pub view: PerspectiveSpec,
    pub score: f64,
}

/// Searches views around `selected` for the one whose image embedding best
/// matches `phrase`. Ties go to the earliest candidate, so the selected view
/// wins unless something scores strictly higher.
pub fn refine_landmark(
    selected: &PerspectiveSpec,
    pano_id: &str,
    phrase: &str,
    provider: &dyn EmbeddingProvider,
    heads: &ProjectionHeads,
    grid: &RefinementGrid,
) -> Result<ScoredView> {
    let text = heads.embed(provider, Modality::Text, phrase)?;
    let score = |v: &PerspectiveSpec| -> Result<f64> {
        let img = heads.embed(provider, Modality::Image, &view_key(pano_id, v))?;
        similarity(&text, &img)
    };
    let mut best = ScoredView {
        view: *selected,
        score: score(selected)?,
    };
    if grid.is_empty() {
        return Ok(best);
    }
    for cand in grid.candidates(selected).iter().skip(1) {
        if !views_overlap(selected, cand) {
            continue;
        }
        let s = score(cand)?;
        if s > best.score {
            best = ScoredView {
                view: *cand,
                score: s,
            };
        }
    }
    Ok(best)
}

pub const DEDUP_THRESHOLD_DEG: f64 = 5.0;

/// Indices surviving de-duplication: a view is dropped when an earlier kept
/// view of the same pano is within 5° in heading, pitch and horizontal fov.
pub fn dedup_indices<'a, I>(landmarks: I) -> Vec<usize>
where
    I: IntoIterator<Item = (&'a str, &'a PerspectiveSpec)>,
{
    let mut kept: Vec<(usize, &str, &PerspectiveSpec)> = Vec::new();
    for (k, (pano, v)) in landmarks.into_iter().enumerate() {
        let dup = kept.iter().any(|(_, p, u)| {
            *p == pano
                && circular_distance(u.heading_deg, v.heading_deg) < DEDUP_THRESHOLD_DEG
                && (u.pitch_deg - v.pitch_deg).abs() < DEDUP_THRESHOLD_DEG
                && (u.hfov_deg - v.hfov_deg).abs() < DEDUP_THRESHOLD_DEG
        });
        if !dup {
            kept.push((k, pano, v));
        }
    }
    kept.into_iter().map(|(k, _, _)| k).collect()
}

pub fn dedup_landmarks(landmarks: &[(String, PerspectiveSpec)]) -> Vec<(String, PerspectiveSpec)> {
    dedup_indices(landmarks.iter().map(|(p, v)| (p.as_str(), v)))
        .into_iter()
        .map(|k| landmarks[k].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::SyntheticProvider;

    const W: f64 = 512.0;
    const H: f64 = 256.0;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ninety_degree_view_at_image_centre() {
        let b = perspective_to_bbox(
            &PerspectiveSpec::square(180.0, 0.0, 90.0),
            W,
            H,
            DEFAULT_EDGE_SAMPLES,
        )
        .unwrap();
        assert!(!b.wraps);
        assert!(
            close(b.x0, 192.0, 1e-9) && close(b.x1, 320.0, 1e-9),
            "{b:?}"
        );
        assert!(close(b.y0, 64.0, 1e-9) && close(b.y1, 192.0, 1e-9), "{b:?}");
        let back = bbox_to_perspective(&b).unwrap();
        assert!(close(back.heading_deg, 180.0, 1e-9));
        assert!(close(back.pitch_deg, 0.0, 1e-9));
        assert!(close(back.hfov_deg, 90.0, 1e-9) && close(back.vfov_deg, 90.0, 1e-9));
    }

    #[test]
    fn heading_zero_straddles_the_seam() {
        let b = perspective_to_bbox(
            &PerspectiveSpec::square(0.0, 0.0, 90.0),
            W,
            H,
            DEFAULT_EDGE_SAMPLES,
        )
        .unwrap();
        assert!(b.wraps);
        assert!(close(b.x0, 448.0, 1e-9) && close(b.x1, 64.0, 1e-9), "{b:?}");
        let back = bbox_to_perspective(&b).unwrap();
        assert!(close(back.heading_deg, 0.0, 1e-9) || close(back.heading_deg, 360.0, 1e-9));
    }

    #[test]
    fn full_sphere_is_full_image() {
        let b = perspective_to_bbox(
            &PerspectiveSpec::new(37.0, 0.0, 360.0, 180.0),
            W,
            H,
            DEFAULT_EDGE_SAMPLES,
        )
        .unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1, b.wraps), (0.0, 0.0, W, H, false));
        let back = bbox_to_perspective(&b).unwrap();
        assert_eq!(back.pitch_deg, 0.0);
        assert_eq!(back.hfov_deg, MAX_PERSPECTIVE_FOV);
        assert_eq!(back.vfov_deg, MAX_PERSPECTIVE_FOV);
    }

    #[test]
    fn seam_crossing() {
        let b = perspective_to_bbox(
            &PerspectiveSpec::square(350.0, 0.0, 40.0),
            W,
            H,
            DEFAULT_EDGE_SAMPLES,
        )
        .unwrap();
        assert!(b.wraps && b.x0 > b.x1);
        let b = perspective_to_bbox(
            &PerspectiveSpec::square(170.0, 0.0, 40.0),
            W,
            H,
            DEFAULT_EDGE_SAMPLES,
        )
        .unwrap();
        assert!(!b.wraps);
    }

    #[test]
    fn pole_in_view_spans_all_headings() {
        let b = perspective_to_bbox(
            &PerspectiveSpec::square(20.0, 80.0, 60.0),
            W,
            H,
            DEFAULT_EDGE_SAMPLES,
        )
        .unwrap();
        assert_eq!((b.x0, b.x1, b.y0), (0.0, W, 0.0));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            perspective_to_bbox(&PerspectiveSpec::square(0.0, 0.0, 0.0), W, H, 8),
            Err(Error::DegenerateFov(_))
        ));
        let zero = EquirectBBox {
            width: W,
            height: H,
            x0: 10.0,
            y0: 5.0,
            x1: 10.0,
            y1: 50.0,
            wraps: false,
        };
        assert!(matches!(
            bbox_to_perspective(&zero),
            Err(Error::ZeroAreaBox)
        ));
    }

    #[test]
    fn detector_example_layout() {
        let ex = prepare_detector_example(
            &[PerspectiveSpec::square(90.0, 0.0, 40.0)],
            None,
            90.0,
            W,
            H,
        )
        .unwrap();
        assert_eq!(ex.padded_width, 768.0);
        assert_eq!(ex.rotation_deg, 90.0);
        assert!(ex.inbound_marker.is_empty());
        // Outbound marker and the landmark straight ahead share the centre column.
        let m = ex.outbound_marker[0];
        assert!(close((m.x0 + m.x1) / 2.0, 256.0 + 128.0, 1e-9));
        assert_eq!(ex.target_boxes.len(), 1);
        let t = ex.target_boxes[0];
        assert!(close((t.x0 + t.x1) / 2.0, 384.0, 1e-9));
    }

    #[test]
    fn margin_boxes_are_duplicated() {
        // Outbound 180 means no rotation; heading 30 sits inside the left
        // 90° margin.
        let ex = prepare_detector_example(
            &[PerspectiveSpec::square(30.0, 0.0, 20.0)],
            Some(0.0),
            180.0,
            W,
            H,
        )
        .unwrap();
        assert_eq!(ex.rotation_deg, 0.0);
        assert_eq!(ex.target_boxes.len(), 2);
        let (a, b) = (ex.target_boxes[0], ex.target_boxes[1]);
        assert!(close(b.x0 - a.x0, W, 1e-9));
        assert!(close(b.x1 - a.x1, W, 1e-9));
        // The inbound marker at heading 0 sits on the seam, so the padding
        // shows it twice.
        assert_eq!(ex.inbound_marker.len(), 2);
    }

    #[test]
    fn pgm_header_and_size() {
        let ex = prepare_detector_example(
            &[PerspectiveSpec::square(180.0, 0.0, 60.0)],
            Some(200.0),
            180.0,
            W,
            H,
        )
        .unwrap();
        let pgm = render_mask_pgm(&ex);
        let header = b"P5\n768 256\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 768 * 256);
        let px = |x: usize, y: usize| pgm[header.len() + y * 768 + x];
        assert_eq!(px(384, 128), MASK_OUTBOUND);
        assert_eq!(px(384, 100), MASK_TARGET);
        assert_eq!(px(5, 5), 0);
    }

    struct OnlyOriginal {
        original: String,
    }

    impl EmbeddingProvider for OnlyOriginal {
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, modality: Modality, key: &str) -> Result<Vec<f64>> {
            Ok(match modality {
                Modality::Text => vec![1.0, 0.0],
                Modality::Image if key == self.original => vec![1.0, 0.0],
                Modality::Image => vec![0.0, 1.0],
            })
        }
    }

    #[test]
    fn refinement_keeps_a_uniquely_scored_original() {
        let sel = PerspectiveSpec::new(33.0, -4.0, 70.0, 55.0);
        let provider = OnlyOriginal {
            original: view_key("p1", &sel),
        };
        let out = refine_landmark(
            &sel,
            "p1",
            "lamp",
            &provider,
            &ProjectionHeads::identity(2),
            &RefinementGrid::default(),
        )
        .unwrap();
        assert_eq!(out.view, sel);
        assert_eq!(out.score, 1.0);
        let empty = RefinementGrid {
            fovs: vec![],
            ..RefinementGrid::default()
        };
        let out = refine_landmark(
            &sel,
            "p1",
            "lamp",
            &provider,
            &ProjectionHeads::identity(2),
            &empty,
        )
        .unwrap();
        assert_eq!(out.view, sel);
    }

    #[test]
    fn refinement_is_an_exhaustive_argmax() {
        let p = SyntheticProvider::new(32, 9);
        let heads = ProjectionHeads::identity(32);
        let sel = PerspectiveSpec::square(100.0, 0.0, 60.0);
        let grid = RefinementGrid::default();
        let best = refine_landmark(&sel, "p", "sofa", &p, &heads, &grid).unwrap();
        let text = p.embed(Modality::Text, "sofa").unwrap();
        for c in grid.candidates(&sel) {
            if views_overlap(&sel, &c) {
                let img = p.embed(Modality::Image, &view_key("p", &c)).unwrap();
                assert!(best.score >= similarity(&text, &img).unwrap());
            }
        }
    }

    #[test]
    fn dedup_rules() {
        let v = |h, p, f| PerspectiveSpec::square(h, p, f);
        let lms = vec![
            ("a".to_string(), v(2.0, 0.0, 60.0)),
            ("a".to_string(), v(4.0, 3.0, 58.0)),
            ("b".to_string(), v(2.0, 0.0, 60.0)),
            ("a".to_string(), v(358.0, 0.0, 60.0)),
            ("a".to_string(), v(8.0, 0.0, 60.0)),
            ("a".to_string(), v(2.0, 0.0, 40.0)),
        ];
        let out = dedup_landmarks(&lms);
        let kept: Vec<_> = out
            .iter()
            .map(|(p, s)| (p.as_str(), s.heading_deg, s.hfov_deg))
            .collect();
        assert_eq!(
            kept,
            [
                ("a", 2.0, 60.0),
                ("b", 2.0, 60.0),
                ("a", 8.0, 60.0),
                ("a", 2.0, 40.0)
            ]
        );
    }
}
