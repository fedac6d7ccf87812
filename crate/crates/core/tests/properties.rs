use ndarray::{Array1, Array2};
use proptest::prelude::*;

use landmark_core::alignment::{ctc_grad, log_softmax_columns, CtcGradient};
use landmark_core::angles::{circular_distance, wrap_180, wrap_360};
use landmark_core::data::{Detection, PixelBox};
use landmark_core::geometry::{
    dedup_landmarks, perspective_to_bbox, PerspectiveSpec, DEFAULT_EDGE_SAMPLES,
};
use landmark_core::route::{bin_center, discretize_angle, pool_detections, BIN_WIDTH_DEG};

fn posteriors() -> impl Strategy<Value = (Array2<f64>, Array1<f64>)> {
    (1usize..=4, 0usize..=4).prop_flat_map(|(m, extra)| {
        let n = m + extra;
        (
            proptest::collection::vec(-4.0..4.0f64, m * n),
            proptest::collection::vec(-4.0..4.0f64, n),
        )
            .prop_map(move |(l, b)| (Array2::from_shape_vec((m, n), l).unwrap(), Array1::from(b)))
    })
}

proptest! {
    #[test]
    fn wrapped_angles_stay_in_range(a in -1e4..1e4f64) {
        let w = wrap_360(a);
        prop_assert!((0.0..360.0).contains(&w));
        let h = wrap_180(a);
        prop_assert!((-180.0..180.0).contains(&h));
        prop_assert!(circular_distance(a, w) < 1e-9);
    }

    #[test]
    fn bins_are_within_half_a_bin(a in -720.0..720.0f64) {
        let bin = discretize_angle(a);
        prop_assert!(bin < 12);
        prop_assert!(circular_distance(a, bin_center(bin)) <= BIN_WIDTH_DEG / 2.0 + 1e-9);
    }

    #[test]
    fn ctc_occupancy_and_gradient_columns((labels, blank) in posteriors(), t in 0.3..3.0f64) {
        let post = log_softmax_columns(&labels, &blank, t);
        let (_, occ) = CtcGradient::occupancy_from(&post).unwrap();
        for col in occ.columns() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-9);
        }
        for row in occ.rows().into_iter().take(labels.nrows()) {
            prop_assert!(row.sum() >= 1.0 - 1e-9, "every label occupies at least one frame");
        }
        let g = ctc_grad(&post, t).unwrap();
        prop_assert!(g.loss >= 0.0);
        for j in 0..labels.ncols() {
            let s: f64 = g.labels.column(j).sum() + g.blank[j];
            prop_assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn bbox_stays_inside_the_image(
        h in 0.0..360.0f64, p in -89.0..89.0f64, hf in 1.0..179.0f64, vf in 1.0..179.0f64,
    ) {
        let b = perspective_to_bbox(&PerspectiveSpec::new(h, p, hf, vf), 512.0, 256.0, DEFAULT_EDGE_SAMPLES).unwrap();
        prop_assert!(b.y0 >= 0.0 && b.y1 <= 256.0 && b.y0 < b.y1);
        prop_assert!(b.x0 >= 0.0 && b.x0 <= 512.0 && b.x1 >= 0.0 && b.x1 <= 512.0);
        prop_assert!(b.pixel_width() > 0.0 && b.pixel_width() <= 512.0);
        prop_assert!(b.contains(h / 360.0 * 512.0, (0.5 - p / 180.0) * 256.0));
    }

    #[test]
    fn dedup_is_idempotent_and_order_preserving(
        views in proptest::collection::vec((0usize..2, 0.0..20.0f64, -8.0..8.0f64, 50.0..60.0f64), 0..12)
    ) {
        let list: Vec<(String, PerspectiveSpec)> = views
            .iter()
            .map(|&(p, h, pi, f)| (format!("p{p}"), PerspectiveSpec::new(h, pi, f, f)))
            .collect();
        let once = dedup_landmarks(&list);
        prop_assert_eq!(dedup_landmarks(&once), once.clone());
        let mut it = list.iter();
        for kept in &once {
            prop_assert!(it.any(|x| x == kept), "kept views keep their order");
        }
    }

    #[test]
    fn pooled_size_is_bounded(
        scores in proptest::collection::vec((0usize..5, 0.0..1.0f64), 0..25),
        len in 1usize..6,
        ratio in 0.5..2.5f64,
    ) {
        let dets: Vec<Detection> = scores
            .iter()
            .map(|&(p, s)| Detection {
                pano_id: format!("p{p}"),
                bbox: PixelBox { x0: 10.0, y0: 10.0, x1: 30.0, y1: 30.0 },
                score: s,
            })
            .collect();
        let path: Vec<String> = (0..len).map(|k| format!("p{k}")).collect();
        let pooled = pool_detections(&dets, &path, ratio, 0).unwrap();
        let cap = ((ratio * len as f64).round() as usize).min(3 * len).min(dets.len());
        prop_assert!(pooled.len() <= cap);
        for w in pooled.windows(2) {
            prop_assert!(
                w[0].path_index < w[1].path_index
                    || (w[0].path_index == w[1].path_index && w[0].detection.score >= w[1].detection.score)
            );
        }
    }
}
