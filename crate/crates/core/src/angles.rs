//! Degree-based angle helpers.
//!
//! Everything in this crate keeps angles in degrees. Headings live in
//! `[0, 360)`, signed differences in `[-180, 180)`.

/// Wraps an angle into `[0, 360)`.
pub fn wrap_360(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid can return exactly 360.0 for tiny negative inputs.
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Wraps an angle into `[-180, 180)`.
pub fn wrap_180(deg: f64) -> f64 {
    let r = wrap_360(deg + 180.0) - 180.0;
    if r >= 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Smallest absolute circular distance between two headings, in `[0, 180]`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    wrap_180(a - b).abs()
}

/// Compass-style bearing from `from` to `to` in the horizontal plane.
///
/// 0° points along +y and angles grow clockwise towards +x.
pub fn bearing(from: [f64; 3], to: [f64; 3]) -> f64 {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    wrap_360(dx.atan2(dy).to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrapping() {
        assert_eq!(wrap_360(-10.0), 350.0);
        assert_eq!(wrap_360(720.0), 0.0);
        assert_eq!(wrap_360(-1e-20), 0.0);
        assert_eq!(wrap_180(190.0), -170.0);
        assert_eq!(wrap_180(180.0), -180.0);
        assert_eq!(wrap_180(-180.0), -180.0);
        assert_eq!(circular_distance(355.0, 5.0), 10.0);
    }

    #[test]
    fn bearings() {
        let o = [0.0, 0.0, 0.0];
        assert!((bearing(o, [0.0, 1.0, 0.0]) - 0.0).abs() < 1e-12);
        assert!((bearing(o, [1.0, 0.0, 0.0]) - 90.0).abs() < 1e-12);
        assert!((bearing(o, [0.0, -1.0, 0.0]) - 180.0).abs() < 1e-12);
        assert!((bearing(o, [-1.0, 0.0, 0.0]) - 270.0).abs() < 1e-12);
    }
}
