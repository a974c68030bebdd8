//! Exact-sign orientation and in-circle tests (adaptive precision, via the
//! `robust` crate) plus segment intersection built on them.

use robust::Coord;

#[inline]
fn c(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

/// Positive if `a, b, p` turn counter-clockwise, negative if clockwise,
/// zero if collinear. The sign is exact.
#[inline]
pub fn orient(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    robust::orient2d(c(a), c(b), c(p))
}

/// Positive if `d` lies strictly inside the circle through the
/// counter-clockwise triangle `a, b, c`; zero if on it. The sign is exact.
#[inline]
pub fn in_circle(a: [f64; 2], b: [f64; 2], cc: [f64; 2], d: [f64; 2]) -> f64 {
    robust::incircle(c(a), c(b), c(cc), c(d))
}

/// Whether `p` lies on the closed segment `ab`, given that the three are
/// collinear.
fn within_box(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Whether closed segments `p1p2` and `q1q2` share any point.
pub fn segments_conflict(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && within_box(q1, q2, p1))
        || (d2 == 0.0 && within_box(q1, q2, p2))
        || (d3 == 0.0 && within_box(p1, p2, q1))
        || (d4 == 0.0 && within_box(p1, p2, q2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_signs() {
        assert!(orient([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]) > 0.0);
        assert!(orient([0.0, 0.0], [0.0, 1.0], [1.0, 0.0]) < 0.0);
        assert_eq!(orient([0.0, 0.0], [1.0, 1.0], [2.0, 2.0]), 0.0);
    }

    #[test]
    fn nearly_collinear_is_resolved_exactly() {
        // Naive double arithmetic gets this sign wrong or returns zero.
        let a = [0.5, 0.5];
        let b = [12.0, 12.0];
        let p = [24.0, 24.0 + 2f64.powi(-48)];
        assert!(orient(a, b, p) > 0.0);
    }

    #[test]
    fn cocircular_point_gives_zero() {
        let (a, b, cc) = ([1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]);
        assert_eq!(in_circle(a, b, cc, [0.0, -1.0]), 0.0);
        assert!(in_circle(a, b, cc, [0.0, 0.0]) > 0.0);
        assert!(in_circle(a, b, cc, [2.0, 0.0]) < 0.0);
    }

    #[test]
    fn segment_cases() {
        assert!(segments_conflict([0.0, 0.0], [2.0, 2.0], [0.0, 2.0], [2.0, 0.0]));
        assert!(!segments_conflict([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]));
        // T-junction.
        assert!(segments_conflict([0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [1.0, 1.0]));
        // Collinear disjoint.
        assert!(!segments_conflict([0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]));
    }
}
