//! Rectangle overlap tests for vehicle footprints.

/// A vehicle footprint: centered rectangle rotated by `heading` radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub x: f64,
    pub y: f64,
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

impl Footprint {
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (sin, cos) = self.heading.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(dx, dy)| (self.x + dx * cos - dy * sin, self.y + dx * sin + dy * cos))
    }

    fn axes(&self) -> [(f64, f64); 2] {
        let (sin, cos) = self.heading.sin_cos();
        [(cos, sin), (-sin, cos)]
    }
}

/// Strict overlap: rectangles that only touch along an edge or corner do not
/// collide.
pub fn footprints_overlap(a: &Footprint, b: &Footprint) -> bool {
    if a.heading == 0.0 && b.heading == 0.0 {
        return (a.x - b.x).abs() < 0.5 * (a.length + b.length) && (a.y - b.y).abs() < 0.5 * (a.width + b.width);
    }
    separating_axis_overlap(a, b)
}

fn separating_axis_overlap(a: &Footprint, b: &Footprint) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    for (ax, ay) in a.axes().into_iter().chain(b.axes()) {
        let project = |corners: &[(f64, f64); 4]| {
            corners
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
                    let p = x * ax + y * ay;
                    (lo.min(p), hi.max(p))
                })
        };
        let (a_lo, a_hi) = project(&ca);
        let (b_lo, b_hi) = project(&cb);
        if a_hi <= b_lo || b_hi <= a_lo {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(x: f64, y: f64, heading: f64) -> Footprint {
        Footprint {
            x,
            y,
            length: 5.0,
            width: 2.0,
            heading,
        }
    }

    // Oracle: two convex polygons intersect iff an edge of one properly
    // crosses an edge of the other, or one contains a vertex of the other.
    fn polygon_oracle(a: &Footprint, b: &Footprint) -> bool {
        let pa = a.corners();
        let pb = b.corners();
        let cross = |o: (f64, f64), p: (f64, f64), q: (f64, f64)| (p.0 - o.0) * (q.1 - o.1) - (p.1 - o.1) * (q.0 - o.0);
        for i in 0..4 {
            let (p1, p2) = (pa[i], pa[(i + 1) % 4]);
            for j in 0..4 {
                let (q1, q2) = (pb[j], pb[(j + 1) % 4]);
                let d1 = cross(q1, q2, p1);
                let d2 = cross(q1, q2, p2);
                let d3 = cross(p1, p2, q1);
                let d4 = cross(p1, p2, q2);
                if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
                    return true;
                }
            }
        }
        let inside =
            |poly: &[(f64, f64); 4], pt: (f64, f64)| (0..4).all(|i| cross(poly[i], poly[(i + 1) % 4], pt) > 0.0);
        pb.iter().any(|&p| inside(&pa, p)) || pa.iter().any(|&p| inside(&pb, p))
    }

    #[test]
    fn disjoint_same_lane() {
        assert!(!footprints_overlap(&rect(0.0, 0.0, 0.0), &rect(5.01, 0.0, 0.0)));
        assert!(!footprints_overlap(&rect(0.0, 0.0, 0.0), &rect(5.0, 0.0, 0.0)));
        assert!(footprints_overlap(&rect(0.0, 0.0, 0.0), &rect(4.99, 0.0, 0.0)));
    }

    #[test]
    fn identical_positions_collide() {
        assert!(footprints_overlap(&rect(3.0, 4.0, 0.0), &rect(3.0, 4.0, 0.0)));
        assert!(footprints_overlap(&rect(3.0, 4.0, 0.2), &rect(3.0, 4.0, 0.2)));
    }

    #[test]
    fn mid_lane_change_corner_cases() {
        // Ego halfway into the next lane with a lane-change heading; a
        // neighbor sits diagonally so only corners can meet.
        let heading = (4.0f64 / 25.0).atan();
        let ego = rect(0.0, 2.0, heading);
        for dx in [4.0, 4.5, 5.0, 5.2, 5.4, 5.6, 6.0] {
            let other = rect(dx, 4.0, 0.0);
            assert_eq!(
                footprints_overlap(&ego, &other),
                polygon_oracle(&ego, &other),
                "dx={dx}"
            );
        }
    }

    proptest! {
        #[test]
        fn separating_axis_matches_polygon_oracle(
            dx in -7.0f64..7.0,
            dy in -4.0f64..4.0,
            ha in -0.3f64..0.3,
            hb in -0.3f64..0.3,
        ) {
            let a = rect(0.0, 0.0, ha);
            let b = rect(dx, dy, hb);
            prop_assert_eq!(footprints_overlap(&a, &b), polygon_oracle(&a, &b));
            prop_assert_eq!(footprints_overlap(&a, &b), footprints_overlap(&b, &a));
        }
    }
}
