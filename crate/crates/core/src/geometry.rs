//! Planar polygon predicates used to validate electrode layouts.

use nalgebra::Vector2;

pub type Vec2 = Vector2<f64>;

/// Twice the signed area; positive for counterclockwise vertex order.
pub fn signed_area2(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum()
}

#[inline]
fn cross(o: Vec2, a: Vec2, b: Vec2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

#[inline]
fn on_segment(p: Vec2, a: Vec2, b: Vec2, tol: f64) -> bool {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm() <= tol;
    }
    let t = (p - a).dot(&d) / len2;
    if !(-1e-12..=1.0 + 1e-12).contains(&t) {
        return false;
    }
    (a + d * t - p).norm() <= tol
}

/// True when the two closed segments share at least one point.
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let scale = [a, b, c, d]
        .iter()
        .fold(0.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()))
        .max(1e-30);
    let eps = 1e-12 * scale * scale;
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps))
        && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps))
    {
        return true;
    }
    let tol = 1e-12 * scale;
    (d1.abs() <= eps && on_segment(a, c, d, tol))
        || (d2.abs() <= eps && on_segment(b, c, d, tol))
        || (d3.abs() <= eps && on_segment(c, a, b, tol))
        || (d4.abs() <= eps && on_segment(d, a, b, tol))
}

/// True when the segments cross at a single point interior to both.
///
/// Collinear overlaps and touching endpoints do not count; adjacent
/// electrodes in the gapless plane share boundary segments.
pub fn segments_cross_properly(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let scale = [a, b, c, d]
        .iter()
        .fold(0.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()))
        .max(1e-30);
    let eps = 1e-12 * scale * scale;
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    ((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps))
        && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps))
}

/// Simple-polygon test: no two non-adjacent edges touch, adjacent edges meet
/// only at their shared vertex.
pub fn is_simple(poly: &[Vec2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        for j in (i + 1)..n {
            let c = poly[j];
            let d = poly[(j + 1) % n];
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Shared vertex is fine; folding back onto the previous edge is not.
                let (shared, p, q) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                if cross(shared, p, q).abs() <= 1e-12 * (p - shared).norm() * (q - shared).norm()
                    && (p - shared).dot(&(q - shared)) > 0.0
                {
                    return false;
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Winding-number test; points on the boundary are reported as outside.
pub fn contains_strictly(poly: &[Vec2], p: Vec2) -> bool {
    let n = poly.len();
    let scale = poly
        .iter()
        .fold(p.x.abs().max(p.y.abs()), |m, q| m.max(q.x.abs()).max(q.y.abs()))
        .max(1e-30);
    let tol = 1e-12 * scale;
    let mut winding = 0i32;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if on_segment(p, a, b, tol) {
            return false;
        }
        if a.y <= p.y {
            if b.y > p.y && cross(a, b, p) > 0.0 {
                winding += 1;
            }
        } else if b.y <= p.y && cross(a, b, p) < 0.0 {
            winding -= 1;
        }
    }
    winding != 0
}

/// Points strictly inside a simple polygon, taken along a few horizontal chords.
pub fn interior_samples(poly: &[Vec2]) -> Vec<Vec2> {
    let (ymin, ymax) = poly
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    let n = poly.len();
    let mut out = Vec::new();
    // Irrational-ish fractions avoid passing through vertices.
    for frac in [0.5 + 1e-3 * std::f64::consts::FRAC_1_SQRT_2, 0.3183, 0.6931, 0.1234, 0.8765] {
        let y0 = ymin + frac * (ymax - ymin);
        let mut xs: Vec<f64> = (0..n)
            .filter_map(|i| {
                let a = poly[i];
                let b = poly[(i + 1) % n];
                if (a.y <= y0 && b.y > y0) || (b.y <= y0 && a.y > y0) {
                    Some(a.x + (y0 - a.y) * (b.x - a.x) / (b.y - a.y))
                } else {
                    None
                }
            })
            .collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        for w in xs.chunks(2) {
            if w.len() == 2 && w[1] - w[0] > 0.0 {
                for t in [0.5, 0.0731, 0.9269] {
                    let p = Vec2::new(w[0] + t * (w[1] - w[0]), y0);
                    if contains_strictly(poly, p) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// A point strictly inside a simple polygon.
pub fn interior_point(poly: &[Vec2]) -> Vec2 {
    interior_samples(poly)
        .first()
        .copied()
        .unwrap_or_else(|| poly.iter().sum::<Vec2>() / poly.len() as f64)
}

/// True when the interiors of the two simple polygons intersect.
pub fn interiors_overlap(a: &[Vec2], b: &[Vec2]) -> bool {
    let na = a.len();
    let nb = b.len();
    for i in 0..na {
        for j in 0..nb {
            if segments_cross_properly(a[i], a[(i + 1) % na], b[j], b[(j + 1) % nb]) {
                return true;
            }
        }
    }
    a.iter().any(|&p| contains_strictly(b, p))
        || b.iter().any(|&p| contains_strictly(a, p))
        || interior_samples(a).into_iter().any(|p| contains_strictly(b, p))
        || interior_samples(b).into_iter().any(|p| contains_strictly(a, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Vec<Vec2> {
        vec![
            Vec2::new(x0, y0),
            Vec2::new(x0 + s, y0),
            Vec2::new(x0 + s, y0 + s),
            Vec2::new(x0, y0 + s),
        ]
    }

    #[test]
    fn orientation_and_simplicity() {
        let sq = square(0.0, 0.0, 1.0);
        assert!(signed_area2(&sq) > 0.0);
        assert!(is_simple(&sq));
        let bowtie = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
        ];
        assert!(!is_simple(&bowtie));
    }

    #[test]
    fn shared_edges_are_not_overlap() {
        let a = square(0.0, 0.0, 1.0);
        let b = square(1.0, 0.0, 1.0);
        assert!(!interiors_overlap(&a, &b));
        let c = square(0.5, 0.5, 1.0);
        assert!(interiors_overlap(&a, &c));
        assert!(interiors_overlap(&a, &a.clone()));
        // One polygon fully inside the other.
        let d = square(0.25, 0.25, 0.5);
        assert!(interiors_overlap(&a, &d));
    }

    #[test]
    fn interior_point_of_concave_polygon() {
        let u = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(3.0, 0.0),
            Vec2::new(3.0, 3.0),
            Vec2::new(2.0, 3.0),
            Vec2::new(2.0, 1.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 3.0),
            Vec2::new(0.0, 3.0),
        ];
        assert!(is_simple(&u));
        let p = interior_point(&u);
        assert!(contains_strictly(&u, p));
        assert!(!contains_strictly(&u, Vec2::new(1.5, 2.0)));
    }
}
