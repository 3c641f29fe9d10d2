//! Exact planar geometry: vertex enumeration, Minkowski sums and areas of convex polygons.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};
use crate::polytope::HPolytope;

pub type Point = Vector2<f64>;

fn cross(a: &Point, b: &Point) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Counterclockwise vertex cycle of a bounded, full-dimensional polygon `{A x ≤ b}`.
///
/// Each halfplane boundary is clipped by all others; surviving segments are the edges,
/// taken in order of their direction angle.
pub fn vertices_of_hpolygon(p: &HPolytope, tol: f64) -> Result<Vec<Point>> {
    if p.dim() != 2 {
        return Err(Error::Dimension(format!("expected a polygon in R^2, got R^{}", p.dim())));
    }
    let mut lines = Vec::new();
    for i in 0..p.num_rows() {
        let a = Point::new(p.a[(i, 0)], p.a[(i, 1)]);
        let norm = a.norm();
        if norm <= tol {
            if p.b[i] < -tol {
                return Err(Error::Empty);
            }
            continue;
        }
        lines.push((a / norm, p.b[i] / norm));
    }

    let mut edges: Vec<(f64, Point, Point)> = Vec::new();
    for (i, (a, b)) in lines.iter().enumerate() {
        let dir = Point::new(-a.y, a.x);
        let origin = a * *b;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut dead = false;
        for (j, (aj, bj)) in lines.iter().enumerate() {
            if i == j {
                continue;
            }
            let slope = aj.dot(&dir);
            let slack = bj - aj.dot(&origin);
            if slope.abs() <= 1e-14 {
                // parallel: a coincident duplicate is kept only once, by lowest index
                let same = aj.dot(a) > 0.0 && slack.abs() <= tol;
                if slack < -tol || (same && j < i) {
                    dead = true;
                    break;
                }
            } else if slope > 0.0 {
                hi = hi.min(slack / slope);
            } else {
                lo = lo.max(slack / slope);
            }
        }
        if dead || hi - lo <= tol {
            continue;
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Unbounded("polygon".into()));
        }
        edges.push((dir.y.atan2(dir.x), origin + dir * lo, origin + dir * hi));
    }
    if edges.len() < 3 {
        return Err(Error::Empty);
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut verts: Vec<Point> = Vec::with_capacity(edges.len());
    for (_, start, _) in &edges {
        if verts.last().is_none_or(|v| (v - start).norm() > tol) {
            verts.push(*start);
        }
    }
    while verts.len() > 1 && (verts[0] - verts[verts.len() - 1]).norm() <= tol {
        verts.pop();
    }
    if verts.len() < 3 || polygon_area(&verts) <= tol {
        return Err(Error::Invalid("polygon is not full-dimensional".into()));
    }
    Ok(verts)
}

/// Shoelace area of a counterclockwise cycle.
pub fn polygon_area(verts: &[Point]) -> f64 {
    let n = verts.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n).map(|i| cross(&verts[i], &verts[(i + 1) % n])).sum();
    (0.5 * twice).max(0.0)
}

/// Rotates a cycle to start at its lowest (then leftmost) vertex.
fn start_at_bottom(verts: &[Point]) -> Vec<Point> {
    let k = (0..verts.len())
        .min_by(|&i, &j| verts[i].y.total_cmp(&verts[j].y).then(verts[i].x.total_cmp(&verts[j].x)))
        .unwrap_or(0);
    verts[k..].iter().chain(&verts[..k]).copied().collect()
}

/// Drops vertices whose adjacent edges are collinear.
fn merge_collinear(verts: Vec<Point>) -> Vec<Point> {
    let mut cur = verts;
    loop {
        let n = cur.len();
        if n < 3 {
            return cur;
        }
        let scale = cur.iter().map(|v| v.amax()).fold(1.0, f64::max);
        let keep: Vec<bool> = (0..n)
            .map(|i| {
                let prev = cur[(i + n - 1) % n];
                let next = cur[(i + 1) % n];
                let e1 = cur[i] - prev;
                let e2 = next - cur[i];
                let turns = cross(&e1, &e2).abs() > 1e-12 * scale * scale || e1.dot(&e2) < 0.0;
                e1.norm() > 1e-12 * scale && turns
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return cur;
        }
        cur = cur.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
    }
}

/// Minkowski sum of two convex counterclockwise cycles by merging edges in angle order.
pub fn minkowski_sum_polygons(p: &[Point], q: &[Point]) -> Vec<Point> {
    if p.is_empty() || q.is_empty() {
        return Vec::new();
    }
    let p = start_at_bottom(p);
    let q = start_at_bottom(q);
    let (n, m) = (p.len(), q.len());
    let mut out = Vec::with_capacity(n + m);
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        out.push(p[i % n] + q[j % m]);
        let ep = p[(i + 1) % n] - p[i % n];
        let eq = q[(j + 1) % m] - q[j % m];
        let c = cross(&ep, &eq);
        if j >= m || (i < n && c > 0.0) {
            i += 1;
        } else if i >= n || c < 0.0 {
            j += 1;
        } else {
            i += 1;
            j += 1;
        }
    }
    merge_collinear(out)
}

/// Exact sum of a list of polygons with its area.
pub fn exact_sum(polys: &[HPolytope]) -> Result<(Vec<Point>, f64)> {
    let mut acc: Option<Vec<Point>> = None;
    for p in polys {
        let v = vertices_of_hpolygon(p, 1e-9)?;
        acc = Some(match acc {
            None => v,
            Some(a) => minkowski_sum_polygons(&a, &v),
        });
    }
    let verts = acc.ok_or_else(|| Error::Invalid("no polygons to sum".into()))?;
    let area = polygon_area(&verts);
    Ok((verts, area))
}

/// Counterclockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| (*a - *b).norm() <= 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for p in iter {
            while hull.len() >= start + 2 {
                let k = hull.len();
                if cross(&(hull[k - 1] - hull[k - 2]), &(p - hull[k - 2])) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

/// Vertex cycle of `center + map·X` for a polygon `X` given by its vertices.
pub fn affine_image(verts: &[Point], center: &DVector<f64>, map: &DMatrix<f64>) -> Vec<Point> {
    let c = Point::new(center[0], center[1]);
    let pts: Vec<Point> = verts
        .iter()
        .map(|v| c + Point::new(map[(0, 0)] * v.x + map[(0, 1)] * v.y, map[(1, 0)] * v.x + map[(1, 1)] * v.y))
        .collect();
    convex_hull(&pts)
}

/// `max cᵀx` over the cycle.
pub fn support_value(verts: &[Point], c: &Point) -> f64 {
    verts.iter().map(|v| c.dot(v)).fold(f64::NEG_INFINITY, f64::max)
}

/// Point-in-convex-polygon test with absolute slack `tol` on every edge.
pub fn polygon_contains(verts: &[Point], x: &Point, tol: f64) -> bool {
    let n = verts.len();
    (0..n).all(|i| {
        let a = verts[i];
        let e = verts[(i + 1) % n] - a;
        let len = e.norm();
        len == 0.0 || cross(&e, &(x - a)) / len >= -tol
    })
}
