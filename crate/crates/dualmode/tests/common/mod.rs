//! Shared helpers for the integration suites. The distance oracle here is
//! deliberately independent of the library: it works on plain vertex lists
//! the tests generated themselves, with its own hull, normals, and support
//! evaluations.

#![allow(dead_code)]

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type V2 = Vector2<f64>;

/// Andrew monotone chain; returns the hull counterclockwise, collinear
/// points dropped.
pub fn convex_hull(points: &[V2]) -> Vec<V2> {
    let mut pts: Vec<V2> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: V2, a: V2, b: V2| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut lower: Vec<V2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<V2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn polygon_area(vertices: &[V2]) -> f64 {
    let mut twice = 0.0;
    for i in 0..vertices.len() {
        let u = vertices[i];
        let v = vertices[(i + 1) % vertices.len()];
        twice += u.x * v.y - u.y * v.x;
    }
    0.5 * twice
}

/// Outward unit edge normals of a counterclockwise polygon, paired with
/// offsets, as `(normal, offset)` halfspace rows.
pub fn edge_halfspaces(vertices: &[V2]) -> Vec<(V2, f64)> {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let e = vertices[(i + 1) % n] - vertices[i];
            let normal = Vector2::new(e.y, -e.x).normalize();
            (normal, normal.dot(&vertices[i]))
        })
        .collect()
}

/// Signed separation `max_d [min_b d.b - max_a d.a]` over unit directions.
///
/// Candidate directions: every normalized vertex difference, every edge
/// normal of either polygon (both signs), plus a dense ring. The vertex
/// differences and edge normals contain the true maximizer for convex
/// polygons, so the result is exact to machine precision; the dense ring is
/// a guard against that enumeration being wrong.
pub fn oracle_separation(a: &[V2], b: &[V2]) -> f64 {
    let mut dirs: Vec<V2> = Vec::new();
    for va in a {
        for vb in b {
            let d = vb - va;
            if d.norm() > 1e-12 {
                dirs.push(d / d.norm());
            }
        }
    }
    for (n, _) in edge_halfspaces(a).into_iter().chain(edge_halfspaces(b)) {
        dirs.push(n);
        dirs.push(-n);
    }
    let ring = 1024;
    for k in 0..ring {
        let t = std::f64::consts::TAU * k as f64 / ring as f64;
        dirs.push(Vector2::new(t.cos(), t.sin()));
    }

    let mut best = f64::NEG_INFINITY;
    for d in dirs {
        let min_b = b.iter().map(|v| d.dot(v)).fold(f64::INFINITY, f64::min);
        let max_a = a.iter().map(|v| d.dot(v)).fold(f64::NEG_INFINITY, f64::max);
        best = best.max(min_b - max_a);
    }
    best
}

/// Random convex polygon with well-separated vertices and no near-parallel
/// adjacent edges, so downstream numerics stay far from conditioning cliffs.
pub fn random_polygon(rng: &mut ChaCha8Rng) -> Vec<V2> {
    loop {
        let k = rng.gen_range(4..=10);
        let points: Vec<V2> = (0..k)
            .map(|_| Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let hull = convex_hull(&points);
        if hull.len() < 3 || polygon_area(&hull) < 0.3 {
            continue;
        }
        let n = hull.len();
        let min_edge = (0..n)
            .map(|i| (hull[(i + 1) % n] - hull[i]).norm())
            .fold(f64::INFINITY, f64::min);
        if min_edge < 0.05 {
            continue;
        }
        let normals: Vec<V2> = edge_halfspaces(&hull).into_iter().map(|(n, _)| n).collect();
        let min_turn = (0..n)
            .map(|i| {
                let a = normals[i];
                let b = normals[(i + 1) % n];
                a.perp(&b).abs().atan2(a.dot(&b))
            })
            .fold(f64::INFINITY, f64::min);
        if min_turn < 0.05 {
            continue;
        }
        return hull;
    }
}

/// Rigid transform applied with the test's own arithmetic.
pub fn transform_vertices(vertices: &[V2], x: f64, y: f64, theta: f64) -> Vec<V2> {
    let (s, c) = theta.sin_cos();
    vertices
        .iter()
        .map(|v| Vector2::new(c * v.x - s * v.y + x, s * v.x + c * v.y + y))
        .collect()
}
