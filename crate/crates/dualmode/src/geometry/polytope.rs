use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::RigidPose2;
use crate::{Error, Result};

/// Tolerance for geometric predicates (feasibility, dedup), in meters.
/// Must sit well below the 1e-6 m side of the tiny boxes used as point
/// obstacles, and well above f64 roundoff at track scale (~1e2 m).
const GEOM_EPS: f64 = 1e-9;

/// Side length of the box standing in for a point obstacle.
pub const POINT_BOX_SIDE: f64 = 1e-6;

/// Bounded intersection of halfspaces `{x | D x <= b}` with unit-norm rows.
///
/// Rows are normalized at construction so every offset and every slack is
/// a distance in meters. Construction rejects empty, unbounded, and
/// zero-area inputs; the vertex list (counterclockwise) is cached because
/// both the distance query and the certificate solve walk it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "HalfspaceRecord", into = "HalfspaceRecord")]
pub struct ConvexPolytope {
    normals: Vec<Vector2<f64>>,
    offsets: Vec<f64>,
    vertices: Vec<Vector2<f64>>,
}

/// On-disk form: one `[normal_x, normal_y, offset]` triple per facet.
#[derive(Serialize, Deserialize)]
struct HalfspaceRecord {
    facets: Vec<[f64; 3]>,
}

impl TryFrom<HalfspaceRecord> for ConvexPolytope {
    type Error = Error;

    fn try_from(record: HalfspaceRecord) -> Result<Self> {
        let rows: Vec<(Vector2<f64>, f64)> = record
            .facets
            .iter()
            .map(|&[nx, ny, c]| (Vector2::new(nx, ny), c))
            .collect();
        ConvexPolytope::from_halfspaces(&rows)
    }
}

impl From<ConvexPolytope> for HalfspaceRecord {
    fn from(poly: ConvexPolytope) -> Self {
        let facets = poly
            .normals
            .iter()
            .zip(&poly.offsets)
            .map(|(n, &c)| [n.x, n.y, c])
            .collect();
        HalfspaceRecord { facets }
    }
}

impl ConvexPolytope {
    /// Build from halfspace rows `(normal, offset)` meaning `normal . x <= offset`.
    ///
    /// Rows are rescaled to unit normals. Fails unless the intersection is
    /// nonempty, bounded, and has positive area.
    pub fn from_halfspaces(rows: &[(Vector2<f64>, f64)]) -> Result<Self> {
        if rows.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "polytope needs at least 3 halfspaces, got {}",
                rows.len()
            )));
        }
        let mut normals = Vec::with_capacity(rows.len());
        let mut offsets = Vec::with_capacity(rows.len());
        for (i, (n, c)) in rows.iter().enumerate() {
            let norm = n.norm();
            if !norm.is_finite() || norm < GEOM_EPS || !c.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "halfspace row {i} is degenerate or non-finite"
                )));
            }
            normals.push(n / norm);
            offsets.push(c / norm);
        }

        // Bounded iff the unit normals positively span the plane: no open
        // half-circle of directions is free of a normal.
        let mut angles: Vec<f64> = normals.iter().map(|n| n.y.atan2(n.x)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
        let mut max_gap: f64 = 0.0;
        for i in 0..angles.len() {
            let next = if i + 1 == angles.len() {
                angles[0] + std::f64::consts::TAU
            } else {
                angles[i + 1]
            };
            max_gap = max_gap.max(next - angles[i]);
        }
        if max_gap >= std::f64::consts::PI - 1e-12 {
            return Err(Error::InvalidArgument(
                "halfspace intersection is unbounded".into(),
            ));
        }

        let vertices = enumerate_vertices(&normals, &offsets)?;
        Ok(Self {
            normals,
            offsets,
            vertices,
        })
    }

    /// Internal constructor for rigid images of an existing polytope:
    /// rows and vertices are already consistent, skip re-enumeration.
    fn from_parts(
        normals: Vec<Vector2<f64>>,
        offsets: Vec<f64>,
        vertices: Vec<Vector2<f64>>,
    ) -> Self {
        Self {
            normals,
            offsets,
            vertices,
        }
    }

    pub fn num_facets(&self) -> usize {
        self.normals.len()
    }

    /// Unit outward normal of facet `i`.
    pub fn normal(&self, i: usize) -> Vector2<f64> {
        self.normals[i]
    }

    /// Offset of facet `i` in meters.
    pub fn offset(&self, i: usize) -> f64 {
        self.offsets[i]
    }

    /// Facet normals stacked as an m x 2 matrix.
    pub fn normals_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_facets(), 2, |i, j| self.normals[i][j])
    }

    /// Facet offsets as a length-m vector.
    pub fn offsets_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.offsets)
    }

    /// Cached vertices in counterclockwise order.
    pub fn vertices(&self) -> &[Vector2<f64>] {
        &self.vertices
    }

    pub fn contains(&self, point: Vector2<f64>, tol: f64) -> bool {
        self.normals
            .iter()
            .zip(&self.offsets)
            .all(|(n, &c)| n.dot(&point) <= c + tol)
    }

    /// Largest `direction . x` over the set (support function; `direction`
    /// need not be unit).
    pub fn support(&self, direction: Vector2<f64>) -> f64 {
        self.vertices
            .iter()
            .map(|v| direction.dot(v))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Vertex attaining [`Self::support`]; ties break to the lowest index.
    pub fn support_point(&self, direction: Vector2<f64>) -> Vector2<f64> {
        let mut best = self.vertices[0];
        let mut best_val = direction.dot(&best);
        for v in &self.vertices[1..] {
            let val = direction.dot(v);
            if val > best_val {
                best_val = val;
                best = *v;
            }
        }
        best
    }

    /// Vertex centroid; strictly interior because the area is positive.
    pub fn centroid(&self) -> Vector2<f64> {
        self.vertices.iter().sum::<Vector2<f64>>() / self.vertices.len() as f64
    }

    /// Facet indices tight at `point` (slack below `tol`).
    pub fn active_facets(&self, point: Vector2<f64>, tol: f64) -> Vec<usize> {
        (0..self.num_facets())
            .filter(|&i| (self.offsets[i] - self.normals[i].dot(&point)).abs() <= tol)
            .collect()
    }
}

/// Axis-aligned, origin-centered rectangle: `|x| <= length/2, |y| <= width/2`.
pub fn rectangle_polytope(length: f64, width: f64) -> Result<ConvexPolytope> {
    if !(length > 0.0) || !(width > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rectangle dimensions must be positive, got {length} x {width}"
        )));
    }
    ConvexPolytope::from_halfspaces(&[
        (Vector2::new(1.0, 0.0), 0.5 * length),
        (Vector2::new(-1.0, 0.0), 0.5 * length),
        (Vector2::new(0.0, 1.0), 0.5 * width),
        (Vector2::new(0.0, -1.0), 0.5 * width),
    ])
}

/// Tiny box standing in for a point at `center`, so point obstacles can
/// flow through the polytope code paths.
pub fn point_polytope(center: Vector2<f64>) -> ConvexPolytope {
    let body = rectangle_polytope(POINT_BOX_SIDE, POINT_BOX_SIDE)
        .expect("fixed positive dimensions");
    transform_to_world(&body, &RigidPose2::new(center.x, center.y, 0.0))
}

/// Image of a body-frame polytope under a rigid pose.
///
/// `{z | G z <= h}` maps to `{x | G R^T x <= h + G R^T p}`; unit rows stay
/// unit because `R` is a rotation, and cached vertices map directly.
pub fn transform_to_world(body: &ConvexPolytope, pose: &RigidPose2) -> ConvexPolytope {
    let rot: Matrix2<f64> = pose.rotation();
    let normals: Vec<Vector2<f64>> = body.normals.iter().map(|g| rot * g).collect();
    let offsets: Vec<f64> = body
        .normals
        .iter()
        .zip(&body.offsets)
        .map(|(g, &h)| h + (rot * g).dot(&pose.position))
        .collect();
    let vertices = body.vertices.iter().map(|v| pose.to_world(*v)).collect();
    ConvexPolytope::from_parts(normals, offsets, vertices)
}

/// Exact Euclidean distance between two convex polytopes; 0 iff they
/// intersect.
///
/// Disjointness is decided by separating-axis tests over both facet-normal
/// sets (exact for convex polygons); the positive distance is then the
/// minimum over vertex-to-edge distances in both directions, which covers
/// vertex-vertex closest pairs through segment endpoints.
pub fn min_distance(a: &ConvexPolytope, b: &ConvexPolytope) -> f64 {
    if sat_overlap(a, b) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for v in a.vertices() {
        for (p, q) in edges(b) {
            best = best.min(point_segment_distance(*v, p, q));
        }
    }
    for v in b.vertices() {
        for (p, q) in edges(a) {
            best = best.min(point_segment_distance(*v, p, q));
        }
    }
    best
}

/// True iff no facet normal of either polytope separates the vertex sets.
fn sat_overlap(a: &ConvexPolytope, b: &ConvexPolytope) -> bool {
    let axes = a.normals.iter().chain(b.normals.iter());
    for axis in axes {
        let (a_lo, a_hi) = projection_interval(a, *axis);
        let (b_lo, b_hi) = projection_interval(b, *axis);
        if a_hi < b_lo || b_hi < a_lo {
            return false;
        }
    }
    true
}

fn projection_interval(poly: &ConvexPolytope, axis: Vector2<f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in poly.vertices() {
        let t = axis.dot(v);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    (lo, hi)
}

fn edges(poly: &ConvexPolytope) -> impl Iterator<Item = (Vector2<f64>, Vector2<f64>)> + '_ {
    let vs = poly.vertices();
    (0..vs.len()).map(move |i| (vs[i], vs[(i + 1) % vs.len()]))
}

fn point_segment_distance(point: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (point - a).norm();
    }
    let t = ((point - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (point - (a + ab * t)).norm()
}

/// All pairwise facet intersections that satisfy every halfspace, deduped
/// and sorted counterclockwise around the centroid.
fn enumerate_vertices(normals: &[Vector2<f64>], offsets: &[f64]) -> Result<Vec<Vector2<f64>>> {
    let m = normals.len();
    let mut vertices: Vec<Vector2<f64>> = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            let det = normals[i].x * normals[j].y - normals[i].y * normals[j].x;
            if det.abs() < 1e-12 {
                continue;
            }
            let x = (offsets[i] * normals[j].y - normals[i].y * offsets[j]) / det;
            let y = (normals[i].x * offsets[j] - offsets[i] * normals[j].x) / det;
            let cand = Vector2::new(x, y);
            let feasible = normals
                .iter()
                .zip(offsets)
                .all(|(n, &c)| n.dot(&cand) <= c + GEOM_EPS);
            if feasible && !vertices.iter().any(|v| (v - cand).norm() < GEOM_EPS) {
                vertices.push(cand);
            }
        }
    }
    if vertices.len() < 3 {
        return Err(Error::InvalidArgument(
            "halfspace intersection is empty or has empty interior".into(),
        ));
    }
    let centroid = vertices.iter().sum::<Vector2<f64>>() / vertices.len() as f64;
    vertices.sort_by(|u, v| {
        let au = (u.y - centroid.y).atan2(u.x - centroid.x);
        let av = (v.y - centroid.y).atan2(v.x - centroid.x);
        au.partial_cmp(&av).expect("finite angles")
    });
    let area = polygon_area(&vertices);
    if area <= 0.0 {
        return Err(Error::InvalidArgument(
            "halfspace intersection has zero area".into(),
        ));
    }
    Ok(vertices)
}

fn polygon_area(vertices: &[Vector2<f64>]) -> f64 {
    let mut twice = 0.0;
    for i in 0..vertices.len() {
        let u = vertices[i];
        let v = vertices[(i + 1) % vertices.len()];
        twice += u.x * v.y - u.y * v.x;
    }
    0.5 * twice
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn unit_square_at(cx: f64, cy: f64) -> ConvexPolytope {
        let body = rectangle_polytope(1.0, 1.0).unwrap();
        transform_to_world(&body, &RigidPose2::new(cx, cy, 0.0))
    }

    #[test]
    fn rectangle_halfspaces_and_membership() {
        let r = rectangle_polytope(2.0, 1.0).unwrap();
        assert_eq!(r.num_facets(), 4);
        assert!(r.contains(Vector2::new(0.99, 0.49), 0.0));
        assert!(!r.contains(Vector2::new(1.01, 0.0), 1e-9));

        let sq = rectangle_polytope(2.0, 2.0).unwrap();
        assert!(sq.contains(Vector2::new(0.99, 0.99), 0.0));
        assert!(!sq.contains(Vector2::new(1.01, 0.0), 1e-9));

        let car = rectangle_polytope(4.5, 2.0).unwrap();
        assert!(car.contains(Vector2::new(2.24, 0.99), 0.0));
        assert!(!car.contains(Vector2::new(2.26, 0.0), 1e-9));
    }

    #[test]
    fn rectangle_rejects_non_positive_dimensions() {
        assert!(rectangle_polytope(0.0, 1.0).is_err());
        assert!(rectangle_polytope(1.0, -2.0).is_err());
        assert!(rectangle_polytope(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn construction_rejects_unbounded_and_empty() {
        // Strip: only +-x constraints.
        let strip = ConvexPolytope::from_halfspaces(&[
            (Vector2::new(1.0, 0.0), 1.0),
            (Vector2::new(-1.0, 0.0), 1.0),
            (Vector2::new(1.0, 1.0), 10.0),
        ]);
        assert!(strip.is_err());
        // Empty: x <= -1 and -x <= -1 cannot both hold.
        let empty = ConvexPolytope::from_halfspaces(&[
            (Vector2::new(1.0, 0.0), -1.0),
            (Vector2::new(-1.0, 0.0), -1.0),
            (Vector2::new(0.0, 1.0), 1.0),
            (Vector2::new(0.0, -1.0), 1.0),
        ]);
        assert!(empty.is_err());
    }

    #[test]
    fn redundant_rows_do_not_change_the_vertex_set() {
        let r = ConvexPolytope::from_halfspaces(&[
            (Vector2::new(1.0, 0.0), 1.0),
            (Vector2::new(-1.0, 0.0), 1.0),
            (Vector2::new(0.0, 1.0), 1.0),
            (Vector2::new(0.0, -1.0), 1.0),
            (Vector2::new(2.0, 0.0), 10.0),
        ])
        .unwrap();
        assert_eq!(r.vertices().len(), 4);
    }

    #[test]
    fn vertices_are_counterclockwise() {
        let r = rectangle_polytope(2.0, 1.0).unwrap();
        assert!(polygon_area(r.vertices()) > 0.0);
        let rot = transform_to_world(&r, &RigidPose2::new(3.0, -1.0, 0.8));
        assert!(polygon_area(rot.vertices()) > 0.0);
    }

    #[test]
    fn transform_identity_and_translation() {
        let body = rectangle_polytope(2.0, 1.0).unwrap();
        let same = transform_to_world(&body, &RigidPose2::identity());
        for (u, v) in body.vertices().iter().zip(same.vertices()) {
            assert!((u - v).norm() < 1e-12);
        }
        let moved = transform_to_world(&body, &RigidPose2::new(1.0, 2.0, 0.0));
        assert!(moved.contains(Vector2::new(1.9, 2.4), 1e-12));
        assert!(!moved.contains(Vector2::new(-0.1, 2.0), 1e-9));
    }

    #[test]
    fn transform_quarter_turn_swaps_extents() {
        let body = rectangle_polytope(2.0, 1.0).unwrap();
        let turned = transform_to_world(&body, &RigidPose2::new(0.0, 0.0, FRAC_PI_2));
        assert!(turned.contains(Vector2::new(0.4, 0.9), 1e-12));
        assert!(!turned.contains(Vector2::new(0.9, 0.4), 1e-9));
    }

    #[test]
    fn transform_preserves_membership_map() {
        let body = rectangle_polytope(3.0, 1.4).unwrap();
        let pose = RigidPose2::new(-2.0, 5.0, 2.3);
        let world = transform_to_world(&body, &pose);
        let samples = [
            Vector2::new(0.0, 0.0),
            Vector2::new(1.49, 0.69),
            Vector2::new(1.6, 0.0),
            Vector2::new(-1.2, -0.7),
            Vector2::new(0.3, 0.71),
        ];
        for z in samples {
            let inside_body = body.contains(z, 0.0);
            let inside_world = world.contains(pose.to_world(z), 1e-9);
            if inside_body {
                assert!(inside_world);
            }
            if !body.contains(z, 1e-6) {
                assert!(!world.contains(pose.to_world(z), 1e-9));
            }
        }
    }

    #[test]
    fn distance_axis_aligned_gap() {
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(3.0, 0.0);
        assert!((min_distance(&a, &b) - 2.0).abs() < 1e-12);
        assert!((min_distance(&b, &a) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn distance_zero_on_overlap_and_touch() {
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(0.6, 0.2);
        assert_eq!(min_distance(&a, &b), 0.0);
        let touching = unit_square_at(1.0, 0.0);
        assert_eq!(min_distance(&a, &touching), 0.0);
    }

    #[test]
    fn distance_rotated_square_gap() {
        // Unit square at origin vs unit square rotated 45 deg centered at
        // (3, 0): gap is 3 - 1/2 - sqrt(2)/2.
        let a = unit_square_at(0.0, 0.0);
        let body = rectangle_polytope(1.0, 1.0).unwrap();
        let b = transform_to_world(&body, &RigidPose2::new(3.0, 0.0, std::f64::consts::FRAC_PI_4));
        let expected = 3.0 - 0.5 - std::f64::consts::SQRT_2 / 2.0;
        assert!((min_distance(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn distance_vertex_to_vertex_case() {
        // Diagonal offset: closest features are two corners.
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(2.0, 2.0);
        let expected = std::f64::consts::SQRT_2;
        assert!((min_distance(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn point_polytope_behaves_like_a_point() {
        let p = point_polytope(Vector2::new(2.0, 1.0));
        let sq = unit_square_at(0.0, 0.0);
        // Closest square point to (2, 1) is the corner (0.5, 0.5).
        let expected: f64 = Vector2::new(1.5_f64, 0.5).norm();
        assert!((min_distance(&p, &sq) - expected).abs() < 1e-5);
    }

    #[test]
    fn halfspace_record_round_trip() {
        let body = rectangle_polytope(4.5, 2.0).unwrap();
        let world = transform_to_world(&body, &RigidPose2::new(1.0, -2.0, 0.4));
        let text = toml::to_string(&world).unwrap();
        let back: ConvexPolytope = toml::from_str(&text).unwrap();
        assert_eq!(back.num_facets(), world.num_facets());
        // Deserialization re-enumerates vertices, so compare as sets.
        for u in world.vertices() {
            assert!(back.vertices().iter().any(|v| (u - v).norm() < 1e-9));
        }
    }
}
