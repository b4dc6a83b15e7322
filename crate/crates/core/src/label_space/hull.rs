//! Incremental 3-D convex hull. On points of the unit sphere the facets are
//! the spherical Delaunay triangulation.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

const EPS: f64 = 1e-10;

#[derive(Clone, Copy)]
struct Face {
    v: [usize; 3],
    normal: Vec3,
    offset: f64,
    alive: bool,
}

fn make_face(p: &[Vec3], a: usize, b: usize, c: usize, inside: Vec3) -> Face {
    let mut v = [a, b, c];
    let mut n = cross(sub(p[b], p[a]), sub(p[c], p[a]));
    if dot(n, sub(inside, p[a])) > 0.0 {
        v.swap(1, 2);
        n = [-n[0], -n[1], -n[2]];
    }
    let len = norm(n);
    let n = [n[0] / len, n[1] / len, n[2] / len];
    Face {
        v,
        normal: n,
        offset: dot(n, p[v[0]]),
        alive: true,
    }
}

/// Outward-oriented triangular facets of the convex hull of `points`.
pub fn convex_hull(points: &[Vec3]) -> Result<Vec<[usize; 3]>> {
    if points.len() < 4 {
        return Err(Error::LabelSpace(format!("convex hull needs 4 points, got {}", points.len())));
    }
    let scale = points.iter().map(|&p| norm(p)).fold(0.0, f64::max).max(1e-300);
    let eps = EPS * scale;

    // initial tetrahedron: two far points, the farthest from their line, the farthest from that plane
    let a = 0;
    let b = (1..points.len())
        .max_by(|&i, &j| norm(sub(points[i], points[a])).total_cmp(&norm(sub(points[j], points[a]))))
        .expect("non-empty");
    let ab = sub(points[b], points[a]);
    let line_dist = |i: usize| norm(cross(ab, sub(points[i], points[a])));
    let c = (0..points.len()).max_by(|&i, &j| line_dist(i).total_cmp(&line_dist(j))).expect("non-empty");
    if line_dist(c) <= eps * norm(ab).max(eps) {
        return Err(Error::LabelSpace("degenerate input: points are collinear".into()));
    }
    let n0 = cross(ab, sub(points[c], points[a]));
    let n0u = {
        let l = norm(n0);
        [n0[0] / l, n0[1] / l, n0[2] / l]
    };
    let plane_dist = |i: usize| dot(n0u, sub(points[i], points[a])).abs();
    let d = (0..points.len()).max_by(|&i, &j| plane_dist(i).total_cmp(&plane_dist(j))).expect("non-empty");
    if plane_dist(d) <= eps {
        return Err(Error::LabelSpace("degenerate input: points are coplanar".into()));
    }
    let inside = [0, 1, 2].map(|k| (points[a][k] + points[b][k] + points[c][k] + points[d][k]) / 4.0);
    let mut faces = vec![
        make_face(points, a, b, c, inside),
        make_face(points, a, b, d, inside),
        make_face(points, a, c, d, inside),
        make_face(points, b, c, d, inside),
    ];
    let seed = [a, b, c, d];

    for (i, &p) in points.iter().enumerate() {
        if seed.contains(&i) {
            continue;
        }
        let visible: Vec<usize> = (0..faces.len())
            .filter(|&f| faces[f].alive && dot(faces[f].normal, p) - faces[f].offset > eps)
            .collect();
        if visible.is_empty() {
            continue;
        }
        // horizon: directed edges of visible faces whose twin is not visible
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for &f in &visible {
            let v = faces[f].v;
            for k in 0..3 {
                *edges.entry((v[k], v[(k + 1) % 3])).or_default() += 1;
            }
            faces[f].alive = false;
        }
        let mut horizon: Vec<(usize, usize)> = edges
            .keys()
            .filter(|&&(u, w)| !edges.contains_key(&(w, u)))
            .copied()
            .collect();
        horizon.sort_unstable();
        for (u, w) in horizon {
            faces.push(make_face(points, u, w, i, inside));
        }
    }
    Ok(faces.into_iter().filter(|f| f.alive).map(|f| f.v).collect())
}
