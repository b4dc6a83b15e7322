use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hull::{convex_hull, cross, dot, norm, sub, Vec3};
use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 50;

/// Unit codewords plus the hull triangles over them.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalCodebook {
    pub codewords: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

/// Result of a spherical k-means fit.
#[derive(Clone, Debug)]
pub struct CodebookFit {
    pub codebook: NormalCodebook,
    /// Mean cosine between each input and its assigned codeword, per iteration.
    pub objective: Vec<f64>,
}

fn normalize(v: Vec3) -> Vec3 {
    let l = norm(v);
    [v[0] / l, v[1] / l, v[2] / l]
}

fn nearest(codewords: &[Vec3], n: Vec3) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &c) in codewords.iter().enumerate() {
        let s = dot(c, n);
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

/// Spherical k-means: cosine assignment, renormalized-mean updates, empty
/// clusters reseeded at the worst-fit input. Seeds with farthest-point
/// selection from a random start.
pub fn fit_normal_codebook(normals: &[Vec3], k: usize, seed: u64) -> Result<CodebookFit> {
    if k == 0 {
        return Err(Error::LabelSpace("codebook size must be positive".into()));
    }
    if normals.iter().any(|n| !(norm(*n) > 0.0) || n.iter().any(|x| !x.is_finite())) {
        return Err(Error::LabelSpace("normals must be finite and non-zero".into()));
    }
    let pts: Vec<Vec3> = normals.iter().map(|&n| normalize(n)).collect();
    let distinct: HashSet<[u64; 3]> = pts.iter().map(|p| p.map(f64::to_bits)).collect();
    if distinct.len() < k.max(2) {
        return Err(Error::LabelSpace(format!(
            "degenerate input: {} distinct normals for {k} codewords",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codewords = vec![pts[rng.gen_range(0..pts.len())]];
    let mut closest: Vec<f64> = pts.iter().map(|&p| dot(p, codewords[0])).collect();
    while codewords.len() < k {
        let (far, _) = closest
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |b, (i, &c)| if c < b.1 { (i, c) } else { b });
        let c = pts[far];
        for (cl, &p) in closest.iter_mut().zip(&pts) {
            *cl = cl.max(dot(p, c));
        }
        codewords.push(c);
    }

    let mut assign = vec![usize::MAX; pts.len()];
    let mut objective = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut score = vec![0.0; pts.len()];
        for (i, &p) in pts.iter().enumerate() {
            let (c, s) = nearest(&codewords, p);
            changed |= assign[i] != c;
            assign[i] = c;
            score[i] = s;
        }
        objective.push(score.iter().sum::<f64>() / pts.len() as f64);
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assign.iter().zip(&pts) {
            counts[a] += 1;
            for d in 0..3 {
                sums[a][d] += p[d];
            }
        }
        let mut taken = HashSet::new();
        for c in 0..k {
            if counts[c] == 0 {
                let worst = (0..pts.len())
                    .filter(|i| !taken.contains(i))
                    .min_by(|&a, &b| score[a].total_cmp(&score[b]))
                    .expect("more inputs than clusters");
                taken.insert(worst);
                codewords[c] = pts[worst];
            } else if norm(sums[c]) > 1e-12 {
                codewords[c] = normalize(sums[c]);
            }
        }
    }
    let triangles = if k >= 4 { convex_hull(&codewords)? } else { Vec::new() };
    Ok(CodebookFit {
        codebook: NormalCodebook { codewords, triangles },
        objective,
    })
}

impl NormalCodebook {
    /// Builds a codebook over given unit codewords.
    pub fn from_codewords(codewords: Vec<Vec3>) -> Result<Self> {
        let triangles = convex_hull(&codewords)?;
        Ok(NormalCodebook { codewords, triangles })
    }

    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    /// Index of the codeword with the largest cosine to `n` (lowest index on ties).
    pub fn nearest(&self, n: Vec3) -> usize {
        nearest(&self.codewords, n).0
    }

    /// Coefficients `(u, v, w)` with `n = u a + v b + w c` for facet `f`.
    fn cone_coords(&self, f: usize, n: Vec3) -> Option<[f64; 3]> {
        let [a, b, c] = self.triangles[f].map(|i| self.codewords[i]);
        let det = dot(a, cross(b, c));
        if det.abs() < 1e-300 {
            return None;
        }
        Some([dot(n, cross(b, c)) / det, dot(a, cross(n, c)) / det, dot(a, cross(b, n)) / det])
    }

    fn facing(&self, f: usize, n: Vec3) -> bool {
        let [a, b, c] = self.triangles[f].map(|i| self.codewords[i]);
        dot(cross(sub(b, a), sub(c, a)), n) > 0.0
    }

    /// Triangular coding: barycentric weights of the point where the ray
    /// along `n` meets the facet whose cone contains it. Returns one weight
    /// per codeword, at most three non-zero.
    pub fn encode(&self, n: Vec3) -> Result<Vec<f64>> {
        if self.triangles.is_empty() {
            return Err(Error::LabelSpace("codebook has no triangulation".into()));
        }
        let n = normalize(n);
        let mut chosen: Option<(usize, [f64; 3])> = None;
        let mut fallback: Option<(usize, [f64; 3], f64)> = None;
        for f in 0..self.triangles.len() {
            if !self.facing(f, n) {
                continue;
            }
            let Some(uvw) = self.cone_coords(f, n) else { continue };
            let s = uvw[0] + uvw[1] + uvw[2];
            if s <= 0.0 {
                continue;
            }
            let bary = uvw.map(|x| x / s);
            let worst = bary.iter().copied().fold(f64::INFINITY, f64::min);
            if worst >= -1e-12 {
                chosen = Some((f, bary));
                break;
            }
            if fallback.as_ref().is_none_or(|fb| worst > fb.2) {
                fallback = Some((f, bary, worst));
            }
        }
        let mut out = vec![0.0; self.len()];
        let Some((f, bary)) = chosen.or(fallback.map(|(f, b, _)| (f, b))) else {
            out[self.nearest(n)] = 1.0;
            return Ok(out);
        };
        let clamped = bary.map(|x| x.max(0.0));
        let total: f64 = clamped.iter().sum();
        for (&i, w) in self.triangles[f].iter().zip(clamped) {
            out[i] = w / total;
        }
        Ok(out)
    }

    /// Facet with the largest total probability (lowest index on ties).
    pub fn best_facet(&self, probs: &[f64]) -> Result<usize> {
        if probs.len() != self.len() || self.triangles.is_empty() {
            return Err(Error::LabelSpace("probability vector does not match the codebook".into()));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (f, t) in self.triangles.iter().enumerate() {
            let s = probs[t[0]] + probs[t[1]] + probs[t[2]];
            if s > best.1 {
                best = (f, s);
            }
        }
        Ok(best.0)
    }

    /// Inverse of [`NormalCodebook::encode`]: renormalized weighted sum of the
    /// best facet's codewords.
    pub fn decode(&self, probs: &[f64]) -> Result<Vec3> {
        if probs.iter().any(|&p| !(p >= 0.0)) || probs.iter().all(|&p| p == 0.0) {
            return Err(Error::LabelSpace("probabilities must be non-negative and not all zero".into()));
        }
        let f = self.best_facet(probs)?;
        let t = self.triangles[f];
        let w = t.map(|i| probs[i]);
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::LabelSpace("selected facet carries no probability".into()));
        }
        let nonzero: Vec<usize> = (0..3).filter(|&j| w[j] > 0.0).collect();
        if nonzero.len() == 1 {
            return Ok(self.codewords[t[nonzero[0]]]);
        }
        let mut v = [0.0; 3];
        for (j, &i) in t.iter().enumerate() {
            for d in 0..3 {
                v[d] += w[j] / total * self.codewords[i][d];
            }
        }
        Ok(normalize(v))
    }
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}
