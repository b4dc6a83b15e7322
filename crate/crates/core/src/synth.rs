//! Procedural multi-task scenes: tilted planar shapes over a fronto-parallel
//! background, with per-pixel class, depth, surface normal and boundary labels
//! that all come from the same shape.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pnm;
use crate::rng::{keyed, stream};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle];

    /// Semantic class; 0 is background.
    pub fn class(self) -> usize {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Rectangle => 2,
            ShapeKind::Triangle => 3,
        }
    }

    /// Depth range of the shape's plane center. Kinds sit at different
    /// typical depths so semantics and geometry are mutually informative.
    fn depth_range(self) -> (f64, f64) {
        match self {
            ShapeKind::Circle => (1.5, 3.5),
            ShapeKind::Rectangle => (3.0, 5.0),
            ShapeKind::Triangle => (4.5, 6.5),
        }
    }

    /// Base albedo; each shape jitters it.
    fn albedo(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.8, 0.35, 0.3],
            ShapeKind::Rectangle => [0.3, 0.7, 0.35],
            ShapeKind::Triangle => [0.35, 0.4, 0.8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Maximum plane tilt away from the viewing axis, radians.
    pub max_tilt: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub background_depth: f64,
    pub light: [f64; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            min_shapes: 1,
            max_shapes: 4,
            kinds: ShapeKind::ALL.to_vec(),
            max_tilt: 0.6,
            depth_min: 1.0,
            depth_max: 8.0,
            background_depth: 7.5,
            light: [0.35, -0.45, 0.82],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

/// One rendered scene. Planar maps are row-major `H x W`; multi-channel maps
/// are channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    pub semseg: Vec<usize>,
    pub depth: Vec<f32>,
    /// `[3, H, W]`, unit length per pixel.
    pub normals: Vec<f32>,
    pub boundary: Vec<u8>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

struct Shape {
    kind: ShapeKind,
    center: [f64; 2],
    /// Circle radius, rectangle half extents, or triangle vertices.
    geom: Geom,
    normal: [f64; 3],
    depth: f64,
    albedo: [f64; 3],
}

enum Geom {
    Circle(f64),
    Rect(f64, f64),
    Tri([[f64; 2]; 3]),
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        match &self.geom {
            Geom::Circle(r) => dx * dx + dy * dy <= r * r,
            Geom::Rect(hx, hy) => dx.abs() <= *hx && dy.abs() <= *hy,
            Geom::Tri(v) => {
                let side = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                s.iter().all(|&x| x >= 0.0) || s.iter().all(|&x| x <= 0.0)
            }
        }
    }

    /// Depth of the tilted plane through the shape center, in normalized
    /// image coordinates scaled to a unit-wide world patch.
    fn depth_at(&self, p: [f64; 2]) -> f64 {
        let n = self.normal;
        self.depth - (n[0] * (p[0] - self.center[0]) + n[1] * (p[1] - self.center[1])) / n[2]
    }
}

fn random_shape<R: Rng>(spec: &SceneSpec, kind: ShapeKind, rng: &mut R) -> Shape {
    let center = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let geom = match kind {
        ShapeKind::Circle => Geom::Circle(rng.gen_range(0.12..0.28)),
        ShapeKind::Rectangle => Geom::Rect(rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)),
        ShapeKind::Triangle => {
            let r = rng.gen_range(0.18..0.35);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut v = [[0.0; 2]; 3];
            for (k, vk) in v.iter_mut().enumerate() {
                let a = phase + k as f64 * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.4..0.4);
                *vk = [center[0] + r * a.cos(), center[1] + r * a.sin()];
            }
            Geom::Tri(v)
        }
    };
    let tilt = rng.gen_range(0.0..spec.max_tilt);
    let azimuth: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let normal = [tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), tilt.cos()];
    let (lo, hi) = kind.depth_range();
    let base = kind.albedo();
    let albedo = base.map(|c| (c + rng.gen_range(-0.12..0.12)).clamp(0.05, 0.95));
    Shape {
        kind,
        center,
        geom,
        normal,
        depth: rng.gen_range(lo..hi),
        albedo,
    }
}

/// Pixels with an 8-neighbour of a different class.
pub fn boundary_map(semseg: &[usize], height: usize, width: usize) -> Vec<u8> {
    let mut out = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let c = semseg[y * width + x];
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        continue;
                    }
                    if semseg[ny as usize * width + nx as usize] != c {
                        out[y * width + x] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

fn render(spec: &SceneSpec, shapes: &[Shape], rng: &mut impl Rng) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let l = h * w;
    let mut semseg = vec![0usize; l];
    let mut depth = vec![spec.background_depth; l];
    let mut normals = vec![[0.0, 0.0, 1.0]; l];
    let mut albedo = vec![[0.5, 0.5, 0.5]; l];

    // back to front: nearer shapes overwrite farther ones
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by(|&a, &b| shapes[b].depth.total_cmp(&shapes[a].depth));
    for &si in &order {
        let s = &shapes[si];
        for y in 0..h {
            for x in 0..w {
                let p = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64];
                if s.contains(p) {
                    let i = y * w + x;
                    semseg[i] = s.kind.class();
                    depth[i] = s.depth_at(p).clamp(spec.depth_min, spec.depth_max);
                    normals[i] = s.normal;
                    albedo[i] = s.albedo;
                }
            }
        }
    }

    let light = {
        let n = spec.light.iter().map(|x| x * x).sum::<f64>().sqrt();
        spec.light.map(|x| x / n)
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut image = vec![0f32; 3 * l];
    for i in 0..l {
        let n = normals[i];
        let shade = 0.35 + 0.65 * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
        for c in 0..3 {
            let v = albedo[i][c] * shade + noise.sample(rng);
            image[c * l + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let mut nmap = vec![0f32; 3 * l];
    for (i, n) in normals.iter().enumerate() {
        for c in 0..3 {
            nmap[c * l + i] = n[c] as f32;
        }
    }
    Sample {
        height: h,
        width: w,
        image,
        boundary: boundary_map(&semseg, h, w),
        semseg,
        depth: depth.into_iter().map(|d| d as f32).collect(),
        normals: nmap,
    }
}

/// Deterministic scene for `(spec.seed, index)`.
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Sample {
    let mut rng = keyed(spec.seed, stream::DATA, index);
    let count = if spec.kinds.is_empty() || spec.max_shapes == 0 {
        0
    } else {
        rng.gen_range(spec.min_shapes..=spec.max_shapes.max(spec.min_shapes))
    };
    // kinds cycle through a random permutation so small scenes stay varied
    let mut kinds = spec.kinds.clone();
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, rng.gen_range(0..=i));
    }
    let shapes: Vec<Shape> = (0..count).map(|i| random_shape(spec, kinds[i % kinds.len()], &mut rng)).collect();
    render(spec, &shapes, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Index offset; splits never share an index.
    pub fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 40,
        }
    }
}

pub fn dataset(spec: &SceneSpec, count: usize, split: Split) -> Vec<Sample> {
    (0..count as u64).map(|i| generate_sample(spec, split.offset() + i)).collect()
}

/// Writes `image.ppm` plus label PGMs: semseg (class * 85), depth (linear
/// from `depth_min -> 0` to `depth_max -> 255`), normal_x/y/z (`[-1, 1] ->
/// [0, 255]`) and boundary (0 or 255). Returns the written paths.
pub fn export_sample_images(sample: &Sample, spec: &SceneSpec, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let (h, w, l) = (sample.height, sample.width, sample.pixels());
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        pnm::write(&path, &bytes)?;
        files.push(path);
        Ok(())
    };
    let rgb: Vec<u8> = (0..l)
        .flat_map(|i| (0..3).map(move |c| (c, i)))
        .map(|(c, i)| pnm::quantize(sample.image[c * l + i] as f64, 0.0, 1.0))
        .collect();
    put("image.ppm", pnm::ppm_bytes(w, h, &rgb))?;
    let sem: Vec<u8> = sample.semseg.iter().map(|&c| (c * 85).min(255) as u8).collect();
    put("semseg.pgm", pnm::pgm_bytes(w, h, &sem))?;
    let depth: Vec<u8> = sample.depth.iter().map(|&d| pnm::quantize(d as f64, spec.depth_min, spec.depth_max)).collect();
    put("depth.pgm", pnm::pgm_bytes(w, h, &depth))?;
    for (c, axis) in ["x", "y", "z"].iter().enumerate() {
        let n: Vec<u8> = sample.normals[c * l..(c + 1) * l].iter().map(|&v| pnm::quantize(v as f64, -1.0, 1.0)).collect();
        put(&format!("normal_{axis}.pgm"), pnm::pgm_bytes(w, h, &n))?;
    }
    let b: Vec<u8> = sample.boundary.iter().map(|&v| v * 255).collect();
    put("boundary.pgm", pnm::pgm_bytes(w, h, &b))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent edge detector: compares shifted copies of the label map.
    fn edge_oracle(sem: &[usize], h: usize, w: usize) -> Vec<u8> {
        let get = |y: i64, x: i64| -> Option<usize> {
            (y >= 0 && x >= 0 && y < h as i64 && x < w as i64).then(|| sem[y as usize * w + x as usize])
        };
        let mut out = vec![0u8; h * w];
        let shifts = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        for (dy, dx) in shifts {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if let Some(n) = get(y + dy, x + dx) {
                        if n != sem[y as usize * w + x as usize] {
                            out[y as usize * w + x as usize] = 1;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn empty_scene() {
        let spec = SceneSpec {
            min_shapes: 0,
            max_shapes: 0,
            ..Default::default()
        };
        let s = generate_sample(&spec, 3);
        assert!(s.semseg.iter().all(|&c| c == 0));
        assert!(s.boundary.iter().all(|&b| b == 0));
        assert!(s.depth.iter().all(|&d| d == 7.5));
        let l = s.pixels();
        assert!(s.normals[..2 * l].iter().all(|&v| v == 0.0));
        assert!(s.normals[2 * l..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_and_split_disjoint() {
        let spec = SceneSpec::default();
        assert_eq!(generate_sample(&spec, 17), generate_sample(&spec, 17));
        assert_ne!(generate_sample(&spec, 17), generate_sample(&spec, 18));
        assert!(dataset(&spec, 0, Split::Train).is_empty());
        let tr = dataset(&spec, 5, Split::Train);
        let te = dataset(&spec, 5, Split::Test);
        for a in &tr {
            assert!(te.iter().all(|b| a != b));
        }
    }

    #[test]
    fn label_invariants() {
        let spec = SceneSpec::default();
        for i in 0..50 {
            let s = generate_sample(&spec, i);
            let l = s.pixels();
            for p in 0..l {
                let n = [s.normals[p], s.normals[l + p], s.normals[2 * l + p]];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((len - 1.0).abs() < 1e-5);
                assert!(s.depth[p] >= 1.0 && s.depth[p] <= 8.0);
                if s.semseg[p] == 0 {
                    assert_eq!(s.depth[p], 7.5);
                    assert_eq!(n, [0.0, 0.0, 1.0]);
                }
            }
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.boundary, edge_oracle(&s.semseg, s.height, s.width));
        }
    }

    #[test]
    fn class_statistics_over_1000_samples() {
        let spec = SceneSpec::default();
        let mut pixels = [0usize; NUM_CLASSES];
        let mut present = [0usize; NUM_CLASSES];
        let mut depth_sum = [0f64; NUM_CLASSES];
        for s in dataset(&spec, 1000, Split::Train) {
            let mut seen = [false; NUM_CLASSES];
            for (p, &c) in s.semseg.iter().enumerate() {
                pixels[c] += 1;
                seen[c] = true;
                depth_sum[c] += s.depth[p] as f64;
            }
            for c in 0..NUM_CLASSES {
                present[c] += seen[c] as usize;
            }
        }
        assert!((1..NUM_CLASSES).all(|c| pixels[0] > pixels[c]), "{pixels:?}");
        assert!((1..NUM_CLASSES).all(|c| present[c] > 500), "{present:?}");
        let means: Vec<f64> = (0..NUM_CLASSES).map(|c| depth_sum[c] / pixels[c] as f64).collect();
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                assert!((means[a] - means[b]).abs() > 0.5, "{means:?}");
            }
        }
    }

    #[test]
    fn export_is_byte_stable() {
        let spec = SceneSpec::default();
        let s = generate_sample(&spec, 2);
        let dir = tempfile::tempdir().unwrap();
        let a = export_sample_images(&s, &spec, dir.path().join("a")).unwrap();
        let b = export_sample_images(&s, &spec, dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        assert_eq!(pnm::quantize(1.0, 1.0, 8.0), 0);
        assert_eq!(pnm::quantize(8.0, 1.0, 8.0), 255);
        assert_eq!(pnm::quantize(-1.0, -1.0, 1.0), 0);
    }
}
