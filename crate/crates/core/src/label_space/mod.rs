//! Partitions of each task's label space into disjoint regions.

mod depth;
mod hull;
mod normals;

pub use depth::{DepthBinning, RANGE_MARGIN};
pub use hull::{convex_hull, Vec3};
pub use normals::{angle_deg, fit_normal_codebook, CodebookFit, NormalCodebook, KMEANS_MAX_ITERS};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum RegionKind {
    /// Classification tasks: one region per class.
    Class { count: usize },
    DepthBins(DepthBinning),
    NormalCodewords(NormalCodebook),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRegionSpec {
    pub kind: RegionKind,
}

/// Ground-truth labels for one image, `L` pixels.
#[derive(Clone, Copy, Debug)]
pub enum GtLabels<'a> {
    Classes(&'a [usize]),
    Depth(&'a [f64]),
    /// Channel-major `[3, L]`.
    Normals(&'a [f64]),
}

impl LabelRegionSpec {
    pub fn classes(count: usize) -> Self {
        LabelRegionSpec {
            kind: RegionKind::Class { count },
        }
    }

    pub fn count(&self) -> usize {
        match &self.kind {
            RegionKind::Class { count } => *count,
            RegionKind::DepthBins(b) => b.n_bins,
            RegionKind::NormalCodewords(c) => c.len(),
        }
    }

    /// Region index of every pixel.
    pub fn region_indices(&self, labels: GtLabels<'_>) -> Result<Vec<usize>> {
        match (&self.kind, labels) {
            (RegionKind::Class { count }, GtLabels::Classes(c)) => {
                if let Some(bad) = c.iter().find(|&&x| x >= *count) {
                    return Err(Error::LabelSpace(format!("class {bad} outside {count} regions")));
                }
                Ok(c.to_vec())
            }
            (RegionKind::DepthBins(b), GtLabels::Depth(d)) => d.iter().map(|&x| b.region(x)).collect(),
            (RegionKind::NormalCodewords(book), GtLabels::Normals(n)) => {
                if n.len() % 3 != 0 {
                    return Err(Error::LabelSpace("normal map is not [3, L]".into()));
                }
                let l = n.len() / 3;
                Ok((0..l).map(|i| book.nearest([n[i], n[l + i], n[2 * l + i]])).collect())
            }
            _ => Err(Error::LabelSpace("labels do not match the region kind".into())),
        }
    }

    /// Hard one-hot membership `[L, R]`.
    pub fn regions_from_gt(&self, labels: GtLabels<'_>) -> Result<Tensor<f64>> {
        let idx = self.region_indices(labels)?;
        let r = self.count();
        let mut data = vec![0.0; idx.len() * r];
        for (l, &i) in idx.iter().enumerate() {
            data[l * r + i] = 1.0;
        }
        Ok(Tensor::new(&[idx.len(), r], data)?)
    }

    pub fn save(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        match &self.kind {
            RegionKind::Class { count } => ckpt.push(format!("{prefix}.classes"), Tensor::scalar(*count as f32)),
            RegionKind::DepthBins(b) => ckpt.push(
                format!("{prefix}.depth_range"),
                Tensor::new(&[3], vec![b.d_min as f32, b.d_max as f32, b.n_bins as f32])?,
            ),
            RegionKind::NormalCodewords(c) => {
                let words = c.codewords.iter().flat_map(|w| w.map(|x| x as f32)).collect();
                ckpt.push(format!("{prefix}.codewords"), Tensor::new(&[c.len(), 3], words)?);
                let tris = c.triangles.iter().flat_map(|t| t.map(|i| i as f32)).collect();
                ckpt.push(format!("{prefix}.triangles"), Tensor::new(&[c.triangles.len(), 3], tris)?);
            }
        }
        Ok(())
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        if let Some(t) = ckpt.get(&format!("{prefix}.classes")) {
            return Ok(Self::classes(t.item() as usize));
        }
        if let Some(t) = ckpt.get(&format!("{prefix}.depth_range")) {
            let d = t.data();
            return Ok(LabelRegionSpec {
                kind: RegionKind::DepthBins(DepthBinning::new(d[0] as f64, d[1] as f64, d[2] as usize)?),
            });
        }
        let words = ckpt.require(&format!("{prefix}.codewords"))?;
        let tris = ckpt.require(&format!("{prefix}.triangles"))?;
        let codewords = words.data().chunks(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
        let triangles = tris.data().chunks(3).map(|t| [t[0] as usize, t[1] as usize, t[2] as usize]).collect();
        Ok(LabelRegionSpec {
            kind: RegionKind::NormalCodewords(NormalCodebook { codewords, triangles }),
        })
    }
}

/// Ground-truth region maps in the `[R, L]` layout used by the label
/// contexts: region rows are the one-hot membership divided by the region
/// size, so each non-empty row sums to one; empty regions stay zero.
pub fn normalized_region_rows(indices: &[usize], regions: usize) -> Vec<f64> {
    let l = indices.len();
    let mut counts = vec![0usize; regions];
    for &i in indices {
        counts[i] += 1;
    }
    let mut out = vec![0.0; regions * l];
    for (p, &i) in indices.iter().enumerate() {
        out[i * l + p] = 1.0 / counts[i] as f64;
    }
    out
}

#[cfg(test)]
pub(crate) fn random_sphere(n: usize, seed: u64) -> Vec<Vec3> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec3 = [0; 3].map(|_| StandardNormal.sample(&mut rng));
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|x| x / l)
        })
        .collect()
}
