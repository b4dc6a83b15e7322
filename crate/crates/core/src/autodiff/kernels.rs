//! Fused neural primitives: convolution, batch normalization, losses and
//! windowed attention.

use super::{Op, Tape, Var};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Batch-norm statistics mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the provided running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics returned in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Vec<T>,
}

/// Destination column range `[lo, hi)` of a row shifted by `k - 1` so that
/// source column `x + k - 1` stays inside `0..w`.
fn valid_cols(k: usize, w: usize) -> (usize, usize) {
    match k {
        0 => (1.min(w), w),
        1 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (lo, hi) = valid_cols(kx, w);
                for y in 0..h {
                    let row = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        row.fill(T::ZERO);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    row[..lo].fill(T::ZERO);
                    row[hi..].fill(T::ZERO);
                    row[lo..hi].copy_from_slice(&srow[lo + kx - 1..hi + kx - 1]);
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (lo, hi) = valid_cols(kx, w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for (d, &v) in drow[lo + kx - 1..hi + kx - 1].iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Same-padded 2-D cross-correlation with a 1x1 or 3x3 kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || !(sw[2] == 1 || sw[2] == 3) || sx[1] != sw[1] {
            return Err(TensorError::shape("conv2d", &[&sx, &sw]));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::shape("conv2d", &[&sx, &sw, self.shape(b)]));
            }
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kernel) = (sw[0], sw[2]);
        let hw = h * wd;
        let kk = c * kernel * kernel;
        let mut out = vec![T::ZERO; n * o * hw];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let mut col = if kernel == 3 { vec![T::ZERO; kk * hw] } else { Vec::new() };
            for ni in 0..n {
                let xs = &xd[ni * c * hw..(ni + 1) * c * hw];
                let src: &[T] = if kernel == 3 {
                    im2col(xs, c, h, wd, &mut col);
                    &col
                } else {
                    xs
                };
                T::gemm(
                    o,
                    kk,
                    hw,
                    T::ONE,
                    wdat,
                    kk as isize,
                    1,
                    src,
                    hw as isize,
                    1,
                    T::ZERO,
                    &mut out[ni * o * hw..(ni + 1) * o * hw],
                    hw as isize,
                    1,
                );
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for ni in 0..n {
                    for oi in 0..o {
                        let base = (ni * o + oi) * hw;
                        for v in &mut out[base..base + hw] {
                            *v += bd[oi];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let value = Tensor::new(&[n, o, h, wd], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                kernel,
            },
            rg,
        ))
    }

    pub(crate) fn conv2d_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        kernel: usize,
        g: &[T],
    ) -> Vec<(usize, Vec<T>)> {
        let sx = self.nodes[x].value.shape();
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let o = self.nodes[w].value.shape()[0];
        let hw = h * wd;
        let kk = c * kernel * kernel;
        let xd = self.nodes[x].value.data();
        let wdat = self.nodes[w].value.data();
        let mut out = Vec::new();
        let mut col = if kernel == 3 { vec![T::ZERO; kk * hw] } else { Vec::new() };
        let mut dw = if self.rg(w) { vec![T::ZERO; o * kk] } else { Vec::new() };
        let mut dx = if self.rg(x) { vec![T::ZERO; xd.len()] } else { Vec::new() };
        let mut dcol = if kernel == 3 && self.rg(x) { vec![T::ZERO; kk * hw] } else { Vec::new() };
        for ni in 0..n {
            let gs = &g[ni * o * hw..(ni + 1) * o * hw];
            if self.rg(w) {
                let xs = &xd[ni * c * hw..(ni + 1) * c * hw];
                let src: &[T] = if kernel == 3 {
                    im2col(xs, c, h, wd, &mut col);
                    &col
                } else {
                    xs
                };
                // dW += dY * col^T
                T::gemm(o, hw, kk, T::ONE, gs, hw as isize, 1, src, 1, hw as isize, T::ONE, &mut dw, kk as isize, 1);
            }
            if self.rg(x) {
                // dcol = W^T * dY
                let target: &mut [T] = if kernel == 3 {
                    &mut dcol
                } else {
                    &mut dx[ni * c * hw..(ni + 1) * c * hw]
                };
                T::gemm(kk, o, hw, T::ONE, wdat, 1, kk as isize, gs, hw as isize, 1, T::ZERO, target, hw as isize, 1);
                if kernel == 3 {
                    col2im(&dcol, c, h, wd, &mut dx[ni * c * hw..(ni + 1) * c * hw]);
                }
            }
        }
        if self.rg(x) {
            out.push((x, dx));
        }
        if self.rg(w) {
            out.push((w, dw));
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let mut db = vec![T::ZERO; o];
            for ni in 0..n {
                for (oi, d) in db.iter_mut().enumerate() {
                    let base = (ni * o + oi) * hw;
                    *d += g[base..base + hw].iter().copied().sum::<T>();
                }
            }
            out.push((b, db));
        }
        out
    }

    /// Batch normalization over axis 1 of an `[N, C, ...]` tensor.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running estimates. Zero-variance channels normalize to zero.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape("batch_norm", &[&shape]));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let m = n * inner;
        if m == 0 {
            return Err(TensorError::invalid("batch_norm", "zero-size batch"));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(TensorError::shape("batch_norm", &[&shape, self.shape(p)]));
            }
        }
        let xd = self.value(x).data();
        let (mean, invstd, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ni in 0..n {
                    for (ci, mu) in mean.iter_mut().enumerate() {
                        let base = (ni * c + ci) * inner;
                        *mu += xd[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                let mf = T::from_f64(m as f64);
                for mu in &mut mean {
                    *mu /= mf;
                }
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for &v in &xd[base..base + inner] {
                            let d = v - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                let invstd: Vec<T> = var.iter().map(|&v| T::ONE / (v / mf + eps).sqrt()).collect();
                let denom = T::from_f64((m.max(2) - 1) as f64);
                let var_unbiased = var.iter().map(|&v| v / denom).collect();
                (
                    mean.clone(),
                    invstd,
                    Some(BatchStats { mean, var_unbiased }),
                )
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::invalid("batch_norm", "running statistics width mismatch"));
                }
                let invstd = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
                (mean.to_vec(), invstd, None)
            }
        };
        let gd = gamma.map(|g| self.value(g).data().to_vec());
        let bd = beta.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::ZERO; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                let scale = invstd[ci] * gd.as_ref().map_or(T::ONE, |g| g[ci]);
                let shift = bd.as_ref().map_or(T::ZERO, |b| b[ci]);
                for i in base..base + inner {
                    out[i] = (xd[i] - mean[ci]) * scale + shift;
                }
            }
        }
        let train = matches!(mode, BnMode::Train);
        let rg = self.rg(x.0)
            || gamma.is_some_and(|g| self.rg(g.0))
            || beta.is_some_and(|b| self.rg(b.0));
        let value = Tensor::new(&shape, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.map(|g| g.0),
                beta: beta.map(|b| b.0),
                mean,
                invstd,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn batch_norm_backward(
        &self,
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        mean: &[T],
        invstd: &[T],
        train: bool,
        g: &[T],
    ) -> Vec<(usize, Vec<T>)> {
        let shape = self.nodes[x].value.shape();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let xd = self.nodes[x].value.data();
        let gam = gamma.map(|gi| self.nodes[gi].value.data());
        let mut sum_g = vec![T::ZERO; c];
        let mut sum_gx = vec![T::ZERO; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for i in base..base + inner {
                    let xhat = (xd[i] - mean[ci]) * invstd[ci];
                    sum_g[ci] += g[i];
                    sum_gx[ci] += g[i] * xhat;
                }
            }
        }
        let mut out = Vec::new();
        if self.rg(x) {
            let mf = T::from_f64((n * inner) as f64);
            let mut dx = vec![T::ZERO; xd.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let gm = gam.map_or(T::ONE, |gv| gv[ci]);
                    let base = (ni * c + ci) * inner;
                    for i in base..base + inner {
                        dx[i] = if train {
                            let xhat = (xd[i] - mean[ci]) * invstd[ci];
                            gm * invstd[ci] * (g[i] - sum_g[ci] / mf - xhat * sum_gx[ci] / mf)
                        } else {
                            gm * invstd[ci] * g[i]
                        };
                    }
                }
            }
            out.push((x, dx));
        }
        if let Some(gi) = gamma.filter(|&gi| self.rg(gi)) {
            out.push((gi, sum_gx));
        }
        if let Some(bi) = beta.filter(|&bi| self.rg(bi)) {
            out.push((bi, sum_g));
        }
        out
    }

    /// Mean negative log-softmax over axis 1 of `[N, C, ...]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape("cross_entropy", &[&shape]));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if targets.len() != n * inner {
            return Err(TensorError::shape("cross_entropy", &[&shape, &[targets.len()]]));
        }
        let ld = self.value(logits).data();
        let mut total = T::ZERO;
        let mut count = 0usize;
        for ni in 0..n {
            for p in 0..inner {
                let t = targets[ni * inner + p];
                if Some(t) == ignore {
                    continue;
                }
                if t >= c {
                    return Err(TensorError::invalid("cross_entropy", format!("target {t} with {c} classes")));
                }
                let at = |ci: usize| ld[(ni * c + ci) * inner + p];
                let mut mx = at(0);
                for ci in 1..c {
                    mx = mx.max(at(ci));
                }
                let s: T = (0..c).map(|ci| (at(ci) - mx).exp()).sum();
                total += mx + s.ln() - at(t);
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::EmptyLoss { op: "cross_entropy" });
        }
        let loss = total / T::from_f64(count as f64);
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            rg,
        ))
    }

    pub(crate) fn cross_entropy_backward(
        &self,
        logits: usize,
        targets: &[usize],
        ignore: Option<usize>,
        count: usize,
        g: T,
    ) -> Vec<T> {
        let shape = self.nodes[logits].value.shape();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let ld = self.nodes[logits].value.data();
        let scale = g / T::from_f64(count as f64);
        let mut dx = vec![T::ZERO; ld.len()];
        for ni in 0..n {
            for p in 0..inner {
                let t = targets[ni * inner + p];
                if Some(t) == ignore {
                    continue;
                }
                let idx = |ci: usize| (ni * c + ci) * inner + p;
                let mut mx = ld[idx(0)];
                for ci in 1..c {
                    mx = mx.max(ld[idx(ci)]);
                }
                let s: T = (0..c).map(|ci| (ld[idx(ci)] - mx).exp()).sum();
                for ci in 0..c {
                    let pr = (ld[idx(ci)] - mx).exp() / s;
                    let y = if ci == t { T::ONE } else { T::ZERO };
                    dx[idx(ci)] = (pr - y) * scale;
                }
            }
        }
        dx
    }

    /// Mean absolute error. With `normalize_unit`, `pred` is `[N, 3, ...]` and is
    /// rescaled to unit norm per pixel (norm clamped below at 1e-6) first.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>, normalize_unit: bool) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape != target.shape() || (normalize_unit && (shape.len() < 2 || shape[1] != 3)) {
            return Err(TensorError::shape("l1_loss", &[&shape, target.shape()]));
        }
        let pd = self.value(pred).data();
        let used = if normalize_unit { unit_normalize(pd, &shape).0 } else { pd.to_vec() };
        let total: T = used.iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum();
        let loss = total / T::from_f64(pd.len() as f64);
        let rg = self.rg(pred.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred: pred.0,
                target: target.data().to_vec(),
                normalize: normalize_unit,
            },
            rg,
        ))
    }

    pub(crate) fn l1_backward(&self, pred: usize, target: &[T], normalize: bool, g: T) -> Vec<T> {
        let shape = self.nodes[pred].value.shape();
        let pd = self.nodes[pred].value.data();
        let scale = g / T::from_f64(pd.len() as f64);
        let sign = |d: T| {
            if d > T::ZERO {
                scale
            } else if d < T::ZERO {
                -scale
            } else {
                T::ZERO
            }
        };
        if !normalize {
            return pd.iter().zip(target).map(|(&p, &t)| sign(p - t)).collect();
        }
        let (unit, norms) = unit_normalize(pd, shape);
        let n = shape[0];
        let inner: usize = shape[2..].iter().product();
        let mut dx = vec![T::ZERO; pd.len()];
        let floor = T::from_f64(1e-6);
        for ni in 0..n {
            for p in 0..inner {
                let idx = |ch: usize| (ni * 3 + ch) * inner + p;
                let nrm = norms[ni * inner + p];
                let du: [T; 3] = std::array::from_fn(|ch| sign(unit[idx(ch)] - target[idx(ch)]));
                if nrm > floor {
                    let dot: T = (0..3).map(|ch| unit[idx(ch)] * du[ch]).sum();
                    for ch in 0..3 {
                        dx[idx(ch)] = (du[ch] - unit[idx(ch)] * dot) / nrm;
                    }
                } else {
                    for ch in 0..3 {
                        dx[idx(ch)] = du[ch] / floor;
                    }
                }
            }
        }
        dx
    }

    /// `mean(-(w_pos * y * log s(x) + w_neg * (1 - y) * log(1 - s(x))))`.
    pub fn weighted_bce(&mut self, logits: Var, target: &Tensor<T>, w_pos: T, w_neg: T) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape != target.shape() {
            return Err(TensorError::shape("weighted_bce", &[&shape, target.shape()]));
        }
        if w_pos < T::ZERO || w_neg < T::ZERO {
            return Err(TensorError::invalid("weighted_bce", "negative class weight"));
        }
        let ld = self.value(logits).data();
        let total: T = ld
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| {
                // -log s(x) = softplus(-x), -log(1 - s(x)) = softplus(x)
                w_pos * y * super::ops::softplus(-x) + w_neg * (T::ONE - y) * super::ops::softplus(x)
            })
            .sum();
        let loss = total / T::from_f64(ld.len() as f64);
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                logits: logits.0,
                target: target.data().to_vec(),
                w_pos,
                w_neg,
            },
            rg,
        ))
    }

    pub(crate) fn weighted_bce_backward(&self, logits: usize, target: &[T], w_pos: T, w_neg: T, g: T) -> Vec<T> {
        let ld = self.nodes[logits].value.data();
        let scale = g / T::from_f64(ld.len() as f64);
        ld.iter()
            .zip(target)
            .map(|(&x, &y)| {
                let s = x.sigmoid();
                scale * (w_neg * (T::ONE - y) * s - w_pos * y * (T::ONE - s))
            })
            .collect()
    }

    /// Windowed dot-product attention over `[B, C, H, W]` maps.
    ///
    /// Each target pixel attends to the in-bounds pixels of the `window x window`
    /// neighbourhood centred on it (border windows are clipped, not padded), with
    /// logits scaled by `1/sqrt(d_k)`. Output is `[B, d_v, H, W]`.
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, window: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if window.is_multiple_of(2) || window == 0 {
            return Err(TensorError::invalid("local_attention", format!("window extent {window} must be odd")));
        }
        if sq.len() != 4 || sq != sk || sv.len() != 4 || sv[0] != sq[0] || sv[2..] != sq[2..] {
            return Err(TensorError::shape("local_attention", &[&sq, &sk, &sv]));
        }
        let (b, dk, h, w) = (sq[0], sq[1], sq[2], sq[3]);
        let dv = sv[1];
        let l = h * w;
        let ww = window * window;
        let r = (window / 2) as isize;
        let scale = T::ONE / T::from_f64(dk as f64).sqrt();
        let qt = to_pixel_major(self.value(q).data(), b, dk, l);
        let kt = to_pixel_major(self.value(k).data(), b, dk, l);
        let vt = to_pixel_major(self.value(v).data(), b, dv, l);
        let mut attn = vec![T::ZERO; b * l * ww];
        let mut out_t = vec![T::ZERO; b * l * dv];
        let mut scores = vec![T::ZERO; ww];
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let qi = &qt[(bi * l + i) * dk..(bi * l + i + 1) * dk];
                    let mut mx = T::from_f64(f64::NEG_INFINITY);
                    for_window(y, x, h, w, r, window, |slot, j| {
                        let kj = &kt[(bi * l + j) * dk..(bi * l + j + 1) * dk];
                        let s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        scores[slot] = s;
                        mx = mx.max(s);
                    });
                    let a = &mut attn[(bi * l + i) * ww..(bi * l + i + 1) * ww];
                    let mut total = T::ZERO;
                    for_window(y, x, h, w, r, window, |slot, _| {
                        let e = (scores[slot] - mx).exp();
                        a[slot] = e;
                        total += e;
                    });
                    let o = &mut out_t[(bi * l + i) * dv..(bi * l + i + 1) * dv];
                    for_window(y, x, h, w, r, window, |slot, j| {
                        a[slot] /= total;
                        let vj = &vt[(bi * l + j) * dv..(bi * l + j + 1) * dv];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += a[slot] * vc;
                        }
                    });
                }
            }
        }
        let out = from_pixel_major(&out_t, b, dv, l);
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        let value = Tensor::new(&[b, dv, h, w], out)?;
        Ok(self.push(
            value,
            Op::LocalAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                height: h,
                width: w,
                window,
                attn,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn local_attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        h: usize,
        w: usize,
        window: usize,
        attn: &[T],
        g: &[T],
    ) -> Vec<(usize, Vec<T>)> {
        let sq = self.nodes[q].value.shape();
        let (b, dk) = (sq[0], sq[1]);
        let dv = self.nodes[v].value.shape()[1];
        let l = h * w;
        let ww = window * window;
        let r = (window / 2) as isize;
        let scale = T::ONE / T::from_f64(dk as f64).sqrt();
        let qt = to_pixel_major(self.nodes[q].value.data(), b, dk, l);
        let kt = to_pixel_major(self.nodes[k].value.data(), b, dk, l);
        let vt = to_pixel_major(self.nodes[v].value.data(), b, dv, l);
        let gt = to_pixel_major(g, b, dv, l);
        let mut dq = vec![T::ZERO; qt.len()];
        let mut dk_t = vec![T::ZERO; kt.len()];
        let mut dv_t = vec![T::ZERO; vt.len()];
        let mut da = vec![T::ZERO; ww];
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let a = &attn[(bi * l + i) * ww..(bi * l + i + 1) * ww];
                    let gi = &gt[(bi * l + i) * dv..(bi * l + i + 1) * dv];
                    let mut weighted = T::ZERO;
                    for_window(y, x, h, w, r, window, |slot, j| {
                        let vj = &vt[(bi * l + j) * dv..(bi * l + j + 1) * dv];
                        da[slot] = gi.iter().zip(vj).map(|(&p, &c)| p * c).sum();
                        weighted += a[slot] * da[slot];
                        let dvj = &mut dv_t[(bi * l + j) * dv..(bi * l + j + 1) * dv];
                        for (d, &gc) in dvj.iter_mut().zip(gi) {
                            *d += a[slot] * gc;
                        }
                    });
                    for_window(y, x, h, w, r, window, |slot, j| {
                        let ds = a[slot] * (da[slot] - weighted) * scale;
                        for c in 0..dk {
                            dq[(bi * l + i) * dk + c] += ds * kt[(bi * l + j) * dk + c];
                            dk_t[(bi * l + j) * dk + c] += ds * qt[(bi * l + i) * dk + c];
                        }
                    });
                }
            }
        }
        vec![
            (q, from_pixel_major(&dq, b, dk, l)),
            (k, from_pixel_major(&dk_t, b, dk, l)),
            (v, from_pixel_major(&dv_t, b, dv, l)),
        ]
    }
}

/// Visits the clipped window around `(y, x)`, passing the window slot and the
/// flat source pixel index.
#[inline]
fn for_window(
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    r: isize,
    window: usize,
    mut f: impl FnMut(usize, usize),
) {
    for dy in -r..=r {
        let yy = y as isize + dy;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for dx in -r..=r {
            let xx = x as isize + dx;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            let slot = (dy + r) as usize * window + (dx + r) as usize;
            f(slot, yy as usize * w + xx as usize);
        }
    }
}

fn to_pixel_major<T: Real>(src: &[T], b: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..l {
                out[(bi * l + p) * c + ci] = src[(bi * c + ci) * l + p];
            }
        }
    }
    out
}

fn from_pixel_major<T: Real>(src: &[T], b: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..l {
                out[(bi * c + ci) * l + p] = src[(bi * l + p) * c + ci];
            }
        }
    }
    out
}

/// Per-pixel unit normalization of `[N, 3, ...]` data; returns the rescaled
/// values and the clamped norms.
pub(crate) fn unit_normalize<T: Real>(data: &[T], shape: &[usize]) -> (Vec<T>, Vec<T>) {
    let n = shape[0];
    let inner: usize = shape[2..].iter().product();
    let floor = T::from_f64(1e-6);
    let mut out = vec![T::ZERO; data.len()];
    let mut norms = vec![T::ZERO; n * inner];
    for ni in 0..n {
        for p in 0..inner {
            let idx = |ch: usize| (ni * 3 + ch) * inner + p;
            let nrm = (0..3).map(|ch| data[idx(ch)] * data[idx(ch)]).sum::<T>().sqrt().max(floor);
            norms[ni * inner + p] = nrm;
            for ch in 0..3 {
                out[idx(ch)] = data[idx(ch)] / nrm;
            }
        }
    }
    (out, norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let w = tape.constant(eye);
        let y = tape.conv2d(xv, w, None).unwrap();
        assert_eq!(tape.value(y), &x);

        let delta = Tensor::from_fn(&[3, 3, 3, 3], |i| {
            let (o, c, ky, kx) = (i / 27, (i / 9) % 3, (i / 3) % 3, i % 3);
            if o == c && ky == 1 && kx == 1 { 1.0 } else { 0.0 }
        });
        let w = tape.constant(delta);
        let y = tape.conv2d(xv, w, None).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, wv, Some(bv)).unwrap();
        for o in 0..3 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let mut s = bias.at(&[o]);
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                    s += w.at(&[o, c, ky, kx]) * x.at(&[0, c, sy as usize, sx as usize]);
                                }
                            }
                        }
                    }
                    assert!((tape.value(y).at(&[0, o, yy, xx]) - s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None), Err(TensorError::Shape { op: "conv2d", .. })));
    }

    #[test]
    fn batch_norm_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = rand_tensor(&mut rng, &[4, 3, 5, 5]);
        // constant channel 2
        for n in 0..4 {
            for p in 0..25 {
                x.data_mut()[(n * 3 + 2) * 25 + p] = 0.75;
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (y, stats) = tape.batch_norm(xv, None, None, BnMode::Train, 1e-5).unwrap();
        let yd = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..25).map(move |p| (n, p))).map(|(n, p)| yd.data()[(n * 3 + c) * 25 + p]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-3);
        }
        for n in 0..4 {
            for p in 0..25 {
                assert_eq!(yd.data()[(n * 3 + 2) * 25 + p], 0.0);
            }
        }
        assert!(stats.is_some());

        let mean = [0.1, -0.2, 0.3];
        let var = [0.5, 1.5, 2.0];
        let (y, stats) = tape
            .batch_norm(xv, None, None, BnMode::Eval { mean: &mean, var: &var }, 1e-5)
            .unwrap();
        assert!(stats.is_none());
        for n in 0..4 {
            for c in 0..3 {
                for p in 0..25 {
                    let i = (n * 3 + c) * 25 + p;
                    let want = (x.data()[i] - mean[c]) / (var[c] + 1e-5f64).sqrt();
                    assert!((tape.value(y).data()[i] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_limits() {
        let mut tape = Tape::new();
        let peaked = Tensor::new(&[1, 3, 2], vec![50.0, -50.0, -50.0, 50.0, -50.0, -50.0]).unwrap();
        let l = tape.constant(peaked);
        let loss = tape.cross_entropy(l, &[0, 1], None).unwrap();
        assert!(tape.value(loss).item() < 1e-12);

        let uniform = tape.constant(Tensor::<f64>::zeros(&[2, 4, 3]));
        let loss = tape.cross_entropy(uniform, &[0, 1, 2, 3, 0, 1], None).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        let all_ignored = tape.cross_entropy(uniform, &[255; 6], Some(255));
        assert_eq!(all_ignored.unwrap_err(), TensorError::EmptyLoss { op: "cross_entropy" });
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 2, 3]);
        let targets = [0, 1, 1, 0, 255, 1];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let loss = tape.cross_entropy(xv, &targets, Some(255)).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for n in 0..2 {
            for p in 0..3 {
                let t = targets[n * 3 + p];
                if t == 255 {
                    continue;
                }
                let a = x.at(&[n, 0, p]);
                let b = x.at(&[n, 1, p]);
                let own = if t == 0 { a } else { b };
                total += (a.exp() + b.exp()).ln() - own;
                count += 1;
            }
        }
        assert!((tape.value(loss).item() - total / count as f64).abs() < 1e-6);
    }

    #[test]
    fn l1_identity_and_scale_invariance() {
        let mut tape = Tape::new();
        let t = Tensor::new(&[1, 3, 2], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = tape.constant(t.clone());
        let loss = tape.l1_loss(p, &t, false).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let scaled = tape.constant(t.map(|v| v * 2.0));
        let loss = tape.l1_loss(scaled, &t, true).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-15);
    }

    #[test]
    fn l1_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_tensor(&mut rng, &[2, 3, 2]);
        let t = rand_tensor(&mut rng, &[2, 3, 2]);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let plain = tape.l1_loss(pv, &t, false).unwrap();
        let want: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0;
        assert!((tape.value(plain).item() - want).abs() < 1e-6);
        let unit = tape.l1_loss(pv, &t, true).unwrap();
        let mut total = 0.0;
        for n in 0..2 {
            for px in 0..2 {
                let v: Vec<f64> = (0..3).map(|c| p.at(&[n, c, px])).collect();
                let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-6);
                for c in 0..3 {
                    total += (v[c] / nrm - t.at(&[n, c, px])).abs();
                }
            }
        }
        assert!((tape.value(unit).item() - total / 12.0).abs() < 1e-6);
    }

    #[test]
    fn weighted_bce_cases() {
        let mut tape = Tape::new();
        let ones = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let zeros = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let loss = tape.weighted_bce(zeros, &ones, 1.0, 1.0).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
        let loss = tape.weighted_bce(zeros, &ones, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[1, 1, 3, 3]).map(|v| v * 4.0);
        let y = Tensor::from_fn(&[1, 1, 3, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let xv = tape.constant(x.clone());
        let loss = tape.weighted_bce(xv, &y, 0.8, 0.2).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &t)| -(0.8 * t * sig(a).ln() + 0.2 * (1.0 - t) * (1.0 - sig(a)).ln()))
            .sum::<f64>()
            / 9.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-6);
    }

    #[test]
    fn local_attention_rejects_even_window() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(tape.local_attention(q, q, q, 4).is_err());
    }
}
