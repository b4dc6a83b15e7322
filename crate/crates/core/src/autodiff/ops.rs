//! Elementwise, shape, reduction, matmul and softmax primitives.

use super::{BinaryKind, Op, Tape, UnaryKind, Var};
use crate::tensor::{strides, Real, Result, Tensor, TensorError};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast input.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - input.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; rank];
    for i in 0..input.len() {
        if input[i] != 1 {
            eff[offset + i] = in_strides[i];
        }
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, op: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape =
            broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::shape(op, &[&sa, &sb]))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub(crate) fn binary_backward(
        &self,
        kind: BinaryKind,
        a: usize,
        b: usize,
        out: usize,
        g: &[T],
    ) -> Vec<(usize, Vec<T>)> {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let out_shape = self.nodes[out].value.shape();
        let same = va.shape() == vb.shape();
        let (ma, mb) = if same {
            (Vec::new(), Vec::new())
        } else {
            (
                broadcast_map(out_shape, va.shape()),
                broadcast_map(out_shape, vb.shape()),
            )
        };
        let ia = |i: usize| if same { i } else { ma[i] };
        let ib = |i: usize| if same { i } else { mb[i] };
        let (ad, bd) = (va.data(), vb.data());
        let mut ga = vec![T::ZERO; ad.len()];
        let mut gb = vec![T::ZERO; bd.len()];
        for (i, &gi) in g.iter().enumerate() {
            let (x, y) = (ia(i), ib(i));
            match kind {
                BinaryKind::Add => {
                    ga[x] += gi;
                    gb[y] += gi;
                }
                BinaryKind::Sub => {
                    ga[x] += gi;
                    gb[y] -= gi;
                }
                BinaryKind::Mul => {
                    ga[x] += gi * bd[y];
                    gb[y] += gi * ad[x];
                }
                BinaryKind::Div => {
                    ga[x] += gi / bd[y];
                    gb[y] -= gi * ad[x] / (bd[y] * bd[y]);
                }
            }
        }
        vec![(a, ga), (b, gb)]
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x.0);
        self.push(value, Op::AddScalar { x: x.0 }, rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x.0);
        self.push(value, Op::MulScalar { x: x.0, c }, rg)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Relu => v.max(T::ZERO),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Sigmoid => v.sigmoid(),
        });
        let rg = self.rg(x.0);
        self.push(value, Op::Unary { kind, x: x.0 }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln(1 + e^{-|x|})` and floored at the
    /// smallest positive normal so the output stays strictly positive.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub(crate) fn unary_backward(&self, kind: UnaryKind, x: usize, out: usize, g: &[T]) -> Vec<T> {
        let xv = self.nodes[x].value.data();
        let yv = self.nodes[out].value.data();
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                gi * match kind {
                    UnaryKind::Exp => yv[i],
                    UnaryKind::Log => T::ONE / xv[i],
                    UnaryKind::Relu => {
                        if xv[i] > T::ZERO {
                            T::ONE
                        } else {
                            T::ZERO
                        }
                    }
                    UnaryKind::Softplus => xv[i].sigmoid(),
                    UnaryKind::Sigmoid => yv[i] * (T::ONE - yv[i]),
                }
            })
            .collect()
    }

    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        let value = self.value(x).map(|v| v.max(min));
        let rg = self.rg(x.0);
        self.push(value, Op::ClampMin { x: x.0, min }, rg)
    }

    /// Batched matrix product. Operands are rank 2 or rank 3 (`[batch, rows, cols]`);
    /// `ta`/`tb` read the stored matrices transposed.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::shape("matmul", &[&sa, &sb]);
        if sa.len() != sb.len() || !(2..=3).contains(&sa.len()) {
            return Err(err());
        }
        let batched = sa.len() == 3;
        let (batch, ra, ca) = if batched {
            (sa[0], sa[1], sa[2])
        } else {
            (1, sa[0], sa[1])
        };
        let (bb, rb, cb) = if batched {
            (sb[0], sb[1], sb[2])
        } else {
            (1, sb[0], sb[1])
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if batch != bb || k != k2 {
            return Err(err());
        }
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::ONE,
                    &ad[bi * m * k..(bi + 1) * m * k],
                    rsa,
                    csa,
                    &bd[bi * k * n..(bi + 1) * k * n],
                    rsb,
                    csb,
                    T::ZERO,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a.0) || self.rg(b.0);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Bmm {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false, false)
    }

    pub(crate) fn bmm_backward(
        &self,
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        g: &[T],
    ) -> Vec<(usize, Vec<T>)> {
        let sa = self.nodes[a].value.shape();
        let sb = self.nodes[b].value.shape();
        let batched = sa.len() == 3;
        let (batch, ra, ca) = if batched {
            (sa[0], sa[1], sa[2])
        } else {
            (1, sa[0], sa[1])
        };
        let (rb, cb) = if batched { (sb[1], sb[2]) } else { (sb[0], sb[1]) };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let ad = self.nodes[a].value.data();
        let bd = self.nodes[b].value.data();
        let mut out = Vec::new();
        if self.rg(a) {
            // dA = dC * B^T, written through A's own strides.
            let mut ga = vec![T::ZERO; ad.len()];
            for bi in 0..batch {
                T::gemm(
                    m,
                    n,
                    k,
                    T::ONE,
                    &g[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                    &bd[bi * k * n..(bi + 1) * k * n],
                    csb,
                    rsb,
                    T::ZERO,
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                    rsa,
                    csa,
                );
            }
            out.push((a, ga));
        }
        if self.rg(b) {
            // dB = A^T * dC
            let mut gb = vec![T::ZERO; bd.len()];
            for bi in 0..batch {
                T::gemm(
                    k,
                    m,
                    n,
                    T::ONE,
                    &ad[bi * m * k..(bi + 1) * m * k],
                    csa,
                    rsa,
                    &g[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                    T::ZERO,
                    &mut gb[bi * k * n..(bi + 1) * k * n],
                    rsb,
                    csb,
                );
            }
            out.push((b, gb));
        }
        out
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Reshape { x: x.0 }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("axes {axes:?} for shape {shape:?}"),
            ));
        }
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(x.0);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub(crate) fn permute_backward(&self, x: usize, axes: &[usize], g: &[T]) -> Vec<T> {
        let in_shape = self.nodes[x].value.shape();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        permute_data(g, &out_shape, &inverse)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::shape("concat", &[&first, s]));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(v.0));
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
            rg,
        ))
    }

    pub(crate) fn concat_backward(&self, inputs: &[usize], axis: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let first = self.nodes[inputs[0]].value.shape();
        let (outer, _, inner) = split_axis(first, axis);
        let total: usize = inputs.iter().map(|&i| self.nodes[i].value.shape()[axis]).sum();
        let mut out: Vec<(usize, Vec<T>)> = inputs
            .iter()
            .map(|&i| (i, Vec::with_capacity(self.nodes[i].value.numel())))
            .collect();
        for o in 0..outer {
            let mut off = o * total * inner;
            for (slot, &i) in out.iter_mut().zip(inputs) {
                let len = self.nodes[i].value.shape()[axis] * inner;
                slot.1.extend_from_slice(&g[off..off + len]);
                off += len;
            }
        }
        out
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x.0);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Slice { x: x.0, axis, start }, rg))
    }

    pub(crate) fn slice_backward(&self, x: usize, axis: usize, start: usize, out: usize, g: &[T]) -> Vec<T> {
        let shape = self.nodes[x].value.shape();
        let len = self.nodes[out].value.shape()[axis];
        let (outer, ext, inner) = split_axis(shape, axis);
        let mut dx = vec![T::ZERO; self.nodes[x].value.numel()];
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
        }
        dx
    }

    /// Gathers entries along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(TensorError::invalid(
                "index_select",
                format!("indices {indices:?} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let base = (o * ext + ix) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(x.0);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                x: x.0,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub(crate) fn index_select_backward(&self, x: usize, axis: usize, indices: &[usize], g: &[T]) -> Vec<T> {
        let (outer, ext, inner) = split_axis(self.nodes[x].value.shape(), axis);
        let mut dx = vec![T::ZERO; self.nodes[x].value.numel()];
        for o in 0..outer {
            for (j, &ix) in indices.iter().enumerate() {
                let dst = (o * ext + ix) * inner;
                let src = (o * indices.len() + j) * inner;
                for t in 0..inner {
                    dx[dst + t] += g[src + t];
                }
            }
        }
        dx
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sum", format!("axis {axis} of {shape:?}")));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                for t in 0..inner {
                    data[o * inner + t] += src[base + t];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(x.0);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Sum { x: x.0, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, T::ONE / T::from_f64(n as f64)))
    }

    pub(crate) fn sum_backward(&self, x: usize, axis: usize, g: &[T]) -> Vec<T> {
        let (outer, ext, inner) = split_axis(self.nodes[x].value.shape(), axis);
        let mut dx = vec![T::ZERO; self.nodes[x].value.numel()];
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                dx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
        }
        dx
    }

    /// Sum of every entry, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.mul_scalar(s, T::ONE / T::from_f64(n as f64))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} of {shape:?}")));
        }
        let mut data = self.value(x).data().to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis);
        for o in 0..outer {
            for t in 0..inner {
                let base = o * ext * inner + t;
                let mut mx = data[base];
                for a in 1..ext {
                    mx = mx.max(data[base + a * inner]);
                }
                let mut s = T::ZERO;
                for a in 0..ext {
                    let e = (data[base + a * inner] - mx).exp();
                    data[base + a * inner] = e;
                    s += e;
                }
                for a in 0..ext {
                    data[base + a * inner] /= s;
                }
            }
        }
        let rg = self.rg(x.0);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Softmax { x: x.0, axis }, rg))
    }

    pub(crate) fn softmax_backward(&self, axis: usize, out: usize, g: &[T]) -> Vec<T> {
        let y = &self.nodes[out].value;
        let (outer, ext, inner) = split_axis(y.shape(), axis);
        let yd = y.data();
        let mut dx = vec![T::ZERO; yd.len()];
        for o in 0..outer {
            for t in 0..inner {
                let base = o * ext * inner + t;
                let mut dot = T::ZERO;
                for a in 0..ext {
                    let i = base + a * inner;
                    dot += g[i] * yd[i];
                }
                for a in 0..ext {
                    let i = base + a * inner;
                    dx[i] = yd[i] * (g[i] - dot);
                }
            }
        }
        dx
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("log_softmax", format!("axis {axis} of {shape:?}")));
        }
        let mut data = self.value(x).data().to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis);
        for o in 0..outer {
            for t in 0..inner {
                let base = o * ext * inner + t;
                let mut mx = data[base];
                for a in 1..ext {
                    mx = mx.max(data[base + a * inner]);
                }
                let mut s = T::ZERO;
                for a in 0..ext {
                    s += (data[base + a * inner] - mx).exp();
                }
                let lse = mx + s.ln();
                for a in 0..ext {
                    data[base + a * inner] -= lse;
                }
            }
        }
        let rg = self.rg(x.0);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::LogSoftmax { x: x.0, axis }, rg))
    }

    pub(crate) fn log_softmax_backward(&self, axis: usize, out: usize, g: &[T]) -> Vec<T> {
        let y = &self.nodes[out].value;
        let (outer, ext, inner) = split_axis(y.shape(), axis);
        let yd = y.data();
        let mut dx = vec![T::ZERO; yd.len()];
        for o in 0..outer {
            for t in 0..inner {
                let base = o * ext * inner + t;
                let mut gs = T::ZERO;
                for a in 0..ext {
                    gs += g[base + a * inner];
                }
                for a in 0..ext {
                    let i = base + a * inner;
                    dx[i] = g[i] - yd[i].exp() * gs;
                }
            }
        }
        dx
    }

    /// `x * s[index]` where `s` is itself differentiable.
    pub fn scale_by_element(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let sv = self.value(s).data().get(index).copied().ok_or_else(|| {
            TensorError::invalid("scale_by_element", format!("index {index} out of range"))
        })?;
        let value = self.value(x).map(|v| v * sv);
        let rg = self.rg(x.0) || self.rg(s.0);
        Ok(self.push(
            value,
            Op::ScaleByElement {
                x: x.0,
                s: s.0,
                index,
            },
            rg,
        ))
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    let y = v.max(T::ZERO) + (-v.abs()).exp().ln_1p();
    y.max(T::min_positive())
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let swaps_last_two = rank >= 2
        && axes[rank - 2] == rank - 1
        && axes[rank - 1] == rank - 2
        && axes[..rank - 2].iter().enumerate().all(|(i, &a)| i == a);
    if swaps_last_two {
        return transpose_last_two(src, shape[rank - 2], shape[rank - 1]);
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..src.len() {
        out.push(src[flat]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += mapped[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= mapped[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Batched `[.., r, c] -> [.., c, r]` transpose in cache-sized tiles.
fn transpose_last_two<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    const TILE: usize = 16;
    let mut out = vec![T::ZERO; src.len()];
    if r * c == 0 {
        return out;
    }
    for (s, d) in src.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        d[j * r + i] = s[i * c + j];
                    }
                }
            }
        }
    }
    out
}
