//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and, when any input
//! participates in differentiation, a closure mapping the output gradient to
//! input gradients. [`Tape::backward`] walks the nodes in exact reverse
//! recording order and then clears the tape.

use std::cell::RefCell;
use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of leaf tensors produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var.0)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.by_var.remove(&var.0)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a leaf. It participates in differentiation iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, requires_grad, vec![], None)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, false, vec![], None)
    }

    pub fn value(&self, var: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let mut t = nodes[var.0].value.clone();
        t.set_requires_grad(false);
        t
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    fn push(
        &self,
        value: Tensor,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward: if requires_grad { backward } else { None },
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn with_values<R>(&self, vars: &[Var], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor> = vars.iter().map(|v| &nodes[v.0].value).collect();
        f(&vals)
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// trainable leaf reachable from it. The tape is empty afterwards.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut nodes = self.nodes.borrow_mut();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", &loss_shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    let mut t = Tensor::new(node.value.shape().to_vec(), g)?;
                    t.set_requires_grad(false);
                    out.by_var.insert(idx, t);
                }
                Some(f) => {
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = f(&g, &needs);
                    for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        nodes.clear();
        Ok(out)
    }

    /// Drops every recorded node without differentiating.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    // ── ops ────────────────────────────────────────────────────────────

    /// Matrix product over the last two axes. `b` is either a shared
    /// `[k, n]` matrix or carries the same leading batch axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.with_values(&[a, b], |v| (v[0].clone(), v[1].clone()));
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let lead = &ash[..ash.len() - 2];
        let shared = bsh.len() == 2;
        if k != k2 || (!shared && &bsh[..bsh.len() - 2] != lead) {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if shared { 0 } else { bi * k * n };
            mm(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                &bv.data()[boff..boff + k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        let backward: BackwardFn = Box::new(move |g, needs| {
            let mut ga = needs[0].then(|| vec![0.0; batch * m * k]);
            let mut gb = needs[1].then(|| vec![0.0; bv.numel()]);
            for bi in 0..batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let boff = if shared { 0 } else { bi * k * n };
                let bs = &bv.data()[boff..boff + k * n];
                if let Some(ga) = ga.as_mut() {
                    let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gs[i * n + j] * bs[p * n + j];
                            }
                            dst[i * k + p] = acc;
                        }
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut gb[boff..boff + k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aval = as_[i * k + p];
                            let row = &gs[i * n..(i + 1) * n];
                            for (d, gv) in dst[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *d += aval * gv;
                            }
                        }
                    }
                }
            }
            vec![ga, gb]
        });
        Ok(self.push(value, rg, vec![a.0, b.0], Some(backward)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let sh = av.shape().to_vec();
        if sh.len() < 2 {
            return Err(Error::shape("transpose", &sh, &[2]));
        }
        let (r, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let batch = av.numel() / (r * c).max(1);
        let forward = move |src: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; src.len()];
            for b in 0..batch {
                let o = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[o + j * rows + i] = src[o + i * cols + j];
                    }
                }
            }
            out
        };
        let mut shape = sh.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let value = Tensor::new(shape, forward(av.data(), r, c))?;
        let rg = self.any_grad(&[a]);
        let backward: BackwardFn = Box::new(move |g, _| vec![Some(forward(g, c, r))]);
        Ok(self.push(value, rg, vec![a.0], Some(backward)))
    }

    /// Elementwise sum. `b` may have fewer axes than `a` as long as its shape
    /// is a suffix of `a`'s; it is then broadcast over the leading axes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bsh) = self.with_values(&[a, b], |v| (v[0].clone(), v[1].shape().to_vec()));
        let ash = av.shape().to_vec();
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != bsh[..] {
            return Err(Error::shape("add", &ash, &bsh));
        }
        let bv = self.value(b);
        let inner = bv.numel().max(1);
        let mut out = av.into_data();
        for chunk in out.chunks_mut(inner) {
            chunk.iter_mut().zip(bv.data()).for_each(|(o, x)| *o += x);
        }
        let value = Tensor::new(ash, out)?;
        let rg = self.any_grad(&[a, b]);
        let backward: BackwardFn = Box::new(move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; inner];
                for chunk in g.chunks(inner) {
                    acc.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                }
                acc
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        });
        Ok(self.push(value, rg, vec![a.0, b.0], Some(backward)))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out: Vec<f64> = av.data().iter().map(|x| x * factor).collect();
        let rg = self.any_grad(&[a]);
        let backward: BackwardFn =
            Box::new(move |g, _| vec![Some(g.iter().map(|x| x * factor).collect())]);
        Ok(self.push(Tensor::new(shape, out)?, rg, vec![a.0], Some(backward)))
    }

    /// Multiplies each row (last axis) by a constant factor, one factor per
    /// row across all leading axes.
    pub fn scale_rows(&self, a: Var, factors: &[f64]) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let cols = *shape.last().unwrap_or(&1);
        if cols == 0 || av.numel() / cols != factors.len() {
            return Err(Error::shape("scale_rows", &shape, &[factors.len()]));
        }
        let factors = factors.to_vec();
        let apply = move |src: &[f64]| -> Vec<f64> {
            src.chunks(cols)
                .zip(&factors)
                .flat_map(|(row, f)| row.iter().map(move |x| x * f))
                .collect()
        };
        let value = Tensor::new(shape, apply(av.data()))?;
        let rg = self.any_grad(&[a]);
        let backward: BackwardFn = Box::new(move |g, _| vec![Some(apply(g))]);
        Ok(self.push(value, rg, vec![a.0], Some(backward)))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out: Vec<f64> = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let active: Vec<bool> = av.data().iter().map(|&x| x > 0.0).collect();
        let rg = self.any_grad(&[a]);
        let backward: BackwardFn = Box::new(move |g, _| {
            vec![Some(
                g.iter()
                    .zip(&active)
                    .map(|(&x, &on)| if on { x } else { 0.0 })
                    .collect(),
            )]
        });
        Ok(self.push(Tensor::new(shape, out)?, rg, vec![a.0], Some(backward)))
    }

    /// Row-wise softmax of `logits + mask` over the last axis. `mask` holds
    /// additive `0`/`-inf` entries and never receives a gradient. A row whose
    /// entries are all `-inf` produces an all-zero row.
    pub fn masked_softmax(&self, logits: Var, mask: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != mask.shape() || lv.rank() < 1 {
            return Err(Error::shape("masked_softmax", lv.shape(), mask.shape()));
        }
        let shape = lv.shape().to_vec();
        let cols = *shape.last().unwrap();
        let mut out = vec![0.0; lv.numel()];
        if cols > 0 {
            for ((dst, row), mrow) in out
                .chunks_mut(cols)
                .zip(lv.data().chunks(cols))
                .zip(mask.data().chunks(cols))
            {
                softmax_row(row, Some(mrow), dst);
            }
        }
        let y = out.clone();
        let rg = self.any_grad(&[logits]);
        let backward: BackwardFn = Box::new(move |g, _| {
            let mut gx = vec![0.0; g.len()];
            if cols > 0 {
                for ((dst, yr), gr) in gx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.push(Tensor::new(shape, out)?, rg, vec![logits.0], Some(backward)))
    }

    /// Normalizes each row over the last axis, then applies `gain * x + bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) =
            self.with_values(&[x, gain, bias], |v| (v[0].clone(), v[1].clone(), v[2].clone()));
        let shape = xv.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", &shape, gv.shape()));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        let backward: BackwardFn = Box::new(move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; g.len()]);
            let mut gg = needs[1].then(|| vec![0.0; d]);
            let mut gbias = needs[2].then(|| vec![0.0; d]);
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                if let Some(gg) = gg.as_mut() {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
                if let Some(gbias) = gbias.as_mut() {
                    for j in 0..d {
                        gbias[j] += gr[j];
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let dh: Vec<f64> = (0..d).map(|j| gr[j] * gv.data()[j]).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            vec![gx, gg, gbias]
        });
        Ok(self.push(Tensor::new(shape, out)?, rg, vec![x.0, gain.0, bias.0], Some(backward)))
    }

    /// Gathers rows of a `[rows, d]` table, producing `[indices.len(), d]`.
    pub fn embedding_gather(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let sh = tv.shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::shape("embedding_gather", &sh, &[2]));
        }
        let (rows, d) = (sh[0], sh[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "embedding index {bad} out of range for table with {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let indices = indices.to_vec();
        let rg = self.any_grad(&[table]);
        let backward: BackwardFn = Box::new(move |g, _| {
            let mut gt = vec![0.0; rows * d];
            for (n, &i) in indices.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g[n * d + j];
                }
            }
            vec![Some(gt)]
        });
        let n = out.len() / d.max(1);
        Ok(self.push(Tensor::new(vec![n, d], out)?, rg, vec![table.0], Some(backward)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(shape.to_vec(), av.into_data())
            .map_err(|_| Error::shape("reshape", &self.shape(a), shape))?;
        let rg = self.any_grad(&[a]);
        let backward: BackwardFn = Box::new(|g, _| vec![Some(g.to_vec())]);
        Ok(self.push(value, rg, vec![a.0], Some(backward)))
    }

    /// Collapses all axes after the first into one.
    pub fn flatten(&self, a: Var) -> Result<Var> {
        let sh = self.shape(a);
        let lead = *sh.first().unwrap_or(&1);
        let rest: usize = sh.iter().skip(1).product();
        self.reshape(a, &[lead, rest])
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", first.shape(), &[axis]));
        }
        for v in &vals {
            let ok = v.rank() == rank
                && (0..rank).all(|ax| ax == axis || v.shape()[ax] == first.shape()[ax]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), v.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = widths.iter().sum::<usize>() / inner.max(1);
        let rg = self.any_grad(parts);
        let backward: BackwardFn = Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&widths)
                .map(|(&n, &w)| n.then(|| Vec::with_capacity(outer * w)))
                .collect();
            for o in 0..outer {
                let mut off = o * total;
                for (slot, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(buf) = slot.as_mut() {
                        buf.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        });
        let parents = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(shape, out)?, rg, parents, Some(backward)))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.numel();
        let rg = self.any_grad(&[a]);
        let backward: BackwardFn = Box::new(move |g, _| vec![Some(vec![g[0]; n])]);
        Ok(self.push(Tensor::scalar(av.sum()), rg, vec![a.0], Some(backward)))
    }

    /// Mean negative log-softmax of the target class over a `[batch, C]`
    /// logit matrix. Optional per-class weights turn it into a weighted mean.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let sh = lv.shape().to_vec();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &sh, &[targets.len()]));
        }
        let (batch, classes) = (sh[0], sh[1]);
        if classes < 2 {
            return Err(Error::InvalidArgument("cross_entropy needs at least 2 classes".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!(
                "target class {t} out of range for {classes} classes"
            )));
        }
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(Error::shape("cross_entropy weights", &[classes], &[w.len()]));
            }
        }
        let weight = |t: usize| class_weights.map_or(1.0, |w| w[t]);
        let norm: f64 = targets.iter().map(|&t| weight(t)).sum();
        if norm <= 0.0 {
            return Err(Error::InvalidArgument("cross_entropy weights sum to zero".into()));
        }
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weight(t) * (lse - row[t]);
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let weights: Vec<f64> = targets.iter().map(|&t| weight(t) / norm).collect();
        let targets = targets.to_vec();
        let rg = self.any_grad(&[logits]);
        let backward: BackwardFn = Box::new(move |g, _| {
            let mut gx = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                gx[r * classes + t] -= 1.0;
                for c in 0..classes {
                    gx[r * classes + c] *= weights[r] * g[0];
                }
            }
            vec![Some(gx)]
        });
        Ok(self.push(Tensor::scalar(loss / norm), rg, vec![logits.0], Some(backward)))
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in increasing order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stabilized softmax of one row plus an optional additive mask.
/// Writes zeros when every masked logit is `-inf`.
pub fn softmax_row(logits: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    let shifted = |j: usize| logits[j] + mask.map_or(0.0, |m| m[j]);
    let max = (0..logits.len()).map(shifted).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        let e = (shifted(j) - max).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn masked_softmax_examples() {
        let tape = Tape::new();
        let ninf = f64::NEG_INFINITY;
        let l = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let mask = Tensor::from_rows(&[vec![0.0, ninf]]).unwrap();
        let y = tape.masked_softmax(l, &mask).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let l = tape.constant(
            Tensor::from_rows(&[vec![2f64.ln(), 1f64.ln(), 1f64.ln()]]).unwrap(),
        );
        let y = tape.masked_softmax(l, &Tensor::zeros(&[1, 3])).unwrap();
        let v = tape.value(y);
        for (got, want) in v.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!(close(*got, want, 1e-15));
        }

        let l = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0, 7.0]]).unwrap());
        let y = tape.masked_softmax(l, &Tensor::filled(&[1, 3], ninf)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_and_layer_norm_and_gather() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(tape.value(tape.relu(x).unwrap()).data(), &[0.0, 0.0, 2.0]);

        let x = tape.constant(Tensor::filled(&[1, 4], 3.0));
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let table: Vec<f64> = (0..15).map(f64::from).collect();
        let t = tape.constant(Tensor::new(vec![5, 3], table).unwrap());
        let r = tape.embedding_gather(t, &[2]).unwrap();
        assert_eq!(tape.value(r).data(), &[6.0, 7.0, 8.0]);
        assert!(tape.embedding_gather(t, &[5]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap());
        let loss = tape.cross_entropy(l, &[0], None).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-4);

        let l = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let loss = tape.cross_entropy(l, &[0], None).unwrap();
        assert!(close(tape.value(loss).data()[0], 2f64.ln(), 1e-15));

        assert!(tape.cross_entropy(l, &[2], None).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_and_clears_tape() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        assert!(tape.backward(w).is_err());
        let s = tape.sum(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
        assert!(tape.is_empty());
    }

    #[test]
    fn sum_of_matvec_gives_broadcast_input() {
        // d/dW sum(W·x) = 1 ⊗ xᵀ: every row of the gradient equals x.
        let tape = Tape::new();
        let w = tape.leaf(
            Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.5, 0.1, -0.2]])
                .unwrap()
                .with_grad(),
        );
        let x = tape.constant(Tensor::new(vec![3, 1], vec![1.5, -2.0, 4.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.5, -2.0, 4.0, 1.5, -2.0, 4.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn add_broadcasts_bias_over_leading_axes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3, 2]).with_grad());
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data()[4..6], [1.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn concat_round_trips_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let b = tape.leaf(Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap().with_grad());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), vec![2, 3, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 6.0, 7.0]);
        let w = tape.constant(Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
        let w = tape.transpose(w).unwrap();
        let w = tape.transpose(w).unwrap();
        let prod = tape.concat(&[c, w], 0).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().numel(), 4);
        assert_eq!(grads.get(b).unwrap().numel(), 8);
    }
}
