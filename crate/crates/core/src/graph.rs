//! A small reverse-mode automatic differentiation tape.
//!
//! Every forward call appends one node holding its value and enough state to
//! run its adjoint. [`Graph::backward`] walks the tape in reverse. Parameters
//! are bound by name from a [`ParamStore`] so gradients can be routed back to
//! the optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Batch statistics for normalization layers, statistics are recorded.
    Train,
    /// Running statistics for normalization layers.
    #[default]
    Eval,
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

/// Per-channel batch statistics recorded by a normalization layer in
/// training mode. `var` is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct TripletPick {
    pos: usize,
    neg: usize,
    d_pos: f64,
    d_neg: f64,
    active: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    AvgPool(Var),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    ConcatCols(Vec<Var>),
    SpatialSoftmax(Var),
    AttentionPool {
        map: Var,
        prob: Var,
    },
    CosineRows {
        a: Var,
        b: Var,
        eps: f64,
    },
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        targets: Tensor,
    },
    Triplet {
        emb: Var,
        picks: Vec<TripletPick>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: BTreeMap<String, Var>,
    batch_stats: Vec<BatchStats>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf (used for input-gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds the named parameter of `store`, once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats> {
        std::mem::take(&mut self.batch_stats)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, s), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let t = self.tracked(a);
        self.push(v, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let t = self.tracked(a);
        self.push(v, Op::Sigmoid(a), t)
    }

    /// `x [N, I]` times `w [O, I]` transposed, plus `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) {
            return Err(Error::Config(format!(
                "linear input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            bv.expect_shape(&[o])?;
            for row in out.chunks_mut(o) {
                for (y, &bb) in row.iter_mut().zip(bv.data()) {
                    *y += bb;
                }
            }
        }
        let t = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, t))
    }

    /// Grouped 2-D convolution of `x [N, C, H, W]` with `w [O, C/G, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(xv.shape(), wv.shape(), spec)?;
        let cols_len = geom.k * geom.n * geom.l;
        let mut cols = vec![0.0; cols_len];
        let mut tmp = vec![0.0; geom.og * geom.n * geom.l];
        let mut out = vec![0.0; geom.n * geom.o * geom.l];
        for g in 0..spec.groups {
            geom.im2col(xv.data(), g, &mut cols);
            let wg = &wv.data()[g * geom.og * geom.k..(g + 1) * geom.og * geom.k];
            gemm(
                geom.og,
                geom.k,
                geom.n * geom.l,
                wg,
                false,
                &cols,
                false,
                &mut tmp,
                false,
            );
            for n in 0..geom.n {
                for o in 0..geom.og {
                    let dst = (n * geom.o + g * geom.og + o) * geom.l;
                    let src = o * geom.n * geom.l + n * geom.l;
                    out[dst..dst + geom.l].copy_from_slice(&tmp[src..src + geom.l]);
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            bv.expect_shape(&[geom.o])?;
            for (i, chunk) in out.chunks_mut(geom.l).enumerate() {
                let bb = bv.data()[i % geom.o];
                chunk.iter_mut().for_each(|y| *y += bb);
            }
        }
        let value = Tensor::new(&[geom.n, geom.o, geom.ho, geom.wo], out)?;
        let t = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, t))
    }

    /// Normalization over every axis except axis 1 (channels) of a rank-2 or
    /// rank-4 input. Training mode normalizes with batch statistics and
    /// records them under `layer`; eval mode uses `running` (mean, var).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        running: (&[f64], &[f64]),
        eps: f64,
        layer: &str,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 && xv.rank() != 4 {
            return Err(Error::Config(format!(
                "batch norm expects rank 2 or 4, got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let s: usize = xv.shape()[2..].iter().product();
        let m = n * s;
        self.value(gamma).expect_shape(&[c])?;
        let use_batch = self.mode == Mode::Train;
        let (mean, var) = if use_batch {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ni in 0..n {
                for (ci, mu) in mean.iter_mut().enumerate() {
                    let base = (ni * c + ci) * s;
                    *mu += xv.data()[base..base + s].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|mu| *mu /= m as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    var[ci] += xv.data()[base..base + s]
                        .iter()
                        .map(|v| (v - mean[ci]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            if running.0.len() != c || running.1.len() != c {
                return Err(Error::Config(format!(
                    "running statistics of `{layer}` have the wrong width"
                )));
            }
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = beta.map(|b| self.value(b).data().to_vec());
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for j in base..base + s {
                    let h = (xv.data()[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = gv[ci] * h + bv.as_ref().map_or(0.0, |b| b[ci]);
                }
            }
        }
        let shape = xv.shape().to_vec();
        if use_batch {
            let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            self.batch_stats.push(BatchStats {
                layer: layer.to_string(),
                mean,
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        let t = self.tracked(x) || self.tracked(gamma) || beta.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(&shape, xhat)?,
                inv_std,
                batch_stats: use_batch,
            },
            t,
        ))
    }

    /// Spatial mean of `[N, C, H, W]` into `[N, C]`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::Validation(format!(
                "pooling expects a rank-4 map, got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let s = xv.dim(2) * xv.dim(3);
        let data = xv
            .data()
            .chunks(s)
            .map(|ch| ch.iter().sum::<f64>() / s as f64)
            .collect();
        let t = self.tracked(x);
        Ok(self.push(Tensor::new(&[n, c], data)?, Op::AvgPool(x), t))
    }

    /// Spatial window `[top, top + h) x [left, left + w)` of a rank-4 map.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 || top + h > xv.dim(2) || left + w > xv.dim(3) || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "window {h}x{w} at ({top}, {left}) does not fit map {:?}",
                xv.shape()
            )));
        }
        let (n, c, hh, ww) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in top..top + h {
                let start = (plane * hh + y) * ww + left;
                data.extend_from_slice(&xv.data()[start..start + w]);
            }
        }
        let t = self.tracked(x);
        Ok(self.push(Tensor::new(&[n, c, h, w], data)?, Op::Crop { x, top, left }, t))
    }

    /// Concatenates rank-2 tensors along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("nothing to concatenate".into()))?;
        let n = self.value(*first).dim(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.dim(0) != n {
                return Err(Error::Validation(format!(
                    "cannot concatenate {:?} with batch {n}",
                    pv.shape()
                )));
            }
            widths.push(pv.dim(1));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for row in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(row));
            }
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Tensor::new(&[n, total], data)?, Op::ConcatCols(parts.to_vec()), t))
    }

    /// Softmax over the spatial cells of each `[1, h, w]` logit plane.
    pub fn spatial_softmax(&mut self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 4 || lv.dim(1) != 1 {
            return Err(Error::Validation(format!(
                "spatial softmax expects [N, 1, h, w], got {:?}",
                lv.shape()
            )));
        }
        let s = lv.dim(2) * lv.dim(3);
        let mut data = Vec::with_capacity(lv.numel());
        for plane in lv.data().chunks(s) {
            data.extend(softmax(plane));
        }
        let shape = lv.shape().to_vec();
        let t = self.tracked(logits);
        Ok(self.push(Tensor::new(&shape, data)?, Op::SpatialSoftmax(logits), t))
    }

    /// `out[n, c] = sum_l prob[n, 0, l] * map[n, c, l]`.
    pub fn attention_pool(&mut self, map: Var, prob: Var) -> Result<Var> {
        let (mv, pv) = (self.value(map), self.value(prob));
        if mv.rank() != 4 || pv.shape() != [mv.dim(0), 1, mv.dim(2), mv.dim(3)] {
            return Err(Error::Validation(format!(
                "attention {:?} does not match map {:?}",
                pv.shape(),
                mv.shape()
            )));
        }
        let (n, c) = (mv.dim(0), mv.dim(1));
        let s = mv.dim(2) * mv.dim(3);
        let mut data = vec![0.0; n * c];
        for ni in 0..n {
            let p = &pv.data()[ni * s..(ni + 1) * s];
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                data[ni * c + ci] = mv.data()[base..base + s].iter().zip(p).map(|(m, w)| m * w).sum();
            }
        }
        let t = self.tracked(map) || self.tracked(prob);
        Ok(self.push(Tensor::new(&[n, c], data)?, Op::AttentionPool { map, prob }, t))
    }

    /// Row-wise cosine similarity of two `[N, D]` tensors, with `eps` added to
    /// each norm.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 {
            return Err(Error::Validation(format!(
                "cosine expects rank 2, got {:?}",
                av.shape()
            )));
        }
        av.expect_shape(bv.shape())?;
        let n = av.dim(0);
        let data = (0..n)
            .map(|i| {
                let (x, y) = (av.row(i), bv.row(i));
                let (dot, nx, ny) = dot_norms(x, y);
                dot / ((nx + eps) * (ny + eps))
            })
            .collect();
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&[n], data)?, Op::CosineRows { a, b, eps }, t))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / xv.numel() as f64;
        let t = self.tracked(x);
        self.push(Tensor::scalar(m), Op::Mean(x), t)
    }

    /// `sum_i w_i * x_i` over scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let vv = self.value(v);
            if vv.numel() != 1 {
                return Err(Error::Validation(format!(
                    "weighted sum of non-scalar {:?}",
                    vv.shape()
                )));
            }
            total += w * vv.item();
        }
        let t = terms.iter().any(|&(v, _)| self.tracked(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), t))
    }

    /// Batch-mean cross entropy of `logits [N, K]` against the label-smoothed
    /// targets `(1 - eps) * onehot + eps / K`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dim(0) != labels.len() {
            return Err(Error::Validation(format!(
                "{} labels for logits {:?}",
                labels.len(),
                lv.shape()
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Validation(format!("smoothing {eps} outside [0, 1)")));
        }
        let (n, k) = (lv.dim(0), lv.dim(1));
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut targets = vec![eps / k as f64; n * k];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            targets[i * k + y] += 1.0 - eps;
            for (j, &z) in row.iter().enumerate() {
                let logp = z - lse;
                loss -= targets[i * k + j] * logp;
                probs.push(logp.exp());
            }
        }
        let t = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                probs: Tensor::new(&[n, k], probs)?,
                targets: Tensor::new(&[n, k], targets)?,
            },
            t,
        ))
    }

    /// Batch-hard triplet loss with margin over Euclidean distances: for each
    /// anchor the farthest positive and the nearest negative (first index on
    /// ties), hinged at zero and averaged over anchors.
    pub fn triplet_hard(&mut self, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let ev = self.value(emb);
        if ev.rank() != 2 || ev.dim(0) != labels.len() {
            return Err(Error::Validation(format!(
                "{} labels for embeddings {:?}",
                labels.len(),
                ev.shape()
            )));
        }
        let n = labels.len();
        let dist = |i: usize, j: usize| -> f64 {
            ev.row(i)
                .iter()
                .zip(ev.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut picks = Vec::with_capacity(n);
        let mut loss = 0.0;
        for i in 0..n {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = dist(i, j);
                if labels[j] == labels[i] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            let (Some((pos, d_pos)), Some((neg, d_neg))) = (pos, neg) else {
                return Err(Error::Validation(format!(
                    "anchor {i} (identity {}) has no positive or no negative in the batch",
                    labels[i]
                )));
            };
            let hinge = d_pos - d_neg + margin;
            let active = hinge > 0.0;
            if active {
                loss += hinge;
            }
            picks.push(TripletPick {
                pos,
                neg,
                d_pos,
                d_neg,
                active,
            });
        }
        let t = self.tracked(emb);
        Ok(self.push(Tensor::scalar(loss / n as f64), Op::Triplet { emb, picks }, t))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Validation("backward needs a scalar root".to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.tracked {
                self.node_backward(node, &gout, &mut grads)?;
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn node_backward(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, gout.zip_map(bv, |g, y| g * y)?);
                self.accumulate(grads, *b, gout.zip_map(av, |g, x| g * x)?);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gout.map(|g| g * s)),
            Op::Relu(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = gout.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                self.accumulate(grads, *a, g);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.tracked(*x) {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, go, false, wv.data(), false, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::new(&[n, i], dx)?);
                }
                if self.tracked(*w) {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, go, true, xv.data(), false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(&[o, i], dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in go.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    self.accumulate(grads, *b, Tensor::new(&[o], db)?);
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geom = ConvGeom::new(xv.shape(), wv.shape(), *spec)?;
                let nl = geom.n * geom.l;
                let mut cols = vec![0.0; geom.k * nl];
                let mut dtmp = vec![0.0; geom.og * nl];
                let mut dcols = vec![0.0; geom.k * nl];
                let mut dw = vec![0.0; wv.numel()];
                let mut dx = vec![0.0; xv.numel()];
                let (need_x, need_w) = (self.tracked(*x), self.tracked(*w));
                for g in 0..spec.groups {
                    for n in 0..geom.n {
                        for o in 0..geom.og {
                            let src = (n * geom.o + g * geom.og + o) * geom.l;
                            let dst = o * nl + n * geom.l;
                            dtmp[dst..dst + geom.l].copy_from_slice(&go[src..src + geom.l]);
                        }
                    }
                    let wrange = g * geom.og * geom.k..(g + 1) * geom.og * geom.k;
                    if need_w {
                        geom.im2col(xv.data(), g, &mut cols);
                        gemm(
                            geom.og,
                            nl,
                            geom.k,
                            &dtmp,
                            false,
                            &cols,
                            true,
                            &mut dw[wrange.clone()],
                            false,
                        );
                    }
                    if need_x {
                        gemm(
                            geom.k,
                            geom.og,
                            nl,
                            &wv.data()[wrange],
                            true,
                            &dtmp,
                            false,
                            &mut dcols,
                            false,
                        );
                        geom.col2im(&dcols, g, &mut dx);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; geom.o];
                    for (i, chunk) in go.chunks(geom.l).enumerate() {
                        db[i % geom.o] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Tensor::new(&[geom.o], db)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = xhat.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let m = (n * s) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for j in base..base + s {
                            dgamma[ci] += go[j] * xhat.data()[j];
                            dbeta[ci] += go[j];
                        }
                    }
                }
                if self.tracked(*x) {
                    let mut dx = vec![0.0; xhat.numel()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * s;
                            for j in base..base + s {
                                dx[j] = if *batch_stats {
                                    gv[ci] * inv_std[ci] / m * (m * go[j] - dbeta[ci] - xhat.data()[j] * dgamma[ci])
                                } else {
                                    gv[ci] * inv_std[ci] * go[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(shape, dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                if let Some(b) = beta {
                    self.accumulate(grads, *b, Tensor::new(&[c], dbeta)?);
                }
            }
            Op::AvgPool(x) => {
                let xv = self.value(*x);
                let s = xv.dim(2) * xv.dim(3);
                let mut dx = vec![0.0; xv.numel()];
                for (chunk, g) in dx.chunks_mut(s).zip(go) {
                    chunk.fill(g / s as f64);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::Crop { x, top, left } => {
                let xv = self.value(*x);
                let (hh, ww) = (xv.dim(2), xv.dim(3));
                let (h, w) = (node.value.dim(2), node.value.dim(3));
                let mut dx = vec![0.0; xv.numel()];
                for plane in 0..xv.dim(0) * xv.dim(1) {
                    for y in 0..h {
                        let dst = (plane * hh + top + y) * ww + left;
                        let src = (plane * h + y) * w;
                        dx[dst..dst + w].copy_from_slice(&go[src..src + w]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.dim(0);
                let total = node.value.dim(1);
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).dim(1);
                    let mut dp = Vec::with_capacity(n * width);
                    for row in 0..n {
                        let start = row * total + offset;
                        dp.extend_from_slice(&go[start..start + width]);
                    }
                    self.accumulate(grads, p, Tensor::new(&[n, width], dp)?);
                    offset += width;
                }
            }
            Op::SpatialSoftmax(logits) => {
                let p = node.value.data();
                let s = node.value.dim(2) * node.value.dim(3);
                let mut dl = vec![0.0; p.len()];
                for ((dst, pp), gg) in dl.chunks_mut(s).zip(p.chunks(s)).zip(go.chunks(s)) {
                    let inner: f64 = pp.iter().zip(gg).map(|(a, b)| a * b).sum();
                    for ((d, &pi), &gi) in dst.iter_mut().zip(pp).zip(gg) {
                        *d = pi * (gi - inner);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(node.value.shape(), dl)?);
            }
            Op::AttentionPool { map, prob } => {
                let (mv, pv) = (self.value(*map), self.value(*prob));
                let (n, c) = (mv.dim(0), mv.dim(1));
                let s = mv.dim(2) * mv.dim(3);
                let mut dm = vec![0.0; mv.numel()];
                let mut dp = vec![0.0; pv.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let g = go[ni * c + ci];
                        let base = (ni * c + ci) * s;
                        for l in 0..s {
                            dm[base + l] = g * pv.data()[ni * s + l];
                            dp[ni * s + l] += g * mv.data()[base + l];
                        }
                    }
                }
                self.accumulate(grads, *map, Tensor::new(mv.shape(), dm)?);
                self.accumulate(grads, *prob, Tensor::new(pv.shape(), dp)?);
            }
            Op::CosineRows { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.dim(1);
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for (i, &g) in go.iter().enumerate() {
                    let (x, y) = (av.row(i), bv.row(i));
                    let (dot, nx, ny) = dot_norms(x, y);
                    let (ex, ey) = (nx + eps, ny + eps);
                    let denom = ex * ey;
                    let sx = if nx > 0.0 { dot / (ex * denom * nx) } else { 0.0 };
                    let sy = if ny > 0.0 { dot / (ey * denom * ny) } else { 0.0 };
                    for j in 0..d {
                        da[i * d + j] = g * (y[j] / denom - sx * x[j]);
                        db[i * d + j] = g * (x[j] / denom - sy * y[j]);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = go[0] / xv.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::full(&shape, go[0] * w));
                }
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let n = probs.dim(0) as f64;
                let g = probs.zip_map(targets, |p, q| go[0] * (p - q) / n)?;
                self.accumulate(grads, *logits, g);
            }
            Op::Triplet { emb, picks } => {
                let ev = self.value(*emb);
                let (n, d) = (ev.dim(0), ev.dim(1));
                let mut de = vec![0.0; ev.numel()];
                let coef = go[0] / n as f64;
                for (i, pick) in picks.iter().enumerate() {
                    if !pick.active {
                        continue;
                    }
                    for (other, dist, sign) in [(pick.pos, pick.d_pos, 1.0), (pick.neg, pick.d_neg, -1.0)] {
                        if dist <= 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = ev.data()[i * d + k] - ev.data()[other * d + k];
                            let g = sign * coef * diff / dist;
                            de[i * d + k] += g;
                            de[other * d + k] -= g;
                        }
                    }
                }
                self.accumulate(grads, *emb, Tensor::new(ev.shape(), de)?);
            }
        }
        Ok(())
    }
}

impl Gradients {
    /// Gradients of every parameter bound on `graph`, by name.
    pub fn param_grads(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .bound_params()
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

/// Shape bookkeeping for a grouped convolution lowered to GEMM via im2col.
/// Columns are laid out `[k, n * l]`: one row per (input channel, ky, kx) of a
/// group and one column per (sample, output cell).
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize,
    og: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    k: usize,
    l: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Config(format!("convolution of {x:?} with kernel {w:?}")));
        }
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (o, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
        let g = spec.groups;
        if g == 0 || spec.stride == 0 || c % g != 0 || o % g != 0 || c / g != cg {
            return Err(Error::Config(format!(
                "{c} input channels and {o} outputs do not split into {g} groups of kernel {w:?}"
            )));
        }
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(Error::Config(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            cg,
            og: o / g,
            kh,
            kw,
            ho,
            wo,
            k: cg * kh * kw,
            l: ho * wo,
            spec,
        })
    }

    /// Visits every (column row, column index, input offset) triple of group
    /// `g` that lands inside the unpadded input.
    fn for_each_tap(&self, g: usize, mut f: impl FnMut(usize, usize)) {
        let nl = self.n * self.l;
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        for ci in 0..self.cg {
            let chan = g * self.cg + ci;
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for n in 0..self.n {
                        let plane = (n * self.c + chan) * self.h * self.w;
                        for oy in 0..self.ho {
                            let iy = oy as isize * s - p + ky as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.wo {
                                let ix = ox as isize * s - p + kx as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let col = n * self.l + oy * self.wo + ox;
                                f(row * nl + col, plane + iy as usize * self.w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], g: usize, cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_tap(g, |ci, xi| cols[ci] = x[xi]);
    }

    fn col2im(&self, cols: &[f64], g: usize, dx: &mut [f64]) {
        self.for_each_tap(g, |ci, xi| dx[xi] += cols[ci]);
    }
}
