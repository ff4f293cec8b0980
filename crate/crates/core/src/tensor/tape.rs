//! Reverse-mode differentiation over a linear record of coarse-grained ops.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, check_labels, col2im, conv2d_with_cols, gemm, ConvGeom};
use super::{Padding, Real, Tensor};
use crate::error::{Error, Result};
use crate::norm::engine::{self, SwitchComponent, SwitchOut};
use crate::norm::{GroupPartition, PartitionKind};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

enum Op<T> {
    Leaf,
    Detached,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Conv { x: usize, w: usize, b: usize, cols: Vec<T>, geom: ConvGeom },
    Relu(usize),
    MaxPool { x: usize, arg: Vec<usize> },
    Reshape(usize),
    Rot90 { x: usize, k: usize },
    Softmax(usize),
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    CrossEntropy { probs: usize, labels: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Norm(Box<NormRecord<T>>),
    Switch(Box<SwitchRecord<T>>),
}

struct NormRecord<T> {
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    pidx: Vec<usize>,
    shape: [usize; 4],
    /// `None` for frozen statistics.
    partition: Option<GroupPartition>,
}

struct SwitchRecord<T> {
    x: usize,
    gamma: usize,
    beta: usize,
    mean_logits: usize,
    var_logits: usize,
    shape: [usize; 4],
    comps: Vec<SwitchComponent>,
    wm: Vec<f64>,
    wv: Vec<f64>,
    out: SwitchOut<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of a forward computation. Build values with the op methods, then call
/// [`Tape::backward`] on a scalar result.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), recording: true }
    }

    /// A tape that keeps values but no backward record; `backward` fails on it.
    pub fn no_grad() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::NoForwardRecord(format!("variable {} belongs to another tape", v.id)));
        }
        self.nodes
            .get(v.id)
            .ok_or_else(|| Error::NoForwardRecord(format!("variable {} is not on this tape", v.id)))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v).map(|n| &n.value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize], what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        let needs_grad = self.recording && parents.iter().any(|&p| self.nodes[p].needs_grad);
        let op = if needs_grad { op } else { Op::Detached };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { id: self.nodes.len() - 1, tape: self.id })
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("parameter".into()));
        }
        let needs_grad = self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Ok(Var { id: self.nodes.len() - 1, tape: self.id })
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("input".into()));
        }
        self.nodes.push(Node { value, op: Op::Detached, needs_grad: false });
        Ok(Var { id: self.nodes.len() - 1, tape: self.id })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.add(self.value(b)?)?;
        self.push(out, Op::Add(a.id, b.id), &[a.id, b.id], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.zip_map(self.value(b)?, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a.id, b.id), &[a.id, b.id], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.mul(self.value(b)?)?;
        self.push(out, Op::Mul(a.id, b.id), &[a.id, b.id], "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a)?.scale(s);
        self.push(out, Op::Scale(a.id, s), &[a.id], "scale")
    }

    /// Adds a `[D]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x)?, self.value(b)?);
        let d = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [d] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x.id, b.id), &[x.id, b.id], "add_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a)?, self.value(b)?)?;
        self.push(out, Op::MatMul(a.id, b.id), &[a.id, b.id], "matmul")
    }

    /// `x [N, D] * w [D, M] + b [M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (out, cols, geom) = conv2d_with_cols(self.value(x)?, self.value(w)?, self.value(b)?, stride, padding)?;
        let cols = if self.recording { cols } else { Vec::new() };
        self.push(out, Op::Conv { x: x.id, w: w.id, b: b.id, cols, geom }, &[x.id, w.id, b.id], "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x.id), &[x.id], "relu")
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = kernels::max_pool2(self.value(x)?)?;
        self.push(out, Op::MaxPool { x: x.id, arg }, &[x.id], "max_pool2")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x)?.reshape(shape)?;
        self.push(out, Op::Reshape(x.id), &[x.id], "reshape")
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x)?.shape().to_vec();
        let n = *shape.first().ok_or_else(|| Error::shape("flatten", "scalar"))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn rot90(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = kernels::rot90(self.value(x)?, k)?;
        self.push(out, Op::Rot90 { x: x.id, k: k % 4 }, &[x.id], "rot90")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x)?)?;
        self.push(out, Op::Softmax(x.id), &[x.id], "softmax")
    }

    /// Mean cross-entropy of `labels` under `softmax(logits)`, computed stably.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let probs = kernels::softmax_rows(self.value(logits)?)?;
        let &[n, m] = probs.shape() else { unreachable!("softmax_rows checks rank") };
        check_labels(labels, n, m)?;
        let lv = self.value(logits)?;
        let mut total = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            let row = &lv.data()[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).f64();
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[l].f64();
        }
        let loss = Tensor::scalar(T::lit(total / n.max(1) as f64));
        let op = Op::SoftmaxCe { logits: logits.id, labels: labels.to_vec(), probs: probs.into_data() };
        self.push(loss, op, &[logits.id], "softmax_cross_entropy")
    }

    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let loss = Tensor::scalar(kernels::cross_entropy(self.value(probs)?, labels)?);
        self.push(loss, Op::CrossEntropy { probs: probs.id, labels: labels.to_vec() }, &[probs.id], "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x)?.sum());
        self.push(out, Op::Sum(x.id), &[x.id], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        let out = Tensor::scalar(v.sum() / T::lit(v.numel().max(1) as f64));
        self.push(out, Op::Mean(x.id), &[x.id], "mean")
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let shape = self.value(x)?.nhwc()?;
        let (g, b) = (self.value(gamma)?, self.value(beta)?);
        if g.shape() != b.shape() || g.rank() != 2 || g.shape()[1] != shape[3] {
            return Err(Error::shape(
                "normalize",
                format!("gamma {:?} / beta {:?} for {} channels", g.shape(), b.shape(), shape[3]),
            ));
        }
        Ok(shape)
    }

    fn sample_pidx(&self, gamma: Var, sample_sets: &[usize], shape: [usize; 4]) -> Result<Vec<usize>> {
        let sets = self.value(gamma)?.shape()[0];
        if sample_sets.len() != shape[0] {
            return Err(Error::shape("normalize", format!("{} routing entries for batch {}", sample_sets.len(), shape[0])));
        }
        if let Some(&bad) = sample_sets.iter().find(|&&s| s >= sets) {
            return Err(Error::invalid(format!("parameter set {bad} out of {sets}")));
        }
        Ok(engine::param_index(sample_sets, shape[3]))
    }

    /// Normalization with statistics computed from `x` under `partition`.
    /// Sample `n` uses the parameter row `sample_sets[n]` of `gamma`/`beta`.
    /// Returns the per-group `(mean, var)` alongside the output.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        partition: GroupPartition,
        sample_sets: &[usize],
        eps: f64,
    ) -> Result<(Var, Vec<(f64, f64)>)> {
        let shape = self.check_affine(x, gamma, beta)?;
        if partition.shape() != shape {
            return Err(Error::shape("normalize", format!("partition {:?} vs input {shape:?}", partition.shape())));
        }
        let pidx = self.sample_pidx(gamma, sample_sets, shape)?;
        let out = engine::dynamic_forward(
            self.value(x)?.data(),
            &partition,
            &pidx,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            eps,
        )?;
        let y = Tensor::new(self.value(x)?.shape(), out.y)?;
        let record = NormRecord {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat: out.xhat,
            inv_std: out.inv_std,
            pidx,
            shape,
            partition: Some(partition),
        };
        let v = self.push(y, Op::Norm(Box::new(record)), &[x.id, gamma.id, beta.id], "normalize")?;
        Ok((v, out.stats))
    }

    /// Normalization with fixed per-channel statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn normalize_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        sample_sets: &[usize],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.check_affine(x, gamma, beta)?;
        if mean.len() != shape[3] || var.len() != shape[3] {
            return Err(Error::shape("normalize_frozen", format!("{} running channels vs {}", mean.len(), shape[3])));
        }
        let pidx = self.sample_pidx(gamma, sample_sets, shape)?;
        let (y, xhat, inv_std) = engine::frozen_forward(
            self.value(x)?.data(),
            shape,
            mean,
            var,
            &pidx,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            eps,
        );
        let y = Tensor::new(self.value(x)?.shape(), y)?;
        let record =
            NormRecord { x: x.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, pidx, shape, partition: None };
        self.push(y, Op::Norm(Box::new(record)), &[x.id, gamma.id, beta.id], "normalize_frozen")
    }

    /// SwitchNorm: mixes (batch, layer, instance) statistics with softmax weights of
    /// `mean_logits` / `var_logits`. The batch component pools over `batch_partition`
    /// or, when `frozen_batch` is given, uses those per-channel running statistics.
    /// Returns the batch-component statistics alongside the output.
    #[allow(clippy::too_many_arguments)]
    pub fn normalize_switch(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean_logits: Var,
        var_logits: Var,
        batch_partition: GroupPartition,
        frozen_batch: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Vec<(f64, f64)>)> {
        let shape = self.check_affine(x, gamma, beta)?;
        if self.value(gamma)?.shape()[0] != 1 {
            return Err(Error::shape("normalize_switch", "switch norm has a single parameter set"));
        }
        let wm = engine::simplex(&to_f64(self.value(mean_logits)?, 3)?);
        let wv = engine::simplex(&to_f64(self.value(var_logits)?, 3)?);
        let comps = switch_components(self.value(x)?, shape, batch_partition, frozen_batch)?;
        let batch_stats = comps[0].stats.clone();
        let out = engine::switch_forward(
            self.value(x)?.data(),
            shape,
            &comps,
            &wm,
            &wv,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            eps,
        )?;
        let y = Tensor::new(self.value(x)?.shape(), out.y.clone())?;
        let record = SwitchRecord {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            mean_logits: mean_logits.id,
            var_logits: var_logits.id,
            shape,
            comps,
            wm,
            wv,
            out,
        };
        let parents = [x.id, gamma.id, beta.id, mean_logits.id, var_logits.id];
        let v = self.push(y, Op::Switch(Box::new(record)), &parents, "normalize_switch")?;
        Ok((v, batch_stats))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NoForwardRecord("tape was built without gradient recording".into()));
        }
        let lv = self.value(loss)?;
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(lv.shape(), vec![T::one()])?);
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, g, &mut grads)?;
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn val(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
                accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.mul(self.val(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.mul(self.val(*a))?);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddBias(x, b) => {
                if self.wants(*b) {
                    let d = self.val(*b).numel();
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks(d.max(1)) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(&[d], db)?);
                }
                accumulate(grads, *x, g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, T::zero());
                    accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, T::zero());
                    accumulate(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Conv { x, w, b, cols, geom } => {
                let rows = geom.rows();
                let patch = geom.patch();
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); patch * geom.cout];
                    gemm(patch, rows, geom.cout, cols, true, g.data(), false, &mut dw, T::zero());
                    accumulate(grads, *w, Tensor::new(self.val(*w).shape(), dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); geom.cout];
                    for row in g.data().chunks(geom.cout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(&[geom.cout], db)?);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(rows, geom.cout, patch, g.data(), false, self.val(*w).data(), true, &mut dcols, T::zero());
                    let dx = col2im(&dcols, geom);
                    accumulate(grads, *x, Tensor::new(self.val(*x).shape(), dx)?);
                }
            }
            Op::Relu(x) => {
                let mut dx = g;
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, arg } => {
                let mut dx = Tensor::zeros(self.val(*x).shape());
                for (&src, &d) in arg.iter().zip(g.data()) {
                    dx.data_mut()[src] += d;
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.into_reshape(self.val(*x).shape())?),
            Op::Rot90 { x, k } => accumulate(grads, *x, kernels::rot90(&g, (4 - k) % 4)?),
            Op::Softmax(x) => {
                let y = &node.value;
                let m = y.shape()[1];
                let mut dx = g.data().to_vec();
                for (drow, yrow) in dx.chunks_mut(m).zip(y.data().chunks(m)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &yy) in drow.iter_mut().zip(yrow) {
                        *d = yy * (*d - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let shape = self.val(*logits).shape().to_vec();
                let (n, m) = (shape[0], shape[1]);
                let scale = g.item()? / T::lit(n as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * m + l] -= T::one();
                }
                for v in d.iter_mut() {
                    *v *= scale;
                }
                accumulate(grads, *logits, Tensor::new(&shape, d)?);
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.val(*probs);
                let m = p.shape()[1];
                let n = labels.len();
                let scale = g.item()? / T::lit(n as f64);
                let mut d = Tensor::zeros(p.shape());
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * m + l] = -scale / p.data()[i * m + l];
                }
                accumulate(grads, *probs, d);
            }
            Op::Sum(x) => {
                let s = g.item()?;
                accumulate(grads, *x, Tensor::full(self.val(*x).shape(), s));
            }
            Op::Mean(x) => {
                let xv = self.val(*x);
                let s = g.item()? / T::lit(xv.numel().max(1) as f64);
                accumulate(grads, *x, Tensor::full(xv.shape(), s));
            }
            Op::Norm(r) => {
                let gamma = self.val(r.gamma);
                let grads_out = match &r.partition {
                    Some(p) => engine::dynamic_backward(g.data(), &r.xhat, &r.inv_std, p, &r.pidx, gamma.data()),
                    None => engine::frozen_backward(g.data(), &r.xhat, &r.inv_std, r.shape, &r.pidx, gamma.data()),
                };
                if self.wants(r.gamma) {
                    accumulate(grads, r.gamma, Tensor::new(gamma.shape(), grads_out.dgamma)?);
                }
                if self.wants(r.beta) {
                    accumulate(grads, r.beta, Tensor::new(gamma.shape(), grads_out.dbeta)?);
                }
                if self.wants(r.x) {
                    accumulate(grads, r.x, Tensor::new(self.val(r.x).shape(), grads_out.dx)?);
                }
            }
            Op::Switch(r) => {
                let gamma = self.val(r.gamma);
                let xv = self.val(r.x);
                let sg =
                    engine::switch_backward(g.data(), xv.data(), r.shape, &r.comps, &r.wm, &r.wv, &r.out, gamma.data());
                if self.wants(r.gamma) {
                    accumulate(grads, r.gamma, Tensor::new(gamma.shape(), sg.dgamma)?);
                }
                if self.wants(r.beta) {
                    accumulate(grads, r.beta, Tensor::new(gamma.shape(), sg.dbeta)?);
                }
                if self.wants(r.mean_logits) {
                    let d = engine::simplex_backward(&r.wm, &sg.dwm);
                    accumulate(grads, r.mean_logits, Tensor::new(&[3], d.into_iter().map(T::lit).collect())?);
                }
                if self.wants(r.var_logits) {
                    let d = engine::simplex_backward(&r.wv, &sg.dwv);
                    accumulate(grads, r.var_logits, Tensor::new(&[3], d.into_iter().map(T::lit).collect())?);
                }
                if self.wants(r.x) {
                    accumulate(grads, r.x, Tensor::new(xv.shape(), sg.dx)?);
                }
            }
        }
        Ok(())
    }
}

fn to_f64<T: Real>(t: &Tensor<T>, len: usize) -> Result<Vec<f64>> {
    if t.numel() != len {
        return Err(Error::shape("switch logits", format!("expected {len} values, got {:?}", t.shape())));
    }
    Ok(t.data().iter().map(|v| v.f64()).collect())
}

/// Builds the (batch, layer, instance) statistic sources for SwitchNorm.
pub(crate) fn switch_components<T: Real>(
    x: &Tensor<T>,
    shape: [usize; 4],
    batch_partition: GroupPartition,
    frozen_batch: Option<(&[T], &[T])>,
) -> Result<Vec<SwitchComponent>> {
    let batch = match frozen_batch {
        Some((mean, var)) => {
            if mean.len() != shape[3] || var.len() != shape[3] {
                return Err(Error::shape("switch", "running statistics do not match channels"));
            }
            SwitchComponent {
                partition: GroupPartition::new(PartitionKind::Batch, shape)?,
                stats: mean.iter().zip(var).map(|(m, v)| (m.f64(), v.f64())).collect(),
                frozen: true,
            }
        }
        None => {
            if batch_partition.shape() != shape {
                return Err(Error::shape("switch", "batch partition does not match input"));
            }
            let stats = kernels::group_stats_f64(x.data(), &batch_partition)?;
            SwitchComponent { partition: batch_partition, stats, frozen: false }
        }
    };
    let mut comps = vec![batch];
    for kind in [PartitionKind::Layer, PartitionKind::Instance] {
        let partition = GroupPartition::new(kind, shape)?;
        let stats = kernels::group_stats_f64(x.data(), &partition)?;
        comps.push(SwitchComponent { partition, stats, frozen: false });
    }
    Ok(comps)
}
