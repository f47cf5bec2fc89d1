//! A small reverse-mode differentiation engine.
//!
//! The engine is closed-world: it knows exactly the operations the heatmap
//! predictor and the fusion chain need, each with a hand-written adjoint.
//! Values are `f64` throughout. Every forward op checks its output for
//! non-finite values and reports the offending op by name.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// Dense row-major tensor of doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map `out[r] = Σ w·src[i]`, stored row-compressed. Used for
/// resampling rasters; its adjoint is the transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    n_in: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl SparseMap {
    pub fn from_rows(n_in: usize, rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut offsets = vec![0];
        let mut entries = Vec::new();
        for row in rows {
            for (i, w) in row {
                assert!(i < n_in, "sparse map column {i} out of range {n_in}");
                entries.push((i as u32, w));
            }
            offsets.push(entries.len());
        }
        SparseMap { n_in, offsets, entries }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn apply(&self, src: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).iter().map(|&(i, w)| w * src[i as usize]).sum();
        }
    }

    pub fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        for (r, &gr) in g.iter().enumerate() {
            for &(i, w) in self.row(r) {
                out[i as usize] += w * gr;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarDiv(Var, f64),
    Conv2d { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Linear { input: Var, weight: Var, bias: Var },
    Softmax(Var),
    WeightedSum { coords: Var, weights: Var },
    SoftmaxCentroid { logits: Var, coords: Var, weights: Vec<f64> },
    Norm(Var),
    Mean(Var),
    MaskFill { src: Var, keep: Arc<Vec<bool>> },
    Resample { src: Var, map: Arc<SparseMap> },
    Slice { src: Var, start: usize },
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::ScalarDiv(..) => "scalar_divide",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Linear { .. } => "linear",
            Op::Softmax(..) => "softmax_over_set",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SoftmaxCentroid { .. } => "softmax_centroid",
            Op::Norm(..) => "euclidean_norm",
            Op::Mean(..) => "mean",
            Op::MaskFill { .. } => "mask_fill",
            Op::Resample { .. } => "resample",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so reverse index order is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]. Entries are `None` for values that do not
/// depend on any `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(Tensor { shape, data }, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        self.same_shape(op.name(), a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scalar_div(&mut self, a: Var, divisor: f64) -> Result<Var, TensorError> {
        let data = self.value(a).data.iter().map(|x| x / divisor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::ScalarDiv(a, divisor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.value(a).data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Relu(a), &[a])
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `input: [Cin, H, W]`, `weight: [Cout, Cin, 3, 3]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let (cin, h, w) = match *self.shape(input) {
            [c, h, w] => (c, h, w),
            ref s => return Err(shape_err("conv2d", format!("input must be [C,H,W], got {s:?}"))),
        };
        let cout = match *self.shape(weight) {
            [co, ci, 3, 3] if ci == cin => co,
            ref s => return Err(shape_err("conv2d", format!("weight {s:?} incompatible with {cin} input channels"))),
        };
        if self.shape(bias) != [cout] {
            return Err(shape_err("conv2d", format!("bias must be [{cout}], got {:?}", self.shape(bias))));
        }
        let out = conv3x3_forward(&self.value(input).data, cin, h, w, &self.value(weight).data, &self.value(bias).data, cout);
        self.push(vec![cout, h, w], out, Op::Conv2d { input, weight, bias }, &[input, weight, bias])
    }

    /// `weight · input + bias` with `input: [N]`, `weight: [M, N]`, `bias: [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let n = match *self.shape(input) {
            [n] => n,
            ref s => return Err(shape_err("linear", format!("input must be 1-D, got {s:?}"))),
        };
        let m = match *self.shape(weight) {
            [m, k] if k == n => m,
            ref s => return Err(shape_err("linear", format!("weight {s:?} incompatible with input length {n}"))),
        };
        if self.shape(bias) != [m] {
            return Err(shape_err("linear", format!("bias must be [{m}], got {:?}", self.shape(bias))));
        }
        let (x, wt, b) = (&self.value(input).data, &self.value(weight).data, &self.value(bias).data);
        let out = (0..m).map(|i| b[i] + wt[i * n..(i + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect();
        self.push(vec![m], out, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// Softmax over every element of `values`, treated as one set. Masked
    /// entries take part as whatever (very negative) value they hold.
    pub fn softmax_over_set(&mut self, values: Var) -> Result<Var, TensorError> {
        if self.value(values).is_empty() {
            return Err(shape_err("softmax_over_set", "empty set"));
        }
        let out = softmax(&self.value(values).data);
        let shape = self.shape(values).to_vec();
        self.push(shape, out, Op::Softmax(values), &[values])
    }

    /// `Σ_i weights[i] · coords[i, :]` with `coords: [N, D]`, `weights: [N]`.
    pub fn weighted_sum(&mut self, coords: Var, weights: Var) -> Result<Var, TensorError> {
        let (n, d) = self.points_shape("weighted_sum", coords)?;
        if self.value(weights).len() != n {
            return Err(shape_err("weighted_sum", format!("{} weights for {n} points", self.value(weights).len())));
        }
        let out = weighted_rows(&self.value(coords).data, &self.value(weights).data, d);
        self.push(vec![d], out, Op::WeightedSum { coords, weights }, &[coords, weights])
    }

    /// Softmax centre of mass: `Σ_i softmax(logits)_i · coords[i, :]`, with the
    /// closed-form adjoint `∂/∂logit_k = a_k ⟨g, c_k − p̂⟩`.
    pub fn softmax_centroid(&mut self, logits: Var, coords: Var) -> Result<Var, TensorError> {
        let (n, d) = self.points_shape("softmax_centroid", coords)?;
        if self.value(logits).len() != n || n == 0 {
            return Err(shape_err("softmax_centroid", format!("{} logits for {n} points", self.value(logits).len())));
        }
        let weights = softmax(&self.value(logits).data);
        let out = weighted_rows(&self.value(coords).data, &weights, d);
        self.push(vec![d], out, Op::SoftmaxCentroid { logits, coords, weights }, &[logits, coords])
    }

    fn points_shape(&self, op: &'static str, coords: Var) -> Result<(usize, usize), TensorError> {
        match *self.shape(coords) {
            [n, d] => Ok((n, d)),
            ref s => Err(shape_err(op, format!("coords must be [N, D], got {s:?}"))),
        }
    }

    pub fn euclidean_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).data.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(vec![], vec![n], Op::Norm(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "mean of an empty tensor"));
        }
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(vec![], vec![m], Op::Mean(a), &[a])
    }

    /// Replaces entries where `keep` is false by `fill`. Gradient flows only
    /// through kept entries.
    pub fn mask_fill(&mut self, src: Var, keep: Arc<Vec<bool>>, fill: f64) -> Result<Var, TensorError> {
        if keep.len() != self.value(src).len() {
            return Err(shape_err("mask_fill", format!("mask of {} for {} values", keep.len(), self.value(src).len())));
        }
        let data = self.value(src).data.iter().zip(keep.iter()).map(|(&x, &k)| if k { x } else { fill }).collect();
        let shape = self.shape(src).to_vec();
        self.push(shape, data, Op::MaskFill { src, keep }, &[src])
    }

    /// Applies `map` to every channel of `src: [C, n_in]` (or any shape whose
    /// trailing elements per channel equal `n_in`), producing `[C, n_out]`.
    pub fn resample(&mut self, src: Var, channels: usize, map: Arc<SparseMap>) -> Result<Var, TensorError> {
        let len = self.value(src).len();
        if channels == 0 || len != channels * map.n_in() {
            return Err(shape_err("resample", format!("{len} values is not {channels} x {}", map.n_in())));
        }
        let n_out = map.n_out();
        let mut out = vec![0.0; channels * n_out];
        let s = &self.value(src).data;
        for c in 0..channels {
            map.apply(&s[c * map.n_in()..(c + 1) * map.n_in()], &mut out[c * n_out..(c + 1) * n_out]);
        }
        self.push(vec![channels, n_out], out, Op::Resample { src, map }, &[src])
    }

    /// Contiguous flat sub-range of `src`, reshaped to `shape`.
    pub fn slice(&mut self, src: Var, start: usize, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if start + n > self.value(src).len() {
            return Err(shape_err("slice", format!("range {start}..{} exceeds {}", start + n, self.value(src).len())));
        }
        let data = self.value(src).data[start..start + n].to_vec();
        self.push(shape, data, Op::Slice { src, start }, &[src])
    }

    /// Flat concatenation into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "nothing to concatenate"));
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).data.iter().copied()).collect();
        self.push(vec![data.len()], data, Op::Concat(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: lt.shape.clone(), data: vec![1.0] });
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g.data, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
        f(&mut slot.data);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).zip(vb).for_each(|((x, gi), bi)| *x += gi * bi)
                });
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(g).zip(va).for_each(|((x, gi), ai)| *x += gi * ai)
                });
            }
            Op::ScalarDiv(a, d) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi / d));
            }
            Op::Relu(a) => {
                let va = &self.value(*a).data;
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).zip(va).for_each(|((x, gi), ai)| if *ai > 0.0 { *x += gi })
                });
            }
            Op::Conv2d { input, weight, bias } => {
                let (cin, h, w) = {
                    let s = self.shape(*input);
                    (s[0], s[1], s[2])
                };
                let cout = self.shape(*weight)[0];
                let (x, wt) = (&self.value(*input).data, &self.value(*weight).data);
                self.accumulate(grads, *bias, |gb| {
                    for (co, b) in gb.iter_mut().enumerate() {
                        *b += g[co * h * w..(co + 1) * h * w].iter().sum::<f64>();
                    }
                });
                self.accumulate(grads, *weight, |gw| conv3x3_weight_grad(x, g, cin, h, w, cout, gw));
                self.accumulate(grads, *input, |gi| conv3x3_input_grad(wt, g, cin, h, w, cout, gi));
            }
            Op::Linear { input, weight, bias } => {
                let n = self.value(*input).len();
                let (x, wt) = (&self.value(*input).data, &self.value(*weight).data);
                self.accumulate(grads, *bias, |gb| add_into(gb, g));
                self.accumulate(grads, *weight, |gw| {
                    for (i, gi) in g.iter().enumerate() {
                        gw[i * n..(i + 1) * n].iter_mut().zip(x).for_each(|(a, xv)| *a += gi * xv);
                    }
                });
                self.accumulate(grads, *input, |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        gx.iter_mut().zip(&wt[i * n..(i + 1) * n]).for_each(|(a, wv)| *a += gi * wv);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value.data;
                let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(y).zip(g).for_each(|((x, yi), gi)| *x += yi * (gi - dot))
                });
            }
            Op::WeightedSum { coords, weights } => {
                let d = g.len();
                let (c, wv) = (&self.value(*coords).data, &self.value(*weights).data);
                self.accumulate(grads, *weights, |gw| {
                    for (i, x) in gw.iter_mut().enumerate() {
                        *x += c[i * d..(i + 1) * d].iter().zip(g).map(|(ci, gi)| ci * gi).sum::<f64>();
                    }
                });
                self.accumulate(grads, *coords, |gc| {
                    for (i, wi) in wv.iter().enumerate() {
                        gc[i * d..(i + 1) * d].iter_mut().zip(g).for_each(|(x, gi)| *x += wi * gi);
                    }
                });
            }
            Op::SoftmaxCentroid { logits, coords, weights } => {
                let d = g.len();
                let c = &self.value(*coords).data;
                let p = &node.value.data;
                self.accumulate(grads, *logits, |gl| softmax_centroid_adjoint_into(weights, c, p, g, gl));
                self.accumulate(grads, *coords, |gc| {
                    for (i, wi) in weights.iter().enumerate() {
                        gc[i * d..(i + 1) * d].iter_mut().zip(g).for_each(|(x, gi)| *x += wi * gi);
                    }
                });
            }
            Op::Norm(a) => {
                let n = node.value.data[0];
                let va = &self.value(*a).data;
                if n > 0.0 {
                    self.accumulate(grads, *a, |ga| ga.iter_mut().zip(va).for_each(|(x, ai)| *x += g[0] * ai / n));
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MaskFill { src, keep } => {
                self.accumulate(grads, *src, |gs| {
                    gs.iter_mut().zip(g).zip(keep.iter()).for_each(|((x, gi), k)| if *k { *x += gi })
                });
            }
            Op::Resample { src, map } => {
                let (n_in, n_out) = (map.n_in(), map.n_out());
                self.accumulate(grads, *src, |gs| {
                    for c in 0..g.len() / n_out {
                        map.apply_transpose(&g[c * n_out..(c + 1) * n_out], &mut gs[c * n_in..(c + 1) * n_in]);
                    }
                });
            }
            Op::Slice { src, start } => {
                self.accumulate(grads, *src, |gs| add_into(&mut gs[*start..*start + g.len()], g));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Max-subtracted softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn weighted_rows(coords: &[f64], weights: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (row, w) in coords.chunks_exact(d).zip(weights) {
        if *w != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, c)| *o += w * c);
        }
    }
    out
}

/// Accumulates `a_k ⟨g, c_k − p̂⟩` into `out` for every point `k` of a
/// softmax-weighted centre of mass with weights `a`, coordinates `coords`
/// (`[N, D]`, row-major) and prediction `p̂`.
pub fn softmax_centroid_adjoint_into(weights: &[f64], coords: &[f64], pred: &[f64], g: &[f64], out: &mut [f64]) {
    let d = pred.len();
    for (k, (o, a)) in out.iter_mut().zip(weights).enumerate() {
        if *a == 0.0 {
            continue;
        }
        let c = &coords[k * d..(k + 1) * d];
        let dot: f64 = (0..d).map(|i| g[i] * (c[i] - pred[i])).sum();
        *o += a * dot;
    }
}

fn valid_range(n: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (n as isize - delta).min(n as isize).max(0) as usize;
    (lo, hi)
}

fn conv3x3_forward(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(b[co]);
        for ci in 0..cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let k = wt[((co * cin + ci) * 3 + ky) * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let irow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        orow.iter_mut().zip(irow).for_each(|(a, s)| *a += k * s);
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_weight_grad(x: &[f64], g: &[f64], cin: usize, h: usize, w: usize, cout: usize, gw: &mut [f64]) {
    let plane = h * w;
    for co in 0..cout {
        let go = &g[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &go[y * w + x0..y * w + x1];
                        let irow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[((co * cin + ci) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
    }
}

fn conv3x3_input_grad(wt: &[f64], g: &[f64], cin: usize, h: usize, w: usize, cout: usize, gi: &mut [f64]) {
    let plane = h * w;
    for co in 0..cout {
        let go = &g[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let dst = &mut gi[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let k = wt[((co * cin + ci) * 3 + ky) * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &go[y * w + x0..y * w + x1];
                        let drow = &mut dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        drow.iter_mut().zip(grow).for_each(|(d, gv)| *d += k * gv);
                    }
                }
            }
        }
    }
}

/// Central-difference gradient of a scalar function built on a fresh tape.
pub fn numerical_gradient<F>(f: &F, point: &Tensor, step: f64) -> Result<Tensor, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let x = tape.leaf(t);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut out = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data[i] += step;
        let mut minus = point.clone();
        minus.data[i] -= step;
        out.data[i] = (eval(plus)? - eval(minus)?) / (2.0 * step);
    }
    Ok(out)
}

/// Maximum over components of `|analytic − numerical| / max(1, |analytic|)`,
/// comparing the tape's gradient against central differences with `step`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));
    let numeric = numerical_gradient(&f, point, step)?;
    Ok(max_relative_error(analytic.data(), numeric.data()))
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape_err("adam_step", format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.first_moment.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.len() != state.first_moment[i].len() {
            return Err(shape_err("adam_step", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first_moment[i], &mut state.second_moment[i]);
        for (j, (pj, gj)) in p.data.iter_mut().zip(&g.data).enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *pj -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.5, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = tape.softmax_over_set(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let w = softmax(&[1e4, 1e4 - 1.0, -1e4]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn conv_of_delta_reproduces_kernel() {
        // A delta at (2,2) in a 5x5 image; output(y,x) = k[y-2+1][x-2+1] flipped:
        // out(y,x) = Σ k[ky][kx]·in(y+ky-1, x+kx-1) = k[2-y+1][2-x+1].
        let mut tape = Tape::new();
        let mut img = vec![0.0; 25];
        img[2 * 5 + 2] = 1.0;
        let x = tape.constant(Tensor::new(vec![1, 5, 5], img).unwrap());
        let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], kernel.clone()).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.conv2d(x, w, b).unwrap();
        let out = tape.value(y).data();
        for oy in 1..4 {
            for ox in 1..4 {
                let (ky, kx) = (3 - oy, 3 - ox);
                assert_eq!(out[oy * 5 + ox], kernel[ky * 3 + kx]);
            }
        }
        assert_eq!(out.iter().filter(|v| **v != 0.0).count(), 9);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![4.0, 5.0]));
        let y = tape.mean(c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
        let err = finite_difference_check(|t, _x| {
            let c = t.constant(Tensor::scalar(7.0));
            t.mean(c)
        }, &Tensor::vector(vec![1.0, 2.0]), 1e-6)
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn shape_mismatch_and_nan_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0]));
        assert!(matches!(tape.add(a, b), Err(TensorError::Shape { op: "add", .. })));
        let z = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(tape.scalar_div(z, 0.0).unwrap_err(), TensorError::NonFinite("scalar_divide"));
    }

    #[test]
    fn quadratic_form_fd() {
        let err = finite_difference_check(
            |t, x| {
                let y = t.mul(x, x)?;
                let y = t.mul(y, x)?;
                t.mean(y)
            },
            &Tensor::vector(vec![0.5, -1.2, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linearity_no_double_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = rand_tensor(&mut rng, &[6]);
        let f = |t: &mut Tape, x: Var| -> Result<Var, TensorError> {
            let s = t.softmax_over_set(x)?;
            let r = t.relu(x)?;
            let m = t.mul(s, r)?;
            t.euclidean_norm(m)
        };
        let mut t1 = Tape::new();
        let x1 = t1.leaf(p.clone());
        let y1 = f(&mut t1, x1).unwrap();
        let g1 = t1.backward(y1).unwrap().get(x1).unwrap().clone();
        let mut t2 = Tape::new();
        let x2 = t2.leaf(p);
        let a = f(&mut t2, x2).unwrap();
        let b = f(&mut t2, x2).unwrap();
        let y2 = t2.add(a, b).unwrap();
        let g2 = t2.backward(y2).unwrap().get(x2).unwrap().clone();
        for (u, v) in g1.data().iter().zip(g2.data()) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_centroid_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_tensor(&mut rng, &[12]);
        let coords = rand_tensor(&mut rng, &[12, 3]);
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let c = tape.constant(coords);
        let fused = tape.softmax_centroid(l, c).unwrap();
        let s = tape.softmax_over_set(l).unwrap();
        let composed = tape.weighted_sum(c, s).unwrap();
        let diff = tape.sub(fused, composed).unwrap();
        assert!(tape.value(diff).data().iter().all(|d| d.abs() < 1e-12));
        let nf = tape.euclidean_norm(fused).unwrap();
        let gf = tape.backward(nf).unwrap().get(l).unwrap().clone();
        let nc = tape.euclidean_norm(composed).unwrap();
        let gc = tape.backward(nc).unwrap().get(l).unwrap().clone();
        assert!(max_relative_error(gf.data(), gc.data()) < 1e-12);
    }

    #[test]
    fn resample_and_mask_gradients() {
        let map = Arc::new(SparseMap::from_rows(4, vec![vec![(0, 0.25), (3, 0.75)], vec![], vec![(1, 1.0)]]));
        let keep = Arc::new(vec![true, false, true, true, true, false]);
        let err = finite_difference_check(
            |t, x| {
                let r = t.resample(x, 2, map.clone())?;
                let m = t.mask_fill(r, keep.clone(), -5.0)?;
                let s = t.slice(m, 0, vec![3])?;
                let q = t.mul(m, m)?;
                let c = t.concat(&[s, q])?;
                t.mean(c)
            },
            &Tensor::new(vec![2, 4], vec![0.1, -0.4, 1.3, 2.0, -1.0, 0.3, 0.0, 0.8]).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut st = AdamState::new(&params, 1e-3);
        adam_step(&mut params, &[Tensor::vector(vec![0.0, 0.0])], &mut st).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        // m̂ = g, v̂ = g², update = lr·g/(|g|+eps) ≈ lr·sign(g)
        let mut params = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let mut st = AdamState::new(&params, 1e-3);
        adam_step(&mut params, &[Tensor::vector(vec![0.5, -3.0, 1e-2])], &mut st).unwrap();
        let expect = [-1e-3 * 0.5 / (0.5 + 1e-8), 1e-3 * 3.0 / (3.0 + 1e-8), -1e-3 * 1e-2 / (1e-2 + 1e-8)];
        for (p, e) in params[0].data().iter().zip(expect) {
            assert!((p - e).abs() < 1e-15);
            assert!((p.abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_decreases_quadratic() {
        let loss = |x: f64| (x - 1.0) * (x - 1.0);
        let mut params = vec![Tensor::scalar(3.0)];
        let mut st = AdamState::new(&params, 0.1);
        let l0 = loss(params[0].item());
        for _ in 0..2 {
            let g = 2.0 * (params[0].item() - 1.0);
            adam_step(&mut params, &[Tensor::scalar(g)], &mut st).unwrap();
        }
        assert!(loss(params[0].item()) < l0);
        assert!(adam_step(&mut params, &[Tensor::vector(vec![1.0, 2.0])], &mut st).is_err());
    }
}
