use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddScalar(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sin(Var),
    Reciprocal(Var),
    MaskedMean { x: Var, axis: usize, mask: Vec<bool>, count: usize },
    Dropout { x: Var, keep: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
    Sum(Var),
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in topological order for one reverse pass.
///
/// Every op returns a new [`Var`]; gradients are obtained by consuming the
/// tape with [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    strict: bool,
    first_non_finite: Option<&'static str>,
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (if cols == 0 { 0 } else { n / cols }, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// In strict mode the first non-finite op output is remembered and
    /// reported by [`Tape::check_finite`].
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, "param")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Var {
        if self.strict && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg, "add"))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(bias).len() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg, "add_bias"))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddScalar(x), rg, "add_scalar"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg, "mul"))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(x, c), rg, "scale"))
    }

    /// Multiplies row `i` by the constant `factors[i]`. Used with 0/1 masks.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if factors.len() != rows {
            return Err(Error::shape(
                "scale_rows",
                format!("{} factors for {rows} rows", factors.len()),
            ));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for (r, &f) in factors.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] * f;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScaleRows(x, factors.to_vec()),
            rg,
            "scale_rows",
        ))
    }

    /// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need inputs and axis in {0, 1}"));
        }
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| self.shape(*v).to_vec()).collect();
        if shapes.iter().any(|s| s.len() != 2) {
            return Err(Error::shape("concat", "rank-2 inputs required"));
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return Err(Error::shape("concat", format!("{shapes:?} along axis {axis}")));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let out = if axis == 0 {
            inputs.iter().flat_map(|v| self.data(*v).iter().copied()).collect()
        } else {
            let rows = shapes[0][0];
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, s) in inputs.iter().zip(&shapes) {
                    out.extend_from_slice(&self.data(*v)[r * s[1]..(r + 1) * s[1]]);
                }
            }
            out
        };
        let shape = if axis == 0 {
            vec![total, shapes[0][1]]
        } else {
            vec![shapes[0][0], total]
        };
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        ))
    }

    /// Contiguous slice of a rank-2 tensor along axis 0 or 1.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || axis > 1 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{s:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let xd = self.data(x);
        let (out, shape) = if axis == 0 {
            (xd[start * s[1]..(start + len) * s[1]].to_vec(), vec![len, s[1]])
        } else {
            let mut out = Vec::with_capacity(s[0] * len);
            for r in 0..s[0] {
                out.extend_from_slice(&xd[r * s[1] + start..r * s[1] + start + len]);
            }
            (out, vec![s[0], len])
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            rg,
            "slice",
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg, "transpose"))
    }

    /// Row-wise softmax over the last axis with an optional additive mask of
    /// the same shape. Entries whose mask is `-inf` receive weight exactly 0;
    /// rows with every entry masked come out as all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} for {shape:?}", m.len()),
                ));
            }
        }
        let xd = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let range = r * cols..(r + 1) * cols;
            let visible = |j: usize| mask.map_or(true, |m| m[j] != f64::NEG_INFINITY);
            let shifted = |j: usize| xd[j] + mask.map_or(0.0, |m| m[j]);
            let max = range
                .clone()
                .filter(|&j| visible(j))
                .map(shifted)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in range.clone() {
                if visible(j) {
                    let e = (shifted(j) - max).exp();
                    out[j] = e;
                    total += e;
                }
            }
            for j in range {
                out[j] /= total;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg, "softmax"))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if self.value(gain).len() != cols || self.value(bias).len() != cols || cols == 0 {
            return Err(Error::shape(
                "layer_norm",
                format!("{shape:?} with gain {:?}", self.shape(gain)),
            ));
        }
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg, name))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu(x), "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::sin, Op::Sin(x), "sin")
    }

    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::recip, Op::Reciprocal(x), "reciprocal")
    }

    /// Mean of a rank-2 tensor along `axis` over the entries where `mask` is
    /// true. Axis 0 yields `[1, cols]`, axis 1 yields `[rows, 1]`.
    pub fn masked_mean(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || axis > 1 || mask.len() != s[axis] {
            return Err(Error::shape(
                "masked_mean",
                format!("{s:?} axis {axis} mask {}", mask.len()),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::InvalidArgument("masked_mean over an all-false mask".into()));
        }
        let xd = self.data(x);
        let (rows, cols) = (s[0], s[1]);
        let (out, shape) = if axis == 0 {
            let mut out = vec![0.0; cols];
            for r in (0..rows).filter(|r| mask[*r]) {
                for c in 0..cols {
                    out[c] += xd[r * cols + c];
                }
            }
            out.iter_mut().for_each(|v| *v /= count as f64);
            (out, vec![1, cols])
        } else {
            let out = (0..rows)
                .map(|r| {
                    (0..cols).filter(|c| mask[*c]).map(|c| xd[r * cols + c]).sum::<f64>()
                        / count as f64
                })
                .collect();
            (out, vec![rows, 1])
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MaskedMean {
                x,
                axis,
                mask: mask.to_vec(),
                count,
            },
            rg,
            "masked_mean",
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = self.data(x).iter().zip(&keep).map(|(v, k)| v * k).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { x, keep }, rg, "dropout"))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("table {s:?}")));
        }
        if let Some(bad) = indices.iter().find(|i| **i >= s[0]) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("index {bad} out of range for {} rows", s[0]),
            ));
        }
        let td = self.data(table);
        let out = indices
            .iter()
            .flat_map(|&i| td[i * s[1]..(i + 1) * s[1]].iter().copied())
            .collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), s[1]], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
            "embedding_lookup",
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg, "sum"))
    }

    /// Mean binary cross-entropy of `logits` against constant 0/1 `labels`,
    /// in the overflow-free form `max(z,0) - z*y + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != labels.len() || z.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} labels", z.len(), labels.len()),
            ));
        }
        let loss = z.iter().zip(labels).map(|(&z, &y)| bce_term(z, y)).sum::<f64>() / z.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
            "bce_with_logits",
        ))
    }

    /// Reverse pass from a scalar `root`, consuming the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        self.backward_with_seed(root, &[1.0])
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with_seed(self, root: Var, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.value(root).len() {
            return Err(Error::shape("backward", "seed length differs from root"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed.to_vec());

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.accum(grads, *a) {
                    // dA = dY B^T
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += dyr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *b) {
                    // dB = A^T dY
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (g, d) in gb[p * n..(p + 1) * n].iter_mut().zip(dyr) {
                                *g += aip * d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.accum(grads, *v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(g) = self.accum(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                let cols = self.value(*b).len();
                if let Some(g) = self.accum(grads, *b) {
                    for row in dy.chunks(cols) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(g) = self.accum(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(g) = self.accum(grads, *a) {
                    for ((g, d), bv) in g.iter_mut().zip(dy).zip(bd) {
                        *g += d * bv;
                    }
                }
                if let Some(g) = self.accum(grads, *b) {
                    for ((g, d), av) in g.iter_mut().zip(dy).zip(ad) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.accum(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * c);
                }
            }
            Op::ScaleRows(x, factors) => {
                let (_, cols) = rows_cols(node.value.shape());
                if let Some(g) = self.accum(grads, *x) {
                    for (r, f) in factors.iter().enumerate() {
                        for c in 0..cols {
                            g[r * cols + c] += dy[r * cols + c] * f;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for v in inputs {
                    let s = self.shape(*v).to_vec();
                    if let Some(g) = self.accum(grads, *v) {
                        if *axis == 0 {
                            let start = offset * s[1];
                            g.iter_mut()
                                .zip(&dy[start..start + s[0] * s[1]])
                                .for_each(|(g, d)| *g += d);
                        } else {
                            for r in 0..s[0] {
                                for c in 0..s[1] {
                                    g[r * s[1] + c] += dy[r * total_cols + offset + c];
                                }
                            }
                        }
                    }
                    offset += s[*axis];
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let out_shape = node.value.shape();
                if let Some(g) = self.accum(grads, *input) {
                    if *axis == 0 {
                        let off = start * s[1];
                        g[off..off + dy.len()].iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    } else {
                        let len = out_shape[1];
                        for r in 0..s[0] {
                            for c in 0..len {
                                g[r * s[1] + start + c] += dy[r * len + c];
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x).to_vec();
                let (r, c) = (s[0], s[1]);
                if let Some(g) = self.accum(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (rows, cols) = rows_cols(node.value.shape());
                if let Some(g) = self.accum(grads, *x) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &dy[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            g[r * cols + c] += yr[c] * (dr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = rows_cols(node.value.shape());
                let gd = self.data(*gain);
                if let Some(g) = self.accum(grads, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += dy[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(g) = self.accum(grads, *bias) {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += dy[r * cols + c];
                        }
                    }
                }
                if let Some(g) = self.accum(grads, *x) {
                    let n = cols as f64;
                    for r in 0..rows {
                        let range = r * cols..(r + 1) * cols;
                        let dxhat: Vec<f64> =
                            range.clone().map(|j| dy[j] * gd[j - r * cols]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[range.clone()]).map(|(a, b)| a * b).sum();
                        for (c, j) in range.enumerate() {
                            g[j] += inv_std[r] / n * (n * dxhat[c] - sum_d - xhat[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(g) = self.accum(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(xd) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                if let Some(g) = self.accum(grads, *x) {
                    for ((g, d), &v) in g.iter_mut().zip(dy).zip(xd) {
                        *g += d * gelu_grad(v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.accum(grads, *x) {
                    for ((g, d), s) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (1.0 - s);
                    }
                }
            }
            Op::Sin(x) => {
                let xd = self.data(*x);
                if let Some(g) = self.accum(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(xd) {
                        *g += d * v.cos();
                    }
                }
            }
            Op::Reciprocal(x) => {
                if let Some(g) = self.accum(grads, *x) {
                    for ((g, d), r) in g.iter_mut().zip(dy).zip(y) {
                        *g -= d * r * r;
                    }
                }
            }
            Op::MaskedMean {
                x,
                axis,
                mask,
                count,
            } => {
                let s = self.shape(*x).to_vec();
                let inv = 1.0 / *count as f64;
                if let Some(g) = self.accum(grads, *x) {
                    for r in 0..s[0] {
                        for c in 0..s[1] {
                            if *axis == 0 && mask[r] {
                                g[r * s[1] + c] += dy[c] * inv;
                            } else if *axis == 1 && mask[c] {
                                g[r * s[1] + c] += dy[r] * inv;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(g) = self.accum(grads, *x) {
                    for ((g, d), k) in g.iter_mut().zip(dy).zip(keep) {
                        *g += d * k;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let cols = self.shape(*table)[1];
                if let Some(g) = self.accum(grads, *table) {
                    for (row, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            g[idx * cols + c] += dy[row * cols + c];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.accum(grads, *x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let z = self.data(*logits);
                let n = z.len() as f64;
                if let Some(g) = self.accum(grads, *logits) {
                    for ((g, &z), &t) in g.iter_mut().zip(z).zip(labels) {
                        *g += dy[0] * (sigmoid(z) - t) / n;
                    }
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// One binary cross-entropy term in log-sum-exp form.
pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
