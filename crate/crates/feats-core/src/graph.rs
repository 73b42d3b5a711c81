//! Define-by-run reverse-mode differentiation on tensors.
//!
//! A [`Graph`] is a tape rebuilt for every batch: each method records one
//! node holding the operation tag, its input node ids, and the computed
//! output tensor. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into the [`ParamSet`] registry. Nodes are in
//! topological order by construction.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, gemm_tn, sigmoid_scalar, softmax_slice, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Scaling coefficients are the only parameters eligible for L1/L2.
    pub is_scaling: bool,
}

/// Registry of trainable tensors with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, is_scaling: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
            is_scaling,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_scaling(&self, id: ParamId) -> bool {
        self.entries[id.0].is_scaling
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Snapshot of all parameter values, for checkpoint/restore.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, t) in self.entries.iter_mut().zip(snapshot) {
            e.value = t.clone();
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) {
        let entry = &mut self.entries[id.0];
        debug_assert_eq!(entry.grad.shape(), delta.shape());
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a: r x c plus a length-c bias broadcast over rows.
    AddRow(NodeId, NodeId),
    /// a: r x c scaled per column by a length-c vector.
    MulRow(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    /// B x (m*steps) panel to (B*steps) x (m*(2tau+1)) zero-padded windows.
    Windows {
        src: NodeId,
        series: usize,
        steps: usize,
        tau: usize,
    },
    GatherCols {
        src: NodeId,
        cols: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    RowSum(NodeId),
    SumAll(NodeId),
    Scale(NodeId, f64),
    Abs(NodeId),
    MseLoss {
        pred: NodeId,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    BceLoss {
        logits: NodeId,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    CeLoss {
        logits: NodeId,
        classes: Vec<usize>,
        weight: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode tape. Rebuilt per batch; owns no parameters.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// Trainable leaf reading its current value from the registry.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let value = params.value(id).clone();
        self.push(Op::Param(id), value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs))
    }

    fn elementwise_pair(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dimension(
                ctx,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (t, b) = (self.value(a), self.value(bias));
        if !t.is_matrix() || b.len() != t.cols() {
            return Err(Error::dimension("add_row", t.shape(), b.shape()));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b.data()[j];
            }
        }
        let value = Tensor::matrix(r, c, data)?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRow(a, bias), value, needs))
    }

    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (t, s) = (self.value(a), self.value(v));
        if !t.is_matrix() || s.len() != t.cols() {
            return Err(Error::dimension("mul_row", t.shape(), s.shape()));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= s.data()[j];
            }
        }
        let value = Tensor::matrix(r, c, data)?;
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Op::MulRow(a, v), value, needs))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = crate::tensor::relu(self.value(a));
        let needs = self.needs(a);
        self.push(Op::Relu(a), value, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = crate::tensor::sigmoid(self.value(a));
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), value, needs)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.abs()).collect()).unwrap();
        let needs = self.needs(a);
        self.push(Op::Abs(a), value, needs)
    }

    /// Row-wise stable softmax of a 2-d node.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::Contract(format!(
                "softmax_rows needs a matrix, got shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_slice(&t.data()[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(r, c, data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxRows(a), value, needs))
    }

    /// Sliding zero-padded windows over the time axis.
    ///
    /// Input rows hold a full panel laid out series-major: column
    /// `j*steps + t` is series j at time t. Output row `b*steps + k` is the
    /// window centered at focal time k, laid out `j*(2tau+1) + (l+tau)`.
    pub fn windows(&mut self, src: NodeId, series: usize, steps: usize, tau: usize) -> Result<NodeId> {
        let t = self.value(src);
        if tau + 1 > steps {
            return Err(Error::Config(format!(
                "window half-width {tau} out of range for {steps} time points"
            )));
        }
        if !t.is_matrix() || t.cols() != series * steps {
            return Err(Error::dimension("windows", t.shape(), &[series * steps]));
        }
        let b = t.rows();
        let w = 2 * tau + 1;
        let mut data = vec![0.0; b * steps * series * w];
        let src_data = t.data();
        for bi in 0..b {
            for k in 0..steps {
                let row = (bi * steps + k) * series * w;
                for j in 0..series {
                    for l in 0..w {
                        let time = k as isize + l as isize - tau as isize;
                        if time >= 0 && (time as usize) < steps {
                            data[row + j * w + l] =
                                src_data[bi * series * steps + j * steps + time as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(b * steps, series * w, data)?;
        let needs = self.needs(src);
        Ok(self.push(
            Op::Windows {
                src,
                series,
                steps,
                tau,
            },
            value,
            needs,
        ))
    }

    pub fn gather_cols(&mut self, src: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let t = self.value(src);
        if !t.is_matrix() {
            return Err(Error::Contract("gather_cols needs a matrix".into()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= t.cols()) {
            return Err(Error::Argument(format!(
                "column index {bad} out of range for {} columns",
                t.cols()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * cols.len()];
        for i in 0..r {
            for (jj, &j) in cols.iter().enumerate() {
                data[i * cols.len() + jj] = t.data()[i * c + j];
            }
        }
        let value = Tensor::matrix(r, cols.len(), data)?;
        let needs = self.needs(src);
        Ok(self.push(Op::GatherCols { src, cols }, value, needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols of zero inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != rows {
                return Err(Error::dimension("concat_cols", t.shape(), &[rows]));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                data[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor::matrix(rows, total, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, needs))
    }

    pub fn reshape(&mut self, src: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(src).reshaped(shape)?;
        let needs = self.needs(src);
        Ok(self.push(Op::Reshape(src), value, needs))
    }

    /// Sum each row of a matrix, producing a column.
    pub fn row_sum(&mut self, src: NodeId) -> Result<NodeId> {
        let t = self.value(src);
        if !t.is_matrix() {
            return Err(Error::Contract("row_sum needs a matrix".into()));
        }
        let (r, c) = (t.rows(), t.cols());
        let data = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let value = Tensor::matrix(r, 1, data)?;
        let needs = self.needs(src);
        Ok(self.push(Op::RowSum(src), value, needs))
    }

    pub fn sum_all(&mut self, src: NodeId) -> NodeId {
        let total = self.value(src).data().iter().sum();
        let needs = self.needs(src);
        self.push(Op::SumAll(src), Tensor::scalar(total), needs)
    }

    pub fn scale(&mut self, src: NodeId, factor: f64) -> NodeId {
        let t = self.value(src);
        let value =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect()).unwrap();
        let needs = self.needs(src);
        self.push(Op::Scale(src, factor), value, needs)
    }

    fn check_loss_inputs(&self, pred: NodeId, target: &[f64], weight: &[f64], rows: usize) -> Result<()> {
        let t = self.value(pred);
        if t.len() != rows && !(t.is_matrix() && t.rows() == rows && t.cols() == 1) {
            return Err(Error::dimension("loss predictions", t.shape(), &[rows]));
        }
        if target.len() != rows || weight.len() != rows {
            return Err(Error::dimension("loss targets", &[target.len()], &[rows]));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite target in loss".into()));
        }
        if weight.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Data("sample weights must be positive and finite".into()));
        }
        Ok(())
    }

    /// Weighted mean squared error, scalar output.
    pub fn mse_loss(&mut self, pred: NodeId, target: Vec<f64>, weight: Vec<f64>) -> Result<NodeId> {
        let rows = target.len();
        self.check_loss_inputs(pred, &target, &weight, rows)?;
        let wsum: f64 = weight.iter().sum();
        let mut acc = 0.0;
        for i in 0..rows {
            let d = self.value(pred).data()[i] - target[i];
            acc += weight[i] * d * d;
        }
        let value = Tensor::scalar(acc / wsum);
        let needs = self.needs(pred);
        Ok(self.push(Op::MseLoss { pred, target, weight }, value, needs))
    }

    /// Weighted binary cross-entropy on logits, scalar output.
    pub fn bce_loss(&mut self, logits: NodeId, target: Vec<f64>, weight: Vec<f64>) -> Result<NodeId> {
        let rows = target.len();
        self.check_loss_inputs(logits, &target, &weight, rows)?;
        if target.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data("binary targets must be 0 or 1".into()));
        }
        let wsum: f64 = weight.iter().sum();
        let mut acc = 0.0;
        for i in 0..rows {
            let z = self.value(logits).data()[i];
            // max(z,0) - z*y + ln(1 + exp(-|z|)), stable for any z
            acc += weight[i] * (z.max(0.0) - z * target[i] + (-z.abs()).exp().ln_1p());
        }
        let value = Tensor::scalar(acc / wsum);
        let needs = self.needs(logits);
        Ok(self.push(Op::BceLoss { logits, target, weight }, value, needs))
    }

    /// Weighted categorical cross-entropy on a B x K logit matrix.
    pub fn ce_loss(&mut self, logits: NodeId, classes: Vec<usize>, weight: Vec<f64>) -> Result<NodeId> {
        let t = self.value(logits);
        if !t.is_matrix() || t.rows() != classes.len() {
            return Err(Error::dimension("ce_loss", t.shape(), &[classes.len()]));
        }
        if weight.len() != classes.len() {
            return Err(Error::dimension("ce_loss weights", &[weight.len()], &[classes.len()]));
        }
        let k = t.cols();
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::Data(format!("class index {bad} out of range for {k} classes")));
        }
        let wsum: f64 = weight.iter().sum();
        let mut acc = 0.0;
        for (i, &y) in classes.iter().enumerate() {
            let row = &t.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            acc += weight[i] * (lse - row[y]);
        }
        let value = Tensor::scalar(acc / wsum);
        let needs = self.needs(logits);
        Ok(self.push(Op::CeLoss { logits, classes, weight }, value, needs))
    }

    /// Backpropagate from a scalar loss node, accumulating parameter
    /// gradients into `params`. Deterministic: a second call after
    /// `zero_grads` reproduces identical gradients.
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(go) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => params.accumulate_grad(*pid, &go),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                    if self.needs(*a) {
                        let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(ta.shape().to_vec()));
                        gemm_nt(r, c, k, 1.0, go.data(), tb.data(), 1.0, ga.data_mut());
                    }
                    if self.needs(*b) {
                        let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(tb.shape().to_vec()));
                        gemm_tn(k, r, c, 1.0, ta.data(), go.data(), 1.0, gb.data_mut());
                    }
                }
                Op::Add(a, b) => {
                    self.acc_same(&mut grads, *a, go.data(), 1.0);
                    self.acc_same(&mut grads, *b, go.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc_same(&mut grads, *a, go.data(), 1.0);
                    self.acc_same(&mut grads, *b, go.data(), -1.0);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let delta: Vec<f64> = go
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(g, y)| g * y)
                            .collect();
                        self.acc_same(&mut grads, *a, &delta, 1.0);
                    }
                    if self.needs(*b) {
                        let delta: Vec<f64> = go
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(g, x)| g * x)
                            .collect();
                        self.acc_same(&mut grads, *b, &delta, 1.0);
                    }
                }
                Op::AddRow(a, bias) => {
                    self.acc_same(&mut grads, *a, go.data(), 1.0);
                    if self.needs(*bias) {
                        let c = self.value(*bias).len();
                        let r = go.len() / c;
                        let mut delta = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                delta[j] += go.data()[i * c + j];
                            }
                        }
                        self.acc_same(&mut grads, *bias, &delta, 1.0);
                    }
                }
                Op::MulRow(a, v) => {
                    let c = self.value(*v).len();
                    let r = go.len() / c;
                    if self.needs(*a) {
                        let vd = self.value(*v).data();
                        let mut delta = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                delta[i * c + j] = go.data()[i * c + j] * vd[j];
                            }
                        }
                        self.acc_same(&mut grads, *a, &delta, 1.0);
                    }
                    if self.needs(*v) {
                        let ad = self.value(*a).data();
                        let mut delta = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                delta[j] += go.data()[i * c + j] * ad[i * c + j];
                            }
                        }
                        self.acc_same(&mut grads, *v, &delta, 1.0);
                    }
                }
                Op::Relu(a) => {
                    // subgradient at 0 fixed to 0
                    let delta: Vec<f64> = go
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &out)| if out > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.acc_same(&mut grads, *a, &delta, 1.0);
                }
                Op::Sigmoid(a) => {
                    let delta: Vec<f64> = go
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    self.acc_same(&mut grads, *a, &delta, 1.0);
                }
                Op::Abs(a) => {
                    let delta: Vec<f64> = go
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -*g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.acc_same(&mut grads, *a, &delta, 1.0);
                }
                Op::SoftmaxRows(a) => {
                    let out = &node.value;
                    let (r, c) = (out.rows(), out.cols());
                    let mut delta = vec![0.0; r * c];
                    for i in 0..r {
                        let o = &out.data()[i * c..(i + 1) * c];
                        let g = &go.data()[i * c..(i + 1) * c];
                        let dot: f64 = o.iter().zip(g).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            delta[i * c + j] = o[j] * (g[j] - dot);
                        }
                    }
                    self.acc_same(&mut grads, *a, &delta, 1.0);
                }
                Op::Windows {
                    src,
                    series,
                    steps,
                    tau,
                } => {
                    let (series, steps, tau) = (*series, *steps, *tau);
                    let w = 2 * tau + 1;
                    let b = self.value(*src).rows();
                    let mut delta = vec![0.0; b * series * steps];
                    for bi in 0..b {
                        for k in 0..steps {
                            let row = (bi * steps + k) * series * w;
                            for j in 0..series {
                                for l in 0..w {
                                    let time = k as isize + l as isize - tau as isize;
                                    if time >= 0 && (time as usize) < steps {
                                        delta[bi * series * steps + j * steps + time as usize] +=
                                            go.data()[row + j * w + l];
                                    }
                                }
                            }
                        }
                    }
                    self.acc_same(&mut grads, *src, &delta, 1.0);
                }
                Op::GatherCols { src, cols } => {
                    let t = self.value(*src);
                    let (r, c) = (t.rows(), t.cols());
                    let mut delta = vec![0.0; r * c];
                    for i in 0..r {
                        for (jj, &j) in cols.iter().enumerate() {
                            delta[i * c + j] += go.data()[i * cols.len() + jj];
                        }
                    }
                    self.acc_same(&mut grads, *src, &delta, 1.0);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.needs(p) {
                            let mut delta = vec![0.0; rows * c];
                            for i in 0..rows {
                                delta[i * c..(i + 1) * c]
                                    .copy_from_slice(&go.data()[i * total + offset..i * total + offset + c]);
                            }
                            self.acc_same(&mut grads, p, &delta, 1.0);
                        }
                        offset += c;
                    }
                }
                Op::Reshape(src) => {
                    self.acc_same(&mut grads, *src, go.data(), 1.0);
                }
                Op::RowSum(src) => {
                    let t = self.value(*src);
                    let (r, c) = (t.rows(), t.cols());
                    let mut delta = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            delta[i * c + j] = go.data()[i];
                        }
                    }
                    self.acc_same(&mut grads, *src, &delta, 1.0);
                }
                Op::SumAll(src) => {
                    let g = go.data()[0];
                    let delta = vec![g; self.value(*src).len()];
                    self.acc_same(&mut grads, *src, &delta, 1.0);
                }
                Op::Scale(src, factor) => {
                    self.acc_same(&mut grads, *src, go.data(), *factor);
                }
                Op::MseLoss { pred, target, weight } => {
                    let g = go.data()[0];
                    let wsum: f64 = weight.iter().sum();
                    let pd = self.value(*pred).data();
                    let delta: Vec<f64> = (0..target.len())
                        .map(|i| g * 2.0 * weight[i] * (pd[i] - target[i]) / wsum)
                        .collect();
                    self.acc_same(&mut grads, *pred, &delta, 1.0);
                }
                Op::BceLoss { logits, target, weight } => {
                    let g = go.data()[0];
                    let wsum: f64 = weight.iter().sum();
                    let zd = self.value(*logits).data();
                    let delta: Vec<f64> = (0..target.len())
                        .map(|i| g * weight[i] * (sigmoid_scalar(zd[i]) - target[i]) / wsum)
                        .collect();
                    self.acc_same(&mut grads, *logits, &delta, 1.0);
                }
                Op::CeLoss { logits, classes, weight } => {
                    let g = go.data()[0];
                    let wsum: f64 = weight.iter().sum();
                    let t = self.value(*logits);
                    let k = t.cols();
                    let mut delta = vec![0.0; t.len()];
                    let mut probs = vec![0.0; k];
                    for (i, &y) in classes.iter().enumerate() {
                        softmax_slice(&t.data()[i * k..(i + 1) * k], &mut probs);
                        for j in 0..k {
                            let one_hot = if j == y { 1.0 } else { 0.0 };
                            delta[i * k + j] = g * weight[i] * (probs[j] - one_hot) / wsum;
                        }
                    }
                    self.acc_same(&mut grads, *logits, &delta, 1.0);
                }
            }
        }
        Ok(())
    }

    /// Accumulate `factor * delta` into the gradient slot of `target`,
    /// which has the same element count as `delta`.
    fn acc_same(&self, grads: &mut [Option<Tensor>], target: NodeId, delta: &[f64], factor: f64) {
        if !self.needs(target) {
            return;
        }
        let slot = grads[target.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(target).shape().to_vec()));
        for (g, d) in slot.data_mut().iter_mut().zip(delta) {
            *g += factor * d;
        }
    }
}
