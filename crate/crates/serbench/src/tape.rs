//! Reverse-mode differentiation over a recording tape.
//!
//! A [`GradTape`] owns an arena of tensors. Forward operations append nodes
//! in topological order (inputs always precede their consumers), so one
//! reverse sweep of the node list propagates gradients to every leaf.
//! `backward` consumes the tape logically: calling it twice without
//! re-recording is an error.
//!
//! Broadcasting is limited to scalar-times-tensor ([`GradTape::scale_by`]).
//! Everything else requires exact shapes and fails eagerly with the offending
//! shapes in the error.

use crate::tensor::{KernelError, Tensor};

/// Handle to a tensor recorded on a tape.
pub type ValueId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C[m,n] = A[m,k] . B[k,n]
    Matmul { a: ValueId, b: ValueId },
    /// C[m,n] = A[m,k] . B[n,k]^T
    MatmulTransposeB { a: ValueId, b: ValueId },
    /// y[n] = x[k] . W[k,n]
    VecMat { x: ValueId, w: ValueId },
    Softmax { x: ValueId, axis: usize },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    Concat { inputs: Vec<ValueId>, axis: usize },
    /// y[l,len] = x[l, start..start+len]
    SliceCols {
        x: ValueId,
        start: usize,
        len: usize,
    },
    /// y[d] = mean over rows of x[seq,d]
    MeanPool { x: ValueId },
    /// flattened outer product of [a;1] and [b;1]
    OuterAugmented { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    /// y = c * x for a compile-time constant c (no gradient into c)
    Scale { x: ValueId, c: f64 },
    /// y = s * x for a scalar tensor s on the tape
    ScaleBy { x: ValueId, s: ValueId },
    Sum { x: ValueId },
    /// scalar y = x[i] of a vector x
    Index { x: ValueId, i: usize },
    /// y = logsumexp(logits) - logits[target]
    CrossEntropy { logits: ValueId, target: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    is_param: bool,
}

/// Gradients produced by one backward pass, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a value, if any gradient flowed to it. Parameters always
    /// have an entry (zero-filled when unreachable from the loss).
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Recording tape for one forward/backward cycle.
pub struct GradTape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Record a non-trainable input leaf.
    pub fn input(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable parameter leaf. Parameters are guaranteed a
    /// gradient entry after `backward`.
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, is_param: bool) -> ValueId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            is_param,
        });
        id
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KernelError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            m,
            k,
            n,
        );
        let t = Tensor::from_vec(vec![m, n], out).expect("matmul shape");
        Ok(self.push(t, Op::Matmul { a, b }, false))
    }

    /// C = A . B^T with B stored row-major as [n,k].
    pub fn matmul_transpose_b(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(KernelError::ShapeMismatch {
                op: "matmul_transpose_b",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        let t = Tensor::from_vec(vec![m, n], out).expect("matmul_transpose_b shape");
        Ok(self.push(t, Op::MatmulTransposeB { a, b }, false))
    }

    pub fn vecmat(&mut self, x: ValueId, w: ValueId) -> Result<ValueId, KernelError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 1 || sw.len() != 2 || sx[0] != sw[0] {
            return Err(KernelError::ShapeMismatch {
                op: "vecmat",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (k, n) = (sw[0], sw[1]);
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        let mut out = vec![0.0; n];
        for p in 0..k {
            let xp = xv[p];
            for j in 0..n {
                out[j] += xp * wv[p * n + j];
            }
        }
        let t = Tensor::from_vec(vec![n], out).expect("vecmat shape");
        Ok(self.push(t, Op::VecMat { x, w }, false))
    }

    /// Softmax along `axis` with max-subtraction stabilization. Supports
    /// rank-1 (axis 0) and rank-2 (axis 0 or 1) tensors.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId, KernelError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(KernelError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; data.len()];
        for_each_lane(&shape, axis, |lane| {
            let max = lane
                .iter()
                .map(|&i| data[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &i in lane {
                let e = (data[i] - max).exp();
                out[i] = e;
                denom += e;
            }
            for &i in lane {
                out[i] /= denom;
            }
        });
        let t = Tensor::from_vec(shape, out).expect("softmax shape");
        Ok(self.push(t, Op::Softmax { x, axis }, false))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let t = Tensor::from_vec(
            self.shape(x).to_vec(),
            self.nodes[x]
                .value
                .data()
                .iter()
                .map(|&v| v.max(0.0))
                .collect(),
        )
        .expect("relu shape");
        self.push(t, Op::Relu { x }, false)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let t = Tensor::from_vec(
            self.shape(x).to_vec(),
            self.nodes[x]
                .value
                .data()
                .iter()
                .map(|&v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        )
        .expect("sigmoid shape");
        self.push(t, Op::Sigmoid { x }, false)
    }

    /// Concatenate along `axis`; all other dimensions must match exactly.
    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> Result<ValueId, KernelError> {
        if inputs.is_empty() {
            return Err(KernelError::Empty { op: "concat" });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() || first.len() > 2 {
            return Err(KernelError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut out_shape = first.clone();
        for &id in &inputs[1..] {
            let s = self.shape(id);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(KernelError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let data = match (first.len(), axis) {
            (1, 0) | (2, 0) => {
                // row-major: plain append along the leading axis
                let mut data = Vec::new();
                for &id in inputs {
                    data.extend_from_slice(self.nodes[id].value.data());
                }
                data
            }
            (2, 1) => {
                let rows = first[0];
                let mut data = Vec::with_capacity(out_shape.iter().product());
                for r in 0..rows {
                    for &id in inputs {
                        data.extend_from_slice(self.nodes[id].value.row(r));
                    }
                }
                data
            }
            _ => unreachable!(),
        };
        let t = Tensor::from_vec(out_shape, data).expect("concat shape");
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            false,
        ))
    }

    /// Column slice of a rank-2 tensor.
    pub fn slice_cols(
        &mut self,
        x: ValueId,
        start: usize,
        len: usize,
    ) -> Result<ValueId, KernelError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(KernelError::RankMismatch {
                op: "slice_cols",
                expected: 2,
                shape: s,
            });
        }
        if len == 0 || start + len > s[1] {
            return Err(KernelError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                len: s[1],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&data[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::from_vec(vec![rows, len], out).expect("slice_cols shape");
        Ok(self.push(t, Op::SliceCols { x, start, len }, false))
    }

    /// Arithmetic mean over the sequence (row) axis of a [seq, d] tensor.
    pub fn mean_pool(&mut self, x: ValueId) -> Result<ValueId, KernelError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(KernelError::RankMismatch {
                op: "mean_pool",
                expected: 2,
                shape: s,
            });
        }
        let (seq, d) = (s[0], s[1]);
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; d];
        for r in 0..seq {
            for c in 0..d {
                out[c] += data[r * d + c];
            }
        }
        for v in &mut out {
            *v /= seq as f64;
        }
        let t = Tensor::from_vec(vec![d], out).expect("mean_pool shape");
        Ok(self.push(t, Op::MeanPool { x }, false))
    }

    /// Flattened outer product of the augmented vectors [a;1] and [b;1],
    /// row-major, so the trailing entry is always 1*1.
    pub fn outer_augmented(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 {
            return Err(KernelError::ShapeMismatch {
                op: "outer_augmented",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (da, db) = (sa[0], sb[0]);
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = Vec::with_capacity((da + 1) * (db + 1));
        for i in 0..=da {
            let ai = if i < da { av[i] } else { 1.0 };
            for j in 0..=db {
                let bj = if j < db { bv[j] } else { 1.0 };
                out.push(ai * bj);
            }
        }
        let t = Tensor::from_vec(vec![(da + 1) * (db + 1)], out).expect("outer shape");
        Ok(self.push(t, Op::OuterAugmented { a, b }, false))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId, KernelError> {
        if self.shape(a) != self.shape(b) {
            return Err(KernelError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data).expect("zip shape");
        Ok(self.push(t, op, false))
    }

    /// Multiply by a host constant.
    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let data = self.nodes[x].value.data().iter().map(|&v| c * v).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data).expect("scale shape");
        self.push(t, Op::Scale { x, c }, false)
    }

    /// Multiply a tensor by a scalar recorded on the tape (the one permitted
    /// broadcast). Gradient flows into both operands.
    pub fn scale_by(&mut self, x: ValueId, s: ValueId) -> Result<ValueId, KernelError> {
        if !self.nodes[s].value.is_scalar() {
            return Err(KernelError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.nodes[s].value.scalar_value();
        let data = self.nodes[x].value.data().iter().map(|&v| sv * v).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data).expect("scale_by shape");
        Ok(self.push(t, Op::ScaleBy { x, s }, false))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, false)
    }

    /// Scalar element x[i] of a vector.
    pub fn index(&mut self, x: ValueId, i: usize) -> Result<ValueId, KernelError> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(KernelError::RankMismatch {
                op: "index",
                expected: 1,
                shape: s.to_vec(),
            });
        }
        if i >= s[0] {
            return Err(KernelError::IndexOutOfBounds {
                op: "index",
                index: i,
                len: s[0],
            });
        }
        let v = self.nodes[x].value.data()[i];
        Ok(self.push(Tensor::scalar(v), Op::Index { x, i }, false))
    }

    /// Softmax cross-entropy against a class index, fused for stability:
    /// logsumexp(logits) - logits[target].
    pub fn cross_entropy(&mut self, logits: ValueId, target: usize) -> Result<ValueId, KernelError> {
        let s = self.shape(logits);
        if s.len() != 1 {
            return Err(KernelError::RankMismatch {
                op: "cross_entropy",
                expected: 1,
                shape: s.to_vec(),
            });
        }
        if target >= s[0] {
            return Err(KernelError::IndexOutOfBounds {
                op: "cross_entropy",
                index: target,
                len: s[0],
            });
        }
        let data = self.nodes[logits].value.data();
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let value = lse - data[target];
        Ok(self.push(Tensor::scalar(value), Op::CrossEntropy { logits, target }, false))
    }

    // ---- backward -----------------------------------------------------------

    /// One reverse sweep from a scalar loss. Populates a gradient for every
    /// parameter (zeros when the loss does not reach it) and consumes the
    /// tape: recording or differentiating again is an error.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients, KernelError> {
        if self.consumed {
            return Err(KernelError::StaleTape);
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(KernelError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let d_out = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            // keep the slot populated for callers inspecting интермediates
            grads[id] = Some(d_out.clone());
            match self.nodes[id].op.clone() {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    // dA = dC . B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += d_out[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    // dB = A^T . dC
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let ap = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += ap * d_out[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads, a, &da);
                    accumulate(&mut grads, b, &db);
                }
                Op::MatmulTransposeB { a, b } => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[0]);
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    // dA = dC . B
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = d_out[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += d * bv[j * k + p];
                            }
                        }
                    }
                    // dB = dC^T . A
                    let mut db = vec![0.0; n * k];
                    for j in 0..n {
                        for i in 0..m {
                            let d = d_out[i * n + j];
                            for p in 0..k {
                                db[j * k + p] += d * av[i * k + p];
                            }
                        }
                    }
                    accumulate(&mut grads, a, &da);
                    accumulate(&mut grads, b, &db);
                }
                Op::VecMat { x, w } => {
                    let k = self.shape(x)[0];
                    let n = self.shape(w)[1];
                    let xv = self.nodes[x].value.data();
                    let wv = self.nodes[w].value.data();
                    let mut dx = vec![0.0; k];
                    let mut dw = vec![0.0; k * n];
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += wv[p * n + j] * d_out[j];
                            dw[p * n + j] = xv[p] * d_out[j];
                        }
                        dx[p] = acc;
                    }
                    accumulate(&mut grads, x, &dx);
                    accumulate(&mut grads, w, &dw);
                }
                Op::Softmax { x, axis } => {
                    let shape = self.shape(id).to_vec();
                    let y = self.nodes[id].value.data();
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, axis, |lane| {
                        let dot: f64 = lane.iter().map(|&i| d_out[i] * y[i]).sum();
                        for &i in lane {
                            dx[i] = y[i] * (d_out[i] - dot);
                        }
                    });
                    accumulate(&mut grads, x, &dx);
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x].value.data();
                    let dx: Vec<f64> = xv
                        .iter()
                        .zip(&d_out)
                        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x, &dx);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[id].value.data();
                    let dx: Vec<f64> = y.iter().zip(&d_out).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                    accumulate(&mut grads, x, &dx);
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = self.shape(id).to_vec();
                    match (out_shape.len(), axis) {
                        (1, 0) | (2, 0) => {
                            let mut offset = 0;
                            for &inp in &inputs {
                                let n = self.nodes[inp].value.len();
                                accumulate(&mut grads, inp, &d_out[offset..offset + n]);
                                offset += n;
                            }
                        }
                        (2, 1) => {
                            let rows = out_shape[0];
                            let total_cols = out_shape[1];
                            let mut col_offset = 0;
                            for &inp in &inputs {
                                let cols = self.shape(inp)[1];
                                let mut dx = vec![0.0; rows * cols];
                                for r in 0..rows {
                                    dx[r * cols..(r + 1) * cols].copy_from_slice(
                                        &d_out[r * total_cols + col_offset
                                            ..r * total_cols + col_offset + cols],
                                    );
                                }
                                accumulate(&mut grads, inp, &dx);
                                col_offset += cols;
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let s = self.shape(x).to_vec();
                    let (rows, cols) = (s[0], s[1]);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&d_out[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, x, &dx);
                }
                Op::MeanPool { x } => {
                    let s = self.shape(x).to_vec();
                    let (seq, d) = (s[0], s[1]);
                    let inv = 1.0 / seq as f64;
                    let mut dx = vec![0.0; seq * d];
                    for r in 0..seq {
                        for c in 0..d {
                            dx[r * d + c] = d_out[c] * inv;
                        }
                    }
                    accumulate(&mut grads, x, &dx);
                }
                Op::OuterAugmented { a, b } => {
                    let da_len = self.shape(a)[0];
                    let db_len = self.shape(b)[0];
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    let stride = db_len + 1;
                    let mut da = vec![0.0; da_len];
                    let mut db = vec![0.0; db_len];
                    for i in 0..da_len {
                        for j in 0..db_len {
                            da[i] += d_out[i * stride + j] * bv[j];
                            db[j] += d_out[i * stride + j] * av[i];
                        }
                        da[i] += d_out[i * stride + db_len]; // column of b~ = 1
                    }
                    for (j, dbj) in db.iter_mut().enumerate() {
                        *dbj += d_out[da_len * stride + j]; // row of a~ = 1
                    }
                    accumulate(&mut grads, a, &da);
                    accumulate(&mut grads, b, &db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a, &d_out);
                    accumulate(&mut grads, b, &d_out);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, a, &d_out);
                    let neg: Vec<f64> = d_out.iter().map(|&d| -d).collect();
                    accumulate(&mut grads, b, &neg);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    let da: Vec<f64> = d_out.iter().zip(bv).map(|(&d, &v)| d * v).collect();
                    let db: Vec<f64> = d_out.iter().zip(av).map(|(&d, &v)| d * v).collect();
                    accumulate(&mut grads, a, &da);
                    accumulate(&mut grads, b, &db);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = d_out.iter().map(|&d| c * d).collect();
                    accumulate(&mut grads, x, &dx);
                }
                Op::ScaleBy { x, s } => {
                    let sv = self.nodes[s].value.scalar_value();
                    let xv = self.nodes[x].value.data();
                    let dx: Vec<f64> = d_out.iter().map(|&d| sv * d).collect();
                    let ds: f64 = d_out.iter().zip(xv).map(|(&d, &v)| d * v).sum();
                    accumulate(&mut grads, x, &dx);
                    accumulate(&mut grads, s, &[ds]);
                }
                Op::Sum { x } => {
                    let dx = vec![d_out[0]; self.nodes[x].value.len()];
                    accumulate(&mut grads, x, &dx);
                }
                Op::Index { x, i } => {
                    let mut dx = vec![0.0; self.nodes[x].value.len()];
                    dx[i] = d_out[0];
                    accumulate(&mut grads, x, &dx);
                }
                Op::CrossEntropy { logits, target } => {
                    let lv = self.nodes[logits].value.data();
                    let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = lv.iter().map(|&v| (v - max).exp()).sum();
                    let mut dl: Vec<f64> = lv
                        .iter()
                        .map(|&v| d_out[0] * (v - max).exp() / denom)
                        .collect();
                    dl[target] -= d_out[0];
                    accumulate(&mut grads, logits, &dl);
                }
            }
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match grads[id].take() {
                Some(g) => Some(
                    Tensor::from_vec(node.value.shape().to_vec(), g).expect("gradient shape"),
                ),
                None if node.is_param => Some(Tensor::zeros(node.value.shape().to_vec())),
                None => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: ValueId, delta: &[f64]) {
    match &mut grads[id] {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        }
        None => grads[id] = Some(delta.to_vec()),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let ap = a[i * k + p];
            if ap == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += ap * b[p * n + j];
            }
        }
    }
    out
}

/// Visit index groups ("lanes") along `axis` of a rank-1 or rank-2 shape.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match (shape.len(), axis) {
        (1, 0) => {
            let lane: Vec<usize> = (0..shape[0]).collect();
            f(&lane);
        }
        (2, 1) => {
            let (rows, cols) = (shape[0], shape[1]);
            for r in 0..rows {
                let lane: Vec<usize> = (r * cols..(r + 1) * cols).collect();
                f(&lane);
            }
        }
        (2, 0) => {
            let (rows, cols) = (shape[0], shape[1]);
            for c in 0..cols {
                let lane: Vec<usize> = (0..rows).map(|r| r * cols + c).collect();
                f(&lane);
            }
        }
        _ => unreachable!("for_each_lane on unsupported shape"),
    }
}
