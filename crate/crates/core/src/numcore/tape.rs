//! Reverse-mode differentiation over a flat operation tape.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] sweeps it
//! in reverse creation order, accumulating gradients into each node and
//! finally into the [`ParamStore`] entries referenced by parameter leaves.
//! A tape is confined to one logical thread for its whole lifetime.

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use super::NumError;

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    /// Row-broadcast add: `(n x d) + (1 x d)`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Neg(Var),
    Transpose(Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    /// Each input row repeated `k` times consecutively.
    RepeatRows(Var, usize),
    /// Each `block`-row chunk repeated `times` times consecutively.
    TileRowBlocks(Var, usize, usize),
    /// Alternate `block_a`-row chunks of the first input with `block_b`-row
    /// chunks of the second.
    InterleaveRowBlocks { a: Var, b: Var, block_a: usize, block_b: usize },
    ConcatRowsN(Vec<Var>),
    /// From every `stride`-row chunk, rows `offset..offset + len`.
    SliceRowBlocks { x: Var, stride: usize, offset: usize },
    Reshape(Var),
    MaskedSoftmax(Var, Vec<bool>),
    MaskedLogSoftmax(Var, Vec<bool>),
    LayerNorm { x: Var, gain: Var, bias: Var },
    /// Mean over present rows within each `block`-row chunk.
    MeanPoolBlocks { x: Var, presence: Vec<bool>, block: usize },
    /// Per-row element pick: `out[r] = x[r, idx[r]]`.
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MinElem(Var, Var),
    Clip(Var, f64, f64),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    param: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Tensor::scalar(v), Op::Leaf)
    }

    /// Leaf bound to a named parameter; `backward` accumulates its gradient
    /// into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumError> {
        let value = store
            .get(name)
            .ok_or_else(|| NumError::Contract(format!("unknown parameter {name:?}")))?
            .clone();
        let var = self.push(value, Op::Leaf);
        self.nodes[var.0].param = Some(name.to_string());
        Ok(var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = gemm(self.value(a), false, self.value(b), false)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumError::Shape(format!(
                "{what} shape mismatch: {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check_same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x += y;
        }
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (ar, ac) = (self.value(a).rows(), self.value(a).cols());
        let rv = self.value(row);
        if rv.rows() != 1 || rv.cols() != ac {
            return Err(NumError::Shape(format!(
                "add_row shape mismatch: [{ar}, {ac}] + {:?}",
                rv.shape()
            )));
        }
        let mut value = self.value(a).clone();
        let bias: Vec<f64> = self.value(row).data().to_vec();
        for i in 0..ar {
            for (x, y) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check_same_shape(a, b, "sub")?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x -= y;
        }
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check_same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x *= y;
        }
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| -v);
        self.push(value, Op::Neg(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(NumError::Shape(format!(
                "concat_rows column mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::from_vec(&[av.rows() + bv.rows(), av.cols()], data)?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(NumError::Shape(format!(
                "concat_cols row mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..rows {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let value = Tensor::from_vec(&[rows, av.cols() + bv.cols()], data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(NumError::Shape(format!(
                "slice_rows {start}..{} out of {} rows",
                start + len,
                av.rows()
            )));
        }
        let cols = av.cols();
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_vec(&[len, cols], data)?;
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(NumError::Shape(format!(
                "slice_cols {start}..{} out of {} cols",
                start + len,
                av.cols()
            )));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let value = Tensor::from_vec(&[rows, len], data)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(rows * k * cols);
        for i in 0..rows {
            for _ in 0..k {
                data.extend_from_slice(av.row(i));
            }
        }
        let value = Tensor::from_vec(&[rows * k, cols], data).expect("sized above");
        self.push(value, Op::RepeatRows(a, k))
    }

    pub fn tile_row_blocks(&mut self, a: Var, block: usize, times: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if block == 0 || rows % block != 0 {
            return Err(NumError::Shape(format!(
                "tile_row_blocks: {rows} rows not divisible by block {block}"
            )));
        }
        let mut data = Vec::with_capacity(rows * times * cols);
        for b in 0..rows / block {
            for _ in 0..times {
                let start = b * block * cols;
                data.extend_from_slice(&av.data()[start..start + block * cols]);
            }
        }
        let value = Tensor::from_vec(&[rows * times, cols], data)?;
        Ok(self.push(value, Op::TileRowBlocks(a, block, times)))
    }

    /// Alternate chunks of `a` and `b`: output chunk `s` is rows
    /// `[s*block_a, (s+1)*block_a)` of `a` followed by rows
    /// `[s*block_b, (s+1)*block_b)` of `b`.
    pub fn interleave_row_blocks(
        &mut self,
        a: Var,
        b: Var,
        block_a: usize,
        block_b: usize,
    ) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        if bv.cols() != cols {
            return Err(NumError::Shape(format!(
                "interleave_row_blocks column mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        if block_a == 0
            || block_b == 0
            || av.rows() % block_a != 0
            || bv.rows() % block_b != 0
            || av.rows() / block_a != bv.rows() / block_b
        {
            return Err(NumError::Shape(format!(
                "interleave_row_blocks: {} rows by {block_a} vs {} rows by {block_b}",
                av.rows(),
                bv.rows()
            )));
        }
        let chunks = av.rows() / block_a;
        let mut data = Vec::with_capacity((av.len() + bv.len()) * cols);
        for s in 0..chunks {
            data.extend_from_slice(&av.data()[s * block_a * cols..(s + 1) * block_a * cols]);
            data.extend_from_slice(&bv.data()[s * block_b * cols..(s + 1) * block_b * cols]);
        }
        let value = Tensor::from_vec(&[av.rows() + bv.rows(), cols], data)?;
        Ok(self.push(value, Op::InterleaveRowBlocks { a, b, block_a, block_b }))
    }

    pub fn concat_rows_n(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::Shape("concat_rows_n of zero tensors".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(NumError::Shape(format!(
                    "concat_rows_n column mismatch: {cols} vs {:?}",
                    pv.shape()
                )));
            }
            rows += pv.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRowsN(parts.to_vec())))
    }

    /// From every `stride`-row chunk take rows `offset..offset + len`,
    /// concatenated in chunk order.
    pub fn slice_row_blocks(
        &mut self,
        x: Var,
        stride: usize,
        offset: usize,
        len: usize,
    ) -> Result<Var, NumError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if stride == 0 || rows % stride != 0 || offset + len > stride {
            return Err(NumError::Shape(format!(
                "slice_row_blocks: rows {rows}, stride {stride}, window {offset}..{}",
                offset + len
            )));
        }
        let chunks = rows / stride;
        let mut data = Vec::with_capacity(chunks * len * cols);
        for s in 0..chunks {
            let start = (s * stride + offset) * cols;
            data.extend_from_slice(&xv.data()[start..start + len * cols]);
        }
        let value = Tensor::from_vec(&[chunks * len, cols], data)?;
        Ok(self.push(value, Op::SliceRowBlocks { x, stride, offset }))
    }

    /// Reinterpret the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let av = self.value(a);
        let value = Tensor::from_vec(shape, av.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Row-wise softmax over unmasked entries. Masked entries come out as
    /// exactly 0; each row must have at least one unmasked entry.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var, NumError> {
        let lv = self.value(logits);
        if mask.len() != lv.len() {
            return Err(NumError::Shape(format!(
                "mask length {} does not match logits {:?}",
                mask.len(),
                lv.shape()
            )));
        }
        let (rows, cols) = (lv.rows(), lv.cols());
        let mut value = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row_mask = &mask[r * cols..(r + 1) * cols];
            let row_in = lv.row(r);
            let max = row_in
                .iter()
                .zip(row_mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumError::Validation(format!(
                    "masked_softmax: row {r} has no unmasked entries"
                )));
            }
            let out = value.row_mut(r);
            let mut sum = 0.0;
            for c in 0..cols {
                if row_mask[c] {
                    out[c] = (row_in[c] - max).exp();
                    sum += out[c];
                }
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(value, Op::MaskedSoftmax(logits, mask.to_vec())))
    }

    /// Row-wise log-softmax over unmasked entries. Masked slots hold 0.0 as
    /// a placeholder and must not be read downstream.
    pub fn masked_log_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var, NumError> {
        let lv = self.value(logits);
        if mask.len() != lv.len() {
            return Err(NumError::Shape(format!(
                "mask length {} does not match logits {:?}",
                mask.len(),
                lv.shape()
            )));
        }
        let (rows, cols) = (lv.rows(), lv.cols());
        let mut value = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row_mask = &mask[r * cols..(r + 1) * cols];
            let row_in = lv.row(r);
            let max = row_in
                .iter()
                .zip(row_mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumError::Validation(format!(
                    "masked_log_softmax: row {r} has no unmasked entries"
                )));
            }
            let sum: f64 = (0..cols)
                .filter(|&c| row_mask[c])
                .map(|c| (row_in[c] - max).exp())
                .sum();
            let log_z = max + sum.ln();
            let out = value.row_mut(r);
            for c in 0..cols {
                if row_mask[c] {
                    out[c] = row_in[c] - log_z;
                }
            }
        }
        Ok(self.push(value, Op::MaskedLogSoftmax(logits, mask.to_vec())))
    }

    /// Layer normalization over the last dimension followed by a
    /// per-feature affine map. `gain` and `bias` are `1 x d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let t = self.value(v);
            if t.rows() != 1 || t.cols() != cols {
                return Err(NumError::Shape(format!(
                    "layer_norm {name} must be [1, {cols}], got {:?}",
                    t.shape()
                )));
            }
        }
        let mut value = Tensor::zeros(&[rows, cols]);
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let xv = self.value(x);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let out = value.row_mut(r);
            for c in 0..cols {
                out[c] = gv[c] * (row[c] - mean) * inv_std + bv[c];
            }
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }))
    }

    /// Mean over present rows within each consecutive `block`-row chunk.
    /// With `block == rows` this is plain masked mean pooling to `1 x d`.
    pub fn mean_pool_blocks(
        &mut self,
        x: Var,
        presence: &[bool],
        block: usize,
    ) -> Result<Var, NumError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if presence.len() != rows {
            return Err(NumError::Shape(format!(
                "presence length {} does not match {rows} rows",
                presence.len()
            )));
        }
        if block == 0 || rows % block != 0 {
            return Err(NumError::Shape(format!(
                "mean_pool_blocks: {rows} rows not divisible by block {block}"
            )));
        }
        let nblocks = rows / block;
        let mut value = Tensor::zeros(&[nblocks, cols]);
        for b in 0..nblocks {
            let mut count = 0usize;
            for r in b * block..(b + 1) * block {
                if presence[r] {
                    count += 1;
                    for c in 0..cols {
                        value.data_mut()[b * cols + c] += xv.data()[r * cols + c];
                    }
                }
            }
            if count == 0 {
                return Err(NumError::Validation(format!(
                    "mean_pool_blocks: block {b} has no present rows"
                )));
            }
            for c in 0..cols {
                value.data_mut()[b * cols + c] /= count as f64;
            }
        }
        Ok(self.push(
            value,
            Op::MeanPoolBlocks {
                x,
                presence: presence.to_vec(),
                block,
            },
        ))
    }

    pub fn mean_pool(&mut self, x: Var, presence: &[bool]) -> Result<Var, NumError> {
        let rows = self.value(x).rows();
        self.mean_pool_blocks(x, presence, rows)
    }

    /// `out[r, 0] = x[r, idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if idx.len() != rows {
            return Err(NumError::Shape(format!(
                "gather_rows: {} indices for {rows} rows",
                idx.len()
            )));
        }
        let mut value = Tensor::zeros(&[rows, 1]);
        for r in 0..rows {
            if idx[r] >= cols {
                return Err(NumError::Shape(format!(
                    "gather_rows: index {} out of {cols} columns",
                    idx[r]
                )));
            }
            value.data_mut()[r] = xv.data()[r * cols + idx[r]];
        }
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Elementwise minimum; gradient follows the smaller operand (ties go
    /// to the first).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check_same_shape(a, b, "min_elem")?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x = x.min(*y);
        }
        Ok(self.push(value, Op::MinElem(a, b)))
    }

    /// Clamp into `[lo, hi]`; gradient is 1 inside the band (inclusive)
    /// and exactly 0 outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clip(a, lo, hi))
    }

    // -- backward ----------------------------------------------------------

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (x, y) in g.data_mut().iter_mut().zip(delta.data()) {
                    *x += y;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss. Each reachable node receives its
    /// gradient exactly once; parameter leaves accumulate into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NumError> {
        if !self.value(loss).is_scalar() {
            return Err(NumError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = gemm(&grad, false, self.value(b), true)?;
                    let db = gemm(self.value(a), true, &grad, false)?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let cols = grad.cols();
                    let mut drow = Tensor::zeros(&[1, cols]);
                    for r in 0..grad.rows() {
                        for c in 0..cols {
                            drow.data_mut()[c] += grad.data()[r * cols + c];
                        }
                    }
                    self.accumulate(a, grad);
                    self.accumulate(row, drow);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let mut da = grad.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.value(b).data()) {
                        *x *= y;
                    }
                    let mut db = grad;
                    for (x, y) in db.data_mut().iter_mut().zip(self.value(a).data()) {
                        *x *= y;
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, grad.map(|v| v * c));
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    self.accumulate(a, grad);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let mut da = grad;
                    for (g, y) in da.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        *g *= 1.0 - y * y;
                    }
                    self.accumulate(a, da);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mut da = grad;
                    for (g, x) in da.data_mut().iter_mut().zip(self.value(a).data()) {
                        if *x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let mut da = grad;
                    for (g, y) in da.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        *g *= y;
                    }
                    self.accumulate(a, da);
                }
                Op::Neg(a) => {
                    let a = *a;
                    self.accumulate(a, grad.map(|v| -v));
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.accumulate(a, grad.transpose());
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let ra = self.value(a).rows();
                    let cols = grad.cols();
                    let da = Tensor::from_vec(
                        &[ra, cols],
                        grad.data()[..ra * cols].to_vec(),
                    )?;
                    let db = Tensor::from_vec(
                        &[grad.rows() - ra, cols],
                        grad.data()[ra * cols..].to_vec(),
                    )?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.value(a).cols();
                    let rows = grad.rows();
                    let cols = grad.cols();
                    let mut da = Tensor::zeros(&[rows, ca]);
                    let mut db = Tensor::zeros(&[rows, cols - ca]);
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(&grad.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&grad.row(r)[ca..]);
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::SliceRows(a, start) => {
                    let (a, start) = (*a, *start);
                    let src = self.value(a);
                    let mut da = Tensor::zeros(&[src.rows(), src.cols()]);
                    let cols = grad.cols();
                    for r in 0..grad.rows() {
                        da.row_mut(start + r).copy_from_slice(grad.row(r));
                        let _ = cols;
                    }
                    self.accumulate(a, da);
                }
                Op::SliceCols(a, start) => {
                    let (a, start) = (*a, *start);
                    let src = self.value(a);
                    let mut da = Tensor::zeros(&[src.rows(), src.cols()]);
                    for r in 0..grad.rows() {
                        da.row_mut(r)[start..start + grad.cols()].copy_from_slice(grad.row(r));
                    }
                    self.accumulate(a, da);
                }
                Op::RepeatRows(a, k) => {
                    let (a, k) = (*a, *k);
                    let src_rows = self.value(a).rows();
                    let cols = grad.cols();
                    let mut da = Tensor::zeros(&[src_rows, cols]);
                    for r in 0..src_rows {
                        for rep in 0..k {
                            let grow = grad.row(r * k + rep);
                            for (x, y) in da.row_mut(r).iter_mut().zip(grow) {
                                *x += y;
                            }
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::TileRowBlocks(a, block, times) => {
                    let (a, block, times) = (*a, *block, *times);
                    let src_rows = self.value(a).rows();
                    let cols = grad.cols();
                    let mut da = Tensor::zeros(&[src_rows, cols]);
                    for b in 0..src_rows / block {
                        for t in 0..times {
                            for r in 0..block {
                                let grow = grad.row(b * block * times + t * block + r);
                                for (x, y) in da.row_mut(b * block + r).iter_mut().zip(grow) {
                                    *x += y;
                                }
                            }
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::InterleaveRowBlocks { a, b, block_a, block_b } => {
                    let (a, b, block_a, block_b) = (*a, *b, *block_a, *block_b);
                    let cols = grad.cols();
                    let (ra, rb) = (self.value(a).rows(), self.value(b).rows());
                    let mut da = Tensor::zeros(&[ra, cols]);
                    let mut db = Tensor::zeros(&[rb, cols]);
                    let chunk = block_a + block_b;
                    for s in 0..ra / block_a {
                        let gbase = s * chunk;
                        for r in 0..block_a {
                            da.row_mut(s * block_a + r).copy_from_slice(grad.row(gbase + r));
                        }
                        for r in 0..block_b {
                            db.row_mut(s * block_b + r)
                                .copy_from_slice(grad.row(gbase + block_a + r));
                        }
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::ConcatRowsN(parts) => {
                    let parts = parts.clone();
                    let cols = grad.cols();
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(p).rows();
                        let dp = Tensor::from_vec(
                            &[rows, cols],
                            grad.data()[start * cols..(start + rows) * cols].to_vec(),
                        )?;
                        start += rows;
                        self.accumulate(p, dp);
                    }
                }
                Op::SliceRowBlocks { x, stride, offset } => {
                    let (x, stride, offset) = (*x, *stride, *offset);
                    let src = self.value(x);
                    let (rows, cols) = (src.rows(), src.cols());
                    let chunks = rows / stride;
                    let len = grad.rows() / chunks;
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for s in 0..chunks {
                        for r in 0..len {
                            dx.row_mut(s * stride + offset + r)
                                .copy_from_slice(grad.row(s * len + r));
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let shape = self.value(a).shape().to_vec();
                    let da = Tensor::from_vec(&shape, grad.data().to_vec())?;
                    self.accumulate(a, da);
                }
                Op::MaskedSoftmax(a, mask) => {
                    let a = *a;
                    let probs = &self.nodes[i].value;
                    let (rows, cols) = (probs.rows(), probs.cols());
                    let mut da = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        let p = probs.row(r);
                        let g = grad.row(r);
                        let m = &mask[r * cols..(r + 1) * cols];
                        let dot: f64 = (0..cols).filter(|&c| m[c]).map(|c| g[c] * p[c]).sum();
                        let out = da.row_mut(r);
                        for c in 0..cols {
                            if m[c] {
                                out[c] = p[c] * (g[c] - dot);
                            }
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::MaskedLogSoftmax(a, mask) => {
                    let a = *a;
                    let logp = &self.nodes[i].value;
                    let (rows, cols) = (logp.rows(), logp.cols());
                    let mut da = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        let lp = logp.row(r);
                        let g = grad.row(r);
                        let m = &mask[r * cols..(r + 1) * cols];
                        let gsum: f64 = (0..cols).filter(|&c| m[c]).map(|c| g[c]).sum();
                        let out = da.row_mut(r);
                        for c in 0..cols {
                            if m[c] {
                                out[c] = g[c] - lp[c].exp() * gsum;
                            }
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let xv = self.value(x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let gv = self.value(gain).data().to_vec();
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    let mut dgain = Tensor::zeros(&[1, cols]);
                    let mut dbias = Tensor::zeros(&[1, cols]);
                    for r in 0..rows {
                        let row = xv.row(r);
                        let g = grad.row(r);
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let gy: Vec<f64> = (0..cols).map(|c| g[c] * gv[c]).collect();
                        let gy_mean = gy.iter().sum::<f64>() / cols as f64;
                        let gyx_mean =
                            gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            out[c] = (gy[c] - gy_mean - xhat[c] * gyx_mean) * inv_std;
                            dgain.data_mut()[c] += g[c] * xhat[c];
                            dbias.data_mut()[c] += g[c];
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gain, dgain);
                    self.accumulate(bias, dbias);
                }
                Op::MeanPoolBlocks { x, presence, block } => {
                    let (x, block) = (*x, *block);
                    let presence = presence.clone();
                    let src = self.value(x);
                    let (rows, cols) = (src.rows(), src.cols());
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for b in 0..rows / block {
                        let count = presence[b * block..(b + 1) * block]
                            .iter()
                            .filter(|&&p| p)
                            .count() as f64;
                        for r in b * block..(b + 1) * block {
                            if presence[r] {
                                for c in 0..cols {
                                    dx.data_mut()[r * cols + c] = grad.data()[b * cols + c] / count;
                                }
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let src = self.value(a);
                    let mut da = Tensor::zeros(&[src.rows(), src.cols()]);
                    let cols = src.cols();
                    for (r, &c) in idx.iter().enumerate() {
                        da.data_mut()[r * cols + c] = grad.data()[r];
                    }
                    self.accumulate(a, da);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let g = grad.item();
                    let shape = self.value(a).shape().to_vec();
                    let da = Tensor::from_vec(&shape, vec![g; self.value(a).len()])?;
                    self.accumulate(a, da);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = self.value(a).len();
                    let g = grad.item() / n as f64;
                    let shape = self.value(a).shape().to_vec();
                    let da = Tensor::from_vec(&shape, vec![g; n])?;
                    self.accumulate(a, da);
                }
                Op::MinElem(a, b) => {
                    let (a, b) = (*a, *b);
                    let mut da = grad.clone();
                    let mut db = grad;
                    for (k, (x, y)) in self
                        .value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .enumerate()
                    {
                        if x <= y {
                            db.data_mut()[k] = 0.0;
                        } else {
                            da.data_mut()[k] = 0.0;
                        }
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Clip(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let mut da = grad;
                    for (g, x) in da.data_mut().iter_mut().zip(self.value(a).data()) {
                        if *x < lo || *x > hi {
                            *g = 0.0;
                        }
                    }
                    self.accumulate(a, da);
                }
            }
        }

        // Flush parameter-leaf gradients into the store.
        for node in &self.nodes {
            if let (Some(name), Some(grad)) = (&node.param, &node.grad) {
                store.accumulate_grad(name, grad)?;
            }
        }
        Ok(())
    }
}
