//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations execute eagerly and are recorded on a [`Tape`]; `backward`
//! replays the record in reverse, accumulating vector-Jacobian products into
//! per-buffer gradient slots. Every buffer lives in the tape's arena and is
//! addressed by a [`Var`] handle that is only valid on the tape that issued
//! it.
//!
//! Shape conventions for `matmul`: a rank-1 operand acts as a row vector on
//! the left and a column vector on the right, and the output rank follows
//! (two rank-1 inputs produce a scalar).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Hidden and cell state of one LSTM layer, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

/// Hidden and cell state of one LSTM layer, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    /// Zero state of the given cell width.
    pub fn zeros(width: usize) -> Self {
        LstmState { h: Tensor::zeros(vec![width]), c: Tensor::zeros(vec![width]) }
    }

    pub fn width(&self) -> usize {
        self.h.numel()
    }
}

struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Ln { x: usize },
    Softmax { x: usize },
    Pick { x: usize, index: usize },
    Concat { inputs: Vec<usize> },
    Slice { x: usize, offset: usize, len: usize },
    EmbedRow { table: usize, row: usize, width: usize },
}

/// Records operations for one forward evaluation.
pub struct Tape {
    id: u64,
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let idx = self.bufs.len();
        self.bufs.push(Buf { data, shape });
        self.ops.push(op);
        self.grads.push(None);
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var, what: &str) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.bufs.len() {
            return Err(Error::InvalidArgument(format!("{what}: var is not on this tape")));
        }
        Ok(v.idx)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register raw data as a leaf.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::Shape(format!(
                "leaf shape {:?} does not match {} elements",
                shape,
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf))
    }

    /// Register a tensor's current contents as a leaf (copies the data).
    pub fn leaf_tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], vec![1], Op::Leaf)
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.bufs[v.idx].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.bufs[v.idx].shape
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.bufs[v.idx].data[0]
    }

    /// Accumulated gradient of the last `backward` with respect to `v`,
    /// or `None` if no gradient flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient with zeros substituted when nothing flowed.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.bufs[v.idx].data.len()],
        }
    }

    // ── Primitive operations ─────────────────────────────────────────

    /// Matrix product. Rank-1 operands act as row (left) / column (right)
    /// vectors; output rank follows the operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a, "matmul lhs")?;
        let bi = self.check(b, "matmul rhs")?;
        let (sa, sb) = (&self.bufs[ai].shape, &self.bufs[bi].shape);
        let (m, k1, a_vec) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            r => return Err(Error::Shape(format!("matmul lhs must be rank 1 or 2, got rank {r}"))),
        };
        let (k2, n, b_vec) = match sb.len() {
            1 => (sb[0], 1, true),
            2 => (sb[0], sb[1], false),
            r => return Err(Error::Shape(format!("matmul rhs must be rank 1 or 2, got rank {r}"))),
        };
        if k1 != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: lhs {:?} vs rhs {:?}",
                sa, sb
            )));
        }
        let k = k1;
        let (da, db) = (&self.bufs[ai].data, &self.bufs[bi].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![1],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        Ok(self.push(out, shape, Op::Matmul { a: ai, b: bi, m, k, n }))
    }

    /// Dot product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul(a, b)
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a, "add lhs")?;
        let bi = self.check(b, "add rhs")?;
        if self.bufs[ai].shape != self.bufs[bi].shape {
            return Err(Error::Shape(format!(
                "add operands differ in shape: {:?} vs {:?}",
                self.bufs[ai].shape, self.bufs[bi].shape
            )));
        }
        let out: Vec<f64> =
            self.bufs[ai].data.iter().zip(&self.bufs[bi].data).map(|(x, y)| x + y).collect();
        let shape = self.bufs[ai].shape.clone();
        Ok(self.push(out, shape, Op::Add { a: ai, b: bi }))
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a, "mul lhs")?;
        let bi = self.check(b, "mul rhs")?;
        if self.bufs[ai].shape != self.bufs[bi].shape {
            return Err(Error::Shape(format!(
                "mul operands differ in shape: {:?} vs {:?}",
                self.bufs[ai].shape, self.bufs[bi].shape
            )));
        }
        let out: Vec<f64> =
            self.bufs[ai].data.iter().zip(&self.bufs[bi].data).map(|(x, y)| x * y).collect();
        let shape = self.bufs[ai].shape.clone();
        Ok(self.push(out, shape, Op::Mul { a: ai, b: bi }))
    }

    /// Multiply every entry by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x, "scale")?;
        let out: Vec<f64> = self.bufs[xi].data.iter().map(|v| c * v).collect();
        let shape = self.bufs[xi].shape.clone();
        Ok(self.push(out, shape, Op::Scale { x: xi, c }))
    }

    /// Elementwise logistic function, branch-stable so large magnitudes
    /// saturate instead of overflowing.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "sigmoid")?;
        let out: Vec<f64> = self.bufs[xi].data.iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.bufs[xi].shape.clone();
        Ok(self.push(out, shape, Op::Sigmoid { x: xi }))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "tanh")?;
        let out: Vec<f64> = self.bufs[xi].data.iter().map(|v| v.tanh()).collect();
        let shape = self.bufs[xi].shape.clone();
        Ok(self.push(out, shape, Op::Tanh { x: xi }))
    }

    /// Elementwise natural log.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "ln")?;
        let out: Vec<f64> = self.bufs[xi].data.iter().map(|v| v.ln()).collect();
        let shape = self.bufs[xi].shape.clone();
        Ok(self.push(out, shape, Op::Ln { x: xi }))
    }

    /// Softmax over a non-empty vector, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "softmax")?;
        if self.bufs[xi].shape.len() != 1 {
            return Err(Error::Shape(format!(
                "softmax expects a vector, got shape {:?}",
                self.bufs[xi].shape
            )));
        }
        let data = &self.bufs[xi].data;
        if data.is_empty() {
            return Err(Error::InvalidArgument("softmax over an empty vector".into()));
        }
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = data.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let shape = self.bufs[xi].shape.clone();
        Ok(self.push(out, shape, Op::Softmax { x: xi }))
    }

    /// Select one entry of a vector as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xi = self.check(x, "pick")?;
        if index >= self.bufs[xi].data.len() {
            return Err(Error::InvalidArgument(format!(
                "pick index {index} out of range for length {}",
                self.bufs[xi].data.len()
            )));
        }
        let v = self.bufs[xi].data[index];
        Ok(self.push(vec![v], vec![1], Op::Pick { x: xi, index }))
    }

    /// Concatenate vectors (and scalars) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let mut idxs = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for (i, &p) in parts.iter().enumerate() {
            let pi = self.check(p, "concat part")?;
            if self.bufs[pi].shape.len() != 1 {
                return Err(Error::Shape(format!(
                    "concat part {i} must be a vector, got shape {:?}",
                    self.bufs[pi].shape
                )));
            }
            idxs.push(pi);
            out.extend_from_slice(&self.bufs[pi].data);
        }
        let len = out.len();
        Ok(self.push(out, vec![len], Op::Concat { inputs: idxs }))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn concat_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of zero rows".into()));
        }
        let width = self.check(rows[0], "concat_rows row").map(|i| self.bufs[i].data.len())?;
        let mut idxs = Vec::with_capacity(rows.len());
        let mut out = Vec::new();
        for &r in rows {
            let ri = self.check(r, "concat_rows row")?;
            if self.bufs[ri].shape.len() != 1 || self.bufs[ri].data.len() != width {
                return Err(Error::Shape(format!(
                    "concat_rows expects vectors of length {width}, got shape {:?}",
                    self.bufs[ri].shape
                )));
            }
            idxs.push(ri);
            out.extend_from_slice(&self.bufs[ri].data);
        }
        Ok(self.push(out, vec![rows.len(), width], Op::Concat { inputs: idxs }))
    }

    /// Contiguous sub-vector `[offset, offset+len)`.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let xi = self.check(x, "slice")?;
        if self.bufs[xi].shape.len() != 1 {
            return Err(Error::Shape(format!(
                "slice expects a vector, got shape {:?}",
                self.bufs[xi].shape
            )));
        }
        if offset + len > self.bufs[xi].data.len() || len == 0 {
            return Err(Error::Shape(format!(
                "slice [{offset}, {}) out of range for length {}",
                offset + len,
                self.bufs[xi].data.len()
            )));
        }
        let out = self.bufs[xi].data[offset..offset + len].to_vec();
        Ok(self.push(out, vec![len], Op::Slice { x: xi, offset, len }))
    }

    /// Row lookup in an embedding table; the backward rule scatters the
    /// incoming gradient into that row only.
    pub fn embed_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let ti = self.check(table, "embed table")?;
        let shape = &self.bufs[ti].shape;
        if shape.len() != 2 {
            return Err(Error::Shape(format!("embed table must be a matrix, got shape {shape:?}")));
        }
        let (rows, width) = (shape[0], shape[1]);
        if row >= rows {
            return Err(Error::InvalidArgument(format!(
                "embedding id {row} out of range for table with {rows} rows"
            )));
        }
        let out = self.bufs[ti].data[row * width..(row + 1) * width].to_vec();
        Ok(self.push(out, vec![width], Op::EmbedRow { table: ti, row, width }))
    }

    /// One LSTM cell update. `w_is` is `[4H × X]`, `w_ss` is `[4H × H]` and
    /// `bias` is `[4H]`, with the gate pre-activations laid out in the order
    /// output, forget, input, content. The output/forget/input gates pass
    /// through the logistic function; the content gate through tanh.
    pub fn lstm_step(
        &mut self,
        x: Var,
        prev: LstmVars,
        w_is: Var,
        w_ss: Var,
        bias: Var,
    ) -> Result<LstmVars> {
        let x_len = {
            let xi = self.check(x, "lstm input")?;
            self.bufs[xi].data.len()
        };
        let (rows_is, cols_is) = self.matrix_dims(w_is, "lstm w_is")?;
        let (rows_ss, cols_ss) = self.matrix_dims(w_ss, "lstm w_ss")?;
        let h_len = self.value(prev.h).len();
        let c_len = self.value(prev.c).len();
        if rows_is % 4 != 0 || rows_is != rows_ss {
            return Err(Error::Shape(format!(
                "lstm weights must stack four gates: w_is rows {rows_is}, w_ss rows {rows_ss}"
            )));
        }
        let width = rows_is / 4;
        if cols_is != x_len {
            return Err(Error::Shape(format!(
                "lstm w_is expects input width {cols_is}, got {x_len}"
            )));
        }
        if cols_ss != width || h_len != width || c_len != width {
            return Err(Error::Shape(format!(
                "lstm state width mismatch: cell {width}, w_ss cols {cols_ss}, h {h_len}, c {c_len}"
            )));
        }
        if self.value(bias).len() != 4 * width {
            return Err(Error::Shape(format!(
                "lstm bias must have length {}, got {}",
                4 * width,
                self.value(bias).len()
            )));
        }

        let from_x = self.matmul(w_is, x)?;
        let from_h = self.matmul(w_ss, prev.h)?;
        let lin = self.add(from_x, from_h)?;
        let pre = self.add(lin, bias)?;

        let o_pre = self.slice(pre, 0, width)?;
        let f_pre = self.slice(pre, width, width)?;
        let i_pre = self.slice(pre, 2 * width, width)?;
        let g_pre = self.slice(pre, 3 * width, width)?;

        let o = self.sigmoid(o_pre)?;
        let f = self.sigmoid(f_pre)?;
        let i = self.sigmoid(i_pre)?;
        let g = self.tanh(g_pre)?;

        let keep = self.mul(f, prev.c)?;
        let write = self.mul(i, g)?;
        let c = self.add(keep, write)?;
        let c_out = self.tanh(c)?;
        let h = self.mul(o, c_out)?;
        Ok(LstmVars { h, c })
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let i = self.check(v, what)?;
        let s = &self.bufs[i].shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} must be a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── Backward pass ────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively, so
    /// a value feeding several consumers receives the sum of all paths.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss, "backward loss")?;
        if self.bufs[li].data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.bufs[li].shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[li] = Some(vec![1.0]);

        for op_idx in (0..=li).rev() {
            // Leaf gradients stay in place for the caller to read.
            if matches!(self.ops[op_idx], Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[op_idx].take() else {
                continue;
            };
            let op = self.ops[op_idx].clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    let mut da = vec![0.0; m * k];
                    let mut dbv = vec![0.0; k * n];
                    {
                        let bd = &self.bufs[b].data;
                        let ad = &self.bufs[a].data;
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                let brow = &bd[p * n..(p + 1) * n];
                                let grow = &gout[i * n..(i + 1) * n];
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        for p in 0..k {
                            let drow = &mut dbv[p * n..(p + 1) * n];
                            for i in 0..m {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &gout[i * n..(i + 1) * n];
                                for j in 0..n {
                                    drow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &dbv);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &gout);
                    self.accumulate(b, &gout);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> =
                        gout.iter().zip(&self.bufs[b].data).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> =
                        gout.iter().zip(&self.bufs[a].data).map(|(g, x)| g * x).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = gout.iter().map(|g| c * g).collect();
                    self.accumulate(x, &dx);
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(&self.bufs[op_idx].data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Tanh { x } => {
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(&self.bufs[op_idx].data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Ln { x } => {
                    let dx: Vec<f64> =
                        gout.iter().zip(&self.bufs[x].data).map(|(g, v)| g / v).collect();
                    self.accumulate(x, &dx);
                }
                Op::Softmax { x } => {
                    let y = &self.bufs[op_idx].data;
                    let inner: f64 = gout.iter().zip(y).map(|(g, yi)| g * yi).sum();
                    let dx: Vec<f64> =
                        gout.iter().zip(y).map(|(g, yi)| yi * (g - inner)).collect();
                    self.accumulate(x, &dx);
                }
                Op::Pick { x, index } => {
                    let mut dx = vec![0.0; self.bufs[x].data.len()];
                    dx[index] = gout[0];
                    self.accumulate(x, &dx);
                }
                Op::Concat { inputs } => {
                    let mut offset = 0;
                    for inp in inputs {
                        let len = self.bufs[inp].data.len();
                        let part = gout[offset..offset + len].to_vec();
                        self.accumulate(inp, &part);
                        offset += len;
                    }
                }
                Op::Slice { x, offset, len } => {
                    let mut dx = vec![0.0; self.bufs[x].data.len()];
                    dx[offset..offset + len].copy_from_slice(&gout);
                    self.accumulate(x, &dx);
                }
                Op::EmbedRow { table, row, width } => {
                    let mut dt = vec![0.0; self.bufs[table].data.len()];
                    dt[row * width..(row + 1) * width].copy_from_slice(&gout);
                    self.accumulate(table, &dt);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, g: &[f64]) {
        match &mut self.grads[idx] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => self.grads[idx] = Some(g.to_vec()),
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
