//! Forward constructors and backward rules for the elementwise, matrix and
//! reduction operations.

use super::{ArrayId, NumericsError, Op, Tape};

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// dA = dC * B^T
fn matmul_back_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (kk, dak) in darow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (dj, bj) in dcrow.iter().zip(brow) {
                acc += dj * bj;
            }
            *dak = acc;
        }
    }
    da
}

/// dB = A^T * dC
fn matmul_back_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let dbrow = &mut db[kk * n..(kk + 1) * n];
            for (dbj, dj) in dbrow.iter_mut().zip(dcrow) {
                *dbj += aik * dj;
            }
        }
    }
    db
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: ArrayId, b: ArrayId) -> Result<(usize, usize), NumericsError> {
        let sa = self.shapes[a.0];
        let sb = self.shapes[b.0];
        if sa != sb {
            return Err(NumericsError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let vals = self.vals[a.0].iter().zip(&self.vals[b.0]).map(|(x, y)| x + y).collect();
        self.push("add", r, c, vals, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let vals = self.vals[a.0].iter().zip(&self.vals[b.0]).map(|(x, y)| x - y).collect();
        self.push("sub", r, c, vals, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let vals = self.vals[a.0].iter().zip(&self.vals[b.0]).map(|(x, y)| x * y).collect();
        self.push("mul", r, c, vals, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: ArrayId, k: f64) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[a.0];
        let vals = self.vals[a.0].iter().map(|x| x * k).collect();
        self.push("scale", r, c, vals, Op::Scale(a, k))
    }

    /// `[r, c] + [1, c]` row-broadcast bias add.
    pub fn add_bias(&mut self, a: ArrayId, bias: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[a.0];
        let sb = self.shapes[bias.0];
        if sb != (1, c) {
            return Err(NumericsError::ShapeMismatch { op: "add_bias", lhs: (r, c), rhs: sb });
        }
        let mut vals = self.vals[a.0].clone();
        for row in vals.chunks_mut(c) {
            add_into(row, &self.vals[bias.0]);
        }
        self.push("add_bias", r, c, vals, Op::AddBias(a, bias))
    }

    pub fn matmul(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, NumericsError> {
        let (m, k) = self.shapes[a.0];
        let (k2, n) = self.shapes[b.0];
        if k != k2 {
            return Err(NumericsError::ShapeMismatch { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let vals = matmul_kernel(&self.vals[a.0], &self.vals[b.0], m, k, n);
        self.push("matmul", m, n, vals, Op::Matmul(a, b))
    }

    pub fn tanh(&mut self, a: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[a.0];
        let vals = self.vals[a.0].iter().map(|x| x.tanh()).collect();
        self.push("tanh", r, c, vals, Op::Tanh(a))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[a.0];
        let vals = self.vals[a.0]
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.push("gelu", r, c, vals, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[a.0];
        let vals = self.vals[a.0].iter().map(|x| x.exp()).collect();
        self.push("exp", r, c, vals, Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[a.0];
        let mut vals = vec![0.0; r * c];
        for (out, row) in vals.chunks_mut(c).zip(self.vals[a.0].chunks(c)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            out.iter_mut().for_each(|o| *o /= sum);
        }
        self.push("softmax", r, c, vals, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[a.0];
        let mut vals = vec![0.0; r * c];
        for (out, row) in vals.chunks_mut(c).zip(self.vals[a.0].chunks(c)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push("log_softmax", r, c, vals, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with learnable gain/bias (`[1, c]` each).
    pub fn layer_norm(
        &mut self,
        x: ArrayId,
        gain: ArrayId,
        bias: ArrayId,
    ) -> Result<ArrayId, NumericsError> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.shapes[x.0];
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shapes[p.0] != (1, c) {
                let _ = name;
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: (r, c),
                    rhs: self.shapes[p.0],
                });
            }
        }
        let mut vals = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        let g = &self.vals[gain.0];
        let b = &self.vals[bias.0];
        for (out, row) in vals.chunks_mut(c).zip(self.vals[x.0].chunks(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            stats.push((mean, rstd));
            for j in 0..c {
                out[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        self.push("layer_norm", r, c, vals, Op::LayerNorm { x, gain, bias, stats })
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, x: ArrayId, rate: f64) -> Result<ArrayId, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::BadArg { op: "dropout", msg: format!("rate {rate} outside [0, 1)") });
        }
        if !self.is_training() || rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.shapes[x.0];
        let mask = self.next_dropout_mask(r * c, rate);
        let vals = self.vals[x.0].iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push("dropout", r, c, vals, Op::Dropout { x, mask_scale: mask })
    }

    /// Row lookup into a table; the backward pass scatter-adds into the rows.
    pub fn embedding_lookup(&mut self, table: ArrayId, indices: &[usize]) -> Result<ArrayId, NumericsError> {
        self.gather_rows_named("embedding_lookup", table, indices)
    }

    pub fn gather_rows(&mut self, x: ArrayId, indices: &[usize]) -> Result<ArrayId, NumericsError> {
        self.gather_rows_named("gather_rows", x, indices)
    }

    fn gather_rows_named(
        &mut self,
        op: &'static str,
        x: ArrayId,
        indices: &[usize],
    ) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[x.0];
        if indices.is_empty() {
            return Err(NumericsError::BadArg { op, msg: "empty index list".into() });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(NumericsError::BadArg { op, msg: format!("row index {bad} out of range for {r} rows") });
        }
        let mut vals = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            vals.extend_from_slice(&self.vals[x.0][i * c..(i + 1) * c]);
        }
        self.push(op, indices.len(), c, vals, Op::GatherRows { x, indices: indices.to_vec() })
    }

    pub fn reshape(&mut self, x: ArrayId, rows: usize, cols: usize) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[x.0];
        if r * c != rows * cols {
            return Err(NumericsError::ShapeMismatch { op: "reshape", lhs: (r, c), rhs: (rows, cols) });
        }
        let vals = self.vals[x.0].clone();
        self.push("reshape", rows, cols, vals, Op::Reshape(x))
    }

    /// Stack arrays with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[ArrayId]) -> Result<ArrayId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadArg { op: "concat_rows", msg: "no arrays".into() });
        }
        let c = self.shapes[parts[0].0].1;
        let mut rows = 0;
        let mut vals = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shapes[p.0];
            if pc != c {
                return Err(NumericsError::ShapeMismatch { op: "concat_rows", lhs: (rows, c), rhs: (pr, pc) });
            }
            rows += pr;
            vals.extend_from_slice(&self.vals[p.0]);
        }
        self.push("concat_rows", rows, c, vals, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: ArrayId, start: usize, len: usize) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[x.0];
        if start + len > r || len == 0 {
            return Err(NumericsError::BadArg {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {r} rows", start + len),
            });
        }
        let vals = self.vals[x.0][start * c..(start + len) * c].to_vec();
        self.push("slice_rows", len, c, vals, Op::SliceRows { x, start })
    }

    /// Pick one column per row: `out[i, 0] = x[i, idx[i]]`.
    pub fn select_per_row(&mut self, x: ArrayId, indices: &[usize]) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[x.0];
        if indices.len() != r {
            return Err(NumericsError::BadArg {
                op: "select_per_row",
                msg: format!("{} indices for {r} rows", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(NumericsError::TargetOutOfRange { index: bad, classes: c });
        }
        let vals = indices.iter().enumerate().map(|(i, &j)| self.vals[x.0][i * c + j]).collect();
        self.push("select_per_row", r, 1, vals, Op::SelectPerRow { x, indices: indices.to_vec() })
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: ArrayId, lo: f64, hi: f64) -> Result<ArrayId, NumericsError> {
        if lo > hi {
            return Err(NumericsError::BadArg { op: "clamp", msg: format!("lo {lo} > hi {hi}") });
        }
        let (r, c) = self.shapes[x.0];
        let vals = self.vals[x.0].iter().map(|v| v.clamp(lo, hi)).collect();
        self.push("clamp", r, c, vals, Op::Clamp { x, lo, hi })
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min_elem(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.same_shape("min_elem", a, b)?;
        let vals = self.vals[a.0].iter().zip(&self.vals[b.0]).map(|(x, y)| x.min(*y)).collect();
        self.push("min_elem", r, c, vals, Op::MinElem(a, b))
    }

    pub fn sum_all(&mut self, x: ArrayId) -> Result<ArrayId, NumericsError> {
        let total = self.vals[x.0].iter().sum();
        self.push("sum_all", 1, 1, vec![total], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: ArrayId) -> Result<ArrayId, NumericsError> {
        let n = self.vals[x.0].len() as f64;
        let total = self.vals[x.0].iter().sum::<f64>() / n;
        self.push("mean_all", 1, 1, vec![total], Op::MeanAll(x))
    }

    /// Mean cross-entropy over rows with weight `mask` (1.0 = counted).
    /// `None` counts every row.
    pub fn cross_entropy(
        &mut self,
        logits: ArrayId,
        targets: &[usize],
        mask: Option<&[f64]>,
    ) -> Result<ArrayId, NumericsError> {
        let (r, c) = self.shapes[logits.0];
        if targets.len() != r {
            return Err(NumericsError::BadArg {
                op: "cross_entropy",
                msg: format!("{} targets for {r} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::TargetOutOfRange { index: bad, classes: c });
        }
        let mask: Vec<f64> = match mask {
            Some(m) => {
                if m.len() != r {
                    return Err(NumericsError::BadArg {
                        op: "cross_entropy",
                        msg: format!("{} mask entries for {r} rows", m.len()),
                    });
                }
                m.to_vec()
            }
            None => vec![1.0; r],
        };
        let denom: f64 = mask.iter().sum();
        if denom <= 0.0 {
            return Err(NumericsError::BadArg { op: "cross_entropy", msg: "mask sums to zero".into() });
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &self.vals[logits.0][i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            let logp = (row[targets[i]] - max) - sum.ln();
            loss -= mask[i] * logp;
        }
        loss /= denom;
        self.push(
            "cross_entropy",
            1,
            1,
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask, probs },
        )
    }

    /// Backward dispatch for node `i` with upstream gradient `g`.
    pub(crate) fn scatter(&mut self, i: usize, g: &[f64]) -> Result<(), NumericsError> {
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(self.ensure_grad(a), g);
                add_into(self.ensure_grad(b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.ensure_grad(a), g);
                for (d, s) in self.ensure_grad(b).iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&self.vals[b.0]).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(&self.vals[a.0]).map(|(x, y)| x * y).collect();
                add_into(self.ensure_grad(a), &da);
                add_into(self.ensure_grad(b), &db);
            }
            Op::Scale(a, k) => {
                for (d, s) in self.ensure_grad(a).iter_mut().zip(g) {
                    *d += s * k;
                }
            }
            Op::AddBias(a, bias) => {
                add_into(self.ensure_grad(a), g);
                let c = self.shapes[bias.0].1;
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    add_into(&mut db, row);
                }
                add_into(self.ensure_grad(bias), &db);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.shapes[a.0];
                let n = self.shapes[b.0].1;
                let da = matmul_back_a(g, &self.vals[b.0], m, k, n);
                let db = matmul_back_b(&self.vals[a.0], g, m, k, n);
                add_into(self.ensure_grad(a), &da);
                add_into(self.ensure_grad(b), &db);
            }
            Op::Tanh(a) => {
                let dy: Vec<f64> = self.vals[i].iter().zip(g).map(|(y, s)| s * (1.0 - y * y)).collect();
                add_into(self.ensure_grad(a), &dy);
            }
            Op::Gelu(a) => {
                let dx: Vec<f64> = self.vals[a.0]
                    .iter()
                    .zip(g)
                    .map(|(&x, s)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        s * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                add_into(self.ensure_grad(a), &dx);
            }
            Op::Exp(a) => {
                let dx: Vec<f64> = self.vals[i].iter().zip(g).map(|(y, s)| y * s).collect();
                add_into(self.ensure_grad(a), &dx);
            }
            Op::SoftmaxRows(a) => {
                let c = self.shapes[i].1;
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), yrow) in
                    dx.chunks_mut(c).zip(g.chunks(c)).zip(self.vals[i].chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                add_into(self.ensure_grad(a), &dx);
            }
            Op::LogSoftmaxRows(a) => {
                let c = self.shapes[i].1;
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), lrow) in
                    dx.chunks_mut(c).zip(g.chunks(c)).zip(self.vals[i].chunks(c))
                {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] = grow[j] - lrow[j].exp() * gsum;
                    }
                }
                add_into(self.ensure_grad(a), &dx);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (r, c) = self.shapes[x.0];
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let gv = &self.vals[gain.0];
                for row in 0..r {
                    let (mean, rstd) = stats[row];
                    let xrow = &self.vals[x.0][row * c..(row + 1) * c];
                    let grow = &g[row * c..(row + 1) * c];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * rstd;
                        let dxhat = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    let drow = &mut dx[row * c..(row + 1) * c];
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * rstd;
                        let dxhat = grow[j] * gv[j];
                        drow[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                add_into(self.ensure_grad(x), &dx);
                add_into(self.ensure_grad(gain), &dgain);
                add_into(self.ensure_grad(bias), &dbias);
            }
            Op::Dropout { x, mask_scale } => {
                let dx: Vec<f64> = g.iter().zip(&mask_scale).map(|(s, m)| s * m).collect();
                add_into(self.ensure_grad(x), &dx);
            }
            Op::Reshape(x) => {
                add_into(self.ensure_grad(x), g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.shapes[p.0].0 * self.shapes[p.0].1;
                    let piece = &g[offset..offset + n].to_vec();
                    add_into(self.ensure_grad(p), piece);
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.shapes[x.0].1;
                let dst = self.ensure_grad(x);
                add_into(&mut dst[start * c..start * c + g.len()], g);
            }
            Op::GatherRows { x, indices } => {
                let c = self.shapes[x.0].1;
                let dst = self.ensure_grad(x);
                for (row, &src_row) in indices.iter().enumerate() {
                    add_into(&mut dst[src_row * c..(src_row + 1) * c], &g[row * c..(row + 1) * c]);
                }
            }
            Op::SelectPerRow { x, indices } => {
                let c = self.shapes[x.0].1;
                let dst = self.ensure_grad(x);
                for (row, &col) in indices.iter().enumerate() {
                    dst[row * c + col] += g[row];
                }
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<f64> = self.vals[x.0]
                    .iter()
                    .zip(g)
                    .map(|(&v, s)| if v > lo && v < hi { *s } else { 0.0 })
                    .collect();
                add_into(self.ensure_grad(x), &dx);
            }
            Op::MinElem(a, b) => {
                let da: Vec<f64> = self.vals[a.0]
                    .iter()
                    .zip(&self.vals[b.0])
                    .zip(g)
                    .map(|((x, y), s)| if x <= y { *s } else { 0.0 })
                    .collect();
                let db: Vec<f64> = self.vals[a.0]
                    .iter()
                    .zip(&self.vals[b.0])
                    .zip(g)
                    .map(|((x, y), s)| if x <= y { 0.0 } else { *s })
                    .collect();
                add_into(self.ensure_grad(a), &da);
                add_into(self.ensure_grad(b), &db);
            }
            Op::SumAll(x) => {
                let s = g[0];
                for d in self.ensure_grad(x) {
                    *d += s;
                }
            }
            Op::MeanAll(x) => {
                let n = self.vals[x.0].len() as f64;
                let s = g[0] / n;
                for d in self.ensure_grad(x) {
                    *d += s;
                }
            }
            Op::CausalAttention { q, k, v, heads, weights } => {
                self.causal_attention_backward(i, q, k, v, heads, &weights, g);
            }
            Op::PooledAttention { q, k, v, heads, group, mask, weights } => {
                self.pooled_attention_backward(q, k, v, heads, group, &mask, &weights, g);
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let c = self.shapes[logits.0].1;
                let denom: f64 = mask.iter().sum();
                let s = g[0] / denom;
                let dst = self.ensure_grad(logits);
                for (row, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        let ind = if j == t { 1.0 } else { 0.0 };
                        dst[row * c + j] += s * m * (probs[row * c + j] - ind);
                    }
                }
            }
        }
        Ok(())
    }
}
