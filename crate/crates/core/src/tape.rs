//! Reverse-mode automatic differentiation over flat f64 buffers.
//!
//! Operations are recorded onto a linear tape during the forward pass and
//! replayed in reverse to accumulate vector-Jacobian products. One tape is
//! built per optimization step and dropped afterwards; nothing is shared
//! between steps, so tapes are freely usable from parallel workers.
//!
//! Buffers are row-major. Rasters use the channel-last layout of
//! [`crate::raster::Raster`]; matrices are rows x cols.

/// Index of a buffer in the tape arena.
pub type BufId = usize;

#[derive(Debug, Clone)]
struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Scale { x: BufId, k: f64, out: BufId },
    MatMul { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    /// out = A @ B^T with A: m x k, B: n x k.
    MatMulTransposeB { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    SoftmaxRows { out: BufId, x: BufId, rows: usize, cols: usize },
    Relu { x: BufId, out: BufId },
    Ln { x: BufId, out: BufId },
    Sqrt { x: BufId, out: BufId },
    Clamp01 { x: BufId, out: BufId },
    LayerNormRows { x: BufId, out: BufId, rows: usize, cols: usize, eps: f64 },
    /// Broadcast-add a cols-vector to every row of an rows x cols matrix.
    AddRowVec { x: BufId, v: BufId, out: BufId, rows: usize, cols: usize },
    MulRowVec { x: BufId, v: BufId, out: BufId, rows: usize, cols: usize },
    /// Broadcast-add a per-channel bias over all pixels (channel-last raster).
    AddChannelBias { x: BufId, v: BufId, out: BufId, pixels: usize, channels: usize },
    /// 3x3 convolution, stride 1, zero padding 1, channel-last layout.
    /// Weight layout: [out_ch][3][3][in_ch].
    Conv2d { x: BufId, w: BufId, out: BufId, h: usize, wid: usize, cin: usize, cout: usize },
    /// Cut an h x w x c raster into (h/p)^2 rows of flattened p x p x c tiles.
    Im2Rows { x: BufId, out: BufId, h: usize, wid: usize, c: usize, p: usize },
    /// 2x2 average pooling with stride 2 (even dims required).
    AvgPool2 { x: BufId, out: BufId, h: usize, wid: usize, c: usize },
    /// Overwrite an axis-aligned square of the image with patch content.
    PlacePatch {
        image: BufId,
        patch: BufId,
        out: BufId,
        h: usize,
        wid: usize,
        c: usize,
        side: usize,
        top_r: usize,
        top_c: usize,
    },
    EmbedRows { table: BufId, out: BufId, ids: Vec<usize>, dim: usize },
    SliceRows { x: BufId, out: BufId, start: usize, rows: usize, cols: usize },
    MeanRows { x: BufId, out: BufId, rows: usize, cols: usize },
    SumAll { x: BufId, out: BufId },
    Gather { x: BufId, out: BufId, idx: Vec<usize> },
    StackScalars { xs: Vec<BufId>, out: BufId },
}

/// Wengert tape: forward values plus the recorded op list.
#[derive(Debug, Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    /// Register an input buffer. Leaves have no producer; gradients
    /// accumulate into them during backward.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> BufId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = self.bufs.len();
        self.bufs.push(Buf { data, shape });
        self.grads.push(None);
        id
    }

    pub fn scalar_leaf(&mut self, value: f64) -> BufId {
        self.leaf(vec![value], vec![1])
    }

    pub fn data(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn scalar(&self, id: BufId) -> f64 {
        debug_assert_eq!(self.bufs[id].data.len(), 1);
        self.bufs[id].data[0]
    }

    /// Gradient accumulated for a buffer, if any flowed to it.
    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: impl FnOnce(BufId) -> Op) -> BufId {
        let id = self.leaf(data, shape);
        let op = op(id);
        self.ops.push(op);
        id
    }

    fn accumulate(&mut self, id: BufId, grad: &[f64]) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad.iter()) {
                    *e += g;
                }
            }
            None => self.grads[id] = Some(grad.to_vec()),
        }
    }

    // ── Elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].data.len(), self.bufs[b].data.len(), "add: size mismatch");
        let data: Vec<f64> = self.bufs[a]
            .data
            .iter()
            .zip(self.bufs[b].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        self.push(data, shape, |out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].data.len(), self.bufs[b].data.len(), "sub: size mismatch");
        let data: Vec<f64> = self.bufs[a]
            .data
            .iter()
            .zip(self.bufs[b].data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        self.push(data, shape, |out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].data.len(), self.bufs[b].data.len(), "mul: size mismatch");
        let data: Vec<f64> = self.bufs[a]
            .data
            .iter()
            .zip(self.bufs[b].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        self.push(data, shape, |out| Op::Mul { a, b, out })
    }

    pub fn scale(&mut self, x: BufId, k: f64) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v * k).collect();
        let shape = self.bufs[x].shape.clone();
        self.push(data, shape, |out| Op::Scale { x, k, out })
    }

    pub fn relu(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.bufs[x].shape.clone();
        self.push(data, shape, |out| Op::Relu { x, out })
    }

    pub fn ln(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v.ln()).collect();
        let shape = self.bufs[x].shape.clone();
        self.push(data, shape, |out| Op::Ln { x, out })
    }

    pub fn sqrt(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v.sqrt()).collect();
        let shape = self.bufs[x].shape.clone();
        self.push(data, shape, |out| Op::Sqrt { x, out })
    }

    pub fn clamp01(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let shape = self.bufs[x].shape.clone();
        self.push(data, shape, |out| Op::Clamp01 { x, out })
    }

    // ── Linear algebra ───────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId, m: usize, k: usize, n: usize) -> BufId {
        assert_eq!(self.bufs[a].data.len(), m * k, "matmul: lhs size");
        assert_eq!(self.bufs[b].data.len(), k * n, "matmul: rhs size");
        let data = matmul(&self.bufs[a].data, &self.bufs[b].data, m, k, n);
        self.push(data, vec![m, n], |out| Op::MatMul { a, b, out, m, k, n })
    }

    pub fn matmul_tb(&mut self, a: BufId, b: BufId, m: usize, k: usize, n: usize) -> BufId {
        assert_eq!(self.bufs[a].data.len(), m * k, "matmul_tb: lhs size");
        assert_eq!(self.bufs[b].data.len(), n * k, "matmul_tb: rhs size");
        let mut data = vec![0.0; m * n];
        let (av, bv) = (&self.bufs[a].data, &self.bufs[b].data);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                data[i * n + j] = acc;
            }
        }
        self.push(data, vec![m, n], |out| Op::MatMulTransposeB { a, b, out, m, k, n })
    }

    pub fn softmax_rows(&mut self, x: BufId, rows: usize, cols: usize) -> BufId {
        assert_eq!(self.bufs[x].data.len(), rows * cols, "softmax: size");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.bufs[x].data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        self.push(data, vec![rows, cols], |out| Op::SoftmaxRows { x, out, rows, cols })
    }

    pub fn layer_norm_rows(&mut self, x: BufId, rows: usize, cols: usize, eps: f64) -> BufId {
        assert_eq!(self.bufs[x].data.len(), rows * cols, "layer_norm: size");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.bufs[x].data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv;
            }
        }
        self.push(data, vec![rows, cols], |out| Op::LayerNormRows { x, out, rows, cols, eps })
    }

    pub fn add_row_vec(&mut self, x: BufId, v: BufId, rows: usize, cols: usize) -> BufId {
        assert_eq!(self.bufs[x].data.len(), rows * cols, "add_row_vec: size");
        assert_eq!(self.bufs[v].data.len(), cols, "add_row_vec: vec size");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(self.bufs[x].data[r * cols + c] + self.bufs[v].data[c]);
            }
        }
        self.push(data, vec![rows, cols], |out| Op::AddRowVec { x, v, out, rows, cols })
    }

    pub fn mul_row_vec(&mut self, x: BufId, v: BufId, rows: usize, cols: usize) -> BufId {
        assert_eq!(self.bufs[x].data.len(), rows * cols, "mul_row_vec: size");
        assert_eq!(self.bufs[v].data.len(), cols, "mul_row_vec: vec size");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(self.bufs[x].data[r * cols + c] * self.bufs[v].data[c]);
            }
        }
        self.push(data, vec![rows, cols], |out| Op::MulRowVec { x, v, out, rows, cols })
    }

    pub fn add_channel_bias(&mut self, x: BufId, v: BufId, pixels: usize, channels: usize) -> BufId {
        assert_eq!(self.bufs[x].data.len(), pixels * channels, "add_channel_bias: size");
        assert_eq!(self.bufs[v].data.len(), channels, "add_channel_bias: bias size");
        let mut data = Vec::with_capacity(pixels * channels);
        for p in 0..pixels {
            for ch in 0..channels {
                data.push(self.bufs[x].data[p * channels + ch] + self.bufs[v].data[ch]);
            }
        }
        let shape = self.bufs[x].shape.clone();
        self.push(data, shape, |out| Op::AddChannelBias { x, v, out, pixels, channels })
    }

    pub fn conv2d_3x3(&mut self, x: BufId, w: BufId, h: usize, wid: usize, cin: usize, cout: usize) -> BufId {
        assert_eq!(self.bufs[x].data.len(), h * wid * cin, "conv2d: input size");
        assert_eq!(self.bufs[w].data.len(), cout * 9 * cin, "conv2d: weight size");
        let xv = &self.bufs[x].data;
        let wv = &self.bufs[w].data;
        let mut data = vec![0.0; h * wid * cout];
        for r in 0..h {
            for col in 0..wid {
                for dr in 0..3usize {
                    let rr = r as isize + dr as isize - 1;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for dc in 0..3usize {
                        let cc = col as isize + dc as isize - 1;
                        if cc < 0 || cc >= wid as isize {
                            continue;
                        }
                        let xbase = (rr as usize * wid + cc as usize) * cin;
                        for oc in 0..cout {
                            let wbase = ((oc * 3 + dr) * 3 + dc) * cin;
                            let mut acc = 0.0;
                            for ic in 0..cin {
                                acc += xv[xbase + ic] * wv[wbase + ic];
                            }
                            data[(r * wid + col) * cout + oc] += acc;
                        }
                    }
                }
            }
        }
        self.push(data, vec![h, wid, cout], |out| Op::Conv2d { x, w, out, h, wid, cin, cout })
    }

    pub fn im2rows(&mut self, x: BufId, h: usize, wid: usize, c: usize, p: usize) -> BufId {
        assert_eq!(h % p, 0, "im2rows: height not divisible by tile");
        assert_eq!(wid % p, 0, "im2rows: width not divisible by tile");
        assert_eq!(self.bufs[x].data.len(), h * wid * c, "im2rows: input size");
        let (gh, gw) = (h / p, wid / p);
        let rowlen = p * p * c;
        let mut data = vec![0.0; gh * gw * rowlen];
        for gi in 0..gh {
            for gj in 0..gw {
                let row = gi * gw + gj;
                for pr in 0..p {
                    for pc in 0..p {
                        for ch in 0..c {
                            data[row * rowlen + (pr * p + pc) * c + ch] =
                                self.bufs[x].data[((gi * p + pr) * wid + gj * p + pc) * c + ch];
                        }
                    }
                }
            }
        }
        self.push(data, vec![gh * gw, rowlen], |out| Op::Im2Rows { x, out, h, wid, c, p })
    }

    pub fn avg_pool2(&mut self, x: BufId, h: usize, wid: usize, c: usize) -> BufId {
        assert!(h % 2 == 0 && wid % 2 == 0, "avg_pool2: dims must be even");
        assert_eq!(self.bufs[x].data.len(), h * wid * c, "avg_pool2: input size");
        let (oh, ow) = (h / 2, wid / 2);
        let mut data = vec![0.0; oh * ow * c];
        for r in 0..oh {
            for col in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            acc += self.bufs[x].data[((r * 2 + dr) * wid + col * 2 + dc) * c + ch];
                        }
                    }
                    data[(r * ow + col) * c + ch] = acc / 4.0;
                }
            }
        }
        self.push(data, vec![oh, ow, c], |out| Op::AvgPool2 { x, out, h, wid, c })
    }

    pub fn place_patch(
        &mut self,
        image: BufId,
        patch: BufId,
        h: usize,
        wid: usize,
        c: usize,
        side: usize,
        top_r: usize,
        top_c: usize,
    ) -> BufId {
        assert_eq!(self.bufs[image].data.len(), h * wid * c, "place_patch: image size");
        assert_eq!(self.bufs[patch].data.len(), side * side * c, "place_patch: patch size");
        assert!(top_r + side <= h && top_c + side <= wid, "place_patch: square out of bounds");
        let mut data = self.bufs[image].data.clone();
        for r in 0..side {
            for col in 0..side {
                for ch in 0..c {
                    data[((top_r + r) * wid + top_c + col) * c + ch] =
                        self.bufs[patch].data[(r * side + col) * c + ch];
                }
            }
        }
        self.push(data, vec![h, wid, c], |out| Op::PlacePatch {
            image,
            patch,
            out,
            h,
            wid,
            c,
            side,
            top_r,
            top_c,
        })
    }

    pub fn embed_rows(&mut self, table: BufId, ids: &[usize], dim: usize) -> BufId {
        let vocab = self.bufs[table].data.len() / dim;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            assert!(id < vocab, "embed_rows: id out of vocab");
            data.extend_from_slice(&self.bufs[table].data[id * dim..(id + 1) * dim]);
        }
        let ids = ids.to_vec();
        self.push(data, vec![ids.len(), dim], |out| Op::EmbedRows { table, out, ids, dim })
    }

    pub fn slice_rows(&mut self, x: BufId, start: usize, rows: usize, cols: usize) -> BufId {
        let data = self.bufs[x].data[start * cols..(start + rows) * cols].to_vec();
        self.push(data, vec![rows, cols], |out| Op::SliceRows { x, out, start, rows, cols })
    }

    pub fn mean_rows(&mut self, x: BufId, rows: usize, cols: usize) -> BufId {
        assert_eq!(self.bufs[x].data.len(), rows * cols, "mean_rows: size");
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += self.bufs[x].data[r * cols + c];
            }
        }
        for v in data.iter_mut() {
            *v /= rows as f64;
        }
        self.push(data, vec![1, cols], |out| Op::MeanRows { x, out, rows, cols })
    }

    pub fn sum_all(&mut self, x: BufId) -> BufId {
        let total = self.bufs[x].data.iter().sum();
        self.push(vec![total], vec![1], |out| Op::SumAll { x, out })
    }

    pub fn gather(&mut self, x: BufId, idx: &[usize]) -> BufId {
        let data: Vec<f64> = idx.iter().map(|&i| self.bufs[x].data[i]).collect();
        let idx = idx.to_vec();
        let n = idx.len();
        self.push(data, vec![n], |out| Op::Gather { x, out, idx })
    }

    pub fn stack_scalars(&mut self, xs: &[BufId]) -> BufId {
        let data: Vec<f64> = xs.iter().map(|&id| self.scalar(id)).collect();
        let xs = xs.to_vec();
        let n = xs.len();
        self.push(data, vec![n], |out| Op::StackScalars { xs, out })
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Run the backward pass from a scalar loss, seeding its gradient with 1.
    pub fn backward(&mut self, loss: BufId) {
        assert_eq!(self.bufs[loss].data.len(), 1, "backward: loss must be scalar");
        if self.grads[loss].is_none() {
            self.grads[loss] = Some(vec![1.0]);
        }
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Add { a, b, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    self.accumulate(*a, &d);
                    self.accumulate(*b, &d);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    self.accumulate(*a, &d);
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    let da: Vec<f64> = d.iter().zip(self.bufs[*b].data.iter()).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = d.iter().zip(self.bufs[*a].data.iter()).map(|(g, v)| g * v).collect();
                    self.accumulate(*a, &da);
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { x, k, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    let dx: Vec<f64> = d.iter().map(|g| g * k).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::MatMul { a, b, out, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(d) = self.grads[*out].clone() {
                    // d_A = d_out @ B^T
                    let bv = self.bufs[*b].data.clone();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += d[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.accumulate(*a, &da);
                    // d_B = A^T @ d_out
                    let av = self.bufs[*a].data.clone();
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let scale = av[i * k + p];
                            if scale == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += scale * d[i * n + j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMulTransposeB { a, b, out, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(d) = self.grads[*out].clone() {
                    // d_A = d_out @ B
                    let bv = self.bufs[*b].data.clone();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = d[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * bv[j * k + p];
                            }
                        }
                    }
                    self.accumulate(*a, &da);
                    // d_B = d_out^T @ A
                    let av = self.bufs[*a].data.clone();
                    let mut db = vec![0.0; n * k];
                    for j in 0..n {
                        for i in 0..m {
                            let g = d[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += g * av[i * k + p];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::SoftmaxRows { x, out, rows, cols } => {
                if let Some(d) = self.grads[*out].clone() {
                    let y = &self.bufs[*out].data;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        let base = r * cols;
                        let mut dot = 0.0;
                        for c in 0..*cols {
                            dot += d[base + c] * y[base + c];
                        }
                        for c in 0..*cols {
                            dx[base + c] = y[base + c] * (d[base + c] - dot);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Relu { x, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.bufs[*x].data.iter())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Ln { x, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.bufs[*x].data.iter())
                        .map(|(g, v)| g / v)
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Sqrt { x, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.bufs[*out].data.iter())
                        .map(|(g, y)| if *y > 1e-12 { g / (2.0 * y) } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Clamp01 { x, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.bufs[*x].data.iter())
                        .map(|(g, v)| if (0.0..=1.0).contains(v) { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::LayerNormRows { x, out, rows, cols, eps } => {
                if let Some(d) = self.grads[*out].clone() {
                    let n = *cols as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        let base = r * cols;
                        let row = &self.bufs[*x].data[base..base + cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dmean = d[base..base + cols].iter().sum::<f64>() / n;
                        let dxhat_dot = d[base..base + cols]
                            .iter()
                            .zip(xhat.iter())
                            .map(|(g, h)| g * h)
                            .sum::<f64>()
                            / n;
                        for c in 0..*cols {
                            dx[base + c] = inv * (d[base + c] - dmean - xhat[c] * dxhat_dot);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::AddRowVec { x, v, out, rows, cols } => {
                if let Some(d) = self.grads[*out].clone() {
                    self.accumulate(*x, &d);
                    let mut dv = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dv[c] += d[r * cols + c];
                        }
                    }
                    self.accumulate(*v, &dv);
                }
            }
            Op::MulRowVec { x, v, out, rows, cols } => {
                if let Some(d) = self.grads[*out].clone() {
                    let mut dx = vec![0.0; rows * cols];
                    let mut dv = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            let g = d[r * cols + c];
                            dx[r * cols + c] = g * self.bufs[*v].data[c];
                            dv[c] += g * self.bufs[*x].data[r * cols + c];
                        }
                    }
                    self.accumulate(*x, &dx);
                    self.accumulate(*v, &dv);
                }
            }
            Op::AddChannelBias { x, v, out, pixels, channels } => {
                if let Some(d) = self.grads[*out].clone() {
                    self.accumulate(*x, &d);
                    let mut dv = vec![0.0; *channels];
                    for p in 0..*pixels {
                        for ch in 0..*channels {
                            dv[ch] += d[p * channels + ch];
                        }
                    }
                    self.accumulate(*v, &dv);
                }
            }
            Op::Conv2d { x, w, out, h, wid, cin, cout } => {
                if let Some(d) = self.grads[*out].clone() {
                    let xv = self.bufs[*x].data.clone();
                    let wv = self.bufs[*w].data.clone();
                    let mut dx = vec![0.0; h * wid * cin];
                    let mut dw = vec![0.0; cout * 9 * cin];
                    for r in 0..*h {
                        for col in 0..*wid {
                            for dr in 0..3usize {
                                let rr = r as isize + dr as isize - 1;
                                if rr < 0 || rr >= *h as isize {
                                    continue;
                                }
                                for dc in 0..3usize {
                                    let cc = col as isize + dc as isize - 1;
                                    if cc < 0 || cc >= *wid as isize {
                                        continue;
                                    }
                                    let xbase = (rr as usize * wid + cc as usize) * cin;
                                    for oc in 0..*cout {
                                        let g = d[(r * wid + col) * cout + oc];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        let wbase = ((oc * 3 + dr) * 3 + dc) * cin;
                                        for ic in 0..*cin {
                                            dx[xbase + ic] += g * wv[wbase + ic];
                                            dw[wbase + ic] += g * xv[xbase + ic];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                    self.accumulate(*w, &dw);
                }
            }
            Op::Im2Rows { x, out, h, wid, c, p } => {
                if let Some(d) = self.grads[*out].clone() {
                    let (gh, gw) = (h / p, wid / p);
                    let rowlen = p * p * c;
                    let mut dx = vec![0.0; h * wid * c];
                    for gi in 0..gh {
                        for gj in 0..gw {
                            let row = gi * gw + gj;
                            for pr in 0..*p {
                                for pc in 0..*p {
                                    for ch in 0..*c {
                                        dx[((gi * p + pr) * wid + gj * p + pc) * c + ch] +=
                                            d[row * rowlen + (pr * p + pc) * c + ch];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::AvgPool2 { x, out, h, wid, c } => {
                if let Some(d) = self.grads[*out].clone() {
                    let (oh, ow) = (h / 2, wid / 2);
                    let mut dx = vec![0.0; h * wid * c];
                    for r in 0..oh {
                        for col in 0..ow {
                            for ch in 0..*c {
                                let g = d[(r * ow + col) * c + ch] / 4.0;
                                for dr in 0..2 {
                                    for dc in 0..2 {
                                        dx[((r * 2 + dr) * wid + col * 2 + dc) * c + ch] += g;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::PlacePatch { image, patch, out, h, wid, c, side, top_r, top_c } => {
                if let Some(d) = self.grads[*out].clone() {
                    debug_assert_eq!(d.len(), h * wid * c);
                    let mut dimg = d.clone();
                    let mut dpatch = vec![0.0; side * side * c];
                    for r in 0..*side {
                        for col in 0..*side {
                            for ch in 0..*c {
                                let img_idx = ((top_r + r) * wid + top_c + col) * c + ch;
                                dpatch[(r * side + col) * c + ch] = d[img_idx];
                                dimg[img_idx] = 0.0;
                            }
                        }
                    }
                    self.accumulate(*image, &dimg);
                    self.accumulate(*patch, &dpatch);
                }
            }
            Op::EmbedRows { table, out, ids, dim } => {
                if let Some(d) = self.grads[*out].clone() {
                    let vocab = self.bufs[*table].data.len() / dim;
                    let mut dt = vec![0.0; vocab * dim];
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..*dim {
                            dt[id * dim + c] += d[row * dim + c];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::SliceRows { x, out, start, rows, cols } => {
                if let Some(d) = self.grads[*out].clone() {
                    let total = self.bufs[*x].data.len();
                    let mut dx = vec![0.0; total];
                    dx[start * cols..(start + rows) * cols].copy_from_slice(&d);
                    self.accumulate(*x, &dx);
                }
            }
            Op::MeanRows { x, out, rows, cols } => {
                if let Some(d) = self.grads[*out].clone() {
                    let scale = 1.0 / *rows as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dx[r * cols + c] = d[c] * scale;
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::SumAll { x, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    let dx = vec![d[0]; self.bufs[*x].data.len()];
                    self.accumulate(*x, &dx);
                }
            }
            Op::Gather { x, out, idx } => {
                if let Some(d) = self.grads[*out].clone() {
                    let mut dx = vec![0.0; self.bufs[*x].data.len()];
                    for (pos, &i) in idx.iter().enumerate() {
                        dx[i] += d[pos];
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::StackScalars { xs, out } => {
                if let Some(d) = self.grads[*out].clone() {
                    for (pos, &id) in xs.iter().enumerate() {
                        self.accumulate(id, &[d[pos]]);
                    }
                }
            }
        }
    }
}
