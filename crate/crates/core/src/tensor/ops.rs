use super::resample::{ResampleKind, Resampler};
use super::{Node, Tape, Tensor, Var};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(super) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    AddBias(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Resample {
        input: Var,
        resampler: Resampler,
        channels: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    MaskMul {
        input: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    SpliceRows {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
}

impl Op {
    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::DivScalar(a, _) | Op::Reshape(a) | Op::Transpose(a) => vec![*a],
            Op::Softmax(a) | Op::Gelu(a) | Op::Sum(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } | Op::Resample { input, .. } | Op::MaskMul { input, .. } => {
                vec![*input]
            }
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } | Op::SoftCrossEntropy { logits, .. } => vec![*logits],
            Op::SpliceRows { a, b, .. } => vec![*a, *b],
        }
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(op, format!("expected a 2-D tensor, got {:?}", t.shape())))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn log_softmax_row(row: &[f64], probs: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (p, &z) in probs.iter_mut().zip(row) {
        *p = (z - max).exp();
        total += *p;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    max + total.ln()
}

/// `c += a · b` with `a` an `[m, k]` and `b` a `[k, n]` view given by
/// (row stride, column stride) pairs; `c` is row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() == m * n);
    // SAFETY: the views stay inside `a` and `b` because every caller derives
    // the strides from the dims of contiguous row-major buffers of exactly
    // m*k and k*n values, and `c` holds m*n values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == k * n, "matmul buffers do not match dims");
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, a, (k, 1), b, (n, 1), &mut out);
    out
}

impl Tape {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m},{k}] x [{k2},{n}]"),
            ));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "multiply")?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("multiply", t, Op::Mul(a, b))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("scale", t, Op::Scale(a, factor))
    }

    pub fn div_scalar(&mut self, a: Var, divisor: f64) -> Result<Var> {
        if divisor == 0.0 {
            return Err(Error::numeric("divide-by-scalar", "division by zero"));
        }
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x / divisor).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("divide-by-scalar", t, Op::DivScalar(a, divisor))
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = dims2(tx, "add-bias")?;
        if tb.len() != n || tb.shape().len() != 1 {
            return Err(Error::shape(
                "add-bias",
                format!("bias {:?} does not match rows of [{m},{n}]", tb.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add-bias", Tensor::new(vec![m, n], out)?, Op::AddBias(x, bias))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", Tensor::new(shape, out)?, op)
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(input);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} invalid for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let op = Op::Slice {
            input,
            axis,
            start,
            end,
        };
        self.push("slice", Tensor::new(new_shape, out)?, op)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(input);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", t.shape()),
            ));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        self.push("reshape", out, Op::Reshape(input))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let (m, n) = dims2(t, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(input))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = dims2(t, "embedding-lookup")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape(
                    "embedding-lookup",
                    format!("id {id} out of range for table [{v},{d}]"),
                ));
            }
            out.extend_from_slice(t.row(id));
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding-lookup", Tensor::new(vec![ids.len(), d], out)?, op)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if !t.is_finite() {
            return Err(Error::numeric("softmax", "non-finite input"));
        }
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = vec![0.0; t.len()];
        for (row, o) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_row(row, o);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(input))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2(t, "layer-normalization")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != n || b.len() != n {
            return Err(Error::shape(
                "layer-normalization",
                format!(
                    "gamma {:?} / beta {:?} do not match width {n}",
                    g.shape(),
                    b.shape()
                ),
            ));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &t.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer-normalization", Tensor::new(vec![m, n], out)?, op)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let out = t
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("gelu", out, Op::Gelu(input))
    }

    fn resample(&mut self, name: &'static str, input: Var, kind: ResampleKind, dst: (usize, usize)) -> Result<Var> {
        let t = self.value(input);
        let (h, w, c) = match t.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::shape(name, format!("expected [h,w,c], got {s:?}"))),
        };
        if dst.0 == 0 || dst.1 == 0 || h == 0 || w == 0 {
            return Err(Error::shape(name, format!("empty resolution {dst:?}")));
        }
        if kind == ResampleKind::AveragePool && (dst.0 > h || dst.1 > w) {
            return Err(Error::shape(
                name,
                format!("cannot pool [{h},{w}] up to {dst:?}"),
            ));
        }
        let resampler = Resampler::new(kind, (h, w), dst);
        let out = resampler.apply(t.data(), c);
        let out = Tensor::new(vec![dst.0, dst.1, c], out)?;
        let op = Op::Resample {
            input,
            resampler,
            channels: c,
        };
        self.push(name, out, op)
    }

    /// Window-mean down-sampling of a `[h, w, c]` map.
    pub fn avg_pool_2d(&mut self, input: Var, dst: (usize, usize)) -> Result<Var> {
        self.resample("average-pool-2d", input, ResampleKind::AveragePool, dst)
    }

    /// Bilinear resize (align-corners false) of a `[h, w, c]` map.
    pub fn bilinear_resize_2d(&mut self, input: Var, dst: (usize, usize)) -> Result<Var> {
        self.resample("bilinear-resize-2d", input, ResampleKind::Bilinear, dst)
    }

    /// Per-row `-log softmax(logits)[target]`, shape `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = dims2(t, "cross-entropy-with-logits")?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross-entropy-with-logits",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        let mut probs = vec![0.0; n * v];
        let mut out = Vec::with_capacity(n);
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::shape(
                    "cross-entropy-with-logits",
                    format!("target {target} out of range for width {v}"),
                ));
            }
            let row = &t.data()[r * v..(r + 1) * v];
            let lse = log_softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            out.push(lse - row[target]);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross-entropy-with-logits", Tensor::from_vec(out), op)
    }

    /// Per-row `-sum_j q_j log softmax(logits)_j` against constant
    /// distributions `q` (rows must sum to one).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = dims2(t, "soft-cross-entropy")?;
        if targets.shape() != t.shape() {
            return Err(Error::shape(
                "soft-cross-entropy",
                format!("targets {:?} vs logits {:?}", targets.shape(), t.shape()),
            ));
        }
        let mut probs = vec![0.0; n * v];
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let row = &t.data()[r * v..(r + 1) * v];
            let lse = log_softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            let q = &targets.data()[r * v..(r + 1) * v];
            out.push(q.iter().zip(row).map(|(q, z)| q * (lse - z)).sum());
        }
        let op = Op::SoftCrossEntropy {
            logits,
            targets: targets.data().to_vec(),
            probs,
        };
        self.push("soft-cross-entropy", Tensor::from_vec(out), op)
    }

    /// Hadamard product with a constant mask of the same shape.
    pub fn mask_mul(&mut self, input: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(input);
        same_shape(t, mask, "elementwise-mask-multiply")?;
        let out = t.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let op = Op::MaskMul {
            input,
            mask: mask.data().to_vec(),
        };
        self.push("elementwise-mask-multiply", out, op)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(input))
    }

    /// Row `r` copied from `a` when `take_a[r]`, otherwise from `b`.
    pub fn splice_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "splice-rows")?;
        let (m, n) = dims2(ta, "splice-rows")?;
        if take_a.len() != m {
            return Err(Error::shape(
                "splice-rows",
                format!("{} row flags for {m} rows", take_a.len()),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for (r, &from_a) in take_a.iter().enumerate() {
            out.extend_from_slice(if from_a { ta.row(r) } else { tb.row(r) });
        }
        let op = Op::SpliceRows {
            a,
            b,
            take_a: take_a.to_vec(),
        };
        self.push("splice-rows", Tensor::new(vec![m, n], out)?, op)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(g);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Propagates the cotangent `g` of node `i` into its inputs.
pub(super) fn vjp(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = ta.dims2().unwrap();
            let n = tb.dims2().unwrap().1;
            // dA = G · Bᵀ and dB = Aᵀ · G, transposes taken as strided views.
            accumulate(nodes, grads, *a, |da| gemm_acc(m, n, k, g, (n, 1), tb.data(), (1, n), da));
            accumulate(nodes, grads, *b, |db| gemm_acc(k, m, n, ta.data(), (1, k), g, (n, 1), db));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                for (x, gv) in d.iter_mut().zip(g) {
                    *x -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(nodes, grads, *a, |d| {
                for ((x, gv), bv) in d.iter_mut().zip(g).zip(tb.data()) {
                    *x += gv * bv;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((x, gv), av) in d.iter_mut().zip(g).zip(ta.data()) {
                    *x += gv * av;
                }
            });
        }
        Op::Scale(a, factor) => accumulate(nodes, grads, *a, |d| {
            for (x, gv) in d.iter_mut().zip(g) {
                *x += gv * factor;
            }
        }),
        Op::DivScalar(a, divisor) => accumulate(nodes, grads, *a, |d| {
            for (x, gv) in d.iter_mut().zip(g) {
                *x += gv / divisor;
            }
        }),
        Op::AddBias(x, bias) => {
            let n = nodes[bias.0].value.len();
            accumulate(nodes, grads, *x, |d| add_into(d, g));
            accumulate(nodes, grads, *bias, |d| {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let (outer, _, inner) = split_axis(shape, *axis);
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for v in inputs {
                let width = nodes[v.0].value.shape()[*axis] * inner;
                accumulate(nodes, grads, *v, |d| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        add_into(&mut d[o * width..(o + 1) * width], src);
                    }
                });
                offset += width;
            }
        }
        Op::Slice {
            input,
            axis,
            start,
            end,
        } => {
            let shape = nodes[input.0].value.shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let width = (end - start) * inner;
            accumulate(nodes, grads, *input, |d| {
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    add_into(&mut d[base..base + width], &g[o * width..(o + 1) * width]);
                }
            });
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |d| add_into(d, g)),
        Op::Transpose(a) => {
            let (m, n) = nodes[a.0].value.dims2().unwrap();
            accumulate(nodes, grads, *a, |d| {
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] += g[c * m + r];
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d_model = nodes[table.0].value.dims2().unwrap().1;
            accumulate(nodes, grads, *table, |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(
                        &mut d[id * d_model..(id + 1) * d_model],
                        &g[r * d_model..(r + 1) * d_model],
                    );
                }
            });
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *a, |d| {
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv += yv * (gv - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = nodes[gamma.0].value.len();
            let gam = nodes[gamma.0].value.data();
            accumulate(nodes, grads, *gamma, |d| {
                for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((dv, gv), xv) in d.iter_mut().zip(gr).zip(xr) {
                        *dv += gv * xv;
                    }
                }
            });
            accumulate(nodes, grads, *beta, |d| {
                for gr in g.chunks(n) {
                    add_into(d, gr);
                }
            });
            accumulate(nodes, grads, *x, |d| {
                for (r, ((gr, xr), dr)) in g
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(d.chunks_mut(n))
                    .enumerate()
                {
                    let dxh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dxh_xh =
                        dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dr[j] += rstd[r] * (dxh[j] - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let xs = nodes[a.0].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((dv, gv), &x) in d.iter_mut().zip(g).zip(xs) {
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *dv += gv * (0.5 * (1.0 + t) + 0.5 * x * dt);
                }
            });
        }
        Op::Resample {
            input,
            resampler,
            channels,
        } => accumulate(nodes, grads, *input, |d| {
            add_into(d, &resampler.apply_transpose(g, *channels));
        }),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = nodes[logits.0].value.dims2().unwrap().1;
            accumulate(nodes, grads, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut d[r * v..(r + 1) * v];
                    for (dv, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *dv += g[r] * p;
                    }
                    row[t] -= g[r];
                }
            });
        }
        Op::SoftCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = nodes[logits.0].value.dims2().unwrap().1;
            accumulate(nodes, grads, *logits, |d| {
                for (r, gr) in g.iter().enumerate() {
                    let q = &targets[r * v..(r + 1) * v];
                    let mass: f64 = q.iter().sum();
                    let p = &probs[r * v..(r + 1) * v];
                    for ((dv, pv), qv) in d[r * v..(r + 1) * v].iter_mut().zip(p).zip(q) {
                        *dv += gr * (pv * mass - qv);
                    }
                }
            });
        }
        Op::MaskMul { input, mask } => accumulate(nodes, grads, *input, |d| {
            for ((dv, gv), m) in d.iter_mut().zip(g).zip(mask) {
                *dv += gv * m;
            }
        }),
        Op::Sum(a) => accumulate(nodes, grads, *a, |d| {
            for dv in d.iter_mut() {
                *dv += g[0];
            }
        }),
        Op::SpliceRows { a, b, take_a } => {
            let n = node.value.dims2().unwrap().1;
            for (v, want) in [(*a, true), (*b, false)] {
                accumulate(nodes, grads, v, |d| {
                    for (r, &from_a) in take_a.iter().enumerate() {
                        if from_a == want {
                            add_into(&mut d[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    }
                });
            }
        }
    }
}
