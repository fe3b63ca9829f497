use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, k: Var, stride: usize, pad: usize },
    BiasAdd { x: Var, b: Var },
    Relu(Var),
    LeakyRelu { x: Var, slope: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale { x: Var, c: f64 },
    AddScalar { x: Var, c: f64 },
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    TileMean { x: Var, h: usize },
    Reshape { x: Var, shape: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, b, .. } => vec![x, k, b],
            Op::ConvTranspose2d { x, k, .. } => vec![x, k],
            Op::BiasAdd { x, b } => vec![x, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::Relu(x)
            | Op::LeakyRelu { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x, .. }
            | Op::Sqrt(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumPerSample(x)
            | Op::TileMean { x, .. }
            | Op::Reshape { x, .. } => vec![x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be propagated in
/// reverse. Nodes whose inputs need no gradient are still recorded but are
/// skipped by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves that require grad but do not influence
    /// the output get zeros; leaves that do not require grad get `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(shape_err(op, format!("expected rank-4 tensor, got {s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(shape_err(op, format!("expected rank-2 tensor, got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn conv_geom(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<([usize; 4], [usize; 4], ConvGeom)> {
    let xs = dims4("conv2d", x)?;
    let ks = dims4("conv2d", k)?;
    if xs[1] != ks[1] {
        return Err(shape_err(
            "conv2d",
            format!("input has {} channels, kernels expect {}", xs[1], ks[1]),
        ));
    }
    let g = ConvGeom::new(xs[1], xs[2], xs[3], ks[2], ks[3], stride, pad).ok_or_else(|| {
        shape_err(
            "conv2d",
            format!(
                "kernel {}x{} (stride {stride}, pad {pad}) does not fit input {}x{}",
                ks[2], ks[3], xs[2], xs[3]
            ),
        )
    })?;
    Ok((xs, ks, g))
}

/// Geometry of the forward correlation whose adjoint a transposed
/// convolution computes: from the `Co×Ho×Wo` output back to `Ci×H×W`.
fn conv_t_geom(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<([usize; 4], [usize; 4], ConvGeom)> {
    let xs = dims4("conv2d_transpose", x)?;
    let ks = dims4("conv2d_transpose", k)?;
    if xs[1] != ks[0] {
        return Err(shape_err(
            "conv2d_transpose",
            format!("input has {} channels, kernels expect {}", xs[1], ks[0]),
        ));
    }
    if stride == 0 {
        return Err(TensorError::Invalid("stride must be positive".into()));
    }
    let out = |n: usize, k: usize| ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&o| o > 0);
    let (Some(oh), Some(ow)) = (out(xs[2], ks[2]), out(xs[3], ks[3])) else {
        return Err(shape_err(
            "conv2d_transpose",
            format!("padding {pad} leaves no output for input {}x{}", xs[2], xs[3]),
        ));
    };
    let g = ConvGeom::new(ks[1], oh, ow, ks[2], ks[3], stride, pad)
        .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
        .ok_or_else(|| shape_err("conv2d_transpose", "inconsistent geometry"))?;
    Ok((xs, ks, g))
}

fn eval<'a>(op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let map = |x: &Tensor, f: &dyn Fn(f64) -> f64| {
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    };
    let zip = |op: &'static str, a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
        same_shape(op, a, b)?;
        Ok(Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect(),
        ))
    };
    Ok(match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        &Op::Conv2d { x, k, b, stride, pad } => {
            let (x, k, b) = (get(x), get(k), get(b));
            let (xs, ks, g) = conv_geom(x, k, stride, pad)?;
            if b.shape() != [ks[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", b.shape(), ks[0]),
                ));
            }
            let (rows, cols_n) = (g.col_rows(), g.col_cols());
            let mut cols = vec![0.0; rows * cols_n];
            let mut out = vec![0.0; xs[0] * ks[0] * cols_n];
            let in_len = xs[1] * xs[2] * xs[3];
            for (n, out_n) in out.chunks_exact_mut(ks[0] * cols_n).enumerate() {
                kernels::im2col(&g, &x.data()[n * in_len..(n + 1) * in_len], &mut cols);
                kernels::matmul(ks[0], rows, cols_n, k.data(), &cols, out_n, false);
                for (plane, &bias) in out_n.chunks_exact_mut(cols_n).zip(b.data()) {
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
            Tensor::from_parts(vec![xs[0], ks[0], g.out_h, g.out_w], out)
        }
        &Op::ConvTranspose2d { x, k, stride, pad } => {
            let (x, k) = (get(x), get(k));
            let (xs, ks, g) = conv_t_geom(x, k, stride, pad)?;
            let (rows, cols_n) = (g.col_rows(), g.col_cols());
            let mut cols = vec![0.0; rows * cols_n];
            let out_len = ks[1] * g.h * g.w;
            let in_len = xs[1] * cols_n;
            let mut out = vec![0.0; xs[0] * out_len];
            for (n, out_n) in out.chunks_exact_mut(out_len).enumerate() {
                kernels::matmul_tn(rows, xs[1], cols_n, k.data(), &x.data()[n * in_len..(n + 1) * in_len], &mut cols, false);
                kernels::col2im(&g, &cols, out_n);
            }
            Tensor::from_parts(vec![xs[0], ks[1], g.h, g.w], out)
        }
        &Op::BiasAdd { x, b } => {
            let (x, b) = (get(x), get(b));
            let xs = dims4("bias_add", x)?;
            if b.shape() != [xs[1]] {
                return Err(shape_err("bias_add", format!("bias {:?} for {xs:?}", b.shape())));
            }
            let plane = xs[2] * xs[3];
            let mut out = x.data().to_vec();
            for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
                let bias = b.data()[i % xs[1]];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        &Op::Relu(x) => map(get(x), &|v| v.max(0.0)),
        &Op::LeakyRelu { x, slope } => map(get(x), &|v| if v > 0.0 { v } else { slope * v }),
        &Op::Add(a, b) => zip("add", get(a), get(b), &|p, q| p + q)?,
        &Op::Sub(a, b) => zip("sub", get(a), get(b), &|p, q| p - q)?,
        &Op::Mul(a, b) => zip("mul", get(a), get(b), &|p, q| p * q)?,
        &Op::Div(a, b) => zip("div", get(a), get(b), &|p, q| p / q)?,
        &Op::Scale { x, c } => map(get(x), &|v| c * v),
        &Op::AddScalar { x, c } => map(get(x), &|v| v + c),
        &Op::Sqrt(x) => map(get(x), &f64::sqrt),
        &Op::Sum(x) => Tensor::from_parts(vec![1], vec![get(x).data().iter().sum()]),
        &Op::Mean(x) => {
            let x = get(x);
            if x.numel() == 0 {
                return Err(shape_err("mean", "empty tensor"));
            }
            Tensor::from_parts(vec![1], vec![x.data().iter().sum::<f64>() / x.numel() as f64])
        }
        &Op::SumPerSample(x) => {
            let x = get(x);
            let b = *x.shape().first().ok_or_else(|| shape_err("sum_per_sample", "rank-0 input"))?;
            if b == 0 {
                return Err(shape_err("sum_per_sample", "empty batch"));
            }
            let per = x.numel() / b;
            let sums = x.data().chunks_exact(per.max(1)).map(|c| c.iter().sum()).collect();
            Tensor::from_parts(vec![b], if per == 0 { vec![0.0; b] } else { sums })
        }
        &Op::TileMean { x, h } => {
            let x = get(x);
            let xs = dims4("tile_mean", x)?;
            if h == 0 || xs[2] % h != 0 || xs[3] % h != 0 {
                return Err(shape_err(
                    "tile_mean",
                    format!("{}x{} is not tiled by {h}x{h} patches", xs[2], xs[3]),
                ));
            }
            let (th, tw) = (xs[2] / h, xs[3] / h);
            let norm = 1.0 / (h * h) as f64;
            let mut out = vec![0.0; xs[0] * xs[1] * th * tw];
            for (plane, dst) in x.data().chunks_exact(xs[2] * xs[3]).zip(out.chunks_exact_mut(th * tw)) {
                for y in 0..xs[2] {
                    let row = &plane[y * xs[3]..(y + 1) * xs[3]];
                    let drow = &mut dst[(y / h) * tw..(y / h + 1) * tw];
                    for (tx, seg) in row.chunks_exact(h).enumerate() {
                        drow[tx] += seg.iter().sum::<f64>();
                    }
                }
                dst.iter_mut().for_each(|v| *v *= norm);
            }
            Tensor::from_parts(vec![xs[0], xs[1], th, tw], out)
        }
        Op::Reshape { x, shape } => get(*x).reshape(shape)?.with_requires_grad(false),
        &Op::Linear { x, w, b } => {
            let (x, w, b) = (get(x), get(w), get(b));
            let [batch, fan_in] = dims2("linear", x)?;
            let [fan_out, w_in] = dims2("linear", w)?;
            if w_in != fan_in || b.shape() != [fan_out] {
                return Err(shape_err(
                    "linear",
                    format!("input [{batch}, {fan_in}], weights {:?}, bias {:?}", w.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; batch * fan_out];
            kernels::matmul_nt(batch, fan_in, fan_out, x.data(), w.data(), &mut out, false);
            for row in out.chunks_exact_mut(fan_out) {
                row.iter_mut().zip(b.data()).for_each(|(v, bias)| *v += bias);
            }
            Tensor::from_parts(vec![batch, fan_out], out)
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let x = get(*logits);
            let [batch, classes] = dims2("softmax_cross_entropy", x)?;
            if labels.len() != batch || batch == 0 {
                return Err(shape_err(
                    "softmax_cross_entropy",
                    format!("{} labels for batch of {batch}", labels.len()),
                ));
            }
            let mut total = 0.0;
            for (row, &label) in x.data().chunks_exact(classes).zip(labels) {
                if label >= classes {
                    return Err(TensorError::LabelOutOfRange { label, classes });
                }
                total += log_sum_exp(row) - row[label];
            }
            Tensor::from_parts(vec![1], vec![total / batch as f64])
        }
    })
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
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

    /// Adds a leaf; it participates in gradients iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// # Panics
    /// If `v` was produced by a different, longer tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Recorded values in execution order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.requires_grad)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for v in &inputs {
            if v.0 >= self.nodes.len() {
                return Err(TensorError::UnknownVar {
                    index: v.0,
                    len: self.nodes.len(),
                });
            }
        }
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Zero-padded strided correlation; `kernels` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::Conv2d { x, k: kernels, b: bias, stride, pad })
    }

    /// Adjoint of [`Tape::conv2d`] with the same kernels: maps `Cout`
    /// channels back to `Cin`, output extent `(H-1)·stride - 2·pad + kh`.
    pub fn conv2d_transpose(&mut self, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::ConvTranspose2d { x, k: kernels, stride, pad })
    }

    /// Adds one bias value per channel of a rank-4 tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::BiasAdd { x, b: bias })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.record(Op::LeakyRelu { x, slope })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar { x, c })
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sqrt(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Mean(x))
    }

    /// Reduces `[B, ...]` to `[B]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumPerSample(x))
    }

    /// Mean over non-overlapping `h×h` tiles of a rank-4 tensor.
    pub fn tile_mean(&mut self, x: Var, h: usize) -> Result<Var> {
        self.record(Op::TileMean { x, h })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape { x, shape: shape.to_vec() })
    }

    /// `[B, ...]` to `[B, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let b = *shape.first().ok_or_else(|| shape_err("flatten", "rank-0 input"))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// `x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::Linear { x, w, b })
    }

    /// Batch-mean softmax cross-entropy of `[B, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Recomputes every node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.nodes.get(output.0).ok_or(TensorError::UnknownVar {
            index: output.0,
            len: self.nodes.len(),
        })?;
        if !out.value.is_scalar() {
            return Err(TensorError::NonScalar {
                shape: out.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Accumulates into the gradient buffer of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, stride, pad } => {
                let (xv, kv) = (val(x), val(k));
                let (xs, ks, geom) = conv_geom(xv, kv, stride, pad).expect("validated at record time");
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let in_len = xs[1] * xs[2] * xs[3];
                let out_len = ks[0] * cols_n;
                let mut cols = vec![0.0; rows * cols_n];
                acc(k, &mut |dk| {
                    for n in 0..xs[0] {
                        kernels::im2col(&geom, &xv.data()[n * in_len..(n + 1) * in_len], &mut cols);
                        kernels::matmul_nt(ks[0], cols_n, rows, &g[n * out_len..(n + 1) * out_len], &cols, dk, true);
                    }
                });
                acc(b, &mut |db| {
                    for (i, plane) in g.chunks_exact(cols_n).enumerate() {
                        db[i % ks[0]] += plane.iter().sum::<f64>();
                    }
                });
                acc(x, &mut |dx| {
                    for n in 0..xs[0] {
                        kernels::matmul_tn(rows, ks[0], cols_n, kv.data(), &g[n * out_len..(n + 1) * out_len], &mut cols, false);
                        kernels::col2im(&geom, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                });
            }
            Op::ConvTranspose2d { x, k, stride, pad } => {
                let (xv, kv) = (val(x), val(k));
                let (xs, ks, geom) = conv_t_geom(xv, kv, stride, pad).expect("validated at record time");
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let out_len = ks[1] * geom.h * geom.w;
                let in_len = xs[1] * cols_n;
                let mut gcols = vec![0.0; rows * cols_n * xs[0]];
                for (n, dst) in gcols.chunks_exact_mut(rows * cols_n).enumerate() {
                    kernels::im2col(&geom, &g[n * out_len..(n + 1) * out_len], dst);
                }
                acc(k, &mut |dk| {
                    for (n, gc) in gcols.chunks_exact(rows * cols_n).enumerate() {
                        kernels::matmul_nt(xs[1], cols_n, rows, &xv.data()[n * in_len..(n + 1) * in_len], gc, dk, true);
                    }
                });
                acc(x, &mut |dx| {
                    for (n, gc) in gcols.chunks_exact(rows * cols_n).enumerate() {
                        kernels::matmul(xs[1], rows, cols_n, kv.data(), gc, &mut dx[n * in_len..(n + 1) * in_len], true);
                    }
                });
            }
            Op::BiasAdd { x, b } => {
                let xs = val(x).shape();
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                acc(x, &mut |dx| add_into(dx, g));
                acc(b, &mut |db| {
                    for (i, chunk) in g.chunks_exact(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(x).data();
                acc(x, &mut |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(x).data();
                acc(x, &mut |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += if xi > 0.0 { gi } else { slope * gi };
                    }
                });
            }
            Op::Add(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(a, &mut |da| {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(a, &mut |da| {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi / bi;
                    }
                });
                acc(b, &mut |db| {
                    for (((d, gi), ai), bi) in db.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::Scale { x, c } => acc(x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi)),
            Op::AddScalar { x, .. } | Op::Reshape { x, .. } => acc(x, &mut |dx| add_into(dx, g)),
            Op::Sqrt(x) => {
                let yv = node.value.data();
                acc(x, &mut |dx| {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gi / (2.0 * yi);
                    }
                });
            }
            Op::Sum(x) => acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = val(x).numel() as f64;
                acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumPerSample(x) => {
                let per = val(x).numel() / g.len();
                acc(x, &mut |dx| {
                    for (chunk, gi) in dx.chunks_exact_mut(per.max(1)).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gi);
                    }
                });
            }
            Op::TileMean { x, h } => {
                let xs = val(x).shape();
                let (hh, ww) = (xs[2], xs[3]);
                let tw = ww / h;
                let norm = 1.0 / (h * h) as f64;
                acc(x, &mut |dx| {
                    for (plane, gp) in dx.chunks_exact_mut(hh * ww).zip(g.chunks_exact((hh / h) * tw)) {
                        for y in 0..hh {
                            let grow = &gp[(y / h) * tw..(y / h + 1) * tw];
                            for (xi, d) in plane[y * ww..(y + 1) * ww].iter_mut().enumerate() {
                                *d += grow[xi / h] * norm;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let [batch, fan_in] = [xv.shape()[0], xv.shape()[1]];
                let fan_out = wv.shape()[0];
                acc(x, &mut |dx| kernels::matmul(batch, fan_out, fan_in, g, wv.data(), dx, true));
                acc(w, &mut |dw| kernels::matmul_tn(fan_out, batch, fan_in, g, xv.data(), dw, true));
                acc(b, &mut |db| {
                    for row in g.chunks_exact(fan_out) {
                        add_into(db, row);
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, ref labels } => {
                let xv = val(logits);
                let classes = xv.shape()[1];
                let scale = g[0] / labels.len() as f64;
                acc(logits, &mut |dx| {
                    for ((drow, row), &label) in dx.chunks_exact_mut(classes).zip(xv.data().chunks_exact(classes)).zip(labels) {
                        let lse = log_sum_exp(row);
                        for (j, (d, &v)) in drow.iter_mut().zip(row).enumerate() {
                            let p = (v - lse).exp();
                            *d += scale * (p - if j == label { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
