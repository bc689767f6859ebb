use super::kernels::{col2im, gemm, im2col, transpose, ConvGeometry};
use super::{Float, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type CustomForward<T> = dyn Fn(&Tensor<T>) -> Tensor<T> + Send + Sync;
/// `(input, output, upstream grad) -> input grad`
pub type CustomBackward<T> = dyn Fn(&Tensor<T>, &Tensor<T>, &[T]) -> Vec<T> + Send + Sync;

enum Op<T: Float> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
        batch: usize,
        out_channels: usize,
    },
    Relu(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddScalar(Var),
    Reshape(Var),
    LogSoftmax(Var),
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SumAll(Var),
    RowSum(Var),
    Stack(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Custom {
        x: Var,
        backward: Box<CustomBackward<T>>,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation and replays it in reverse.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward simply walks the node list from the loss down to index 0.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m, k] · [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Convolution of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]` -> `[B, Cout, Ho, Wo]`,
    /// lowered through [`im2col`] onto [`gemm`].
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(mismatch("conv2d", &si, &sw));
        }
        let geom = ConvGeometry {
            channels: si[1],
            height: si[2],
            width: si[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        if !geom.valid() {
            return Err(invalid(
                "conv2d",
                format!(
                    "kernel {:?} with stride {stride}, padding {padding} does not fit input {:?}",
                    sw, si
                ),
            ));
        }
        let (batch, out_channels) = (si[0], sw[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let spatial = ho * wo;
        let patch = geom.patch_len();
        let in_len = geom.channels * geom.height * geom.width;
        let mut out = vec![T::zero(); batch * out_channels * spatial];
        let mut cols = vec![T::zero(); patch * spatial];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        for b in 0..batch {
            im2col(&geom, &x[b * in_len..(b + 1) * in_len], &mut cols);
            let dst = &mut out[b * out_channels * spatial..(b + 1) * out_channels * spatial];
            gemm(out_channels, patch, spatial, w, &cols, dst);
        }
        let value = Tensor::new(vec![batch, out_channels, ho, wo], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
                batch,
                out_channels,
            },
            &[input, weight],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Non-overlapping `size × size` max pooling over `[B, C, H, W]`, floor mode.
    /// Ties resolve to the first maximum in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid(
                "max_pool2d",
                format!("expected 4-D input, got {:?}", s),
            ));
        }
        if size == 0 || s[2] < size || s[3] < size {
            return Err(invalid(
                "max_pool2d",
                format!("window {size} does not fit input {:?}", s),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / size, w / size);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        self.push("max_pool2d", value, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid(
                "global_avg_pool",
                format!("expected 4-D input, got {:?}", s),
            ));
        }
        let spatial = s[2] * s[3];
        let denom = T::from_usize(spatial).unwrap();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v) / denom)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        self.push(
            "global_avg_pool",
            value,
            Op::GlobalAvgPool { x, spatial },
            &[x],
        )
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[n]` bias along the last axis of `x`. The only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n || n == 0 {
            return Err(mismatch("add_bias", sx, sb));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, TensorError> {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| v * factor).collect(),
        )?;
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| v + c).collect(),
        )?;
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(invalid("flatten", "scalar input"));
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// `x · W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Row-wise log-softmax of a `[B, C]` matrix, computed through log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(invalid(
                "log_softmax",
                format!("expected [B, C] input, got {:?}", s),
            ));
        }
        let mut data = Vec::with_capacity(s[0] * s[1]);
        for row in self.value(x).data().chunks(s[1]) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            let lse = max + sum.ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(s, data)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// `out[i] = x[i, index[i]]` for a `[B, C]` input.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            return Err(mismatch("pick", &s, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(invalid(
                "pick",
                format!("index {bad} out of range for {} columns", s[1]),
            ));
        }
        let src = self.value(x).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &c)| src[r * s[1] + c])
            .collect();
        let value = Tensor::new(vec![index.len()], data)?;
        self.push(
            "pick",
            value,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Selects rows of a `[N, D]` matrix, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(invalid(
                "gather_rows",
                format!("expected 2-D input, got {:?}", s),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(invalid(
                "gather_rows",
                format!("row {bad} out of range for {} rows", s[0]),
            ));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(index.len() * s[1]);
        for &i in index {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![index.len(), s[1]], data)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(invalid("mean_all", "empty input"));
        }
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// `[R, D] -> [R]`
    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(invalid(
                "row_sum",
                format!("expected 2-D input, got {:?}", s),
            ));
        }
        let data = if s[1] == 0 {
            vec![T::zero(); s[0]]
        } else {
            self.value(x)
                .data()
                .chunks(s[1])
                .map(|r| r.iter().fold(T::zero(), |acc, &v| acc + v))
                .collect()
        };
        let value = Tensor::new(vec![s[0]], data)?;
        self.push("row_sum", value, Op::RowSum(x), &[x])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn batch_stack(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| invalid("batch_stack", "empty batch"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(xs.len() * inner.iter().product::<usize>());
        for &v in xs {
            if self.shape(v) != inner.as_slice() {
                return Err(mismatch("batch_stack", &inner, self.shape(v)));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend(inner);
        let value = Tensor::new(shape, data)?;
        self.push("batch_stack", value, Op::Stack(xs.to_vec()), xs)
    }

    /// Scales each row of a `[B, D]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(invalid(
                "l2_normalize_rows",
                format!("expected [B, D] input, got {:?}", s),
            ));
        }
        let eps = T::from_f64_lossy(1e-12);
        let mut norms = Vec::with_capacity(s[0]);
        let mut data = Vec::with_capacity(s[0] * s[1]);
        for row in self.value(x).data().chunks(s[1]) {
            let n = (row.iter().fold(T::zero(), |acc, &v| acc + v * v) + eps).sqrt();
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(s, data)?;
        self.push(
            "l2_normalize_rows",
            value,
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Element-wise op with a caller-supplied vector-Jacobian product.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: &CustomForward<T>,
        backward: Box<CustomBackward<T>>,
    ) -> Result<Var, TensorError> {
        let value = forward(self.value(x));
        self.push("custom", value, Op::Custom { x, backward }, &[x])
    }

    /// Drops accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    /// Populates `d loss / d leaf` for every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_with(loss, Tensor::full(&shape, T::one()))
    }

    /// Vector-Jacobian product seeded with `upstream` at `output`.
    pub fn backward_with(&mut self, output: Var, upstream: Tensor<T>) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRan);
        }
        if upstream.shape() != self.shape(output) {
            return Err(mismatch("backward", upstream.shape(), self.shape(output)));
        }
        if !self.nodes[output.0].requires_grad {
            return Err(TensorError::DisconnectedLoss);
        }
        self.backward_done = true;
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[output.0] = Some(upstream.into_data());

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, node, &g);
        }

        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn propagate<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if rg(*a) {
                let bt = transpose(k, n, val(*b).data());
                let mut da = vec![T::zero(); m * k];
                gemm(m, n, k, g, &bt, &mut da);
                accumulate(nodes, grads, *a, da);
            }
            if rg(*b) {
                let at = transpose(m, k, val(*a).data());
                let mut db = vec![T::zero(); k * n];
                gemm(k, m, n, &at, g, &mut db);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Conv2d {
            input,
            weight,
            geom,
            batch,
            out_channels,
        } => {
            let spatial = geom.out_height() * geom.out_width();
            let patch = geom.patch_len();
            let in_len = geom.channels * geom.height * geom.width;
            let x = val(*input).data();
            let w = val(*weight).data();
            let wt = transpose(*out_channels, patch, w);
            let mut dw = vec![T::zero(); out_channels * patch];
            let mut dx = if rg(*input) {
                vec![T::zero(); x.len()]
            } else {
                Vec::new()
            };
            let mut cols = vec![T::zero(); patch * spatial];
            let mut dcols = vec![T::zero(); patch * spatial];
            for b in 0..*batch {
                let gb = &g[b * out_channels * spatial..(b + 1) * out_channels * spatial];
                if rg(*weight) {
                    im2col(geom, &x[b * in_len..(b + 1) * in_len], &mut cols);
                    let cols_t = transpose(patch, spatial, &cols);
                    gemm(*out_channels, spatial, patch, gb, &cols_t, &mut dw);
                }
                if rg(*input) {
                    dcols.fill(T::zero());
                    gemm(patch, *out_channels, spatial, &wt, gb, &mut dcols);
                    col2im(geom, &dcols, &mut dx[b * in_len..(b + 1) * in_len]);
                }
            }
            if rg(*weight) {
                accumulate(nodes, grads, *weight, dw);
            }
            if rg(*input) {
                accumulate(nodes, grads, *input, dx);
            }
        }
        Op::Relu(x) => {
            let dx = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::MaxPool2d { x, argmax } => {
            let mut dx = vec![T::zero(); val(*x).len()];
            for (&src, &gi) in argmax.iter().zip(g) {
                dx[src] = dx[src] + gi;
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::GlobalAvgPool { x, spatial } => {
            let denom = T::from_usize(*spatial).unwrap();
            let dx = g
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi / denom, *spatial))
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if rg(*a) {
                accumulate(
                    nodes,
                    grads,
                    *a,
                    g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect(),
                );
            }
            if rg(*b) {
                accumulate(
                    nodes,
                    grads,
                    *b,
                    g.iter().zip(va).map(|(&gi, &x)| gi * x).collect(),
                );
            }
        }
        Op::AddBias { x, bias } => {
            accumulate(nodes, grads, *x, g.to_vec());
            if rg(*bias) {
                let n = val(*bias).len();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (d, &gi) in db.iter_mut().zip(row) {
                        *d = *d + gi;
                    }
                }
                accumulate(nodes, grads, *bias, db);
            }
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, g.iter().map(|&gi| gi * *factor).collect());
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            accumulate(nodes, grads, *x, g.to_vec());
        }
        Op::LogSoftmax(x) => {
            let c = val(*x).shape()[1];
            let out = node.value.data();
            let mut dx = Vec::with_capacity(out.len());
            for (orow, grow) in out.chunks(c).zip(g.chunks(c)) {
                let gsum = grow.iter().fold(T::zero(), |acc, &v| acc + v);
                dx.extend(orow.iter().zip(grow).map(|(&o, &gi)| gi - o.exp() * gsum));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Pick { x, index } => {
            let c = val(*x).shape()[1];
            let mut dx = vec![T::zero(); val(*x).len()];
            for (r, (&col, &gi)) in index.iter().zip(g).enumerate() {
                dx[r * c + col] = dx[r * c + col] + gi;
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::GatherRows { x, index } => {
            let d = val(*x).shape()[1];
            let mut dx = vec![T::zero(); val(*x).len()];
            for (&row, grow) in index.iter().zip(g.chunks(d.max(1))) {
                for (dst, &gi) in dx[row * d..(row + 1) * d].iter_mut().zip(grow) {
                    *dst = *dst + gi;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::SumAll(x) => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).len()]);
        }
        Op::RowSum(x) => {
            let d = val(*x).shape()[1];
            let dx = g
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi, d))
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Stack(xs) => {
            let inner = g.len() / xs.len();
            for (v, chunk) in xs.iter().zip(g.chunks(inner.max(1))) {
                accumulate(nodes, grads, *v, chunk.to_vec());
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let d = val(*x).shape()[1];
            let y = node.value.data();
            let mut dx = Vec::with_capacity(y.len());
            for ((yrow, grow), &n) in y.chunks(d).zip(g.chunks(d)).zip(norms) {
                let dot = yrow
                    .iter()
                    .zip(grow)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                dx.extend(yrow.iter().zip(grow).map(|(&yi, &gi)| (gi - yi * dot) / n));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Custom { x, backward } => {
            let dx = backward(val(*x), &node.value, g);
            accumulate(nodes, grads, *x, dx);
        }
    }
}
