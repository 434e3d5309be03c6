//! Reverse-mode automatic differentiation over 2D scalar fields.
//!
//! Forward values are computed eagerly when an operation is recorded; the
//! tape is a flat, topologically ordered list so the reverse sweep is a single
//! backwards pass over it.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A dense row-major `height x width` field of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "field dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "Field2D::new",
                expected: format!("{} values", height * width),
                found: format!("{} values", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "field element {i} is {}",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "field dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "field dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped fields.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Replicate-padded correlation with an odd-sized kernel.
    pub fn convolve(&self, kernel: &Kernel) -> Self {
        let (ry, rx) = (kernel.height / 2, kernel.width / 2);
        Self::from_fn(self.height, self.width, |y, x| {
            let mut acc = 0.0;
            for ky in 0..kernel.height {
                let sy = clamp_index(y as isize + ky as isize - ry as isize, self.height);
                for kx in 0..kernel.width {
                    let w = kernel.weights[ky * kernel.width + kx];
                    if w != 0.0 {
                        let sx = clamp_index(x as isize + kx as isize - rx as isize, self.width);
                        acc += w * self.get(sy, sx);
                    }
                }
            }
            acc
        })
    }

    /// Bilinear sample at a real-valued position, clamped to the border.
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let sy = AxisSample::new(y, self.height);
        let sx = AxisSample::new(x, self.width);
        self.bilinear(&sy, &sx)
    }

    #[inline]
    fn bilinear(&self, sy: &AxisSample, sx: &AxisSample) -> f64 {
        let top = (1.0 - sx.frac) * self.get(sy.lo, sx.lo) + sx.frac * self.get(sy.lo, sx.hi);
        let bottom = (1.0 - sx.frac) * self.get(sy.hi, sx.lo) + sx.frac * self.get(sy.hi, sx.hi);
        (1.0 - sy.frac) * top + sy.frac * bottom
    }

    /// Backward warp: `out(y, x) = self(y + v(y, x), x + u(y, x))`.
    pub fn warp(&self, u: &Field2D, v: &Field2D) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.sample(y as f64 + v.get(y, x), x as f64 + u.get(y, x))
        })
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Interpolation cell along one axis for a border-clamped bilinear sample.
#[derive(Clone, Copy, Debug)]
struct AxisSample {
    lo: usize,
    hi: usize,
    frac: f64,
    clamped: bool,
}

impl AxisSample {
    fn new(coord: f64, n: usize) -> Self {
        let max = (n - 1) as f64;
        let clamped = coord < 0.0 || coord > max;
        if n == 1 {
            return Self {
                lo: 0,
                hi: 0,
                frac: 0.0,
                clamped,
            };
        }
        let c = coord.clamp(0.0, max);
        let lo = (c.floor() as usize).min(n - 2);
        Self {
            lo,
            hi: lo + 1,
            frac: c - lo as f64,
            clamped,
        }
    }
}

/// Fixed odd-sized correlation kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if height % 2 == 0 || width % 2 == 0 || weights.len() != height * width {
            return Err(Error::invalid(format!(
                "kernel must be odd-sized with matching weights, got {height}x{width} with {} weights",
                weights.len()
            )));
        }
        Ok(Self {
            height,
            width,
            weights,
        })
    }

    /// Horizontal central difference `[-1/2, 0, 1/2]`.
    pub fn central_dx() -> Self {
        Self::new(1, 3, vec![-0.5, 0.0, 0.5]).unwrap()
    }

    /// Vertical central difference.
    pub fn central_dy() -> Self {
        Self::new(3, 1, vec![-0.5, 0.0, 0.5]).unwrap()
    }

    /// Separable binomial `[1, 2, 1] x [1, 2, 1] / 16`.
    pub fn gaussian3() -> Self {
        let k = [1.0, 2.0, 1.0];
        let w = k.iter().flat_map(|a| k.iter().map(move |b| a * b / 16.0)).collect();
        Self::new(3, 3, w).unwrap()
    }

    /// Separable binomial `[1, 4, 6, 4, 1] x [1, 4, 6, 4, 1] / 256`.
    pub fn gaussian5() -> Self {
        let k = [1.0, 4.0, 6.0, 4.0, 1.0];
        let w = k.iter().flat_map(|a| k.iter().map(move |b| a * b / 256.0)).collect();
        Self::new(5, 5, w).unwrap()
    }

    /// Neighbourhood average used by the Horn-Schunck iteration (centre weight 0).
    pub fn horn_schunck_average() -> Self {
        let (e, c) = (1.0 / 6.0, 1.0 / 12.0);
        Self::new(3, 3, vec![c, e, c, e, 0.0, e, c, e, c]).unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Shape of a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Field { height: usize, width: usize },
    Scalar,
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Field { height, width } => write!(f, "{height}x{width}"),
            Shape::Scalar => f.write_str("scalar"),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node {
    id: usize,
    shape: Shape,
}

impl Node {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    fn dims(&self) -> (usize, usize) {
        match self.shape {
            Shape::Field { height, width } => (height, width),
            Shape::Scalar => (1, 1),
        }
    }
}

/// Primitive operations understood by the tape.
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Sub,
    PointwiseMul,
    ScalarMul(f64),
    Abs,
    Square,
    /// `1 / x`; every input element must be non-zero.
    Reciprocal,
    SumReduce,
    MaskedSumReduce(Arc<Vec<bool>>),
    ConvFixedKernel(Arc<Kernel>),
    /// Inputs `[image, u, v]`; samples `image` at `(y + v, x + u)`.
    BilinearWarp,
    /// Keeps every second row and column, starting at 0.
    Downsample2,
    /// Bilinear upsampling to the given shape; output pixel `p` reads input `p / 2`.
    Upsample2 { height: usize, width: usize },
    /// Align-corners bilinear resize to an arbitrary shape.
    Resize { height: usize, width: usize },
    /// Clamp to `[lo, hi]`; the adjoint is zero wherever the clamp is active.
    ClampStopgrad { lo: f64, hi: f64 },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::PointwiseMul => "pointwise_mul",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Reciprocal => "reciprocal",
            OpKind::SumReduce => "sum_reduce",
            OpKind::MaskedSumReduce(_) => "masked_sum_reduce",
            OpKind::ConvFixedKernel(_) => "conv_fixed_kernel",
            OpKind::BilinearWarp => "bilinear_warp",
            OpKind::Downsample2 => "downsample2",
            OpKind::Upsample2 { .. } => "upsample2",
            OpKind::Resize { .. } => "resize",
            OpKind::ClampStopgrad { .. } => "clamp_stopgrad",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::PointwiseMul => 2,
            OpKind::BilinearWarp => 3,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Apply { kind: OpKind, inputs: Vec<Node> },
}

#[derive(Debug)]
struct Entry {
    op: Op,
    value: Field2D,
    requires_grad: bool,
}

/// Linear record of eagerly evaluated operations.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, op: Op, value: Field2D, shape: Shape, requires_grad: bool) -> Node {
        let id = self.entries.len();
        self.entries.push(Entry {
            op,
            value,
            requires_grad,
        });
        Node { id, shape }
    }

    fn field_shape(f: &Field2D) -> Shape {
        Shape::Field {
            height: f.height(),
            width: f.width(),
        }
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Field2D) -> Node {
        let shape = Self::field_shape(&value);
        self.push(Op::Leaf, value, shape, true)
    }

    /// Registers a constant field; no adjoint flows into it.
    pub fn constant(&mut self, value: Field2D) -> Node {
        let shape = Self::field_shape(&value);
        self.push(Op::Constant, value, shape, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Node {
        self.push(Op::Constant, Field2D::filled(1, 1, value), Shape::Scalar, false)
    }

    fn check(&self, node: Node) -> Result<()> {
        if node.id >= self.entries.len() {
            return Err(Error::UnknownNode {
                id: node.id,
                len: self.entries.len(),
            });
        }
        Ok(())
    }

    /// Forward value of a node (scalars are 1x1 fields).
    pub fn value(&self, node: Node) -> &Field2D {
        &self.entries[node.id].value
    }

    pub fn scalar_value(&self, node: Node) -> f64 {
        self.entries[node.id].value.data[0]
    }

    /// Records `kind` applied to `inputs`, evaluating it immediately.
    pub fn record(&mut self, kind: OpKind, inputs: &[Node]) -> Result<Node> {
        let name = kind.name();
        if inputs.len() != kind.arity() {
            return Err(Error::ShapeMismatch {
                op: name,
                expected: format!("{} inputs", kind.arity()),
                found: format!("{} inputs", inputs.len()),
            });
        }
        for &n in inputs {
            self.check(n)?;
        }
        let mismatch = |expected: String, found: String| Error::ShapeMismatch {
            op: name,
            expected,
            found,
        };
        let a = inputs[0];
        let va = &self.entries[a.id].value;
        let (value, shape) = match &kind {
            OpKind::Add | OpKind::Sub | OpKind::PointwiseMul => {
                let b = inputs[1];
                if a.shape != b.shape {
                    return Err(mismatch(a.shape.to_string(), b.shape.to_string()));
                }
                let vb = &self.entries[b.id].value;
                let v = match kind {
                    OpKind::Add => va.zip_map(vb, |x, y| x + y),
                    OpKind::Sub => va.zip_map(vb, |x, y| x - y),
                    _ => va.zip_map(vb, |x, y| x * y),
                };
                (v, a.shape)
            }
            OpKind::ScalarMul(c) => (va.map(|x| c * x), a.shape),
            OpKind::Abs => (va.map(f64::abs), a.shape),
            OpKind::Square => (va.map(|x| x * x), a.shape),
            OpKind::Reciprocal => {
                if let Some(i) = va.data.iter().position(|&x| x == 0.0) {
                    return Err(Error::invalid(format!(
                        "reciprocal: input element {i} is zero"
                    )));
                }
                (va.map(|x| 1.0 / x), a.shape)
            }
            OpKind::SumReduce => (Field2D::filled(1, 1, va.sum()), Shape::Scalar),
            OpKind::MaskedSumReduce(mask) => {
                if mask.len() != va.len() || a.shape == Shape::Scalar {
                    return Err(mismatch(
                        format!("field with {} elements", mask.len()),
                        a.shape.to_string(),
                    ));
                }
                let s = va
                    .data
                    .iter()
                    .zip(mask.iter())
                    .filter(|(_, &m)| m)
                    .map(|(x, _)| x)
                    .sum();
                (Field2D::filled(1, 1, s), Shape::Scalar)
            }
            OpKind::ConvFixedKernel(k) => {
                if a.shape == Shape::Scalar {
                    return Err(mismatch("field".into(), "scalar".into()));
                }
                (va.convolve(k), a.shape)
            }
            OpKind::BilinearWarp => {
                let (u, v) = (inputs[1], inputs[2]);
                if a.shape == Shape::Scalar || u.shape != a.shape || v.shape != a.shape {
                    return Err(mismatch(
                        format!("image, u, v all {}", a.shape),
                        format!("{}, {}, {}", a.shape, u.shape, v.shape),
                    ));
                }
                let v = va.warp(&self.entries[u.id].value, &self.entries[v.id].value);
                (v, a.shape)
            }
            OpKind::Downsample2 => {
                if a.shape == Shape::Scalar {
                    return Err(mismatch("field".into(), "scalar".into()));
                }
                let (h, w) = ((va.height + 1) / 2, (va.width + 1) / 2);
                let v = Field2D::from_fn(h, w, |y, x| va.get(2 * y, 2 * x));
                (
                    v,
                    Shape::Field {
                        height: h,
                        width: w,
                    },
                )
            }
            OpKind::Upsample2 { height, width } => {
                let (h, w) = (*height, *width);
                if a.shape == Shape::Scalar || (h + 1) / 2 != va.height || (w + 1) / 2 != va.width
                {
                    return Err(mismatch(
                        format!("{}x{}", (h + 1) / 2, (w + 1) / 2),
                        a.shape.to_string(),
                    ));
                }
                let v = Field2D::from_fn(h, w, |y, x| va.sample(y as f64 / 2.0, x as f64 / 2.0));
                (
                    v,
                    Shape::Field {
                        height: h,
                        width: w,
                    },
                )
            }
            OpKind::Resize { height, width } => {
                let (h, w) = (*height, *width);
                if a.shape == Shape::Scalar || h == 0 || w == 0 {
                    return Err(mismatch("field and positive target".into(), a.shape.to_string()));
                }
                let (fy, fx) = resize_factors(va.shape(), (h, w));
                let v = Field2D::from_fn(h, w, |y, x| va.sample(y as f64 * fy, x as f64 * fx));
                (
                    v,
                    Shape::Field {
                        height: h,
                        width: w,
                    },
                )
            }
            OpKind::ClampStopgrad { lo, hi } => (va.map(|x| x.clamp(*lo, *hi)), a.shape),
        };
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|n| self.entries[n.id].requires_grad);
        Ok(self.push(
            Op::Apply {
                kind,
                inputs: inputs.to_vec(),
            },
            value,
            shape,
            requires_grad,
        ))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.record(OpKind::PointwiseMul, &[a, b])
    }

    pub fn scale(&mut self, a: Node, c: f64) -> Result<Node> {
        self.record(OpKind::ScalarMul(c), &[a])
    }

    pub fn abs(&mut self, a: Node) -> Result<Node> {
        self.record(OpKind::Abs, &[a])
    }

    pub fn square(&mut self, a: Node) -> Result<Node> {
        self.record(OpKind::Square, &[a])
    }

    pub fn reciprocal(&mut self, a: Node) -> Result<Node> {
        self.record(OpKind::Reciprocal, &[a])
    }

    pub fn sum(&mut self, a: Node) -> Result<Node> {
        self.record(OpKind::SumReduce, &[a])
    }

    pub fn masked_sum(&mut self, a: Node, mask: Arc<Vec<bool>>) -> Result<Node> {
        self.record(OpKind::MaskedSumReduce(mask), &[a])
    }

    pub fn conv(&mut self, a: Node, kernel: Arc<Kernel>) -> Result<Node> {
        self.record(OpKind::ConvFixedKernel(kernel), &[a])
    }

    pub fn warp(&mut self, image: Node, u: Node, v: Node) -> Result<Node> {
        self.record(OpKind::BilinearWarp, &[image, u, v])
    }

    /// Reverse sweep from a scalar `loss`, returning `d loss / d node` for each
    /// node in `wrt` (zeros for nodes the loss does not depend on).
    pub fn backward(&self, loss: Node, wrt: &[Node]) -> Result<Vec<Field2D>> {
        self.check(loss)?;
        if loss.shape != Shape::Scalar {
            return Err(Error::NotScalar(loss.id));
        }
        for &n in wrt {
            self.check(n)?;
        }
        let mut adj: Vec<Option<Field2D>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(Field2D::filled(1, 1, 1.0));
        let stop = wrt.iter().map(|n| n.id).min().unwrap_or(loss.id);

        for id in (stop..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if let Op::Apply { kind, inputs } = &self.entries[id].op {
                self.propagate(kind, inputs, id, &g, &mut adj);
            }
            adj[id] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|n| {
                adj.get(n.id).cloned().flatten().unwrap_or_else(|| {
                    let (h, w) = n.dims();
                    Field2D::zeros(h, w)
                })
            })
            .collect())
    }

    fn propagate(
        &self,
        kind: &OpKind,
        inputs: &[Node],
        out_id: usize,
        g: &Field2D,
        adj: &mut [Option<Field2D>],
    ) {
        let needs = |n: &Node| self.entries[n.id].requires_grad;
        let val = |n: &Node| &self.entries[n.id].value;
        let send = |n: Node, contrib: Field2D, adj: &mut [Option<Field2D>]| match &mut adj
            [n.id]
        {
            Some(acc) => acc.accumulate(&contrib),
            slot @ None => *slot = Some(contrib),
        };

        match kind {
            OpKind::Add | OpKind::Sub => {
                if needs(&inputs[0]) {
                    send(inputs[0], g.clone(), adj);
                }
                if needs(&inputs[1]) {
                    let c = if matches!(kind, OpKind::Sub) {
                        g.map(|x| -x)
                    } else {
                        g.clone()
                    };
                    send(inputs[1], c, adj);
                }
            }
            OpKind::PointwiseMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs(&a) {
                    send(a, g.zip_map(val(&b), |g, y| g * y), adj);
                }
                if needs(&b) {
                    send(b, g.zip_map(val(&a), |g, x| g * x), adj);
                }
            }
            OpKind::ScalarMul(c) => {
                if needs(&inputs[0]) {
                    send(inputs[0], g.map(|x| c * x), adj);
                }
            }
            OpKind::Abs => {
                if needs(&inputs[0]) {
                    send(inputs[0], g.zip_map(val(&inputs[0]), |g, x| g * sign(x)), adj);
                }
            }
            OpKind::Square => {
                if needs(&inputs[0]) {
                    send(inputs[0], g.zip_map(val(&inputs[0]), |g, x| 2.0 * g * x), adj);
                }
            }
            OpKind::Reciprocal => {
                if needs(&inputs[0]) {
                    let out = &self.entries[out_id].value;
                    send(inputs[0], g.zip_map(out, |g, r| -g * r * r), adj);
                }
            }
            OpKind::SumReduce => {
                if needs(&inputs[0]) {
                    let (h, w) = val(&inputs[0]).shape();
                    send(inputs[0], Field2D::filled(h, w, g.data[0]), adj);
                }
            }
            OpKind::MaskedSumReduce(mask) => {
                if needs(&inputs[0]) {
                    let (h, w) = val(&inputs[0]).shape();
                    let s = g.data[0];
                    let data = mask.iter().map(|&m| if m { s } else { 0.0 }).collect();
                    send(
                        inputs[0],
                        Field2D {
                            height: h,
                            width: w,
                            data,
                        },
                        adj,
                    );
                }
            }
            OpKind::ConvFixedKernel(k) => {
                if needs(&inputs[0]) {
                    send(inputs[0], conv_adjoint(g, k), adj);
                }
            }
            OpKind::BilinearWarp => {
                let (img, u, v) = (inputs[0], inputs[1], inputs[2]);
                let (gi, gu, gv) = warp_adjoint(g, val(&img), val(&u), val(&v), needs(&img));
                if let Some(gi) = gi {
                    send(img, gi, adj);
                }
                if needs(&u) {
                    send(u, gu, adj);
                }
                if needs(&v) {
                    send(v, gv, adj);
                }
            }
            OpKind::Downsample2 => {
                if needs(&inputs[0]) {
                    let (h, w) = val(&inputs[0]).shape();
                    let mut out = Field2D::zeros(h, w);
                    for y in 0..g.height {
                        for x in 0..g.width {
                            out.set(2 * y, 2 * x, g.get(y, x));
                        }
                    }
                    send(inputs[0], out, adj);
                }
            }
            OpKind::Upsample2 { .. } => {
                if needs(&inputs[0]) {
                    let (h, w) = val(&inputs[0]).shape();
                    send(inputs[0], resample_adjoint(g, (h, w), (0.5, 0.5)), adj);
                }
            }
            OpKind::Resize { .. } => {
                if needs(&inputs[0]) {
                    let (h, w) = val(&inputs[0]).shape();
                    let f = resize_factors((h, w), g.shape());
                    send(inputs[0], resample_adjoint(g, (h, w), f), adj);
                }
            }
            OpKind::ClampStopgrad { lo, hi } => {
                if needs(&inputs[0]) {
                    send(
                        inputs[0],
                        g.zip_map(val(&inputs[0]), |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
                        adj,
                    );
                }
            }
        }
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn resize_factors(from: (usize, usize), to: (usize, usize)) -> (f64, f64) {
    let f = |a: usize, b: usize| {
        if b > 1 {
            (a - 1) as f64 / (b - 1) as f64
        } else {
            0.0
        }
    };
    (f(from.0, to.0), f(from.1, to.1))
}

fn conv_adjoint(g: &Field2D, k: &Kernel) -> Field2D {
    let (h, w) = g.shape();
    let (ry, rx) = (k.height / 2, k.width / 2);
    let mut out = Field2D::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let gv = g.get(y, x);
            if gv == 0.0 {
                continue;
            }
            for ky in 0..k.height {
                let sy = clamp_index(y as isize + ky as isize - ry as isize, h);
                for kx in 0..k.width {
                    let wgt = k.weights[ky * k.width + kx];
                    if wgt != 0.0 {
                        let sx = clamp_index(x as isize + kx as isize - rx as isize, w);
                        out.data[sy * w + sx] += wgt * gv;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `out(p) = in.sample(p.y * fy, p.x * fx)`.
fn resample_adjoint(g: &Field2D, in_shape: (usize, usize), (fy, fx): (f64, f64)) -> Field2D {
    let (h, w) = in_shape;
    let mut out = Field2D::zeros(h, w);
    for y in 0..g.height {
        let sy = AxisSample::new(y as f64 * fy, h);
        for x in 0..g.width {
            let sx = AxisSample::new(x as f64 * fx, w);
            scatter_bilinear(&mut out, &sy, &sx, g.get(y, x));
        }
    }
    out
}

#[inline]
fn scatter_bilinear(out: &mut Field2D, sy: &AxisSample, sx: &AxisSample, gv: f64) {
    let w = out.width;
    out.data[sy.lo * w + sx.lo] += (1.0 - sy.frac) * (1.0 - sx.frac) * gv;
    out.data[sy.lo * w + sx.hi] += (1.0 - sy.frac) * sx.frac * gv;
    out.data[sy.hi * w + sx.lo] += sy.frac * (1.0 - sx.frac) * gv;
    out.data[sy.hi * w + sx.hi] += sy.frac * sx.frac * gv;
}

fn warp_adjoint(
    g: &Field2D,
    img: &Field2D,
    u: &Field2D,
    v: &Field2D,
    want_image: bool,
) -> (Option<Field2D>, Field2D, Field2D) {
    let (h, w) = img.shape();
    let mut gi = want_image.then(|| Field2D::zeros(h, w));
    let mut gu = Field2D::zeros(h, w);
    let mut gv = Field2D::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let gval = g.get(y, x);
            if gval == 0.0 {
                continue;
            }
            let sy = AxisSample::new(y as f64 + v.get(y, x), h);
            let sx = AxisSample::new(x as f64 + u.get(y, x), w);
            if let Some(gi) = gi.as_mut() {
                scatter_bilinear(gi, &sy, &sx, gval);
            }
            let (i00, i01) = (img.get(sy.lo, sx.lo), img.get(sy.lo, sx.hi));
            let (i10, i11) = (img.get(sy.hi, sx.lo), img.get(sy.hi, sx.hi));
            if !sx.clamped && sx.lo != sx.hi {
                let d = (1.0 - sy.frac) * (i01 - i00) + sy.frac * (i11 - i10);
                gu.data[y * w + x] = gval * d;
            }
            if !sy.clamped && sy.lo != sy.hi {
                let d = (1.0 - sx.frac) * (i10 - i00) + sx.frac * (i11 - i01);
                gv.data[y * w + x] = gval * d;
            }
        }
    }
    (gi, gu, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Field2D {
        Field2D::from_fn(h, w, |_, _| rng.random_range(lo..hi))
    }

    /// Central finite differences of `f` with respect to every element of `x`.
    fn finite_diff(x: &Field2D, step: f64, f: impl Fn(&Field2D) -> f64) -> Field2D {
        let mut grad = Field2D::zeros(x.height(), x.width());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        grad
    }

    fn rel_err(a: &Field2D, b: &Field2D) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.data().iter().map(|y| y * y).sum();
        num.sqrt() / den.sqrt().max(1e-12)
    }

    /// Builds `sum(weights * op(x))` on a fresh tape and returns (value, grad).
    fn check_unary(
        x: &Field2D,
        weights: &Field2D,
        build: impl Fn(&mut Tape, Node) -> Node,
    ) -> (Field2D, Field2D) {
        let eval = |x: &Field2D| {
            let mut t = Tape::new();
            let xn = t.leaf(x.clone());
            let y = build(&mut t, xn);
            let (h, w) = t.value(y).shape();
            let wn = if y.shape() == Shape::Scalar {
                t.scalar_constant(weights.get(0, 0))
            } else {
                t.constant(Field2D::from_fn(h, w, |r, c| {
                    weights.get(r % weights.height(), c % weights.width())
                }))
            };
            let p = t.mul(y, wn).unwrap();
            let s = t.sum(p).unwrap();
            (t, xn, s)
        };
        let (t, xn, s) = eval(x);
        let grad = t.backward(s, &[xn]).unwrap().remove(0);
        let fd = finite_diff(x, 1e-4, |x| {
            let (t, _, s) = eval(x);
            t.scalar_value(s)
        });
        (grad, fd)
    }

    #[test]
    fn add_forward_is_elementwise() {
        let mut t = Tape::new();
        let a = t.leaf(Field2D::from_fn(2, 3, |y, x| (y * 3 + x) as f64));
        let b = t.constant(Field2D::filled(2, 3, 0.5));
        let c = t.add(a, b).unwrap();
        let expected: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect();
        assert_eq!(t.value(c).data(), &expected[..]);
    }

    #[test]
    fn sum_of_ones() {
        let mut t = Tape::new();
        let a = t.leaf(Field2D::filled(2, 2, 1.0));
        let s = t.sum(a).unwrap();
        assert_eq!(s.shape(), Shape::Scalar);
        assert_eq!(t.scalar_value(s), 4.0);
    }

    #[test]
    fn zero_warp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_field(&mut rng, 5, 7, 0.0, 1.0);
        let mut t = Tape::new();
        let i = t.leaf(img.clone());
        let u = t.constant(Field2D::zeros(5, 7));
        let v = t.constant(Field2D::zeros(5, 7));
        let w = t.warp(i, u, v).unwrap();
        assert_eq!(t.value(w), &img);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = Tape::new();
        let a = t.leaf(Field2D::zeros(2, 2));
        let b = t.leaf(Field2D::zeros(3, 2));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("2x2") && err.contains("3x2"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let a = t.leaf(Field2D::zeros(2, 2));
        assert!(matches!(t.backward(a, &[a]), Err(Error::NotScalar(_))));
    }

    #[test]
    fn bilinear_form_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = random_field(&mut rng, 4, 4, -1.0, 1.0);
        let yv = random_field(&mut rng, 4, 4, -1.0, 1.0);
        let mut t = Tape::new();
        let x = t.leaf(xv);
        let y = t.leaf(yv.clone());
        let p = t.mul(x, y).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s, &[x]).unwrap();
        assert_eq!(g[0], yv);
    }

    #[test]
    fn abs_gradient_is_sign() {
        let mut t = Tape::new();
        let xv = Field2D::new(1, 4, vec![-2.0, 0.5, -0.1, 3.0]).unwrap();
        let x = t.leaf(xv);
        let a = t.abs(x).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Field2D::zeros(1, 2));
        let a = t.abs(x).unwrap();
        let s = t.sum(a).unwrap();
        assert_eq!(t.backward(s, &[x]).unwrap()[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights = random_field(&mut rng, 8, 8, -1.0, 1.0);
        let other = random_field(&mut rng, 8, 8, -1.0, 1.0);
        let x = random_field(&mut rng, 8, 8, 0.2, 1.0);
        let mask: Arc<Vec<bool>> = Arc::new((0..64).map(|i| i % 3 != 0).collect());
        let kernel = Arc::new(Kernel::new(3, 3, (0..9).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap());

        type Build = Box<dyn Fn(&mut Tape, Node) -> Node>;
        let o = other.clone();
        let o2 = other.clone();
        let cases: Vec<(&str, Build)> = vec![
            ("add", Box::new(move |t, x| { let c = t.constant(o.clone()); t.add(x, c).unwrap() })),
            ("sub", Box::new(move |t, x| { let c = t.constant(o2.clone()); t.sub(c, x).unwrap() })),
            ("mul_self", Box::new(|t, x| t.mul(x, x).unwrap())),
            ("scalar_mul", Box::new(|t, x| t.scale(x, -2.5).unwrap())),
            ("abs", Box::new(|t, x| { let c = t.scale(x, -1.0).unwrap(); t.abs(c).unwrap() })),
            ("square", Box::new(|t, x| t.square(x).unwrap())),
            ("reciprocal", Box::new(|t, x| t.reciprocal(x).unwrap())),
            ("masked_sum", {
                let m = mask.clone();
                Box::new(move |t, x| t.masked_sum(x, m.clone()).unwrap())
            }),
            ("sum", Box::new(|t, x| t.sum(x).unwrap())),
            ("conv", {
                let k = kernel.clone();
                Box::new(move |t, x| t.conv(x, k.clone()).unwrap())
            }),
            ("downsample2", Box::new(|t, x| t.record(OpKind::Downsample2, &[x]).unwrap())),
            ("upsample2", Box::new(|t, x| t.record(OpKind::Upsample2 { height: 15, width: 16 }, &[x]).unwrap())),
            ("resize", Box::new(|t, x| t.record(OpKind::Resize { height: 5, width: 11 }, &[x]).unwrap())),
            ("clamp", Box::new(|t, x| t.record(OpKind::ClampStopgrad { lo: 0.45, hi: 0.8 }, &[x]).unwrap())),
        ];
        for (name, build) in cases {
            let (g, fd) = check_unary(&x, &weights, build);
            let e = rel_err(&g, &fd);
            assert!(e < 1e-4, "{name}: relative error {e}");
        }
    }

    #[test]
    fn warp_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_field(&mut rng, 8, 8, 0.0, 1.0);
        let u = random_field(&mut rng, 8, 8, -1.3, 1.3);
        let v = random_field(&mut rng, 8, 8, -1.3, 1.3);
        let weights = random_field(&mut rng, 8, 8, -1.0, 1.0);
        let loss = |img: &Field2D, u: &Field2D, v: &Field2D| {
            let mut t = Tape::new();
            let (i, un, vn) = (t.leaf(img.clone()), t.leaf(u.clone()), t.leaf(v.clone()));
            let w = t.warp(i, un, vn).unwrap();
            let wn = t.constant(weights.clone());
            let p = t.mul(w, wn).unwrap();
            let s = t.sum(p).unwrap();
            (t, [i, un, vn], s)
        };
        let (t, nodes, s) = loss(&img, &u, &v);
        let g = t.backward(s, &nodes).unwrap();
        let f = |a: &Field2D, b: &Field2D, c: &Field2D| {
            let (t, _, s) = loss(a, b, c);
            t.scalar_value(s)
        };
        let fd_img = finite_diff(&img, 1e-4, |x| f(x, &u, &v));
        let fd_u = finite_diff(&u, 1e-4, |x| f(&img, x, &v));
        let fd_v = finite_diff(&v, 1e-4, |x| f(&img, &u, x));
        assert!(rel_err(&g[0], &fd_img) < 1e-4);
        assert!(rel_err(&g[1], &fd_u) < 1e-4, "u {}", rel_err(&g[1], &fd_u));
        assert!(rel_err(&g[2], &fd_v) < 1e-4, "v {}", rel_err(&g[2], &fd_v));
    }

    #[test]
    fn warp_coordinate_adjoint_zero_where_clamped() {
        let mut t = Tape::new();
        let img = t.constant(Field2D::from_fn(4, 4, |y, x| (y * 4 + x) as f64));
        let u = t.leaf(Field2D::filled(4, 4, 10.0));
        let v = t.leaf(Field2D::filled(4, 4, 0.25));
        let w = t.warp(img, u, v).unwrap();
        let s = t.sum(w).unwrap();
        let g = t.backward(s, &[u, v]).unwrap();
        assert_eq!(g[0].max_abs(), 0.0);
        assert!(g[1].max_abs() > 0.0);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_field(&mut rng, 8, 8, 0.1, 0.9);
        let c = random_field(&mut rng, 8, 8, -0.5, 0.5);
        let build = |x: &Field2D| {
            let mut t = Tape::new();
            let xn = t.leaf(x.clone());
            let k = Arc::new(Kernel::central_dx());
            let dx = t.conv(xn, k).unwrap();
            let cn = t.constant(c.clone());
            let u = t.scale(xn, 0.7).unwrap();
            let w = t.warp(xn, u, cn).unwrap();
            let sq = t.square(dx).unwrap();
            let p = t.mul(sq, w).unwrap();
            let d = t.sub(p, cn).unwrap();
            let a = t.abs(d).unwrap();
            let s = t.sum(a).unwrap();
            (t, xn, s)
        };
        let (t, xn, s) = build(&x);
        let g = t.backward(s, &[xn]).unwrap().remove(0);
        let fd = finite_diff(&x, 1e-4, |x| {
            let (t, _, s) = build(x);
            t.scalar_value(s)
        });
        assert!(rel_err(&g, &fd) < 1e-4, "{}", rel_err(&g, &fd));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let x = t.leaf(random_field(&mut rng, 8, 8, -1.0, 1.0));
        let sq = t.square(x).unwrap();
        let l1 = t.sum(sq).unwrap();
        let k = Arc::new(Kernel::gaussian3());
        let cv = t.conv(x, k).unwrap();
        let ab = t.abs(cv).unwrap();
        let l2 = t.sum(ab).unwrap();
        let (a, b) = (0.3, -1.7);
        let s1 = t.scale(l1, a).unwrap();
        let s2 = t.scale(l2, b).unwrap();
        let combo = t.add(s1, s2).unwrap();
        let g1 = t.backward(l1, &[x]).unwrap().remove(0);
        let g2 = t.backward(l2, &[x]).unwrap().remove(0);
        let gc = t.backward(combo, &[x]).unwrap().remove(0);
        for i in 0..gc.len() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let x = t.leaf(random_field(&mut rng, 8, 8, -1.0, 1.0));
        let u = t.scale(x, 0.3).unwrap();
        let w = t.warp(x, u, u).unwrap();
        let s = t.sum(w).unwrap();
        let a = t.backward(s, &[x]).unwrap();
        let b = t.backward(s, &[x]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Field2D::filled(2, 2, 1.0));
        let y = t.leaf(Field2D::filled(2, 2, 1.0));
        let s = t.sum(x).unwrap();
        let g = t.backward(s, &[y]).unwrap();
        assert_eq!(g[0], Field2D::zeros(2, 2));
    }
}
