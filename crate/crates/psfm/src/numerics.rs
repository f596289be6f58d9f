//! Dense tensors and reverse-mode differentiation on a Wengert tape.
//!
//! The primitive set is the smallest closed set the model graph needs:
//! matmul, transpose, reshape, concat/slice, elementwise arithmetic,
//! scalar ops, softmax, layer norm, GELU, reductions, and a per-row
//! matrix transform used by relative-pose attention. Every summation
//! runs left-to-right over row-major indices so repeated evaluations
//! are bit-identical.
//!
//! Training runs in f32; verification (finite differences) runs the
//! same graph in f64.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of all tensor math.
pub trait Real: Float + Debug + Send + Sync + 'static {}
impl<T: Float + Debug + Send + Sync + 'static> Real for T {}

/// Lift an f64 constant into the working precision.
pub fn real<F: Real>(x: f64) -> F {
    F::from(x).expect("constant representable in element type")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense row-major n-d array. Immutable once on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel] }
    }

    pub fn scalar(x: F) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend(r.iter().map(|&x| real::<F>(x)));
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// 2-d element access, row-major.
    pub fn at(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| real::<G>(x.to_f64().unwrap())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap()).collect()
    }
}

// ── Raw matmul kernels ───────────────────────────────────────────────
// Accumulation over the contracted index is always ascending, so every
// kernel is deterministic and repeat-stable.

pub(crate) fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// out(m,k) = a(m,n) · b(k,n)ᵀ
fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for j in 0..n {
                s = s + arow[j] * brow[j];
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// out(k,n) = a(m,k)ᵀ · b(m,n)
fn matmul_tn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

// ── Per-row matrix transforms ────────────────────────────────────────

/// One square matrix per row of a (rows × dim) tensor; used to inject
/// per-token camera transforms into attention.
#[derive(Debug)]
pub struct RowMats<F> {
    dim: usize,
    data: Vec<F>,
}

impl<F: Real> RowMats<F> {
    pub fn new(dim: usize, data: Vec<F>) -> Result<Self> {
        if dim == 0 || data.len() % (dim * dim) != 0 {
            return Err(Error::Shape(format!(
                "row-matrix buffer of {} elements is not a multiple of {dim}x{dim}",
                data.len()
            )));
        }
        Ok(RowMats { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / (self.dim * self.dim)
    }

    fn mat(&self, row: usize) -> &[F] {
        let sz = self.dim * self.dim;
        &self.data[row * sz..(row + 1) * sz]
    }

    /// y_r = M_r x_r (or M_rᵀ x_r when `transposed`).
    fn apply(&self, x: &[F], transposed: bool, out: &mut [F]) {
        let d = self.dim;
        for r in 0..self.rows() {
            let m = self.mat(r);
            let xr = &x[r * d..(r + 1) * d];
            let yr = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                let mut s = F::zero();
                for j in 0..d {
                    let mij = if transposed { m[j * d + i] } else { m[i * d + j] };
                    s = s + mij * xr[j];
                }
                yr[i] = s;
            }
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, F),
    AddBias { x: NodeId, bias: NodeId },
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Gelu(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    ClampMin(NodeId, F),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis { x: NodeId, axis: usize },
    RowTransform { x: NodeId, mats: Arc<RowMats<F>>, transposed: bool },
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    requires: bool,
}

/// Records forward operations; `backward` replays them in reverse.
/// Confined to one thread; gradients accumulate additively.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, op, requires });
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    /// Put a tensor on the tape. Entries must be finite.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<NodeId> {
        value.validate_finite("tape leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient, with absent treated as zero (e.g. a parameter the loss
    /// does not reach).
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<F> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![F::zero(); self.nodes[id.0].value.numel()],
        }
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Add(a, b), req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Sub(a, b), req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Mul(a, b), req))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "div")?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Div(a, b), req))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x + c).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a);
        Ok(self.push(t, Op::AddScalar(a), req))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a);
        Ok(self.push(t, Op::MulScalar(a, c), req))
    }

    /// Row-broadcast add of a bias vector onto a matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "add_bias: bias shape {:?} does not match {n} columns",
                self.shape(bias)
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = data[i * n + j] + bv[j];
            }
        }
        let t = Tensor { shape: vec![m, n], data };
        let req = self.req(x) || self.req(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, req))
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what}: expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor { shape: vec![m, n], data: out };
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Matmul(a, b), req))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor { shape: vec![n, m], data };
        let req = self.req(a);
        Ok(self.push(t, Op::Transpose(a), req))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = new_shape.iter().product();
        if new_shape.is_empty() || numel != self.value(a).numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(a),
                new_shape
            )));
        }
        let t = Tensor { shape: new_shape, data: self.value(a).data().to_vec() };
        let req = self.req(a);
        Ok(self.push(t, Op::Reshape(a), req))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Axis { axis, rank: first.len() });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len() {
                return Err(Error::Shape("concat: rank mismatch".into()));
            }
            for d in 0..s.len() {
                if d != axis && s[d] != first[d] {
                    return Err(Error::Shape(format!(
                        "concat: off-axis extent mismatch {:?} vs {:?}",
                        s, first
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![F::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &id in inputs {
            let len = self.shape(id)[axis];
            let src = self.value(id).data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let req = inputs.iter().any(|&id| self.req(id));
        let t = Tensor { shape: out_shape, data };
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, req))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) out of bounds for axis extent {}",
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape;
        out_shape[axis] = len;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * full + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let req = self.req(x);
        let t = Tensor { shape: out_shape, data };
        Ok(self.push(t, Op::Slice { x, axis, start }, req))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a);
        Ok(self.push(t, Op::Gelu(a), req))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x.abs()).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a);
        Ok(self.push(t, Op::Abs(a), req))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x < F::zero()) {
            return Err(Error::NonFinite("sqrt of negative input".into()));
        }
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x.sqrt()).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a);
        Ok(self.push(t, Op::Sqrt(a), req))
    }

    /// max(x, c) elementwise.
    pub fn clamp_min(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x >= c { x } else { c })
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.req(a);
        Ok(self.push(t, Op::ClampMin(a, c), req))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        self.value(x).validate_finite("softmax input")?;
        let (outer, len, inner) = split_axes(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut mx = src[idx(0)];
                for a in 1..len {
                    let v = src[idx(a)];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = F::zero();
                for a in 0..len {
                    let e = (src[idx(a)] - mx).exp();
                    data[idx(a)] = e;
                    denom = denom + e;
                }
                for a in 0..len {
                    data[idx(a)] = data[idx(a)] / denom;
                }
            }
        }
        let t = Tensor { shape, data };
        let req = self.req(x);
        Ok(self.push(t, Op::Softmax { x, axis }, req))
    }

    /// Normalize each vector along the last axis to mean 0 / variance 1
    /// (population variance, epsilon 1e-5), then apply gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{d}]",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = real::<F>(LAYER_NORM_EPS);
        let dn = real::<F>(d as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let rows = src.len() / d;
        let mut data = vec![F::zero(); src.len()];
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in xs {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = F::zero();
            for &v in xs {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv = F::one() / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (xs[j] - mean) * inv;
                data[r * d + j] = xhat * g[j] + b[j];
            }
        }
        let t = Tensor { shape, data };
        let req = self.req(x) || self.req(gain) || self.req(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias }, req))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = F::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let req = self.req(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), req))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = real::<F>(self.value(a).numel() as f64);
        let mut s = F::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let req = self.req(a);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAll(a), req))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        let (outer, len, inner) = split_axes(&shape, axis);
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &e)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let src = self.value(x).data();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[(o * len + a) * inner + i];
                }
            }
        }
        let req = self.req(x);
        let t = Tensor { shape: out_shape, data };
        Ok(self.push(t, Op::SumAxis { x, axis }, req))
    }

    /// Apply one constant square matrix per row: y_r = M_r x_r, or
    /// M_rᵀ x_r when `transposed`. The matrices carry no gradient.
    pub fn row_transform(
        &mut self,
        x: NodeId,
        mats: Arc<RowMats<F>>,
        transposed: bool,
    ) -> Result<NodeId> {
        let (rows, d) = self.dims2(x, "row_transform")?;
        if mats.dim() != d || mats.rows() != rows {
            return Err(Error::Shape(format!(
                "row_transform: {} mats of dim {} vs tensor ({rows}, {d})",
                mats.rows(),
                mats.dim()
            )));
        }
        let mut data = vec![F::zero(); rows * d];
        mats.apply(self.value(x).data(), transposed, &mut data);
        let t = Tensor { shape: vec![rows, d], data };
        let req = self.req(x);
        Ok(self.push(t, Op::RowTransform { x, mats, transposed }, req))
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accum(&mut self, id: NodeId, delta: &[F]) {
        if !self.nodes[id.0].requires {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![F::zero(); numel]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients of prior sweeps are
    /// cleared first, so repeated calls are bit-identical.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires {
            return Err(Error::Tape(
                "backward: loss is detached from every differentiable leaf".into(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_step(idx, &op, &gout);
        }
        Ok(())
    }

    fn backward_step(&mut self, idx: usize, op: &Op<F>, gout: &[F]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, gout);
                self.accum(b, gout);
            }
            Op::Sub(a, b) => {
                self.accum(a, gout);
                let neg: Vec<F> = gout.iter().map(|&g| -g).collect();
                self.accum(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.req(a) {
                    let d: Vec<F> = gout
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accum(a, &d);
                }
                if self.req(b) {
                    let d: Vec<F> = gout
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accum(b, &d);
                }
            }
            Op::Div(a, b) => {
                if self.req(a) {
                    let d: Vec<F> = gout
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&g, &y)| g / y)
                        .collect();
                    self.accum(a, &d);
                }
                if self.req(b) {
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    let d: Vec<F> = gout
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| -g * av[i] / (bv[i] * bv[i]))
                        .collect();
                    self.accum(b, &d);
                }
            }
            Op::AddScalar(a) => self.accum(a, gout),
            Op::MulScalar(a, c) => {
                let d: Vec<F> = gout.iter().map(|&g| g * c).collect();
                self.accum(a, &d);
            }
            Op::AddBias { x, bias } => {
                self.accum(x, gout);
                if self.req(bias) {
                    let n = self.value(bias).numel();
                    let rows = gout.len() / n;
                    let mut d = vec![F::zero(); n];
                    for i in 0..rows {
                        for j in 0..n {
                            d[j] = d[j] + gout[i * n + j];
                        }
                    }
                    self.accum(bias, &d);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.req(a) {
                    let mut d = vec![F::zero(); m * k];
                    matmul_nt(gout, self.value(b).data(), m, n, k, &mut d);
                    self.accum(a, &d);
                }
                if self.req(b) {
                    let mut d = vec![F::zero(); k * n];
                    matmul_tn(self.value(a).data(), gout, m, k, n, &mut d);
                    self.accum(b, &d);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let mut d = vec![F::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        d[j * n + i] = gout[i * m + j];
                    }
                }
                self.accum(a, &d);
            }
            Op::Reshape(a) => self.accum(a, gout),
            Op::Concat { ref inputs, axis } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let (outer, total, inner) = split_axes(&out_shape, axis);
                let _ = total;
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.shape(inp)[axis];
                    if self.req(inp) {
                        let mut d = vec![F::zero(); outer * len * inner];
                        for o in 0..outer {
                            let src = (o * out_shape[axis] + offset) * inner;
                            let dst = o * len * inner;
                            d[dst..dst + len * inner]
                                .copy_from_slice(&gout[src..src + len * inner]);
                        }
                        self.accum(inp, &d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(x).to_vec();
                let (outer, full, inner) = split_axes(&in_shape, axis);
                let len = self.nodes[idx].value.shape()[axis];
                let mut d = vec![F::zero(); outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
                }
                self.accum(x, &d);
            }
            Op::Gelu(a) => {
                let d: Vec<F> = gout
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| g * gelu_grad(x))
                    .collect();
                self.accum(a, &d);
            }
            Op::Abs(a) => {
                let d: Vec<F> = gout
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| {
                        if x > F::zero() {
                            g
                        } else if x < F::zero() {
                            -g
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                self.accum(a, &d);
            }
            Op::Sqrt(a) => {
                let half = real::<F>(0.5);
                let y = self.nodes[idx].value.data();
                let d: Vec<F> = gout
                    .iter()
                    .zip(y)
                    .map(|(&g, &yv)| if g == F::zero() { F::zero() } else { g * half / yv })
                    .collect();
                self.accum(a, &d);
            }
            Op::ClampMin(a, c) => {
                let d: Vec<F> = gout
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| if x >= c { g } else { F::zero() })
                    .collect();
                self.accum(a, &d);
            }
            Op::Softmax { x, axis } => {
                let shape = self.nodes[idx].value.shape().to_vec();
                let (outer, len, inner) = split_axes(&shape, axis);
                let y = self.nodes[idx].value.data();
                let mut d = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let mut dot = F::zero();
                        for a in 0..len {
                            dot = dot + gout[at(a)] * y[at(a)];
                        }
                        for a in 0..len {
                            d[at(a)] = y[at(a)] * (gout[at(a)] - dot);
                        }
                    }
                }
                self.accum(x, &d);
            }
            Op::LayerNorm { x, gain, bias } => {
                let shape = self.shape(x).to_vec();
                let dlen = *shape.last().unwrap();
                let dn = real::<F>(dlen as f64);
                let eps = real::<F>(LAYER_NORM_EPS);
                let src = self.value(x).data();
                let g = self.value(gain).data();
                let rows = src.len() / dlen;
                let mut dx = vec![F::zero(); src.len()];
                let mut dgain = vec![F::zero(); dlen];
                let mut dbias = vec![F::zero(); dlen];
                for r in 0..rows {
                    let xs = &src[r * dlen..(r + 1) * dlen];
                    let go = &gout[r * dlen..(r + 1) * dlen];
                    let mut mean = F::zero();
                    for &v in xs {
                        mean = mean + v;
                    }
                    mean = mean / dn;
                    let mut var = F::zero();
                    for &v in xs {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var / dn;
                    let inv = F::one() / (var + eps).sqrt();
                    // xhat, and the two row means the input gradient needs
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..dlen {
                        let xhat = (xs[j] - mean) * inv;
                        let dy_g = go[j] * g[j];
                        m1 = m1 + dy_g;
                        m2 = m2 + dy_g * xhat;
                        dgain[j] = dgain[j] + go[j] * xhat;
                        dbias[j] = dbias[j] + go[j];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..dlen {
                        let xhat = (xs[j] - mean) * inv;
                        let dy_g = go[j] * g[j];
                        dx[r * dlen + j] = (dy_g - m1 - xhat * m2) * inv;
                    }
                }
                self.accum(x, &dx);
                self.accum(gain, &dgain);
                self.accum(bias, &dbias);
            }
            Op::SumAll(a) => {
                let g = gout[0];
                let d = vec![g; self.value(a).numel()];
                self.accum(a, &d);
            }
            Op::MeanAll(a) => {
                let n = real::<F>(self.value(a).numel() as f64);
                let g = gout[0] / n;
                let d = vec![g; self.value(a).numel()];
                self.accum(a, &d);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = split_axes(&shape, axis);
                let mut d = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            d[(o * len + a) * inner + i] = gout[o * inner + i];
                        }
                    }
                }
                self.accum(x, &d);
            }
            Op::RowTransform { x, ref mats, transposed } => {
                // d/dx of y_r = M x_r is Mᵀ g_r (swap when forward was Mᵀ).
                let mut d = vec![F::zero(); gout.len()];
                mats.apply(gout, !transposed, &mut d);
                self.accum(x, &d);
            }
        }
    }
}

fn split_axes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_fwd<F: Real>(x: F) -> F {
    let c = real::<F>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = real::<F>(0.044_715);
    let half = real::<F>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = real::<F>(0.797_884_560_802_865_4);
    let a = real::<F>(0.044_715);
    let half = real::<F>(0.5);
    let three = real::<F>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

// ── Finite-difference verification ───────────────────────────────────

/// Named parameter collection in verification precision.
pub type ParamVals = BTreeMap<String, Tensor<f64>>;
/// Gradients keyed like [`ParamVals`].
pub type GradVals = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub params_checked: usize,
}

/// Compare analytic gradients of a scalar function against central
/// finite differences, in 64-bit. Returns the max relative error over
/// every parameter element.
pub fn finite_difference_check<Func>(
    f: &mut Func,
    params: &ParamVals,
    eps: f64,
) -> Result<GradCheckReport>
where
    Func: FnMut(&ParamVals) -> Result<(f64, GradVals)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    let (l0, grads) = f(params)?;
    let (l1, _) = f(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic { a: l0, b: l1 });
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        params_checked: 0,
    };
    let mut work = params.clone();
    for (name, tensor) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Verification(format!("no gradient reported for `{name}`")))?;
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let (lp, _) = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let (lm, _) = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.params_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let bad = Tensor { shape: vec![2], data: vec![1.0, f64::NAN] };
        assert!(matches!(tape.leaf(bad, false), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_uniform_over_equal_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_saturates_masked_logit() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[-1e9, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert_eq!(tape.value(y).data()[1], 1.0);
    }

    #[test]
    fn softmax_matches_direct_exp_normalize() {
        // independent oracle: straight-line exp/sum at f64
        let logits = [1.0, 2.0, 3.0];
        let exps: Vec<f64> = logits.iter().map(|&v| v.exp()).collect();
        let denom: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / denom).collect();

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &logits)).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // values quoted to five decimals
        assert!((tape.value(y).data()[0] - 0.09003).abs() < 1e-5);
        assert!((tape.value(y).data()[1] - 0.24473).abs() < 1e-5);
        assert!((tape.value(y).data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_axis_and_nonfinite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[0.0; 3])).unwrap();
        assert!(matches!(tape.softmax(x, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.713).sin() * 3.0).collect();
        let x = tape.constant(t64(&[3, 4], &data)).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = (0..4).map(|c| tape.value(y).at(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted: Vec<f64> = data.iter().map(|v| v + 5.0).collect();
        let xs = tape.constant(t64(&[3, 4], &shifted)).unwrap();
        let ys = tape.softmax(xs, 1).unwrap();
        for i in 0..12 {
            assert!((tape.value(y).data()[i] - tape.value(ys).data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_vector_goes_to_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 4], &[2.5; 4])).unwrap();
        let g = tape.constant(t64(&[4], &[1.0; 4])).unwrap();
        let b = tape.constant(t64(&[4], &[0.0; 4])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_standardized_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 2], &[1.0, -1.0])).unwrap();
        let g = tape.constant(t64(&[2], &[1.0; 2])).unwrap();
        let b = tape.constant(t64(&[2], &[0.0; 2])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-4);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_hand_example() {
        // population variance: mean 2, var 2/3
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let g = tape.constant(t64(&[3], &[1.0; 3])).unwrap();
        let b = tape.constant(t64(&[3], &[0.0; 3])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        let inv = 1.0 / (2.0 / 3.0 + LAYER_NORM_EPS).sqrt();
        assert!((tape.value(y).data()[0] + inv).abs() < 1e-12);
        assert!((tape.value(y).data()[0] + 1.2247).abs() < 1e-4);
        assert!(tape.value(y).data()[1].abs() < 1e-12);
        assert!((tape.value(y).data()[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1], &[3.0]), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1], &[1.0]), true).unwrap();
        let s1 = tape.sum_all(x).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(tape.backward(x).is_err());
        let c = tape.constant(t64(&[1], &[3.0])).unwrap();
        let s = tape.sum_all(c).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..6).map(|i| (i as f64 * 1.3).cos()).collect();
        let x = tape.leaf(t64(&[2, 3], &data), true).unwrap();
        let w = tape.leaf(t64(&[3, 2], &[0.3, -0.4, 0.5, 0.1, -0.2, 0.7]), true).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let loss = tape.mean_all(s).unwrap();
        tape.backward(loss).unwrap();
        let g1: Vec<f64> = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let g2: Vec<f64> = tape.grad(x).unwrap().to_vec();
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let data: Vec<f32> = (0..20).map(|i| ((i * 37) % 11) as f32 * 0.17 - 0.8).collect();
            let x = tape.constant(Tensor::new(vec![4, 5], data).unwrap()).unwrap();
            let w = tape
                .constant(Tensor::new(vec![5, 4], vec![0.21f32; 20]).unwrap())
                .unwrap();
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax(y, 1).unwrap();
            tape.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    // FD oracle over a composite touching a primitive set; the closure
    // rebuilds the graph from the parameter map each call.
    fn fd_composite(
        build: impl Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
        shape: &[usize],
        data: &[f64],
    ) -> f64 {
        let mut params = ParamVals::new();
        params.insert("x".into(), t64(shape, data));
        let mut f = |p: &ParamVals| -> Result<(f64, GradVals)> {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(p["x"].clone(), true)?;
            let out = build(&mut tape, x)?;
            let loss = tape.sum_all(out)?;
            // weight outputs unevenly so gradients are not symmetric
            let w: Vec<f64> = (0..tape.value(out).numel())
                .map(|i| 0.3 + 0.1 * i as f64)
                .collect();
            let wt = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), w).unwrap())?;
            let prod = tape.mul(out, wt)?;
            let loss2 = tape.sum_all(prod)?;
            let total = tape.add(loss, loss2)?;
            tape.backward(total)?;
            let mut g = GradVals::new();
            g.insert("x".into(), tape.grad(x).unwrap().to_vec());
            Ok((tape.value(total).data()[0], g))
        };
        finite_difference_check(&mut f, &params, 1e-5).unwrap().max_rel_err
    }

    #[test]
    fn fd_matmul() {
        let w = t64(&[3, 2], &[0.3, -0.7, 0.2, 0.9, -0.4, 0.1]);
        let err = fd_composite(
            move |tape, x| {
                let wid = tape.constant(w.clone())?;
                tape.matmul(x, wid)
            },
            &[2, 3],
            &[0.5, -1.2, 0.7, 1.5, 0.2, -0.3],
        );
        assert!(err < 1e-8, "matmul fd err {err}");
    }

    #[test]
    fn fd_softmax_layernorm_gelu() {
        let err = fd_composite(
            |tape, x| {
                let g = tape.constant(t64(&[4], &[1.1, 0.9, 1.3, 0.7]))?;
                let b = tape.constant(t64(&[4], &[0.1, -0.2, 0.0, 0.3]))?;
                let ln = tape.layer_norm(x, g, b)?;
                let ge = tape.gelu(ln)?;
                tape.softmax(ge, 1)
            },
            &[3, 4],
            &[0.5, -1.2, 0.7, 1.5, 0.2, -0.3, 0.9, -0.8, 1.1, 0.4, -0.6, 0.2],
        );
        assert!(err < 1e-6, "fd err {err}");
    }

    #[test]
    fn fd_concat_slice_transpose() {
        let err = fd_composite(
            |tape, x| {
                let c = tape.concat(&[x, x], 0)?;
                let s = tape.slice(c, 0, 1, 2)?;
                let t = tape.transpose(s)?;
                tape.reshape(t, vec![6])
            },
            &[2, 3],
            &[0.5, -1.2, 0.7, 1.5, 0.2, -0.3],
        );
        assert!(err < 1e-8, "fd err {err}");
    }

    #[test]
    fn fd_reductions_and_elementwise() {
        let err = fd_composite(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                let s = tape.sum_axis(sq, 1)?;
                let r = tape.sqrt(s)?;
                let c = tape.clamp_min(r, 1e-8)?;
                let a = tape.abs(x)?;
                let m = tape.sum_axis(a, 1)?;
                let d = tape.div(m, c)?;
                tape.reshape(d, vec![1, 2])
            },
            &[2, 3],
            &[0.5, -1.2, 0.7, 1.5, 0.2, -0.3],
        );
        assert!(err < 1e-7, "fd err {err}");
    }

    #[test]
    fn fd_row_transform() {
        // two 3x3 constant matrices, one per row
        let mats = Arc::new(
            RowMats::new(
                3,
                vec![
                    0.5, -0.2, 0.1, 0.3, 0.9, -0.4, 0.0, 0.2, 1.1, // row 0
                    1.0, 0.1, 0.0, -0.3, 0.8, 0.2, 0.4, 0.0, 0.7, // row 1
                ],
            )
            .unwrap(),
        );
        let m2 = Arc::clone(&mats);
        let err = fd_composite(
            move |tape, x| {
                let y = tape.row_transform(x, Arc::clone(&m2), false)?;
                tape.row_transform(y, Arc::clone(&m2), true)
            },
            &[2, 3],
            &[0.5, -1.2, 0.7, 1.5, 0.2, -0.3],
        );
        assert!(err < 1e-8, "fd err {err}");
    }

    #[test]
    fn fd_add_bias_and_scalars() {
        let err = fd_composite(
            |tape, x| {
                let b = tape.constant(t64(&[3], &[0.3, -0.1, 0.2]))?;
                let y = tape.add_bias(x, b)?;
                let y = tape.mul_scalar(y, 1.7)?;
                tape.add_scalar(y, -0.4)
            },
            &[2, 3],
            &[0.5, -1.2, 0.7, 1.5, 0.2, -0.3],
        );
        assert!(err < 1e-8, "fd err {err}");
    }

    #[test]
    fn fd_quadratic_is_exact_to_rounding() {
        let mut params = ParamVals::new();
        params.insert("w".into(), t64(&[3], &[1.5, -2.0, 0.7]));
        let mut f = |p: &ParamVals| -> Result<(f64, GradVals)> {
            let w = &p["w"];
            let loss: f64 = w.data().iter().map(|&x| 0.5 * x * x + 2.0 * x).sum();
            let g: Vec<f64> = w.data().iter().map(|&x| x + 2.0).collect();
            let mut gm = GradVals::new();
            gm.insert("w".into(), g);
            Ok((loss, gm))
        };
        let rep = finite_difference_check(&mut f, &params, 1e-4).unwrap();
        assert!(rep.max_rel_err < 1e-8, "quadratic fd err {}", rep.max_rel_err);
    }

    #[test]
    fn fd_detects_wrong_backward_rule() {
        let mut params = ParamVals::new();
        params.insert("w".into(), t64(&[2], &[1.2, -0.8]));
        // gradient deliberately scaled by 1.1
        let mut f = |p: &ParamVals| -> Result<(f64, GradVals)> {
            let w = &p["w"];
            let loss: f64 = w.data().iter().map(|&x| x * x).sum();
            let g: Vec<f64> = w.data().iter().map(|&x| 2.2 * x).collect();
            let mut gm = GradVals::new();
            gm.insert("w".into(), g);
            Ok((loss, gm))
        };
        let rep = finite_difference_check(&mut f, &params, 1e-5).unwrap();
        assert!(rep.max_rel_err > 1e-2, "harness failed to flag bad rule: {}", rep.max_rel_err);
    }

    #[test]
    fn fd_rejects_bad_eps_and_nondeterminism() {
        let params = ParamVals::new();
        let mut f = |_: &ParamVals| Ok((0.0, GradVals::new()));
        assert!(finite_difference_check(&mut f, &params, 1e-2).is_err());

        let mut calls = 0u32;
        let mut g = |_: &ParamVals| {
            calls += 1;
            Ok((calls as f64, GradVals::new()))
        };
        assert!(matches!(
            finite_difference_check(&mut g, &params, 1e-5),
            Err(Error::NonDeterministic { .. })
        ));
    }
}
