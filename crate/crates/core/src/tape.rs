//! Replayable reverse-mode autodiff over shaped arrays.
//!
//! A [`Tape`] is an append-only list of nodes; each node stores its
//! operation, input ids and eagerly computed value. [`Tape::backward`] walks
//! the nodes in reverse exactly once and *emits the adjoint computations as
//! new tape nodes*. Because every adjoint is itself expressed in tape
//! primitives, gradients are ordinary values: differentiating a gradient
//! (e.g. training on forces, which are themselves derivatives) is just a
//! second `backward` call on the extended tape.
//!
//! Determinism: values are computed eagerly in fixed order with no
//! parallelism, so two identical tapes produce bit-identical values and
//! gradients. [`Tape::replay`] recomputes every node from its inputs and
//! bit-compares against the stored values; [`Tape::audit`] validates the
//! structural invariants (topological order, shape contracts) and returns an
//! operation census.
//!
//! Matrix-valued features use a `[..., 3, 3]` row-major layout; the 3x3
//! primitives delegate to [`crate::mat3`] so the tape and the exact algebra
//! layer share one set of kernels.

use crate::mat3;
use crate::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub usize);

/// A shaped array of scalars. Rank 0 (shape `[]`) holds a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "TensorData: {} values do not fill shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn scalar(v: Real) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, v: Real) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![v; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a rank-0 / one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Node operations. Payloads are input ids plus whatever static data the
/// kernel needs (index lists, constants).
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    /// `k * x + c` elementwise.
    Affine(ValueId, Real, Real),
    Recip(ValueId),
    Sqrt(ValueId),
    Exp(ValueId),
    Sin(ValueId),
    Cos(ValueId),
    Sigmoid(ValueId),
    /// Batched 3x3 matrix product.
    MatMul33(ValueId, ValueId),
    /// Batched 3x3 matrix times 3-vector.
    MatVec33(ValueId, ValueId),
    Transpose33(ValueId),
    /// `[..., 3, 3] -> [...]` trace.
    Trace33(ValueId),
    /// `[...] -> [..., 3, 3]`, scalar times identity.
    EyeFromScalar(ValueId),
    /// `[..., 3] -> [..., 3, 3]`, layout per [`mat3::skew`].
    SkewFromVec(ValueId),
    /// `[..., 3, 3] -> [..., 3]`; reads the antisymmetrized entries, so on
    /// exactly skew input it inverts [`Op::SkewFromVec`].
    VecFromSkew(ValueId),
    /// `[..., 3] x [..., 3] -> [..., 3, 3]` outer product.
    Outer3(ValueId, ValueId),
    /// `x: [B, C_in, rest...], w: [C_out, C_in] -> [B, C_out, rest...]`.
    MixChannels(ValueId, ValueId),
    /// Weight gradient of [`Op::MixChannels`]:
    /// `g: [B, C_out, rest...], x: [B, C_in, rest...] -> [C_out, C_in]`.
    MixChannelsGradW(ValueId, ValueId),
    /// 2-D matrix transpose.
    Transpose2(ValueId),
    /// Replicate across new trailing dims.
    ExpandTrailing(ValueId, Vec<usize>),
    /// Replicate across one new leading dim.
    ExpandLeading(ValueId, usize),
    /// Replicate across one new dim inserted at axis 1.
    ExpandAxis1(ValueId, usize),
    /// Sum away the last `k` dims.
    SumTrailing(ValueId, usize),
    /// Sum away dim 0.
    SumAxis0(ValueId),
    /// Sum away dim 1.
    SumAxis1(ValueId),
    /// Select rows (axis 0) by index.
    Gather(ValueId, Vec<usize>),
    /// Accumulate rows (axis 0) into `rows` bins by index.
    ScatterAdd(ValueId, Vec<usize>, usize),
    /// Concatenate along the last dim.
    ConcatLast(Vec<ValueId>),
    /// Select `[start, start+len)` of the last dim.
    SliceLast(ValueId, usize, usize),
    /// Embed into a zero tensor whose last dim is `total`, at `start`.
    PadLast(ValueId, usize, usize),
    Reshape(ValueId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine(..) => "affine",
            Op::Recip(..) => "recip",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Sigmoid(..) => "sigmoid",
            Op::MatMul33(..) => "matmul33",
            Op::MatVec33(..) => "matvec33",
            Op::Transpose33(..) => "transpose33",
            Op::Trace33(..) => "trace33",
            Op::EyeFromScalar(..) => "eye_from_scalar",
            Op::SkewFromVec(..) => "skew_from_vec",
            Op::VecFromSkew(..) => "vec_from_skew",
            Op::Outer3(..) => "outer3",
            Op::MixChannels(..) => "mix_channels",
            Op::MixChannelsGradW(..) => "mix_channels_grad_w",
            Op::Transpose2(..) => "transpose2",
            Op::ExpandTrailing(..) => "expand_trailing",
            Op::ExpandLeading(..) => "expand_leading",
            Op::ExpandAxis1(..) => "expand_axis1",
            Op::SumTrailing(..) => "sum_trailing",
            Op::SumAxis0(..) => "sum_axis0",
            Op::SumAxis1(..) => "sum_axis1",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::ConcatLast(..) => "concat_last",
            Op::SliceLast(..) => "slice_last",
            Op::PadLast(..) => "pad_last",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<ValueId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul33(a, b)
            | Op::MatVec33(a, b)
            | Op::Outer3(a, b)
            | Op::MixChannels(a, b)
            | Op::MixChannelsGradW(a, b) => vec![*a, *b],
            Op::Affine(a, _, _)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Sigmoid(a)
            | Op::Transpose33(a)
            | Op::Trace33(a)
            | Op::EyeFromScalar(a)
            | Op::SkewFromVec(a)
            | Op::VecFromSkew(a)
            | Op::Transpose2(a)
            | Op::ExpandTrailing(a, _)
            | Op::ExpandLeading(a, _)
            | Op::ExpandAxis1(a, _)
            | Op::SumTrailing(a, _)
            | Op::SumAxis0(a)
            | Op::SumAxis1(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _, _)
            | Op::SliceLast(a, _, _)
            | Op::PadLast(a, _, _)
            | Op::Reshape(a, _) => vec![*a],
            Op::ConcatLast(ids) => ids.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: TensorData,
    requires_grad: bool,
}

/// Gradient node ids produced by one [`Tape::backward`] call, indexed by the
/// node they differentiate. `None` means the node does not influence the
/// seed or does not require gradients.
pub struct Gradients {
    ids: Vec<Option<ValueId>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<ValueId> {
        self.ids.get(id.0).copied().flatten()
    }
}

/// Structural report from [`Tape::audit`].
#[derive(Debug)]
pub struct AuditReport {
    pub nodes: usize,
    pub leaves: usize,
    pub op_counts: std::collections::BTreeMap<&'static str, usize>,
    /// Violations of the tape invariants. Must be empty on a healthy tape.
    pub issues: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
#[error("replay mismatch at node {node} ({op}): stored and recomputed values differ")]
pub struct ReplayError {
    pub node: usize,
    pub op: &'static str,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: ValueId) -> &TensorData {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: TensorData) -> ValueId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    /// Differentiable input (parameters, positions).
    pub fn leaf(&mut self, value: TensorData) -> ValueId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        ValueId(self.nodes.len() - 1)
    }

    /// Non-differentiable input (lookup tables, fixed coefficients).
    pub fn constant(&mut self, value: TensorData) -> ValueId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        ValueId(self.nodes.len() - 1)
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &str, a: ValueId, b: ValueId) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.same_shape("add", a, b);
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.same_shape("sub", a, b);
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.same_shape("mul", a, b);
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.same_shape("div", a, b);
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    /// `k * x + c`.
    pub fn affine(&mut self, x: ValueId, k: Real, c: Real) -> ValueId {
        let v = map(&self.nodes[x.0].value, |t| k * t + c);
        self.push(Op::Affine(x, k, c), v)
    }

    pub fn scale(&mut self, x: ValueId, k: Real) -> ValueId {
        self.affine(x, k, 0.0)
    }

    pub fn neg(&mut self, x: ValueId) -> ValueId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn recip(&mut self, x: ValueId) -> ValueId {
        let v = map(&self.nodes[x.0].value, |t| 1.0 / t);
        self.push(Op::Recip(x), v)
    }

    pub fn sqrt(&mut self, x: ValueId) -> ValueId {
        let v = map(&self.nodes[x.0].value, Real::sqrt);
        self.push(Op::Sqrt(x), v)
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let v = map(&self.nodes[x.0].value, Real::exp);
        self.push(Op::Exp(x), v)
    }

    pub fn sin(&mut self, x: ValueId) -> ValueId {
        let v = map(&self.nodes[x.0].value, Real::sin);
        self.push(Op::Sin(x), v)
    }

    pub fn cos(&mut self, x: ValueId) -> ValueId {
        let v = map(&self.nodes[x.0].value, Real::cos);
        self.push(Op::Cos(x), v)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = map(&self.nodes[x.0].value, stable_sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    /// `x * sigmoid(x)` as a composite of primitives.
    pub fn silu(&mut self, x: ValueId) -> ValueId {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    // ---- 3x3 blocks ----

    fn expect_mat33(&self, op: &str, x: ValueId) -> usize {
        let s = self.shape(x);
        assert!(
            s.len() >= 2 && s[s.len() - 2..] == [3, 3],
            "{op}: expected [..., 3, 3], got {s:?}"
        );
        self.nodes[x.0].value.numel() / 9
    }

    fn expect_vec3(&self, op: &str, x: ValueId) -> usize {
        let s = self.shape(x);
        assert!(!s.is_empty() && *s.last().unwrap() == 3, "{op}: expected [..., 3], got {s:?}");
        self.nodes[x.0].value.numel() / 3
    }

    pub fn matmul33(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.same_shape("matmul33", a, b);
        let n = self.expect_mat33("matmul33", a);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; av.numel()];
        for i in 0..n {
            mat3::mul_into(
                &av.data[9 * i..9 * i + 9],
                &bv.data[9 * i..9 * i + 9],
                &mut out[9 * i..9 * i + 9],
            );
        }
        let v = TensorData::new(av.shape.clone(), out);
        self.push(Op::MatMul33(a, b), v)
    }

    pub fn matvec33(&mut self, m: ValueId, x: ValueId) -> ValueId {
        let n = self.expect_mat33("matvec33", m);
        let nv = self.expect_vec3("matvec33", x);
        assert_eq!(n, nv, "matvec33: batch mismatch {n} matrices vs {nv} vectors");
        let mv = &self.nodes[m.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            let mm = &mv.data[9 * i..9 * i + 9];
            let vv = [xv.data[3 * i], xv.data[3 * i + 1], xv.data[3 * i + 2]];
            let r = mat3::matvec(mm, &vv);
            out[3 * i..3 * i + 3].copy_from_slice(&r);
        }
        let v = TensorData::new(xv.shape.clone(), out);
        self.push(Op::MatVec33(m, x), v)
    }

    pub fn transpose33(&mut self, x: ValueId) -> ValueId {
        let n = self.expect_mat33("transpose33", x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.numel()];
        for i in 0..n {
            mat3::transpose_into(&xv.data[9 * i..9 * i + 9], &mut out[9 * i..9 * i + 9]);
        }
        let v = TensorData::new(xv.shape.clone(), out);
        self.push(Op::Transpose33(x), v)
    }

    pub fn trace33(&mut self, x: ValueId) -> ValueId {
        let n = self.expect_mat33("trace33", x);
        let xv = &self.nodes[x.0].value;
        let out = (0..n).map(|i| mat3::trace(&xv.data[9 * i..9 * i + 9])).collect();
        let shape = xv.shape[..xv.shape.len() - 2].to_vec();
        self.push(Op::Trace33(x), TensorData::new(shape, out))
    }

    pub fn eye_from_scalar(&mut self, s: ValueId) -> ValueId {
        let sv = &self.nodes[s.0].value;
        let n = sv.numel();
        let mut out = vec![0.0; 9 * n];
        for i in 0..n {
            out[9 * i] = sv.data[i];
            out[9 * i + 4] = sv.data[i];
            out[9 * i + 8] = sv.data[i];
        }
        let mut shape = sv.shape.clone();
        shape.extend([3, 3]);
        self.push(Op::EyeFromScalar(s), TensorData::new(shape, out))
    }

    pub fn skew_from_vec(&mut self, x: ValueId) -> ValueId {
        let n = self.expect_vec3("skew_from_vec", x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; 9 * n];
        for i in 0..n {
            let v = [xv.data[3 * i], xv.data[3 * i + 1], xv.data[3 * i + 2]];
            out[9 * i..9 * i + 9].copy_from_slice(&mat3::skew(&v));
        }
        let mut shape = xv.shape.clone();
        shape.pop();
        shape.extend([3, 3]);
        self.push(Op::SkewFromVec(x), TensorData::new(shape, out))
    }

    /// Reads `v = ((m12 - m21)/2, (m20 - m02)/2, (m01 - m10)/2)`; on exactly
    /// skew input this is the plain entry read that inverts
    /// [`Tape::skew_from_vec`], and the symmetrized form keeps the adjoint
    /// exact on the full input space.
    pub fn vec_from_skew(&mut self, x: ValueId) -> ValueId {
        let n = self.expect_mat33("vec_from_skew", x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            let m = &xv.data[9 * i..9 * i + 9];
            out[3 * i] = 0.5 * (m[5] - m[7]);
            out[3 * i + 1] = 0.5 * (m[6] - m[2]);
            out[3 * i + 2] = 0.5 * (m[1] - m[3]);
        }
        let mut shape = xv.shape.clone();
        shape.truncate(xv.shape.len() - 2);
        shape.push(3);
        self.push(Op::VecFromSkew(x), TensorData::new(shape, out))
    }

    pub fn outer3(&mut self, u: ValueId, v: ValueId) -> ValueId {
        self.same_shape("outer3", u, v);
        let n = self.expect_vec3("outer3", u);
        let uv = &self.nodes[u.0].value;
        let vv = &self.nodes[v.0].value;
        let mut out = vec![0.0; 9 * n];
        for i in 0..n {
            for r in 0..3 {
                for c in 0..3 {
                    out[9 * i + 3 * r + c] = uv.data[3 * i + r] * vv.data[3 * i + c];
                }
            }
        }
        let mut shape = uv.shape.clone();
        shape.pop();
        shape.extend([3, 3]);
        self.push(Op::Outer3(u, v), TensorData::new(shape, out))
    }

    // ---- channel mixing ----

    /// `y[b, co, ...] = sum_ci w[co, ci] * x[b, ci, ...]`.
    pub fn mix_channels(&mut self, x: ValueId, w: ValueId) -> ValueId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() >= 2, "mix_channels: input must be [B, C, ...], got {xs:?}");
        assert!(ws.len() == 2, "mix_channels: weights must be [C_out, C_in], got {ws:?}");
        let (b, cin) = (xs[0], xs[1]);
        let (cout, wcin) = (ws[0], ws[1]);
        assert_eq!(cin, wcin, "mix_channels: {cin} input channels vs weight shape {ws:?}");
        let rest: usize = xs[2..].iter().product();
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = vec![0.0; b * cout * rest];
        if rest == 1 {
            // Plain [B, C_in] x [C_out, C_in]^T: contiguous dot products.
            for bi in 0..b {
                let xrow = &xv.data[bi * cin..(bi + 1) * cin];
                let orow = &mut out[bi * cout..(bi + 1) * cout];
                for (co, o) in orow.iter_mut().enumerate() {
                    let wrow = &wv.data[co * cin..(co + 1) * cin];
                    let mut acc = 0.0;
                    for (k, x) in wrow.iter().zip(xrow) {
                        acc += k * x;
                    }
                    *o = acc;
                }
            }
        } else if rest == 9 {
            // 3x3 stacks dominate; a fixed-width accumulator lets the
            // compiler keep the nine lanes in registers. Same summation
            // order as the general path, so values are bit-identical.
            for bi in 0..b {
                let xb = &xv.data[bi * cin * 9..(bi + 1) * cin * 9];
                let ob = &mut out[bi * cout * 9..(bi + 1) * cout * 9];
                for co in 0..cout {
                    let wrow = &wv.data[co * cin..(co + 1) * cin];
                    let mut acc = [0.0; 9];
                    for (ci, &k) in wrow.iter().enumerate() {
                        if k == 0.0 {
                            continue;
                        }
                        let xr = &xb[ci * 9..ci * 9 + 9];
                        for (a, x) in acc.iter_mut().zip(xr) {
                            *a += k * x;
                        }
                    }
                    ob[co * 9..co * 9 + 9].copy_from_slice(&acc);
                }
            }
        } else {
            for bi in 0..b {
                let xbase = bi * cin * rest;
                let obase = bi * cout * rest;
                for co in 0..cout {
                    let orow = &mut out[obase + co * rest..obase + (co + 1) * rest];
                    for ci in 0..cin {
                        let k = wv.data[co * cin + ci];
                        if k == 0.0 {
                            continue;
                        }
                        let xrow = &xv.data[xbase + ci * rest..xbase + (ci + 1) * rest];
                        for (o, xr) in orow.iter_mut().zip(xrow) {
                            *o += k * xr;
                        }
                    }
                }
            }
        }
        let mut shape = xs.clone();
        shape[1] = cout;
        self.push(Op::MixChannels(x, w), TensorData::new(shape, out))
    }

    /// Weight gradient of [`Tape::mix_channels`]:
    /// `out[co, ci] = sum_{b, ...} g[b, co, ...] * x[b, ci, ...]`.
    pub fn mix_channels_grad_w(&mut self, g: ValueId, x: ValueId) -> ValueId {
        let gs = self.shape(g).to_vec();
        let xs = self.shape(x).to_vec();
        assert!(
            gs.len() >= 2 && xs.len() >= 2 && gs[0] == xs[0] && gs[2..] == xs[2..],
            "mix_channels_grad_w: incompatible shapes {gs:?} vs {xs:?}"
        );
        let (b, cout, cin) = (gs[0], gs[1], xs[1]);
        let rest: usize = gs[2..].iter().product();
        let gv = &self.nodes[g.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; cout * cin];
        if rest == 1 {
            // Outer-product accumulation with contiguous rows.
            for bi in 0..b {
                let grow = &gv.data[bi * cout..(bi + 1) * cout];
                let xrow = &xv.data[bi * cin..(bi + 1) * cin];
                for (co, &gval) in grow.iter().enumerate() {
                    let orow = &mut out[co * cin..(co + 1) * cin];
                    for (o, x) in orow.iter_mut().zip(xrow) {
                        *o += gval * x;
                    }
                }
            }
        } else if rest == 9 {
            for bi in 0..b {
                let gb = &gv.data[bi * cout * 9..(bi + 1) * cout * 9];
                let xb = &xv.data[bi * cin * 9..(bi + 1) * cin * 9];
                for co in 0..cout {
                    let mut g9 = [0.0; 9];
                    g9.copy_from_slice(&gb[co * 9..co * 9 + 9]);
                    let orow = &mut out[co * cin..(co + 1) * cin];
                    for (ci, o) in orow.iter_mut().enumerate() {
                        let xr = &xb[ci * 9..ci * 9 + 9];
                        let mut acc = 0.0;
                        for (g, x) in g9.iter().zip(xr) {
                            acc += g * x;
                        }
                        *o += acc;
                    }
                }
            }
        } else {
            for bi in 0..b {
                let gbase = bi * cout * rest;
                let xbase = bi * cin * rest;
                for co in 0..cout {
                    let grow = &gv.data[gbase + co * rest..gbase + (co + 1) * rest];
                    for ci in 0..cin {
                        let xrow = &xv.data[xbase + ci * rest..xbase + (ci + 1) * rest];
                        let mut acc = 0.0;
                        for (gr, xr) in grow.iter().zip(xrow) {
                            acc += gr * xr;
                        }
                        out[co * cin + ci] += acc;
                    }
                }
            }
        }
        self.push(Op::MixChannelsGradW(g, x), TensorData::new(vec![cout, cin], out))
    }

    pub fn transpose2(&mut self, w: ValueId) -> ValueId {
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 2, "transpose2: expected rank 2, got {ws:?}");
        let wv = &self.nodes[w.0].value;
        let (r, c) = (ws[0], ws[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = wv.data[i * c + j];
            }
        }
        self.push(Op::Transpose2(w), TensorData::new(vec![c, r], out))
    }

    // ---- broadcasting and reductions ----

    /// Replicate `x` across new trailing dims: `[...] -> [..., dims...]`.
    pub fn expand_trailing(&mut self, x: ValueId, dims: &[usize]) -> ValueId {
        let xv = &self.nodes[x.0].value;
        let rep: usize = dims.iter().product();
        let mut out = Vec::with_capacity(xv.numel() * rep);
        for &v in &xv.data {
            out.extend(std::iter::repeat(v).take(rep));
        }
        let mut shape = xv.shape.clone();
        shape.extend_from_slice(dims);
        self.push(Op::ExpandTrailing(x, dims.to_vec()), TensorData::new(shape, out))
    }

    /// Replicate `x` across one new leading dim: `[...] -> [n, ...]`.
    pub fn expand_leading(&mut self, x: ValueId, n: usize) -> ValueId {
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(xv.numel() * n);
        for _ in 0..n {
            out.extend_from_slice(&xv.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&xv.shape);
        self.push(Op::ExpandLeading(x, n), TensorData::new(shape, out))
    }

    /// Replicate `x` across one new dim inserted at axis 1:
    /// `[b, ...] -> [b, n, ...]`.
    pub fn expand_axis1(&mut self, x: ValueId, n: usize) -> ValueId {
        let xv = &self.nodes[x.0].value;
        assert!(!xv.shape.is_empty(), "expand_axis1: rank 0 input");
        let lead = xv.shape[0];
        let rest: usize = xv.shape[1..].iter().product();
        let mut out = Vec::with_capacity(xv.numel() * n);
        for b in 0..lead {
            let row = &xv.data[b * rest..(b + 1) * rest];
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
        let mut shape = vec![lead, n];
        shape.extend_from_slice(&xv.shape[1..]);
        self.push(Op::ExpandAxis1(x, n), TensorData::new(shape, out))
    }

    /// Sum away the last `k` dims: `[..., d1, ..., dk] -> [...]`.
    pub fn sum_trailing(&mut self, x: ValueId, k: usize) -> ValueId {
        let xv = &self.nodes[x.0].value;
        assert!(k <= xv.shape.len(), "sum_trailing: rank {} < k = {k}", xv.shape.len());
        let keep = xv.shape.len() - k;
        let lead: usize = xv.shape[..keep].iter().product();
        let rep: usize = xv.shape[keep..].iter().product();
        let mut out = vec![0.0; lead];
        for i in 0..lead {
            let mut acc = 0.0;
            for j in 0..rep {
                acc += xv.data[i * rep + j];
            }
            out[i] = acc;
        }
        let shape = xv.shape[..keep].to_vec();
        self.push(Op::SumTrailing(x, k), TensorData::new(shape, out))
    }

    /// Sum away dim 0: `[n, ...] -> [...]`.
    pub fn sum_axis0(&mut self, x: ValueId) -> ValueId {
        let xv = &self.nodes[x.0].value;
        assert!(!xv.shape.is_empty(), "sum_axis0: rank 0 input");
        let n = xv.shape[0];
        let rest: usize = xv.shape[1..].iter().product();
        let mut out = vec![0.0; rest];
        for i in 0..n {
            for j in 0..rest {
                out[j] += xv.data[i * rest + j];
            }
        }
        let shape = xv.shape[1..].to_vec();
        self.push(Op::SumAxis0(x), TensorData::new(shape, out))
    }

    /// Sum away dim 1: `[b, n, ...] -> [b, ...]`.
    pub fn sum_axis1(&mut self, x: ValueId) -> ValueId {
        let xv = &self.nodes[x.0].value;
        assert!(xv.shape.len() >= 2, "sum_axis1: rank {} input", xv.shape.len());
        let lead = xv.shape[0];
        let n = xv.shape[1];
        let rest: usize = xv.shape[2..].iter().product();
        let mut out = vec![0.0; lead * rest];
        for b in 0..lead {
            for i in 0..n {
                let src = (b * n + i) * rest;
                for j in 0..rest {
                    out[b * rest + j] += xv.data[src + j];
                }
            }
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&xv.shape[2..]);
        self.push(Op::SumAxis1(x), TensorData::new(shape, out))
    }

    /// Sum of every entry, producing a rank-0 scalar.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let rank = self.shape(x).len();
        self.sum_trailing(x, rank)
    }

    /// Select rows along axis 0: `y[k, ...] = x[idx[k], ...]`.
    pub fn gather(&mut self, x: ValueId, idx: &[usize]) -> ValueId {
        let xv = &self.nodes[x.0].value;
        assert!(!xv.shape.is_empty(), "gather: rank 0 input");
        let rows = xv.shape[0];
        let rest: usize = xv.shape[1..].iter().product();
        for &i in idx {
            assert!(i < rows, "gather: index {i} out of {rows} rows");
        }
        let mut out = Vec::with_capacity(idx.len() * rest);
        for &i in idx {
            out.extend_from_slice(&xv.data[i * rest..(i + 1) * rest]);
        }
        let mut shape = xv.shape.clone();
        shape[0] = idx.len();
        self.push(Op::Gather(x, idx.to_vec()), TensorData::new(shape, out))
    }

    /// Accumulate rows along axis 0: `y[idx[k], ...] += x[k, ...]`,
    /// iterating `k` in order (deterministic).
    pub fn scatter_add(&mut self, x: ValueId, idx: &[usize], rows: usize) -> ValueId {
        let xv = &self.nodes[x.0].value;
        assert!(!xv.shape.is_empty(), "scatter_add: rank 0 input");
        assert_eq!(
            xv.shape[0],
            idx.len(),
            "scatter_add: {} rows vs {} indices",
            xv.shape[0],
            idx.len()
        );
        let rest: usize = xv.shape[1..].iter().product();
        let mut out = vec![0.0; rows * rest];
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < rows, "scatter_add: index {i} out of {rows} rows");
            let src = &xv.data[k * rest..(k + 1) * rest];
            let dst = &mut out[i * rest..(i + 1) * rest];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let mut shape = xv.shape.clone();
        shape[0] = rows;
        self.push(Op::ScatterAdd(x, idx.to_vec(), rows), TensorData::new(shape, out))
    }

    pub fn concat_last(&mut self, ids: &[ValueId]) -> ValueId {
        assert!(!ids.is_empty(), "concat_last: no inputs");
        let first = self.shape(ids[0]).to_vec();
        assert!(!first.is_empty(), "concat_last: rank 0 input");
        let lead = &first[..first.len() - 1];
        let mut total_last = 0;
        for &id in ids {
            let s = self.shape(id);
            assert_eq!(
                &s[..s.len() - 1],
                lead,
                "concat_last: leading dims differ: {s:?} vs {first:?}"
            );
            total_last += s[s.len() - 1];
        }
        let lead_n: usize = lead.iter().product();
        let mut out = Vec::with_capacity(lead_n * total_last);
        for row in 0..lead_n {
            for &id in ids {
                let v = &self.nodes[id.0].value;
                let last = v.shape[v.shape.len() - 1];
                out.extend_from_slice(&v.data[row * last..(row + 1) * last]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_last);
        self.push(Op::ConcatLast(ids.to_vec()), TensorData::new(shape, out))
    }

    pub fn slice_last(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let xv = &self.nodes[x.0].value;
        assert!(!xv.shape.is_empty(), "slice_last: rank 0 input");
        let last = *xv.shape.last().unwrap();
        assert!(start + len <= last, "slice_last: [{start}, {start}+{len}) out of {last}");
        let lead: usize = xv.shape[..xv.shape.len() - 1].iter().product();
        let mut out = Vec::with_capacity(lead * len);
        for row in 0..lead {
            out.extend_from_slice(&xv.data[row * last + start..row * last + start + len]);
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = len;
        self.push(Op::SliceLast(x, start, len), TensorData::new(shape, out))
    }

    /// Place `x` at offset `start` of a zero tensor whose last dim is
    /// `total` (inverse of slicing; used as the slice adjoint).
    pub fn pad_last(&mut self, x: ValueId, start: usize, total: usize) -> ValueId {
        let xv = &self.nodes[x.0].value;
        assert!(!xv.shape.is_empty(), "pad_last: rank 0 input");
        let last = *xv.shape.last().unwrap();
        assert!(start + last <= total, "pad_last: [{start}, {start}+{last}) out of {total}");
        let lead: usize = xv.shape[..xv.shape.len() - 1].iter().product();
        let mut out = vec![0.0; lead * total];
        for row in 0..lead {
            out[row * total + start..row * total + start + last]
                .copy_from_slice(&xv.data[row * last..(row + 1) * last]);
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = total;
        self.push(Op::PadLast(x, start, total), TensorData::new(shape, out))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> ValueId {
        let xv = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            xv.numel(),
            "reshape: cannot view {:?} as {shape:?}",
            xv.shape
        );
        let v = TensorData::new(shape.to_vec(), xv.data.clone());
        self.push(Op::Reshape(x, shape.to_vec()), v)
    }

    // ---- differentiation ----

    /// Reverse-mode sweep from a scalar `seed`. Visits each node at or below
    /// the seed exactly once, in reverse creation order, and emits the
    /// adjoint arithmetic as new nodes on this same tape. The returned map
    /// gives the gradient node of every node that influences the seed.
    ///
    /// Because adjoints are tape values, a second `backward` over a scalar
    /// built from gradient nodes differentiates the gradient itself.
    pub fn backward(&mut self, seed: ValueId) -> Gradients {
        assert_eq!(
            self.nodes[seed.0].value.numel(),
            1,
            "backward: seed must be scalar, got shape {:?}",
            self.shape(seed)
        );
        let mut grads: Vec<Option<ValueId>> = vec![None; seed.0 + 1];
        let one = self.constant(TensorData::filled(self.nodes[seed.0].value.shape.clone(), 1.0));
        grads[seed.0] = Some(one);

        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let out = ValueId(id);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g);
                    self.accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g);
                    if self.nodes[b.0].requires_grad {
                        let gb = self.neg(g);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Div(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = self.div(g, b);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let q = self.div(out, b); // a / b^2
                        let gq = self.mul(g, q);
                        let gb = self.neg(gq);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Affine(x, k, _) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = self.scale(g, k);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Recip(x) => {
                    if self.nodes[x.0].requires_grad {
                        let sq = self.mul(out, out);
                        let gx0 = self.mul(g, sq);
                        let gx = self.neg(gx0);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Sqrt(x) => {
                    if self.nodes[x.0].requires_grad {
                        let two = self.scale(out, 2.0);
                        let gx = self.div(g, two);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Exp(x) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = self.mul(g, out);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Sin(x) => {
                    if self.nodes[x.0].requires_grad {
                        let c = self.cos(x);
                        let gx = self.mul(g, c);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Cos(x) => {
                    if self.nodes[x.0].requires_grad {
                        let s = self.sin(x);
                        let gs = self.mul(g, s);
                        let gx = self.neg(gs);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.nodes[x.0].requires_grad {
                        let one_minus = self.affine(out, -1.0, 1.0);
                        let d = self.mul(out, one_minus);
                        let gx = self.mul(g, d);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::MatMul33(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let bt = self.transpose33(b);
                        let ga = self.matmul33(g, bt);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = self.transpose33(a);
                        let gb = self.matmul33(at, g);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatVec33(m, x) => {
                    if self.nodes[m.0].requires_grad {
                        let gm = self.outer3(g, x);
                        self.accumulate(&mut grads, m, gm);
                    }
                    if self.nodes[x.0].requires_grad {
                        let mt = self.transpose33(m);
                        let gx = self.matvec33(mt, g);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Transpose33(x) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = self.transpose33(g);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Trace33(x) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = self.eye_from_scalar(g);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::EyeFromScalar(s) => {
                    if self.nodes[s.0].requires_grad {
                        let gs = self.trace33(g);
                        self.accumulate(&mut grads, s, gs);
                    }
                }
                Op::SkewFromVec(x) => {
                    if self.nodes[x.0].requires_grad {
                        // vec_from_skew halves the antisymmetrized read, so
                        // the exact adjoint restores the factor of two.
                        let v = self.vec_from_skew(g);
                        let gx = self.scale(v, 2.0);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::VecFromSkew(x) => {
                    if self.nodes[x.0].requires_grad {
                        let m = self.skew_from_vec(g);
                        let gx = self.scale(m, 0.5);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Outer3(u, v) => {
                    if self.nodes[u.0].requires_grad {
                        let gu = self.matvec33(g, v);
                        self.accumulate(&mut grads, u, gu);
                    }
                    if self.nodes[v.0].requires_grad {
                        let gt = self.transpose33(g);
                        let gv = self.matvec33(gt, u);
                        self.accumulate(&mut grads, v, gv);
                    }
                }
                Op::MixChannels(x, w) => {
                    if self.nodes[x.0].requires_grad {
                        let wt = self.transpose2(w);
                        let gx = self.mix_channels(g, wt);
                        self.accumulate(&mut grads, x, gx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let gw = self.mix_channels_grad_w(g, x);
                        self.accumulate(&mut grads, w, gw);
                    }
                }
                Op::MixChannelsGradW(gp, x) => {
                    if self.nodes[gp.0].requires_grad {
                        let gg = self.mix_channels(x, g);
                        self.accumulate(&mut grads, gp, gg);
                    }
                    if self.nodes[x.0].requires_grad {
                        let gt = self.transpose2(g);
                        let gx = self.mix_channels(gp, gt);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Transpose2(w) => {
                    if self.nodes[w.0].requires_grad {
                        let gw = self.transpose2(g);
                        self.accumulate(&mut grads, w, gw);
                    }
                }
                Op::ExpandTrailing(x, dims) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = self.sum_trailing(g, dims.len());
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::ExpandLeading(x, _) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = self.sum_axis0(g);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::ExpandAxis1(x, _) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = self.sum_axis1(g);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::SumTrailing(x, k) => {
                    if self.nodes[x.0].requires_grad {
                        let xs = self.shape(x).to_vec();
                        let dims = xs[xs.len() - k..].to_vec();
                        let gx = self.expand_trailing(g, &dims);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::SumAxis0(x) => {
                    if self.nodes[x.0].requires_grad {
                        let n = self.shape(x)[0];
                        let gx = self.expand_leading(g, n);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::SumAxis1(x) => {
                    if self.nodes[x.0].requires_grad {
                        let n = self.shape(x)[1];
                        let gx = self.expand_axis1(g, n);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Gather(x, idx) => {
                    if self.nodes[x.0].requires_grad {
                        let rows = self.shape(x)[0];
                        let gx = self.scatter_add(g, &idx, rows);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::ScatterAdd(x, idx, _) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = self.gather(g, &idx);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::ConcatLast(ids) => {
                    let mut off = 0;
                    for &cid in &ids {
                        let len = *self.shape(cid).last().unwrap();
                        if self.nodes[cid.0].requires_grad {
                            let gseg = self.slice_last(g, off, len);
                            self.accumulate(&mut grads, cid, gseg);
                        }
                        off += len;
                    }
                }
                Op::SliceLast(x, start, _) => {
                    if self.nodes[x.0].requires_grad {
                        let total = *self.shape(x).last().unwrap();
                        let gx = self.pad_last(g, start, total);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::PadLast(x, start, _) => {
                    if self.nodes[x.0].requires_grad {
                        let len = *self.shape(x).last().unwrap();
                        let gx = self.slice_last(g, start, len);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
                Op::Reshape(x, _) => {
                    if self.nodes[x.0].requires_grad {
                        let xs = self.shape(x).to_vec();
                        let gx = self.reshape(g, &xs);
                        self.accumulate(&mut grads, x, gx);
                    }
                }
            }
        }
        Gradients { ids: grads }
    }

    fn accumulate(&mut self, grads: &mut [Option<ValueId>], input: ValueId, g: ValueId) {
        if !self.nodes[input.0].requires_grad {
            return;
        }
        grads[input.0] = Some(match grads[input.0] {
            Some(prev) => self.add(prev, g),
            None => g,
        });
    }

    // ---- integrity ----

    /// Recompute every node from its stored inputs and bit-compare with the
    /// stored value.
    pub fn replay(&self) -> Result<(), ReplayError> {
        let mut fresh = Tape::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let id = match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        fresh.leaf(node.value.clone())
                    } else {
                        fresh.constant(node.value.clone())
                    }
                }
                Op::Add(a, b) => fresh.add(*a, *b),
                Op::Sub(a, b) => fresh.sub(*a, *b),
                Op::Mul(a, b) => fresh.mul(*a, *b),
                Op::Div(a, b) => fresh.div(*a, *b),
                Op::Affine(a, k, c) => fresh.affine(*a, *k, *c),
                Op::Recip(a) => fresh.recip(*a),
                Op::Sqrt(a) => fresh.sqrt(*a),
                Op::Exp(a) => fresh.exp(*a),
                Op::Sin(a) => fresh.sin(*a),
                Op::Cos(a) => fresh.cos(*a),
                Op::Sigmoid(a) => fresh.sigmoid(*a),
                Op::MatMul33(a, b) => fresh.matmul33(*a, *b),
                Op::MatVec33(a, b) => fresh.matvec33(*a, *b),
                Op::Transpose33(a) => fresh.transpose33(*a),
                Op::Trace33(a) => fresh.trace33(*a),
                Op::EyeFromScalar(a) => fresh.eye_from_scalar(*a),
                Op::SkewFromVec(a) => fresh.skew_from_vec(*a),
                Op::VecFromSkew(a) => fresh.vec_from_skew(*a),
                Op::Outer3(a, b) => fresh.outer3(*a, *b),
                Op::MixChannels(a, b) => fresh.mix_channels(*a, *b),
                Op::MixChannelsGradW(a, b) => fresh.mix_channels_grad_w(*a, *b),
                Op::Transpose2(a) => fresh.transpose2(*a),
                Op::ExpandTrailing(a, d) => fresh.expand_trailing(*a, d),
                Op::ExpandLeading(a, n) => fresh.expand_leading(*a, *n),
                Op::ExpandAxis1(a, n) => fresh.expand_axis1(*a, *n),
                Op::SumTrailing(a, k) => fresh.sum_trailing(*a, *k),
                Op::SumAxis0(a) => fresh.sum_axis0(*a),
                Op::SumAxis1(a) => fresh.sum_axis1(*a),
                Op::Gather(a, idx) => fresh.gather(*a, idx),
                Op::ScatterAdd(a, idx, rows) => fresh.scatter_add(*a, idx, *rows),
                Op::ConcatLast(ids) => fresh.concat_last(ids),
                Op::SliceLast(a, s, l) => fresh.slice_last(*a, *s, *l),
                Op::PadLast(a, s, t) => fresh.pad_last(*a, *s, *t),
                Op::Reshape(a, s) => fresh.reshape(*a, s),
            };
            debug_assert_eq!(id.0, i);
            if fresh.nodes[i].value != node.value {
                return Err(ReplayError { node: i, op: node.op.name() });
            }
        }
        Ok(())
    }

    /// Output size of every node, labeled by operation, for memory and
    /// traffic accounting.
    pub fn node_sizes(&self) -> impl Iterator<Item = (&'static str, usize)> + '_ {
        self.nodes.iter().map(|n| (n.op.name(), n.value.numel()))
    }

    /// Validate structure: inputs strictly precede their node (acyclic by
    /// construction), every input id exists, and report an op census. Any
    /// violation lands in `issues`, which must be empty on a healthy tape.
    pub fn audit(&self) -> AuditReport {
        let mut op_counts = std::collections::BTreeMap::new();
        let mut issues = Vec::new();
        let mut leaves = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            *op_counts.entry(node.op.name()).or_insert(0) += 1;
            if matches!(node.op, Op::Leaf) {
                leaves += 1;
            }
            for input in node.op.inputs() {
                if input.0 >= i {
                    issues.push(format!(
                        "node {i} ({}) references non-preceding node {}",
                        node.op.name(),
                        input.0
                    ));
                }
                if input.0 >= self.nodes.len() {
                    issues.push(format!(
                        "node {i} ({}) references missing node {}",
                        node.op.name(),
                        input.0
                    ));
                }
            }
            if node.value.data.iter().any(|v| !v.is_finite()) {
                issues.push(format!("node {i} ({}) holds non-finite values", node.op.name()));
            }
        }
        AuditReport { nodes: self.nodes.len(), leaves, op_counts, issues }
    }
}

fn map(x: &TensorData, f: impl Fn(Real) -> Real) -> TensorData {
    TensorData { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

fn zip_map(a: &TensorData, b: &TensorData, f: impl Fn(Real, Real) -> Real) -> TensorData {
    TensorData {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn stable_sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
