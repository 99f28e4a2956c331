//! Define-by-run tape. Every forward operation appends a node holding its
//! output value; [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a reverse topological order because inputs always precede outputs.

use std::collections::HashMap;

use crate::error::{NumError, Result};
use crate::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs and output of a user-defined operation, handed to its backward rule.
pub struct CustomCtx<'a, T> {
    pub inputs: Vec<&'a [T]>,
    pub input_shapes: Vec<&'a [usize]>,
    pub output: &'a [T],
    pub output_shape: &'a [usize],
}

/// Backward rule of an operation defined outside this crate.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Adds `∂loss/∂inputs[input]` into `grad_in` given `grad_out = ∂loss/∂output`.
    fn backward(&self, ctx: &CustomCtx<'_, T>, grad_out: &[T], input: usize, grad_in: &mut [T]);
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        inv_temp: T,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        dim: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Log {
        x: Var,
        floor: T,
    },
    Sum(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Cosine {
        a: Var,
        b: Var,
        n: usize,
        m: usize,
        d: usize,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
    },
    Normalize {
        x: Var,
        d: usize,
        norms: Vec<T>,
    },
    Repeat {
        x: Var,
        times: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

enum Value<T> {
    Owned(Vec<T>),
    Param(usize),
}

struct Node<T: Scalar> {
    value: Value<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward pass. Parameters are borrowed from the store, not copied.
pub struct Tape<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
    clamped_logs: usize,
    branches: u64,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradients of every parameter reachable from the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<'s, T: Scalar> Default for Tape<'s, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Scalar> Tape<'s, T> {
    /// A tape with no parameter store; only leaves can carry gradients.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            clamped_logs: 0,
            branches: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Tape {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `log` evaluations whose argument was clamped to the floor.
    pub fn clamped_logs(&self) -> usize {
        self.clamped_logs
    }

    /// Fingerprint of every branch taken by piecewise operations (which side
    /// of each ReLU and log floor). Two evaluations with equal fingerprints lie
    /// on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn record_branches(&mut self, taken: Vec<bool>) {
        let mut h = self.branches;
        for b in taken {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
        self.branches = h;
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(data) => data,
            Value::Param(id) => self.store.expect("param node without store").get(ParamId(*id)).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// First element of a node, typically a scalar loss.
    pub fn item(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value: Value::Owned(value),
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(NumError::shape(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    /// Records a parameter from the borrowed store (once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            value: Value::Param(id.0),
            shape: t.shape().to_vec(),
            op: Op::Param,
            needs_grad: t.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id.0, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Mul(a, b), ng))
    }

    /// `x[..., n] + bias[n]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(NumError::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let v: Vec<T> = self.value(x).iter().enumerate().map(|(i, &xi)| xi + b[i % n]).collect();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(v, self.shape(x).to_vec(), Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(x).iter().map(|&xi| xi * c).collect();
        let ng = self.needs(x);
        self.push(v, self.shape(x).to_vec(), Op::Scale(x, c), ng)
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<T> {
        if self.value(s).len() != 1 {
            return Err(NumError::shape(
                op,
                format!("expected one element, got {:?}", self.shape(s)),
            ));
        }
        Ok(self.value(s)[0])
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar("mul_scalar", s)?;
        let v = self.value(x).iter().map(|&xi| xi * c).collect();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(v, self.shape(x).to_vec(), Op::MulScalar(x, s), ng))
    }

    /// `x / s` for a one-element positive `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar("div_scalar", s)?;
        if c <= T::zero() {
            return Err(NumError::Parameter(format!("divisor must be positive, got {c}")));
        }
        let v = self.value(x).iter().map(|&xi| xi / c).collect();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(v, self.shape(x).to_vec(), Op::DivScalar(x, s), ng))
    }

    /// `a[..., k] · b[k×n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(NumError::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`, or `a · bᵀ` with `b[B×n×k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || NumError::shape("bmm", format!("{sa:?} · {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ai, bi, oi, m, k, n);
                } else {
                    gemm_nn(ai, bi, oi, m, k, n);
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(NumError::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_data(self.value(x), &shape, axes);
        let ng = self.needs(x);
        Ok(self.push(out, out_shape, Op::Permute { x, axes: axes.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(NumError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(v, shape.to_vec(), Op::Reshape(x), ng))
    }

    /// Softmax of `x / temperature` along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(NumError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumError::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let inv_temp = T::of(1.0 / temperature);
        let out = softmax_data(self.value(x), outer, len, inner, inv_temp);
        let ng = self.needs(x);
        Ok(self.push(
            out,
            shape,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                inv_temp,
            },
            ng,
        ))
    }

    /// Normalizes each vector along the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        if self.shape(gain) != [dim] || self.shape(bias) != [dim] {
            return Err(NumError::shape(
                "layer_norm",
                format!(
                    "input {shape:?}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = numel(&shape) / dim;
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![T::zero(); rows * dim];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * dim];
        let d = T::of(dim as f64);
        let eps = T::of(eps);
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..dim {
                let h = (row[j] - mean) * is;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                dim,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .iter()
            .map(|&xi| if xi > T::zero() { xi } else { T::zero() })
            .collect();
        let taken: Vec<bool> = self.value(x).iter().map(|&xi| xi > T::zero()).collect();
        self.record_branches(taken);
        let ng = self.needs(x);
        self.push(v, self.shape(x).to_vec(), Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&xi| gelu_parts(xi).0).collect();
        let ng = self.needs(x);
        self.push(v, self.shape(x).to_vec(), Op::Gelu(x), ng)
    }

    /// Natural log of `max(x, floor)`; clamped evaluations are counted.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::of(floor);
        let mut clamped = 0;
        let v = self
            .value(x)
            .iter()
            .map(|&xi| {
                if xi < floor {
                    clamped += 1;
                    floor.ln()
                } else {
                    xi.ln()
                }
            })
            .collect();
        self.clamped_logs += clamped;
        let taken: Vec<bool> = self.value(x).iter().map(|&xi| xi < floor).collect();
        self.record_branches(taken);
        let ng = self.needs(x);
        self.push(v, self.shape(x).to_vec(), Op::Log { x, floor }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.needs(x);
        self.push(vec![s], vec![1], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean along `axis`, removing that axis (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumError::shape("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::of(len as f64);
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s * inv;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.needs(x);
        Ok(self.push(out, out_shape, Op::MeanAxis { x, outer, len, inner }, ng))
    }

    /// Pairwise cosine similarities of the rows of `a[N×D]` and `b[M×D]`, shape `[N×M]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NumError::shape("cosine", format!("{sa:?} vs {sb:?}")));
        }
        let (n, d, m) = (sa[0], sa[1], sb[0]);
        let av = self.value(a);
        let bv = self.value(b);
        let norms = |v: &[T], rows: usize| -> Result<Vec<T>> {
            (0..rows)
                .map(|r| {
                    let row = &v[r * d..(r + 1) * d];
                    let nrm = dot(row, row).sqrt();
                    if nrm.as_f64() <= 1e-12 {
                        Err(NumError::DegenerateVector {
                            op: "cosine",
                            norm: nrm.as_f64(),
                        })
                    } else {
                        Ok(nrm)
                    }
                })
                .collect()
        };
        let a_norm = norms(av, n)?;
        let b_norm = norms(bv, m)?;
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]) / (a_norm[i] * b_norm[j]);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            vec![n, m],
            Op::Cosine {
                a,
                b,
                n,
                m,
                d,
                a_norm,
                b_norm,
            },
            ng,
        ))
    }

    /// Scales every vector along the last axis to unit Euclidean norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let nrm = dot(row, row).sqrt();
            if nrm.as_f64() <= 1e-12 {
                return Err(NumError::DegenerateVector {
                    op: "normalize",
                    norm: nrm.as_f64(),
                });
            }
            out.extend(row.iter().map(|&v| v / nrm));
            norms.push(nrm);
        }
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::Normalize { x, d, norms }, ng))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(NumError::shape("repeat", "zero copies".to_string()));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            out.extend_from_slice(xv);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::Repeat { x, times }, ng))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(NumError::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(NumError::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        let parts = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        Ok(self.push(out, shape, Op::Concat { parts, outer, inner }, ng))
    }

    /// Elements `start..start+count` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || count == 0 || start + count > shape[axis] {
            return Err(NumError::shape(
                "slice",
                format!("{start}..{} on axis {axis} of {shape:?}", start + count),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * len + start) * inner..(o * len + start + count) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = count;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            out_shape,
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            },
            ng,
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Vec<T>, shape: &[usize], op: Box<dyn CustomOp<T>>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(NumError::shape(
                op.name(),
                format!("shape {shape:?} vs {} values", value.len()),
            ));
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            value,
            shape.to_vec(),
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Param | Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (ParamId(p), v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = match &node.value {
            Value::Owned(v) => v.as_slice(),
            Value::Param(_) => return,
        };
        // Gradient buffer for an input, or None when the input is constant.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let len = self.value(v).len();
                    Some(
                        grads[v.0]
                            .get_or_insert_with(|| vec![T::zero(); len])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc!(*a) {
                    let bv = self.value(*b);
                    for ((x, &y), &bj) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * bj;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    let av = self.value(*a);
                    for ((x, &y), &aj) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * aj;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc!(*bias) {
                    let n = gb.len();
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % n] += y;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc!(*x) {
                    for (a, &y) in gx.iter_mut().zip(g) {
                        *a += y * *c;
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let c = self.value(*s)[0];
                if let Some(gx) = acc!(*x) {
                    for (a, &y) in gx.iter_mut().zip(g) {
                        *a += y * c;
                    }
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] += dot(g, self.value(*x));
                }
            }
            Op::DivScalar(x, s) => {
                let c = self.value(*s)[0];
                if let Some(gx) = acc!(*x) {
                    for (a, &y) in gx.iter_mut().zip(g) {
                        *a += y / c;
                    }
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] -= dot(g, self.value(*x)) / (c * c);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = acc!(*a) {
                    gemm_nt(g, self.value(*b), ga, *m, *n, *k);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(self.value(*a), g, gb, *k, *m, *n);
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = acc!(*a) {
                    let bv = self.value(*b);
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gi, bi, gai, m, n, k);
                        } else {
                            gemm_nt(gi, bi, gai, m, n, k);
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    let av = self.value(*a);
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // d(bᵀ) = aᵀ g  =>  d b = gᵀ a
                            gemm_tn(gi, ai, gbi, n, m, k);
                        } else {
                            gemm_tn(ai, gi, gbi, k, m, n);
                        }
                    }
                }
            }
            Op::Permute { x, axes } => {
                if let Some(gx) = acc!(*x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let back = permute_data(g, &node.shape, &inv);
                    add_into(gx, &back);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                inv_temp,
            } => {
                if let Some(gx) = acc!(*x) {
                    for o in 0..*outer {
                        for q in 0..*inner {
                            let idx = |l: usize| (o * len + l) * inner + q;
                            let mut s = T::zero();
                            for l in 0..*len {
                                s += g[idx(l)] * out[idx(l)];
                            }
                            for l in 0..*len {
                                gx[idx(l)] += out[idx(l)] * (g[idx(l)] - s) * *inv_temp;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                dim,
                xhat,
                inv_std,
            } => {
                let dim = *dim;
                let rows = xhat.len() / dim;
                if let Some(gg) = acc!(*gain) {
                    for r in 0..rows {
                        for j in 0..dim {
                            gg[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for r in 0..rows {
                        for j in 0..dim {
                            gb[j] += g[r * dim + j];
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let gain_v = self.value(*gain);
                    let d = T::of(dim as f64);
                    let mut dxhat = vec![T::zero(); dim];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..dim {
                            let v = g[r * dim + j] * gain_v[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[r * dim + j];
                        }
                        let is = inv_std[r];
                        for j in 0..dim {
                            gx[r * dim + j] += is / d * (d * dxhat[j] - s1 - xhat[r * dim + j] * s2);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((a, &y), &o) in gx.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *a += y;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = acc!(*x) {
                    let xv = self.value(*x);
                    for ((a, &y), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *a += y * gelu_parts(xi).1;
                    }
                }
            }
            Op::Log { x, floor } => {
                if let Some(gx) = acc!(*x) {
                    let xv = self.value(*x);
                    for ((a, &y), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi >= *floor {
                            *a += y / xi;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::MeanAxis { x, outer, len, inner } => {
                if let Some(gx) = acc!(*x) {
                    let inv = T::one() / T::of(*len as f64);
                    for o in 0..*outer {
                        for l in 0..*len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &y) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += y * inv;
                            }
                        }
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                n,
                m,
                d,
                a_norm,
                b_norm,
            } => {
                let (n, m, d) = (*n, *m, *d);
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = acc!(*a) {
                    for i in 0..n {
                        let ai = &av[i * d..(i + 1) * d];
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let c = out[i * m + j];
                            let bj = &bv[j * d..(j + 1) * d];
                            let s1 = gij / (a_norm[i] * b_norm[j]);
                            let s2 = gij * c / (a_norm[i] * a_norm[i]);
                            for t in 0..d {
                                ga[i * d + t] += s1 * bj[t] - s2 * ai[t];
                            }
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..m {
                        let bj = &bv[j * d..(j + 1) * d];
                        for i in 0..n {
                            let gij = g[i * m + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let c = out[i * m + j];
                            let ai = &av[i * d..(i + 1) * d];
                            let s1 = gij / (a_norm[i] * b_norm[j]);
                            let s2 = gij * c / (b_norm[j] * b_norm[j]);
                            for t in 0..d {
                                gb[j * d + t] += s1 * ai[t] - s2 * bj[t];
                            }
                        }
                    }
                }
            }
            Op::Normalize { x, d, norms } => {
                if let Some(gx) = acc!(*x) {
                    let d = *d;
                    for (r, &nrm) in norms.iter().enumerate() {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj = dot(gr, y);
                        for t in 0..d {
                            gx[r * d + t] += (gr[t] - proj * y[t]) / nrm;
                        }
                    }
                }
            }
            Op::Repeat { x, times } => {
                if let Some(gx) = acc!(*x) {
                    let len = gx.len();
                    for c in 0..*times {
                        add_into(gx, &g[c * len..(c + 1) * len]);
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if let Some(gp) = acc!(p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            } => {
                if let Some(gx) = acc!(*x) {
                    let count = node.shape.iter().product::<usize>() / (outer * inner);
                    for o in 0..*outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + count) * inner];
                        add_into(dst, &g[o * count * inner..(o + 1) * count * inner]);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ctx = CustomCtx {
                    inputs: inputs.iter().map(|&v| self.value(v)).collect(),
                    input_shapes: inputs.iter().map(|&v| self.shape(v)).collect(),
                    output: out,
                    output_shape: &node.shape,
                };
                for (k, &v) in inputs.iter().enumerate() {
                    if self.nodes[v.0].needs_grad {
                        let len = self.value(v).len();
                        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                        op.backward(&ctx, g, k, buf);
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-major permutation: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    // Trailing axes that stay in place move as contiguous blocks.
    let mut keep = rank;
    while keep > 0 && axes[keep - 1] == keep - 1 {
        keep -= 1;
    }
    if keep == 0 {
        return x.to_vec();
    }
    let block: usize = shape[keep..].iter().product();
    let outer_shape = &shape[..keep];
    let mut in_strides = vec![block; keep];
    for i in (0..keep - 1).rev() {
        in_strides[i] = in_strides[i + 1] * outer_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes[..keep].iter().map(|&a| outer_shape[a]).collect();
    let strides: Vec<usize> = axes[..keep].iter().map(|&a| in_strides[a]).collect();
    let count = x.len() / block;
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; keep];
    let mut src = 0usize;
    for _ in 0..count {
        out.extend_from_slice(&x[src..src + block]);
        for ax in (0..keep).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn softmax_data<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize, inv_temp: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for q in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + q;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(x[idx(l)]);
            }
            let mut s = T::zero();
            for l in 0..len {
                let e = ((x[idx(l)] - mx) * inv_temp).exp();
                out[idx(l)] = e;
                s += e;
            }
            for l in 0..len {
                out[idx(l)] /= s;
            }
        }
    }
    out
}
