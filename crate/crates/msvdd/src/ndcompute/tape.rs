//! Reverse-mode tape over row-major f64 tensors.
//!
//! Every operation appends one node holding the forward values plus whatever
//! forward state its backward rule needs. `backward` walks the node list in
//! reverse exactly once, so gradients are deterministic for a fixed tape.
//! A tape is confined to one thread of control; tensors detached from any
//! tape are plain `Tensor` values and freely shareable.

use crate::ndcompute::nn::{self, LstmSaved};
use crate::robust::linalg;
use crate::{Error, Result};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// A detached tensor value: shape plus row-major 64-bit floats.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/value length mismatch");
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Matmul(TensorId, TensorId),
    MatVec(TensorId, TensorId),
    Transpose(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    MeanAxis0(TensorId),
    Concat0(Vec<TensorId>),
    StackRows(Vec<TensorId>),
    GatherRows(TensorId, Vec<usize>),
    RowBcastAdd(TensorId, TensorId),
    RowBcastSub(TensorId, TensorId),
    SubScalarT(TensorId, TensorId),
    RepeatRows(TensorId, usize),
    Reshape(TensorId),
    CropPadRows(TensorId),
    Relu(TensorId),
    Softplus(TensorId),
    Sqrt(TensorId),
    Recip(TensorId),
    Softmax(TensorId, usize),
    Huber(TensorId, TensorId),
    Conv1d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    Deconv1d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    Lstm { x: TensorId, w_ih: TensorId, w_hh: TensorId, b: TensorId, hidden: usize, saved: LstmSaved },
    /// Squared Mahalanobis distances of N rows; saves chol(Σ) and u_i = Σ⁻¹(z_i−μ).
    MahalanobisSq { z: TensorId, mu: TensorId, sigma: TensorId, solved: Vec<f64> },
    /// [λ_min, λ_max] with saved extremal eigenvectors.
    EigenExtremes { sigma: TensorId, vec_min: Vec<f64>, vec_max: Vec<f64> },
    DiagPart(TensorId),
    Select(TensorId, usize),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradient buffers produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Recording tape. All ops validate shapes and return `Error::Dimension`
/// on mismatch, naming both shapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: shapes {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t.shape, t.values, false, Op::Leaf)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, t: Tensor) -> TensorId {
        self.push(t.shape, t.values, true, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let values = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), values, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let values = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), values, self.rg(a) || self.rg(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let values = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), values, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "div")?;
        let values = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x / y).collect();
        Ok(self.push(self.shape(a).to_vec(), values, self.rg(a) || self.rg(b), Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let values = self.values(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), values, self.rg(a), Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let values = self.values(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), values, self.rg(a), Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), values, self.rg(a), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let values = self
            .values(a)
            .iter()
            .map(|&x| if x > 30.0 { x } else { x.exp().ln_1p() })
            .collect();
        self.push(self.shape(a).to_vec(), values, self.rg(a), Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|x| x.sqrt()).collect();
        self.push(self.shape(a).to_vec(), values, self.rg(a), Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|x| 1.0 / x).collect();
        self.push(self.shape(a).to_vec(), values, self.rg(a), Op::Recip(a))
    }

    // ---- matrix ------------------------------------------------------

    fn mat_dims(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!("{what}: expected matrix, got shape {other:?}"))),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.mat_dims(a, "matmul lhs")?;
        let (kb, n) = self.mat_dims(b, "matmul rhs")?;
        if ka != kb {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let x = av[i * ka + k];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        Ok(self.push(vec![m, n], out, self.rg(a) || self.rg(b), Op::Matmul(a, b)))
    }

    /// W [m×n] · v [n] -> [m]
    pub fn matvec(&mut self, w: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, n) = self.mat_dims(w, "matvec lhs")?;
        if self.shape(v) != [n] {
            return Err(dim_err("matvec", self.shape(w), self.shape(v)));
        }
        let wv = self.values(w);
        let vv = self.values(v);
        let out: Vec<f64> = (0..m)
            .map(|i| (0..n).map(|j| wv[i * n + j] * vv[j]).sum())
            .collect();
        Ok(self.push(vec![m], out, self.rg(w) || self.rg(v), Op::MatVec(w, v)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.mat_dims(a, "transpose")?;
        let av = self.values(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, self.rg(a), Op::Transpose(a)))
    }

    // ---- reductions & shape -----------------------------------------

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let v = self.values(a).iter().sum();
        self.push(vec![1], vec![v], self.rg(a), Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.values(a).len();
        if n == 0 {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        let v = self.values(a).iter().sum::<f64>() / n as f64;
        Ok(self.push(vec![1], vec![v], self.rg(a), Op::Mean(a)))
    }

    /// Mean over the first axis of a matrix: [R×C] -> [C].
    pub fn mean_axis0(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.mat_dims(a, "mean_axis0")?;
        if r == 0 {
            return Err(Error::Dimension("mean_axis0 of empty matrix".into()));
        }
        let av = self.values(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        Ok(self.push(vec![c], out, self.rg(a), Op::MeanAxis0(a)))
    }

    /// Concatenate along the first axis. 1-D inputs concatenate into one
    /// vector; matrices must agree in column count.
    pub fn concat0(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let mut values = Vec::new();
        let mut rows = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len() || (first.len() == 2 && sh[1] != first[1]) {
                return Err(dim_err("concat0", &first, sh));
            }
            rows += sh[0];
            values.extend_from_slice(self.values(p));
        }
        let shape = if first.len() == 2 { vec![rows, first[1]] } else { vec![rows] };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, values, rg, Op::Concat0(parts.to_vec())))
    }

    /// Stack n equal-length vectors into an [n×L] matrix.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack of zero tensors".into()));
        }
        let l = self.values(parts[0]).len();
        let mut values = Vec::with_capacity(parts.len() * l);
        for &p in parts {
            if self.values(p).len() != l || self.shape(p).len() != 1 {
                return Err(dim_err("stack_rows", self.shape(parts[0]), self.shape(p)));
            }
            values.extend_from_slice(self.values(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![parts.len(), l], values, rg, Op::StackRows(parts.to_vec())))
    }

    /// Select rows of a matrix by index (rows may repeat).
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (r, c) = self.mat_dims(a, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("gather_rows: row {bad} out of {r}")));
        }
        let av = self.values(a);
        let mut values = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            values.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![rows.len(), c], values, self.rg(a), Op::GatherRows(a, rows.to_vec())))
    }

    /// Matrix [R×C] plus a length-C row vector broadcast over rows.
    pub fn row_bcast_add(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (r, c) = self.mat_dims(a, "row_bcast_add")?;
        if self.shape(v) != [c] {
            return Err(dim_err("row_bcast_add", self.shape(a), self.shape(v)));
        }
        let av = self.values(a);
        let vv = self.values(v);
        let mut values = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                values.push(av[i * c + j] + vv[j]);
            }
        }
        Ok(self.push(vec![r, c], values, self.rg(a) || self.rg(v), Op::RowBcastAdd(a, v)))
    }

    /// Matrix [R×C] minus a length-C row vector broadcast over rows.
    pub fn row_bcast_sub(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (r, c) = self.mat_dims(a, "row_bcast_sub")?;
        if self.shape(v) != [c] {
            return Err(dim_err("row_bcast_sub", self.shape(a), self.shape(v)));
        }
        let av = self.values(a);
        let vv = self.values(v);
        let mut values = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                values.push(av[i * c + j] - vv[j]);
            }
        }
        Ok(self.push(vec![r, c], values, self.rg(a) || self.rg(v), Op::RowBcastSub(a, v)))
    }

    /// Tensor minus a scalar tensor, broadcast.
    pub fn sub_scalar_t(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.values(s).len() != 1 {
            return Err(dim_err("sub_scalar_t (rhs must be scalar)", self.shape(a), self.shape(s)));
        }
        let sv = self.values(s)[0];
        let values = self.values(a).iter().map(|x| x - sv).collect();
        Ok(self.push(self.shape(a).to_vec(), values, self.rg(a) || self.rg(s), Op::SubScalarT(a, s)))
    }

    /// Repeat a length-C vector as n rows: [C] -> [n×C].
    pub fn repeat_rows(&mut self, v: TensorId, n: usize) -> Result<TensorId> {
        if self.shape(v).len() != 1 || n == 0 {
            return Err(Error::Dimension(format!(
                "repeat_rows: need 1-D input and n > 0, got shape {:?}, n = {n}",
                self.shape(v)
            )));
        }
        let c = self.values(v).len();
        let mut values = Vec::with_capacity(n * c);
        for _ in 0..n {
            values.extend_from_slice(self.values(v));
        }
        Ok(self.push(vec![n, c], values, self.rg(v), Op::RepeatRows(v, n)))
    }

    /// Reinterpret the value buffer under a new shape (same length).
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.values(a).len() {
            return Err(dim_err("reshape", self.shape(a), &shape));
        }
        let values = self.values(a).to_vec();
        Ok(self.push(shape, values, self.rg(a), Op::Reshape(a)))
    }

    /// Crop or zero-pad a matrix along the first axis to exactly `rows`.
    pub fn crop_pad_rows(&mut self, a: TensorId, rows: usize) -> Result<TensorId> {
        let (r, c) = self.mat_dims(a, "crop_pad_rows")?;
        let mut values = vec![0.0; rows * c];
        let keep = r.min(rows);
        values[..keep * c].copy_from_slice(&self.values(a)[..keep * c]);
        Ok(self.push(vec![rows, c], values, self.rg(a), Op::CropPadRows(a)))
    }

    pub fn select(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        if index >= self.values(a).len() {
            return Err(Error::Dimension(format!(
                "select: index {index} out of {}",
                self.values(a).len()
            )));
        }
        let v = self.values(a)[index];
        Ok(self.push(vec![1], vec![v], self.rg(a), Op::Select(a, index)))
    }

    pub fn diag_part(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.mat_dims(a, "diag_part")?;
        if r != c {
            return Err(Error::Dimension(format!("diag_part: matrix not square: {r}×{c}")));
        }
        let values = (0..r).map(|i| self.values(a)[i * c + i]).collect();
        Ok(self.push(vec![r], values, self.rg(a), Op::DiagPart(a)))
    }

    // ---- nonlinear blocks -------------------------------------------

    /// Softmax along `axis` of a 1-D or 2-D tensor, with max-subtraction.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax: axis {axis} out of shape {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(Error::Dimension("softmax over empty axis".into()));
        }
        let av = self.values(a).to_vec();
        let mut out = vec![0.0; av.len()];
        let (slices, len, stride) = match (shape.as_slice(), axis) {
            ([_n], 0) => (1usize, av.len(), 1usize),
            ([r, c], 1) => (*r, *c, 1usize),
            ([r, c], 0) => (*c, *r, *c),
            _ => {
                return Err(Error::Dimension(format!(
                    "softmax: unsupported shape {shape:?} axis {axis}"
                )))
            }
        };
        for sl in 0..slices {
            let base = if stride == 1 { sl * len } else { sl };
            let idx = |i: usize| base + i * stride;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(av[idx(i)]);
            }
            let mut denom = 0.0;
            for i in 0..len {
                let e = (av[idx(i)] - mx).exp();
                out[idx(i)] = e;
                denom += e;
            }
            for i in 0..len {
                out[idx(i)] /= denom;
            }
        }
        Ok(self.push(shape, out, self.rg(a), Op::Softmax(a, axis)))
    }

    /// Mean elementwise Huber loss with unit transition.
    pub fn huber(&mut self, y: TensorId, yhat: TensorId) -> Result<TensorId> {
        self.binary_same_shape(y, yhat, "huber")?;
        let n = self.values(y).len() as f64;
        let v = self
            .values(y)
            .iter()
            .zip(self.values(yhat))
            .map(|(a, b)| {
                let e = (a - b).abs();
                if e <= 1.0 {
                    0.5 * e * e
                } else {
                    e - 0.5
                }
            })
            .sum::<f64>()
            / n;
        Ok(self.push(vec![1], vec![v], self.rg(y) || self.rg(yhat), Op::Huber(y, yhat)))
    }

    /// 1-D convolution (cross-correlation). x: [T×Cin], w: [Cout×Cin×K],
    /// b: [Cout] -> [T'×Cout].
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (t, cin) = self.mat_dims(x, "conv1d input")?;
        let (cout, wcin, k) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            other => return Err(Error::Dimension(format!("conv1d weights must be [Cout×Cin×K], got {other:?}"))),
        };
        if wcin != cin || self.shape(b) != [cout] {
            return Err(dim_err("conv1d weights", self.shape(x), self.shape(w)));
        }
        let t_out = nn::conv1d_out_len(t, k, stride, pad).ok_or_else(|| {
            Error::Dimension(format!(
                "conv1d: kernel {k} larger than padded input {t}+2·{pad} (or stride 0)"
            ))
        })?;
        let out = nn::conv1d_forward(self.values(x), t, cin, self.values(w), cout, k, self.values(b), stride, pad);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![t_out, cout], out, rg, Op::Conv1d { x, w, b, stride, pad }))
    }

    /// 1-D transposed convolution. x: [T×Cin], w: [Cin×Cout×K], b: [Cout]
    /// -> [T'×Cout] with T' = (T−1)·stride − 2·pad + K.
    pub fn deconv1d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (t, cin) = self.mat_dims(x, "deconv1d input")?;
        let (wcin, cout, k) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            other => return Err(Error::Dimension(format!("deconv1d weights must be [Cin×Cout×K], got {other:?}"))),
        };
        if wcin != cin || self.shape(b) != [cout] {
            return Err(dim_err("deconv1d weights", self.shape(x), self.shape(w)));
        }
        let t_out = nn::deconv1d_out_len(t, k, stride, pad).ok_or_else(|| {
            Error::Dimension(format!(
                "deconv1d: nonpositive output length for T = {t}, K = {k}, stride = {stride}, pad = {pad}"
            ))
        })? as usize;
        let out = nn::deconv1d_forward(self.values(x), t, cin, self.values(w), cout, k, self.values(b), stride, pad);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![t_out, cout], out, rg, Op::Deconv1d { x, w, b, stride, pad }))
    }

    /// LSTM with zero initial state. x: [T×Cin], w_ih: [4H×Cin],
    /// w_hh: [4H×H], b: [4H] -> hidden sequence [T×H].
    pub fn lstm(&mut self, x: TensorId, w_ih: TensorId, w_hh: TensorId, b: TensorId, hidden: usize) -> Result<TensorId> {
        let (t, cin) = self.mat_dims(x, "lstm input")?;
        if t < 1 {
            return Err(Error::Dimension("lstm needs T >= 1".into()));
        }
        let h = hidden;
        if self.shape(w_ih) != [4 * h, cin] {
            return Err(dim_err("lstm w_ih", self.shape(w_ih), &[4 * h, cin]));
        }
        if self.shape(w_hh) != [4 * h, h] {
            return Err(dim_err("lstm w_hh", self.shape(w_hh), &[4 * h, h]));
        }
        if self.shape(b) != [4 * h] {
            return Err(dim_err("lstm bias", self.shape(b), &[4 * h]));
        }
        let (out, saved) = nn::lstm_forward(self.values(x), t, cin, self.values(w_ih), self.values(w_hh), self.values(b), h);
        let rg = self.rg(x) || self.rg(w_ih) || self.rg(w_hh) || self.rg(b);
        Ok(self.push(vec![t, h], out, rg, Op::Lstm { x, w_ih, w_hh, b, hidden, saved }))
    }

    /// Squared Mahalanobis distance of each row of z to (mu, sigma), solved
    /// through the Cholesky factor of sigma (never an explicit inverse).
    /// z: [N×s], mu: [s], sigma: [s×s] -> [N].
    pub fn mahalanobis_sq(&mut self, z: TensorId, mu: TensorId, sigma: TensorId) -> Result<TensorId> {
        let (n, s) = self.mat_dims(z, "mahalanobis_sq z")?;
        if self.shape(mu) != [s] || self.shape(sigma) != [s, s] {
            return Err(dim_err("mahalanobis_sq", self.shape(mu), self.shape(sigma)));
        }
        let chol = linalg::cholesky(self.values(sigma), s)?;
        let muv = self.values(mu).to_vec();
        let zv = self.values(z);
        let mut out = vec![0.0; n];
        let mut solved = vec![0.0; n * s]; // u_i = Σ⁻¹ (z_i − μ)
        for i in 0..n {
            let diff: Vec<f64> = zv[i * s..(i + 1) * s].iter().zip(&muv).map(|(a, b)| a - b).collect();
            let u = linalg::chol_solve(&chol, s, &diff);
            out[i] = diff.iter().zip(&u).map(|(d, u)| d * u).sum();
            solved[i * s..(i + 1) * s].copy_from_slice(&u);
        }
        let rg = self.rg(z) || self.rg(mu) || self.rg(sigma);
        Ok(self.push(vec![n], out, rg, Op::MahalanobisSq { z, mu, sigma, solved }))
    }

    /// Extremal eigenvalues of a symmetric matrix: returns [λ_min, λ_max].
    /// Gradients use dλ = vᵀ dΣ v, valid for simple eigenvalues.
    pub fn eigen_extremes(&mut self, sigma: TensorId) -> Result<TensorId> {
        let (r, c) = self.mat_dims(sigma, "eigen_extremes")?;
        if r != c {
            return Err(Error::Dimension(format!("eigen_extremes: matrix not square: {r}×{c}")));
        }
        let (lmin, lmax, vmin, vmax) = crate::robust::eigen_extremes(self.values(sigma), r)?;
        let rg = self.rg(sigma);
        Ok(self.push(
            vec![2],
            vec![lmin, lmax],
            rg,
            Op::EigenExtremes { sigma, vec_min: vmin, vec_max: vmax },
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar loss. Visits each node exactly once.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.values(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn ensure<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: TensorId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![0.0; self.nodes[id.0].values.len()]);
        }
        grads[id.0].as_mut()
    }

    #[allow(clippy::needless_range_loop)]
    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.ensure(grads, *b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.ensure(grads, *b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.values(*a).to_vec();
                let bv = self.values(*b).to_vec();
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.ensure(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let av = self.values(*a).to_vec();
                let bv = self.values(*b).to_vec();
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if let Some(gb) = self.ensure(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.values(*a).to_vec();
                let bv = self.values(*b).to_vec();
                if let Some(ga) = self.ensure(grads, *a) {
                    // dA = G Bᵀ
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                ga[i * k + kk] += gv * bv[kk * n + j];
                            }
                        }
                    }
                }
                if let Some(gb) = self.ensure(grads, *b) {
                    // dB = Aᵀ G
                    for i in 0..m {
                        for kk in 0..k {
                            let a_ik = av[i * k + kk];
                            if a_ik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[kk * n + j] += a_ik * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::MatVec(w, v) => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let wv = self.values(*w).to_vec();
                let vv = self.values(*v).to_vec();
                if let Some(gw) = self.ensure(grads, *w) {
                    for i in 0..m {
                        for j in 0..n {
                            gw[i * n + j] += g[i] * vv[j];
                        }
                    }
                }
                if let Some(gv) = self.ensure(grads, *v) {
                    for i in 0..m {
                        for j in 0..n {
                            gv[j] += wv[i * n + j] * g[i];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.values(*a).len() as f64;
                if let Some(ga) = self.ensure(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                }
            }
            Op::MeanAxis0(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::Concat0(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.values(p).len();
                    if let Some(gp) = self.ensure(grads, p) {
                        for i in 0..len {
                            gp[i] += g[offset + i];
                        }
                    }
                    offset += len;
                }
            }
            Op::StackRows(parts) => {
                let l = self.values(parts[0]).len();
                for (row, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.ensure(grads, p) {
                        for i in 0..l {
                            gp[i] += g[row * l + i];
                        }
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let c = self.shape(*a)[1];
                if let Some(ga) = self.ensure(grads, *a) {
                    for (out_row, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[out_row * c + j];
                        }
                    }
                }
            }
            Op::RowBcastAdd(a, v) | Op::RowBcastSub(a, v) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let sign = if matches!(node.op, Op::RowBcastAdd(..)) { 1.0 } else { -1.0 };
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..r * c {
                        ga[i] += g[i];
                    }
                }
                if let Some(gv) = self.ensure(grads, *v) {
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += sign * g[i * c + j];
                        }
                    }
                }
            }
            Op::SubScalarT(a, s) => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                }
                if let Some(gs) = self.ensure(grads, *s) {
                    gs[0] -= g.iter().sum::<f64>();
                }
            }
            Op::RepeatRows(v, n) => {
                let c = self.values(*v).len();
                if let Some(gv) = self.ensure(grads, *v) {
                    for i in 0..*n {
                        for j in 0..c {
                            gv[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::CropPadRows(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let rows = node.shape[0];
                let keep = r.min(rows);
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..keep * c {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.values(*a).to_vec();
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        // subgradient 0 at exactly 0
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.values(*a).to_vec();
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        let s = if av[i] >= 0.0 {
                            1.0 / (1.0 + (-av[i]).exp())
                        } else {
                            let e = av[i].exp();
                            e / (1.0 + e)
                        };
                        ga[i] += g[i] * s;
                    }
                }
            }
            Op::Sqrt(a) => {
                let out = &node.values;
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * 0.5 / out[i];
                    }
                }
            }
            Op::Recip(a) => {
                let av = self.values(*a).to_vec();
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] -= g[i] / (av[i] * av[i]);
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let shape = &node.shape;
                let y = &node.values;
                let (slices, len, stride) = match (shape.as_slice(), *axis) {
                    ([_n], 0) => (1usize, y.len(), 1usize),
                    ([r, c], 1) => (*r, *c, 1usize),
                    ([r, c], 0) => (*c, *r, *c),
                    _ => unreachable!("validated in forward"),
                };
                if let Some(ga) = self.ensure(grads, *a) {
                    for sl in 0..slices {
                        let base = if stride == 1 { sl * len } else { sl };
                        let idx = |i: usize| base + i * stride;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
            Op::Huber(yid, yhatid) => {
                let yv = self.values(*yid).to_vec();
                let yhv = self.values(*yhatid).to_vec();
                let n = yv.len() as f64;
                let scale = g[0] / n;
                // d/de (huber) = clamp(e, -1, 1) with e = y − ŷ
                if let Some(gy) = self.ensure(grads, *yid) {
                    for i in 0..yv.len() {
                        let e = (yv[i] - yhv[i]).clamp(-1.0, 1.0);
                        gy[i] += scale * e;
                    }
                }
                if let Some(gyh) = self.ensure(grads, *yhatid) {
                    for i in 0..yv.len() {
                        let e = (yv[i] - yhv[i]).clamp(-1.0, 1.0);
                        gyh[i] -= scale * e;
                    }
                }
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (t, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (cout, _, k) = (self.shape(*w)[0], self.shape(*w)[1], self.shape(*w)[2]);
                let xv = self.values(*x).to_vec();
                let wv = self.values(*w).to_vec();
                // split mutable borrows by taking buffers out one at a time
                let mut gx = self.ensure(grads, *x).map(std::mem::take);
                let mut gw = self.ensure(grads, *w).map(std::mem::take);
                let mut gb = self.ensure(grads, *b).map(std::mem::take);
                nn::conv1d_backward(
                    &xv, t, cin, &wv, cout, k, *stride, *pad, g,
                    gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut(),
                );
                if let Some(v) = gx { grads[x.0] = Some(v); }
                if let Some(v) = gw { grads[w.0] = Some(v); }
                if let Some(v) = gb { grads[b.0] = Some(v); }
            }
            Op::Deconv1d { x, w, b, stride, pad } => {
                let (t, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (_, cout, k) = (self.shape(*w)[0], self.shape(*w)[1], self.shape(*w)[2]);
                let t_out = node.shape[0];
                let xv = self.values(*x).to_vec();
                let wv = self.values(*w).to_vec();
                let mut gx = self.ensure(grads, *x).map(std::mem::take);
                let mut gw = self.ensure(grads, *w).map(std::mem::take);
                let mut gb = self.ensure(grads, *b).map(std::mem::take);
                nn::deconv1d_backward(
                    &xv, t, cin, &wv, cout, k, *stride, *pad, g, t_out,
                    gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut(),
                );
                if let Some(v) = gx { grads[x.0] = Some(v); }
                if let Some(v) = gw { grads[w.0] = Some(v); }
                if let Some(v) = gb { grads[b.0] = Some(v); }
            }
            Op::Lstm { x, w_ih, w_hh, b, hidden, saved } => {
                let (t, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.values(*x).to_vec();
                let wihv = self.values(*w_ih).to_vec();
                let whhv = self.values(*w_hh).to_vec();
                let out = node.values.clone();
                let mut gx = self.ensure(grads, *x).map(std::mem::take);
                let mut gwih = self.ensure(grads, *w_ih).map(std::mem::take);
                let mut gwhh = self.ensure(grads, *w_hh).map(std::mem::take);
                let mut gb = self.ensure(grads, *b).map(std::mem::take);
                nn::lstm_backward(
                    &xv, t, cin, &wihv, &whhv, *hidden, &out, saved, g,
                    gx.as_deref_mut(), gwih.as_deref_mut(), gwhh.as_deref_mut(), gb.as_deref_mut(),
                );
                if let Some(v) = gx { grads[x.0] = Some(v); }
                if let Some(v) = gwih { grads[w_ih.0] = Some(v); }
                if let Some(v) = gwhh { grads[w_hh.0] = Some(v); }
                if let Some(v) = gb { grads[b.0] = Some(v); }
            }
            Op::MahalanobisSq { z, mu, sigma, solved } => {
                let (n, s) = (self.shape(*z)[0], self.shape(*z)[1]);
                // dq_i/dz_i = 2 u_i, dq_i/dμ = −2 u_i, dq_i/dΣ = −u_i u_iᵀ
                if let Some(gz) = self.ensure(grads, *z) {
                    for i in 0..n {
                        for j in 0..s {
                            gz[i * s + j] += g[i] * 2.0 * solved[i * s + j];
                        }
                    }
                }
                if let Some(gmu) = self.ensure(grads, *mu) {
                    for i in 0..n {
                        for j in 0..s {
                            gmu[j] -= g[i] * 2.0 * solved[i * s + j];
                        }
                    }
                }
                if let Some(gs) = self.ensure(grads, *sigma) {
                    for i in 0..n {
                        if g[i] == 0.0 {
                            continue;
                        }
                        let u = &solved[i * s..(i + 1) * s];
                        for r in 0..s {
                            for c in 0..s {
                                gs[r * s + c] -= g[i] * u[r] * u[c];
                            }
                        }
                    }
                }
            }
            Op::EigenExtremes { sigma, vec_min, vec_max } => {
                let s = self.shape(*sigma)[0];
                if let Some(gs) = self.ensure(grads, *sigma) {
                    for r in 0..s {
                        for c in 0..s {
                            gs[r * s + c] += g[0] * vec_min[r] * vec_min[c] + g[1] * vec_max[r] * vec_max[c];
                        }
                    }
                }
            }
            Op::DiagPart(a) => {
                let s = self.shape(*a)[0];
                if let Some(ga) = self.ensure(grads, *a) {
                    for i in 0..s {
                        ga[i * s + i] += g[i];
                    }
                }
            }
            Op::Select(a, index) => {
                if let Some(ga) = self.ensure(grads, *a) {
                    ga[*index] += g[0];
                }
            }
        }
    }
}
