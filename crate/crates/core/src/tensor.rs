//! Dense f64 tensors, a reverse-mode tape, and Adam.
//!
//! The primitive set is exactly what the graph score network needs. Every
//! op validates shapes and traps non-finite outputs, so a divergence is
//! reported at the op that produced it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices whose extents match (m, k, n) under the
    // given strides, and `c` is a dense row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Silu(Var),
    MeanAxis(Var, usize),
    SumSquares(Var),
    PairwiseAdd(Var, Var, usize),
    /// Inputs, group size, and the SiLU derivative at every edge.
    PairSiluMean(Var, Var, usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward values and the ops that produced them, in creation
/// order. Creation order is a topological order, so backward is a single
/// reverse sweep.
#[derive(Debug, Default)]
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (&av.data, k as isize, 1),
            (&bv.data, n as isize, 1),
            &mut out,
        );
        self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            "matmul",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                av.shape, bv.shape
            )));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        self.push(Tensor { shape, data }, Op::Add(a, b), "add")
    }

    /// `a[n, m] + bias[m]`, bias repeated on every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, m) = av.dims2("add_row")?;
        if bv.len() != m {
            return Err(Error::Shape(format!(
                "add_row {:?} with bias {:?}",
                av.shape, bv.shape
            )));
        }
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data[i % m])
            .collect();
        let shape = av.shape.clone();
        self.push(Tensor { shape, data }, Op::AddRow(a, bias), "add_row")
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let rows = self.value(parts[0]).dims2("concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat")?;
            if r != rows {
                return Err(Error::Shape(format!("concat rows {rows} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::Concat(parts.to_vec()),
            "concat",
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Elementwise product with a constant (untracked) tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape != c.shape {
            return Err(Error::Shape(format!(
                "mul_const {:?} by {:?}",
                av.shape, c.shape
            )));
        }
        let data = av.data.iter().zip(&c.data).map(|(x, y)| x * y).collect();
        let shape = av.shape.clone();
        self.push(Tensor { shape, data }, Op::MulConst(a, c), "mul_const")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        self.push(out, Op::Silu(a), "silu")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.shape.len() || av.shape[axis] == 0 {
            return Err(Error::Shape(format!(
                "mean over axis {axis} of {:?}",
                av.shape
            )));
        }
        let (outer, len, inner) = split_axis(&av.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|x| *x *= inv);
        let mut shape = av.shape.clone();
        shape.remove(axis);
        self.push(Tensor { shape, data }, Op::MeanAxis(a, axis), "mean_axis")
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), "sum_squares")
    }

    /// Fully connected pair expansion within groups of `group` rows:
    /// `out[g*K + i, j, :] = a[g*K + i, :] + b[g*K + j, :]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, h) = av.dims2("pairwise_add")?;
        if bv.shape != av.shape || group == 0 || n % group != 0 {
            return Err(Error::Shape(format!(
                "pairwise_add {:?} and {:?} in groups of {group}",
                av.shape, bv.shape
            )));
        }
        let mut data = Vec::with_capacity(n * group * h);
        for row in 0..n {
            let base = (row / group) * group;
            let ar = &av.data[row * h..(row + 1) * h];
            for j in 0..group {
                let br = &bv.data[(base + j) * h..(base + j + 1) * h];
                data.extend(ar.iter().zip(br).map(|(x, y)| x + y));
            }
        }
        self.push(
            Tensor {
                shape: vec![n, group, h],
                data,
            },
            Op::PairwiseAdd(a, b, group),
            "pairwise_add",
        )
    }

    /// Fused `mean_axis(silu(pairwise_add(a, b, group)), 1)`:
    /// `out[g*K + i, :] = mean_j silu(a[g*K + i, :] + b[g*K + j, :])`.
    /// Avoids keeping the `[n, group, h]` intermediates on the tape.
    pub fn pair_silu_mean(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, h) = av.dims2("pair_silu_mean")?;
        if bv.shape != av.shape || group == 0 || n % group != 0 {
            return Err(Error::Shape(format!(
                "pair_silu_mean {:?} and {:?} in groups of {group}",
                av.shape, bv.shape
            )));
        }
        let inv = 1.0 / group as f64;
        let mut data = vec![0.0; n * h];
        let mut dsilu = Vec::with_capacity(n * group * h);
        for row in 0..n {
            let base = (row / group) * group;
            let ar = &av.data[row * h..(row + 1) * h];
            let out = &mut data[row * h..(row + 1) * h];
            for j in 0..group {
                let br = &bv.data[(base + j) * h..(base + j + 1) * h];
                for c in 0..h {
                    let x = ar[c] + br[c];
                    let sig = 1.0 / (1.0 + (-x).exp());
                    out[c] += x * sig * inv;
                    dsilu.push(sig * (1.0 + x * (1.0 - sig)));
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![n, h],
                data,
            },
            Op::PairSiluMean(a, b, group, dsilu),
            "pair_silu_mean",
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.value(loss).shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape[0], av.shape[1]);
                    let n = bv.shape[1];
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        (&g.data, n as isize, 1),
                        (&bv.data, 1, n as isize),
                        &mut da,
                    );
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        (&av.data, 1, k as isize),
                        (&g.data, n as isize, 1),
                        &mut db,
                    );
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: vec![m, k],
                            data: da,
                        },
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        Tensor {
                            shape: vec![k, n],
                            data: db,
                        },
                    );
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, bias) => {
                    let m = self.value(*bias).len();
                    let mut db = vec![0.0; m];
                    for (i, x) in g.data.iter().enumerate() {
                        db[i % m] += x;
                    }
                    let bshape = self.value(*bias).shape.clone();
                    accumulate(
                        &mut grads,
                        *bias,
                        Tensor {
                            shape: bshape,
                            data: db,
                        },
                    );
                    accumulate(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let rows = g.shape[0];
                    let total = g.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape[1];
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(
                                &g.data[r * total + offset..r * total + offset + w],
                            );
                        }
                        accumulate(
                            &mut grads,
                            p,
                            Tensor {
                                shape: vec![rows, w],
                                data: d,
                            },
                        );
                        offset += w;
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| c * x)),
                Op::MulConst(a, c) => {
                    let data = g.data.iter().zip(&c.data).map(|(x, y)| x * y).collect();
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: g.shape.clone(),
                            data,
                        },
                    );
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(x, &v)| x * silu_grad(v))
                        .collect();
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: g.shape.clone(),
                            data,
                        },
                    );
                }
                Op::MeanAxis(a, axis) => {
                    let shape = self.value(*a).shape.clone();
                    let (outer, len, inner) = split_axis(&shape, *axis);
                    let inv = 1.0 / len as f64;
                    let mut data = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = &g.data[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut data[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = s * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor { shape, data });
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.data[0];
                    accumulate(&mut grads, *a, self.value(*a).map(|x| s * x));
                }
                Op::PairwiseAdd(a, b, group) => {
                    let shape = self.value(*a).shape.clone();
                    let (n, h) = (shape[0], shape[1]);
                    let mut da = vec![0.0; n * h];
                    let mut db = vec![0.0; n * h];
                    for row in 0..n {
                        let base = (row / group) * group;
                        for j in 0..*group {
                            let src = &g.data[(row * group + j) * h..(row * group + j + 1) * h];
                            for c in 0..h {
                                da[row * h + c] += src[c];
                                db[(base + j) * h + c] += src[c];
                            }
                        }
                    }
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: shape.clone(),
                            data: da,
                        },
                    );
                    accumulate(&mut grads, *b, Tensor { shape, data: db });
                }
                Op::PairSiluMean(a, b, group, dsilu) => {
                    let shape = self.value(*a).shape.clone();
                    let (n, h) = (shape[0], shape[1]);
                    let inv = 1.0 / *group as f64;
                    let mut da = vec![0.0; n * h];
                    let mut db = vec![0.0; n * h];
                    for row in 0..n {
                        let base = (row / group) * group;
                        let gr = &g.data[row * h..(row + 1) * h];
                        for j in 0..*group {
                            let ds = &dsilu[(row * group + j) * h..(row * group + j + 1) * h];
                            let dbr = &mut db[(base + j) * h..(base + j + 1) * h];
                            for c in 0..h {
                                let v = gr[c] * ds[c] * inv;
                                da[row * h + c] += v;
                                dbr[c] += v;
                            }
                        }
                    }
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: shape.clone(),
                            data: da,
                        },
                    );
                    accumulate(&mut grads, *b, Tensor { shape, data: db });
                }
            }
        }
        let mut out: Vec<Option<Tensor>> = grads;
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                out[i] = None;
            }
        }
        Ok(Gradients {
            grads: out,
            shapes: self.nodes.into_iter().map(|n| n.value.shape).collect(),
        })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data
            .iter_mut()
            .zip(&g.data)
            .for_each(|(e, x)| *e += x),
        slot => *slot = Some(g),
    }
}

/// Gradients of the loss with respect to every leaf on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; leaves the loss does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape != g.shape || p.shape != m.shape {
            return Err(Error::Shape(format!(
                "adam: param {:?} vs grad {:?}",
                p.shape, g.shape
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("adam gradient".into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i].data, &mut state.v[i].data);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.data[j] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn silu_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let y = t.silu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let eye = t.leaf(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let av = t.leaf(a.clone());
        let out = t.matmul(eye, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn mean_over_rows() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1., 3., 5., 7.]).unwrap());
        let m = t.mean_axis(a, 0).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 5.0]);
        assert_eq!(t.value(m).shape(), &[2]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
        let c = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn overflow_is_trapped() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(1, 1, vec![1e300]).unwrap());
        assert!(matches!(t.sum_squares(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = t.sum_squares(w).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let loss = t.sum_squares(w).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(w), Err(Error::Shape(_))));
    }

    /// Two-layer net exercising every primitive.
    fn net(params: &[Tensor], x: &Tensor, c: &Tensor) -> Result<(Tape, Vec<Var>, Var)> {
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let xv = t.leaf(x.clone());
        let h = t.matmul(xv, vars[0])?;
        let h = t.add_row(h, vars[1])?;
        let h = t.silu(h)?;
        let p = t.matmul(h, vars[2])?;
        let q = t.matmul(h, vars[3])?;
        let e = t.pairwise_add(p, q, 2)?;
        let e = t.silu(e)?;
        let agg = t.mean_axis(e, 1)?;
        let cat = t.concat(&[agg, h])?;
        let s = t.scale(cat, 0.7)?;
        let s = t.mul_const(s, c.clone())?;
        let r = t.add(s, cat)?;
        let loss = t.sum_squares(r)?;
        Ok((t, vars, loss))
    }

    #[test]
    fn reverse_mode_matches_central_differences() {
        let mut r = rng::stream(42, 0);
        let params = vec![
            rand_tensor(&[3, 4], &mut r),
            rand_tensor(&[4], &mut r),
            rand_tensor(&[4, 4], &mut r),
            rand_tensor(&[4, 4], &mut r),
        ];
        let x = rand_tensor(&[4, 3], &mut r);
        let c = rand_tensor(&[4, 8], &mut r);
        let (tape, vars, loss) = net(&params, &x, &c).unwrap();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let g = grads.wrt(vars[pi]);
            for j in 0..p.len() {
                let eval = |delta: f64| {
                    let mut ps = params.clone();
                    ps[pi].data_mut()[j] += delta;
                    let (t, _, l) = net(&ps, &x, &c).unwrap();
                    t.value(l).item().unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-5, "param {pi}[{j}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn fused_pair_op_matches_composition() {
        let mut r = rng::stream(43, 0);
        let (a0, b0) = (rand_tensor(&[6, 5], &mut r), rand_tensor(&[6, 5], &mut r));
        let run = |fused: bool| {
            let mut t = Tape::new();
            let (a, b) = (t.leaf(a0.clone()), t.leaf(b0.clone()));
            let out = if fused {
                t.pair_silu_mean(a, b, 3).unwrap()
            } else {
                let e = t.pairwise_add(a, b, 3).unwrap();
                let e = t.silu(e).unwrap();
                t.mean_axis(e, 1).unwrap()
            };
            let value = t.value(out).clone();
            let loss = t.sum_squares(out).unwrap();
            let g = t.backward(loss).unwrap();
            (value, g.wrt(a), g.wrt(b))
        };
        let (x, y) = (run(true), run(false));
        for (p, q) in [(&x.0, &y.0), (&x.1, &y.1), (&x.2, &y.2)] {
            assert_eq!(p.shape(), q.shape());
            for (u, v) in p.data().iter().zip(q.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![Tensor::new(vec![3], vec![0.0; 3]).unwrap()];
        let mut st = AdamState::new(&p, 0.01);
        let g = Tensor::new(vec![3], vec![0.5, -3.0, 1e-2]).unwrap();
        adam_step(&mut p, &[g], &mut st).unwrap();
        let expect = [-0.01, 0.01, -0.01];
        for (a, b) in p[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_rejects_nan_and_bad_shapes() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&p, 0.01);
        let bad = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            adam_step(&mut p, &[bad], &mut st),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st),
            Err(Error::Shape(_))
        ));
    }
}
