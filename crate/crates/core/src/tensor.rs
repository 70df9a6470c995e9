//! Dense row-major `f64` tensors and the bulk numeric kernels the layers
//! are built from.
//!
//! There is no implicit broadcasting. The only mixed-shape form is a tensor
//! combined with a scalar; everything else needs an explicit reshape.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    /// Row-major flat index of the maximum within the reduced axes. Ties
    /// resolve to the lowest index.
    ArgMax,
}

/// Right-hand side of an elementwise op.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl<'a> From<&'a Tensor> for Operand<'a> {
    fn from(t: &'a Tensor) -> Self {
        Operand::Tensor(t)
    }
}

impl From<f64> for Operand<'_> {
    fn from(v: f64) -> Self {
        Operand::Scalar(v)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if let Some(name) = &self.name {
            s.field("name", name);
        }
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        } else {
            s.field("data", &format_args!("[{} values]", self.data.len()));
        }
        s.finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

impl Tensor {
    /// Builds a tensor from row-major values. `data.len()` must equal the
    /// product of `shape`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        if data.len() != n {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            name: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            name: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            name: None,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    fn flat_index(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index of rank {} into tensor of rank {}",
                idx.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0;
        let mut stride = 1;
        for k in (0..idx.len()).rev() {
            if idx[k] >= self.shape[k] {
                return Err(Error::shape(format!(
                    "index {idx:?} out of bounds for shape {:?}",
                    self.shape
                )));
            }
            flat += idx[k] * stride;
            stride *= self.shape[k];
        }
        Ok(flat)
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(idx)?])
    }

    pub fn set(&mut self, idx: &[usize], value: f64) -> Result<()> {
        let flat = self.flat_index(idx)?;
        self.data[flat] = value;
        Ok(())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        self.clone().into_reshaped(shape)
    }

    pub fn into_reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            name: None,
        }
    }

    pub fn elementwise<'a>(&self, rhs: impl Into<Operand<'a>>, op: BinaryOp) -> Result<Tensor> {
        let apply = |a: f64, b: f64| match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Max => a.max(b),
        };
        let data = match rhs.into() {
            Operand::Scalar(b) => {
                if op == BinaryOp::Div && b == 0.0 {
                    return Err(Error::DivisionByZero(0));
                }
                self.data.iter().map(|&a| apply(a, b)).collect()
            }
            Operand::Tensor(t) => {
                if t.shape != self.shape {
                    return Err(Error::shape(format!(
                        "elementwise {op:?} between {:?} and {:?}",
                        self.shape, t.shape
                    )));
                }
                if op == BinaryOp::Div {
                    if let Some(i) = t.data.iter().position(|&b| b == 0.0) {
                        return Err(Error::DivisionByZero(i));
                    }
                }
                self.data
                    .iter()
                    .zip(&t.data)
                    .map(|(&a, &b)| apply(a, b))
                    .collect()
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            name: None,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, BinaryOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, BinaryOp::Sub)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// `self += rhs`, shapes must match.
    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if rhs.shape != self.shape {
            return Err(Error::shape(format!(
                "accumulate {:?} into {:?}",
                rhs.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = rhs.as_matrix()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &self.data, &rhs.data, &mut out);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&self, axes: &[usize], op: ReduceOp) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::shape(format!(
                    "axis {a} out of range for shape {:?}",
                    self.shape
                )));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&k| !reduced[k])
            .map(|k| self.shape[k])
            .collect();
        let count: usize = (0..rank)
            .filter(|&k| reduced[k])
            .map(|k| self.shape[k])
            .product();
        let out_len = numel(&out_shape);
        if count == 0 && op != ReduceOp::Sum && out_len > 0 {
            return Err(Error::shape(format!(
                "{op:?} over an empty extent of shape {:?}",
                self.shape
            )));
        }

        let init = match op {
            ReduceOp::Sum | ReduceOp::Mean => 0.0,
            ReduceOp::Max | ReduceOp::ArgMax => f64::NEG_INFINITY,
        };
        let mut acc = vec![init; out_len];
        let mut arg = vec![0usize; out_len];
        let mut seen = vec![false; out_len];

        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            let mut r = 0;
            for k in 0..rank {
                if reduced[k] {
                    r = r * self.shape[k] + idx[k];
                } else {
                    o = o * self.shape[k] + idx[k];
                }
            }
            match op {
                ReduceOp::Sum | ReduceOp::Mean => acc[o] += v,
                ReduceOp::Max | ReduceOp::ArgMax => {
                    if !seen[o] || v > acc[o] {
                        acc[o] = v;
                        arg[o] = r;
                        seen[o] = true;
                    }
                }
            }
            for k in (0..rank).rev() {
                idx[k] += 1;
                if idx[k] < self.shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }

        let data = match op {
            ReduceOp::Sum | ReduceOp::Max => acc,
            ReduceOp::Mean => acc.into_iter().map(|s| s / count as f64).collect(),
            ReduceOp::ArgMax => arg.into_iter().map(|i| i as f64).collect(),
        };
        Tensor::new(out_shape, data)
    }

    /// Index of the largest element, lowest index on ties.
    pub fn argmax_flat(&self) -> Option<usize> {
        argmax(&self.data)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(Error::shape(format!("concat axis {axis} for rank {rank}")));
    }
    for x in xs {
        let ok = x.ndim() == rank
            && (0..rank).all(|k| k == axis || x.shape[k] == first.shape[k]);
        if !ok {
            return Err(Error::shape(format!(
                "concat on axis {axis}: {:?} vs {:?}",
                first.shape, x.shape
            )));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total_axis: usize = xs.iter().map(|x| x.shape[axis]).sum();
    let mut shape = first.shape.clone();
    shape[axis] = total_axis;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for x in xs {
            let block = x.shape[axis] * inner;
            data.extend_from_slice(&x.data[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(shape, data)
}

/// Inverse of [`concat`]: cuts `x` along `axis` into pieces of the given
/// extents.
pub fn split(x: &Tensor, axis: usize, extents: &[usize]) -> Result<Vec<Tensor>> {
    let rank = x.ndim();
    if axis >= rank || extents.iter().sum::<usize>() != x.shape[axis] {
        return Err(Error::shape(format!(
            "split {:?} on axis {axis} into {extents:?}",
            x.shape
        )));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let row = x.shape[axis] * inner;
    let mut out = Vec::with_capacity(extents.len());
    let mut start = 0;
    for &e in extents {
        let mut shape = x.shape.clone();
        shape[axis] = e;
        let mut data = Vec::with_capacity(outer * e * inner);
        for o in 0..outer {
            let base = o * row + start * inner;
            data.extend_from_slice(&x.data[base..base + e * inner]);
        }
        out.push(Tensor::new(shape, data)?);
        start += e;
    }
    Ok(out)
}

/// `c += a · b` with `a` (m×k), `b` (k×n), `c` (m×n), all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` with `a` (k×m), `b` (k×n), `c` (m×n).
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for t in 0..k {
        let b_row = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = a[t * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a` (m×k), `b` (n×k), `c` (m×n).
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_and_read_back() {
        let z = Tensor::zeros(vec![2, 2]);
        assert_eq!(z.data(), &[0.0; 4]);
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
        let t = Tensor::new(vec![2, 3], (1..=6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]).unwrap(), 6.0);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn create_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_size_tensor() {
        let t = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert!(t.is_empty());
        let s = t.reduce(&[0], ReduceOp::Sum).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.0]);
        assert!(t.reduce(&[0], ReduceOp::Max).is_err());
    }

    #[test]
    fn elementwise_cases() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.elementwise(2.0, BinaryOp::Mul).unwrap().data(), &[2.0, 4.0]);
        let c = Tensor::new(vec![2], vec![-1.0, 5.0]).unwrap();
        assert_eq!(
            c.elementwise(&Tensor::zeros(vec![2]), BinaryOp::Max)
                .unwrap()
                .data(),
            &[0.0, 5.0]
        );
        assert!(a.elementwise(&Tensor::zeros(vec![3]), BinaryOp::Add).is_err());
        assert!(matches!(
            a.elementwise(&Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(), BinaryOp::Div),
            Err(Error::DivisionByZero(1))
        ));
        assert!(a.elementwise(0.0, BinaryOp::Div).is_err());
    }

    #[test]
    fn matmul_cases() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let r = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
        assert!(r.matmul(&r).is_err());
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut nn);
        let at = Tensor::new(vec![2, 3], a.clone()).unwrap().transpose2d().unwrap();
        let mut tn = vec![0.0; 8];
        gemm_tn(2, 3, 4, at.data(), &b, &mut tn);
        let bt = Tensor::new(vec![3, 4], b.clone()).unwrap().transpose2d().unwrap();
        let mut nt = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, bt.data(), &mut nt);
        for i in 0..8 {
            assert!((nn[i] - tn[i]).abs() < 1e-14);
            assert!((nn[i] - nt[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn reduce_cases() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.reduce(&[1], ReduceOp::Sum).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(m.reduce(&[0], ReduceOp::Sum).unwrap().data(), &[4.0, 6.0]);
        let r = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let mean = r.reduce(&[0, 1], ReduceOp::Mean).unwrap();
        assert_eq!(mean.shape(), &[] as &[usize]);
        assert_eq!(mean.data(), &[2.0]);
        let t = Tensor::new(vec![3], vec![5.0, 5.0, 1.0]).unwrap();
        assert_eq!(t.reduce(&[0], ReduceOp::ArgMax).unwrap().data(), &[0.0]);
        assert_eq!(argmax(&[5.0, 5.0, 1.0]), Some(0));
        assert!(m.reduce(&[2], ReduceOp::Sum).is_err());
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![3.0]).unwrap();
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(concat(&[&a], 0).unwrap(), a);
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap();
        let xy = concat(&[&x, &y], 1).unwrap();
        assert_eq!(xy.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let parts = split(&xy, 1, &[2, 1]).unwrap();
        assert_eq!(parts[0], x);
        assert_eq!(parts[1], y);
        assert!(concat(&[&x, &Tensor::zeros(vec![3, 1])], 1).is_err());
    }
}
