//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::kernels;
use super::tape::Var;
use super::tensor::{ElementwiseKind, Reduction, Tensor};
use crate::error::{Error, Result};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// Fallible, tape-bound arithmetic; the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn elementwise(self, kind: ElementwiseKind, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.elementwise(kind, b.as_ref())?;
        Ok(self.tape().op(out, &[self, other], move |g| match kind {
            ElementwiseKind::Add => vec![Some(g.clone()), Some(g.clone())],
            ElementwiseKind::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            ElementwiseKind::Mul => vec![g.mul(&b).ok(), g.mul(&a).ok()],
            ElementwiseKind::Div => {
                let ga = g.zip_map(&b, |g, b| g / b).ok();
                let gb = Tensor::from_fn(g.shape().to_vec(), |i| {
                    let bv = b.data()[i];
                    -g.data()[i] * a.data()[i] / (bv * bv)
                });
                vec![ga, Some(gb)]
            }
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Div, other)
    }

    /// Element-wise op against a scalar right-hand side.
    pub fn elementwise_scalar(self, kind: ElementwiseKind, s: f64) -> Result<Var<'t>> {
        let out = self.value().elementwise(kind, s)?;
        Ok(self.tape().op(out, &[self], move |g| {
            vec![Some(match kind {
                ElementwiseKind::Add | ElementwiseKind::Sub => g.clone(),
                ElementwiseKind::Mul => g.scale(s),
                ElementwiseKind::Div => g.scale(1.0 / s),
            })]
        }))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v + s);
        self.tape().op(out, &[self], |g| vec![Some(g.clone())])
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape().op(out, &[self], move |g| vec![Some(g.scale(s))])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape().op(out, &[self], move |g| vec![g.zip_map(&x, |g, x| 2.0 * g * x).ok()])
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("sqrt of a negative value"));
        }
        let out = Rc::new(x.map(f64::sqrt));
        let y = Rc::clone(&out);
        Ok(self.tape().op((*out).clone(), &[self], move |g| vec![g.zip_map(&y, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }).ok()]))
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::abs);
        self.tape().op(out, &[self], move |g| vec![g.zip_map(&x, |g, x| g * sign(x)).ok()])
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape().op(out, &[self], move |g| vec![g.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 }).ok()])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        Ok(self.tape().op(out, &[self, other], move |g| {
            let ga = b.transpose().and_then(|bt| g.matmul(&bt)).ok();
            let gb = a.transpose().and_then(|at| at.matmul(g)).ok();
            vec![ga, gb]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.tape().op(out, &[self], |g| vec![g.transpose().ok()]))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().op(out, &[self], move |g| vec![g.reshape(in_shape.clone()).ok()]))
    }

    /// Full reduction to a scalar.
    pub fn reduce(self, kind: Reduction) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reduce(kind)?;
        let n = x.len() as f64;
        Ok(self.tape().op(Tensor::scalar(value), &[self], move |g| {
            let g = g.item();
            let xd = x.data();
            let grad = match kind {
                Reduction::Sum => Tensor::full(x.shape().to_vec(), g),
                Reduction::Mean => Tensor::full(x.shape().to_vec(), g / n),
                Reduction::L1 => x.map(|v| g * sign(v)),
                Reduction::L2 => {
                    if value > 0.0 {
                        x.map(|v| g * v / value)
                    } else {
                        Tensor::zeros(x.shape().to_vec())
                    }
                }
                Reduction::Std => {
                    let mean = xd.iter().sum::<f64>() / n;
                    if value > 0.0 {
                        x.map(|v| g * (v - mean) / (n * value))
                    } else {
                        Tensor::zeros(x.shape().to_vec())
                    }
                }
                Reduction::Min | Reduction::Max => {
                    let pos = xd.iter().position(|&v| v == value).unwrap_or(0);
                    let mut t = Tensor::zeros(x.shape().to_vec());
                    t.data_mut()[pos] = g;
                    t
                }
            };
            vec![Some(grad)]
        }))
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce(Reduction::Sum).expect("tensors are never empty")
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce(Reduction::Mean).expect("tensors are never empty")
    }

    /// Concatenates along the first dimension; trailing dims must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dimension("concat of nothing"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        if values.iter().any(|v| v.ndim() == 0 || v.shape()[1..] != tail[..]) {
            return Err(Error::dimension("concat parts disagree on trailing dims"));
        }
        let lead: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        let mut data = Vec::with_capacity(values.iter().map(|v| v.len()).sum());
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead.iter().sum()];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.len()).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape().op(out, parts, move |g| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&shapes)
                .map(|(&n, s)| {
                    let part = Tensor::new(s.clone(), g.data()[off..off + n].to_vec()).ok();
                    off += n;
                    part
                })
                .collect()
        }))
    }

    /// Concatenates matrices side by side (along columns).
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let transposed = parts.iter().map(|p| p.transpose()).collect::<Result<Vec<_>>>()?;
        Var::concat(&transposed)?.transpose()
    }

    /// Picks rows of a matrix in the given order.
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 2 || rows.iter().any(|&r| r >= x.rows()) || rows.is_empty() {
            return Err(Error::dimension(format!("select_rows {rows:?} from {:?}", x.shape())));
        }
        let n = x.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let out = Tensor::new([rows.len(), n], data)?;
        let rows = rows.to_vec();
        let in_shape = x.shape().to_vec();
        Ok(self.tape().op(out, &[self], move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..n {
                    gx.data_mut()[r * n + j] += g.data()[k * n + j];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Picks columns of a matrix in the given order.
    pub fn select_cols(self, cols: &[usize]) -> Result<Var<'t>> {
        self.transpose()?.select_rows(cols)?.transpose()
    }

    /// 2-D convolution of a `C×H×W` input with an `O×C×K×K` kernel, zero
    /// padding `K/2`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let out = kernels::conv2d_forward(&x, &w, &b, stride)?;
        Ok(self.tape().op(out, &[self, weight, bias], move |g| match kernels::conv2d_backward(&x, &w, &b, stride, g) {
            Ok((gx, gw, gb)) => vec![Some(gx), Some(gw), Some(gb)],
            Err(_) => vec![None, None, None],
        }))
    }

    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = kernels::avg_pool2_forward(&x)?;
        let shape = x.shape().to_vec();
        Ok(self.tape().op(out, &[self], move |g| vec![Some(kernels::avg_pool2_backward(&shape, g))]))
    }

    /// `C×H×W → C`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = kernels::global_avg_pool(&x)?;
        let shape = x.shape().to_vec();
        Ok(self.tape().op(out, &[self], move |g| {
            let n = shape[1] * shape[2];
            let grad = Tensor::from_fn(shape.clone(), |i| g.data()[i / n] / n as f64);
            vec![Some(grad)]
        }))
    }
}
