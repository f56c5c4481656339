//! Elementwise and broadcast-bias ops.

use super::autodiff::GradStore;
use super::op::OpKind;
use super::{Element, Tensor};
use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{} requires equal shapes, got {:?} and {:?}",
            op,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, rhs, "add")?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect()
        };
        Ok(Tensor::from_op(
            OpKind::Add,
            vec![self.clone(), rhs.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, rhs, "sub")?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| *x - *y).collect()
        };
        Ok(Tensor::from_op(
            OpKind::Sub,
            vec![self.clone(), rhs.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, rhs, "mul")?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect()
        };
        Ok(Tensor::from_op(
            OpKind::Mul,
            vec![self.clone(), rhs.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    pub fn div(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, rhs, "div")?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| *x / *y).collect()
        };
        Ok(Tensor::from_op(
            OpKind::Div,
            vec![self.clone(), rhs.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    pub fn add_scalar(&self, s: E) -> Tensor<E> {
        let data = self.data().iter().map(|x| *x + s).collect();
        Tensor::from_op(OpKind::AddScalar(s), vec![self.clone()], data, self.shape().to_vec())
    }

    pub fn mul_scalar(&self, s: E) -> Tensor<E> {
        let data = self.data().iter().map(|x| *x * s).collect();
        Tensor::from_op(OpKind::MulScalar(s), vec![self.clone()], data, self.shape().to_vec())
    }

    /// x + bias where bias.shape is a trailing suffix of x.shape; the bias is
    /// tiled over the leading axes.
    pub fn bias_add(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let xr = self.shape().len();
        let br = bias.shape().len();
        if br > xr || self.shape()[xr - br..] != *bias.shape() {
            return Err(Error::shape(format!(
                "bias_add requires bias shape to be a suffix of input shape, got {:?} and {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let blen = bias.numel().max(1);
        let data = {
            let (x, b) = (self.data(), bias.data());
            let mut out = Vec::with_capacity(x.len());
            for (i, v) in x.iter().enumerate() {
                out.push(*v + b[i % blen]);
            }
            out
        };
        Ok(Tensor::from_op(
            OpKind::BiasAdd,
            vec![self.clone(), bias.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    /// Exact-CDF form: 0.5 * x * (1 + erf(x / sqrt(2))).
    pub fn gelu(&self) -> Tensor<E> {
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data = self
            .data()
            .iter()
            .map(|x| half * *x * (E::ONE + (*x * inv_sqrt2).erf()))
            .collect();
        Tensor::from_op(OpKind::Gelu, vec![self.clone()], data, self.shape().to_vec())
    }

    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        let data = self
            .data()
            .iter()
            .map(|x| if *x > E::ZERO { *x } else { slope * *x })
            .collect();
        Tensor::from_op(OpKind::LeakyRelu(slope), vec![self.clone()], data, self.shape().to_vec())
    }

    /// ln(max(x, floor)); the floor keeps log-likelihood terms finite.
    pub fn ln_clamped(&self, floor: E) -> Tensor<E> {
        let data = self.data().iter().map(|x| x.maximum(floor).ln()).collect();
        Tensor::from_op(OpKind::Ln { floor }, vec![self.clone()], data, self.shape().to_vec())
    }
}

pub(crate) fn bias_add_backward<E: Element>(p: &[Tensor<E>], g: &[E], store: &mut GradStore<E>) {
    store.add(&p[0], g);
    if let Some(db) = store.buf(&p[1]) {
        let blen = db.len().max(1);
        for (i, gv) in g.iter().enumerate() {
            db[i % blen] += *gv;
        }
    }
}

pub(crate) fn gelu_backward<E: Element>(p: &[Tensor<E>], g: &[E], store: &mut GradStore<E>) {
    if !p[0].is_tracked() {
        return;
    }
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = E::from_f64(INV_SQRT_2PI);
    let x = p[0].data();
    let delta = g
        .iter()
        .zip(x.iter())
        .map(|(gv, xv)| {
            let cdf = half * (E::ONE + (*xv * inv_sqrt2).erf());
            let pdf = (-half * *xv * *xv).exp() * inv_sqrt_2pi;
            *gv * (cdf + *xv * pdf)
        })
        .collect();
    drop(x);
    store.add_owned(&p[0], delta);
}

pub(crate) fn leaky_relu_backward<E: Element>(p: &[Tensor<E>], g: &[E], slope: E, store: &mut GradStore<E>) {
    if !p[0].is_tracked() {
        return;
    }
    let x = p[0].data();
    let delta = g
        .iter()
        .zip(x.iter())
        .map(|(gv, xv)| if *xv > E::ZERO { *gv } else { *gv * slope })
        .collect();
    drop(x);
    store.add_owned(&p[0], delta);
}

pub(crate) fn ln_backward<E: Element>(p: &[Tensor<E>], g: &[E], floor: E, store: &mut GradStore<E>) {
    if !p[0].is_tracked() {
        return;
    }
    let x = p[0].data();
    let delta = g
        .iter()
        .zip(x.iter())
        .map(|(gv, xv)| if *xv > floor { *gv / *xv } else { E::ZERO })
        .collect();
    drop(x);
    store.add_owned(&p[0], delta);
}
