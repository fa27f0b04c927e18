//! Forward and reverse passes for a stack of affine encoder layers followed
//! by a linear head. Columns are independent samples.

use super::Activation;
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Borrowed weights of one network evaluation. Encoder weights may be
/// effective (adapted) matrices rather than stored parameters.
pub(crate) struct Weights<'a> {
    pub enc_w: Vec<&'a Mat>,
    pub enc_b: Vec<&'a Mat>,
    pub head_w: &'a Mat,
    pub head_b: &'a Mat,
    pub activation: Activation,
}

/// Intermediate values kept for the reverse pass.
pub(crate) struct Trace {
    /// Input of each encoder layer.
    pub inputs: Vec<Mat>,
    /// Pre-activation output of each encoder layer.
    pub pre: Vec<Mat>,
    pub rep: Mat,
    pub out: Mat,
}

pub(crate) struct LayerGrads {
    pub enc_w: Vec<Mat>,
    pub enc_b: Vec<Mat>,
    pub head_w: Mat,
    pub head_b: Mat,
}

/// `w · x + b` with `b` (rows×1) broadcast across columns.
pub(crate) fn affine(w: &Mat, b: &Mat, x: &Mat) -> Result<Mat> {
    let mut z = w.matmul(x)?;
    if b.shape() != (z.rows(), 1) {
        return Err(Error::shape(
            "affine",
            format!("bias {:?} for output {:?}", b.shape(), z.shape()),
        ));
    }
    for i in 0..z.rows() {
        let bi = b[(i, 0)];
        for v in z.row_mut(i) {
            *v += bi;
        }
    }
    Ok(z)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`; relu uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl<'a> Weights<'a> {
    /// Encoder only: returns the representation.
    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        let n = self.enc_w.len();
        let mut h = x.clone();
        for i in 0..n {
            let z = affine(self.enc_w[i], self.enc_b[i], &h)?;
            h = if i + 1 < n {
                z.map(|v| self.activation.apply(v))
            } else {
                z
            };
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Mat) -> Result<Trace> {
        let n = self.enc_w.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.clone();
        for i in 0..n {
            let z = affine(self.enc_w[i], self.enc_b[i], &h)?;
            let next = if i + 1 < n {
                z.map(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        let out = affine(self.head_w, self.head_b, &h)?;
        Ok(Trace {
            inputs,
            pre,
            rep: h,
            out,
        })
    }

    /// Gradients of a scalar loss given `d_out = ∂loss/∂out`.
    pub fn backward(&self, trace: &Trace, d_out: &Mat) -> Result<LayerGrads> {
        let head_w = d_out.matmul_t(&trace.rep)?;
        let head_b = d_out.row_sums();
        let mut d_h = self.head_w.t_matmul(d_out)?;
        let n = self.enc_w.len();
        let mut enc_w = vec![Mat::zeros(0, 0); n];
        let mut enc_b = vec![Mat::zeros(0, 0); n];
        for i in (0..n).rev() {
            let d_z = if i + 1 < n {
                let mut d = d_h;
                let pre = trace.pre[i].data();
                for (g, &p) in d.data_mut().iter_mut().zip(pre) {
                    *g *= self.activation.derivative(p);
                }
                d
            } else {
                d_h
            };
            enc_w[i] = d_z.matmul_t(&trace.inputs[i])?;
            enc_b[i] = d_z.row_sums();
            d_h = if i > 0 {
                self.enc_w[i].t_matmul(&d_z)?
            } else {
                Mat::zeros(0, 0)
            };
        }
        Ok(LayerGrads {
            enc_w,
            enc_b,
            head_w,
            head_b,
        })
    }
}

/// Mean squared error over all entries and its gradient w.r.t. `pred`.
pub(crate) fn mse_and_grad(pred: &Mat, target: &Mat) -> Result<(f64, Mat)> {
    let diff = pred.sub(target)?;
    let n = (diff.rows() * diff.cols()) as f64;
    if n == 0.0 {
        return Err(Error::EmptyBatch);
    }
    let loss = diff.frobenius_sq() / n;
    let grad = diff.scale(2.0 / n);
    Ok((loss, grad))
}
