use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{NetParams, ParamId};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Affine map on rows: `y = x W + b`, `W` shaped `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        p: &mut NetParams,
        name: &str,
        group: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = p.add_uniform(&format!("{name}.w"), group, &[inputs, outputs], inputs, rng)?;
        let b = if bias {
            Some(p.add_uniform(&format!("{name}.b"), group, &[outputs], inputs, rng)?)
        } else {
            None
        };
        Ok(Self { w, b, inputs, outputs })
    }

    pub fn forward(&self, p: &NetParams, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, p.value(self.w))?;
        if let Some(b) = self.b {
            let bias = p.value(b).data();
            let (rows, cols) = y.dims2()?;
            let d = y.data_mut();
            for i in 0..rows {
                for j in 0..cols {
                    d[i * cols + j] += bias[j];
                }
            }
        }
        Ok(y)
    }

    /// Accumulate parameter gradients and return `dL/dx`.
    pub fn backward(&self, p: &mut NetParams, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let dw = matmul_tn(x, dy)?;
        p.accumulate(self.w, &dw)?;
        if let Some(b) = self.b {
            let (rows, cols) = dy.dims2()?;
            let g = p.grad_mut(b);
            for i in 0..rows {
                for j in 0..cols {
                    g[j] += dy.data()[i * cols + j];
                }
            }
        }
        matmul_nt(dy, p.value(self.w))
    }

    /// `dL/dx` only, leaving parameter gradients alone.
    pub fn backward_input(&self, p: &NetParams, dy: &Tensor) -> Result<Tensor> {
        matmul_nt(dy, p.value(self.w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply(v))
    }

    /// `dL/dx` given pre-activation `x` and `dL/dy`.
    pub fn backward(self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        x.zip(dy, |v, g| self.derivative(v) * g)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-row normalization with learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(p: &mut NetParams, name: &str, group: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.add_filled(&format!("{name}.gamma"), group, &[width], 1.0)?,
            beta: p.add_zeros(&format!("{name}.beta"), group, &[width])?,
            width,
            eps: 1e-5,
        })
    }

    /// Normalized rows before the affine step.
    pub fn normalize(&self, x: &Tensor) -> Result<LayerNormCache> {
        let (rows, cols) = x.dims2()?;
        if cols != self.width {
            return Err(Error::Shape(format!("layer norm width {} vs {cols}", self.width)));
        }
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + self.eps).sqrt();
            xhat.extend(r.iter().map(|v| (v - mean) * s));
            inv_std.push(s);
        }
        Ok(LayerNormCache {
            xhat: Tensor::new(&[rows, cols], xhat)?,
            inv_std,
        })
    }

    pub fn forward(&self, p: &NetParams, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let cache = self.normalize(x)?;
        let g = p.value(self.gamma).data();
        let b = p.value(self.beta).data();
        let cols = self.width;
        let mut y = cache.xhat.clone();
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            let j = k % cols;
            *v = *v * g[j] + b[j];
        }
        Ok((y, cache))
    }

    pub fn backward(
        &self,
        p: &mut NetParams,
        cache: &LayerNormCache,
        dy: &Tensor,
        param_grads: bool,
    ) -> Result<Tensor> {
        let (rows, cols) = dy.dims2()?;
        let n = cols as f64;
        if param_grads {
            let mut dg = vec![0.0; cols];
            let mut db = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    let g = dy.data()[i * cols + j];
                    dg[j] += g * cache.xhat.data()[i * cols + j];
                    db[j] += g;
                }
            }
            p.accumulate(self.gamma, &Tensor::vector(dg))?;
            p.accumulate(self.beta, &Tensor::vector(db))?;
        }
        let gamma = p.value(self.gamma).data();
        let mut dx = vec![0.0; rows * cols];
        for i in 0..rows {
            let xh = cache.xhat.row(i);
            let dyr = dy.row(i);
            let dxh: Vec<f64> = (0..cols).map(|j| dyr[j] * gamma[j]).collect();
            let s1: f64 = dxh.iter().sum();
            let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
            for j in 0..cols {
                dx[i * cols + j] = cache.inv_std[i] / n * (n * dxh[j] - s1 - xh[j] * s2);
            }
        }
        Tensor::new(&[rows, cols], dx)
    }
}

/// 2-D convolution over `[channels, height, width]` tensors.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut NetParams,
        name: &str,
        group: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        Ok(Self {
            w: p.add_uniform(
                &format!("{name}.w"),
                group,
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            )?,
            b: p.add_uniform(&format!("{name}.b"), group, &[out_channels], fan_in, rng)?,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize)> {
        match x.shape()[..] {
            [c, h, w] if c == self.in_channels && h + 2 * self.padding >= self.kernel => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "conv expects [{}, h, w], got {:?}",
                self.in_channels,
                x.shape()
            ))),
        }
    }

    pub fn forward(&self, p: &NetParams, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.dims(x)?;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let wt = p.value(self.w).data();
        let bias = p.value(self.b).data();
        let xd = x.data();
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for o in 0..self.out_channels {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..self.in_channels {
                let xc = &xd[c * h * w..(c + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = wt[((o * self.in_channels + c) * k + ki) * k + kj];
                        for i in 0..oh {
                            let y = (i * self.stride + ki) as isize - self.padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = &xc[y as usize * w..(y as usize + 1) * w];
                            let orow = &mut plane[i * ow..(i + 1) * ow];
                            for (j, ov) in orow.iter_mut().enumerate() {
                                let xx = (j * self.stride + kj) as isize - self.padding as isize;
                                if xx >= 0 && xx < w as isize {
                                    *ov += wv * xrow[xx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[self.out_channels, oh, ow], out)
    }

    pub fn backward(&self, p: &mut NetParams, x: &Tensor, dy: &Tensor, param_grads: bool) -> Result<Tensor> {
        let (h, w) = self.dims(x)?;
        let (oh, ow) = self.output_size(h, w);
        if dy.shape() != [self.out_channels, oh, ow] {
            return Err(Error::Shape(format!("conv upstream gradient {:?}", dy.shape())));
        }
        let k = self.kernel;
        let xd = x.data();
        let dyd = dy.data();
        let mut dx = vec![0.0; self.in_channels * h * w];
        let mut dw = vec![0.0; self.out_channels * self.in_channels * k * k];
        let wt = p.value(self.w).data();
        for o in 0..self.out_channels {
            let g = &dyd[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..self.in_channels {
                for ki in 0..k {
                    for kj in 0..k {
                        let widx = ((o * self.in_channels + c) * k + ki) * k + kj;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let y = (i * self.stride + ki) as isize - self.padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let base = c * h * w + y as usize * w;
                            for j in 0..ow {
                                let xx = (j * self.stride + kj) as isize - self.padding as isize;
                                if xx >= 0 && xx < w as isize {
                                    let gv = g[i * ow + j];
                                    acc += gv * xd[base + xx as usize];
                                    dx[base + xx as usize] += gv * wv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
        if param_grads {
            let db: Vec<f64> = (0..self.out_channels)
                .map(|o| dyd[o * oh * ow..(o + 1) * oh * ow].iter().sum())
                .collect();
            p.accumulate(self.w, &Tensor::new(&[self.out_channels, self.in_channels, k, k], dw)?)?;
            p.accumulate(self.b, &Tensor::vector(db))?;
        }
        Tensor::new(&[self.in_channels, h, w], dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_sum_loss_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = NetParams::new();
        let lin = Linear::new(&mut p, "l", "g", 3, 2, false, &mut rng).unwrap();
        let x = rand_tensor(&[1, 3], &mut rng);
        p.zero_grad();
        let y = lin.forward(&p, &x).unwrap();
        lin.backward(&mut p, &x, &y.map(|_| 1.0)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((p.grad(lin.w).at(i, j) - x.data()[i]).abs() < 1e-15);
            }
        }
        let err = grad_check(
            |p| {
                let y = lin.forward(p, &x).unwrap();
                lin.backward(p, &x, &y.map(|_| 1.0)).unwrap();
                y.sum()
            },
            &mut p,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn activations_match_finite_differences() {
        for act in [
            Activation::Relu,
            Activation::LeakyRelu(0.2),
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Gelu,
        ] {
            for &x in &[-0.9, -0.3, 0.2, 0.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut p = NetParams::new();
        let ln = LayerNorm::new(&mut p, "ln", "g", 4).unwrap();
        let x = Tensor::new(&[1, 4], vec![2.5; 4]).unwrap();
        let c = ln.normalize(&x).unwrap();
        assert!(c.xhat.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = NetParams::new();
        let ln = LayerNorm::new(&mut p, "ln", "g", 5).unwrap();
        let lin = Linear::new(&mut p, "l", "g", 5, 3, true, &mut rng).unwrap();
        let xid = p.add("x", "input", rand_tensor(&[2, 5], &mut rng)).unwrap();
        // Perturb the affine so the gamma/beta gradients are not at a symmetric point.
        let g = rand_tensor(&[5], &mut rng).map(|v| 1.0 + 0.5 * v);
        p.set_value(ln.gamma, g).unwrap();
        let target = rand_tensor(&[2, 3], &mut rng);
        let err = grad_check(
            |p| {
                let x = p.value(xid).clone();
                let (h, cache) = ln.forward(p, &x).unwrap();
                let y = lin.forward(p, &h).unwrap();
                let diff = y.sub(&target).unwrap();
                let dh = lin.backward(p, &h, &diff).unwrap();
                let dx = ln.backward(p, &cache, &dh, true).unwrap();
                p.accumulate(xid, &dx).unwrap();
                0.5 * diff.sum_squares()
            },
            &mut p,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = NetParams::new();
        let conv = Conv2d::new(&mut p, "c", "g", 2, 3, 3, 2, 1, &mut rng).unwrap();
        let xid = p.add("x", "input", rand_tensor(&[2, 6, 5], &mut rng)).unwrap();
        let (oh, ow) = conv.output_size(6, 5);
        let target = rand_tensor(&[3, oh, ow], &mut rng);
        let err = grad_check(
            |p| {
                let x = p.value(xid).clone();
                let y = conv.forward(p, &x).unwrap();
                let diff = y.sub(&target).unwrap();
                let dx = conv.backward(p, &x, &diff, true).unwrap();
                p.accumulate(xid, &dx).unwrap();
                0.5 * diff.sum_squares()
            },
            &mut p,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = NetParams::new();
        let conv = Conv2d::new(&mut p, "c", "g", 1, 1, 2, 1, 0, &mut rng).unwrap();
        let x = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = conv.forward(&p, &x).unwrap();
        let w = p.value(conv.w).data();
        let b = p.value(conv.b).data()[0];
        assert_eq!(y.shape(), &[1, 1, 2]);
        let expect0 = b + w[0] * 1.0 + w[1] * 2.0 + w[2] * 4.0 + w[3] * 5.0;
        assert!((y.data()[0] - expect0).abs() < 1e-12);
    }
}
