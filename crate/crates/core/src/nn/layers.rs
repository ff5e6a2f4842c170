//! The fixed layer vocabulary: convolution, dense, ReLU, nearest upsampling,
//! global average pooling and reshapes. Each layer's forward pass returns a
//! [`Cache`] holding exactly what its backward pass needs.

use rand::Rng;
use rand_distr::StandardNormal;

use super::gemm::{gemm, View};
use super::params::{Grads, ParamId, ParamSet};
use crate::error::{Result, VacError};
use crate::tensor::Tensor;

/// Kaiming-style fan-in normal init: `N(0, 2/fan_in)`.
fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` (`[out, in, k, k]`) and `{name}.bias`.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(VacError::Config(format!("{name}: zero kernel or stride")));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add(
            &format!("{name}.weight"),
            kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(VacError::Config(format!(
                "conv kernel {k} exceeds padded input {h}x{w}"
            )));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, ho: usize, wo: usize, col: &mut [f64]) {
        let (k, s, pad) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f64]) {
        let (k, s, pad) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Cache)> {
        let &[b, c, h, w] = x.shape() else {
            return Err(VacError::shape("conv input", &[0, self.in_channels, 0, 0], x.shape()));
        };
        if c != self.in_channels {
            return Err(VacError::shape("conv input", &[b, self.in_channels, h, w], x.shape()));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let kdim = c * self.kernel * self.kernel;
        let plane = ho * wo;
        let weight = params.value(self.weight).data();
        let bias = params.value(self.bias).data();

        let mut cols = vec![0.0; b * kdim * plane];
        let mut out = Tensor::zeros(&[b, self.out_channels, ho, wo]);
        for i in 0..b {
            let col = &mut cols[i * kdim * plane..(i + 1) * kdim * plane];
            self.im2col(x.item(i), h, w, ho, wo, col);
            let y = out.item_mut(i);
            for (oc, row) in y.chunks_exact_mut(plane).enumerate() {
                row.fill(bias[oc]);
            }
            gemm(
                View::row_major(weight, self.out_channels, kdim),
                View::row_major(col, kdim, plane),
                1.0,
                y,
            );
        }
        Ok((
            out,
            Cache::Conv {
                cols,
                in_shape: x.shape().to_vec(),
            },
        ))
    }

    fn backward(
        &self,
        params: &ParamSet,
        cols: &[f64],
        in_shape: &[usize],
        grad_out: &Tensor,
        mut grads: Option<&mut Grads>,
    ) -> Result<Tensor> {
        let &[b, c, h, w] = in_shape else {
            unreachable!("conv cache holds a rank-4 shape")
        };
        let (ho, wo) = self.output_hw(h, w)?;
        grad_out.expect_shape("conv grad", &[b, self.out_channels, ho, wo])?;
        let kdim = c * self.kernel * self.kernel;
        let plane = ho * wo;
        let weight = params.value(self.weight).data();

        let mut dx = Tensor::zeros(in_shape);
        let mut dcol = vec![0.0; kdim * plane];
        for i in 0..b {
            let dy = grad_out.item(i);
            let col = &cols[i * kdim * plane..(i + 1) * kdim * plane];
            if let Some(g) = grads.as_deref_mut() {
                gemm(
                    View::row_major(dy, self.out_channels, plane),
                    View::row_major(col, kdim, plane).t(),
                    1.0,
                    g.get_mut(self.weight).data_mut(),
                );
                let db = g.get_mut(self.bias).data_mut();
                for (oc, row) in dy.chunks_exact(plane).enumerate() {
                    db[oc] += row.iter().sum::<f64>();
                }
            }
            gemm(
                View::row_major(weight, self.out_channels, kdim).t(),
                View::row_major(dy, self.out_channels, plane),
                0.0,
                &mut dcol,
            );
            self.col2im(&dcol, h, w, ho, wo, dx.item_mut(i));
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Registers `{name}.weight` (`[out, in]`) and `{name}.bias`.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = params.add(
            &format!("{name}.weight"),
            kaiming(&[out_features, in_features], in_features, rng),
        )?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.in_features {
            return Err(VacError::shape(
                "linear input",
                &[x.batch(), self.in_features],
                x.shape(),
            ));
        }
        let b = x.batch();
        let bias = params.value(self.bias).data();
        let mut out = Tensor::zeros(&[b, self.out_features]);
        for row in out.data_mut().chunks_exact_mut(self.out_features) {
            row.copy_from_slice(bias);
        }
        gemm(
            View::row_major(x.data(), b, self.in_features),
            View::row_major(params.value(self.weight).data(), self.out_features, self.in_features)
                .t(),
            1.0,
            out.data_mut(),
        );
        Ok(out)
    }

    fn backward(
        &self,
        params: &ParamSet,
        input: &Tensor,
        grad_out: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Result<Tensor> {
        let b = input.batch();
        grad_out.expect_shape("linear grad", &[b, self.out_features])?;
        if let Some(g) = grads {
            gemm(
                View::row_major(grad_out.data(), b, self.out_features).t(),
                View::row_major(input.data(), b, self.in_features),
                1.0,
                g.get_mut(self.weight).data_mut(),
            );
            let db = g.get_mut(self.bias).data_mut();
            for row in grad_out.data().chunks_exact(self.out_features) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut dx = Tensor::zeros(&[b, self.in_features]);
        gemm(
            View::row_major(grad_out.data(), b, self.out_features),
            View::row_major(params.value(self.weight).data(), self.out_features, self.in_features),
            0.0,
            dx.data_mut(),
        );
        Ok(dx)
    }
}

/// One step of a [`Sequential`] network.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    /// Nearest-neighbour 2× spatial upsampling.
    Upsample2x,
    /// `[b, c, h, w] → [b, c]` mean over the spatial plane.
    GlobalAvgPool,
    /// Reshape each batch item to the given per-item shape.
    Reshape(Vec<usize>),
}

/// Per-layer values saved by the forward pass.
#[derive(Debug)]
pub enum Cache {
    Conv { cols: Vec<f64>, in_shape: Vec<usize> },
    Linear { input: Tensor },
    Relu { output: Tensor },
    Shape { in_shape: Vec<usize> },
}

impl Layer {
    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Conv2d(conv) => conv.forward(params, x),
            Layer::Linear(lin) => Ok((
                lin.forward(params, x)?,
                Cache::Linear { input: x.clone() },
            )),
            Layer::Relu => {
                let out = x.map(|v| v.max(0.0));
                Ok((out.clone(), Cache::Relu { output: out }))
            }
            Layer::Upsample2x => {
                let &[b, c, h, w] = x.shape() else {
                    return Err(VacError::shape("upsample input", &[0, 0, 0, 0], x.shape()));
                };
                let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
                let src = x.data();
                for (plane_idx, dst) in out.data_mut().chunks_exact_mut(4 * h * w).enumerate() {
                    let s = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                        }
                    }
                }
                Ok((out, Cache::Shape { in_shape: x.shape().to_vec() }))
            }
            Layer::GlobalAvgPool => {
                let &[b, c, h, w] = x.shape() else {
                    return Err(VacError::shape("pool input", &[0, 0, 0, 0], x.shape()));
                };
                let n = (h * w) as f64;
                let data = x
                    .data()
                    .chunks_exact(h * w)
                    .map(|plane| plane.iter().sum::<f64>() / n)
                    .collect();
                Ok((
                    Tensor::new(vec![b, c], data)?,
                    Cache::Shape { in_shape: x.shape().to_vec() },
                ))
            }
            Layer::Reshape(item_shape) => {
                let mut shape = vec![x.batch()];
                shape.extend_from_slice(item_shape);
                let in_shape = x.shape().to_vec();
                Ok((x.clone().reshape(&shape)?, Cache::Shape { in_shape }))
            }
        }
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &Cache,
        grad_out: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Conv2d(conv), Cache::Conv { cols, in_shape }) => {
                conv.backward(params, cols, in_shape, grad_out, grads)
            }
            (Layer::Linear(lin), Cache::Linear { input }) => {
                lin.backward(params, input, grad_out, grads)
            }
            (Layer::Relu, Cache::Relu { output }) => {
                grad_out.expect_shape("relu grad", output.shape())?;
                let data = grad_out
                    .data()
                    .iter()
                    .zip(output.data())
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(output.shape().to_vec(), data)
            }
            (Layer::Upsample2x, Cache::Shape { in_shape }) => {
                let &[b, c, h, w] = in_shape.as_slice() else {
                    unreachable!()
                };
                grad_out.expect_shape("upsample grad", &[b, c, 2 * h, 2 * w])?;
                let mut dx = Tensor::zeros(in_shape);
                let g = grad_out.data();
                for (plane_idx, dst) in dx.data_mut().chunks_exact_mut(h * w).enumerate() {
                    let s = &g[plane_idx * 4 * h * w..(plane_idx + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                        }
                    }
                }
                Ok(dx)
            }
            (Layer::GlobalAvgPool, Cache::Shape { in_shape }) => {
                let &[b, c, h, w] = in_shape.as_slice() else {
                    unreachable!()
                };
                grad_out.expect_shape("pool grad", &[b, c])?;
                let n = (h * w) as f64;
                let mut dx = Tensor::zeros(in_shape);
                for (plane, &g) in dx.data_mut().chunks_exact_mut(h * w).zip(grad_out.data()) {
                    plane.fill(g / n);
                }
                Ok(dx)
            }
            (Layer::Reshape(_), Cache::Shape { in_shape }) => grad_out.clone().reshape(in_shape),
            _ => Err(VacError::Config("layer/cache mismatch".into())),
        }
    }

    /// Output shape for a given input shape, without running the layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(conv) => match input {
                &[b, c, h, w] if c == conv.in_channels => {
                    let (ho, wo) = conv.output_hw(h, w)?;
                    Ok(vec![b, conv.out_channels, ho, wo])
                }
                _ => Err(VacError::shape("conv input", &[0, conv.in_channels, 0, 0], input)),
            },
            Layer::Linear(lin) => match input {
                &[b, f] if f == lin.in_features => Ok(vec![b, lin.out_features]),
                _ => Err(VacError::shape("linear input", &[0, lin.in_features], input)),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::Upsample2x => match input {
                &[b, c, h, w] => Ok(vec![b, c, 2 * h, 2 * w]),
                _ => Err(VacError::shape("upsample input", &[0, 0, 0, 0], input)),
            },
            Layer::GlobalAvgPool => match input {
                &[b, c, _, _] => Ok(vec![b, c]),
                _ => Err(VacError::shape("pool input", &[0, 0, 0, 0], input)),
            },
            Layer::Reshape(item) => {
                let n: usize = input.iter().skip(1).product();
                if n != item.iter().product::<usize>() {
                    return Err(VacError::shape("reshape", item, &input[1..]));
                }
                let mut out = vec![input.first().copied().unwrap_or(1)];
                out.extend_from_slice(item);
                Ok(out)
            }
        }
    }
}
