use super::spec::{LayerKind, LayerSpec};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    fn zeros(shape: &[usize]) -> Self {
        Param {
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out, kernel, kernel, in]`, matching the im2col row layout.
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Fc {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out, in]`.
    pub weight: Param,
    pub bias: Param,
    /// True for the task head (`softmax_output`).
    pub head: bool,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool(MaxPool),
    Relu { name: String },
    Fc(Fc),
    Concat { name: String, branches: Vec<Vec<Layer>> },
    GlobalAvgPool { name: String },
}

/// Activations saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Conv {
        cols: Vec<f32>,
        in_shape: [usize; 4],
    },
    Pool {
        argmax: Vec<usize>,
        in_shape: [usize; 4],
    },
    Relu {
        active: Vec<bool>,
    },
    Gap {
        in_shape: [usize; 4],
    },
    Fc {
        input: Vec<f32>,
        in_shape: Vec<usize>,
    },
    Concat {
        widths: Vec<usize>,
        caches: Vec<Vec<Cache>>,
    },
}

fn spatial(x: &Tensor, layer: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(Error::Shape(format!(
            "layer `{layer}` expects a B x H x W x C input, got {s:?}"
        ))),
    }
}

impl Layer {
    /// Builds the layer with zeroed parameters; `in_channels` is the channel
    /// count (or flat width) of the incoming activation.
    pub(crate) fn from_spec(spec: &LayerSpec, input: super::spec::ActShape) -> Result<Layer> {
        use super::spec::ActShape;
        let name = spec.name.clone();
        Ok(match &spec.kind {
            &LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let ActShape::Spatial { c, .. } = input else {
                    return Err(Error::Shape(format!("layer `{name}` needs a spatial input")));
                };
                Layer::Conv2d(Conv2d {
                    name,
                    in_channels: c,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    weight: Param::zeros(&[out_channels, kernel, kernel, c]),
                    bias: Param::zeros(&[out_channels]),
                })
            }
            &LayerKind::Maxpool { kernel, stride } => Layer::MaxPool(MaxPool { name, kernel, stride }),
            LayerKind::Relu => Layer::Relu { name },
            &LayerKind::Fc { out_dim } | &LayerKind::SoftmaxOutput { n_classes: out_dim } => {
                let in_dim = input.numel();
                Layer::Fc(Fc {
                    name,
                    in_dim,
                    out_dim,
                    weight: Param::zeros(&[out_dim, in_dim]),
                    bias: Param::zeros(&[out_dim]),
                    head: matches!(spec.kind, LayerKind::SoftmaxOutput { .. }),
                })
            }
            LayerKind::Concat { branches } => {
                let mut built = Vec::with_capacity(branches.len());
                for branch in branches {
                    built.push(build_chain(branch, input)?);
                }
                Layer::Concat { name, branches: built }
            }
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool { name },
            LayerKind::BatchNorm => return Err(Error::Shape(format!("layer `{name}`: batch_norm is not supported"))),
        })
    }

    pub fn name(&self) -> &str {
        match self {
            Layer::Conv2d(l) => &l.name,
            Layer::MaxPool(l) => &l.name,
            Layer::Fc(l) => &l.name,
            Layer::Relu { name } | Layer::Concat { name, .. } | Layer::GlobalAvgPool { name } => name,
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool(_) => "maxpool",
            Layer::Relu { .. } => "relu",
            Layer::Fc(f) if f.head => "softmax_output",
            Layer::Fc(_) => "fc",
            Layer::Concat { .. } => "concat",
            Layer::GlobalAvgPool { .. } => "global_avg_pool",
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
        let out = match self {
            Layer::Conv2d(conv) => conv.forward(x, keep),
            Layer::MaxPool(pool) => pool.forward(x, keep),
            Layer::Relu { .. } => {
                let data: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
                let cache = keep.then(|| Cache::Relu {
                    active: x.data().iter().map(|&v| v > 0.0).collect(),
                });
                Ok((Tensor::from_vec(x.shape(), data)?, cache))
            }
            Layer::Fc(fc) => fc.forward(x, keep),
            Layer::Concat { name, branches } => concat_forward(name, branches, x, keep),
            Layer::GlobalAvgPool { name } => {
                let [b, h, w, c] = spatial(x, name)?;
                let mut out = vec![0.0f32; b * c];
                let scale = 1.0 / (h * w) as f32;
                for bi in 0..b {
                    let acc = &mut out[bi * c..(bi + 1) * c];
                    for px in x.data()[bi * h * w * c..(bi + 1) * h * w * c].chunks_exact(c) {
                        acc.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
                    }
                    acc.iter_mut().for_each(|a| *a *= scale);
                }
                Ok((
                    Tensor::from_vec(&[b, c], out)?,
                    keep.then_some(Cache::Gap { in_shape: [b, h, w, c] }),
                ))
            }
        }?;
        out.0.debug_assert_finite(self.name());
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the gradient wrt the input.
    pub(crate) fn backward(&mut self, cache: Cache, grad: &Tensor) -> Result<Tensor> {
        let name = self.name().to_string();
        let out = match (self, cache) {
            (Layer::Conv2d(conv), Cache::Conv { cols, in_shape }) => conv.backward(&cols, in_shape, grad),
            (Layer::MaxPool(_), Cache::Pool { argmax, in_shape }) => {
                let mut dx = vec![0.0f32; in_shape.iter().product()];
                for (&src, &g) in argmax.iter().zip(grad.data()) {
                    dx[src] += g;
                }
                Tensor::from_vec(&in_shape, dx)
            }
            (Layer::Relu { .. }, Cache::Relu { active }) => {
                let dx = grad
                    .data()
                    .iter()
                    .zip(&active)
                    .map(|(&g, &on)| if on { g } else { 0.0 })
                    .collect();
                Tensor::from_vec(grad.shape(), dx)
            }
            (Layer::Fc(fc), Cache::Fc { input, in_shape }) => fc.backward(&input, &in_shape, grad),
            (Layer::Concat { branches, .. }, Cache::Concat { widths, caches }) => {
                concat_backward(branches, widths, caches, grad)
            }
            (Layer::GlobalAvgPool { .. }, Cache::Gap { in_shape }) => {
                let [b, h, w, c] = in_shape;
                let scale = 1.0 / (h * w) as f32;
                let mut dx = vec![0.0f32; b * h * w * c];
                for bi in 0..b {
                    let g = &grad.data()[bi * c..(bi + 1) * c];
                    for px in dx[bi * h * w * c..(bi + 1) * h * w * c].chunks_exact_mut(c) {
                        px.iter_mut().zip(g).for_each(|(d, &gv)| *d = gv * scale);
                    }
                }
                Tensor::from_vec(&in_shape, dx)
            }
            _ => Err(Error::BackwardWithoutForward(name.clone())),
        }?;
        out.debug_assert_finite(&name);
        Ok(out)
    }

    /// Visits `(qualified name, param)` pairs in depth-first layer order.
    pub(crate) fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Param)) {
        match self {
            Layer::Conv2d(c) => {
                f(format!("{}.weight", c.name), &c.weight);
                f(format!("{}.bias", c.name), &c.bias);
            }
            Layer::Fc(l) => {
                f(format!("{}.weight", l.name), &l.weight);
                f(format!("{}.bias", l.name), &l.bias);
            }
            Layer::Concat { branches, .. } => {
                for layer in branches.iter().flatten() {
                    layer.visit_params(f);
                }
            }
            _ => {}
        }
    }

    pub(crate) fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        match self {
            Layer::Conv2d(c) => {
                f(format!("{}.weight", c.name), &mut c.weight);
                f(format!("{}.bias", c.name), &mut c.bias);
            }
            Layer::Fc(l) => {
                f(format!("{}.weight", l.name), &mut l.weight);
                f(format!("{}.bias", l.name), &mut l.bias);
            }
            Layer::Concat { branches, .. } => {
                for layer in branches.iter_mut().flatten() {
                    layer.visit_params_mut(f);
                }
            }
            _ => {}
        }
    }

    /// Visits every layer depth-first, including those nested in concat branches.
    pub(crate) fn visit_layers<'a>(&'a self, f: &mut dyn FnMut(&'a Layer)) {
        f(self);
        if let Layer::Concat { branches, .. } = self {
            for layer in branches.iter().flatten() {
                layer.visit_layers(f);
            }
        }
    }
}

pub(crate) fn build_chain(specs: &[LayerSpec], mut shape: super::spec::ActShape) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        layers.push(Layer::from_spec(spec, shape)?);
        shape = super::spec::infer_layer(spec, shape)?;
    }
    Ok(layers)
}

pub(crate) fn chain_forward(layers: &[Layer], x: &Tensor, keep: bool) -> Result<(Tensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(if keep { layers.len() } else { 0 });
    let mut cur: Option<Tensor> = None;
    for layer in layers {
        let (y, cache) = layer.forward(cur.as_ref().unwrap_or(x), keep)?;
        if let Some(c) = cache {
            caches.push(c);
        }
        cur = Some(y);
    }
    Ok((cur.unwrap_or_else(|| x.clone()), caches))
}

pub(crate) fn chain_backward(layers: &mut [Layer], caches: Vec<Cache>, grad: &Tensor) -> Result<Tensor> {
    if caches.len() != layers.len() {
        let name = layers.first().map(|l| l.name().to_string()).unwrap_or_default();
        return Err(Error::BackwardWithoutForward(name));
    }
    let mut g = grad.clone();
    for (layer, cache) in layers.iter_mut().zip(caches).rev() {
        g = layer.backward(cache, &g)?;
    }
    Ok(g)
}

fn concat_forward(name: &str, branches: &[Vec<Layer>], x: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
    let [b, h, w, _] = spatial(x, name)?;
    let mut outs = Vec::with_capacity(branches.len());
    let mut caches = Vec::with_capacity(branches.len());
    for branch in branches {
        let (y, c) = chain_forward(branch, x, keep)?;
        let [_, bh, bw, _] = spatial(&y, name)?;
        if (bh, bw) != (h, w) {
            return Err(Error::Shape(format!(
                "concat `{name}`: branch output {bh}x{bw} != {h}x{w}"
            )));
        }
        outs.push(y);
        caches.push(c);
    }
    let widths: Vec<usize> = outs.iter().map(|t| t.shape()[3]).collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0f32; b * h * w * total];
    for (px, dst) in data.chunks_exact_mut(total).enumerate() {
        let mut off = 0;
        for (y, &cw) in outs.iter().zip(&widths) {
            dst[off..off + cw].copy_from_slice(&y.data()[px * cw..(px + 1) * cw]);
            off += cw;
        }
    }
    let cache = keep.then_some(Cache::Concat { widths, caches });
    Ok((Tensor::from_vec(&[b, h, w, total], data)?, cache))
}

fn concat_backward(
    branches: &mut [Vec<Layer>],
    widths: Vec<usize>,
    caches: Vec<Vec<Cache>>,
    grad: &Tensor,
) -> Result<Tensor> {
    let [b, h, w, total] = spatial(grad, "concat")?;
    let mut dx: Option<Tensor> = None;
    let mut off = 0;
    for ((branch, cache), &cw) in branches.iter_mut().zip(caches).zip(&widths) {
        let mut slice = vec![0.0f32; b * h * w * cw];
        for (px, dst) in slice.chunks_exact_mut(cw).enumerate() {
            dst.copy_from_slice(&grad.data()[px * total + off..px * total + off + cw]);
        }
        off += cw;
        let g = chain_backward(branch, cache, &Tensor::from_vec(&[b, h, w, cw], slice)?)?;
        match dx.as_mut() {
            None => dx = Some(g),
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &v)| *a += v),
        }
    }
    dx.ok_or_else(|| Error::Shape("concat without branches".into()))
}

pub(crate) fn output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    super::spec::conv_out(size, kernel, stride, pad)
        .ok_or_else(|| Error::Shape(format!("window {kernel}/{stride}/{pad} does not fit {size}")))
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], [b, h, w, c]: [usize; 4], k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Vec<f32> {
    let kk = k * k * c;
    let mut cols = vec![0.0f32; b * oh * ow * kk];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[((bi * oh + oy) * ow + ox) * kk..][..kk];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        row[(ky * k + kx) * c..][..c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], [b, h, w, c]: [usize; 4], k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Vec<f32> {
    let kk = k * k * c;
    let mut x = vec![0.0f32; b * h * w * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[((bi * oh + oy) * ow + ox) * kk..][..kk];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        x[dst..dst + c]
                            .iter_mut()
                            .zip(&row[(ky * k + kx) * c..][..c])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }
    x
}

impl Conv2d {
    fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
        let in_shape = spatial(x, &self.name)?;
        let [b, h, w, c] = in_shape;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let oh = output_size(h, k, s, p)?;
        let ow = output_size(w, k, s, p)?;
        let kk = k * k * c;
        let rows = b * oh * ow;
        let cols = im2col(x.data(), in_shape, k, s, p, oh, ow);
        let oc = self.out_channels;
        let mut out = vec![0.0f32; rows * oc];
        gemm(
            rows,
            kk,
            oc,
            &cols,
            (kk as isize, 1),
            self.weight.value.data(),
            (1, kk as isize),
            0.0,
            &mut out,
        );
        let bias = self.bias.value.data();
        for px in out.chunks_exact_mut(oc) {
            px.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
        }
        let cache = keep.then_some(Cache::Conv { cols, in_shape });
        Ok((Tensor::from_vec(&[b, oh, ow, oc], out)?, cache))
    }

    fn backward(&mut self, cols: &[f32], in_shape: [usize; 4], grad: &Tensor) -> Result<Tensor> {
        let [b, h, w, c] = in_shape;
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let oh = output_size(h, k, s, p)?;
        let ow = output_size(w, k, s, p)?;
        let oc = self.out_channels;
        let kk = k * k * c;
        let rows = b * oh * ow;
        if grad.shape() != [b, oh, ow, oc] {
            return Err(Error::Shape(format!(
                "layer `{}` upstream gradient {:?} != {:?}",
                self.name,
                grad.shape(),
                [b, oh, ow, oc]
            )));
        }
        let dy = grad.data();
        gemm(
            oc,
            rows,
            kk,
            dy,
            (1, oc as isize),
            cols,
            (kk as isize, 1),
            1.0,
            self.weight.grad.data_mut(),
        );
        let db = self.bias.grad.data_mut();
        for px in dy.chunks_exact(oc) {
            db.iter_mut().zip(px).for_each(|(d, &g)| *d += g);
        }
        let mut dcols = vec![0.0f32; rows * kk];
        gemm(
            rows,
            oc,
            kk,
            dy,
            (oc as isize, 1),
            self.weight.value.data(),
            (kk as isize, 1),
            0.0,
            &mut dcols,
        );
        Tensor::from_vec(&in_shape, col2im(&dcols, in_shape, k, s, p, oh, ow))
    }
}

impl MaxPool {
    fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
        let in_shape = spatial(x, &self.name)?;
        let [b, h, w, c] = in_shape;
        let (k, s) = (self.kernel, self.stride);
        let oh = output_size(h, k, s, 0)?;
        let ow = output_size(w, k, s, 0)?;
        let xd = x.data();
        let n = b * oh * ow * c;
        let mut out = vec![0.0f32; n];
        let mut argmax = vec![0usize; n];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ((bi * oh + oy) * ow + ox) * c;
                    for ch in 0..c {
                        let mut best_idx = ((bi * h + oy * s) * w + ox * s) * c + ch;
                        let mut best = xd[best_idx];
                        for ky in 0..k {
                            for kx in 0..k {
                                let idx = ((bi * h + oy * s + ky) * w + ox * s + kx) * c + ch;
                                // Strict comparison keeps the first maximum in scan order.
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[base + ch] = best;
                        argmax[base + ch] = best_idx;
                    }
                }
            }
        }
        let cache = keep.then_some(Cache::Pool { argmax, in_shape });
        Ok((Tensor::from_vec(&[b, oh, ow, c], out)?, cache))
    }
}

impl Fc {
    fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
        let b = *x
            .shape()
            .first()
            .ok_or_else(|| Error::Shape(format!("layer `{}`: scalar input", self.name)))?;
        let in_dim = x.shape()[1..].iter().product::<usize>();
        if in_dim != self.in_dim {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} inputs per sample, got {in_dim}",
                self.name, self.in_dim
            )));
        }
        let mut out = vec![0.0f32; b * self.out_dim];
        gemm(
            b,
            in_dim,
            self.out_dim,
            x.data(),
            (in_dim as isize, 1),
            self.weight.value.data(),
            (1, in_dim as isize),
            0.0,
            &mut out,
        );
        let bias = self.bias.value.data();
        for row in out.chunks_exact_mut(self.out_dim) {
            row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
        }
        let cache = keep.then(|| Cache::Fc {
            input: x.data().to_vec(),
            in_shape: x.shape().to_vec(),
        });
        Ok((Tensor::from_vec(&[b, self.out_dim], out)?, cache))
    }

    fn backward(&mut self, input: &[f32], in_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
        let b = in_shape[0];
        let (n_in, n_out) = (self.in_dim, self.out_dim);
        if grad.shape() != [b, n_out] {
            return Err(Error::Shape(format!(
                "layer `{}` upstream gradient {:?} != {:?}",
                self.name,
                grad.shape(),
                [b, n_out]
            )));
        }
        let dy = grad.data();
        gemm(
            n_out,
            b,
            n_in,
            dy,
            (1, n_out as isize),
            input,
            (n_in as isize, 1),
            1.0,
            self.weight.grad.data_mut(),
        );
        let db = self.bias.grad.data_mut();
        for row in dy.chunks_exact(n_out) {
            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
        let mut dx = vec![0.0f32; b * n_in];
        gemm(
            b,
            n_out,
            n_in,
            dy,
            (n_out as isize, 1),
            self.weight.value.data(),
            (n_in as isize, 1),
            0.0,
            &mut dx,
        );
        Tensor::from_vec(in_shape, dx)
    }
}

/// Direct-summation convolution, kept as an independent check on the im2col path.
#[cfg(test)]
pub(crate) fn naive_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
    let [b, h, w, c] = spatial(x, "naive").unwrap();
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
    let oh = output_size(h, k, s, p).unwrap();
    let ow = output_size(w, k, s, p).unwrap();
    let oc = conv.out_channels;
    let wt = conv.weight.value.data();
    let mut out = Tensor::zeros(&[b, oh, ow, oc]);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..oc {
                    let mut acc = conv.bias.value.data()[o] as f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let xv = x.data()[((bi * h + iy as usize) * w + ix as usize) * c + ci];
                                let wv = wt[((o * k + ky) * k + kx) * c + ci];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out.data_mut()[((bi * oh + oy) * ow + ox) * oc + o] = acc as f32;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::ActShape;
    use rand::{Rng, SeedableRng};

    fn conv(in_c: usize, out_c: usize, k: usize, s: usize, p: usize) -> Conv2d {
        let spec = LayerSpec {
            name: "c".into(),
            kind: LayerKind::Conv2d {
                out_channels: out_c,
                kernel: k,
                stride: s,
                pad: p,
            },
        };
        match Layer::from_spec(&spec, ActShape::Spatial { h: 8, w: 8, c: in_c }).unwrap() {
            Layer::Conv2d(c) => c,
            _ => unreachable!(),
        }
    }

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut c = conv(3, 3, 1, 1, 0);
        for o in 0..3 {
            c.weight.value.data_mut()[o * 3 + o] = 1.0;
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 5, 4, 3], &mut rng);
        let (y, _) = Layer::Conv2d(c).forward(&x, false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv3x3_on_4x4_matches_direct_sum() {
        let mut c = conv(1, 1, 3, 1, 0);
        let x = Tensor::from_vec(&[1, 4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        for (i, w) in c.weight.value.data_mut().iter_mut().enumerate() {
            *w = (i as f32 - 4.0) * 0.25;
        }
        c.bias.value.data_mut()[0] = 0.5;
        let want = naive_conv(&x, &c);
        let (y, _) = Layer::Conv2d(c).forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        // Hand check of the top-left output: sum_{ky,kx} x[ky][kx] * w[ky*3+kx] + 0.5
        let mut top_left = 0.5f32;
        for ky in 0..3 {
            for kx in 0..3 {
                top_left += (ky * 4 + kx) as f32 * ((ky * 3 + kx) as f32 - 4.0) * 0.25;
            }
        }
        assert!((y.data()[0] - top_left).abs() < 1e-5);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn im2col_conv_matches_naive_on_random_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..25 {
            let k: usize = rng.random_range(1..=5);
            let s = rng.random_range(1..=3);
            let p = rng.random_range(0..=2);
            let (ic, oc) = (rng.random_range(1..=5), rng.random_range(1..=6));
            let h = rng.random_range(k.saturating_sub(2 * p).max(1)..12);
            let w = rng.random_range(k.saturating_sub(2 * p).max(1)..12);
            let mut c = conv(ic, oc, k, s, p);
            c.weight.value = random(c.weight.value.shape(), &mut rng);
            c.bias.value = random(&[oc], &mut rng);
            let x = random(&[2, h, w, ic], &mut rng);
            let want = naive_conv(&x, &c);
            let (y, _) = Layer::Conv2d(c).forward(&x, false).unwrap();
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn maxpool_constant_input_and_first_index_ties() {
        let pool = Layer::MaxPool(MaxPool {
            name: "p".into(),
            kernel: 2,
            stride: 2,
        });
        let x = Tensor::full(&[1, 4, 4, 2], 3.5);
        let (y, cache) = pool.forward(&x, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
        let Some(Cache::Pool { argmax, .. }) = cache else {
            panic!()
        };
        // First element of each window in scan order wins the tie.
        assert_eq!(argmax[0], 0);
        assert_eq!(argmax[1], 1);
        assert_eq!(argmax[2], 2 * 2);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut layers = vec![Layer::Relu { name: "r".into() }];
        let err = chain_backward(&mut layers, vec![], &Tensor::zeros(&[1, 2])).unwrap_err();
        assert!(matches!(err, Error::BackwardWithoutForward(_)));
    }
}
