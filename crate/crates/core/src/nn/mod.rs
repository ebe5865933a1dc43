//! Forward and backward passes over a [`NetworkGraph`].
//!
//! Tensors are `f32` in NCHW layout. Convolutions run as im2col followed by a
//! single GEMM per sample. `forward` never mutates the graph; BN batch
//! statistics collected in training mode are applied to the running averages
//! by [`update_running_stats`].

mod optim;

use indexmap::IndexMap;
use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, NetworkGraph};

pub use optim::{cosine_lr, RmsProp};

pub type Tensor = Array4<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, intermediate caches kept for `backward`.
    Train,
    /// Running statistics in BN, no caches.
    Eval,
}

enum Cache {
    None,
    Conv { cols: Vec<Array2<f32>> },
    Bn { xhat: Tensor, inv_std: Vec<f32> },
    Pool { argmax: Vec<u32> },
}

/// Layer outputs of one forward pass, indexed like the graph's layers.
pub struct Activations {
    pub outputs: Vec<Tensor>,
    caches: Vec<Cache>,
    /// Per-BN batch (mean, biased variance, element count), train mode only.
    batch_stats: IndexMap<String, (Vec<f32>, Vec<f32>, usize)>,
    mode: Mode,
}

impl Activations {
    pub fn output(&self, net: &NetworkGraph, id: &str) -> Option<&Tensor> {
        net.layer_index(id).map(|i| &self.outputs[i])
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Parameter gradients of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    Conv {
        weight: Tensor,
        bias: Option<Array1<f32>>,
    },
    Bn {
        gamma: Array1<f32>,
        beta: Array1<f32>,
    },
}

pub type ParamGrads = IndexMap<String, LayerGrad>;

pub fn forward(net: &NetworkGraph, input: &Tensor, mode: Mode) -> Result<Activations> {
    let mut outputs: Vec<Tensor> = Vec::with_capacity(net.len());
    let mut caches = Vec::with_capacity(net.len());
    let mut batch_stats = IndexMap::new();
    for (idx, layer) in net.layers().enumerate() {
        let src = |k: usize| -> &Tensor {
            &outputs[net.layer_index(&layer.inputs[k]).expect("validated")]
        };
        let (out, cache) = match &layer.kind {
            LayerKind::Input { channels } => {
                if input.shape()[1] != *channels {
                    return Err(Error::Shape(format!(
                        "input has {} channels, network expects {}",
                        input.shape()[1],
                        channels
                    )));
                }
                (input.clone(), Cache::None)
            }
            LayerKind::Conv {
                kernel_size,
                stride,
                padding,
                ..
            } => {
                let w = net.conv(&layer.id).expect("validated");
                let (y, cols) = conv_forward(
                    src(0),
                    &w.weight,
                    w.bias.as_ref(),
                    *kernel_size,
                    *stride,
                    *padding,
                    mode == Mode::Train,
                )?;
                (y, cols.map_or(Cache::None, |cols| Cache::Conv { cols }))
            }
            LayerKind::Bn { .. } => {
                let p = net.bn(&layer.id).expect("validated");
                match mode {
                    Mode::Train => {
                        let (y, xhat, mean, var, inv_std) =
                            bn_forward_train(src(0), &p.gamma, &p.beta, p.epsilon);
                        let count = y.len() / y.shape()[1];
                        batch_stats.insert(layer.id.clone(), (mean, var, count));
                        (y, Cache::Bn { xhat, inv_std })
                    }
                    Mode::Eval => (bn_forward_eval(src(0), p), Cache::None),
                }
            }
            LayerKind::Relu => (src(0).mapv(|v| v.max(0.0)), Cache::None),
            LayerKind::Output => (src(0).mapv(|v| v.clamp(0.0, 1.0)), Cache::None),
            LayerKind::Maxpool { kernel_size } => {
                let (y, argmax) = maxpool_forward(src(0), *kernel_size)?;
                (y, Cache::Pool { argmax })
            }
            LayerKind::Upsample { scale } => (upsample_forward(src(0), *scale), Cache::None),
            LayerKind::Concat => {
                let parts: Vec<_> = (0..layer.inputs.len()).map(|k| src(k).view()).collect();
                let (n, _, h, w) = src(0).dim();
                for (k, part) in parts.iter().enumerate() {
                    if part.shape()[0] != n || part.shape()[2] != h || part.shape()[3] != w {
                        return Err(Error::Shape(format!(
                            "concat `{}`: input `{}` has shape {:?}",
                            layer.id,
                            layer.inputs[k],
                            part.shape()
                        )));
                    }
                }
                let y = ndarray::concatenate(Axis(1), &parts)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                (y.as_standard_layout().into_owned(), Cache::None)
            }
        };
        debug_assert_eq!(idx, outputs.len());
        outputs.push(out);
        caches.push(if mode == Mode::Train {
            cache
        } else {
            Cache::None
        });
    }
    Ok(Activations {
        outputs,
        caches,
        batch_stats,
        mode,
    })
}

/// Output of the network's output layer in evaluation mode.
pub fn predict(net: &NetworkGraph, input: &Tensor) -> Result<Tensor> {
    let mut acts = forward(net, input, Mode::Eval)?;
    let idx = net.layer_index(net.output_id()).expect("validated");
    Ok(acts.outputs.swap_remove(idx))
}

/// Exponential moving average of BN statistics from a training-mode pass.
pub fn update_running_stats(net: &mut NetworkGraph, acts: &Activations, momentum: f32) {
    for (id, (mean, var, count)) in &acts.batch_stats {
        let unbias = if *count > 1 {
            *count as f32 / (*count - 1) as f32
        } else {
            1.0
        };
        if let Some(p) = net.bn_mut(id) {
            for c in 0..mean.len() {
                p.running_mean[c] = (1.0 - momentum) * p.running_mean[c] + momentum * mean[c];
                p.running_var[c] = (1.0 - momentum) * p.running_var[c] + momentum * var[c] * unbias;
            }
        }
    }
}

/// Backpropagates `seeds` (gradients of the loss with respect to layer
/// outputs) through the graph. The clamp of the output layer passes gradients
/// straight through.
pub fn backward(
    net: &NetworkGraph,
    acts: &Activations,
    seeds: Vec<(usize, Tensor)>,
) -> Result<ParamGrads> {
    if acts.mode != Mode::Train {
        return Err(Error::InvalidArgument(
            "backward needs a training-mode forward pass".into(),
        ));
    }
    let n_layers = net.len();
    let mut grads: Vec<Option<Tensor>> = vec![None; n_layers];
    for (idx, g) in seeds {
        if g.shape() != acts.outputs[idx].shape() {
            return Err(Error::Shape(format!(
                "gradient for `{}` has shape {:?}, output is {:?}",
                net.layer_at(idx).id,
                g.shape(),
                acts.outputs[idx].shape()
            )));
        }
        accumulate(&mut grads[idx], g);
    }
    let input_idx = net.layer_index(net.input_id()).expect("validated");

    let mut param_grads: ParamGrads = IndexMap::new();
    for idx in (0..n_layers).rev() {
        let layer = net.layer_at(idx);
        let Some(dy) = grads[idx].take() else {
            // Parameter layers without an incoming gradient still report zeros.
            match &layer.kind {
                LayerKind::Conv { .. } => {
                    let w = net.conv(&layer.id).expect("validated");
                    param_grads.insert(
                        layer.id.clone(),
                        LayerGrad::Conv {
                            weight: Tensor::zeros(w.weight.raw_dim()),
                            bias: w.bias.as_ref().map(|b| Array1::zeros(b.len())),
                        },
                    );
                }
                LayerKind::Bn { channels } => {
                    param_grads.insert(
                        layer.id.clone(),
                        LayerGrad::Bn {
                            gamma: Array1::zeros(*channels),
                            beta: Array1::zeros(*channels),
                        },
                    );
                }
                _ => {}
            }
            continue;
        };
        let src_idx: Vec<usize> = layer
            .inputs
            .iter()
            .map(|i| net.layer_index(i).expect("validated"))
            .collect();
        match &layer.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Conv {
                kernel_size,
                stride,
                padding,
                ..
            } => {
                let w = net.conv(&layer.id).expect("validated");
                let Cache::Conv { cols } = &acts.caches[idx] else {
                    return Err(Error::Invariant(format!(
                        "missing conv cache for `{}`",
                        layer.id
                    )));
                };
                let want_dx = src_idx[0] != input_idx;
                let x_shape = acts.outputs[src_idx[0]].dim();
                let (dw, db, dx) = conv_backward(
                    &dy,
                    cols,
                    &w.weight,
                    w.bias.is_some(),
                    x_shape,
                    *kernel_size,
                    *stride,
                    *padding,
                    want_dx,
                );
                param_grads.insert(
                    layer.id.clone(),
                    LayerGrad::Conv {
                        weight: dw,
                        bias: db,
                    },
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[src_idx[0]], dx);
                }
            }
            LayerKind::Bn { .. } => {
                let p = net.bn(&layer.id).expect("validated");
                let Cache::Bn { xhat, inv_std } = &acts.caches[idx] else {
                    return Err(Error::Invariant(format!(
                        "missing bn cache for `{}`",
                        layer.id
                    )));
                };
                let (dx, dgamma, dbeta) = bn_backward_train(&dy, xhat, inv_std, &p.gamma);
                param_grads.insert(
                    layer.id.clone(),
                    LayerGrad::Bn {
                        gamma: dgamma,
                        beta: dbeta,
                    },
                );
                accumulate(&mut grads[src_idx[0]], dx);
            }
            LayerKind::Relu => {
                let y = &acts.outputs[idx];
                let mut dx = dy;
                ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                accumulate(&mut grads[src_idx[0]], dx);
            }
            LayerKind::Output => accumulate(&mut grads[src_idx[0]], dy),
            LayerKind::Maxpool { .. } => {
                let Cache::Pool { argmax } = &acts.caches[idx] else {
                    return Err(Error::Invariant(format!(
                        "missing pool cache for `{}`",
                        layer.id
                    )));
                };
                let mut dx = Tensor::zeros(acts.outputs[src_idx[0]].raw_dim());
                let dxs = dx.as_slice_mut().expect("standard layout");
                for (g, &a) in dy.iter().zip(argmax) {
                    dxs[a as usize] += *g;
                }
                accumulate(&mut grads[src_idx[0]], dx);
            }
            LayerKind::Upsample { scale } => {
                accumulate(&mut grads[src_idx[0]], upsample_backward(&dy, *scale));
            }
            LayerKind::Concat => {
                let mut offset = 0;
                for &s in &src_idx {
                    let c = acts.outputs[s].shape()[1];
                    let part = dy
                        .slice(ndarray::s![.., offset..offset + c, .., ..])
                        .to_owned();
                    accumulate(&mut grads[s], part);
                    offset += c;
                }
            }
        }
    }
    // Report in graph order.
    param_grads.reverse();
    Ok(param_grads)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn conv_out_dim(size: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if size + 2 * p < k {
        return Err(Error::Shape(format!(
            "input extent {size} smaller than kernel {k}"
        )));
    }
    Ok((size + 2 * p - k) / s + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let xr = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *v = if ix >= 0 && ix < w as isize {
                            xr[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    x: &mut [f32],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xr = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            xr[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

type ConvOut = (Tensor, Option<Vec<Array2<f32>>>);

fn conv_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Array1<f32>>,
    k: usize,
    s: usize,
    p: usize,
    keep_cols: bool,
) -> Result<ConvOut> {
    let (n, c, h, w) = x.dim();
    let (cout, cin, _, _) = weight.dim();
    if c != cin {
        return Err(Error::Shape(format!(
            "conv expects {cin} input channels, got {c}"
        )));
    }
    let ho = conv_out_dim(h, k, s, p)?;
    let wo = conv_out_dim(w, k, s, p)?;
    let ckk = c * k * k;
    let plane = ho * wo;
    let weight = weight.as_standard_layout();
    let w2 = weight
        .view()
        .into_shape_with_order((cout, ckk))
        .expect("standard layout");
    let xs = x.as_slice().expect("standard layout");
    let mut y = Tensor::zeros((n, cout, ho, wo));
    let mut saved = Vec::with_capacity(if keep_cols { n } else { 0 });
    let mut cols = Array2::<f32>::zeros((ckk, plane));
    {
        let ys = y.as_slice_mut().expect("standard layout");
        for i in 0..n {
            im2col(
                &xs[i * c * h * w..(i + 1) * c * h * w],
                c,
                h,
                w,
                k,
                s,
                p,
                ho,
                wo,
                cols.as_slice_mut().unwrap(),
            );
            let mut yi = ArrayViewMut2::from_shape(
                (cout, plane),
                &mut ys[i * cout * plane..(i + 1) * cout * plane],
            )
            .unwrap();
            general_mat_mul(1.0, &w2, &cols, 0.0, &mut yi);
            if let Some(b) = bias {
                for (mut row, &bv) in yi.axis_iter_mut(Axis(0)).zip(b.iter()) {
                    row += bv;
                }
            }
            if keep_cols {
                saved.push(cols.clone());
            }
        }
    }
    Ok((y, keep_cols.then_some(saved)))
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    dy: &Tensor,
    cols: &[Array2<f32>],
    weight: &Tensor,
    has_bias: bool,
    x_shape: (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    want_dx: bool,
) -> (Tensor, Option<Array1<f32>>, Option<Tensor>) {
    let (n, c, h, w) = x_shape;
    let (_, cout, ho, wo) = dy.dim();
    let plane = ho * wo;
    let ckk = c * k * k;
    let weight = weight.as_standard_layout();
    let w2 = weight
        .view()
        .into_shape_with_order((cout, ckk))
        .expect("standard layout");
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().unwrap();
    let mut dw = Array2::<f32>::zeros((cout, ckk));
    let mut db = has_bias.then(|| Array1::<f32>::zeros(cout));
    let mut dx = want_dx.then(|| Tensor::zeros((n, c, h, w)));
    let mut dcols = Array2::<f32>::zeros((ckk, plane));
    for i in 0..n {
        let dyi = ArrayView2::from_shape(
            (cout, plane),
            &dys[i * cout * plane..(i + 1) * cout * plane],
        )
        .unwrap();
        general_mat_mul(1.0, &dyi, &cols[i].t(), 1.0, &mut dw);
        if let Some(db) = db.as_mut() {
            *db += &dyi.sum_axis(Axis(1));
        }
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(1.0, &w2.t(), &dyi, 0.0, &mut dcols);
            let dxs = dx.as_slice_mut().unwrap();
            col2im(
                dcols.as_slice().unwrap(),
                c,
                h,
                w,
                k,
                s,
                p,
                ho,
                wo,
                &mut dxs[i * c * h * w..(i + 1) * c * h * w],
            );
        }
    }
    let dw = dw.into_shape_with_order((cout, c, k, k)).unwrap();
    (dw, db, dx)
}

type BnTrainOut = (Tensor, Tensor, Vec<f32>, Vec<f32>, Vec<f32>);

fn bn_forward_train(x: &Tensor, gamma: &Array1<f32>, beta: &Array1<f32>, eps: f32) -> BnTrainOut {
    let (n, c, h, w) = x.dim();
    let plane = h * w;
    let m = (n * plane) as f64;
    let xs = x.as_slice().expect("standard layout");
    let mut mean = vec![0f32; c];
    let mut var = vec![0f32; c];
    let mut inv_std = vec![0f32; c];
    for ch in 0..c {
        let mut sum = 0f64;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            sum += xs[base..base + plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0f64;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            sq += xs[base..base + plane]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        let v = sq / m;
        mean[ch] = mu as f32;
        var[ch] = v as f32;
        inv_std[ch] = (1.0 / (v + eps as f64).sqrt()) as f32;
    }
    let mut xhat = Tensor::zeros(x.raw_dim());
    let mut y = Tensor::zeros(x.raw_dim());
    {
        let xh = xhat.as_slice_mut().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for j in base..base + plane {
                    let v = (xs[j] - mu) * is;
                    xh[j] = v;
                    ys[j] = g * v + b;
                }
            }
        }
    }
    (y, xhat, mean, var, inv_std)
}

fn bn_forward_eval(x: &Tensor, p: &crate::netgraph::BatchNormParams) -> Tensor {
    let (n, c, h, w) = x.dim();
    let plane = h * w;
    let xs = x.as_slice().expect("standard layout");
    let mut y = Tensor::zeros(x.raw_dim());
    let ys = y.as_slice_mut().unwrap();
    for ch in 0..c {
        let scale = p.gamma[ch] / (p.running_var[ch] + p.epsilon).sqrt();
        let shift = p.beta[ch] - scale * p.running_mean[ch];
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                ys[j] = scale * xs[j] + shift;
            }
        }
    }
    y
}

fn bn_backward_train(
    dy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f32],
    gamma: &Array1<f32>,
) -> (Tensor, Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = dy.dim();
    let plane = h * w;
    let m = (n * plane) as f32;
    let dys = dy.as_slice().expect("standard layout");
    let xh = xhat.as_slice().unwrap();
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    for ch in 0..c {
        let (mut dg, mut dbv) = (0f64, 0f64);
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                dg += (dys[j] * xh[j]) as f64;
                dbv += dys[j] as f64;
            }
        }
        dgamma[ch] = dg as f32;
        dbeta[ch] = dbv as f32;
    }
    let mut dx = Tensor::zeros(dy.raw_dim());
    let dxs = dx.as_slice_mut().unwrap();
    for ch in 0..c {
        let k = gamma[ch] * inv_std[ch] / m;
        let (dg, dbv) = (dgamma[ch], dbeta[ch]);
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                dxs[j] = k * (m * dys[j] - dbv - xh[j] * dg);
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn maxpool_forward(x: &Tensor, k: usize) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dim();
    if h % k != 0 || w % k != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} map not divisible by pool size {k}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let xs = x.as_slice().expect("standard layout");
    let mut y = Tensor::zeros((n, c, ho, wo));
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let ys = y.as_slice_mut().unwrap();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let j = base + (oy * k + dy) * w + ox * k + dx;
                        if xs[j] > xs[best] {
                            best = j;
                        }
                    }
                }
                ys[o] = xs[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((y, argmax))
}

fn upsample_forward(x: &Tensor, s: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h * s, w * s);
    let xs = x.as_slice().expect("standard layout");
    let mut y = Tensor::zeros((n, c, ho, wo));
    let ys = y.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut ys[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let row = &src[(oy / s) * w..(oy / s + 1) * w];
            for (ox, v) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *v = row[ox / s];
            }
        }
    }
    y
}

fn upsample_backward(dy: &Tensor, s: usize) -> Tensor {
    let (n, c, ho, wo) = dy.dim();
    let (h, w) = (ho / s, wo / s);
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().unwrap();
    let mut dx = Tensor::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let src = &dys[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dxs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / s) * w + ox / s] += src[oy * wo + ox];
            }
        }
    }
    dx
}
