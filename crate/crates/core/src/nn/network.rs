use super::ops::{self, ConvGeom};
use super::{LayerSpec, NetworkSpec, NnError, Parameters, Real, Result, Tensor};

/// Everything a forward pass retains for backward and Grad-CAM.
#[derive(Debug, Clone)]
pub struct ForwardPass<T = f32> {
    pub input: Tensor<T>,
    /// Output of every layer, in order; the last entry holds the logits.
    pub outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Argmax(Vec<usize>),
    /// First-branch activation after its ReLU.
    Residual(Vec<T>),
}

impl<T: Real> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("at least one layer")
    }

    /// Input of layer `i`.
    fn layer_input(&self, i: usize) -> &Tensor<T> {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }
}

/// Parameter gradients plus the gradients at the input and at the output of
/// the Grad-CAM layer.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    pub params: Parameters<T>,
    pub input: Tensor<T>,
    pub grad_cam: Tensor<T>,
}

fn conv_geom(input: &[usize], k: usize, cout: usize, stride: usize, pad: usize) -> ConvGeom {
    ConvGeom { cin: input[0], h: input[1], w: input[2], cout, k, stride, pad }
}

fn relu<T: Real>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = x.max(T::zero()));
}

/// Runs `input` through the network, keeping every intermediate output.
pub fn forward<T: Real>(spec: &NetworkSpec, params: &Parameters<T>, input: &Tensor<T>) -> Result<ForwardPass<T>> {
    let shapes = spec.shapes()?;
    params.check_shapes(spec)?;
    if input.shape() != spec.input {
        return Err(NnError::ShapeMismatch(format!("input {:?}, network expects {:?}", input.shape(), spec.input)));
    }
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(spec.layers.len());
    let mut caches = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = if i == 0 { input } else { &outputs[i - 1] };
        let p = &params.layers[i];
        let (data, cache) = match *layer {
            LayerSpec::Conv2d { k, cout, stride, pad, .. } => {
                let g = conv_geom(x.shape(), k, cout, stride, pad);
                (ops::conv_forward(x.data(), p[0].data(), p[1].data(), &g), Cache::None)
            }
            LayerSpec::Relu => {
                let mut y = x.data().to_vec();
                relu(&mut y);
                (y, Cache::None)
            }
            LayerSpec::MaxPool2 => {
                let s = x.shape();
                let (y, arg) = ops::maxpool_forward(x.data(), s[0], s[1], s[2]);
                (y, Cache::Argmax(arg))
            }
            LayerSpec::Residual { cout, stride, .. } => {
                let g1 = conv_geom(x.shape(), 3, cout, stride, 1);
                let mut a1 = ops::conv_forward(x.data(), p[0].data(), p[1].data(), &g1);
                relu(&mut a1);
                let g2 = ConvGeom { cin: cout, h: g1.out_h(), w: g1.out_w(), cout, k: 3, stride: 1, pad: 1 };
                let mut y = ops::conv_forward(&a1, p[2].data(), p[3].data(), &g2);
                if p.len() == 6 {
                    let gp = conv_geom(x.shape(), 1, cout, stride, 0);
                    let sc = ops::conv_forward(x.data(), p[4].data(), p[5].data(), &gp);
                    y.iter_mut().zip(sc).for_each(|(a, b)| *a += b);
                } else {
                    y.iter_mut().zip(x.data()).for_each(|(a, &b)| *a += b);
                }
                relu(&mut y);
                (y, Cache::Residual(a1))
            }
            LayerSpec::GlobalAvgPool => {
                let s = x.shape();
                let n = T::of((s[1] * s[2]) as f64);
                let y = x.data().chunks(s[1] * s[2]).map(|c| c.iter().fold(T::zero(), |a, &v| a + v) / n).collect();
                (y, Cache::None)
            }
            LayerSpec::Dense { .. } => (ops::dense_forward(x.data(), p[0].data(), p[1].data()), Cache::None),
        };
        let out = Tensor::new(shapes[i].clone(), data)?;
        if !out.is_finite() {
            return Err(NnError::NonFinite(format!("output of layer {i} ({layer:?})")));
        }
        outputs.push(out);
        caches.push(cache);
    }
    Ok(ForwardPass { input: input.clone(), outputs, caches })
}

/// Logits obtained by feeding `activation` in as the output of layer `layer`
/// and running only the layers after it.
pub fn forward_from<T: Real>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    layer: usize,
    activation: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shapes = spec.shapes()?;
    if layer >= shapes.len() || activation.shape() != shapes[layer] {
        return Err(NnError::ShapeMismatch(format!("activation {:?} is not the output of layer {layer}", activation.shape())));
    }
    if layer + 1 == spec.layers.len() {
        return Ok(activation.clone());
    }
    let input = match activation.shape() {
        &[c, h, w] => [c, h, w],
        other => return Err(NnError::ShapeMismatch(format!("cannot restart from shape {other:?}"))),
    };
    let head = NetworkSpec { input, layers: spec.layers[layer + 1..].to_vec(), grad_cam_layer: 0 };
    let head_params = Parameters { layers: params.layers[layer + 1..].to_vec() };
    Ok(forward(&head, &head_params, activation)?.logits().clone())
}

/// Propagates `dout` (gradient w.r.t. layer `i`'s output) through layer `i`,
/// accumulating parameter gradients into `dparams` when given.
fn layer_backward<T: Real>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    pass: &ForwardPass<T>,
    i: usize,
    dout: Vec<T>,
    dparams: Option<&mut Vec<Tensor<T>>>,
) -> Vec<T> {
    let x = pass.layer_input(i);
    let y = &pass.outputs[i];
    let p = &params.layers[i];
    let store = |grads: Vec<Vec<T>>| {
        if let Some(d) = dparams {
            for (t, g) in d.iter_mut().zip(grads) {
                t.data_mut().copy_from_slice(&g);
            }
        }
    };
    match (spec.layers[i], &pass.caches[i]) {
        (LayerSpec::Conv2d { k, cout, stride, pad, .. }, _) => {
            let g = conv_geom(x.shape(), k, cout, stride, pad);
            let cg = ops::conv_backward(x.data(), p[0].data(), &dout, &g);
            store(vec![cg.weight, cg.bias]);
            cg.input
        }
        (LayerSpec::Relu, _) => {
            dout.into_iter().zip(y.data()).map(|(g, &o)| if o > T::zero() { g } else { T::zero() }).collect()
        }
        (LayerSpec::MaxPool2, Cache::Argmax(arg)) => ops::maxpool_backward(&dout, arg, x.len()),
        (LayerSpec::Residual { cout, stride, .. }, Cache::Residual(a1)) => {
            let ds: Vec<T> =
                dout.into_iter().zip(y.data()).map(|(g, &o)| if o > T::zero() { g } else { T::zero() }).collect();
            let g1 = conv_geom(x.shape(), 3, cout, stride, 1);
            let g2 = ConvGeom { cin: cout, h: g1.out_h(), w: g1.out_w(), cout, k: 3, stride: 1, pad: 1 };
            let c2 = ops::conv_backward(a1, p[2].data(), &ds, &g2);
            let dz1: Vec<T> =
                c2.input.into_iter().zip(a1).map(|(g, &a)| if a > T::zero() { g } else { T::zero() }).collect();
            let c1 = ops::conv_backward(x.data(), p[0].data(), &dz1, &g1);
            let mut dx = c1.input;
            let mut grads = vec![c1.weight, c1.bias, c2.weight, c2.bias];
            if p.len() == 6 {
                let gp = conv_geom(x.shape(), 1, cout, stride, 0);
                let cp = ops::conv_backward(x.data(), p[4].data(), &ds, &gp);
                dx.iter_mut().zip(cp.input).for_each(|(a, b)| *a += b);
                grads.push(cp.weight);
                grads.push(cp.bias);
            } else {
                dx.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
            }
            store(grads);
            dx
        }
        (LayerSpec::GlobalAvgPool, _) => {
            let s = x.shape();
            let plane = s[1] * s[2];
            let n = T::of(plane as f64);
            dout.iter().flat_map(|&g| std::iter::repeat_n(g / n, plane)).collect()
        }
        (LayerSpec::Dense { .. }, _) => {
            let (dw, db, dx) = ops::dense_backward(x.data(), p[0].data(), &dout);
            store(vec![dw, db]);
            dx
        }
        (layer, _) => unreachable!("cache does not match {layer:?}"),
    }
}

fn check_pass<T: Real>(spec: &NetworkSpec, pass: &ForwardPass<T>, dlogits: &Tensor<T>) -> Result<()> {
    if pass.outputs.len() != spec.layers.len() || pass.caches.len() != spec.layers.len() {
        return Err(NnError::ShapeMismatch("forward pass does not match spec".into()));
    }
    if dlogits.shape() != pass.logits().shape() {
        return Err(NnError::ShapeMismatch(format!(
            "loss gradient {:?} vs logits {:?}",
            dlogits.shape(),
            pass.logits().shape()
        )));
    }
    Ok(())
}

/// Exact reverse-mode gradients of a scalar loss given `dlogits`.
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    pass: &ForwardPass<T>,
    dlogits: &Tensor<T>,
) -> Result<Gradients<T>> {
    check_pass(spec, pass, dlogits)?;
    params.check_shapes(spec)?;
    let mut grads = Parameters::zeros(spec);
    let mut d = dlogits.data().to_vec();
    let mut grad_cam = None;
    for i in (0..spec.layers.len()).rev() {
        if i == spec.grad_cam_layer {
            grad_cam = Some(Tensor::new(pass.outputs[i].shape().to_vec(), d.clone())?);
        }
        d = layer_backward(spec, params, pass, i, d, Some(&mut grads.layers[i]));
    }
    Ok(Gradients {
        params: grads,
        input: Tensor::new(pass.input.shape().to_vec(), d)?,
        grad_cam: grad_cam.expect("grad_cam_layer validated by spec"),
    })
}

/// Gradient with respect to the output of layer `stop`, skipping parameter
/// gradients and everything below `stop`.
pub fn backward_to<T: Real>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    pass: &ForwardPass<T>,
    dlogits: &Tensor<T>,
    stop: usize,
) -> Result<Tensor<T>> {
    check_pass(spec, pass, dlogits)?;
    if stop >= spec.layers.len() {
        return Err(NnError::InvalidSpec(format!("layer {stop} out of range")));
    }
    let mut d = dlogits.data().to_vec();
    for i in (stop + 1..spec.layers.len()).rev() {
        d = layer_backward(spec, params, pass, i, d, None);
    }
    Tensor::new(pass.outputs[stop].shape().to_vec(), d)
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `logits` against class `label` and its gradient
/// `softmax − one_hot`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let l = logits.data();
    if label >= l.len() {
        return Err(NnError::ShapeMismatch(format!("label {label} for {} classes", l.len())));
    }
    let max = l.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = max + l.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
    let loss = lse - l[label];
    let mut grad = softmax(l);
    grad[label] -= T::one();
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}
