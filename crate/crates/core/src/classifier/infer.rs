use serde::{Deserialize, Serialize};

use super::{ClassifierError, PreparedSlice, Result, SliceSample, TrainedModel};
use crate::nn::{backward_to, forward, softmax, NetworkSpec, NnError, Parameters, Real, Tensor};

/// Calibrated activation map on the slice grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamMap {
    /// (nx, ny)
    pub dims: [usize; 2],
    pub values: Vec<f32>,
}

impl GradCamMap {
    pub fn zeros(dims: [usize; 2]) -> Self {
        Self { dims, values: vec![0.0; dims[0] * dims[1]] }
    }

    /// Number of pixels with value ≥ `tau`.
    pub fn count_at_least(&self, tau: f32) -> usize {
        self.values.iter().filter(|&&v| v >= tau).count()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Intermediate Grad-CAM quantities for the abnormal class.
#[derive(Debug, Clone)]
pub struct CamParts<T> {
    /// Softmax probabilities (normal, abnormal).
    pub probabilities: [T; 2],
    pub logits: [T; 2],
    /// Activations of the Grad-CAM layer, (channels, h, w).
    pub activation: Tensor<T>,
    /// Spatial mean of ∂(abnormal logit)/∂activation per channel.
    pub alphas: Vec<T>,
    /// `relu(Σ_k α_k A_k)` at activation resolution.
    pub raw: Vec<T>,
}

/// Runs the network and derives Grad-CAM channel weights and the raw map.
pub fn cam_weights<T: Real>(spec: &NetworkSpec, params: &Parameters<T>, input: &Tensor<T>) -> Result<CamParts<T>> {
    let pass = forward(spec, params, input)?;
    let logits = pass.logits().data();
    if logits.len() != 2 {
        return Err(NnError::InvalidSpec("classifier needs 2 logits".into()).into());
    }
    let p = softmax(logits);
    let target = Tensor::new(vec![2], vec![T::zero(), T::one()])?;
    let grad = backward_to(spec, params, &pass, &target, spec.grad_cam_layer)?;
    let activation = pass.outputs[spec.grad_cam_layer].clone();
    let (c, plane) = match activation.shape() {
        &[c, h, w] => (c, h * w),
        other => return Err(NnError::ShapeMismatch(format!("grad-cam layer output {other:?}")).into()),
    };
    let n = T::of(plane as f64);
    let alphas: Vec<T> =
        grad.data().chunks(plane).map(|g| g.iter().fold(T::zero(), |a, &v| a + v) / n).collect();
    let mut raw = vec![T::zero(); plane];
    for k in 0..c {
        let a = alphas[k];
        for (r, &v) in raw.iter_mut().zip(&activation.data()[k * plane..(k + 1) * plane]) {
            *r += a * v;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(T::zero()));
    Ok(CamParts { probabilities: [p[0], p[1]], logits: [logits[0], logits[1]], activation, alphas, raw })
}

fn input_tensor(model: &TrainedModel, sample: &SliceSample) -> Result<Tensor<f32>> {
    let size = model.preprocessing.input_size;
    if sample.size != size || sample.image.len() != size * size {
        return Err(NnError::ShapeMismatch(format!("{}×{} sample for a {size}×{size} model", sample.size, sample.size))
            .into());
    }
    Ok(Tensor::new(vec![1, size, size], sample.image.clone())?)
}

/// Softmax probability of the abnormal class.
pub fn predict_slice(model: &TrainedModel, sample: &SliceSample) -> Result<f64> {
    let pass = forward(&model.spec, &model.params, &input_tensor(model, sample)?)?;
    Ok(softmax(pass.logits().data())[1] as f64)
}

/// Upsamples a raw activation-resolution map onto the slice grid through the
/// crop box; zero outside the crop and outside the lung.
pub(crate) fn raw_slice_map(raw: &[f32], fh: usize, fw: usize, prepared: &PreparedSlice) -> Vec<f32> {
    let [nx, ny] = prepared.slice_dims;
    let crop = prepared.crop;
    let axis = |i: usize, n_feat: usize, n_crop: usize| {
        let f = ((i as f64 + 0.5) * n_feat as f64 / n_crop as f64 - 0.5).clamp(0.0, (n_feat - 1) as f64);
        let f0 = f.floor() as usize;
        (f0, (f0 + 1).min(n_feat - 1), (f - f0 as f64) as f32)
    };
    let xs: Vec<_> = (0..crop.width).map(|x| axis(x, fw, crop.width)).collect();
    let mut out = vec![0.0f32; nx * ny];
    for y in 0..crop.height {
        let (y0, y1, ty) = axis(y, fh, crop.height);
        for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
            let i = (crop.y0 + y) * nx + crop.x0 + x;
            if !prepared.lung[i] {
                continue;
            }
            let top = raw[y0 * fw + x0] + (raw[y0 * fw + x1] - raw[y0 * fw + x0]) * tx;
            let bottom = raw[y1 * fw + x0] + (raw[y1 * fw + x1] - raw[y1 * fw + x0]) * tx;
            out[i] = top + (bottom - top) * ty;
        }
    }
    out
}

fn calibrated(model: &TrainedModel, parts: &CamParts<f32>, prepared: &PreparedSlice) -> GradCamMap {
    let s = parts.activation.shape();
    let raw = raw_slice_map(&parts.raw, s[1], s[2], prepared);
    let cal = model.activation_calibration as f32;
    GradCamMap { dims: prepared.slice_dims, values: raw.into_iter().map(|v| (v / cal).clamp(0.0, 1.0)).collect() }
}

fn check_calibration(model: &TrainedModel) -> Result<()> {
    let c = model.activation_calibration;
    if !(c > 0.0 && c.is_finite()) {
        return Err(ClassifierError::UncalibratedModel(c));
    }
    Ok(())
}

/// Calibrated Grad-CAM map of the abnormal class for a prepared slice.
pub fn grad_cam(model: &TrainedModel, prepared: &PreparedSlice) -> Result<GradCamMap> {
    check_calibration(model)?;
    let parts = cam_weights(&model.spec, &model.params, &input_tensor(model, &prepared.sample)?)?;
    Ok(calibrated(model, &parts, prepared))
}

/// Abnormal probability plus the Grad-CAM map, which is only computed for
/// slices scoring ≥ 0.5 (others get an all-zero map).
pub fn score_and_map(model: &TrainedModel, prepared: &PreparedSlice) -> Result<(f64, GradCamMap)> {
    check_calibration(model)?;
    let parts = cam_weights(&model.spec, &model.params, &input_tensor(model, &prepared.sample)?)?;
    let score = parts.probabilities[1] as f64;
    let map = if score >= 0.5 { calibrated(model, &parts, prepared) } else { GradCamMap::zeros(prepared.slice_dims) };
    Ok((score, map))
}
