use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { k: usize, cin: usize, cout: usize, stride: usize, pad: usize },
    Relu,
    /// 2×2 max pooling with stride 2.
    MaxPool2,
    /// `relu(conv3x3(relu(conv3x3(x))) + shortcut(x))`; the shortcut is a
    /// strided 1×1 conv when channels or stride change.
    Residual { cin: usize, cout: usize, stride: usize },
    GlobalAvgPool,
    Dense { cin: usize, cout: usize },
}

impl LayerSpec {
    pub(crate) fn residual_has_projection(cin: usize, cout: usize, stride: usize) -> bool {
        cin != cout || stride != 1
    }

    /// Shapes of this layer's parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { k, cin, cout, .. } => vec![vec![cout, cin * k * k], vec![cout]],
            LayerSpec::Residual { cin, cout, stride } => {
                let mut s = vec![vec![cout, cin * 9], vec![cout], vec![cout, cout * 9], vec![cout]];
                if Self::residual_has_projection(cin, cout, stride) {
                    s.push(vec![cout, cin]);
                    s.push(vec![cout]);
                }
                s
            }
            LayerSpec::Dense { cin, cout } => vec![vec![cout, cin], vec![cout]],
            LayerSpec::Relu | LayerSpec::MaxPool2 | LayerSpec::GlobalAvgPool => Vec::new(),
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || NnError::ShapeMismatch(format!("{self:?} cannot take input {input:?}"));
        let spatial = |k: usize, stride: usize, pad: usize, n: usize| -> Result<usize> {
            if stride == 0 || n + 2 * pad < k {
                return Err(bad());
            }
            Ok((n + 2 * pad - k) / stride + 1)
        };
        match *self {
            LayerSpec::Conv2d { k, cin, cout, stride, pad } => match input {
                [c, h, w] if *c == cin && k > 0 => {
                    Ok(vec![cout, spatial(k, stride, pad, *h)?, spatial(k, stride, pad, *w)?])
                }
                _ => Err(bad()),
            },
            LayerSpec::Residual { cin, cout, stride } => match input {
                [c, h, w] if *c == cin => Ok(vec![cout, spatial(3, stride, 1, *h)?, spatial(3, stride, 1, *w)?]),
                _ => Err(bad()),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(bad()),
            },
            LayerSpec::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => Err(bad()),
            },
            LayerSpec::Dense { cin, cout } => {
                if input.iter().product::<usize>() == cin {
                    Ok(vec![cout])
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// An ordered layer stack plus the layer whose output Grad-CAM inspects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// (channels, height, width)
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub grad_cam_layer: usize,
}

impl NetworkSpec {
    /// conv3×3(1→16) → relu → residual(16) → residual(32, /2) →
    /// residual(64, /2) → global average pool → dense(64→2).
    pub fn residual_classifier(size: usize) -> Self {
        Self {
            input: [1, size, size],
            layers: vec![
                LayerSpec::Conv2d { k: 3, cin: 1, cout: 16, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Residual { cin: 16, cout: 16, stride: 1 },
                LayerSpec::Residual { cin: 16, cout: 32, stride: 2 },
                LayerSpec::Residual { cin: 32, cout: 64, stride: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { cin: 64, cout: 2 },
            ],
            grad_cam_layer: 4,
        }
    }

    /// Shape of every layer's output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(NnError::InvalidSpec("no layers".into()));
        }
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        if self.grad_cam_layer >= self.layers.len() {
            return Err(NnError::InvalidSpec(format!("grad_cam_layer {} out of range", self.grad_cam_layer)));
        }
        Ok(out)
    }

    /// Checks the two-class classifier invariants: exactly one global average
    /// pool, Grad-CAM layer before it, and a 2-way output.
    pub fn validate_classifier(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let pools: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::GlobalAvgPool))
            .map(|(i, _)| i)
            .collect();
        if pools.len() != 1 {
            return Err(NnError::InvalidSpec(format!("{} global pools, need exactly 1", pools.len())));
        }
        if self.grad_cam_layer >= pools[0] {
            return Err(NnError::InvalidSpec("grad_cam_layer must precede the global pool".into()));
        }
        if shapes.last().map(Vec::as_slice) != Some(&[2][..]) {
            return Err(NnError::InvalidSpec("output must have 2 classes".into()));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<Vec<usize>>> {
        self.layers.iter().map(LayerSpec::param_shapes).collect()
    }
}

/// Per-layer weight and bias tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = f32> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            layers: spec
                .param_shapes()
                .iter()
                .map(|shapes| shapes.iter().map(|s| Tensor::zeros(s)).collect())
                .collect(),
        }
    }

    /// Fan-in-scaled uniform initialization with zero biases. Weights feeding
    /// a ReLU use `U(±sqrt(6/fan_in))`; the residual branch's second conv,
    /// shortcut projection and dense layer use `U(±sqrt(3/fan_in))`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(spec);
        for (layer, tensors) in spec.layers.iter().zip(params.layers.iter_mut()) {
            let gains: &[f64] = match layer {
                LayerSpec::Conv2d { .. } => &[6.0],
                LayerSpec::Residual { .. } => &[6.0, 0.0, 3.0, 0.0, 3.0],
                LayerSpec::Dense { .. } => &[3.0],
                _ => &[],
            };
            for (t, &gain) in tensors.iter_mut().zip(gains) {
                if t.shape().len() != 2 || gain == 0.0 {
                    continue;
                }
                let fan_in = t.shape()[1] as f64;
                let bound = (gain / fan_in).sqrt();
                for w in t.data_mut() {
                    *w = T::of(rng.random_range(-bound..bound));
                }
            }
        }
        params
    }

    pub fn check_shapes(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.param_shapes();
        if expected.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter layers for {} spec layers",
                self.layers.len(),
                expected.len()
            )));
        }
        for (i, (shapes, tensors)) in expected.iter().zip(&self.layers).enumerate() {
            if shapes.len() != tensors.len() || shapes.iter().zip(tensors).any(|(s, t)| s.as_slice() != t.shape()) {
                return Err(NnError::ShapeMismatch(format!("layer {i} parameter shapes differ from spec")));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flatten()
    }

    pub fn add_assign(&mut self, other: &Parameters<T>) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters { layers: self.layers.iter().map(|l| l.iter().map(Tensor::cast).collect()).collect() }
    }

    pub fn count(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }
}
