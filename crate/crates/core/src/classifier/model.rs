use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierError, Result};
use crate::nn::{load_weights, save_weights, NetworkSpec, Parameters};
use crate::volume_io::HuWindow;

/// File names inside a model directory.
pub const MODEL_WEIGHTS: &str = "model.ctsw";
pub const MODEL_JSON: &str = "model.json";

const FORMAT: &str = "ctscreen-model-1";

/// Constants that turn a CT slice into a network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub window: HuWindow,
    pub input_size: usize,
    pub crop_pad_mm: f64,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self { window: HuWindow::default(), input_size: 128, crop_pad_mm: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub params: Parameters<f32>,
    pub preprocessing: Preprocessing,
    /// Raw Grad-CAM value mapped to 1.0.
    pub activation_calibration: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    spec: NetworkSpec,
    preprocessing: Preprocessing,
    activation_calibration: f64,
    weights: String,
}

impl TrainedModel {
    /// A model whose weights are all zero: every slice scores exactly 0.5.
    pub fn zeroed(preprocessing: Preprocessing) -> Self {
        let spec = NetworkSpec::residual_classifier(preprocessing.input_size);
        Self { params: Parameters::zeros(&spec), spec, preprocessing, activation_calibration: 0.0 }
    }

    /// Writes `model.ctsw` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MODEL_WEIGHTS), save_weights(&self.spec, &self.params)?)?;
        let sidecar = Sidecar {
            format: FORMAT.into(),
            spec: self.spec.clone(),
            preprocessing: self.preprocessing,
            activation_calibration: self.activation_calibration,
            weights: MODEL_WEIGHTS.into(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| ClassifierError::ModelFile(e.to_string()))?;
        std::fs::write(dir.join(MODEL_JSON), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read(dir.join(MODEL_JSON))?;
        let sidecar: Sidecar =
            serde_json::from_slice(&text).map_err(|e| ClassifierError::ModelFile(format!("{MODEL_JSON}: {e}")))?;
        if sidecar.format != FORMAT {
            return Err(ClassifierError::ModelFile(format!("unknown model format {:?}", sidecar.format)));
        }
        sidecar.spec.validate_classifier()?;
        if sidecar.spec.input != [1, sidecar.preprocessing.input_size, sidecar.preprocessing.input_size] {
            return Err(ClassifierError::ModelFile("network input does not match preprocessing size".into()));
        }
        let params = load_weights(&std::fs::read(dir.join(&sidecar.weights))?, &sidecar.spec)?;
        Ok(Self {
            spec: sidecar.spec,
            params,
            preprocessing: sidecar.preprocessing,
            activation_calibration: sidecar.activation_calibration,
        })
    }
}
