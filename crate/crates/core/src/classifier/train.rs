use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::infer::cam_weights;
use super::preprocess::{bilinear_resize, lung_crop, preprocess_slice_in};
use super::{augment, AugmentationConfig, ClassifierError, Preprocessing, Result, SliceSample, TrainedModel};
use crate::evalharness::{percentile, roc_auc};
use crate::lung_seg::segment_lungs;
use crate::mask::Mask;
use crate::nn::{
    adam_step, backward, forward, softmax_cross_entropy, AdamConfig, AdamState, NetworkSpec, Parameters, Tensor,
};
use crate::phantom::sidecar_paths;
use crate::volume_io::{read_ctvol, Label, StudyManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub aug: AugmentationConfig,
    /// Fraction of studies held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub preprocessing: Preprocessing,
    /// Slices with less ground-truth opacity than this are left out of
    /// training rather than labelled either way.
    pub min_abnormal_area_mm2: f64,
    /// Train on at most this many slices of each class.
    pub slices_per_class: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            aug: AugmentationConfig::default(),
            val_fraction: 0.2,
            seed: 42,
            preprocessing: Preprocessing::default(),
            min_abnormal_area_mm2: 100.0,
            slices_per_class: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(ClassifierError::InvalidConfig(format!(
                "batch {} lr {} val_fraction {}",
                self.batch, self.lr, self.val_fraction
            )));
        }
        if self.preprocessing.input_size < 8 {
            return Err(ClassifierError::InvalidConfig("input size below 8".into()));
        }
        self.aug.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Mean loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub train_studies: Vec<String>,
    pub val_studies: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    /// Validation scores and labels of the selected parameters.
    pub val_scores: Vec<f64>,
    pub val_labels: Vec<bool>,
}

/// Preprocessed lung slices of every manifest row, labelled from the
/// ground-truth opacity sidecars (rows labelled negative without sidecars are
/// taken as all-normal).
pub fn load_training_slices(manifest: &StudyManifest, cfg: &TrainConfig) -> Result<Vec<SliceSample>> {
    if manifest.is_empty() {
        return Err(ClassifierError::EmptyManifest);
    }
    let per_row: Vec<Result<Vec<SliceSample>>> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let path = manifest.resolve(row);
            let v = read_ctvol(&path)?;
            let opacity_path = sidecar_paths(&path).1;
            let opacity = if opacity_path.exists() {
                Some(Mask::from_volume(&read_ctvol(&opacity_path)?))
            } else if row.label == Label::Negative {
                None
            } else {
                return Err(ClassifierError::MissingSliceLabels(row.study_id.clone()));
            };
            let lungs = segment_lungs(&v)?;
            let crop = lung_crop(&lungs, cfg.preprocessing.crop_pad_mm)?;
            let [sx, sy, _] = v.spacing();
            let mut out = Vec::new();
            for &z in &lungs.lung_slice_set {
                let area = opacity.as_ref().map_or(0.0, |m| m.slice_count(z) as f64 * sx * sy);
                let abnormal = if area == 0.0 {
                    false
                } else if area >= cfg.min_abnormal_area_mm2 {
                    true
                } else {
                    continue;
                };
                let mut s = preprocess_slice_in(&v, &lungs, z, crop, &cfg.preprocessing)?.sample;
                s.abnormal = abnormal;
                s.study_id = row.study_id.clone();
                out.push(s);
            }
            Ok(out)
        })
        .collect();
    let mut samples = Vec::new();
    for r in per_row {
        samples.extend(r?);
    }
    Ok(samples)
}

/// Keeps at most `per_class` random slices of each class, in original order.
pub fn select_balanced(samples: Vec<SliceSample>, per_class: usize, seed: u64) -> Vec<SliceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; samples.len()];
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].abnormal == class).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(per_class) {
            keep[i] = true;
        }
    }
    samples.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect()
}

/// Patient-wise split: whole studies go to validation, stratified by whether
/// the study has any abnormal slice. Returns (train, validation) indices.
pub fn split_by_study(samples: &[SliceSample], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut studies: BTreeMap<&str, bool> = BTreeMap::new();
    for s in samples {
        *studies.entry(&s.study_id).or_default() |= s.abnormal;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut val_studies = Vec::new();
    for class in [false, true] {
        let mut ids: Vec<&str> = studies.iter().filter(|(_, &a)| a == class).map(|(&id, _)| id).collect();
        ids.shuffle(&mut rng);
        let mut n_val = (ids.len() as f64 * val_fraction).round() as usize;
        if val_fraction > 0.0 && ids.len() >= 2 {
            n_val = n_val.clamp(1, ids.len() - 1);
        }
        val_studies.extend(ids.into_iter().take(n_val));
    }
    (0..samples.len()).partition(|&i| !val_studies.contains(&samples[i].study_id.as_str()))
}

fn to_input(s: &SliceSample) -> Result<Tensor<f32>> {
    Ok(Tensor::new(vec![1, s.size, s.size], s.image.clone())?)
}

fn evaluate(spec: &NetworkSpec, params: &Parameters<f32>, samples: &[&SliceSample]) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let pass = forward(spec, params, &to_input(s)?)?;
        let (l, _) = softmax_cross_entropy(pass.logits(), s.abnormal as usize)?;
        loss += l as f64;
        scores.push(crate::nn::softmax(pass.logits().data())[1] as f64);
    }
    Ok((loss / samples.len().max(1) as f64, scores))
}

/// 99th percentile of raw Grad-CAM values over the non-background pixels of
/// the given slices.
fn calibration(spec: &NetworkSpec, params: &Parameters<f32>, samples: &[&SliceSample]) -> Result<f64> {
    let mut values = Vec::new();
    for s in samples {
        let parts = cam_weights(spec, params, &to_input(s)?)?;
        let sh = parts.activation.shape();
        let up = bilinear_resize(&parts.raw, sh[2], sh[1], s.size, s.size);
        values.extend(up.iter().zip(&s.image).filter(|(_, &px)| px > 0.0).map(|(&v, _)| v as f64));
    }
    values.sort_by(f64::total_cmp);
    Ok(if values.is_empty() { 0.0 } else { percentile(&values, 99.0) })
}

fn draw_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32 | position as u64)
}

/// Trains the residual classifier on `samples` and returns the parameters
/// of the best validation epoch (highest AUC, then lowest loss).
pub fn train(samples: &[SliceSample], cfg: &TrainConfig) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ClassifierError::EmptyManifest);
    }
    if samples.iter().all(|s| s.abnormal) || samples.iter().all(|s| !s.abnormal) {
        return Err(ClassifierError::SingleClassData);
    }
    let size = cfg.preprocessing.input_size;
    if let Some(s) = samples.iter().find(|s| s.size != size || s.image.len() != size * size) {
        return Err(ClassifierError::InvalidConfig(format!("sample of size {} for input size {size}", s.size)));
    }
    let (train_idx, val_idx) = split_by_study(samples, cfg.val_fraction, cfg.seed);
    let train_set: Vec<&SliceSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&SliceSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    if train_set.is_empty() {
        return Err(ClassifierError::InvalidConfig("validation split left no training slices".into()));
    }
    let val_labels: Vec<bool> = val_set.iter().map(|s| s.abnormal).collect();
    let val_has_both = val_labels.iter().any(|&l| l) && val_labels.iter().any(|&l| !l);

    let spec = NetworkSpec::residual_classifier(size);
    let mut params = Parameters::<f32>::init(&spec, cfg.seed);
    let mut adam = AdamState::new(&spec, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);

    let mut history = TrainHistory {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        train_studies: study_ids(&train_set),
        val_studies: study_ids(&val_set),
        n_train: train_set.len(),
        n_val: val_set.len(),
        val_scores: Vec::new(),
        val_labels: val_labels.clone(),
    };
    let mut best: Option<((f64, f64), Parameters<f32>, Vec<f64>)> = None;
    info!("training on {} slices, validating on {}", train_set.len(), val_set.len());

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut grads = Parameters::<f32>::zeros(&spec);
            let mut batch_loss = 0.0;
            for (j, &i) in chunk.iter().enumerate() {
                let s = augment(train_set[i], &cfg.aug, draw_seed(cfg.seed, epoch, b * cfg.batch + j))?;
                let pass = forward(&spec, &params, &to_input(&s)?)?;
                let (loss, dlogits) = softmax_cross_entropy(pass.logits(), s.abnormal as usize)?;
                batch_loss += loss as f64;
                grads.add_assign(&backward(&spec, &params, &pass, &dlogits)?.params);
            }
            grads.scale(1.0 / chunk.len() as f32);
            adam_step(&mut params, &grads, &mut adam)?;
            history.step_losses.push(batch_loss / chunk.len() as f64);
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (val_loss, val_auc, scores) = if val_set.is_empty() {
            (None, None, Vec::new())
        } else {
            let (loss, scores) = evaluate(&spec, &params, &val_set)?;
            let auc = if val_has_both { Some(roc_auc(&scores, &val_labels).map_err(|e| ClassifierError::InvalidConfig(e.to_string()))?.auc) } else { None };
            (Some(loss), auc, scores)
        };
        debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:?} auc {val_auc:?}");
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, val_auc });
        // later epochs win when validation is absent
        let key = (val_auc.unwrap_or(0.0), -val_loss.unwrap_or(-(epoch as f64)));
        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
            best = Some((key, params.clone(), scores));
            history.best_epoch = epoch;
        }
    }
    let (params, val_scores) = match best {
        Some((_, p, s)) => (p, s),
        None => (params, Vec::new()),
    };
    history.val_scores = val_scores;

    let positives: Vec<&SliceSample> = {
        let val_pos: Vec<&SliceSample> = val_set.iter().copied().filter(|s| s.abnormal).collect();
        if val_pos.is_empty() {
            train_set.iter().copied().filter(|s| s.abnormal).collect()
        } else {
            val_pos
        }
    };
    let activation_calibration = calibration(&spec, &params, &positives)?;
    info!("best epoch {}, activation calibration {activation_calibration:.6}", history.best_epoch);
    Ok((TrainedModel { spec, params, preprocessing: cfg.preprocessing, activation_calibration }, history))
}

fn study_ids(set: &[&SliceSample]) -> Vec<String> {
    let mut ids: Vec<String> = set.iter().map(|s| s.study_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

/// [`load_training_slices`] → optional class balancing → [`train`].
pub fn train_from_manifest(manifest: &StudyManifest, cfg: &TrainConfig) -> Result<(TrainedModel, TrainHistory)> {
    let mut samples = load_training_slices(manifest, cfg)?;
    if let Some(n) = cfg.slices_per_class {
        samples = select_balanced(samples, n, cfg.seed);
    }
    train(&samples, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bright square on dark background for abnormal, dark only for normal.
    fn toy_samples(n_studies: usize, size: usize) -> Vec<SliceSample> {
        let mut out = Vec::new();
        for study in 0..n_studies {
            for z in 0..4 {
                let abnormal = study % 2 == 0 && z % 2 == 0;
                let mut image = vec![0.15f32; size * size];
                if abnormal {
                    let o = (study + z) % (size / 2);
                    for y in o..o + size / 3 {
                        for x in o..o + size / 3 {
                            image[y * size + x] = 0.4;
                        }
                    }
                }
                out.push(SliceSample { image, size, abnormal, study_id: format!("s{study:02}"), z });
            }
        }
        out
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 4,
            preprocessing: Preprocessing { input_size: 16, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn split_is_patient_wise_and_stratified() {
        let samples = toy_samples(10, 16);
        let (tr, va) = split_by_study(&samples, 0.2, 7);
        assert_eq!(tr.len() + va.len(), samples.len());
        for &i in &tr {
            assert!(va.iter().all(|&j| samples[j].study_id != samples[i].study_id));
        }
        assert!(va.iter().any(|&i| samples[i].abnormal));
        assert!(va.iter().any(|&i| !samples[i].abnormal));
    }

    #[test]
    fn one_epoch_smoke() {
        let samples = toy_samples(4, 16);
        let cfg = TrainConfig { val_fraction: 0.0, batch: 1, ..small_cfg(1) };
        let (model, history) = train(&samples[..8], &cfg).unwrap();
        assert_eq!(history.step_losses.len(), 8);
        assert!(history.step_losses.iter().all(|l| l.is_finite()));
        let half = history.step_losses.len() / 2;
        let first: f64 = history.step_losses[..half].iter().sum();
        let last: f64 = history.step_losses[half..].iter().sum();
        assert!(last <= first, "{first} -> {last}");
        assert!(model.activation_calibration >= 0.0);
    }

    #[test]
    fn same_seed_same_weights() {
        let samples = toy_samples(6, 16);
        let a = train(&samples, &small_cfg(2)).unwrap();
        let b = train(&samples, &small_cfg(2)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn learns_toy_task() {
        let samples = toy_samples(10, 16);
        let (model, history) = train(&samples, &small_cfg(15)).unwrap();
        assert!(history.epochs[history.best_epoch].val_auc.unwrap() >= 0.9, "{history:?}");
        assert!(model.activation_calibration > 0.0);
    }

    #[test]
    fn bad_inputs_rejected() {
        let samples = toy_samples(4, 16);
        let normals: Vec<SliceSample> = samples.iter().filter(|s| !s.abnormal).cloned().collect();
        assert!(matches!(train(&normals, &small_cfg(1)), Err(ClassifierError::SingleClassData)));
        assert!(matches!(train(&[], &small_cfg(1)), Err(ClassifierError::EmptyManifest)));
        let cfg = TrainConfig { batch: 0, ..small_cfg(1) };
        assert!(matches!(train(&samples, &cfg), Err(ClassifierError::InvalidConfig(_))));
    }

    #[test]
    fn balanced_selection_caps_each_class() {
        let samples = toy_samples(10, 8);
        let sel = select_balanced(samples, 5, 1);
        assert_eq!(sel.iter().filter(|s| s.abnormal).count(), 5);
        assert_eq!(sel.iter().filter(|s| !s.abnormal).count(), 5);
    }
}
