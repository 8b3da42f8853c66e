//! Case decision from the ratio of positive lung slices, activation-volume
//! (corona) scores, and longitudinal timelines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{lung_crop, preprocess_slice_in, score_and_map, ClassifierError, GradCamMap, TrainedModel};
use crate::detector3d::{detect_focal_opacities, match_lesions, DetectorConfig, DetectorError, Lesion};
use crate::lung_seg::{segment_lungs, LungMask, SegError};
use crate::volume_io::CtVolume;

/// Default case threshold on the positive-slice ratio.
pub const DEFAULT_THRESHOLD: f64 = 0.011;
/// Default binarization level of calibrated maps.
pub const DEFAULT_TAU: f64 = 0.5;
/// A slice is positive when its score reaches this value.
pub const SLICE_POSITIVE: f64 = 0.5;
/// Lesion matching gate between time points, mm.
pub const TRACK_GATE_MM: f64 = 20.0;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("no lung slices")]
    NoLungSlices,
    #[error("time points are not strictly ordered by day offset")]
    UnorderedTimepoints,
    #[error("timeline mixes studies {0:?} and {1:?}")]
    MixedStudies(String, String),
    #[error("timeline has no time points")]
    EmptyTimeline,
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),
    #[error("slice {0} is outside the volume")]
    SliceOutOfRange(usize),
    #[error(transparent)]
    Segmentation(#[from] SegError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

pub type Result<T, E = ScoringError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Positive,
    Negative,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Positive => "positive",
            Decision::Negative => "negative",
        }
    }
}

/// Fraction of lung slices scoring ≥ 0.5. `scores` is indexed by z.
pub fn positive_ratio(scores: &[f64], lung_slices: &[usize]) -> Result<f64> {
    if lung_slices.is_empty() {
        return Err(ScoringError::NoLungSlices);
    }
    let mut positive = 0usize;
    for &z in lung_slices {
        let s = *scores.get(z).ok_or(ScoringError::SliceOutOfRange(z))?;
        if s >= SLICE_POSITIVE {
            positive += 1;
        }
    }
    Ok(positive as f64 / lung_slices.len() as f64)
}

/// Positive iff the ratio strictly exceeds the threshold.
pub fn decide_case(ratio: f64, threshold: f64) -> Decision {
    if ratio > threshold {
        Decision::Positive
    } else {
        Decision::Negative
    }
}

/// Volume in cm³ of map pixels at or above `tau`.
pub fn corona_score(maps: &[GradCamMap], spacing: [f64; 3], tau: f64) -> f64 {
    let pixels: usize = maps.iter().map(|m| m.count_at_least(tau as f32)).sum();
    pixels as f64 * spacing[0] * spacing[1] * spacing[2] / 1000.0
}

/// Scores normalized by the first time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeScores {
    Ratios(Vec<f64>),
    /// The first score is zero, so only absolute scores are meaningful.
    AbsoluteOnly,
}

impl RelativeScores {
    pub fn ratios(&self) -> Option<&[f64]> {
        match self {
            RelativeScores::Ratios(r) => Some(r),
            RelativeScores::AbsoluteOnly => None,
        }
    }
}

pub fn relative_corona(scores: &[f64]) -> Result<RelativeScores> {
    let first = *scores.first().ok_or(ScoringError::EmptyTimeline)?;
    if first == 0.0 {
        return Ok(RelativeScores::AbsoluteOnly);
    }
    Ok(RelativeScores::Ratios(scores.iter().map(|s| s / first).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub threshold: f64,
    pub tau: f64,
    pub detector: DetectorConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, tau: DEFAULT_TAU, detector: DetectorConfig::default() }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ScoringError::InvalidConfig(format!("threshold {}", self.threshold)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ScoringError::InvalidConfig(format!("tau {}", self.tau)));
        }
        self.detector.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub z: usize,
    pub score: f64,
    pub positive: bool,
}

/// Nonzero pixels of one slice's map, as row-major indices into the slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMap {
    pub z: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseMap {
    pub fn from_map(z: usize, map: &GradCamMap) -> Self {
        let (indices, values) =
            map.values.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i as u32, v)).unzip();
        Self { z, indices, values }
    }

    pub fn to_map(&self, dims: [usize; 2]) -> GradCamMap {
        let mut m = GradCamMap::zeros(dims);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            if let Some(p) = m.values.get_mut(i as usize) {
                *p = v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub study_id: String,
    pub timepoint: u32,
    pub day_offset: i64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub lung_volume_cm3: f64,
    pub lung_slice_count: usize,
    /// One record per lung slice, ascending z.
    pub slices: Vec<SliceRecord>,
    pub positive_ratio: f64,
    pub threshold: f64,
    pub decision: Decision,
    pub tau: f64,
    pub corona_score_cm3: f64,
    pub lesions: Vec<Lesion>,
    /// Calibrated maps of positive slices.
    pub maps: Vec<SparseMap>,
}

impl CaseResult {
    /// Dense map for slice `z`; all zero if the slice has none.
    pub fn map_for(&self, z: usize) -> GradCamMap {
        let dims = [self.dims[0], self.dims[1]];
        self.maps.iter().find(|m| m.z == z).map_or_else(|| GradCamMap::zeros(dims), |m| m.to_map(dims))
    }
}

fn meta_number<T: std::str::FromStr>(v: &CtVolume, key: &str) -> Option<T> {
    v.meta.get(key).and_then(|s| s.trim().parse().ok())
}

/// Scores every lung slice of a segmented volume and assembles the case.
pub fn analyze_segmented(v: &CtVolume, lungs: &LungMask, model: &TrainedModel, cfg: &AnalysisConfig) -> Result<CaseResult> {
    cfg.validate()?;
    if lungs.lung_slice_set.is_empty() {
        return Err(ScoringError::NoLungSlices);
    }
    let crop = lung_crop(lungs, model.preprocessing.crop_pad_mm)?;
    let scored: Vec<(usize, f64, GradCamMap)> = lungs
        .lung_slice_set
        .par_iter()
        .map(|&z| {
            let prepared = preprocess_slice_in(v, lungs, z, crop, &model.preprocessing)?;
            let (score, map) = score_and_map(model, &prepared)?;
            Ok((z, score, map))
        })
        .collect::<Result<_, ClassifierError>>()?;

    let mut scores = vec![0.0; v.dims()[2]];
    for (z, s, _) in &scored {
        scores[*z] = *s;
    }
    let ratio = positive_ratio(&scores, &lungs.lung_slice_set)?;
    let positive_maps: Vec<(usize, GradCamMap)> =
        scored.iter().filter(|(_, s, _)| *s >= SLICE_POSITIVE).map(|(z, _, m)| (*z, m.clone())).collect();
    let maps: Vec<GradCamMap> = positive_maps.iter().map(|(_, m)| m.clone()).collect();
    let corona = corona_score(&maps, v.spacing(), cfg.tau);
    let lesions = detect_focal_opacities(v, &lungs.mask, &cfg.detector)?;

    Ok(CaseResult {
        study_id: v.meta.get("study_id").unwrap_or("").to_string(),
        timepoint: meta_number(v, "timepoint").unwrap_or(0),
        day_offset: meta_number(v, "day_offset").unwrap_or(0),
        dims: v.dims(),
        spacing: v.spacing(),
        lung_volume_cm3: lungs.volume_cm3(),
        lung_slice_count: lungs.lung_slice_set.len(),
        slices: scored
            .iter()
            .map(|&(z, score, _)| SliceRecord { z, score, positive: score >= SLICE_POSITIVE })
            .collect(),
        positive_ratio: ratio,
        threshold: cfg.threshold,
        decision: decide_case(ratio, cfg.threshold),
        tau: cfg.tau,
        corona_score_cm3: corona,
        lesions,
        maps: positive_maps.iter().map(|(z, m)| SparseMap::from_map(*z, m)).collect(),
    })
}

/// Segments, classifies, measures and decides one volume.
pub fn analyze_case(v: &CtVolume, model: &TrainedModel, cfg: &AnalysisConfig) -> Result<CaseResult> {
    let lungs = segment_lungs(v)?;
    analyze_segmented(v, &lungs, model, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    /// Present at the last time point.
    Present,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    /// Index into the timeline's points.
    pub point: usize,
    pub day_offset: i64,
    pub lesion_id: usize,
    pub volume_cm3: f64,
    pub avg_axial_diameter_mm: f64,
    pub centroid_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionTrack {
    pub id: usize,
    pub entries: Vec<TrackEntry>,
    pub status: TrackStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub study_id: String,
    pub points: Vec<CaseResult>,
    pub day_offsets: Vec<i64>,
    pub corona_scores_cm3: Vec<f64>,
    pub relative_scores: RelativeScores,
    pub tracks: Vec<LesionTrack>,
}

fn entry(point: usize, day: i64, l: &Lesion) -> TrackEntry {
    TrackEntry {
        point,
        day_offset: day,
        lesion_id: l.id,
        volume_cm3: l.measurements.volume_cm3,
        avg_axial_diameter_mm: l.measurements.avg_axial_diameter_mm,
        centroid_mm: l.measurements.centroid_mm,
    }
}

/// Orders-checked timeline with relative scores and lesion tracks chained
/// through consecutive time points.
pub fn assemble_timeline(points: Vec<CaseResult>) -> Result<Timeline> {
    let first = points.first().ok_or(ScoringError::EmptyTimeline)?;
    let study_id = first.study_id.clone();
    if let Some(other) = points.iter().find(|p| p.study_id != study_id) {
        return Err(ScoringError::MixedStudies(study_id, other.study_id.clone()));
    }
    if points.windows(2).any(|w| w[1].day_offset <= w[0].day_offset) {
        return Err(ScoringError::UnorderedTimepoints);
    }
    let corona: Vec<f64> = points.iter().map(|p| p.corona_score_cm3).collect();
    let relative = relative_corona(&corona)?;

    let mut tracks: Vec<LesionTrack> = Vec::new();
    // open[k] = (track index, lesion id) for lesions of the previous point
    let mut open: Vec<(usize, usize)> = Vec::new();
    for (t, p) in points.iter().enumerate() {
        let mut next_open = Vec::new();
        let mut continued = vec![false; p.lesions.len()];
        if t > 0 {
            let prev = &points[t - 1].lesions;
            for (prev_id, next_id) in match_lesions(prev, &p.lesions, TRACK_GATE_MM) {
                let (Some(track), Some(next_id)) = (open.iter().find(|o| o.1 == prev_id).map(|o| o.0), next_id) else {
                    continue;
                };
                let k = p.lesions.iter().position(|l| l.id == next_id).expect("matched id exists");
                tracks[track].entries.push(entry(t, p.day_offset, &p.lesions[k]));
                continued[k] = true;
                next_open.push((track, next_id));
            }
        }
        for (k, l) in p.lesions.iter().enumerate() {
            if !continued[k] {
                tracks.push(LesionTrack { id: tracks.len() + 1, entries: vec![entry(t, p.day_offset, l)], status: TrackStatus::Present });
                next_open.push((tracks.len() - 1, l.id));
            }
        }
        open = next_open;
    }
    let last = points.len() - 1;
    for tr in &mut tracks {
        if tr.entries.last().is_some_and(|e| e.point < last) {
            tr.status = TrackStatus::Resolved;
        }
    }
    Ok(Timeline {
        study_id,
        day_offsets: points.iter().map(|p| p.day_offset).collect(),
        points,
        corona_scores_cm3: corona,
        relative_scores: relative,
        tracks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector3d::{Measurements, Texture};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn case(study: &str, day: i64, corona: f64, lesions: Vec<Lesion>) -> CaseResult {
        CaseResult {
            study_id: study.into(),
            timepoint: 0,
            day_offset: day,
            dims: [4, 4, 4],
            spacing: [1.0; 3],
            lung_volume_cm3: 1.0,
            lung_slice_count: 4,
            slices: vec![],
            positive_ratio: 0.0,
            threshold: DEFAULT_THRESHOLD,
            decision: Decision::Negative,
            tau: DEFAULT_TAU,
            corona_score_cm3: corona,
            lesions,
            maps: vec![],
        }
    }

    fn lesion(id: usize, x: f64, vol: f64) -> Lesion {
        Lesion {
            id,
            runs: vec![],
            measurements: Measurements {
                voxel_count: 1,
                volume_cm3: vol,
                avg_axial_diameter_mm: 10.0,
                mean_hu: -400.0,
                texture: Texture::GroundGlass,
                calcified: false,
                centroid_mm: [x, 50.0, 50.0],
                bbox_min: [0; 3],
                bbox_max: [0; 3],
            },
        }
    }

    #[test]
    fn ratio_examples() {
        let lung: Vec<usize> = (0..80).collect();
        assert_eq!(positive_ratio(&[0.1; 80], &lung).unwrap(), 0.0);
        let mut s = vec![0.0; 100];
        s[10] = 0.5;
        s[90] = 0.99;
        assert_eq!(positive_ratio(&s, &(0..100).collect::<Vec<_>>()).unwrap(), 0.02);
        assert_eq!(positive_ratio(&[0.7; 5], &[0, 1, 2, 3, 4]).unwrap(), 1.0);
        assert!(matches!(positive_ratio(&[0.7; 5], &[]), Err(ScoringError::NoLungSlices)));
        // slices outside the lung set do not count
        assert_eq!(positive_ratio(&[0.9, 0.1, 0.1, 0.9], &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn decision_examples() {
        assert_eq!(decide_case(0.02, 0.011), Decision::Positive);
        assert_eq!(decide_case(0.011, 0.011), Decision::Negative);
        assert_eq!(decide_case(0.0, 0.0), Decision::Negative);
    }

    #[test]
    fn corona_examples() {
        let mut m = GradCamMap::zeros([20, 20]);
        for y in 5..15 {
            for x in 2..12 {
                m.values[y * 20 + x] = 1.0;
            }
        }
        assert!((corona_score(&[m.clone()], [1.0, 1.0, 5.0], 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(corona_score(&[GradCamMap::zeros([20, 20])], [1.0, 1.0, 5.0], 0.5), 0.0);
        assert_eq!(corona_score(&[], [1.0, 1.0, 5.0], 0.5), 0.0);
        // additivity and linear scaling with slice thickness
        let two = corona_score(&[m.clone(), m.clone()], [1.0, 1.0, 5.0], 0.5);
        assert!((two - 1.0).abs() < 1e-15);
        assert!((corona_score(&[m], [1.0, 1.0, 2.5], 0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relative_examples() {
        let r = relative_corona(&[191.5, 97.1, 0.0]).unwrap();
        let r = r.ratios().unwrap();
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 0.507).abs() < 1e-3);
        assert!((1.0 - r[1] - 0.49).abs() < 0.01);
        assert_eq!(r[2], 0.0);
        assert_eq!(relative_corona(&[3.7]).unwrap(), RelativeScores::Ratios(vec![1.0]));
        assert_eq!(relative_corona(&[0.0, 5.0]).unwrap(), RelativeScores::AbsoluteOnly);
    }

    #[test]
    fn sparse_map_round_trip() {
        let mut m = GradCamMap::zeros([5, 3]);
        m.values[4] = 0.25;
        m.values[13] = 1.0;
        let s = SparseMap::from_map(7, &m);
        assert_eq!(s.indices, vec![4, 13]);
        assert_eq!(s.to_map([5, 3]), m);
    }

    #[test]
    fn timeline_relative_and_tracks() {
        let tl = assemble_timeline(vec![
            case("p", 0, 191.5, vec![lesion(1, 30.0, 2.0), lesion(2, 90.0, 1.0)]),
            case("p", 4, 97.1, vec![lesion(1, 91.0, 0.5), lesion(2, 31.0, 1.0)]),
            case("p", 19, 0.0, vec![]),
        ])
        .unwrap();
        let r = tl.relative_scores.ratios().unwrap();
        assert!((r[1] - 97.1 / 191.5).abs() < 1e-15);
        assert_eq!(tl.tracks.len(), 2);
        for tr in &tl.tracks {
            assert_eq!(tr.entries.len(), 2);
            assert_eq!(tr.status, TrackStatus::Resolved);
            assert!((tr.entries[0].centroid_mm[0] - tr.entries[1].centroid_mm[0]).abs() <= 1.0);
        }
    }

    #[test]
    fn timeline_new_lesion_and_single_point() {
        let tl = assemble_timeline(vec![case("p", 0, 1.0, vec![lesion(1, 30.0, 2.0)])]).unwrap();
        assert_eq!(tl.tracks.len(), 1);
        assert_eq!(tl.tracks[0].status, TrackStatus::Present);
        let tl = assemble_timeline(vec![
            case("p", 0, 1.0, vec![lesion(1, 30.0, 2.0)]),
            case("p", 1, 1.0, vec![lesion(1, 30.0, 2.0), lesion(2, 100.0, 1.0)]),
        ])
        .unwrap();
        assert_eq!(tl.tracks.len(), 2);
        assert_eq!(tl.tracks[0].entries.len(), 2);
        assert_eq!(tl.tracks[1].entries[0].point, 1);
        assert!(tl.tracks.iter().all(|t| t.status == TrackStatus::Present));
    }

    #[test]
    fn timeline_errors() {
        assert!(matches!(assemble_timeline(vec![]), Err(ScoringError::EmptyTimeline)));
        assert!(matches!(
            assemble_timeline(vec![case("a", 0, 1.0, vec![]), case("b", 1, 1.0, vec![])]),
            Err(ScoringError::MixedStudies(..))
        ));
        assert!(matches!(
            assemble_timeline(vec![case("a", 3, 1.0, vec![]), case("a", 3, 1.0, vec![])]),
            Err(ScoringError::UnorderedTimepoints)
        ));
    }

    proptest! {
        #[test]
        fn ratio_permutation_invariant(scores in proptest::collection::vec(0.0f64..1.0, 1..60), rot in 0usize..60) {
            let lung: Vec<usize> = (0..scores.len()).collect();
            let mut rotated = scores.clone();
            rotated.rotate_left(rot % scores.len());
            prop_assert_eq!(positive_ratio(&scores, &lung).unwrap(), positive_ratio(&rotated, &lung).unwrap());
        }

        #[test]
        fn decision_monotone(scores in proptest::collection::vec(0.0f64..1.0, 1..60), k in 0usize..60, bump in 0.0f64..1.0, t in 0.0f64..0.2) {
            let lung: Vec<usize> = (0..scores.len()).collect();
            let before = decide_case(positive_ratio(&scores, &lung).unwrap(), t);
            let mut raised = scores.clone();
            let k = k % scores.len();
            raised[k] = (raised[k] + bump).min(1.0);
            let after = decide_case(positive_ratio(&raised, &lung).unwrap(), t);
            prop_assert!(!(before == Decision::Positive && after == Decision::Negative));
        }

        #[test]
        fn relative_first_is_one(scores in proptest::collection::vec(0.0f64..500.0, 1..10)) {
            if let RelativeScores::Ratios(r) = relative_corona(&scores).unwrap() {
                prop_assert_eq!(r[0], 1.0);
            } else {
                prop_assert_eq!(scores[0], 0.0);
            }
        }
    }
}
