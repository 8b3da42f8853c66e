//! Static outputs: slice overlays, projection summaries, score plots and the
//! JSON report.

pub mod png;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::GradCamMap;
use crate::detector3d::Lesion;
use crate::mask::Mask;
use crate::scoring::{decide_case, CaseResult, Timeline};
use crate::volume_io::{CtVolume, HuWindow};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("nothing to plot")]
    EmptyInput,
    #[error("I/O failure: {0}")]
    IoFailure(String),
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

impl From<std::io::Error> for RenderError {
    fn from(e: std::io::Error) -> Self {
        RenderError::IoFailure(e.to_string())
    }
}

pub type Result<T, E = RenderError> = std::result::Result<T, E>;

pub const GREEN: [u8; 3] = [0, 255, 0];
const RED: [u8; 3] = [255, 0, 0];
const BLUE: [u8; 3] = [0, 0, 255];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self { width, height, rgb: fill.repeat(width * height) }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn to_png(&self) -> Vec<u8> {
        png::encode_rgb(self.width, self.height, &self.rgb)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png())?;
        Ok(())
    }

    /// Copies `other` with its top-left corner at (x0, y0).
    fn blit(&mut self, other: &Image, x0: usize, y0: usize) {
        for y in 0..other.height {
            for x in 0..other.width {
                self.set(x0 + x, y0 + y, other.get(x, y));
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 {
                self.set(x as usize, y as usize, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Blue → cyan → green → yellow → red for values in `[0, 1]`.
pub fn colormap(v: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 5] = [[0.0, 0.0, 255.0], [0.0, 255.0, 255.0], [0.0, 255.0, 0.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];
    let t = v.clamp(0.0, 1.0) * 4.0;
    let k = (t.floor() as usize).min(3);
    let f = t - k as f32;
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    [0, 1, 2].map(|i| (a[i] + (b[i] - a[i]) * f).round() as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub window: HuWindow,
    /// Blend weight of a map value of 1.0.
    pub max_alpha: f32,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self { window: HuWindow::default(), max_alpha: 0.6 }
    }
}

fn blend(base: u8, over: u8, alpha: f32) -> u8 {
    (base as f32 * (1.0 - alpha) + over as f32 * alpha).round().clamp(0.0, 255.0) as u8
}

/// In-slice pixels of the given lesions, as a slice-sized mask.
fn lesion_pixels(lesions: &[Lesion], z: usize, nx: usize, ny: usize) -> Vec<bool> {
    let mut px = vec![false; nx * ny];
    for r in lesions.iter().flat_map(|l| &l.runs).filter(|r| r.z == z) {
        for x in r.x..(r.x + r.len).min(nx) {
            if r.y < ny {
                px[r.y * nx + x] = true;
            }
        }
    }
    px
}

/// Grayscale slice with the map blended in and focal lesion outlines in
/// green.
pub fn render_slice_overlay(
    hu: &[i16],
    dims: [usize; 2],
    map: &GradCamMap,
    lesions: &[Lesion],
    z: usize,
    cfg: &OverlayConfig,
) -> Result<Image> {
    let [nx, ny] = dims;
    if hu.len() != nx * ny || map.dims != dims || map.values.len() != nx * ny {
        return Err(RenderError::DimMismatch(format!("slice {dims:?}, map {:?}", map.dims)));
    }
    let mut img = Image::new(nx, ny, [0; 3]);
    for (i, (&h, &m)) in hu.iter().zip(&map.values).enumerate() {
        let g = (cfg.window.apply(h as f32) * 255.0).round() as u8;
        let c = if m > 0.0 {
            let a = cfg.max_alpha * m.min(1.0);
            let over = colormap(m);
            [0, 1, 2].map(|k| blend(g, over[k], a))
        } else {
            [g; 3]
        };
        img.rgb[3 * i..3 * i + 3].copy_from_slice(&c);
    }
    let inside = lesion_pixels(lesions, z, nx, ny);
    for y in 0..ny {
        for x in 0..nx {
            if !inside[y * nx + x] {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == nx
                || y + 1 == ny
                || !inside[y * nx + x - 1]
                || !inside[y * nx + x + 1]
                || !inside[(y - 1) * nx + x]
                || !inside[(y + 1) * nx + x];
            if edge {
                img.set(x, y, GREEN);
            }
        }
    }
    Ok(img)
}

/// Scales a projection with anisotropic pixels to square pixels by
/// nearest-neighbour row/column replication.
fn isotropic(src: &[u8], w: usize, h: usize, sw: f64, sh: f64) -> Image {
    let unit = sw.min(sh);
    let (ow, oh) = (((w as f64 * sw / unit).round() as usize).max(1), ((h as f64 * sh / unit).round() as usize).max(1));
    let mut img = Image::new(ow, oh, [0; 3]);
    for y in 0..oh {
        let sy = (y * h / oh).min(h - 1);
        for x in 0..ow {
            let sx = (x * w / ow).min(w - 1);
            let i = 3 * (sy * w + sx);
            img.set(x, y, [src[i], src[i + 1], src[i + 2]]);
        }
    }
    img
}

/// Axial, coronal and sagittal maximum-intensity projections side by side:
/// lung blue, diffuse map red, focal lesions green (highest priority).
pub fn render_projection(v: &CtVolume, lung: &Mask, focal: &Mask, diffuse: &Mask) -> Result<Image> {
    let dims = v.dims();
    for (name, m) in [("lung", lung), ("focal", focal), ("diffuse", diffuse)] {
        if m.dims() != dims {
            return Err(RenderError::DimMismatch(format!("{name} mask {:?} vs volume {dims:?}", m.dims())));
        }
    }
    let [nx, ny, nz] = dims;
    let [sx, sy, sz] = v.spacing();
    // layer codes: 0 none, 1 lung, 2 diffuse, 3 focal
    let mut axial = vec![0u8; nx * ny];
    let mut coronal = vec![0u8; nx * nz];
    let mut sagittal = vec![0u8; ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                let code = if focal.data()[i] {
                    3
                } else if diffuse.data()[i] {
                    2
                } else if lung.data()[i] {
                    1
                } else {
                    continue;
                };
                // superior slices (high z) at the top of the side views
                let row = nz - 1 - z;
                for (buf, j) in [(&mut axial, y * nx + x), (&mut coronal, row * nx + x), (&mut sagittal, row * ny + y)] {
                    buf[j] = buf[j].max(code);
                }
            }
        }
    }
    let colour = |c: u8| match c {
        1 => BLUE,
        2 => RED,
        3 => GREEN,
        _ => [0; 3],
    };
    let to_rgb = |buf: &[u8]| buf.iter().flat_map(|&c| colour(c)).collect::<Vec<u8>>();
    let views = [
        isotropic(&to_rgb(&axial), nx, ny, sx, sy),
        isotropic(&to_rgb(&coronal), nx, nz, sx, sz),
        isotropic(&to_rgb(&sagittal), ny, nz, sy, sz),
    ];
    const GAP: usize = 4;
    let width = views.iter().map(|v| v.width).sum::<usize>() + 2 * GAP;
    let height = views.iter().map(|v| v.height).max().unwrap_or(1);
    let mut out = Image::new(width, height, [0; 3]);
    let mut x0 = 0;
    for view in &views {
        out.blit(view, x0, 0);
        x0 += view.width + GAP;
    }
    Ok(out)
}

/// Voxels of positive-slice maps at or above the case's binarization level.
pub fn diffuse_mask(case: &CaseResult) -> Mask {
    let mut m = Mask::empty(case.dims);
    let plane = case.dims[0] * case.dims[1];
    for s in &case.maps {
        for (&i, &v) in s.indices.iter().zip(&s.values) {
            if v >= case.tau as f32 && (i as usize) < plane {
                m.data_mut()[s.z * plane + i as usize] = true;
            }
        }
    }
    m
}

pub fn lesion_mask(lesions: &[Lesion], dims: [usize; 3]) -> Mask {
    let mut m = Mask::empty(dims);
    for l in lesions {
        m.union_with(&l.to_mask(dims));
    }
    m
}

/// One plotted sample of a score series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub study_id: String,
    pub day_offset: i64,
    pub corona_cm3: f64,
    /// Empty when the first time point scored zero.
    pub relative: Option<f64>,
}

pub fn score_rows(timelines: &[Timeline]) -> Vec<ScoreRow> {
    timelines
        .iter()
        .flat_map(|t| {
            let rel = t.relative_scores.ratios();
            t.day_offsets.iter().zip(&t.corona_scores_cm3).enumerate().map(move |(k, (&day, &c))| ScoreRow {
                study_id: t.study_id.clone(),
                day_offset: day,
                corona_cm3: c,
                relative: rel.map(|r| r[k]),
            })
        })
        .collect()
}

pub fn scores_csv(rows: &[ScoreRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| RenderError::IoFailure(e.to_string()))?;
    }
    w.into_inner().map_err(|e| RenderError::IoFailure(e.to_string()))
}

pub fn read_scores_csv(bytes: &[u8]) -> Result<Vec<ScoreRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| RenderError::IoFailure(e.to_string()))
}

const PANEL_W: usize = 320;
const PANEL_H: usize = 240;
const MARGIN: i64 = 20;
const SERIES: [[u8; 3]; 6] = [[220, 40, 40], [40, 90, 220], [30, 160, 60], [200, 130, 20], [140, 60, 180], [20, 160, 170]];

/// Maps (day, value) series onto a panel with fixed axes.
fn panel(series: &[Vec<(f64, f64)>], x_range: (f64, f64), y_max: f64) -> Image {
    let mut img = Image::new(PANEL_W, PANEL_H, [255; 3]);
    let (w, h) = (PANEL_W as i64 - 2 * MARGIN, PANEL_H as i64 - 2 * MARGIN);
    let axis = [90u8; 3];
    img.line((MARGIN, MARGIN), (MARGIN, MARGIN + h), axis);
    img.line((MARGIN, MARGIN + h), (MARGIN + w, MARGIN + h), axis);
    let span = (x_range.1 - x_range.0).max(1.0);
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let to_px = |(d, v): (f64, f64)| {
        let x = MARGIN + ((d - x_range.0) / span * w as f64).round() as i64;
        let y = MARGIN + h - (v / y_max * h as f64).round() as i64;
        (x, y)
    };
    for (k, s) in series.iter().enumerate() {
        let c = SERIES[k % SERIES.len()];
        let pts: Vec<(i64, i64)> = s.iter().map(|&p| to_px(p)).collect();
        for w in pts.windows(2) {
            img.line(w[0], w[1], c);
        }
        for &(x, y) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    if x + dx >= 0 && y + dy >= 0 {
                        img.set((x + dx) as usize, (y + dy) as usize, c);
                    }
                }
            }
        }
    }
    img
}

/// Absolute (left) and relative (right) score panels plus the plotted
/// series as CSV. Timelines without relative scores appear only on the left.
pub fn plot_scores(timelines: &[Timeline]) -> Result<(Image, Vec<u8>)> {
    if timelines.is_empty() {
        return Err(RenderError::EmptyInput);
    }
    let days = timelines.iter().flat_map(|t| t.day_offsets.iter().map(|&d| d as f64));
    let x_range = days.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let absolute: Vec<Vec<(f64, f64)>> = timelines
        .iter()
        .map(|t| t.day_offsets.iter().zip(&t.corona_scores_cm3).map(|(&d, &c)| (d as f64, c)).collect())
        .collect();
    let relative: Vec<Vec<(f64, f64)>> = timelines
        .iter()
        .filter_map(|t| t.relative_scores.ratios().map(|r| t.day_offsets.iter().zip(r).map(|(&d, &v)| (d as f64, v)).collect()))
        .collect();
    let abs_max = absolute.iter().flatten().map(|p| p.1).fold(0.0, f64::max) * 1.05;
    let rel_max = relative.iter().flatten().map(|p| p.1).fold(1.0, f64::max) * 1.05;
    let mut out = Image::new(2 * PANEL_W, PANEL_H, [255; 3]);
    out.blit(&panel(&absolute, x_range, abs_max), 0, 0);
    out.blit(&panel(&relative, x_range, rel_max), PANEL_W, 0);
    Ok((out, scores_csv(&score_rows(timelines))?))
}

pub const REPORT_FORMAT: &str = "ctscreen-report-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportBody {
    Case(CaseResult),
    Timeline(Timeline),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format: String,
    pub study_id: String,
    /// Volume files in time order, as given to the analysis.
    pub sources: Vec<String>,
    pub body: ReportBody,
}

impl ReportDocument {
    pub fn case(case: CaseResult, source: impl Into<String>) -> Self {
        Self { format: REPORT_FORMAT.into(), study_id: case.study_id.clone(), sources: vec![source.into()], body: ReportBody::Case(case) }
    }

    pub fn timeline(t: Timeline, sources: Vec<String>) -> Self {
        Self { format: REPORT_FORMAT.into(), study_id: t.study_id.clone(), sources, body: ReportBody::Timeline(t) }
    }

    pub fn cases(&self) -> &[CaseResult] {
        match &self.body {
            ReportBody::Case(c) => std::slice::from_ref(c),
            ReportBody::Timeline(t) => &t.points,
        }
    }

    /// Finite numbers and decisions consistent with ratio and threshold.
    pub fn validate(&self) -> Result<()> {
        if self.format != REPORT_FORMAT {
            return Err(RenderError::InvalidReport(format!("format {:?}", self.format)));
        }
        for c in self.cases() {
            let nums = [c.positive_ratio, c.threshold, c.tau, c.corona_score_cm3, c.lung_volume_cm3];
            if nums.iter().any(|v| !v.is_finite()) || c.slices.iter().any(|s| !s.score.is_finite()) {
                return Err(RenderError::InvalidReport(format!("{}: non-finite value", c.study_id)));
            }
            if c.corona_score_cm3 < 0.0 || decide_case(c.positive_ratio, c.threshold) != c.decision {
                return Err(RenderError::InvalidReport(format!("{}: inconsistent decision", c.study_id)));
            }
        }
        Ok(())
    }
}

pub fn write_report(doc: &ReportDocument, path: &Path) -> Result<()> {
    doc.validate()?;
    let json = serde_json::to_string_pretty(doc).map_err(|e| RenderError::IoFailure(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ReportDocument> {
    let doc: ReportDocument =
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| RenderError::InvalidReport(e.to_string()))?;
    doc.validate()?;
    Ok(doc)
}

/// Slices worth an overlay: the one with the largest map mass and the
/// central slice of each lesion, ascending and deduplicated.
pub fn key_slices(case: &CaseResult) -> Vec<usize> {
    let mut zs: Vec<usize> = case.lesions.iter().map(|l| (l.measurements.bbox_min[2] + l.measurements.bbox_max[2]) / 2).collect();
    let heaviest = case
        .maps
        .iter()
        .map(|m| (m.values.iter().map(|&v| v as f64).sum::<f64>(), m.z))
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    zs.extend(heaviest.map(|h| h.1));
    zs.sort_unstable();
    zs.dedup();
    zs
}

/// Writes the overlays of [`key_slices`] and `projection.png` for one case.
pub fn render_case(v: &CtVolume, lung: &Mask, case: &CaseResult, dir: &Path, cfg: &OverlayConfig) -> Result<Vec<String>> {
    if v.dims() != case.dims {
        return Err(RenderError::DimMismatch(format!("volume {:?} vs report {:?}", v.dims(), case.dims)));
    }
    std::fs::create_dir_all(dir)?;
    let [nx, ny, _] = case.dims;
    let mut written = Vec::new();
    for z in key_slices(case) {
        let img = render_slice_overlay(v.slice(z), [nx, ny], &case.map_for(z), &case.lesions, z, cfg)?;
        let name = format!("overlay_z{z:03}.png");
        img.write_png(&dir.join(&name))?;
        written.push(name);
    }
    let proj = render_projection(v, lung, &lesion_mask(&case.lesions, case.dims), &diffuse_mask(case))?;
    proj.write_png(&dir.join("projection.png"))?;
    written.push("projection.png".into());
    Ok(written)
}
