//! Frame gating, multi-frame depth fusion and metric measurement.

mod aggregate;
mod pupil;
mod refraction;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::{DepthMap, GrayImage, Mask};
use crate::network::Model;

pub use aggregate::{aggregate_depths, survivors, Aggregate, OutlierMode};
pub use pupil::{
    boundary_pixels, fit_circle, fit_plane, measure_pupil, PupilMeasurement, MIN_PUPIL_PIXELS,
};
pub use refraction::{refraction_apparent_size, ApparentSize, CorneaModel};

/// Seconds of footage used to calibrate the openness threshold.
pub const CALIBRATION_SECONDS: usize = 6;
/// Optical axis direction pointing back at the camera.
pub const CAMERA_AXIS: [f64; 3] = [0.0, 0.0, -1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    pub frames: Vec<GrayImage>,
    pub fps: usize,
}

impl FrameStream {
    pub fn new(frames: Vec<GrayImage>, fps: usize) -> Result<Self> {
        if fps == 0 {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Eye-feature segmentation for individual frames. `index` is the frame's
/// position in its stream.
pub trait SegmentationProvider {
    /// Upper and lower lid margins as pixel samples.
    fn eyelid_outline(
        &self,
        index: usize,
        frame: &GrayImage,
    ) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)>;
    /// Unit gaze vector in the camera frame.
    fn gaze(&self, index: usize, frame: &GrayImage) -> Result<[f64; 3]>;
    fn pupil_mask(&self, index: usize, frame: &GrayImage) -> Result<Mask>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub gaze_epsilon_deg: f64,
    /// Fraction of the calibrated maximum openness a frame must reach.
    pub openness_tolerance: f64,
    pub capacity: usize,
    pub mad_cutoff: f64,
    pub outlier_mode: OutlierMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            gaze_epsilon_deg: 5.0,
            openness_tolerance: 0.95,
            capacity: 8,
            mad_cutoff: 3.5,
            outlier_mode: OutlierMode::Mad,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gaze_epsilon_deg >= 0.0 && self.gaze_epsilon_deg.is_finite()) {
            return bad(format!(
                "gaze epsilon {} must be >= 0",
                self.gaze_epsilon_deg
            ));
        }
        if !(self.openness_tolerance > 0.0 && self.openness_tolerance <= 1.0) {
            return bad(format!(
                "openness tolerance {} outside (0, 1]",
                self.openness_tolerance
            ));
        }
        if self.capacity < 3 {
            return bad(format!("capacity {} must be at least 3", self.capacity));
        }
        if !(self.mad_cutoff > 0.0) {
            return bad(format!("MAD cutoff {} must be positive", self.mad_cutoff));
        }
        Ok(())
    }
}

/// Least-squares quadratic through `curve`, evaluated at the middle of its
/// horizontal extent.
pub fn curve_midpoint_y(curve: &[[f64; 2]]) -> Result<f64> {
    if curve.len() < 5 {
        return Err(Error::Input(format!(
            "eyelid curve needs at least 5 samples, got {}",
            curve.len()
        )));
    }
    let (lo, hi) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p[0]), b.max(p[0]))
        });
    let mid = 0.5 * (lo + hi);
    let scale = (0.5 * (hi - lo)).max(1e-12);
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for &[x, y] in curve {
        let u = (x - mid) / scale;
        let row = Vector3::new(1.0, u, u * u);
        ata += row * row.transpose();
        atb += row * y;
    }
    let coef = ata
        .cholesky()
        .ok_or_else(|| Error::Input("eyelid curve samples are degenerate".into()))?
        .solve(&atb);
    Ok(coef[0])
}

/// Vertical lid separation at the eye's horizontal middle, in pixels.
pub fn openness(top: &[[f64; 2]], bottom: &[[f64; 2]]) -> Result<f64> {
    Ok(curve_midpoint_y(bottom)? - curve_midpoint_y(top)?)
}

/// Angle in degrees between `gaze` and the direction back into the camera.
pub fn gaze_angle_deg(gaze: [f64; 3]) -> Result<f64> {
    let g = Vector3::from(gaze);
    if (g.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("gaze {gaze:?} is not a unit vector")));
    }
    Ok(g.dot(&Vector3::from(CAMERA_AXIS))
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees())
}

/// Calibrated openness threshold from the initial seconds of `stream`.
pub fn determine_threshold(
    stream: &FrameStream,
    provider: &dyn SegmentationProvider,
    config: &GateConfig,
) -> Result<f64> {
    config.validate()?;
    let window = CALIBRATION_SECONDS * stream.fps;
    if stream.len() < window {
        return Err(Error::Input(format!(
            "stream has {} frames, threshold calibration needs {window} ({CALIBRATION_SECONDS} s at {} fps)",
            stream.len(),
            stream.fps
        )));
    }
    let mut best: Option<f64> = None;
    for (i, frame) in stream.frames[..window].iter().enumerate() {
        if gaze_angle_deg(provider.gaze(i, frame)?)? > config.gaze_epsilon_deg {
            continue;
        }
        let (top, bottom) = provider.eyelid_outline(i, frame)?;
        let o = openness(&top, &bottom)?;
        best = Some(best.map_or(o, |b: f64| b.max(o)));
    }
    best.map(|m| m * config.openness_tolerance).ok_or_else(|| {
        Error::Input(format!(
            "no frame in the first {CALIBRATION_SECONDS} s looks straight at the camera"
        ))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    /// Stream indices of the accepted frames, in stream order.
    pub indices: Vec<usize>,
    pub frames: Vec<GrayImage>,
    /// False when the stream ran out before reaching capacity.
    pub complete: bool,
}

/// True if the frame passes both the openness and the gaze gate.
pub fn frame_passes(
    provider: &dyn SegmentationProvider,
    index: usize,
    frame: &GrayImage,
    threshold: f64,
    config: &GateConfig,
) -> Result<bool> {
    let (top, bottom) = provider.eyelid_outline(index, frame)?;
    if openness(&top, &bottom)? < threshold {
        return Ok(false);
    }
    Ok(gaze_angle_deg(provider.gaze(index, frame)?)? <= config.gaze_epsilon_deg)
}

pub fn gate_and_collect(
    stream: &FrameStream,
    provider: &dyn SegmentationProvider,
    threshold: f64,
    config: &GateConfig,
) -> Result<Collection> {
    config.validate()?;
    let mut indices = Vec::new();
    let mut frames = Vec::new();
    for (i, frame) in stream.frames.iter().enumerate() {
        if frames.len() == config.capacity {
            break;
        }
        if frame_passes(provider, i, frame, threshold, config)? {
            indices.push(i);
            frames.push(frame.clone());
        }
    }
    let complete = frames.len() == config.capacity;
    Ok(Collection {
        indices,
        frames,
        complete,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementReport {
    pub diameter_mm: f64,
    pub fit_rms_mm: f64,
    pub n_boundary_points: usize,
    pub n_maps_used: usize,
    pub n_outliers_excluded: usize,
    /// Stream indices of the frames that passed the gates.
    pub frame_indices: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_region_mae: Option<BTreeMap<String, f64>>,
    /// False if the stream ended before the frame capacity was reached.
    pub complete: bool,
}

/// Mean absolute depth error inside each named region.
pub fn region_mae(
    pred: &DepthMap,
    gt: &DepthMap,
    regions: &[(String, Mask)],
) -> Result<BTreeMap<String, f64>> {
    if !pred.same_dims(gt) {
        return Err(Error::Shape(
            "prediction and ground truth differ in size".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for (name, mask) in regions {
        if mask.width() != gt.width() || mask.height() != gt.height() {
            return Err(Error::Shape(format!("region {name} mask has wrong size")));
        }
        let n = mask.count();
        if n == 0 {
            continue;
        }
        let total: f64 = mask
            .iter_set()
            .map(|(x, y)| (pred.get(x, y) - gt.get(x, y)).abs())
            .sum();
        out.insert(name.clone(), total / n as f64);
    }
    Ok(out)
}

/// Threshold calibration, gating, per-frame prediction, fusion and pupil
/// measurement on the mask of the first accepted frame.
pub fn measure_stream(
    stream: &FrameStream,
    provider: &dyn SegmentationProvider,
    model: &Model,
    intrinsics: &CameraIntrinsics,
    config: &GateConfig,
) -> Result<(MeasurementReport, Aggregate)> {
    let threshold = determine_threshold(stream, provider, config)?;
    let collection = gate_and_collect(stream, provider, threshold, config)?;
    if collection.frames.len() < 3 {
        return Err(Error::Input(format!(
            "only {} frames passed the gates, need at least 3",
            collection.frames.len()
        )));
    }
    let maps = collection
        .frames
        .iter()
        .map(|f| model.predict(f))
        .collect::<Result<Vec<_>>>()?;
    let fused = aggregate_depths(&maps, config.outlier_mode, config.mad_cutoff)?;
    let first = collection.indices[0];
    let mask = provider.pupil_mask(first, &collection.frames[0])?;
    let m = measure_pupil(&fused.map, &mask, intrinsics)?;
    Ok((
        MeasurementReport {
            diameter_mm: m.diameter_mm,
            fit_rms_mm: m.fit_rms_mm,
            n_boundary_points: m.n_boundary_points,
            n_maps_used: fused.n_maps,
            n_outliers_excluded: fused.n_excluded,
            frame_indices: collection.indices.clone(),
            per_region_mae: None,
            complete: collection.complete,
        },
        fused,
    ))
}

#[cfg(test)]
mod tests;
