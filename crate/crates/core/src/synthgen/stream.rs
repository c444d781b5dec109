//! Rendered frame sequences with ground-truth segmentation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::{geometry, shade, Segmentation};
use super::{gaze_from_angles, SceneSpec, FORMAT_VERSION};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::{DepthMap, GrayImage, Mask};
use crate::pipeline::{FrameStream, SegmentationProvider};

/// Motion script for a synthetic recording of one eye.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamPlan {
    pub fps: usize,
    pub frames: usize,
    pub resolution: usize,
    /// Horizontal gaze amplitude of a sinusoidal sweep; 0 holds the gaze
    /// on the camera.
    pub gaze_sweep_deg: f64,
    pub sweep_period_s: f64,
    /// Blink every this many seconds; 0 disables blinking.
    pub blink_period_s: f64,
    pub blink_frames: usize,
}

impl Default for StreamPlan {
    fn default() -> Self {
        Self {
            fps: 10,
            frames: 80,
            resolution: 64,
            gaze_sweep_deg: 0.0,
            sweep_period_s: 4.0,
            blink_period_s: 2.0,
            blink_frames: 3,
        }
    }
}

impl StreamPlan {
    /// Scene for frame `i`: gaze follows the sweep, lids close during
    /// blinks, noise is reseeded per frame.
    pub fn frame_spec(&self, base: &SceneSpec, i: usize) -> SceneSpec {
        let mut spec = *base;
        spec.seed = base.seed.wrapping_add(i as u64);
        let t = i as f64 / self.fps as f64;
        if self.gaze_sweep_deg != 0.0 && self.sweep_period_s > 0.0 {
            let yaw = self.gaze_sweep_deg * (std::f64::consts::TAU * t / self.sweep_period_s).sin();
            spec.pupil.gaze = gaze_from_angles(yaw, 0.0);
        }
        let period = (self.blink_period_s * self.fps as f64).round() as usize;
        if period > self.blink_frames && self.blink_frames > 0 {
            let phase = i % period;
            if phase >= period - self.blink_frames {
                let k = phase - (period - self.blink_frames);
                let centre = (self.blink_frames as f64 - 1.0) / 2.0;
                let open = (k as f64 - centre).abs() / (centre + 1.0);
                spec.eyelids.upper_mm *= open;
                spec.eyelids.lower_mm *= open;
            }
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    pub stream: FrameStream,
    pub intrinsics: CameraIntrinsics,
    pub specs: Vec<SceneSpec>,
    pub depths: Vec<DepthMap>,
    pub segmentations: Vec<Segmentation>,
}

pub fn render_stream(base: &SceneSpec, plan: &StreamPlan) -> Result<SyntheticStream> {
    if plan.fps == 0 || plan.frames == 0 {
        return Err(Error::Config(
            "stream needs positive fps and frame count".into(),
        ));
    }
    let mut frames = Vec::with_capacity(plan.frames);
    let mut specs = Vec::with_capacity(plan.frames);
    let mut depths = Vec::with_capacity(plan.frames);
    let mut segs = Vec::with_capacity(plan.frames);
    for i in 0..plan.frames {
        let spec = plan.frame_spec(base, i);
        let geo = geometry(&spec, plan.resolution)?;
        frames.push(shade(&geo, spec.theta_light, spec.theta_noise, spec.seed));
        segs.push(geo.segmentation(&spec));
        depths.push(geo.depth);
        specs.push(spec);
    }
    Ok(SyntheticStream {
        stream: FrameStream::new(frames, plan.fps)?,
        intrinsics: base.camera.intrinsics(plan.resolution),
        specs,
        depths,
        segmentations: segs,
    })
}

/// Serves ground-truth segmentation by frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProvider {
    segmentations: Vec<Segmentation>,
}

impl SyntheticProvider {
    pub fn new(segmentations: Vec<Segmentation>) -> Self {
        Self { segmentations }
    }

    /// Recomputes segmentation from per-frame scene specs.
    pub fn from_specs(specs: &[SceneSpec], resolution: usize) -> Result<Self> {
        let segs = specs
            .iter()
            .map(|s| Ok(geometry(s, resolution)?.segmentation(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(segs))
    }

    fn get(&self, index: usize) -> Result<&Segmentation> {
        self.segmentations.get(index).ok_or_else(|| {
            Error::Input(format!(
                "no segmentation for frame {index} ({} known)",
                self.segmentations.len()
            ))
        })
    }
}

impl SegmentationProvider for SyntheticProvider {
    fn eyelid_outline(
        &self,
        index: usize,
        _frame: &GrayImage,
    ) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
        let s = self.get(index)?;
        Ok((s.top_curve.clone(), s.bottom_curve.clone()))
    }

    fn gaze(&self, index: usize, _frame: &GrayImage) -> Result<[f64; 3]> {
        Ok(self.get(index)?.gaze)
    }

    fn pupil_mask(&self, index: usize, _frame: &GrayImage) -> Result<Mask> {
        Ok(self.get(index)?.pupil.clone())
    }
}

/// `stream.json` next to the frame images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFile {
    pub format_version: u32,
    pub fps: usize,
    pub resolution: usize,
    pub intrinsics: CameraIntrinsics,
    pub specs: Vec<SceneSpec>,
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

pub fn save_stream(dir: &Path, s: &SyntheticStream) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in s.stream.frames.iter().enumerate() {
        f.save_png(&dir.join(frame_name(i)))?;
    }
    let file = StreamFile {
        format_version: FORMAT_VERSION,
        fps: s.stream.fps,
        resolution: s.stream.frames.first().map_or(0, |f| f.width()),
        intrinsics: s.intrinsics,
        specs: s.specs.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    fs::write(dir.join("stream.json"), bytes)?;
    Ok(())
}

pub fn load_stream(dir: &Path) -> Result<(FrameStream, StreamFile)> {
    let path = dir.join("stream.json");
    let file: StreamFile = serde_json::from_slice(&fs::read(&path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "stream format_version {}, expected {FORMAT_VERSION}",
            file.format_version
        )));
    }
    let frames = (0..file.specs.len())
        .map(|i| GrayImage::load_png(&dir.join(frame_name(i))))
        .collect::<Result<Vec<_>>>()?;
    Ok((FrameStream::new(frames, file.fps)?, file))
}
