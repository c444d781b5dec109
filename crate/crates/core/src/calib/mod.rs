//! Block-average image fidelity and scene-parameter calibration.
//!
//! Images are compared through the means of an `n x n` grid of blocks,
//! which smooths away per-pixel noise. [`calibrate`] tunes the light
//! intensity and noise level of a scene so its rendering matches a target
//! image under that score.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::synthgen::{geometry, shade, SceneSpec};

/// Consecutive steps without a new best loss before the descent halts.
pub const PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    /// The image is split into `block_grid x block_grid` blocks.
    pub block_grid: usize,
    /// Step size in scale-normalized parameter units.
    pub alpha: f64,
    /// Stop once the block MAE drops below this (pixel units).
    pub mae_threshold: f64,
    pub max_steps: usize,
    /// Finite-difference probe, relative to each parameter's magnitude.
    pub fd_step: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            block_grid: 8,
            alpha: 1e-3,
            mae_threshold: 1.275,
            max_steps: 100,
            fd_step: 0.01,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_grid == 0 {
            return Err(Error::Config("block grid must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha {} must be positive",
                self.alpha
            )));
        }
        if !(self.mae_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "MAE threshold {} must be >= 0",
                self.mae_threshold
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step < 1.0) {
            return Err(Error::Config(format!(
                "fd_step {} outside (0, 1)",
                self.fd_step
            )));
        }
        Ok(())
    }
}

/// Mean pixel value of each block, row-major.
pub fn block_averages(image: &GrayImage, n: usize) -> Result<Vec<f64>> {
    let (w, h) = (image.width(), image.height());
    if n == 0 || w % n != 0 || h % n != 0 {
        return Err(Error::Shape(format!(
            "{w}x{h} image does not split into {n}x{n} blocks"
        )));
    }
    let (bw, bh) = (w / n, h / n);
    let mut sums = vec![0u64; n * n];
    for y in 0..h {
        let row = &image.pixels()[y * w..(y + 1) * w];
        for (x, &p) in row.iter().enumerate() {
            sums[(y / bh) * n + x / bw] += p as u64;
        }
    }
    let area = (bw * bh) as f64;
    Ok(sums.into_iter().map(|s| s as f64 / area).collect())
}

/// Per-block absolute differences of the block averages.
pub fn block_errors(real: &GrayImage, synth: &GrayImage, n: usize) -> Result<Vec<f64>> {
    if real.width() != synth.width() || real.height() != synth.height() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{} image",
            real.width(),
            real.height(),
            synth.width(),
            synth.height()
        )));
    }
    let a = block_averages(real, n)?;
    let b = block_averages(synth, n)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect())
}

pub fn mae_total(real: &GrayImage, synth: &GrayImage, n: usize) -> Result<f64> {
    let e = block_errors(real, synth, n)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub theta_noise: f64,
    pub theta_light: f64,
    pub mae_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibStatus {
    Converged,
    MaxSteps,
    /// No improvement for [`PATIENCE`] consecutive steps.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Best spec found; equals the final spec unless the descent stalled.
    pub spec: SceneSpec,
    pub mae_total: f64,
    /// Largest single block error at the best parameters.
    pub max_block_error: f64,
    pub status: CalibStatus,
    pub trace: Vec<TraceRow>,
}

impl Calibration {
    pub fn diagnostic(&self) -> String {
        match self.status {
            CalibStatus::Converged => format!(
                "converged after {} steps, MAE {:.4}",
                self.trace.len(),
                self.mae_total
            ),
            CalibStatus::MaxSteps => format!(
                "step budget of {} exhausted, best MAE {:.4}",
                self.trace.len(),
                self.mae_total
            ),
            CalibStatus::Diverged => format!(
                "halted: no improvement for {PATIENCE} consecutive steps, best MAE {:.4}",
                self.mae_total
            ),
        }
    }
}

/// Fits `theta_noise` and `theta_light` of `spec0` to `target` by gradient
/// descent on the block MAE. Scene geometry is fixed and ray cast once;
/// noise is always drawn from `spec0.seed` so the loss is deterministic.
///
/// Gradients come from central differences with probes of `fd_step` times
/// each parameter, and the step is taken in units of each parameter's
/// starting magnitude. A step that fails to improve on the best loss so far
/// is undone and the step size halved.
pub fn calibrate(
    target: &GrayImage,
    spec0: &SceneSpec,
    config: &CalibConfig,
) -> Result<Calibration> {
    config.validate()?;
    if target.width() != target.height() {
        return Err(Error::Shape(format!(
            "target {}x{} is not square",
            target.width(),
            target.height()
        )));
    }
    let geo = geometry(spec0, target.width())?;
    let n = config.block_grid;
    let loss = |theta: [f64; 2]| -> Result<f64> {
        let img = shade(&geo, theta[1], theta[0], spec0.seed);
        mae_total(target, &img, n)
    };
    let scale = [spec0.theta_noise, spec0.theta_light].map(|v| if v > 0.0 { v } else { 1.0 });

    let mut theta = [spec0.theta_noise, spec0.theta_light];
    let mut alpha = config.alpha;
    let mut best = (theta, f64::INFINITY);
    let mut stale = 0;
    let mut trace = Vec::new();
    let mut status = CalibStatus::MaxSteps;
    for step in 0..config.max_steps {
        let l = loss(theta)?;
        trace.push(TraceRow {
            step,
            theta_noise: theta[0],
            theta_light: theta[1],
            mae_total: l,
        });
        if l < best.1 {
            best = (theta, l);
            stale = 0;
        } else {
            stale += 1;
            theta = best.0;
            alpha *= 0.5;
        }
        if best.1 < config.mae_threshold {
            status = CalibStatus::Converged;
            break;
        }
        if stale >= PATIENCE {
            status = CalibStatus::Diverged;
            break;
        }
        let mut grad = [0.0; 2];
        for i in 0..2 {
            let h = config.fd_step * theta[i].abs().max(config.fd_step * scale[i]);
            let mut up = theta;
            let mut down = theta;
            up[i] += h;
            down[i] = (down[i] - h).max(0.0);
            let g = (loss(up)? - loss(down)?) / (up[i] - down[i]);
            // derivative with respect to theta_i / scale_i
            grad[i] = g * scale[i];
        }
        for i in 0..2 {
            theta[i] = (theta[i] - alpha * scale[i] * grad[i]).max(0.0);
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("calibration produced {theta:?}")));
        }
    }
    let (theta, mae) = best;
    let mut spec = *spec0;
    spec.theta_noise = theta[0];
    spec.theta_light = theta[1];
    let img = shade(&geo, theta[1], theta[0], spec0.seed);
    let max_block_error = block_errors(target, &img, n)?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(Calibration {
        spec,
        mae_total: mae,
        max_block_error,
        status,
        trace,
    })
}

pub fn write_trace<W: Write>(mut w: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "step,theta_noise,theta_light,mae_total")?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{}",
            r.step, r.theta_noise, r.theta_light, r.mae_total
        )?;
    }
    Ok(())
}

pub fn save_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trace(&mut w, trace)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
