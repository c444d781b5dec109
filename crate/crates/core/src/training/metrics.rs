//! Standard monocular depth error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Pixels that entered the metrics.
    pub pixels: usize,
    /// Pixels skipped because ground truth or prediction was not positive.
    pub excluded: usize,
}

#[derive(Debug, Default, Clone, Copy)]
struct Accum {
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    within: [usize; 3],
    n: usize,
    excluded: usize,
}

impl Accum {
    fn add(&mut self, p: f64, g: f64) {
        if !(g > 0.0 && g.is_finite() && p > 0.0 && p.is_finite()) {
            self.excluded += 1;
            return;
        }
        let d = p - g;
        self.abs_rel += d.abs() / g;
        self.sq_rel += d * d / g;
        self.sq += d * d;
        let dl = p.ln() - g.ln();
        self.sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, slot) in self.within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *slot += 1;
            }
        }
        self.n += 1;
    }

    fn finish(self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::Input(format!(
                "no valid pixels to evaluate ({} excluded)",
                self.excluded
            )));
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            pixels: self.n,
            excluded: self.excluded,
        })
    }
}

/// Metrics pooled over every pixel of every map pair.
pub fn evaluate(preds: &[DepthMap], gts: &[DepthMap]) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = Accum::default();
    for (p, g) in preds.iter().zip(gts) {
        if !p.same_dims(g) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                p.width(),
                p.height(),
                g.width(),
                g.height()
            )));
        }
        for (&pv, &gv) in p.values().iter().zip(g.values()) {
            acc.add(pv, gv);
        }
    }
    acc.finish()
}
