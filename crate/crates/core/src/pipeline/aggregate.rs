//! Per-pixel robust fusion of repeated depth predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierMode {
    /// Modified z-score on the median absolute deviation.
    #[default]
    Mad,
    /// Exclude values farther than two standard deviations from the mean.
    TwoSigma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub map: DepthMap,
    pub n_maps: usize,
    /// Pixel values dropped as outliers, summed over all pixels.
    pub n_excluded: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sort(v: &mut [f64]) {
    v.sort_by(|a, b| a.total_cmp(b));
}

/// Marks which of `values` survive outlier rejection.
pub fn survivors(values: &[f64], mode: OutlierMode, mad_cutoff: f64) -> Vec<bool> {
    match mode {
        OutlierMode::Mad => {
            let mut s = values.to_vec();
            sort(&mut s);
            let m = median(&s);
            let mut dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
            sort(&mut dev);
            let mad = median(&dev);
            values
                .iter()
                .map(|&v| {
                    if mad == 0.0 {
                        v == m
                    } else {
                        (0.6745 * (v - m) / mad).abs() <= mad_cutoff
                    }
                })
                .collect()
        }
        OutlierMode::TwoSigma => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            values
                .iter()
                .map(|&v| (v - mean).abs() <= 2.0 * std)
                .collect()
        }
    }
}

/// Fuses equally sized depth maps pixel by pixel: outliers are removed and
/// the survivors averaged.
pub fn aggregate_depths(
    maps: &[DepthMap],
    mode: OutlierMode,
    mad_cutoff: f64,
) -> Result<Aggregate> {
    if maps.len() < 3 {
        return Err(Error::Input(format!(
            "aggregation needs at least 3 depth maps, got {}",
            maps.len()
        )));
    }
    let first = &maps[0];
    if let Some(bad) = maps.iter().find(|m| !m.same_dims(first)) {
        return Err(Error::Shape(format!(
            "depth map {}x{} differs from {}x{}",
            bad.width(),
            bad.height(),
            first.width(),
            first.height()
        )));
    }
    let mut out = Vec::with_capacity(first.values().len());
    let mut excluded = 0;
    let mut column = vec![0.0; maps.len()];
    for i in 0..first.values().len() {
        for (slot, m) in column.iter_mut().zip(maps) {
            *slot = m.values()[i];
        }
        let keep = survivors(&column, mode, mad_cutoff);
        // summing in sorted order keeps the result independent of map order
        let mut kept: Vec<f64> = column
            .iter()
            .zip(&keep)
            .filter_map(|(&v, &k)| k.then_some(v))
            .collect();
        sort(&mut kept);
        excluded += maps.len() - kept.len();
        out.push(kept.iter().sum::<f64>() / kept.len() as f64);
    }
    Ok(Aggregate {
        map: DepthMap::new(first.width(), first.height(), out)?,
        n_maps: maps.len(),
        n_excluded: excluded,
    })
}
