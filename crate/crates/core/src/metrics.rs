//! PSNR, SSIM and uncertainty-distribution statistics.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{ssim_with_grad, Padding};
use crate::pipeline::UncertaintyModel;
use crate::raster::Support;
use crate::scalar::Real;
use crate::scene::{Camera, GaussianSet, ImageBuffer};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const HISTOGRAM_BINS: usize = 50;
/// Uncertainty band where the clamped soft-dropout weight is not saturated.
pub const AMBIGUOUS_BAND: (f64, f64) = (0.47, 0.53);

pub fn mse<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::Dimension(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let n = a.pixels().len() as f64;
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = (*x - *y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5).
pub fn ssim<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<f64> {
    Ok(ssim_with_grad(a, b, Padding::Valid, false)?.0.to_f64_lossy())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewMetric {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub split: String,
    pub views: Vec<ViewMetric>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_views(split: &str, views: Vec<ViewMetric>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidInput(format!("split {split} has no views")));
        }
        let n = views.len() as f64;
        Ok(Self {
            split: split.to_string(),
            mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            views,
        })
    }

    /// `view,psnr,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim\n");
        for v in &self.views {
            let _ = writeln!(s, "{},{},{}", v.view, v.psnr, v.ssim);
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_psnr, self.mean_ssim);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyHistogram {
    pub iteration: u64,
    /// `HISTOGRAM_BINS + 1` uniform edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub median: f64,
    /// Fraction of values inside [`AMBIGUOUS_BAND`].
    pub band_fraction: f64,
}

impl UncertaintyHistogram {
    pub fn from_values(values: &[f64], iteration: u64) -> Self {
        let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| i as f64 / HISTOGRAM_BINS as f64).collect();
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for v in values {
            let b = ((v * HISTOGRAM_BINS as f64).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1);
            counts[b as usize] += 1;
        }
        let n = values.len();
        let (mean, median, band) = if n == 0 {
            (f64::NAN, f64::NAN, 0.0)
        } else {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            };
            let band = values
                .iter()
                .filter(|v| (AMBIGUOUS_BAND.0..=AMBIGUOUS_BAND.1).contains(*v))
                .count();
            (values.iter().sum::<f64>() / n as f64, median, band as f64 / n as f64)
        };
        Self {
            iteration,
            edges,
            counts,
            mean,
            median,
            band_fraction: band,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }

    /// Two whitespace-separated columns: bin centre and count.
    pub fn to_plot(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{} {}", 0.5 * (self.edges[i] + self.edges[i + 1]), c);
        }
        s
    }
}

/// Histogram of `u` over the Gaussians visible from `camera`.
pub fn uncertainty_stats<T: Real>(
    model: &UncertaintyModel<T>,
    gaussians: &GaussianSet<T>,
    camera: &Camera<T>,
    view: usize,
    iteration: u64,
) -> Result<UncertaintyHistogram> {
    let visible = crate::pipeline::visible_indices(gaussians, camera, Support::Bounded);
    let batch = model.encode(gaussians, camera, &visible)?;
    let u: Vec<f64> = model.predict(&batch, view)?.iter().map(|v| v.to_f64_lossy()).collect();
    Ok(UncertaintyHistogram::from_values(&u, iteration))
}
