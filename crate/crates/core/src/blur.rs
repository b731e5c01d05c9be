//! Spatially-variant motion blur as a sparse row-stochastic operator.
//!
//! Each blurry pixel averages `2N+1` bilinear samples of the latent image
//! taken along a piecewise-linear trajectory: positive sub-frame offsets
//! follow the forward flow, negative ones the backward flow.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::pixel_center;
use crate::imaging::{bilinear_stencil, FlowField, GrayImage};
use crate::sparse::{merge_entries, SparseRows};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureModel {
    /// Half sample count; `2n+1` samples are taken.
    pub n: usize,
    /// Shutter duty cycle in (0, 1].
    pub tau: f64,
}

impl Default for ExposureModel {
    fn default() -> Self {
        Self { n: 20, tau: 0.23 }
    }
}

impl ExposureModel {
    pub fn new(n: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidParameter(format!("tau must lie in (0, 1], got {tau}")));
        }
        Ok(Self { n, tau })
    }

    pub fn sample_count(&self) -> usize {
        2 * self.n + 1
    }

    /// Sub-frame sample offsets for one pixel, in sample order `-N..=N`.
    pub fn trajectory(&self, fwd: Vector2<f64>, bwd: Vector2<f64>) -> Vec<Vector2<f64>> {
        let half = 0.5 * self.tau;
        (-(self.n as i64)..=self.n as i64)
            .map(|s| {
                if s == 0 {
                    return Vector2::zeros();
                }
                let frac = s.unsigned_abs() as f64 / self.n as f64;
                let u = if s > 0 { fwd } else { bwd };
                u * (frac * half)
            })
            .collect()
    }
}

/// The blur operator `A` together with its transpose.
#[derive(Debug, Clone)]
pub struct BlurKernelMatrix {
    pub width: usize,
    pub height: usize,
    rows: SparseRows,
    cols: SparseRows,
}

impl BlurKernelMatrix {
    pub fn identity(width: usize, height: usize) -> Self {
        let rows = SparseRows::from_rows(width * height, (0..width * height).map(|i| vec![(i as u32, 1.0)]).collect());
        let cols = rows.clone();
        Self { width, height, rows, cols }
    }

    pub fn matrix(&self) -> &SparseRows {
        &self.rows
    }

    pub fn transpose(&self) -> &SparseRows {
        &self.cols
    }

    pub fn row(&self, pixel: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.row(pixel)
    }

    fn check(&self, img: &GrayImage) -> Result<()> {
        img.check_dims(self.width, self.height)
    }

    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        self.check(img)?;
        Ok(GrayImage {
            width: self.width,
            height: self.height,
            data: self.rows.mul(&img.data),
        })
    }

    pub fn apply_adjoint(&self, img: &GrayImage) -> Result<GrayImage> {
        self.check(img)?;
        Ok(GrayImage {
            width: self.width,
            height: self.height,
            data: self.cols.mul(&img.data),
        })
    }

    pub(crate) fn apply_raw(&self, x: &[f64], y: &mut [f64]) {
        self.rows.mul_into(x, y);
    }

    pub(crate) fn apply_adjoint_raw(&self, x: &[f64], y: &mut [f64]) {
        self.cols.mul_into(x, y);
    }

    /// Text dump of one kernel row, `index weight` per line.
    pub fn dump_row(&self, pixel: usize) -> String {
        self.row(pixel)
            .map(|(c, v)| format!("{} {} {:.9}\n", c % self.width, c / self.width, v))
            .collect()
    }
}

/// Builds `A` from the reference-to-next (`flow_fwd`) and reference-to-previous
/// (`flow_bwd`) flows. Invalid flow entries count as zero motion.
pub fn build_blur_kernel(flow_fwd: &FlowField, flow_bwd: &FlowField, exp: &ExposureModel) -> Result<BlurKernelMatrix> {
    let (w, h) = (flow_fwd.width, flow_fwd.height);
    if (flow_bwd.width, flow_bwd.height) != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            got: (flow_bwd.width, flow_bwd.height),
        });
    }
    let rows: Vec<Vec<(u32, f64)>> = (0..w * h)
        .into_par_iter()
        .map(|i| kernel_row(w, h, i, flow_fwd.effective(i), flow_bwd.effective(i), exp))
        .collect();
    let rows = SparseRows::from_rows(w * h, rows);
    let cols = rows.transpose();
    Ok(BlurKernelMatrix {
        width: w,
        height: h,
        rows,
        cols,
    })
}

/// One row of `A`: the normalized trajectory footprint of pixel `i` given its
/// forward and backward flows.
pub fn kernel_row(width: usize, height: usize, i: usize, fwd: Vector2<f64>, bwd: Vector2<f64>, exp: &ExposureModel) -> Vec<(u32, f64)> {
    let x = pixel_center(i % width, i / width);
    let samples = exp.sample_count() as f64;
    let mut entries = Vec::with_capacity(4 * exp.sample_count());
    for off in exp.trajectory(fwd, bwd) {
        let s = bilinear_stencil(width, height, x + off);
        for k in 0..4 {
            if s.w[k] > 0.0 {
                entries.push((s.idx[k] as u32, s.w[k] / samples));
            }
        }
    }
    let mut merged = merge_entries(entries);
    let total: f64 = merged.iter().map(|e| e.1).sum();
    for e in &mut merged {
        e.1 /= total;
    }
    merged
}

#[derive(Debug, Clone, Copy)]
pub enum BlurSynthesis<'a> {
    /// One latent frame blurred along its flow trajectory.
    Trajectory {
        flow_fwd: &'a FlowField,
        flow_bwd: &'a FlowField,
        exposure: ExposureModel,
    },
    /// Plain mean of consecutive frames.
    FrameAverage,
}

pub fn synthesize_blurry(latents: &[GrayImage], mode: BlurSynthesis<'_>) -> Result<GrayImage> {
    let first = latents
        .first()
        .ok_or_else(|| Error::InvalidParameter("no latent frames given".into()))?;
    for l in latents {
        l.check_dims(first.width, first.height)?;
    }
    match mode {
        BlurSynthesis::Trajectory {
            flow_fwd,
            flow_bwd,
            exposure,
        } => {
            if latents.len() != 1 {
                return Err(Error::InvalidParameter("trajectory blur takes exactly one latent frame".into()));
            }
            build_blur_kernel(flow_fwd, flow_bwd, &exposure)?.apply(first)
        }
        BlurSynthesis::FrameAverage => {
            let inv = 1.0 / latents.len() as f64;
            let data = (0..first.len())
                .map(|i| latents.iter().map(|l| l.data[i]).sum::<f64>() * inv)
                .collect();
            GrayImage::from_vec(first.width, first.height, data)
        }
    }
}
