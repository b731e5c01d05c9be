//! Bad-pixel ratios for depth and flow, PSNR and SSIM on the reference frame.

use crate::error::{Error, Result};
use crate::imaging::{mse, DenseDepthMap, FlowField, GrayImage};
use crate::pipeline::config::{KeyValues, KvWriter};

pub const PSNR_CAP: f64 = 99.0;
pub const BAD_ABS_PX: f64 = 3.0;
pub const BAD_REL: f64 = 0.05;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// Percentage of bad disparities over pixels with valid ground truth.
    pub depth_bad_ratio: f64,
    /// Percentage of bad reference-to-next flow vectors.
    pub flow_bad_ratio: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// What `evaluate` compares against.
#[derive(Debug, Clone, Copy)]
pub struct EvalTarget<'a> {
    pub depth: &'a DenseDepthMap,
    pub flow: &'a FlowField,
    pub latent: &'a GrayImage,
}

fn is_bad(err: f64, reference: f64) -> bool {
    err > BAD_ABS_PX && err > BAD_REL * reference
}

fn check(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

/// Percentage of valid ground-truth pixels whose disparity `f·baseline/Z`
/// misses by more than 3 px and 5%. Invalid predictions count as bad.
pub fn depth_bad_ratio(pred: &DenseDepthMap, gt: &DenseDepthMap, baseline: f64, f: f64) -> Result<f64> {
    check((gt.width, gt.height), (pred.width, pred.height))?;
    let (mut bad, mut total) = (0usize, 0usize);
    for i in 0..gt.depth.len() {
        let Some(z_gt) = gt.at(i) else { continue };
        total += 1;
        let d_gt = f * baseline / z_gt;
        match pred.at(i) {
            Some(z) if !is_bad((f * baseline / z - d_gt).abs(), d_gt) => {}
            _ => bad += 1,
        }
    }
    Ok(ratio(bad, total))
}

/// Percentage of valid ground-truth vectors with endpoint error above 3 px
/// and 5% of the true magnitude. Invalid predictions count as bad.
pub fn flow_bad_ratio(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    check((gt.width, gt.height), (pred.width, pred.height))?;
    let (mut bad, mut total) = (0usize, 0usize);
    for i in 0..gt.flow.len() {
        if !gt.valid[i] {
            continue;
        }
        total += 1;
        if !pred.valid[i] || is_bad((pred.flow[i] - gt.flow[i]).norm(), gt.flow[i].norm()) {
            bad += 1;
        }
    }
    Ok(ratio(bad, total))
}

fn ratio(bad: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * bad as f64 / total as f64
    }
}

/// `10·log10(1/MSE)` for intensities in [0, 1], capped at 99 dB.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m > 0.0 { (-10.0 * m.log10()).min(PSNR_CAP) } else { PSNR_CAP })
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering; output is `(w−10) × (h−10)`.
fn filter_valid(img: &[f64], w: usize, h: usize, win: &[f64]) -> Vec<f64> {
    let n = win.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|k| win[k] * img[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|k| win[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all full 11×11 Gaussian windows, dynamic range 1.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check(a.dims(), b.dims())?;
    let n = 2 * SSIM_RADIUS + 1;
    let (w, h) = a.dims();
    if w < n || h < n {
        return Err(Error::InvalidParameter(format!("SSIM needs at least {n}×{n} pixels")));
    }
    let win = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a.data, w, h, &win);
    let mu_b = filter_valid(&b.data, w, h, &win);
    let aa = filter_valid(&prod(&a.data, &a.data), w, h, &win);
    let bb = filter_valid(&prod(&b.data, &b.data), w, h, &win);
    let ab = filter_valid(&prod(&a.data, &b.data), w, h, &win);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Scores a reference-frame prediction. `f` is the horizontal focal length.
pub fn evaluate(
    pred_depth: &DenseDepthMap,
    pred_flow: &FlowField,
    restored: &GrayImage,
    gt: EvalTarget<'_>,
    baseline: f64,
    f: f64,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        depth_bad_ratio: depth_bad_ratio(pred_depth, gt.depth, baseline, f)?,
        flow_bad_ratio: flow_bad_ratio(pred_flow, gt.flow)?,
        psnr: psnr(restored, gt.latent)?,
        ssim: ssim(restored, gt.latent)?,
    })
}

/// One entry of the per-iteration trace; iteration 0 is the initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Total energy after the scene step and after the image step.
    pub energy_after_scene: f64,
    pub energy_after_image: f64,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub initial_energy: f64,
    pub iterations: Vec<IterationRecord>,
}

impl RunReport {
    /// Energies in half-step order, starting with the initial state.
    pub fn energy_trace(&self) -> Vec<f64> {
        let mut out = vec![self.initial_energy];
        for it in self.iterations.iter().filter(|it| it.iteration > 0) {
            out.push(it.energy_after_scene);
            out.push(it.energy_after_image);
        }
        out
    }

    pub fn final_metrics(&self) -> Option<MetricsReport> {
        self.iterations.last().and_then(|it| it.metrics)
    }

    pub fn metrics_at(&self, iteration: usize) -> Option<MetricsReport> {
        self.iterations
            .iter()
            .find(|it| it.iteration == iteration)
            .and_then(|it| it.metrics)
    }

    pub fn to_text(&self) -> String {
        let mut out = KvWriter::new();
        out.put("initial_energy", self.initial_energy)
            .put("iterations", self.iterations.len());
        for it in &self.iterations {
            let p = format!("iter.{}", it.iteration);
            out.put(&format!("{p}.energy_after_scene"), it.energy_after_scene)
                .put(&format!("{p}.energy_after_image"), it.energy_after_image);
            if let Some(m) = &it.metrics {
                metrics_lines(&mut out, &p, m);
            }
        }
        if let Some(m) = self.final_metrics() {
            metrics_lines(&mut out, "final", &m);
        }
        out.finish()
    }
}

fn metrics_lines(out: &mut KvWriter, prefix: &str, m: &MetricsReport) {
    out.put(&format!("{prefix}.depth_bad_ratio"), m.depth_bad_ratio)
        .put(&format!("{prefix}.flow_bad_ratio"), m.flow_bad_ratio)
        .put(&format!("{prefix}.psnr"), m.psnr)
        .put(&format!("{prefix}.ssim"), m.ssim);
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = KvWriter::new();
        out.put("depth_bad_ratio", self.depth_bad_ratio)
            .put("flow_bad_ratio", self.flow_bad_ratio)
            .put("psnr", self.psnr)
            .put("ssim", self.ssim);
        out.finish()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let m = Self {
            depth_bad_ratio: kv.require("depth_bad_ratio")?,
            flow_bad_ratio: kv.require("flow_bad_ratio")?,
            psnr: kv.require("psnr")?,
            ssim: kv.require("ssim")?,
        };
        kv.finish()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn depth(w: usize, h: usize, f: impl FnMut(usize) -> f64) -> DenseDepthMap {
        DenseDepthMap {
            width: w,
            height: h,
            depth: (0..w * h).map(f).collect(),
        }
    }

    #[test]
    fn identical_inputs_score_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = depth(20, 16, |_| rng.gen_range(1.0..5.0));
        let mut flow = FlowField::zeros(20, 16);
        flow.flow.iter_mut().for_each(|u| *u = Vector2::new(rng.gen_range(-9.0..9.0), 1.0));
        let img = GrayImage::from_fn(20, 16, |c, r| ((c * 7 + r * 3) % 11) as f64 / 10.0);
        let target = EvalTarget {
            depth: &d,
            flow: &flow,
            latent: &img,
        };
        let m = evaluate(&d, &flow, &img, target, 0.54, 200.0).unwrap();
        assert_eq!((m.depth_bad_ratio, m.flow_bad_ratio, m.psnr), (0.0, 0.0, PSNR_CAP));
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_pixel_disparity_error_is_not_bad() {
        // f·b = 100, Z = 2 → d = 50; shifting d to 52 is a 2 px error
        let gt = depth(8, 8, |_| 2.0);
        let pred = depth(8, 8, |_| 100.0 / 52.0);
        assert_eq!(depth_bad_ratio(&pred, &gt, 0.5, 200.0).unwrap(), 0.0);
        let pred = depth(8, 8, |i| if i < 16 { 100.0 / 54.0 } else { 2.0 });
        assert!((depth_bad_ratio(&pred, &gt, 0.5, 200.0).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let a = GrayImage::filled(10, 10, 0.5);
        let b = GrayImage::filled(10, 10, 0.5 + 1e-3f64.sqrt());
        assert!((psnr(&a, &b).unwrap() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_orders_degradations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = GrayImage::from_fn(32, 32, |_, _| rng.gen_range(0.0..1.0));
        let slight = GrayImage::from_fn(32, 32, |c, r| a.get(c, r) * 0.95 + 0.02);
        let flat = GrayImage::filled(32, 32, 0.5);
        let s1 = ssim(&a, &slight).unwrap();
        let s2 = ssim(&a, &flat).unwrap();
        assert!(s1 > 0.9 && s1 < 1.0 && s2 < 0.1 && s1 > s2, "{s1} {s2}");
        assert!(ssim(&a, &GrayImage::new(31, 32)).is_err());
    }

    #[test]
    fn ratios_match_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = depth(16, 16, |_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(1.0..8.0) });
            let pred = depth(16, 16, |i| {
                if rng.gen_bool(0.05) {
                    -1.0
                } else {
                    gt.depth[i].max(1.0) * rng.gen_range(0.8..1.25)
                }
            });
            let fb = 200.0 * 0.54;
            let (mut bad, mut n) = (0, 0);
            for i in 0..256 {
                if gt.depth[i] <= 0.0 {
                    continue;
                }
                n += 1;
                let dg = fb / gt.depth[i];
                let e = if pred.depth[i] > 0.0 {
                    (fb / pred.depth[i] - dg).abs()
                } else {
                    f64::INFINITY
                };
                if e > 3.0 && e > 0.05 * dg {
                    bad += 1;
                }
            }
            let want = 100.0 * bad as f64 / n as f64;
            assert!((depth_bad_ratio(&pred, &gt, 0.54, 200.0).unwrap() - want).abs() < 1e-12);

            let mut fg = FlowField::zeros(16, 16);
            let mut fp = FlowField::zeros(16, 16);
            for i in 0..256 {
                fg.flow[i] = Vector2::new(rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0));
                fg.valid[i] = rng.gen_bool(0.9);
                fp.flow[i] = fg.flow[i] + Vector2::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
                fp.valid[i] = rng.gen_bool(0.95);
            }
            let (mut bad, mut n) = (0, 0);
            for i in 0..256 {
                if !fg.valid[i] {
                    continue;
                }
                n += 1;
                let e = if fp.valid[i] {
                    (fp.flow[i] - fg.flow[i]).norm()
                } else {
                    f64::INFINITY
                };
                if e > 3.0 && e > 0.05 * fg.flow[i].norm() {
                    bad += 1;
                }
            }
            let want = 100.0 * bad as f64 / n as f64;
            assert!((flow_bad_ratio(&fp, &fg).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = depth(4, 4, |_| 1.0);
        let b = depth(4, 5, |_| 1.0);
        assert!(matches!(depth_bad_ratio(&a, &b, 0.54, 100.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn report_text_round_trips() {
        let m = MetricsReport {
            depth_bad_ratio: 1.25,
            flow_bad_ratio: 0.1 + 0.2,
            psnr: 31.7,
            ssim: 0.93,
        };
        assert_eq!(MetricsReport::parse(&m.to_text()).unwrap(), m);
    }
}
