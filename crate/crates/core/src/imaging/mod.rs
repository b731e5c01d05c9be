//! Image containers, bilinear sampling, derivative filters and scene warps.

pub mod io;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{pixel_center, Intrinsics};
use crate::scene::{Direction, SceneState};
use crate::superpixels::SuperpixelMap;

const INSIDE_EPS: f64 = 1e-9;

/// Single-channel image, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: (data.len(), 1),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(c, r));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: (self.width, self.height),
            });
        }
        Ok(())
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * a).collect(),
        }
    }
}

/// RGB image, row-major, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(c, r));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect(),
        }
    }

    pub fn channel(&self, c: usize) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[c]).collect(),
        }
    }

    pub fn from_channels(channels: [&GrayImage; 3]) -> Result<Self> {
        let (w, h) = channels[0].dims();
        channels[1].check_dims(w, h)?;
        channels[2].check_dims(w, h)?;
        let data = (0..w * h)
            .map(|i| [channels[0].data[i], channels[1].data[i], channels[2].data[i]])
            .collect();
        Ok(Self { width: w, height: h, data })
    }

    pub fn from_gray(g: &GrayImage) -> Self {
        Self {
            width: g.width,
            height: g.height,
            data: g.data.iter().map(|&v| [v, v, v]).collect(),
        }
    }

    /// Applies a single-channel operation to each channel.
    pub fn map_channels(&self, mut f: impl FnMut(&GrayImage) -> Result<GrayImage>) -> Result<Self> {
        let r = f(&self.channel(0))?;
        let g = f(&self.channel(1))?;
        let b = f(&self.channel(2))?;
        Self::from_channels([&r, &g, &b])
    }
}

/// Per-pixel metric depth; values `<= 0` or non-finite are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl DenseDepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let d = self.depth[row * self.width + col];
        (d > 0.0 && d.is_finite()).then_some(d)
    }

    #[inline]
    pub fn at(&self, idx: usize) -> Option<f64> {
        let d = self.depth[idx];
        (d > 0.0 && d.is_finite()).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        (0..self.depth.len()).filter(|&i| self.at(i).is_some()).count()
    }
}

/// Depth measurements on the subset `Ω` given by `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SparseDepthMap {
    /// Builds the mask from valid entries of a depth map.
    pub fn from_dense(d: &DenseDepthMap) -> Self {
        let mask: Vec<bool> = (0..d.depth.len()).map(|i| d.at(i).is_some()).collect();
        let depth = d.depth.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        Self {
            width: d.width,
            height: d.height,
            depth,
            mask,
        }
    }

    pub fn to_dense(&self) -> DenseDepthMap {
        DenseDepthMap {
            width: self.width,
            height: self.height,
            depth: self.depth.iter().zip(&self.mask).map(|(&d, &m)| if m { d } else { 0.0 }).collect(),
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.mask[i].then_some(self.depth[i])
    }

    pub fn measured(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| (i, self.depth[i]))
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Nearest measurement whose pixel center lies within 1 px of `pos`.
    pub fn nearest_within_one_px(&self, pos: Vector2<f64>) -> Option<f64> {
        let c0 = (pos.x - 0.5).round() as i64;
        let r0 = (pos.y - 0.5).round() as i64;
        let mut best: Option<(f64, f64)> = None;
        for r in r0 - 1..=r0 + 1 {
            for c in c0 - 1..=c0 + 1 {
                if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
                    continue;
                }
                let Some(d) = self.get(c as usize, r as usize) else {
                    continue;
                };
                let dist2 = (c as f64 + 0.5 - pos.x).powi(2) + (r as f64 + 0.5 - pos.y).powi(2);
                if dist2 <= 1.0 && best.is_none_or(|(b, _)| dist2 < b) {
                    best = Some((dist2, d));
                }
            }
        }
        best.map(|(_, d)| d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            flow: vec![Vector2::zeros(); width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, u: Vector2<f64>) -> Self {
        Self {
            width,
            height,
            flow: vec![u; width * height],
            valid: vec![true; width * height],
        }
    }

    /// Flow with invalid entries replaced by zero.
    #[inline]
    pub fn effective(&self, idx: usize) -> Vector2<f64> {
        if self.valid[idx] {
            self.flow[idx]
        } else {
            Vector2::zeros()
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            flow: self.flow.iter().map(|u| -u).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Bilinear footprint of a continuous position: up to four `(index, weight)` pairs.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    /// Whether the position lies within the hull of pixel centers.
    pub inside: bool,
}

/// Bilinear weights with border clamping. Weights always sum to 1.
#[inline]
pub fn bilinear_stencil(width: usize, height: usize, pos: Vector2<f64>) -> Stencil {
    let gx = pos.x - 0.5;
    let gy = pos.y - 0.5;
    let inside = gx >= -INSIDE_EPS && gy >= -INSIDE_EPS && gx <= (width - 1) as f64 + INSIDE_EPS && gy <= (height - 1) as f64 + INSIDE_EPS;
    let (x0, ax) = split_clamped(gx, width);
    let (y0, ay) = split_clamped(gy, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Stencil {
        idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        w: [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay],
        inside,
    }
}

#[inline]
fn split_clamped(g: f64, n: usize) -> (usize, f64) {
    let max = (n - 1) as f64;
    if !(g > 0.0) {
        return (0, 0.0);
    }
    if g >= max {
        return (n - 1, 0.0);
    }
    let f = g.floor();
    (f as usize, g - f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub inside: bool,
}

pub fn bilinear_sample(img: &GrayImage, pos: Vector2<f64>) -> Sample {
    let s = bilinear_stencil(img.width, img.height, pos);
    let value = s.idx.iter().zip(&s.w).map(|(&i, &w)| w * img.data[i]).sum();
    Sample { value, inside: s.inside }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivAxis {
    Horizontal,
    Vertical,
    Identity,
}

impl DerivAxis {
    pub const ALL: [DerivAxis; 3] = [DerivAxis::Identity, DerivAxis::Horizontal, DerivAxis::Vertical];
}

/// Forward differences; the last column (row) has derivative 0.
pub fn derivative_filter(img: &GrayImage, axis: DerivAxis) -> GrayImage {
    let mut out = img.clone();
    derivative_into(&img.data, img.width, img.height, axis, &mut out.data);
    out
}

pub(crate) fn derivative_into(src: &[f64], w: usize, h: usize, axis: DerivAxis, dst: &mut [f64]) {
    match axis {
        DerivAxis::Identity => dst.copy_from_slice(src),
        DerivAxis::Horizontal => {
            for r in 0..h {
                let row = r * w;
                for c in 0..w - 1 {
                    dst[row + c] = src[row + c + 1] - src[row + c];
                }
                dst[row + w - 1] = 0.0;
            }
        }
        DerivAxis::Vertical => {
            for r in 0..h - 1 {
                for c in 0..w {
                    dst[r * w + c] = src[(r + 1) * w + c] - src[r * w + c];
                }
            }
            for c in 0..w {
                dst[(h - 1) * w + c] = 0.0;
            }
        }
    }
}

/// Transpose of [`derivative_filter`].
pub(crate) fn derivative_adjoint_into(src: &[f64], w: usize, h: usize, axis: DerivAxis, dst: &mut [f64]) {
    match axis {
        DerivAxis::Identity => dst.copy_from_slice(src),
        DerivAxis::Horizontal => {
            for r in 0..h {
                let row = r * w;
                for c in 0..w {
                    let mut v = 0.0;
                    if c < w - 1 {
                        v -= src[row + c];
                    }
                    if c > 0 {
                        v += src[row + c - 1];
                    }
                    dst[row + c] = v;
                }
            }
        }
        DerivAxis::Vertical => {
            for r in 0..h {
                for c in 0..w {
                    let mut v = 0.0;
                    if r < h - 1 {
                        v -= src[r * w + c];
                    }
                    if r > 0 {
                        v += src[(r - 1) * w + c];
                    }
                    dst[r * w + c] = v;
                }
            }
        }
    }
}

pub fn derivative_adjoint(img: &GrayImage, axis: DerivAxis) -> GrayImage {
    let mut out = img.clone();
    derivative_adjoint_into(&img.data, img.width, img.height, axis, &mut out.data);
    out
}

/// Samples `target` at `H*x` for every reference pixel, using each pixel's
/// superpixel homography. The mask is false where the warp leaves the image.
pub fn warp_by_scene(
    target: &GrayImage,
    scene: &SceneState,
    superpixels: &SuperpixelMap,
    k: &Intrinsics,
    direction: Direction,
) -> Result<(GrayImage, Vec<bool>)> {
    let (w, h) = (superpixels.width, superpixels.height);
    target.check_dims(w, h)?;
    let homs = scene.homographies(k, direction)?;
    let mut out = GrayImage::new(w, h);
    let mut mask = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if let Ok(p) = homs[superpixels.labels[i]].apply(pixel_center(c, r)) {
                let s = bilinear_sample(target, p);
                if s.inside {
                    out.data[i] = s.value;
                    mask[i] = true;
                }
            }
        }
    }
    Ok((out, mask))
}

pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    b.check_dims(a.width, a.height)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PlaneParam, RigidMotion};
    use crate::scene::ObjectMotion;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |c, r| (c * 7 + r * 13) as f64 / 100.0)
    }

    #[test]
    fn sample_integer_midpoint_and_clamp() {
        let img = ramp(6, 5);
        let s = bilinear_sample(&img, pixel_center(3, 2));
        assert_eq!(s.value, img.get(3, 2));
        assert!(s.inside);

        let two = GrayImage::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&two, Vector2::new(1.0, 0.5)).value, 0.5);

        // column 0 of rows 1 and 2, blended half-way, clamped horizontally
        let s = bilinear_sample(&img, Vector2::new(-3.7, 2.0));
        assert!(!s.inside);
        assert!((s.value - 0.5 * (img.get(0, 1) + img.get(0, 2))).abs() < 1e-15);
    }

    #[test]
    fn derivative_examples() {
        let flat = GrayImage::filled(5, 4, 0.3);
        assert!(derivative_filter(&flat, DerivAxis::Horizontal).data.iter().all(|&v| v == 0.0));
        assert!(derivative_filter(&flat, DerivAxis::Vertical).data.iter().all(|&v| v == 0.0));

        let step = GrayImage::from_fn(6, 4, |c, _| if c >= 3 { 0.7 } else { 0.2 });
        let dx = derivative_filter(&step, DerivAxis::Horizontal);
        for r in 0..4 {
            for c in 0..6 {
                let expected = if c == 2 { 0.5 } else { 0.0 };
                assert!((dx.get(c, r) - expected).abs() < 1e-15);
            }
        }
        assert_eq!(derivative_filter(&step, DerivAxis::Identity), step);
    }

    #[test]
    fn derivative_adjoint_matches_transpose() {
        let a = ramp(7, 5);
        let b = GrayImage::from_fn(7, 5, |c, r| ((c * 3 + r * 5) % 11) as f64 * 0.1);
        for axis in DerivAxis::ALL {
            let lhs: f64 = derivative_filter(&a, axis).data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.data.iter().zip(&derivative_adjoint(&b, axis).data).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn derivative_is_linear(
            xs in proptest::collection::vec(-1.0f64..1.0, 30),
            ys in proptest::collection::vec(-1.0f64..1.0, 30),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x = GrayImage::from_vec(6, 5, xs).unwrap();
            let y = GrayImage::from_vec(6, 5, ys).unwrap();
            let combo = GrayImage::from_vec(6, 5, x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect()).unwrap();
            for axis in DerivAxis::ALL {
                let lhs = derivative_filter(&combo, axis);
                let fx = derivative_filter(&x, axis);
                let fy = derivative_filter(&y, axis);
                for i in 0..30 {
                    prop_assert!((lhs.data[i] - (a * fx.data[i] + b * fy.data[i])).abs() < 1e-9);
                }
            }
        }
    }

    fn shift_scene(k: &Intrinsics, sp: &SuperpixelMap, shifts: &[f64]) -> SceneState {
        // fronto-parallel plane at 2 m; lateral camera translation tx gives −fx·tx/2 px flow
        let objects = shifts
            .iter()
            .map(|&s| {
                let tx = -s * 2.0 / k.fx;
                let m = RigidMotion::new(Matrix3::identity(), Vector3::new(tx, 0.0, 0.0)).unwrap();
                ObjectMotion {
                    prev: m.inverse(),
                    next: m,
                }
            })
            .collect::<Vec<_>>();
        let labels = (0..sp.count).map(|i| i % shifts.len()).collect();
        SceneState {
            planes: vec![PlaneParam::fronto_parallel(2.0); sp.count],
            labels,
            objects,
        }
    }

    #[test]
    fn warp_identity_scene() {
        let k = Intrinsics::new(100.0, 100.0, 8.0, 6.0, 16, 12).unwrap();
        let sp = SuperpixelMap::grid(16, 12, 2, 2);
        let scene = shift_scene(&k, &sp, &[0.0]);
        let img = ramp(16, 12);
        let (out, mask) = warp_by_scene(&img, &scene, &sp, &k, Direction::Next).unwrap();
        assert!(mask.iter().all(|&m| m));
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_uniform_shift() {
        let k = Intrinsics::new(100.0, 100.0, 8.0, 6.0, 16, 12).unwrap();
        let sp = SuperpixelMap::grid(16, 12, 1, 1);
        let scene = shift_scene(&k, &sp, &[-5.0]);
        let img = ramp(16, 12);
        let (out, mask) = warp_by_scene(&img, &scene, &sp, &k, Direction::Next).unwrap();
        for r in 0..12 {
            for c in 0..16 {
                let i = r * 16 + c;
                assert_eq!(mask[i], c >= 5, "col {c}");
                if c >= 5 {
                    assert!((out.data[i] - img.get(c - 5, r)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn warp_piecewise_matches_brute_force() {
        let k = Intrinsics::new(100.0, 100.0, 8.0, 6.0, 16, 12).unwrap();
        let sp = SuperpixelMap::grid(16, 12, 2, 1);
        let scene = shift_scene(&k, &sp, &[-2.0, 3.0]);
        let img = ramp(16, 12);
        let (out, mask) = warp_by_scene(&img, &scene, &sp, &k, Direction::Next).unwrap();
        for r in 0..12 {
            for c in 0..16 {
                let i = r * 16 + c;
                let shift = if sp.labels[i] == 0 { -2.0 } else { 3.0 };
                let src = c as f64 + shift;
                let inside = src >= 0.0 && src <= 15.0;
                assert_eq!(mask[i], inside);
                if inside {
                    assert!((out.data[i] - img.get(src as usize, r)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn nearest_measurement_lookup() {
        let mut d = DenseDepthMap::new(5, 5);
        d.depth[2 * 5 + 2] = 3.0;
        d.depth[0] = 1.0;
        let s = SparseDepthMap::from_dense(&d);
        assert_eq!(s.nearest_within_one_px(Vector2::new(2.5, 2.5)), Some(3.0));
        assert_eq!(s.nearest_within_one_px(Vector2::new(3.3, 2.5)), Some(3.0));
        assert_eq!(s.nearest_within_one_px(Vector2::new(3.6, 3.6)), None);
        assert_eq!(s.count(), 2);
    }
}
