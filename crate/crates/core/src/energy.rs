//! Every term of the joint objective and their sum.
//!
//! Per-pixel and per-pair cost helpers are public so that the scene-step CRF
//! assembles exactly the quantities evaluated here.

use std::fmt::Write as _;

use nalgebra::Vector2;

use crate::blur::{build_blur_kernel, BlurKernelMatrix, ExposureModel};
use crate::error::{Error, Result};
use crate::geometry::{pixel_center, Homography, Intrinsics, PlaneParam, RigidMotion};
use crate::imaging::{bilinear_stencil, FlowField, GrayImage, SparseDepthMap};
use crate::scene::{Direction, SceneState, REFERENCE_FRAME};
use crate::superpixels::{extract_boundaries, BoundarySet, SuperpixelMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub tv_weight: f64,
    /// Gradient-prior exponent; only 1 is supported.
    pub p: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            w1: 4.0,
            w2: 2.0,
            w3: 1.0,
            lambda: 0.1,
            c1: 4.0,
            c2: 0.5,
            c3: 800.0,
            alpha1: 0.3,
            alpha2: 5.0,
            alpha3: 0.3,
            tv_weight: 0.05,
            p: 1.0,
        }
    }
}

impl EnergyWeights {
    pub fn zero() -> Self {
        Self {
            w1: 0.0,
            w2: 0.0,
            w3: 0.0,
            lambda: 0.0,
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
            tv_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("w1", self.w1),
            ("w2", self.w2),
            ("w3", self.w3),
            ("lambda", self.lambda),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("tv_weight", self.tv_weight),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.p != 1.0 {
            return Err(Error::InvalidParameter(format!("only p = 1 is supported, got {}", self.p)));
        }
        Ok(())
    }
}

/// A reliable correspondence between the reference frame and a target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub reference: Vector2<f64>,
    pub target: Vector2<f64>,
    pub dir: Direction,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn for_direction(&self, dir: Direction) -> impl Iterator<Item = &Anchor> + '_ {
        self.anchors.iter().filter(move |a| a.dir == dir)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub psi1: f64,
    pub psi2: f64,
    pub psi3: f64,
    pub psi4: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub tv: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub const KEYS: [&'static str; 9] = ["psi1", "psi2", "psi3", "psi4", "theta1", "theta2", "theta3", "tv", "total"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.psi1,
            self.psi2,
            self.psi3,
            self.psi4,
            self.theta1,
            self.theta2,
            self.theta3,
            self.tv,
            self.total,
        ]
    }

    /// Sets `total` to the sum of the parts.
    pub fn summed(mut self) -> Self {
        self.total = self.psi1 + self.psi2 + self.psi3 + self.psi4 + self.theta1 + self.theta2 + self.theta3 + self.tv;
        self
    }

    /// Flat `key = value` report.
    pub fn report(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k} = {v:.12e}");
        }
        s
    }
}

/// Everything the objective needs besides the unknowns.
#[derive(Debug, Clone)]
pub struct Observations {
    pub k: Intrinsics,
    pub superpixels: SuperpixelMap,
    pub boundaries: BoundarySet,
    /// Sparse depth per frame, indexed by frame.
    pub sparse_depth: Vec<SparseDepthMap>,
    /// Blurry luminance per frame, indexed by frame.
    pub blurry: Vec<GrayImage>,
    pub anchors: AnchorSet,
    pub exposure: ExposureModel,
    /// Active temporal directions; a two-frame setup uses only `Next`.
    pub directions: Vec<Direction>,
}

impl Observations {
    pub fn new(
        k: Intrinsics,
        superpixels: SuperpixelMap,
        sparse_depth: Vec<SparseDepthMap>,
        blurry: Vec<GrayImage>,
        anchors: AnchorSet,
        exposure: ExposureModel,
    ) -> Result<Self> {
        let boundaries = extract_boundaries(&superpixels);
        let obs = Self {
            k,
            superpixels,
            boundaries,
            sparse_depth,
            blurry,
            anchors,
            exposure,
            directions: Direction::ALL.to_vec(),
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = (self.k.width, self.k.height);
        if (self.superpixels.width, self.superpixels.height) != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: (self.superpixels.width, self.superpixels.height),
            });
        }
        if self.sparse_depth.len() != 3 || self.blurry.len() != 3 {
            return Err(Error::InvalidParameter("observations must cover three frames".into()));
        }
        for d in &self.sparse_depth {
            if (d.width, d.height) != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    got: (d.width, d.height),
                });
            }
        }
        for b in &self.blurry {
            b.check_dims(dims.0, dims.1)?;
        }
        if self.directions.is_empty() {
            return Err(Error::InvalidParameter("at least one temporal direction is required".into()));
        }
        Ok(())
    }

    /// Frames entering the blur term: the reference plus every active target.
    pub fn active_frames(&self) -> Vec<usize> {
        let mut f = vec![REFERENCE_FRAME];
        f.extend(self.directions.iter().map(|d| d.target_frame()));
        f.sort_unstable();
        f
    }

    pub fn has(&self, dir: Direction) -> bool {
        self.directions.contains(&dir)
    }
}

#[inline]
pub fn truncated(v: f64, alpha: f64) -> f64 {
    v.abs().min(alpha)
}

/// ψ¹ contribution of one measured reference pixel.
#[inline]
pub fn psi1_pixel(k: &Intrinsics, plane: &PlaneParam, pos: Vector2<f64>, measured: f64, w1: f64, alpha1: f64) -> f64 {
    match plane.depth_at(k, pos) {
        Ok(d) => w1 * (measured - d).abs(),
        Err(_) => w1 * alpha1,
    }
}

/// ψ² contribution of one reference pixel; zero without a nearby target measurement.
#[inline]
pub fn psi2_pixel(
    k: &Intrinsics,
    plane: &PlaneParam,
    motion: &RigidMotion,
    pos: Vector2<f64>,
    target_depth: &SparseDepthMap,
    w2: f64,
) -> f64 {
    let Ok(x) = plane.point_at(k, pos) else {
        return 0.0;
    };
    let moved = motion.apply(&x);
    let Some(q) = k.project(&moved) else {
        return 0.0;
    };
    match target_depth.nearest_within_one_px(q) {
        Some(d) => w2 * (moved.z - d).abs(),
        None => 0.0,
    }
}

/// Bilinear sample restricted to the pixel-center hull.
#[inline]
pub fn sample_inside(img: &GrayImage, pos: Vector2<f64>) -> Option<f64> {
    let s = bilinear_stencil(img.width, img.height, pos);
    s.inside.then(|| s.idx.iter().zip(&s.w).map(|(&i, &w)| w * img.data[i]).sum())
}

/// θ¹ contribution of one reference pixel; zero where the warp is undefined.
#[inline]
pub fn theta1_pixel(hom: Option<&Homography>, pos: Vector2<f64>, reference: f64, target: &GrayImage, c1: f64) -> f64 {
    match hom.map(|h| h.apply(pos)) {
        Some(Ok(q)) => sample_inside(target, q).map_or(0.0, |v| c1 * (reference - v).abs()),
        _ => 0.0,
    }
}

/// θ² contribution of one anchor; an undefined warp pays the cap.
#[inline]
pub fn theta2_anchor(hom: Option<&Homography>, anchor: &Anchor, c2: f64, alpha2: f64) -> f64 {
    match hom.map(|h| h.apply(anchor.reference)) {
        Some(Ok(q)) => c2 * truncated((q - anchor.target).norm(), alpha2),
        _ => c2 * alpha2,
    }
}

/// Signed boundary depth gap `ω`; zero where either depth is undefined.
#[inline]
pub fn omega(k: &Intrinsics, ni: &PlaneParam, nj: &PlaneParam, pos: Vector2<f64>) -> f64 {
    match (ni.depth_at(k, pos), nj.depth_at(k, pos)) {
        (Ok(a), Ok(b)) => a - b,
        _ => 0.0,
    }
}

/// ψ³ cost of a boundary whose sides carry different object labels.
pub fn psi3_pair(k: &Intrinsics, ni: &PlaneParam, nj: &PlaneParam, pixels: &[usize], w3: f64, lambda: f64) -> f64 {
    if pixels.is_empty() {
        return w3;
    }
    let w = k.width;
    let sum: f64 = pixels.iter().map(|&p| omega(k, ni, nj, pixel_center(p % w, p / w)).powi(2)).sum();
    w3 * (-(lambda / pixels.len() as f64) * sum * ni.abs_cosine(nj)).exp()
}

pub fn psi4_pair(k: &Intrinsics, ni: &PlaneParam, nj: &PlaneParam, pixels: &[usize], alpha1: f64, alpha3: f64) -> f64 {
    let w = k.width;
    let depth: f64 = pixels
        .iter()
        .map(|&p| {
            let pos = pixel_center(p % w, p / w);
            match (ni.depth_at(k, pos), nj.depth_at(k, pos)) {
                (Ok(a), Ok(b)) => truncated(a - b, alpha1),
                _ => alpha1,
            }
        })
        .sum();
    depth + truncated(1.0 - ni.abs_cosine(nj), alpha3)
}

pub fn psi1(scene: &SceneState, sp: &SuperpixelMap, sparse_ref: &SparseDepthMap, k: &Intrinsics, w1: f64, alpha1: f64) -> f64 {
    let w = sp.width;
    sparse_ref
        .measured()
        .map(|(i, d)| psi1_pixel(k, &scene.planes[sp.labels[i]], pixel_center(i % w, i / w), d, w1, alpha1))
        .sum()
}

pub fn psi2(scene: &SceneState, sp: &SuperpixelMap, sparse: &[SparseDepthMap], k: &Intrinsics, w2: f64, directions: &[Direction]) -> f64 {
    let w = sp.width;
    let mut total = 0.0;
    for &dir in directions {
        let target = &sparse[dir.target_frame()];
        for i in 0..sp.labels.len() {
            let s = sp.labels[i];
            total += psi2_pixel(k, &scene.planes[s], scene.motion(s, dir), pixel_center(i % w, i / w), target, w2);
        }
    }
    total
}

pub fn psi3(scene: &SceneState, boundaries: &BoundarySet, k: &Intrinsics, w3: f64, lambda: f64) -> f64 {
    boundaries
        .pairs
        .iter()
        .filter(|p| scene.labels[p.i] != scene.labels[p.j])
        .map(|p| psi3_pair(k, &scene.planes[p.i], &scene.planes[p.j], &p.pixels, w3, lambda))
        .sum()
}

pub fn psi4(scene: &SceneState, boundaries: &BoundarySet, k: &Intrinsics, alpha1: f64, alpha3: f64) -> f64 {
    boundaries
        .pairs
        .iter()
        .map(|p| psi4_pair(k, &scene.planes[p.i], &scene.planes[p.j], &p.pixels, alpha1, alpha3))
        .sum()
}

/// `latents` is indexed by frame; the reference frame is compared with each
/// active target frame.
pub fn theta1(scene: &SceneState, sp: &SuperpixelMap, latents: &[GrayImage], k: &Intrinsics, c1: f64, directions: &[Direction]) -> f64 {
    let w = sp.width;
    let reference = &latents[REFERENCE_FRAME];
    let mut total = 0.0;
    for &dir in directions {
        let homs = scene.homographies_lenient(k, dir);
        let target = &latents[dir.target_frame()];
        for i in 0..sp.labels.len() {
            total += theta1_pixel(
                homs[sp.labels[i]].as_ref(),
                pixel_center(i % w, i / w),
                reference.data[i],
                target,
                c1,
            );
        }
    }
    total
}

pub fn theta2(
    scene: &SceneState,
    sp: &SuperpixelMap,
    anchors: &AnchorSet,
    k: &Intrinsics,
    c2: f64,
    alpha2: f64,
    directions: &[Direction],
) -> f64 {
    let mut total = 0.0;
    for &dir in directions {
        let homs = scene.homographies_lenient(k, dir);
        for a in anchors.for_direction(dir) {
            let s = superpixel_at(sp, a.reference);
            total += theta2_anchor(homs[s].as_ref(), a, c2, alpha2);
        }
    }
    total
}

/// Superpixel owning the pixel that contains `pos`.
pub fn superpixel_at(sp: &SuperpixelMap, pos: Vector2<f64>) -> usize {
    let c = (pos.x.floor().max(0.0) as usize).min(sp.width - 1);
    let r = (pos.y.floor().max(0.0) as usize).min(sp.height - 1);
    sp.label_at(c, r)
}

/// `Σ_∂ ‖∂r‖²` for a residual image `r` with forward differences.
pub fn filtered_sq_norm(r: &[f64], w: usize, h: usize) -> f64 {
    let mut s = 0.0;
    for row in 0..h {
        for c in 0..w {
            let i = row * w + c;
            s += r[i] * r[i];
            if c + 1 < w {
                s += (r[i + 1] - r[i]).powi(2);
            }
            if row + 1 < h {
                s += (r[i + w] - r[i]).powi(2);
            }
        }
    }
    s
}

/// θ³ for the given frames, each blurred by the same kernel.
pub fn theta3(kernel: &BlurKernelMatrix, latents: &[GrayImage], blurry: &[GrayImage], frames: &[usize], c3: f64) -> Result<f64> {
    let mut total = 0.0;
    for &m in frames {
        let ai = kernel.apply(&latents[m])?;
        blurry[m].check_dims(ai.width, ai.height)?;
        let r: Vec<f64> = ai.data.iter().zip(&blurry[m].data).map(|(a, b)| a - b).collect();
        total += filtered_sq_norm(&r, ai.width, ai.height);
    }
    Ok(c3 * total)
}

/// Isotropic total variation with forward differences.
pub fn tv_image(img: &GrayImage) -> f64 {
    let (w, h) = img.dims();
    let d = &img.data;
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let gx = if c + 1 < w { d[i + 1] - d[i] } else { 0.0 };
            let gy = if r + 1 < h { d[i + w] - d[i] } else { 0.0 };
            s += (gx * gx + gy * gy).sqrt();
        }
    }
    s
}

pub fn tv(latents: &[GrayImage], frames: &[usize], tv_weight: f64) -> f64 {
    tv_weight * frames.iter().map(|&m| tv_image(&latents[m])).sum::<f64>()
}

/// Forward and backward flows of the reference frame that drive the blur
/// kernel. Without a previous frame the backward flow mirrors the forward one.
pub fn scene_flows(scene: &SceneState, obs: &Observations) -> (FlowField, FlowField) {
    let fwd_dir = if obs.has(Direction::Next) {
        Direction::Next
    } else {
        Direction::Prev
    };
    let fwd = scene.flow_field(&obs.superpixels, &obs.k, fwd_dir);
    let bwd = if obs.has(Direction::Prev) && obs.has(Direction::Next) {
        scene.flow_field(&obs.superpixels, &obs.k, Direction::Prev)
    } else {
        fwd.negated()
    };
    (fwd, bwd)
}

pub fn scene_kernel(scene: &SceneState, obs: &Observations) -> Result<BlurKernelMatrix> {
    let (fwd, bwd) = scene_flows(scene, obs);
    build_blur_kernel(&fwd, &bwd, &obs.exposure)
}

fn check_latents(latents: &[GrayImage], obs: &Observations) -> Result<()> {
    if latents.len() != 3 {
        return Err(Error::InvalidParameter(format!("expected 3 latent frames, got {}", latents.len())));
    }
    for l in latents {
        l.check_dims(obs.k.width, obs.k.height)?;
    }
    Ok(())
}

/// Full objective with the blur kernel rebuilt from `scene`.
pub fn total_energy(scene: &SceneState, latents: &[GrayImage], obs: &Observations, wt: &EnergyWeights) -> Result<EnergyBreakdown> {
    let kernel = scene_kernel(scene, obs)?;
    total_energy_with_kernel(scene, latents, obs, wt, &kernel)
}

/// Full objective using a precomputed kernel (which must match `scene`).
pub fn total_energy_with_kernel(
    scene: &SceneState,
    latents: &[GrayImage],
    obs: &Observations,
    wt: &EnergyWeights,
    kernel: &BlurKernelMatrix,
) -> Result<EnergyBreakdown> {
    check_latents(latents, obs)?;
    scene.validate(&obs.superpixels, &obs.k)?;
    let sp = &obs.superpixels;
    let k = &obs.k;
    let frames = obs.active_frames();
    Ok(EnergyBreakdown {
        psi1: psi1(scene, sp, &obs.sparse_depth[REFERENCE_FRAME], k, wt.w1, wt.alpha1),
        psi2: psi2(scene, sp, &obs.sparse_depth, k, wt.w2, &obs.directions),
        psi3: psi3(scene, &obs.boundaries, k, wt.w3, wt.lambda),
        psi4: psi4(scene, &obs.boundaries, k, wt.alpha1, wt.alpha3),
        theta1: theta1(scene, sp, latents, k, wt.c1, &obs.directions),
        theta2: theta2(scene, sp, &obs.anchors, k, wt.c2, wt.alpha2, &obs.directions),
        theta3: theta3(kernel, latents, &obs.blurry, &frames, wt.c3)?,
        tv: tv(latents, &frames, wt.tv_weight),
        total: 0.0,
    }
    .summed())
}

/// The part of the objective that depends on the latent images:
/// θ¹ + θ³ + TV.
pub fn latent_objective(
    scene: &SceneState,
    latents: &[GrayImage],
    obs: &Observations,
    wt: &EnergyWeights,
    kernel: &BlurKernelMatrix,
) -> Result<f64> {
    check_latents(latents, obs)?;
    let frames = obs.active_frames();
    Ok(theta1(scene, &obs.superpixels, latents, &obs.k, wt.c1, &obs.directions)
        + theta3(kernel, latents, &obs.blurry, &frames, wt.c3)?
        + tv(latents, &frames, wt.tv_weight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ObjectMotion;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_k(w: usize, h: usize) -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0, w, h).unwrap()
    }

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap()
    }

    fn one_plane_scene(n: PlaneParam, count: usize, motion: ObjectMotion) -> SceneState {
        SceneState {
            planes: vec![n; count],
            labels: vec![0; count],
            objects: vec![motion],
        }
    }

    fn sparse_from(w: usize, h: usize, pts: &[(usize, f64)]) -> SparseDepthMap {
        let mut s = SparseDepthMap {
            width: w,
            height: h,
            depth: vec![0.0; w * h],
            mask: vec![false; w * h],
        };
        for &(i, d) in pts {
            s.depth[i] = d;
            s.mask[i] = true;
        }
        s
    }

    #[test]
    fn psi1_examples() {
        let k = k100();
        let sp = SuperpixelMap::grid(128, 96, 1, 1);
        let scene = one_plane_scene(PlaneParam::fronto_parallel(2.5), 1, ObjectMotion::identity());
        let d = sparse_from(128, 96, &[(5, 2.0), (700, 2.0), (9000, 2.0)]);
        assert!((psi1(&scene, &sp, &d, &k, 1.0, 0.3) - 1.5).abs() < 1e-12);
        let exact = sparse_from(128, 96, &[(5, 2.5), (700, 2.5)]);
        assert!(psi1(&scene, &sp, &exact, &k, 4.0, 0.3).abs() < 1e-12);
        let empty = sparse_from(128, 96, &[]);
        assert_eq!(psi1(&scene, &sp, &empty, &k, 4.0, 0.3), 0.0);
        let behind = one_plane_scene(PlaneParam::new(Vector3::zeros()), 1, ObjectMotion::identity());
        assert!((psi1(&behind, &sp, &d, &k, 2.0, 0.3) - 3.0 * 2.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn psi2_forward_translation() {
        let k = k100();
        let sp = SuperpixelMap::grid(128, 96, 1, 1);
        // X' = R·X − t, so t = (0, 0, −0.1) pushes the plane from 2 m to 2.1 m
        let o = RigidMotion::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, -0.1)).unwrap();
        let scene = one_plane_scene(PlaneParam::fronto_parallel(2.0), 1, ObjectMotion { prev: o, next: o });
        let pos = pixel_center(64, 48);
        let moved = k.project(&o.apply(&k.backproject(pos, 2.0))).unwrap();
        let idx = moved.y.floor() as usize * 128 + moved.x.floor() as usize;
        let m21 = sparse_from(128, 96, &[(idx, 2.1)]);
        let m23 = sparse_from(128, 96, &[(idx, 2.3)]);
        let p = &scene.planes[0];
        assert!(psi2_pixel(&k, p, &o, pos, &m21, 2.0).abs() < 1e-12);
        assert!((psi2_pixel(&k, p, &o, pos, &m23, 2.0) - 0.4).abs() < 1e-12);

        let static_scene = one_plane_scene(PlaneParam::fronto_parallel(2.0), 1, ObjectMotion::identity());
        let all: Vec<_> = (0..128 * 96).step_by(7).map(|i| (i, 2.0)).collect();
        let frames = vec![sparse_from(128, 96, &all); 3];
        assert!(psi2(&static_scene, &sp, &frames, &k, 2.0, &Direction::ALL) < 1e-12);
    }

    fn two_tile_scene(ni: PlaneParam, nj: PlaneParam, labels: [usize; 2]) -> (SceneState, SuperpixelMap, BoundarySet) {
        let sp = SuperpixelMap::grid(10, 10, 2, 1);
        let b = extract_boundaries(&sp);
        let scene = SceneState {
            planes: vec![ni, nj],
            labels: labels.to_vec(),
            objects: vec![ObjectMotion::identity(); 2],
        };
        (scene, sp, b)
    }

    #[test]
    fn psi3_examples() {
        let k = unit_k(10, 10);
        let n = PlaneParam::fronto_parallel(2.0);
        let (same, _, b) = two_tile_scene(n, n, [0, 0]);
        assert_eq!(psi3(&same, &b, &k, 1.0, 0.1), 0.0);
        let (agree, _, b) = two_tile_scene(n, n, [0, 1]);
        assert!((psi3(&agree, &b, &k, 1.5, 0.1) - 1.5).abs() < 1e-12);
        let (gap, _, b) = two_tile_scene(PlaneParam::fronto_parallel(3.0), n, [0, 1]);
        assert!((psi3(&gap, &b, &k, 1.0, 1.0) - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn psi3_decreases_with_gap() {
        let k = unit_k(10, 10);
        let mut prev = f64::INFINITY;
        for gap in [0.0, 0.2, 0.5, 1.0, 2.0, 4.0] {
            let (s, _, b) = two_tile_scene(PlaneParam::fronto_parallel(2.0 + gap), PlaneParam::fronto_parallel(2.0), [0, 1]);
            let v = psi3(&s, &b, &k, 1.0, 0.1);
            assert!(v < prev || gap == 0.0);
            prev = v;
        }
    }

    #[test]
    fn psi4_examples() {
        let k = unit_k(10, 10);
        let n = PlaneParam::fronto_parallel(2.0);
        let (same, _, b) = two_tile_scene(n, n, [0, 1]);
        assert_eq!(psi4(&same, &b, &k, 0.3, 0.3), 0.0);

        let scaled = PlaneParam::new(n.0 * 2.0);
        let (s, _, b) = two_tile_scene(n, scaled, [0, 0]);
        // depths 2 m and 1 m: every boundary pixel pays min(1, α₁)
        let expected = b.pairs[0].pixels.len() as f64 * 0.3;
        assert!((psi4(&s, &b, &k, 0.3, 0.3) - expected).abs() < 1e-12);
        assert!((psi4(&s, &b, &k, 5.0, 0.3) - b.pairs[0].pixels.len() as f64).abs() < 1e-12);

        // perpendicular normals crossing at equal depth along the boundary column
        let ni = PlaneParam::new(Vector3::new(0.0, 0.0, 0.5));
        let nj = PlaneParam::new(Vector3::new(0.0, 0.5, 0.0));
        assert_eq!(ni.abs_cosine(&nj), 0.0);
        let (s, _, b) = two_tile_scene(ni, nj, [0, 0]);
        let depth_only = psi4(&s, &b, &k, 0.3, 1e-300) - 1e-300;
        assert!((psi4(&s, &b, &k, 0.3, 0.3) - depth_only - 0.3).abs() < 1e-12);
        assert!((psi4(&s, &b, &k, 0.3, 2.0) - depth_only - 1.0).abs() < 1e-12);
    }

    fn shift_scene(k: &Intrinsics, count: usize, shift_px: f64) -> SceneState {
        // lateral translation giving a uniform horizontal shift at 2 m
        let t = Vector3::new(-shift_px * 2.0 / k.fx, 0.0, 0.0);
        let o = RigidMotion::new(nalgebra::Matrix3::identity(), t).unwrap();
        one_plane_scene(PlaneParam::fronto_parallel(2.0), count, ObjectMotion { prev: o, next: o })
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn theta1_examples() {
        let k = k100();
        let (w, h) = (128, 96);
        let sp = SuperpixelMap::grid(w, h, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, w, h);
        let ident = one_plane_scene(PlaneParam::fronto_parallel(2.0), 12, ObjectMotion::identity());
        let frames = vec![img.clone(), img.clone(), img.clone()];
        assert!(theta1(&ident, &sp, &frames, &k, 1.0, &Direction::ALL) < 1e-12);

        // target = reference moved +5 px, scene predicts the matching shift
        let shifted = GrayImage::from_fn(w, h, |c, r| if c >= 5 { img.get(c - 5, r) } else { 0.0 });
        let scene = shift_scene(&k, 12, 5.0);
        let frames = vec![shifted.clone(), img.clone(), shifted];
        assert!(theta1(&scene, &sp, &frames, &k, 1.0, &Direction::ALL) < 1e-9);

        let frames = vec![
            GrayImage::filled(w, h, 0.6),
            GrayImage::filled(w, h, 0.5),
            GrayImage::filled(w, h, 0.6),
        ];
        let v = theta1(&ident, &sp, &frames, &k, 1.0, &Direction::ALL);
        assert!((v - 2.0 * 0.1 * (w * h) as f64).abs() < 1e-6);
    }

    #[test]
    fn theta2_examples() {
        let k = k100();
        let sp = SuperpixelMap::grid(128, 96, 2, 2);
        let scene = shift_scene(&k, 4, 5.0);
        let a = |res: f64| AnchorSet {
            anchors: vec![Anchor {
                reference: Vector2::new(40.5, 30.5),
                target: Vector2::new(45.5 + res, 30.5),
                dir: Direction::Next,
            }],
        };
        assert!(theta2(&scene, &sp, &a(0.0), &k, 0.5, 5.0, &Direction::ALL) < 1e-9);
        assert!((theta2(&scene, &sp, &a(2.0), &k, 1.0, 5.0, &Direction::ALL) - 2.0).abs() < 1e-9);
        assert!((theta2(&scene, &sp, &a(9.0), &k, 1.0, 5.0, &Direction::ALL) - 5.0).abs() < 1e-12);
        assert_eq!(theta2(&scene, &sp, &AnchorSet::default(), &k, 1.0, 5.0, &Direction::ALL), 0.0);
    }

    #[test]
    fn theta3_examples() {
        let (w, h) = (12, 9);
        let id = BlurKernelMatrix::identity(w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b: Vec<_> = (0..3).map(|_| random_image(&mut rng, w, h)).collect();
        assert!(theta3(&id, &b, &b, &[0, 1, 2], 50.0).unwrap() < 1e-15);
        let lat: Vec<_> = b
            .iter()
            .map(|x| GrayImage::from_vec(w, h, x.data.iter().map(|v| v + 0.1).collect()).unwrap())
            .collect();
        let v = theta3(&id, &lat, &b, &[1], 1.0).unwrap();
        assert!((v - 0.01 * (w * h) as f64).abs() < 1e-9);
    }

    #[test]
    fn tv_examples() {
        let c = GrayImage::filled(8, 6, 0.4);
        assert_eq!(tv_image(&c), 0.0);
        let step = GrayImage::from_fn(8, 6, |col, _| if col >= 3 { 0.7 } else { 0.2 });
        assert!((tv_image(&step) - 0.5 * 6.0).abs() < 1e-12);
        assert!((tv_image(&step.scaled(3.0)) - 3.0 * tv_image(&step)).abs() < 1e-12);
    }

    #[test]
    fn report_lists_every_key() {
        let b = EnergyBreakdown {
            psi1: 1.0,
            tv: 0.5,
            ..Default::default()
        }
        .summed();
        let r = b.report();
        assert_eq!(r.lines().count(), 9);
        assert!(r.contains("total = 1.5"));
    }

    #[test]
    fn weights_validation() {
        assert!(EnergyWeights::default().validate().is_ok());
        assert!(EnergyWeights {
            alpha2: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EnergyWeights {
            w1: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EnergyWeights {
            p: 2.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn random_kernel(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BlurKernelMatrix {
        let mut f = FlowField::zeros(w, h);
        for u in f.flow.iter_mut() {
            *u = Vector2::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
        }
        build_blur_kernel(&f, &f.negated(), &ExposureModel::new(3, 0.5).unwrap()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn theta3_is_midpoint_convex(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (10, 8);
            let a = random_kernel(&mut rng, w, h);
            let b: Vec<_> = (0..3).map(|_| random_image(&mut rng, w, h)).collect();
            let i1: Vec<_> = (0..3).map(|_| random_image(&mut rng, w, h)).collect();
            let i2: Vec<_> = (0..3).map(|_| random_image(&mut rng, w, h)).collect();
            let mid: Vec<_> = i1.iter().zip(&i2).map(|(x, y)| {
                GrayImage::from_vec(w, h, x.data.iter().zip(&y.data).map(|(p, q)| 0.5 * (p + q)).collect()).unwrap()
            }).collect();
            let f = |l: &[GrayImage]| theta3(&a, l, &b, &[0, 1, 2], 3.0).unwrap();
            prop_assert!(f(&mid) <= 0.5 * (f(&i1) + f(&i2)) + 1e-9);
        }

        #[test]
        fn pair_terms_are_symmetric_and_nonnegative(
            a in prop::array::uniform3(-0.2f64..0.6),
            b in prop::array::uniform3(-0.2f64..0.6),
        ) {
            let k = unit_k(10, 10);
            let ni = PlaneParam::new(Vector3::from(a));
            let nj = PlaneParam::new(Vector3::from(b));
            let (s1, _, bs) = two_tile_scene(ni, nj, [0, 1]);
            let (s2, _, _) = two_tile_scene(nj, ni, [1, 0]);
            let p3 = psi3(&s1, &bs, &k, 1.0, 0.1);
            let p4 = psi4(&s1, &bs, &k, 0.3, 0.3);
            prop_assert!(p3 >= 0.0 && p4 >= 0.0);
            prop_assert!((p3 - psi3(&s2, &bs, &k, 1.0, 0.1)).abs() < 1e-12);
            prop_assert!((p4 - psi4(&s2, &bs, &k, 0.3, 0.3)).abs() < 1e-12);
        }
    }
}
