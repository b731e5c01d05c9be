//! Sequential RANSAC over 3D-3D anchor correspondences.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::energy::Anchor;
use crate::error::{Error, Result};
use crate::geometry::{rigid_from_3d_correspondences, Intrinsics, RigidMotion};
use crate::imaging::DenseDepthMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// Reprojection inlier threshold (pixels).
    pub threshold: f64,
    /// Relative tolerance between the moved depth and the target depth.
    pub depth_tolerance: f64,
    pub min_inliers: usize,
    pub max_motions: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            threshold: 1.5,
            depth_tolerance: 0.1,
            min_inliers: 12,
            max_motions: 5,
            seed: 0,
        }
    }
}

/// A motion hypothesis and the anchor indices supporting it.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionHypothesis {
    pub motion: RigidMotion,
    pub inliers: Vec<usize>,
}

/// Motions closer than this to the identity count as the identity.
pub const IDENTITY_ROTATION_TOL: f64 = 1e-3;
pub const IDENTITY_TRANSLATION_TOL: f64 = 1e-3;

fn depth_at(depth: &DenseDepthMap, pos: Vector2<f64>) -> Option<f64> {
    let c = pos.x.floor();
    let r = pos.y.floor();
    if c < 0.0 || r < 0.0 || c >= depth.width as f64 || r >= depth.height as f64 {
        return None;
    }
    depth.get(c as usize, r as usize)
}

fn reprojection_error(k: &Intrinsics, m: &RigidMotion, src: &Vector3<f64>, target: Vector2<f64>) -> f64 {
    match k.project(&m.apply(src)) {
        Some(q) => (q - target).norm(),
        None => f64::INFINITY,
    }
}

/// Greedy sequential RANSAC. Anchors are lifted to 3D with the reference and
/// target depth maps. An inlier must reproject within `threshold` and land
/// at the target depth within `depth_tolerance`; the identity is appended
/// unless already present.
pub fn ransac_motions(
    anchors: &[Anchor],
    depth_ref: &DenseDepthMap,
    depth_target: &DenseDepthMap,
    k: &Intrinsics,
    params: &RansacParams,
) -> Result<Vec<MotionHypothesis>> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut ids = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        if let (Some(d0), Some(d1)) = (depth_at(depth_ref, a.reference), depth_at(depth_target, a.target)) {
            src.push(k.backproject(a.reference, d0));
            dst.push(k.backproject(a.target, d1));
            ids.push(i);
        }
    }
    if src.len() < 3 {
        return Err(Error::InsufficientAnchors(src.len()));
    }

    let mut remaining: Vec<usize> = (0..src.len()).collect();
    let mut out: Vec<MotionHypothesis> = Vec::new();
    let mut round = 0u64;
    while out.len() < params.max_motions && remaining.len() >= 3 {
        let needed = if out.is_empty() { 3 } else { params.min_inliers.max(3) };
        if remaining.len() < needed {
            break;
        }
        let score = |m: &RigidMotion| -> Vec<usize> {
            remaining
                .iter()
                .copied()
                .filter(|&j| {
                    let moved = m.apply(&src[j]);
                    (moved.z - dst[j].z).abs() <= params.depth_tolerance * dst[j].z
                        && reprojection_error(k, m, &src[j], anchors[ids[j]].target) < params.threshold
                })
                .collect()
        };
        let best = (0..params.iterations)
            .into_par_iter()
            .filter_map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                rng.set_stream(round * params.iterations as u64 + trial as u64);
                let pick = sample(&mut rng, remaining.len(), 3);
                let s: Vec<_> = pick.iter().map(|p| src[remaining[p]]).collect();
                let d: Vec<_> = pick.iter().map(|p| dst[remaining[p]]).collect();
                let m = rigid_from_3d_correspondences(&s, &d).ok()?;
                Some((score(&m).len(), trial, m))
            })
            // most inliers, then the earliest trial
            .reduce_with(|a, b| {
                if (b.0, std::cmp::Reverse(b.1)) > (a.0, std::cmp::Reverse(a.1)) {
                    b
                } else {
                    a
                }
            });
        round += 1;
        let Some((count, _, m)) = best else { break };
        if count < needed {
            break;
        }
        // refit on the consensus set, keep the refit only if it does not lose support
        let inl = score(&m);
        let s: Vec<_> = inl.iter().map(|&j| src[j]).collect();
        let d: Vec<_> = inl.iter().map(|&j| dst[j]).collect();
        let (motion, inl) = match rigid_from_3d_correspondences(&s, &d) {
            Ok(refit) => {
                let r_inl = score(&refit);
                if r_inl.len() >= inl.len() {
                    (refit, r_inl)
                } else {
                    (m, inl)
                }
            }
            Err(_) => (m, inl),
        };
        // polish by reprojection error, which does not depend on target depth
        let (mut motion, mut inl) = (motion, inl);
        for _ in 0..REFINE_ROUNDS {
            let s: Vec<_> = inl.iter().map(|&j| src[j]).collect();
            let t: Vec<_> = inl.iter().map(|&j| anchors[ids[j]].target).collect();
            let refined = refine_reprojection(k, &motion, &s, &t);
            let r_inl = score(&refined);
            if r_inl.len() < inl.len() {
                break;
            }
            motion = refined;
            inl = r_inl;
        }
        remaining.retain(|j| !inl.contains(j));
        out.push(MotionHypothesis {
            motion,
            inliers: inl.iter().map(|&j| ids[j]).collect(),
        });
    }

    if !out.iter().any(|h| is_near_identity(&h.motion)) {
        out.push(MotionHypothesis {
            motion: RigidMotion::identity(),
            inliers: Vec::new(),
        });
    }
    Ok(out)
}

const REFINE_ROUNDS: usize = 2;
const REFINE_ITERATIONS: usize = 20;

fn reprojection_cost(k: &Intrinsics, m: &RigidMotion, src: &[Vector3<f64>], targets: &[Vector2<f64>]) -> f64 {
    src.iter().zip(targets).map(|(p, &t)| reprojection_error(k, m, p, t).powi(2)).sum()
}

/// Levenberg-Marquardt on `Σ‖π(R·X − t) − y‖²` with left-multiplied
/// rotation updates. Returns the input when no step lowers the cost.
pub fn refine_reprojection(k: &Intrinsics, m: &RigidMotion, src: &[Vector3<f64>], targets: &[Vector2<f64>]) -> RigidMotion {
    let mut best = *m;
    let mut cost = reprojection_cost(k, &best, src, targets);
    if src.len() < 3 || !cost.is_finite() {
        return best;
    }
    let mut lambda = 1e-3;
    for _ in 0..REFINE_ITERATIONS {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (p, &y) in src.iter().zip(targets) {
            let rp = best.rotation * p;
            let q = rp - best.translation;
            if q.z <= 0.0 {
                continue;
            }
            let r = Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy) - y;
            let dproj = Matrix2x3::new(
                k.fx / q.z,
                0.0,
                -k.fx * q.x / (q.z * q.z),
                0.0,
                k.fy / q.z,
                -k.fy * q.y / (q.z * q.z),
            );
            // dq/dω = −[R·X]ₓ, dq/dδt = −I
            let dq_dw = -rp.cross_matrix();
            let mut j = nalgebra::Matrix2x6::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * dq_dw));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-dproj));
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut improved = false;
        while lambda < 1e8 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-9);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else { break };
            let w = Vector3::new(step[0], step[1], step[2]);
            let cand = RigidMotion {
                rotation: Rotation3::new(w).into_inner() * best.rotation,
                translation: best.translation + Vector3::new(step[3], step[4], step[5]),
            };
            let c = reprojection_cost(k, &cand, src, targets);
            if c < cost {
                best = cand;
                cost = c;
                lambda = (lambda * 0.3).max(1e-9);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    // re-orthonormalize accumulated rotation updates
    let svd = Matrix3::svd(best.rotation, true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    best.rotation = u * v_t;
    best
}

pub fn is_near_identity(m: &RigidMotion) -> bool {
    let (angle, trans) = m.distance(&RigidMotion::identity());
    angle < IDENTITY_ROTATION_TOL && trans < IDENTITY_TRANSLATION_TOL
}
