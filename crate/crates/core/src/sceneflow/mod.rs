//! The scene step: with latent images fixed, choose a (plane, object)
//! proposal per superpixel by TRW-S on the superpixel adjacency graph.

pub mod features;
pub mod fill;
pub mod ransac;
pub mod trws;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::blur::kernel_row;
use crate::energy::{
    psi1_pixel, psi2_pixel, psi3_pair, psi4_pair, superpixel_at, theta1_pixel, theta2_anchor, total_energy, tv, EnergyBreakdown,
    EnergyWeights, Observations,
};
use crate::error::{Error, Result};
use crate::geometry::{homography_from_plane_motion, pixel_center, Homography, PlaneParam};
use crate::imaging::GrayImage;
use crate::scene::{Direction, SceneState, REFERENCE_FRAME};
use crate::superpixels::{BoundarySet, SuperpixelMap};

pub use features::{detect_and_match, MatchParams};
pub use fill::{fit_plane, init_depth_fill, region_plane};
pub use ransac::{ransac_motions, MotionHypothesis, RansacParams};
pub use trws::{trws_optimize, PairwiseCrf, TrwsOptions, TrwsResult};

/// A joint plane and motion hypothesis for one superpixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub plane: PlaneParam,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    pub proposals: Vec<Vec<Proposal>>,
}

/// Depth factors of the perturbation proposals, in insertion order.
pub const PERTURBATION_FACTORS: [f64; 4] = [0.95, 1.05, 0.9, 1.1];

/// Neighbors of `i` sorted by decreasing shared boundary length.
fn neighbors_by_boundary(boundaries: &BoundarySet, i: usize) -> Vec<usize> {
    let mut n: Vec<(usize, usize)> = boundaries.adjacency[i]
        .iter()
        .map(|&j| (j, boundaries.pairs[boundaries.pair_index(i, j).expect("adjacent")].pixels.len()))
        .collect();
    n.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    n.into_iter().map(|(j, _)| j).collect()
}

fn push_unique(list: &mut Vec<Proposal>, p: Proposal, sp: &SuperpixelMap, i: usize, k: &crate::geometry::Intrinsics) {
    let [cx, cy] = sp.centroids[i];
    if p.plane.is_finite() && p.plane.is_valid_at(k, Vector2::new(cx, cy)) && !list.contains(&p) {
        list.push(p);
    }
}

/// Per superpixel: own plane × every object, the planes of up to four
/// neighbors × the preferred object, then depth perturbations of the own
/// plane × the preferred object; truncated to `l_max`.
pub fn build_label_sets(
    sp: &SuperpixelMap,
    boundaries: &BoundarySet,
    planes: &[PlaneParam],
    object_count: usize,
    preferred: &[usize],
    k: &crate::geometry::Intrinsics,
    l_max: usize,
) -> Result<LabelSet> {
    if object_count == 0 {
        return Err(Error::InvalidParameter("at least one motion is required".into()));
    }
    if l_max == 0 {
        return Err(Error::InvalidParameter("label set size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(sp.count);
    for i in 0..sp.count {
        let own = planes[i];
        let pref = preferred[i];
        let mut list = Vec::new();
        for o in 0..object_count {
            push_unique(&mut list, Proposal { plane: own, object: o }, sp, i, k);
        }
        for j in neighbors_by_boundary(boundaries, i).into_iter().take(4) {
            push_unique(
                &mut list,
                Proposal {
                    plane: planes[j],
                    object: pref,
                },
                sp,
                i,
                k,
            );
        }
        for f in PERTURBATION_FACTORS {
            push_unique(
                &mut list,
                Proposal {
                    plane: own.scaled_depth(f),
                    object: pref,
                },
                sp,
                i,
                k,
            );
        }
        list.truncate(l_max);
        if list.is_empty() {
            return Err(Error::Degenerate(format!("superpixel {i} has no valid proposal")));
        }
        out.push(list);
    }
    Ok(LabelSet { proposals: out })
}

/// Candidates for one scene step: the current assignment first, then the
/// standing label set, perturbations of the current plane, then neighbors'
/// current planes.
pub fn step_candidates(scene: &SceneState, sets: &LabelSet, obs: &Observations, l_max: usize) -> LabelSet {
    let sp = &obs.superpixels;
    let proposals = (0..sp.count)
        .map(|i| {
            let mut list = vec![Proposal {
                plane: scene.planes[i],
                object: scene.labels[i],
            }];
            for p in &sets.proposals[i] {
                push_unique(&mut list, *p, sp, i, &obs.k);
            }
            list.truncate(l_max + 1);
            for f in PERTURBATION_FACTORS {
                push_unique(
                    &mut list,
                    Proposal {
                        plane: scene.planes[i].scaled_depth(f),
                        object: scene.labels[i],
                    },
                    sp,
                    i,
                    &obs.k,
                );
            }
            for j in neighbors_by_boundary(&obs.boundaries, i) {
                push_unique(
                    &mut list,
                    Proposal {
                        plane: scene.planes[j],
                        object: scene.labels[i],
                    },
                    sp,
                    i,
                    &obs.k,
                );
                push_unique(
                    &mut list,
                    Proposal {
                        plane: scene.planes[j],
                        object: scene.labels[j],
                    },
                    sp,
                    i,
                    &obs.k,
                );
            }
            list
        })
        .collect();
    LabelSet { proposals }
}

/// Homographies of a proposal toward each direction (`None` when singular).
fn proposal_homs(p: &Proposal, scene: &SceneState, obs: &Observations) -> [Option<Homography>; 2] {
    Direction::ALL.map(|d| homography_from_plane_motion(&obs.k, &p.plane, scene.objects[p.object].get(d)).ok())
}

fn dir_slot(d: Direction) -> usize {
    match d {
        Direction::Prev => 0,
        Direction::Next => 1,
    }
}

/// Kernel flows at `pos` as the energy module derives them from flow fields.
fn kernel_flows(homs: &[Option<Homography>; 2], pos: Vector2<f64>, obs: &Observations) -> (Vector2<f64>, Vector2<f64>) {
    let flow = |d: Direction| match homs[dir_slot(d)].as_ref().map(|h| h.apply(pos)) {
        Some(Ok(q)) => q - pos,
        _ => Vector2::zeros(),
    };
    let fwd_dir = if obs.has(Direction::Next) {
        Direction::Next
    } else {
        Direction::Prev
    };
    let fwd = flow(fwd_dir);
    let bwd = if obs.has(Direction::Prev) && obs.has(Direction::Next) {
        flow(Direction::Prev)
    } else {
        -fwd
    };
    (fwd, bwd)
}

/// The scene-step CRF: its energy plus the TV of the latents equals the
/// total objective for every labeling.
pub struct SceneCrf {
    pub crf: PairwiseCrf,
    pub candidates: LabelSet,
}

impl SceneCrf {
    pub fn scene_for(&self, base: &SceneState, labels: &[usize]) -> SceneState {
        let mut s = base.clone();
        for (i, &l) in labels.iter().enumerate() {
            let p = self.candidates.proposals[i][l];
            s.planes[i] = p.plane;
            s.labels[i] = p.object;
        }
        s
    }
}

pub fn build_scene_crf(
    scene: &SceneState,
    candidates: LabelSet,
    latents: &[GrayImage],
    obs: &Observations,
    wt: &EnergyWeights,
) -> Result<SceneCrf> {
    let sp = &obs.superpixels;
    let k = &obs.k;
    let (w, h) = (sp.width, sp.height);
    let frames = obs.active_frames();
    if latents.len() != 3 {
        return Err(Error::InvalidParameter("expected 3 latent frames".into()));
    }
    // position of each pixel inside its region
    let mut slot = vec![0usize; w * h];
    for region in &sp.regions {
        for (p, &px) in region.iter().enumerate() {
            slot[px] = p;
        }
    }
    let mut anchors_by_sp: Vec<Vec<usize>> = vec![Vec::new(); sp.count];
    for (a_idx, a) in obs.anchors.anchors.iter().enumerate() {
        if obs.has(a.dir) {
            anchors_by_sp[superpixel_at(sp, a.reference)].push(a_idx);
        }
    }
    let sparse_ref = &obs.sparse_depth[REFERENCE_FRAME];
    let reference = &latents[REFERENCE_FRAME];

    // per (superpixel, label): unary and blur residuals over the region for each active frame
    type Eval = (f64, Vec<Vec<f64>>);
    let evals: Vec<Vec<Eval>> = (0..sp.count)
        .into_par_iter()
        .map(|i| {
            let region = &sp.regions[i];
            candidates.proposals[i]
                .iter()
                .map(|p| {
                    let homs = proposal_homs(p, scene, obs);
                    let mut unary = 0.0;
                    let mut resid = vec![vec![0.0; region.len()]; frames.len()];
                    for (q, &px) in region.iter().enumerate() {
                        let pos = pixel_center(px % w, px / w);
                        if sparse_ref.mask[px] {
                            unary += psi1_pixel(k, &p.plane, pos, sparse_ref.depth[px], wt.w1, wt.alpha1);
                        }
                        for &d in &obs.directions {
                            let motion = scene.objects[p.object].get(d);
                            unary += psi2_pixel(k, &p.plane, motion, pos, &obs.sparse_depth[d.target_frame()], wt.w2);
                            unary += theta1_pixel(
                                homs[dir_slot(d)].as_ref(),
                                pos,
                                reference.data[px],
                                &latents[d.target_frame()],
                                wt.c1,
                            );
                        }
                        let (fwd, bwd) = kernel_flows(&homs, pos, obs);
                        let row = kernel_row(w, h, px, fwd, bwd, &obs.exposure);
                        for (f, &m) in frames.iter().enumerate() {
                            let lat = &latents[m].data;
                            let mut a = 0.0;
                            for &(c, v) in &row {
                                a += v * lat[c as usize];
                            }
                            resid[f][q] = a - obs.blurry[m].data[px];
                        }
                    }
                    for &ai in &anchors_by_sp[i] {
                        let a = &obs.anchors.anchors[ai];
                        unary += theta2_anchor(homs[dir_slot(a.dir)].as_ref(), a, wt.c2, wt.alpha2);
                    }
                    // blur term restricted to pixel pairs inside the region
                    let mut blur = 0.0;
                    for r in &resid {
                        for (q, &px) in region.iter().enumerate() {
                            let (c, row) = (px % w, px / w);
                            blur += r[q] * r[q];
                            if c + 1 < w && sp.labels[px + 1] == i {
                                blur += (r[slot[px + 1]] - r[q]).powi(2);
                            }
                            if row + 1 < h && sp.labels[px + w] == i {
                                blur += (r[slot[px + w]] - r[q]).powi(2);
                            }
                        }
                    }
                    unary += wt.c3 * blur;
                    (unary, resid)
                })
                .collect()
        })
        .collect();

    let unary: Vec<Vec<f64>> = evals.iter().map(|e| e.iter().map(|x| x.0).collect()).collect();
    let mut crf = PairwiseCrf::new(unary);

    let edges: Vec<(usize, usize, Vec<f64>)> = obs
        .boundaries
        .pairs
        .par_iter()
        .map(|pair| {
            let (i, j) = (pair.i, pair.j);
            let (li, lj) = (&candidates.proposals[i], &candidates.proposals[j]);
            // pixel pairs straddling the boundary, as (pixel in i, pixel in j)
            let mut cross = Vec::new();
            for &px in &pair.pixels {
                if sp.labels[px] != i {
                    continue;
                }
                let (c, r) = (px % w, px / w);
                let mut nb = Vec::with_capacity(4);
                if c + 1 < w {
                    nb.push(px + 1);
                }
                if c > 0 {
                    nb.push(px - 1);
                }
                if r + 1 < h {
                    nb.push(px + w);
                }
                if r > 0 {
                    nb.push(px - w);
                }
                for q in nb {
                    if sp.labels[q] == j {
                        cross.push((slot[px], slot[q]));
                    }
                }
            }
            let mut cost = vec![0.0; li.len() * lj.len()];
            for (a, pa) in li.iter().enumerate() {
                for (b, pb) in lj.iter().enumerate() {
                    let mut v = psi4_pair(k, &pa.plane, &pb.plane, &pair.pixels, wt.alpha1, wt.alpha3);
                    if pa.object != pb.object {
                        v += psi3_pair(k, &pa.plane, &pb.plane, &pair.pixels, wt.w3, wt.lambda);
                    }
                    let (ri, rj) = (&evals[i][a].1, &evals[j][b].1);
                    let mut blur = 0.0;
                    for f in 0..ri.len() {
                        for &(qi, qj) in &cross {
                            blur += (rj[f][qj] - ri[f][qi]).powi(2);
                        }
                    }
                    cost[a * lj.len() + b] = v + wt.c3 * blur;
                }
            }
            (i, j, cost)
        })
        .collect();
    for (i, j, cost) in edges {
        crf.add_edge(i, j, cost);
    }
    Ok(SceneCrf { crf, candidates })
}

#[derive(Debug, Clone)]
pub struct SceneStepOutput {
    pub scene: SceneState,
    pub energy: EnergyBreakdown,
    pub trws: TrwsResult,
    /// Whether the TRW-S labeling replaced the incoming state.
    pub accepted: bool,
}

/// One scene step. The incoming assignment is label 0 of every candidate
/// list, so the result is never worse than the incoming state.
pub fn scene_step(
    scene: &SceneState,
    sets: &LabelSet,
    latents: &[GrayImage],
    obs: &Observations,
    wt: &EnergyWeights,
    opts: &TrwsOptions,
    l_max: usize,
) -> Result<SceneStepOutput> {
    let before = total_energy(scene, latents, obs, wt)?;
    let candidates = step_candidates(scene, sets, obs, l_max);
    let crf = build_scene_crf(scene, candidates, latents, obs, wt)?;
    let init = vec![0usize; obs.superpixels.count];
    let result = trws_optimize(&crf.crf, Some(&init), opts);
    let proposed = crf.scene_for(scene, &result.labels);
    let after = total_energy(&proposed, latents, obs, wt)?;
    let frames = obs.active_frames();
    debug_assert!({
        let expect = result.energy + tv(latents, &frames, wt.tv_weight);
        (expect - after.total).abs() <= 1e-7 * after.total.abs().max(1.0)
    });
    if after.total <= before.total {
        Ok(SceneStepOutput {
            scene: proposed,
            energy: after,
            trws: result,
            accepted: true,
        })
    } else {
        Ok(SceneStepOutput {
            scene: scene.clone(),
            energy: before,
            trws: result,
            accepted: false,
        })
    }
}
