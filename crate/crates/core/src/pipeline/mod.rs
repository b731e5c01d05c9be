//! End-to-end pipeline: configuration, synthetic data, metrics and the
//! alternating joint solver.

pub mod config;
pub mod metrics;
pub mod output;
pub mod synth;

use nalgebra::Vector2;

use crate::blur::build_blur_kernel;
use crate::deblur::{deblur_color, deblur_sequence, DualState, LatentProblem};
use crate::energy::{scene_kernel, total_energy, Anchor, AnchorSet, EnergyBreakdown, Observations};
use crate::error::{Error, Result, StageExt};
use crate::imaging::{ColorImage, DenseDepthMap, FlowField, GrayImage};
use crate::scene::{Direction, ObjectMotion, SceneState, REFERENCE_FRAME};
use crate::sceneflow::{
    build_label_sets, detect_and_match, init_depth_fill, ransac_motions, region_plane, scene_step, LabelSet, MotionHypothesis,
};
use crate::superpixels::{slic_segment_traced, SuperpixelMap};

pub use config::PipelineConfig;
pub use metrics::{evaluate, EvalTarget, IterationRecord, MetricsReport, RunReport};
pub use synth::{load_dataset, save_dataset, synth_generate, Dataset, GroundTruth, SequenceInputs, SyntheticSceneSpec};

/// Shared anchors between two hypotheses needed to pair a previous-frame
/// motion with a next-frame motion.
const MIN_PAIRING_OVERLAP: usize = 3;

/// Relative energy gain below which repeated scene moves stop.
const SCENE_ROUND_TOL: f64 = 1e-4;

/// State after initialization, before the first outer iteration.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub obs: Observations,
    pub scene: SceneState,
    pub label_sets: LabelSet,
    /// Blurry luminance, the starting point of the latent frames.
    pub latents: Vec<GrayImage>,
    /// Per-frame dense depth from the sparse fill.
    pub filled_depth: Vec<DenseDepthMap>,
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub scene: SceneState,
    pub superpixels: SuperpixelMap,
    /// Reference-frame depth rendered from the final scene.
    pub depth: DenseDepthMap,
    /// Restored luminance, indexed by frame.
    pub latents: Vec<GrayImage>,
    /// Restored color frames when color restoration is enabled.
    pub restored_color: Option<Vec<ColorImage>>,
    pub report: RunReport,
    pub final_energy: EnergyBreakdown,
}

impl JointOutput {
    pub fn flow(&self, k: &crate::geometry::Intrinsics, dir: Direction) -> FlowField {
        self.scene.flow_field(&self.superpixels, k, dir)
    }
}

fn directions(config: &PipelineConfig) -> Vec<Direction> {
    if config.two_frame {
        vec![Direction::Next]
    } else {
        Direction::ALL.to_vec()
    }
}

fn match_anchors(lum: &[GrayImage], dir: Direction, config: &PipelineConfig) -> Vec<Anchor> {
    detect_and_match(&lum[REFERENCE_FRAME], &lum[dir.target_frame()], &config.matching)
        .into_iter()
        .map(|(reference, target)| Anchor { reference, target, dir })
        .collect()
}

fn anchor_set(per_dir: &[(Direction, Vec<Anchor>)]) -> AnchorSet {
    let mut set = AnchorSet::default();
    for (_, a) in per_dir {
        set.anchors.extend(a.iter().copied());
    }
    set
}

/// Previous-frame motion for each next-frame hypothesis: the previous-frame
/// hypothesis sharing the most reference anchors, or the constant-velocity
/// inverse.
fn pair_motions(next: &[MotionHypothesis], next_anchors: &[Anchor], prev: Option<(&[MotionHypothesis], &[Anchor])>) -> Vec<ObjectMotion> {
    next.iter()
        .map(|hn| {
            let refs: Vec<Vector2<f64>> = hn.inliers.iter().map(|&i| next_anchors[i].reference).collect();
            let best = prev.and_then(|(hyps, anchors)| {
                hyps.iter()
                    .map(|hp| {
                        let shared = hp.inliers.iter().filter(|&&i| refs.contains(&anchors[i].reference)).count();
                        (shared, hp.motion)
                    })
                    .filter(|&(shared, _)| shared >= MIN_PAIRING_OVERLAP)
                    .max_by_key(|&(shared, _)| shared)
            });
            match best {
                Some((_, prev)) => ObjectMotion { prev, next: hn.motion },
                None => ObjectMotion::constant_velocity(hn.motion),
            }
        })
        .collect()
}

/// Hypotheses backed by at least one anchor; the unsupported identity
/// candidate survives only when nothing else does.
fn supported_motions(hyps: Vec<MotionHypothesis>) -> Vec<MotionHypothesis> {
    if hyps.iter().any(|h| !h.inliers.is_empty()) {
        hyps.into_iter().filter(|h| !h.inliers.is_empty()).collect()
    } else {
        hyps
    }
}

/// Object with the most inlier anchors inside each superpixel; object 0 where
/// no anchor falls.
fn preferred_objects(sp: &SuperpixelMap, hyps: &[MotionHypothesis], anchors: &[Anchor]) -> Vec<usize> {
    let mut votes = vec![vec![0usize; hyps.len()]; sp.count];
    for (o, h) in hyps.iter().enumerate() {
        for &i in &h.inliers {
            let s = crate::energy::superpixel_at(sp, anchors[i].reference);
            votes[s][o] += 1;
        }
    }
    votes
        .iter()
        .map(|v| {
            let (best, &count) = v
                .iter()
                .enumerate()
                .max_by_key(|&(o, &c)| (c, std::cmp::Reverse(o)))
                .expect("at least one object");
            if count > 0 {
                best
            } else {
                0
            }
        })
        .collect()
}

/// Superpixels, depth fill, plane fits, anchors, motions and label sets.
pub fn initialize(inputs: &SequenceInputs, config: &PipelineConfig) -> Result<Initialization> {
    config.validate()?;
    let k = inputs.k;
    if inputs.blurry.len() != 3 || inputs.sparse.len() != 3 {
        return Err(Error::InvalidParameter("a sequence needs three frames".into()));
    }
    let lum: Vec<GrayImage> = inputs.blurry.iter().map(ColorImage::luminance).collect();
    let sp = slic_segment_traced(&inputs.blurry[REFERENCE_FRAME], &config.slic_params())
        .stage("superpixels")?
        .map;

    let filled_depth = inputs
        .sparse
        .iter()
        .map(|s| init_depth_fill(s, config.fill_beta))
        .collect::<Result<Vec<_>>>()
        .stage("depth-fill")?;
    let planes = (0..sp.count)
        .map(|i| region_plane(&sp.regions[i], sp.centroids[i], &filled_depth[REFERENCE_FRAME], &k))
        .collect::<Result<Vec<_>>>()
        .stage("plane-fit")?;

    let dirs = directions(config);
    let anchors: Vec<(Direction, Vec<Anchor>)> = dirs.iter().map(|&d| (d, match_anchors(&lum, d, config))).collect();
    let ransac = config.ransac_params();
    let hyps = anchors
        .iter()
        .map(|(d, a)| ransac_motions(a, &filled_depth[REFERENCE_FRAME], &filled_depth[d.target_frame()], &k, &ransac))
        .collect::<Result<Vec<_>>>()
        .stage("motion")?;
    let hyps: Vec<Vec<MotionHypothesis>> = hyps.into_iter().map(supported_motions).collect();
    let slot = |d: Direction| dirs.iter().position(|&x| x == d);
    let (next_hyps, next_anchors) = match slot(Direction::Next) {
        Some(i) => (&hyps[i], &anchors[i].1),
        None => unreachable!("the next frame is always active"),
    };
    let prev = slot(Direction::Prev).map(|i| (hyps[i].as_slice(), anchors[i].1.as_slice()));
    let objects = pair_motions(next_hyps, next_anchors, prev);
    let preferred = preferred_objects(&sp, next_hyps, next_anchors);

    let mut obs = Observations::new(k, sp, inputs.sparse.clone(), lum.clone(), anchor_set(&anchors), inputs.exposure)?;
    obs.directions = dirs;
    let sp = &obs.superpixels;
    let label_sets = build_label_sets(sp, &obs.boundaries, &planes, objects.len(), &preferred, &k, config.label_max).stage("labels")?;
    let scene = SceneState {
        planes,
        labels: preferred,
        objects,
    };
    scene.validate(sp, &k).stage("labels")?;
    Ok(Initialization {
        obs,
        scene,
        label_sets,
        latents: lum,
        filled_depth,
    })
}

fn score(
    scene: &SceneState,
    latents: &[GrayImage],
    obs: &Observations,
    truth: Option<&GroundTruth>,
    config: &PipelineConfig,
) -> Result<Option<MetricsReport>> {
    let Some(gt) = truth else { return Ok(None) };
    let depth = scene.depth_map(&obs.superpixels, &obs.k);
    let flow = scene.flow_field(&obs.superpixels, &obs.k, Direction::Next);
    let latent = gt.latents[REFERENCE_FRAME].luminance();
    let target = EvalTarget {
        depth: &gt.depth,
        flow: gt.flow(Direction::Next),
        latent: &latent,
    };
    evaluate(&depth, &flow, &latents[REFERENCE_FRAME], target, config.baseline, obs.k.fx).map(Some)
}

/// Which half-steps the outer loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Steps {
    /// Scene step then image step.
    Joint,
    /// Scene step only; latents stay at the blurry input.
    SceneOnly,
}

/// The full alternation: initialization, then `outer_iterations` scene and
/// image steps. Reported energies are `total_energy` of the emitted states.
pub fn run_joint(dataset: &Dataset, config: &PipelineConfig) -> Result<JointOutput> {
    run_with(dataset, config, Steps::Joint)
}

pub fn run_with(dataset: &Dataset, config: &PipelineConfig, steps: Steps) -> Result<JointOutput> {
    let init = initialize(&dataset.inputs, config)?;
    run_from(init, dataset, config, steps)
}

/// The outer loop from a given initialization.
pub fn run_from(init: Initialization, dataset: &Dataset, config: &PipelineConfig, steps: Steps) -> Result<JointOutput> {
    let truth = dataset.truth.as_ref();
    let Initialization {
        obs,
        mut scene,
        label_sets,
        mut latents,
        ..
    } = init;
    let wt = &config.weights;
    let initial = total_energy(&scene, &latents, &obs, wt).stage("energy")?;
    let mut report = RunReport {
        initial_energy: initial.total,
        iterations: vec![IterationRecord {
            iteration: 0,
            energy_after_scene: initial.total,
            energy_after_image: initial.total,
            metrics: score(&scene, &latents, &obs, truth, config).stage("metrics")?,
        }],
    };
    let mut duals: Option<DualState> = None;
    let mut energy = initial;
    for it in 1..=config.outer_iterations {
        for _ in 0..config.scene_rounds {
            let step = scene_step(&scene, &label_sets, &latents, &obs, wt, &config.trws, config.label_max).stage("scene-step")?;
            let gain = energy.total - step.energy.total;
            scene = step.scene;
            energy = step.energy;
            if !step.accepted || gain <= SCENE_ROUND_TOL * energy.total.abs() {
                break;
            }
        }
        let after_scene = energy.total;
        if steps == Steps::Joint {
            let kernel = scene_kernel(&scene, &obs).stage("blur-kernel")?;
            let problem = LatentProblem::from_scene(&scene, &obs, wt, &kernel);
            let out = deblur_sequence(&problem, &latents, &config.deblur, duals.take()).stage("image-step")?;
            latents = out.latents;
            duals = Some(out.duals);
            energy = total_energy(&scene, &latents, &obs, wt).stage("energy")?;
        }
        report.iterations.push(IterationRecord {
            iteration: it,
            energy_after_scene: after_scene,
            energy_after_image: energy.total,
            metrics: score(&scene, &latents, &obs, truth, config).stage("metrics")?,
        });
    }
    let restored_color = if config.restore_color && steps == Steps::Joint {
        let kernel = scene_kernel(&scene, &obs).stage("blur-kernel")?;
        let problem = LatentProblem::from_scene(&scene, &obs, wt, &kernel);
        Some(deblur_color(&problem, &dataset.inputs.blurry, &dataset.inputs.blurry, &config.deblur).stage("color")?)
    } else {
        None
    };
    Ok(JointOutput {
        depth: scene.depth_map(&obs.superpixels, &obs.k),
        superpixels: obs.superpixels,
        scene,
        latents,
        restored_color,
        report,
        final_energy: energy,
    })
}

/// Image step alone with the kernel and warps taken from given reference
/// flows `[to previous, to next]`. Without a previous flow the backward blur
/// mirrors the forward one and only the next frame is coupled.
pub fn deblur_from_flows(blurry: &[ColorImage], flows: [Option<&FlowField>; 2], config: &PipelineConfig) -> Result<Vec<ColorImage>> {
    let fwd = flows[1].ok_or_else(|| Error::InvalidParameter("the reference-to-next flow is required".into()))?;
    let bwd = match flows[0] {
        Some(f) => f.clone(),
        None => fwd.negated(),
    };
    let kernel = build_blur_kernel(fwd, &bwd, &config.exposure).stage("blur-kernel")?;
    let lum: Vec<GrayImage> = blurry.iter().map(ColorImage::luminance).collect();
    let problem = LatentProblem::from_flows(flows, lum, &config.weights, &kernel)?;
    deblur_color(&problem, blurry, blurry, &config.deblur).stage("image-step")
}
