//! Result directory layout: writing a run and reading a stored scene state
//! back for re-evaluation.

use std::path::Path;

use super::synth::{parse_scene, scene_text, SequenceInputs};
use super::{anchor_set, directions, match_anchors, JointOutput, PipelineConfig};
use crate::energy::Observations;
use crate::error::{Error, Result};
use crate::imaging::io::{
    read_color_png, read_label_png, read_text, write_color_png, write_depth_png, write_flow_png, write_label_png, write_text,
};
use crate::imaging::{ColorImage, GrayImage};
use crate::scene::{Direction, SceneState};
use crate::superpixels::SuperpixelMap;

/// File names inside a result directory.
pub mod layout {
    pub const DEPTH: &str = "depth_1.png";
    pub const SCENE: &str = "scene.cfg";
    pub const SUPERPIXELS: &str = "superpixels.png";
    pub const REPORT: &str = "report.txt";
    pub const METRICS: &str = "metrics.txt";
    pub const ENERGY: &str = "energy.txt";

    pub fn restored(m: usize) -> String {
        format!("restored_{m}.png")
    }
    pub fn flow(target: usize) -> String {
        format!("flow_1to{target}.png")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Restored frames as stored: the color restoration when present, otherwise
/// the gray latents.
pub fn restored_frames(out: &JointOutput) -> Vec<ColorImage> {
    match &out.restored_color {
        Some(c) => c.clone(),
        None => out.latents.iter().map(ColorImage::from_gray).collect(),
    }
}

/// Writes depth, flows, scene, segmentation, restored frames and reports.
pub fn save_result(out: &JointOutput, inputs: &SequenceInputs, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_depth_png(&dir.join(layout::DEPTH), &out.depth)?;
    for d in Direction::ALL {
        write_flow_png(&dir.join(layout::flow(d.target_frame())), &out.flow(&inputs.k, d))?;
    }
    let sp = &out.superpixels;
    write_label_png(&dir.join(layout::SUPERPIXELS), sp.width, sp.height, &sp.labels)?;
    write_text(&dir.join(layout::SCENE), &scene_text(&out.scene))?;
    for (m, img) in restored_frames(out).iter().enumerate() {
        write_color_png(&dir.join(layout::restored(m)), img)?;
    }
    write_text(&dir.join(layout::REPORT), &out.report.to_text())?;
    if let Some(m) = out.report.final_metrics() {
        write_text(&dir.join(layout::METRICS), &m.to_text())?;
    }
    write_text(&dir.join(layout::ENERGY), &out.final_energy.report())
}

/// A scene state with its segmentation and latent frames.
#[derive(Debug, Clone)]
pub struct StoredState {
    pub scene: SceneState,
    pub superpixels: SuperpixelMap,
    pub latents: Vec<GrayImage>,
}

/// Reads `scene.cfg`, `superpixels.png` and `restored_{0,1,2}.png` from a
/// result directory.
pub fn load_state(dir: &Path, k: &crate::geometry::Intrinsics) -> Result<StoredState> {
    let dims = Some((k.width, k.height));
    let (w, h, labels) = read_label_png(&dir.join(layout::SUPERPIXELS), dims)?;
    let superpixels = SuperpixelMap::from_labels(w, h, labels)?;
    let scene = parse_scene(&read_text(&dir.join(layout::SCENE))?)?;
    scene.validate(&superpixels, k)?;
    let latents = (0..3)
        .map(|m| read_color_png(&dir.join(layout::restored(m)), dims).map(|c| c.luminance()))
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredState {
        scene,
        superpixels,
        latents,
    })
}

/// Observations of a sequence over a given segmentation, with anchors matched
/// as in initialization.
pub fn observations(inputs: &SequenceInputs, superpixels: SuperpixelMap, config: &PipelineConfig) -> Result<Observations> {
    let lum: Vec<GrayImage> = inputs.blurry.iter().map(ColorImage::luminance).collect();
    let dirs = directions(config);
    let anchors: Vec<_> = dirs.iter().map(|&d| (d, match_anchors(&lum, d, config))).collect();
    let mut obs = Observations::new(
        inputs.k,
        superpixels,
        inputs.sparse.clone(),
        lum,
        anchor_set(&anchors),
        inputs.exposure,
    )?;
    obs.directions = dirs;
    Ok(obs)
}
