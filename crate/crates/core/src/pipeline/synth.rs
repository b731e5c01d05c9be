//! Synthetic three-frame sequences of textured planes under rigid motions,
//! with every ground-truth quantity the solver estimates.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blur::{synthesize_blurry, BlurSynthesis, ExposureModel};
use crate::error::{Error, Result};
use crate::geometry::{homography_from_plane_motion, pixel_center, Homography, Intrinsics, PlaneParam, RigidMotion};
use crate::imaging::io::{
    read_color_png, read_depth_png, read_flow_png, read_label_png, read_text, write_color_png, write_depth_png, write_flow_png,
    write_label_png, write_sparse_depth_png, write_text,
};
use crate::imaging::{ColorImage, DenseDepthMap, FlowField, GrayImage, SparseDepthMap};
use crate::pipeline::config::{KeyValues, KvWriter};
use crate::scene::{Direction, ObjectMotion, SceneState};
use crate::superpixels::SuperpixelMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Multi-octave value noise per color channel.
    Noise,
    /// Two-color checkerboard with a little value noise, `size` pixels per square.
    Checker { size: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layer {
    pub plane: PlaneParam,
    /// Reference-frame footprint `[x0, y0, x1, y1]`; `None` covers everything.
    pub rect: Option<[f64; 4]>,
    pub object: usize,
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurMode {
    Trajectory,
    FrameAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub k: Intrinsics,
    /// Reference-to-next motion of the static world.
    pub camera: RigidMotion,
    /// Independent reference-to-next motion of objects `1..`, applied before
    /// the camera motion. Object 0 is the static world.
    pub object_motions: Vec<RigidMotion>,
    /// Painter order is irrelevant: the nearest surface wins per pixel.
    pub layers: Vec<Layer>,
    pub downsample: usize,
    pub depth_noise: f64,
    pub blur: BlurMode,
    pub exposure: ExposureModel,
    /// Grid used to cut the ground-truth superpixels.
    pub gt_grid: (usize, usize),
}

impl SyntheticSceneSpec {
    pub fn object_count(&self) -> usize {
        self.object_motions.len() + 1
    }

    /// Total reference-to-next motion of every object.
    pub fn motions(&self) -> Vec<RigidMotion> {
        let mut out = vec![self.camera];
        out.extend(self.object_motions.iter().map(|o| self.camera.compose(o)));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        self.k.validate().map_err(|e| Error::SpecInvalid(e.to_string()))?;
        if ![1, 4, 8, 16].contains(&self.downsample) {
            return bad(format!("downsample must be 1, 4, 8 or 16, got {}", self.downsample));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return bad("depth noise must be >= 0".into());
        }
        if !self.layers.iter().any(|l| l.rect.is_none()) {
            return bad("one layer must cover the whole image".into());
        }
        if self.gt_grid.0 == 0 || self.gt_grid.1 == 0 {
            return bad("ground-truth grid must be nonempty".into());
        }
        let (w, h) = (self.k.width as f64, self.k.height as f64);
        for (i, l) in self.layers.iter().enumerate() {
            if l.object >= self.object_count() {
                return bad(format!("layer {i} uses unknown object {}", l.object));
            }
            let [x0, y0, x1, y1] = l.rect.unwrap_or([0.0, 0.0, w, h]);
            if !(x0 < x1 && y0 < y1) {
                return bad(format!("layer {i} has an empty footprint"));
            }
            for (x, y) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
                if !l.plane.is_valid_at(&self.k, Vector2::new(x, y)) {
                    return bad(format!("layer {i} has no positive depth at ({x}, {y})"));
                }
            }
        }
        Ok(())
    }
}

/// Observed inputs of one sequence, indexed by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInputs {
    pub k: Intrinsics,
    pub exposure: ExposureModel,
    pub blurry: Vec<ColorImage>,
    pub sparse: Vec<SparseDepthMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub latents: Vec<ColorImage>,
    /// Dense reference-frame depth.
    pub depth: DenseDepthMap,
    /// Reference-frame flows, indexed `[to previous, to next]`.
    pub flows: Vec<FlowField>,
    pub superpixels: SuperpixelMap,
    pub scene: SceneState,
}

impl GroundTruth {
    pub fn flow(&self, dir: Direction) -> &FlowField {
        match dir {
            Direction::Prev => &self.flows[0],
            Direction::Next => &self.flows[1],
        }
    }

    /// Object index of every reference pixel.
    pub fn object_map(&self) -> Vec<usize> {
        self.superpixels.labels.iter().map(|&s| self.scene.labels[s]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: SequenceInputs,
    pub truth: Option<GroundTruth>,
}

/// Per-layer texture sampled in reference-frame pixel coordinates.
struct TextureField {
    kind: Texture,
    /// Per octave and channel: lattice values, lattice stride and cell size.
    octaves: Vec<[Lattice; 3]>,
    colors: [[f64; 3]; 2],
}

struct Lattice {
    values: Vec<f64>,
    stride: usize,
    cell: f64,
}

const TEXTURE_MARGIN: f64 = 256.0;
const OCTAVE_CELLS: [f64; 3] = [14.0, 7.0, 3.5];
const OCTAVE_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

impl TextureField {
    fn new(kind: Texture, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        let extent = w.max(h) as f64 + 2.0 * TEXTURE_MARGIN;
        let octaves = OCTAVE_CELLS
            .iter()
            .map(|&cell| {
                let stride = (extent / cell).ceil() as usize + 2;
                let mut lattice = || Lattice {
                    values: (0..stride * stride).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    stride,
                    cell,
                };
                [lattice(), lattice(), lattice()]
            })
            .collect();
        let colors = [
            [rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45)],
            [rng.gen_range(0.55..0.85), rng.gen_range(0.55..0.85), rng.gen_range(0.55..0.85)],
        ];
        Self { kind, octaves, colors }
    }

    fn noise(&self, channel: usize, x: f64, y: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let mut v = 0.0;
        for (o, wgt) in self.octaves.iter().zip(OCTAVE_WEIGHTS) {
            let lat = &o[channel];
            let top = (lat.stride - 2) as f64;
            let gx = ((x + TEXTURE_MARGIN) / lat.cell).clamp(0.0, top);
            let gy = ((y + TEXTURE_MARGIN) / lat.cell).clamp(0.0, top);
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
            let at = |c: usize, r: usize| lat.values[r * lat.stride + c];
            let upper = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
            let lower = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
            v += wgt * (upper * (1.0 - fy) + lower * fy);
        }
        v
    }

    fn color(&self, pos: Vector2<f64>) -> [f64; 3] {
        let mut out = [0.0; 3];
        match self.kind {
            Texture::Noise => {
                for (c, o) in out.iter_mut().enumerate() {
                    let base = 0.5 * (self.colors[0][c] + self.colors[1][c]);
                    *o = base + 0.45 * self.noise(c, pos.x, pos.y);
                }
            }
            Texture::Checker { size } => {
                let parity = ((pos.x / size).floor() as i64 + (pos.y / size).floor() as i64).rem_euclid(2) as usize;
                for (c, o) in out.iter_mut().enumerate() {
                    *o = self.colors[parity][c] + 0.12 * self.noise(c, pos.x, pos.y);
                }
            }
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Reference-to-frame motion for frame offset `j` (frame 1 is the reference).
fn motion_to(next: &RigidMotion, offset: i32) -> RigidMotion {
    let step = if offset >= 0 { *next } else { next.inverse() };
    let mut m = RigidMotion::identity();
    for _ in 0..offset.unsigned_abs() {
        m = step.compose(&m);
    }
    m
}

/// Visible surface of one pixel: layer, reference-frame position, depth.
#[derive(Debug, Clone, Copy)]
struct Hit {
    layer: usize,
    reference: Vector2<f64>,
    depth: f64,
}

fn render_hits(spec: &SyntheticSceneSpec, offset: i32) -> Vec<Option<Hit>> {
    let k = &spec.k;
    let (w, h) = (k.width, k.height);
    let motions = spec.motions();
    let per_layer: Vec<Option<(Homography, RigidMotion)>> = spec
        .layers
        .iter()
        .map(|l| {
            let m = motion_to(&motions[l.object], offset);
            let hm = homography_from_plane_motion(k, &l.plane, &m).ok()?;
            let inv = hm.0.try_inverse()?;
            Some((Homography(inv), m))
        })
        .collect();
    (0..w * h)
        .map(|i| {
            let y = pixel_center(i % w, i / w);
            let mut best: Option<Hit> = None;
            for (li, l) in spec.layers.iter().enumerate() {
                let Some((inv, m)) = &per_layer[li] else { continue };
                let Ok(x) = inv.apply(y) else { continue };
                if let Some([x0, y0, x1, y1]) = l.rect {
                    if !(x.x >= x0 && x.x < x1 && x.y >= y0 && x.y < y1) {
                        continue;
                    }
                }
                let Ok(p) = l.plane.point_at(k, x) else { continue };
                let z = m.apply(&p).z;
                if z > 1e-6 && best.is_none_or(|b| z < b.depth) {
                    best = Some(Hit {
                        layer: li,
                        reference: x,
                        depth: z,
                    });
                }
            }
            best
        })
        .collect()
}

fn render_color(spec: &SyntheticSceneSpec, hits: &[Option<Hit>], textures: &[TextureField]) -> ColorImage {
    let w = spec.k.width;
    ColorImage::from_fn(w, spec.k.height, |c, r| match hits[r * w + c] {
        Some(hit) => textures[hit.layer].color(hit.reference),
        None => [0.0; 3],
    })
}

/// Flows of frame `offset` toward the neighboring frames, from exact 3D motion.
fn frame_flows(spec: &SyntheticSceneSpec, hits: &[Option<Hit>], offset: i32) -> (FlowField, FlowField) {
    let k = &spec.k;
    let (w, h) = (k.width, k.height);
    let motions = spec.motions();
    let mut fwd = FlowField::zeros(w, h);
    let mut bwd = FlowField::zeros(w, h);
    for i in 0..w * h {
        let Some(hit) = hits[i] else {
            fwd.valid[i] = false;
            bwd.valid[i] = false;
            continue;
        };
        let layer = &spec.layers[hit.layer];
        let y = pixel_center(i % w, i / w);
        let p = layer.plane.point_at(k, hit.reference).expect("hit lies on its plane");
        for (field, j) in [(&mut fwd, offset + 1), (&mut bwd, offset - 1)] {
            match k.project(&motion_to(&motions[layer.object], j).apply(&p)) {
                Some(q) => field.flow[i] = q - y,
                None => field.valid[i] = false,
            }
        }
    }
    (fwd, bwd)
}

/// Connected components of (grid cell, layer) in the reference frame.
fn gt_superpixels(spec: &SyntheticSceneSpec, hits: &[Option<Hit>]) -> Result<(SuperpixelMap, Vec<usize>)> {
    let (w, h) = (spec.k.width, spec.k.height);
    let (nx, ny) = spec.gt_grid;
    let key = |i: usize| {
        let (c, r) = (i % w, i / w);
        let cell = (r * ny / h) * nx + c * nx / w;
        (cell, hits[i].map_or(usize::MAX, |x| x.layer))
    };
    let mut labels = vec![usize::MAX; w * h];
    let mut layer_of = Vec::new();
    for start in 0..w * h {
        if labels[start] != usize::MAX {
            continue;
        }
        let id = layer_of.len();
        let k0 = key(start);
        layer_of.push(k0.1);
        labels[start] = id;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (c, r) = (i % w, i / w);
            let mut nb = Vec::with_capacity(4);
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < w {
                nb.push(i + 1);
            }
            if r > 0 {
                nb.push(i - w);
            }
            if r + 1 < h {
                nb.push(i + w);
            }
            for j in nb {
                if labels[j] == usize::MAX && key(j) == k0 {
                    labels[j] = id;
                    stack.push(j);
                }
            }
        }
    }
    if layer_of.contains(&usize::MAX) {
        return Err(Error::SpecInvalid("some reference pixels see no surface".into()));
    }
    Ok((SuperpixelMap::from_labels(w, h, labels)?, layer_of))
}

fn blur_color(latent: &ColorImage, mode: BlurSynthesis<'_>) -> Result<ColorImage> {
    latent.map_channels(|ch| synthesize_blurry(std::slice::from_ref(ch), mode))
}

fn average_color(frames: &[&ColorImage]) -> Result<ColorImage> {
    let chans: Result<Vec<GrayImage>> = (0..3)
        .map(|c| {
            let planes: Vec<GrayImage> = frames.iter().map(|f| f.channel(c)).collect();
            synthesize_blurry(&planes, BlurSynthesis::FrameAverage)
        })
        .collect();
    let chans = chans?;
    ColorImage::from_channels([&chans[0], &chans[1], &chans[2]])
}

/// Renders the sequence. Frames `-1` and `3` are rendered only for the
/// frame-average blur mode.
pub fn synth_generate(spec: &SyntheticSceneSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.k;
    let (w, h) = (k.width, k.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let textures: Vec<TextureField> = spec.layers.iter().map(|l| TextureField::new(l.texture, w, h, &mut rng)).collect();

    let offsets: Vec<i32> = match spec.blur {
        BlurMode::Trajectory => vec![-1, 0, 1],
        BlurMode::FrameAverage => vec![-2, -1, 0, 1, 2],
    };
    let hits: Vec<Vec<Option<Hit>>> = offsets.iter().map(|&o| render_hits(spec, o)).collect();
    let frames: Vec<ColorImage> = hits.iter().map(|hh| render_color(spec, hh, &textures)).collect();
    let base = offsets.iter().position(|&o| o == -1).expect("frame 0 rendered");

    let mut blurry = Vec::with_capacity(3);
    for m in 0..3 {
        let idx = base + m;
        let b = match spec.blur {
            BlurMode::Trajectory => {
                let (fwd, bwd) = frame_flows(spec, &hits[idx], offsets[idx]);
                blur_color(
                    &frames[idx],
                    BlurSynthesis::Trajectory {
                        flow_fwd: &fwd,
                        flow_bwd: &bwd,
                        exposure: spec.exposure,
                    },
                )?
            }
            BlurMode::FrameAverage => average_color(&[&frames[idx - 1], &frames[idx], &frames[idx + 1]])?,
        };
        blurry.push(b);
    }

    let normal = Normal::new(0.0, spec.depth_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let r = spec.downsample;
    let sparse: Vec<SparseDepthMap> = (0..3)
        .map(|m| {
            let hh = &hits[base + m];
            let mut s = SparseDepthMap {
                width: w,
                height: h,
                depth: vec![0.0; w * h],
                mask: vec![false; w * h],
            };
            for row in (0..h).step_by(r) {
                for col in (0..w).step_by(r) {
                    let i = row * w + col;
                    if let Some(hit) = hh[i] {
                        let noise = if spec.depth_noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                        s.depth[i] = (hit.depth + noise).max(0.05);
                        s.mask[i] = true;
                    }
                }
            }
            s
        })
        .collect();

    let ref_hits = &hits[base + 1];
    let mut depth = DenseDepthMap::new(w, h);
    for (i, hit) in ref_hits.iter().enumerate() {
        if let Some(hit) = hit {
            depth.depth[i] = hit.depth;
        }
    }
    let motions = spec.motions();
    let objects: Vec<ObjectMotion> = motions.iter().map(|m| ObjectMotion::constant_velocity(*m)).collect();
    let (superpixels, layer_of) = gt_superpixels(spec, ref_hits)?;
    let scene = SceneState {
        planes: layer_of.iter().map(|&l| spec.layers[l].plane).collect(),
        labels: layer_of.iter().map(|&l| spec.layers[l].object).collect(),
        objects,
    };
    let flows = Direction::ALL.iter().map(|&d| scene.flow_field(&superpixels, &k, d)).collect();

    Ok(Dataset {
        inputs: SequenceInputs {
            k,
            exposure: spec.exposure,
            blurry,
            sparse,
        },
        truth: Some(GroundTruth {
            latents: frames[base..base + 3].to_vec(),
            depth,
            flows,
            superpixels,
            scene,
        }),
    })
}

fn motion_floats(m: &RigidMotion) -> Vec<f64> {
    let mut v: Vec<f64> = m.rotation.transpose().iter().copied().collect();
    v.extend(m.translation.iter());
    v
}

fn motion_from_floats(v: &[f64]) -> Result<RigidMotion> {
    let r = Matrix3::from_row_slice(&v[..9]);
    RigidMotion::new(r, Vector3::new(v[9], v[10], v[11])).map_err(|e| Error::Config(e.to_string()))
}

pub fn camera_text(k: &Intrinsics, exposure: &ExposureModel) -> String {
    KvWriter::new()
        .put("width", k.width)
        .put("height", k.height)
        .put("fx", k.fx)
        .put("fy", k.fy)
        .put("cx", k.cx)
        .put("cy", k.cy)
        .put("exposure_n", exposure.n)
        .put("exposure_tau", exposure.tau)
        .finish()
}

pub fn parse_camera(text: &str) -> Result<(Intrinsics, ExposureModel)> {
    let kv = KeyValues::parse(text)?;
    let k = Intrinsics::new(
        kv.require("fx")?,
        kv.require("fy")?,
        kv.require("cx")?,
        kv.require("cy")?,
        kv.require("width")?,
        kv.require("height")?,
    )?;
    let exposure = ExposureModel::new(kv.require("exposure_n")?, kv.require("exposure_tau")?)?;
    kv.finish()?;
    Ok((k, exposure))
}

/// `key = value` form of a scene state: motions and per-superpixel planes and labels.
pub fn scene_text(scene: &SceneState) -> String {
    let mut out = KvWriter::new();
    out.put("objects", scene.objects.len());
    for (i, o) in scene.objects.iter().enumerate() {
        out.floats(&format!("object.{i}.next"), &motion_floats(&o.next));
        out.floats(&format!("object.{i}.prev"), &motion_floats(&o.prev));
    }
    out.put("superpixels", scene.planes.len());
    for (i, (p, l)) in scene.planes.iter().zip(&scene.labels).enumerate() {
        out.floats(&format!("plane.{i}"), p.0.as_slice());
        out.put(&format!("label.{i}"), l);
    }
    out.finish()
}

pub fn parse_scene(text: &str) -> Result<SceneState> {
    let kv = KeyValues::parse(text)?;
    let n_obj: usize = kv.require("objects")?;
    let mut objects = Vec::with_capacity(n_obj);
    for i in 0..n_obj {
        objects.push(ObjectMotion {
            next: motion_from_floats(&kv.require_floats(&format!("object.{i}.next"), 12)?)?,
            prev: motion_from_floats(&kv.require_floats(&format!("object.{i}.prev"), 12)?)?,
        });
    }
    let n_sp: usize = kv.require("superpixels")?;
    let mut planes = Vec::with_capacity(n_sp);
    let mut labels = Vec::with_capacity(n_sp);
    for i in 0..n_sp {
        let p = kv.require_floats(&format!("plane.{i}"), 3)?;
        planes.push(PlaneParam::new(Vector3::new(p[0], p[1], p[2])));
        let l: usize = kv.require(&format!("label.{i}"))?;
        if l >= n_obj {
            return Err(Error::Config(format!("label.{i} = {l} exceeds the object count")));
        }
        labels.push(l);
    }
    kv.finish()?;
    Ok(SceneState { planes, labels, objects })
}

/// File names of the dataset directory layout.
pub mod layout {
    pub const CAMERA: &str = "camera.cfg";
    pub const SCENE_GT: &str = "scene_gt.cfg";
    pub const SUPERPIXELS_GT: &str = "gt_superpixels.png";
    pub const DEPTH_GT: &str = "gt_depth_1.png";

    pub fn latent(m: usize) -> String {
        format!("latent_{m}.png")
    }
    pub fn blurry(m: usize) -> String {
        format!("blur_{m}.png")
    }
    pub fn sparse(m: usize) -> String {
        format!("sparse_{m}.png")
    }
    pub fn flow(target: usize) -> String {
        format!("gt_flow_1to{target}.png")
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let inp = &ds.inputs;
    write_text(&dir.join(layout::CAMERA), &camera_text(&inp.k, &inp.exposure))?;
    for m in 0..3 {
        write_color_png(&dir.join(layout::blurry(m)), &inp.blurry[m])?;
        write_sparse_depth_png(&dir.join(layout::sparse(m)), &inp.sparse[m])?;
    }
    if let Some(gt) = &ds.truth {
        for m in 0..3 {
            write_color_png(&dir.join(layout::latent(m)), &gt.latents[m])?;
        }
        write_depth_png(&dir.join(layout::DEPTH_GT), &gt.depth)?;
        for d in Direction::ALL {
            write_flow_png(&dir.join(layout::flow(d.target_frame())), gt.flow(d))?;
        }
        let sp = &gt.superpixels;
        write_label_png(&dir.join(layout::SUPERPIXELS_GT), sp.width, sp.height, &sp.labels)?;
        write_text(&dir.join(layout::SCENE_GT), &scene_text(&gt.scene))?;
    }
    Ok(())
}

/// Loads a dataset directory; ground truth is read when `scene_gt.cfg` exists.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (k, exposure) = parse_camera(&read_text(&dir.join(layout::CAMERA))?)?;
    let dims = Some((k.width, k.height));
    let mut blurry = Vec::new();
    let mut sparse = Vec::new();
    for m in 0..3 {
        blurry.push(read_color_png(&dir.join(layout::blurry(m)), dims)?);
        sparse.push(read_depth_png(&dir.join(layout::sparse(m)), dims)?);
    }
    let truth = if dir.join(layout::SCENE_GT).exists() {
        let latents = (0..3)
            .map(|m| read_color_png(&dir.join(layout::latent(m)), dims))
            .collect::<Result<Vec<_>>>()?;
        let depth = read_depth_png(&dir.join(layout::DEPTH_GT), dims)?.to_dense();
        let flows = Direction::ALL
            .iter()
            .map(|d| read_flow_png(&dir.join(layout::flow(d.target_frame())), dims))
            .collect::<Result<Vec<_>>>()?;
        let (w, h, labels) = read_label_png(&dir.join(layout::SUPERPIXELS_GT), dims)?;
        let superpixels = SuperpixelMap::from_labels(w, h, labels)?;
        let scene = parse_scene(&read_text(&dir.join(layout::SCENE_GT))?)?;
        scene.validate(&superpixels, &k)?;
        Some(GroundTruth {
            latents,
            depth,
            flows,
            superpixels,
            scene,
        })
    } else {
        None
    };
    Ok(Dataset {
        inputs: SequenceInputs {
            k,
            exposure,
            blurry,
            sparse,
        },
        truth,
    })
}

fn layer_text(out: &mut KvWriter, i: usize, l: &Layer) {
    out.floats(&format!("layer.{i}.plane"), l.plane.0.as_slice());
    if let Some(r) = l.rect {
        out.floats(&format!("layer.{i}.rect"), &r);
    }
    out.put(&format!("layer.{i}.object"), l.object);
    match l.texture {
        Texture::Noise => out.put(&format!("layer.{i}.texture"), "noise"),
        Texture::Checker { size } => out.put(&format!("layer.{i}.texture"), format!("checker {size}")),
    };
}

pub fn spec_text(spec: &SyntheticSceneSpec) -> String {
    let mut out = KvWriter::new();
    out.put("width", spec.k.width)
        .put("height", spec.k.height)
        .put("fx", spec.k.fx)
        .put("fy", spec.k.fy)
        .put("cx", spec.k.cx)
        .put("cy", spec.k.cy)
        .floats("camera", &motion_floats(&spec.camera))
        .put("objects", spec.object_motions.len());
    for (i, m) in spec.object_motions.iter().enumerate() {
        out.floats(&format!("object.{}", i + 1), &motion_floats(m));
    }
    out.put("layers", spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        layer_text(&mut out, i, l);
    }
    out.put("downsample", spec.downsample)
        .put("depth_noise", spec.depth_noise)
        .put(
            "blur",
            match spec.blur {
                BlurMode::Trajectory => "trajectory",
                BlurMode::FrameAverage => "frame_average",
            },
        )
        .put("exposure_n", spec.exposure.n)
        .put("exposure_tau", spec.exposure.tau)
        .put("gt_grid", format!("{} {}", spec.gt_grid.0, spec.gt_grid.1));
    out.finish()
}

/// Parses a spec. Motions may be given as 12 numbers (row-major rotation
/// then translation) or 6 (axis-angle then translation).
pub fn parse_spec(text: &str) -> Result<SyntheticSceneSpec> {
    let kv = KeyValues::parse(text).map_err(|e| Error::SpecInvalid(e.to_string()))?;
    let inner = || -> Result<SyntheticSceneSpec> {
        let k = Intrinsics::new(
            kv.require("fx")?,
            kv.require("fy")?,
            kv.require("cx")?,
            kv.require("cy")?,
            kv.require("width")?,
            kv.require("height")?,
        )?;
        let motion = |key: &str| -> Result<RigidMotion> {
            let raw = kv.raw(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
            let v: Vec<f64> = raw
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("invalid motion `{raw}` for `{key}`")))?;
            match v.len() {
                12 => motion_from_floats(&v),
                6 => Ok(RigidMotion::from_axis_angle(
                    Vector3::new(v[0], v[1], v[2]),
                    Vector3::new(v[3], v[4], v[5]),
                )),
                _ => Err(Error::Config(format!("`{key}` needs 6 or 12 numbers"))),
            }
        };
        let camera = motion("camera")?;
        let n_obj: usize = kv.get("objects")?.unwrap_or(0);
        let object_motions = (1..=n_obj).map(|i| motion(&format!("object.{i}"))).collect::<Result<Vec<_>>>()?;
        let n_layers: usize = kv.require("layers")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = kv.require_floats(&format!("layer.{i}.plane"), 3)?;
            let rect = kv.floats(&format!("layer.{i}.rect"), 4)?.map(|r| [r[0], r[1], r[2], r[3]]);
            let object = kv.get(&format!("layer.{i}.object"))?.unwrap_or(0);
            let tex_key = format!("layer.{i}.texture");
            let texture = match kv
                .raw(&tex_key)
                .unwrap_or("noise")
                .split_whitespace()
                .collect::<Vec<_>>()
                .as_slice()
            {
                ["noise"] => Texture::Noise,
                ["checker", s] => Texture::Checker {
                    size: s.parse().map_err(|_| Error::Config(format!("invalid `{tex_key}`")))?,
                },
                _ => return Err(Error::Config(format!("invalid `{tex_key}`"))),
            };
            layers.push(Layer {
                plane: PlaneParam::new(Vector3::new(p[0], p[1], p[2])),
                rect,
                object,
                texture,
            });
        }
        let blur = match kv.raw("blur").unwrap_or("trajectory") {
            "trajectory" => BlurMode::Trajectory,
            "frame_average" => BlurMode::FrameAverage,
            other => return Err(Error::Config(format!("unknown blur mode `{other}`"))),
        };
        let grid = kv.floats("gt_grid", 2)?.unwrap_or(vec![10.0, 8.0]);
        let spec = SyntheticSceneSpec {
            k,
            camera,
            object_motions,
            layers,
            downsample: kv.get("downsample")?.unwrap_or(4),
            depth_noise: kv.get("depth_noise")?.unwrap_or(0.0),
            blur,
            exposure: ExposureModel::new(kv.get("exposure_n")?.unwrap_or(20), kv.get("exposure_tau")?.unwrap_or(0.23))?,
            gt_grid: (grid[0] as usize, grid[1] as usize),
        };
        kv.finish()?;
        Ok(spec)
    };
    let spec = inner().map_err(|e| match e {
        Error::SpecInvalid(_) => e,
        other => Error::SpecInvalid(other.to_string()),
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Plane with depth `z` at the principal point and inverse-depth gradients
/// `gx`, `gy` per pixel.
fn slanted(k: &Intrinsics, z: f64, gx: f64, gy: f64) -> PlaneParam {
    PlaneParam::new(Vector3::new(gx * k.fx, gy * k.fy, 1.0 / z))
}

fn suite_intrinsics() -> Intrinsics {
    Intrinsics::new(200.0, 200.0, 80.0, 64.0, 160, 128).expect("valid intrinsics")
}

/// The frozen 128×160 evaluation suite: a slanted background and three
/// foreground boxes under camera motion, trajectory blur, N = 20, τ = 0.23,
/// r = 4, σ = 0.02 m. Index `i` in `0..5`.
pub fn standard_scene(i: usize) -> SyntheticSceneSpec {
    let k = suite_intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
    let background = slanted(&k, rng.gen_range(5.5..7.0), rng.gen_range(-2e-4..2e-4), rng.gen_range(2e-4..5e-4));
    let mut layers = vec![Layer {
        plane: background,
        rect: None,
        object: 0,
        texture: Texture::Noise,
    }];
    let slots = [(10.0, 15.0), (60.0, 55.0), (105.0, 12.0)];
    for (j, &(x, y)) in slots.iter().enumerate() {
        let x0 = x + rng.gen_range(-5.0..5.0);
        let y0 = y + rng.gen_range(-5.0..5.0);
        let (bw, bh) = (rng.gen_range(38.0..50.0), rng.gen_range(40.0..56.0));
        let z = rng.gen_range(2.4..3.6);
        layers.push(Layer {
            plane: slanted(&k, z, rng.gen_range(-3e-4..3e-4), rng.gen_range(-3e-4..3e-4)),
            rect: Some([x0, y0, (x0 + bw).min(160.0), (y0 + bh).min(128.0)]),
            object: 0,
            texture: if j == 1 {
                Texture::Checker {
                    size: rng.gen_range(6.0..9.0),
                }
            } else {
                Texture::Noise
            },
        });
    }
    let camera = RigidMotion::from_axis_angle(
        Vector3::new(
            rng.gen_range(-0.004..0.004),
            rng.gen_range(-0.008..0.008),
            rng.gen_range(-0.004..0.004),
        ),
        Vector3::new(
            rng.gen_range(0.2..0.3) * if i % 2 == 0 { 1.0 } else { -1.0 },
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.1..0.1),
        ),
    );
    SyntheticSceneSpec {
        k,
        camera,
        object_motions: Vec::new(),
        layers,
        downsample: 4,
        depth_noise: 0.02,
        blur: BlurMode::Trajectory,
        exposure: ExposureModel::default(),
        gt_grid: (10, 8),
    }
}

pub const STANDARD_SUITE_SIZE: usize = 5;

/// The first standard scene plus one independently moving box in front.
pub fn two_motion_scene() -> SyntheticSceneSpec {
    let mut spec = standard_scene(0);
    let k = spec.k;
    spec.layers.push(Layer {
        plane: slanted(&k, 2.2, 1e-4, -1e-4),
        rect: Some([8.0, 70.0, 60.0, 124.0]),
        object: 1,
        texture: Texture::Noise,
    });
    spec.object_motions = vec![RigidMotion::from_axis_angle(
        Vector3::new(0.0, 0.0, 0.02),
        Vector3::new(-0.35, 0.08, 0.0),
    )];
    spec
}

/// A motionless single slanted plane without depth noise.
pub fn static_scene() -> SyntheticSceneSpec {
    let mut spec = standard_scene(0);
    spec.layers.truncate(1);
    spec.camera = RigidMotion::identity();
    spec.depth_noise = 0.0;
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_spec(camera: RigidMotion, z: f64, f: f64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            k: Intrinsics::new(f, f, 32.0, 24.0, 64, 48).unwrap(),
            camera,
            object_motions: Vec::new(),
            layers: vec![Layer {
                plane: PlaneParam::fronto_parallel(z),
                rect: None,
                object: 0,
                texture: Texture::Noise,
            }],
            downsample: 4,
            depth_noise: 0.0,
            blur: BlurMode::Trajectory,
            exposure: ExposureModel::default(),
            gt_grid: (4, 3),
        }
    }

    #[test]
    fn static_scene_is_sharp_with_zero_flow() {
        let ds = synth_generate(&plane_spec(RigidMotion::identity(), 2.0, 100.0), 1).unwrap();
        let gt = ds.truth.unwrap();
        for m in 0..3 {
            let (b, l) = (&ds.inputs.blurry[m].data, &gt.latents[m].data);
            assert!(b.iter().zip(l).all(|(x, y)| (0..3).all(|c| (x[c] - y[c]).abs() < 1e-12)));
        }
        for f in &gt.flows {
            assert!(f.flow.iter().all(|u| u.norm() < 1e-12));
        }
    }

    #[test]
    fn lateral_camera_gives_uniform_flow() {
        let cam = RigidMotion::from_axis_angle(Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0));
        let ds = synth_generate(&plane_spec(cam, 2.0, 100.0), 1).unwrap();
        let gt = ds.truth.unwrap();
        for u in &gt.flow(Direction::Next).flow {
            assert!((u - Vector2::new(-5.0, 0.0)).norm() < 1e-9, "{u:?}");
        }
        for u in &gt.flow(Direction::Prev).flow {
            assert!((u - Vector2::new(5.0, 0.0)).norm() < 1e-9, "{u:?}");
        }
        // frame 2 shows reference content shifted left by 5 px
        let (l1, l2) = (&gt.latents[1], &gt.latents[2]);
        for r in 0..48 {
            for c in 0..50 {
                assert!((l2.get(c, r)[0] - l1.get(c + 5, r)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_count_matches_downsampling() {
        for r in [1, 4, 8, 16] {
            let mut spec = plane_spec(RigidMotion::identity(), 3.0, 80.0);
            spec.downsample = r;
            let ds = synth_generate(&spec, 2).unwrap();
            let expect = 64usize.div_ceil(r) * 48usize.div_ceil(r);
            assert!(ds.inputs.sparse.iter().all(|s| s.count() == expect));
        }
    }

    #[test]
    fn noise_has_requested_spread() {
        let mut spec = plane_spec(RigidMotion::identity(), 3.0, 80.0);
        spec.downsample = 1;
        spec.depth_noise = 0.05;
        let ds = synth_generate(&spec, 3).unwrap();
        let s = &ds.inputs.sparse[1];
        let errs: Vec<f64> = s.measured().map(|(_, d)| d - 3.0).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64).sqrt();
        assert!(mean.abs() < 0.005 && (sd - 0.05).abs() < 0.005, "{mean} {sd}");
    }

    #[test]
    fn ground_truth_scene_reproduces_depth_and_flow() {
        let ds = synth_generate(&two_motion_scene(), 4).unwrap();
        let gt = ds.truth.as_ref().unwrap();
        let k = &ds.inputs.k;
        let rendered = gt.scene.depth_map(&gt.superpixels, k);
        for i in 0..rendered.depth.len() {
            assert!((rendered.depth[i] - gt.depth.depth[i]).abs() < 1e-9);
        }
        assert!(gt.superpixels.is_connected());
        assert_eq!(gt.scene.objects.len(), 2);
        assert!(gt.object_map().iter().any(|&o| o == 1));
    }

    #[test]
    fn reference_blur_matches_scene_kernel() {
        let ds = synth_generate(&standard_scene(1), 5).unwrap();
        let gt = ds.truth.as_ref().unwrap();
        let (fwd, bwd) = (gt.flow(Direction::Next), gt.flow(Direction::Prev));
        let kernel = crate::blur::build_blur_kernel(fwd, bwd, &ds.inputs.exposure).unwrap();
        let want = kernel.apply(&gt.latents[1].luminance()).unwrap();
        let got = ds.inputs.blurry[1].luminance();
        assert!(want.data.iter().zip(&got.data).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let spec = standard_scene(2);
        let a = synth_generate(&spec, 9).unwrap();
        assert_eq!(a, synth_generate(&spec, 9).unwrap());
        assert_eq!(parse_spec(&spec_text(&spec)).unwrap(), spec);
        let gt = a.truth.as_ref().unwrap();
        assert_eq!(parse_scene(&scene_text(&gt.scene)).unwrap(), gt.scene);
    }

    #[test]
    fn frame_average_mode() {
        let mut spec = standard_scene(3);
        spec.blur = BlurMode::FrameAverage;
        let ds = synth_generate(&spec, 1).unwrap();
        assert_eq!(ds.inputs.blurry.len(), 3);
        assert_ne!(ds.inputs.blurry[1], ds.truth.unwrap().latents[1]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = standard_scene(0);
        spec.downsample = 3;
        assert!(matches!(synth_generate(&spec, 0), Err(Error::SpecInvalid(_))));
        let mut spec = standard_scene(0);
        spec.layers[0].rect = Some([0.0, 0.0, 10.0, 10.0]);
        assert!(matches!(synth_generate(&spec, 0), Err(Error::SpecInvalid(_))));
        assert!(matches!(parse_spec("width = 3"), Err(Error::SpecInvalid(_))));
    }
}
