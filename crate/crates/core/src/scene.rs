//! The discrete-continuous scene unknown: a plane and an object label per
//! superpixel, and a pair of rigid motions per object.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{homography_from_plane_motion, pixel_center, Homography, Intrinsics, PlaneParam, RigidMotion};
use crate::imaging::{DenseDepthMap, FlowField};
use crate::superpixels::SuperpixelMap;

/// Index of the reference (middle) frame.
pub const REFERENCE_FRAME: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Reference → frame 0.
    Prev,
    /// Reference → frame 2.
    Next,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Prev, Direction::Next];

    pub fn target_frame(self) -> usize {
        match self {
            Direction::Prev => 0,
            Direction::Next => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Prev => "prev",
            Direction::Next => "next",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectMotion {
    pub prev: RigidMotion,
    pub next: RigidMotion,
}

impl ObjectMotion {
    pub fn identity() -> Self {
        Self {
            prev: RigidMotion::identity(),
            next: RigidMotion::identity(),
        }
    }

    /// Constant-velocity pair: the previous frame sees the inverse motion.
    pub fn constant_velocity(next: RigidMotion) -> Self {
        Self {
            prev: next.inverse(),
            next,
        }
    }

    pub fn get(&self, dir: Direction) -> &RigidMotion {
        match dir {
            Direction::Prev => &self.prev,
            Direction::Next => &self.next,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub planes: Vec<PlaneParam>,
    /// Object index per superpixel.
    pub labels: Vec<usize>,
    pub objects: Vec<ObjectMotion>,
}

impl SceneState {
    pub fn validate(&self, sp: &SuperpixelMap, k: &Intrinsics) -> Result<()> {
        if self.planes.len() != sp.count || self.labels.len() != sp.count {
            return Err(Error::InvalidParameter(format!(
                "scene has {} planes / {} labels for {} superpixels",
                self.planes.len(),
                self.labels.len(),
                sp.count
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.objects.len()) {
            return Err(Error::InvalidParameter(format!(
                "object label {l} out of range ({} objects)",
                self.objects.len()
            )));
        }
        for (i, n) in self.planes.iter().enumerate() {
            let [cx, cy] = sp.centroids[i];
            if !n.is_finite() || !n.is_valid_at(k, Vector2::new(cx, cy)) {
                return Err(Error::InvalidDepth { x: cx, y: cy });
            }
        }
        Ok(())
    }

    pub fn motion(&self, superpixel: usize, dir: Direction) -> &RigidMotion {
        self.objects[self.labels[superpixel]].get(dir)
    }

    pub fn homography(&self, k: &Intrinsics, superpixel: usize, dir: Direction) -> Result<Homography> {
        homography_from_plane_motion(k, &self.planes[superpixel], self.motion(superpixel, dir))
    }

    pub fn homographies(&self, k: &Intrinsics, dir: Direction) -> Result<Vec<Homography>> {
        (0..self.planes.len()).map(|i| self.homography(k, i, dir)).collect()
    }

    /// Per-superpixel homographies; singular ones become `None`.
    pub fn homographies_lenient(&self, k: &Intrinsics, dir: Direction) -> Vec<Option<Homography>> {
        (0..self.planes.len()).map(|i| self.homography(k, i, dir).ok()).collect()
    }

    /// Dense flow toward `dir`; invalid where the warp is undefined.
    pub fn flow_field(&self, sp: &SuperpixelMap, k: &Intrinsics, dir: Direction) -> FlowField {
        let homs = self.homographies_lenient(k, dir);
        let (w, h) = (sp.width, sp.height);
        let mut f = FlowField::zeros(w, h);
        for i in 0..w * h {
            let pos = pixel_center(i % w, i / w);
            match homs[sp.labels[i]].as_ref().map(|hm| hm.apply(pos)) {
                Some(Ok(q)) => f.flow[i] = q - pos,
                _ => f.valid[i] = false,
            }
        }
        f
    }

    /// Depth rendered from the planes.
    pub fn depth_map(&self, sp: &SuperpixelMap, k: &Intrinsics) -> DenseDepthMap {
        let (w, h) = (sp.width, sp.height);
        let mut d = DenseDepthMap::new(w, h);
        for i in 0..w * h {
            if let Ok(z) = self.planes[sp.labels[i]].depth_at(k, pixel_center(i % w, i / w)) {
                d.depth[i] = z;
            }
        }
        d
    }
}
