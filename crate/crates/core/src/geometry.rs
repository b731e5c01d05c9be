//! Pinhole camera, plane and rigid-motion parameterizations, and the
//! plane-induced homographies, depths and flows they generate.
//!
//! Pixel positions are continuous: the center of pixel `(col, row)` sits at
//! `(col + 0.5, row + 0.5)`. A rigid motion maps a reference-camera point to
//! the target camera as `X' = R·X − t`, which is the convention under which
//! `H = K(R − t·nᵀ)K⁻¹` transfers points on the plane `nᵀX = 1`.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3, SVD};

use crate::error::{Error, Result};

/// Smallest admissible `nᵀK⁻¹x̃` (1/m) before a plane counts as through or behind the camera.
pub const EPS_DEPTH: f64 = 1e-6;
/// Smallest admissible `|det H|`.
pub const EPS_DET: f64 = 1e-12;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Viewing ray `K⁻¹x̃` for a continuous pixel position (z component is 1).
    pub fn ray(&self, pos: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pos.x - self.cx) / self.fx, (pos.y - self.cy) / self.fy, 1.0)
    }

    pub fn backproject(&self, pos: Vector2<f64>, depth: f64) -> Vector3<f64> {
        self.ray(pos) * depth
    }

    /// Perspective projection; `None` when the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Continuous position of the center of pixel `(col, row)`.
#[inline]
pub fn pixel_center(col: usize, row: usize) -> Vector2<f64> {
    Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
}

/// Plane `nᵀX = 1`, `n` in 1/m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneParam(pub Vector3<f64>);

impl PlaneParam {
    pub fn new(n: Vector3<f64>) -> Self {
        PlaneParam(n)
    }

    /// Plane parallel to the image at `depth` meters.
    pub fn fronto_parallel(depth: f64) -> Self {
        PlaneParam(Vector3::new(0.0, 0.0, 1.0 / depth))
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Depth along the viewing ray of `pos`, `1/(nᵀK⁻¹x̃)`.
    pub fn depth_at(&self, k: &Intrinsics, pos: Vector2<f64>) -> Result<f64> {
        let inv = self.0.dot(&k.ray(pos));
        if inv > EPS_DEPTH && inv.is_finite() {
            Ok(1.0 / inv)
        } else {
            Err(Error::InvalidDepth { x: pos.x, y: pos.y })
        }
    }

    pub fn is_valid_at(&self, k: &Intrinsics, pos: Vector2<f64>) -> bool {
        self.depth_at(k, pos).is_ok()
    }

    /// 3D point where the ray through `pos` meets the plane.
    pub fn point_at(&self, k: &Intrinsics, pos: Vector2<f64>) -> Result<Vector3<f64>> {
        Ok(k.backproject(pos, self.depth_at(k, pos)?))
    }

    /// `|n_iᵀn_j| / (‖n_i‖‖n_j‖)`, 0 if either normal vanishes.
    pub fn abs_cosine(&self, other: &PlaneParam) -> f64 {
        let d = self.0.norm() * other.0.norm();
        if d <= 0.0 {
            0.0
        } else {
            (self.0.dot(&other.0).abs() / d).min(1.0)
        }
    }

    pub fn scaled_depth(&self, factor: f64) -> Self {
        PlaneParam(self.0 / factor)
    }
}

/// Plane-to-pixel depth at pixel center `(col,row)`.
pub fn plane_depth_at(k: &Intrinsics, n: &PlaneParam, pos: Vector2<f64>) -> Result<f64> {
    n.depth_at(k, pos)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidMotion {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(orth <= ROTATION_TOL && (det - 1.0).abs() <= ROTATION_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "not a rotation (|RᵀR − I| = {orth:e}, det = {det})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p - self.translation
    }

    pub fn inverse(&self) -> Self {
        // X = Rᵀ(X' + t) = RᵀX' − (−Rᵀt)
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` after `first`: `X ↦ self(first(X))`.
    pub fn compose(&self, first: &RigidMotion) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Angle of `R_aᵀR_b` and `‖t_a − t_b‖`.
    pub fn distance(&self, other: &RigidMotion) -> (f64, f64) {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        (c.acos(), (self.translation - other.translation).norm())
    }

    pub fn rotation_residual(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Maps a continuous pixel position; fails when the image point lands behind the camera.
    pub fn apply(&self, pos: Vector2<f64>) -> Result<Vector2<f64>> {
        let h = &self.0;
        let w = h[(2, 0)] * pos.x + h[(2, 1)] * pos.y + h[(2, 2)];
        if !(w > 0.0) {
            return Err(Error::BehindCamera);
        }
        Ok(Vector2::new(
            (h[(0, 0)] * pos.x + h[(0, 1)] * pos.y + h[(0, 2)]) / w,
            (h[(1, 0)] * pos.x + h[(1, 1)] * pos.y + h[(1, 2)]) / w,
        ))
    }
}

/// `H = K(R − t·nᵀ)K⁻¹`.
pub fn homography_from_plane_motion(k: &Intrinsics, n: &PlaneParam, o: &RigidMotion) -> Result<Homography> {
    let h = k.matrix() * (o.rotation - o.translation * n.0.transpose()) * k.inverse_matrix();
    let det = h.determinant();
    if !(det.abs() > EPS_DET) {
        return Err(Error::NonInvertible(det.abs()));
    }
    Ok(Homography(h))
}

/// `π(Hx̃) − x`.
pub fn flow_from_homography(h: &Homography, pos: Vector2<f64>) -> Result<Vector2<f64>> {
    Ok(h.apply(pos)? - pos)
}

/// Least-squares `(R, t)` with `dst ≈ R·src − t` (Kabsch with reflection guard).
pub fn rigid_from_3d_correspondences(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidMotion> {
    if src.len() != dst.len() {
        return Err(Error::InvalidParameter(format!(
            "correspondence lists differ in length ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("{} correspondences, need 3", src.len())));
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;

    let mut scatter = Matrix3::zeros();
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let a = s - cs;
        let b = d - cd;
        scatter += a * a.transpose();
        cov += b * a.transpose();
    }
    // Collinear (or coincident) source points leave rotation about the line free.
    let sv = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("source points are collinear".into()));
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD failed".into())),
    };
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * fix * v_t;
    // dst = R src + t'  →  t = −t'
    let translation = rotation * cs - cd;
    Ok(RigidMotion { rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_k() -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0, 10, 10).unwrap()
    }

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap()
    }

    #[test]
    fn identity_motion_gives_identity_homography() {
        let h = homography_from_plane_motion(&unit_k(), &PlaneParam::new(Vector3::new(0.0, 0.0, 0.5)), &RigidMotion::identity()).unwrap();
        assert_eq!(h.0, Matrix3::identity());
    }

    #[test]
    fn forward_translation_scales_w() {
        let o = RigidMotion::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.1)).unwrap();
        let h = homography_from_plane_motion(&unit_k(), &PlaneParam::new(Vector3::new(0.0, 0.0, 1.0)), &o).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.9));
        assert!((h.0 - expected).abs().max() < 1e-15);
    }

    #[test]
    fn lateral_translation_is_uniform_shift() {
        let k = k100();
        let n = PlaneParam::new(Vector3::new(0.0, 0.0, 0.5));
        let o = RigidMotion::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let h = homography_from_plane_motion(&k, &n, &o).unwrap();
        let expected = Matrix3::new(1.0, 0.0, -5.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((h.0 - expected).abs().max() < 1e-12);

        // project-transform-reproject on sampled plane points
        for &(c, r) in &[(0usize, 0usize), (10, 40), (127, 95), (64, 48)] {
            let x = pixel_center(c, r);
            let p = n.point_at(&k, x).unwrap();
            let q = k.project(&o.apply(&p)).unwrap();
            assert!((q - x - Vector2::new(-5.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn plane_depth_examples() {
        let k = unit_k();
        let n = PlaneParam::new(Vector3::new(0.0, 0.0, 0.5));
        assert_eq!(n.depth_at(&k, Vector2::new(3.0, 7.0)).unwrap(), 2.0);
        assert!(matches!(
            PlaneParam::new(Vector3::zeros()).depth_at(&k, Vector2::new(1.0, 1.0)),
            Err(Error::InvalidDepth { .. })
        ));
        let slanted = PlaneParam::new(Vector3::new(0.1, 0.0, 0.5));
        let d = slanted.depth_at(&k, Vector2::new(1.0, 0.0)).unwrap();
        assert!((d - 1.0 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn flow_examples() {
        let x = Vector2::new(10.0, 10.0);
        assert_eq!(flow_from_homography(&Homography::identity(), x).unwrap(), Vector2::zeros());
        let shift = Homography(Matrix3::new(1.0, 0.0, -5.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0));
        assert_eq!(flow_from_homography(&shift, x).unwrap(), Vector2::new(-5.0, 0.0));
        let scale = Homography(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 2.0)));
        assert_eq!(
            flow_from_homography(&scale, Vector2::new(8.0, 4.0)).unwrap(),
            Vector2::new(-4.0, -2.0)
        );
        let behind = Homography(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)));
        assert!(matches!(flow_from_homography(&behind, x), Err(Error::BehindCamera)));
    }

    #[test]
    fn singular_homography_is_rejected() {
        // R − t nᵀ = 0 in the z row
        let o = RigidMotion::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let r = homography_from_plane_motion(&unit_k(), &PlaneParam::new(Vector3::new(0.0, 0.0, 1.0)), &o);
        assert!(matches!(r, Err(Error::NonInvertible(_))));
    }

    #[test]
    fn procrustes_identity_and_exact() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::new(1.0, 0.0, 3.0),
            Vector3::new(0.0, 1.0, 2.5),
            Vector3::new(-1.0, 0.5, 4.0),
        ];
        let id = rigid_from_3d_correspondences(&pts, &pts).unwrap();
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);

        let truth = RigidMotion::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.3, -0.1, 0.2));
        let moved: Vec<_> = pts.iter().map(|p| truth.apply(p)).collect();
        let est = rigid_from_3d_correspondences(&pts, &moved).unwrap();
        assert!((est.rotation - truth.rotation).abs().max() < 1e-9);
        assert!((est.translation - truth.translation).abs().max() < 1e-9);
    }

    #[test]
    fn procrustes_collinear_is_degenerate() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 1.0, 2.0),
            Vector3::new(2.0, 2.0, 3.0),
        ];
        assert!(matches!(rigid_from_3d_correspondences(&pts, &pts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rotation_validation() {
        assert!(RigidMotion::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), Vector3::zeros()).is_err());
        assert!(RigidMotion::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
        let m = RigidMotion::from_axis_angle(Vector3::new(0.3, 0.2, -0.1), Vector3::new(1.0, 2.0, 3.0));
        let p = Vector3::new(0.4, -0.7, 2.2);
        assert!((m.inverse().apply(&m.apply(&p)) - p).norm() < 1e-12);
    }
}
