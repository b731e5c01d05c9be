//! Dense depth initialization by penalized least squares, and per-region
//! plane fitting.

use nalgebra::{Matrix3, Vector3, SVD};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{pixel_center, Intrinsics, PlaneParam};
use crate::imaging::{DenseDepthMap, SparseDepthMap};

pub const FILL_TOLERANCE: f64 = 1e-6;
pub const FILL_MAX_ITERATIONS: usize = 3000;

/// Graph Laplacian of the 4-connected grid (reflecting borders).
pub fn laplacian(u: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut v = 0.0;
            if c > 0 {
                v += u[i - 1] - u[i];
            }
            if c + 1 < w {
                v += u[i + 1] - u[i];
            }
            if r > 0 {
                v += u[i - w] - u[i];
            }
            if r + 1 < h {
                v += u[i + w] - u[i];
            }
            out[i] = v;
        }
    }
}

/// Exact solver for `(ρ·Id + β·L²) x = b` on the grid. The mirrored extension
/// turns the reflecting Laplacian into a periodic one that the FFT diagonalizes.
struct NeumannSolver {
    w: usize,
    h: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    /// `λ²` of the extended periodic Laplacian, `(2H) × (2W)` row-major.
    eig_sq: Vec<f64>,
}

impl NeumannSolver {
    fn new(w: usize, h: usize) -> Self {
        let mut planner = FftPlanner::new();
        let (ew, eh) = (2 * w, 2 * h);
        let lam = |k: usize, n: usize| 2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos();
        let mut eig_sq = Vec::with_capacity(ew * eh);
        for l in 0..eh {
            for k in 0..ew {
                eig_sq.push((lam(k, ew) + lam(l, eh)).powi(2));
            }
        }
        Self {
            w,
            h,
            row_fwd: planner.plan_fft_forward(ew),
            row_inv: planner.plan_fft_inverse(ew),
            col_fwd: planner.plan_fft_forward(eh),
            col_inv: planner.plan_fft_inverse(eh),
            eig_sq,
        }
    }

    fn solve(&self, b: &[f64], rho: f64, beta: f64, out: &mut [f64]) {
        let (w, h) = (self.w, self.h);
        let (ew, eh) = (2 * w, 2 * h);
        let mut buf = vec![Complex::new(0.0, 0.0); ew * eh];
        for r in 0..eh {
            let sr = if r < h { r } else { eh - 1 - r };
            for c in 0..ew {
                let sc = if c < w { c } else { ew - 1 - c };
                buf[r * ew + c] = Complex::new(b[sr * w + sc], 0.0);
            }
        }
        self.row_fwd.process(&mut buf);
        let mut t = transpose(&buf, ew, eh);
        self.col_fwd.process(&mut t);
        // t is (2W) × (2H): entry (k, l) at k·2H + l
        for k in 0..ew {
            for l in 0..eh {
                t[k * eh + l] /= rho + beta * self.eig_sq[l * ew + k];
            }
        }
        self.col_inv.process(&mut t);
        let mut back = transpose(&t, eh, ew);
        self.row_inv.process(&mut back);
        let scale = 1.0 / (ew * eh) as f64;
        for r in 0..h {
            for c in 0..w {
                out[r * w + c] = back[r * ew + c].re * scale;
            }
        }
    }
}

fn transpose(src: &[Complex<f64>], w: usize, h: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); w * h];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = src[r * w + c];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizer of `Σ_Ω (D − D̃)² + β‖L D‖²` by preconditioned conjugate gradients.
pub fn init_depth_fill(sparse: &SparseDepthMap, beta: f64) -> Result<DenseDepthMap> {
    let (w, h) = (sparse.width, sparse.height);
    let n = w * h;
    let count = sparse.count();
    if count == 0 {
        return Err(Error::EmptyMeasurements);
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidParameter(format!("fill beta must be >= 0, got {beta}")));
    }
    let mask: Vec<f64> = sparse.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let b: Vec<f64> = (0..n).map(|i| mask[i] * sparse.depth[i]).collect();
    let mean = sparse.measured().map(|(_, d)| d).sum::<f64>() / count as f64;

    let mut lap = vec![0.0; n];
    let mut lap2 = vec![0.0; n];
    let mut apply = |x: &[f64], out: &mut [f64]| {
        laplacian(x, w, h, &mut lap);
        laplacian(&lap, w, h, &mut lap2);
        for i in 0..n {
            out[i] = mask[i] * x[i] + beta * lap2[i];
        }
    };
    let rho = count as f64 / n as f64;
    let pre = NeumannSolver::new(w, h);

    let mut x = vec![mean; n];
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = (0..n).map(|i| b[i] - ax[i]).collect();
    let b_norm = dot(&b, &b).sqrt().max(f64::MIN_POSITIVE);
    let mut z = vec![0.0; n];
    pre.solve(&r, rho, beta, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..FILL_MAX_ITERATIONS {
        if dot(&r, &r).sqrt() <= FILL_TOLERANCE * b_norm {
            break;
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        pre.solve(&r, rho, beta, &mut z);
        let rz_new = dot(&r, &z);
        let gamma = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + gamma * p[i];
        }
    }
    // keep every pixel valid even where extrapolation undershoots
    let floor = sparse.measured().map(|(_, d)| d).fold(f64::INFINITY, f64::min) * 0.5;
    Ok(DenseDepthMap {
        width: w,
        height: h,
        depth: x.into_iter().map(|v| if v.is_finite() { v.max(floor) } else { mean }).collect(),
    })
}

/// Least-squares plane `nᵀX = 1` through backprojected pixels of a region.
pub fn fit_plane(region: &[usize], depth: &DenseDepthMap, k: &Intrinsics) -> Result<PlaneParam> {
    let w = depth.width;
    let pts: Vec<Vector3<f64>> = region
        .iter()
        .filter_map(|&i| depth.at(i).map(|d| k.backproject(pixel_center(i % w, i / w), d)))
        .collect();
    fit_plane_points(&pts)
}

pub fn fit_plane_points(pts: &[Vector3<f64>]) -> Result<PlaneParam> {
    if pts.len() < 3 {
        return Err(Error::Degenerate(format!("{} points, need 3", pts.len())));
    }
    // Collinearity test on the centered scatter.
    let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / pts.len() as f64;
    let mut scatter = Matrix3::zeros();
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in pts {
        let d = p - c;
        scatter += d * d.transpose();
        ata += p * p.transpose();
        atb += p;
    }
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-10 * ev[0] {
        return Err(Error::Degenerate("plane samples are collinear".into()));
    }
    let svd = SVD::new(ata, true, true);
    let n = svd
        .solve(&atb, 1e-14 * svd.singular_values.max())
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let n = Vector3::new(n[0], n[1], n[2]);
    if !n.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite plane".into()));
    }
    Ok(PlaneParam::new(n))
}

/// Median of the valid depths in a region.
pub fn median_depth(region: &[usize], depth: &DenseDepthMap) -> Option<f64> {
    let mut v: Vec<f64> = region.iter().filter_map(|&i| depth.at(i)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    Some(v[v.len() / 2])
}

/// Fitted plane, or a fronto-parallel plane at the median depth when the fit
/// is degenerate or invalid at the region's centroid.
pub fn region_plane(region: &[usize], centroid: [f64; 2], depth: &DenseDepthMap, k: &Intrinsics) -> Result<PlaneParam> {
    let pos = nalgebra::Vector2::new(centroid[0], centroid[1]);
    if let Ok(n) = fit_plane(region, depth, k) {
        if n.is_valid_at(k, pos) {
            return Ok(n);
        }
    }
    median_depth(region, depth)
        .map(PlaneParam::fronto_parallel)
        .ok_or_else(|| Error::Degenerate("region has no valid depth".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse(w: usize, h: usize, pts: &[(usize, f64)]) -> SparseDepthMap {
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
    fn preconditioner_inverts_its_operator() {
        let (w, h) = (7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (rho, beta) = (0.3, 2.0);
        let mut l1 = vec![0.0; w * h];
        let mut l2 = vec![0.0; w * h];
        laplacian(&x, w, h, &mut l1);
        laplacian(&l1, w, h, &mut l2);
        let b: Vec<f64> = (0..w * h).map(|i| rho * x[i] + beta * l2[i]).collect();
        let mut out = vec![0.0; w * h];
        NeumannSolver::new(w, h).solve(&b, rho, beta, &mut out);
        for (a, e) in out.iter().zip(&x) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_measurements_stay_constant() {
        let pts: Vec<_> = (0..300).step_by(13).map(|i| (i, 3.25)).collect();
        let d = init_depth_fill(&sparse(20, 15, &pts), 5.0).unwrap();
        assert!(d.depth.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn dense_input_with_tiny_beta_is_reproduced() {
        let (w, h) = (16, 12);
        let pts: Vec<_> = (0..w * h).map(|i| (i, 1.0 + (i % 7) as f64 * 0.3 + (i / w) as f64 * 0.1)).collect();
        let d = init_depth_fill(&sparse(w, h, &pts), 1e-6).unwrap();
        for &(i, v) in &pts {
            assert!((d.depth[i] - v).abs() < 1e-4);
        }
    }

    #[test]
    fn strip_interpolation_matches_direct_solve() {
        let w = 12;
        let s = sparse(w, 1, &[(2, 1.0), (9, 3.0)]);
        let beta = 0.5;
        let d = init_depth_fill(&s, beta).unwrap();
        // dense oracle: (M + β LᵀL) x = M d̃
        let mut l = DMatrix::zeros(w, w);
        for i in 0..w {
            if i > 0 {
                l[(i, i - 1)] = 1.0;
                l[(i, i)] -= 1.0;
            }
            if i + 1 < w {
                l[(i, i + 1)] = 1.0;
                l[(i, i)] -= 1.0;
            }
        }
        let mut a = l.transpose() * &l * beta;
        let mut b = DVector::zeros(w);
        for (i, v) in [(2, 1.0), (9, 3.0)] {
            a[(i, i)] += 1.0;
            b[i] = v;
        }
        let x = a.lu().solve(&b).unwrap();
        for i in 0..w {
            assert!((d.depth[i] - x[i]).abs() < 1e-5, "{i}: {} vs {}", d.depth[i], x[i]);
        }
        for i in 2..9 {
            assert!(d.depth[i + 1] >= d.depth[i] - 1e-9);
        }
    }

    #[test]
    fn empty_measurements_rejected() {
        assert!(matches!(init_depth_fill(&sparse(4, 4, &[]), 1.0), Err(Error::EmptyMeasurements)));
    }

    #[test]
    fn plane_fits() {
        let k = Intrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        let region: Vec<usize> = (0..64 * 48).step_by(5).collect();
        let fp = DenseDepthMap {
            width: 64,
            height: 48,
            depth: vec![2.0; 64 * 48],
        };
        let n = fit_plane(&region, &fp, &k).unwrap();
        assert!((n.0 - Vector3::new(0.0, 0.0, 0.5)).norm() < 1e-9);

        let truth = PlaneParam::new(Vector3::new(0.05, -0.08, 0.3));
        let mut slanted = fp.clone();
        for i in 0..64 * 48 {
            slanted.depth[i] = truth.depth_at(&k, pixel_center(i % 64, i / 64)).unwrap();
        }
        let n = fit_plane(&region, &slanted, &k).unwrap();
        assert!((n.0 - truth.0).norm() < 1e-6);

        let line: Vec<usize> = (0..64).map(|c| 10 * 64 + c).collect();
        assert!(matches!(
            fit_plane_points(
                &line
                    .iter()
                    .map(|&i| k.backproject(pixel_center(i % 64, i / 64), 2.0))
                    .collect::<Vec<_>>()
            ),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(fit_plane(&line, &fp, &k), Err(Error::Degenerate(_))));
    }
}
