//! Harris corners matched across frames by zero-normalized cross-correlation.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::geometry::pixel_center;
use crate::imaging::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub max_corners: usize,
    /// Non-maximum suppression radius (pixels).
    pub nms_radius: usize,
    /// Patch half-size; patches are `(2r+1)²`.
    pub patch_radius: usize,
    pub search_radius: f64,
    pub min_zncc: f64,
    /// A match is dropped when the runner-up score is within this margin.
    pub uniqueness_margin: f64,
    /// Corners weaker than this fraction of the strongest response are dropped.
    pub min_response: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            max_corners: 1000,
            nms_radius: 2,
            patch_radius: 5,
            search_radius: 48.0,
            min_zncc: 0.8,
            uniqueness_margin: 0.05,
            min_response: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub col: usize,
    pub row: usize,
    pub response: f64,
}

/// Harris response with a 5×5 binomial window and `k = 0.04`.
pub fn harris_response(img: &GrayImage) -> Vec<f64> {
    let (w, h) = img.dims();
    let at = |c: i64, r: i64| img.get(c.clamp(0, w as i64 - 1) as usize, r.clamp(0, h as i64 - 1) as usize);
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let gx = 0.5 * (at(c + 1, r) - at(c - 1, r));
            let gy = 0.5 * (at(c, r + 1) - at(c, r - 1));
            let i = r as usize * w + c as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let (sxx, syy, sxy) = (binomial5(&ixx, w, h), binomial5(&iyy, w, h), binomial5(&ixy, w, h));
    (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - 0.04 * tr * tr
        })
        .collect()
}

fn binomial5(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (k, wt) in K.iter().enumerate() {
                let cc = (c as i64 + k as i64 - 2).clamp(0, w as i64 - 1) as usize;
                s += wt * src[r * w + cc];
            }
            tmp[r * w + c] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (k, wt) in K.iter().enumerate() {
                let rr = (r as i64 + k as i64 - 2).clamp(0, h as i64 - 1) as usize;
                s += wt * tmp[rr * w + c];
            }
            out[r * w + c] = s;
        }
    }
    out
}

/// Strongest non-max-suppressed corners, away from the border by `margin`.
pub fn detect_corners(img: &GrayImage, params: &MatchParams, margin: usize) -> Vec<Corner> {
    let (w, h) = img.dims();
    if w <= 2 * margin || h <= 2 * margin {
        return Vec::new();
    }
    let resp = harris_response(img);
    let peak = resp.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Vec::new();
    }
    let rad = params.nms_radius as i64;
    let mut corners = Vec::new();
    for r in margin..h - margin {
        for c in margin..w - margin {
            let v = resp[r * w + c];
            if v <= params.min_response * peak {
                continue;
            }
            let mut is_max = true;
            'nbhd: for dr in -rad..=rad {
                for dc in -rad..=rad {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let u = resp[rr as usize * w + cc as usize];
                    // ties resolved toward the earlier raster position
                    if u > v || (u == v && (dr, dc) < (0, 0)) {
                        is_max = false;
                        break 'nbhd;
                    }
                }
            }
            if is_max {
                corners.push(Corner {
                    col: c,
                    row: r,
                    response: v,
                });
            }
        }
    }
    corners.sort_by(|a, b| b.response.total_cmp(&a.response).then((a.row, a.col).cmp(&(b.row, b.col))));
    corners.truncate(params.max_corners);
    corners
}

/// Zero-normalized cross-correlation of two square patches; `None` on flat patches.
pub fn zncc(a: &GrayImage, ca: (i64, i64), b: &GrayImage, cb: (i64, i64), radius: usize) -> Option<f64> {
    let r = radius as i64;
    let inside = |img: &GrayImage, (c, rr): (i64, i64)| c - r >= 0 && rr - r >= 0 && c + r < img.width as i64 && rr + r < img.height as i64;
    if !inside(a, ca) || !inside(b, cb) {
        return None;
    }
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dr in -r..=r {
        for dc in -r..=r {
            let x = a.get((ca.0 + dc) as usize, (ca.1 + dr) as usize);
            let y = b.get((cb.0 + dc) as usize, (cb.1 + dr) as usize);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-12 || vb <= 1e-12 {
        return None;
    }
    Some((sab - sa * sb / n) / (va * vb).sqrt())
}

/// Sub-pixel offset of a parabola through three samples around its peak.
fn parabola_peak(left: f64, mid: f64, right: f64) -> f64 {
    let denom = left - 2.0 * mid + right;
    if denom >= -1e-12 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Corner correspondences `(reference position, target position)` in
/// continuous pixel coordinates.
pub fn detect_and_match(reference: &GrayImage, target: &GrayImage, params: &MatchParams) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    if reference.dims() != target.dims() {
        return Vec::new();
    }
    let margin = params.patch_radius + 1;
    let ca = detect_corners(reference, params, margin);
    let cb = detect_corners(target, params, margin);
    if ca.is_empty() || cb.is_empty() {
        return Vec::new();
    }
    let rad = params.patch_radius;
    let s2 = params.search_radius * params.search_radius;
    let near = |a: &Corner, b: &Corner| {
        let dx = a.col as f64 - b.col as f64;
        let dy = a.row as f64 - b.row as f64;
        dx * dx + dy * dy <= s2
    };
    let pos = |c: &Corner| (c.col as i64, c.row as i64);

    // scores[i] = best (score, j) for reference corner i and vice versa
    let best_ab: Vec<Option<(f64, usize)>> = ca
        .par_iter()
        .map(|a| {
            let mut best: Option<(f64, usize)> = None;
            let mut second = f64::NEG_INFINITY;
            for (j, b) in cb.iter().enumerate() {
                if !near(a, b) {
                    continue;
                }
                if let Some(s) = zncc(reference, pos(a), target, pos(b), rad) {
                    match best {
                        Some((bs, _)) if s <= bs => second = second.max(s),
                        Some((bs, _)) => {
                            second = bs;
                            best = Some((s, j));
                        }
                        None => best = Some((s, j)),
                    }
                }
            }
            best.filter(|&(bs, _)| second < bs - params.uniqueness_margin)
        })
        .collect();
    let best_ba: Vec<Option<(f64, usize)>> = cb
        .par_iter()
        .map(|b| {
            let mut best: Option<(f64, usize)> = None;
            for (i, a) in ca.iter().enumerate() {
                if !near(a, b) {
                    continue;
                }
                if let Some(s) = zncc(reference, pos(a), target, pos(b), rad) {
                    if best.is_none_or(|(bs, _)| s > bs) {
                        best = Some((s, i));
                    }
                }
            }
            best
        })
        .collect();

    let mut out = Vec::new();
    for (i, m) in best_ab.iter().enumerate() {
        let Some((score, j)) = *m else { continue };
        if score < params.min_zncc || best_ba[j].map(|(_, ii)| ii) != Some(i) {
            continue;
        }
        let (a, b) = (&ca[i], &cb[j]);
        let pa = pos(a);
        let pb = pos(b);
        let sample = |dc: i64, dr: i64| zncc(reference, pa, target, (pb.0 + dc, pb.1 + dr), rad).unwrap_or(score);
        let ox = parabola_peak(sample(-1, 0), score, sample(1, 0));
        let oy = parabola_peak(sample(0, -1), score, sample(0, 1));
        let ref_pos = pixel_center(a.col, a.row);
        let tgt_pos = pixel_center(b.col, b.row) + Vector2::new(ox, oy);
        out.push((ref_pos, tgt_pos));
    }
    out
}
