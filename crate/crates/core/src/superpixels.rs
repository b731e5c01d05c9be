//! SLIC superpixels and the 4-connected boundary structure between them.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::imaging::ColorImage;

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub count: usize,
    /// Pixel indices of each region, ascending.
    pub regions: Vec<Vec<usize>>,
    /// `(x, y)` centroid of pixel centers.
    pub centroids: Vec<[f64; 2]>,
}

impl SuperpixelMap {
    /// Requires every id in `0..=max` to be used.
    pub fn from_labels(width: usize, height: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: (labels.len(), 1),
            });
        }
        let count = labels.iter().max().copied().unwrap_or(0) + 1;
        let mut regions = vec![Vec::new(); count];
        for (i, &l) in labels.iter().enumerate() {
            regions[l].push(i);
        }
        if let Some(empty) = regions.iter().position(|r| r.is_empty()) {
            return Err(Error::InvalidParameter(format!("superpixel label {empty} has no pixels")));
        }
        let centroids = regions
            .iter()
            .map(|r| {
                let (mut sx, mut sy) = (0.0, 0.0);
                for &i in r {
                    sx += (i % width) as f64 + 0.5;
                    sy += (i / width) as f64 + 0.5;
                }
                [sx / r.len() as f64, sy / r.len() as f64]
            })
            .collect();
        Ok(Self {
            width,
            height,
            labels,
            count,
            regions,
            centroids,
        })
    }

    /// `nx × ny` rectangular tiles, labeled row-major.
    pub fn grid(width: usize, height: usize, nx: usize, ny: usize) -> Self {
        let labels = (0..width * height)
            .map(|i| {
                let (c, r) = (i % width, i / width);
                (r * ny / height) * nx + c * nx / width
            })
            .collect();
        Self::from_labels(width, height, labels).expect("grid tiles are non-empty")
    }

    #[inline]
    pub fn label_at(&self, col: usize, row: usize) -> usize {
        self.labels[row * self.width + col]
    }

    /// Pixel of region `i` closest to its centroid.
    pub fn representative_pixel(&self, i: usize) -> usize {
        let [cx, cy] = self.centroids[i];
        *self.regions[i]
            .iter()
            .min_by(|&&a, &&b| {
                let da = ((a % self.width) as f64 + 0.5 - cx).powi(2) + ((a / self.width) as f64 + 0.5 - cy).powi(2);
                let db = ((b % self.width) as f64 + 0.5 - cx).powi(2) + ((b / self.width) as f64 + 0.5 - cy).powi(2);
                da.total_cmp(&db)
            })
            .expect("non-empty region")
    }

    /// True when every region is a single 4-connected component.
    pub fn is_connected(&self) -> bool {
        let comps = components(self.width, self.height, &self.labels);
        comps.sizes.len() == self.count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair {
    pub i: usize,
    pub j: usize,
    /// Pixels of either region with a 4-neighbor in the other.
    pub pixels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundarySet {
    /// Sorted by `(i, j)`, `i < j`.
    pub pairs: Vec<BoundaryPair>,
    pub adjacency: Vec<Vec<usize>>,
}

impl BoundarySet {
    pub fn pair_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.pairs.binary_search_by(|p| (p.i, p.j).cmp(&key)).ok()
    }
}

pub fn extract_boundaries(sp: &SuperpixelMap) -> BoundarySet {
    let (w, h) = (sp.width, sp.height);
    let mut sets: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let a = sp.labels[i];
            let mut visit = |j: usize| {
                let b = sp.labels[j];
                if a != b {
                    let set = sets.entry((a.min(b), a.max(b))).or_default();
                    set.insert(i);
                    set.insert(j);
                }
            };
            if c + 1 < w {
                visit(i + 1);
            }
            if r + 1 < h {
                visit(i + w);
            }
        }
    }
    let mut adjacency = vec![Vec::new(); sp.count];
    let pairs = sets
        .into_iter()
        .map(|((i, j), px)| {
            adjacency[i].push(j);
            adjacency[j].push(i);
            BoundaryPair {
                i,
                j,
                pixels: px.into_iter().collect(),
            }
        })
        .collect();
    for a in adjacency.iter_mut() {
        a.sort_unstable();
    }
    BoundarySet { pairs, adjacency }
}

#[derive(Debug, Clone, Copy)]
pub struct SlicParams {
    pub target_count: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl SlicParams {
    pub fn for_image(width: usize, height: usize) -> Self {
        Self {
            target_count: ((width * height) as f64 / 400.0).round().max(1.0) as usize,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlicOutput {
    pub map: SuperpixelMap,
    /// Σ of squared cluster distances after each assignment/update round.
    pub energy_trace: Vec<f64>,
}

/// sRGB in `[0,1]` to CIELAB (D65).
pub fn rgb_to_lab(p: [f64; 3]) -> [f64; 3] {
    fn lin(v: f64) -> f64 {
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    }
    let (r, g, b) = (lin(p[0]), lin(p[1]), lin(p[2]));
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn slic_segment(img: &ColorImage, target_count: usize, compactness: f64) -> Result<SuperpixelMap> {
    Ok(slic_segment_traced(
        img,
        &SlicParams {
            target_count,
            compactness,
            iterations: 10,
        },
    )?
    .map)
}

pub fn slic_segment_traced(img: &ColorImage, params: &SlicParams) -> Result<SlicOutput> {
    if params.target_count == 0 {
        return Err(Error::InvalidParameter("superpixel target count must be >= 1".into()));
    }
    let (w, h) = img.dims();
    let n = w * h;
    let lab: Vec<[f64; 3]> = img.data.iter().map(|&p| rgb_to_lab(p)).collect();

    let k = params.target_count.min(n);
    let nx = ((k as f64 * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let ny = ((k as f64 / nx as f64).round() as usize).clamp(1, h);
    let step = ((n as f64) / (nx * ny) as f64).sqrt();
    let spatial = (params.compactness / step).powi(2);

    // centers: [l, a, b, x, y] in pixel-center coordinates
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for gy in 0..ny {
        for gx in 0..nx {
            let c = ((2 * gx + 1) * w / (2 * nx)).min(w - 1);
            let r = ((2 * gy + 1) * h / (2 * ny)).min(h - 1);
            let (c, r) = lowest_gradient(&lab, w, h, c, r);
            let l = lab[r * w + c];
            centers.push([l[0], l[1], l[2], c as f64 + 0.5, r as f64 + 0.5]);
        }
    }

    let dist2 = |ctr: &[f64; 5], i: usize| -> f64 {
        let p = lab[i];
        let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let dc = (p[0] - ctr[0]).powi(2) + (p[1] - ctr[1]).powi(2) + (p[2] - ctr[2]).powi(2);
        let ds = (x - ctr[3]).powi(2) + (y - ctr[4]).powi(2);
        dc + ds * spatial
    };

    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            let (c, r) = (i % w, i / w);
            (r * ny / h) * nx + c * nx / w
        })
        .collect();
    let mut trace = Vec::with_capacity(params.iterations);
    let reach = (2.0 * step).ceil() as i64;
    for _ in 0..params.iterations {
        // the current cluster is always a candidate, so assignment never raises the energy
        let mut best: Vec<f64> = (0..n).map(|i| dist2(&centers[labels[i]], i)).collect();
        for (ci, ctr) in centers.iter().enumerate() {
            let (cx, cy) = (ctr[3] as i64, ctr[4] as i64);
            for r in (cy - reach).max(0)..=(cy + reach).min(h as i64 - 1) {
                for c in (cx - reach).max(0)..=(cx + reach).min(w as i64 - 1) {
                    let i = r as usize * w + c as usize;
                    let d = dist2(ctr, i);
                    if d < best[i] {
                        best[i] = d;
                        labels[i] = ci;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let p = lab[i];
            let s = &mut sums[l];
            s[0] += p[0];
            s[1] += p[1];
            s[2] += p[2];
            s[3] += (i % w) as f64 + 0.5;
            s[4] += (i / w) as f64 + 0.5;
            s[5] += 1.0;
        }
        for (ctr, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for d in 0..5 {
                    ctr[d] = s[d] / s[5];
                }
            }
        }
        trace.push((0..n).map(|i| dist2(&centers[labels[i]], i)).sum());
    }

    let min_size = ((n as f64 / (nx * ny) as f64) / 4.0).floor() as usize;
    let max_count = ((1.3 * k as f64).floor() as usize).max(1);
    let labels = enforce_connectivity(w, h, labels, min_size.max(1), max_count);
    Ok(SlicOutput {
        map: SuperpixelMap::from_labels(w, h, labels)?,
        energy_trace: trace,
    })
}

fn lowest_gradient(lab: &[[f64; 3]], w: usize, h: usize, c: usize, r: usize) -> (usize, usize) {
    let grad = |c: usize, r: usize| -> f64 {
        let at = |c: usize, r: usize| lab[r * w + c][0];
        let gx = at((c + 1).min(w - 1), r) - at(c.saturating_sub(1), r);
        let gy = at(c, (r + 1).min(h - 1)) - at(c, r.saturating_sub(1));
        gx * gx + gy * gy
    };
    let mut best = (c, r, grad(c, r));
    for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
        for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
            let g = grad(cc, rr);
            if g < best.2 {
                best = (cc, rr, g);
            }
        }
    }
    (best.0, best.1)
}

struct Components {
    /// Component id per pixel.
    id: Vec<usize>,
    sizes: Vec<usize>,
}

fn components(w: usize, h: usize, labels: &[usize]) -> Components {
    let n = w * h;
    let mut id = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if id[start] != usize::MAX {
            continue;
        }
        let cid = sizes.len();
        let l = labels[start];
        id[start] = cid;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (c, r) = (i % w, i / w);
            let mut push = |j: usize| {
                if id[j] == usize::MAX && labels[j] == l {
                    id[j] = cid;
                    stack.push(j);
                }
            };
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < w {
                push(i + 1);
            }
            if r > 0 {
                push(i - w);
            }
            if r + 1 < h {
                push(i + w);
            }
        }
        sizes.push(size);
    }
    Components { id, sizes }
}

/// Splits every label into its 4-connected components, then merges components,
/// smallest first, into the neighbor sharing the longest border while they are
/// below `min_size` or more than `max_count` regions remain. Output labels are
/// compact, numbered in raster order of first appearance.
fn enforce_connectivity(w: usize, h: usize, labels: Vec<usize>, min_size: usize, max_count: usize) -> Vec<usize> {
    let comps = components(w, h, &labels);
    let ncomp = comps.sizes.len();
    let mut border: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); ncomp];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let a = comps.id[i];
            let mut add = |j: usize| {
                let b = comps.id[j];
                if a != b {
                    *border[a].entry(b).or_default() += 1;
                    *border[b].entry(a).or_default() += 1;
                }
            };
            if c + 1 < w {
                add(i + 1);
            }
            if r + 1 < h {
                add(i + w);
            }
        }
    }

    let mut parent: Vec<usize> = (0..ncomp).collect();
    let mut size = comps.sizes.clone();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut order: Vec<usize> = (0..ncomp).collect();
    order.sort_by_key(|&c| (comps.sizes[c], c));
    let mut live = ncomp;
    for &cid in &order {
        let root = find(&mut parent, cid);
        if size[root] >= min_size && live <= max_count {
            continue;
        }
        let target = border[cid]
            .iter()
            .map(|(&b, &n)| (find(&mut parent, b), n))
            .filter(|&(b, _)| b != root)
            .max_by_key(|&(b, n)| (n, std::cmp::Reverse(b)));
        if let Some((t, _)) = target {
            parent[root] = t;
            size[t] += size[root];
            live -= 1;
        }
    }

    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    comps
        .id
        .iter()
        .map(|&cid| {
            let root = find(&mut parent, cid);
            *remap.entry(root).or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}
