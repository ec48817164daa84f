//! Initial region partition (SLIC superpixels), region anchors, and the
//! frozen neighbourhood structures derived from the partition.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::data::HsiCube;
use crate::error::{contract, Error, Result};
use crate::tensor::{SparsePattern, Tensor};

/// Pixel-to-region labeling plus the region adjacency it induces.
///
/// Regions are adjacent when a pixel of one 4-neighbours a pixel of the
/// other. Every region counts as adjacent to itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    region_of: Vec<usize>,
    region_count: usize,
    /// Sorted neighbour list per region, self included.
    neighbors: Vec<Vec<usize>>,
}

impl SegmentationMap {
    /// Wraps a labeling whose ids cover `0..region_count` with no gaps.
    pub fn from_labels(height: usize, width: usize, region_of: Vec<usize>) -> Result<Self> {
        if region_of.len() != height * width || region_of.is_empty() {
            return Err(contract(format!("{} labels for a {height}x{width} image", region_of.len())));
        }
        let region_count = region_of.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; region_count];
        region_of.iter().for_each(|&r| sizes[r] += 1);
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(contract(format!("region {empty} has no pixels")));
        }
        let mut neighbors: Vec<Vec<usize>> = (0..region_count).map(|r| vec![r]).collect();
        for y in 0..height {
            for x in 0..width {
                let a = region_of[y * width + x];
                let mut link = |b: usize| {
                    if a != b {
                        neighbors[a].push(b);
                        neighbors[b].push(a);
                    }
                };
                if x + 1 < width {
                    link(region_of[y * width + x + 1]);
                }
                if y + 1 < height {
                    link(region_of[(y + 1) * width + x]);
                }
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Ok(Self { height, width, region_of, region_count, neighbors })
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn pixel_count(&self) -> usize {
        self.region_of.len()
    }

    pub fn region_of(&self) -> &[usize] {
        &self.region_of
    }

    /// Regions adjacent to `region`, itself included, ascending.
    pub fn neighbors(&self, region: usize) -> &[usize] {
        &self.neighbors[region]
    }

    /// Dense symmetric `c×c` adjacency mask with a true diagonal.
    pub fn region_adjacency(&self) -> Vec<Vec<bool>> {
        let c = self.region_count;
        let mut mask = vec![vec![false; c]; c];
        for (a, ns) in self.neighbors.iter().enumerate() {
            for &b in ns {
                mask[a][b] = true;
            }
        }
        mask
    }

    /// Regions a pixel may be softly assigned to: its own region and every
    /// region adjacent to it.
    pub fn pixel_neighborhood(&self, pixel: usize) -> &[usize] {
        &self.neighbors[self.region_of[pixel]]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count];
        self.region_of.iter().for_each(|&r| sizes[r] += 1);
        sizes
    }

    /// `n×c` pattern of the soft assignment: row `i` holds the pixel's
    /// neighbourhood.
    pub fn assignment_pattern(&self) -> SparsePattern {
        let rows: Vec<Vec<usize>> = (0..self.pixel_count()).map(|i| self.pixel_neighborhood(i).to_vec()).collect();
        SparsePattern::from_rows(self.region_count, &rows).expect("region ids in range")
    }

    /// `c×c` pattern of region-to-region edges, diagonal excluded.
    pub fn edge_pattern(&self) -> SparsePattern {
        let rows: Vec<Vec<usize>> = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(a, ns)| ns.iter().copied().filter(|&b| b != a).collect())
            .collect();
        SparsePattern::from_rows(self.region_count, &rows).expect("region ids in range")
    }

    /// True when every region is a single 4-connected component.
    pub fn regions_connected(&self) -> bool {
        let (_, comp_label, _) = components(&self.region_of, self.height, self.width);
        let mut seen = vec![false; self.region_count];
        comp_label.iter().all(|&l| !std::mem::replace(&mut seen[l], true))
    }

    /// The labeling as a `u16` raster (region id + 1, so 0 never appears).
    pub fn to_u16_raster(&self) -> Result<Vec<u16>> {
        if self.region_count >= u16::MAX as usize {
            return Err(Error::Format(format!("{} regions do not fit a 16-bit raster", self.region_count)));
        }
        Ok(self.region_of.iter().map(|&r| (r + 1) as u16).collect())
    }

    /// Same partition with region ids permuted: old id `r` becomes `perm[r]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let region_of = self.region_of.iter().map(|&r| perm[r]).collect();
        Self::from_labels(self.height, self.width, region_of)
    }
}

/// Connected components of equal labels under 4-connectivity. Returns the
/// component id of each pixel, the label of each component, and component
/// sizes. Components are numbered in row-major order of their first pixel.
fn components(labels: &[usize], height: usize, width: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let label = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for q in four_neighbors(p, height, width) {
                if comp[q] == usize::MAX && labels[q] == label {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        comp_label.push(label);
        comp_size.push(size);
    }
    (comp, comp_label, comp_size)
}

fn four_neighbors(p: usize, height: usize, width: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / width, p % width);
    [
        (y > 0).then(|| p - width),
        (y + 1 < height).then(|| p + width),
        (x > 0).then(|| p - 1),
        (x + 1 < width).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

/// SLIC seeding grid for `c` regions on a `height × width` image: `(rows,
/// cols)` of seeds, chosen so their product approximates `c`.
pub fn seed_grid(height: usize, width: usize, c: usize) -> (usize, usize) {
    let nx = ((c as f64 * width as f64 / height as f64).sqrt().round() as usize).clamp(1, width);
    let ny = ((c as f64 / nx as f64).round() as usize).clamp(1, height);
    (ny, nx)
}

#[derive(Clone, Debug)]
struct Center {
    y: f64,
    x: f64,
    feat: Vec<f64>,
}

/// SLIC superpixels over a `height × width` raster of `k`-dimensional
/// features (`features` is `[height·width, k]`).
///
/// Seeds sit on a regular grid and move to the lowest-gradient pixel of
/// their 3×3 neighbourhood when that is strictly lower than the gradient at
/// the seed. Each iteration assigns pixels inside a `2S × 2S` window around
/// every center by `D² = d_feat² + (compactness/S)²·d_xy²` and then moves the
/// centers to the mean of their pixels. Finally every region is made
/// 4-connected by merging stray fragments (and fragments smaller than
/// `S²/4`) into the largest adjacent region. The resulting region count may
/// differ slightly from `c`.
pub fn slic_segment(
    features: &Tensor,
    height: usize,
    width: usize,
    c: usize,
    compactness: f64,
    iters: usize,
) -> Result<SegmentationMap> {
    let (n, k) = features.dims2("slic_segment")?;
    if n != height * width || n == 0 {
        return Err(contract(format!("{n} feature rows for a {height}x{width} image")));
    }
    if c == 0 || c > n {
        return Err(contract(format!("region count {c} outside 1..={n}")));
    }
    if iters == 0 {
        return Err(contract("SLIC needs at least one iteration"));
    }
    if !(compactness >= 0.0) {
        return Err(contract(format!("compactness must be non-negative, got {compactness}")));
    }
    let f = features.data();
    let feat = |p: usize| &f[p * k..(p + 1) * k];
    let (ny, nx) = seed_grid(height, width, c);
    let step_y = height as f64 / ny as f64;
    let step_x = width as f64 / nx as f64;
    let s = (n as f64 / (ny * nx) as f64).sqrt();

    let gradient = |y: usize, x: usize| -> f64 {
        let at = |yy: usize, xx: usize| feat(yy * width + xx);
        let (l, r) = (at(y, x.saturating_sub(1)), at(y, (x + 1).min(width - 1)));
        let (u, d) = (at(y.saturating_sub(1), x), at((y + 1).min(height - 1), x));
        sq_dist(l, r) + sq_dist(u, d)
    };

    let mut centers: Vec<Center> = Vec::with_capacity(ny * nx);
    for gy in 0..ny {
        for gx in 0..nx {
            let cy = (gy as f64 + 0.5) * step_y - 0.5;
            let cx = (gx as f64 + 0.5) * step_x - 0.5;
            let (py, px) = (nearest(cy, height), nearest(cx, width));
            let mut best = (gradient(py, px), py, px);
            for yy in py.saturating_sub(1)..=(py + 1).min(height - 1) {
                for xx in px.saturating_sub(1)..=(px + 1).min(width - 1) {
                    let g = gradient(yy, xx);
                    if g < best.0 {
                        best = (g, yy, xx);
                    }
                }
            }
            let (y, x) = if (best.1, best.2) == (py, px) { (cy, cx) } else { (best.1 as f64, best.2 as f64) };
            centers.push(Center { y, x, feat: feat(best.1 * width + best.2).to_vec() });
        }
    }

    let spatial_w = if s > 0.0 { (compactness / s).powi(2) } else { 0.0 };
    let dist = |center: &Center, p: usize| -> f64 {
        let (y, x) = ((p / width) as f64, (p % width) as f64);
        sq_dist(&center.feat, feat(p)) + spatial_w * ((y - center.y).powi(2) + (x - center.x).powi(2))
    };

    let mut labels = vec![usize::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    for _ in 0..iters {
        labels.fill(usize::MAX);
        best.fill(f64::INFINITY);
        for (ci, center) in centers.iter().enumerate() {
            let y0 = (center.y - s).ceil().max(0.0) as usize;
            let y1 = ((center.y + s).floor().max(0.0) as usize).min(height - 1);
            let x0 = (center.x - s).ceil().max(0.0) as usize;
            let x1 = ((center.x + s).floor().max(0.0) as usize).min(width - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * width + x;
                    let d = dist(center, p);
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = ci;
                    }
                }
            }
        }
        // Pixels outside every window fall back to a global search.
        for p in 0..n {
            if labels[p] == usize::MAX {
                let (ci, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(ci, ctr)| (ci, dist(ctr, p)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                labels[p] = ci;
            }
        }
        let mut sums = vec![(0.0, 0.0, vec![0.0; k], 0usize); centers.len()];
        for p in 0..n {
            let e = &mut sums[labels[p]];
            e.0 += (p / width) as f64;
            e.1 += (p % width) as f64;
            e.2.iter_mut().zip(feat(p)).for_each(|(a, v)| *a += v);
            e.3 += 1;
        }
        for (center, (sy, sx, sf, cnt)) in centers.iter_mut().zip(sums) {
            if cnt > 0 {
                let m = cnt as f64;
                center.y = sy / m;
                center.x = sx / m;
                center.feat = sf.into_iter().map(|v| v / m).collect();
            }
        }
    }

    let min_size = ((s * s) / 4.0).floor().max(1.0) as usize;
    let region_of = enforce_connectivity(&labels, height, width, min_size);
    SegmentationMap::from_labels(height, width, region_of)
}

fn nearest(v: f64, len: usize) -> usize {
    (v.round().max(0.0) as usize).min(len - 1)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Keeps each label's largest component (if at least `min_size` pixels),
/// merges every other component into its largest adjacent surviving region,
/// and renumbers regions in row-major order of first appearance.
fn enforce_connectivity(labels: &[usize], height: usize, width: usize, min_size: usize) -> Vec<usize> {
    let (comp, comp_label, comp_size) = components(labels, height, width);
    let nc = comp_label.len();
    let max_label = comp_label.iter().max().map_or(0, |m| m + 1);
    let mut largest: Vec<Option<usize>> = vec![None; max_label];
    for ci in 0..nc {
        let l = comp_label[ci];
        if largest[l].map_or(true, |b| comp_size[ci] > comp_size[b]) {
            largest[l] = Some(ci);
        }
    }
    // target[ci] = the surviving component ci ends up in.
    let mut target: Vec<Option<usize>> = vec![None; nc];
    for ci in largest.iter().flatten().copied() {
        if comp_size[ci] >= min_size {
            target[ci] = Some(ci);
        }
    }
    if target.iter().all(Option::is_none) {
        let biggest = (0..nc).max_by(|&a, &b| comp_size[a].cmp(&comp_size[b]).then(b.cmp(&a))).expect("non-empty");
        target[biggest] = Some(biggest);
    }
    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for p in 0..labels.len() {
        for q in four_neighbors(p, height, width) {
            if comp[p] != comp[q] {
                adjacent[comp[p]].push(comp[q]);
            }
        }
    }
    for a in &mut adjacent {
        a.sort_unstable();
        a.dedup();
    }
    let mut size: Vec<usize> = comp_size.clone();
    loop {
        let mut changed = false;
        let mut pending = false;
        for ci in 0..nc {
            if target[ci].is_some() {
                continue;
            }
            let choice = adjacent[ci]
                .iter()
                .filter_map(|&nb| target[nb])
                .fold(None, |best: Option<usize>, t| match best {
                    Some(b) if size[b] > size[t] || (size[b] == size[t] && b <= t) => Some(b),
                    _ => Some(t),
                });
            match choice {
                Some(t) => {
                    target[ci] = Some(t);
                    size[t] += comp_size[ci];
                    changed = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        assert!(changed, "orphan components with no surviving neighbour");
    }
    let mut renumber = vec![usize::MAX; nc];
    let mut next = 0;
    comp.iter()
        .map(|&ci| {
            let t = target[ci].expect("all merged");
            if renumber[t] == usize::MAX {
                renumber[t] = next;
                next += 1;
            }
            renumber[t]
        })
        .collect()
}

/// Mean full-band spectrum of each region, as a `bands × regions` matrix
/// (column `j` is the anchor of region `j`).
pub fn init_anchors(cube: &HsiCube, seg: &SegmentationMap) -> Result<Tensor> {
    if seg.height != cube.height || seg.width != cube.width {
        return Err(contract(format!(
            "segmentation {}x{} does not match cube {}x{}",
            seg.height, seg.width, cube.height, cube.width
        )));
    }
    let (d, c) = (cube.bands, seg.region_count());
    let mut sums = vec![0.0; d * c];
    let mut counts = vec![0usize; c];
    for (p, &r) in seg.region_of().iter().enumerate() {
        counts[r] += 1;
        for (t, &v) in cube.pixel(p).iter().enumerate() {
            sums[t * c + r] += v;
        }
    }
    for t in 0..d {
        for r in 0..c {
            sums[t * c + r] /= counts[r] as f64;
        }
    }
    Tensor::matrix(d, c, sums)
}

/// Frozen structures shared by every forward pass of one run.
#[derive(Clone, Debug)]
pub struct Neighborhoods {
    /// `n×c` support of the soft assignment.
    pub assignment: Arc<SparsePattern>,
    /// `c×c` support of the region graph, diagonal excluded.
    pub edges: Arc<SparsePattern>,
}

impl Neighborhoods {
    pub fn from_segmentation(seg: &SegmentationMap) -> Self {
        Self { assignment: Arc::new(seg.assignment_pattern()), edges: Arc::new(seg.edge_pattern()) }
    }
}
