//! Anchor-free label assignment.
//!
//! Every ground truth is routed to one pyramid level by size. On that level,
//! grid points inside the box scaled by `eps_p` become positive, points
//! outside the box scaled by `eps_n` stay negative and points in between are
//! ignored. Neighbouring levels receive an ignore-only copy of the
//! non-negative region, shrunk by `max(cos(λ·d·π / 2k), 0)` where `d` is the
//! level distance.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::codec::{encode, BBox};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    pub eps_p: f64,
    pub eps_n: f64,
    pub lambda: f64,
    pub alpha_gauss: f64,
    /// Project the non-negative region onto other levels. Off: only the best
    /// level sees the ground truth.
    pub projection: bool,
    /// Off: every positive weight is exactly 1.
    pub gaussian_penalty: bool,
    /// Also project the positive region (scaled by the same factor) onto
    /// other levels instead of leaving them ignore-only.
    pub project_positive: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            eps_p: 0.75,
            eps_n: 1.25,
            lambda: 2.5,
            alpha_gauss: 1.0,
            projection: true,
            gaussian_penalty: true,
            project_positive: false,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.eps_p, self.eps_n, self.lambda, self.alpha_gauss]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive {
            return Err(Error::Config(format!("assign parameters must be positive: {self:?}")));
        }
        if self.eps_p >= self.eps_n {
            return Err(Error::Config(format!("eps_p ({}) must be below eps_n ({})", self.eps_p, self.eps_n)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default)]
    pub class: usize,
}

impl GroundTruth {
    pub fn new(bbox: BBox) -> Self {
        GroundTruth { bbox, class: 0 }
    }

    pub fn validate(&self, image_w: f64, image_h: f64) -> Result<()> {
        let b = &self.bbox;
        if !b.is_valid() {
            return Err(Error::InvalidBox(format!("{b:?} needs x2 > x1 and y2 > y1")));
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > image_w || b.y2 > image_h {
            return Err(Error::InvalidBox(format!("{b:?} outside {image_w}x{image_h} image")));
        }
        Ok(())
    }
}

/// One pyramid level's grid: `size × size` points spaced `stride` apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGrid {
    pub stride: usize,
    pub size: usize,
}

impl LevelGrid {
    /// Pixel position of cell `(row, col)`: `(stride·(col+1), stride·(row+1))`.
    #[inline]
    pub fn point(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        (s * (col + 1) as f64, s * (row + 1) as f64)
    }

    pub fn cells(&self) -> usize {
        self.size * self.size
    }
}

/// All grid points of a level in row-major order, 1-based:
/// point `(i, j)` sits at pixel `(stride·i, stride·j)`.
pub fn grid_points(level: LevelGrid) -> Vec<(f64, f64)> {
    (0..level.size)
        .flat_map(|r| (0..level.size).map(move |c| level.point(r, c)))
        .collect()
}

/// Level whose `4·stride` is closest to the longer box side in log2 space.
/// Ties go to the smaller stride.
pub fn best_level(gt: &BBox, strides: &[usize]) -> usize {
    let size = gt.width().max(gt.height()).log2();
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (l, &s) in strides.iter().enumerate() {
        let dist = (size - (4.0 * s as f64).log2()).abs();
        if dist < best_dist - 1e-12 {
            best = l;
            best_dist = dist;
        }
    }
    best
}

/// `max(cos(λ·d·π / 2k), 0)`, held at zero once the angle reaches π/2 so the
/// factor never rises again for large `d`.
pub fn cosine_factor(d: usize, k: usize, lambda: f64) -> f64 {
    let angle = lambda * d as f64 * PI / (2.0 * k as f64);
    if angle >= PI / 2.0 {
        return 0.0;
    }
    angle.cos().max(0.0)
}

pub fn gaussian_weight(gt: &BBox, point: (f64, f64), alpha: f64) -> f64 {
    let (cx, cy) = gt.center();
    let side = gt.width().max(gt.height());
    let d2 = (cx - point.0).powi(2) + (cy - point.1).powi(2);
    (-d2 / (2.0 * alpha * side * side)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Ignored,
    Positive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelAssignment {
    pub grid: LevelGrid,
    pub labels: Vec<Label>,
    /// Regression targets; meaningful on positive cells only.
    pub targets: Vec<[f64; 4]>,
    /// Positive weights ψ; zero elsewhere.
    pub weights: Vec<f64>,
    pub classes: Vec<usize>,
    /// Index of the ground truth owning each positive cell.
    pub owners: Vec<Option<usize>>,
}

impl LevelAssignment {
    fn empty(grid: LevelGrid) -> Self {
        let n = grid.cells();
        LevelAssignment {
            grid,
            labels: vec![Label::Negative; n],
            targets: vec![[0.0; 4]; n],
            weights: vec![0.0; n],
            classes: vec![0; n],
            owners: vec![None; n],
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMaps {
    pub levels: Vec<LevelAssignment>,
    /// Ground truths whose positive region captured no grid point.
    pub empty_gts: usize,
}

impl AssignmentMaps {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(|l| l.count(Label::Positive)).sum()
    }
}

/// Centered region `(cx ± half_w, cy ± half_h)`.
#[derive(Clone, Copy, Debug)]
struct Region {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

impl Region {
    fn around(gt: &BBox, scale: f64) -> Self {
        let (cx, cy) = gt.center();
        Region {
            cx,
            cy,
            half_w: scale * gt.width() / 2.0,
            half_h: scale * gt.height() / 2.0,
        }
    }

    #[inline]
    fn contains(&self, p: (f64, f64)) -> bool {
        (p.0 - self.cx).abs() <= self.half_w && (p.1 - self.cy).abs() <= self.half_h
    }

    /// Inclusive cell range along one axis that may intersect the region,
    /// padded by one cell; exact membership is decided by `contains`.
    fn span(center: f64, half: f64, grid: &LevelGrid) -> std::ops::Range<usize> {
        let s = grid.stride as f64;
        let lo = ((center - half) / s).floor() as i64 - 2;
        let hi = ((center + half) / s).ceil() as i64;
        let lo = lo.clamp(0, grid.size as i64) as usize;
        let hi = hi.clamp(0, grid.size as i64) as usize;
        lo..hi
    }

    fn cells(&self, grid: &LevelGrid) -> impl Iterator<Item = (usize, (f64, f64))> + '_ {
        let rows = Region::span(self.cy, self.half_h, grid);
        let cols = Region::span(self.cx, self.half_w, grid);
        let grid = *grid;
        rows.flat_map(move |r| cols.clone().map(move |c| (r, c)))
            .map(move |(r, c)| (r * grid.size + c, grid.point(r, c)))
            .filter(move |(_, p)| self.contains(*p))
    }
}

/// Builds per-level label, target and weight maps for one image.
pub fn assign(gts: &[GroundTruth], levels: &[LevelGrid], config: &AssignConfig) -> Result<AssignmentMaps> {
    let strides: Vec<usize> = levels.iter().map(|l| l.stride).collect();
    let k = levels.len();
    let mut out: Vec<LevelAssignment> = levels.iter().map(|&g| LevelAssignment::empty(g)).collect();
    let mut empty_gts = 0;

    for (gi, gt) in gts.iter().enumerate() {
        let b = &gt.bbox;
        if !b.is_valid() {
            return Err(Error::InvalidBox(format!("ground truth {gi}: {b:?}")));
        }
        let best = best_level(b, &strides);
        let mut positives = 0;
        for (l, level) in out.iter_mut().enumerate() {
            let d = best.abs_diff(l);
            let shrink = if d == 0 {
                1.0
            } else if config.projection {
                cosine_factor(d, k, config.lambda)
            } else {
                0.0
            };
            if shrink <= 0.0 {
                continue;
            }
            let grid = level.grid;
            for (idx, _) in Region::around(b, shrink * config.eps_n).cells(&grid) {
                if level.labels[idx] == Label::Negative {
                    level.labels[idx] = Label::Ignored;
                }
            }
            if d != 0 && !config.project_positive {
                continue;
            }
            for (idx, p) in Region::around(b, shrink * config.eps_p).cells(&grid) {
                positives += 1;
                let weight = if config.gaussian_penalty {
                    gaussian_weight(b, p, config.alpha_gauss)
                } else {
                    1.0
                };
                // Shared cells go to the ground truth with the larger weight.
                if level.labels[idx] == Label::Positive && level.weights[idx] >= weight {
                    continue;
                }
                level.labels[idx] = Label::Positive;
                level.weights[idx] = weight;
                level.targets[idx] = encode(b, p, grid.stride as f64)?.as_array();
                level.classes[idx] = gt.class;
                level.owners[idx] = Some(gi);
            }
        }
        if positives == 0 {
            empty_gts += 1;
            log::warn!("ground truth {gi} {b:?} covers no grid point of level {best}");
        }
    }
    Ok(AssignmentMaps { levels: out, empty_gts })
}
