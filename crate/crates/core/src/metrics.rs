//! From localization map to box, and the box accuracy metrics.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// IoU thresholds averaged by MaxBoxAccV2.
pub const DELTAS: [f64; 3] = [0.3, 0.5, 0.7];
/// IoU threshold of GT-known and Top-1-Loc.
pub const GT_KNOWN_DELTA: f64 = 0.5;

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!("empty box ({x0},{y0},{x1},{y1})")));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for BBox {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [x0, y0, x1, y1] = parts.as_slice() else {
            return Err(format!("box {s:?} needs four comma-separated integers"));
        };
        let p = |v: &str| v.parse::<usize>().map_err(|e| format!("box {s:?}: {e}"));
        BBox::new(p(x0)?, p(y0)?, p(x1)?, p(y1)?).map_err(|e| e.to_string())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(format!(
                "mask {width}×{height} with {} entries",
                bits.len()
            )));
        }
        Ok(Mask { width, height, bits })
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("ragged mask rows"));
        }
        Mask::new(width, height, rows.iter().flat_map(|r| r.iter().map(|&v| v != 0)).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// `(v − min) / (max − min)`; constant maps become all zeros.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - lo) / span)
}

/// `map > τ` for an `H×W` map.
pub fn binarize(map: &Tensor, tau: f64) -> Result<Mask> {
    let (h, w) = map.dims2()?;
    Mask::new(w, h, map.data().iter().map(|&v| v > tau).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub area: usize,
    pub bbox: BBox,
}

/// 4-connected components, labelled in raster order of their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if mask.bits[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        out.push(Component {
            area,
            bbox: BBox { x0, y0, x1, y1 },
        });
    }
    out
}

/// Tight box around the largest component, first in raster order on ties.
pub fn box_from_mask(mask: &Mask) -> Option<BBox> {
    largest(&connected_components(mask))
}

fn largest(components: &[Component]) -> Option<BBox> {
    let mut best: Option<&Component> = None;
    for c in components {
        if best.is_none_or(|b| c.area > b.area) {
            best = Some(c);
        }
    }
    best.map(|c| c.bbox)
}

/// Which component boxes count as the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ComponentPolicy {
    /// Only the largest component.
    #[default]
    Largest,
    /// The best-matching box over all components.
    All,
}

impl FromStr for ComponentPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "largest" => Ok(ComponentPolicy::Largest),
            "all" => Ok(ComponentPolicy::All),
            _ => Err(format!("unknown component policy {s:?} (largest, all)")),
        }
    }
}

impl fmt::Display for ComponentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentPolicy::Largest => "largest",
            ComponentPolicy::All => "all",
        })
    }
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    /// Normalized map at image resolution, values in `[0, 1]`.
    pub map: Tensor,
    pub predicted_class: usize,
    pub label: usize,
    pub gt_boxes: Vec<BBox>,
}

impl Prediction {
    fn validate(&self) -> Result<()> {
        if self.gt_boxes.is_empty() {
            return Err(Error::invalid(format!("{}: no ground-truth boxes", self.id)));
        }
        let (h, w) = self.map.dims2()?;
        if let Some(b) = self.gt_boxes.iter().find(|b| !b.within(w, h)) {
            return Err(Error::invalid(format!("{}: box {b} outside the {w}×{h} map", self.id)));
        }
        if self.map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("{}: map is not normalized", self.id)));
        }
        Ok(())
    }

    /// Best IoU against any ground-truth box at threshold τ; 0 for empty masks.
    pub fn best_iou(&self, tau: f64, policy: ComponentPolicy) -> Result<f64> {
        let comps = connected_components(&binarize(&self.map, tau)?);
        Ok(best_iou_of(&comps, &self.gt_boxes, policy))
    }
}

fn best_iou_of(components: &[Component], gt: &[BBox], policy: ComponentPolicy) -> f64 {
    let against = |b: &BBox| gt.iter().map(|g| iou(b, g)).fold(0.0, f64::max);
    match policy {
        ComponentPolicy::Largest => largest(components).map_or(0.0, |b| against(&b)),
        ComponentPolicy::All => components.iter().map(|c| against(&c.bbox)).fold(0.0, f64::max),
    }
}

/// `{k/n : k = 0..n−1}`
pub fn tau_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / n as f64).collect()
}

pub const DEFAULT_TAU_STEPS: usize = 128;

fn check_preds(preds: &[Prediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    preds.iter().try_for_each(Prediction::validate)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("IoU threshold {delta} outside (0, 1)")));
    }
    Ok(())
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Percentage of images whose box at τ has IoU > δ with some GT box.
pub fn box_acc(preds: &[Prediction], delta: f64, tau: f64, policy: ComponentPolicy) -> Result<f64> {
    check_preds(preds)?;
    check_delta(delta)?;
    let mut hits = 0;
    for p in preds {
        if p.best_iou(tau, policy)? > delta {
            hits += 1;
        }
    }
    Ok(percent(hits, preds.len()))
}

/// `best_iou[image][τ index]`, computed once for a threshold sweep.
fn iou_table(preds: &[Prediction], grid: &[f64], policy: ComponentPolicy) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    preds
        .par_iter()
        .map(|p| grid.iter().map(|&t| p.best_iou(t, policy)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaResult {
    pub delta: f64,
    pub accuracy: f64,
    /// Smallest τ reaching the best accuracy.
    pub tau: f64,
}

fn sweep(table: &[Vec<f64>], grid: &[f64], delta: f64) -> DeltaResult {
    let mut best = DeltaResult {
        delta,
        accuracy: -1.0,
        tau: grid[0],
    };
    for (k, &tau) in grid.iter().enumerate() {
        let hits = table.iter().filter(|row| row[k] > delta).count();
        let acc = percent(hits, table.len());
        if acc > best.accuracy {
            best = DeltaResult {
                delta,
                accuracy: acc,
                tau,
            };
        }
    }
    best
}

/// Per-δ best accuracy over the τ grid, their mean, and the chosen τ.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxBoxAcc {
    pub per_delta: Vec<DeltaResult>,
    pub value: f64,
}

pub fn max_box_acc_v2(preds: &[Prediction], grid: &[f64], policy: ComponentPolicy) -> Result<MaxBoxAcc> {
    check_preds(preds)?;
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    let table = iou_table(preds, grid, policy)?;
    let per_delta: Vec<DeltaResult> = DELTAS.iter().map(|&d| sweep(&table, grid, d)).collect();
    Ok(MaxBoxAcc {
        value: mean_of(per_delta.iter().map(|r| r.accuracy)),
        per_delta,
    })
}

pub fn mean_of(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Best box accuracy at δ = 0.5 over the grid. Maps must come from the
/// ground-truth class.
pub fn gt_known(preds: &[Prediction], grid: &[f64], policy: ComponentPolicy) -> Result<DeltaResult> {
    check_preds(preds)?;
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    let table = iou_table(preds, grid, policy)?;
    Ok(sweep(&table, grid, GT_KNOWN_DELTA))
}

/// Correct class and IoU > 0.5 at the operating threshold τ*.
pub fn top1_loc(preds: &[Prediction], tau: f64, policy: ComponentPolicy) -> Result<f64> {
    check_preds(preds)?;
    let mut hits = 0;
    for p in preds {
        if p.predicted_class == p.label && p.best_iou(tau, policy)? > GT_KNOWN_DELTA {
            hits += 1;
        }
    }
    Ok(percent(hits, preds.len()))
}

pub fn top1_cls(preds: &[Prediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    let hits = preds.iter().filter(|p| p.predicted_class == p.label).count();
    Ok(percent(hits, preds.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_delta: Vec<DeltaResult>,
    pub max_box_acc_v2: f64,
    pub gt_known: f64,
    /// Threshold maximizing GT-known; used for Top-1-Loc.
    pub tau_star: f64,
    pub top1_loc: f64,
    pub top1_cls: f64,
    pub images: usize,
}

impl EvalReport {
    /// Box metrics from ground-truth-class maps; Top-1-Loc from the maps of
    /// the predicted class at the GT-known operating threshold.
    pub fn compute(
        gt_class_maps: &[Prediction],
        predicted_class_maps: &[Prediction],
        grid: &[f64],
        policy: ComponentPolicy,
    ) -> Result<Self> {
        if gt_class_maps.len() != predicted_class_maps.len() {
            return Err(Error::invalid("prediction sets differ in length"));
        }
        let mba = max_box_acc_v2(gt_class_maps, grid, policy)?;
        let known = mba
            .per_delta
            .iter()
            .find(|r| r.delta == GT_KNOWN_DELTA)
            .copied()
            .expect("δ = 0.5 is swept");
        Ok(EvalReport {
            max_box_acc_v2: mba.value,
            gt_known: known.accuracy,
            tau_star: known.tau,
            top1_loc: top1_loc(predicted_class_maps, known.tau, policy)?,
            top1_cls: top1_cls(predicted_class_maps)?,
            per_delta: mba.per_delta,
            images: gt_class_maps.len(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.per_delta {
            let _ = writeln!(s, "box_acc_delta_{}={:.4}", r.delta, r.accuracy);
            let _ = writeln!(s, "tau_delta_{}={:.6}", r.delta, r.tau);
        }
        let _ = writeln!(s, "max_box_acc_v2={:.4}", self.max_box_acc_v2);
        let _ = writeln!(s, "gt_known={:.4}", self.gt_known);
        let _ = writeln!(s, "tau_star={:.6}", self.tau_star);
        let _ = writeln!(s, "top1_loc={:.4}", self.top1_loc);
        let _ = writeln!(s, "top1_cls={:.4}", self.top1_cls);
        let _ = writeln!(s, "images={}", self.images);
        s
    }

    /// `metric  delta  tau  value`, tab separated, `-` for not applicable.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tdelta\ttau\tvalue\n");
        for r in &self.per_delta {
            let _ = writeln!(s, "box_acc\t{}\t{:.6}\t{:.4}", r.delta, r.tau, r.accuracy);
        }
        let _ = writeln!(s, "max_box_acc_v2\t-\t-\t{:.4}", self.max_box_acc_v2);
        let _ = writeln!(s, "gt_known\t{GT_KNOWN_DELTA}\t{:.6}\t{:.4}", self.tau_star, self.gt_known);
        let _ = writeln!(s, "top1_loc\t{GT_KNOWN_DELTA}\t{:.6}\t{:.4}", self.tau_star, self.top1_loc);
        let _ = writeln!(s, "top1_cls\t-\t-\t{:.4}", self.top1_cls);
        s
    }
}
