//! Segmentation and landmark metrics, heatmap decoding and heatmap targets.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor};

pub const IGNORE_INDEX: u32 = 255;
pub const DEFAULT_SIGMA: f64 = 1.5;
/// Heatmaps are predicted at a quarter of the input resolution.
pub const HEATMAP_STRIDE: f64 = 4.0;

/// Pixel confusion matrix; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_labels(pred: &[u32], gt: &[u32], k: usize, ignore_index: u32) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(pred, gt, ignore_index)?;
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per position; pixels whose ground truth equals
    /// `ignore_index` are skipped.
    pub fn accumulate(&mut self, pred: &[u32], gt: &[u32], ignore_index: u32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "accumulate_confusion",
                format!("{} predictions for {} labels", pred.len(), gt.len()),
            ));
        }
        let k = self.k as u32;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            if g >= k || p >= k {
                return Err(Error::invalid(
                    "accumulate_confusion",
                    format!("label {} outside {} classes", g.max(p), k),
                ));
            }
            self.counts[(g * k + p) as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("merge_confusion", format!("{} vs {} classes", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Ground-truth pixel count of class `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c * self.k..(c + 1) * self.k].iter().sum()
    }

    pub fn scores(&self) -> Result<SegScores> {
        miou(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    pub miou: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_acc: f64,
    pub mean_acc: f64,
}

/// Mean IoU over classes with nonzero ground-truth support.
pub fn miou(cm: &ConfusionMatrix) -> Result<SegScores> {
    let k = cm.k;
    let mut per_class = Vec::with_capacity(k);
    let (mut iou_sum, mut acc_sum, mut present) = (0.0, 0.0, 0usize);
    let mut trace = 0u64;
    for c in 0..k {
        let tp = cm.get(c, c);
        trace += tp;
        let support = cm.support(c);
        if support == 0 {
            per_class.push(None);
            continue;
        }
        let predicted: u64 = (0..k).map(|g| cm.get(g, c)).sum();
        let union = support + predicted - tp;
        let iou = tp as f64 / union as f64;
        per_class.push(Some(iou));
        iou_sum += iou;
        acc_sum += tp as f64 / support as f64;
        present += 1;
    }
    if present == 0 {
        return Err(Error::invalid("miou", "every class has zero support"));
    }
    Ok(SegScores {
        miou: iou_sum / present as f64,
        per_class_iou: per_class,
        pixel_acc: trace as f64 / cm.total() as f64,
        mean_acc: acc_sum / present as f64,
    })
}

/// Per-pixel argmax over channels of an `(N, K, H, W)` score tensor; ties go
/// to the lowest class index.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Vec<u32> {
    let s = scores.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for i in 0..plane {
            let mut best = 0;
            let mut best_v = scores.plane(n, 0)[i];
            for c in 1..s.c {
                let v = scores.plane(n, c)[i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedKeypoints {
    /// `(x, y)` per landmark in image pixels.
    pub coords: Vec<(f64, f64)>,
    /// Landmarks whose heatmap maximum was attained at more than one cell.
    pub ambiguous: Vec<bool>,
    pub heatmap_size: (usize, usize),
}

/// Decoding knobs: image coordinate is `stride * quarter_coord + shift`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub stride: f64,
    pub shift: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            stride: HEATMAP_STRIDE,
            shift: 0.0,
        }
    }
}

/// Neighbor offsets `(dy, dx)` in raster order; earlier entries win ties.
const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// Argmax cell of one map plus the offset direction toward its strongest
/// 4-neighbor, in quarter-resolution cells.
pub fn decode_plane<T: Scalar>(map: &[T], h: usize, w: usize) -> Result<((f64, f64), bool)> {
    if h < 2 || w < 2 || map.len() != h * w {
        return Err(Error::shape("decode_heatmap", format!("heatmap {h}x{w} with {} values", map.len())));
    }
    let mut best = 0;
    for i in 1..map.len() {
        if map[i] > map[best] {
            best = i;
        }
    }
    let ambiguous = map.iter().filter(|&&v| v == map[best]).count() > 1;
    let (py, px) = ((best / w) as isize, (best % w) as isize);
    let mut dir = (0isize, 0isize);
    let mut second: Option<T> = None;
    for &(dy, dx) in &NEIGHBORS {
        let (y, x) = (py + dy, px + dx);
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            continue;
        }
        let v = map[y as usize * w + x as usize];
        if second.is_none_or(|s| v > s) {
            second = Some(v);
            dir = (dy, dx);
        }
    }
    let x = px as f64 + 0.25 * dir.1 as f64;
    let y = py as f64 + 0.25 * dir.0 as f64;
    Ok(((x, y), ambiguous))
}

/// Decodes landmark coordinates of sample `n` of an `(N, L, h, w)` heatmap
/// tensor.
pub fn decode_heatmap<T: Scalar>(heatmaps: &Tensor<T>, n: usize, cfg: DecodeConfig) -> Result<DecodedKeypoints> {
    let s = heatmaps.shape();
    if n >= s.n {
        return Err(Error::shape("decode_heatmap", format!("sample {n} of {}", s.n)));
    }
    let mut coords = Vec::with_capacity(s.c);
    let mut ambiguous = Vec::with_capacity(s.c);
    for l in 0..s.c {
        let ((x, y), amb) = decode_plane(heatmaps.plane(n, l), s.h, s.w)?;
        coords.push((cfg.stride * x + cfg.shift, cfg.stride * y + cfg.shift));
        ambiguous.push(amb);
    }
    Ok(DecodedKeypoints {
        coords,
        ambiguous,
        heatmap_size: (s.h, s.w),
    })
}

/// Mean Euclidean landmark error divided by `normalizer`.
pub fn nme(pred: &[(f64, f64)], gt: &[(f64, f64)], normalizer: f64) -> Result<f64> {
    if !(normalizer > 0.0) {
        return Err(Error::invalid("nme", format!("normalizer {normalizer} must be positive")));
    }
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("nme", format!("{} predicted vs {} reference landmarks", pred.len(), gt.len())));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1))
        .sum();
    Ok(total / pred.len() as f64 / normalizer)
}

/// Area under the cumulative error distribution on `[0, alpha]` (normalized
/// by `alpha`, trapezoidal over the sorted sample) and the failure rate
/// `P(nme > alpha)`.
pub fn auc_fr(nmes: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if nmes.is_empty() {
        return Err(Error::invalid("auc_fr", "empty error list"));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("auc_fr", format!("threshold {alpha} must be positive")));
    }
    if nmes.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "auc_fr".into() });
    }
    let mut sorted = nmes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (i, &e) in sorted.iter().enumerate() {
        if e > alpha {
            break;
        }
        xs.push(e);
        ys.push((i + 1) as f64 / n);
    }
    let within = ys.len() - 1;
    xs.push(alpha);
    ys.push(within as f64 / n);
    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum();
    let fr = (sorted.len() - within) as f64 / n;
    Ok((area / alpha, fr))
}

/// Gaussian heatmap targets `(1, L, h, w)` for coordinates in heatmap cells.
/// Each map peaks at 1.0 on the nearest cell and is cut to zero beyond
/// `3 sigma`. Coordinates outside the map give an all-zero map and are
/// reported in the returned flags.
pub fn gaussian_target<T: Scalar>(coords: &[(f64, f64)], h: usize, w: usize, sigma: f64) -> Result<(Tensor<T>, Vec<bool>)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("gaussian_target", format!("sigma {sigma} must be positive")));
    }
    let mut t = Tensor::zeros(Shape4::new(1, coords.len(), h, w));
    let mut outside = Vec::with_capacity(coords.len());
    let cut = 9.0 * sigma * sigma;
    for (l, &(cx, cy)) in coords.iter().enumerate() {
        let (px, py) = (cx.round(), cy.round());
        let off = !(px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64);
        outside.push(off);
        if off {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                if d2 <= cut {
                    t.set(0, l, y, x, T::of((-d2 / (2.0 * sigma * sigma)).exp()));
                }
            }
        }
    }
    Ok((t, outside))
}

/// Named scalar results serialized as `key<TAB>value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub values: Vec<(String, f64)>,
    /// Per-sample NME values when the task has landmarks.
    pub nmes: Vec<f64>,
}

impl MetricsReport {
    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.values.push((key.into(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}\t{v:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = MetricsReport::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("metrics line {}: missing tab", i + 1)))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("metrics line {}: bad value `{v}`", i + 1)))?;
            r.push(k, v);
        }
        Ok(r)
    }

    /// One NME per line, for plotting the cumulative error distribution.
    pub fn nme_list(&self) -> String {
        self.nmes.iter().map(|v| format!("{v:?}\n")).collect()
    }
}
