//! Saliency metrics: MAE, PR curve, F-measure, weighted F-measure.
//!
//! Maps are single-plane tensors (`[1, 1, h, w]`); predictions lie in [0, 1]
//! and ground truth is binary.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::par;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// β² of the F-measure (SOD convention).
pub const BETA_SQ: f64 = 0.3;
/// β² inside the weighted F-measure.
pub const WEIGHTED_BETA_SQ: f64 = 1.0;
pub const PR_POINTS: usize = 256;
const GAUSS_RADIUS: usize = 3;
const GAUSS_SIGMA: f64 = 5.0;

fn check(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("saliency map"));
    }
    if let Some(v) = gt.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::NonBinaryMask(*v));
    }
    if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("prediction value {v} outside [0, 1]")));
    }
    Ok(())
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// `(1+β²)PR / (β²P + R)`; zero when the denominator vanishes.
pub fn f_beta_with(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let den = beta_sq * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    }
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    f_beta_with(precision, recall, BETA_SQ)
}

/// Precision and recall of a binarised map. Precision is 1 when nothing is
/// predicted positive; recall is 0 when the ground truth is empty.
fn precision_recall(tp: f64, predicted: f64, positives: f64) -> (f64, f64) {
    let p = if predicted == 0.0 { 1.0 } else { tp / predicted };
    let r = if positives == 0.0 { 0.0 } else { tp / positives };
    (p, r)
}

/// Number of thresholds `k/255` (k = 0..=255) that `p` reaches.
fn thresholds_reached(p: f64) -> usize {
    let mut k = ((p * 255.0).floor() as i64).clamp(-1, 255);
    while k < 255 && (k + 1) as f64 / 255.0 <= p {
        k += 1;
    }
    while k >= 0 && k as f64 / 255.0 > p {
        k -= 1;
    }
    (k + 1) as usize
}

/// Precision/recall at thresholds `k/255`, binarising `pred >= t`.
pub fn pr_curve(pred: &Tensor, gt: &Tensor) -> Result<Vec<(f64, f64)>> {
    check(pred, gt)?;
    // hist[k]: pixels whose highest reached threshold index is k - 1.
    let mut hist_all = [0u64; PR_POINTS + 1];
    let mut hist_fg = [0u64; PR_POINTS + 1];
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let k = thresholds_reached(*p);
        hist_all[k] += 1;
        if *g == 1.0 {
            hist_fg[k] += 1;
        }
    }
    let positives = hist_fg.iter().sum::<u64>() as f64;
    let mut out = vec![(0.0, 0.0); PR_POINTS];
    let (mut predicted, mut tp) = (0u64, 0u64);
    // Threshold k is reached by every pixel with count > k.
    for k in (0..PR_POINTS).rev() {
        predicted += hist_all[k + 1];
        tp += hist_fg[k + 1];
        out[k] = precision_recall(tp as f64, predicted as f64, positives);
    }
    Ok(out)
}

/// F-measure at the per-sample threshold `min(2·mean(pred), 1)`.
pub fn f_beta_adaptive(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt)?;
    let t = (2.0 * pred.sum() / pred.len() as f64).min(1.0);
    let (mut tp, mut predicted, mut positives) = (0.0, 0.0, 0.0);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let on = *p >= t;
        predicted += f64::from(u8::from(on));
        positives += *g;
        if on && *g == 1.0 {
            tp += 1.0;
        }
    }
    let (p, r) = precision_recall(tp, predicted, positives);
    Ok(f_beta(p, r))
}

/// Squared Euclidean distance transform of one axis (lower envelope of
/// parabolas). `f` holds squared distances or `INF`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        if !f[q].is_finite() {
            continue;
        }
        if !f[v[k]].is_finite() {
            v[k] = q;
            continue;
        }
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = if f[v[k]].is_finite() { d * d + f[v[k]] } else { f64::INFINITY };
    }
}

/// Exact squared distance to the nearest foreground pixel.
fn squared_distance_to_foreground(fg: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut d: Vec<f64> = fg.iter().map(|on| if *on { 0.0 } else { f64::INFINITY }).collect();
    let m = h.max(w);
    let (mut col, mut out, mut v, mut z) = (vec![0.0; m], vec![0.0; m], vec![0usize; m], vec![0.0; m + 1]);
    for x in 0..w {
        for y in 0..h {
            col[y] = d[y * w + x];
        }
        edt_1d(&col[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        col[..w].copy_from_slice(&d[y * w..(y + 1) * w]);
        edt_1d(&col[..w], &mut out[..w], &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    d
}

/// Index of the nearest foreground pixel at squared distance `d2`, breaking
/// ties by row then column.
fn nearest_foreground(fg: &[bool], h: usize, w: usize, y: usize, x: usize, d2: f64) -> usize {
    let d2 = d2 as i64;
    let r = (d2 as f64).sqrt() as i64 + 1;
    for dy in -r..=r {
        let rest = d2 - dy * dy;
        if rest < 0 {
            continue;
        }
        let mut dx = (rest as f64).sqrt() as i64;
        while dx * dx > rest {
            dx -= 1;
        }
        while (dx + 1) * (dx + 1) <= rest {
            dx += 1;
        }
        if dx * dx != rest {
            continue;
        }
        let ny = y as i64 + dy;
        if ny < 0 || ny >= h as i64 {
            continue;
        }
        for nx in [x as i64 - dx, x as i64 + dx] {
            if nx >= 0 && nx < w as i64 && fg[ny as usize * w + nx as usize] {
                return ny as usize * w + nx as usize;
            }
        }
    }
    unreachable!("distance transform promised a foreground pixel at squared distance {d2}")
}

fn gaussian_1d() -> Vec<f64> {
    let r = GAUSS_RADIUS as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Normalised 7×7 Gaussian filter with zero padding, applied separably.
fn gaussian_filter(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_1d();
    let r = GAUSS_RADIUS as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = xx as i64 + i as i64 - r;
                if sx >= 0 && sx < w as i64 {
                    acc += kv * x[y * w + sx as usize];
                }
            }
            tmp[y * w + xx] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as i64 + i as i64 - r;
                if sy >= 0 && sy < h as i64 {
                    acc += kv * tmp[sy as usize * w + xx];
                }
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

/// Weighted F-measure (β² = 1).
///
/// Background errors are replaced by the error of the nearest foreground
/// pixel, smoothed by a Gaussian, kept as `min(raw, smoothed)` inside the
/// object, and background pixels are weighted by
/// `2 − exp(ln(0.5)/5 · distance)`.
pub fn f_w_beta(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt)?;
    let [n, c, h, w] = gt.shape();
    if n * c != 1 {
        return Err(Error::Shape(format!("f_w_beta expects a single plane, got {:?}", gt.shape())));
    }
    let fg: Vec<bool> = gt.data().iter().map(|g| *g == 1.0).collect();
    if !fg.iter().any(|f| *f) {
        return Err(Error::EmptyGroundTruth);
    }
    let e: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).collect();
    let d2 = squared_distance_to_foreground(&fg, h, w);
    let mut et = e.clone();
    for i in 0..h * w {
        if !fg[i] {
            et[i] = e[nearest_foreground(&fg, h, w, i / w, i % w, d2[i])];
        }
    }
    let ea = gaussian_filter(&et, h, w);
    let alpha = 0.5f64.ln() / 5.0;
    let (mut fg_count, mut ew_fg, mut ew_bg) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if fg[i] {
            fg_count += 1.0;
            ew_fg += if ea[i] < e[i] { ea[i] } else { e[i] };
        } else {
            ew_bg += e[i] * (2.0 - (alpha * d2[i].sqrt()).exp());
        }
    }
    let eps = f64::EPSILON;
    let tp = fg_count - ew_fg;
    let recall = 1.0 - ew_fg / fg_count;
    let precision = tp / (eps + tp + ew_bg);
    let b2 = WEIGHTED_BETA_SQ;
    Ok((1.0 + b2) * recall * precision / (eps + recall + b2 * precision))
}

/// Per-dataset evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub f_beta_max: f64,
    pub f_beta_adaptive: f64,
    pub f_w_beta: f64,
    /// `(precision, recall)` at thresholds `k/255`.
    pub pr: Vec<(f64, f64)>,
    pub n_samples: usize,
}

#[derive(Clone, Debug)]
struct SampleMetrics {
    mae: f64,
    adaptive: f64,
    weighted: f64,
    pr: Vec<(f64, f64)>,
}

fn sample_metrics(pred: &Tensor, gt: &Tensor) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        mae: mae(pred, gt)?,
        adaptive: f_beta_adaptive(pred, gt)?,
        weighted: f_w_beta(pred, gt)?,
        pr: pr_curve(pred, gt)?,
    })
}

/// Averages per-sample metrics; the PR curve is averaged per threshold and
/// `f_beta_max` is taken over the averaged curve.
pub fn aggregate(samples: &[(Tensor, Tensor)]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("metric aggregation over zero samples"));
    }
    let per: Vec<SampleMetrics> = par::map_slice(samples, |(p, g)| sample_metrics(p, g))
        .into_iter()
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    let mut pr = vec![(0.0, 0.0); PR_POINTS];
    for s in &per {
        for (acc, (p, r)) in pr.iter_mut().zip(&s.pr) {
            acc.0 += p;
            acc.1 += r;
        }
    }
    for acc in &mut pr {
        acc.0 /= n;
        acc.1 /= n;
    }
    let f_beta_max = pr.iter().map(|(p, r)| f_beta(*p, *r)).fold(0.0, f64::max);
    Ok(MetricReport {
        mae: mean(|s| s.mae),
        f_beta_max,
        f_beta_adaptive: mean(|s| s.adaptive),
        f_w_beta: mean(|s| s.weighted),
        pr,
        n_samples: per.len(),
    })
}

impl MetricReport {
    /// Scalar metrics in a fixed order.
    pub fn scalars(&self) -> [(&'static str, f64); 4] {
        [
            ("mae", self.mae),
            ("f_beta_max", self.f_beta_max),
            ("f_beta_adaptive", self.f_beta_adaptive),
            ("f_w_beta", self.f_w_beta),
        ]
    }

    /// Flat `key = value` record, PR points included.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        writeln!(s, "n_samples = {}", self.n_samples).unwrap();
        for (k, v) in self.scalars() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        for (k, (p, r)) in self.pr.iter().enumerate() {
            writeln!(s, "pr_{k:03} = {p} {r}").unwrap();
        }
        s
    }

    /// `dataset,model,metric,value` rows (no header).
    pub fn to_csv_rows(&self, dataset: &str, model: &str) -> String {
        let mut s = String::new();
        for (k, v) in self.scalars() {
            writeln!(s, "{dataset},{model},{k},{v}").unwrap();
        }
        s
    }

    pub const CSV_HEADER: &'static str = "dataset,model,metric,value";
}
