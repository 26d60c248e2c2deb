//! Evaluation measures for binary segmentation against binary ground truth:
//! MAE, threshold-averaged F-measure (β² = 0.3), mean E-measure, S-measure
//! (α = 0.5), a boundary-band morphology helper, and directory-level report
//! generation with CSV output.
//!
//! All arithmetic is f64 regardless of network precision. F and E share the
//! threshold grid k/256, k = 1..255, binarizing with ≥, so a perfect binary
//! prediction scores exactly 1.

use crate::data::read_pgm;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

const EPS: f64 = 1e-8;
const BETA2: f64 = 0.3;

fn assert_maps(pred: &[f64], gt: &[f64]) {
    assert_eq!(pred.len(), gt.len(), "pred/gt shape mismatch");
    debug_assert!(pred.iter().all(|&v| (0.0..=1.0).contains(&v)), "pred outside [0,1]");
    debug_assert!(gt.iter().all(|&v| v == 0.0 || v == 1.0), "gt is not binary");
}

/// Histogram bin such that pred ≥ k/256 ⟺ bin(pred) ≥ k for k = 1..255.
fn bin(v: f64) -> usize {
    ((v * 256.0).floor() as usize).min(255)
}

/// Suffix-summed histograms of foreground and background prediction values:
/// (fg[k], bg[k]) = counts with bin ≥ k.
fn threshold_counts(pred: &[f64], gt: &[f64]) -> ([f64; 257], [f64; 257]) {
    let mut fg_hist = [0u32; 256];
    let mut bg_hist = [0u32; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == 1.0 {
            fg_hist[bin(p)] += 1;
        } else {
            bg_hist[bin(p)] += 1;
        }
    }
    let mut fg = [0.0f64; 257];
    let mut bg = [0.0f64; 257];
    for k in (0..256).rev() {
        fg[k] = fg[k + 1] + fg_hist[k] as f64;
        bg[k] = bg[k + 1] + bg_hist[k] as f64;
    }
    (fg, bg)
}

// ── the four measures ───────────────────────────────────────────────────

/// Mean absolute error.
pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "pred/gt shape mismatch");
    pred.iter().zip(gt).map(|(&p, &g)| (p - g).abs()).sum::<f64>() / pred.len() as f64
}

/// F-measure averaged over the 255-threshold grid. Precision is 0 when
/// nothing is predicted positive, recall is 0 on an empty ground truth, and
/// F is 0 when β²·P + R vanishes.
pub fn mean_fbeta(pred: &[f64], gt: &[f64]) -> f64 {
    assert_maps(pred, gt);
    let (fg, bg) = threshold_counts(pred, gt);
    let nf = fg[0];
    let mut total = 0.0;
    for k in 1..=255 {
        let (tp, fp) = (fg[k], bg[k]);
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if nf > 0.0 { tp / nf } else { 0.0 };
        let denom = BETA2 * p + r;
        if denom > 0.0 {
            total += (1.0 + BETA2) * p * r / denom;
        }
    }
    total / 255.0
}

/// Enhanced-alignment measure averaged over the threshold grid. Degenerate
/// ground truths use the complement/identity rules; otherwise the alignment
/// of the bias maps is enhanced by ((ξ + 1)/2)².
pub fn mean_emeasure(pred: &[f64], gt: &[f64]) -> f64 {
    assert_maps(pred, gt);
    let n = pred.len() as f64;
    let (fg, bg) = threshold_counts(pred, gt);
    let nf = fg[0];
    let nb = bg[0];
    let mut total = 0.0;
    for k in 1..=255 {
        let (a, b) = (fg[k], bg[k]);
        let score = if nf == 0.0 {
            (n - (a + b)) / n
        } else if nb == 0.0 {
            (a + b) / n
        } else {
            let mean_g = nf / n;
            let mean_b = (a + b) / n;
            let xi = |g: f64, bm: f64| 2.0 * g * bm / (g * g + bm * bm + EPS);
            let enh = |g: f64, bm: f64| {
                let x = xi(g, bm) + 1.0;
                x * x / 4.0
            };
            (a * enh(1.0 - mean_g, 1.0 - mean_b)
                + (nf - a) * enh(1.0 - mean_g, -mean_b)
                + b * enh(-mean_g, 1.0 - mean_b)
                + (nb - b) * enh(-mean_g, -mean_b))
                / n
        };
        total += score;
    }
    total / 255.0
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n−1); 0 for fewer than two values.
fn sample_std(v: &[f64], mean: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    (v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn region_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mx = mean_of(x);
    let my = mean_of(y);
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (&a, &b) in x.iter().zip(y) {
            sx += (a - mx) * (a - mx);
            sy += (b - my) * (b - my);
            sxy += (a - mx) * (b - my);
        }
        let d = (n - 1) as f64;
        sx /= d;
        sy /= d;
        sxy /= d;
    }
    (4.0 * mx * my * sxy + EPS) / ((mx * mx + my * my) * (sx + sy) + EPS)
}

/// Structural measure S = 0.5·S_object + 0.5·S_region, clamped into [0,1].
/// Degenerate ground truths score 1 − mean(pred) (empty) or mean(pred)
/// (full). The region term splits at the foreground centroid and weights
/// quadrant ssim by foreground mass.
pub fn smeasure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    assert_eq!(pred.len(), h * w, "pred shape mismatch with {h}x{w}");
    assert_maps(pred, gt);
    let n = (h * w) as f64;
    let mass: f64 = gt.iter().sum();
    let mu = mass / n;
    if mu == 0.0 {
        return 1.0 - mean_of(pred);
    }
    if mu == 1.0 {
        return mean_of(pred);
    }

    // object term
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g == 0.0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let o_score = |v: &[f64]| {
        let m = mean_of(v);
        2.0 * m / (m * m + 1.0 + 2.0 * sample_std(v, m) + EPS)
    };
    let s_o = mu * o_score(&fg) + (1.0 - mu) * o_score(&bg);

    // region term: quadrants at the rounded foreground centroid
    let (mut com_r, mut com_c) = (0.0f64, 0.0f64);
    for i in 0..h {
        for j in 0..w {
            if gt[i * w + j] == 1.0 {
                com_r += i as f64 + 0.5;
                com_c += j as f64 + 0.5;
            }
        }
    }
    let cy = ((com_r / mass).round() as usize).clamp(1, h - 1);
    let cx = ((com_c / mass).round() as usize).clamp(1, w - 1);
    let mut s_r = 0.0;
    for (r0, r1, c0, c1) in [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)] {
        let mut x = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut y = Vec::with_capacity(x.capacity());
        let mut q_mass = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                x.push(pred[i * w + j]);
                y.push(gt[i * w + j]);
                q_mass += gt[i * w + j];
            }
        }
        s_r += q_mass / mass * region_ssim(&x, &y);
    }
    (0.5 * s_o + 0.5 * s_r).clamp(0.0, 1.0)
}

// ── boundary band ───────────────────────────────────────────────────────

fn window_filter(src: &[f64], h: usize, w: usize, radius: usize, maximum: bool) -> Vec<f64> {
    let pick = |a: f64, b: f64| if maximum { a.max(b) } else { a.min(b) };
    let mut horiz = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius).min(w - 1);
            let mut v = src[i * w + lo];
            for q in lo + 1..=hi {
                v = pick(v, src[i * w + q]);
            }
            horiz[i * w + j] = v;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for i in 0..h {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(h - 1);
        for j in 0..w {
            let mut v = horiz[lo * w + j];
            for q in lo + 1..=hi {
                v = pick(v, horiz[q * w + j]);
            }
            out[i * w + j] = v;
        }
    }
    out
}

/// dilate(gt, r) XOR erode(gt, r) under a square structuring element: the
/// two-sided band around the foreground boundary.
pub fn boundary_band(gt: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    assert!(radius >= 1, "radius must be >= 1");
    assert_eq!(gt.len(), h * w, "gt shape mismatch");
    let dil = window_filter(gt, h, w, radius, true);
    let ero = window_filter(gt, h, w, radius, false);
    dil.iter().zip(&ero).map(|(&d, &e)| f64::from(d != e)).collect()
}

// ── dataset evaluation ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub id: String,
    pub mae: f64,
    pub mean_f: f64,
    pub mean_e: f64,
    pub s_measure: f64,
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
    pub aggregate: ImageMetrics,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,mae,mean_f,mean_e,s_measure\n");
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id, r.mae, r.mean_f, r.mean_e, r.s_measure
            ));
        }
        out
    }
}

fn pgm_ids(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let id = stem.rsplit_once('_').map(|(_, id)| id.to_string()).unwrap_or(stem);
        if let Some(old) = out.insert(id.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "duplicate id {id}: {} and {}",
                old.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Score every prediction PGM in `pred_dir` against the ground-truth PGM
/// with the same trailing id in `gt_dir` (ground truth binarized at 128).
/// Rows are sorted by id; the aggregate row is the unweighted column mean.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = pgm_ids(pred_dir)?;
    let gts = pgm_ids(gt_dir)?;
    for id in preds.keys() {
        if !gts.contains_key(id) {
            return Err(Error::Data(format!(
                "prediction {id} has no ground truth in {}",
                gt_dir.display()
            )));
        }
    }
    for id in gts.keys() {
        if !preds.contains_key(id) {
            return Err(Error::Data(format!(
                "ground truth {id} has no prediction in {}",
                pred_dir.display()
            )));
        }
    }
    if preds.is_empty() {
        return Err(Error::Data(format!(
            "no prediction/ground-truth pairs between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (id, ppath) in &preds {
        let pred_map = read_pgm(&fs::read(ppath).map_err(|e| Error::io(ppath, e))?)?;
        let gpath = &gts[id];
        let gt_map = read_pgm(&fs::read(gpath).map_err(|e| Error::io(gpath, e))?)?;
        if pred_map.shape() != gt_map.shape() {
            return Err(Error::Data(format!(
                "id {id}: prediction {:?} vs ground truth {:?}",
                pred_map.shape(),
                gt_map.shape()
            )));
        }
        let (h, w) = (pred_map.shape()[0], pred_map.shape()[1]);
        let pred = pred_map.data();
        let gt: Vec<f64> = gt_map.data().iter().map(|&v| f64::from(v >= 0.5)).collect();
        rows.push(ImageMetrics {
            id: id.clone(),
            mae: mae(pred, &gt),
            mean_f: mean_fbeta(pred, &gt),
            mean_e: mean_emeasure(pred, &gt),
            s_measure: smeasure(pred, &gt, h, w),
        });
    }
    let m = rows.len() as f64;
    let aggregate = ImageMetrics {
        id: "AGGREGATE".to_string(),
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / m,
        mean_f: rows.iter().map(|r| r.mean_f).sum::<f64>() / m,
        mean_e: rows.iter().map(|r| r.mean_e).sum::<f64>() / m,
        s_measure: rows.iter().map(|r| r.s_measure).sum::<f64>() / m,
    };
    Ok(MetricReport { rows, aggregate })
}
