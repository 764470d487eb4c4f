//! Metrics and reporting: ROC AUC (rank statistic with tie handling), the
//! independent two-sample t-test over repeated runs, CAM thresholding into
//! boxes, IoU, and deterministic CSV emission.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::GrayImage;
use crate::error::{Error, Result};

/// Per-run evaluation outcome of one fine-tuning experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub label_ratio: f64,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub per_class_auc: Vec<f64>,
    pub mean_auc: f64,
}

impl MetricsRecord {
    pub fn new(
        method: impl Into<String>,
        label_ratio: f64,
        seed: u64,
        class_names: Vec<String>,
        per_class_auc: Vec<f64>,
    ) -> Self {
        let mean_auc = per_class_auc.iter().sum::<f64>() / per_class_auc.len().max(1) as f64;
        MetricsRecord {
            method: method.into(),
            label_ratio,
            seed,
            class_names,
            per_class_auc,
            mean_auc,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("metrics encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MetricsRecord> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read metrics {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("metrics decode: {e}")))
    }
}

// ── ROC AUC ───────────────────────────────────────────────────────────────

/// Area under the ROC curve as the rank statistic
/// `P(score⁺ > score⁻) + ½·P(tie)`, exact over all positive/negative pairs
/// (ties get midranks).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Contract("labels must be 0/1".to_string()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Data(
            "undefined AUC: labels contain a single class".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // midranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

// ── two-sample t-test ─────────────────────────────────────────────────────

/// Smallest p-value reported when the pooled variance collapses to zero with
/// unequal means.
pub const P_VALUE_FLOOR: f64 = 1e-300;

/// Pooled-variance Student's t with `n₁+n₂−2` degrees of freedom and a
/// two-sided p-value.
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract(format!(
            "t-test needs at least two observations per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = |xs: &[f64], m: f64| xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    let pooled_var = (ss(a, ma) + ss(b, mb)) / (na + nb - 2.0);

    if pooled_var == 0.0 {
        return if ma == mb {
            Ok((0.0, 1.0))
        } else {
            // degenerate separation: report an underflow-floored p-value
            let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
            Ok((t, P_VALUE_FLOOR))
        };
    }

    let t = (ma - mb) / (pooled_var * (1.0 / na + 1.0 / nb)).sqrt();
    let df = na + nb - 2.0;
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numeric(format!("t-distribution with df {df}: {e}")))?;
    let p = (2.0 * dist.cdf(-t.abs())).max(P_VALUE_FLOOR);
    Ok((t, p))
}

// ── CAM boxes ─────────────────────────────────────────────────────────────

/// Axis-aligned pixel box, inclusive-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<PixelBox> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Contract(format!(
                "degenerate box [{x0},{y0},{x1},{y1}]"
            )));
        }
        Ok(PixelBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Connected components smaller than this many pixels are dropped.
pub const MIN_COMPONENT_AREA: usize = 16;

/// Threshold a confidence map, find 4-connected components, and return each
/// component's tight bounding box in row-major discovery order.
pub fn boxes_from_cam(heatmap: &GrayImage, threshold: f32) -> Result<Vec<PixelBox>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Contract(format!(
            "threshold must lie strictly inside (0,1), got {threshold}"
        )));
    }
    let n = heatmap.size;
    let mut visited = vec![false; n * n];
    let mut boxes = Vec::new();
    for start_y in 0..n {
        for start_x in 0..n {
            let idx = start_y * n + start_x;
            if visited[idx] || heatmap.pixels[idx] < threshold {
                continue;
            }
            // flood fill one component
            let mut queue = VecDeque::from([(start_x, start_y)]);
            visited[idx] = true;
            let (mut x0, mut y0, mut x1, mut y1) = (start_x, start_y, start_x, start_y);
            let mut area = 0usize;
            while let Some((x, y)) = queue.pop_front() {
                area += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                let mut push = |nx: usize, ny: usize, queue: &mut VecDeque<(usize, usize)>| {
                    let nidx = ny * n + nx;
                    if !visited[nidx] && heatmap.pixels[nidx] >= threshold {
                        visited[nidx] = true;
                        queue.push_back((nx, ny));
                    }
                };
                if x > 0 {
                    push(x - 1, y, &mut queue);
                }
                if x + 1 < n {
                    push(x + 1, y, &mut queue);
                }
                if y > 0 {
                    push(x, y - 1, &mut queue);
                }
                if y + 1 < n {
                    push(x, y + 1, &mut queue);
                }
            }
            if area >= MIN_COMPONENT_AREA {
                boxes.push(PixelBox { x0, y0, x1: x1 + 1, y1: y1 + 1 });
            }
        }
    }
    Ok(boxes)
}

/// Intersection over union of two boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    if ix1 <= ix0 || iy1 <= iy0 {
        return 0.0;
    }
    let inter = ((ix1 - ix0) * (iy1 - iy0)) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

/// Burn box perimeters into a copy of the image at full intensity.
pub fn draw_boxes(img: &GrayImage, boxes: &[PixelBox]) -> GrayImage {
    let mut out = img.clone();
    let n = out.size;
    for b in boxes {
        let x1 = b.x1.min(n).saturating_sub(1);
        let y1 = b.y1.min(n).saturating_sub(1);
        for x in b.x0..=x1 {
            out.pixels[b.y0 * n + x] = 1.0;
            out.pixels[y1 * n + x] = 1.0;
        }
        for y in b.y0..=y1 {
            out.pixels[y * n + b.x0] = 1.0;
            out.pixels[y * n + x1] = 1.0;
        }
    }
    out
}

// ── report emission ───────────────────────────────────────────────────────

/// Render run metrics as CSV. Per-class rows come first (sorted by method,
/// seed, class), then one aggregate row per method; the aggregate row of a
/// non-baseline method carries the pooled-t p-value against the baseline when
/// both methods contributed exactly three runs.
pub fn emit_report(records: &[MetricsRecord], baseline_method: &str, out_path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("no metrics records to report".to_string()));
    }
    let csv = render_report(records, baseline_method)?;
    std::fs::write(out_path, csv)?;
    Ok(())
}

pub fn render_report(records: &[MetricsRecord], baseline_method: &str) -> Result<String> {
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.method, a.seed).cmp(&(&b.method, b.seed)));

    let mut methods: Vec<String> = sorted.iter().map(|r| r.method.clone()).collect();
    methods.dedup();

    let mean_aucs = |method: &str| -> Vec<f64> {
        sorted
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.mean_auc)
            .collect()
    };
    let baseline_aucs = mean_aucs(baseline_method);

    let mut out = String::from("method,label_ratio,seed,class,auc,mean_auc,p_value_vs_baseline\n");
    for rec in &sorted {
        for (class, auc) in rec.class_names.iter().zip(&rec.per_class_auc) {
            out.push_str(&format!(
                "{},{:.4},{},{},{:.6},{:.6},\n",
                rec.method, rec.label_ratio, rec.seed, class, auc, rec.mean_auc
            ));
        }
    }
    for method in &methods {
        let aucs = mean_aucs(method);
        let avg = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let ratio = sorted
            .iter()
            .find(|r| &r.method == method)
            .map(|r| r.label_ratio)
            .unwrap_or(0.0);
        let p_cell = if method != baseline_method && aucs.len() == 3 && baseline_aucs.len() == 3 {
            let (_, p) = two_sample_t(&aucs, &baseline_aucs)?;
            format!("{p:.6e}")
        } else {
            String::new()
        };
        out.push_str(&format!(
            "{method},{ratio:.4},avg,all,,{avg:.6},{p_cell}\n"
        ));
    }
    Ok(out)
}
