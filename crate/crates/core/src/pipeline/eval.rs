use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::segment::load_probabilities;
use crate::error::{input, Result};
use crate::page::{list_pages, pages_dir, read_page, DocClass};
use crate::segeval::{line_f1, non_text_iou, Confusion, Prf, RemapScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Score a collapsed label set instead of all classes.
    pub remap: Option<RemapScheme>,
    /// Also score text lines from saved probability maps.
    pub lines: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonTextIou {
    pub tables_as_text: Option<f64>,
    pub tables_as_non_text: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub pages: usize,
    pub scheme: String,
    pub classes: Vec<String>,
    /// Per-class IoU; `null` for classes absent from both masks.
    pub iou: BTreeMap<String, Option<f64>>,
    pub mean_iou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub ignored_pixels: u64,
    pub non_text_iou: Option<NonTextIou>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lines: Option<BTreeMap<String, Prf>>,
}

fn mismatch(label: &str, stems: &[&String]) -> crate::Error {
    let shown: Vec<&str> = stems.iter().take(10).map(|s| s.as_str()).collect();
    input!("{} pages only in the {label} set: {}", stems.len(), shown.join(", "))
}

/// Compares a prediction dataset against ground truth with the same stems.
pub fn evaluate(pred_root: &Path, gt_root: &Path, opts: EvalOptions) -> Result<EvalReport> {
    let pred = list_pages(pred_root)?;
    let gt = list_pages(gt_root)?;
    let only_pred: Vec<&String> = pred.iter().filter(|s| !gt.contains(s)).collect();
    let only_gt: Vec<&String> = gt.iter().filter(|s| !pred.contains(s)).collect();
    if !only_pred.is_empty() {
        return Err(mismatch("prediction", &only_pred));
    }
    if !only_gt.is_empty() {
        return Err(mismatch("ground truth", &only_gt));
    }
    if gt.is_empty() {
        return Err(input!("no pages under {}", gt_root.display()));
    }

    let full = DocClass::ALL.len();
    let mut confusion = Confusion::new(full);
    let mut line_counts: Vec<(u64, u64, u64, usize)> = vec![(0, 0, 0, 0); full];
    for stem in &gt {
        let truth = read_page(gt_root, stem)?;
        let p = read_page(pred_root, stem)?;
        let gt_mask = truth.mask.ok_or_else(|| input!("ground-truth page {stem} has no mask"))?;
        let pr_mask = p.mask.ok_or_else(|| input!("predicted page {stem} has no mask"))?;
        if gt_mask.dimensions() != pr_mask.dimensions() {
            return Err(input!(
                "page {stem}: prediction is {:?}, ground truth {:?}",
                pr_mask.dimensions(),
                gt_mask.dimensions()
            ));
        }
        confusion.add(pr_mask.as_raw(), gt_mask.as_raw(), None)?;
        if opts.lines {
            let path = pages_dir(pred_root).join(format!("{stem}.prob.bin"));
            if !path.exists() {
                return Err(input!("line scoring needs {}; segment with probabilities on", path.display()));
            }
            let probs = load_probabilities(&path)?;
            let records = truth.sidecar.line_records();
            if records.is_empty() {
                continue;
            }
            let r = line_f1(&probs, &records)?;
            for (rec, &pred) in records.iter().zip(&r.predictions) {
                let t = rec.class.index() as usize;
                let p = pred as usize;
                line_counts[t].3 += 1;
                if t == p {
                    line_counts[t].0 += 1;
                } else {
                    line_counts[p].1 += 1;
                    line_counts[t].2 += 1;
                }
            }
        }
    }

    let (scheme, names, scored) = match opts.remap {
        Some(s) => {
            let c = confusion.remapped(s);
            ("3class".to_string(), s.class_names().iter().map(|n| n.to_string()).collect::<Vec<_>>(), c)
        }
        None => ("full".to_string(), DocClass::ALL.iter().map(|c| c.name().to_string()).collect(), confusion.clone()),
    };
    let report = scored.iou();
    let iou = names.iter().cloned().zip(report.per_class.iter().copied()).collect();
    let non_text = opts.remap.is_none().then(|| NonTextIou {
        tables_as_text: non_text_iou(&confusion, true),
        tables_as_non_text: non_text_iou(&confusion, false),
    });
    let lines = opts.lines.then(|| {
        DocClass::ALL
            .iter()
            .filter(|c| c.is_text())
            .map(|c| {
                let (tp, fp, fn_, support) = line_counts[c.index() as usize];
                (c.name().to_string(), prf(tp, fp, fn_, support))
            })
            .collect()
    });
    Ok(EvalReport {
        pages: gt.len(),
        scheme,
        classes: names,
        iou,
        mean_iou: report.mean,
        pixel_accuracy: scored.pixel_accuracy(),
        ignored_pixels: confusion.ignored(),
        non_text_iou: non_text,
        lines,
    })
}

fn prf(tp: u64, fp: u64, fn_: u64, support: usize) -> Prf {
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Prf { precision, recall, f1, support }
}
