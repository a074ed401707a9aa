//! Pixel IoU, class remapping and line-level F1.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Error, Result};
use crate::page::{LineRecord, IGNORE_LABEL};
use crate::postprocess::{argmax_by, ProbabilityMap};

/// `(ground truth, prediction)` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes], ignored: 0 }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one page. Pixels whose ground truth is [`IGNORE_LABEL`] or
    /// whose `ignore` flag is set are only counted as ignored.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], ignore: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || ignore.is_some_and(|m| m.len() != gt.len()) {
            return Err(contract!("masks of {} and {} pixels are not congruent", pred.len(), gt.len()));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == IGNORE_LABEL || ignore.is_some_and(|m| m[i]) {
                self.ignored += 1;
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(input!("label {} is outside {} classes", p.max(g), self.classes));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(contract!("cannot merge {} and {} class matrices", self.classes, other.classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.ignored += other.ignored;
        Ok(())
    }

    /// The same counts with both axes collapsed under `scheme`.
    pub fn remapped(&self, scheme: RemapScheme) -> Confusion {
        let mut out = Confusion::new(scheme.classes());
        out.ignored = self.ignored;
        for g in 0..self.classes {
            for p in 0..self.classes {
                let (gl, pl) = (scheme.lookup(g as u8) as usize, scheme.lookup(p as u8) as usize);
                out.counts[gl * out.classes + pl] += self.get(g, p);
            }
        }
        out
    }

    /// IoU of a group of classes treated as one.
    pub fn group_iou(&self, group: &[usize]) -> Option<f64> {
        let inside = |c: usize| group.contains(&c);
        let (mut inter, mut union) = (0u64, 0u64);
        for g in 0..self.classes {
            for p in 0..self.classes {
                let n = self.get(g, p);
                match (inside(g), inside(p)) {
                    (true, true) => {
                        inter += n;
                        union += n;
                    }
                    (true, false) | (false, true) => union += n,
                    _ => {}
                }
            }
        }
        (union > 0).then(|| inter as f64 / union as f64)
    }

    /// Per-class IoU; `None` for classes absent from both masks, which
    /// are also left out of the mean.
    pub fn iou(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = (0..self.classes).map(|c| self.group_iou(&[c])).collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        IouReport { per_class, mean }
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// IoU of one pair of masks.
pub fn iou(pred: &[u8], gt: &[u8], ignore: Option<&[bool]>, classes: usize) -> Result<IouReport> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt, ignore)?;
    Ok(c.iou())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemapScheme {
    /// Background, figure, and every other element class as text.
    #[serde(rename = "3class")]
    ThreeClass,
}

impl RemapScheme {
    pub fn classes(self) -> usize {
        3
    }

    pub fn class_names(self) -> [&'static str; 3] {
        ["background", "figure", "text"]
    }

    fn lookup(self, l: u8) -> u8 {
        match l {
            0 | 1 | IGNORE_LABEL => l,
            _ => 2,
        }
    }
}

impl FromStr for RemapScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3class" => Ok(RemapScheme::ThreeClass),
            _ => Err(input!("unknown remap scheme {s:?}")),
        }
    }
}

/// Collapses labels under a scheme; ignore labels pass through.
pub fn remap_binary(mask: &[u8], scheme: RemapScheme) -> Vec<u8> {
    mask.iter().map(|&l| scheme.lookup(l)).collect()
}

/// IoU of the non-text group on full-class confusion counts: background
/// and figure, plus tables when they are not counted as text.
pub fn non_text_iou(c: &Confusion, tables_as_text: bool) -> Option<f64> {
    if tables_as_text {
        c.group_iou(&[0, 1])
    } else {
        c.group_iou(&[0, 1, 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Ground-truth lines of the class.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineReport {
    pub per_class: Vec<Prf>,
    pub predictions: Vec<u8>,
}

/// Predicts each line as the argmax of its mean class probability and
/// scores the predictions per class. Undefined ratios are `None`; F1 is
/// zero when precision and recall are both zero.
pub fn line_f1(p: &ProbabilityMap, lines: &[LineRecord]) -> Result<LineReport> {
    if lines.is_empty() {
        return Err(input!("no text lines to score"));
    }
    let classes = p.classes();
    let mut predictions = Vec::with_capacity(lines.len());
    for l in lines {
        let b = l.bbox;
        if b.is_empty() || !b.fits_in(p.width(), p.height()) {
            return Err(input!("line box {b:?} is empty or exceeds the {}x{} map", p.width(), p.height()));
        }
        if l.class.index() as usize >= classes {
            return Err(input!("line class {} is outside {classes} classes", l.class));
        }
        let mut mean = vec![0.0f64; classes];
        for y in b.y..b.bottom() {
            for x in b.x..b.right() {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += p.get(c, y, x) as f64;
                }
            }
        }
        let n = b.area() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        predictions.push(argmax_by(classes, |c| mean[c]) as u8);
    }
    let per_class = (0..classes)
        .map(|c| {
            let c = c as u8;
            let gt = |i: usize| lines[i].class.index() == c;
            let tp = (0..lines.len()).filter(|&i| gt(i) && predictions[i] == c).count();
            let predicted = predictions.iter().filter(|&&q| q == c).count();
            let support = (0..lines.len()).filter(|&i| gt(i)).count();
            let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
            let recall = (support > 0).then(|| tp as f64 / support as f64);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            Prf { precision, recall, f1, support }
        })
        .collect();
    Ok(LineReport { per_class, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::page::{DocClass, PixelBox};

    #[test]
    fn hand_case_quarter() {
        // pred A at (0,0),(0,1),(1,0); gt A at (0,0),(1,1).
        let pred = [1, 1, 1, 0];
        let gt = [1, 0, 0, 1];
        let r = iou(&pred, &gt, None, 2).unwrap();
        assert_eq!(r.per_class[1], Some(0.25));
        assert_eq!(r.per_class[0], Some(0.0));
        assert_eq!(r.mean, Some(0.125));
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let m = [0, 3, 3, 6, 6, 6];
        let r = iou(&m, &m, None, 7).unwrap();
        assert_eq!(r.per_class.iter().flatten().count(), 3);
        assert!(r.per_class.iter().flatten().all(|&v| v == 1.0));
        assert_eq!(r.mean, Some(1.0));
        let r = iou(&[1, 1], &[2, 2], None, 3).unwrap();
        assert_eq!((r.per_class[1], r.per_class[2], r.per_class[0]), (Some(0.0), Some(0.0), None));
    }

    #[test]
    fn ignored_pixels_are_counted_apart() {
        let mut c = Confusion::new(3);
        c.add(&[1, 2, 0], &[1, IGNORE_LABEL, 2], Some(&[false, false, true])).unwrap();
        assert_eq!((c.total(), c.ignored()), (1, 2));
        assert!(c.add(&[1], &[1, 2], None).is_err());
        assert!(matches!(c.add(&[5], &[1], None), Err(Error::Input(_))));
    }

    #[test]
    fn remap_lookup() {
        let m = [0, 1, 2, 3, 4, 5, 6, IGNORE_LABEL];
        assert_eq!(remap_binary(&m, RemapScheme::ThreeClass), vec![0, 1, 2, 2, 2, 2, 2, IGNORE_LABEL]);
        assert!("2class".parse::<RemapScheme>().is_err());
        assert_eq!(serde_json::to_string(&RemapScheme::ThreeClass).unwrap(), "\"3class\"");
    }

    #[test]
    fn non_text_groupings() {
        let mut c = Confusion::new(7);
        // gt: bg, figure, table, paragraph; pred: bg, table, table, paragraph.
        c.add(&[0, 2, 2, 6], &[0, 1, 2, 6], None).unwrap();
        assert_eq!(non_text_iou(&c, true), Some(0.5));
        assert_eq!(non_text_iou(&c, false), Some(1.0));
    }

    fn line(y: usize, class: DocClass) -> LineRecord {
        LineRecord { bbox: PixelBox::new(0, y, 4, 1), class }
    }

    #[test]
    fn line_scores() {
        let (h, w) = (3, 4);
        let mut data = vec![0.0f32; 7 * h * w];
        let mut set = |c: usize, y: usize, v: f32| (0..w).for_each(|x| data[(c * h + y) * w + x] = v);
        set(4, 0, 1.0);
        set(6, 1, 1.0);
        set(6, 2, 0.6);
        set(4, 2, 0.4);
        let p = ProbabilityMap::new(7, h, w, data).unwrap();
        let lines = [line(0, DocClass::Caption), line(1, DocClass::Paragraph), line(2, DocClass::Caption)];
        let r = line_f1(&p, &lines).unwrap();
        assert_eq!(r.predictions, vec![4, 6, 6]);
        let cap = r.per_class[4];
        assert_eq!((cap.precision, cap.recall, cap.support), (Some(1.0), Some(0.5), 2));
        assert!((cap.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let par = r.per_class[6];
        assert_eq!((par.precision, par.recall), (Some(0.5), Some(1.0)));
        assert_eq!(r.per_class[1].f1, None);
        assert!(line_f1(&p, &[]).is_err());
        assert!(line_f1(&p, &[line(3, DocClass::Caption)]).is_err());
    }
}
