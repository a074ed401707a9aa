//! Box-guided cleanup of segmentation outputs and probability-weighted
//! visualization.

use image::{Rgb, RgbImage};

use crate::error::{contract, input, Result};
use crate::page::{DocClass, PixelBox};

/// Per-pixel class probabilities, stored class-major (`C×H×W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    /// Checks that entries lie in `[0, 1]` and each pixel sums to one
    /// within `1e-5`.
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if classes == 0 || data.len() != classes * height * width {
            return Err(contract!("probability data of length {} does not match {classes}x{height}x{width}", data.len()));
        }
        if data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(input!("probabilities must lie in [0, 1]"));
        }
        let m = Self { classes, height, width, data };
        for i in 0..height * width {
            let s: f64 = (0..classes).map(|c| m.data[c * height * width + i] as f64).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(input!("probabilities at pixel {i} sum to {s}"));
            }
        }
        Ok(m)
    }

    /// Channel-wise softmax of `C×H×W` logits.
    pub fn from_logits(classes: usize, height: usize, width: usize, logits: &[f32]) -> Result<Self> {
        let hw = height * width;
        if classes == 0 || logits.len() != classes * hw {
            return Err(contract!("logit data of length {} does not match {classes}x{height}x{width}", logits.len()));
        }
        let mut data = vec![0.0f32; logits.len()];
        for i in 0..hw {
            let m = (0..classes).map(|c| logits[c * hw + i]).fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = (0..classes).map(|c| ((logits[c * hw + i] - m) as f64).exp()).sum();
            for c in 0..classes {
                data[c * hw + i] = (((logits[c * hw + i] - m) as f64).exp() / z) as f32;
            }
        }
        Ok(Self { classes, height, width, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Most likely class per pixel; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.height * self.width)
            .map(|i| {
                let p = |c: usize| self.data[c * self.height * self.width + i];
                argmax_by(self.classes, p) as u8
            })
            .collect()
    }

    /// Crops to the top-left `height×width` corner.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(contract!("crop {height}x{width} exceeds {}x{}", self.height, self.width));
        }
        let mut data = Vec::with_capacity(self.classes * height * width);
        for c in 0..self.classes {
            for y in 0..height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row..row + width]);
            }
        }
        Ok(Self { classes: self.classes, height, width, data })
    }

    /// Nearest-neighbour resample, sampling source pixel
    /// `floor((i + 0.5) · src / dst)`.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let sy = |y: usize| (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
        let sx = |x: usize| (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
        let mut data = Vec::with_capacity(self.classes * height * width);
        for c in 0..self.classes {
            for y in 0..height {
                for x in 0..width {
                    data.push(self.get(c, sy(y), sx(x)));
                }
            }
        }
        Self { classes: self.classes, height, width, data }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_by<T: PartialOrd>(n: usize, f: impl Fn(usize) -> T) -> usize {
    let mut best = 0;
    let mut top = f(0);
    for c in 1..n {
        let v = f(c);
        if v > top {
            best = c;
            top = v;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxNode {
    pub bbox: PixelBox,
    pub parent: Option<usize>,
}

/// Boxes with containment links, iterated parents first.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTree {
    nodes: Vec<BoxNode>,
    order: Vec<usize>,
}

impl BoxTree {
    /// Each child must lie inside its parent and the links must be
    /// acyclic.
    pub fn new(nodes: Vec<BoxNode>) -> Result<Self> {
        let n = nodes.len();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            match node.parent {
                Some(p) if p >= n || p == i => return Err(input!("box {i} has an invalid parent {p}")),
                Some(p) => {
                    if !nodes[p].bbox.contains(&node.bbox) {
                        return Err(input!("box {i} is not contained in its parent {p}"));
                    }
                    children[p].push(i);
                }
                None => roots.push(i),
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack: Vec<usize> = roots.into_iter().rev().collect();
        while let Some(i) = stack.pop() {
            order.push(i);
            stack.extend(children[i].iter().rev());
        }
        if order.len() != n {
            return Err(input!("box parent links contain a cycle"));
        }
        Ok(Self { nodes, order })
    }

    /// Flat boxes; each box's parent is the smallest earlier-listed or
    /// strictly larger box that contains it.
    pub fn from_boxes(boxes: &[PixelBox]) -> Self {
        let nodes = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let parent = boxes
                    .iter()
                    .enumerate()
                    .filter(|&(j, o)| j != i && o.contains(b) && (o.area() > b.area() || j < i))
                    .min_by_key(|&(j, o)| (o.area(), j))
                    .map(|(j, _)| j);
                BoxNode { bbox: *b, parent }
            })
            .collect();
        Self::new(nodes).expect("containment links are acyclic")
    }

    pub fn nodes(&self) -> &[BoxNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Boxes with every parent before its descendants.
    pub fn iter(&self) -> impl Iterator<Item = &PixelBox> {
        self.order.iter().map(|&i| &self.nodes[i].bbox)
    }
}

/// Labels each box with the class of largest summed probability, writing
/// only pixels that are still background.
pub fn refine(p: &ProbabilityMap, boxes: &BoxTree) -> Result<Vec<u8>> {
    let (h, w) = (p.height, p.width);
    if let Some(b) = boxes.iter().find(|b| !b.fits_in(w, h)) {
        return Err(input!("box {b:?} exceeds the {w}x{h} map"));
    }
    let bg = DocClass::Background.index();
    let mut labels = vec![bg; h * w];
    for b in boxes.iter() {
        let mut sum = vec![0.0f64; p.classes];
        for y in b.y..b.bottom() {
            for x in b.x..b.right() {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += p.get(c, y, x) as f64;
                }
            }
        }
        let l = argmax_by(p.classes, |c| sum[c]) as u8;
        for y in b.y..b.bottom() {
            for x in b.x..b.right() {
                let v = &mut labels[y * w + x];
                if *v == bg {
                    *v = l;
                }
            }
        }
    }
    Ok(labels)
}

/// Display color of a class index; unknown indices are gray.
pub fn class_color(c: usize) -> [u8; 3] {
    u8::try_from(c).ok().and_then(DocClass::from_index).map_or([128, 128, 128], DocClass::color)
}

/// Each pixel takes its argmax class color scaled by that class's
/// probability.
pub fn visualize(p: &ProbabilityMap) -> RgbImage {
    let labels = p.argmax();
    RgbImage::from_fn(p.width as u32, p.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let l = labels[y * p.width + x] as usize;
        let q = p.get(l, y, x);
        let c = class_color(l);
        Rgb([0, 1, 2].map(|k| (c[k] as f32 * q).round() as u8))
    })
}

/// Colors a hard label mask.
pub fn colorize(labels: &[u8], width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| Rgb(class_color(labels[y as usize * width + x as usize] as usize)))
}
