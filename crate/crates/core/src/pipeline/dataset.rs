use std::path::Path;

use dsse_tensor::Tensor;

use crate::embedding::{build_embedding_map, EmbeddingTable};
use crate::error::{input, Result};
use crate::model::{prepare_labels, preprocess, PreprocessConfig, Preprocessed};
use crate::page::{list_pages, read_page, DocumentPage, PixelBox, SentenceRecord, IGNORE_LABEL};

/// A page ready for the network.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stem: String,
    pub pre: Preprocessed,
    /// Labels on the padded grid; `None` for unlabeled pages.
    pub labels: Option<Vec<u8>>,
    /// Element boxes on the padded grid.
    pub boxes: Vec<PixelBox>,
    /// Text map on the padded grid, for models that take text.
    pub embedding: Option<Tensor>,
}

/// Sentence records mapped onto the preprocessed grid; fragments that
/// vanish under downscaling are dropped.
pub fn map_sentences(sentences: &[SentenceRecord], pre: &Preprocessed) -> Vec<SentenceRecord> {
    sentences
        .iter()
        .map(|s| SentenceRecord {
            text: s.text.clone(),
            boxes: s.boxes.iter().map(|b| pre.map_box(b)).filter(|b| !b.is_empty()).collect(),
            element: s.element,
        })
        .collect()
}

impl Sample {
    pub fn from_page(
        stem: &str,
        page: &DocumentPage,
        cfg: &PreprocessConfig,
        stages: usize,
        table: Option<&EmbeddingTable>,
        labeled: bool,
    ) -> Result<Self> {
        let pre = preprocess(&page.image, cfg, stages)?;
        let labels = match (&page.mask, labeled) {
            (Some(m), true) => Some(prepare_labels(m, &pre)?),
            (None, true) => return Err(input!("page {stem} has no mask but the dataset is labeled")),
            _ => None,
        };
        let boxes = page.sidecar.elements.iter().map(|e| pre.map_box(&e.bbox)).filter(|b| !b.is_empty()).collect();
        let embedding = match table {
            Some(t) => {
                let sentences = map_sentences(&page.sidecar.sentences, &pre);
                Some(build_embedding_map(&sentences, t, pre.height(), pre.width())?.into_tensor())
            }
            None => None,
        };
        Ok(Self { stem: stem.to_string(), pre, labels, boxes, embedding })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads and preprocesses every page under `root`.
    pub fn load(
        root: &Path,
        cfg: &PreprocessConfig,
        stages: usize,
        table: Option<&EmbeddingTable>,
        labeled: bool,
    ) -> Result<Self> {
        let stems = list_pages(root)?;
        if stems.is_empty() {
            return Err(input!("no pages under {}", root.display()));
        }
        let samples = stems
            .iter()
            .map(|s| Sample::from_page(s, &read_page(root, s)?, cfg, stages, table, labeled))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Samples stacked into one `N×C×H×W` batch, each item zero-padded to the
/// largest height and width.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor,
    pub embedding: Option<Tensor>,
    /// Batch-major labels with padding ignored; `None` when unlabeled.
    pub labels: Option<Vec<u8>>,
    pub boxes: Vec<Vec<PixelBox>>,
    /// Content extents of each item on the padded grid.
    pub content: Vec<(usize, usize)>,
}

fn stack(planes: &[(&Tensor, usize, usize)], h: usize, w: usize) -> Tensor {
    let c = planes[0].0.shape()[0];
    let mut data = vec![0.0f32; planes.len() * c * h * w];
    for (i, (t, th, tw)) in planes.iter().enumerate() {
        let src = t.data();
        for k in 0..c {
            for y in 0..*th {
                let s = (k * th + y) * tw;
                let d = ((i * c + k) * h + y) * w;
                data[d..d + tw].copy_from_slice(&src[s..s + tw]);
            }
        }
    }
    Tensor::new(vec![planes.len(), c, h, w], data).expect("sized")
}

impl Batch {
    pub fn new(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(input!("empty batch"));
        }
        let h = samples.iter().map(|s| s.pre.height()).max().unwrap();
        let w = samples.iter().map(|s| s.pre.width()).max().unwrap();
        let dims = |t: &'_ Tensor| (t.shape()[1], t.shape()[2]);
        let planes: Vec<(&Tensor, usize, usize)> =
            samples.iter().map(|s| (&s.pre.tensor, dims(&s.pre.tensor).0, dims(&s.pre.tensor).1)).collect();
        let input = stack(&planes, h, w);
        let embedding = if samples.iter().all(|s| s.embedding.is_some()) {
            let e: Vec<(&Tensor, usize, usize)> = samples
                .iter()
                .map(|s| {
                    let t = s.embedding.as_ref().unwrap();
                    (t, dims(t).0, dims(t).1)
                })
                .collect();
            Some(stack(&e, h, w))
        } else {
            None
        };
        let labels = if samples.iter().all(|s| s.labels.is_some()) {
            let mut out = vec![IGNORE_LABEL; samples.len() * h * w];
            for (i, s) in samples.iter().enumerate() {
                let (sh, sw) = (s.pre.height(), s.pre.width());
                let l = s.labels.as_ref().unwrap();
                for y in 0..sh {
                    out[(i * h + y) * w..(i * h + y) * w + sw].copy_from_slice(&l[y * sw..(y + 1) * sw]);
                }
            }
            Some(out)
        } else {
            None
        };
        Ok(Self {
            input,
            embedding,
            labels,
            boxes: samples.iter().map(|s| s.boxes.clone()).collect(),
            content: samples.iter().map(|s| (s.pre.content_h, s.pre.content_w)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Per-pixel content flags of the grid downsampled by `factor`.
    pub fn valid(&self, factor: usize) -> Vec<bool> {
        let s = self.input.shape();
        let (h, w) = (s[2] / factor, s[3] / factor);
        let mut out = Vec::with_capacity(self.len() * h * w);
        for &(ch, cw) in &self.content {
            let (vh, vw) = (ch.div_ceil(factor), cw.div_ceil(factor));
            out.extend((0..h).flat_map(|y| (0..w).map(move |x| y < vh && x < vw)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    use crate::page::{ElementRecord, Sidecar};
    use crate::DocClass;

    fn page(w: u32, h: u32) -> DocumentPage {
        let mut sidecar = Sidecar::new("p", w as usize, h as usize);
        sidecar.elements.push(ElementRecord { class: Some(DocClass::Paragraph), bbox: PixelBox::new(2, 2, 6, 4), spans_columns: false });
        DocumentPage {
            image: RgbImage::from_pixel(w, h, Rgb([200, 200, 200])),
            mask: Some(GrayImage::from_fn(w, h, |x, y| Luma([u8::from((2..8).contains(&x) && (2..6).contains(&y)) * 6]))),
            sidecar,
        }
    }

    #[test]
    fn batches_pad_to_the_largest_item() {
        let cfg = PreprocessConfig::default();
        let a = Sample::from_page("a", &page(16, 8), &cfg, 2, None, true).unwrap();
        let b = Sample::from_page("b", &page(10, 12), &cfg, 2, None, true).unwrap();
        let batch = Batch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.input.shape(), &[2, 3, 12, 16]);
        let l = batch.labels.as_ref().unwrap();
        assert_eq!(l[2 * 16 + 2], 6);
        assert_eq!(l[8 * 16], IGNORE_LABEL);
        assert_eq!(l[12 * 16 + 11 * 16 + 9], 0);
        assert_eq!(l[12 * 16 + 11 * 16 + 10], IGNORE_LABEL);
        let v = batch.valid(2);
        assert_eq!(v.len(), 2 * 6 * 8);
        assert!(v[3 * 8 + 7] && !v[4 * 8]);
        assert!(v[48 + 5 * 8 + 4] && !v[48 + 5 * 8 + 5]);
    }

    #[test]
    fn unlabeled_samples_have_no_labels() {
        let mut p = page(8, 8);
        p.mask = None;
        let s = Sample::from_page("a", &p, &PreprocessConfig::default(), 2, None, false).unwrap();
        assert!(s.labels.is_none());
        assert_eq!(s.boxes.len(), 1);
        assert!(Sample::from_page("a", &p, &PreprocessConfig::default(), 2, None, true).is_err());
    }
}
