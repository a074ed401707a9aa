use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dsse_tensor::{Checkpoint, Graph, Tensor};
use image::GrayImage;

use super::dataset::map_sentences;
use crate::embedding::{build_embedding_map, EmbeddingTable};
use crate::error::{contract, Error, Result};
use crate::model::{preprocess, ForwardOptions, Mfcn, PreprocessConfig};
use crate::page::{list_pages, pages_dir, read_page, write_page, DocumentPage};
use crate::postprocess::{refine, visualize, BoxTree, ProbabilityMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SegmentOptions {
    /// Apply the box-guided cleanup with the page's element boxes.
    pub postprocess: bool,
    /// Write probability-weighted color renderings.
    pub visualize: bool,
    /// Write the class probability maps.
    pub probabilities: bool,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub probabilities: ProbabilityMap,
    pub labels: Vec<u8>,
    /// Box-refined labels, when requested.
    pub refined: Option<Vec<u8>>,
}

impl Segmentation {
    /// Refined labels if present, else the raw argmax.
    pub fn final_labels(&self) -> &[u8] {
        self.refined.as_deref().unwrap_or(&self.labels)
    }
}

/// Inference wrapper: preprocess, forward, softmax, resample to the page.
pub struct Segmenter {
    model: Mfcn,
    preprocess: PreprocessConfig,
    table: Option<EmbeddingTable>,
}

impl Segmenter {
    pub fn new(model: Mfcn, preprocess: PreprocessConfig, table: Option<EmbeddingTable>) -> Result<Self> {
        let n = model.config().embedding_dim;
        match &table {
            Some(t) if t.dim() != n => {
                return Err(Error::Config(format!("embedding table has dimension {}, model expects {n}", t.dim())))
            }
            None if n > 0 => return Err(Error::Config("a model with text input needs an embeddings table".into())),
            _ => {}
        }
        let table = if n == 0 { None } else { table };
        Ok(Self { model, preprocess, table })
    }

    pub fn model(&self) -> &Mfcn {
        &self.model
    }

    /// Class probabilities at the page's own resolution.
    pub fn probabilities(&mut self, page: &DocumentPage) -> Result<ProbabilityMap> {
        let stages = self.model.config().stages();
        let pre = preprocess(&page.image, &self.preprocess, stages)?;
        let emb = match &self.table {
            Some(t) => {
                let sentences = map_sentences(&page.sidecar.sentences, &pre);
                Some(build_embedding_map(&sentences, t, pre.height(), pre.width())?.into_tensor())
            }
            None => None,
        };
        let mut g = Graph::new();
        let art = self.model.forward(&mut g, &pre.tensor, emb.as_ref(), ForwardOptions::inference())?;
        let logits = g.value(art.logits);
        let s = logits.shape();
        let p = ProbabilityMap::from_logits(s[0], s[1], s[2], logits.data())?;
        let p = p.crop(pre.content_h, pre.content_w)?;
        Ok(if (pre.content_h, pre.content_w) == (pre.original_h, pre.original_w) {
            p
        } else {
            p.resize(pre.original_h, pre.original_w)
        })
    }

    pub fn segment(&mut self, page: &DocumentPage, postprocess: bool) -> Result<Segmentation> {
        let probabilities = self.probabilities(page)?;
        let labels = probabilities.argmax();
        let refined = if postprocess {
            Some(refine(&probabilities, &BoxTree::from_boxes(&page.sidecar.element_boxes()))?)
        } else {
            None
        };
        Ok(Segmentation { probabilities, labels, refined })
    }
}

/// Stores a probability map as a single-tensor checkpoint.
pub fn save_probabilities(p: &ProbabilityMap, path: &Path) -> Result<()> {
    let t = Tensor::new(vec![p.classes(), p.height(), p.width()], p.data().to_vec())?;
    let ck = Checkpoint { digest: [0; 32], step: 0, tensors: BTreeMap::from([("prob".to_string(), t)]) };
    Ok(ck.save(path)?)
}

pub fn load_probabilities(path: &Path) -> Result<ProbabilityMap> {
    let ck = Checkpoint::load(path)?;
    let t = ck.tensors.get("prob").ok_or_else(|| contract!("{} holds no probability map", path.display()))?;
    let s = t.shape();
    if s.len() != 3 {
        return Err(contract!("probability map has shape {s:?}"));
    }
    ProbabilityMap::new(s[0], s[1], s[2], t.data().to_vec())
}

fn gray(labels: &[u8], w: usize, h: usize) -> GrayImage {
    GrayImage::from_raw(w as u32, h as u32, labels.to_vec()).expect("sized")
}

/// Segments every page of a dataset into `out`, which becomes a dataset
/// of predictions: `NNNNNN.mask.png` holds the final labels, next to the
/// image and sidecar. With post-processing the raw argmax goes to
/// `NNNNNN.raw.mask.png`.
pub fn segment_dataset(seg: &mut Segmenter, input: &Path, out: &Path, opts: SegmentOptions) -> Result<Vec<String>> {
    let stems = list_pages(input)?;
    for stem in &stems {
        let page = read_page(input, stem)?;
        let s = seg.segment(&page, opts.postprocess)?;
        let (w, h) = (page.width(), page.height());
        let pred = DocumentPage { image: page.image.clone(), mask: Some(gray(s.final_labels(), w, h)), sidecar: page.sidecar.clone() };
        write_page(out, stem, &pred)?;
        let dir = pages_dir(out);
        if s.refined.is_some() {
            gray(&s.labels, w, h).save(dir.join(format!("{stem}.raw.mask.png")))?;
        }
        if opts.visualize {
            visualize(&s.probabilities).save(dir.join(format!("{stem}.vis.png")))?;
        }
        if opts.probabilities {
            save_probabilities(&s.probabilities, &dir.join(format!("{stem}.prob.bin")))?;
        }
    }
    Ok(stems)
}

/// Loads a model checkpoint, refusing a different architecture.
pub fn load_model(cfg: &crate::model::ArchitectureConfig, path: &Path) -> Result<Mfcn> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", path.display()))));
    }
    Mfcn::from_checkpoint(cfg.clone(), &Checkpoint::load(path)?)
}

/// Copies nothing and never writes into `input`; kept for callers that
/// want to be sure the prediction directory differs from the source.
pub fn check_distinct(input: &Path, out: &Path) -> Result<()> {
    let a = fs::canonicalize(input)?;
    if let Ok(b) = fs::canonicalize(out) {
        if a == b {
            return Err(crate::error::Error::Input("output directory must differ from the input dataset".into()));
        }
    }
    Ok(())
}
