//! Page-level data shared by the generator, the model inputs and evaluation:
//! class labels, pixel boxes, sidecar records and the on-disk dataset layout.
//!
//! ```text
//! <root>/pages/NNNNNN.img.png       8-bit RGB
//! <root>/pages/NNNNNN.mask.png      8-bit labels 0..=6 (optional for real pages)
//! <root>/pages/NNNNNN.sidecar.json  elements, sentences, provenance
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

/// Label value for pixels that must not enter losses or metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocClass {
    Background = 0,
    Figure = 1,
    Table = 2,
    SectionHeading = 3,
    Caption = 4,
    List = 5,
    Paragraph = 6,
}

impl DocClass {
    pub const ALL: [DocClass; 7] = [
        DocClass::Background,
        DocClass::Figure,
        DocClass::Table,
        DocClass::SectionHeading,
        DocClass::Caption,
        DocClass::List,
        DocClass::Paragraph,
    ];

    /// The six element classes a generator may place.
    pub const ELEMENTS: [DocClass; 6] = [
        DocClass::Figure,
        DocClass::Table,
        DocClass::Caption,
        DocClass::SectionHeading,
        DocClass::List,
        DocClass::Paragraph,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DocClass::Background => "background",
            DocClass::Figure => "figure",
            DocClass::Table => "table",
            DocClass::SectionHeading => "section_heading",
            DocClass::Caption => "caption",
            DocClass::List => "list",
            DocClass::Paragraph => "paragraph",
        }
    }

    /// Classes whose content is rendered text.
    pub fn is_text(self) -> bool {
        matches!(
            self,
            DocClass::SectionHeading | DocClass::Caption | DocClass::List | DocClass::Paragraph
        )
    }

    /// Visualization color.
    pub fn color(self) -> [u8; 3] {
        match self {
            DocClass::Background => [255, 255, 255],
            DocClass::Figure => [0, 255, 0],
            DocClass::Table => [0, 0, 255],
            DocClass::SectionHeading => [255, 0, 0],
            DocClass::Caption => [255, 0, 255],
            DocClass::List => [0, 255, 255],
            DocClass::Paragraph => [255, 255, 0],
        }
    }
}

impl fmt::Display for DocClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DocClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        let s = if s == "section" || s == "heading" { "section_heading".to_string() } else { s };
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| input!("unknown class name {s:?}"))
    }
}

/// Axis-aligned pixel rectangle `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    /// Box spanning `[x0, x1) × [y0, y1)`; empty if the span is inverted.
    pub fn from_corners(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn contains_point(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn intersects(&self, other: &PixelBox) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.bottom() && other.y < self.bottom()
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    pub fn union(&self, other: &PixelBox) -> PixelBox {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        PixelBox::from_corners(
            self.x.min(other.x),
            self.y.min(other.y),
            self.right().max(other.right()),
            self.bottom().max(other.bottom()),
        )
    }

    /// Maps the box through a nearest-neighbour resize by `(sx, sy)`,
    /// using the same pixel-center rule as [`resize_labels`].
    pub fn scaled(&self, sx: f64, sy: f64) -> PixelBox {
        let map = |v: usize, s: f64| ((v as f64) * s - 0.5).ceil().max(0.0) as usize;
        PixelBox::from_corners(map(self.x, sx), map(self.y, sy), map(self.right(), sx), map(self.bottom(), sy))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRecord {
    /// `None` for boxes whose class is unknown (real pages).
    #[serde(default)]
    pub class: Option<DocClass>,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub spans_columns: bool,
}

/// A sentence and the per-line fragments its glyphs occupy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub boxes: Vec<PixelBox>,
    /// Index into the page's element list.
    #[serde(default)]
    pub element: Option<usize>,
}

impl SentenceRecord {
    pub fn bounding_box(&self) -> PixelBox {
        self.boxes.iter().fold(PixelBox::default_empty(), |acc, b| acc.union(b))
    }
}

impl PixelBox {
    fn default_empty() -> Self {
        PixelBox::new(0, 0, 0, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub class: DocClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Single,
    Double,
    Triple,
}

impl ColumnType {
    pub fn count(self) -> usize {
        match self {
            ColumnType::Single => 1,
            ColumnType::Double => 2,
            ColumnType::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub page_id: String,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_digest: Option<String>,
    #[serde(default)]
    pub column_type: Option<ColumnType>,
    /// Horizontal extent `[x0, x1)` of each column.
    #[serde(default)]
    pub columns: Vec<[usize; 2]>,
    pub elements: Vec<ElementRecord>,
    #[serde(default)]
    pub sentences: Vec<SentenceRecord>,
    /// Explicit text lines; derived from sentence fragments when absent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lines: Vec<LineRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Sidecar {
    pub fn new(page_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            page_id: page_id.into(),
            width,
            height,
            seed: None,
            config_digest: None,
            column_type: None,
            columns: Vec::new(),
            elements: Vec::new(),
            sentences: Vec::new(),
            lines: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Text lines with ground-truth classes. Without explicit lines, the
    /// fragments of each text element are grouped by their top row.
    pub fn line_records(&self) -> Vec<LineRecord> {
        if !self.lines.is_empty() {
            return self.lines.clone();
        }
        let mut rows: Vec<(usize, usize, PixelBox)> = Vec::new();
        for s in &self.sentences {
            let Some(e) = s.element else { continue };
            for b in &s.boxes {
                match rows.iter_mut().find(|(el, top, _)| *el == e && *top == b.y) {
                    Some(row) => row.2 = row.2.union(b),
                    None => rows.push((e, b.y, *b)),
                }
            }
        }
        rows.into_iter()
            .filter_map(|(e, _, bbox)| {
                let class = self.elements.get(e)?.class?;
                Some(LineRecord { bbox, class })
            })
            .collect()
    }

    pub fn element_boxes(&self) -> Vec<PixelBox> {
        self.elements.iter().map(|e| e.bbox).collect()
    }

    /// Checks every stored box against the page bounds.
    pub fn validate(&self) -> Result<()> {
        let inside = |b: &PixelBox| b.fits_in(self.width, self.height);
        for e in &self.elements {
            if !inside(&e.bbox) {
                return Err(input!("page {}: element box {:?} exceeds the page", self.page_id, e.bbox));
            }
        }
        for s in &self.sentences {
            if let Some(b) = s.boxes.iter().find(|b| !inside(b)) {
                return Err(input!("page {}: sentence box {b:?} exceeds the page", self.page_id));
            }
            if s.element.is_some_and(|e| e >= self.elements.len()) {
                return Err(input!("page {}: sentence refers to a missing element", self.page_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentPage {
    pub image: RgbImage,
    /// Per-pixel class indices; absent for pages that only carry boxes.
    pub mask: Option<GrayImage>,
    pub sidecar: Sidecar,
}

impl DocumentPage {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }
}

/// Nearest-neighbour label resize where destination pixel `i` samples
/// source pixel `floor((i + 0.5) / scale)`.
pub fn resize_labels(labels: &[u8], w: usize, h: usize, new_w: usize, new_h: usize) -> Vec<u8> {
    let sx = new_w as f64 / w as f64;
    let sy = new_h as f64 / h as f64;
    let src = |i: usize, s: f64, n: usize| (((i as f64 + 0.5) / s).floor() as usize).min(n - 1);
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let row = src(y, sy, h) * w;
        for x in 0..new_w {
            out.push(labels[row + src(x, sx, w)]);
        }
    }
    out
}

pub fn pages_dir(root: &Path) -> PathBuf {
    root.join("pages")
}

pub fn page_stem(index: usize) -> String {
    format!("{index:06}")
}

fn page_file(root: &Path, stem: &str, suffix: &str) -> PathBuf {
    pages_dir(root).join(format!("{stem}.{suffix}"))
}

pub fn write_page(root: &Path, stem: &str, page: &DocumentPage) -> Result<()> {
    fs::create_dir_all(pages_dir(root))?;
    page.image.save(page_file(root, stem, "img.png"))?;
    if let Some(mask) = &page.mask {
        mask.save(page_file(root, stem, "mask.png"))?;
    }
    let json = serde_json::to_string_pretty(&page.sidecar)?;
    fs::write(page_file(root, stem, "sidecar.json"), json + "\n")?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path)?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| input!("{}: {e}", path.display()))?;
    sidecar.validate()?;
    Ok(sidecar)
}

pub fn read_page(root: &Path, stem: &str) -> Result<DocumentPage> {
    let image = image::open(page_file(root, stem, "img.png"))?.to_rgb8();
    let mask_path = page_file(root, stem, "mask.png");
    let mask = if mask_path.exists() {
        Some(image::open(&mask_path)?.to_luma8())
    } else {
        None
    };
    let sidecar_path = page_file(root, stem, "sidecar.json");
    let sidecar = if sidecar_path.exists() {
        read_sidecar(&sidecar_path)?
    } else {
        Sidecar::new(stem, image.width() as usize, image.height() as usize)
    };
    if (sidecar.width, sidecar.height) != (image.width() as usize, image.height() as usize) {
        return Err(input!("page {stem}: sidecar size does not match the image"));
    }
    if let Some(m) = &mask {
        if m.dimensions() != image.dimensions() {
            return Err(input!("page {stem}: mask size does not match the image"));
        }
        if let Some(v) = m.as_raw().iter().find(|v| **v as usize >= DocClass::ALL.len() && **v != IGNORE_LABEL) {
            return Err(input!("page {stem}: mask holds unknown label {v}"));
        }
    }
    Ok(DocumentPage { image, mask, sidecar })
}

/// Page stems (`NNNNNN`) of a dataset, sorted.
pub fn list_pages(root: &Path) -> Result<Vec<String>> {
    let dir = pages_dir(root);
    if !dir.is_dir() {
        return Err(input!("{} is not a dataset (missing pages/)", root.display()));
    }
    let mut stems: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".img.png").map(str::to_string))
        .collect();
    stems.sort();
    Ok(stems)
}
