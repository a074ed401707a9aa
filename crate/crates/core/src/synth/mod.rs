//! Synthetic document pages with pixel-exact labels.
//!
//! Pages are laid out column by column: pick a column type, then keep
//! choosing an element class and placing an instance in the emptiest open
//! column until no column has room for the smallest element.

mod corpus;
pub mod font;
mod render;
mod template;

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{Corpus, TextSource};
pub use render::{
    coverage, render_figure, render_table, render_text_block, rulings, TableGrid, TextPatch, TextStyle, MIN_GRAPHIC,
    WHITE,
};
pub use template::{TemplateLayout, TemplateSlot};

use crate::error::{input, Result};
use crate::model::{digest_of, hex};
use crate::page::{
    page_stem, write_page, ColumnType, DocClass, DocumentPage, ElementRecord, PixelBox, SentenceRecord, Sidecar,
};

/// Text styles for the four text classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Styles {
    pub section_heading: TextStyle,
    pub caption: TextStyle,
    pub list: TextStyle,
    pub paragraph: TextStyle,
}

impl Default for Styles {
    fn default() -> Self {
        Self {
            section_heading: TextStyle::heading(),
            caption: TextStyle::caption(),
            list: TextStyle::list(),
            paragraph: TextStyle::paragraph(),
        }
    }
}

impl Styles {
    pub fn get(&self, class: DocClass) -> Option<&TextStyle> {
        match class {
            DocClass::SectionHeading => Some(&self.section_heading),
            DocClass::Caption => Some(&self.caption),
            DocClass::List => Some(&self.list),
            DocClass::Paragraph => Some(&self.paragraph),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub margin: usize,
    pub gutter: usize,
    /// Vertical space between consecutive elements.
    pub gap: usize,
    /// A column closes once less than this much height remains.
    pub min_element_height: usize,
    /// Relative odds of single, double and triple column pages.
    pub column_weights: [f64; 3],
    /// Element dictionary; drawn uniformly.
    pub classes: Vec<DocClass>,
    /// Lets figures and tables cross column gutters.
    pub span_columns: bool,
    pub span_probability: f64,
    /// Chance that a figure is followed by its caption.
    pub caption_probability: f64,
    pub figure_height: [usize; 2],
    pub table_height: [usize; 2],
    pub styles: Styles,
    /// Directory with `corpus.txt`, `headings.txt` and `captions.txt`;
    /// the bundled corpus when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 384,
            height: 512,
            margin: 24,
            gutter: 16,
            gap: 8,
            min_element_height: 12,
            column_weights: [1.0, 1.0, 1.0],
            classes: DocClass::ELEMENTS.to_vec(),
            span_columns: true,
            span_probability: 0.3,
            caption_probability: 0.5,
            figure_height: [40, 160],
            table_height: [40, 140],
            styles: Styles::default(),
            corpus_dir: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.contains(&DocClass::Background) {
            return Err(input!("classes must be a non-empty subset of the six element classes"));
        }
        if self.column_weights.iter().any(|w| !(*w >= 0.0)) || self.column_weights.iter().sum::<f64>() <= 0.0 {
            return Err(input!("column weights must be non-negative with a positive sum"));
        }
        let inner = self.width.saturating_sub(2 * self.margin + 2 * self.gutter);
        if inner / 3 < 64 || self.height < 2 * self.margin + 4 * self.min_element_height {
            return Err(input!("page {}x{} is too small for the margins", self.width, self.height));
        }
        for r in [self.figure_height, self.table_height] {
            if r[0] < MIN_GRAPHIC || r[0] > r[1] {
                return Err(input!("graphic height range {r:?} is invalid"));
            }
        }
        for s in [&self.styles.section_heading, &self.styles.caption, &self.styles.list, &self.styles.paragraph] {
            if s.scale == 0 || s.sentences[0] == 0 || s.sentences[0] > s.sentences[1] {
                return Err(input!("text style {s:?} is invalid"));
            }
        }
        for p in [self.span_probability, self.caption_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(input!("probability {p} is outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex(&digest_of(self))
    }

    /// Horizontal extents of the columns for a column type.
    pub fn columns(&self, t: ColumnType) -> Vec<[usize; 2]> {
        let n = t.count();
        let inner = self.width - 2 * self.margin - (n - 1) * self.gutter;
        let cw = inner / n;
        (0..n)
            .map(|i| {
                let x0 = self.margin + i * (cw + self.gutter);
                [x0, x0 + cw]
            })
            .collect()
    }
}

/// Per-page seed derived from the corpus seed and the page index.
pub fn page_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

enum Content {
    Text(TextPatch),
    Graphic(RgbImage),
}

struct Placed {
    class: DocClass,
    bbox: PixelBox,
    spans: bool,
    content: Content,
}

/// Holds a validated config and its corpus.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: SynthConfig,
    corpus: Corpus,
    digest: String,
}

impl Generator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = match &cfg.corpus_dir {
            Some(dir) => Corpus::from_dir(dir)?,
            None => Corpus::bundled(),
        };
        Ok(Self::with_corpus(cfg, corpus))
    }

    pub fn with_corpus(cfg: SynthConfig, corpus: Corpus) -> Self {
        let digest = cfg.digest();
        Self { cfg, corpus, digest }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn text<R: Rng>(&self, class: DocClass, bbox: PixelBox, rng: &mut R, fill: bool) -> Result<TextPatch> {
        let style = self.cfg.styles.get(class).expect("text class");
        let n = rng.gen_range(style.sentences[0]..=style.sentences[1]);
        let mut sentences = self.corpus.sample(style.source, n, rng);
        if fill {
            let max_lines = bbox.h / style.line_height();
            for _ in 0..64 {
                if style.measure(&sentences, bbox.w)? >= max_lines || style.bullets && sentences.len() >= max_lines {
                    break;
                }
                sentences.extend(self.corpus.sample(style.source, 1, rng));
            }
        }
        render_text_block(&sentences, bbox, style)
    }

    /// A text element in a column region, cut to the height available.
    fn place_text<R: Rng>(&self, class: DocClass, x: [usize; 2], y: usize, avail: usize, rng: &mut R) -> Option<Placed> {
        let style = self.cfg.styles.get(class)?;
        let lh = style.line_height();
        if avail < lh {
            return None;
        }
        let n = rng.gen_range(style.sentences[0]..=style.sentences[1]);
        let sentences = self.corpus.sample(style.source, n, rng);
        let w = x[1] - x[0];
        if class == DocClass::SectionHeading && !style.words_fit(&sentences, w) {
            return None;
        }
        let lines = style.measure(&sentences, w).ok()?.clamp(1, avail / lh);
        let bbox = PixelBox::new(x[0], y, w, lines * lh);
        let patch = render_text_block(&sentences, bbox, style).ok()?;
        Some(Placed { class, bbox, spans: false, content: Content::Text(patch) })
    }

    fn place_graphic<R: Rng>(&self, class: DocClass, x: [usize; 2], y: usize, avail: usize, rng: &mut R) -> Option<Placed> {
        let range = if class == DocClass::Figure { self.cfg.figure_height } else { self.cfg.table_height };
        let h = rng.gen_range(range[0]..=range[1]).min(avail);
        if h < MIN_GRAPHIC {
            return None;
        }
        let w = x[1] - x[0];
        let seed = rng.gen();
        let img = match class {
            DocClass::Figure => render_figure(seed, w, h).ok()?,
            _ => render_table(seed, w, h).ok()?.0,
        };
        Some(Placed { class, bbox: PixelBox::new(x[0], y, w, h), spans: false, content: Content::Graphic(img) })
    }

    /// Lays out and renders one page.
    pub fn page(&self, seed: u64, page_id: &str) -> Result<DocumentPage> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let types = [ColumnType::Single, ColumnType::Double, ColumnType::Triple];
        let dist = WeightedIndex::new(cfg.column_weights).map_err(|e| input!("column weights: {e}"))?;
        let column_type = types[dist.sample(&mut rng)];
        let columns = cfg.columns(column_type);
        let bottom = cfg.height - cfg.margin;
        let mut cursor = vec![cfg.margin; columns.len()];
        let mut open = vec![true; columns.len()];
        let mut rejects = vec![0usize; columns.len()];
        let mut placed: Vec<Placed> = Vec::new();
        loop {
            for c in 0..columns.len() {
                if bottom.saturating_sub(cursor[c]) < cfg.min_element_height {
                    open[c] = false;
                }
            }
            let Some(c) = (0..columns.len()).filter(|&c| open[c]).min_by_key(|&c| (cursor[c], c)) else { break };
            let class = *cfg.classes.choose(&mut rng).unwrap();
            let graphic = matches!(class, DocClass::Figure | DocClass::Table);
            let span = graphic
                && cfg.span_columns
                && columns.len() > 1
                && open.iter().all(|&o| o)
                && rng.gen_bool(cfg.span_probability);
            let (x, y) = if span {
                ([columns[0][0], columns[columns.len() - 1][1]], *cursor.iter().max().unwrap())
            } else {
                (columns[c], cursor[c])
            };
            let avail = bottom.saturating_sub(y);
            let item = if graphic {
                self.place_graphic(class, x, y, avail, &mut rng)
            } else {
                self.place_text(class, x, y, avail, &mut rng)
            };
            let Some(mut item) = item else {
                rejects[c] += 1;
                if rejects[c] >= 8 {
                    open[c] = false;
                }
                continue;
            };
            rejects[c] = 0;
            item.spans = span;
            let next = item.bbox.bottom() + cfg.gap;
            if span {
                cursor.iter_mut().for_each(|v| *v = next);
            } else {
                cursor[c] = next;
            }
            let first_col = if span { 0 } else { c };
            let is_figure = item.class == DocClass::Figure;
            placed.push(item);
            if is_figure && cfg.classes.contains(&DocClass::Caption) && rng.gen_bool(cfg.caption_probability) {
                let avail = bottom.saturating_sub(next);
                if let Some(cap) = self.place_text(DocClass::Caption, columns[first_col], next, avail, &mut rng) {
                    cursor[first_col] = cap.bbox.bottom() + cfg.gap;
                    placed.push(cap);
                }
            }
        }
        let mut sidecar = Sidecar::new(page_id, cfg.width, cfg.height);
        sidecar.column_type = Some(column_type);
        sidecar.columns = columns;
        Ok(self.compose(placed, sidecar, seed))
    }

    /// Fills every slot of a template with a fresh element of the slot's
    /// class. Slots that cannot hold their element are skipped with a
    /// warning.
    pub fn from_template(&self, template: &TemplateLayout, seed: u64, page_id: &str) -> Result<DocumentPage> {
        template.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut placed = Vec::new();
        let mut sidecar = Sidecar::new(page_id, template.width, template.height);
        for (i, slot) in template.slots.iter().enumerate() {
            let b = slot.bbox;
            let content = match slot.class {
                DocClass::Figure => render_figure(rng.gen(), b.w, b.h).map(Content::Graphic),
                DocClass::Table => render_table(rng.gen(), b.w, b.h).map(|t| Content::Graphic(t.0)),
                c => self.text(c, b, &mut rng, true).map(Content::Text),
            };
            match content {
                Ok(content) => placed.push(Placed { class: slot.class, bbox: b, spans: false, content }),
                Err(e) => sidecar.warnings.push(format!("slot {i} ({}) skipped: {e}", slot.class)),
            }
        }
        Ok(self.compose(placed, sidecar, seed))
    }

    fn compose(&self, placed: Vec<Placed>, mut sidecar: Sidecar, seed: u64) -> DocumentPage {
        let (w, h) = (sidecar.width as u32, sidecar.height as u32);
        let mut image = RgbImage::from_pixel(w, h, WHITE);
        let mut mask = GrayImage::new(w, h);
        for (i, p) in placed.into_iter().enumerate() {
            let b = p.bbox;
            let patch = match p.content {
                Content::Graphic(img) => img,
                Content::Text(t) => {
                    sidecar
                        .sentences
                        .extend(t.sentences.into_iter().map(|s| SentenceRecord { element: Some(i), ..s }));
                    t.image
                }
            };
            image::imageops::replace(&mut image, &patch, b.x as i64, b.y as i64);
            for y in b.y..b.bottom() {
                for x in b.x..b.right() {
                    mask.put_pixel(x as u32, y as u32, Luma([p.class.index()]));
                }
            }
            sidecar.elements.push(ElementRecord { class: Some(p.class), bbox: b, spans_columns: p.spans });
        }
        sidecar.seed = Some(seed);
        sidecar.config_digest = Some(self.digest.clone());
        DocumentPage { image, mask: Some(mask), sidecar }
    }

    /// Writes `count` pages under `root`, returning every audit violation.
    pub fn write_dataset(&self, root: &Path, seed: u64, count: usize) -> Result<Vec<String>> {
        let mut violations = Vec::new();
        for i in 0..count {
            let stem = page_stem(i);
            let page = self.page(page_seed(seed, i), &stem)?;
            violations.extend(audit(&page).into_iter().map(|v| format!("{stem}: {v}")));
            write_page(root, &stem, &page)?;
        }
        Ok(violations)
    }
}

/// One page with the given seed and config.
pub fn generate_page(seed: u64, cfg: &SynthConfig) -> Result<DocumentPage> {
    Generator::new(cfg.clone())?.page(seed, &format!("{seed}"))
}

/// One page filled from a template.
pub fn generate_from_template(template: &TemplateLayout, seed: u64, cfg: &SynthConfig) -> Result<DocumentPage> {
    Generator::new(cfg.clone())?.from_template(template, seed, &format!("{seed}"))
}

/// Brute-force consistency checks between a page's mask, element boxes,
/// sentence boxes and columns. Empty when the page is consistent.
pub fn audit(page: &DocumentPage) -> Vec<String> {
    let mut v = Vec::new();
    let sc = &page.sidecar;
    let (w, h) = (page.width(), page.height());
    if (sc.width, sc.height) != (w, h) {
        v.push(format!("sidecar size {}x{} differs from image {w}x{h}", sc.width, sc.height));
        return v;
    }
    for (i, e) in sc.elements.iter().enumerate() {
        if e.class.is_none() || e.class == Some(DocClass::Background) {
            v.push(format!("element {i} has no element class"));
        }
        if !e.bbox.fits_in(w, h) || e.bbox.is_empty() {
            v.push(format!("element {i} box {:?} is empty or off the page", e.bbox));
        }
        for (j, o) in sc.elements.iter().enumerate().skip(i + 1) {
            if e.bbox.intersects(&o.bbox) {
                v.push(format!("elements {i} and {j} overlap"));
            }
        }
    }
    if let Some(mask) = &page.mask {
        if (mask.width() as usize, mask.height() as usize) != (w, h) {
            v.push("mask size differs from image".into());
        } else {
            let mut bad = 0usize;
            for (x, y, px) in mask.enumerate_pixels() {
                let (x, y) = (x as usize, y as usize);
                let owners: Vec<&ElementRecord> = sc.elements.iter().filter(|e| e.bbox.contains_point(x, y)).collect();
                let ok = match owners.as_slice() {
                    [] => px[0] == 0,
                    [e] => e.class.map(DocClass::index) == Some(px[0]),
                    _ => false,
                };
                if !ok {
                    bad += 1;
                }
            }
            if bad > 0 {
                v.push(format!("{bad} mask pixels disagree with the element boxes"));
            }
        }
    }
    for (k, s) in sc.sentences.iter().enumerate() {
        for b in &s.boxes {
            let holders: Vec<usize> = (0..sc.elements.len())
                .filter(|&i| sc.elements[i].class.is_some_and(DocClass::is_text) && sc.elements[i].bbox.contains(b))
                .collect();
            if holders.len() != 1 || s.element != Some(holders[0]) {
                v.push(format!("sentence {k} fragment {b:?} is not inside exactly its own text element"));
            }
        }
    }
    if sc.columns.len() > 1 {
        for (i, e) in sc.elements.iter().enumerate() {
            let inside = sc.columns.iter().any(|c| e.bbox.x >= c[0] && e.bbox.right() <= c[1]);
            let may_span = e.spans_columns && matches!(e.class, Some(DocClass::Figure | DocClass::Table));
            if !inside && !may_span {
                v.push(format!("element {i} crosses a column gutter"));
            }
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_page() {
        let cfg = SynthConfig::default();
        let a = generate_page(11, &cfg).unwrap();
        let b = generate_page(11, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, generate_page(12, &cfg).unwrap().image);
    }

    #[test]
    fn pages_pass_the_audit() {
        let g = Generator::new(SynthConfig::default()).unwrap();
        for i in 0..20 {
            let p = g.page(page_seed(5, i), "p").unwrap();
            assert_eq!(audit(&p), Vec::<String>::new(), "page {i}");
            assert!(p.sidecar.elements.len() >= 3);
        }
    }

    #[test]
    fn paragraph_only_masks() {
        let cfg = SynthConfig { classes: vec![DocClass::Paragraph], ..Default::default() };
        let p = generate_page(3, &cfg).unwrap();
        assert!(p.mask.unwrap().pixels().all(|px| px[0] == 0 || px[0] == 6));
    }

    #[test]
    fn pages_fill_down_to_the_minimum() {
        let cfg = SynthConfig::default();
        let g = Generator::new(cfg.clone()).unwrap();
        for i in 0..10 {
            let p = g.page(page_seed(9, i), "p").unwrap();
            for c in &p.sidecar.columns {
                let lowest = p
                    .sidecar
                    .elements
                    .iter()
                    .filter(|e| e.bbox.x < c[1] && e.bbox.right() > c[0])
                    .map(|e| e.bbox.bottom())
                    .max()
                    .unwrap_or(cfg.margin);
                // Eight rejections in a row can close a column early, but
                // never with more than a tall element's worth of room.
                assert!(cfg.height - cfg.margin - lowest < cfg.figure_height[1] + cfg.gap + 40, "page {i}");
            }
        }
    }

    #[test]
    fn audit_catches_tampering() {
        let mut p = generate_page(4, &SynthConfig::default()).unwrap();
        let e = p.sidecar.elements[0].bbox;
        p.mask.as_mut().unwrap().put_pixel(e.x as u32, e.y as u32, Luma([0]));
        assert!(!audit(&p).is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = SynthConfig { classes: vec![], ..Default::default() };
        assert!(Generator::new(bad).is_err());
        let bad = SynthConfig { corpus_dir: Some("/nonexistent".into()), ..Default::default() };
        assert!(matches!(Generator::new(bad), Err(crate::Error::Input(_))));
    }

    #[test]
    fn full_page_figure_template() {
        let t = TemplateLayout {
            width: 100,
            height: 80,
            slots: vec![TemplateSlot { class: DocClass::Figure, bbox: PixelBox::new(10, 5, 80, 70) }],
        };
        let p = generate_from_template(&t, 1, &SynthConfig::default()).unwrap();
        for (x, y, px) in p.mask.as_ref().unwrap().enumerate_pixels() {
            let inside = t.slots[0].bbox.contains_point(x as usize, y as usize);
            assert_eq!(px[0], if inside { 1 } else { 0 });
        }
    }

    #[test]
    fn templates_keep_geometry_and_change_content() {
        let g = Generator::new(SynthConfig::default()).unwrap();
        for (name, t) in TemplateLayout::bundled() {
            let a = g.from_template(&t, 1, name).unwrap();
            let b = g.from_template(&t, 2, name).unwrap();
            assert!(a.sidecar.warnings.is_empty(), "{name}: {:?}", a.sidecar.warnings);
            let slots: Vec<(Option<DocClass>, PixelBox)> = t.slots.iter().map(|s| (Some(s.class), s.bbox)).collect();
            let geo = |p: &DocumentPage| p.sidecar.elements.iter().map(|e| (e.class, e.bbox)).collect::<Vec<_>>();
            assert_eq!(geo(&a), slots);
            assert_eq!(geo(&b), slots);
            assert_ne!(a.sidecar.sentences, b.sidecar.sentences);
            assert_ne!(a.image, b.image);
            assert_eq!(audit(&a), Vec::<String>::new());
        }
    }

    #[test]
    fn unfillable_slots_become_warnings() {
        let t = TemplateLayout {
            width: 200,
            height: 100,
            slots: vec![
                TemplateSlot { class: DocClass::Paragraph, bbox: PixelBox::new(0, 0, 200, 6) },
                TemplateSlot { class: DocClass::Table, bbox: PixelBox::new(0, 10, 200, 80) },
            ],
        };
        let p = generate_from_template(&t, 1, &SynthConfig::default()).unwrap();
        assert_eq!(p.sidecar.elements.len(), 1);
        assert_eq!(p.sidecar.warnings.len(), 1);
    }
}
