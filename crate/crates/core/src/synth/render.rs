use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::TextSource;
use super::font::{self, CELL, LINE};
use crate::error::{input, Result};
use crate::page::{PixelBox, SentenceRecord};

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
/// Smallest figure or table side.
pub const MIN_GRAPHIC: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextStyle {
    /// Glyph magnification; cells are `8·scale` wide, lines `10·scale` tall.
    pub scale: usize,
    /// One sentence per item, each led by a bullet glyph.
    pub bullets: bool,
    pub source: TextSource,
    /// Inclusive range of sentences per element.
    pub sentences: [usize; 2],
    /// Left indent in pixels.
    pub indent: usize,
    /// Gray level of the glyphs.
    pub ink: u8,
}

impl Default for TextStyle {
    fn default() -> Self {
        Self::paragraph()
    }
}

impl TextStyle {
    pub fn paragraph() -> Self {
        Self { scale: 1, bullets: false, source: TextSource::Documents, sentences: [2, 6], indent: 0, ink: 0 }
    }

    pub fn heading() -> Self {
        Self { scale: 2, source: TextSource::Headings, sentences: [1, 1], ..Self::paragraph() }
    }

    pub fn caption() -> Self {
        Self { source: TextSource::Captions, sentences: [1, 2], indent: 8, ink: 70, ..Self::paragraph() }
    }

    pub fn list() -> Self {
        Self { bullets: true, sentences: [2, 5], indent: 4, ..Self::paragraph() }
    }

    pub fn line_height(&self) -> usize {
        LINE * self.scale
    }

    /// Lines the text occupies in a box of the given width, before
    /// any truncation.
    pub fn measure(&self, sentences: &[String], width: usize) -> Result<usize> {
        Ok(layout(sentences, self.columns(width)?, self.bullets, usize::MAX).len())
    }

    /// Whether every word fits on a line without being broken.
    pub fn words_fit(&self, sentences: &[String], width: usize) -> bool {
        let Ok(cols) = self.columns(width) else { return false };
        let room = cols - if self.bullets { 2 } else { 0 };
        sentences.iter().flat_map(|s| s.split_whitespace()).all(|w| w.chars().count() <= room)
    }

    fn columns(&self, width: usize) -> Result<usize> {
        let cols = width.saturating_sub(self.indent) / (CELL * self.scale);
        let needed = if self.bullets { 6 } else { 4 };
        if cols < needed {
            return Err(input!("box width {width} is too narrow for text at scale {}", self.scale));
        }
        Ok(cols)
    }
}

/// A rendered text element: the patch covers the element box; sentence
/// boxes are in page coordinates.
#[derive(Debug, Clone)]
pub struct TextPatch {
    pub image: RgbImage,
    pub sentences: Vec<SentenceRecord>,
    /// Lines actually drawn.
    pub lines: usize,
    /// Line starts of bullet glyphs, in page coordinates.
    pub bullets: Vec<(usize, usize)>,
}

/// One placed character: column, character, owning sentence, and whether
/// it starts a word.
type Placed = (usize, char, usize, bool);

fn layout(sentences: &[String], cols: usize, bullets: bool, max_lines: usize) -> Vec<Vec<Placed>> {
    let start = if bullets { 2 } else { 0 };
    let mut lines: Vec<Vec<Placed>> = Vec::new();
    let mut col = cols;
    let mut fresh = true;
    for (si, s) in sentences.iter().enumerate() {
        if bullets || lines.is_empty() {
            lines.push(Vec::new());
            col = start;
            fresh = true;
        }
        for word in s.split_whitespace() {
            let mut chars: Vec<char> = word.chars().collect();
            let gap = usize::from(!fresh);
            if col > start && col + gap + chars.len() > cols {
                lines.push(Vec::new());
                col = start;
            } else {
                col += gap;
            }
            let mut first = true;
            // Words longer than a whole line are broken.
            while col + chars.len() > cols {
                let rest = chars.split_off(cols - col);
                let line = lines.last_mut().unwrap();
                line.extend(chars.iter().enumerate().map(|(i, &c)| (col + i, c, si, first && i == 0)));
                lines.push(Vec::new());
                col = start;
                chars = rest;
                first = false;
            }
            let line = lines.last_mut().unwrap();
            line.extend(chars.iter().enumerate().map(|(i, &c)| (col + i, c, si, first && i == 0)));
            col += chars.len();
            fresh = false;
        }
    }
    lines.truncate(max_lines);
    lines
}

/// Renders sentences into `bbox`, wrapping at word boundaries and cutting
/// whatever does not fit vertically.
pub fn render_text_block(sentences: &[String], bbox: PixelBox, style: &TextStyle) -> Result<TextPatch> {
    let lh = style.line_height();
    let cols = style.columns(bbox.w)?;
    let max_lines = bbox.h / lh;
    if max_lines == 0 {
        return Err(input!("box height {} is below one line of {lh} pixels", bbox.h));
    }
    let lines = layout(sentences, cols, style.bullets, max_lines);
    let mut image = RgbImage::from_pixel(bbox.w as u32, bbox.h as u32, WHITE);
    let ink = Rgb([style.ink; 3]);
    let s = style.scale;
    let mut frags: Vec<Vec<PixelBox>> = vec![Vec::new(); sentences.len()];
    let mut words: Vec<String> = vec![String::new(); sentences.len()];
    let mut bullets = Vec::new();
    let mut seen = vec![false; sentences.len()];
    for (li, line) in lines.iter().enumerate() {
        let y = li * lh + s;
        let mut line_boxes: Vec<Option<PixelBox>> = vec![None; sentences.len()];
        for &(col, c, si, word_start) in line {
            if style.bullets && !seen[si] {
                seen[si] = true;
                let bx = style.indent;
                font::draw_glyph(&mut image, '\u{2022}', bx, y, s, ink);
                bullets.push((bbox.x + bx, bbox.y + y));
            }
            let x = style.indent + col * CELL * s;
            font::draw_glyph(&mut image, c, x, y, s, ink);
            if let Some(b) = font::ink_bounds(c, bbox.x + x, bbox.y + y, s) {
                let e = &mut line_boxes[si];
                *e = Some(e.map_or(b, |o| o.union(&b)));
            }
            if word_start && !words[si].is_empty() {
                words[si].push(' ');
            }
            words[si].push(c);
        }
        for (si, b) in line_boxes.into_iter().enumerate() {
            if let Some(b) = b {
                frags[si].push(b);
            }
        }
    }
    let sentences = frags
        .into_iter()
        .zip(words)
        .filter(|(f, _)| !f.is_empty())
        .map(|(boxes, text)| SentenceRecord { text, boxes, element: None })
        .collect();
    Ok(TextPatch { image, sentences, lines: lines.len(), bullets })
}

fn check_graphic(w: usize, h: usize) -> Result<()> {
    if w < MIN_GRAPHIC || h < MIN_GRAPHIC {
        return Err(input!("graphic box {w}x{h} is below the {MIN_GRAPHIC}px minimum"));
    }
    Ok(())
}

fn fill(img: &mut RgbImage, b: PixelBox, c: Rgb<u8>) {
    for y in b.y..b.bottom().min(img.height() as usize) {
        for x in b.x..b.right().min(img.width() as usize) {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize + 1;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = ((x0 + t * (x1 - x0)).round(), (y0 + t * (y1 - y0)).round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb<u8> {
    Rgb([rng.gen_range(20..200), rng.gen_range(20..200), rng.gen_range(20..200)])
}

/// Fraction of pixels differing from white.
pub fn coverage(img: &RgbImage) -> f64 {
    let n = img.pixels().filter(|p| **p != WHITE).count();
    n as f64 / (img.width() as f64 * img.height() as f64).max(1.0)
}

/// A procedural figure: a bar chart, line plot, shape collage or
/// gradient panel chosen by the seed.
pub fn render_figure(seed: u64, w: usize, h: usize) -> Result<RgbImage> {
    check_graphic(w, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, WHITE);
    let axis = Rgb([40, 40, 40]);
    let (wf, hf) = (w as f64, h as f64);
    match rng.gen_range(0..4) {
        0 => {
            let n = rng.gen_range(3..=8.min(w / 6).max(3));
            let slot = (w - 8) / n;
            let color = random_color(&mut rng);
            for i in 0..n {
                let bh = rng.gen_range(h / 5..h - 4);
                let bw = (slot * 2 / 3).max(1);
                fill(&mut img, PixelBox::new(6 + i * slot, h - 2 - bh, bw, bh), color);
            }
            line(&mut img, (4.0, 2.0), (4.0, hf - 2.0), axis);
            line(&mut img, (4.0, hf - 2.0), (wf - 2.0, hf - 2.0), axis);
        }
        1 => {
            for _ in 0..rng.gen_range(1..=3) {
                let color = random_color(&mut rng);
                let mut prev = (4.0, rng.gen_range(4.0..hf - 4.0));
                let steps = rng.gen_range(4..12);
                for k in 1..=steps {
                    let next = (4.0 + (wf - 8.0) * k as f64 / steps as f64, rng.gen_range(4.0..hf - 4.0));
                    for d in [-1.0, 0.0, 1.0] {
                        line(&mut img, (prev.0, prev.1 + d), (next.0, next.1 + d), color);
                    }
                    prev = next;
                }
            }
            for k in 0..5 {
                let y = 2.0 + (hf - 4.0) * k as f64 / 4.0;
                line(&mut img, (2.0, y), (wf - 2.0, y), Rgb([200, 200, 200]));
            }
            line(&mut img, (2.0, hf - 2.0), (wf - 2.0, hf - 2.0), axis);
        }
        2 => {
            for _ in 0..rng.gen_range(3..10) {
                let color = random_color(&mut rng);
                let (cx, cy) = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
                let r = rng.gen_range(3.0..(wf.min(hf) / 3.0).max(4.0));
                if rng.gen_bool(0.5) {
                    for y in 0..h {
                        for x in 0..w {
                            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                            if dx * dx + dy * dy <= r * r {
                                img.put_pixel(x as u32, y as u32, color);
                            }
                        }
                    }
                } else {
                    let b = PixelBox::new((cx - r).max(0.0) as usize, (cy - r).max(0.0) as usize, 2 * r as usize, r as usize);
                    fill(&mut img, b, color);
                }
            }
        }
        _ => {
            let (a, b) = (random_color(&mut rng), random_color(&mut rng));
            for y in 0..h {
                for x in 0..w {
                    let t = (x as f64 / wf + y as f64 / hf) / 2.0;
                    let mix = |i: usize| (a[i] as f64 * (1.0 - t) + b[i] as f64 * t) as u8;
                    img.put_pixel(x as u32, y as u32, Rgb([mix(0), mix(1), mix(2)]));
                }
            }
        }
    }
    if coverage(&img) < 0.05 {
        let tint = Rgb([235, 238, 245]);
        for p in img.pixels_mut() {
            if *p == WHITE {
                *p = tint;
            }
        }
    }
    Ok(img)
}

/// Coordinates of the ruling lines, relative to the table box.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGrid {
    pub columns: Vec<usize>,
    pub rows: Vec<usize>,
}

/// `n + 1` evenly spaced rulings spanning `0..extent`.
pub fn rulings(extent: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| ((i * (extent - 1)) as f64 / n as f64).round() as usize).collect()
}

/// A ruled grid whose cells hold short digit strings.
pub fn render_table(seed: u64, w: usize, h: usize) -> Result<(RgbImage, TableGrid)> {
    check_graphic(w, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(2..=(h / 14).clamp(2, 10));
    let cols = rng.gen_range(2..=(w / 40).clamp(2, 6));
    let grid = TableGrid { columns: rulings(w, cols), rows: rulings(h, rows) };
    let mut img = RgbImage::from_pixel(w as u32, h as u32, WHITE);
    let rule = Rgb([30, 30, 30]);
    for &x in &grid.columns {
        line(&mut img, (x as f64, 0.0), (x as f64, h as f64 - 1.0), rule);
    }
    for &y in &grid.rows {
        line(&mut img, (0.0, y as f64), (w as f64 - 1.0, y as f64), rule);
    }
    let ink = Rgb([0, 0, 0]);
    for r in 0..rows {
        for c in 0..cols {
            let (x0, x1) = (grid.columns[c] + 3, grid.columns[c + 1]);
            let (y0, y1) = (grid.rows[r], grid.rows[r + 1]);
            if y1 - y0 < CELL + 3 || x1 <= x0 + CELL {
                continue;
            }
            let y = y0 + (y1 - y0 - CELL) / 2 + 1;
            let fit = ((x1 - x0 - 1) / CELL).min(5);
            let n = rng.gen_range(1..=fit);
            for k in 0..n {
                let d = char::from(b'0' + rng.gen_range(0..10u8));
                font::draw_glyph(&mut img, d, x0 + k * CELL, y, 1, ink);
            }
        }
    }
    Ok((img, grid))
}
