use font8x8::legacy::BASIC_LEGACY;
use image::{Rgb, RgbImage};

use crate::page::PixelBox;

/// Glyph cell side at scale 1.
pub const CELL: usize = 8;
/// Vertical advance at scale 1.
pub const LINE: usize = 10;

const BULLET: [u8; 8] = [0x00, 0x00, 0x3C, 0x7E, 0x7E, 0x7E, 0x3C, 0x00];
const DASH: [u8; 8] = [0x00, 0x00, 0x00, 0x7E, 0x00, 0x00, 0x00, 0x00];

/// Row bitmaps for a character; bit 0 is the leftmost pixel. Anything
/// outside printable ASCII renders as `?`.
pub fn glyph(c: char) -> [u8; 8] {
    match c {
        '\u{2022}' => BULLET,
        '\u{2013}' | '\u{2014}' => DASH,
        c if (' '..='~').contains(&c) => BASIC_LEGACY[c as usize],
        _ => BASIC_LEGACY['?' as usize],
    }
}

/// Tight bounds of the glyph's ink at the given origin and scale, or
/// `None` for blank glyphs.
pub fn ink_bounds(c: char, x: usize, y: usize, scale: usize) -> Option<PixelBox> {
    let g = glyph(c);
    let rows: Vec<usize> = (0..8).filter(|&r| g[r] != 0).collect();
    let (&r0, &r1) = (rows.first()?, rows.last()?);
    let bits = g.iter().fold(0u8, |acc, r| acc | r);
    let c0 = bits.trailing_zeros() as usize;
    let c1 = 7 - bits.leading_zeros() as usize;
    Some(PixelBox::from_corners(x + c0 * scale, y + r0 * scale, x + (c1 + 1) * scale, y + (r1 + 1) * scale))
}

/// Draws a glyph with its top-left corner at `(x, y)`; pixels falling
/// outside the image are dropped.
pub fn draw_glyph(img: &mut RgbImage, c: char, x: usize, y: usize, scale: usize, ink: Rgb<u8>) {
    let g = glyph(c);
    for (r, bits) in g.iter().enumerate() {
        for col in 0..8 {
            if bits >> col & 1 == 0 {
                continue;
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    let (px, py) = (x + col * scale + dx, y + r * scale + dy);
                    if px < img.width() as usize && py < img.height() as usize {
                        img.put_pixel(px as u32, py as u32, ink);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ink_bounds_match_drawn_pixels() {
        for c in ['A', 'g', '.', '|', '\u{2022}', 'W'] {
            for scale in [1, 2] {
                let mut img = RgbImage::from_pixel(40, 40, Rgb([255, 255, 255]));
                draw_glyph(&mut img, c, 5, 7, scale, Rgb([0, 0, 0]));
                let inked: Vec<(usize, usize)> =
                    img.enumerate_pixels().filter(|p| p.2[0] == 0).map(|p| (p.0 as usize, p.1 as usize)).collect();
                let b = ink_bounds(c, 5, 7, scale).unwrap();
                let x0 = inked.iter().map(|p| p.0).min().unwrap();
                let x1 = inked.iter().map(|p| p.0).max().unwrap() + 1;
                let y0 = inked.iter().map(|p| p.1).min().unwrap();
                let y1 = inked.iter().map(|p| p.1).max().unwrap() + 1;
                assert_eq!(b, PixelBox::from_corners(x0, y0, x1, y1), "{c} at scale {scale}");
            }
        }
        assert_eq!(ink_bounds(' ', 0, 0, 1), None);
    }
}
