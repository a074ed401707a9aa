use dsse_tensor::Tensor;
use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::page::{resize_labels, PixelBox, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Longest allowed side after resizing.
    pub max_side: usize,
    /// Per-channel means subtracted from intensities scaled to `[0, 1]`.
    pub means: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { max_side: 384, means: [0.92, 0.92, 0.92] }
    }
}

/// A network-ready page: content in the top-left `content_h×content_w`
/// corner, zero padding to the right and below.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub tensor: Tensor,
    pub content_w: usize,
    pub content_h: usize,
    pub original_w: usize,
    pub original_h: usize,
}

impl Preprocessed {
    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Horizontal and vertical resize factors.
    pub fn scale(&self) -> (f64, f64) {
        (self.content_w as f64 / self.original_w as f64, self.content_h as f64 / self.original_h as f64)
    }

    /// A box in original page coordinates, mapped onto the content area.
    pub fn map_box(&self, b: &PixelBox) -> PixelBox {
        let (sx, sy) = self.scale();
        b.scaled(sx, sy)
    }
}

/// Resizes so the longer side is at most `max_side` (aspect preserved),
/// pads with zeros to multiples of `2^stages`, and subtracts the means.
pub fn preprocess(image: &RgbImage, cfg: &PreprocessConfig, stages: usize) -> Result<Preprocessed> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(input!("empty image"));
    }
    if cfg.max_side == 0 {
        return Err(input!("max_side must be positive"));
    }
    let longer = w.max(h);
    let (cw, ch) = if longer > cfg.max_side {
        let s = cfg.max_side as f64 / longer as f64;
        (((w as f64 * s).round() as usize).max(1), ((h as f64 * s).round() as usize).max(1))
    } else {
        (w, h)
    };
    let resized;
    let src = if (cw, ch) == (w, h) {
        image
    } else {
        resized = imageops::resize(image, cw as u32, ch as u32, FilterType::Triangle);
        &resized
    };
    let period = 1usize << stages;
    let (pw, ph) = (cw.div_ceil(period) * period, ch.div_ceil(period) * period);
    let mut data = vec![0.0f32; 3 * ph * pw];
    for (x, y, px) in src.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for k in 0..3 {
            data[k * ph * pw + y * pw + x] = px[k] as f32 / 255.0 - cfg.means[k];
        }
    }
    Ok(Preprocessed {
        tensor: Tensor::new(vec![3, ph, pw], data)?,
        content_w: cw,
        content_h: ch,
        original_w: w,
        original_h: h,
    })
}

/// The label mask resampled onto the preprocessed grid, padding marked
/// with [`IGNORE_LABEL`].
pub fn prepare_labels(mask: &GrayImage, pre: &Preprocessed) -> Result<Vec<u8>> {
    if (mask.width() as usize, mask.height() as usize) != (pre.original_w, pre.original_h) {
        return Err(input!("mask size does not match the image"));
    }
    let small = resize_labels(mask.as_raw(), pre.original_w, pre.original_h, pre.content_w, pre.content_h);
    let (pw, ph) = (pre.width(), pre.height());
    let mut out = vec![IGNORE_LABEL; pw * ph];
    for y in 0..pre.content_h {
        out[y * pw..y * pw + pre.content_w].copy_from_slice(&small[y * pre.content_w..(y + 1) * pre.content_w]);
    }
    Ok(out)
}

/// Per-pixel validity of a `factor`-times downsampled grid: a cell is valid
/// when its top-left source pixel lies in the content area.
pub fn valid_mask(pre: &Preprocessed, factor: usize) -> Vec<bool> {
    let (pw, ph) = (pre.width() / factor, pre.height() / factor);
    let (vw, vh) = (pre.content_w.div_ceil(factor), pre.content_h.div_ceil(factor));
    (0..ph).flat_map(|y| (0..pw).map(move |x| x < vw && y < vh)).collect()
}
