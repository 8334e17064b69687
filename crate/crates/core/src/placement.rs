//! Patch placement: bilinear upsampling of attention maps, argmax center
//! selection with deterministic tie-breaking and boundary clamping, binary
//! mask construction, and patched-image composition.

use crate::error::{Error, Result};
use crate::model::AttentionMap;
use crate::raster::{Image, Patch, Raster};
use crate::tape::{BufId, Tape};
use serde::{Deserialize, Serialize};

/// A placed square: center pixel, side length, and the image bounds the
/// square must stay within.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub center_row: usize,
    pub center_col: usize,
    pub patch_side: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Placement {
    pub fn new(
        center_row: usize,
        center_col: usize,
        patch_side: usize,
        image_height: usize,
        image_width: usize,
    ) -> Result<Self> {
        if patch_side == 0 {
            return Err(Error::InvalidInput("patch_side must be at least 1".into()));
        }
        let p = Placement { center_row, center_col, patch_side, image_height, image_width };
        let (top_r, top_c) = p.top_left_unchecked();
        if center_row < patch_side / 2
            || center_col < patch_side / 2
            || top_r + patch_side > image_height
            || top_c + patch_side > image_width
        {
            return Err(Error::InvalidInput(format!(
                "patch square {patch_side} at ({center_row},{center_col}) leaves {image_height}x{image_width} bounds"
            )));
        }
        Ok(p)
    }

    fn top_left_unchecked(&self) -> (usize, usize) {
        (
            self.center_row.saturating_sub(self.patch_side / 2),
            self.center_col.saturating_sub(self.patch_side / 2),
        )
    }

    /// Top-left corner of the placed square.
    pub fn top_left(&self) -> (usize, usize) {
        (self.center_row - self.patch_side / 2, self.center_col - self.patch_side / 2)
    }
}

/// Binary raster that is 1 exactly on one axis-aligned square.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn ones_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    fn matches(&self, placement: &Placement) -> bool {
        if self.height != placement.image_height || self.width != placement.image_width {
            return false;
        }
        let (top_r, top_c) = placement.top_left();
        for r in 0..self.height {
            for c in 0..self.width {
                let inside = r >= top_r
                    && r < top_r + placement.patch_side
                    && c >= top_c
                    && c < top_c + placement.patch_side;
                if self.get(r, c) != inside as u8 {
                    return false;
                }
            }
        }
        true
    }
}

/// Patch side from the configured length ratio: round(ratio * min(H, W)),
/// at least one pixel.
pub fn patch_side_for_ratio(ratio: f64, image_height: usize, image_width: usize) -> usize {
    let base = image_height.min(image_width) as f64;
    ((ratio * base).round() as usize).max(1)
}

/// Corner-aligned bilinear upsampling of a g x g attention map to H x W.
/// Output values stay within the input range.
pub fn upsample_map(map: &AttentionMap, image_height: usize, image_width: usize) -> Result<Raster> {
    let g = map.grid;
    if image_height == 0 || image_width == 0 {
        return Err(Error::InvalidInput("upsample target dims must be positive".into()));
    }
    if image_height < g || image_width < g {
        return Err(Error::InvalidInput(format!(
            "upsample target {image_height}x{image_width} smaller than map grid {g}"
        )));
    }
    let src = |i: usize, out_dim: usize| -> f64 {
        if out_dim == 1 || g == 1 {
            0.0
        } else {
            i as f64 * (g - 1) as f64 / (out_dim - 1) as f64
        }
    };
    let mut out = Raster::zeros(image_height, image_width, 1);
    for i in 0..image_height {
        let sr = src(i, image_height);
        let r0 = sr.floor() as usize;
        let r1 = (r0 + 1).min(g - 1);
        let fr = sr - r0 as f64;
        for j in 0..image_width {
            let sc = src(j, image_width);
            let c0 = sc.floor() as usize;
            let c1 = (c0 + 1).min(g - 1);
            let fc = sc - c0 as f64;
            let v = (1.0 - fr) * (1.0 - fc) * map.value(r0, c0)
                + (1.0 - fr) * fc * map.value(r0, c1)
                + fr * (1.0 - fc) * map.value(r1, c0)
                + fr * fc * map.value(r1, c1);
            out.set(i, j, 0, v);
        }
    }
    Ok(out)
}

/// Argmax of the raster (ties broken by smallest row-major index), clamped so
/// the patch square fits fully inside the image.
pub fn select_center(raster: &Raster, patch_side: usize) -> Result<Placement> {
    if raster.channels() != 1 {
        return Err(Error::InvalidInput("select_center expects a single-channel raster".into()));
    }
    let (h, w) = (raster.height(), raster.width());
    if patch_side > h.min(w) {
        return Err(Error::InvalidInput(format!(
            "patch side {patch_side} larger than image {h}x{w}"
        )));
    }
    let mut best = (0usize, 0usize);
    let mut best_val = f64::NEG_INFINITY;
    for r in 0..h {
        for c in 0..w {
            let v = raster.get(r, c, 0);
            if v > best_val {
                best_val = v;
                best = (r, c);
            }
        }
    }
    let half = patch_side / 2;
    let clamp = |v: usize, dim: usize| -> usize { v.clamp(half, dim - patch_side + half) };
    Placement::new(clamp(best.0, h), clamp(best.1, w), patch_side, h, w)
}

/// Random placement with every valid center equally likely; the seeded
/// ablation baseline.
pub fn random_center(
    rng: &mut rand_chacha::ChaCha8Rng,
    image_height: usize,
    image_width: usize,
    patch_side: usize,
) -> Result<Placement> {
    if patch_side > image_height.min(image_width) {
        return Err(Error::InvalidInput(format!(
            "patch side {patch_side} larger than image {image_height}x{image_width}"
        )));
    }
    let half = patch_side / 2;
    let row = half + crate::nn::sample_index(rng, image_height - patch_side + 1);
    let col = half + crate::nn::sample_index(rng, image_width - patch_side + 1);
    Placement::new(row, col, patch_side, image_height, image_width)
}

/// Binary mask with exactly patch_side^2 ones forming the placed square.
pub fn make_mask(placement: &Placement) -> Mask {
    let mut data = vec![0u8; placement.image_height * placement.image_width];
    let (top_r, top_c) = placement.top_left();
    for r in 0..placement.patch_side {
        for c in 0..placement.patch_side {
            data[(top_r + r) * placement.image_width + top_c + c] = 1;
        }
    }
    Mask { height: placement.image_height, width: placement.image_width, data }
}

/// (1 - m) * image + m * patch, with the patch occupying the masked square.
pub fn compose(image: &Image, patch: &Patch, mask: &Mask, placement: &Placement) -> Result<Image> {
    if patch.height() != placement.patch_side || patch.width() != placement.patch_side {
        return Err(Error::shape(
            "compose patch side",
            placement.patch_side,
            format!("{}x{}", patch.height(), patch.width()),
        ));
    }
    if image.height() != placement.image_height || image.width() != placement.image_width {
        return Err(Error::shape(
            "compose image dims",
            format!("{}x{}", placement.image_height, placement.image_width),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    if patch.channels() != image.channels() {
        return Err(Error::shape("compose channels", image.channels(), patch.channels()));
    }
    if !mask.matches(placement) {
        return Err(Error::InvalidInput("mask inconsistent with placement".into()));
    }
    let mut out = image.clone();
    let (top_r, top_c) = placement.top_left();
    for r in 0..placement.patch_side {
        for c in 0..placement.patch_side {
            for ch in 0..image.channels() {
                out.set(top_r + r, top_c + c, ch, patch.get(r, c, ch));
            }
        }
    }
    Ok(out)
}

/// Traced composition for the attack loop; gradient flows into the patch on
/// the square and into the image elsewhere.
pub fn compose_traced(
    tape: &mut Tape,
    image: BufId,
    patch: BufId,
    channels: usize,
    placement: &Placement,
) -> BufId {
    let (top_r, top_c) = placement.top_left();
    tape.place_patch(
        image,
        patch,
        placement.image_height,
        placement.image_width,
        channels,
        placement.patch_side,
        top_r,
        top_c,
    )
}
