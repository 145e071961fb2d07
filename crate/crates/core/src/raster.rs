//! Colour-space helpers and the handful of resampling kernels the pipeline needs.
//!
//! Resampling is implemented here rather than through `image::imageops` because
//! compositing relies on exact identities (an identity-sized resample must be a
//! bit-exact copy), which we want to hold by construction.

use image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};
use std::sync::OnceLock;

/// Rec. 709 luminance weights, applied to linear-light RGB.
pub const REC709: [f64; 3] = [0.2126, 0.7152, 0.0722];

fn srgb_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [0.0; 256];
        for (i, v) in lut.iter_mut().enumerate() {
            *v = srgb_to_linear(i as f64 / 255.0);
        }
        lut
    })
}

/// sRGB transfer function decode.
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Linear-light value of an 8-bit sRGB channel.
#[inline]
pub fn decode_u8(c: u8) -> f64 {
    srgb_lut()[c as usize]
}

pub fn linear_rgb(px: [u8; 3]) -> [f64; 3] {
    [decode_u8(px[0]), decode_u8(px[1]), decode_u8(px[2])]
}

/// Relative luminance of a linear-light RGB triple.
pub fn luminance(linear: [f64; 3]) -> f64 {
    REC709[0] * linear[0] + REC709[1] * linear[1] + REC709[2] * linear[2]
}

pub fn luminance_u8(px: [u8; 3]) -> f64 {
    luminance(linear_rgb(px))
}

/// Summed-area table of per-pixel linear luminance, for O(1) patch means.
pub struct LuminanceIntegral {
    width: u32,
    height: u32,
    table: Vec<f64>,
}

impl LuminanceIntegral {
    pub fn new(image: &RgbImage) -> Self {
        let (w, h) = image.dimensions();
        let stride = w as usize + 1;
        let mut table = vec![0.0; stride * (h as usize + 1)];
        for y in 0..h as usize {
            let mut row = 0.0;
            for x in 0..w as usize {
                row += luminance_u8(image.get_pixel(x as u32, y as u32).0);
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Self {
            width: w,
            height: h,
            table,
        }
    }

    /// Mean luminance over `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn mean(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> Option<f64> {
        let x0 = x0.clamp(0, self.width as i64) as usize;
        let x1 = x1.clamp(0, self.width as i64) as usize;
        let y0 = y0.clamp(0, self.height as i64) as usize;
        let y1 = y1.clamp(0, self.height as i64) as usize;
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let stride = self.width as usize + 1;
        let t = &self.table;
        let sum = t[y1 * stride + x1] - t[y0 * stride + x1] - t[y1 * stride + x0] + t[y0 * stride + x0];
        Some(sum / ((x1 - x0) * (y1 - y0)) as f64)
    }
}

/// Source coordinate for destination pixel `d` when mapping `src` samples onto `dst`
/// (pixel-centre alignment). Equal sizes map every pixel onto itself exactly.
#[inline]
fn source_coord(d: u32, src: u32, dst: u32) -> f64 {
    if src == dst {
        d as f64
    } else {
        (d as f64 + 0.5) * src as f64 / dst as f64 - 0.5
    }
}

/// Resize an RGBA raster: bilinear on RGB, nearest on alpha.
pub fn resize_logo(src: &RgbaImage, width: u32, height: u32) -> RgbaImage {
    let (sw, sh) = src.dimensions();
    if (sw, sh) == (width, height) {
        return src.clone();
    }
    let mut out = RgbaImage::new(width, height);
    for y in 0..height {
        let fy = source_coord(y, sh, height);
        for x in 0..width {
            let fx = source_coord(x, sw, width);
            let rgb = bilinear_rgb(src, fx, fy);
            let nx = ((x as f64 + 0.5) * sw as f64 / width as f64).floor().min(sw as f64 - 1.0) as u32;
            let ny = ((y as f64 + 0.5) * sh as f64 / height as f64).floor().min(sh as f64 - 1.0) as u32;
            let a = src.get_pixel(nx, ny).0[3];
            out.put_pixel(x, y, Rgba([rgb[0], rgb[1], rgb[2], a]));
        }
    }
    out
}

fn bilinear_rgb(src: &RgbaImage, fx: f64, fy: f64) -> [u8; 3] {
    let (sw, sh) = src.dimensions();
    let fx = fx.clamp(0.0, sw as f64 - 1.0);
    let fy = fy.clamp(0.0, sh as f64 - 1.0);
    let x0 = fx.floor() as u32;
    let y0 = fy.floor() as u32;
    let x1 = (x0 + 1).min(sw - 1);
    let y1 = (y0 + 1).min(sh - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let p00 = src.get_pixel(x0, y0).0;
    let p10 = src.get_pixel(x1, y0).0;
    let p01 = src.get_pixel(x0, y1).0;
    let p11 = src.get_pixel(x1, y1).0;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
        let bottom = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
        out[c] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Rotate an RGBA raster about its centre onto the smallest canvas that holds it.
/// RGB is sampled bilinearly, alpha by nearest neighbour; uncovered pixels are transparent.
pub fn rotate_logo(src: &RgbaImage, degrees: f64) -> RgbaImage {
    if degrees == 0.0 {
        return src.clone();
    }
    let (sw, sh) = src.dimensions();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let w = sw as f64;
    let h = sh as f64;
    let dw = (w * cos.abs() + h * sin.abs() - 1e-9).ceil().max(1.0) as u32;
    let dh = (w * sin.abs() + h * cos.abs() - 1e-9).ceil().max(1.0) as u32;
    let (scx, scy) = (w / 2.0, h / 2.0);
    let (dcx, dcy) = (dw as f64 / 2.0, dh as f64 / 2.0);
    let mut out = RgbaImage::from_pixel(dw, dh, Rgba([0, 0, 0, 0]));
    for y in 0..dh {
        for x in 0..dw {
            let dx = x as f64 + 0.5 - dcx;
            let dy = y as f64 + 0.5 - dcy;
            // inverse rotation back into source space
            let sx = cos * dx + sin * dy + scx;
            let sy = -sin * dx + cos * dy + scy;
            if sx < 0.0 || sy < 0.0 || sx >= w || sy >= h {
                continue;
            }
            let a = src.get_pixel(sx.floor() as u32, sy.floor() as u32).0[3];
            let rgb = bilinear_rgb(src, sx - 0.5, sy - 0.5);
            out.put_pixel(x, y, Rgba([rgb[0], rgb[1], rgb[2], a]));
        }
    }
    out
}

/// Bilinear resize of a dense single-channel map.
pub fn resize_map(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    assert_eq!(src.len(), sw * sh);
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let mut out = vec![0.0; dw * dh];
    for y in 0..dh {
        let fy = source_coord(y as u32, sh as u32, dh as u32).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = source_coord(x as u32, sw as u32, dw as u32).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bottom = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Fraction of each destination cell covered by the binary mask (area average).
pub fn mask_coverage(mask: &GrayImage, dw: usize, dh: usize) -> Vec<f64> {
    let (mw, mh) = mask.dimensions();
    let (mw, mh) = (mw as usize, mh as usize);
    let mut out = vec![0.0; dw * dh];
    // Exact area overlap in the continuous domain [0, mw) x [0, mh).
    let sx = mw as f64 / dw as f64;
    let sy = mh as f64 / dh as f64;
    for (i, &Luma([v])) in mask.pixels().enumerate() {
        if v == 0 {
            continue;
        }
        let px = (i % mw) as f64;
        let py = (i / mw) as f64;
        let cx0 = (px / sx).floor() as usize;
        let cx1 = (((px + 1.0) / sx).ceil() as usize).min(dw);
        let cy0 = (py / sy).floor() as usize;
        let cy1 = (((py + 1.0) / sy).ceil() as usize).min(dh);
        for cy in cy0..cy1 {
            let oy = ((py + 1.0).min((cy + 1) as f64 * sy) - py.max(cy as f64 * sy)).max(0.0);
            for cx in cx0..cx1 {
                let ox = ((px + 1.0).min((cx + 1) as f64 * sx) - px.max(cx as f64 * sx)).max(0.0);
                out[cy * dw + cx] += ox * oy;
            }
        }
    }
    let cell = sx * sy;
    out.iter_mut().for_each(|v| *v /= cell);
    out
}

/// Resize an RGB image with a triangle filter (used to bring inputs to model resolution).
pub fn resize_rgb(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    if src.dimensions() == (width, height) {
        return src.clone();
    }
    image::imageops::resize(src, width, height, image::imageops::FilterType::Triangle)
}

pub fn solid(width: u32, height: u32, color: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(color))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_roundtrip() {
        for i in 0..=255u8 {
            let l = decode_u8(i);
            let back = (linear_to_srgb(l) * 255.0).round() as u8;
            assert_eq!(back, i);
        }
    }

    #[test]
    fn luminance_extremes() {
        assert_eq!(luminance_u8([0, 0, 0]), 0.0);
        assert!((luminance_u8([255, 255, 255]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_resize_is_exact() {
        let mut img = RgbaImage::new(9, 7);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = Rgba([(i * 7) as u8, (i * 13) as u8, (i * 29) as u8, (i * 31) as u8]);
        }
        assert_eq!(resize_logo(&img, 9, 7), img);
        assert_eq!(rotate_logo(&img, 0.0), img);
    }

    #[test]
    fn rotation_grows_canvas() {
        let img = RgbaImage::from_pixel(20, 10, Rgba([1, 2, 3, 255]));
        let r = rotate_logo(&img, 90.0);
        assert_eq!(r.dimensions(), (10, 20));
        let r = rotate_logo(&img, 15.0);
        assert!(r.width() > 20 && r.height() > 10);
    }

    #[test]
    fn coverage_of_quarter_mask() {
        let mut m = GrayImage::new(8, 8);
        for y in 0..4 {
            for x in 0..4 {
                m.put_pixel(x, y, Luma([255]));
            }
        }
        let cov = mask_coverage(&m, 2, 2);
        assert_eq!(cov, vec![1.0, 0.0, 0.0, 0.0]);
        let cov = mask_coverage(&m, 3, 3);
        let total: f64 = cov.iter().sum::<f64>() / 9.0;
        assert!((total - 0.25).abs() < 1e-12);
    }

    #[test]
    fn patch_mean_matches_direct() {
        let mut img = RgbImage::new(6, 5);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = Rgb([(i * 11) as u8, (i * 5) as u8, (i * 3) as u8]);
        }
        let integral = LuminanceIntegral::new(&img);
        let mut direct = 0.0;
        for y in 1..4 {
            for x in 2..5 {
                direct += luminance_u8(img.get_pixel(x, y).0);
            }
        }
        let m = integral.mean(2, 1, 5, 4).unwrap();
        assert!((m - direct / 9.0).abs() < 1e-12);
        assert!(integral.mean(3, 3, 3, 4).is_none());
    }
}
