use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use tsim_core::render::{BBox, Eye, Observation};

const OVERLAY: Rgb<u8> = Rgb([255, 230, 0]);

/// Inclusive pixel rectangle `(c0, r0, c1, r1)` covered by a normalized box.
pub fn bbox_pixels(b: BBox, res: usize) -> (u32, u32, u32, u32) {
    let px = |v: f64| (v * res as f64).round() as i64;
    let clamp = |v: i64| v.clamp(0, res as i64 - 1) as u32;
    let (c0, c1) = (px(b.cx - b.w / 2.0), px(b.cx + b.w / 2.0) - 1);
    let (r0, r1) = (px(b.cy - b.h / 2.0), px(b.cy + b.h / 2.0) - 1);
    (clamp(c0), clamp(r0), clamp(c1), clamp(r1))
}

pub fn eye_image(obs: &Observation, eye: Eye) -> RgbImage {
    let res = obs.resolution();
    let plane = res * res;
    let data = obs.eye(eye);
    RgbImage::from_fn(res as u32, res as u32, |x, y| {
        let i = y as usize * res + x as usize;
        let q = |c: usize| (data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

/// One-pixel outline along the border of the box.
pub fn draw_box(img: &mut RgbImage, b: BBox) {
    let (c0, r0, c1, r1) = bbox_pixels(b, img.width() as usize);
    for x in c0..=c1 {
        img.put_pixel(x, r0, OVERLAY);
        img.put_pixel(x, r1, OVERLAY);
    }
    for y in r0..=r1 {
        img.put_pixel(c0, y, OVERLAY);
        img.put_pixel(c1, y, OVERLAY);
    }
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}
