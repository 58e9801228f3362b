//! Image panels and grids for visual inspection.

use image::{Rgb, RgbImage};
use pose_distill::pose::{PoseLandmarks, LIMBS};
use pose_distill::{Scalar, Tensor};

const GAP: u32 = 2;
const GAP_COLOR: Rgb<u8> = Rgb([255, 255, 255]);

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Image `i` of an `(N, 3, H, W)` batch in `[-1, 1]`.
pub fn batch_image<S: Scalar>(t: &Tensor<S>, i: usize) -> RgbImage {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let plane = h * w;
    let base = i * 3 * plane;
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let k = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| to_u8(d[base + c * plane + k].as_f64())))
    })
}

/// Stick figure of the visible landmarks on black.
pub fn skeleton_panel(lm: &PoseLandmarks, h: usize, w: usize) -> RgbImage {
    let mut img = RgbImage::new(w as u32, h as u32);
    let (fh, fw) = lm.frame();
    let (sy, sx) = (h as f64 / fh as f64, w as f64 / fw as f64);
    let pts = lm.points();
    for (k, &(a, b)) in LIMBS.iter().enumerate() {
        let (p, q) = (pts[a], pts[b]);
        if !(p.visible && q.visible) {
            continue;
        }
        let hue = k as f64 / LIMBS.len() as f64;
        let color = Rgb([(255.0 * (1.0 - hue)) as u8, (255.0 * (0.5 + 0.5 * (6.0 * hue).sin())) as u8, (255.0 * hue) as u8]);
        let steps = (((q.x - p.x) * sx).abs().max(((q.y - p.y) * sy).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = ((p.x + t * (q.x - p.x)) * sx).round();
            let y = ((p.y + t * (q.y - p.y)) * sy).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    for p in pts.iter().filter(|p| p.visible) {
        let (x, y) = ((p.x * sx).round(), (p.y * sy).round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
            img.put_pixel(x as u32, y as u32, Rgb([255, 255, 255]));
        }
    }
    img
}

/// Blank panel marking a missing image.
pub fn empty_panel(h: usize, w: usize) -> RgbImage {
    RgbImage::from_pixel(w as u32, h as u32, Rgb([128, 128, 128]))
}

/// Lays equal-sized panels out row by row with a white gap.
pub fn compose(rows: &[Vec<RgbImage>]) -> RgbImage {
    let (pw, ph) = rows.iter().flatten().next().map_or((1, 1), |p| p.dimensions());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let n = rows.len() as u32;
    let mut out = RgbImage::from_pixel(cols * (pw + GAP) + GAP, n * (ph + GAP) + GAP, GAP_COLOR);
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            image::imageops::replace(&mut out, panel, (GAP + c as u32 * (pw + GAP)) as i64, (GAP + r as u32 * (ph + GAP)) as i64);
        }
    }
    out
}
