use image::{imageops, GrayImage, Luma, Rgb, RgbImage};
use ndarray::ArrayView1;

use super::Latent;
use crate::error::{Error, Result};

/// Linear latent-to-RGB approximation for 4-channel latents.
const LATENT_RGB: [[f64; 4]; 3] = [
    [0.298, 0.187, -0.158, -0.184],
    [0.207, 0.286, 0.189, -0.271],
    [0.208, 0.173, 0.264, -0.473],
];

fn to_byte(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Maps a `[4, H, W]` latent to an RGB preview upscaled by `scale`.
pub fn latent_to_rgb(z: &Latent, scale: u32) -> Result<RgbImage> {
    let (c, h, w) = z.dim();
    if c != 4 || h == 0 || w == 0 {
        return Err(Error::input(format!("cannot decode latent of shape {:?}", z.dim())));
    }
    let small = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px: Vec<f64> = (0..4).map(|ch| z[(ch, y as usize, x as usize)]).collect();
        let rgb = LATENT_RGB.map(|row| to_byte(row.iter().zip(&px).map(|(a, b)| a * b).sum()));
        Rgb(rgb)
    });
    let scale = scale.max(1);
    Ok(imageops::resize(&small, w as u32 * scale, h as u32 * scale, imageops::FilterType::Nearest))
}

/// Grayscale view of a square attention map, normalized by its maximum.
pub fn score_map_image(map: ArrayView1<'_, f64>, scale: u32) -> Result<GrayImage> {
    let side = crate::energy::square_side(map.len())?;
    let max = map.iter().cloned().fold(0.0, f64::max);
    let norm = if max > 0.0 { 1.0 / max } else { 0.0 };
    let small = GrayImage::from_fn(side as u32, side as u32, |x, y| {
        let v = map[y as usize * side + x as usize] * norm;
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let scale = scale.max(1);
    Ok(imageops::resize(
        &small,
        side as u32 * scale,
        side as u32 * scale,
        imageops::FilterType::Nearest,
    ))
}
