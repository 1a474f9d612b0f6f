//! Grayscale image files.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Reads an 8- or 16-bit image as a `[H, W]` tensor scaled to `[0, 1]`.
/// Colour images are converted to luma.
pub fn load_gray(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
    };
    Tensor::new(&[h, w], data)
}

fn to_u8<T: Real>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG, clipping values to `[0, 1]`.
pub fn save_png<T: Real>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = img.dims2()?;
    let buf: GrayImage =
        ImageBuffer::from_raw(w as u32, h as u32, img.data().iter().map(|&v| to_u8(v)).collect())
            .expect("buffer matches extent");
    buf.save(path)?;
    Ok(())
}

/// Places equally tall images left to right with `gap` pixels of white
/// between them.
pub fn side_by_side<T: Real>(panels: &[&Tensor<T>], gap: usize) -> Result<Tensor<T>> {
    let mut height = None;
    let mut width = 0;
    for p in panels {
        let (h, w) = p.dims2()?;
        if *height.get_or_insert(h) != h {
            return Err(crate::error::shape_err!("panels differ in height"));
        }
        width += w;
    }
    let h = height.unwrap_or(0);
    width += gap * panels.len().saturating_sub(1);
    let mut out = Tensor::full(&[h, width], T::one());
    let mut left = 0;
    for p in panels {
        let (_, w) = p.dims2()?;
        for y in 0..h {
            out.data_mut()[y * width + left..][..w].copy_from_slice(&p.data()[y * w..(y + 1) * w]);
        }
        left += w + gap;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Tensor::from_fn(&[5, 9], |i| i as f64 / 44.0);
        save_png(&img, &path).unwrap();
        let back = load_gray(&path).unwrap();
        assert_eq!(back.shape(), &[5, 9]);
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn sixteen_bit_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(2, 1, vec![0, 65535]).unwrap();
        buf.save(&path).unwrap();
        assert_eq!(load_gray(&path).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn clipping_and_panels() {
        let a = Tensor::new(&[1, 2], vec![-0.5, 2.0]).unwrap();
        let b = Tensor::full(&[1, 1], 0.25);
        let p = side_by_side(&[&a, &b], 1).unwrap();
        assert_eq!(p.data(), &[-0.5, 2.0, 1.0, 0.25]);
        assert!(side_by_side(&[&a, &Tensor::zeros(&[2, 1])], 0).is_err());
        assert_eq!((to_u8(-0.5), to_u8(2.0)), (0, 255));
    }
}
