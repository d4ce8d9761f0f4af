//! PNG and landmark-file I/O.
//!
//! Pixels are stored as 8-bit RGB and mapped to [−1, 1] in memory via
//! `v = p / 127.5 − 1`; [`quantize`] is the exact inverse for on-grid values.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};

use crate::conditioners::LandmarkSet;
use crate::error::{shape_err, Error, Result};

pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// `[3, H, W]` in [−1, 1] → RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(shape_err(format!("expected 3 channels, got {c}")));
    }
    let v = crate::tensor::to_f64_vec(t)?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| quantize(v[ch * h * w + y * w + x]);
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(img)
}

pub fn rgb_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut v = vec![0f64; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            v[ch * h * w + y as usize * w + x as usize] = dequantize(p.0[ch]);
        }
    }
    Ok(Tensor::from_vec(v, (3, h, w), device)?.to_dtype(dtype)?)
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    tensor_to_rgb(t)?.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path, dtype: DType, device: &Device) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    rgb_to_tensor(&img, dtype, device)
}

/// One `x y` pair per line.
pub fn write_landmarks(path: &Path, lm: &LandmarkSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = String::with_capacity(lm.len() * 24);
    for p in &lm.points {
        s.push_str(&format!("{} {}\n", p[0], p[1]));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) if x.is_finite() && y.is_finite() => points.push([x, y]),
            _ => {
                return Err(Error::Manifest(format!(
                    "{}:{}: expected two finite numbers",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(LandmarkSet { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_grid_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(quantize(dequantize(p)), p);
        }
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let vals: Vec<f64> = (0..3 * 5 * 4).map(|i| dequantize((i * 37 % 256) as u8)).collect();
        let t = Tensor::from_vec(vals.clone(), (3, 5, 4), &Device::Cpu).unwrap();
        write_png(&path, &t).unwrap();
        let back = read_png(&path, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(back.dims(), &[3, 5, 4]);
        assert_eq!(crate::tensor::to_f64_vec(&back).unwrap(), vals);
    }

    #[test]
    fn landmark_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.txt");
        let lm = LandmarkSet {
            points: vec![[0.125, 0.5], [0.3333333333333333, 0.9]],
        };
        write_landmarks(&path, &lm).unwrap();
        assert_eq!(read_landmarks(&path).unwrap(), lm);
        fs::write(&path, "0.1 0.2\n0.3\n").unwrap();
        assert!(read_landmarks(&path).is_err());
    }
}
