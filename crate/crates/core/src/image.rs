//! Row-major interleaved float images.
//!
//! The same container holds RGB renders, single-channel masks and depth maps, and
//! the latent blocks exchanged with diffusion priors.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "buffer of length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                other.shape(),
                self.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.check_shape(other, "zip_map")?;
        Ok(Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    /// Multiplies every channel of each pixel by a single-channel `mask` of the same size.
    pub fn mul_mask(&self, mask: &Image) -> Result<Image> {
        if mask.channels != 1 || mask.width != self.width || mask.height != self.height {
            return Err(Error::invalid("mask must be single-channel with matching size"));
        }
        let mut out = self.clone();
        for (px, &m) in out.data.chunks_mut(self.channels).zip(&mask.data) {
            px.iter_mut().for_each(|v| *v *= m);
        }
        Ok(out)
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    /// Concatenates images channel-wise. All inputs must share width and height.
    pub fn concat_channels(parts: &[&Image]) -> Result<Image> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let (w, h) = (first.width, first.height);
        if parts.iter().any(|p| p.width != w || p.height != h) {
            return Err(Error::invalid("concatenated images differ in size"));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(w * h * channels);
        for i in 0..w * h {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Ok(Image {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => ::image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer size checked by construction")
                .save(path)?,
            3 => ::image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer size checked by construction")
                .save(path)?,
            c => return Err(Error::invalid(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Writes a single-channel image as 16-bit grayscale, mapping `lo..hi` linearly to
    /// `0..65535`.
    pub fn save_png16(&self, path: &Path, lo: f64, hi: f64) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::invalid("16-bit export expects a single channel"));
        }
        if !(hi > lo) {
            return Err(Error::invalid("16-bit export range must satisfy lo < hi"));
        }
        let px: Vec<u16> = self
            .data
            .iter()
            .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        ::image::ImageBuffer::<::image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            px,
        )
        .expect("buffer size checked by construction")
        .save(path)?;
        Ok(())
    }

    /// Loads an 8- or 16-bit PNG as `channels` channels scaled to `[0, 1]`.
    pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
        let img = ::image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match channels {
            1 => img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
            3 => img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
            c => return Err(Error::invalid(format!("cannot load {c}-channel PNG"))),
        };
        Image::from_vec(w, h, channels, data)
    }

    /// Places images side by side (same height and channels) into one strip.
    pub fn hstack(parts: &[Image]) -> Result<Image> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to stack"))?;
        let (h, c) = (first.height, first.channels);
        if parts.iter().any(|p| p.height != h || p.channels != c) {
            return Err(Error::invalid("stacked images differ in height or channels"));
        }
        let width: usize = parts.iter().map(|p| p.width).sum();
        let mut out = Image::new(width, h, c);
        let mut x0 = 0;
        for p in parts {
            for y in 0..h {
                for x in 0..p.width {
                    for ch in 0..c {
                        out.set(x0 + x, y, ch, p.get(x, y, ch));
                    }
                }
            }
            x0 += p.width;
        }
        Ok(out)
    }

    /// Arranges equally sized images into a grid with `cols` columns.
    pub fn grid(parts: &[Image], cols: usize) -> Result<Image> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to tile"))?;
        if cols == 0 {
            return Err(Error::invalid("grid needs at least one column"));
        }
        if parts.iter().any(|p| !p.same_shape(first)) {
            return Err(Error::invalid("grid tiles differ in shape"));
        }
        let rows = parts.len().div_ceil(cols);
        let (w, h, c) = first.shape();
        let mut out = Image::new(w * cols, h * rows, c);
        for (i, p) in parts.iter().enumerate() {
            let (ox, oy) = ((i % cols) * w, (i / cols) * h);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out.set(ox + x, oy + y, ch, p.get(x, y, ch));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Peak signal-to-noise ratio in dB for images with values in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b, "psnr")?;
    let n = a.data.len().max(1) as f64;
    let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean absolute difference.
pub fn mean_abs_diff(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b, "mean_abs_diff")?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_interleaves_per_pixel() {
        let a = Image::from_vec(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let b = Image::from_vec(2, 1, 2, vec![10.0, 11.0, 20.0, 21.0]).unwrap();
        let c = Image::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.channels(), 3);
        assert_eq!(c.data(), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = Image::filled(3, 3, 3, 0.4);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let b = Image::filled(3, 3, 3, 0.5);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let img = Image::from_vec(2, 1, 1, vec![0.25, 1.0]).unwrap();
        img.save_png16(&p, 0.0, 1.0).unwrap();
        let back = Image::load_png(&p, 1).unwrap();
        assert!((back.get(0, 0, 0) - 0.25).abs() < 1e-4);
        assert_eq!(back.get(1, 0, 0), 1.0);
    }
}
