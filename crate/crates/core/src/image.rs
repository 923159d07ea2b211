//! RGB images with channel values in `[0, 1]`.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ResampleKind, Resampler};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major `[height, width, 3]`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Sub-image covering rows `y0..y1` and columns `x0..x1`.
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let mut data = Vec::with_capacity((y1 - y0) * (x1 - x0) * 3);
        for y in y0..y1 {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + (x1 - x0) * 3]);
        }
        Self {
            height: y1 - y0,
            width: x1 - x0,
            data,
        }
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let r = Resampler::new(ResampleKind::Bilinear, (self.height, self.width), (height, width));
        Self {
            height,
            width,
            data: r.apply(&self.data, 3),
        }
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// PNG with the experiment seed in a `seed` text chunk.
    pub fn write_png(&self, path: &Path, seed: u64) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk("seed".into(), seed.to_string())
            .map_err(|e| Error::Artifact(format!("png text chunk: {e}")))?;
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Artifact(format!("png header: {e}")))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Artifact(format!("png data: {e}")))?;
        Ok(())
    }

    /// Binary PPM (P6) with the seed in a header comment.
    pub fn write_ppm(&self, path: &Path, seed: u64) -> Result<()> {
        let mut bytes = format!("P6\n# seed {seed}\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.to_rgb8());
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Tiles equally sized images left to right, top to bottom.
    pub fn grid(images: &[Image], columns: usize) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image grid".into()))?;
        let (h, w) = (first.height, first.width);
        let columns = columns.max(1).min(images.len());
        let rows = images.len().div_ceil(columns);
        let mut out = Image::filled(rows * h, columns * w, [0.0; 3]);
        for (k, img) in images.iter().enumerate() {
            if (img.height, img.width) != (h, w) {
                return Err(Error::shape("image-grid", "images differ in size"));
            }
            let (oy, ox) = ((k / columns) * h, (k % columns) * w);
            for y in 0..h {
                for x in 0..w {
                    out.set_pixel(oy + y, ox + x, img.pixel(y, x));
                }
            }
        }
        Ok(out)
    }
}
