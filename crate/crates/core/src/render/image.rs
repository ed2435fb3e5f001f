//! RGBA raster with straight alpha, PNG I/O and connected components.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbaImage};

use crate::error::{Error, Result};

/// Straight-alpha RGBA image with samples in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Fully transparent image.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 4],
        }
    }

    pub fn filled(width: usize, height: usize, rgba: [f64; 4]) -> Self {
        let mut img = Self::new(width, height);
        for p in img.data.chunks_mut(4) {
            p.copy_from_slice(&rgba);
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 4 {
            return Err(Error::Shape(format!(
                "{}x{} RGBA image needs {} samples, got {}",
                width,
                height,
                width * height * 4,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 4] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgba: [f64; 4]) {
        let i = (y * self.width + x) * 4;
        self.data[i..i + 4].copy_from_slice(&rgba);
    }

    pub fn alpha(&self, x: usize, y: usize) -> f64 {
        self.data[(y * self.width + x) * 4 + 3]
    }

    /// Sum of alpha over all pixels (coverage-weighted area in pixels).
    pub fn coverage(&self) -> f64 {
        self.data.chunks(4).map(|p| p[3]).sum()
    }

    pub fn opaque_count(&self) -> usize {
        self.data.chunks(4).filter(|p| p[3] > 0.0).count()
    }

    /// Planar channel-major copy `[4, height, width]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 4 * n];
        for (i, p) in self.data.chunks(4).enumerate() {
            for c in 0..4 {
                out[c * n + i] = p[c];
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Self::new(w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 4;
            let dst = y * w * 4;
            out.data[dst..dst + w * 4].copy_from_slice(&self.data[src..src + w * 4]);
        }
        Ok(out)
    }

    /// 8-bit RGBA PNG bytes. Fully transparent pixels are written as zero.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = RgbaImage::new(self.width as u32, self.height as u32);
        for (dst, p) in buf.pixels_mut().zip(self.data.chunks(4)) {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            dst.0 = if q(p[3]) == 0 {
                [0, 0, 0, 0]
            } else {
                [q(p[0]), q(p[1]), q(p[2]), q(p[3])]
            };
        }
        let mut bytes = Vec::new();
        buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
        Ok(bytes)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgba8();
        let data = img
            .pixels()
            .flat_map(|p| p.0.map(|v| v as f64 / 255.0))
            .collect();
        Self::from_raw(img.width() as usize, img.height() as usize, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_png_bytes(&bytes)
    }

    /// Tile images left-to-right, top-to-bottom into a grid.
    pub fn grid(images: &[Image], columns: usize) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Empty("no images to tile".into()))?;
        let (w, h) = (first.width, first.height);
        if images.iter().any(|i| i.width != w || i.height != h) {
            return Err(Error::Shape("grid images differ in size".into()));
        }
        let cols = columns.max(1).min(images.len());
        let rows = images.len().div_ceil(cols);
        let mut out = Self::new(w * cols, h * rows);
        for (k, img) in images.iter().enumerate() {
            let (ox, oy) = ((k % cols) * w, (k / cols) * h);
            for y in 0..h {
                for x in 0..w {
                    out.set_pixel(ox + x, oy + y, img.pixel(x, y));
                }
            }
        }
        Ok(out)
    }
}

/// 8-connected component labels of a boolean mask (0 = background,
/// components numbered from 1 in raster order of first pixel).
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}
