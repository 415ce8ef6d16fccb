//! RGB rasters with channels in [0, 1], plus 8-bit PNG I/O.

use std::path::Path;

use crate::error::{invalid, Result, SplatError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    pixels: Vec<[T; 3]>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<[T; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(invalid(format!(
                "image {width}x{height} cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: [T; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn diagonal(&self) -> T {
        T::from_index(self.width * self.width + self.height * self.height).sqrt()
    }

    pub fn pixels(&self) -> &[[T; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [T; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [T; 3]) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn same_size(&self, other: &Image<T>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| p.map(|c| U::lit(c.as_f64()))).collect(),
        }
    }

    /// Quantizes to 8-bit, clamping to [0, 1].
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(invalid("rgb8 buffer does not match the image size"));
        }
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [0, 1, 2].map(|k| T::lit(c[k] as f64 / 255.0)))
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| SplatError::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| SplatError::Image(format!("{}: {e}", path.display())))
    }
}
