//! Quantized grayscale images: an h x w grid of intensity levels in
//! `{0 .. Q-1}`, stored row-major.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    levels: usize,
    pixels: Vec<u8>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, levels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if !(2..=256).contains(&levels) {
            return Err(Error::InvalidArgument(format!(
                "levels must be in 2..=256, got {levels}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} pixels, got {}",
                height,
                width,
                height * width,
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|&&p| p as usize >= levels) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} out of range for {levels} levels"
            )));
        }
        Ok(ImageGrid { height, width, levels, pixels })
    }

    pub fn filled(height: usize, width: usize, levels: usize, level: u8) -> Result<Self> {
        Self::new(height, width, levels, vec![level; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of quantization levels Q.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Total pixel count L.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, level: u8) -> Result<()> {
        if level as usize >= self.levels {
            return Err(Error::InvalidArgument(format!(
                "pixel value {level} out of range for {} levels",
                self.levels
            )));
        }
        self.pixels[row * self.width + col] = level;
        Ok(())
    }

    /// Fraction of positions where both images hold the same level.
    pub fn pixel_agreement(&self, other: &ImageGrid) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape("images differ in shape".into()));
        }
        let same = self.pixels.iter().zip(&other.pixels).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.pixels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_shape_and_range() {
        assert!(ImageGrid::new(2, 2, 4, vec![0, 1, 2, 3]).is_ok());
        assert!(ImageGrid::new(2, 2, 4, vec![0, 1, 2]).is_err());
        assert!(ImageGrid::new(2, 2, 4, vec![0, 1, 2, 4]).is_err());
        assert!(ImageGrid::new(2, 2, 1, vec![0; 4]).is_err());
    }

    #[test]
    fn agreement_counts_matches() {
        let a = ImageGrid::new(1, 4, 4, vec![0, 1, 2, 3]).unwrap();
        let b = ImageGrid::new(1, 4, 4, vec![0, 1, 0, 0]).unwrap();
        assert_eq!(a.pixel_agreement(&b).unwrap(), 0.5);
    }
}
