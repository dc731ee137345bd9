//! Grayscale intensity frames.

use crate::error::{Error, Result};

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u16,
    pub height: u16,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u16, height: u16, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidArgument(format!(
                "frame byte count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: u16, height: u16, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width as usize * height as usize] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width as usize + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width as usize + x] = value;
    }
}
