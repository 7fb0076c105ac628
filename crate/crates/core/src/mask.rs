//! Binary tamper masks.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

/// A strictly binary H×W mask. `true` marks tampered pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    data: Array2<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            data: Array2::from_elem((height, width), false),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            data: Array2::from_elem((height, width), true),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> bool) -> Self {
        Mask {
            data: Array2::from_shape_fn((height, width), f),
        }
    }

    pub fn from_array(data: Array2<bool>) -> Self {
        Mask { data }
    }

    /// Thresholds a probability map at 0.5 (inclusive).
    pub fn from_probabilities(probs: &Array2<f64>) -> Self {
        Mask {
            data: probs.mapv(|p| p >= 0.5),
        }
    }

    /// Any non-zero grey level counts as set; images written by [`Mask::save`]
    /// use 0/255.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Mask::from_fn(h as usize, w as usize, |(r, c)| {
            img.get_pixel(c as u32, r as u32).0[0] >= 128
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            Luma([if self.data[[y as usize, x as usize]] {
                255
            } else {
                0
            }])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Mask::from_gray(&img))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn is_empty_image(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[[row, col]] = value;
    }

    pub fn view(&self) -> ndarray::ArrayView2<'_, bool> {
        self.data.view()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn area_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.data.len() as f64
    }

    /// Mean (row, col) of set pixels, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sr, mut sc) = (0.0, 0.0);
        for ((r, c), &v) in self.data.indexed_iter() {
            if v {
                n += 1;
                sr += r as f64;
                sc += c as f64;
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }

    pub fn contains(&self, other: &Mask) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a || !b)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    /// Nearest-neighbour resampling, used when images are rescaled.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let (h, w) = self.dims();
        Mask::from_fn(height, width, |(r, c)| {
            let sr = ((r as f64 + 0.5) * h as f64 / height as f64) as usize;
            let sc = ((c as f64 + 0.5) * w as f64 / width as f64) as usize;
            self.data[[sr.min(h - 1), sc.min(w - 1)]]
        })
    }
}

pub(crate) fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!(
            "{what}: shape {}x{} does not match {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let m = Mask::from_fn(5, 7, |(r, c)| (r + c) % 3 == 0);
        assert_eq!(Mask::from_gray(&m.to_gray()), m);
    }

    #[test]
    fn centroid_of_single_pixel() {
        let mut m = Mask::zeros(4, 4);
        assert_eq!(m.centroid(), None);
        m.set(1, 3, true);
        assert_eq!(m.centroid(), Some((1.0, 3.0)));
    }

    #[test]
    fn nearest_resize_preserves_halves() {
        let m = Mask::from_fn(4, 4, |(_, c)| c < 2);
        let big = m.resize_nearest(8, 8);
        assert_eq!(big.count(), 32);
        assert!(big.get(0, 3) && !big.get(0, 4));
    }
}
