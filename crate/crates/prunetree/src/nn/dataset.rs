//! Image batches and labeled datasets.

use crate::{Error, Result};

/// A batch of images in NCHW layout, values expected in `[0, 1]` for dataset
/// images (intermediate activations reuse the same container unchecked).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    data: Vec<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Batch {
    pub fn new(data: Vec<f32>, n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::validation(format!(
                "batch data length {} does not match {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Batch { data, n, c, h, w })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Batch {
            data: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Length of one image in floats.
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Copies the selected images into a new batch, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.n {
                return Err(Error::validation(format!(
                    "batch index {} out of range ({} images)",
                    i, self.n
                )));
            }
            data.extend_from_slice(self.image(i));
        }
        Batch::new(data, indices.len(), self.c, self.h, self.w)
    }
}

/// Labeled images. Labels are class indices in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Batch,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Batch, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Largest label plus one; zero for an empty dataset.
    pub fn observed_classes(&self) -> usize {
        self.labels.iter().max().map(|m| m + 1).unwrap_or(0)
    }

    /// Checks labels fit the class count and image values are finite and in
    /// `[0, 1]`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::validation(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        if let Some(bad) = self
            .images
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::validation(format!(
                "image value {} outside [0, 1]",
                bad
            )));
        }
        Ok(())
    }

    /// Copies a subset, preserving order of `indices`.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_copies_in_order() {
        let data: Vec<f32> = (0..6).map(|v| v as f32 / 10.0).collect();
        let batch = Batch::new(data, 3, 1, 1, 2).unwrap();
        let picked = batch.select(&[2, 0]).unwrap();
        assert_eq!(picked.data(), &[0.4, 0.5, 0.0, 0.1]);
    }

    #[test]
    fn validate_rejects_out_of_range_labels() {
        let ds = Dataset::new(Batch::zeros(2, 1, 2, 2), vec![0, 3]).unwrap();
        assert!(ds.validate(3).is_err());
        assert!(ds.validate(4).is_ok());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(Dataset::new(Batch::zeros(2, 1, 2, 2), vec![0]).is_err());
    }
}
