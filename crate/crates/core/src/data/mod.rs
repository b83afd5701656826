//! Samples, synthetic phantoms, preprocessing, augmentation, balanced
//! batching and on-disk formats.

pub mod augment;
pub mod dataset;
pub mod format;
pub mod phantom;
pub mod preprocess;
pub mod sampler;

use crate::error::{Error, Result};
use crate::losses::Domain;
use crate::metrics::Labeled;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use dataset::{Dataset, ManifestEntry, Split};
pub use format::{read_sample, write_sample};
pub use phantom::{generate_phantom, PhantomSpec};
pub use preprocess::{normalize_slice, resize_bilinear, resize_nearest};
pub use sampler::{balanced_batches, BatchItem};

/// Channels every network input carries.
pub const CHANNELS: usize = 4;

/// One image slice with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    /// `[4, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, S, S]`, values in `{0, 1}`.
    pub mask: Tensor,
}

impl Sample {
    pub fn new(id: impl Into<String>, domain: Domain, image: Tensor, mask: Tensor) -> Result<Self> {
        let sample = Self {
            id: id.into(),
            domain,
            image,
            mask,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn size(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image.shape() else {
            return Err(Error::shape(
                "sample",
                format!("image must be [C, H, W], found {:?}", self.image.shape()),
            ));
        };
        if self.mask.shape() != [1, *h, *w] {
            return Err(Error::shape(
                "sample",
                format!(
                    "mask {:?} does not match image {:?}",
                    self.mask.shape(),
                    self.image.shape()
                ),
            ));
        }
        if *c == 0 {
            return Err(Error::shape("sample", "image has no channels"));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image", format!("value {v} outside [0, 1]")));
        }
        if let Some(v) = self.mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask", format!("value {v} is not binary")));
        }
        Ok(())
    }

    /// Fraction of mask pixels that are foreground.
    pub fn mask_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

impl Labeled for Sample {
    fn image(&self) -> &Tensor {
        &self.image
    }

    fn mask(&self) -> &Tensor {
        &self.mask
    }

    fn domain(&self) -> Domain {
        self.domain
    }
}

/// Stacks samples into `([N, C, S, S] images, [N, 1, S, S] masks, domains)`.
pub fn collate<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Tensor, Tensor, Vec<Domain>)> {
    let samples: Vec<&Sample> = samples.into_iter().collect();
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((
        Tensor::stack(&images)?,
        Tensor::stack(&masks)?,
        samples.iter().map(|s| s.domain).collect(),
    ))
}
