//! Samples, synthetic tasks, patch sampling, CT pre-processing and PGM I/O.

mod lung;
mod patches;
mod pgm;
mod synth;

pub use lung::{clamp_hu, lung_preprocess, normalize_slice, opening_cross, CtSlice, HU_MAX, HU_MIN};
pub use patches::{extract_patch, patch_corners, sample_patches, Patch, PatchSet, PatchSpec};
pub use pgm::{
    decode_pgm, encode_pgm, label_map_to_ids, load_dataset, read_image, read_pgm_levels, write_dataset, write_image,
    write_label_map, write_mask, PgmLevels, HU_OFFSET,
};
pub use synth::{synth_dataset, synth_with_geometry, Disk, Geometry, Task};

use crate::error::{Error, Result};
use crate::layers::class_ids;
use crate::numerics::Tensor;

/// One image with its per-pixel class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`, integer class ids stored as reals.
    pub mask: Tensor,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let (ishape, mshape) = (image.shape(), mask.shape());
        if ishape.len() != 3 || mshape.len() != 2 || ishape[1..] != *mshape {
            return Err(Error::shape(format!(
                "sample image {ishape:?} and mask {mshape:?} disagree"
            )));
        }
        if let Some(i) = image.first_non_finite() {
            return Err(Error::Numeric {
                index: i,
                context: "sample image".into(),
            });
        }
        Ok(Sample { image, mask })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Checks every mask id is an integer below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        class_ids(&self.mask, classes).map(|_| ())
    }
}

/// Indexed access to samples, materialized on demand.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Sample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, index: usize) -> Sample {
        self[index].clone()
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Sample {
        self[index].clone()
    }
}

/// Stacks the listed samples into `([B, C, H, W] images, [B, H, W] masks)`.
pub fn stack<S: SampleSource + ?Sized>(source: &S, indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let first = match indices.first() {
        Some(&i) => source.sample(i),
        None => return Err(Error::Contract("cannot stack an empty batch".into())),
    };
    let ishape = first.image.shape().to_vec();
    let mshape = first.mask.shape().to_vec();
    let mut images = Vec::with_capacity(indices.len() * first.image.len());
    let mut masks = Vec::with_capacity(indices.len() * first.mask.len());
    images.extend_from_slice(first.image.data());
    masks.extend_from_slice(first.mask.data());
    for &i in &indices[1..] {
        let s = source.sample(i);
        if s.image.shape() != ishape.as_slice() {
            return Err(Error::shape(format!(
                "batch mixes image shapes {ishape:?} and {:?}",
                s.image.shape()
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let b = indices.len();
    Ok((
        Tensor::new(&[b, ishape[0], ishape[1], ishape[2]], images)?,
        Tensor::new(&[b, mshape[0], mshape[1]], masks)?,
    ))
}
