//! Random square patches with replacement.
//!
//! A patch set stores only corners; pixels are copied out on access, so
//! hundreds of thousands of patches cost a few megabytes.

use super::{Sample, SampleSource};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: 64,
            n_train: 171_000,
            n_val: 19_000,
            seed: 0,
        }
    }
}

/// Top-left corner of a window in source image `source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Patch {
    pub source: usize,
    pub y: usize,
    pub x: usize,
}

/// Copies the `size×size` window at `(y, x)` out of `sample`.
pub fn extract_patch(sample: &Sample, y: usize, x: usize, size: usize) -> Result<Sample> {
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    if y + size > h || x + size > w {
        return Err(Error::Data(format!(
            "{size}×{size} patch at ({y}, {x}) exceeds {h}×{w} image"
        )));
    }
    let img = sample.image.data();
    let mut image = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for row in y..y + size {
            let start = (ch * h + row) * w + x;
            image.extend_from_slice(&img[start..start + size]);
        }
    }
    let msk = sample.mask.data();
    let mut mask = Vec::with_capacity(size * size);
    for row in y..y + size {
        let start = row * w + x;
        mask.extend_from_slice(&msk[start..start + size]);
    }
    Ok(Sample {
        image: Tensor::new(&[c, size, size], image)?,
        mask: Tensor::new(&[size, size], mask)?,
    })
}

/// Draws `(validation, training)` corners for images of the given
/// `(height, width)` extents. Validation corners are drawn first from the
/// same stream; each corner picks a source image uniformly, then a uniform
/// in-bounds position.
pub fn patch_corners(extents: &[(usize, usize)], spec: &PatchSpec) -> Result<(Vec<Patch>, Vec<Patch>)> {
    let p = spec.patch_size;
    if p == 0 {
        return Err(Error::Data("patch size must be positive".into()));
    }
    if extents.is_empty() && spec.n_train + spec.n_val > 0 {
        return Err(Error::Data("no source images to patch".into()));
    }
    if let Some((i, &(h, w))) = extents.iter().enumerate().find(|(_, &(h, w))| h < p || w < p) {
        return Err(Error::Data(format!("{p}×{p} patch larger than image {i} ({h}×{w})")));
    }
    let mut rng = Rng::new(spec.seed);
    let mut draw = |n: usize| -> Vec<Patch> {
        (0..n)
            .map(|_| {
                let source = rng.below(extents.len());
                let (h, w) = extents[source];
                let y = rng.below(h - p + 1);
                let x = rng.below(w - p + 1);
                Patch { source, y, x }
            })
            .collect()
    };
    let val = draw(spec.n_val);
    let train = draw(spec.n_train);
    Ok((val, train))
}

/// Lazily extracted patches of a borrowed image list.
#[derive(Clone, Debug)]
pub struct PatchSet<'a> {
    pub sources: &'a [Sample],
    pub corners: Vec<Patch>,
    pub patch_size: usize,
}

impl PatchSet<'_> {
    pub fn get(&self, index: usize) -> Sample {
        let c = self.corners[index];
        extract_patch(&self.sources[c.source], c.y, c.x, self.patch_size).expect("corners are drawn in bounds")
    }
}

impl SampleSource for PatchSet<'_> {
    fn len(&self) -> usize {
        self.corners.len()
    }

    fn sample(&self, index: usize) -> Sample {
        self.get(index)
    }
}

/// `(training, validation)` patch sets.
pub fn sample_patches<'a>(samples: &'a [Sample], spec: &PatchSpec) -> Result<(PatchSet<'a>, PatchSet<'a>)> {
    let extents: Vec<(usize, usize)> = samples.iter().map(|s| (s.height(), s.width())).collect();
    let (val, train) = patch_corners(&extents, spec)?;
    let set = |corners| PatchSet {
        sources: samples,
        corners,
        patch_size: spec.patch_size,
    };
    Ok((set(train), set(val)))
}
