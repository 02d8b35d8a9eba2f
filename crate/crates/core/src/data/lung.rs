//! Surrounding-tissue mask construction for CT slices.

use crate::error::{Error, Result};
use crate::metrics::THRESHOLD;
use crate::numerics::Tensor;

pub const HU_MIN: f64 = -512.0;
pub const HU_MAX: f64 = 512.0;

/// Raw slice with its binary lung mask, both `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtSlice {
    pub raw: Tensor,
    pub gt: Tensor,
}

impl CtSlice {
    pub fn new(raw: Tensor, gt: Tensor) -> Result<Self> {
        if raw.rank() != 2 || raw.shape() != gt.shape() {
            return Err(Error::shape(format!(
                "CT slice {:?} and mask {:?} must be equal-shape 2-D",
                raw.shape(),
                gt.shape()
            )));
        }
        if let Some(i) = gt.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!(
                "lung mask value {} at index {i} is not binary",
                gt.data()[i]
            )));
        }
        if let Some(i) = raw.first_non_finite() {
            return Err(Error::Numeric {
                index: i,
                context: "CT slice".into(),
            });
        }
        Ok(CtSlice { raw, gt })
    }
}

pub fn clamp_hu(raw: &Tensor) -> Tensor {
    raw.map(|v| v.clamp(HU_MIN, HU_MAX))
}

/// Clamps to `[HU_MIN, HU_MAX]`, then min-max normalizes to `[0, 1]`.
pub fn normalize_slice(raw: &Tensor) -> Result<Tensor> {
    let clamped = clamp_hu(raw);
    let (lo, hi) = clamped
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return Err(Error::Data(format!("CT slice is constant ({lo}) after clamping")));
    }
    Ok(clamped.map(|v| (v - lo) / (hi - lo)))
}

fn cross_neighbors(h: usize, w: usize, y: usize, x: usize) -> impl Iterator<Item = usize> {
    let up = (y > 0).then(|| (y - 1) * w + x);
    let down = (y + 1 < h).then(|| (y + 1) * w + x);
    let left = (x > 0).then(|| y * w + x - 1);
    let right = (x + 1 < w).then(|| y * w + x + 1);
    [Some(y * w + x), up, down, left, right].into_iter().flatten()
}

/// Erosion then dilation of a binary `[H, W]` map with the 3×3 cross.
/// Only in-bounds neighbors take part, so the border is not eroded by the
/// outside.
pub fn opening_cross(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let src = mask.data();
    let mut eroded = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if cross_neighbors(h, w, y, x).all(|i| src[i] == 1.0) {
                eroded[y * w + x] = 1.0;
            }
        }
    }
    let mut opened = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if cross_neighbors(h, w, y, x).any(|i| eroded[i] == 1.0) {
                opened[y * w + x] = 1.0;
            }
        }
    }
    Tensor::new(&[h, w], opened).expect("same extent as input")
}

/// Clamp, normalize, binarize at 0.5, add the lung mask, open with the 3×3
/// cross, then remove the lung mask. The result is binary and disjoint from
/// `slice.gt`.
pub fn lung_preprocess(slice: &CtSlice) -> Result<Tensor> {
    let norm = normalize_slice(&slice.raw)?;
    let binary = norm.map(|v| if v >= THRESHOLD { 1.0 } else { 0.0 });
    let union = binary.zip_map(&slice.gt, |a, g| a.max(g))?;
    let opened = opening_cross(&union);
    opened.zip_map(&slice.gt, |a, g| if g == 1.0 { 0.0 } else { a })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(&[h, w], v).unwrap()
    }

    #[test]
    fn clamps_before_normalizing() {
        let raw = t2(1, 4, vec![-900.0, 0.0, 512.0, 600.0]);
        let n = normalize_slice(&raw).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0, 1.0]);
        assert_eq!(clamp_hu(&raw).data()[3], 512.0);
    }

    #[test]
    fn constant_slice_is_data_error() {
        let s = CtSlice::new(t2(2, 2, vec![700.0; 4]), Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        assert!(matches!(lung_preprocess(&s), Err(Error::Data(_))));
    }

    #[test]
    fn opening_removes_isolated_pixels() {
        let mut v = vec![0.0; 25];
        v[12] = 1.0;
        assert_eq!(opening_cross(&t2(5, 5, v)).sum(), 0.0);
        let full = Tensor::ones(&[4, 4]).unwrap();
        assert_eq!(opening_cross(&full), full);
    }

    #[test]
    fn output_avoids_lung() {
        let raw = Tensor::from_fn(&[6, 6], |i| if i % 6 < 3 { 300.0 } else { -400.0 }).unwrap();
        let gt = Tensor::from_fn(&[6, 6], |i| ((i % 6) == 4) as u8 as f64).unwrap();
        let out = lung_preprocess(&CtSlice::new(raw, gt.clone()).unwrap()).unwrap();
        for (&o, &g) in out.data().iter().zip(gt.data()) {
            assert!(o == 0.0 || o == 1.0);
            assert!(!(o == 1.0 && g == 1.0));
        }
        assert_eq!(out.at(&[2, 1]), 1.0);
    }

    #[test]
    fn nonbinary_mask_rejected() {
        assert!(CtSlice::new(Tensor::zeros(&[2, 2]).unwrap(), Tensor::full(&[2, 2], 0.5).unwrap()).is_err());
    }
}
