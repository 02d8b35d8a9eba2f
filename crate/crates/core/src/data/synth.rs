//! Noisy geometric segmentation tasks with exact ground truth.

use std::fmt;
use std::str::FromStr;

use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Amplitude of the additive uniform noise.
pub const NOISE: f64 = 0.1;
const MIN_FOREGROUND: f64 = 0.05;
const MAX_FOREGROUND: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Circles,
    Rings,
    /// Two disks of different classes, `K = 3`.
    TwoClassBlobs,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::Circles | Task::Rings => 2,
            Task::TwoClassBlobs => 3,
        }
    }

    /// Clean intensity of each class.
    fn levels(self) -> &'static [f64] {
        match self {
            Task::Circles | Task::Rings => &[0.25, 0.75],
            Task::TwoClassBlobs => &[0.2, 0.55, 0.9],
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circles" => Ok(Task::Circles),
            "rings" => Ok(Task::Rings),
            "two-class-blobs" => Ok(Task::TwoClassBlobs),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (expected circles, rings or two-class-blobs)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Circles => "circles",
            Task::Rings => "rings",
            Task::TwoClassBlobs => "two-class-blobs",
        })
    }
}

/// Disk in pixel coordinates; pixel `(y, x)` is inside iff
/// `(y-cy)² + (x-cx)² ≤ r²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub cy: f64,
    pub cx: f64,
    pub r: f64,
}

impl Disk {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        dy * dy + dx * dx <= self.r * self.r
    }

    fn random(size: usize, rmin: f64, rmax: f64, rng: &mut Rng) -> Disk {
        let s = size as f64;
        let r = rng.uniform(rmin * s, rmax * s);
        Disk {
            cy: rng.uniform(r, s - 1.0 - r),
            cx: rng.uniform(r, s - 1.0 - r),
            r,
        }
    }
}

/// The geometry a sample was rendered from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Disk(Disk),
    /// Foreground is inside `outer` and outside `inner`.
    Ring {
        outer: Disk,
        inner: Disk,
    },
    /// Class 1 is `first`; class 2 is `second` and wins on overlap.
    Blobs {
        first: Disk,
        second: Disk,
    },
}

impl Geometry {
    pub fn class_at(&self, y: usize, x: usize) -> usize {
        match self {
            Geometry::Disk(d) => d.contains(y, x) as usize,
            Geometry::Ring { outer, inner } => (outer.contains(y, x) && !inner.contains(y, x)) as usize,
            Geometry::Blobs { first, second } => {
                if second.contains(y, x) {
                    2
                } else if first.contains(y, x) {
                    1
                } else {
                    0
                }
            }
        }
    }

    fn random(task: Task, size: usize, rng: &mut Rng) -> Geometry {
        match task {
            Task::Circles => Geometry::Disk(Disk::random(size, 0.12, 0.4, rng)),
            Task::Rings => {
                let outer = Disk::random(size, 0.2, 0.45, rng);
                let inner = Disk {
                    r: outer.r * rng.uniform(0.35, 0.7),
                    ..outer
                };
                Geometry::Ring { outer, inner }
            }
            Task::TwoClassBlobs => Geometry::Blobs {
                first: Disk::random(size, 0.1, 0.3, rng),
                second: Disk::random(size, 0.1, 0.3, rng),
            },
        }
    }
}

fn render(task: Task, geometry: &Geometry, size: usize, rng: &mut Rng) -> Result<Sample> {
    let levels = task.levels();
    let mut mask = Vec::with_capacity(size * size);
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let class = geometry.class_at(y, x);
            mask.push(class as f64);
            let noisy = levels[class] + rng.uniform(-NOISE, NOISE);
            image.push(noisy.clamp(0.0, 1.0));
        }
    }
    Sample::new(Tensor::new(&[1, size, size], image)?, Tensor::new(&[size, size], mask)?)
}

/// `n` samples of a single-channel `size×size` task, each returned with its
/// generating geometry. Geometry is redrawn until the foreground covers
/// between 5% and 60% of the image.
pub fn synth_with_geometry(task: Task, n: usize, size: usize, rng: &mut Rng) -> Result<Vec<(Sample, Geometry)>> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::Data(format!(
            "synthetic image size {size} is not a positive multiple of 8"
        )));
    }
    let pixels = (size * size) as f64;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let geometry = Geometry::random(task, size, rng);
        let fg = (0..size * size)
            .filter(|&i| geometry.class_at(i / size, i % size) != 0)
            .count() as f64
            / pixels;
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg) {
            continue;
        }
        out.push((render(task, &geometry, size, rng)?, geometry));
    }
    Ok(out)
}

pub fn synth_dataset(task: Task, n: usize, size: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    Ok(synth_with_geometry(task, n, size, rng)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}
