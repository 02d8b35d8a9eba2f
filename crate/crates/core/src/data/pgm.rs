//! Binary greyscale PGM (`P5`) and the on-disk dataset layout.
//!
//! A dataset directory holds `images/NAME.pgm` and `masks/NAME.pgm` pairs.
//! Masks are label maps: class `k` of `K` is stored as
//! `round(k·255/(K−1))`, so binary masks are 0/255.

use std::fs;
use std::path::Path;

use super::Sample;
use crate::error::{Error, ImageError, Result};
use crate::numerics::Tensor;

/// 16-bit CT slices store `HU + HU_OFFSET`.
pub const HU_OFFSET: f64 = 1024.0;

/// Raw integer samples of a PGM file, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmLevels {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub levels: Vec<u16>,
}

fn header_error(msg: impl Into<String>) -> Error {
    ImageError::Header(msg.into()).into()
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(header_error("header ended early")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| header_error(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PgmLevels> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ImageError::Format(magic).into());
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(header_error(format!("zero extent {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(header_error(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(header_error("missing separator before raster")),
    }
    let n = width * height;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let payload = &bytes[pos..];
    if payload.len() < n * bytes_per {
        return Err(ImageError::Truncated {
            expected: n * bytes_per,
            found: payload.len(),
        }
        .into());
    }
    let levels: Vec<u16> = if bytes_per == 1 {
        payload[..n].iter().map(|&b| b as u16).collect()
    } else {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(&v) = levels.iter().find(|&&v| v as usize > maxval) {
        return Err(header_error(format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(PgmLevels {
        width,
        height,
        maxval: maxval as u16,
        levels,
    })
}

pub fn encode_pgm(img: &PgmLevels) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for &v in &img.levels {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(img.levels.iter().map(|&v| v as u8));
    }
    out
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm_levels(path: &Path) -> Result<PgmLevels> {
    decode_pgm(&read_bytes(path)?)
}

/// `[H, W]` with every sample divided by maxval.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = read_pgm_levels(path)?;
    let scale = img.maxval as f64;
    Tensor::new(
        &[img.height, img.width],
        img.levels.iter().map(|&v| v as f64 / scale).collect(),
    )
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::shape(format!("PGM needs a single-channel image, got {s:?}"))),
    }
}

/// Quantizes `[0, 1]` values to 8 bits.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (height, width) = plane(image)?;
    let mut levels = Vec::with_capacity(image.len());
    for (i, &v) in image.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("pixel {v} at index {i} outside [0, 1]")));
        }
        levels.push((v * 255.0).round() as u16);
    }
    write_bytes(
        path,
        &encode_pgm(&PgmLevels {
            width,
            height,
            maxval: 255,
            levels,
        }),
    )
}

/// Writes class ids `0..classes` as evenly spaced 8-bit levels.
pub fn write_label_map(path: &Path, ids: &Tensor, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Data(format!(
            "label map needs at least 2 classes, got {classes}"
        )));
    }
    let (height, width) = plane(ids)?;
    let mut levels = Vec::with_capacity(ids.len());
    for (i, &v) in ids.data().iter().enumerate() {
        if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
            return Err(Error::Data(format!(
                "label {v} at index {i} is not a class id below {classes}"
            )));
        }
        levels.push((v * 255.0 / (classes - 1) as f64).round() as u16);
    }
    write_bytes(
        path,
        &encode_pgm(&PgmLevels {
            width,
            height,
            maxval: 255,
            levels,
        }),
    )
}

/// Binary mask as 0/255.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    write_label_map(path, mask, 2)
}

/// Inverts [`write_label_map`] on an image read by [`read_image`]. Levels
/// that are not exactly one of the `classes` steps are a data error.
pub fn label_map_to_ids(image: &Tensor, classes: usize) -> Result<Tensor> {
    if classes < 2 {
        return Err(Error::Data(format!(
            "label map needs at least 2 classes, got {classes}"
        )));
    }
    let steps = (classes - 1) as f64;
    let mut ids = Vec::with_capacity(image.len());
    for (i, &v) in image.data().iter().enumerate() {
        let id = (v * steps).round();
        let level = (v * 255.0).round();
        if (id * 255.0 / steps).round() != level {
            return Err(Error::Data(format!(
                "mask level {level} at index {i} is not one of {classes} class levels"
            )));
        }
        ids.push(id);
    }
    Tensor::new(image.shape(), ids)
}

fn pgm_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".pgm") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every `images/NAME.pgm` with its `masks/NAME.pgm`, sorted by name.
pub fn load_dataset(dir: &Path, classes: usize) -> Result<Vec<(String, Sample)>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    let names = pgm_names(&images)?;
    if names.is_empty() {
        return Err(Error::Data(format!("no .pgm images in {}", images.display())));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let file = format!("{name}.pgm");
        let image = read_image(&images.join(&file))?;
        let mask = label_map_to_ids(&read_image(&masks.join(&file))?, classes)?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let sample = Sample::new(image.reshape(&[1, h, w])?, mask)?;
        out.push((name, sample));
    }
    Ok(out)
}

/// Writes samples as `images/NNNN.pgm` and `masks/NNNN.pgm`.
pub fn write_dataset(dir: &Path, samples: &[Sample], classes: usize) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:04}.pgm");
        write_image(&dir.join("images").join(&file), &s.image)?;
        write_label_map(&dir.join("masks").join(&file), &s.mask, classes)?;
    }
    Ok(())
}
