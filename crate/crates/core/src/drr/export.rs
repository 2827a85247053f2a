//! 16-bit PNG export of DRRs with a JSON sidecar.

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::DRRImage;
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, write_json};
use crate::labels::GradeLabel;
use crate::volume::Side;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrrSidecar {
    pub patient_id: String,
    pub side: Side,
    pub class: Option<u8>,
    pub crowe: u8,
    pub kl: u8,
    pub padding_flag: bool,
}

/// Write `<path>` as a 16-bit grayscale PNG and `<path>.json` as its sidecar.
pub fn save_drr(image: &DRRImage, label: &GradeLabel, path: &Path) -> Result<()> {
    let px = image.pixels();
    let (h, w) = px.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(px[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)?;
    let sidecar = DrrSidecar {
        patient_id: image.patient_id.clone(),
        side: image.side,
        class: label.combined.map(|c| c.get()),
        crowe: label.crowe,
        kl: label.kl,
        padding_flag: image.padded,
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Read a grayscale PNG (8 or 16 bit) as pixels in `[0, 1]`.
pub fn load_drr_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
    }))
}
