use candle_core::Tensor;

use crate::datamodel::ImageRecord;
use crate::error::{Error, Result};
use crate::nn::matrix;

/// Cuts an image into non-overlapping `p × p` patches (row-major, edge
/// remainders dropped). Each row holds one patch's pixels scaled to [0, 1],
/// channels innermost.
pub fn patchify(image: &ImageRecord, p: usize) -> Result<Tensor> {
    let (w, h) = image.pixels.dimensions();
    let (w, h) = (w as usize, h as usize);
    if p == 0 || w < p || h < p {
        return Err(Error::ShapeMismatch(format!(
            "image {} is {w}x{h}, smaller than patch size {p}",
            image.id
        )));
    }
    let (cols, rows) = (w / p, h / p);
    let mut data = Vec::with_capacity(cols * rows * p * p * 3);
    for py in 0..rows {
        for px in 0..cols {
            for y in 0..p {
                for x in 0..p {
                    let pixel = image.pixels.get_pixel((px * p + x) as u32, (py * p + y) as u32);
                    data.extend(pixel.0.iter().map(|&c| f64::from(c) / 255.0));
                }
            }
        }
    }
    matrix(data, rows * cols, p * p * 3)
}
