use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Splits an `h x w x c` image (HWC, row-major) into `P x P` patches.
///
/// Patches are ordered row-major over the grid; each patch vector is laid
/// out as (row within patch, column within patch, channel).
pub fn patchify(image: &[f64], h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} image is not divisible into {p}x{p} patches"
        )));
    }
    if image.len() != h * w * c {
        return Err(Error::shape(
            "patchify",
            format!("{} values for a {h}x{w}x{c} image", image.len()),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * w + gx * p) * c;
                out.extend_from_slice(&image[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} image is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    if patches.rows() != gh * gw || patches.cols() != p * p * c {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} for a {h}x{w}x{c} image", patches.shape()),
        ));
    }
    let mut image = vec![0.0; h * w * c];
    for gy in 0..gh {
        for gx in 0..gw {
            let patch = patches.row(gy * gw + gx);
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * w + gx * p) * c;
                image[start..start + p * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
            }
        }
    }
    Ok(image)
}
