use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits a `C×H×W` image into row-major non-overlapping `p×p` patches, each
/// flattened channel-major: `N_patches × (C·p²)`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape() else {
        return Err(Error::dim("patchify", image.shape(), &[0, 0, 0]));
    };
    let (c, h, w) = (*c, *h, *w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image {h}x{w} is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let len = c * p * p;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * len);
    for pr in 0..gh {
        for pc in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + pr * p + dy) * w + pc * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, len], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image {h}x{w} is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, channels * p * p] {
        return Err(Error::dim("unpatchify", patches.shape(), &[gh * gw, channels * p * p]));
    }
    let mut out = vec![0.0; channels * h * w];
    let mut it = patches.data().iter();
    for pr in 0..gh {
        for pc in 0..gw {
            for ch in 0..channels {
                for dy in 0..p {
                    let row = (ch * h + pr * p + dy) * w + pc * p;
                    for v in &mut out[row..row + p] {
                        *v = *it.next().unwrap();
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, h, w], out)
}
