use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch grid of an image batch: `[n, gh, gw, patch·patch·C]` plus the grid extents.
pub(crate) fn patch_grid(image: &Tensor, patch: usize) -> Result<(Tensor, usize, usize)> {
    let s = image.shape();
    let (n, h, w, c) = match *s {
        [n, h, w] => (n, h, w, 1),
        [n, h, w, c] => (n, h, w, c),
        _ => {
            return Err(Error::Layout(format!(
                "patchify expects [n,H,W] or [n,H,W,C], got {s:?}"
            )))
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Layout(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for pr in 0..gh {
            for pc in 0..gw {
                for r in 0..patch {
                    let y = pr * patch + r;
                    let start = ((b * h + y) * w + pc * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, gh, gw, width], out)?, gh, gw))
}

/// Cuts images into non-overlapping `patch × patch` squares, returned as a
/// sequence in row-major grid order: `[n, (H/p)·(W/p), p·p·C]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (grid, gh, gw) = patch_grid(image, patch)?;
    let n = grid.shape()[0];
    let width = grid.shape()[3];
    grid.reshape(&[n, gh * gw, width])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_sized_image() {
        let img = Tensor::zeros(&[2, 28, 28]);
        assert_eq!(patchify(&img, 4).unwrap().shape(), &[2, 49, 16]);
    }

    #[test]
    fn whole_image_patch() {
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 16]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn indices_match_brute_force_enumeration() {
        let (h, w, c, patch) = (8, 8, 2, 4);
        let img = Tensor::from_fn(&[1, h, w, c], |i| i as f64);
        let p = patchify(&img, patch).unwrap();
        assert_eq!(p.shape(), &[1, 4, 32]);
        for pr in 0..2 {
            for pc in 0..2 {
                let seq = pr * 2 + pc;
                let mut k = 0;
                for r in 0..patch {
                    for q in 0..patch {
                        for ch in 0..c {
                            let expect = img.at(&[0, pr * patch + r, pc * patch + q, ch]);
                            assert_eq!(p.at(&[0, seq, k]), expect);
                            k += 1;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_is_layout_error() {
        let img = Tensor::zeros(&[1, 6, 8]);
        assert!(matches!(patchify(&img, 4), Err(Error::Layout(_))));
    }
}
