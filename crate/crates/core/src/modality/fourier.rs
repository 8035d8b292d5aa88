use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized coordinates of an axis of `len` positions in `[-1, 1]`;
/// a singleton axis sits at 0.
pub fn axis_coordinates(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    (0..len)
        .map(|i| -1.0 + 2.0 * i as f64 / (len - 1) as f64)
        .collect()
}

/// `bands` frequencies evenly spaced from 1 to `max_freq / 2`.
pub fn frequencies(bands: usize, max_freq: f64) -> Vec<f64> {
    if bands == 1 {
        return vec![1.0];
    }
    let hi = max_freq / 2.0;
    (0..bands)
        .map(|k| 1.0 + (hi - 1.0) * k as f64 / (bands - 1) as f64)
        .collect()
}

/// Fourier positional features for a grid of `lengths` positions.
///
/// Rows enumerate positions in row-major order. Each axis contributes
/// `[p, sin(π f₁ p) .. sin(π f_F p), cos(π f₁ p) .. cos(π f_F p)]`, and the
/// per-axis blocks are concatenated, giving `a · (2F + 1)` columns.
pub fn fourier_encoding(lengths: &[usize], bands: usize, max_freq: f64) -> Result<Tensor> {
    if bands < 1 {
        return Err(Error::Config("num_freq_bands must be at least 1".into()));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Config(format!(
            "invalid positional extents {lengths:?}"
        )));
    }
    let freqs = frequencies(bands, max_freq);
    let coords: Vec<Vec<f64>> = lengths.iter().map(|&l| axis_coordinates(l)).collect();
    let per_axis = 2 * bands + 1;
    let width = lengths.len() * per_axis;
    let t: usize = lengths.iter().product();

    let mut data = Vec::with_capacity(t * width);
    let mut idx = vec![0usize; lengths.len()];
    for _ in 0..t {
        for (axis, &i) in idx.iter().enumerate() {
            let p = coords[axis][i];
            data.push(p);
            data.extend(freqs.iter().map(|f| (std::f64::consts::PI * f * p).sin()));
            data.extend(freqs.iter().map(|f| (std::f64::consts::PI * f * p).cos()));
        }
        for d in (0..lengths.len()).rev() {
            idx[d] += 1;
            if idx[d] < lengths[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(vec![t, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_match_formula() {
        assert_eq!(
            fourier_encoding(&[7, 7], 6, 1.0).unwrap().shape(),
            &[49, 26]
        );
        assert_eq!(fourier_encoding(&[20], 3, 1.0).unwrap().shape(), &[20, 7]);
    }

    #[test]
    fn singleton_axis_is_midpoint() {
        let e = fourier_encoding(&[1], 3, 1.0).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_bands_rejected() {
        assert!(matches!(
            fourier_encoding(&[4], 0, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn row_major_position_order() {
        let e = fourier_encoding(&[2, 3], 1, 2.0).unwrap();
        // first column of each axis block is the raw coordinate
        let w = 6;
        let rows: Vec<(f64, f64)> = (0..6)
            .map(|r| (e.data()[r * w], e.data()[r * w + 3]))
            .collect();
        assert_eq!(
            rows,
            vec![
                (-1., -1.),
                (-1., 0.),
                (-1., 1.),
                (1., -1.),
                (1., 0.),
                (1., 1.)
            ]
        );
    }

    #[test]
    fn frequencies_span_one_to_half_max() {
        let f = frequencies(4, 10.0);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[3], 5.0);
    }
}
