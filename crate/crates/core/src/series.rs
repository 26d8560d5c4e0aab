//! Data series values, z-normalization and piecewise aggregate approximation.

use crate::error::{Error, Result};

/// Series whose population standard deviation falls below this are treated
/// as flat and normalize to all zeros.
pub const FLAT_STDDEV: f64 = 1e-8;

/// Rescales `s` to mean 0 and population standard deviation 1.
pub fn znormalize(s: &[f32]) -> Result<Vec<f32>> {
    if let Some(i) = s.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite value {} at point {i}",
            s[i]
        )));
    }
    let mut out = s.to_vec();
    znormalize_in_place(&mut out);
    Ok(out)
}

/// Unchecked variant used on hot paths where values are known to be finite.
pub fn znormalize_in_place(s: &mut [f32]) {
    if s.is_empty() {
        return;
    }
    let len = s.len() as f64;
    let mean = s.iter().map(|&v| v as f64).sum::<f64>() / len;
    let var = s
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / len;
    let std = var.sqrt();
    if std < FLAT_STDDEV {
        s.fill(0.0);
        return;
    }
    for v in s.iter_mut() {
        *v = ((*v as f64 - mean) / std) as f32;
    }
}

/// Per-segment means of a series split into `w` equal segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Paa {
    pub means: Vec<f32>,
    pub segment_len: usize,
}

impl Paa {
    pub fn segments(&self) -> usize {
        self.means.len()
    }

    /// Length of the series this summary was computed from.
    pub fn series_len(&self) -> usize {
        self.means.len() * self.segment_len
    }
}

pub fn compute_paa(s: &[f32], w: usize) -> Result<Paa> {
    if w == 0 || s.is_empty() || !s.len().is_multiple_of(w) {
        return Err(Error::Config(format!(
            "segment count {w} does not divide series length {}",
            s.len()
        )));
    }
    let mut means = vec![0.0; w];
    paa_into(s, &mut means);
    Ok(Paa {
        means,
        segment_len: s.len() / w,
    })
}

/// Writes the segment means of `s` into `out`; `out.len()` must divide `s.len()`.
pub fn paa_into(s: &[f32], out: &mut [f32]) {
    let seg = s.len() / out.len();
    debug_assert_eq!(seg * out.len(), s.len());
    for (mean, chunk) in out.iter_mut().zip(s.chunks_exact(seg)) {
        let sum: f64 = chunk.iter().map(|&v| v as f64).sum();
        *mean = (sum / seg as f64) as f32;
    }
}

/// Decodes little-endian `f32` values from `bytes` into `out`.
pub fn decode_le(bytes: &[u8], out: &mut [f32]) {
    debug_assert_eq!(bytes.len(), out.len() * 4);
    for (v, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        let mut v = 0.0f64;
        (0..n)
            .map(|_| {
                v += rng.random_range(-1.0..1.0);
                v as f32
            })
            .collect()
    }

    #[test]
    fn flat_series_normalizes_to_zeros() {
        assert_eq!(znormalize(&[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(znormalize(&[3.5; 8]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn unit_series_is_fixed_point() {
        assert_eq!(
            znormalize(&[1.0, -1.0, 1.0, -1.0]).unwrap(),
            vec![1.0, -1.0, 1.0, -1.0]
        );
    }

    #[test]
    fn normalized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = znormalize(&random_walk(&mut rng, 256)).unwrap();
            let mean = s.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
            let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 256.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            znormalize(&[1.0, f32::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(znormalize(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn paa_segment_means() {
        assert_eq!(compute_paa(&[1.0, 1.0, 3.0, 3.0], 2).unwrap().means, vec![1.0, 3.0]);
        let c = compute_paa(&[2.5; 12], 4).unwrap();
        assert_eq!(c.means, vec![2.5; 4]);
        assert_eq!(c.segment_len, 3);
    }

    #[test]
    fn paa_matches_block_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_walk(&mut rng, 256);
        let paa = compute_paa(&s, 16).unwrap();
        for i in 0..16 {
            let expect = s[i * 16..(i + 1) * 16].iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            assert!((paa.means[i] as f64 - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn paa_requires_divisor() {
        assert!(matches!(compute_paa(&[0.0; 10], 3), Err(Error::Config(_))));
        assert!(compute_paa(&[0.0; 10], 0).is_err());
    }

    #[test]
    fn paa_of_normalized_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let s = znormalize(&random_walk(&mut rng, 256)).unwrap();
            let paa = compute_paa(&s, 16).unwrap();
            let m = paa.means.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-5);
        }
    }
}
