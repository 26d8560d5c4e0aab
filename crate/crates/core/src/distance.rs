//! Euclidean distances and the PAA-to-iSAX lower bound.
//!
//! Query code works with squared distances throughout and only takes the
//! root at the API boundary. The lower bound comes in two flavours: a scalar
//! version that branches on whether each query segment lies above, below or
//! inside the word's region, and a lane version that evaluates all three
//! branches for a group of segments at once and merges them with bit masks.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::sax::{Breakpoints, SaxWord, MAX_CARDINALITY, MAX_CARD_BITS, MAX_SEGMENTS};
use crate::series::Paa;

/// Stand-in for the infinite outer region edges inside lane arithmetic.
pub const EDGE_SENTINEL: f32 = 1e30;

/// Lane width of the portable kernel (eight single-precision values).
pub const DEFAULT_LANES: usize = 8;

pub fn euclidean(a: &[f32], b: &[f32]) -> Result<f32> {
    check_len(a, b)?;
    Ok(squared_euclidean(a, b).sqrt())
}

#[inline]
fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

#[inline]
pub fn squared_euclidean(a: &[f32], b: &[f32]) -> f32 {
    // Same accumulation order as the bounded version, so both agree exactly.
    squared_euclidean_bounded(a, b, f32::INFINITY).unwrap_or(f32::INFINITY)
}

/// Distance between `a` and `b`, or `None` once the running squared sum
/// exceeds `threshold²`.
pub fn euclidean_early_abandon(a: &[f32], b: &[f32], threshold: f32) -> Result<Option<f32>> {
    check_len(a, b)?;
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidInput(format!("threshold {threshold}")));
    }
    Ok(squared_euclidean_bounded(a, b, threshold * threshold).map(f32::sqrt))
}

/// Squared distance, abandoning as soon as the partial sum passes `limit_sq`.
/// The check runs once per block of 16 points.
#[inline]
pub fn squared_euclidean_bounded(a: &[f32], b: &[f32], limit_sq: f32) -> Option<f32> {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0f32;
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let mut acc = [0.0f32; 8];
        for l in 0..8 {
            let d0 = x[l] - y[l];
            let d1 = x[l + 8] - y[l + 8];
            acc[l] = d0 * d0 + d1 * d1;
        }
        sum += acc.iter().sum::<f32>();
        if sum > limit_sq {
            return None;
        }
    }
    for (x, y) in ra.iter().zip(rb) {
        sum += (x - y) * (x - y);
    }
    (sum <= limit_sq).then_some(sum)
}

/// Per-symbol region edges at maximum cardinality, as lookup dictionaries
/// for the lane kernel. `upper[s] == lower[s + 1]`.
#[derive(Debug)]
pub struct LowerBoundTables {
    pub lower: [f64; MAX_CARDINALITY],
    pub upper: [f64; MAX_CARDINALITY],
    /// Single-precision copies with the infinite edges replaced by
    /// [`EDGE_SENTINEL`].
    pub lower_lane: [f32; MAX_CARDINALITY],
    pub upper_lane: [f32; MAX_CARDINALITY],
}

impl LowerBoundTables {
    pub fn get() -> &'static LowerBoundTables {
        static TABLES: OnceLock<LowerBoundTables> = OnceLock::new();
        TABLES.get_or_init(|| {
            let bp = Breakpoints::for_bits(MAX_CARD_BITS);
            let mut t = LowerBoundTables {
                lower: [0.0; MAX_CARDINALITY],
                upper: [0.0; MAX_CARDINALITY],
                lower_lane: [0.0; MAX_CARDINALITY],
                upper_lane: [0.0; MAX_CARDINALITY],
            };
            for s in 0..MAX_CARDINALITY {
                let (lo, hi) = bp.region(s as u8);
                t.lower[s] = lo;
                t.upper[s] = hi;
                t.lower_lane[s] = (lo as f32).max(-EDGE_SENTINEL);
                t.upper_lane[s] = (hi as f32).min(EDGE_SENTINEL);
            }
            t
        })
    }

    /// Edge indices into the full-cardinality tables for a `bits`-bit symbol.
    #[inline]
    fn edge_index(symbol: u8, bits: u8) -> (usize, usize) {
        let shift = MAX_CARD_BITS - bits;
        let lo = (symbol as usize) << shift;
        (lo, lo + (1usize << shift) - 1)
    }

    /// Region of a `bits`-bit symbol.
    #[inline]
    pub fn edges(&self, symbol: u8, bits: u8) -> (f64, f64) {
        let (lo, hi) = Self::edge_index(symbol, bits);
        (self.lower[lo], self.upper[hi])
    }
}

fn check_shapes(q: &Paa, x: &SaxWord, n: usize) -> Result<()> {
    if q.segments() != x.segments() {
        return Err(Error::InvalidInput(format!(
            "PAA has {} segments, word has {}",
            q.segments(),
            x.segments()
        )));
    }
    if n == 0 || !n.is_multiple_of(q.segments()) {
        return Err(Error::InvalidInput(format!(
            "series length {n} is not a multiple of {} segments",
            q.segments()
        )));
    }
    Ok(())
}

/// Lower bound on the Euclidean distance between the series summarized by
/// `q` and any series whose word is `x`.
pub fn lower_bound_scalar(q: &Paa, x: &SaxWord, n: usize) -> Result<f32> {
    check_shapes(q, x, n)?;
    let t = LowerBoundTables::get();
    let mut sum = 0.0f64;
    for i in 0..x.segments() {
        let (lo, hi) = t.edges(x.symbols()[i], x.card_bits()[i]);
        let v = q.means[i] as f64;
        let d = if v > hi {
            v - hi
        } else if v < lo {
            lo - v
        } else {
            0.0
        };
        sum += d * d;
    }
    let scale = (n / x.segments()) as f64;
    Ok((scale * sum).sqrt() as f32)
}

/// Same value as [`lower_bound_scalar`], computed branch-free over lanes of
/// [`DEFAULT_LANES`] segments.
pub fn lower_bound_lanes(q: &Paa, x: &SaxWord, n: usize) -> Result<f32> {
    lower_bound_lanes_with::<DEFAULT_LANES>(q, x, n)
}

/// [`lower_bound_lanes`] with an explicit lane width.
pub fn lower_bound_lanes_with<const L: usize>(q: &Paa, x: &SaxWord, n: usize) -> Result<f32> {
    check_shapes(q, x, n)?;
    let t = LowerBoundTables::get();
    let w = x.segments();
    let groups = w.div_ceil(L);
    let mut acc = [0.0f32; L];
    for g in 0..groups {
        let mut qv = [0.0f32; L];
        let mut lo = [-EDGE_SENTINEL; L];
        let mut hi = [EDGE_SENTINEL; L];
        for l in 0..L {
            let i = g * L + l;
            if i < w {
                let (li, hi_i) = LowerBoundTables::edge_index(x.symbols()[i], x.card_bits()[i]);
                qv[l] = q.means[i];
                lo[l] = t.lower_lane[li];
                hi[l] = t.upper_lane[hi_i];
            }
        }
        lane_step(&mut acc, &qv, &lo, &hi);
    }
    let scale = (n / w) as f32;
    Ok((scale * acc.iter().sum::<f32>()).sqrt())
}

#[inline(always)]
fn lane_mask(c: bool) -> u32 {
    (c as u32).wrapping_neg()
}

/// One lane group: all three branch distances, three masks, AND, OR-merge.
#[inline(always)]
fn lane_step<const L: usize>(acc: &mut [f32; L], q: &[f32; L], lo: &[f32; L], hi: &[f32; L]) {
    for l in 0..L {
        let above = lane_mask(q[l] > hi[l]);
        let below = lane_mask(q[l] < lo[l]);
        let inside = !(above | below);
        let d_above = (q[l] - hi[l]).to_bits() & above;
        let d_below = (lo[l] - q[l]).to_bits() & below;
        let d_in = 0.0f32.to_bits() & inside;
        let d = f32::from_bits(d_above | d_below | d_in);
        acc[l] += d * d;
    }
}

/// Which lane implementation a [`QueryKernel`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneBackend {
    /// 256-bit vectors via AVX2 gathers and compares.
    Avx2,
    /// Fixed-width arrays the compiler is free to vectorize.
    Portable,
}

impl LaneBackend {
    pub fn detect() -> LaneBackend {
        static DETECTED: OnceLock<LaneBackend> = OnceLock::new();
        *DETECTED.get_or_init(|| {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx2") {
                    return LaneBackend::Avx2;
                }
            }
            LaneBackend::Portable
        })
    }
}

/// Lower-bound evaluator for one query against full-cardinality words, the
/// shape every entry of the SAX array has.
#[derive(Debug, Clone)]
pub struct QueryKernel {
    paa: [f32; MAX_SEGMENTS],
    w: usize,
    scale: f32,
    backend: LaneBackend,
}

impl QueryKernel {
    pub fn new(q: &Paa) -> QueryKernel {
        Self::with_backend(q, LaneBackend::detect())
    }

    pub fn with_backend(q: &Paa, backend: LaneBackend) -> QueryKernel {
        let w = q.segments();
        assert!((1..=MAX_SEGMENTS).contains(&w));
        let mut paa = [0.0; MAX_SEGMENTS];
        paa[..w].copy_from_slice(&q.means);
        let backend = match backend {
            LaneBackend::Avx2 if w.is_multiple_of(8) && LaneBackend::detect() == LaneBackend::Avx2 => {
                LaneBackend::Avx2
            }
            _ => LaneBackend::Portable,
        };
        QueryKernel {
            paa,
            w,
            scale: q.segment_len as f32,
            backend,
        }
    }

    pub fn backend(&self) -> LaneBackend {
        self.backend
    }

    /// Squared lower bound (including the segment-length scale) for a
    /// full-cardinality word, lane kernel.
    #[inline]
    pub fn lb_sq(&self, word: &[u8]) -> f32 {
        debug_assert_eq!(word.len(), self.w);
        #[cfg(target_arch = "x86_64")]
        if self.backend == LaneBackend::Avx2 {
            // SAFETY: the Avx2 backend is only selected after runtime detection.
            return self.scale * unsafe { lb_sum_avx2(&self.paa, word) };
        }
        self.scale * self.lb_sum_portable(word)
    }

    #[inline]
    fn lb_sum_portable(&self, word: &[u8]) -> f32 {
        const L: usize = DEFAULT_LANES;
        let t = LowerBoundTables::get();
        let mut acc = [0.0f32; L];
        for g in 0..self.w.div_ceil(L) {
            let mut qv = [0.0f32; L];
            let mut lo = [-EDGE_SENTINEL; L];
            let mut hi = [EDGE_SENTINEL; L];
            for l in 0..L {
                let i = g * L + l;
                if i < self.w {
                    let s = word[i] as usize;
                    qv[l] = self.paa[i];
                    lo[l] = t.lower_lane[s];
                    hi[l] = t.upper_lane[s];
                }
            }
            lane_step(&mut acc, &qv, &lo, &hi);
        }
        acc.iter().sum()
    }

    /// Squared lower bound through the branching scalar path.
    #[inline]
    pub fn lb_sq_scalar(&self, word: &[u8]) -> f32 {
        let t = LowerBoundTables::get();
        let mut sum = 0.0f32;
        for (i, &s) in word.iter().enumerate() {
            let v = self.paa[i];
            let (lo, hi) = (t.lower_lane[s as usize], t.upper_lane[s as usize]);
            if v > hi {
                sum += (v - hi) * (v - hi);
            } else if v < lo {
                sum += (lo - v) * (lo - v);
            }
        }
        self.scale * sum
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn lb_sum_avx2(paa: &[f32; MAX_SEGMENTS], word: &[u8]) -> f32 {
    use std::arch::x86_64::*;

    let t = LowerBoundTables::get();
    let mut acc = _mm256_setzero_ps();
    for (g, bytes) in word.chunks_exact(8).enumerate() {
        let packed = _mm_loadl_epi64(bytes.as_ptr() as *const __m128i);
        let idx = _mm256_cvtepu8_epi32(packed);
        let lo = _mm256_i32gather_ps::<4>(t.lower_lane.as_ptr(), idx);
        let hi = _mm256_i32gather_ps::<4>(t.upper_lane.as_ptr(), idx);
        let q = _mm256_loadu_ps(paa.as_ptr().add(g * 8));

        let above = _mm256_cmp_ps::<_CMP_GT_OQ>(q, hi);
        let below = _mm256_cmp_ps::<_CMP_LT_OQ>(q, lo);
        let d_above = _mm256_and_ps(above, _mm256_sub_ps(q, hi));
        let d_below = _mm256_and_ps(below, _mm256_sub_ps(lo, q));
        // The IN branch contributes zero, which the two masked results
        // already leave in place.
        let d = _mm256_or_ps(d_above, d_below);
        acc = _mm256_add_ps(acc, _mm256_mul_ps(d, d));
    }
    let hi128 = _mm256_extractf128_ps::<1>(acc);
    let sum4 = _mm_add_ps(_mm256_castps256_ps128(acc), hi128);
    let sum2 = _mm_add_ps(sum4, _mm_movehl_ps(sum4, sum4));
    let sum1 = _mm_add_ss(sum2, _mm_shuffle_ps::<1>(sum2, sum2));
    _mm_cvtss_f32(sum1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sax::sax_from_paa;
    use crate::series::{compute_paa, znormalize};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        let mut v = 0.0f32;
        (0..n)
            .map(|_| {
                v += rng.random_range(-1.0f32..1.0);
                v
            })
            .collect()
    }

    #[test]
    fn euclidean_basics() {
        assert_eq!(euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        let a = [1.5f32; 37];
        assert_eq!(euclidean(&a, &a).unwrap(), 0.0);
        assert!(matches!(euclidean(&[0.0], &[0.0, 1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn euclidean_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, b) = (walk(&mut rng, 256), walk(&mut rng, 256));
            let d = euclidean(&a, &b).unwrap() as f64;
            let r = naive(&a, &b);
            assert!((d - r).abs() <= 1e-4 * r.max(1e-12));
            assert_eq!(euclidean(&a, &b).unwrap(), euclidean(&b, &a).unwrap());
        }
    }

    #[test]
    fn early_abandon_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (walk(&mut rng, 256), walk(&mut rng, 256));
        assert_eq!(
            euclidean_early_abandon(&a, &b, f32::INFINITY).unwrap(),
            Some(euclidean(&a, &b).unwrap())
        );
        assert_eq!(euclidean_early_abandon(&a, &a, 0.1).unwrap(), Some(0.0));
        assert!(euclidean_early_abandon(&a, &b, -1.0).is_err());
    }

    #[test]
    fn early_abandon_classification_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(1..300);
            let (a, b) = (walk(&mut rng, n), walk(&mut rng, n));
            let full = euclidean(&a, &b).unwrap();
            let threshold = full * rng.random_range(0.5f32..1.5);
            match euclidean_early_abandon(&a, &b, threshold).unwrap() {
                Some(d) => {
                    assert_eq!(d, full);
                    assert!(full <= threshold);
                }
                None => assert!(full >= threshold, "abandoned {full} < {threshold}"),
            }
        }
    }

    fn single(v: f32) -> Paa {
        Paa {
            means: vec![v],
            segment_len: 1,
        }
    }

    #[test]
    fn lower_bound_against_cut() {
        let x = SaxWord::new(&[0], &[1]).unwrap();
        assert_eq!(lower_bound_scalar(&single(2.0), &x, 1).unwrap(), 2.0);
        assert_eq!(lower_bound_lanes(&single(2.0), &x, 1).unwrap(), 2.0);
        let y = SaxWord::new(&[1], &[1]).unwrap();
        assert_eq!(lower_bound_scalar(&single(-0.5), &y, 4).unwrap(), 1.0);
    }

    #[test]
    fn lower_bound_zero_when_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let q = znormalize(&walk(&mut rng, 128)).unwrap();
            let p = compute_paa(&q, 16).unwrap();
            let bits: Vec<u8> = (0..16).map(|_| rng.random_range(1..=8)).collect();
            let x = sax_from_paa(&p, &bits).unwrap();
            assert_eq!(lower_bound_scalar(&p, &x, 128).unwrap(), 0.0);
            assert_eq!(lower_bound_lanes(&p, &x, 128).unwrap(), 0.0);
            let full = sax_from_paa(&p, &[8; 16]).unwrap();
            assert_eq!(QueryKernel::new(&p).lb_sq(full.symbols()), 0.0);
        }
    }

    #[test]
    fn lower_bound_shape_errors() {
        let x = SaxWord::new(&[0, 1], &[1, 1]).unwrap();
        assert!(lower_bound_scalar(&single(0.0), &x, 2).is_err());
        assert!(lower_bound_lanes(&single(0.0), &x, 2).is_err());
    }

    #[test]
    fn sentinel_edges_are_finite() {
        let t = LowerBoundTables::get();
        assert_eq!(t.lower[0], f64::NEG_INFINITY);
        assert_eq!(t.upper[255], f64::INFINITY);
        assert_eq!(t.lower_lane[0], -EDGE_SENTINEL);
        assert_eq!(t.upper_lane[255], EDGE_SENTINEL);
        for s in 0..255 {
            assert_eq!(t.upper[s], t.lower[s + 1]);
            assert!(t.lower[s] <= t.upper[s]);
        }
        // Extreme query values still give finite, exact results.
        let p = Paa {
            means: vec![1e6; 8],
            segment_len: 2,
        };
        let word = [0u8; 8];
        let k = QueryKernel::new(&p);
        assert!(k.lb_sq(&word).is_finite());
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Paa, SaxWord) {
        let w = [1usize, 2, 4, 8, 16][rng.random_range(0..5)];
        let means = (0..w).map(|_| rng.random_range(-4.0f32..4.0)).collect();
        let syms: Vec<u8> = (0..w).map(|_| rng.random()).collect();
        let bits: Vec<u8> = (0..w).map(|_| rng.random_range(1..=8)).collect();
        let syms: Vec<u8> = syms.iter().zip(&bits).map(|(&s, &b)| s >> (8 - b)).collect();
        (
            Paa {
                means,
                segment_len: 4,
            },
            SaxWord::new(&syms, &bits).unwrap(),
        )
    }

    #[test]
    fn lane_widths_agree_with_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5000 {
            let (p, x) = random_case(&mut rng);
            let n = p.series_len();
            let s = lower_bound_scalar(&p, &x, n).unwrap();
            for l in [
                lower_bound_lanes_with::<4>(&p, &x, n).unwrap(),
                lower_bound_lanes_with::<8>(&p, &x, n).unwrap(),
                lower_bound_lanes_with::<16>(&p, &x, n).unwrap(),
            ] {
                assert!((s - l).abs() <= 1e-5 * s.max(1.0), "{s} vs {l}");
            }
        }
    }

    #[test]
    fn kernel_backends_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5000 {
            let means: Vec<f32> = (0..16).map(|_| rng.random_range(-4.0f32..4.0)).collect();
            let p = Paa {
                means,
                segment_len: 16,
            };
            let word: Vec<u8> = (0..16).map(|_| rng.random()).collect();
            let x = SaxWord::full(&word).unwrap();
            let s = lower_bound_scalar(&p, &x, 256).unwrap();
            let portable = QueryKernel::with_backend(&p, LaneBackend::Portable);
            let fast = QueryKernel::new(&p);
            for v in [
                portable.lb_sq(&word),
                fast.lb_sq(&word),
                fast.lb_sq_scalar(&word),
            ] {
                assert!((s - v.sqrt()).abs() <= 1e-5 * s.max(1.0));
            }
        }
    }

    #[test]
    fn refining_never_lowers_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let q = walk(&mut rng, 64);
            let p = compute_paa(&znormalize(&q).unwrap(), 8).unwrap();
            let s = walk(&mut rng, 64);
            let sp = compute_paa(&znormalize(&s).unwrap(), 8).unwrap();
            let mut x = sax_from_paa(&sp, &[1; 8]).unwrap();
            let mut prev = lower_bound_scalar(&p, &x, 64).unwrap();
            for _ in 0..20 {
                let seg = rng.random_range(0..8);
                if x.card_bits()[seg] == 8 {
                    continue;
                }
                let (c0, c1) = x.refine_segment(seg).unwrap();
                let full = sax_from_paa(&sp, &[8; 8]).unwrap();
                x = if c0.covers(&full) { c0 } else { c1 };
                let next = lower_bound_scalar(&p, &x, 64).unwrap();
                assert!(next >= prev);
                prev = next;
            }
        }
    }

    proptest! {
        #[test]
        fn lower_bound_is_sound(seed in any::<u64>(), w_pow in 0u32..5, bits in 1u8..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = 1usize << w_pow;
            let q = znormalize(&walk(&mut rng, 128)).unwrap();
            let s = znormalize(&walk(&mut rng, 128)).unwrap();
            let x = sax_from_paa(&compute_paa(&s, w).unwrap(), &vec![bits; w]).unwrap();
            let p = compute_paa(&q, w).unwrap();
            let ed = naive(&q, &s) as f32;
            prop_assert!(lower_bound_scalar(&p, &x, 128).unwrap() <= ed + 1e-4);
            prop_assert!(lower_bound_lanes(&p, &x, 128).unwrap() <= ed + 1e-4);
        }
    }
}
