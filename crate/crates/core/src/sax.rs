//! iSAX summarization: normal-quantile breakpoints, variable-cardinality
//! words, and the bit manipulation used by the index tree.

use std::fmt;
use std::sync::OnceLock;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::series::Paa;

/// Upper bound on the number of segments in a word.
pub const MAX_SEGMENTS: usize = 16;
/// Bits per symbol at maximum cardinality (256 symbols).
pub const MAX_CARD_BITS: u8 = 8;
pub const MAX_CARDINALITY: usize = 1 << MAX_CARD_BITS;

/// Region boundaries dividing N(0, 1) into `cardinality` equiprobable regions.
///
/// Region `r` spans `[cuts[r-1], cuts[r])` with the outermost bounds at
/// ±infinity: a value lying exactly on a cut belongs to the region above it.
#[derive(Debug, Clone, PartialEq)]
pub struct Breakpoints {
    cardinality: usize,
    cuts: Vec<f64>,
}

impl Breakpoints {
    pub fn new(cardinality: usize) -> Result<Self> {
        if !cardinality.is_power_of_two() || !(2..=MAX_CARDINALITY).contains(&cardinality) {
            return Err(Error::Config(format!(
                "cardinality must be a power of two in [2, {MAX_CARDINALITY}], got {cardinality}"
            )));
        }
        Ok(Self::for_bits(cardinality.trailing_zeros() as u8).clone())
    }

    /// Shared table for `bits`-bit symbols, `1 <= bits <= 8`.
    pub fn for_bits(bits: u8) -> &'static Breakpoints {
        static TABLES: OnceLock<Vec<Breakpoints>> = OnceLock::new();
        assert!((1..=MAX_CARD_BITS).contains(&bits), "bits out of range: {bits}");
        &TABLES.get_or_init(build_tables)[bits as usize - 1]
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    /// Index of the region containing `v`.
    pub fn symbol(&self, v: f64) -> u8 {
        self.cuts.partition_point(|&c| c <= v) as u8
    }

    /// Lower and upper edge of region `symbol`, infinite at the extremes.
    pub fn region(&self, symbol: u8) -> (f64, f64) {
        let s = symbol as usize;
        let lo = if s == 0 { f64::NEG_INFINITY } else { self.cuts[s - 1] };
        let hi = if s + 1 == self.cardinality {
            f64::INFINITY
        } else {
            self.cuts[s]
        };
        (lo, hi)
    }
}

// Cuts at every cardinality are drawn from the 256-symbol table so that a
// symbol at fewer bits is always the prefix of the full-cardinality symbol.
fn build_tables() -> Vec<Breakpoints> {
    let normal = Normal::standard();
    let half = MAX_CARDINALITY / 2;
    let mut full = vec![0.0f64; MAX_CARDINALITY - 1];
    for k in 1..half {
        let c = normal.inverse_cdf(k as f64 / MAX_CARDINALITY as f64);
        full[k - 1] = c;
        full[MAX_CARDINALITY - k - 1] = -c;
    }
    full[half - 1] = 0.0;
    (1..=MAX_CARD_BITS)
        .map(|bits| {
            let stride = 1usize << (MAX_CARD_BITS - bits);
            let cardinality = 1usize << bits;
            let cuts = (1..cardinality).map(|k| full[k * stride - 1]).collect();
            Breakpoints { cardinality, cuts }
        })
        .collect()
}

/// Full-cardinality symbol for a single PAA value.
#[inline]
pub fn full_symbol(v: f32) -> u8 {
    Breakpoints::for_bits(MAX_CARD_BITS).symbol(v as f64)
}

/// Writes the 8-bit symbol of every PAA value in `paa` into `out`.
pub fn full_symbols_into(paa: &[f32], out: &mut [u8]) {
    let bp = Breakpoints::for_bits(MAX_CARD_BITS);
    for (o, &v) in out.iter_mut().zip(paa) {
        *o = bp.symbol(v as f64);
    }
}

/// An iSAX word: one symbol per segment, each with its own bit count.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SaxWord {
    len: u8,
    symbols: [u8; MAX_SEGMENTS],
    card_bits: [u8; MAX_SEGMENTS],
}

impl SaxWord {
    pub fn new(symbols: &[u8], card_bits: &[u8]) -> Result<Self> {
        if symbols.is_empty() || symbols.len() > MAX_SEGMENTS || symbols.len() != card_bits.len() {
            return Err(Error::InvalidInput(format!(
                "word needs 1..={MAX_SEGMENTS} segments with matching bit counts, got {} symbols and {} bit counts",
                symbols.len(),
                card_bits.len()
            )));
        }
        for (i, (&s, &b)) in symbols.iter().zip(card_bits).enumerate() {
            if !(1..=MAX_CARD_BITS).contains(&b) || (s as u32) >= (1u32 << b) {
                return Err(Error::InvalidInput(format!(
                    "segment {i}: symbol {s} at {b} bits is out of range"
                )));
            }
        }
        let mut w = SaxWord {
            len: symbols.len() as u8,
            symbols: [0; MAX_SEGMENTS],
            card_bits: [0; MAX_SEGMENTS],
        };
        w.symbols[..symbols.len()].copy_from_slice(symbols);
        w.card_bits[..symbols.len()].copy_from_slice(card_bits);
        Ok(w)
    }

    /// A word at maximum cardinality in every segment.
    pub fn full(symbols: &[u8]) -> Result<Self> {
        Self::new(symbols, &vec![MAX_CARD_BITS; symbols.len()])
    }

    /// Root-child word: the first bit of every segment of a full word.
    pub fn root_of(full_symbols: &[u8]) -> Self {
        let mut w = SaxWord {
            len: full_symbols.len() as u8,
            symbols: [0; MAX_SEGMENTS],
            card_bits: [0; MAX_SEGMENTS],
        };
        for (i, &s) in full_symbols.iter().enumerate() {
            w.symbols[i] = s >> (MAX_CARD_BITS - 1);
            w.card_bits[i] = 1;
        }
        w
    }

    pub fn segments(&self) -> usize {
        self.len as usize
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols[..self.len as usize]
    }

    pub fn card_bits(&self) -> &[u8] {
        &self.card_bits[..self.len as usize]
    }

    pub fn root_subtree_id(&self) -> u32 {
        let mut id = 0u32;
        for i in 0..self.segments() {
            let msb = (self.symbols[i] >> (self.card_bits[i] - 1)) & 1;
            id = (id << 1) | msb as u32;
        }
        id
    }

    /// Whether a full-cardinality word falls inside this word's region, i.e.
    /// every segment symbol here is a prefix of the full symbol.
    pub fn contains(&self, full_symbols: &[u8]) -> bool {
        debug_assert_eq!(full_symbols.len(), self.segments());
        (0..self.segments())
            .all(|i| full_symbols[i] >> (MAX_CARD_BITS - self.card_bits[i]) == self.symbols[i])
    }

    /// Whether `other` (at equal or higher bit counts) lies inside this word.
    pub fn covers(&self, other: &SaxWord) -> bool {
        self.segments() == other.segments()
            && (0..self.segments()).all(|i| {
                let (b, ob) = (self.card_bits[i], other.card_bits[i]);
                ob >= b && other.symbols[i] >> (ob - b) == self.symbols[i]
            })
    }

    /// The two children obtained by appending a 0 and a 1 bit to segment `seg`.
    pub fn refine_segment(&self, seg: usize) -> Result<(SaxWord, SaxWord)> {
        if seg >= self.segments() {
            return Err(Error::InvalidInput(format!(
                "segment {seg} out of range for a {}-segment word",
                self.segments()
            )));
        }
        if self.card_bits[seg] >= MAX_CARD_BITS {
            return Err(Error::CannotSplit { segment: seg });
        }
        let mut zero = *self;
        zero.card_bits[seg] += 1;
        zero.symbols[seg] <<= 1;
        let mut one = zero;
        one.symbols[seg] |= 1;
        Ok((zero, one))
    }

    /// The bit a full-cardinality symbol carries right after this word's
    /// prefix at segment `seg`, i.e. the bit `refine_segment(seg)` routes on.
    #[inline]
    pub fn next_bit(&self, full_symbols: &[u8], seg: usize) -> usize {
        next_bit(full_symbols[seg], self.card_bits[seg])
    }
}

#[inline]
pub(crate) fn next_bit(full_symbol: u8, bits: u8) -> usize {
    ((full_symbol >> (MAX_CARD_BITS - bits - 1)) & 1) as usize
}

impl fmt::Debug for SaxWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SaxWord({self})")
    }
}

impl fmt::Display for SaxWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.segments() {
            if i > 0 {
                f.write_str(" ")?;
            }
            let b = self.card_bits[i] as usize;
            write!(f, "{:0b$b}_{b}", self.symbols[i])?;
        }
        Ok(())
    }
}

pub fn sax_from_paa(p: &Paa, card_bits: &[u8]) -> Result<SaxWord> {
    if card_bits.len() != p.segments() {
        return Err(Error::InvalidInput(format!(
            "{} bit counts for a {}-segment PAA",
            card_bits.len(),
            p.segments()
        )));
    }
    let mut symbols = [0u8; MAX_SEGMENTS];
    for (i, (&v, &b)) in p.means.iter().zip(card_bits).enumerate() {
        if !(1..=MAX_CARD_BITS).contains(&b) {
            return Err(Error::InvalidInput(format!("segment {i}: {b} bits")));
        }
        symbols[i] = Breakpoints::for_bits(b).symbol(v as f64);
    }
    SaxWord::new(&symbols[..p.segments()], card_bits)
}

/// Root subtree identifier of a full-cardinality symbol sequence; segment 0
/// supplies the most significant bit.
#[inline]
pub fn root_id_of(full_symbols: &[u8]) -> u32 {
    full_symbols
        .iter()
        .fold(0u32, |id, &s| (id << 1) | (s >> (MAX_CARD_BITS - 1)) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normal_cdf_by_quadrature(x: f64) -> f64 {
        // Composite Simpson on the density over [0, |x|].
        let steps = 20_000;
        let h = x.abs() / steps as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(x.abs());
        for i in 1..steps {
            let t = i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
        }
        let area = acc * h / 3.0;
        if x >= 0.0 {
            0.5 + area
        } else {
            0.5 - area
        }
    }

    #[test]
    fn binary_cut_is_median() {
        assert_eq!(Breakpoints::new(2).unwrap().cuts(), &[0.0]);
    }

    #[test]
    fn quartile_cuts_match_quadrature() {
        let bp = Breakpoints::new(4).unwrap();
        assert_eq!(bp.cuts().len(), 3);
        assert!((bp.cuts()[0] + 0.6744897501960817).abs() < 1e-9);
        assert_eq!(bp.cuts()[1], 0.0);
        for (k, &c) in bp.cuts().iter().enumerate() {
            let p = normal_cdf_by_quadrature(c);
            assert!((p - (k + 1) as f64 / 4.0).abs() < 1e-9, "cut {k}: cdf {p}");
        }
    }

    #[test]
    fn full_table_is_increasing_and_symmetric() {
        let bp = Breakpoints::new(256).unwrap();
        let cuts = bp.cuts();
        assert_eq!(cuts.len(), 255);
        assert!(cuts.windows(2).all(|w| w[0] < w[1]));
        for k in 0..255 {
            assert_eq!(cuts[k], -cuts[254 - k]);
        }
        for k in [0usize, 31, 100, 200, 254] {
            let p = normal_cdf_by_quadrature(cuts[k]);
            assert!((p - (k + 1) as f64 / 256.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_cardinality() {
        for c in [0, 1, 3, 6, 512] {
            assert!(matches!(Breakpoints::new(c), Err(Error::Config(_))));
        }
    }

    fn paa(means: &[f32]) -> Paa {
        Paa {
            means: means.to_vec(),
            segment_len: 1,
        }
    }

    #[test]
    fn tie_goes_to_upper_region() {
        let w = sax_from_paa(&paa(&[0.0]), &[1]).unwrap();
        assert_eq!(w.symbols(), &[1]);
        let w = sax_from_paa(&paa(&[-10.0]), &[8]).unwrap();
        assert_eq!(w.symbols(), &[0]);
    }

    #[test]
    fn three_segment_word_notation() {
        // Regions at 2 bits: 00 below -0.674, 01 up to 0, 10 up to 0.674, 11 above.
        let w = sax_from_paa(&paa(&[0.3, -1.0, 1.2]), &[2, 2, 2]).unwrap();
        assert_eq!(w.symbols(), &[0b10, 0b00, 0b11]);
        assert_eq!(w.to_string(), "10_2 00_2 11_2");
        assert_eq!(w.root_subtree_id(), 0b101);
    }

    #[test]
    fn root_id_examples() {
        let zero = SaxWord::new(&[0, 0, 0, 0], &[3, 1, 8, 2]).unwrap();
        assert_eq!(zero.root_subtree_id(), 0);
        let full = [0x80u8, 0x7f, 0xff, 0x00];
        assert_eq!(root_id_of(&full), 0b1010);
        assert_eq!(SaxWord::full(&full).unwrap().root_subtree_id(), 0b1010);
        assert_eq!(SaxWord::root_of(&full).root_subtree_id(), 0b1010);
    }

    #[test]
    fn refine_appends_bit() {
        let w = SaxWord::new(&[1], &[1]).unwrap();
        let (a, b) = w.refine_segment(0).unwrap();
        assert_eq!((a.symbols(), a.card_bits()), (&[0b10u8][..], &[2u8][..]));
        assert_eq!((b.symbols(), b.card_bits()), (&[0b11u8][..], &[2u8][..]));
        let full = SaxWord::full(&[200, 3]).unwrap();
        assert!(matches!(full.refine_segment(1), Err(Error::CannotSplit { segment: 1 })));
    }

    #[test]
    fn refine_partitions_region_on_grid() {
        for bits in 1..MAX_CARD_BITS {
            let bp = Breakpoints::for_bits(bits);
            for sym in 0..(1u16 << bits) as u8 {
                let parent = SaxWord::new(&[sym], &[bits]).unwrap();
                let (c0, c1) = parent.refine_segment(0).unwrap();
                for step in -4000..=4000 {
                    let v = step as f32 * 1e-3;
                    if bp.symbol(v as f64) != sym {
                        continue;
                    }
                    let s = sax_from_paa(&paa(&[v]), &[bits + 1]).unwrap();
                    let in0 = s.symbols()[0] == c0.symbols()[0];
                    let in1 = s.symbols()[0] == c1.symbols()[0];
                    assert!(in0 ^ in1, "value {v} bits {bits}");
                }
            }
        }
    }

    #[test]
    fn rejects_malformed_words() {
        assert!(SaxWord::new(&[4], &[2]).is_err());
        assert!(SaxWord::new(&[0], &[0]).is_err());
        assert!(SaxWord::new(&[0], &[9]).is_err());
        assert!(SaxWord::new(&[], &[]).is_err());
        assert!(SaxWord::new(&[0; 17], &[1; 17]).is_err());
    }

    proptest! {
        #[test]
        fn symbols_are_prefix_consistent(v in -5.0f32..5.0, lo in 1u8..=8, hi in 1u8..=8) {
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            let a = Breakpoints::for_bits(lo).symbol(v as f64);
            let b = Breakpoints::for_bits(hi).symbol(v as f64);
            prop_assert_eq!(a, b >> (hi - lo));
        }

        #[test]
        fn symbols_are_monotone(a in -5.0f32..5.0, b in -5.0f32..5.0, bits in 1u8..=8) {
            let bp = Breakpoints::for_bits(bits);
            let (x, y) = (a.min(b), a.max(b));
            prop_assert!(bp.symbol(x as f64) <= bp.symbol(y as f64));
        }

        #[test]
        fn root_id_packs_top_bits(syms in proptest::collection::vec(any::<u8>(), 1..=16)) {
            let mut expect = 0u32;
            for (i, s) in syms.iter().enumerate() {
                if s & 0x80 != 0 {
                    expect |= 1 << (syms.len() - 1 - i);
                }
            }
            prop_assert_eq!(root_id_of(&syms), expect);
            prop_assert_eq!(SaxWord::full(&syms).unwrap().root_subtree_id(), expect);
        }

        #[test]
        fn region_contains_value(v in -5.0f32..5.0, bits in 1u8..=8) {
            let bp = Breakpoints::for_bits(bits);
            let s = bp.symbol(v as f64);
            let (lo, hi) = bp.region(s);
            prop_assert!(lo <= v as f64 && (v as f64) < hi);
        }
    }
}
