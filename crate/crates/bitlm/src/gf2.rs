//! Exact linear algebra over GF(2): rank, inversion, matrix-vector products,
//! and sampling of invertible matrices.
//!
//! Bit index convention, shared by every module: bit `j` is the coefficient
//! of `2^j`, so index 0 is the least significant bit. A matrix row is packed
//! into one `u64` word (side length is capped at 64; the target widths are
//! 8 and 16), which makes an elimination step a single XOR.

use crate::rng::Rng;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum Gf2Error {
    #[error("matrix is singular (rank {rank} < {k})")]
    SingularMatrix { k: usize, rank: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no invertible matrix found in {0} attempts")]
    SamplingFailure(usize),
    #[error("parse error: {0}")]
    Parse(String),
}

pub const MAX_SIDE: usize = 64;

/// Binary vector of length `k <= 64`, bit `j` at word bit `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitVector {
    k: usize,
    bits: u64,
}

impl BitVector {
    pub fn zeros(k: usize) -> Self {
        assert!(k >= 1 && k <= MAX_SIDE);
        BitVector { k, bits: 0 }
    }

    pub fn ones(k: usize) -> Self {
        assert!(k >= 1 && k <= MAX_SIDE);
        BitVector { k, bits: mask(k) }
    }

    /// Builds from a word; bits at positions >= k are discarded.
    pub fn from_word(k: usize, word: u64) -> Self {
        assert!(k >= 1 && k <= MAX_SIDE);
        BitVector { k, bits: word & mask(k) }
    }

    /// Parses a string of '0'/'1' characters, position `j` = bit `j`.
    pub fn parse(text: &str) -> Result<Self, Gf2Error> {
        let k = text.len();
        if k == 0 || k > MAX_SIDE {
            return Err(Gf2Error::Parse(format!("bad vector length {k}")));
        }
        let mut bits = 0u64;
        for (j, c) in text.chars().enumerate() {
            match c {
                '1' => bits |= 1 << j,
                '0' => {}
                other => return Err(Gf2Error::Parse(format!("bad bit char {other:?}"))),
            }
        }
        Ok(BitVector { k, bits })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self) -> u64 {
        self.bits
    }

    pub fn get(&self, j: usize) -> bool {
        assert!(j < self.k);
        (self.bits >> j) & 1 == 1
    }

    pub fn set(&mut self, j: usize, value: bool) {
        assert!(j < self.k);
        if value {
            self.bits |= 1 << j;
        } else {
            self.bits &= !(1 << j);
        }
    }

    pub fn xor(&self, other: &BitVector) -> BitVector {
        assert_eq!(self.k, other.k);
        BitVector { k: self.k, bits: self.bits ^ other.bits }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.k).map(move |j| self.get(j))
    }
}

impl std::fmt::Display for BitVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for j in 0..self.k {
            write!(f, "{}", u8::from(self.get(j)))?;
        }
        Ok(())
    }
}

/// Square binary matrix of side `k <= 64`; row `i` is a word whose bit `j`
/// holds entry `(i, j)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    k: usize,
    rows: Vec<u64>,
}

fn mask(k: usize) -> u64 {
    if k == 64 {
        u64::MAX
    } else {
        (1u64 << k) - 1
    }
}

impl BitMatrix {
    pub fn zeros(k: usize) -> Self {
        assert!(k >= 1 && k <= MAX_SIDE);
        BitMatrix { k, rows: vec![0; k] }
    }

    pub fn identity(k: usize) -> Self {
        let mut m = Self::zeros(k);
        for i in 0..k {
            m.rows[i] = 1 << i;
        }
        m
    }

    /// Builds from row words; bits at positions >= k are discarded.
    pub fn from_rows(k: usize, rows: &[u64]) -> Self {
        assert!(k >= 1 && k <= MAX_SIDE);
        assert_eq!(rows.len(), k, "need exactly k rows");
        BitMatrix { k, rows: rows.iter().map(|r| r & mask(k)).collect() }
    }

    pub fn side(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        assert!(i < self.k && j < self.k);
        (self.rows[i] >> j) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        assert!(i < self.k && j < self.k);
        if value {
            self.rows[i] |= 1 << j;
        } else {
            self.rows[i] &= !(1 << j);
        }
    }

    pub fn row(&self, i: usize) -> BitVector {
        BitVector { k: self.k, bits: self.rows[i] }
    }

    /// GF(2) rank by Gaussian elimination with XOR row operations.
    pub fn rank(&self) -> usize {
        let mut rows = self.rows.clone();
        let mut rank = 0;
        for j in 0..self.k {
            let Some(p) = (rank..rows.len()).find(|&r| (rows[r] >> j) & 1 == 1) else {
                continue;
            };
            rows.swap(rank, p);
            let pivot = rows[rank];
            for (r, row) in rows.iter_mut().enumerate() {
                if r != rank && (*row >> j) & 1 == 1 {
                    *row ^= pivot;
                }
            }
            rank += 1;
            if rank == self.k {
                break;
            }
        }
        rank
    }

    pub fn is_invertible(&self) -> bool {
        self.rank() == self.k
    }

    /// Inverse by Gauss-Jordan on the augmented system.
    pub fn invert(&self) -> Result<BitMatrix, Gf2Error> {
        let k = self.k;
        let mut left = self.rows.clone();
        let mut right: Vec<u64> = (0..k).map(|i| 1u64 << i).collect();
        let mut pivots = 0;
        for j in 0..k {
            let Some(p) = (pivots..k).find(|&r| (left[r] >> j) & 1 == 1) else {
                continue;
            };
            left.swap(pivots, p);
            right.swap(pivots, p);
            let (lp, rp) = (left[pivots], right[pivots]);
            for r in 0..k {
                if r != pivots && (left[r] >> j) & 1 == 1 {
                    left[r] ^= lp;
                    right[r] ^= rp;
                }
            }
            pivots += 1;
        }
        if pivots < k {
            return Err(Gf2Error::SingularMatrix { k, rank: pivots });
        }
        // Pivots were taken in column order, so `left` is now a row-permuted
        // identity; sort the inverse rows into place.
        let mut inv = vec![0u64; k];
        for r in 0..k {
            let i = left[r].trailing_zeros() as usize;
            inv[i] = right[r];
        }
        Ok(BitMatrix { k, rows: inv })
    }

    /// `out[i] = XOR over j of (self[i][j] AND v[j])`.
    pub fn matvec(&self, v: &BitVector) -> Result<BitVector, Gf2Error> {
        if v.k != self.k {
            return Err(Gf2Error::DimensionMismatch { expected: self.k, got: v.k });
        }
        let mut bits = 0u64;
        for (i, row) in self.rows.iter().enumerate() {
            bits |= u64::from((row & v.bits).count_ones() & 1) << i;
        }
        Ok(BitVector { k: self.k, bits })
    }

    pub fn matmul(&self, other: &BitMatrix) -> Result<BitMatrix, Gf2Error> {
        if other.k != self.k {
            return Err(Gf2Error::DimensionMismatch { expected: self.k, got: other.k });
        }
        let bt = other.transposed();
        let rows = self
            .rows
            .iter()
            .map(|&a| {
                let mut out = 0u64;
                for (j, &col) in bt.rows.iter().enumerate() {
                    out |= u64::from((a & col).count_ones() & 1) << j;
                }
                out
            })
            .collect();
        Ok(BitMatrix { k: self.k, rows })
    }

    pub fn transposed(&self) -> BitMatrix {
        let mut t = BitMatrix::zeros(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                if self.get(i, j) {
                    t.set(j, i, true);
                }
            }
        }
        t
    }

    /// Fixture text format: a `k=<int>` header, then k lines of k characters
    /// in {0,1}, character position `j` holding bit `j` of the row.
    pub fn to_text(&self) -> String {
        let mut out = format!("k={}\n", self.k);
        for i in 0..self.k {
            out.push_str(&self.row(i).to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<BitMatrix, Gf2Error> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Gf2Error::Parse("empty input".into()))?;
        let k: usize = header
            .strip_prefix("k=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Gf2Error::Parse(format!("bad header {header:?}")))?;
        if k == 0 || k > MAX_SIDE {
            return Err(Gf2Error::Parse(format!("side {k} out of range")));
        }
        let mut rows = Vec::with_capacity(k);
        for _ in 0..k {
            let line = lines.next().ok_or_else(|| Gf2Error::Parse("missing rows".into()))?;
            let v = BitVector::parse(line)?;
            if v.len() != k {
                return Err(Gf2Error::DimensionMismatch { expected: k, got: v.len() });
            }
            rows.push(v.word());
        }
        Ok(BitMatrix { k, rows })
    }
}

impl std::fmt::Display for BitMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.k {
            writeln!(f, "{}", self.row(i))?;
        }
        Ok(())
    }
}

/// `a v XOR b`, the affine recoding step.
pub fn affine_apply(a: &BitMatrix, b: &BitVector, v: &BitVector) -> Result<BitVector, Gf2Error> {
    if b.len() != a.side() {
        return Err(Gf2Error::DimensionMismatch { expected: a.side(), got: b.len() });
    }
    Ok(a.matvec(v)?.xor(b))
}

const SAMPLE_ATTEMPT_CAP: usize = 1000;

/// Uniformly random invertible matrix, deterministic in `seed`.
///
/// Rejection-samples uniform bit matrices until one is invertible; the
/// invertible fraction of all k x k binary matrices exceeds 0.288 for every
/// k, so the expected attempt count is below 4.
pub fn sample_invertible(k: usize, seed: u64) -> Result<BitMatrix, Gf2Error> {
    let mut rng = Rng::stream(seed, "gl2-sample");
    sample_invertible_from(k, &mut rng)
}

/// Same rejection loop, drawing from a caller-owned stream.
pub fn sample_invertible_from(k: usize, rng: &mut Rng) -> Result<BitMatrix, Gf2Error> {
    assert!(k >= 1 && k <= MAX_SIDE);
    for _ in 0..SAMPLE_ATTEMPT_CAP {
        let rows: Vec<u64> = (0..k).map(|_| rng.next_u64() & mask(k)).collect();
        let m = BitMatrix { k, rows };
        if m.is_invertible() {
            return Ok(m);
        }
    }
    Err(Gf2Error::SamplingFailure(SAMPLE_ATTEMPT_CAP))
}

/// `|GL(k, 2)| = prod_{i=0}^{k-1} (2^k - 2^i)`.
pub fn gl2_order(k: usize) -> u128 {
    let pow = 1u128 << k;
    (0..k).map(|i| pow - (1u128 << i)).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng as SplitMix;
    use proptest::prelude::*;

    fn from_strs(rows: &[&str]) -> BitMatrix {
        let k = rows.len();
        let words: Vec<u64> = rows.iter().map(|r| BitVector::parse(r).unwrap().word()).collect();
        BitMatrix::from_rows(k, &words)
    }

    /// Brute-force rank oracle: the XOR span of the rows has 2^rank elements.
    fn rank_by_span(m: &BitMatrix) -> usize {
        let k = m.side();
        let mut span = std::collections::HashSet::new();
        for subset in 0u64..(1 << k) {
            let mut acc = 0u64;
            for i in 0..k {
                if (subset >> i) & 1 == 1 {
                    acc ^= m.row(i).word();
                }
            }
            span.insert(acc);
        }
        span.len().trailing_zeros() as usize
    }

    #[test]
    fn rank_identity_and_zero() {
        assert_eq!(BitMatrix::identity(4).rank(), 4);
        assert_eq!(BitMatrix::zeros(4).rank(), 0);
    }

    #[test]
    fn rank_matches_span_oracle_on_known_case() {
        let m = from_strs(&["110", "011", "101"]);
        assert_eq!(rank_by_span(&m), 2);
        assert_eq!(m.rank(), 2);
    }

    #[test]
    fn rank_matches_span_oracle_exhaustive_k3() {
        for code in 0u64..(1 << 9) {
            let rows = [code & 0b111, (code >> 3) & 0b111, (code >> 6) & 0b111];
            let m = BitMatrix::from_rows(3, &rows);
            assert_eq!(m.rank(), rank_by_span(&m), "matrix {code:#b}");
        }
    }

    #[test]
    fn invertible_count_k2_exhaustive() {
        let mut count = 0;
        for code in 0u64..16 {
            let m = BitMatrix::from_rows(2, &[code & 0b11, (code >> 2) & 0b11]);
            if m.is_invertible() {
                count += 1;
            }
        }
        assert_eq!(count, 6);
        assert_eq!(gl2_order(2), 6);
    }

    #[test]
    fn gl2_order_small() {
        assert_eq!(gl2_order(3), 168);
        assert_eq!(gl2_order(4), 20160);
    }

    #[test]
    fn invert_identity_and_self_inverse_case() {
        let id = BitMatrix::identity(5);
        assert_eq!(id.invert().unwrap(), id);

        // rows {11, 01} is its own inverse.
        let m = from_strs(&["11", "01"]);
        let inv = m.invert().unwrap();
        assert_eq!(inv, m);
        assert_eq!(m.matmul(&inv).unwrap(), BitMatrix::identity(2));
    }

    #[test]
    fn invert_rejects_singular() {
        let m = from_strs(&["110", "011", "101"]);
        assert_eq!(m.invert().unwrap_err(), Gf2Error::SingularMatrix { k: 3, rank: 2 });
    }

    #[test]
    fn matvec_known_case() {
        let m = from_strs(&["110", "011", "101"]);
        let v = BitVector::parse("101").unwrap();
        assert_eq!(m.matvec(&v).unwrap().to_string(), "110");
    }

    #[test]
    fn matvec_identity_and_zero() {
        let v = BitVector::from_word(6, 0b101101);
        assert_eq!(BitMatrix::identity(6).matvec(&v).unwrap(), v);
        assert_eq!(BitMatrix::zeros(6).matvec(&v).unwrap(), BitVector::zeros(6));
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let m = BitMatrix::identity(4);
        let v = BitVector::zeros(3);
        assert!(matches!(m.matvec(&v), Err(Gf2Error::DimensionMismatch { .. })));
    }

    #[test]
    fn affine_identity_recovers_input_and_ones_complements() {
        let v = BitVector::from_word(5, 0b10110);
        let id = BitMatrix::identity(5);
        assert_eq!(affine_apply(&id, &BitVector::zeros(5), &v).unwrap(), v);
        let complemented = affine_apply(&id, &BitVector::ones(5), &v).unwrap();
        assert_eq!(complemented.word(), !v.word() & 0b11111);
    }

    #[test]
    fn affine_round_trip_exhaustive_k6() {
        let k = 6;
        let a = sample_invertible(k, 99).unwrap();
        let b = BitVector::from_word(k, 0b010011);
        let a_inv = a.invert().unwrap();
        let b_inv = a_inv.matvec(&b).unwrap();
        for word in 0u64..(1 << k) {
            let v = BitVector::from_word(k, word);
            let fwd = affine_apply(&a, &b, &v).unwrap();
            let back = affine_apply(&a_inv, &b_inv, &fwd).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_invertible() {
        for k in [1, 2, 8, 16, 33, 64] {
            let m1 = sample_invertible(k, 7).unwrap();
            let m2 = sample_invertible(k, 7).unwrap();
            assert_eq!(m1, m2);
            assert!(m1.is_invertible());
        }
        assert_ne!(sample_invertible(16, 1).unwrap(), sample_invertible(16, 2).unwrap());
    }

    #[test]
    fn sampling_k2_roughly_uniform_over_gl() {
        let mut counts = std::collections::HashMap::new();
        let draws = 6000;
        for seed in 0..draws {
            let m = sample_invertible(2, seed).unwrap();
            *counts.entry((m.row(0).word(), m.row(1).word())).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 6);
        let expect = draws as f64 / 6.0;
        for (&m, &c) in &counts {
            let dev = (f64::from(c) - expect).abs() / expect;
            assert!(dev <= 0.2, "matrix {m:?} count {c} deviates {dev:.3} from uniform");
        }
    }

    #[test]
    fn text_round_trip() {
        let m = sample_invertible(9, 5).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("k=9\n"));
        assert_eq!(BitMatrix::parse_text(&text).unwrap(), m);
    }

    #[test]
    fn text_rejects_garbage() {
        assert!(BitMatrix::parse_text("").is_err());
        assert!(BitMatrix::parse_text("k=2\n01\n0x").is_err());
        assert!(BitMatrix::parse_text("k=2\n011\n010").is_err());
    }

    proptest! {
        #[test]
        fn rank_bounded_and_swap_invariant(k in 1usize..12, seed in 0u64..500, i in 0usize..12, j in 0usize..12) {
            let mut rng = SplitMix::stream(seed, "prop-rank");
            let rows: Vec<u64> = (0..k).map(|_| rng.next_u64() & mask(k)).collect();
            let m = BitMatrix::from_rows(k, &rows);
            let r = m.rank();
            prop_assert!(r <= k);
            let (i, j) = (i % k, j % k);
            let mut swapped = rows.clone();
            swapped.swap(i, j);
            prop_assert_eq!(BitMatrix::from_rows(k, &swapped).rank(), r);
        }

        #[test]
        fn invert_round_trips(k in 1usize..24, seed in 0u64..500) {
            let m = sample_invertible(k, seed).unwrap();
            let inv = m.invert().unwrap();
            prop_assert_eq!(m.matmul(&inv).unwrap(), BitMatrix::identity(k));
            prop_assert_eq!(inv.invert().unwrap(), m);
        }

        #[test]
        fn invertible_iff_matvec_bijective(k in 1usize..9, seed in 0u64..300) {
            let mut rng = SplitMix::stream(seed, "prop-bij");
            let rows: Vec<u64> = (0..k).map(|_| rng.next_u64() & mask(k)).collect();
            let m = BitMatrix::from_rows(k, &rows);
            let mut image = std::collections::HashSet::new();
            for word in 0u64..(1 << k) {
                image.insert(m.matvec(&BitVector::from_word(k, word)).unwrap().word());
            }
            prop_assert_eq!(image.len() == 1 << k, m.is_invertible());
        }
    }
}
