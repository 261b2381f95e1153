//! The complete input interface `t -> x(t)`: minimal binary token codes,
//! optional invertible affine recoding over GF(2), and the tiled
//! zero-parameter lift to model width. Also the verification operations
//! (injectivity, balance, coverage, effective rank) and the frozen-table
//! export used for ablation parity.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::gf2::{affine_apply, sample_invertible_from, BitMatrix, BitVector, Gf2Error};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum CodeError {
    #[error("token {token} out of range for vocabulary of {limit}")]
    TokenOutOfRange { token: usize, limit: usize },
    #[error("lift width {lift_width} is not a positive multiple of code width {code_width}")]
    NonDivisibleWidth { lift_width: usize, code_width: usize },
    #[error("balance check requires the full vocabulary: V={vocab_size} < 2^{code_width}")]
    NotFullVocabulary { vocab_size: usize, code_width: usize },
    #[error("invalid code spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Gf2(#[from] Gf2Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Smallest `K` with `2^K >= V`. Returns 1 for `V = 1`: a zero-width code is
/// vacuous and would break the tiling rule, so the degenerate single-token
/// vocabulary still gets one bit.
pub fn minimal_width(vocab_size: usize) -> usize {
    assert!(vocab_size >= 1);
    if vocab_size <= 2 {
        1
    } else {
        (usize::BITS - (vocab_size - 1).leading_zeros()) as usize
    }
}

/// `K`-bit binary expansion of the token id, bit `j` = `(t >> j) & 1`.
pub fn canonical_code(token: usize, width: usize) -> Result<BitVector, CodeError> {
    let limit = if width >= 64 { usize::MAX } else { 1usize << width };
    if token >= limit {
        return Err(CodeError::TokenOutOfRange { token, limit });
    }
    Ok(BitVector::from_word(width, token as u64))
}

/// Invertible affine recoder `(A, b)`: code -> `A code XOR b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recoder {
    pub matrix: BitMatrix,
    pub shift: BitVector,
}

impl Recoder {
    pub fn new(matrix: BitMatrix, shift: BitVector) -> Result<Self, CodeError> {
        if shift.len() != matrix.side() {
            return Err(CodeError::InvalidSpec(format!(
                "shift length {} does not match matrix side {}",
                shift.len(),
                matrix.side()
            )));
        }
        if !matrix.is_invertible() {
            return Err(CodeError::InvalidSpec("recoder matrix is singular".into()));
        }
        Ok(Recoder { matrix, shift })
    }

    /// Deterministic random recoder: `A` uniform over GL(k,2) by rejection,
    /// `b` uniform over all k-bit vectors, both from one labelled stream.
    pub fn sample(width: usize, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "recoder");
        let matrix = sample_invertible_from(width, &mut rng)
            .expect("rejection sampling failed; invertible fraction exceeds 0.288");
        let shift = BitVector::from_word(width, rng.next_u64());
        Recoder { matrix, shift }
    }
}

/// Full description of the input interface: vocabulary size `V`, minimal
/// code width `K`, optional recoder `(A, b)`, and lift width `d`. The single
/// source of truth for `t -> x(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSpec {
    vocab_size: usize,
    code_width: usize,
    recoder: Option<Recoder>,
    lift_width: usize,
}

impl CodeSpec {
    /// Construction enforces minimality (`K` is derived, never supplied),
    /// lift divisibility, and recoder invertibility.
    pub fn new(
        vocab_size: usize,
        lift_width: usize,
        recoder: Option<Recoder>,
    ) -> Result<Self, CodeError> {
        if vocab_size == 0 {
            return Err(CodeError::InvalidSpec("vocab_size must be positive".into()));
        }
        let code_width = minimal_width(vocab_size);
        if lift_width == 0 || lift_width % code_width != 0 {
            return Err(CodeError::NonDivisibleWidth { lift_width, code_width });
        }
        if let Some(r) = &recoder {
            if r.matrix.side() != code_width {
                return Err(CodeError::InvalidSpec(format!(
                    "recoder side {} does not match code width {}",
                    r.matrix.side(),
                    code_width
                )));
            }
            if !r.matrix.is_invertible() {
                return Err(CodeError::InvalidSpec("recoder matrix is singular".into()));
            }
        }
        Ok(CodeSpec { vocab_size, code_width, recoder, lift_width })
    }

    /// Test backdoor: skips the invertibility check so verification routines
    /// can be exercised against a deliberately broken recoder.
    #[doc(hidden)]
    pub fn new_unchecked(
        vocab_size: usize,
        lift_width: usize,
        recoder: Option<Recoder>,
    ) -> Self {
        let code_width = minimal_width(vocab_size);
        CodeSpec { vocab_size, code_width, recoder, lift_width }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn code_width(&self) -> usize {
        self.code_width
    }

    pub fn lift_width(&self) -> usize {
        self.lift_width
    }

    pub fn recoder(&self) -> Option<&Recoder> {
        self.recoder.as_ref()
    }

    /// Number of tiles `d / K`.
    pub fn tiles(&self) -> usize {
        self.lift_width / self.code_width
    }

    /// Applies the recoder if present; the canonical code passes through
    /// unchanged when `A = I, b = 0` or when no recoder is configured.
    pub fn recode(&self, code: &BitVector) -> Result<BitVector, CodeError> {
        if code.len() != self.code_width {
            return Err(Gf2Error::DimensionMismatch {
                expected: self.code_width,
                got: code.len(),
            }
            .into());
        }
        match &self.recoder {
            None => Ok(*code),
            Some(r) => Ok(affine_apply(&r.matrix, &r.shift, code)?),
        }
    }

    /// The (possibly recoded) `K`-bit code for a token.
    pub fn code_bits(&self, token: usize) -> Result<BitVector, CodeError> {
        if token >= self.vocab_size {
            return Err(CodeError::TokenOutOfRange { token, limit: self.vocab_size });
        }
        self.recode(&canonical_code(token, self.code_width)?)
    }

    /// Full input vector `x(t)`: recoded code cast to 0.0/1.0 and tiled to
    /// width `d`. Deterministic; reads no trainable state.
    pub fn encode_token(&self, token: usize) -> Result<Vec<f32>, CodeError> {
        let bits = self.code_bits(token)?;
        Ok(lift(&bits, self.lift_width))
    }

    /// Writes `x(t)` into a preallocated slice of length `d` (the hot path
    /// for batch encoding).
    pub fn encode_token_into(&self, token: usize, out: &mut [f32]) -> Result<(), CodeError> {
        assert_eq!(out.len(), self.lift_width);
        let bits = self.code_bits(token)?;
        let k = self.code_width;
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = if bits.get(i % k) { 1.0 } else { 0.0 };
        }
        Ok(())
    }
}

/// Zero-parameter tiled lift: `out[i] = code[i mod K]`, cast to 0.0/1.0.
pub fn lift(code: &BitVector, lift_width: usize) -> Vec<f32> {
    let k = code.len();
    assert!(
        lift_width > 0 && lift_width % k == 0,
        "lift width {lift_width} must be a positive multiple of {k}"
    );
    (0..lift_width).map(|i| if code.get(i % k) { 1.0 } else { 0.0 }).collect()
}

/// Checked wrapper over [`lift`] for callers holding unvalidated widths.
pub fn try_lift(code: &BitVector, lift_width: usize) -> Result<Vec<f32>, CodeError> {
    if lift_width == 0 || lift_width % code.len() != 0 {
        return Err(CodeError::NonDivisibleWidth { lift_width, code_width: code.len() });
    }
    Ok(lift(code, lift_width))
}

// ---------------------------------------------------------------------------
// Frozen table
// ---------------------------------------------------------------------------

/// Precomputed, non-trainable lookup table; row `t` equals `encode_token(t)`
/// bit-exactly. Provided for ablation parity with a standard embedding
/// layer; the training harness defaults to table-free encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTable {
    pub vocab_size: usize,
    pub lift_width: usize,
    /// Row-major `V x d`.
    pub data: Vec<f32>,
}

impl FrozenTable {
    pub fn row(&self, token: usize) -> &[f32] {
        &self.data[token * self.lift_width..(token + 1) * self.lift_width]
    }

    /// `V=<int> d=<int> dtype=f32` header line, then `V*d` little-endian
    /// 32-bit floats, row-major.
    pub fn write_to(&self, path: &Path) -> Result<(), CodeError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "V={} d={} dtype=f32", self.vocab_size, self.lift_width)?;
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, CodeError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut vocab_size = None;
        let mut lift_width = None;
        let mut dtype_ok = false;
        for field in header.trim().split_whitespace() {
            match field.split_once('=') {
                Some(("V", v)) => vocab_size = v.parse().ok(),
                Some(("d", v)) => lift_width = v.parse().ok(),
                Some(("dtype", "f32")) => dtype_ok = true,
                _ => {}
            }
        }
        let (Some(vocab_size), Some(lift_width), true) = (vocab_size, lift_width, dtype_ok)
        else {
            return Err(CodeError::InvalidSpec(format!("bad table header {header:?}")));
        };
        let mut data = vec![0f32; vocab_size * lift_width];
        let mut buf = [0u8; 4];
        for slot in &mut data {
            r.read_exact(&mut buf)?;
            *slot = f32::from_le_bytes(buf);
        }
        if r.read(&mut buf)? != 0 {
            return Err(CodeError::InvalidSpec("trailing bytes after table data".into()));
        }
        Ok(FrozenTable { vocab_size, lift_width, data })
    }
}

/// Materializes the full table; row `t` is `encode_token(t)` bit-exactly.
pub fn export_frozen_table(spec: &CodeSpec) -> FrozenTable {
    let (v, d) = (spec.vocab_size, spec.lift_width);
    let mut data = vec![0f32; v * d];
    for t in 0..v {
        spec.encode_token_into(t, &mut data[t * d..(t + 1) * d])
            .expect("token in range by construction");
    }
    FrozenTable { vocab_size: v, lift_width: d, data }
}

// ---------------------------------------------------------------------------
// Verification operations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectivityReport {
    pub ok: bool,
    /// One witness `(t1, t2)` with identical encodings, if any.
    pub colliding_pair: Option<(usize, usize)>,
}

/// Exhaustive distinctness check over all `V` encoded vectors. The
/// no-collision proposition guarantees `ok` for every valid spec; this exists
/// as a regression guard and to catch corrupted specs.
pub fn verify_injectivity(spec: &CodeSpec) -> InjectivityReport {
    let mut seen: HashMap<Vec<u32>, usize> = HashMap::with_capacity(spec.vocab_size);
    let mut row = vec![0f32; spec.lift_width];
    for t in 0..spec.vocab_size {
        spec.encode_token_into(t, &mut row).expect("token in range");
        let key: Vec<u32> = row.iter().map(|x| x.to_bits()).collect();
        if let Some(&prev) = seen.get(&key) {
            return InjectivityReport { ok: false, colliding_pair: Some((prev, t)) };
        }
        seen.insert(key, t);
    }
    InjectivityReport { ok: true, colliding_pair: None }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceReport {
    /// `per_bit_ones[j]` = number of tokens whose recoded bit `j` is 1.
    pub per_bit_ones: Vec<usize>,
    /// For each coordinate pair `i < j`, counts of the four patterns
    /// indexed by `2*bit_i + bit_j`.
    pub pair_pattern_counts: Vec<((usize, usize), [usize; 4])>,
}

/// Bit-balance statistics of the recoded codebook. Only defined for the full
/// vocabulary `V = 2^K`, where each bit must be 1 for exactly `2^(K-1)`
/// tokens and each pair pattern must occur exactly `2^(K-2)` times.
pub fn verify_balance(spec: &CodeSpec) -> Result<BalanceReport, CodeError> {
    let k = spec.code_width;
    if k >= usize::BITS as usize || spec.vocab_size != 1usize << k {
        return Err(CodeError::NotFullVocabulary {
            vocab_size: spec.vocab_size,
            code_width: k,
        });
    }
    let mut per_bit_ones = vec![0usize; k];
    let mut pairs: Vec<((usize, usize), [usize; 4])> = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            pairs.push(((i, j), [0; 4]));
        }
    }
    for t in 0..spec.vocab_size {
        let bits = spec.code_bits(t)?;
        for (j, count) in per_bit_ones.iter_mut().enumerate() {
            if bits.get(j) {
                *count += 1;
            }
        }
        for ((i, j), counts) in pairs.iter_mut() {
            let pattern = 2 * usize::from(bits.get(*i)) + usize::from(bits.get(*j));
            counts[pattern] += 1;
        }
    }
    Ok(BalanceReport { per_bit_ones, pair_pattern_counts: pairs })
}

/// Set of recoded codes as words, for hypercube-coverage checks.
pub fn code_image(spec: &CodeSpec) -> Result<Vec<u64>, CodeError> {
    (0..spec.vocab_size).map(|t| Ok(spec.code_bits(t)?.word())).collect()
}

/// Exact real-valued rank of `{x(t) : t < V}`.
///
/// The encoded vectors are 0/1, so fraction-free (Bareiss) elimination over
/// integers gives the rank with no floating-point tolerance. Intermediate
/// values are bounded by the largest minor determinant, far inside `i128`
/// for code widths up to 64.
pub fn effective_rank(spec: &CodeSpec) -> usize {
    let (v, d) = (spec.vocab_size, spec.lift_width);
    let mut m: Vec<Vec<i128>> = Vec::with_capacity(v);
    let mut row = vec![0f32; d];
    for t in 0..v {
        spec.encode_token_into(t, &mut row).expect("token in range");
        m.push(row.iter().map(|&x| x as i128).collect());
    }
    bareiss_rank(&mut m)
}

fn bareiss_rank(m: &mut [Vec<i128>]) -> usize {
    let rows = m.len();
    if rows == 0 {
        return 0;
    }
    let cols = m[0].len();
    let mut rank = 0;
    let mut prev: i128 = 1;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let Some(p) = (rank..rows).find(|&r| m[r][col] != 0) else {
            continue;
        };
        m.swap(rank, p);
        let pivot = m[rank][col];
        for r in (rank + 1)..rows {
            let lead = m[r][col];
            for c in (col + 1)..cols {
                m[r][c] = (m[r][c] * pivot - lead * m[rank][c]) / prev;
            }
            m[r][col] = 0;
        }
        prev = pivot;
        rank += 1;
    }
    rank
}

// ---------------------------------------------------------------------------
// Spec file format
// ---------------------------------------------------------------------------

/// How the recoder is stated in a spec file: absent, derived from a seed, or
/// an explicit matrix fixture plus shift bit string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoderSource {
    None,
    Seed(u64),
    Explicit { matrix_file: String, shift: String },
}

/// Structured-text spec file: `vocab_size`, `code_width`, `lift_width`, and
/// either `recoder.seed` or `recoder.matrix_file` + `recoder.shift`.
pub fn write_spec_file(
    path: &Path,
    vocab_size: usize,
    lift_width: usize,
    recoder: &RecoderSource,
) -> Result<(), CodeError> {
    let mut text = String::new();
    text.push_str(&format!("vocab_size = {vocab_size}\n"));
    text.push_str(&format!("code_width = {}\n", minimal_width(vocab_size)));
    text.push_str(&format!("lift_width = {lift_width}\n"));
    match recoder {
        RecoderSource::None => {}
        RecoderSource::Seed(seed) => text.push_str(&format!("recoder.seed = {seed}\n")),
        RecoderSource::Explicit { matrix_file, shift } => {
            text.push_str(&format!("recoder.matrix_file = {matrix_file}\n"));
            text.push_str(&format!("recoder.shift = {shift}\n"));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads and validates a spec file. A `recoder.matrix_file` path is resolved
/// relative to the spec file's directory.
pub fn load_spec_file(path: &Path) -> Result<CodeSpec, CodeError> {
    let text = std::fs::read_to_string(path)?;
    let mut fields: HashMap<String, String> = HashMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CodeError::InvalidSpec(format!("bad line {line:?}")));
        };
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get_usize = |key: &str| -> Result<usize, CodeError> {
        fields
            .get(key)
            .ok_or_else(|| CodeError::InvalidSpec(format!("missing key {key}")))?
            .parse()
            .map_err(|_| CodeError::InvalidSpec(format!("bad integer for {key}")))
    };
    let vocab_size = get_usize("vocab_size")?;
    let lift_width = get_usize("lift_width")?;
    if let Some(stated) = fields.get("code_width") {
        let stated: usize = stated
            .parse()
            .map_err(|_| CodeError::InvalidSpec("bad integer for code_width".into()))?;
        if stated != minimal_width(vocab_size) {
            return Err(CodeError::InvalidSpec(format!(
                "code_width {stated} is not the minimal width {} for V={vocab_size}",
                minimal_width(vocab_size)
            )));
        }
    }
    let recoder = match (fields.get("recoder.seed"), fields.get("recoder.matrix_file")) {
        (Some(_), Some(_)) => {
            return Err(CodeError::InvalidSpec(
                "recoder.seed and recoder.matrix_file are mutually exclusive".into(),
            ))
        }
        (Some(seed), None) => {
            let seed: u64 = seed
                .parse()
                .map_err(|_| CodeError::InvalidSpec("bad integer for recoder.seed".into()))?;
            Some(Recoder::sample(minimal_width(vocab_size), seed))
        }
        (None, Some(matrix_file)) => {
            let shift = fields
                .get("recoder.shift")
                .ok_or_else(|| CodeError::InvalidSpec("missing recoder.shift".into()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let matrix_text = std::fs::read_to_string(base.join(matrix_file))?;
            let matrix = BitMatrix::parse_text(&matrix_text)?;
            let shift = BitVector::parse(shift)?;
            Some(Recoder::new(matrix, shift)?)
        }
        (None, None) => None,
    };
    CodeSpec::new(vocab_size, lift_width, recoder)
}
