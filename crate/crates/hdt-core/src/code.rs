//! Packed binary hash codes and their substring decomposition.
//!
//! A [`BinaryCode`] holds an `n`-bit code (`1 <= n <= 256`) packed into `u64`
//! words. Component `k` of the real embedding it was binarized from maps to
//! integer bit position `n - 1 - k`, so a code built from an integer literal
//! reads most-significant-first: `BinaryCode::from_u64(0b1011_0011, 8)` has
//! component 0 equal to `1`.
//!
//! Codes serialize as a little-endian `u16` length prefix followed by the
//! occupied little-endian `u64` words; padding bits beyond `n` are always
//! zero, and readers reject files that violate this.

use std::fmt;
use std::io::{self, Read, Write};

use crate::error::{Error, Result};

/// Maximum supported code length in bits.
pub const MAX_BITS: usize = 256;

pub(crate) const WORDS: usize = MAX_BITS / 64;

/// A packed binary code of `n` bits, `1 <= n <= 256`.
///
/// The retrieval stack (index, trainer, serialized datasets) additionally
/// requires `8 <= n`, which is enforced where those components are configured.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    words: [u64; WORDS],
    n: u16,
}

impl BinaryCode {
    /// The all-zero code of length `n`.
    pub fn zero(n: usize) -> Result<Self> {
        check_len(n)?;
        Ok(BinaryCode { words: [0; WORDS], n: n as u16 })
    }

    /// Builds a code of length `n <= 64` from the low `n` bits of `value`,
    /// read most-significant-first. Bits of `value` above `n` are ignored.
    pub fn from_u64(value: u64, n: usize) -> Result<Self> {
        check_len(n)?;
        if n > 64 {
            return Err(Error::invalid(format!("from_u64 supports n <= 64, got {n}")));
        }
        let mut words = [0u64; WORDS];
        words[0] = if n == 64 { value } else { value & ((1u64 << n) - 1) };
        Ok(BinaryCode { words, n: n as u16 })
    }

    /// Builds a code from packed words (little-endian word order). Bits above
    /// `n` are cleared.
    pub fn from_words(mut words: [u64; WORDS], n: usize) -> Result<Self> {
        check_len(n)?;
        mask_padding(&mut words, n);
        Ok(BinaryCode { words, n: n as u16 })
    }

    /// Code length in bits.
    pub fn n(&self) -> usize {
        self.n as usize
    }

    /// Number of `u64` words occupied by `n` bits.
    pub fn word_count(&self) -> usize {
        (self.n as usize + 63) / 64
    }

    /// The packed words (little-endian word order, padding bits zero).
    pub fn words(&self) -> [u64; WORDS] {
        self.words
    }

    /// The bit for embedding component `k` (0-based).
    pub fn bit(&self, k: usize) -> bool {
        assert!(k < self.n as usize, "component {k} out of range for n={}", self.n);
        let pos = self.n as usize - 1 - k;
        self.words[pos / 64] >> (pos % 64) & 1 == 1
    }

    /// Sets the bit for embedding component `k`.
    pub fn set_bit(&mut self, k: usize, value: bool) {
        assert!(k < self.n as usize, "component {k} out of range for n={}", self.n);
        let pos = self.n as usize - 1 - k;
        if value {
            self.words[pos / 64] |= 1 << (pos % 64);
        } else {
            self.words[pos / 64] &= !(1 << (pos % 64));
        }
    }

    /// Word-wise Hamming distance; callers must guarantee equal lengths.
    pub(crate) fn hamming_words(&self, other: &BinaryCode) -> u32 {
        debug_assert_eq!(self.n, other.n);
        let mut d = 0;
        for w in 0..self.word_count() {
            d += (self.words[w] ^ other.words[w]).count_ones();
        }
        d
    }

    /// Splits the code into `m` equal contiguous substrings,
    /// most-significant-first. `m` must divide `n`.
    pub fn split(&self, m: usize) -> Result<Vec<Substring>> {
        if m == 0 {
            return Err(Error::invalid("substring count m must be at least 1"));
        }
        let n = self.n as usize;
        if n % m != 0 {
            return Err(Error::invalid(format!(
                "substring count m={m} does not divide code length n={n}"
            )));
        }
        Ok(self.blocks(&partition_bounds(n, m)))
    }

    /// Splits the code into `m` contiguous substrings of near-equal length
    /// (the leading `n % m` substrings are one bit longer), most-significant-
    /// first. Agrees with [`BinaryCode::split`] when `m` divides `n`.
    pub fn partition(&self, m: usize) -> Result<Vec<Substring>> {
        let n = self.n as usize;
        if m == 0 || m > n {
            return Err(Error::invalid(format!(
                "substring count m={m} must be in 1..={n}"
            )));
        }
        Ok(self.blocks(&partition_bounds(n, m)))
    }

    pub(crate) fn blocks(&self, bounds: &[(usize, usize)]) -> Vec<Substring> {
        let n = self.n as usize;
        bounds
            .iter()
            .enumerate()
            .map(|(i, &(start, len))| Substring {
                value: extract_bits(&self.words, n - start - len, len),
                len: len as u16,
                position: (i + 1) as u16,
            })
            .collect()
    }

    /// Extracts the key words for one substring block without allocating.
    pub(crate) fn block_key(&self, start: usize, len: usize) -> [u64; WORDS] {
        let n = self.n as usize;
        extract_bits(&self.words, n - start - len, len)
    }

    /// Reassembles a code from contiguous substrings at positions `1..=m`,
    /// inverting [`BinaryCode::split`] / [`BinaryCode::partition`].
    pub fn reassemble(substrings: &[Substring]) -> Result<Self> {
        if substrings.is_empty() {
            return Err(Error::invalid("cannot reassemble from zero substrings"));
        }
        let mut parts: Vec<&Substring> = substrings.iter().collect();
        parts.sort_by_key(|s| s.position);
        for (i, s) in parts.iter().enumerate() {
            if s.position as usize != i + 1 {
                return Err(Error::invalid(format!(
                    "substring positions must be exactly 1..={}, found position {}",
                    parts.len(),
                    s.position
                )));
            }
        }
        let n: usize = parts.iter().map(|s| s.len as usize).sum();
        check_len(n)?;
        let mut words = [0u64; WORDS];
        let mut start = 0usize;
        for s in &parts {
            let len = s.len as usize;
            deposit_bits(&mut words, &s.value, n - start - len, len);
            start += len;
        }
        Ok(BinaryCode { words, n: n as u16 })
    }

    /// Serializes the code: `u16` length prefix, then the occupied words,
    /// all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.n.to_le_bytes())?;
        for i in 0..self.word_count() {
            w.write_all(&self.words[i].to_le_bytes())?;
        }
        Ok(())
    }

    /// Deserializes one code, validating the length and zero padding.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        match Self::read_from_opt(r)? {
            Some(code) => Ok(code),
            None => Err(Error::format("unexpected end of stream reading code length")),
        }
    }

    /// Like [`BinaryCode::read_from`], but returns `Ok(None)` on a clean EOF
    /// at a code boundary, making streams of codes self-delimiting.
    pub fn read_from_opt<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut len_buf = [0u8; 2];
        match read_exact_or_eof(r, &mut len_buf)? {
            0 => return Ok(None),
            2 => {}
            got => {
                return Err(Error::format(format!(
                    "truncated code length prefix: got {got} of 2 bytes"
                )))
            }
        }
        let n = u16::from_le_bytes(len_buf) as usize;
        check_len(n).map_err(|_| {
            Error::format(format!("invalid code length {n}; expected 1..={MAX_BITS}"))
        })?;
        let mut words = [0u64; WORDS];
        let wc = (n + 63) / 64;
        for (i, word) in words.iter_mut().enumerate().take(wc) {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|e| {
                Error::format(format!("truncated code body at word {i} (n={n}): {e}"))
            })?;
            *word = u64::from_le_bytes(buf);
        }
        let mut masked = words;
        mask_padding(&mut masked, n);
        if masked != words {
            return Err(Error::format(format!(
                "nonzero padding bits beyond n={n}; stream is corrupt"
            )));
        }
        Ok(Some(BinaryCode { words, n: n as u16 }))
    }
}

impl fmt::Debug for BinaryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryCode(n={}, {})", self.n, self)
    }
}

impl fmt::Display for BinaryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.n as usize {
            if k > 0 && k % 8 == 0 {
                write!(f, "_")?;
            }
            write!(f, "{}", if self.bit(k) { '1' } else { '0' })?;
        }
        Ok(())
    }
}

/// One contiguous block of a code, produced by `split`/`partition`.
///
/// `position` is 1-based and most-significant-first; `value` holds the
/// block's bits LSB-aligned in little-endian words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Substring {
    value: [u64; WORDS],
    len: u16,
    position: u16,
}

impl Substring {
    /// Builds a substring from LSB-aligned words; bits above `len` are cleared.
    pub fn new(mut value: [u64; WORDS], len: usize, position: usize) -> Result<Self> {
        if len == 0 || len > MAX_BITS {
            return Err(Error::invalid(format!("substring length {len} out of range")));
        }
        if position == 0 || position > u16::MAX as usize {
            return Err(Error::invalid(format!("substring position {position} out of range")));
        }
        mask_padding(&mut value, len);
        Ok(Substring { value, len: len as u16, position: position as u16 })
    }

    /// The block's bits, LSB-aligned in little-endian words.
    pub fn value_words(&self) -> [u64; WORDS] {
        self.value
    }

    /// Block length in bits.
    pub fn len(&self) -> usize {
        self.len as usize
    }

    /// True if the block has zero length (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// 1-based block position, most-significant-first.
    pub fn position(&self) -> usize {
        self.position as usize
    }
}

/// Binarizes a real embedding: component `k` maps to bit `1` iff `y[k] >= 0`.
pub fn binarize(y: &[f64]) -> Result<BinaryCode> {
    check_len(y.len())?;
    let n = y.len();
    let mut words = [0u64; WORDS];
    for (k, &v) in y.iter().enumerate() {
        if v >= 0.0 {
            let pos = n - 1 - k;
            words[pos / 64] |= 1 << (pos % 64);
        }
    }
    Ok(BinaryCode { words, n: n as u16 })
}

/// Hamming distance between two codes of equal length.
pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.n != b.n {
        return Err(Error::shape(format!(
            "hamming distance needs equal lengths, got {} and {}",
            a.n, b.n
        )));
    }
    Ok(a.hamming_words(b))
}

/// Block layout for splitting `n` bits into `m` contiguous blocks,
/// most-significant-first: `(component_start, len)` per block. The leading
/// `n % m` blocks are one bit longer.
pub(crate) fn partition_bounds(n: usize, m: usize) -> Vec<(usize, usize)> {
    debug_assert!(m >= 1 && m <= n);
    let base = n / m;
    let extra = n % m;
    let mut bounds = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let len = base + usize::from(i < extra);
        bounds.push((start, len));
        start += len;
    }
    bounds
}

fn check_len(n: usize) -> Result<()> {
    if n == 0 || n > MAX_BITS {
        return Err(Error::invalid(format!(
            "code length n={n} out of range 1..={MAX_BITS}"
        )));
    }
    Ok(())
}

fn mask_padding(words: &mut [u64; WORDS], n: usize) {
    for (w, word) in words.iter_mut().enumerate() {
        let lo = w * 64;
        if lo >= n {
            *word = 0;
        } else if n - lo < 64 {
            *word &= (1u64 << (n - lo)) - 1;
        }
    }
}

/// Extracts `len` bits starting at integer bit position `lo` from a 256-bit
/// little-endian word array, returning them LSB-aligned.
fn extract_bits(words: &[u64; WORDS], lo: usize, len: usize) -> [u64; WORDS] {
    debug_assert!(lo + len <= MAX_BITS);
    let mut out = [0u64; WORDS];
    let nwords = (len + 63) / 64;
    for (j, slot) in out.iter_mut().enumerate().take(nwords) {
        let bit = lo + j * 64;
        let s = bit / 64;
        let sh = bit % 64;
        let mut v = words[s] >> sh;
        if sh > 0 && s + 1 < WORDS {
            v |= words[s + 1] << (64 - sh);
        }
        *slot = v;
    }
    mask_padding(&mut out, len);
    out
}

/// Deposits `len` LSB-aligned bits of `value` into the word array starting at
/// integer bit position `lo`. Target bits must currently be zero.
fn deposit_bits(words: &mut [u64; WORDS], value: &[u64; WORDS], lo: usize, len: usize) {
    debug_assert!(lo + len <= MAX_BITS);
    let nwords = (len + 63) / 64;
    for (j, &v) in value.iter().enumerate().take(nwords) {
        let bit = lo + j * 64;
        let s = bit / 64;
        let sh = bit % 64;
        words[s] |= v << sh;
        if sh > 0 && s + 1 < WORDS {
            words[s + 1] |= v >> (64 - sh);
        }
    }
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}
