//! Multi-index Hamming search with optional embedding re-ranking.
//!
//! To answer radius-`r` queries over `n`-bit codes, each code is cut into
//! `r + 1` contiguous substring blocks and every block value goes into its
//! own exact-match hash table. A query within Hamming distance `r` differs
//! in at most `r` bits, so by pigeonhole at least one block matches exactly:
//! probing the `r + 1` tables and distance-checking the union of candidates
//! finds *every* code within the radius. When `r + 1` does not divide `n`,
//! the first `n mod (r + 1)` blocks are one bit longer than the rest.
//!
//! With stored embeddings, [`MultiIndex::lookup_ranked`] re-ranks the
//! radius-`r` ball by Euclidean distance in embedding space and returns the
//! closest `l` — cheap Hamming candidates first, exact geometry last.
//!
//! Under uniformly distributed codes, each block of width `n / (r + 1)`
//! matches about `N / 2^(n / (r + 1))` candidates, so a query fetches about
//! `(r + 1) * N / 2^(n / (r + 1))` in total ([`expected_candidates`]);
//! [`advise_radius`] picks the radius whose block width best matches
//! `log2(N)`, balancing table occupancy against probe count.

use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap};
use std::io::{Read, Write};

use crate::code::{partition_bounds, BinaryCode, WORDS};
use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 8] = b"HDTINDX1";

/// Work counters for one query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryStats {
    /// Candidate slots fetched across all block tables, with multiplicity.
    pub candidates_fetched: usize,
    /// Full Hamming distances computed (one per distinct candidate).
    pub distance_comparisons: usize,
    /// Euclidean embedding distances computed (re-ranked lookups only).
    pub embedding_comparisons: usize,
    /// Results returned to the caller.
    pub results_returned: usize,
}

/// A Hamming-ball match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: u32,
}

/// A re-ranked match: Hamming distance plus exact embedding distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedNeighbor {
    pub id: u64,
    pub distance: u32,
    pub embedding_distance: f64,
}

#[derive(Clone, Debug)]
struct IndexRow {
    id: u64,
    code: BinaryCode,
    embedding: Option<Box<[f32]>>,
}

/// The multi-index: one hash table per substring block, slot-compacted rows,
/// and an id map supporting replacement and removal.
#[derive(Clone, Debug)]
pub struct MultiIndex {
    n: u32,
    r: u32,
    /// `(start, len)` bit ranges of the `r + 1` blocks.
    bounds: Vec<(usize, usize)>,
    /// One table per block: block value -> row slots.
    maps: Vec<HashMap<[u64; WORDS], Vec<u32>>>,
    rows: Vec<Option<IndexRow>>,
    free: Vec<u32>,
    by_id: HashMap<u64, u32>,
    /// Embedding width when the index stores embeddings, 0 otherwise.
    embed_dim: usize,
}

impl MultiIndex {
    /// A code-only index for radius-`r` queries over `n`-bit codes.
    pub fn new(n: u32, r: u32) -> Result<Self> {
        Self::build(n, r, 0)
    }

    /// An index that additionally stores a `dim`-wide `f32` embedding per
    /// code, enabling [`Self::lookup_ranked`].
    pub fn with_embeddings(n: u32, r: u32, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        Self::build(n, r, dim)
    }

    fn build(n: u32, r: u32, embed_dim: usize) -> Result<Self> {
        if !(8..=256).contains(&n) {
            return Err(Error::invalid(format!("code length n={n} out of range 8..=256")));
        }
        if r >= n {
            return Err(Error::invalid(format!("radius r={r} must be below n={n}")));
        }
        let bounds = partition_bounds(n as usize, (r + 1) as usize);
        let maps = vec![HashMap::new(); bounds.len()];
        Ok(MultiIndex {
            n,
            r,
            bounds,
            maps,
            rows: Vec::new(),
            free: Vec::new(),
            by_id: HashMap::new(),
            embed_dim,
        })
    }

    /// Code length in bits.
    pub fn bits(&self) -> u32 {
        self.n
    }

    /// Query radius the index was built for.
    pub fn radius(&self) -> u32 {
        self.r
    }

    /// Embedding width, or `None` for a code-only index.
    pub fn embedding_dim(&self) -> Option<usize> {
        (self.embed_dim > 0).then_some(self.embed_dim)
    }

    /// Number of indexed codes.
    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    fn check_code(&self, code: &BinaryCode) -> Result<()> {
        if code.n() != self.n as usize {
            return Err(Error::shape(format!(
                "code has {} bits but the index holds {}-bit codes",
                code.n(),
                self.n
            )));
        }
        Ok(())
    }

    /// Inserts into a code-only index. Re-inserting an id replaces its code.
    pub fn insert(&mut self, id: u64, code: BinaryCode) -> Result<()> {
        if self.embed_dim > 0 {
            return Err(Error::invalid(
                "this index stores embeddings; use insert_with_embedding",
            ));
        }
        self.insert_row(id, code, None)
    }

    /// Inserts a code with its embedding. Re-inserting an id replaces both.
    pub fn insert_with_embedding(&mut self, id: u64, code: BinaryCode, embedding: &[f32]) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::invalid(
                "this index does not store embeddings; build it with with_embeddings",
            ));
        }
        if embedding.len() != self.embed_dim {
            return Err(Error::shape(format!(
                "embedding has {} components but the index stores {}",
                embedding.len(),
                self.embed_dim
            )));
        }
        if let Some(v) = embedding.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("embedding holds a non-finite value {v}")));
        }
        self.insert_row(id, code, Some(embedding.into()))
    }

    fn insert_row(&mut self, id: u64, code: BinaryCode, embedding: Option<Box<[f32]>>) -> Result<()> {
        self.check_code(&code)?;
        if self.by_id.contains_key(&id) {
            self.remove(id)?;
        }
        let slot = match self.free.pop() {
            Some(slot) => slot,
            None => {
                let slot = u32::try_from(self.rows.len())
                    .map_err(|_| Error::invalid("index is full (u32 slot space)"))?;
                self.rows.push(None);
                slot
            }
        };
        for (map, &(start, len)) in self.maps.iter_mut().zip(&self.bounds) {
            map.entry(code.block_key(start, len)).or_default().push(slot);
        }
        self.rows[slot as usize] = Some(IndexRow { id, code, embedding });
        self.by_id.insert(id, slot);
        Ok(())
    }

    /// Removes an id; returns whether it was present.
    pub fn remove(&mut self, id: u64) -> Result<bool> {
        let Some(slot) = self.by_id.remove(&id) else {
            return Ok(false);
        };
        let row = self.rows[slot as usize]
            .take()
            .expect("by_id always points at an occupied slot");
        for (map, &(start, len)) in self.maps.iter_mut().zip(&self.bounds) {
            let key = row.code.block_key(start, len);
            match map.entry(key) {
                Entry::Occupied(mut e) => {
                    let v = e.get_mut();
                    if let Some(pos) = v.iter().position(|&s| s == slot) {
                        v.swap_remove(pos);
                    }
                    if v.is_empty() {
                        e.remove();
                    }
                }
                Entry::Vacant(_) => unreachable!("indexed code must be present in every block map"),
            }
        }
        self.free.push(slot);
        Ok(true)
    }

    /// Distinct candidate slots for a query code, plus the fetched-with-
    /// multiplicity count.
    fn candidates(&self, code: &BinaryCode) -> (Vec<u32>, usize) {
        let mut slots = Vec::new();
        for (map, &(start, len)) in self.maps.iter().zip(&self.bounds) {
            if let Some(v) = map.get(&code.block_key(start, len)) {
                slots.extend_from_slice(v);
            }
        }
        let fetched = slots.len();
        slots.sort_unstable();
        slots.dedup();
        (slots, fetched)
    }

    /// Every indexed code within Hamming distance `r` of the query, sorted
    /// by `(distance, id)`.
    pub fn lookup(&self, code: &BinaryCode) -> Result<(Vec<Neighbor>, QueryStats)> {
        self.check_code(code)?;
        let (slots, fetched) = self.candidates(code);
        let mut stats = QueryStats { candidates_fetched: fetched, ..Default::default() };
        let mut out = Vec::new();
        for slot in slots {
            let row = self.rows[slot as usize].as_ref().expect("candidate slots are occupied");
            stats.distance_comparisons += 1;
            let distance = row.code.hamming_words(code);
            if distance <= self.r {
                out.push(Neighbor { id: row.id, distance });
            }
        }
        out.sort_unstable_by(|a, b| a.distance.cmp(&b.distance).then(a.id.cmp(&b.id)));
        stats.results_returned = out.len();
        Ok((out, stats))
    }

    /// The `l` codes in the radius-`r` ball closest to `query_embedding` in
    /// Euclidean distance, ties broken by id. Needs stored embeddings.
    pub fn lookup_ranked(
        &self,
        code: &BinaryCode,
        query_embedding: &[f32],
        l: usize,
    ) -> Result<(Vec<RankedNeighbor>, QueryStats)> {
        if self.embed_dim == 0 {
            return Err(Error::invalid(
                "re-ranked lookup needs an index built with with_embeddings",
            ));
        }
        if l == 0 {
            return Err(Error::invalid("result budget l must be at least 1"));
        }
        if query_embedding.len() != self.embed_dim {
            return Err(Error::shape(format!(
                "query embedding has {} components but the index stores {}",
                query_embedding.len(),
                self.embed_dim
            )));
        }
        self.check_code(code)?;
        let (slots, fetched) = self.candidates(code);
        let mut stats = QueryStats { candidates_fetched: fetched, ..Default::default() };

        // Max-heap of the best l so far, worst on top: (distance, id) with
        // ascending preference.
        #[derive(PartialEq)]
        struct HeapEntry(f64, u64, u32);
        impl Eq for HeapEntry {}
        impl PartialOrd for HeapEntry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for HeapEntry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
            }
        }
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(l + 1);
        for slot in slots {
            let row = self.rows[slot as usize].as_ref().expect("candidate slots are occupied");
            stats.distance_comparisons += 1;
            let distance = row.code.hamming_words(code);
            if distance > self.r {
                continue;
            }
            let emb = row.embedding.as_ref().expect("embedding index stores embeddings");
            stats.embedding_comparisons += 1;
            let d2: f64 = emb
                .iter()
                .zip(query_embedding.iter())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            heap.push(HeapEntry(d2.sqrt(), row.id, distance));
            if heap.len() > l {
                heap.pop();
            }
        }
        let mut out: Vec<RankedNeighbor> = heap
            .into_iter()
            .map(|HeapEntry(ed, id, distance)| RankedNeighbor {
                id,
                distance,
                embedding_distance: ed,
            })
            .collect();
        out.sort_unstable_by(|a, b| {
            a.embedding_distance.total_cmp(&b.embedding_distance).then(a.id.cmp(&b.id))
        });
        stats.results_returned = out.len();
        Ok((out, stats))
    }

    /// Serializes the index: magic, a fixed header, then one record per
    /// indexed code (id, packed words, embedding when stored).
    pub fn save(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&(self.n as u16).to_le_bytes())?;
        out.write_all(&self.r.to_le_bytes())?;
        out.write_all(&(self.embed_dim as u32).to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        let word_count = (self.n as usize + 63) / 64;
        for row in self.rows.iter().flatten() {
            out.write_all(&row.id.to_le_bytes())?;
            for w in row.code.words().iter().take(word_count) {
                out.write_all(&w.to_le_bytes())?;
            }
            if let Some(emb) = &row.embedding {
                for v in emb.iter() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Loads a snapshot written by [`Self::save`], rebuilding the block
    /// tables and validating the payload exactly.
    pub fn load(input: &mut impl Read) -> Result<Self> {
        fn read_bytes<const K: usize>(input: &mut impl Read, what: &str) -> Result<[u8; K]> {
            let mut buf = [0u8; K];
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::format(format!("index snapshot: truncated {what}")))?;
            Ok(buf)
        }
        let magic = read_bytes::<8>(input, "magic")?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::format("not an index snapshot (bad magic)"));
        }
        let n = u16::from_le_bytes(read_bytes::<2>(input, "header")?) as u32;
        let r = u32::from_le_bytes(read_bytes::<4>(input, "header")?);
        let embed_dim = u32::from_le_bytes(read_bytes::<4>(input, "header")?) as usize;
        let count = u64::from_le_bytes(read_bytes::<8>(input, "header")?);
        let mut index = Self::build(n, r, embed_dim)?;
        let word_count = (n as usize + 63) / 64;
        for rec in 0..count {
            let id = u64::from_le_bytes(read_bytes::<8>(input, "record id")?);
            let mut words = [0u64; WORDS];
            for w in words.iter_mut().take(word_count) {
                *w = u64::from_le_bytes(read_bytes::<8>(input, "record code")?);
            }
            let code = BinaryCode::from_words(words, n as usize)?;
            if code.words() != words {
                return Err(Error::format(format!(
                    "index snapshot: record {rec} has nonzero padding bits"
                )));
            }
            if index.by_id.contains_key(&id) {
                return Err(Error::format(format!(
                    "index snapshot: duplicate id {id} at record {rec}"
                )));
            }
            if embed_dim > 0 {
                let mut emb = vec![0.0f32; embed_dim];
                for v in emb.iter_mut() {
                    *v = f32::from_le_bytes(read_bytes::<4>(input, "record embedding")?);
                }
                index.insert_with_embedding(id, code, &emb)?;
            } else {
                index.insert(id, code)?;
            }
        }
        let mut trailing = [0u8; 1];
        match input.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(Error::format("index snapshot has trailing bytes")),
            Err(e) => return Err(e.into()),
        }
        Ok(index)
    }
}

/// Expected candidates fetched per query when `num_codes` codes are spread
/// uniformly over `n`-bit space at radius `r`:
/// `(r + 1) * num_codes / 2^(n / (r + 1))` with a real-valued exponent.
pub fn expected_candidates(n: u32, r: u32, num_codes: u64) -> f64 {
    let m = (r + 1) as f64;
    m * num_codes as f64 / 2f64.powf(n as f64 / m)
}

/// The radius whose substring width `n / (r + 1)` sits closest to
/// `log2(dataset_size)` — the sweet spot where block tables neither
/// overflow with collisions nor fragment into singletons. Ties prefer the
/// smaller radius.
pub fn advise_radius(n: u32, dataset_size: u64) -> Result<u32> {
    if !(8..=256).contains(&n) {
        return Err(Error::invalid(format!("code length n={n} out of range 8..=256")));
    }
    if dataset_size == 0 {
        return Err(Error::invalid("dataset_size must be at least 1"));
    }
    let target = (dataset_size as f64).log2();
    let mut best_r = 0u32;
    let mut best_gap = f64::INFINITY;
    for r in 0..n {
        let gap = (n as f64 / (r + 1) as f64 - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best_r = r;
        }
    }
    Ok(best_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code::hamming;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code32(rng: &mut impl Rng) -> BinaryCode {
        BinaryCode::from_u64(rng.gen::<u32>() as u64, 32).unwrap()
    }

    #[test]
    fn construction_validates_arguments() {
        assert!(MultiIndex::new(32, 3).is_ok());
        assert!(MultiIndex::new(7, 1).is_err());
        assert!(MultiIndex::new(257, 1).is_err());
        assert!(MultiIndex::new(32, 32).is_err());
        assert!(MultiIndex::with_embeddings(32, 3, 0).is_err());
        // Non-divisor block count is fine: 32 bits over 3 blocks.
        assert!(MultiIndex::new(32, 2).is_ok());
    }

    #[test]
    fn lookup_matches_brute_force_over_random_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codes: Vec<BinaryCode> = (0..2000).map(|_| code32(&mut rng)).collect();
        for r in [0u32, 1, 3] {
            let mut index = MultiIndex::new(32, r).unwrap();
            for (id, c) in codes.iter().enumerate() {
                index.insert(id as u64, *c).unwrap();
            }
            for _ in 0..200 {
                let q = code32(&mut rng);
                let (got, stats) = index.lookup(&q).unwrap();
                let mut expect: Vec<Neighbor> = codes
                    .iter()
                    .enumerate()
                    .filter_map(|(id, c)| {
                        let d = hamming(c, &q).unwrap();
                        (d <= r).then_some(Neighbor { id: id as u64, distance: d })
                    })
                    .collect();
                expect.sort_unstable_by(|a, b| a.distance.cmp(&b.distance).then(a.id.cmp(&b.id)));
                assert_eq!(got, expect, "radius {r}");
                assert!(stats.results_returned <= stats.distance_comparisons);
                assert!(stats.distance_comparisons <= stats.candidates_fetched);
                assert_eq!(stats.results_returned, got.len());
            }
        }
    }

    /// Exhaustive completeness: every 8-bit code, radius 1.
    #[test]
    fn lookup_is_complete_over_the_whole_8_bit_space() {
        let mut index = MultiIndex::new(8, 1).unwrap();
        for v in 0..256u64 {
            index.insert(v, BinaryCode::from_u64(v, 8).unwrap()).unwrap();
        }
        for q in 0..256u64 {
            let qc = BinaryCode::from_u64(q, 8).unwrap();
            let (got, _) = index.lookup(&qc).unwrap();
            // Expect the code itself plus its 8 single-bit flips.
            assert_eq!(got.len(), 9, "query {q:#010b}");
            assert_eq!(got[0].id, q);
            assert_eq!(got[0].distance, 0);
            for n in &got[1..] {
                assert_eq!((n.id ^ q).count_ones(), 1);
            }
        }
    }

    #[test]
    fn uneven_block_widths_still_find_everything() {
        // n=10, r=2: blocks of 4, 3, 3.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<BinaryCode> = (0..512)
            .map(|_| BinaryCode::from_u64(rng.gen_range(0..1024), 10).unwrap())
            .collect();
        let mut index = MultiIndex::new(10, 2).unwrap();
        for (id, c) in codes.iter().enumerate() {
            index.insert(id as u64, *c).unwrap();
        }
        for _ in 0..300 {
            let q = BinaryCode::from_u64(rng.gen_range(0..1024), 10).unwrap();
            let (got, _) = index.lookup(&q).unwrap();
            let expect: Vec<u64> = codes
                .iter()
                .enumerate()
                .filter(|(_, c)| hamming(c, &q).unwrap() <= 2)
                .map(|(id, _)| id as u64)
                .collect();
            let mut got_ids: Vec<u64> = got.iter().map(|n| n.id).collect();
            got_ids.sort_unstable();
            assert_eq!(got_ids, expect);
        }
    }

    #[test]
    fn remove_and_replace() {
        let mut index = MultiIndex::new(16, 1).unwrap();
        let a = BinaryCode::from_u64(0xABCD, 16).unwrap();
        let b = BinaryCode::from_u64(0x1234, 16).unwrap();
        index.insert(7, a).unwrap();
        assert_eq!(index.len(), 1);
        // Replacement: same id, new code.
        index.insert(7, b).unwrap();
        assert_eq!(index.len(), 1);
        let (hits, _) = index.lookup(&a).unwrap();
        assert!(hits.is_empty(), "old code must be unreachable after replace");
        let (hits, _) = index.lookup(&b).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, 7);

        assert!(index.remove(7).unwrap());
        assert!(!index.remove(7).unwrap());
        assert_eq!(index.len(), 0);
        let (hits, _) = index.lookup(&b).unwrap();
        assert!(hits.is_empty());

        // Freed slot is reused.
        index.insert(9, a).unwrap();
        assert_eq!(index.rows.len(), 1, "slot should be recycled");
    }

    #[test]
    fn candidate_stats_count_multiplicity_and_dedup() {
        // Two blocks (r=1) over 16 bits. Construct ids whose codes share
        // both blocks with the query: each is fetched twice.
        let mut index = MultiIndex::new(16, 1).unwrap();
        let q = BinaryCode::from_u64(0x00FF, 16).unwrap();
        index.insert(1, q).unwrap(); // both blocks match: fetched twice
        index.insert(2, BinaryCode::from_u64(0x01FF, 16).unwrap()).unwrap(); // low block matches
        index.insert(3, BinaryCode::from_u64(0x00F0, 16).unwrap()).unwrap(); // high block matches
        index.insert(4, BinaryCode::from_u64(0xFF00, 16).unwrap()).unwrap(); // no block matches
        let (hits, stats) = index.lookup(&q).unwrap();
        assert_eq!(stats.candidates_fetched, 4, "1 twice, 2 once, 3 once");
        assert_eq!(stats.distance_comparisons, 3, "distinct candidates");
        assert_eq!(stats.embedding_comparisons, 0);
        assert_eq!(stats.results_returned, 2, "ids 1 (d=0) and 2 (d=1)");
        assert_eq!(hits[0].id, 1);
        assert_eq!(hits[1].id, 2);
    }

    #[test]
    fn ranked_lookup_orders_by_embedding_distance() {
        let mut index = MultiIndex::with_embeddings(8, 2, 2).unwrap();
        let q = BinaryCode::from_u64(0b0000_0000, 8).unwrap();
        // All within Hamming 2 of q; embedding distances disagree with
        // Hamming distances on purpose.
        index
            .insert_with_embedding(1, BinaryCode::from_u64(0b0000_0011, 8).unwrap(), &[5.0, 0.0])
            .unwrap();
        index
            .insert_with_embedding(2, BinaryCode::from_u64(0b0000_0001, 8).unwrap(), &[1.0, 0.0])
            .unwrap();
        index
            .insert_with_embedding(3, BinaryCode::from_u64(0b0000_0000, 8).unwrap(), &[0.0, 4.0])
            .unwrap();
        index
            .insert_with_embedding(4, BinaryCode::from_u64(0b1110_0000, 8).unwrap(), &[0.1, 0.0])
            .unwrap(); // Hamming 3: outside the ball despite the close embedding
        let (got, stats) = index.lookup_ranked(&q, &[0.0, 0.0], 2).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].id, 2);
        assert_eq!(got[0].embedding_distance, 1.0);
        assert_eq!(got[0].distance, 1);
        assert_eq!(got[1].id, 3);
        assert_eq!(got[1].embedding_distance, 4.0);
        assert_eq!(stats.embedding_comparisons, 3, "only in-ball candidates are scored");
        assert_eq!(stats.results_returned, 2);

        // Budget larger than the ball returns the whole ball.
        let (all, _) = index.lookup_ranked(&q, &[0.0, 0.0], 10).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn ranked_lookup_breaks_ties_by_id() {
        let mut index = MultiIndex::with_embeddings(8, 1, 1).unwrap();
        let q = BinaryCode::from_u64(0, 8).unwrap();
        index.insert_with_embedding(9, BinaryCode::from_u64(1, 8).unwrap(), &[2.0]).unwrap();
        index.insert_with_embedding(4, BinaryCode::from_u64(2, 8).unwrap(), &[2.0]).unwrap();
        let (got, _) = index.lookup_ranked(&q, &[0.0], 1).unwrap();
        assert_eq!(got[0].id, 4, "equal embedding distance: smaller id wins");
    }

    #[test]
    fn embedding_api_misuse_is_rejected() {
        let mut plain = MultiIndex::new(8, 1).unwrap();
        let c = BinaryCode::from_u64(1, 8).unwrap();
        assert!(plain.insert_with_embedding(1, c, &[1.0]).is_err());
        plain.insert(1, c).unwrap();
        assert!(plain.lookup_ranked(&c, &[1.0], 1).is_err());

        let mut emb = MultiIndex::with_embeddings(8, 1, 2).unwrap();
        assert!(emb.insert(1, c).is_err());
        assert!(emb.insert_with_embedding(1, c, &[1.0]).is_err(), "wrong dim");
        assert!(emb.insert_with_embedding(1, c, &[1.0, f32::NAN]).is_err());
        emb.insert_with_embedding(1, c, &[1.0, 2.0]).unwrap();
        assert!(emb.lookup_ranked(&c, &[1.0], 0).is_err(), "l = 0");
        assert!(emb.lookup_ranked(&c, &[1.0, 2.0, 3.0], 1).is_err(), "wrong query dim");
    }

    #[test]
    fn wrong_code_length_is_rejected() {
        let mut index = MultiIndex::new(16, 1).unwrap();
        let short = BinaryCode::from_u64(1, 8).unwrap();
        assert!(index.insert(1, short).is_err());
        assert!(index.lookup(&short).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut index = MultiIndex::with_embeddings(32, 2, 3).unwrap();
        for id in 0..500u64 {
            let emb = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
            index.insert_with_embedding(id, code32(&mut rng), &emb).unwrap();
        }
        index.remove(123).unwrap();
        let mut buf = Vec::new();
        index.save(&mut buf).unwrap();
        let loaded = MultiIndex::load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), index.len());
        for _ in 0..50 {
            let q = code32(&mut rng);
            let (a, _) = index.lookup(&q).unwrap();
            let (b, _) = loaded.lookup(&q).unwrap();
            assert_eq!(a, b);
            let emb_q = [0.5f32, 0.5, 0.5];
            let (ra, _) = index.lookup_ranked(&q, &emb_q, 5).unwrap();
            let (rb, _) = loaded.lookup_ranked(&q, &emb_q, 5).unwrap();
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn snapshot_rejects_corruption() {
        let mut index = MultiIndex::new(16, 1).unwrap();
        index.insert(1, BinaryCode::from_u64(0xBEEF, 16).unwrap()).unwrap();
        let mut buf = Vec::new();
        index.save(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[3] = b'?';
        assert!(MultiIndex::load(&mut bad_magic.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 3];
        assert!(MultiIndex::load(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(7);
        assert!(MultiIndex::load(&mut trailing.as_slice()).is_err());

        // Nonzero padding bits in the stored code.
        let mut padded = buf.clone();
        let code_offset = 8 + 2 + 4 + 4 + 8 + 8; // magic, n, r, dim, count, id
        padded[code_offset + 3] = 0xFF; // bits 24.. of a 16-bit code's word
        assert!(MultiIndex::load(&mut padded.as_slice()).is_err());
    }

    #[test]
    fn expected_candidates_formula() {
        // 32 bits, r=1: 2 blocks of 16 bits; 2^17 codes.
        // 2 * 2^17 / 2^16 = 4.
        let got = expected_candidates(32, 1, 1 << 17);
        assert!((got - 4.0).abs() < 1e-12, "{got}");
        // Non-divisor widths use the real-valued exponent: n=10, r=2.
        let got = expected_candidates(10, 2, 1000);
        let expect = 3.0 * 1000.0 / 2f64.powf(10.0 / 3.0);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn advised_radius_reference_points() {
        assert_eq!(advise_radius(32, 1_000_000).unwrap(), 1);
        assert_eq!(advise_radius(64, 1_000_000).unwrap(), 2);
        assert_eq!(advise_radius(16, 65_536).unwrap(), 0);
        assert!(advise_radius(7, 100).is_err());
        assert!(advise_radius(32, 0).is_err());
    }
}
