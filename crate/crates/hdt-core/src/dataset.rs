//! Vector datasets: `fvecs`/`bvecs`/`ivecs` files, synthetic clustered data,
//! and brute-force exact nearest neighbors.
//!
//! The file formats are the classic retrieval-benchmark layouts: each vector
//! is a little-endian `i32` dimension followed by that many elements
//! (`f32` for fvecs, `u8` for bvecs, `i32` for ivecs). Every vector in a
//! file must share one dimension; malformed files are rejected with the byte
//! offset where parsing failed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest plausible per-vector dimension accepted by the readers; anything
/// above this is treated as file corruption rather than data.
const MAX_DIM: usize = 1 << 20;

struct VecReader<R: Read> {
    inner: R,
    offset: u64,
    what: &'static str,
}

impl<R: Read> VecReader<R> {
    fn new(inner: R, what: &'static str) -> Self {
        VecReader { inner, offset: 0, what }
    }

    /// Reads exactly `buf.len()` bytes, or returns `Ok(false)` on a clean EOF
    /// at a vector boundary (`at_boundary`), or errors mid-record.
    fn read_exact_or_eof(&mut self, buf: &mut [u8], at_boundary: bool) -> Result<bool> {
        let mut filled = 0;
        while filled < buf.len() {
            let got = self.inner.read(&mut buf[filled..])?;
            if got == 0 {
                if filled == 0 && at_boundary {
                    return Ok(false);
                }
                return Err(Error::format(format!(
                    "{}: truncated record at byte offset {}",
                    self.what,
                    self.offset + filled as u64
                )));
            }
            filled += got;
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn read_dim(&mut self) -> Result<Option<usize>> {
        let header_offset = self.offset;
        let mut buf = [0u8; 4];
        if !self.read_exact_or_eof(&mut buf, true)? {
            return Ok(None);
        }
        let d = i32::from_le_bytes(buf);
        if d <= 0 || d as usize > MAX_DIM {
            return Err(Error::format(format!(
                "{}: bad vector dimension {} at byte offset {}",
                self.what, d, header_offset
            )));
        }
        Ok(Some(d as usize))
    }
}

fn read_vecs<T, R: Read>(
    reader: R,
    what: &'static str,
    elem_bytes: usize,
    mut decode: impl FnMut(&[u8], u64, &'static str) -> Result<T>,
) -> Result<Vec<Vec<T>>> {
    let mut r = VecReader::new(reader, what);
    let mut out: Vec<Vec<T>> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut buf = vec![0u8; 4096];
    while let Some(d) = r.read_dim()? {
        match dim {
            None => dim = Some(d),
            Some(expect) if expect != d => {
                return Err(Error::format(format!(
                    "{what}: vector dimension changed from {expect} to {d} at byte offset {}",
                    r.offset - 4
                )));
            }
            Some(_) => {}
        }
        let mut v = Vec::with_capacity(d);
        let mut remaining = d;
        while remaining > 0 {
            let take = remaining.min(buf.len() / elem_bytes);
            let bytes = take * elem_bytes;
            let elem_offset = r.offset;
            r.read_exact_or_eof(&mut buf[..bytes], false)?;
            for i in 0..take {
                let start = i * elem_bytes;
                v.push(decode(
                    &buf[start..start + elem_bytes],
                    elem_offset + start as u64,
                    what,
                )?);
            }
            remaining -= take;
        }
        out.push(v);
    }
    Ok(out)
}

/// Reads an `fvecs` file (`f32` vectors). All values must be finite.
pub fn read_fvecs(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    let file = BufReader::new(File::open(path.as_ref())?);
    read_vecs(file, "fvecs", 4, |bytes, offset, what| {
        let v = f32::from_le_bytes(bytes.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::format(format!(
                "{what}: non-finite value at byte offset {offset}"
            )));
        }
        Ok(v)
    })
}

/// Reads a `bvecs` file (`u8` vectors), widening to `f32`.
pub fn read_bvecs(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    let file = BufReader::new(File::open(path.as_ref())?);
    read_vecs(file, "bvecs", 1, |bytes, _, _| Ok(bytes[0] as f32))
}

/// Reads an `ivecs` file (`i32` vectors) of nonnegative ids.
pub fn read_ivecs(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let file = BufReader::new(File::open(path.as_ref())?);
    read_vecs(file, "ivecs", 4, |bytes, offset, what| {
        let v = i32::from_le_bytes(bytes.try_into().expect("4 bytes"));
        if v < 0 {
            return Err(Error::format(format!(
                "{what}: negative id {v} at byte offset {offset}"
            )));
        }
        Ok(v as u32)
    })
}

fn check_uniform_rows<T>(rows: &[Vec<T>], what: &str) -> Result<usize> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid(format!("{what}: cannot write an empty vector list")))?;
    if first.is_empty() {
        return Err(Error::invalid(format!("{what}: vectors must be nonempty")));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != first.len() {
            return Err(Error::invalid(format!(
                "{what}: vector {} has dimension {} but vector 0 has {}",
                i,
                row.len(),
                first.len()
            )));
        }
    }
    Ok(first.len())
}

/// Writes an `fvecs` file.
pub fn write_fvecs(path: impl AsRef<Path>, rows: &[Vec<f32>]) -> Result<()> {
    let dim = check_uniform_rows(rows, "fvecs")? as i32;
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for row in rows {
        out.write_all(&dim.to_le_bytes())?;
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes an `ivecs` file.
pub fn write_ivecs(path: impl AsRef<Path>, rows: &[Vec<u32>]) -> Result<()> {
    let dim = check_uniform_rows(rows, "ivecs")? as i32;
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for row in rows {
        out.write_all(&dim.to_le_bytes())?;
        for &v in row {
            let v = i32::try_from(v)
                .map_err(|_| Error::invalid(format!("ivecs: id {v} exceeds i32 range")))?;
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Converts uniform-dimension `f32` vectors to an `f64` matrix, one row per
/// vector — the layout the embedding model consumes.
pub fn as_f64_matrix(rows: &[Vec<f32>]) -> Result<Array2<f64>> {
    let dim = check_uniform_rows(rows, "matrix")?;
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[[i, j]] = v as f64;
        }
    }
    Ok(m)
}

/// Exact k-nearest-neighbor ids under Euclidean distance, one row per query,
/// nearest first. Ties broken by ascending base id. Distances accumulate in
/// `f64` regardless of the `f32` storage.
pub fn brute_force_knn(
    base: &[Vec<f32>],
    queries: &[Vec<f32>],
    k: usize,
) -> Result<Vec<Vec<u32>>> {
    if base.is_empty() {
        return Err(Error::invalid("knn needs a nonempty base set"));
    }
    if k == 0 || k > base.len() {
        return Err(Error::invalid(format!(
            "k={k} must be in 1..={} (the base size)",
            base.len()
        )));
    }
    if u32::try_from(base.len()).is_err() {
        return Err(Error::invalid("base set exceeds u32 id range"));
    }
    let dim = check_uniform_rows(base, "knn base")?;
    if !queries.is_empty() && check_uniform_rows(queries, "knn queries")? != dim {
        return Err(Error::shape(format!(
            "query dimension {} does not match base dimension {dim}",
            queries[0].len()
        )));
    }
    Ok(queries
        .par_iter()
        .map(|q| {
            let mut scored: Vec<(f64, u32)> = base
                .iter()
                .enumerate()
                .map(|(id, b)| {
                    let d2: f64 = q
                        .iter()
                        .zip(b.iter())
                        .map(|(&x, &y)| {
                            let d = x as f64 - y as f64;
                            d * d
                        })
                        .sum();
                    (d2, id as u32)
                })
                .collect();
            scored
                .sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
            scored.truncate(k);
            scored.into_iter().map(|(_, id)| id).collect()
        })
        .collect())
}

/// A synthetic clustered dataset: unit-norm cluster centers with isotropic
/// Gaussian noise. Labels are cluster indices; base, training, and query
/// points are independent draws around the same centers.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub base: Vec<Vec<f32>>,
    pub base_labels: Vec<u32>,
    pub training: Vec<Vec<f32>>,
    pub training_labels: Vec<u32>,
    pub queries: Vec<Vec<f32>>,
    pub query_labels: Vec<u32>,
}

/// Generates a [`SynthDataset`] with `clusters * per_cluster` base and
/// training points and `clusters * max(1, per_cluster / 10)` queries.
/// Deterministic per seed.
pub fn synth_dataset(
    clusters: usize,
    per_cluster: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if clusters == 0 || per_cluster == 0 {
        return Err(Error::invalid("clusters and per_cluster must be at least 1"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim must be at least 1"));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::invalid(format!("noise={noise} must be finite and nonnegative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut centers = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        loop {
            let c: Vec<f64> = (0..dim).map(|_| std_normal.sample(&mut rng)).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                centers.push(c.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
                break;
            }
        }
    }
    let draw = |rng: &mut ChaCha8Rng, count_per_cluster: usize| {
        let mut points = Vec::with_capacity(clusters * count_per_cluster);
        let mut labels = Vec::with_capacity(clusters * count_per_cluster);
        for (label, center) in centers.iter().enumerate() {
            for _ in 0..count_per_cluster {
                let p: Vec<f32> = center
                    .iter()
                    .map(|&c| (c + noise * std_normal.sample(rng)) as f32)
                    .collect();
                points.push(p);
                labels.push(label as u32);
            }
        }
        (points, labels)
    };
    let (base, base_labels) = draw(&mut rng, per_cluster);
    let (training, training_labels) = draw(&mut rng, per_cluster);
    let (queries, query_labels) = draw(&mut rng, (per_cluster / 10).max(1));
    Ok(SynthDataset { base, base_labels, training, training_labels, queries, query_labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn fvecs_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.fvecs");
        let rows = vec![vec![1.0f32, -2.5, 0.0], vec![7.25, 8.0, -0.125]];
        write_fvecs(&path, &rows).unwrap();
        assert_eq!(read_fvecs(&path).unwrap(), rows);
    }

    #[test]
    fn fvecs_known_byte_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.fvecs");
        write_fvecs(&path, &[vec![1.0f32, -2.0]]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(&2i32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn ivecs_round_trip_and_negative_rejection() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ivecs");
        let rows = vec![vec![3u32, 0, 9], vec![1, 2, 3]];
        write_ivecs(&path, &rows).unwrap();
        assert_eq!(read_ivecs(&path).unwrap(), rows);

        // Hand-craft a file holding a negative id.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&(-5i32).to_le_bytes());
        let bad = dir.path().join("bad.ivecs");
        std::fs::write(&bad, &bytes).unwrap();
        let err = read_ivecs(&bad).unwrap_err().to_string();
        assert!(err.contains("negative id"), "{err}");
        assert!(err.contains("offset 4"), "offset should point at the element: {err}");
    }

    #[test]
    fn bvecs_reads_bytes_as_floats() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.bvecs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&3i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8, 128, 255]);
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(read_bvecs(&path).unwrap(), vec![vec![0.0f32, 128.0, 255.0]]);
    }

    #[test]
    fn readers_reject_corruption_with_offsets() {
        let dir = tempdir().unwrap();

        // Truncated mid-record.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&4i32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let p = dir.path().join("trunc.fvecs");
        std::fs::write(&p, &bytes).unwrap();
        let err = read_fvecs(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        // Bad dimension.
        let p = dir.path().join("baddim.fvecs");
        std::fs::write(&p, (-3i32).to_le_bytes()).unwrap();
        let err = read_fvecs(&p).unwrap_err().to_string();
        assert!(err.contains("bad vector dimension -3"), "{err}");
        assert!(err.contains("offset 0"), "{err}");

        // Dimension change between vectors.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let p = dir.path().join("dimchange.fvecs");
        std::fs::write(&p, &bytes).unwrap();
        let err = read_fvecs(&p).unwrap_err().to_string();
        assert!(err.contains("changed from 1 to 2"), "{err}");

        // Non-finite payload.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        let p = dir.path().join("nan.fvecs");
        std::fs::write(&p, &bytes).unwrap();
        let err = read_fvecs(&p).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }

    #[test]
    fn empty_file_reads_as_empty_list() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("empty.fvecs");
        std::fs::write(&p, b"").unwrap();
        assert!(read_fvecs(&p).unwrap().is_empty());
    }

    #[test]
    fn knn_hand_example_with_tie() {
        let base = vec![
            vec![0.0f32, 0.0],
            vec![3.0, 0.0],
            vec![0.0, 4.0],
            vec![1.0, 1.0],
        ];
        let queries = vec![vec![1.0f32, 0.0]];
        // Squared distances: 1, 4, 17, 1 — ids 0 and 3 tie at 1; lower id first.
        let knn = brute_force_knn(&base, &queries, 3).unwrap();
        assert_eq!(knn, vec![vec![0u32, 3, 1]]);
    }

    /// Independent oracle: full distance matrix by quadratic expansion
    /// (|a-b|^2 = |a|^2 + |b|^2 - 2 a.b), then argsort.
    #[test]
    fn knn_matches_quadratic_expansion_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let base: Vec<Vec<f32>> =
            (0..50).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let queries: Vec<Vec<f32>> =
            (0..10).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let k = 7;
        let got = brute_force_knn(&base, &queries, k).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            let qq: f64 = q.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let mut scored: Vec<(f64, u32)> = base
                .iter()
                .enumerate()
                .map(|(id, b)| {
                    let bb: f64 = b.iter().map(|&v| (v as f64) * (v as f64)).sum();
                    let dot: f64 =
                        q.iter().zip(b.iter()).map(|(&x, &y)| (x as f64) * (y as f64)).sum();
                    (qq + bb - 2.0 * dot, id as u32)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<u32> = scored[..k].iter().map(|&(_, id)| id).collect();
            assert_eq!(got[qi], expect, "query {qi}");
        }
    }

    #[test]
    fn knn_rejects_bad_arguments() {
        let base = vec![vec![0.0f32, 0.0]];
        let queries = vec![vec![1.0f32, 0.0]];
        assert!(brute_force_knn(&[], &queries, 1).is_err());
        assert!(brute_force_knn(&base, &queries, 0).is_err());
        assert!(brute_force_knn(&base, &queries, 2).is_err());
        assert!(brute_force_knn(&base, &[vec![1.0f32, 0.0, 0.0]], 1).is_err());
    }

    #[test]
    fn synth_dataset_shapes_labels_and_determinism() {
        let d = synth_dataset(5, 20, 8, 0.1, 42).unwrap();
        assert_eq!(d.base.len(), 100);
        assert_eq!(d.training.len(), 100);
        assert_eq!(d.queries.len(), 10); // 5 clusters x max(1, 20/10)
        assert_eq!(d.base_labels.len(), 100);
        assert_eq!(d.query_labels, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert!(d.base.iter().all(|v| v.len() == 8));

        let d2 = synth_dataset(5, 20, 8, 0.1, 42).unwrap();
        assert_eq!(d.base, d2.base);
        assert_eq!(d.queries, d2.queries);
        let d3 = synth_dataset(5, 20, 8, 0.1, 43).unwrap();
        assert_ne!(d.base, d3.base);
    }

    #[test]
    fn synth_clusters_are_separated_when_noise_is_small() {
        let d = synth_dataset(3, 30, 16, 0.01, 1).unwrap();
        // With tiny noise every point sits close to its unit-norm center, so
        // each query's nearest base neighbors share its label.
        let knn = brute_force_knn(&d.base, &d.queries, 5).unwrap();
        for (qi, neighbors) in knn.iter().enumerate() {
            for &id in neighbors {
                assert_eq!(
                    d.base_labels[id as usize], d.query_labels[qi],
                    "query {qi} pulled neighbor {id} from another cluster"
                );
            }
        }
    }

    #[test]
    fn synth_rejects_bad_arguments() {
        assert!(synth_dataset(0, 1, 4, 0.1, 0).is_err());
        assert!(synth_dataset(1, 0, 4, 0.1, 0).is_err());
        assert!(synth_dataset(1, 1, 0, 0.1, 0).is_err());
        assert!(synth_dataset(1, 1, 4, -0.5, 0).is_err());
        assert!(synth_dataset(1, 1, 4, f64::NAN, 0).is_err());
    }

    #[test]
    fn matrix_conversion() {
        let m = as_f64_matrix(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.dim(), (2, 2));
        assert_eq!(m[[1, 0]], 3.0);
        assert!(as_f64_matrix(&[vec![1.0f32], vec![1.0, 2.0]]).is_err());
        assert!(as_f64_matrix(&[]).is_err());
    }
}
