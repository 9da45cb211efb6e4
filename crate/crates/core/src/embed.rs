//! Item embeddings from behavioral co-occurrence.
//!
//! The catalog has no usable content features at this scale, so item vectors
//! come from factorizing the PPMI-transformed co-occurrence matrix of items
//! appearing near each other in behavior sequences. Factorization is a
//! randomized subspace iteration followed by an exact eigendecomposition of
//! the projected matrix; rows are L2-normalized so downstream Euclidean
//! k-means ranks like cosine.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::UserSequence;
use crate::error::{Error, Result};
use crate::ItemId;

const EMBEDDING_MAGIC: &[u8; 4] = b"HREM";

/// Dense item embeddings keyed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingMatrix {
    dim: usize,
    ids: Vec<ItemId>,
    /// Row-major, aligned with `ids`.
    rows: Array2<f64>,
    index: HashMap<ItemId, usize>,
}

impl ItemEmbeddingMatrix {
    /// Builds a matrix from (id, vector) pairs; ids are sorted internally.
    pub fn from_vectors<I>(dim: usize, vectors: I) -> Self
    where
        I: IntoIterator<Item = (ItemId, Vec<f64>)>,
    {
        let mut pairs: Vec<(ItemId, Vec<f64>)> = vectors.into_iter().collect();
        pairs.sort_by_key(|(id, _)| *id);
        let mut rows = Array2::zeros((pairs.len(), dim));
        let mut ids = Vec::with_capacity(pairs.len());
        for (i, (id, vec)) in pairs.iter().enumerate() {
            assert_eq!(vec.len(), dim, "vector length mismatch for item {id}");
            ids.push(*id);
            for (j, v) in vec.iter().enumerate() {
                rows[(i, j)] = *v;
            }
        }
        let index = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Self {
            dim,
            ids,
            rows,
            index,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Item ids in ascending order, aligned with [`Self::matrix`] rows.
    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.index.contains_key(&item)
    }

    pub fn vector(&self, item: ItemId) -> Result<&[f64]> {
        let row = *self.index.get(&item).ok_or(Error::UnknownItem(item))?;
        Ok(self.rows.row(row).to_slice().expect("contiguous row"))
    }

    /// Serializes as: magic, dim (u32 LE), count (u64 LE), then
    /// `(item_id: u64 LE, f32 x dim LE)` records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(EMBEDDING_MAGIC)?;
        file.write_all(&(self.dim as u32).to_le_bytes())?;
        file.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            file.write_all(&id.to_le_bytes())?;
            for j in 0..self.dim {
                file.write_all(&(self.rows[(i, j)] as f32).to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad embedding file magic {magic:?}"
            )));
        }
        let mut buf4 = [0u8; 4];
        let mut buf8 = [0u8; 8];
        file.read_exact(&mut buf4)?;
        let dim = u32::from_le_bytes(buf4) as usize;
        file.read_exact(&mut buf8)?;
        let count = u64::from_le_bytes(buf8) as usize;
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            file.read_exact(&mut buf8)?;
            let id = u64::from_le_bytes(buf8);
            let mut vec = Vec::with_capacity(dim);
            for _ in 0..dim {
                file.read_exact(&mut buf4)?;
                vec.push(f32::from_le_bytes(buf4) as f64);
            }
            pairs.push((id, vec));
        }
        Ok(Self::from_vectors(dim, pairs))
    }
}

/// Symmetric co-occurrence counts over unordered item pairs, plus the set of
/// items seen in the corpus (isolated items included).
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceMatrix {
    /// Keyed by (min, max) pair; diagonal excluded.
    counts: BTreeMap<(ItemId, ItemId), f64>,
    items: Vec<ItemId>,
}

impl CooccurrenceMatrix {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, a: ItemId, b: ItemId) -> f64 {
        if a == b {
            return 0.0;
        }
        let key = (a.min(b), a.max(b));
        self.counts.get(&key).copied().unwrap_or(0.0)
    }
}

/// Counts co-occurrences of distinct items within `window` positions of each
/// other in any sequence. Symmetric with a zero diagonal.
pub fn build_cooccurrence(sequences: &[UserSequence], window: usize) -> CooccurrenceMatrix {
    assert!(window >= 1, "window must be >= 1");
    let mut counts: HashMap<(ItemId, ItemId), f64> = HashMap::new();
    let mut items: std::collections::BTreeSet<ItemId> = std::collections::BTreeSet::new();
    for seq in sequences {
        for (i, &a) in seq.items.iter().enumerate() {
            items.insert(a);
            let hi = (i + window).min(seq.items.len() - 1);
            for &b in &seq.items[i + 1..=hi] {
                if a == b {
                    continue;
                }
                *counts.entry((a.min(b), a.max(b))).or_default() += 1.0;
            }
        }
    }
    CooccurrenceMatrix {
        counts: counts.into_iter().collect(),
        items: items.into_iter().collect(),
    }
}

/// Positive PMI triplets (i, j, value) over item indices, upper triangle.
fn ppmi_triplets(matrix: &CooccurrenceMatrix) -> Vec<(usize, usize, f64)> {
    let index: HashMap<ItemId, usize> = matrix
        .items
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let mut row_sums = vec![0.0f64; matrix.items.len()];
    let mut total = 0.0f64;
    for (&(a, b), &c) in &matrix.counts {
        row_sums[index[&a]] += c;
        row_sums[index[&b]] += c;
        total += 2.0 * c;
    }
    let mut trips = Vec::new();
    for (&(a, b), &c) in &matrix.counts {
        let (i, j) = (index[&a], index[&b]);
        let pmi = (c * total / (row_sums[i] * row_sums[j])).ln();
        if pmi > 0.0 {
            trips.push((i, j, pmi));
        }
    }
    trips
}

/// `(M + shift I) x` for the symmetric sparse matrix given as upper-triangle
/// triplets, applied to an n x d matrix.
fn sym_sparse_matmul(
    trips: &[(usize, usize, f64)],
    x: &Array2<f64>,
    shift: f64,
) -> Array2<f64> {
    let d = x.ncols();
    let mut y = x * shift;
    for &(i, j, v) in trips {
        for c in 0..d {
            y[(i, c)] += v * x[(j, c)];
            y[(j, c)] += v * x[(i, c)];
        }
    }
    y
}

/// Orthonormalizes columns in place via modified Gram-Schmidt; columns that
/// collapse to numerical zero are left as zero.
fn orthonormalize_columns(q: &mut Array2<f64>) {
    let (n, d) = q.dim();
    for j in 0..d {
        for prev in 0..j {
            let mut dot = 0.0;
            for i in 0..n {
                dot += q[(i, j)] * q[(i, prev)];
            }
            for i in 0..n {
                q[(i, j)] -= dot * q[(i, prev)];
            }
        }
        let norm = (0..n).map(|i| q[(i, j)] * q[(i, j)]).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for i in 0..n {
                q[(i, j)] /= norm;
            }
        } else {
            for i in 0..n {
                q[(i, j)] = 0.0;
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[(p, j)];
                    let aqj = a[(q, j)];
                    a[(p, j)] = c * apj - s * aqj;
                    a[(q, j)] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[(i, i)]).collect();
    (vals, v)
}

/// Factorization output plus the per-iteration subspace residual diagnostic.
#[derive(Debug, Clone)]
pub struct FactorizeDiagnostics {
    pub embeddings: ItemEmbeddingMatrix,
    /// Frobenius norm of `M Q - Q (Q^T M Q)` per subspace iteration.
    pub residuals: Vec<f64>,
}

/// Factorizes the PPMI transform of `matrix` into `dim`-wide embeddings via
/// randomized subspace iteration. Rows are L2-normalized; items that never
/// co-occur get the zero vector. Deterministic given the seed.
pub fn factorize(
    matrix: &CooccurrenceMatrix,
    dim: usize,
    iters: usize,
    seed: u64,
) -> Result<ItemEmbeddingMatrix> {
    factorize_with_diagnostics(matrix, dim, iters, seed).map(|d| d.embeddings)
}

/// [`factorize`] with the residual trace attached.
pub fn factorize_with_diagnostics(
    matrix: &CooccurrenceMatrix,
    dim: usize,
    iters: usize,
    seed: u64,
) -> Result<FactorizeDiagnostics> {
    assert!(dim >= 2, "dim must be >= 2");
    if matrix.is_empty() {
        return Err(Error::EmptyEmbeddings);
    }
    let n = matrix.n_items();
    if dim > n {
        return Err(Error::DimTooLarge { dim, count: n });
    }
    let full_trips = ppmi_triplets(matrix);

    // Items without any positive-PMI pair stay out of the iteration and get
    // the zero vector; the tree build assigns them wherever their (zero)
    // point lands.
    let mut active = vec![false; n];
    for &(i, j, _) in &full_trips {
        active[i] = true;
        active[j] = true;
    }
    let compact: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    let mut compact_of = vec![usize::MAX; n];
    for (c, &i) in compact.iter().enumerate() {
        compact_of[i] = c;
    }
    let trips: Vec<(usize, usize, f64)> = full_trips
        .iter()
        .map(|&(i, j, v)| (compact_of[i], compact_of[j], v))
        .collect();
    let na = compact.len();

    // Gershgorin shift makes the dominant subspace the top *signed*
    // eigenvalues; PPMI has +-lambda pairs per disconnected block, and only
    // the positive side encodes association.
    let mut row_abs = vec![0.0f64; na.max(1)];
    for &(i, j, v) in &trips {
        row_abs[i] += v.abs();
        row_abs[j] += v.abs();
    }
    let shift = row_abs.iter().cloned().fold(0.0f64, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::zeros((na, dim));
    for i in 0..na {
        for j in 0..dim {
            // Box-Muller keeps the generator stream stable across rand
            // versions.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            q[(i, j)] = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
    q = sym_sparse_matmul(&trips, &q, shift);
    orthonormalize_columns(&mut q);

    // Frobenius mass of the shifted matrix, for the approximation residual
    // ||M' - Q B Q^T||_F = sqrt(||M'||_F^2 - ||B||_F^2). Ritz values grow
    // monotonically under subspace iteration on a PSD matrix, so this
    // residual decreases monotonically.
    let fro2: f64 =
        trips.iter().map(|&(_, _, v)| 2.0 * v * v).sum::<f64>() + na as f64 * shift * shift;

    let mut residuals = Vec::with_capacity(iters);
    for _ in 0..iters {
        let y = sym_sparse_matmul(&trips, &q, shift);
        let b = q.t().dot(&y);
        let captured: f64 = b.iter().map(|x| x * x).sum();
        residuals.push((fro2 - captured).max(0.0).sqrt());
        q = y;
        orthonormalize_columns(&mut q);
    }

    let y = sym_sparse_matmul(&trips, &q, shift);
    let b = q.t().dot(&y);
    // Symmetrize against roundoff before the eigensolve.
    let b = (&b + &b.t()) * 0.5;
    let (vals, vecs) = jacobi_eigen(&b);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());

    let mut embeddings = Array2::zeros((n, dim));
    let projected = q.dot(&vecs);
    for (out_col, &src_col) in order.iter().enumerate() {
        // Undo the spectral shift; clamp tiny negatives from roundoff.
        let lambda = (vals[src_col] - shift).max(0.0);
        let weight = lambda.sqrt();
        for c in 0..na {
            embeddings[(compact[c], out_col)] = projected[(c, src_col)] * weight;
        }
    }
    for mut row in embeddings.rows_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.mapv_inplace(|x| x / norm);
        } else {
            row.fill(0.0);
        }
    }

    let pairs = matrix
        .items
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, embeddings.row(i).to_vec()));
    Ok(FactorizeDiagnostics {
        embeddings: ItemEmbeddingMatrix::from_vectors(dim, pairs),
        residuals,
    })
}

/// Cosine similarity of two equal-length vectors; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_corpus, SynthParams};

    fn seq(user: u64, items: Vec<ItemId>) -> UserSequence {
        let timestamps = (0..items.len() as u64).collect();
        UserSequence {
            user_id: user,
            items,
            timestamps,
        }
    }

    #[test]
    fn adjacent_pairs_counted_once() {
        let m = build_cooccurrence(&[seq(1, vec![10, 11, 12])], 1);
        assert_eq!(m.count(10, 11), 1.0);
        assert_eq!(m.count(11, 12), 1.0);
        assert_eq!(m.count(10, 12), 0.0);
        assert_eq!(m.count(11, 10), 1.0);
    }

    #[test]
    fn repeated_item_counts_both_pairs_but_not_diagonal() {
        let m = build_cooccurrence(&[seq(1, vec![10, 11, 10])], 2);
        assert_eq!(m.count(10, 11), 2.0);
        assert_eq!(m.count(10, 10), 0.0);
    }

    #[test]
    fn empty_corpus_gives_empty_matrix() {
        let m = build_cooccurrence(&[], 3);
        assert!(m.is_empty());
    }

    #[test]
    fn factorize_rejects_oversized_dim() {
        let m = build_cooccurrence(&[seq(1, vec![1, 2, 3])], 1);
        match factorize(&m, 4, 5, 0) {
            Err(Error::DimTooLarge { dim: 4, count: 3 }) => {}
            other => panic!("expected DimTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn factorize_rejects_empty_matrix() {
        let m = CooccurrenceMatrix::default();
        assert!(matches!(
            factorize(&m, 2, 5, 0),
            Err(Error::EmptyEmbeddings)
        ));
    }

    /// Two disconnected cliques: the top eigenvectors of the block-diagonal
    /// PPMI matrix have one block each, so embeddings separate the cliques.
    /// Expected structure worked out by hand: PPMI here is block diagonal
    /// with 2x2 blocks [[0, v],[v, 0]], whose eigenvectors are (1, +-1)/sqrt(2)
    /// supported on a single clique. Any dominant pair of eigenvectors
    /// therefore gives within-clique cosine 1 and cross-clique cosine 0.
    #[test]
    fn two_cliques_separate_in_two_dims() {
        let mut seqs = Vec::new();
        for _ in 0..3 {
            seqs.push(seq(1, vec![1, 2]));
        }
        for _ in 0..5 {
            seqs.push(seq(2, vec![7, 8]));
        }
        let m = build_cooccurrence(&seqs, 1);
        let emb = factorize(&m, 2, 30, 3).unwrap();
        let within_a = cosine(emb.vector(1).unwrap(), emb.vector(2).unwrap());
        let within_b = cosine(emb.vector(7).unwrap(), emb.vector(8).unwrap());
        for &a in &[1u64, 2] {
            for &b in &[7u64, 8] {
                let across = cosine(emb.vector(a).unwrap(), emb.vector(b).unwrap());
                assert!(
                    within_a > across + 0.5 && within_b > across + 0.5,
                    "within {within_a:.3}/{within_b:.3} vs across {across:.3}"
                );
            }
        }
    }

    #[test]
    fn factorize_is_bitwise_deterministic() {
        let corpus = synth_corpus(&SynthParams {
            levels: 1,
            branching: 3,
            items_per_leaf: 8,
            users: 30,
            interests_per_user: 1,
            seq_len: 20,
            noise_frac: 0.0,
            seed: 5,
        });
        let m = build_cooccurrence(&corpus.sequences, 3);
        let a = factorize(&m, 4, 15, 9).unwrap();
        let b = factorize(&m, 4, 15, 9).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert_eq!(a.ids(), b.ids());
    }

    #[test]
    fn rows_are_unit_norm() {
        let corpus = synth_corpus(&SynthParams {
            levels: 1,
            branching: 4,
            items_per_leaf: 6,
            users: 40,
            interests_per_user: 2,
            seq_len: 25,
            noise_frac: 0.1,
            seed: 8,
        });
        let m = build_cooccurrence(&corpus.sequences, 3);
        let emb = factorize(&m, 6, 15, 1).unwrap();
        for i in 0..emb.len() {
            let norm = emb.matrix().row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                norm < 1e-12 || (norm - 1.0).abs() < 1e-6,
                "row {i} norm {norm}"
            );
        }
    }

    #[test]
    fn subspace_residual_decreases() {
        let corpus = synth_corpus(&SynthParams {
            levels: 1,
            branching: 3,
            items_per_leaf: 10,
            users: 50,
            interests_per_user: 1,
            seq_len: 30,
            noise_frac: 0.05,
            seed: 2,
        });
        let m = build_cooccurrence(&corpus.sequences, 3);
        let diag = factorize_with_diagnostics(&m, 4, 20, 7).unwrap();
        for pair in diag.residuals.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-9),
                "residuals not monotone: {:?}",
                diag.residuals
            );
        }
    }

    #[test]
    fn synth_within_leaf_cosine_beats_cross_leaf() {
        let corpus = synth_corpus(&SynthParams {
            levels: 1,
            branching: 4,
            items_per_leaf: 10,
            users: 120,
            interests_per_user: 2,
            seq_len: 40,
            noise_frac: 0.0,
            seed: 21,
        });
        let m = build_cooccurrence(&corpus.sequences, 5);
        let emb = factorize(&m, 8, 20, 4).unwrap();
        let ids = emb.ids().to_vec();
        let mut within = (0.0, 0usize);
        let mut across = (0.0, 0usize);
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let c = cosine(emb.vector(a).unwrap(), emb.vector(b).unwrap());
                if corpus.planted_labels[&a] == corpus.planted_labels[&b] {
                    within.0 += c;
                    within.1 += 1;
                } else {
                    across.0 += c;
                    across.1 += 1;
                }
            }
        }
        let within_avg = within.0 / within.1 as f64;
        let across_avg = across.0 / across.1 as f64;
        assert!(
            within_avg > across_avg,
            "within {within_avg:.3} <= across {across_avg:.3}"
        );
    }

    #[test]
    fn embeddings_roundtrip_binary_format() {
        let emb = ItemEmbeddingMatrix::from_vectors(
            3,
            vec![(5, vec![0.5, -0.25, 1.0]), (2, vec![0.0, 2.0, -3.5])],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        emb.save(&path).unwrap();
        let loaded = ItemEmbeddingMatrix::load(&path).unwrap();
        assert_eq!(loaded.ids(), &[2, 5]);
        assert_eq!(loaded.vector(5).unwrap(), emb.vector(5).unwrap());
        assert_eq!(loaded.vector(2).unwrap(), emb.vector(2).unwrap());
    }
}
