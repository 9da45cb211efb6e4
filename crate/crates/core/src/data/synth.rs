//! Synthetic corpora with planted hierarchical structure.
//!
//! Items live in a balanced tree of circles: each level adds a centroid
//! offset of decreasing scale, and leaf items scatter tightly around their
//! leaf centroid. Users draw a fixed number of leaf circles as interests and
//! sample most behaviors from them, the rest uniformly from the catalog.
//! The planted leaf paths and embeddings give clustering and mining tests an
//! exact ground truth.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::UserSequence;
use crate::error::Result;
use crate::{ItemId, UserId};

/// Embedding width of planted item vectors.
pub const PLANTED_DIM: usize = 16;

#[derive(Debug, Clone)]
pub struct SynthParams {
    /// Depth of the planted hierarchy.
    pub levels: usize,
    /// Children per node.
    pub branching: usize,
    pub items_per_leaf: usize,
    pub users: usize,
    pub interests_per_user: usize,
    /// Behaviors per user.
    pub seq_len: usize,
    /// Fraction of behaviors drawn uniformly from the whole catalog instead
    /// of the user's interest leaves.
    pub noise_frac: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub sequences: Vec<UserSequence>,
    /// Planted leaf path per item.
    pub planted_labels: BTreeMap<ItemId, Vec<u32>>,
    /// Planted Gaussian-mixture embedding per item.
    pub planted_embeddings: BTreeMap<ItemId, Vec<f64>>,
    /// Planted interest leaves per user.
    pub user_interests: BTreeMap<UserId, Vec<Vec<u32>>>,
}

impl SynthCorpus {
    pub fn n_items(&self) -> usize {
        self.planted_labels.len()
    }

    /// Planted leaves as cluster labels aligned with ascending item id.
    pub fn leaf_labels(&self) -> Vec<usize> {
        let mut leaf_ids: Vec<&Vec<u32>> = self.planted_labels.values().collect();
        leaf_ids.sort();
        leaf_ids.dedup();
        self.planted_labels
            .values()
            .map(|path| leaf_ids.binary_search(&path).unwrap())
            .collect()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = rand_distr_standard_normal();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

// Box-Muller standard normal; keeps rand_distr out of the dependency set for
// this one sampler.
struct StdNormal;

impl Distribution<f64> for StdNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

fn rand_distr_standard_normal() -> StdNormal {
    StdNormal
}

/// Generates a corpus with `branching^levels` planted leaf circles.
///
/// Level-one centroid offsets have unit scale and each deeper level shrinks
/// by a fixed factor; item scatter is tighter than the deepest offset so the
/// hierarchy is recoverable. Deterministic given the seed.
pub fn synth_corpus(params: &SynthParams) -> SynthCorpus {
    assert!(params.levels >= 1, "levels must be >= 1");
    assert!(params.branching >= 1, "branching must be >= 1");
    assert!(params.items_per_leaf >= 1, "items_per_leaf must be >= 1");
    assert!(params.users >= 1, "users must be >= 1");
    assert!(
        params.interests_per_user >= 1,
        "interests_per_user must be >= 1"
    );
    assert!(params.seq_len >= 1, "seq_len must be >= 1");
    assert!(
        (0.0..1.0).contains(&params.noise_frac),
        "noise_frac must lie in [0, 1)"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = rand_distr_standard_normal();

    // Leaf centroids: accumulate per-level offsets with decreasing scale.
    let mut centroids: Vec<(Vec<u32>, Vec<f64>)> = vec![(Vec::new(), vec![0.0; PLANTED_DIM])];
    let mut scale = 1.0;
    let mut last_offset_scale = 1.0;
    for _ in 0..params.levels {
        let mut next = Vec::with_capacity(centroids.len() * params.branching);
        for (path, center) in &centroids {
            for child in 0..params.branching {
                let offset = unit_vector(&mut rng, PLANTED_DIM);
                let mut path = path.clone();
                path.push(child as u32);
                let center: Vec<f64> = center
                    .iter()
                    .zip(&offset)
                    .map(|(c, o)| c + o * scale)
                    .collect();
                next.push((path, center));
            }
        }
        centroids = next;
        last_offset_scale = scale;
        scale *= 0.35;
    }
    // Item scatter: expected noise norm ~0.2x the deepest offset scale, so
    // sibling leaves stay separable.
    let item_sigma = last_offset_scale * 0.2 / (PLANTED_DIM as f64).sqrt();

    let mut planted_labels = BTreeMap::new();
    let mut planted_embeddings = BTreeMap::new();
    let mut leaf_items: Vec<Vec<ItemId>> = Vec::with_capacity(centroids.len());
    let mut next_item: ItemId = 1;
    for (path, center) in &centroids {
        let mut members = Vec::with_capacity(params.items_per_leaf);
        for _ in 0..params.items_per_leaf {
            let vec: Vec<f64> = center
                .iter()
                .map(|c| c + normal.sample(&mut rng) * item_sigma)
                .collect();
            planted_labels.insert(next_item, path.clone());
            planted_embeddings.insert(next_item, vec);
            members.push(next_item);
            next_item += 1;
        }
        leaf_items.push(members);
    }
    let n_items = next_item - 1;

    let n_leaves = leaf_items.len();
    let interests_per_user = params.interests_per_user.min(n_leaves);
    let mut sequences = Vec::with_capacity(params.users);
    let mut user_interests = BTreeMap::new();
    let mut leaf_order: Vec<usize> = (0..n_leaves).collect();
    for user_id in 1..=params.users as UserId {
        leaf_order.shuffle(&mut rng);
        let interests: Vec<usize> = leaf_order[..interests_per_user].to_vec();
        let mut items = Vec::with_capacity(params.seq_len);
        for _ in 0..params.seq_len {
            let item = if rng.gen::<f64>() < params.noise_frac {
                rng.gen_range(1..=n_items)
            } else {
                let leaf = interests[rng.gen_range(0..interests.len())];
                leaf_items[leaf][rng.gen_range(0..params.items_per_leaf)]
            };
            items.push(item);
        }
        let timestamps: Vec<u64> = (0..items.len() as u64).collect();
        user_interests.insert(
            user_id,
            interests
                .iter()
                .map(|&l| centroids[l].0.clone())
                .collect::<Vec<_>>(),
        );
        sequences.push(UserSequence {
            user_id,
            items,
            timestamps,
        });
    }

    SynthCorpus {
        sequences,
        planted_labels,
        planted_embeddings,
        user_interests,
    }
}

/// Writes sequences in `ratings.dat` format (`user::item::5::ts`), so
/// synthetic corpora can exercise the same ingestion path as real logs.
pub fn write_ratings_dat(path: &Path, sequences: &[UserSequence]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in sequences {
        for (item, ts) in seq.items.iter().zip(&seq.timestamps) {
            writeln!(file, "{}::{}::5::{}", seq.user_id, item, ts)?;
        }
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_params() -> SynthParams {
        SynthParams {
            levels: 2,
            branching: 3,
            items_per_leaf: 5,
            users: 20,
            interests_per_user: 2,
            seq_len: 30,
            noise_frac: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn noise_free_users_stay_within_their_interest_leaves() {
        let corpus = synth_corpus(&small_params());
        for seq in &corpus.sequences {
            let leaves: BTreeSet<&Vec<u32>> = seq
                .items
                .iter()
                .map(|item| &corpus.planted_labels[item])
                .collect();
            assert!(leaves.len() <= 2, "user {} spans {:?}", seq.user_id, leaves);
        }
    }

    #[test]
    fn same_seed_reproduces_corpus() {
        let a = synth_corpus(&small_params());
        let b = synth_corpus(&small_params());
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.planted_labels, b.planted_labels);
        assert_eq!(a.planted_embeddings, b.planted_embeddings);
        assert_eq!(a.user_interests, b.user_interests);
    }

    #[test]
    fn two_level_three_way_tree_has_nine_leaves() {
        let corpus = synth_corpus(&small_params());
        let leaves: BTreeSet<&Vec<u32>> = corpus.planted_labels.values().collect();
        assert_eq!(leaves.len(), 9);
        assert!(corpus.planted_labels.values().all(|p| p.len() == 2));
        assert_eq!(corpus.n_items(), 45);
    }

    #[test]
    fn single_level_tree_paths_have_length_one() {
        let mut params = small_params();
        params.levels = 1;
        params.branching = 4;
        let corpus = synth_corpus(&params);
        assert!(corpus.planted_labels.values().all(|p| p.len() == 1));
    }

    #[test]
    fn ratings_dat_roundtrips_through_parser() {
        let corpus = synth_corpus(&small_params());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.dat");
        write_ratings_dat(&path, &corpus.sequences).unwrap();
        let inters = crate::data::parse_movielens(&path).unwrap();
        let rebuilt = crate::data::build_sequences(&inters, 1);
        assert_eq!(rebuilt.len(), corpus.sequences.len());
        for (a, b) in rebuilt.iter().zip(&corpus.sequences) {
            assert_eq!(a.items, b.items);
        }
    }
}
