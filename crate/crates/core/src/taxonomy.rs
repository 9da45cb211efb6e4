//! The hierarchical k-means category tree.
//!
//! All items are clustered into k clusters; clusters with more than `c`
//! items are clustered again, recursively. Each cluster at layer i carries a
//! number `r_i` in `[0, k)`, so every node is addressed by the path of
//! numbers from the root — its semantic category id — and leaves partition
//! the catalog into sub-libraries. The same tree doubles as the prefix trie
//! constraining the interest miner's decoder.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::ItemEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::{derive_seed, ItemId};

/// A node path in the category tree: the cluster number chosen at each
/// layer, starting from layer 1.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticCategoryId {
    path: Vec<u32>,
}

impl SemanticCategoryId {
    pub fn new(path: Vec<u32>) -> Self {
        assert!(!path.is_empty(), "category path must be nonempty");
        Self { path }
    }

    pub fn path(&self) -> &[u32] {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when `self` is a prefix of `other` (or equal to it).
    pub fn is_prefix_of(&self, other: &SemanticCategoryId) -> bool {
        other.path.len() >= self.path.len() && other.path[..self.path.len()] == self.path[..]
    }
}

impl fmt::Display for SemanticCategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.path.iter().map(|r| r.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

impl FromStr for SemanticCategoryId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let path: std::result::Result<Vec<u32>, _> =
            s.split('-').map(|part| part.parse::<u32>()).collect();
        match path {
            Ok(path) if !path.is_empty() => Ok(Self { path }),
            _ => Err(Error::InvalidPath(s.to_string())),
        }
    }
}

/// One tree node. The root has layer 0 and no cluster number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub layer: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cluster_number: Option<u32>,
    pub centroid: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub children: Option<Vec<TreeNode>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub items: Option<Vec<ItemId>>,
    /// Set on leaves that exceed `c` items but cannot be split further
    /// (duplicate embeddings).
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub unsplittable: bool,
}

impl TreeNode {
    fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// The hierarchical k-means tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTree {
    pub k: usize,
    pub c: usize,
    pub dim: usize,
    pub root: TreeNode,
    #[serde(skip)]
    leaf_of_item: HashMap<ItemId, SemanticCategoryId>,
}

/// Output of one k-means run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Cluster index per input point; clusters are contiguous from 0 and all
    /// nonempty.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Deterministic given the seed. Fewer points than k yields one singleton
/// cluster per point; empty clusters are repaired each round by stealing the
/// farthest point from the largest cluster. Assignment ties go to the lower
/// cluster index.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> KmeansResult {
    assert!(!points.is_empty(), "kmeans needs at least one point");
    assert!(k >= 1, "k must be >= 1");
    let n = points.len();
    if n <= k {
        return KmeansResult {
            assignments: (0..n).collect(),
            centroids: points.to_vec(),
        };
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut best_d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best_d2.iter().sum();
        let next = if total <= 0.0 {
            // All mass on existing centroids (duplicates); fall back to a
            // uniform draw.
            rng.gen_range(0..n)
        } else {
            WeightedIndex::new(best_d2.iter().map(|d| d.max(0.0)))
                .map(|dist| dist.sample(&mut rng))
                .unwrap_or_else(|_| rng.gen_range(0..n))
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < best_d2[i] {
                best_d2[i] = d;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    for _iter in 0..max_iters.max(1) {
        // Assignment step.
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }

        // Repair empty clusters: steal the farthest point from the largest
        // cluster.
        loop {
            let mut sizes = vec![0usize; k];
            for &a in &assignments {
                sizes[a] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                break;
            };
            let largest = sizes
                .iter()
                .enumerate()
                .max_by_key(|&(i, &s)| (s, std::cmp::Reverse(i)))
                .map(|(i, _)| i)
                .unwrap();
            let victim = assignments
                .iter()
                .enumerate()
                .filter(|&(_, &a)| a == largest)
                .map(|(i, _)| i)
                .max_by(|&i, &j| {
                    let di = sq_dist(&points[i], &centroids[largest]);
                    let dj = sq_dist(&points[j], &centroids[largest]);
                    // Ties go to the lower index.
                    di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
                })
                .unwrap();
            assignments[victim] = empty;
            changed = true;
        }

        // Update step.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
        }

        if !changed {
            break;
        }
    }

    // Contract: contiguous nonempty cluster numbers.
    let mut remap = vec![usize::MAX; k];
    let mut next = 0usize;
    for &a in &assignments {
        if remap[a] == usize::MAX {
            remap[a] = next;
            next += 1;
        }
    }
    // Renumber in order of first appearance of each original index, sorted
    // by original index for stability.
    let mut seen: Vec<usize> = (0..k).filter(|&c| remap[c] != usize::MAX).collect();
    seen.sort_unstable();
    for (new, &old) in seen.iter().enumerate() {
        remap[old] = new;
    }
    let centroids = seen.iter().map(|&c| centroids[c].clone()).collect();
    let assignments = assignments.into_iter().map(|a| remap[a]).collect();
    KmeansResult {
        assignments,
        centroids,
    }
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

fn mean_point(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let dim = points[0].len();
    let mut mean = vec![0.0; dim];
    for &m in members {
        for (s, x) in mean.iter_mut().zip(&points[m]) {
            *s += x;
        }
    }
    for s in mean.iter_mut() {
        *s /= members.len() as f64;
    }
    mean
}

fn all_identical(points: &[Vec<f64>], members: &[usize]) -> bool {
    let first = &points[members[0]];
    members
        .iter()
        .all(|&m| sq_dist(&points[m], first) < 1e-20)
}

fn split_node(
    points: &[Vec<f64>],
    ids: &[ItemId],
    members: Vec<usize>,
    layer: u32,
    cluster_number: Option<u32>,
    k: usize,
    c: usize,
    max_iters: usize,
    seed: u64,
) -> TreeNode {
    let centroid = mean_point(points, &members);
    let make_leaf = |members: Vec<usize>, unsplittable: bool| {
        let mut items: Vec<ItemId> = members.iter().map(|&m| ids[m]).collect();
        items.sort_unstable();
        TreeNode {
            layer,
            cluster_number,
            centroid: centroid.clone(),
            children: None,
            items: Some(items),
            unsplittable,
        }
    };

    // The root always clusters once; deeper nodes only when above the
    // terminal size.
    let must_split = layer == 0 || members.len() > c;
    if !must_split {
        return make_leaf(members, false);
    }
    // Below the root, duplicate embeddings mean k-means cannot make
    // progress; the root still splits (via empty-cluster repair) so every
    // item gets a nonempty path.
    if layer > 0 && all_identical(points, &members) {
        let oversized = members.len() > c;
        return make_leaf(members, oversized);
    }

    let member_points: Vec<Vec<f64>> = members.iter().map(|&m| points[m].clone()).collect();
    let result = kmeans(&member_points, k, max_iters, seed);
    let n_clusters = result.centroids.len();
    if n_clusters < 2 {
        let oversized = members.len() > c;
        return make_leaf(members, oversized);
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (local, &cluster) in result.assignments.iter().enumerate() {
        buckets[cluster].push(members[local]);
    }
    let children = buckets
        .into_iter()
        .enumerate()
        .map(|(r, bucket)| {
            split_node(
                points,
                ids,
                bucket,
                layer + 1,
                Some(r as u32),
                k,
                c,
                max_iters,
                derive_seed(seed, &format!("child-{r}")),
            )
        })
        .collect();
    TreeNode {
        layer,
        cluster_number,
        centroid,
        children: Some(children),
        items: None,
        unsplittable: false,
    }
}

/// Default Lloyd iteration cap.
pub const DEFAULT_KMEANS_ITERS: usize = 50;

/// Builds the category tree over L2-normalized copies of the embeddings.
pub fn build_tree(
    embeddings: &ItemEmbeddingMatrix,
    k: usize,
    c: usize,
    max_iters: usize,
    seed: u64,
) -> Result<CategoryTree> {
    assert!(k >= 2, "k must be >= 2");
    assert!(c >= 1, "c must be >= 1");
    if embeddings.is_empty() {
        return Err(Error::EmptyEmbeddings);
    }
    let ids = embeddings.ids().to_vec();
    let points: Vec<Vec<f64>> = (0..embeddings.len())
        .map(|i| l2_normalize(embeddings.matrix().row(i).to_slice().unwrap()))
        .collect();
    let members: Vec<usize> = (0..points.len()).collect();
    let root = split_node(
        &points,
        &ids,
        members,
        0,
        None,
        k,
        c,
        max_iters,
        derive_seed(seed, "root"),
    );
    let mut tree = CategoryTree {
        k,
        c,
        dim: embeddings.dim(),
        root,
        leaf_of_item: HashMap::new(),
    };
    tree.rebuild_leaf_index();
    Ok(tree)
}

impl CategoryTree {
    fn rebuild_leaf_index(&mut self) {
        fn walk(
            node: &TreeNode,
            path: &mut Vec<u32>,
            out: &mut HashMap<ItemId, SemanticCategoryId>,
        ) {
            if let Some(items) = &node.items {
                let id = SemanticCategoryId::new(path.clone());
                for &item in items {
                    out.insert(item, id.clone());
                }
            }
            if let Some(children) = &node.children {
                for child in children {
                    path.push(child.cluster_number.unwrap_or(0));
                    walk(child, path, out);
                    path.pop();
                }
            }
        }
        let mut index = HashMap::new();
        let mut path = Vec::new();
        walk(&self.root, &mut path, &mut index);
        self.leaf_of_item = index;
    }

    /// Number of items across all leaves.
    pub fn n_items(&self) -> usize {
        self.leaf_of_item.len()
    }

    pub fn contains_item(&self, item: ItemId) -> bool {
        self.leaf_of_item.contains_key(&item)
    }

    /// Full leaf path of an item.
    pub fn leaf_id(&self, item: ItemId) -> Result<&SemanticCategoryId> {
        self.leaf_of_item.get(&item).ok_or(Error::UnknownItem(item))
    }

    fn node_at(&self, path: &[u32]) -> Result<&TreeNode> {
        let mut node = &self.root;
        for &r in path {
            let children = node.children.as_ref().ok_or_else(|| {
                Error::InvalidPath(path.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-"))
            })?;
            node = children
                .iter()
                .find(|ch| ch.cluster_number == Some(r))
                .ok_or_else(|| {
                    Error::InvalidPath(
                        path.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-"),
                    )
                })?;
        }
        Ok(node)
    }

    /// True when the path addresses an existing node.
    pub fn is_valid_path(&self, id: &SemanticCategoryId) -> bool {
        self.node_at(id.path()).is_ok()
    }

    /// All items in the sub-library under the node at `id` (sorted).
    pub fn sub_library(&self, id: &SemanticCategoryId) -> Result<Vec<ItemId>> {
        let node = self.node_at(id.path())?;
        let mut out = Vec::new();
        fn collect(node: &TreeNode, out: &mut Vec<ItemId>) {
            if let Some(items) = &node.items {
                out.extend_from_slice(items);
            }
            if let Some(children) = &node.children {
                for child in children {
                    collect(child, out);
                }
            }
        }
        collect(node, &mut out);
        out.sort_unstable();
        Ok(out)
    }

    /// All leaf paths in the tree, sorted.
    pub fn leaf_paths(&self) -> Vec<SemanticCategoryId> {
        fn walk(node: &TreeNode, path: &mut Vec<u32>, out: &mut Vec<SemanticCategoryId>) {
            if node.is_leaf() && !path.is_empty() {
                out.push(SemanticCategoryId::new(path.clone()));
            }
            if let Some(children) = &node.children {
                for child in children {
                    path.push(child.cluster_number.unwrap_or(0));
                    walk(child, path, out);
                    path.pop();
                }
            }
        }
        let mut out = Vec::new();
        let mut path = Vec::new();
        walk(&self.root, &mut path, &mut out);
        out.sort();
        out
    }

    /// Maximum leaf depth.
    pub fn max_depth(&self) -> usize {
        self.leaf_paths().iter().map(|p| p.len()).max().unwrap_or(0)
    }

    /// Valid decoder continuations after `prefix` (empty slice for the
    /// start): the child cluster numbers at the next layer, and whether the
    /// end token is permitted (it is at every nonempty valid prefix).
    pub fn valid_continuations(&self, prefix: &[u32]) -> Result<Continuations> {
        let node = self.node_at(prefix)?;
        let next = node
            .children
            .as_ref()
            .map(|children| {
                children
                    .iter()
                    .filter_map(|ch| ch.cluster_number)
                    .collect::<Vec<u32>>()
            })
            .unwrap_or_default();
        Ok(Continuations {
            next,
            end_allowed: !prefix.is_empty(),
        })
    }

    /// JSON serialization; byte-identical for identical trees.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let mut tree: CategoryTree = serde_json::from_str(json)?;
        tree.rebuild_leaf_index();
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Test-oriented constructor from a hand-built root.
    pub fn from_root(k: usize, c: usize, dim: usize, root: TreeNode) -> Self {
        let mut tree = CategoryTree {
            k,
            c,
            dim,
            root,
            leaf_of_item: HashMap::new(),
        };
        tree.rebuild_leaf_index();
        tree
    }

    /// (leaf path, size, unsplittable) per leaf, sorted by path.
    pub fn leaf_summaries(&self) -> Vec<(SemanticCategoryId, usize, bool)> {
        fn walk(
            node: &TreeNode,
            path: &mut Vec<u32>,
            out: &mut Vec<(SemanticCategoryId, usize, bool)>,
        ) {
            if let Some(items) = &node.items {
                if !path.is_empty() {
                    out.push((
                        SemanticCategoryId::new(path.clone()),
                        items.len(),
                        node.unsplittable,
                    ));
                }
            }
            if let Some(children) = &node.children {
                for child in children {
                    path.push(child.cluster_number.unwrap_or(0));
                    walk(child, path, out);
                    path.pop();
                }
            }
        }
        let mut out = Vec::new();
        let mut path = Vec::new();
        walk(&self.root, &mut path, &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Valid next tokens at a prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Continuations {
    /// Cluster numbers available at the next layer (empty at a leaf).
    pub next: Vec<u32>,
    /// Whether the end token may be emitted here.
    pub end_allowed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_corpus, SynthParams};
    use crate::measure::adjusted_rand_index;

    fn matrix(rows: Vec<(ItemId, Vec<f64>)>) -> ItemEmbeddingMatrix {
        let dim = rows[0].1.len();
        ItemEmbeddingMatrix::from_vectors(dim, rows)
    }

    #[test]
    fn kmeans_separates_two_far_groups() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ];
        let result = kmeans(&points, 2, 50, 1);
        assert_eq!(result.assignments[0], result.assignments[1]);
        assert_eq!(result.assignments[2], result.assignments[3]);
        assert_ne!(result.assignments[0], result.assignments[2]);
        let mut centroids = result.centroids.clone();
        centroids.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(centroids[0], vec![0.0, 0.5]);
        assert_eq!(centroids[1], vec![10.0, 10.5]);
    }

    #[test]
    fn kmeans_k1_returns_mean() {
        let points = vec![vec![1.0, 0.0], vec![3.0, 2.0]];
        let result = kmeans(&points, 1, 50, 0);
        assert_eq!(result.centroids.len(), 1);
        assert_eq!(result.centroids[0], vec![2.0, 1.0]);
        assert_eq!(result.assignments, vec![0, 0]);
    }

    #[test]
    fn kmeans_more_clusters_than_points_gives_singletons() {
        let points = vec![vec![0.0], vec![1.0], vec![2.0]];
        let result = kmeans(&points, 5, 50, 0);
        assert_eq!(result.assignments, vec![0, 1, 2]);
        assert_eq!(result.centroids.len(), 3);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let points: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i % 7) as f64, (i % 11) as f64])
            .collect();
        let a = kmeans(&points, 4, 50, 9);
        let b = kmeans(&points, 4, 50, 9);
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }

    /// Hand-traced fixture: five points in two far groups of sizes 3 and 2,
    /// k=2, c=2. The size-3 group exceeds c and is split again, so the tree
    /// has a root with 2 children and 3 leaves total.
    #[test]
    fn five_point_fixture_matches_hand_trace() {
        let emb = matrix(vec![
            (1, vec![0.0, 1.0]),
            (2, vec![0.05, 1.0]),
            (3, vec![-0.05, 1.0]),
            (10, vec![1.0, 0.0]),
            (11, vec![1.0, 0.05]),
        ]);
        let tree = build_tree(&emb, 2, 2, 50, 7).unwrap();
        let children = tree.root.children.as_ref().unwrap();
        assert_eq!(children.len(), 2);
        let leaves = tree.leaf_summaries();
        assert_eq!(leaves.len(), 3, "{leaves:?}");
        let sizes: Vec<usize> = leaves.iter().map(|(_, s, _)| *s).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 5);
        assert!(sizes.iter().all(|&s| s <= 2));
        // The pair group must have stayed a single leaf at layer 1.
        assert!(leaves.iter().any(|(p, s, _)| p.len() == 1 && *s == 2));
    }

    #[test]
    fn small_clusters_stop_at_depth_one() {
        let emb = matrix(vec![
            (1, vec![0.0, 1.0]),
            (2, vec![0.02, 1.0]),
            (10, vec![1.0, 0.0]),
            (11, vec![1.0, 0.02]),
        ]);
        let tree = build_tree(&emb, 2, 2, 50, 3).unwrap();
        let leaves = tree.leaf_summaries();
        assert_eq!(leaves.len(), 2);
        assert!(leaves.iter().all(|(p, _, _)| p.len() == 1));
    }

    #[test]
    fn empty_matrix_rejected() {
        let emb = ItemEmbeddingMatrix::from_vectors(2, Vec::<(ItemId, Vec<f64>)>::new());
        assert!(matches!(
            build_tree(&emb, 2, 2, 50, 0),
            Err(Error::EmptyEmbeddings)
        ));
    }

    #[test]
    fn duplicate_embeddings_become_unsplittable_leaf() {
        let rows: Vec<(ItemId, Vec<f64>)> = (0..10).map(|i| (i, vec![1.0, 0.0])).collect();
        let emb = matrix(rows);
        let tree = build_tree(&emb, 2, 3, 50, 5).unwrap();
        let leaves = tree.leaf_summaries();
        assert!(
            leaves.iter().any(|(_, s, unsplit)| *unsplit && *s > 3),
            "{leaves:?}"
        );
        let total: usize = leaves.iter().map(|(_, s, _)| *s).sum();
        assert_eq!(total, 10);
    }

    fn hand_tree() -> CategoryTree {
        // Root with children 0..=2; child 2 has children {4}; child 2-4 has
        // children {1, 4}; suitable for exercising the paper-style path
        // 2-4-4.
        let leaf = |layer, nr, items: Vec<ItemId>| TreeNode {
            layer,
            cluster_number: Some(nr),
            centroid: vec![0.0],
            children: None,
            items: Some(items),
            unsplittable: false,
        };
        let root = TreeNode {
            layer: 0,
            cluster_number: None,
            centroid: vec![0.0],
            children: Some(vec![
                leaf(1, 0, vec![1, 2]),
                leaf(1, 1, vec![3]),
                TreeNode {
                    layer: 1,
                    cluster_number: Some(2),
                    centroid: vec![0.0],
                    children: Some(vec![TreeNode {
                        layer: 2,
                        cluster_number: Some(4),
                        centroid: vec![0.0],
                        children: Some(vec![leaf(3, 1, vec![7]), leaf(3, 4, vec![8, 9])]),
                        items: None,
                        unsplittable: false,
                    }]),
                    items: None,
                    unsplittable: false,
                },
            ]),
            items: None,
            unsplittable: false,
        };
        CategoryTree::from_root(6, 2, 1, root)
    }

    #[test]
    fn leaf_id_returns_full_path() {
        let tree = hand_tree();
        assert_eq!(tree.leaf_id(8).unwrap().path(), &[2, 4, 4]);
        assert_eq!(tree.leaf_id(8).unwrap().to_string(), "2-4-4");
        assert_eq!(tree.leaf_id(1).unwrap().path(), &[0]);
        assert!(matches!(
            tree.leaf_id(999_999),
            Err(Error::UnknownItem(999_999))
        ));
    }

    #[test]
    fn sub_library_unions_descendant_leaves() {
        let tree = hand_tree();
        let under_2 = tree.sub_library(&SemanticCategoryId::new(vec![2])).unwrap();
        assert_eq!(under_2, vec![7, 8, 9]);
        let leaf = tree
            .sub_library(&SemanticCategoryId::new(vec![2, 4, 4]))
            .unwrap();
        assert_eq!(leaf, vec![8, 9]);
        assert!(tree
            .sub_library(&SemanticCategoryId::new(vec![5]))
            .is_err());

        // Depth-1 sub-libraries partition the corpus.
        let mut total = 0;
        for r in [0u32, 1, 2] {
            total += tree
                .sub_library(&SemanticCategoryId::new(vec![r]))
                .unwrap()
                .len();
        }
        assert_eq!(total, tree.n_items());
    }

    #[test]
    fn continuations_follow_trie_rules() {
        let tree = hand_tree();
        let start = tree.valid_continuations(&[]).unwrap();
        assert_eq!(start.next, vec![0, 1, 2]);
        assert!(!start.end_allowed);

        let at_leaf = tree.valid_continuations(&[2, 4, 4]).unwrap();
        assert!(at_leaf.next.is_empty());
        assert!(at_leaf.end_allowed);

        let internal = tree.valid_continuations(&[2, 4]).unwrap();
        assert_eq!(internal.next, vec![1, 4]);
        assert!(internal.end_allowed);

        assert!(tree.valid_continuations(&[9]).is_err());
    }

    #[test]
    fn tree_build_is_deterministic_and_serialization_byte_identical() {
        let corpus = synth_corpus(&SynthParams {
            levels: 2,
            branching: 3,
            items_per_leaf: 6,
            users: 10,
            interests_per_user: 2,
            seq_len: 10,
            noise_frac: 0.0,
            seed: 13,
        });
        let emb = ItemEmbeddingMatrix::from_vectors(
            crate::data::synth::PLANTED_DIM,
            corpus.planted_embeddings.clone(),
        );
        let a = build_tree(&emb, 3, 6, 50, 99).unwrap();
        let b = build_tree(&emb, 3, 6, 50, 99).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

        let roundtrip = CategoryTree::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(roundtrip.leaf_summaries(), a.leaf_summaries());
        assert_eq!(roundtrip.leaf_id(5).unwrap(), a.leaf_id(5).unwrap());
    }

    #[test]
    fn planted_hierarchy_recovered_with_high_ari() {
        let corpus = synth_corpus(&SynthParams {
            levels: 2,
            branching: 4,
            items_per_leaf: 20,
            users: 10,
            interests_per_user: 2,
            seq_len: 10,
            noise_frac: 0.0,
            seed: 17,
        });
        let emb = ItemEmbeddingMatrix::from_vectors(
            crate::data::synth::PLANTED_DIM,
            corpus.planted_embeddings.clone(),
        );
        let tree = build_tree(&emb, 4, 20, 50, 31).unwrap();
        let planted = corpus.leaf_labels();
        let mut recovered = Vec::new();
        let leaf_paths = tree.leaf_paths();
        for &item in emb.ids() {
            let path = tree.leaf_id(item).unwrap();
            recovered.push(leaf_paths.iter().position(|p| p == path).unwrap());
        }
        let ari = adjusted_rand_index(&planted, &recovered);
        assert!(ari >= 0.9, "leaf ARI {ari}");
    }

    #[test]
    fn leaf_sizes_respect_terminal_bound() {
        let corpus = synth_corpus(&SynthParams {
            levels: 2,
            branching: 3,
            items_per_leaf: 15,
            users: 10,
            interests_per_user: 1,
            seq_len: 10,
            noise_frac: 0.0,
            seed: 23,
        });
        let emb = ItemEmbeddingMatrix::from_vectors(
            crate::data::synth::PLANTED_DIM,
            corpus.planted_embeddings.clone(),
        );
        let tree = build_tree(&emb, 3, 15, 50, 11).unwrap();
        for (path, size, unsplittable) in tree.leaf_summaries() {
            assert!(
                unsplittable || size <= 15,
                "leaf {path} has {size} items without unsplittable flag"
            );
        }
        let total: usize = tree.leaf_summaries().iter().map(|(_, s, _)| *s).sum();
        assert_eq!(total, emb.len());
    }

    #[test]
    fn category_id_parses_and_displays() {
        let id: SemanticCategoryId = "2-4-4".parse().unwrap();
        assert_eq!(id.path(), &[2, 4, 4]);
        assert_eq!(id.to_string(), "2-4-4");
        assert!("".parse::<SemanticCategoryId>().is_err());
        assert!("2-x".parse::<SemanticCategoryId>().is_err());
        assert!(SemanticCategoryId::new(vec![2, 4]).is_prefix_of(&id));
        assert!(!id.is_prefix_of(&SemanticCategoryId::new(vec![2, 4])));
    }
}
