//! The refined multi-interest retrieval stage.
//!
//! A user's lifelong behavior is split per generated interest into a
//! user -> category -> items layout; each category list feeds the user tower
//! to produce one embedding per interest, retrieval runs per category over
//! the matching sub-library only, and per-category results merge under
//! quotas proportional to the beam probabilities from the mining stage.
//! Training uses a logistic loss where negatives come from the positive's
//! own sub-library, which makes them mostly hard negatives.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::miner::{BeamResult, ItemVocab};
use crate::nn::{checkpoint, component_rng, randn, Adam, GradStore, Graph, Mat, NodeId, ParamSet};
use crate::taxonomy::{CategoryTree, SemanticCategoryId};
use crate::{ItemId, UserId};

/// Items fed to the user tower are capped to this many most-recent entries.
pub const TOWER_MAX_ITEMS: usize = 50;

/// user -> category -> time-ordered behavior items.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KkvStore {
    pub entries: BTreeMap<UserId, BTreeMap<SemanticCategoryId, Vec<ItemId>>>,
}

impl KkvStore {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Splits one user's behavior per generated interest: each interest keeps
/// the sub-list of items whose leaf path extends it (order preserved);
/// items matching no interest are dropped, and interests matching no items
/// are removed. Items without a leaf (outside the catalog) are skipped.
pub fn split_behaviors(
    items: &[ItemId],
    interests: &[BeamResult],
    tree: &CategoryTree,
) -> BTreeMap<SemanticCategoryId, Vec<ItemId>> {
    let mut out: BTreeMap<SemanticCategoryId, Vec<ItemId>> = BTreeMap::new();
    for interest in interests {
        let mut matched = Vec::new();
        for &item in items {
            if let Ok(leaf) = tree.leaf_id(item) {
                if interest.path.is_prefix_of(leaf) {
                    matched.push(item);
                }
            }
        }
        if !matched.is_empty() {
            out.insert(interest.path.clone(), matched);
        }
    }
    out
}

/// Tower widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalHyper {
    pub d_emb: usize,
}

impl Default for RetrievalHyper {
    fn default() -> Self {
        Self { d_emb: 64 }
    }
}

/// Training-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub negatives_per_positive: usize,
    /// Positive draws per (user, category) list per epoch.
    pub max_positives_per_category: usize,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            negatives_per_positive: 5,
            max_positives_per_category: 10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TowerSlots {
    embed: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Two-tower scoring model. The towers share no parameters, including their
/// item-embedding tables.
#[derive(Debug, Clone)]
pub struct RetrievalModel {
    pub hyper: RetrievalHyper,
    pub item_vocab: ItemVocab,
    params: ParamSet,
    user: TowerSlots,
    item: TowerSlots,
}

const INIT_STD: f64 = 0.05;

fn register_tower(
    params: &mut ParamSet,
    prefix: &str,
    vocab: usize,
    d: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    zero_final: bool,
) -> TowerSlots {
    let embed = params.register(&format!("{prefix}.embed"), randn(vocab, d, INIT_STD, rng));
    let w1 = params.register(&format!("{prefix}.w1"), randn(d, d, INIT_STD, rng));
    let b1 = params.register(&format!("{prefix}.b1"), Array2::zeros((1, d)));
    let w2 = if zero_final {
        params.register(&format!("{prefix}.w2"), Array2::zeros((d, d)))
    } else {
        params.register(&format!("{prefix}.w2"), randn(d, d, INIT_STD, rng))
    };
    let b2 = params.register(&format!("{prefix}.b2"), Array2::zeros((1, d)));
    TowerSlots {
        embed,
        w1,
        b1,
        w2,
        b2,
    }
}

/// One training instance: a tower input prefix, the held-out positive, and
/// sampled in-domain negatives.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub input_items: Vec<ItemId>,
    pub positive: ItemId,
    pub negatives: Vec<ItemId>,
}

/// Training diagnostics.
#[derive(Debug, Clone, Default)]
pub struct RetrievalTrainStats {
    /// Mean per-instance loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// (user, category) pairs skipped because the sub-library minus the
    /// user's items was empty.
    pub skipped_pairs: usize,
}

impl RetrievalModel {
    pub fn new(hyper: RetrievalHyper, item_vocab: ItemVocab, seed: u64, zero_final: bool) -> Self {
        let d = hyper.d_emb;
        let mut rng = component_rng(seed, "retrieval-init");
        let mut params = ParamSet::new();
        let user = register_tower(&mut params, "user", item_vocab.size(), d, &mut rng, zero_final);
        let item = register_tower(&mut params, "item", item_vocab.size(), d, &mut rng, zero_final);
        Self {
            hyper,
            item_vocab,
            params,
            user,
            item,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn tokens(&self, items: &[ItemId]) -> Result<Vec<usize>> {
        items.iter().map(|&i| self.item_vocab.token(i)).collect()
    }

    fn tower_forward(
        &self,
        graph: &mut Graph,
        pids: &[NodeId],
        slots: &TowerSlots,
        rows: NodeId,
    ) -> NodeId {
        let h = graph.matmul(rows, pids[slots.w1]);
        let h = graph.add_row(h, pids[slots.b1]);
        let h = graph.gelu(h);
        let h = graph.matmul(h, pids[slots.w2]);
        graph.add_row(h, pids[slots.b2])
    }

    /// User tower: mean-pooled item embeddings through a two-layer MLP.
    /// Consumes at most the last [`TOWER_MAX_ITEMS`] items.
    pub fn user_embedding(&self, items: &[ItemId]) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Err(Error::EmptyInput);
        }
        let start = items.len().saturating_sub(TOWER_MAX_ITEMS);
        let tokens = self.tokens(&items[start..])?;
        let mut graph = Graph::new();
        let pids = insert_param_leaves(&mut graph, &self.params);
        let rows = graph.gather(pids[self.user.embed], tokens);
        let pooled = graph.mean_rows(rows);
        let out = self.tower_forward(&mut graph, &pids, &self.user, pooled);
        Ok(graph.value(out).row(0).to_vec())
    }

    /// Item tower embedding.
    pub fn item_embedding(&self, item: ItemId) -> Result<Vec<f64>> {
        let tokens = self.tokens(&[item])?;
        let mut graph = Graph::new();
        let pids = insert_param_leaves(&mut graph, &self.params);
        let rows = graph.gather(pids[self.item.embed], tokens);
        let out = self.tower_forward(&mut graph, &pids, &self.item, rows);
        Ok(graph.value(out).row(0).to_vec())
    }

    /// Loss of one instance:
    /// `-log sigmoid(r+) - mean over negatives of log(1 - sigmoid(r-))`.
    pub fn instance_loss(&self, instance: &TrainInstance) -> Result<f64> {
        let (loss, _, _) = self.instance_loss_and_grads(instance, 0.0, false)?;
        Ok(loss)
    }

    /// Loss plus gradients scaled by `grad_scale` (skipped when
    /// `with_grads` is false).
    #[allow(clippy::type_complexity)]
    pub fn instance_loss_and_grads(
        &self,
        instance: &TrainInstance,
        grad_scale: f64,
        with_grads: bool,
    ) -> Result<(f64, Vec<(usize, Mat)>, Vec<(usize, Vec<usize>, Mat)>)> {
        if instance.input_items.is_empty() {
            return Err(Error::EmptyInput);
        }
        let start = instance.input_items.len().saturating_sub(TOWER_MAX_ITEMS);
        let input_tokens = self.tokens(&instance.input_items[start..])?;
        let mut cand = vec![instance.positive];
        cand.extend_from_slice(&instance.negatives);
        let cand_tokens = self.tokens(&cand)?;

        let mut graph = Graph::new();
        let pids = insert_param_leaves(&mut graph, &self.params);
        let rows = graph.gather(pids[self.user.embed], input_tokens);
        let pooled = graph.mean_rows(rows);
        let user_vec = self.tower_forward(&mut graph, &pids, &self.user, pooled);

        let item_rows = graph.gather(pids[self.item.embed], cand_tokens);
        let item_vecs = self.tower_forward(&mut graph, &pids, &self.item, item_rows);

        let user_t = graph.transpose(user_vec);
        let scores = graph.matmul(item_vecs, user_t);
        let pos = graph.slice_rows(scores, 0, 1);
        let neg = graph.slice_rows(scores, 1, instance.negatives.len());
        let loss_node = graph.logistic_pair_loss(pos, neg);
        let loss = graph.value(loss_node)[(0, 0)];
        if !with_grads {
            return Ok((loss, Vec::new(), Vec::new()));
        }
        graph.backward(loss_node, grad_scale);
        let mut dense = Vec::new();
        for (slot, &pid) in pids.iter().enumerate() {
            if let Some(g) = graph.grad_ref(pid) {
                dense.push((slot, g.clone()));
            }
        }
        let sparse = graph
            .take_sparse_grads()
            .into_iter()
            .map(|sg| (sg.table.index(), sg.rows, sg.grad))
            .collect();
        Ok((loss, dense, sparse))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&RetrievalHeader {
            hyper: self.hyper.clone(),
            items: self.item_vocab.items().to_vec(),
        })?;
        checkpoint::save(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::load(path)?;
        let header: RetrievalHeader = serde_json::from_str(&header)?;
        let mut model =
            RetrievalModel::new(header.hyper, ItemVocab::from_items(header.items), 0, false);
        checkpoint::restore_into(&mut model.params, tensors)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct RetrievalHeader {
    hyper: RetrievalHyper,
    items: Vec<ItemId>,
}

fn insert_param_leaves(graph: &mut Graph, params: &ParamSet) -> Vec<NodeId> {
    let pids: Vec<NodeId> = (0..params.len())
        .map(|s| graph.shared_leaf(params.shared(s)))
        .collect();
    debug_assert!(pids.iter().enumerate().all(|(i, p)| p.index() == i));
    pids
}

/// Samples one negative uniformly from `domain` excluding the user's items;
/// `None` when the complement is empty.
fn sample_negative(
    domain: &[ItemId],
    user_items: &HashSet<ItemId>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<ItemId> {
    // Exactness matters more than speed at this scale: when rejection keeps
    // missing, fall back to scanning the complement.
    for _ in 0..64 {
        let cand = domain[rng.gen_range(0..domain.len())];
        if !user_items.contains(&cand) {
            return Some(cand);
        }
    }
    let complement: Vec<ItemId> = domain
        .iter()
        .copied()
        .filter(|i| !user_items.contains(i))
        .collect();
    if complement.is_empty() {
        None
    } else {
        Some(complement[rng.gen_range(0..complement.len())])
    }
}

/// One trainable behavior list: the time-ordered items plus the negative
/// domain they score against.
struct TrainList {
    items: Vec<ItemId>,
    domain: Arc<Vec<ItemId>>,
    user_items: Arc<HashSet<ItemId>>,
}

fn train_tower_lists(
    model: &mut RetrievalModel,
    lists: &[TrainList],
    cfg: &RetrievalTrainConfig,
    seed: u64,
    context: &str,
) -> Result<RetrievalTrainStats> {
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut grads = GradStore::zeros_like(&model.params);
    let mut rng = component_rng(seed, "retrieval-epochs");
    let mut stats = RetrievalTrainStats::default();

    for epoch in 0..cfg.epochs {
        // Draw positives and negatives sequentially (deterministic), then
        // process batches in parallel.
        let mut instances: Vec<TrainInstance> = Vec::new();
        for list in lists {
            if list.domain.iter().all(|i| list.user_items.contains(i)) {
                if epoch == 0 {
                    stats.skipped_pairs += 1;
                }
                continue;
            }
            if list.items.len() < 2 {
                continue;
            }
            let eligible = list.items.len() - 1;
            let take = cfg.max_positives_per_category.min(eligible);
            let picked = rand::seq::index::sample(&mut rng, eligible, take);
            let mut positions: Vec<usize> = picked.iter().map(|i| i + 1).collect();
            positions.sort_unstable();
            for p in positions {
                let mut negatives = Vec::with_capacity(cfg.negatives_per_positive);
                for _ in 0..cfg.negatives_per_positive {
                    match sample_negative(&list.domain, &list.user_items, &mut rng) {
                        Some(neg) => negatives.push(neg),
                        None => break,
                    }
                }
                if negatives.len() < cfg.negatives_per_positive {
                    continue;
                }
                instances.push(TrainInstance {
                    input_items: list.items[..p].to_vec(),
                    positive: list.items[p],
                    negatives,
                });
            }
        }
        if instances.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no trainable positives ({context})"
            )));
        }
        instances.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in instances.chunks(cfg.batch_size.max(1)) {
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<_> = batch
                .par_iter()
                .map(|inst| model.instance_loss_and_grads(inst, scale, true))
                .collect::<Result<_>>()?;
            grads.zero();
            for (loss, dense, sparse) in results {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        context: format!("{context} epoch {epoch}"),
                    });
                }
                epoch_loss += loss;
                for (slot, g) in dense {
                    grads.add_dense(slot, &g, 1.0);
                }
                for (slot, rows, g) in sparse {
                    grads.add_rows(slot, &rows, &g, 1.0);
                }
            }
            adam.step(&mut model.params, &grads);
        }
        stats.epoch_losses.push(epoch_loss / instances.len() as f64);
    }
    Ok(stats)
}

/// Trains the refined per-category model: each (user, category) list yields
/// autoregressive positives (every item with its predecessors as tower
/// input, capped per epoch) and negatives drawn uniformly from the
/// category's sub-library minus the user's items.
pub fn train_retrieval(
    kkv: &KkvStore,
    tree: &CategoryTree,
    item_vocab: ItemVocab,
    hyper: RetrievalHyper,
    cfg: &RetrievalTrainConfig,
    seed: u64,
) -> Result<(RetrievalModel, RetrievalTrainStats)> {
    if kkv.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model = RetrievalModel::new(hyper, item_vocab, seed, false);
    let mut sub_cache: HashMap<SemanticCategoryId, Arc<Vec<ItemId>>> = HashMap::new();
    let mut lists = Vec::new();
    for cats in kkv.entries.values() {
        let user_items: Arc<HashSet<ItemId>> =
            Arc::new(cats.values().flatten().copied().collect());
        for (cat, items) in cats {
            let domain = match sub_cache.get(cat) {
                Some(d) => Arc::clone(d),
                None => {
                    let d = Arc::new(tree.sub_library(cat)?);
                    sub_cache.insert(cat.clone(), Arc::clone(&d));
                    d
                }
            };
            lists.push(TrainList {
                items: items.clone(),
                domain,
                user_items: Arc::clone(&user_items),
            });
        }
    }
    let stats = train_tower_lists(&mut model, &lists, cfg, seed, "retrieval")?;
    Ok((model, stats))
}

/// Trains the unified single-embedding baseline: one whole-history list per
/// user, negatives uniform over the whole catalog minus the user's items.
pub fn train_unified_baseline(
    sequences: &[(UserId, Vec<ItemId>)],
    catalog: &[ItemId],
    item_vocab: ItemVocab,
    hyper: RetrievalHyper,
    cfg: &RetrievalTrainConfig,
    seed: u64,
) -> Result<(RetrievalModel, RetrievalTrainStats)> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model = RetrievalModel::new(hyper, item_vocab, seed, false);
    let domain = Arc::new(catalog.to_vec());
    let lists: Vec<TrainList> = sequences
        .iter()
        .map(|(_, items)| TrainList {
            items: items.clone(),
            domain: Arc::clone(&domain),
            user_items: Arc::new(items.iter().copied().collect()),
        })
        .collect();
    let stats = train_tower_lists(&mut model, &lists, cfg, seed, "baseline")?;
    Ok((model, stats))
}

/// An exact inner-product index over one sub-library (or the whole catalog
/// when `category` is `None`).
#[derive(Debug, Clone)]
pub struct SubLibraryIndex {
    pub category: Option<SemanticCategoryId>,
    pub ids: Vec<ItemId>,
    pub vectors: Vec<Vec<f64>>,
}

impl SubLibraryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embeds every item of `sub_library(tree, category)` with the item tower.
pub fn build_index(
    tree: &CategoryTree,
    category: &SemanticCategoryId,
    model: &RetrievalModel,
) -> Result<SubLibraryIndex> {
    let ids = tree.sub_library(category)?;
    if ids.is_empty() {
        return Err(Error::EmptySubLibrary(category.to_string()));
    }
    let vectors = embed_all(&ids, model)?;
    Ok(SubLibraryIndex {
        category: Some(category.clone()),
        ids,
        vectors,
    })
}

/// Whole-catalog index for the fallback path, the whole-library ablation,
/// and the unified baseline.
pub fn build_whole_index(catalog: &[ItemId], model: &RetrievalModel) -> Result<SubLibraryIndex> {
    let mut ids = catalog.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::EmptySubLibrary("whole library".to_string()));
    }
    let vectors = embed_all(&ids, model)?;
    Ok(SubLibraryIndex {
        category: None,
        ids,
        vectors,
    })
}

fn embed_all(ids: &[ItemId], model: &RetrievalModel) -> Result<Vec<Vec<f64>>> {
    ids.par_iter().map(|&id| model.item_embedding(id)).collect()
}

/// Exact top-k by inner product; ties broken by smaller item id. Returns the
/// whole ranking when `m` exceeds the index size.
pub fn topk(index: &SubLibraryIndex, query: &[f64], m: usize) -> Vec<(ItemId, f64)> {
    assert!(m >= 1, "m must be >= 1");
    let mut scored: Vec<(ItemId, f64)> = index
        .ids
        .iter()
        .zip(&index.vectors)
        .map(|(&id, v)| {
            let score: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            (id, score)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(m);
    scored
}

/// Ablation switches; both off is the full refined pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RetrievalFlags {
    /// Search the whole library instead of each interest's sub-library.
    pub whole_library: bool,
    /// Build every per-category query from the unsplit history instead of
    /// the category's own item list.
    pub unified_sequence: bool,
}

/// Final merged retrieval for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
    /// Winning category per retrieved item (`*` on the fallback path).
    pub categories: Vec<String>,
    pub fallback: bool,
}

/// Looks up per-category indexes prepared ahead of retrieval.
pub trait IndexProvider: Sync {
    fn category_index(&self, category: &SemanticCategoryId) -> Option<&SubLibraryIndex>;
    fn whole_index(&self) -> &SubLibraryIndex;
}

/// Plain map-backed provider.
pub struct IndexSet {
    pub per_category: HashMap<SemanticCategoryId, SubLibraryIndex>,
    pub whole: SubLibraryIndex,
}

impl IndexProvider for IndexSet {
    fn category_index(&self, category: &SemanticCategoryId) -> Option<&SubLibraryIndex> {
        self.per_category.get(category)
    }

    fn whole_index(&self) -> &SubLibraryIndex {
        &self.whole
    }
}

impl IndexSet {
    /// Builds indexes for every category in `categories` plus the whole
    /// catalog.
    pub fn build(
        tree: &CategoryTree,
        categories: &[SemanticCategoryId],
        catalog: &[ItemId],
        model: &RetrievalModel,
    ) -> Result<Self> {
        let mut unique: Vec<&SemanticCategoryId> = categories.iter().collect();
        unique.sort();
        unique.dedup();
        let built: Vec<(SemanticCategoryId, SubLibraryIndex)> = unique
            .par_iter()
            .map(|cat| build_index(tree, cat, model).map(|idx| ((*cat).clone(), idx)))
            .collect::<Result<_>>()?;
        Ok(Self {
            per_category: built.into_iter().collect(),
            whole: build_whole_index(catalog, model)?,
        })
    }
}

/// Proportional quota split: `floor(m_total * p_n)` per category with the
/// remainder handed out one slot at a time in descending probability.
pub fn assign_quotas(probs: &[f64], m_total: usize) -> Vec<usize> {
    let mut quotas: Vec<usize> = probs
        .iter()
        .map(|p| (m_total as f64 * p) as usize)
        .collect();
    let assigned: usize = quotas.iter().sum();
    let n = quotas.len();
    for i in 0..m_total.saturating_sub(assigned) {
        quotas[i % n] += 1;
    }
    quotas
}

/// Retrieves up to `m_total` items for one user by querying each interest
/// category under its quota and merging.
///
/// History items never appear in the output; duplicates across overlapping
/// categories keep their highest score; shortfalls are backfilled from the
/// highest-probability category's remaining candidates (then the next, when
/// exhausted). With no usable category the whole library is searched with a
/// unified-history embedding and the result is flagged as a fallback.
pub fn retrieve_user(
    history: &[ItemId],
    kkv: &BTreeMap<SemanticCategoryId, Vec<ItemId>>,
    beams: &[BeamResult],
    model: &RetrievalModel,
    indexes: &dyn IndexProvider,
    m_total: usize,
    flags: RetrievalFlags,
) -> Result<Retrieved> {
    assert!(m_total >= 1, "m_total must be >= 1");
    let history_set: HashSet<ItemId> = history.iter().copied().collect();

    // Interests that retained items, in descending beam probability.
    let mut cats: Vec<(&SemanticCategoryId, f64)> = beams
        .iter()
        .filter(|b| kkv.contains_key(&b.path))
        .map(|b| (&b.path, b.log_prob))
        .collect();
    cats.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
    cats.dedup_by(|a, b| a.0 == b.0);

    if cats.is_empty() {
        let query = model.user_embedding(history)?;
        let ranked = topk(indexes.whole_index(), &query, indexes.whole_index().len());
        let mut items = Vec::new();
        let mut scores = Vec::new();
        let mut categories = Vec::new();
        for (id, score) in ranked {
            if history_set.contains(&id) {
                continue;
            }
            items.push(id);
            scores.push(score);
            categories.push("*".to_string());
            if items.len() == m_total {
                break;
            }
        }
        return Ok(Retrieved {
            items,
            scores,
            categories,
            fallback: true,
        });
    }

    // Softmax over beam log-probabilities.
    let max_lp = cats.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cats.iter().map(|c| (c.1 - max_lp).exp()).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let quotas = assign_quotas(&probs, m_total);

    // Per-category candidate lists (history excluded, full ranking).
    let mut candidate_lists: Vec<Vec<(ItemId, f64)>> = Vec::with_capacity(cats.len());
    for (cat, _) in &cats {
        let query = if flags.unified_sequence {
            model.user_embedding(history)?
        } else {
            model.user_embedding(&kkv[*cat])?
        };
        let index = if flags.whole_library {
            indexes.whole_index()
        } else {
            indexes
                .category_index(cat)
                .ok_or_else(|| Error::InvalidPath(cat.to_string()))?
        };
        let ranked = topk(index, &query, index.len());
        candidate_lists.push(
            ranked
                .into_iter()
                .filter(|(id, _)| !history_set.contains(id))
                .collect(),
        );
    }

    // Quota take, then merge keeping each item's best score.
    let mut merged: HashMap<ItemId, (f64, usize)> = HashMap::new();
    let mut taken: Vec<usize> = vec![0; cats.len()];
    for (ci, list) in candidate_lists.iter().enumerate() {
        let quota = quotas[ci].min(list.len());
        taken[ci] = quota;
        for &(id, score) in &list[..quota] {
            match merged.get(&id) {
                Some(&(best, _)) if best >= score => {}
                _ => {
                    merged.insert(id, (score, ci));
                }
            }
        }
    }

    // Backfill shortfalls from the highest-probability category onward.
    for (ci, list) in candidate_lists.iter().enumerate() {
        if merged.len() >= m_total {
            break;
        }
        for &(id, score) in &list[taken[ci]..] {
            if merged.len() >= m_total {
                break;
            }
            merged.entry(id).or_insert((score, ci));
        }
    }

    let mut ranked: Vec<(ItemId, f64, usize)> = merged
        .into_iter()
        .map(|(id, (score, ci))| (id, score, ci))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.truncate(m_total);
    Ok(Retrieved {
        items: ranked.iter().map(|r| r.0).collect(),
        scores: ranked.iter().map(|r| r.1).collect(),
        categories: ranked.iter().map(|r| cats[r.2].0.to_string()).collect(),
        fallback: false,
    })
}
