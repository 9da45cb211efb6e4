//! The hierarchical interest miner: a transformer encoder-decoder that reads
//! a user's behavior window and generates semantic category ids, decoded with
//! tree-constrained beam search.
//!
//! The encoder vocabulary is the item catalog (plus a reserved pad token);
//! the decoder vocabulary is position-distinct category tokens — the same
//! cluster number at different layers is a different token — plus BOS and
//! END. The two embedding spaces are never shared. END is a legal
//! continuation at every nonempty tree prefix, so the model can stop early
//! at an internal circle instead of always descending to a leaf.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encoder_window, UserSequence};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, component_rng, randn, Adam, GradStore, Graph, Mat, NodeId, ParamSet};
use crate::taxonomy::{CategoryTree, SemanticCategoryId};
use crate::ItemId;

/// Decoder token layout: BOS, END, then one token per (layer, cluster) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderVocab {
    pub k: usize,
    pub max_depth: usize,
}

pub const BOS: usize = 0;
pub const END: usize = 1;

impl DecoderVocab {
    pub fn new(k: usize, max_depth: usize) -> Self {
        assert!(k >= 1 && max_depth >= 1);
        Self { k, max_depth }
    }

    pub fn for_tree(tree: &CategoryTree) -> Self {
        Self::new(tree.k, tree.max_depth().max(1))
    }

    pub fn size(&self) -> usize {
        2 + self.max_depth * self.k
    }

    /// Token for cluster `r` at 1-based layer `depth`.
    pub fn token(&self, depth: usize, r: u32) -> usize {
        assert!(
            depth >= 1 && depth <= self.max_depth,
            "depth {depth} out of range"
        );
        assert!((r as usize) < self.k, "cluster {r} out of range");
        2 + (depth - 1) * self.k + r as usize
    }

    /// Inverse of [`Self::token`] for category tokens.
    pub fn layer_cluster(&self, token: usize) -> Option<(usize, u32)> {
        if token < 2 || token >= self.size() {
            return None;
        }
        let idx = token - 2;
        Some((idx / self.k + 1, (idx % self.k) as u32))
    }

    /// `[BOS, tokens along the path, END]`.
    pub fn path_to_target(&self, path: &[u32]) -> Vec<usize> {
        let mut out = Vec::with_capacity(path.len() + 2);
        out.push(BOS);
        for (i, &r) in path.iter().enumerate() {
            out.push(self.token(i + 1, r));
        }
        out.push(END);
        out
    }
}

/// Encoder vocabulary: catalog items plus a reserved pad slot at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemVocab {
    items: Vec<ItemId>,
    index: BTreeMap<ItemId, usize>,
}

impl ItemVocab {
    pub fn from_items<I: IntoIterator<Item = ItemId>>(items: I) -> Self {
        let mut items: Vec<ItemId> = items.into_iter().collect();
        items.sort_unstable();
        items.dedup();
        let index = items
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i + 1))
            .collect();
        Self { items, index }
    }

    /// Table size including the pad slot.
    pub fn size(&self) -> usize {
        self.items.len() + 1
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.index.contains_key(&item)
    }

    pub fn token(&self, item: ItemId) -> Result<usize> {
        self.index
            .get(&item)
            .copied()
            .ok_or(Error::UnknownSourceItem { item })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinerHyper {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
}

impl Default for MinerHyper {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            max_src_len: crate::data::MAX_ENCODER_ITEMS,
        }
    }
}

/// Training-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for MinerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LnSlots {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnSlots {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayerSlots {
    ln1: LnSlots,
    attn: AttnSlots,
    ln2: LnSlots,
    ffn: FfnSlots,
}

#[derive(Debug, Clone, Copy)]
struct DecLayerSlots {
    ln1: LnSlots,
    self_attn: AttnSlots,
    ln2: LnSlots,
    cross_attn: AttnSlots,
    ln3: LnSlots,
    ffn: FfnSlots,
}

#[derive(Debug, Clone)]
struct MinerSlots {
    enc_embed: usize,
    enc_layers: Vec<EncLayerSlots>,
    enc_final: LnSlots,
    dec_embed: usize,
    dec_layers: Vec<DecLayerSlots>,
    dec_final: LnSlots,
    out_w: usize,
    out_b: usize,
}

/// The trained interest miner.
#[derive(Debug, Clone)]
pub struct MinerModel {
    pub hyper: MinerHyper,
    pub item_vocab: ItemVocab,
    pub decoder_vocab: DecoderVocab,
    params: ParamSet,
    slots: MinerSlots,
}

/// Encoder representation of one source sequence.
#[derive(Debug, Clone)]
pub struct EncoderOutput(Mat);

/// One decoded interest: a valid tree path and its total log-probability
/// (END step included).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub path: SemanticCategoryId,
    pub log_prob: f64,
}

/// One training example: source window and the full decoder target
/// (BOS ... END).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub src: Vec<ItemId>,
    pub tgt_tokens: Vec<usize>,
}

const INIT_STD: f64 = 0.02;

fn register_ln(params: &mut ParamSet, prefix: &str, d: usize) -> LnSlots {
    LnSlots {
        gain: params.register(&format!("{prefix}.gain"), Array2::ones((1, d))),
        bias: params.register(&format!("{prefix}.bias"), Array2::zeros((1, d))),
    }
}

fn register_attn(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> AttnSlots {
    AttnSlots {
        wq: params.register(&format!("{prefix}.wq"), randn(d, d, INIT_STD, rng)),
        bq: params.register(&format!("{prefix}.bq"), Array2::zeros((1, d))),
        wk: params.register(&format!("{prefix}.wk"), randn(d, d, INIT_STD, rng)),
        bk: params.register(&format!("{prefix}.bk"), Array2::zeros((1, d))),
        wv: params.register(&format!("{prefix}.wv"), randn(d, d, INIT_STD, rng)),
        bv: params.register(&format!("{prefix}.bv"), Array2::zeros((1, d))),
        wo: params.register(&format!("{prefix}.wo"), randn(d, d, INIT_STD, rng)),
        bo: params.register(&format!("{prefix}.bo"), Array2::zeros((1, d))),
    }
}

fn register_ffn(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> FfnSlots {
    FfnSlots {
        w1: params.register(&format!("{prefix}.w1"), randn(d, hidden, INIT_STD, rng)),
        b1: params.register(&format!("{prefix}.b1"), Array2::zeros((1, hidden))),
        w2: params.register(&format!("{prefix}.w2"), randn(hidden, d, INIT_STD, rng)),
        b2: params.register(&format!("{prefix}.b2"), Array2::zeros((1, d))),
    }
}

/// Sinusoidal positions for a sequence of `len` tokens.
fn positional_encoding(len: usize, d: usize) -> Mat {
    let mut pe = Array2::zeros((len, d));
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[(pos, 2 * i)] = angle.sin();
            pe[(pos, 2 * i + 1)] = angle.cos();
        }
    }
    pe
}

fn causal_mask(len: usize) -> Mat {
    let mut m = Array2::zeros((len, len));
    for i in 0..len {
        for j in (i + 1)..len {
            m[(i, j)] = -1e30;
        }
    }
    m
}

impl MinerModel {
    /// Fresh model. With `zero_output_projection` the final projection
    /// starts at zero, making the initial prediction exactly uniform.
    pub fn new(
        hyper: MinerHyper,
        item_vocab: ItemVocab,
        decoder_vocab: DecoderVocab,
        seed: u64,
        zero_output_projection: bool,
    ) -> Self {
        assert!(
            hyper.d_model % hyper.n_heads == 0,
            "d_model must divide into heads"
        );
        assert!(hyper.d_model % 2 == 0, "d_model must be even");
        let d = hyper.d_model;
        let mut rng = component_rng(seed, "miner-init");
        let mut params = ParamSet::new();
        let enc_embed =
            params.register("enc.embed", randn(item_vocab.size(), d, INIT_STD, &mut rng));
        let enc_layers = (0..hyper.enc_layers)
            .map(|l| EncLayerSlots {
                ln1: register_ln(&mut params, &format!("enc.{l}.ln1"), d),
                attn: register_attn(&mut params, &format!("enc.{l}.attn"), d, &mut rng),
                ln2: register_ln(&mut params, &format!("enc.{l}.ln2"), d),
                ffn: register_ffn(&mut params, &format!("enc.{l}.ffn"), d, hyper.ffn_dim, &mut rng),
            })
            .collect();
        let enc_final = register_ln(&mut params, "enc.final_ln", d);
        let dec_embed = params.register(
            "dec.embed",
            randn(decoder_vocab.size(), d, INIT_STD, &mut rng),
        );
        let dec_layers = (0..hyper.dec_layers)
            .map(|l| DecLayerSlots {
                ln1: register_ln(&mut params, &format!("dec.{l}.ln1"), d),
                self_attn: register_attn(&mut params, &format!("dec.{l}.self_attn"), d, &mut rng),
                ln2: register_ln(&mut params, &format!("dec.{l}.ln2"), d),
                cross_attn: register_attn(&mut params, &format!("dec.{l}.cross_attn"), d, &mut rng),
                ln3: register_ln(&mut params, &format!("dec.{l}.ln3"), d),
                ffn: register_ffn(&mut params, &format!("dec.{l}.ffn"), d, hyper.ffn_dim, &mut rng),
            })
            .collect();
        let dec_final = register_ln(&mut params, "dec.final_ln", d);
        let out_w = if zero_output_projection {
            params.register("out.w", Array2::zeros((d, decoder_vocab.size())))
        } else {
            params.register("out.w", randn(d, decoder_vocab.size(), INIT_STD, &mut rng))
        };
        let out_b = params.register("out.b", Array2::zeros((1, decoder_vocab.size())));
        let slots = MinerSlots {
            enc_embed,
            enc_layers,
            enc_final,
            dec_embed,
            dec_layers,
            dec_final,
            out_w,
            out_b,
        };
        Self {
            hyper,
            item_vocab,
            decoder_vocab,
            params,
            slots,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn src_tokens(&self, src: &[ItemId]) -> Result<Vec<usize>> {
        if src.len() > self.hyper.max_src_len {
            return Err(Error::SourceTooLong {
                len: src.len(),
                max: self.hyper.max_src_len,
            });
        }
        if src.is_empty() {
            return Err(Error::EmptyInput);
        }
        src.iter()
            .map(|&item| self.item_vocab.token(item))
            .collect()
    }

    /// Runs the encoder over a source item sequence.
    pub fn encode(&self, src: &[ItemId]) -> Result<EncoderOutput> {
        let tokens = self.src_tokens(src)?;
        let mut graph = Graph::new();
        let pids = insert_param_leaves(&mut graph, &self.params);
        let h = build_encoder(&mut graph, &pids, &self.slots, &self.hyper, &tokens);
        Ok(EncoderOutput(graph.value(h).clone()))
    }

    /// One decoder step: the next-token distribution given the encoder
    /// output and a BOS-led token prefix. Sums to 1.
    pub fn decode_step(&self, h: &EncoderOutput, prefix_tokens: &[usize]) -> Vec<f64> {
        assert!(
            prefix_tokens.first() == Some(&BOS),
            "prefix must begin with BOS"
        );
        let mut graph = Graph::new();
        let pids = insert_param_leaves(&mut graph, &self.params);
        let h_node = graph.leaf(h.0.clone());
        let logits = build_decoder(
            &mut graph,
            &pids,
            &self.slots,
            &self.hyper,
            prefix_tokens,
            h_node,
        );
        let probs = graph.softmax_rows(logits);
        let last = graph.value(probs).nrows() - 1;
        graph.value(probs).row(last).to_vec()
    }

    /// Log-probability of a full category path (END included) under the
    /// model, by chaining [`Self::decode_step`].
    pub fn path_log_prob(&self, h: &EncoderOutput, path: &[u32]) -> f64 {
        let mut prefix = vec![BOS];
        let mut total = 0.0;
        for (i, &r) in path.iter().enumerate() {
            let probs = self.decode_step(h, &prefix);
            let tok = self.decoder_vocab.token(i + 1, r);
            total += probs[tok].ln();
            prefix.push(tok);
        }
        let probs = self.decode_step(h, &prefix);
        total + probs[END].ln()
    }

    /// Loss of one example plus its parameter gradients (scaled by
    /// `grad_scale`), reported as (dense per-slot grads, sparse table rows).
    pub fn example_loss_and_grads(
        &self,
        example: &TrainExample,
        grad_scale: f64,
    ) -> Result<(f64, Vec<(usize, Mat)>, Vec<(usize, Vec<usize>, Mat)>)> {
        let src_tokens = self.src_tokens(&example.src)?;
        let mut graph = Graph::new();
        let pids = insert_param_leaves(&mut graph, &self.params);
        let loss_node = build_example_loss(
            &mut graph,
            &pids,
            &self.slots,
            &self.hyper,
            &src_tokens,
            &example.tgt_tokens,
        );
        let loss = graph.value(loss_node)[(0, 0)];
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

    /// Loss of one example without gradients.
    pub fn example_loss(&self, example: &TrainExample) -> Result<f64> {
        let src_tokens = self.src_tokens(&example.src)?;
        let mut graph = Graph::new();
        let pids = insert_param_leaves(&mut graph, &self.params);
        let loss_node = build_example_loss(
            &mut graph,
            &pids,
            &self.slots,
            &self.hyper,
            &src_tokens,
            &example.tgt_tokens,
        );
        Ok(graph.value(loss_node)[(0, 0)])
    }

    /// Checkpoint header carrying everything needed to rebuild the model.
    fn header(&self) -> MinerHeader {
        MinerHeader {
            hyper: self.hyper.clone(),
            decoder_vocab: self.decoder_vocab.clone(),
            items: self.item_vocab.items.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&self.header())?;
        checkpoint::save(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::load(path)?;
        let header: MinerHeader = serde_json::from_str(&header)?;
        let mut model = MinerModel::new(
            header.hyper,
            ItemVocab::from_items(header.items),
            header.decoder_vocab,
            0,
            false,
        );
        checkpoint::restore_into(&mut model.params, tensors)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct MinerHeader {
    hyper: MinerHyper,
    decoder_vocab: DecoderVocab,
    items: Vec<ItemId>,
}

fn insert_param_leaves(graph: &mut Graph, params: &ParamSet) -> Vec<NodeId> {
    let pids: Vec<NodeId> = (0..params.len())
        .map(|s| graph.shared_leaf(params.shared(s)))
        .collect();
    // Slot indices and node indices must line up for sparse-grad routing.
    debug_assert!(pids.iter().enumerate().all(|(i, p)| p.index() == i));
    pids
}

fn linear(graph: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = graph.matmul(x, w);
    graph.add_row(xw, b)
}

/// Multi-head attention: queries from `xq`, keys/values from `xkv`, optional
/// additive mask on the score matrix.
fn attention(
    graph: &mut Graph,
    pids: &[NodeId],
    slots: &AttnSlots,
    n_heads: usize,
    xq: NodeId,
    xkv: NodeId,
    mask: Option<&Mat>,
) -> NodeId {
    let q = linear(graph, xq, pids[slots.wq], pids[slots.bq]);
    let k = linear(graph, xkv, pids[slots.wk], pids[slots.bk]);
    let v = linear(graph, xkv, pids[slots.wv], pids[slots.bv]);
    let d = graph.value(q).ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask_node = mask.map(|m| graph.leaf(m.clone()));
    let mut heads = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let qh = graph.slice_cols(q, hd * dh, dh);
        let kh = graph.slice_cols(k, hd * dh, dh);
        let vh = graph.slice_cols(v, hd * dh, dh);
        let kt = graph.transpose(kh);
        let scores = graph.matmul(qh, kt);
        let scaled = graph.scale(scores, scale);
        let masked = match mask_node {
            Some(m) => graph.add(scaled, m),
            None => scaled,
        };
        let probs = graph.softmax_rows(masked);
        heads.push(graph.matmul(probs, vh));
    }
    let cat = graph.concat_cols(&heads);
    linear(graph, cat, pids[slots.wo], pids[slots.bo])
}

fn ffn(graph: &mut Graph, pids: &[NodeId], slots: &FfnSlots, x: NodeId) -> NodeId {
    let h = linear(graph, x, pids[slots.w1], pids[slots.b1]);
    let act = graph.gelu(h);
    linear(graph, act, pids[slots.w2], pids[slots.b2])
}

fn layer_norm(graph: &mut Graph, pids: &[NodeId], slots: &LnSlots, x: NodeId) -> NodeId {
    graph.layer_norm(x, pids[slots.gain], pids[slots.bias])
}

fn embed_tokens(graph: &mut Graph, table: NodeId, tokens: &[usize], d_model: usize) -> NodeId {
    let gathered = graph.gather(table, tokens.to_vec());
    let scaled = graph.scale(gathered, (d_model as f64).sqrt());
    let pe = graph.leaf(positional_encoding(tokens.len(), d_model));
    graph.add(scaled, pe)
}

/// Pre-norm encoder stack over source tokens.
fn build_encoder(
    graph: &mut Graph,
    pids: &[NodeId],
    slots: &MinerSlots,
    hyper: &MinerHyper,
    src_tokens: &[usize],
) -> NodeId {
    let mut x = embed_tokens(graph, pids[slots.enc_embed], src_tokens, hyper.d_model);
    for layer in &slots.enc_layers {
        let normed = layer_norm(graph, pids, &layer.ln1, x);
        let attn = attention(graph, pids, &layer.attn, hyper.n_heads, normed, normed, None);
        x = graph.add(x, attn);
        let normed = layer_norm(graph, pids, &layer.ln2, x);
        let ff = ffn(graph, pids, &layer.ffn, normed);
        x = graph.add(x, ff);
    }
    layer_norm(graph, pids, &slots.enc_final, x)
}

/// Pre-norm decoder stack producing logits for every prefix position.
fn build_decoder(
    graph: &mut Graph,
    pids: &[NodeId],
    slots: &MinerSlots,
    hyper: &MinerHyper,
    dec_tokens: &[usize],
    enc_h: NodeId,
) -> NodeId {
    let mask = causal_mask(dec_tokens.len());
    let mut x = embed_tokens(graph, pids[slots.dec_embed], dec_tokens, hyper.d_model);
    for layer in &slots.dec_layers {
        let normed = layer_norm(graph, pids, &layer.ln1, x);
        let self_attn = attention(
            graph,
            pids,
            &layer.self_attn,
            hyper.n_heads,
            normed,
            normed,
            Some(&mask),
        );
        x = graph.add(x, self_attn);
        let normed = layer_norm(graph, pids, &layer.ln2, x);
        let cross = attention(
            graph,
            pids,
            &layer.cross_attn,
            hyper.n_heads,
            normed,
            enc_h,
            None,
        );
        x = graph.add(x, cross);
        let normed = layer_norm(graph, pids, &layer.ln3, x);
        let ff = ffn(graph, pids, &layer.ffn, normed);
        x = graph.add(x, ff);
    }
    let x = layer_norm(graph, pids, &slots.dec_final, x);
    linear(graph, x, pids[slots.out_w], pids[slots.out_b])
}

/// Teacher-forced cross-entropy (summed over target positions, END
/// included) of one (src, tgt) pair.
fn build_example_loss(
    graph: &mut Graph,
    pids: &[NodeId],
    slots: &MinerSlots,
    hyper: &MinerHyper,
    src_tokens: &[usize],
    tgt_tokens: &[usize],
) -> NodeId {
    assert!(tgt_tokens.len() >= 2, "target needs BOS and END");
    let h = build_encoder(graph, pids, slots, hyper, src_tokens);
    let dec_in = &tgt_tokens[..tgt_tokens.len() - 1];
    let labels = tgt_tokens[1..].to_vec();
    let logits = build_decoder(graph, pids, slots, hyper, dec_in, h);
    graph.cross_entropy_sum(logits, labels)
}

/// Builds training examples: one per (user, leaf) where at least
/// `min_leaf_hits` of the user's items fall in that leaf, with the encoder
/// window as source and the leaf path as target. With probability
/// `prefix_aug` an additional truncated target (a random proper prefix) is
/// emitted, teaching the decoder to stop early at internal circles.
pub fn build_training_examples(
    sequences: &[UserSequence],
    tree: &CategoryTree,
    min_leaf_hits: usize,
    prefix_aug: f64,
    seed: u64,
) -> Vec<TrainExample> {
    let vocab = DecoderVocab::for_tree(tree);
    let mut rng = component_rng(seed, "train-examples");
    let mut out = Vec::new();
    for seq in sequences {
        let known: Vec<ItemId> = seq
            .items
            .iter()
            .copied()
            .filter(|&item| tree.contains_item(item))
            .collect();
        if known.is_empty() {
            continue;
        }
        let src = encoder_window(&known, &mut rng);
        let mut hits: BTreeMap<&SemanticCategoryId, usize> = BTreeMap::new();
        for &item in &known {
            *hits.entry(tree.leaf_id(item).expect("filtered")).or_default() += 1;
        }
        for (leaf, count) in hits {
            if count < min_leaf_hits {
                continue;
            }
            out.push(TrainExample {
                src: src.clone(),
                tgt_tokens: vocab.path_to_target(leaf.path()),
            });
            if leaf.path().len() >= 2 && rng.gen::<f64>() < prefix_aug {
                let cut = rng.gen_range(1..leaf.path().len());
                out.push(TrainExample {
                    src: src.clone(),
                    tgt_tokens: vocab.path_to_target(&leaf.path()[..cut]),
                });
            }
        }
    }
    out
}

/// Trains a fresh miner with teacher forcing and the Adam rule, returning
/// the model and the mean per-example loss per epoch. Deterministic given
/// the seed; gradient accumulation over a batch sums per-example gradients
/// in example order, so parallel execution reproduces the sequential result
/// bit for bit.
pub fn train_miner(
    examples: &[TrainExample],
    item_vocab: ItemVocab,
    decoder_vocab: DecoderVocab,
    hyper: MinerHyper,
    cfg: &MinerTrainConfig,
    seed: u64,
) -> Result<(MinerModel, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model = MinerModel::new(hyper, item_vocab, decoder_vocab, seed, true);
    let losses = train_miner_in_place(&mut model, examples, cfg, seed)?;
    Ok((model, losses))
}

/// Training loop over an existing model; see [`train_miner`].
pub fn train_miner_in_place(
    model: &mut MinerModel,
    examples: &[TrainExample],
    cfg: &MinerTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut grads = GradStore::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = component_rng(seed, "miner-epochs");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| model.example_loss_and_grads(&examples[i], scale))
                .collect::<Result<_>>()?;
            grads.zero();
            for (loss, dense, sparse) in results {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        context: format!("miner epoch {epoch}"),
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
        epoch_losses.push(epoch_loss / examples.len() as f64);
    }
    Ok(epoch_losses)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    path: Vec<u32>,
    log_prob: f64,
    done: bool,
}

/// Tree-constrained beam search over the decoder.
///
/// Each step expands every live hypothesis with the tokens the prefix trie
/// allows (child clusters, plus END at any nonempty prefix); finished
/// hypotheses keep competing for beam slots, so beam width 1 is exactly the
/// greedy constrained path and a beam at least as large as the number of
/// valid paths enumerates them exhaustively. No length normalization.
pub fn beam_search(
    model: &MinerModel,
    src: &[ItemId],
    tree: &CategoryTree,
    beam_size: usize,
) -> Result<Vec<BeamResult>> {
    assert!(beam_size >= 1, "beam_size must be >= 1");
    let h = model.encode(src)?;
    let mut beam = vec![Hypothesis {
        tokens: vec![BOS],
        path: Vec::new(),
        log_prob: 0.0,
        done: false,
    }];
    let max_steps = model.decoder_vocab.max_depth + 1;
    for _ in 0..max_steps {
        if beam.iter().all(|hyp| hyp.done) {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &beam {
            if hyp.done {
                candidates.push(hyp.clone());
                continue;
            }
            let probs = model.decode_step(&h, &hyp.tokens);
            let conts = tree.valid_continuations(&hyp.path)?;
            let depth = hyp.path.len() + 1;
            for &r in &conts.next {
                let tok = model.decoder_vocab.token(depth, r);
                let mut next = hyp.clone();
                next.tokens.push(tok);
                next.path.push(r);
                next.log_prob += probs[tok].ln();
                candidates.push(next);
            }
            if conts.end_allowed {
                let mut next = hyp.clone();
                next.log_prob += probs[END].ln();
                next.done = true;
                candidates.push(next);
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then_with(|| a.path.cmp(&b.path))
        });
        candidates.truncate(beam_size);
        beam = candidates;
    }
    Ok(beam
        .into_iter()
        .filter(|hyp| hyp.done)
        .map(|hyp| BeamResult {
            path: SemanticCategoryId::new(hyp.path),
            log_prob: hyp.log_prob,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::TreeNode;

    fn tiny_tree() -> CategoryTree {
        // Root children 0, 1, 2; child 1 splits into 0 and 1.
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
                TreeNode {
                    layer: 1,
                    cluster_number: Some(1),
                    centroid: vec![0.0],
                    children: Some(vec![leaf(2, 0, vec![3, 4]), leaf(2, 1, vec![5, 6])]),
                    items: None,
                    unsplittable: false,
                },
                leaf(1, 2, vec![7, 8]),
            ]),
            items: None,
            unsplittable: false,
        };
        CategoryTree::from_root(3, 2, 1, root)
    }

    fn tiny_model(seed: u64, zero_out: bool) -> MinerModel {
        let hyper = MinerHyper {
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 24,
            max_src_len: 12,
        };
        MinerModel::new(
            hyper,
            ItemVocab::from_items(1..=8),
            DecoderVocab::new(3, 2),
            seed,
            zero_out,
        )
    }

    #[test]
    fn vocab_bijection_matches_position_distinct_layout() {
        let vocab = DecoderVocab::new(6, 3);
        // Path {2,4,4}: tokens 2+(1-1)*6+2=4, 2+(2-1)*6+4=12, 2+(3-1)*6+4=18.
        assert_eq!(vocab.path_to_target(&[2, 4, 4]), vec![0, 4, 12, 18, 1]);
        assert_ne!(vocab.token(2, 4), vocab.token(3, 4));
        let mut seen = std::collections::BTreeSet::new();
        for d in 1..=3 {
            for r in 0..6u32 {
                assert!(seen.insert(vocab.token(d, r)));
                assert_eq!(vocab.layer_cluster(vocab.token(d, r)), Some((d, r)));
            }
        }
        assert_eq!(vocab.size(), 2 + 18);
    }

    #[test]
    fn training_examples_one_per_qualifying_leaf() {
        let tree = tiny_tree();
        let seqs = vec![UserSequence {
            user_id: 1,
            // Leaf 0: items 1,2 (5 hits); leaf 1-0: item 3 (3 hits);
            // leaf 2: item 7 (1 hit, below threshold).
            items: vec![1, 2, 1, 2, 1, 3, 3, 3, 7],
            timestamps: (0..9).collect(),
        }];
        let examples = build_training_examples(&seqs, &tree, 2, 0.0, 1);
        assert_eq!(examples.len(), 2);
        let vocab = DecoderVocab::for_tree(&tree);
        let targets: Vec<Vec<usize>> = examples.iter().map(|e| e.tgt_tokens.clone()).collect();
        assert!(targets.contains(&vocab.path_to_target(&[0])));
        assert!(targets.contains(&vocab.path_to_target(&[1, 0])));
    }

    #[test]
    fn prefix_augmentation_always_adds_shorter_targets() {
        let tree = tiny_tree();
        let seqs = vec![UserSequence {
            user_id: 1,
            items: vec![3, 4, 3, 4],
            timestamps: (0..4).collect(),
        }];
        let examples = build_training_examples(&seqs, &tree, 2, 1.0, 5);
        // One full example for leaf 1-0 plus its truncated variant.
        assert_eq!(examples.len(), 2);
        assert!(examples[1].tgt_tokens.len() < examples[0].tgt_tokens.len());
        assert_eq!(examples[1].tgt_tokens.len(), 3); // BOS, layer-1 token, END
    }

    #[test]
    fn encode_is_deterministic_and_position_sensitive() {
        let model = tiny_model(3, false);
        let a = model.encode(&[1, 2, 3]).unwrap();
        let b = model.encode(&[1, 2, 3]).unwrap();
        assert_eq!(a.0, b.0);
        let reversed = model.encode(&[3, 2, 1]).unwrap();
        assert_ne!(a.0, reversed.0);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let model = tiny_model(3, false);
        assert!(matches!(
            model.encode(&[99]),
            Err(Error::UnknownSourceItem { item: 99 })
        ));
        let too_long: Vec<ItemId> = (1..=8).cycle().take(13).collect();
        assert!(matches!(
            model.encode(&too_long),
            Err(Error::SourceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn decode_step_is_a_distribution_and_uniform_at_zero_init() {
        let model = tiny_model(7, true);
        let h = model.encode(&[1, 5, 7]).unwrap();
        let probs = model.decode_step(&h, &[BOS]);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let v = model.decoder_vocab.size() as f64;
        for p in &probs {
            assert!((p - 1.0 / v).abs() < 1e-9, "not uniform: {probs:?}");
        }

        let model = tiny_model(7, false);
        let h = model.encode(&[1, 5, 7]).unwrap();
        let probs = model.decode_step(&h, &[BOS, 2]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn chained_decode_steps_factorize_path_probability() {
        let model = tiny_model(11, false);
        let h = model.encode(&[2, 3, 6]).unwrap();
        // Direct product of conditionals.
        let vocab = &model.decoder_vocab;
        let mut prefix = vec![BOS];
        let mut product = 1.0;
        for (i, &r) in [1u32, 0].iter().enumerate() {
            let probs = model.decode_step(&h, &prefix);
            let tok = vocab.token(i + 1, r);
            product *= probs[tok];
            prefix.push(tok);
        }
        product *= model.decode_step(&h, &prefix)[END];
        let log_prob = model.path_log_prob(&h, &[1, 0]);
        assert!((log_prob - product.ln()).abs() < 1e-9);
    }

    #[test]
    fn initial_loss_is_target_length_times_log_vocab() {
        let model = tiny_model(13, true);
        let vocab = model.decoder_vocab.clone();
        let example = TrainExample {
            src: vec![1, 2, 3],
            tgt_tokens: vocab.path_to_target(&[1, 0]),
        };
        let loss = model.example_loss(&example).unwrap();
        let expected = 3.0 * (vocab.size() as f64).ln(); // 3 predicted tokens
        assert!(
            (loss - expected).abs() < 1e-9,
            "loss {loss} vs expected {expected}"
        );
    }

    #[test]
    fn overfits_single_example() {
        let tree = tiny_tree();
        let vocab = DecoderVocab::for_tree(&tree);
        let example = TrainExample {
            src: vec![3, 4, 3, 4],
            tgt_tokens: vocab.path_to_target(&[1, 0]),
        };
        let hyper = MinerHyper {
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 24,
            max_src_len: 12,
        };
        let cfg = MinerTrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 3e-3,
        };
        let (model, losses) = train_miner(
            std::slice::from_ref(&example),
            ItemVocab::from_items(1..=8),
            vocab,
            hyper,
            &cfg,
            17,
        )
        .unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let h = model.encode(&example.src).unwrap();
        let p = model.path_log_prob(&h, &[1, 0]).exp();
        assert!(p > 0.9, "path probability {p}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let tree = tiny_tree();
        let seqs: Vec<UserSequence> = (1..=4)
            .map(|u| UserSequence {
                user_id: u,
                items: vec![1, 2, 3, 4, 5, 6, 7, 8],
                timestamps: (0..8).collect(),
            })
            .collect();
        let examples = build_training_examples(&seqs, &tree, 2, 0.3, 3);
        let hyper = MinerHyper {
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 24,
            max_src_len: 12,
        };
        let cfg = MinerTrainConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 1e-3,
        };
        let (m1, l1) = train_miner(
            &examples,
            ItemVocab::from_items(1..=8),
            DecoderVocab::for_tree(&tree),
            hyper.clone(),
            &cfg,
            23,
        )
        .unwrap();
        let (m2, l2) = train_miner(
            &examples,
            ItemVocab::from_items(1..=8),
            DecoderVocab::for_tree(&tree),
            hyper,
            &cfg,
            23,
        )
        .unwrap();
        assert_eq!(l1, l2);
        for slot in 0..m1.params().len() {
            assert_eq!(m1.params().get(slot), m2.params().get(slot));
        }
    }

    /// Enumerates every valid complete path via chained decode steps.
    fn enumerate_paths(
        model: &MinerModel,
        h: &EncoderOutput,
        tree: &CategoryTree,
    ) -> Vec<BeamResult> {
        fn walk(
            model: &MinerModel,
            h: &EncoderOutput,
            tree: &CategoryTree,
            path: &mut Vec<u32>,
            out: &mut Vec<BeamResult>,
        ) {
            if !path.is_empty() {
                out.push(BeamResult {
                    path: SemanticCategoryId::new(path.clone()),
                    log_prob: model.path_log_prob(h, path),
                });
            }
            let conts = tree.valid_continuations(path).unwrap();
            for r in conts.next {
                path.push(r);
                walk(model, h, tree, path, out);
                path.pop();
            }
        }
        let mut out = Vec::new();
        let mut path = Vec::new();
        walk(model, h, tree, &mut path, &mut out);
        out.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then_with(|| a.path.cmp(&b.path))
        });
        out
    }

    #[test]
    fn beam_matches_exhaustive_enumeration_when_wide_enough() {
        let tree = tiny_tree();
        for seed in 0..5 {
            let model = tiny_model(seed, false);
            let src = vec![1, 4, 7];
            let results = beam_search(&model, &src, &tree, 32).unwrap();
            let h = model.encode(&src).unwrap();
            let oracle = enumerate_paths(&model, &h, &tree);
            assert_eq!(results.len(), oracle.len(), "seed {seed}");
            for (got, want) in results.iter().zip(&oracle) {
                assert_eq!(got.path, want.path, "seed {seed}");
                assert!(
                    (got.log_prob - want.log_prob).abs() < 1e-6,
                    "seed {seed}: {got:?} vs {want:?}"
                );
            }
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let tree = tiny_tree();
        let model = tiny_model(29, false);
        let src = vec![2, 5, 8];
        let results = beam_search(&model, &src, &tree, 1).unwrap();
        assert_eq!(results.len(), 1);

        // Replay greedily over valid continuations.
        let h = model.encode(&src).unwrap();
        let mut path: Vec<u32> = Vec::new();
        let mut tokens = vec![BOS];
        loop {
            let probs = model.decode_step(&h, &tokens);
            let conts = tree.valid_continuations(&path).unwrap();
            let mut best: (f64, Option<u32>) = (f64::NEG_INFINITY, None);
            if conts.end_allowed && probs[END] > best.0 {
                best = (probs[END], None);
            }
            for &r in &conts.next {
                let tok = model.decoder_vocab.token(path.len() + 1, r);
                if probs[tok] > best.0 {
                    best = (probs[tok], Some(r));
                }
            }
            match best.1 {
                Some(r) => {
                    tokens.push(model.decoder_vocab.token(path.len() + 1, r));
                    path.push(r);
                }
                None => break,
            }
        }
        assert_eq!(results[0].path.path(), &path[..]);
    }

    #[test]
    fn beam_results_are_sorted_valid_and_bookkept() {
        let tree = tiny_tree();
        let model = tiny_model(31, false);
        let src = vec![1, 2, 3, 4];
        let results = beam_search(&model, &src, &tree, 4).unwrap();
        assert!(!results.is_empty());
        let h = model.encode(&src).unwrap();
        for pair in results.windows(2) {
            assert!(pair[0].log_prob >= pair[1].log_prob);
        }
        for r in &results {
            assert!(tree.is_valid_path(&r.path));
            assert!(r.log_prob <= 0.0);
            let recomputed = model.path_log_prob(&h, r.path.path());
            assert!((recomputed - r.log_prob).abs() < 1e-6);
        }
    }

    #[test]
    fn enlarging_beam_preserves_top_prefixes() {
        let tree = tiny_tree();
        let model = tiny_model(37, false);
        let src = vec![6, 7, 8];
        let sizes = [1usize, 2, 3, 4, 6];
        let runs: Vec<Vec<BeamResult>> = sizes
            .iter()
            .map(|&b| beam_search(&model, &src, &tree, b).unwrap())
            .collect();
        for wi in 0..runs.len() - 1 {
            for wj in wi + 1..runs.len() {
                let small = &runs[wi];
                let large = &runs[wj];
                for j in 1..=small.len() {
                    let top_small: Vec<_> = small[..j].iter().map(|r| &r.path).collect();
                    let top_large: Vec<_> =
                        large[..j.min(large.len())].iter().map(|r| &r.path).collect();
                    for p in &top_small {
                        assert!(
                            top_large.contains(p),
                            "beam {} top-{j} lost {p} at beam {}",
                            sizes[wi],
                            sizes[wj]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_behavior_to_f32() {
        let model = tiny_model(41, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("miner.ckpt");
        model.save(&path).unwrap();
        let loaded = MinerModel::load(&path).unwrap();
        assert_eq!(loaded.hyper, model.hyper);
        assert_eq!(loaded.item_vocab, model.item_vocab);
        let h1 = model.encode(&[1, 2]).unwrap();
        let h2 = loaded.encode(&[1, 2]).unwrap();
        let p1 = model.decode_step(&h1, &[BOS]);
        let p2 = loaded.decode_step(&h2, &[BOS]);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
