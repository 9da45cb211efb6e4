//! Stage implementations: each reads prior-stage artifacts from the work
//! dir, writes its own, and records a manifest for no-op rerun detection.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hirec_core::data::synth::{synth_corpus, SynthParams};
use hirec_core::data::{
    build_sequences, encoder_window, parse_movielens, preprocess_interactions,
    read_sequences_jsonl, split_users, write_sequences_jsonl, UserSequence,
};
use hirec_core::embed::{build_cooccurrence, factorize_with_diagnostics, ItemEmbeddingMatrix};
use hirec_core::eval::{evaluate_pipeline, write_details_jsonl, EvalConfig};
use hirec_core::miner::{
    beam_search, build_training_examples, train_miner, DecoderVocab, ItemVocab, MinerHyper,
    MinerModel, MinerTrainConfig,
};
use hirec_core::nn::checkpoint::write_loss_csv;
use hirec_core::retrieval::{
    split_behaviors, train_retrieval, train_unified_baseline, KkvStore, RetrievalHyper,
    RetrievalModel, RetrievalTrainConfig,
};
use hirec_core::taxonomy::{build_tree, CategoryTree};
use hirec_core::{derive_seed, ItemId};

use crate::config::PipelineConfig;
use crate::manifest::{build_manifest, is_up_to_date, write_manifest};

pub const STAGES: &[&str] = &[
    "prepare-data",
    "build-embeddings",
    "build-taxonomy",
    "train-miner",
    "train-retrieval",
    "evaluate",
];

pub struct StagePaths {
    pub work_dir: PathBuf,
}

impl StagePaths {
    pub fn new(work_dir: PathBuf) -> Self {
        Self { work_dir }
    }

    pub fn train_sequences(&self) -> PathBuf {
        self.work_dir.join("train_sequences.jsonl")
    }
    pub fn test_sequences(&self) -> PathBuf {
        self.work_dir.join("test_sequences.jsonl")
    }
    pub fn data_stats(&self) -> PathBuf {
        self.work_dir.join("data_stats.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.work_dir.join("embeddings.bin")
    }
    pub fn taxonomy(&self) -> PathBuf {
        self.work_dir.join("taxonomy.json")
    }
    pub fn miner(&self) -> PathBuf {
        self.work_dir.join("miner.ckpt")
    }
    pub fn miner_loss(&self) -> PathBuf {
        self.work_dir.join("miner_loss.csv")
    }
    pub fn retrieval(&self) -> PathBuf {
        self.work_dir.join("retrieval.ckpt")
    }
    pub fn retrieval_loss(&self) -> PathBuf {
        self.work_dir.join("retrieval_loss.csv")
    }
    pub fn baseline(&self) -> PathBuf {
        self.work_dir.join("baseline.ckpt")
    }
    pub fn baseline_loss(&self) -> PathBuf {
        self.work_dir.join("baseline_loss.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.work_dir.join("metrics.csv")
    }
    pub fn details(&self) -> PathBuf {
        self.work_dir.join("details.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.work_dir.join("report.txt")
    }
}

/// Counts recorded after preprocessing, written by `prepare-data`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DataStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train_users: usize,
    pub test_users: usize,
}

fn require(path: &Path, producer: &str) -> Result<PathBuf> {
    if !path.exists() {
        bail!(
            "missing artifact: {} (run {producer})",
            path.file_name().unwrap_or_default().to_string_lossy()
        );
    }
    Ok(path.to_path_buf())
}

fn stage_seed(cfg: &PipelineConfig, stage: &str) -> u64 {
    derive_seed(cfg.seed, stage)
}

fn config_hash_input(cfg: &PipelineConfig, sections: &[&str]) -> Result<String> {
    let mut out = format!("seed = {}\n", cfg.seed);
    for s in sections {
        out.push_str(&cfg.section_toml(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Runs one stage; returns true when the stage actually executed (false on
/// an up-to-date no-op).
pub fn run_stage(name: &str, cfg: &PipelineConfig, paths: &StagePaths, force: bool) -> Result<bool> {
    match name {
        "prepare-data" => prepare_data(cfg, paths, force),
        "build-embeddings" => build_embeddings(cfg, paths, force),
        "build-taxonomy" => build_taxonomy(cfg, paths, force),
        "train-miner" => stage_train_miner(cfg, paths, force),
        "train-retrieval" => stage_train_retrieval(cfg, paths, force),
        "evaluate" => stage_evaluate(cfg, paths, force),
        other => bail!("unknown stage {other}"),
    }
}

fn prepare_data(cfg: &PipelineConfig, paths: &StagePaths, force: bool) -> Result<bool> {
    let seed = stage_seed(cfg, "prepare-data");
    let mut inputs = Vec::new();
    if cfg.data.source == "movielens" {
        inputs.push(cfg.paths.data.clone().expect("validated"));
    }
    let outputs = vec![
        paths.train_sequences(),
        paths.test_sequences(),
        paths.data_stats(),
    ];
    let manifest = build_manifest(
        "prepare-data",
        &config_hash_input(cfg, &["data"])?,
        &inputs,
        seed,
        &outputs,
    )?;
    if !force && is_up_to_date(&paths.work_dir, &manifest) {
        return Ok(false);
    }

    let sequences: Vec<UserSequence> = match cfg.data.source.as_str() {
        "movielens" => {
            let raw = parse_movielens(cfg.paths.data.as_ref().expect("validated"))?;
            let kept = preprocess_interactions(
                raw,
                cfg.data.min_item_interactions,
                cfg.data.min_user_interactions,
            );
            build_sequences(&kept, cfg.data.min_seq_len)
        }
        "synth" => {
            let corpus = synth_corpus(&SynthParams {
                levels: cfg.data.synth.levels,
                branching: cfg.data.synth.branching,
                items_per_leaf: cfg.data.synth.items_per_leaf,
                users: cfg.data.synth.users,
                interests_per_user: cfg.data.synth.interests_per_user,
                seq_len: cfg.data.synth.seq_len,
                noise_frac: cfg.data.synth.noise_frac,
                seed,
            });
            corpus
                .sequences
                .into_iter()
                .filter(|s| s.len() >= cfg.data.min_seq_len)
                .collect()
        }
        _ => unreachable!("validated"),
    };

    let interactions: usize = sequences.iter().map(|s| s.len()).sum();
    let mut items: Vec<ItemId> = sequences.iter().flat_map(|s| s.items.clone()).collect();
    items.sort_unstable();
    items.dedup();
    let stats = DataStats {
        users: sequences.len(),
        items: items.len(),
        interactions,
        train_users: 0,
        test_users: 0,
    };

    let (train, test) = split_users(sequences, cfg.data.train_frac, seed)?;
    let stats = DataStats {
        train_users: train.len(),
        test_users: test.len(),
        ..stats
    };
    write_sequences_jsonl(&paths.train_sequences(), &train)?;
    write_sequences_jsonl(&paths.test_sequences(), &test)?;
    std::fs::write(paths.data_stats(), serde_json::to_string_pretty(&stats)?)?;
    write_manifest(&paths.work_dir, &manifest)?;
    println!(
        "prepare-data: {} users ({} train / {} test), {} items, {} interactions",
        stats.users, stats.train_users, stats.test_users, stats.items, stats.interactions
    );
    Ok(true)
}

fn build_embeddings(cfg: &PipelineConfig, paths: &StagePaths, force: bool) -> Result<bool> {
    let seed = stage_seed(cfg, "build-embeddings");
    let train = require(&paths.train_sequences(), "prepare-data")?;
    let outputs = vec![paths.embeddings()];
    let manifest = build_manifest(
        "build-embeddings",
        &config_hash_input(cfg, &["embed"])?,
        &[train.clone()],
        seed,
        &outputs,
    )?;
    if !force && is_up_to_date(&paths.work_dir, &manifest) {
        return Ok(false);
    }

    let sequences = read_sequences_jsonl(&train)?;
    let matrix = build_cooccurrence(&sequences, cfg.embed.window);
    let diag = factorize_with_diagnostics(&matrix, cfg.embed.dim, cfg.embed.iters, seed)?;
    diag.embeddings.save(&paths.embeddings())?;
    write_manifest(&paths.work_dir, &manifest)?;
    println!(
        "build-embeddings: {} items x {} dims ({} iterations, final residual {:.3e})",
        diag.embeddings.len(),
        diag.embeddings.dim(),
        diag.residuals.len(),
        diag.residuals.last().copied().unwrap_or(0.0)
    );
    Ok(true)
}

fn build_taxonomy(cfg: &PipelineConfig, paths: &StagePaths, force: bool) -> Result<bool> {
    let seed = stage_seed(cfg, "build-taxonomy");
    let emb_path = require(&paths.embeddings(), "build-embeddings")?;
    let outputs = vec![paths.taxonomy()];
    let manifest = build_manifest(
        "build-taxonomy",
        &config_hash_input(cfg, &["taxonomy"])?,
        &[emb_path.clone()],
        seed,
        &outputs,
    )?;
    if !force && is_up_to_date(&paths.work_dir, &manifest) {
        return Ok(false);
    }

    let embeddings = ItemEmbeddingMatrix::load(&emb_path)?;
    let tree = build_tree(
        &embeddings,
        cfg.taxonomy.k,
        cfg.taxonomy.c,
        cfg.taxonomy.kmeans_iters,
        seed,
    )?;
    tree.save(&paths.taxonomy())?;
    write_manifest(&paths.work_dir, &manifest)?;
    let leaves = tree.leaf_summaries();
    let unsplittable = leaves.iter().filter(|(_, _, u)| *u).count();
    println!(
        "build-taxonomy: {} leaves (max depth {}, {} unsplittable) over {} items",
        leaves.len(),
        tree.max_depth(),
        unsplittable,
        tree.n_items()
    );
    Ok(true)
}

fn stage_train_miner(cfg: &PipelineConfig, paths: &StagePaths, force: bool) -> Result<bool> {
    let seed = stage_seed(cfg, "train-miner");
    let train = require(&paths.train_sequences(), "prepare-data")?;
    let tree_path = require(&paths.taxonomy(), "build-taxonomy")?;
    let outputs = vec![paths.miner(), paths.miner_loss()];
    let manifest = build_manifest(
        "train-miner",
        &config_hash_input(cfg, &["miner"])?,
        &[train.clone(), tree_path.clone()],
        seed,
        &outputs,
    )?;
    if !force && is_up_to_date(&paths.work_dir, &manifest) {
        return Ok(false);
    }

    let sequences = read_sequences_jsonl(&train)?;
    let tree = CategoryTree::load(&tree_path)?;
    let examples = build_training_examples(
        &sequences,
        &tree,
        cfg.miner.min_leaf_hits,
        cfg.miner.prefix_aug,
        seed,
    );
    if examples.is_empty() {
        bail!("no miner training examples (check min_leaf_hits)");
    }
    let item_vocab = ItemVocab::from_items(catalog_items(&tree));
    let hyper = MinerHyper {
        d_model: cfg.miner.d_model,
        n_heads: cfg.miner.heads,
        enc_layers: cfg.miner.enc_layers,
        dec_layers: cfg.miner.dec_layers,
        ffn_dim: cfg.miner.ffn,
        max_src_len: hirec_core::data::MAX_ENCODER_ITEMS,
    };
    let train_cfg = MinerTrainConfig {
        epochs: cfg.miner.epochs,
        batch_size: cfg.miner.batch,
        learning_rate: cfg.miner.lr,
    };
    let started = std::time::Instant::now();
    let (model, losses) = train_miner(
        &examples,
        item_vocab,
        DecoderVocab::for_tree(&tree),
        hyper,
        &train_cfg,
        seed,
    )?;
    model.save(&paths.miner())?;
    write_loss_csv(&paths.miner_loss(), &losses)?;
    write_manifest(&paths.work_dir, &manifest)?;
    println!(
        "train-miner: {} examples, {} epochs, loss {:.4} -> {:.4} ({:.0}s)",
        examples.len(),
        losses.len(),
        losses.first().copied().unwrap_or(0.0),
        losses.last().copied().unwrap_or(0.0),
        started.elapsed().as_secs_f64()
    );
    Ok(true)
}

fn catalog_items(tree: &CategoryTree) -> Vec<ItemId> {
    tree.leaf_summaries()
        .iter()
        .flat_map(|(path, _, _)| {
            tree.sub_library(path)
                .expect("leaf paths enumerate existing nodes")
        })
        .collect()
}

fn stage_train_retrieval(cfg: &PipelineConfig, paths: &StagePaths, force: bool) -> Result<bool> {
    let seed = stage_seed(cfg, "train-retrieval");
    let train = require(&paths.train_sequences(), "prepare-data")?;
    let tree_path = require(&paths.taxonomy(), "build-taxonomy")?;
    let miner_path = require(&paths.miner(), "train-miner")?;
    let mut outputs = vec![paths.retrieval(), paths.retrieval_loss()];
    if cfg.retrieval.train_baseline {
        outputs.push(paths.baseline());
        outputs.push(paths.baseline_loss());
    }
    let manifest = build_manifest(
        "train-retrieval",
        &config_hash_input(cfg, &["retrieval", "miner"])?,
        &[train.clone(), tree_path.clone(), miner_path.clone()],
        seed,
        &outputs,
    )?;
    if !force && is_up_to_date(&paths.work_dir, &manifest) {
        return Ok(false);
    }

    let sequences = read_sequences_jsonl(&train)?;
    let tree = CategoryTree::load(&tree_path)?;
    let miner = MinerModel::load(&miner_path)?;

    // Stage one applied to training users: window -> beams -> split.
    let started = std::time::Instant::now();
    let kkv_entries: Vec<(u64, _)> = {
        use rayon::prelude::*;
        sequences
            .par_iter()
            .map(|seq| {
                let known: Vec<ItemId> = seq
                    .items
                    .iter()
                    .copied()
                    .filter(|&i| tree.contains_item(i))
                    .collect();
                if known.is_empty() {
                    return Ok((seq.user_id, Default::default()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &format!("kkv-window-{}", seq.user_id),
                ));
                let window = encoder_window(&known, &mut rng);
                let beams = beam_search(&miner, &window, &tree, cfg.miner.beam_size)?;
                Ok((seq.user_id, split_behaviors(&known, &beams, &tree)))
            })
            .collect::<hirec_core::Result<_>>()?
    };
    let mut kkv = KkvStore::default();
    for (user, entry) in kkv_entries {
        if !entry.is_empty() {
            kkv.entries.insert(user, entry);
        }
    }
    if kkv.is_empty() {
        bail!("behavior splitting produced an empty store");
    }

    let item_vocab = ItemVocab::from_items(catalog_items(&tree));
    let hyper = RetrievalHyper {
        d_emb: cfg.retrieval.d_emb,
    };
    let train_cfg = RetrievalTrainConfig {
        epochs: cfg.retrieval.epochs,
        batch_size: cfg.retrieval.batch,
        learning_rate: cfg.retrieval.lr,
        negatives_per_positive: cfg.retrieval.negatives_per_positive,
        max_positives_per_category: cfg.retrieval.max_positives_per_category,
    };
    let (model, stats) = train_retrieval(
        &kkv,
        &tree,
        item_vocab.clone(),
        hyper.clone(),
        &train_cfg,
        seed,
    )?;
    model.save(&paths.retrieval())?;
    write_loss_csv(&paths.retrieval_loss(), &stats.epoch_losses)?;
    println!(
        "train-retrieval: {} users, loss {:.4} -> {:.4}, {} skipped pairs ({:.0}s)",
        kkv.entries.len(),
        stats.epoch_losses.first().copied().unwrap_or(0.0),
        stats.epoch_losses.last().copied().unwrap_or(0.0),
        stats.skipped_pairs,
        started.elapsed().as_secs_f64()
    );

    if cfg.retrieval.train_baseline {
        let catalog = catalog_items(&tree);
        let catalog_set: std::collections::HashSet<ItemId> = catalog.iter().copied().collect();
        let baseline_seqs: Vec<(u64, Vec<ItemId>)> = sequences
            .iter()
            .map(|s| {
                (
                    s.user_id,
                    s.items
                        .iter()
                        .copied()
                        .filter(|i| catalog_set.contains(i))
                        .collect::<Vec<ItemId>>(),
                )
            })
            .filter(|(_, items)| items.len() >= 2)
            .collect();
        let (baseline, bstats) = train_unified_baseline(
            &baseline_seqs,
            &catalog,
            item_vocab,
            hyper,
            &train_cfg,
            derive_seed(seed, "baseline"),
        )?;
        baseline.save(&paths.baseline())?;
        write_loss_csv(&paths.baseline_loss(), &bstats.epoch_losses)?;
        println!(
            "train-retrieval: baseline loss {:.4} -> {:.4}",
            bstats.epoch_losses.first().copied().unwrap_or(0.0),
            bstats.epoch_losses.last().copied().unwrap_or(0.0)
        );
    }
    write_manifest(&paths.work_dir, &manifest)?;
    Ok(true)
}

fn stage_evaluate(cfg: &PipelineConfig, paths: &StagePaths, force: bool) -> Result<bool> {
    let seed = stage_seed(cfg, "evaluate");
    let test = require(&paths.test_sequences(), "prepare-data")?;
    let tree_path = require(&paths.taxonomy(), "build-taxonomy")?;
    let miner_path = require(&paths.miner(), "train-miner")?;
    let retrieval_path = require(&paths.retrieval(), "train-retrieval")?;
    let needs_baseline = cfg
        .eval
        .arms
        .contains(&hirec_core::eval::Arm::BaselineUnified);
    let mut inputs = vec![
        test.clone(),
        tree_path.clone(),
        miner_path.clone(),
        retrieval_path.clone(),
    ];
    if needs_baseline {
        inputs.push(require(&paths.baseline(), "train-retrieval")?);
    }
    let outputs = vec![paths.metrics(), paths.details(), paths.report()];
    let manifest = build_manifest(
        "evaluate",
        &config_hash_input(cfg, &["eval", "miner"])?,
        &inputs,
        seed,
        &outputs,
    )?;
    if !force && is_up_to_date(&paths.work_dir, &manifest) {
        return Ok(false);
    }

    let test_users = read_sequences_jsonl(&test)?;
    let tree = CategoryTree::load(&tree_path)?;
    let miner = MinerModel::load(&miner_path)?;
    let retrieval = RetrievalModel::load(&retrieval_path)?;
    let baseline = if needs_baseline {
        Some(RetrievalModel::load(&paths.baseline())?)
    } else {
        None
    };

    let eval_cfg = EvalConfig {
        beam_size: cfg.miner.beam_size,
        m_list: cfg.eval.m.clone(),
        n_future: cfg.data.n_future,
        arms: cfg.eval.arms.clone(),
        seed,
    };
    let (report, details) = evaluate_pipeline(
        &test_users,
        &tree,
        &miner,
        &retrieval,
        baseline.as_ref(),
        &eval_cfg,
    )?;
    report.save_csv(&paths.metrics())?;
    write_details_jsonl(&paths.details(), &details)?;
    let mut report_text = String::new();
    report_text.push_str(
        "Recall@M = |top-M intersect future| / N (distinct items); HitRate@M = any overlap.\n",
    );
    report_text.push_str(&report.pretty());
    std::fs::write(paths.report(), &report_text)?;
    write_manifest(&paths.work_dir, &manifest)?;
    print!("{report_text}");
    Ok(true)
}

/// Chains all stages in order.
pub fn run_all(cfg: &PipelineConfig, paths: &StagePaths, force: bool) -> Result<()> {
    for stage in STAGES {
        let ran = run_stage(stage, cfg, paths, force)
            .with_context(|| format!("stage {stage} failed"))?;
        if !ran {
            println!("{stage}: up to date, skipping");
        }
    }
    Ok(())
}

