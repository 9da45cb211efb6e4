//! Recall@M / HitRate@M evaluation over held-out users.
//!
//! Each test user's sequence splits into a history and the following N
//! behaviors; the pipeline mines interests from the history, splits it per
//! interest, retrieves M candidates, and both metrics score the candidate
//! set against the future. The report carries one record per
//! (configuration arm, M).

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encoder_window, make_eval_split, UserSequence};
use crate::error::{Error, Result};
use crate::miner::{beam_search, BeamResult, MinerModel};
use crate::retrieval::{
    retrieve_user, split_behaviors, IndexSet, RetrievalFlags, RetrievalModel,
};
use crate::taxonomy::{CategoryTree, SemanticCategoryId};
use crate::{derive_seed, ItemId, UserId};

/// Fraction of retrieved future items: `|top-m ∩ future| / |future|`.
pub fn recall_at_m(retrieved: &[ItemId], future: &[ItemId], m: usize) -> Result<f64> {
    if future.is_empty() {
        return Err(Error::EmptyInput);
    }
    let top: HashSet<ItemId> = retrieved.iter().take(m).copied().collect();
    let wanted: HashSet<ItemId> = future.iter().copied().collect();
    Ok(top.intersection(&wanted).count() as f64 / future.len() as f64)
}

/// 1 when any future item appears in the top-m, else 0.
pub fn hitrate_at_m(retrieved: &[ItemId], future: &[ItemId], m: usize) -> Result<u8> {
    if future.is_empty() {
        return Err(Error::EmptyInput);
    }
    let wanted: HashSet<ItemId> = future.iter().copied().collect();
    Ok(u8::from(
        retrieved.iter().take(m).any(|i| wanted.contains(i)),
    ))
}

/// Evaluation arms. `Full` is the complete two-stage pipeline; the two
/// ablations toggle exactly one stage; `BaselineUnified` is the
/// single-embedding whole-library two-tower comparison model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Full,
    WholeLibrary,
    UnifiedSequence,
    BaselineUnified,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::WholeLibrary => "whole-library",
            Arm::UnifiedSequence => "unified-sequence",
            Arm::BaselineUnified => "baseline-unified",
        }
    }

    fn flags(&self) -> RetrievalFlags {
        match self {
            Arm::WholeLibrary => RetrievalFlags {
                whole_library: true,
                unified_sequence: false,
            },
            Arm::UnifiedSequence => RetrievalFlags {
                whole_library: false,
                unified_sequence: true,
            },
            _ => RetrievalFlags::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub beam_size: usize,
    pub m_list: Vec<usize>,
    /// Future window N.
    pub n_future: usize,
    pub arms: Vec<Arm>,
    pub seed: u64,
}

/// One aggregated row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config: String,
    pub m: usize,
    pub recall: f64,
    pub hitrate: f64,
    pub users_evaluated: usize,
    pub seed: u64,
    /// Wall time of the arm in seconds. Reported in the pretty table only;
    /// the CSV artifact must stay byte-identical across reruns of the same
    /// seed, so timing is excluded there.
    pub wall_time_s: f64,
}

/// Full evaluation output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<MetricsRecord>,
    /// Users skipped because their sequence was too short or their history
    /// had no catalog items.
    pub users_skipped: usize,
}

/// Per-user, per-arm, per-M retrieval detail for independent rescoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRetrievalDetail {
    pub user: UserId,
    pub config: String,
    pub m: usize,
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
    pub categories: Vec<String>,
    pub fallback: bool,
    pub future: Vec<ItemId>,
    pub recall: f64,
    pub hitrate: u8,
}

impl MetricsReport {
    /// Canonical CSV; excludes wall time so identical seeds produce
    /// identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,m,recall,hitrate,users_evaluated,seed\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                r.config, r.m, r.recall, r.hitrate, r.users_evaluated, r.seed
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Human-oriented table (includes wall time).
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>4} {:>10} {:>10} {:>8} {:>10}\n",
            "config", "M", "recall", "hitrate", "users", "time(s)"
        ));
        for r in &self.records {
            out.push_str(&format!(
                "{:<18} {:>4} {:>10.4} {:>10.4} {:>8} {:>10.1}\n",
                r.config, r.m, r.recall, r.hitrate, r.users_evaluated, r.wall_time_s
            ));
        }
        out.push_str(&format!("users skipped: {}\n", self.users_skipped));
        out
    }

    pub fn record(&self, config: &str, m: usize) -> Option<&MetricsRecord> {
        self.records
            .iter()
            .find(|r| r.config == config && r.m == m)
    }
}

/// Everything derived from one test user's history, shared across arms.
struct PreparedUser {
    user_id: UserId,
    history: Vec<ItemId>,
    future: Vec<ItemId>,
    beams: Vec<BeamResult>,
    kkv: BTreeMap<SemanticCategoryId, Vec<ItemId>>,
}

/// Runs the full two-stage pipeline over test users and scores every arm at
/// every M.
///
/// All models must have been trained on training users only; test users are
/// unseen and the user tower takes no user-id features, so cold users work
/// by construction. A deterministic 1%-sample brute-force recheck of the
/// aggregated metrics runs before returning.
pub fn evaluate_pipeline(
    test_users: &[UserSequence],
    tree: &CategoryTree,
    miner: &MinerModel,
    retrieval: &RetrievalModel,
    baseline: Option<&RetrievalModel>,
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<UserRetrievalDetail>)> {
    assert!(!cfg.m_list.is_empty(), "m_list must be nonempty");
    if cfg.arms.contains(&Arm::BaselineUnified) && baseline.is_none() {
        return Err(Error::InvalidArgument(
            "baseline arm requested without a baseline model".into(),
        ));
    }

    // Stage one per user: split, window, beams, behavior split.
    let mut skipped = 0usize;
    let mut prepared: Vec<PreparedUser> = Vec::new();
    let prep_results: Vec<Result<Option<PreparedUser>>> = test_users
        .par_iter()
        .map(|seq| prepare_user(seq, tree, miner, cfg))
        .collect();
    for p in prep_results {
        match p? {
            Some(p) => prepared.push(p),
            None => skipped += 1,
        }
    }
    if prepared.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }

    // Indexes for every category any user needs, built once.
    let catalog: Vec<ItemId> = retrieval.item_vocab.items().to_vec();
    let all_cats: Vec<SemanticCategoryId> = prepared
        .iter()
        .flat_map(|p| p.kkv.keys().cloned())
        .collect();
    let indexes = IndexSet::build(tree, &all_cats, &catalog, retrieval)?;
    let baseline_index = match baseline {
        Some(b) => Some(crate::retrieval::build_whole_index(
            &b.item_vocab.items().to_vec(),
            b,
        )?),
        None => None,
    };

    let mut report = MetricsReport {
        records: Vec::new(),
        users_skipped: skipped,
    };
    let mut details: Vec<UserRetrievalDetail> = Vec::new();

    for &arm in &cfg.arms {
        let started = Instant::now();
        for &m in &cfg.m_list {
            let user_rows: Vec<UserRetrievalDetail> = prepared
                .par_iter()
                .map(|p| score_user(p, arm, m, retrieval, baseline, &indexes, &baseline_index))
                .collect::<Result<_>>()?;
            let users = user_rows.len();
            let recall_sum: f64 = user_rows.iter().map(|r| r.recall).sum();
            let hit_sum: f64 = user_rows.iter().map(|r| f64::from(r.hitrate)).sum();
            report.records.push(MetricsRecord {
                config: arm.name().to_string(),
                m,
                recall: recall_sum / users as f64,
                hitrate: hit_sum / users as f64,
                users_evaluated: users,
                seed: cfg.seed,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
            details.extend(user_rows);
        }
    }

    verify_sample(&report, &details)?;
    Ok((report, details))
}

fn prepare_user(
    seq: &UserSequence,
    tree: &CategoryTree,
    miner: &MinerModel,
    cfg: &EvalConfig,
) -> Result<Option<PreparedUser>> {
    let split = match make_eval_split(seq, cfg.n_future) {
        Ok(split) => split,
        Err(Error::SequenceTooShort { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    // The system can only reason about cataloged items.
    let history: Vec<ItemId> = split
        .history
        .items
        .iter()
        .copied()
        .filter(|&i| miner.item_vocab.contains(i) && tree.contains_item(i))
        .collect();
    if history.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("eval-window-{}", seq.user_id),
    ));
    let window = encoder_window(&history, &mut rng);
    let beams = beam_search(miner, &window, tree, cfg.beam_size)?;
    let kkv = split_behaviors(&history, &beams, tree);
    Ok(Some(PreparedUser {
        user_id: seq.user_id,
        history,
        future: split.future,
        beams,
        kkv,
    }))
}

#[allow(clippy::too_many_arguments)]
fn score_user(
    p: &PreparedUser,
    arm: Arm,
    m: usize,
    retrieval: &RetrievalModel,
    baseline: Option<&RetrievalModel>,
    indexes: &IndexSet,
    baseline_index: &Option<crate::retrieval::SubLibraryIndex>,
) -> Result<UserRetrievalDetail> {
    let retrieved = match arm {
        Arm::BaselineUnified => {
            let model = baseline.expect("validated");
            let index = baseline_index.as_ref().expect("validated");
            let query = model.user_embedding(&p.history)?;
            let history_set: HashSet<ItemId> = p.history.iter().copied().collect();
            let ranked = crate::retrieval::topk(index, &query, index.len());
            let mut items = Vec::new();
            let mut scores = Vec::new();
            for (id, score) in ranked {
                if history_set.contains(&id) {
                    continue;
                }
                items.push(id);
                scores.push(score);
                if items.len() == m {
                    break;
                }
            }
            let categories = vec!["*".to_string(); items.len()];
            crate::retrieval::Retrieved {
                items,
                scores,
                categories,
                fallback: false,
            }
        }
        _ => retrieve_user(
            &p.history,
            &p.kkv,
            &p.beams,
            retrieval,
            indexes,
            m,
            arm.flags(),
        )?,
    };
    let recall = recall_at_m(&retrieved.items, &p.future, m)?;
    let hitrate = hitrate_at_m(&retrieved.items, &p.future, m)?;
    Ok(UserRetrievalDetail {
        user: p.user_id,
        config: arm.name().to_string(),
        m,
        items: retrieved.items,
        scores: retrieved.scores,
        categories: retrieved.categories,
        fallback: retrieved.fallback,
        future: p.future.clone(),
        recall,
        hitrate,
    })
}

/// Straight-line recomputation of both metrics on a deterministic 1% user
/// sample (at least one user) per record; errors on any mismatch.
fn verify_sample(report: &MetricsReport, details: &[UserRetrievalDetail]) -> Result<()> {
    for record in &report.records {
        let rows: Vec<&UserRetrievalDetail> = details
            .iter()
            .filter(|d| d.config == record.config && d.m == record.m)
            .collect();
        let sample = (rows.len() / 100).max(1);
        for row in rows.iter().step_by((rows.len() / sample).max(1)) {
            let mut hits = 0usize;
            for f in &row.future {
                if row.items.iter().take(row.m).any(|i| i == f) {
                    hits += 1;
                }
            }
            // Count distinct future items only, matching the set metric.
            let mut distinct_future = row.future.clone();
            distinct_future.sort_unstable();
            distinct_future.dedup();
            let mut distinct_hits = 0usize;
            for f in &distinct_future {
                if row.items.iter().take(row.m).any(|i| i == f) {
                    distinct_hits += 1;
                }
            }
            let recall = distinct_hits as f64 / row.future.len() as f64;
            let hit = u8::from(hits > 0);
            if (recall - row.recall).abs() > 1e-12 || hit != row.hitrate {
                return Err(Error::InvalidArgument(format!(
                    "metric self-check mismatch for user {} ({} @ {})",
                    row.user, row.config, row.m
                )));
            }
        }
    }
    Ok(())
}

/// Writes per-user details as line-delimited JSON for the independent
/// rescorer.
pub fn write_details_jsonl(path: &Path, details: &[UserRetrievalDetail]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in details {
        serde_json::to_writer(&mut file, d)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_details_jsonl(path: &Path) -> Result<Vec<UserRetrievalDetail>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Independent scorer: recomputes per-user metrics from serialized details
/// and re-aggregates. Used to cross-check a [`MetricsReport`] exactly.
pub fn rescore_details(details: &[UserRetrievalDetail], seed: u64) -> MetricsReport {
    let mut grouped: BTreeMap<(String, usize), Vec<&UserRetrievalDetail>> = BTreeMap::new();
    for d in details {
        grouped.entry((d.config.clone(), d.m)).or_default().push(d);
    }
    let mut records = Vec::new();
    for ((config, m), rows) in grouped {
        let mut recall_sum = 0.0;
        let mut hit_sum = 0.0;
        for row in &rows {
            let top: HashSet<ItemId> = row.items.iter().take(m).copied().collect();
            let future: HashSet<ItemId> = row.future.iter().copied().collect();
            let inter = top.intersection(&future).count();
            recall_sum += inter as f64 / row.future.len() as f64;
            hit_sum += f64::from(inter > 0);
        }
        records.push(MetricsRecord {
            config,
            m,
            recall: recall_sum / rows.len() as f64,
            hitrate: hit_sum / rows.len() as f64,
            users_evaluated: rows.len(),
            seed,
            wall_time_s: 0.0,
        });
    }
    MetricsReport {
        records,
        users_skipped: 0,
    }
}
