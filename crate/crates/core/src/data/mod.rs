//! Interaction ingestion, behavior sequences, and evaluation splits.

pub mod synth;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ItemId, UserId};

/// One raw interaction record from a log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    /// Star rating when the source provides one; treated as an implicit
    /// positive either way.
    pub rating: Option<u8>,
    pub timestamp: u64,
}

/// A user's behavior sequence, sorted ascending by timestamp with ties
/// broken by input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    #[serde(rename = "user")]
    pub user_id: UserId,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<u64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// History/future split of one sequence for evaluation: the future is the
/// last `n` behaviors, the history everything before them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSplit {
    pub history: UserSequence,
    pub future: Vec<ItemId>,
}

/// Parses a `ratings.dat`-style file: one `UserID::MovieID::Rating::Timestamp`
/// record per line.
pub fn parse_movielens(path: &Path) -> Result<Vec<Interaction>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_ratings_line(&line, idx + 1)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

fn parse_ratings_line(line: &str, lineno: usize) -> Result<Interaction> {
    let mut fields = line.split("::");
    let mut next = |name: &str| {
        fields.next().ok_or_else(|| Error::MalformedLine {
            line: lineno,
            reason: format!("missing field {name}"),
        })
    };
    let user = next("user")?;
    let item = next("item")?;
    let rating = next("rating")?;
    let ts = next("timestamp")?;
    let bad = |field: &str, value: &str| Error::MalformedLine {
        line: lineno,
        reason: format!("invalid {field} {value:?}"),
    };
    let user_id: UserId = user.parse().map_err(|_| bad("user", user))?;
    let item_id: ItemId = item.parse().map_err(|_| bad("item", item))?;
    let rating: u8 = rating.parse().map_err(|_| bad("rating", rating))?;
    if !(1..=5).contains(&rating) {
        return Err(bad("rating", &rating.to_string()));
    }
    let timestamp: u64 = ts.parse().map_err(|_| bad("timestamp", ts))?;
    Ok(Interaction {
        user_id,
        item_id,
        rating: Some(rating),
        timestamp,
    })
}

/// Catalog-level preprocessing: drop items with fewer than
/// `min_item_interactions` interactions, then drop users left with fewer
/// than `min_user_interactions`. One pass of each, in that order.
pub fn preprocess_interactions(
    interactions: Vec<Interaction>,
    min_item_interactions: usize,
    min_user_interactions: usize,
) -> Vec<Interaction> {
    let mut item_counts: BTreeMap<ItemId, usize> = BTreeMap::new();
    for it in &interactions {
        *item_counts.entry(it.item_id).or_default() += 1;
    }
    let kept: Vec<Interaction> = interactions
        .into_iter()
        .filter(|it| item_counts[&it.item_id] >= min_item_interactions)
        .collect();
    let mut user_counts: BTreeMap<UserId, usize> = BTreeMap::new();
    for it in &kept {
        *user_counts.entry(it.user_id).or_default() += 1;
    }
    kept.into_iter()
        .filter(|it| user_counts[&it.user_id] >= min_user_interactions)
        .collect()
}

/// Groups interactions into per-user sequences sorted by (timestamp, input
/// position); users with fewer than `min_seq_len` interactions are dropped.
pub fn build_sequences(interactions: &[Interaction], min_seq_len: usize) -> Vec<UserSequence> {
    let mut per_user: BTreeMap<UserId, Vec<(u64, usize, ItemId)>> = BTreeMap::new();
    for (pos, it) in interactions.iter().enumerate() {
        per_user
            .entry(it.user_id)
            .or_default()
            .push((it.timestamp, pos, it.item_id));
    }
    per_user
        .into_iter()
        .filter(|(_, rows)| rows.len() >= min_seq_len)
        .map(|(user_id, mut rows)| {
            rows.sort_by_key(|&(ts, pos, _)| (ts, pos));
            UserSequence {
                user_id,
                items: rows.iter().map(|&(_, _, item)| item).collect(),
                timestamps: rows.iter().map(|&(ts, _, _)| ts).collect(),
            }
        })
        .collect()
}

/// Deterministic user-level split: `round(train_frac * n)` users go to the
/// training side, the rest to test.
pub fn split_users(
    sequences: Vec<UserSequence>,
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<UserSequence>, Vec<UserSequence>)> {
    assert!(
        train_frac > 0.0 && train_frac < 1.0,
        "train_frac must lie in (0, 1)"
    );
    let n = sequences.len();
    if n < 2 {
        return Err(Error::TooFewUsers(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (train_frac * n as f64).round() as usize;
    let mut train_flags = vec![false; n];
    for &i in order.iter().take(n_train) {
        train_flags[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (seq, is_train) in sequences.into_iter().zip(train_flags) {
        if is_train {
            train.push(seq);
        } else {
            test.push(seq);
        }
    }
    Ok((train, test))
}

/// Splits a sequence into history plus the last `n` behaviors as the future.
pub fn make_eval_split(sequence: &UserSequence, n: usize) -> Result<EvalSplit> {
    let len = sequence.len();
    if len <= n {
        return Err(Error::SequenceTooShort { len, n });
    }
    let cut = len - n;
    Ok(EvalSplit {
        history: UserSequence {
            user_id: sequence.user_id,
            items: sequence.items[..cut].to_vec(),
            timestamps: sequence.timestamps[..cut].to_vec(),
        },
        future: sequence.items[cut..].to_vec(),
    })
}

/// Short-term window kept verbatim at the end of the encoder input.
pub const SHORT_TERM_LEN: usize = 20;
/// Long-term budget sampled uniformly from everything before the short-term
/// window.
pub const LONG_TERM_SAMPLE: usize = 30;
/// Upper bound on encoder input length.
pub const MAX_ENCODER_ITEMS: usize = SHORT_TERM_LEN + LONG_TERM_SAMPLE;

/// Builds the bounded encoder input for one user: all of the last
/// [`SHORT_TERM_LEN`] items plus up to [`LONG_TERM_SAMPLE`] items sampled
/// uniformly without replacement from the earlier history, concatenated
/// oldest-first.
pub fn encoder_window(items: &[ItemId], rng: &mut ChaCha8Rng) -> Vec<ItemId> {
    if items.len() <= MAX_ENCODER_ITEMS {
        return items.to_vec();
    }
    let split = items.len() - SHORT_TERM_LEN;
    let pool = &items[..split];
    let mut picked = rand::seq::index::sample(rng, pool.len(), LONG_TERM_SAMPLE).into_vec();
    picked.sort_unstable();
    let mut out: Vec<ItemId> = picked.into_iter().map(|i| pool[i]).collect();
    out.extend_from_slice(&items[split..]);
    out
}

/// Writes sequences as line-delimited JSON records
/// `{"user":..,"items":[..],"timestamps":[..]}`.
pub fn write_sequences_jsonl(path: &Path, sequences: &[UserSequence]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in sequences {
        serde_json::to_writer(&mut file, seq)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads sequences written by [`write_sequences_jsonl`].
pub fn read_sequences_jsonl(path: &Path) -> Result<Vec<UserSequence>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inter(user: UserId, item: ItemId, ts: u64) -> Interaction {
        Interaction {
            user_id: user,
            item_id: item,
            rating: None,
            timestamp: ts,
        }
    }

    #[test]
    fn parses_documented_format() {
        let it = parse_ratings_line("1::1193::5::978300760", 1).unwrap();
        assert_eq!(
            it,
            Interaction {
                user_id: 1,
                item_id: 1193,
                rating: Some(5),
                timestamp: 978300760
            }
        );
    }

    #[test]
    fn empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.dat");
        std::fs::write(&path, "").unwrap();
        match parse_movielens(&path) {
            Err(Error::EmptyInput) => {}
            other => panic!("expected empty input error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.dat");
        std::fs::write(&path, "1::x::5::0\n").unwrap();
        match parse_movielens(&path) {
            Err(Error::MalformedLine { line: 1, .. }) => {}
            other => panic!("expected malformed line 1, got {other:?}"),
        }
    }

    #[test]
    fn rating_out_of_range_is_malformed() {
        assert!(parse_ratings_line("1::2::9::0", 3).is_err());
    }

    #[test]
    fn sequences_sort_by_timestamp() {
        let inters = vec![inter(7, 30, 3), inter(7, 10, 1), inter(7, 20, 2)];
        let seqs = build_sequences(&inters, 1);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].items, vec![10, 20, 30]);
        assert_eq!(seqs[0].timestamps, vec![1, 2, 3]);
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let inters = vec![inter(1, 5, 9), inter(1, 6, 9), inter(1, 4, 9)];
        let seqs = build_sequences(&inters, 1);
        assert_eq!(seqs[0].items, vec![5, 6, 4]);
    }

    #[test]
    fn short_users_dropped() {
        let inters: Vec<Interaction> = (0..4).map(|i| inter(3, i, i)).collect();
        assert!(build_sequences(&inters, 5).is_empty());
    }

    #[test]
    fn preprocessing_drops_rare_items_then_short_users() {
        // Item 100 appears twice, below the threshold of 3; user 2 then
        // falls below the user threshold.
        let mut inters = Vec::new();
        for t in 0..5 {
            inters.push(inter(1, 1, t));
        }
        inters.push(inter(1, 100, 5));
        inters.push(inter(2, 100, 0));
        inters.push(inter(2, 1, 1));
        inters.push(inter(2, 1, 2));
        let kept = preprocess_interactions(inters, 3, 3);
        assert!(kept.iter().all(|it| it.item_id != 100));
        assert!(kept.iter().all(|it| it.user_id != 2));
        assert_eq!(kept.len(), 5);
    }

    #[test]
    fn split_is_deterministic_with_expected_sizes() {
        let seqs: Vec<UserSequence> = (0..10)
            .map(|u| UserSequence {
                user_id: u,
                items: vec![1],
                timestamps: vec![0],
            })
            .collect();
        let (train_a, test_a) = split_users(seqs.clone(), 0.8, 42).unwrap();
        let (train_b, test_b) = split_users(seqs, 0.8, 42).unwrap();
        assert_eq!(train_a.len(), 8);
        assert_eq!(test_a.len(), 2);
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
    }

    #[test]
    fn split_rejects_single_user() {
        let seqs = vec![UserSequence {
            user_id: 1,
            items: vec![1],
            timestamps: vec![0],
        }];
        assert!(matches!(
            split_users(seqs, 0.5, 0),
            Err(Error::TooFewUsers(1))
        ));
    }

    #[test]
    fn eval_split_takes_suffix() {
        let seq = UserSequence {
            user_id: 1,
            items: vec![10, 11, 12, 13],
            timestamps: vec![0, 1, 2, 3],
        };
        let split = make_eval_split(&seq, 2).unwrap();
        assert_eq!(split.history.items, vec![10, 11]);
        assert_eq!(split.future, vec![12, 13]);
    }

    #[test]
    fn eval_split_requires_nonempty_history() {
        let seq = UserSequence {
            user_id: 1,
            items: (0..10).collect(),
            timestamps: (0..10).collect(),
        };
        assert!(make_eval_split(&seq, 10).is_err());
        let longer = UserSequence {
            user_id: 1,
            items: (0..30).collect(),
            timestamps: (0..30).collect(),
        };
        let split = make_eval_split(&longer, 10).unwrap();
        assert_eq!(split.history.len(), 20);
        assert_eq!(split.future.len(), 10);
    }

    #[test]
    fn window_is_bounded_and_keeps_short_term_suffix() {
        let items: Vec<ItemId> = (0..200).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let window = encoder_window(&items, &mut rng);
        assert_eq!(window.len(), MAX_ENCODER_ITEMS);
        assert_eq!(&window[LONG_TERM_SAMPLE..], &items[180..]);
        // Long-term sample stays oldest-first.
        let long = &window[..LONG_TERM_SAMPLE];
        assert!(long.windows(2).all(|w| w[0] < w[1]));
        // Deterministic for a fixed rng seed.
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(window, encoder_window(&items, &mut rng2));
    }

    #[test]
    fn window_passes_short_inputs_through() {
        let items: Vec<ItemId> = (0..MAX_ENCODER_ITEMS as u64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(encoder_window(&items, &mut rng), items);
    }

    #[test]
    fn sequences_roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seqs.jsonl");
        let seqs = vec![
            UserSequence {
                user_id: 1,
                items: vec![4, 5],
                timestamps: vec![10, 11],
            },
            UserSequence {
                user_id: 2,
                items: vec![6],
                timestamps: vec![3],
            },
        ];
        write_sequences_jsonl(&path, &seqs).unwrap();
        assert_eq!(read_sequences_jsonl(&path).unwrap(), seqs);
    }

    proptest! {
        #[test]
        fn sequences_always_time_sorted(rows in proptest::collection::vec((0u64..5, 0u64..50, 0u64..1000), 0..120)) {
            let inters: Vec<Interaction> =
                rows.iter().map(|&(u, i, t)| inter(u, i, t)).collect();
            for seq in build_sequences(&inters, 1) {
                prop_assert!(seq.timestamps.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(seq.items.len(), seq.timestamps.len());
            }
        }

        #[test]
        fn split_partitions_users(n in 2usize..40, frac in 0.05f64..0.95, seed in 0u64..5) {
            let seqs: Vec<UserSequence> = (0..n as u64)
                .map(|u| UserSequence { user_id: u, items: vec![1], timestamps: vec![0] })
                .collect();
            let (train, test) = split_users(seqs, frac, seed).unwrap();
            let mut all: Vec<UserId> = train.iter().chain(test.iter()).map(|s| s.user_id).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n as u64).collect::<Vec<_>>());
            prop_assert_eq!(train.len(), (frac * n as f64).round() as usize);
        }

        #[test]
        fn history_plus_future_reconstructs(len in 2usize..60, n in 1usize..20) {
            prop_assume!(len > n);
            let seq = UserSequence {
                user_id: 9,
                items: (0..len as u64).collect(),
                timestamps: (0..len as u64).collect(),
            };
            let split = make_eval_split(&seq, n).unwrap();
            let mut rebuilt = split.history.items.clone();
            rebuilt.extend_from_slice(&split.future);
            prop_assert_eq!(rebuilt, seq.items);
        }
    }
}
