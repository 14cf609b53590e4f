//! Interaction logs, the leave-last-two split, and training-sequence sampling.

mod features;
pub mod synthetic;

pub use features::{load_features, load_features_tsv, write_features, Modality, ModalityFeatures};

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default user filter (5-core).
pub const DEFAULT_MIN_INTERACTIONS: usize = 5;

/// Per-user, temporally ordered item sequences with dense indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub num_users: usize,
    pub num_items: usize,
    pub sequences: Vec<Vec<usize>>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionLog {
    /// Build a log from already-indexed sequences; ids become the decimal indices.
    pub fn from_sequences(num_items: usize, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(bad) = sequences.iter().flatten().find(|&&i| i >= num_items) {
            return Err(Error::Precondition(format!(
                "item index {bad} out of range for {num_items} items"
            )));
        }
        Ok(Self {
            num_users: sequences.len(),
            num_items,
            user_ids: (0..sequences.len()).map(|u| u.to_string()).collect(),
            item_ids: (0..num_items).map(|i| i.to_string()).collect(),
            sequences,
        })
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Percentage of empty cells in the user × item matrix.
    pub fn sparsity_percent(&self) -> f64 {
        let cells = self.num_users as f64 * self.num_items as f64;
        100.0 * (1.0 - self.num_interactions() as f64 / cells)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Load a tab-separated `user_id  item_id  order_key` file.
///
/// Extra trailing columns (ratings) are ignored; every row is a positive
/// interaction. Blank lines and lines starting with `#` are skipped.
pub fn load_interactions(path: &Path, min_interactions: usize) -> Result<InteractionLog> {
    let file = File::open(path)?;
    parse_interactions(BufReader::new(file), path, min_interactions)
}

pub fn parse_interactions(
    reader: impl Read,
    path: &Path,
    min_interactions: usize,
) -> Result<InteractionLog> {
    struct Row {
        user: usize,
        item: usize,
        key: i64,
    }
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut users: Vec<String> = Vec::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut items: Vec<String> = Vec::new();
    let mut rows = Vec::new();

    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let mut cols = trimmed.split('\t');
        let (Some(u), Some(i), Some(k)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err(
                "expected user_id<TAB>item_id<TAB>order_key".into(),
            ));
        };
        if u.is_empty() || i.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let key: i64 = k
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("order_key `{k}` is not an integer")))?;
        let user = *user_index.entry(u.to_string()).or_insert_with(|| {
            users.push(u.to_string());
            users.len() - 1
        });
        let item = *item_index.entry(i.to_string()).or_insert_with(|| {
            items.push(i.to_string());
            items.len() - 1
        });
        rows.push(Row { user, item, key });
    }

    let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); users.len()];
    for r in &rows {
        per_user[r.user].push((r.key, r.item));
    }
    // Stable sort keeps file order on equal keys.
    per_user.iter_mut().for_each(|s| s.sort_by_key(|&(k, _)| k));

    let mut item_remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut new_items = Vec::new();
    let mut sequences = Vec::new();
    let mut user_ids = Vec::new();
    for (u, seq) in per_user.into_iter().enumerate() {
        if seq.len() < min_interactions {
            continue;
        }
        let mapped = seq
            .into_iter()
            .map(|(_, raw)| {
                *item_remap.entry(raw).or_insert_with(|| {
                    new_items.push(items[raw].clone());
                    new_items.len() - 1
                })
            })
            .collect();
        sequences.push(mapped);
        user_ids.push(users[u].clone());
    }
    if sequences.is_empty() {
        return Err(Error::NoEligibleUsers { min_interactions });
    }
    Ok(InteractionLog {
        num_users: sequences.len(),
        num_items: new_items.len(),
        sequences,
        user_ids,
        item_ids: new_items,
    })
}

/// Evaluation phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Valid,
    Test,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Valid => "valid",
            Phase::Test => "test",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "valid" | "validation" => Ok(Phase::Valid),
            "test" => Ok(Phase::Test),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

/// Leave-last-two partition of every user's sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitView {
    pub num_items: usize,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitView {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    /// Items that must not be recommended for `user` in `phase`.
    pub fn history(&self, user: usize, phase: Phase) -> Vec<usize> {
        full_sequence_for_eval(self, user, phase, usize::MAX)
    }

    pub fn target(&self, user: usize, phase: Phase) -> usize {
        match phase {
            Phase::Valid => self.valid[user],
            Phase::Test => self.test[user],
        }
    }
}

pub fn make_splits(log: &InteractionLog) -> Result<SplitView> {
    let mut train = Vec::with_capacity(log.num_users);
    let mut valid = Vec::with_capacity(log.num_users);
    let mut test = Vec::with_capacity(log.num_users);
    for (u, seq) in log.sequences.iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            return Err(Error::Precondition(format!(
                "user {} has {n} interactions; the split needs at least 3",
                log.user_ids.get(u).map_or("?", String::as_str)
            )));
        }
        train.push(seq[..n - 2].to_vec());
        valid.push(seq[n - 2]);
        test.push(seq[n - 1]);
    }
    Ok(SplitView {
        num_items: log.num_items,
        train,
        valid,
        test,
    })
}

/// Draw a cut `t ∈ [1, n-1]` uniformly and return `(seq[..t], seq[t])`.
///
/// Returns `None` for sequences shorter than two items.
pub fn sample_training_subsequence<'a, R: Rng + ?Sized>(
    train_seq: &'a [usize],
    rng: &mut R,
) -> Option<(&'a [usize], usize)> {
    if train_seq.len() < 2 {
        return None;
    }
    let cut = rng.random_range(1..train_seq.len());
    Some((&train_seq[..cut], train_seq[cut]))
}

/// Most recent `max_len` items preceding the `phase` target.
pub fn full_sequence_for_eval(
    split: &SplitView,
    user: usize,
    phase: Phase,
    max_len: usize,
) -> Vec<usize> {
    let mut seq = split.train[user].clone();
    if phase == Phase::Test {
        seq.push(split.valid[user]);
    }
    let skip = seq.len().saturating_sub(max_len);
    seq.split_off(skip)
}

/// A user subsample with its item re-indexing.
#[derive(Debug, Clone)]
pub struct Downsampled {
    pub log: InteractionLog,
    /// `item_map[new] = old` item index.
    pub item_map: Vec<usize>,
}

impl Downsampled {
    pub fn filter_features(&self, features: &ModalityFeatures) -> Result<ModalityFeatures> {
        features.select_rows(&self.item_map)
    }
}

/// Uniform user subsample without replacement.
///
/// Kept users stay in their original relative order; items are re-indexed in
/// order of first appearance among the kept users.
pub fn downsample<R: Rng + ?Sized>(
    log: &InteractionLog,
    target_users: usize,
    rng: &mut R,
) -> Result<Downsampled> {
    if target_users == 0 {
        return Err(Error::Precondition("target_users must be positive".into()));
    }
    if target_users > log.num_users {
        return Err(Error::Precondition(format!(
            "cannot keep {target_users} of {} users",
            log.num_users
        )));
    }
    let mut kept = index::sample(rng, log.num_users, target_users).into_vec();
    kept.sort_unstable();

    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut item_map = Vec::new();
    let mut sequences = Vec::with_capacity(kept.len());
    for &u in &kept {
        let seq = log.sequences[u]
            .iter()
            .map(|&old| {
                *remap.entry(old).or_insert_with(|| {
                    item_map.push(old);
                    item_map.len() - 1
                })
            })
            .collect();
        sequences.push(seq);
    }
    let new_log = InteractionLog {
        num_users: kept.len(),
        num_items: item_map.len(),
        sequences,
        user_ids: kept.iter().map(|&u| log.user_ids[u].clone()).collect(),
        item_ids: item_map.iter().map(|&i| log.item_ids[i].clone()).collect(),
    };
    Ok(Downsampled {
        log: new_log,
        item_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn parse(text: &str, min: usize) -> Result<InteractionLog> {
        parse_interactions(text.as_bytes(), Path::new("mem.tsv"), min)
    }

    #[test]
    fn filter_drops_short_users() {
        let mut text = String::new();
        for (u, n) in [("a", 5), ("b", 4), ("c", 2)] {
            for k in 0..n {
                text.push_str(&format!("{u}\ti{k}\t{k}\n"));
            }
        }
        let log = parse(&text, 3).unwrap();
        assert_eq!(log.num_users, 2);
        assert_eq!(log.user_ids, vec!["a", "b"]);
        assert_eq!(log.num_items, 5);
    }

    #[test]
    fn duplicates_are_kept_and_order_is_stable() {
        let text = "u\tx\t2\nu\ty\t1\nu\tx\t2\nu\tz\t1\n";
        let log = parse(text, 1).unwrap();
        let ids: Vec<&str> = log.sequences[0]
            .iter()
            .map(|&i| log.item_ids[i].as_str())
            .collect();
        assert_eq!(ids, vec!["y", "z", "x", "x"]);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("u\ti\t1\nu\ti\tnot-a-number\n", 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse("u\ti\n", 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_result_is_an_error() {
        let err = parse("u\ti\t1\n", 5).unwrap_err();
        assert!(matches!(err, Error::NoEligibleUsers { .. }));
    }

    #[test]
    fn split_rules() {
        let log =
            InteractionLog::from_sequences(5, vec![vec![0, 1, 2, 3, 4], vec![0, 1, 2]]).unwrap();
        let sp = make_splits(&log).unwrap();
        assert_eq!(sp.train[0], vec![0, 1, 2]);
        assert_eq!((sp.valid[0], sp.test[0]), (3, 4));
        assert_eq!(sp.train[1], vec![0]);
        assert_eq!((sp.valid[1], sp.test[1]), (1, 2));

        let short = InteractionLog::from_sequences(2, vec![vec![0, 1]]).unwrap();
        assert!(matches!(make_splits(&short), Err(Error::Precondition(_))));
    }

    #[test]
    fn split_count_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<Vec<usize>> = (0..100)
            .map(|_| {
                let n = rng.random_range(3..20);
                (0..n).map(|_| rng.random_range(0..40)).collect()
            })
            .collect();
        let log = InteractionLog::from_sequences(40, seqs).unwrap();
        let sp = make_splits(&log).unwrap();
        let train_total: usize = sp.train.iter().map(Vec::len).sum();
        assert_eq!(train_total, log.num_interactions() - 200);
    }

    #[test]
    fn subsequence_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_training_subsequence(&[7, 9], &mut rng),
            Some((&[7][..], 9))
        );
        assert_eq!(sample_training_subsequence(&[7], &mut rng), None);

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| {
                    sample_training_subsequence(&[1, 2, 3, 4, 5], &mut r)
                        .unwrap()
                        .1
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn subsequence_cut_is_uniform() {
        // Chi-square with one degree of freedom; 6.635 is the 0.01 critical value.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut first = 0usize;
        for _ in 0..n {
            let (prefix, target) = sample_training_subsequence(&[0, 1, 2], &mut rng).unwrap();
            match (prefix, target) {
                ([0], 1) => first += 1,
                ([0, 1], 2) => {}
                other => panic!("impossible draw {other:?}"),
            }
        }
        let expected = n as f64 / 2.0;
        let chi2 = 2.0 * (first as f64 - expected).powi(2) / expected;
        assert!(chi2 < 6.635, "chi2 = {chi2}");
    }

    #[test]
    fn eval_sequences() {
        let sp = SplitView {
            num_items: 10,
            train: vec![vec![0, 1, 2]],
            valid: vec![3],
            test: vec![4],
        };
        assert_eq!(
            full_sequence_for_eval(&sp, 0, Phase::Test, 50),
            vec![0, 1, 2, 3]
        );
        assert_eq!(
            full_sequence_for_eval(&sp, 0, Phase::Valid, 50),
            vec![0, 1, 2]
        );
        assert_eq!(full_sequence_for_eval(&sp, 0, Phase::Test, 2), vec![2, 3]);
    }

    #[test]
    fn downsample_identity_and_errors() {
        let log =
            InteractionLog::from_sequences(6, vec![vec![5, 1, 2], vec![2, 3, 4], vec![0, 1, 5]])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = downsample(&log, 3, &mut rng).unwrap();
        assert_eq!(ds.log.num_users, 3);
        assert_eq!(ds.log.num_interactions(), log.num_interactions());
        for (new_seq, old_seq) in ds.log.sequences.iter().zip(&log.sequences) {
            let back: Vec<usize> = new_seq.iter().map(|&i| ds.item_map[i]).collect();
            assert_eq!(&back, old_seq);
        }
        assert!(downsample(&log, 0, &mut rng).is_err());
        assert!(downsample(&log, 4, &mut rng).is_err());
    }

    #[test]
    fn downsample_retention_is_uniform() {
        let log =
            InteractionLog::from_sequences(3, (0..10).map(|_| vec![0, 1, 2]).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 10_000;
        let mut kept = [0usize; 10];
        for _ in 0..trials {
            let ds = downsample(&log, 5, &mut rng).unwrap();
            for id in &ds.log.user_ids {
                kept[id.parse::<usize>().unwrap()] += 1;
            }
        }
        for k in kept {
            let freq = k as f64 / trials as f64;
            assert!((freq - 0.5).abs() <= 0.05, "{freq}");
        }
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let log = InteractionLog::from_sequences(4, vec![vec![0, 1, 2], vec![3, 2, 1]]).unwrap();
        let a = log.to_json().unwrap();
        let back: InteractionLog = serde_json::from_str(&a).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_json().unwrap(), a);
    }
}
