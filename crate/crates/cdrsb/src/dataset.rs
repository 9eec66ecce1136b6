//! Dataset handling: TSV loading, activity filtering, dense reindexing,
//! seeded splitting, and the `DatasetBundle` every other module consumes.
//!
//! Histories are built from the train split only, so encoding and the
//! regulation weights never see validation or test interactions.

use crate::config::derive_seed;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{HashMap, HashSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawInteraction {
    pub user: i64,
    pub item: i64,
    pub rating: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RawTrust {
    pub truster: i64,
    pub trustee: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: u8,
    pub split: Split,
}

/// Everything training and evaluation need about one corpus.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub n_users: usize,
    pub n_items: usize,
    pub records: Vec<Interaction>,
    /// dense id -> original id
    pub user_orig: Vec<i64>,
    pub item_orig: Vec<i64>,
    /// directed trust edges (truster, trustee), deduplicated, sorted
    pub edges: Vec<(u32, u32)>,
    /// N(i): users that user i trusts, sorted
    pub neighbors: Vec<Vec<u32>>,
    /// C(i): train-split (item, rating) pairs per user, sorted by item
    pub user_hist: Vec<Vec<(u32, u8)>>,
    /// B(j): train-split (user, rating) pairs per item, sorted by user
    pub item_hist: Vec<Vec<(u32, u8)>>,
    /// Union of trusted neighbors' train histories, per user
    pub friend_items: Vec<HashSet<u32>>,
    /// Items each user interacted with in any split
    pub interacted: Vec<HashSet<u32>>,
}

impl DatasetBundle {
    /// True when some trusted neighbor of `user` has `item` in their train
    /// history — the precondition for the social channel to be regulated in.
    pub fn friend_recommended(&self, user: u32, item: u32) -> bool {
        self.friend_items[user as usize].contains(&item)
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &Interaction> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn summary(&self) -> BundleSummary {
        let num_ratings = self.records.len();
        let num_edges = self.edges.len();
        let n = self.n_users as f64;
        let m = self.n_items as f64;
        BundleSummary {
            num_users: self.n_users,
            num_items: self.n_items,
            num_ratings,
            num_trust_edges: num_edges,
            rating_density: num_ratings as f64 / (n * m),
            social_density: num_edges as f64 / (n * n),
            train_records: self.split_records(Split::Train).count(),
            validation_records: self.split_records(Split::Validation).count(),
            test_records: self.split_records(Split::Test).count(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct BundleSummary {
    pub num_users: usize,
    pub num_items: usize,
    pub num_ratings: usize,
    pub num_trust_edges: usize,
    pub rating_density: f64,
    pub social_density: f64,
    pub train_records: usize,
    pub validation_records: usize,
    pub test_records: usize,
}

fn parse_i64(path: &str, line: usize, field: &str, s: &str) -> Result<i64> {
    s.trim().parse::<i64>().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("invalid {field} {s:?}"),
    })
}

/// Load `user <tab> item <tab> rating` lines. `#` lines are comments; blank
/// lines are skipped; duplicate (user, item) pairs keep the last rating seen.
pub fn load_ratings(path: &str) -> Result<Vec<RawInteraction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<(i64, i64)> = Vec::new();
    let mut last: HashMap<(i64, i64), u8> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (u, i, r) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), Some(r)) => (u, i, r),
            _ => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: lineno,
                    msg: "expected user<TAB>item<TAB>rating".to_string(),
                })
            }
        };
        let user = parse_i64(path, lineno, "user id", u)?;
        let item = parse_i64(path, lineno, "item id", i)?;
        // ratings may be written as integers or as e.g. "4.0"
        let rating_f = r.trim().parse::<f64>().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg: format!("invalid rating {r:?}"),
        })?;
        if rating_f.fract() != 0.0 || !(1.0..=5.0).contains(&rating_f) {
            return Err(Error::Parse {
                path: path.to_string(),
                line: lineno,
                msg: format!("rating {r:?} outside 1..=5"),
            });
        }
        let key = (user, item);
        if !last.contains_key(&key) {
            order.push(key);
        }
        last.insert(key, rating_f as u8);
    }
    Ok(order
        .into_iter()
        .map(|key| RawInteraction {
            user: key.0,
            item: key.1,
            rating: last[&key],
        })
        .collect())
}

/// Load `truster <tab> trustee` lines; self-loops dropped, duplicates merged.
pub fn load_trust(path: &str) -> Result<Vec<RawTrust>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen: HashSet<(i64, i64)> = HashSet::new();
    let mut edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (a, b) = match (fields.next(), fields.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: lineno,
                    msg: "expected truster<TAB>trustee".to_string(),
                })
            }
        };
        let truster = parse_i64(path, lineno, "truster id", a)?;
        let trustee = parse_i64(path, lineno, "trustee id", b)?;
        if truster == trustee {
            continue;
        }
        if seen.insert((truster, trustee)) {
            edges.push(RawTrust { truster, trustee });
        }
    }
    Ok(edges)
}

/// Drop users and items with fewer than `min_count` interactions, repeating
/// until the counts stabilize (removing an item can push a user below the
/// threshold and vice versa).
pub fn filter_min_interactions(
    mut records: Vec<RawInteraction>,
    min_count: usize,
) -> Vec<RawInteraction> {
    if min_count <= 1 {
        return records;
    }
    loop {
        let mut user_count: HashMap<i64, usize> = HashMap::new();
        let mut item_count: HashMap<i64, usize> = HashMap::new();
        for r in &records {
            *user_count.entry(r.user).or_default() += 1;
            *item_count.entry(r.item).or_default() += 1;
        }
        let before = records.len();
        records.retain(|r| user_count[&r.user] >= min_count && item_count[&r.item] >= min_count);
        if records.len() == before {
            return records;
        }
    }
}

/// Keep a seeded uniform fraction of users (and their interactions).
pub fn subsample_users(
    records: Vec<RawInteraction>,
    fraction: f64,
    seed: u64,
) -> Vec<RawInteraction> {
    if fraction >= 1.0 {
        return records;
    }
    let mut users: Vec<i64> = records.iter().map(|r| r.user).collect();
    users.sort_unstable();
    users.dedup();
    let keep_count = ((users.len() as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subsample"));
    users.shuffle(&mut rng);
    let keep: HashSet<i64> = users.into_iter().take(keep_count).collect();
    records.into_iter().filter(|r| keep.contains(&r.user)).collect()
}

/// Replace every rating with the implicit-feedback label 1.
pub fn binarize_for_ranking(records: &mut [RawInteraction]) {
    for r in records.iter_mut() {
        r.rating = 1;
    }
}

pub struct Reindexed {
    pub records: Vec<(u32, u32, u8)>,
    pub edges: Vec<(u32, u32)>,
    pub user_orig: Vec<i64>,
    pub item_orig: Vec<i64>,
}

/// Assign dense ids ordered by original id; trust edges with an endpoint
/// that has no surviving interactions are dropped.
pub fn reindex(records: &[RawInteraction], trust: &[RawTrust]) -> Reindexed {
    let mut user_orig: Vec<i64> = records.iter().map(|r| r.user).collect();
    user_orig.sort_unstable();
    user_orig.dedup();
    let mut item_orig: Vec<i64> = records.iter().map(|r| r.item).collect();
    item_orig.sort_unstable();
    item_orig.dedup();
    let user_idx: HashMap<i64, u32> = user_orig
        .iter()
        .enumerate()
        .map(|(k, &v)| (v, k as u32))
        .collect();
    let item_idx: HashMap<i64, u32> = item_orig
        .iter()
        .enumerate()
        .map(|(k, &v)| (v, k as u32))
        .collect();
    let dense_records = records
        .iter()
        .map(|r| (user_idx[&r.user], item_idx[&r.item], r.rating))
        .collect();
    let mut edges: Vec<(u32, u32)> = trust
        .iter()
        .filter_map(|e| {
            match (user_idx.get(&e.truster), user_idx.get(&e.trustee)) {
                (Some(&a), Some(&b)) => Some((a, b)),
                _ => None,
            }
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    Reindexed {
        records: dense_records,
        edges,
        user_orig,
        item_orig,
    }
}

/// Largest-remainder split counts for (train, val, test) fractions.
fn split_counts(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fr = [fractions.0, fractions.1, fractions.2];
    let mut counts = [0usize; 3];
    let mut rema: Vec<(f64, usize)> = Vec::with_capacity(3);
    let mut assigned = 0usize;
    for k in 0..3 {
        let exact = n as f64 * fr[k];
        counts[k] = exact.floor() as usize;
        assigned += counts[k];
        rema.push((exact - exact.floor(), k));
    }
    // distribute the remainder by largest fractional part, ties by split order
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut left = n - assigned;
    for (_, k) in rema {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Seeded uniform split assignment over records.
pub fn split(
    records: Vec<(u32, u32, u8)>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<Interaction>> {
    if records.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 records to populate train/validation/test, got {}",
            records.len()
        )));
    }
    let counts = split_counts(records.len(), fractions);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    idx.shuffle(&mut rng);
    let mut assignment = vec![Split::Train; records.len()];
    for (pos, &i) in idx.iter().enumerate() {
        assignment[i] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(records
        .into_iter()
        .zip(assignment)
        .map(|((user, item, rating), split)| Interaction {
            user,
            item,
            rating,
            split,
        })
        .collect())
}

/// Assemble the bundle; histories come from the train split only.
pub fn build_bundle(
    records: Vec<Interaction>,
    edges: Vec<(u32, u32)>,
    user_orig: Vec<i64>,
    item_orig: Vec<i64>,
) -> DatasetBundle {
    let n_users = user_orig.len();
    let n_items = item_orig.len();
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n_users];
    for &(a, b) in &edges {
        neighbors[a as usize].push(b);
    }
    for nb in neighbors.iter_mut() {
        nb.sort_unstable();
        nb.dedup();
    }
    let mut user_hist: Vec<Vec<(u32, u8)>> = vec![Vec::new(); n_users];
    let mut item_hist: Vec<Vec<(u32, u8)>> = vec![Vec::new(); n_items];
    let mut interacted: Vec<HashSet<u32>> = vec![HashSet::new(); n_users];
    for r in &records {
        interacted[r.user as usize].insert(r.item);
        if r.split == Split::Train {
            user_hist[r.user as usize].push((r.item, r.rating));
            item_hist[r.item as usize].push((r.user, r.rating));
        }
    }
    for h in user_hist.iter_mut() {
        h.sort_unstable();
    }
    for h in item_hist.iter_mut() {
        h.sort_unstable();
    }
    let friend_items: Vec<HashSet<u32>> = (0..n_users)
        .map(|u| {
            let mut s = HashSet::new();
            for &w in &neighbors[u] {
                for &(item, _) in &user_hist[w as usize] {
                    s.insert(item);
                }
            }
            s
        })
        .collect();
    DatasetBundle {
        n_users,
        n_items,
        records,
        user_orig,
        item_orig,
        edges,
        neighbors,
        user_hist,
        item_hist,
        friend_items,
        interacted,
    }
}

/// Full preparation pipeline from raw files to a bundle.
pub fn prepare(
    ratings: Vec<RawInteraction>,
    trust: Vec<RawTrust>,
    min_interactions: usize,
    subsample: f64,
    fractions: (f64, f64, f64),
    seed: u64,
    ranking: bool,
) -> Result<DatasetBundle> {
    let mut records = subsample_users(ratings, subsample, seed);
    records = filter_min_interactions(records, min_interactions);
    if ranking {
        binarize_for_ranking(&mut records);
    }
    let re = reindex(&records, &trust);
    let split_records = split(re.records, fractions, seed)?;
    Ok(build_bundle(split_records, re.edges, re.user_orig, re.item_orig))
}

/// Uniform sample without replacement from the items `user` never interacted
/// with (any split), excluding `exclude`. Deterministic for a given seed.
pub fn sample_negatives(
    bundle: &DatasetBundle,
    user: u32,
    count: usize,
    exclude: &[u32],
    seed: u64,
) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_negatives_rng(bundle, user, count, exclude, &mut rng)
}

pub fn sample_negatives_rng(
    bundle: &DatasetBundle,
    user: u32,
    count: usize,
    exclude: &[u32],
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let interacted = &bundle.interacted[user as usize];
    let excluded: HashSet<u32> = exclude.iter().copied().collect();
    let m = bundle.n_items as u32;
    let available = (m as usize)
        .saturating_sub(interacted.len())
        .saturating_sub(excluded.iter().filter(|e| !interacted.contains(e)).count());
    let want = count.min(available);
    let mut out: Vec<u32> = Vec::with_capacity(want);
    let mut taken: HashSet<u32> = HashSet::with_capacity(want);
    // rejection sampling first; falls back to exact enumeration when the
    // candidate set is too sparse for rejection to finish quickly
    let mut attempts = 0usize;
    let max_attempts = 20 * count + 100;
    while out.len() < want && attempts < max_attempts {
        attempts += 1;
        let cand = rng.gen_range(0..m);
        if interacted.contains(&cand) || excluded.contains(&cand) || taken.contains(&cand) {
            continue;
        }
        taken.insert(cand);
        out.push(cand);
    }
    if out.len() < want {
        let mut rest: Vec<u32> = (0..m)
            .filter(|c| {
                !interacted.contains(c) && !excluded.contains(c) && !taken.contains(c)
            })
            .collect();
        rest.shuffle(rng);
        for c in rest.into_iter().take(want - out.len()) {
            out.push(c);
        }
    }
    out
}
