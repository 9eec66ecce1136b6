//! Synthetic social-recommendation corpora with planted ground truth.
//!
//! Users and items get Gaussian latent vectors; a directed nearest-neighbor
//! social graph connects users with similar latents. Interactions then come
//! from two causal channels, generated in interleaved rounds so adoption
//! always has something to adopt from:
//!
//! * interest: an item sampled by softmax over latent alignment, rated by an
//!   affine map of that alignment plus noise;
//! * conformity: an item copied uniformly from a random friend's
//!   already-generated history. If the item is misaligned with the user
//!   (alignment below the user's own median over all items), the user is
//!   following the crowd against their taste — rating forced low and the
//!   interaction labeled `conformity`. If it happens to align, the friend
//!   surfaced something genuinely fitting: it is rated as interest with a
//!   small positive lift and labeled `interest`.
//!
//! The labels give every friend-recommended pair an oracle gate value, which
//! is what lets the regulation rule be scored without any training.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::config::{derive_seed, RunConfig};
use crate::dataset::{build_bundle, split, DatasetBundle};
use crate::error::{Error, Result};
use crate::regulate::{cosine, regulation_weight};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    Interest,
    Conformity,
}

impl Cause {
    pub fn name(&self) -> &'static str {
        match self {
            Cause::Interest => "interest",
            Cause::Conformity => "conformity",
        }
    }
}

/// One generated interaction, in generation order.
#[derive(Clone, Copy, Debug)]
pub struct SynthEvent {
    pub step: usize,
    pub user: u32,
    pub item: u32,
    pub rating: u8,
    pub cause: Cause,
}

pub struct SynthGroundTruth {
    pub user_latents: Vec<Vec<f64>>,
    pub item_latents: Vec<Vec<f64>>,
    pub cause: HashMap<(u32, u32), Cause>,
    pub events: Vec<SynthEvent>,
}

/// The generator settings echoed into the corpus directory.
#[derive(Serialize)]
struct SynthEcho {
    seed: u64,
    users: usize,
    items: usize,
    latent_dim: usize,
    knn: usize,
    interactions_per_user: usize,
    conformity_rate: f64,
    rating_noise: f64,
    softmax_beta: f64,
    positive_boost: f64,
}

impl SynthEcho {
    fn from_config(cfg: &RunConfig) -> SynthEcho {
        SynthEcho {
            seed: cfg.seed,
            users: cfg.synth_users,
            items: cfg.synth_items,
            latent_dim: cfg.synth_latent_dim,
            knn: cfg.synth_knn,
            interactions_per_user: cfg.synth_interactions_per_user,
            conformity_rate: cfg.synth_conformity_rate,
            rating_noise: cfg.synth_rating_noise,
            softmax_beta: cfg.synth_softmax_beta,
            positive_boost: cfg.synth_positive_boost,
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Directed k-nearest-neighbor edges by cosine similarity of user latents.
fn knn_edges(latents: &[Vec<f64>], k: usize) -> Vec<(u32, u32)> {
    let n = latents.len();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, cosine(&latents[i], &latents[j])))
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(j, _) in sims.iter().take(k) {
            edges.push((i as u32, j as u32));
        }
    }
    edges
}

/// Affine rating map: alignment is standardized by sqrt(latent_dim) so the
/// scale is latent-dim independent; 3 is the neutral midpoint.
fn interest_rating(alignment: f64, latent_dim: usize, lift: f64, noise: f64) -> u8 {
    let standardized = alignment / (latent_dim as f64).sqrt();
    let r = (3.0 + 1.2 * standardized + lift + noise).round();
    r.clamp(1.0, 5.0) as u8
}

pub fn generate(cfg: &RunConfig) -> Result<(DatasetBundle, SynthGroundTruth)> {
    let n = cfg.synth_users;
    let m = cfg.synth_items;
    let dim = cfg.synth_latent_dim;
    let per_user = cfg.synth_interactions_per_user;
    if n == 0 || m == 0 || dim == 0 || per_user == 0 {
        return Err(Error::Config("synthetic corpus dimensions must be positive".into()));
    }
    if per_user > m {
        return Err(Error::Config(format!(
            "cannot draw {per_user} distinct items per user from a catalog of {m}"
        )));
    }
    if !(0.0..=1.0).contains(&cfg.synth_conformity_rate) {
        return Err(Error::Config("conformity rate must lie in [0, 1]".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth"));
    let user_latents = gaussian_matrix(n, dim, &mut rng);
    let item_latents = gaussian_matrix(m, dim, &mut rng);
    let edges = knn_edges(&user_latents, cfg.synth_knn);
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for &(a, b) in &edges {
        neighbors[a as usize].push(b);
    }

    // Per-user alignment with every item, plus its median as the personal
    // "do I actually like this" reference point.
    let mut alignments: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut medians = Vec::with_capacity(n);
    for u in 0..n {
        let a: Vec<f64> = (0..m).map(|v| dot(&user_latents[u], &item_latents[v])).collect();
        let mut sorted = a.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        alignments.push(a);
        medians.push(median);
    }

    let mut histories: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut seen: Vec<HashSet<u32>> = vec![HashSet::new(); n];
    let mut events: Vec<SynthEvent> = Vec::with_capacity(n * per_user);
    let mut cause_map: HashMap<(u32, u32), Cause> = HashMap::new();

    // Interest-channel draw: softmax(beta * alignment) over unseen items.
    let draw_interest = |u: usize, seen: &HashSet<u32>, rng: &mut ChaCha8Rng| -> u32 {
        let a = &alignments[u];
        let beta = cfg.synth_softmax_beta;
        let max_a = a
            .iter()
            .enumerate()
            .filter(|(v, _)| !seen.contains(&(*v as u32)))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut weights = Vec::with_capacity(m);
        let mut total = 0.0;
        for v in 0..m {
            let w = if seen.contains(&(v as u32)) {
                0.0
            } else {
                (beta * (a[v] - max_a) / (dim as f64).sqrt()).exp()
            };
            total += w;
            weights.push(w);
        }
        let mut t = rng.gen::<f64>() * total;
        for (v, &w) in weights.iter().enumerate() {
            t -= w;
            if t <= 0.0 && w > 0.0 {
                return v as u32;
            }
        }
        // numerically unreachable fallback: last unseen item
        (0..m as u32).rev().find(|v| !seen.contains(v)).expect("unseen item exists")
    };

    for round in 0..per_user {
        for u in 0..n {
            let step = round * n + u;
            let user = u as u32;
            let mut choice: Option<(u32, Cause)> = None;
            if cfg.synth_conformity_rate > 0.0 && rng.gen::<f64>() < cfg.synth_conformity_rate {
                // copy from a random friend's current history, if any friend
                // has adoptable (unseen-by-us) items
                let mut order = neighbors[u].clone();
                order.shuffle(&mut rng);
                'friends: for f in order {
                    let candidates: Vec<u32> = histories[f as usize]
                        .iter()
                        .copied()
                        .filter(|v| !seen[u].contains(v))
                        .collect();
                    if let Some(&item) = candidates.as_slice().choose(&mut rng) {
                        let aligned = alignments[u][item as usize] >= medians[u];
                        let cause = if aligned { Cause::Interest } else { Cause::Conformity };
                        choice = Some((item, cause));
                        break 'friends;
                    }
                }
            }
            let (item, cause) = match choice {
                Some(c) => c,
                None => (draw_interest(u, &seen[u], &mut rng), Cause::Interest),
            };
            let from_conformity_channel = choice.is_some();
            let rating = match cause {
                Cause::Conformity => {
                    if rng.gen::<f64>() < 0.6 {
                        1
                    } else {
                        2
                    }
                }
                Cause::Interest => {
                    let lift = if from_conformity_channel {
                        cfg.synth_positive_boost
                    } else {
                        0.0
                    };
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.synth_rating_noise;
                    interest_rating(alignments[u][item as usize], dim, lift, noise)
                }
            };
            seen[u].insert(item);
            histories[u].push(item);
            cause_map.insert((user, item), cause);
            events.push(SynthEvent {
                step,
                user,
                item,
                rating,
                cause,
            });
        }
    }

    let records: Vec<(u32, u32, u8)> = events.iter().map(|e| (e.user, e.item, e.rating)).collect();
    let labeled = split(
        records,
        (cfg.split_train, cfg.split_val, cfg.split_test),
        cfg.seed,
    )?;
    let bundle = build_bundle(
        labeled,
        edges,
        (0..n as i64).collect(),
        (0..m as i64).collect(),
    );
    Ok((
        bundle,
        SynthGroundTruth {
            user_latents,
            item_latents,
            cause: cause_map,
            events,
        },
    ))
}

/// Ground-truth gate for a friend-recommended pair: keep the influence
/// embedding (1) when the adoption was genuine interest, drop it (0) when it
/// was conformity.
pub fn oracle_alpha(
    gt: &SynthGroundTruth,
    bundle: &DatasetBundle,
    user: u32,
    item: u32,
) -> Result<u8> {
    if !bundle.friend_recommended(user, item) {
        return Err(Error::Data(format!(
            "pair ({user}, {item}) is not friend-recommended; no oracle gate exists"
        )));
    }
    match gt.cause.get(&(user, item)) {
        Some(Cause::Interest) => Ok(1),
        Some(Cause::Conformity) => Ok(0),
        None => Err(Error::Data(format!(
            "pair ({user}, {item}) was never generated"
        ))),
    }
}

/// Score the similarity gate against the oracle using the *planted* item
/// latents as embeddings, over every observed friend-recommended interaction.
/// This isolates the rule itself — no training involved.
pub fn latent_alpha_recovery(
    bundle: &DatasetBundle,
    gt: &SynthGroundTruth,
    threshold: f64,
) -> Result<f64> {
    let mut total = 0usize;
    let mut agree = 0usize;
    for r in &bundle.records {
        if !bundle.friend_recommended(r.user, r.item) {
            continue;
        }
        let expected = oracle_alpha(gt, bundle, r.user, r.item)?;
        let decision = regulation_weight(bundle, &gt.item_latents, r.user, r.item, threshold);
        total += 1;
        if decision.alpha == expected {
            agree += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data(
            "no friend-recommended interactions to score".into(),
        ));
    }
    Ok(agree as f64 / total as f64)
}

/// Write the corpus in the same formats the dataset loaders read, plus the
/// ground-truth labels and the generator settings.
pub fn write_corpus(
    dir: &Path,
    bundle: &DatasetBundle,
    gt: &SynthGroundTruth,
    cfg: &RunConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(&dir.display().to_string(), e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path.display().to_string(), e))
    };

    let mut ratings = String::new();
    for e in &gt.events {
        ratings.push_str(&format!("{}\t{}\t{}\n", e.user, e.item, e.rating));
    }
    write("ratings.tsv", ratings)?;

    let mut trust = String::new();
    for &(a, b) in &bundle.edges {
        trust.push_str(&format!("{a}\t{b}\n"));
    }
    write("trust.tsv", trust)?;

    let mut truth = String::from("user,item,cause,oracle_alpha\n");
    for e in &gt.events {
        let alpha = if bundle.friend_recommended(e.user, e.item) {
            match e.cause {
                Cause::Interest => "1",
                Cause::Conformity => "0",
            }
        } else {
            ""
        };
        truth.push_str(&format!("{},{},{},{}\n", e.user, e.item, e.cause.name(), alpha));
    }
    write("ground_truth.csv", truth)?;

    let echo = serde_json::to_string_pretty(&SynthEcho::from_config(cfg))
        .expect("generator settings serialize");
    write("synth_config.json", echo)
}
