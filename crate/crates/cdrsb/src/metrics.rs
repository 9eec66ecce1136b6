//! Evaluation: RMSE/MAE for rating prediction, HR@K/NDCG@K for ranking, and
//! the split-level drivers that run a frozen model over a dataset split.

use std::collections::HashMap;

use crate::config::{derive_seed, Task};
use crate::dataset::{sample_negatives_rng, DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::regulate::effective_alpha;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Data("rmse needs aligned nonempty inputs".into()));
    }
    let mse: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(mse.sqrt())
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Data("mae needs aligned nonempty inputs".into()));
    }
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

/// `positions` holds, per ranked list, the 1-indexed rank of the single
/// held-out positive.
pub fn hit_rate_at_k(positions: &[usize], k: usize) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::Data("hit rate over no ranked lists".into()));
    }
    let hits = positions.iter().filter(|&&p| p <= k).count();
    Ok(hits as f64 / positions.len() as f64)
}

pub fn ndcg_at_k(positions: &[usize], k: usize) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::Data("ndcg over no ranked lists".into()));
    }
    let total: f64 = positions
        .iter()
        .map(|&p| {
            if p <= k {
                1.0 / ((p + 1) as f64).log2()
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / positions.len() as f64)
}

/// 1-indexed rank of the positive among the candidates, ordered by score
/// descending with ties broken by ascending item id.
pub fn rank_of_positive(positive: (u32, f64), negatives: &[(u32, f64)]) -> usize {
    let mut ahead = 0;
    for &(id, score) in negatives {
        if score > positive.1 || (score == positive.1 && id < positive.0) {
            ahead += 1;
        }
    }
    ahead + 1
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub task: Task,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    /// Diagnostics: the same errors without the [1, 5] reporting clamp.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_unclamped: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_unclamped: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hr_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub num_evaluated: usize,
    pub skipped: usize,
    pub seed: u64,
}

/// Per-list ranking detail for CSV export.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RankDetail {
    pub user: u32,
    pub positive_item: u32,
    pub rank: usize,
}

/// Frozen per-entity values an evaluation pass works from: interest/influence
/// splits for every item and for the users under evaluation.
pub struct EvalCaches {
    pub item_z: Vec<Vec<f64>>,
    pub item_c: Vec<Vec<f64>>,
    pub user_splits: HashMap<u32, (Vec<f64>, Vec<f64>)>,
}

pub fn build_eval_caches(model: &Model, bundle: &DatasetBundle, users: &[u32]) -> EvalCaches {
    let items: Vec<u32> = (0..bundle.n_items as u32).collect();
    let mut item_z = Vec::with_capacity(items.len());
    let mut item_c = Vec::with_capacity(items.len());
    for (z, c) in model.item_split_values(bundle, &items) {
        item_z.push(z);
        item_c.push(c);
    }
    let user_splits = users
        .iter()
        .copied()
        .zip(model.user_split_values(bundle, users))
        .collect();
    EvalCaches {
        item_z,
        item_c,
        user_splits,
    }
}

fn predict_with_gate(
    model: &Model,
    bundle: &DatasetBundle,
    caches: &EvalCaches,
    user: u32,
    item: u32,
) -> f64 {
    let alpha = effective_alpha(
        model.cfg.variant,
        bundle,
        &caches.item_z,
        user,
        item,
        model.cfg.similarity_threshold,
    );
    let (zu, cu) = &caches.user_splits[&user];
    let zv = &caches.item_z[item as usize];
    let cv = &caches.item_c[item as usize];
    model.predict_from_values(zu, cu, zv, cv, alpha)
}

pub fn evaluate_rating(model: &Model, bundle: &DatasetBundle, split: Split) -> Result<EvalResult> {
    let records: Vec<_> = bundle.split_records(split).collect();
    if records.is_empty() {
        return Err(Error::Data(format!("no {split:?} records to evaluate")));
    }
    let mut users: Vec<u32> = records.iter().map(|r| r.user).collect();
    users.sort_unstable();
    users.dedup();
    let caches = build_eval_caches(model, bundle, &users);
    let mut preds = Vec::with_capacity(records.len());
    let mut raw_preds = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in &records {
        let raw = predict_with_gate(model, bundle, &caches, r.user, r.item);
        raw_preds.push(raw);
        preds.push(model.finalize_prediction(raw));
        targets.push(r.rating as f64);
    }
    Ok(EvalResult {
        task: Task::Rating,
        split,
        rmse: Some(rmse(&preds, &targets)?),
        mae: Some(mae(&preds, &targets)?),
        rmse_unclamped: Some(rmse(&raw_preds, &targets)?),
        mae_unclamped: Some(mae(&raw_preds, &targets)?),
        hr_at_k: None,
        ndcg_at_k: None,
        k: None,
        num_evaluated: records.len(),
        skipped: 0,
        seed: model.cfg.seed,
    })
}

pub fn evaluate_ranking(
    model: &Model,
    bundle: &DatasetBundle,
    split: Split,
    num_negatives: usize,
    k: usize,
    seed: u64,
) -> Result<(EvalResult, Vec<RankDetail>)> {
    let mut records: Vec<_> = bundle.split_records(split).cloned().collect();
    if records.is_empty() {
        return Err(Error::Data(format!("no {split:?} records to evaluate")));
    }
    records.sort_by_key(|r| (r.user, r.item));
    let mut users: Vec<u32> = records.iter().map(|r| r.user).collect();
    users.sort_unstable();
    users.dedup();
    let caches = build_eval_caches(model, bundle, &users);

    let mut positions = Vec::with_capacity(records.len());
    let mut details = Vec::with_capacity(records.len());
    let mut skipped = 0;
    // One rng per user, advanced across that user's records in item order, so
    // evaluation order across users cannot change the outcome.
    let mut idx = 0;
    while idx < records.len() {
        let user = records[idx].user;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("rank-user:{user}")));
        while idx < records.len() && records[idx].user == user {
            let positive = records[idx].item;
            let negatives =
                sample_negatives_rng(bundle, user, num_negatives, &[positive], &mut rng);
            if negatives.is_empty() {
                skipped += 1;
                idx += 1;
                continue;
            }
            let scored: Vec<(u32, f64)> = negatives
                .iter()
                .map(|&v| (v, predict_with_gate(model, bundle, &caches, user, v)))
                .collect();
            let pos_score = predict_with_gate(model, bundle, &caches, user, positive);
            let rank = rank_of_positive((positive, pos_score), &scored);
            positions.push(rank);
            details.push(RankDetail {
                user,
                positive_item: positive,
                rank,
            });
            idx += 1;
        }
    }
    if positions.is_empty() {
        return Err(Error::Data(
            "every record was skipped during ranking evaluation".into(),
        ));
    }
    Ok((
        EvalResult {
            task: Task::Ranking,
            split,
            rmse: None,
            mae: None,
            rmse_unclamped: None,
            mae_unclamped: None,
            hr_at_k: Some(hit_rate_at_k(&positions, k)?),
            ndcg_at_k: Some(ndcg_at_k(&positions, k)?),
            k: Some(k),
            num_evaluated: positions.len(),
            skipped,
            seed,
        },
        details,
    ))
}

/// Task-dispatching convenience used by the training loop's per-epoch checks.
pub fn evaluate(model: &Model, bundle: &DatasetBundle, split: Split) -> Result<EvalResult> {
    match model.cfg.task {
        Task::Rating => evaluate_rating(model, bundle, split),
        Task::Ranking => evaluate_ranking(
            model,
            bundle,
            split,
            model.cfg.eval_negatives,
            model.cfg.eval_k,
            model.cfg.seed,
        )
        .map(|(r, _)| r),
    }
}

/// The score an early-stopping comparison should minimize: RMSE for rating,
/// negated NDCG for ranking.
pub fn primary_score(result: &EvalResult) -> f64 {
    match result.task {
        Task::Rating => result.rmse.expect("rating result carries rmse"),
        Task::Ranking => -result.ndcg_at_k.expect("ranking result carries ndcg"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::dataset::{build_bundle, Interaction};
    use rand::Rng;

    #[test]
    fn error_metric_oracles() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 3.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((rmse(&[1.0, 5.0], &[2.0, 2.0]).unwrap() - 5.0f64.sqrt()).abs() < 1e-12);
        assert!((mae(&[1.0, 5.0], &[2.0, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(rmse(&[], &[]).is_err());
        assert!(mae(&[1.0], &[]).is_err());
    }

    #[test]
    fn ranking_metric_oracles() {
        assert_eq!(hit_rate_at_k(&[1], 10).unwrap(), 1.0);
        assert_eq!(hit_rate_at_k(&[11], 10).unwrap(), 0.0);
        assert!((hit_rate_at_k(&[1, 5, 12], 10).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&[1], 10).unwrap(), 1.0);
        assert!((ndcg_at_k(&[3], 10).unwrap() - 0.5).abs() < 1e-12);
        assert!((ndcg_at_k(&[1, 3], 10).unwrap() - 0.75).abs() < 1e-12);
        assert!(hit_rate_at_k(&[], 10).is_err());
        assert!(ndcg_at_k(&[], 10).is_err());
    }

    #[test]
    fn ndcg_is_bracketed_by_hit_rate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let k = rng.gen_range(1..15);
            let positions: Vec<usize> = (0..n).map(|_| rng.gen_range(1..40)).collect();
            let hr = hit_rate_at_k(&positions, k).unwrap();
            let nd = ndcg_at_k(&positions, k).unwrap();
            assert!(nd <= hr + 1e-12);
            assert!(nd >= hr / ((k + 1) as f64).log2() - 1e-12);
        }
    }

    #[test]
    fn larger_k_never_hurts() {
        let positions = [1usize, 2, 7, 9, 14, 33];
        for k in 1..40 {
            let hr0 = hit_rate_at_k(&positions, k).unwrap();
            let hr1 = hit_rate_at_k(&positions, k + 1).unwrap();
            assert!(hr1 >= hr0);
            let n0 = ndcg_at_k(&positions, k).unwrap();
            let n1 = ndcg_at_k(&positions, k + 1).unwrap();
            assert!(n1 >= n0);
        }
    }

    #[test]
    fn rank_ties_break_toward_lower_item_ids() {
        // all scores tied: rank = 1 + count of negatives with smaller id
        let negs = vec![(2u32, 0.5), (7, 0.5), (9, 0.5)];
        assert_eq!(rank_of_positive((5, 0.5), &negs), 2);
        assert_eq!(rank_of_positive((1, 0.5), &negs), 1);
        assert_eq!(rank_of_positive((10, 0.5), &negs), 4);
        // strictly higher score wins regardless of id
        assert_eq!(rank_of_positive((10, 0.6), &negs), 1);
    }

    #[test]
    fn random_scores_land_near_the_uniform_expectation() {
        // With 99 negatives and k=10 a random scorer hits ~10% of the time.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut positions = Vec::new();
        for _ in 0..2500 {
            let pos = (1000u32, rng.gen::<f64>());
            let negs: Vec<(u32, f64)> = (0..99).map(|i| (i, rng.gen::<f64>())).collect();
            positions.push(rank_of_positive(pos, &negs));
        }
        let hr = hit_rate_at_k(&positions, 10).unwrap();
        assert!((0.07..=0.13).contains(&hr), "hr {hr} outside [0.07, 0.13]");
    }

    fn rating_fixture() -> (Model, DatasetBundle) {
        let records = vec![
            Interaction { user: 0, item: 0, rating: 4, split: Split::Train },
            Interaction { user: 0, item: 1, rating: 2, split: Split::Train },
            Interaction { user: 1, item: 2, rating: 5, split: Split::Train },
            Interaction { user: 0, item: 2, rating: 3, split: Split::Test },
            Interaction { user: 1, item: 0, rating: 4, split: Split::Test },
        ];
        let bundle = build_bundle(records, vec![(0, 1)], vec![0, 1], vec![0, 1, 2]);
        let mut cfg = RunConfig::default();
        cfg.d = 5;
        cfg.d_prime = 4;
        let model = Model::new(&cfg, 2, 3).unwrap();
        (model, bundle)
    }

    #[test]
    fn rating_evaluation_is_deterministic_and_clamped() {
        let (model, bundle) = rating_fixture();
        let a = evaluate_rating(&model, &bundle, Split::Test).unwrap();
        let b = evaluate_rating(&model, &bundle, Split::Test).unwrap();
        assert_eq!(a.rmse, b.rmse);
        assert_eq!(a.mae, b.mae);
        assert_eq!(a.num_evaluated, 2);
        let r = a.rmse.unwrap();
        let m = a.mae.unwrap();
        assert!(r >= m && m >= 0.0);
        // clamped errors can never exceed the widest possible rating gap
        assert!(r <= 4.0);
    }

    #[test]
    fn ranking_evaluation_is_reproducible_and_counts_lists() {
        let records = vec![
            Interaction { user: 0, item: 0, rating: 1, split: Split::Train },
            Interaction { user: 1, item: 1, rating: 1, split: Split::Train },
            Interaction { user: 0, item: 2, rating: 1, split: Split::Test },
            Interaction { user: 1, item: 3, rating: 1, split: Split::Test },
        ];
        let bundle = build_bundle(
            records,
            vec![(0, 1)],
            vec![0, 1],
            vec![0, 1, 2, 3, 4, 5, 6, 7],
        );
        let mut cfg = RunConfig::default();
        cfg.task = Task::Ranking;
        cfg.d = 5;
        cfg.d_prime = 4;
        let model = Model::new(&cfg, 2, 8).unwrap();
        let (a, details) = evaluate_ranking(&model, &bundle, Split::Test, 5, 3, 7).unwrap();
        let (b, _) = evaluate_ranking(&model, &bundle, Split::Test, 5, 3, 7).unwrap();
        assert_eq!(a.hr_at_k, b.hr_at_k);
        assert_eq!(a.ndcg_at_k, b.ndcg_at_k);
        assert_eq!(a.num_evaluated, 2);
        assert_eq!(details.len(), 2);
        assert!(details.iter().all(|d| d.rank >= 1 && d.rank <= 6));
    }

    #[test]
    fn users_with_no_possible_negatives_are_skipped() {
        // user 0 has interacted with every item, so no negatives exist
        let records = vec![
            Interaction { user: 0, item: 0, rating: 1, split: Split::Train },
            Interaction { user: 0, item: 1, rating: 1, split: Split::Test },
            Interaction { user: 1, item: 0, rating: 1, split: Split::Train },
            Interaction { user: 1, item: 1, rating: 1, split: Split::Test },
        ];
        let bundle = build_bundle(records, vec![], vec![0, 1], vec![0, 1, 2]);
        let mut cfg = RunConfig::default();
        cfg.task = Task::Ranking;
        cfg.d = 4;
        cfg.d_prime = 3;
        let model = Model::new(&cfg, 2, 3).unwrap();
        // user 0: items {0,1} interacted, item 2 remains -> evaluated.
        // user 1: same. Nobody skipped here...
        let (res, _) = evaluate_ranking(&model, &bundle, Split::Test, 5, 3, 7).unwrap();
        assert_eq!(res.skipped, 0);
        assert_eq!(res.num_evaluated, 2);
        // ...but with a 2-item catalog, test positives leave no negatives.
        let records = vec![
            Interaction { user: 0, item: 0, rating: 1, split: Split::Train },
            Interaction { user: 0, item: 1, rating: 1, split: Split::Test },
        ];
        let tight = build_bundle(records, vec![], vec![0], vec![0, 1]);
        let model = Model::new(&cfg, 1, 2).unwrap();
        let err = evaluate_ranking(&model, &tight, Split::Test, 5, 3, 7);
        // the only record is skipped -> nothing evaluable -> error
        assert!(err.is_err());
    }
}
