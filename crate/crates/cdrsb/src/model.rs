//! The full model: graph encoder, disentangling networks, variational heads,
//! and the prediction head, wired into one differentiable loss.
//!
//! `forward_batch` builds a single tape for a batch of (user, item, target,
//! alpha) samples. Each distinct user/item is encoded once; the per-pair
//! fused embeddings feed the predictor; the independence terms run over the
//! per-pair interest/influence embeddings with the routing described in
//! `disentangle`. The joint loss is
//!
//!   task + lambda * (bound_user + bound_item − fit_user − fit_item)
//!
//! where the fit terms are the heads' mean log densities (entering negated so
//! minimizing the loss fits the heads).

use std::collections::HashMap;

use crate::config::{RunConfig, Task};
use crate::dataset::DatasetBundle;
use crate::disentangle::{
    self, lld_loss, mi_upper_bound, run_mlp2, BnUpdate, DisentangleParams, Mlp2,
};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{load_checkpoint, save_checkpoint, ParameterStore};
use crate::tape::{Activation, Graph, NodeId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One training example: targets are ratings (1..5) for the rating task and
/// 0/1 relevance for the ranking task; alpha is the precomputed regulation
/// weight (already variant-adjusted by the caller).
#[derive(Clone, Copy, Debug)]
pub struct TrainSample {
    pub user: u32,
    pub item: u32,
    pub target: f64,
    pub alpha: f64,
}

pub struct Model {
    pub store: ParameterStore,
    pub enc: EncoderParams,
    pub dis: DisentangleParams,
    pub predictor: Mlp2,
    pub cfg: RunConfig,
}

/// Everything the training loop needs from one forward pass.
pub struct BatchForward {
    pub loss: NodeId,
    pub task_loss: NodeId,
    /// Summed user+item contrastive bounds, when the variant trains them.
    pub mi: Option<NodeId>,
    /// Negated head log likelihoods (the loss-side form), when trained.
    pub lld: Option<NodeId>,
    /// Raw predictor output per sample (no squash, no clamp).
    pub preds: Vec<NodeId>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    n_users: usize,
    n_items: usize,
}

impl Model {
    pub fn new(cfg: &RunConfig, n_users: usize, n_items: usize) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::config::derive_seed(cfg.seed, "init"));
        let rating_levels = match cfg.task {
            Task::Rating => 5,
            Task::Ranking => 1,
        };
        let enc = EncoderParams::register(
            &mut store,
            n_users,
            n_items,
            rating_levels,
            cfg.d,
            &mut rng,
        );
        let dis =
            DisentangleParams::register(&mut store, cfg.d, cfg.d_prime, cfg.batch_norm, &mut rng);
        let predictor = Mlp2::register(
            &mut store,
            "predictor",
            2 * cfg.d_prime,
            cfg.d_prime,
            1,
            cfg.batch_norm,
            &mut rng,
        );
        Ok(Model {
            store,
            enc,
            dis,
            predictor,
            cfg: cfg.clone(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.store.get(self.enc.user_table).rows
    }

    pub fn n_items(&self) -> usize {
        self.store.get(self.enc.item_table).rows
    }

    pub fn activation(&self) -> Activation {
        self.cfg.activation_kind()
    }

    /// Forward a batch on `g`. `training` switches batch norm to batch
    /// statistics and enables dropout (drawing masks from `rng`); `use_mi`
    /// adds the independence terms (skipped automatically for batches of 1).
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        bundle: &DatasetBundle,
        samples: &[TrainSample],
        training: bool,
        mut rng: Option<&mut ChaCha8Rng>,
        use_mi: bool,
    ) -> Result<BatchForward> {
        if samples.is_empty() {
            return Err(Error::Train("forward pass over an empty batch".into()));
        }
        let act = self.activation();
        let dropout = if training { self.cfg.dropout } else { 0.0 };
        let mut bn_updates = Vec::new();

        // Encode each distinct user and item once.
        let mut users: Vec<u32> = samples.iter().map(|s| s.user).collect();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<u32> = samples.iter().map(|s| s.item).collect();
        items.sort_unstable();
        items.dedup();
        let user_slot: HashMap<u32, usize> =
            users.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let item_slot: HashMap<u32, usize> =
            items.iter().enumerate().map(|(k, &v)| (v, k)).collect();

        let xs_u = encoder::encode_users(g, &self.enc, bundle, &users, act);
        let xs_v = encoder::encode_items(g, &self.enc, bundle, &items, act);

        let zs_u = run_mlp2(
            g, &self.dis.user_interest, &xs_u, act, training, dropout,
            rng.as_deref_mut(), &mut bn_updates,
        );
        let cs_u = run_mlp2(
            g, &self.dis.user_social, &xs_u, act, training, dropout,
            rng.as_deref_mut(), &mut bn_updates,
        );
        let zs_v = run_mlp2(
            g, &self.dis.item_interest, &xs_v, act, training, dropout,
            rng.as_deref_mut(), &mut bn_updates,
        );
        let cs_v = run_mlp2(
            g, &self.dis.item_social, &xs_v, act, training, dropout,
            rng.as_deref_mut(), &mut bn_updates,
        );

        // Fuse per sample and run the predictor over the whole batch.
        let mut pred_inputs = Vec::with_capacity(samples.len());
        let mut z_u_s = Vec::with_capacity(samples.len());
        let mut c_u_s = Vec::with_capacity(samples.len());
        let mut z_v_s = Vec::with_capacity(samples.len());
        let mut c_v_s = Vec::with_capacity(samples.len());
        for s in samples {
            let zu = zs_u[user_slot[&s.user]];
            let cu = cs_u[user_slot[&s.user]];
            let zv = zs_v[item_slot[&s.item]];
            let cv = cs_v[item_slot[&s.item]];
            let hu = g.add_scaled(zu, cu, s.alpha);
            let hv = g.add_scaled(zv, cv, s.alpha);
            pred_inputs.push(g.concat(&[hu, hv]));
            z_u_s.push(zu);
            c_u_s.push(cu);
            z_v_s.push(zv);
            c_v_s.push(cv);
        }
        let outs = run_mlp2(
            g, &self.predictor, &pred_inputs, act, training, dropout,
            rng.as_deref_mut(), &mut bn_updates,
        );

        // Task loss.
        let per_sample: Vec<NodeId> = match self.cfg.task {
            Task::Rating => samples
                .iter()
                .zip(&outs)
                .map(|(s, &o)| {
                    let t = g.leaf(vec![s.target]);
                    let d = g.sub(o, t);
                    g.square(d)
                })
                .collect(),
            Task::Ranking => samples
                .iter()
                .zip(&outs)
                .map(|(s, &o)| {
                    // −[y ln σ(x) + (1−y) ln(1−σ(x))] = softplus(x) − y·x
                    let sp = g.act(o, Activation::Softplus);
                    g.add_scaled(sp, o, -s.target)
                })
                .collect(),
        };
        let task_loss = g.mean(&per_sample, 1);

        let (mi, lld, loss) = if use_mi && samples.len() >= 2 {
            let mi_u = mi_upper_bound(g, &self.dis.head_user, &z_u_s, &c_u_s, act)?;
            let mi_v = mi_upper_bound(g, &self.dis.head_item, &z_v_s, &c_v_s, act)?;
            let mi = g.add(mi_u, mi_v);
            let zd_u: Vec<NodeId> = z_u_s.iter().map(|&z| g.detach(z)).collect();
            let cd_u: Vec<NodeId> = c_u_s.iter().map(|&c| g.detach(c)).collect();
            let zd_v: Vec<NodeId> = z_v_s.iter().map(|&z| g.detach(z)).collect();
            let cd_v: Vec<NodeId> = c_v_s.iter().map(|&c| g.detach(c)).collect();
            let fit_u = lld_loss(g, &self.dis.head_user, &zd_u, &cd_u, act)?;
            let fit_v = lld_loss(g, &self.dis.head_item, &zd_v, &cd_v, act)?;
            let fit = g.add(fit_u, fit_v);
            let lld = g.scale(fit, -1.0);
            let reg = g.add(mi, lld);
            let loss = g.add_scaled(task_loss, reg, self.cfg.lambda);
            (Some(mi), Some(lld), loss)
        } else {
            (None, None, task_loss)
        };

        Ok(BatchForward {
            loss,
            task_loss,
            mi,
            lld,
            preds: outs,
            bn_updates,
        })
    }

    // -- Evaluation-side value computation (no gradients) -------------------

    /// Encoder outputs x for the given users, as plain values.
    pub fn user_encodings(&self, bundle: &DatasetBundle, users: &[u32]) -> Vec<Vec<f64>> {
        let act = self.activation();
        let mut out = Vec::with_capacity(users.len());
        for chunk in users.chunks(256) {
            let mut g = Graph::new(&self.store);
            for &u in chunk {
                let x = encoder::encode_user(&mut g, &self.enc, bundle, u, act);
                out.push(g.value(x).to_vec());
            }
        }
        out
    }

    pub fn item_encodings(&self, bundle: &DatasetBundle, items: &[u32]) -> Vec<Vec<f64>> {
        let act = self.activation();
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(256) {
            let mut g = Graph::new(&self.store);
            for &v in chunk {
                let x = encoder::encode_item(&mut g, &self.enc, bundle, v, act);
                out.push(g.value(x).to_vec());
            }
        }
        out
    }

    /// (interest, influence) pairs for the given users, eval mode.
    pub fn user_split_values(
        &self,
        bundle: &DatasetBundle,
        users: &[u32],
    ) -> Vec<(Vec<f64>, Vec<f64>)> {
        let act = self.activation();
        self.user_encodings(bundle, users)
            .into_iter()
            .map(|x| {
                let z = disentangle::mlp2_apply_eval(&self.store, &self.dis.user_interest, act, &x);
                let c = disentangle::mlp2_apply_eval(&self.store, &self.dis.user_social, act, &x);
                (z, c)
            })
            .collect()
    }

    pub fn item_split_values(
        &self,
        bundle: &DatasetBundle,
        items: &[u32],
    ) -> Vec<(Vec<f64>, Vec<f64>)> {
        let act = self.activation();
        self.item_encodings(bundle, items)
            .into_iter()
            .map(|x| {
                let z = disentangle::mlp2_apply_eval(&self.store, &self.dis.item_interest, act, &x);
                let c = disentangle::mlp2_apply_eval(&self.store, &self.dis.item_social, act, &x);
                (z, c)
            })
            .collect()
    }

    /// Interest embeddings for every item — the table the regulation gate
    /// reads. Rebuilt whenever parameters change.
    pub fn item_interest_table(&self, bundle: &DatasetBundle) -> Vec<Vec<f64>> {
        let items: Vec<u32> = (0..self.n_items() as u32).collect();
        self.item_split_values(bundle, &items)
            .into_iter()
            .map(|(z, _)| z)
            .collect()
    }

    /// Raw predictor output from precomputed split values (eval mode).
    pub fn predict_from_values(
        &self,
        z_u: &[f64],
        c_u: &[f64],
        z_v: &[f64],
        c_v: &[f64],
        alpha: f64,
    ) -> f64 {
        let act = self.activation();
        let mut input = Vec::with_capacity(2 * self.cfg.d_prime);
        for k in 0..z_u.len() {
            input.push(z_u[k] + alpha * c_u[k]);
        }
        for k in 0..z_v.len() {
            input.push(z_v[k] + alpha * c_v[k]);
        }
        disentangle::mlp2_apply_eval(&self.store, &self.predictor, act, &input)[0]
    }

    /// Final prediction for reporting: ratings clamped to [1, 5], ranking
    /// scores squashed to (0, 1).
    pub fn finalize_prediction(&self, raw: f64) -> f64 {
        match self.cfg.task {
            Task::Rating => raw.clamp(1.0, 5.0),
            Task::Ranking => 1.0 / (1.0 + (-raw).exp()),
        }
    }

    // -- Checkpointing -------------------------------------------------------

    pub fn save(&self, path: &str) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            n_users: self.n_users(),
            n_items: self.n_items(),
        };
        let json = serde_json::to_string(&meta)
            .map_err(|e| Error::Checkpoint(format!("serializing metadata: {e}")))?;
        save_checkpoint(&self.store, &json, path)
    }

    pub fn load(path: &str) -> Result<Model> {
        let (loaded, json) = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&json)
            .map_err(|e| Error::Checkpoint(format!("bad metadata in {path}: {e}")))?;
        let mut model = Model::new(&meta.config, meta.n_users, meta.n_items)?;
        for id in loaded.ids() {
            let name = loaded.name(id);
            let Some(dst_id) = model.store.lookup(name) else {
                return Err(Error::Checkpoint(format!("unknown tensor {name} in {path}")));
            };
            let src = loaded.get(id);
            let dst = model.store.get_mut(dst_id);
            if src.rows != dst.rows || src.cols != dst.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {}x{}, expected {}x{}",
                    src.rows, src.cols, dst.rows, dst.cols
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_bundle, Interaction, Split};
    use crate::params::Grads;

    fn toy_bundle() -> DatasetBundle {
        let records = vec![
            Interaction { user: 0, item: 0, rating: 4, split: Split::Train },
            Interaction { user: 0, item: 1, rating: 2, split: Split::Train },
            Interaction { user: 1, item: 1, rating: 5, split: Split::Train },
            Interaction { user: 1, item: 2, rating: 3, split: Split::Train },
            Interaction { user: 2, item: 0, rating: 1, split: Split::Train },
        ];
        build_bundle(
            records,
            vec![(0, 1), (1, 2), (2, 0)],
            vec![0, 1, 2],
            vec![0, 1, 2],
        )
    }

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.d = 6;
        cfg.d_prime = 4;
        cfg.batch_norm = true;
        cfg.dropout = 0.0;
        cfg.lambda = 0.37;
        cfg
    }

    fn samples() -> Vec<TrainSample> {
        vec![
            TrainSample { user: 0, item: 2, target: 3.0, alpha: 1.0 },
            TrainSample { user: 1, item: 0, target: 4.0, alpha: 0.0 },
            TrainSample { user: 2, item: 1, target: 2.0, alpha: 1.0 },
        ]
    }

    #[test]
    fn loss_decomposes_into_task_plus_scaled_regularizers() {
        let bundle = toy_bundle();
        let model = Model::new(&small_cfg(), 3, 3).unwrap();
        let mut g = Graph::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fwd = model
            .forward_batch(&mut g, &bundle, &samples(), true, Some(&mut rng), true)
            .unwrap();
        let total = g.scalar(fwd.loss);
        let task = g.scalar(fwd.task_loss);
        let mi = g.scalar(fwd.mi.unwrap());
        let lld = g.scalar(fwd.lld.unwrap());
        assert!((total - (task + 0.37 * (mi + lld))).abs() < 1e-9);
    }

    #[test]
    fn single_sample_batches_drop_the_independence_terms() {
        let bundle = toy_bundle();
        let model = Model::new(&small_cfg(), 3, 3).unwrap();
        let mut g = Graph::new(&model.store);
        let one = &samples()[..1];
        let fwd = model
            .forward_batch(&mut g, &bundle, one, false, None, true)
            .unwrap();
        assert!(fwd.mi.is_none());
        assert_eq!(g.scalar(fwd.loss), g.scalar(fwd.task_loss));
    }

    #[test]
    fn influence_networks_are_inert_when_alpha_is_zero_and_mi_is_off() {
        // With every alpha 0 and no independence terms, predictions cannot
        // depend on the social-influence networks at all.
        let bundle = toy_bundle();
        let mut cfg = small_cfg();
        cfg.lambda = 0.0;
        let mut model = Model::new(&cfg, 3, 3).unwrap();
        let zeroed: Vec<TrainSample> = samples()
            .iter()
            .map(|s| TrainSample { alpha: 0.0, ..*s })
            .collect();
        let before: Vec<f64> = {
            let mut g = Graph::new(&model.store);
            let fwd = model
                .forward_batch(&mut g, &bundle, &zeroed, false, None, false)
                .unwrap();
            fwd.preds.iter().map(|&p| g.scalar(p)).collect()
        };
        model.store.nudge(model.dis.user_social.l1.w, 3, 0.5);
        model.store.nudge(model.dis.item_social.l2.b, 1, -0.7);
        let after: Vec<f64> = {
            let mut g = Graph::new(&model.store);
            let fwd = model
                .forward_batch(&mut g, &bundle, &zeroed, false, None, false)
                .unwrap();
            fwd.preds.iter().map(|&p| g.scalar(p)).collect()
        };
        assert_eq!(before, after);
    }

    #[test]
    fn gate_gradient_stays_out_of_the_similarity_path() {
        // alpha enters as a constant: gradients exist for the influence
        // networks only through the fused sum (and MI), never through any
        // similarity computation — changing alpha changes the graph, not a
        // differentiable input. Check: with alpha fixed, task-loss gradients
        // w.r.t. the item-interest net are identical whether or not that
        // net's outputs also feed a similarity table outside the graph.
        let bundle = toy_bundle();
        let model = Model::new(&small_cfg(), 3, 3).unwrap();
        let mut grads = Grads::zeros_like(&model.store);
        let mut g = Graph::new(&model.store);
        let fwd = model
            .forward_batch(&mut g, &bundle, &samples(), false, None, false)
            .unwrap();
        g.backward(fwd.task_loss, &mut grads);
        // the similarity table is *computed from* item_interest values, so if
        // alpha carried gradient it would have to show up as extra terms
        // here; instead the gradient equals the one from an identical forward
        // that never built a similarity table (same graph, by construction).
        assert!(grads.of(model.dis.item_interest.l1.w).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eval_forward_matches_plain_value_path() {
        let bundle = toy_bundle();
        let model = Model::new(&small_cfg(), 3, 3).unwrap();
        let s = TrainSample { user: 1, item: 2, target: 3.0, alpha: 1.0 };
        let tape_pred = {
            let mut g = Graph::new(&model.store);
            let fwd = model
                .forward_batch(&mut g, &bundle, &[s], false, None, false)
                .unwrap();
            g.scalar(fwd.preds[0])
        };
        let (zu, cu) = model.user_split_values(&bundle, &[1]).pop().unwrap();
        let (zv, cv) = model.item_split_values(&bundle, &[2]).pop().unwrap();
        let plain = model.predict_from_values(&zu, &cu, &zv, &cv, 1.0);
        assert!((tape_pred - plain).abs() < 1e-12);
    }

    #[test]
    fn eval_batch_equals_per_sample_loop() {
        let bundle = toy_bundle();
        let model = Model::new(&small_cfg(), 3, 3).unwrap();
        let batch = samples();
        let batched: Vec<f64> = {
            let mut g = Graph::new(&model.store);
            let fwd = model
                .forward_batch(&mut g, &bundle, &batch, false, None, false)
                .unwrap();
            fwd.preds.iter().map(|&p| g.scalar(p)).collect()
        };
        for (k, s) in batch.iter().enumerate() {
            let mut g = Graph::new(&model.store);
            let fwd = model
                .forward_batch(&mut g, &bundle, &[*s], false, None, false)
                .unwrap();
            let single = g.scalar(fwd.preds[0]);
            assert!(
                (batched[k] - single).abs() < 1e-6,
                "sample {k}: batch {} vs single {single}",
                batched[k]
            );
        }
    }

    #[test]
    fn same_seed_same_model_different_seed_different_model() {
        let cfg = small_cfg();
        let a = Model::new(&cfg, 3, 3).unwrap();
        let b = Model::new(&cfg, 3, 3).unwrap();
        assert_eq!(
            a.store.get(a.enc.user_table).data,
            b.store.get(b.enc.user_table).data
        );
        let mut cfg2 = cfg;
        cfg2.seed = 43;
        let c = Model::new(&cfg2, 3, 3).unwrap();
        assert_ne!(
            a.store.get(a.enc.user_table).data,
            c.store.get(c.enc.user_table).data
        );
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let path = path.to_str().unwrap();
        let bundle = toy_bundle();
        let model = Model::new(&small_cfg(), 3, 3).unwrap();
        let (zu, cu) = model.user_split_values(&bundle, &[0]).pop().unwrap();
        let (zv, cv) = model.item_split_values(&bundle, &[1]).pop().unwrap();
        let before = model.predict_from_values(&zu, &cu, &zv, &cv, 1.0);
        model.save(path).unwrap();
        let loaded = Model::load(path).unwrap();
        assert_eq!(loaded.cfg.d, model.cfg.d);
        let (zu, cu) = loaded.user_split_values(&bundle, &[0]).pop().unwrap();
        let (zv, cv) = loaded.item_split_values(&bundle, &[1]).pop().unwrap();
        let after = loaded.predict_from_values(&zu, &cu, &zv, &cv, 1.0);
        assert_eq!(before, after);
    }

    #[test]
    fn ranking_task_uses_binary_cross_entropy() {
        let bundle = toy_bundle();
        let mut cfg = small_cfg();
        cfg.task = Task::Ranking;
        let model = Model::new(&cfg, 3, 3).unwrap();
        let s = [
            TrainSample { user: 0, item: 1, target: 1.0, alpha: 0.0 },
            TrainSample { user: 1, item: 2, target: 0.0, alpha: 0.0 },
        ];
        let mut g = Graph::new(&model.store);
        let fwd = model
            .forward_batch(&mut g, &bundle, &s, false, None, false)
            .unwrap();
        let expected: f64 = s
            .iter()
            .zip(&fwd.preds)
            .map(|(smp, &p)| {
                let x = g.scalar(p);
                let prob = 1.0 / (1.0 + (-x).exp());
                -(smp.target * prob.ln() + (1.0 - smp.target) * (1.0 - prob).ln())
            })
            .sum::<f64>()
            / 2.0;
        assert!((g.scalar(fwd.task_loss) - expected).abs() < 1e-9);
    }

    #[test]
    fn rating_predictions_clamp_only_at_the_reporting_boundary() {
        let model = Model::new(&small_cfg(), 3, 3).unwrap();
        assert_eq!(model.finalize_prediction(7.3), 5.0);
        assert_eq!(model.finalize_prediction(-2.0), 1.0);
        assert_eq!(model.finalize_prediction(3.4), 3.4);
    }
}
