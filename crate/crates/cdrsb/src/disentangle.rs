//! Splitting encoder outputs into interest and social-influence embeddings,
//! and keeping the two statistically independent.
//!
//! Four independent two-layer networks map x_u/x_v to (z_u, c_u) and
//! (z_v, c_v). Independence is enforced with a contrastive upper bound on
//! mutual information: a per-side variational head models c given z as a
//! diagonal Gaussian, and the bound contrasts the head's density on aligned
//! pairs against its density on mismatched pairs within the batch.
//!
//! Gradient routing is deliberate and asymmetric. The head-fitting term
//! (`lld_loss`) sees detached z/c and live head parameters; the bound
//! (`mi_upper_bound`) sees live z/c and frozen head parameters. Both enter
//! one joint loss, but the head can never lower the bound by reshaping
//! itself, and the embeddings can never "help" the head fit.

use crate::encoder::Affine;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Activation, BnBatchStats, Graph, NodeId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const BN_EPS: f64 = 1e-5;
/// Momentum for the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

impl BnParams {
    pub fn register(store: &mut ParameterStore, name: &str, dim: usize) -> BnParams {
        let gamma = store.add(&format!("{name}.gamma"), 1, dim, true);
        let beta = store.add(&format!("{name}.beta"), 1, dim, true);
        let run_mean = store.add(&format!("{name}.run_mean"), 1, dim, false);
        let run_var = store.add(&format!("{name}.run_var"), 1, dim, false);
        store.fill(gamma, 1.0);
        store.fill(run_var, 1.0);
        BnParams {
            gamma,
            beta,
            run_mean,
            run_var,
        }
    }
}

/// Two affine layers with optional batch norm and dropout around the hidden
/// activation: affine -> [bn] -> act -> [dropout] -> affine.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub l1: Affine,
    pub l2: Affine,
    pub bn: Option<BnParams>,
    pub hidden: usize,
}

impl Mlp2 {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        with_bn: bool,
        rng: &mut ChaCha8Rng,
    ) -> Mlp2 {
        let l1 = Affine::register(store, &format!("{name}.l1"), hidden, in_dim, rng);
        let l2 = Affine::register(store, &format!("{name}.l2"), out_dim, hidden, rng);
        let bn = with_bn.then(|| BnParams::register(store, &format!("{name}.bn"), hidden));
        Mlp2 {
            l1,
            l2,
            bn,
            hidden,
        }
    }
}

/// A batch-norm running-statistics update owed after a training forward pass.
pub struct BnUpdate {
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub stats: BnBatchStats,
}

/// Fold pending batch statistics into the running estimates.
pub fn apply_bn_updates(store: &mut ParameterStore, updates: &[BnUpdate]) {
    for u in updates {
        let rm = store.get_mut(u.run_mean);
        for (r, m) in rm.data.iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.get_mut(u.run_var);
        for (r, v) in rv.data.iter_mut().zip(&u.stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

fn dropout_mask(dim: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..dim)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Run a two-layer network over a batch of inputs. In training mode, batch
/// norm uses batch statistics (recorded into `bn_updates`) and dropout draws
/// fresh masks from `rng`; in eval mode, running statistics are used and
/// dropout is a no-op.
#[allow(clippy::too_many_arguments)]
pub fn run_mlp2(
    g: &mut Graph,
    net: &Mlp2,
    xs: &[NodeId],
    act: Activation,
    training: bool,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
    bn_updates: &mut Vec<BnUpdate>,
) -> Vec<NodeId> {
    let pre: Vec<NodeId> = xs
        .iter()
        .map(|&x| g.affine(net.l1.w, net.l1.b, x))
        .collect();
    let normed: Vec<NodeId> = match (&net.bn, training) {
        (Some(bn), true) => {
            let (outs, stats) = g.batch_norm_train(&pre, bn.gamma, bn.beta, BN_EPS);
            bn_updates.push(BnUpdate {
                run_mean: bn.run_mean,
                run_var: bn.run_var,
                stats,
            });
            outs
        }
        (Some(bn), false) => pre
            .iter()
            .map(|&x| g.batch_norm_eval(x, bn.gamma, bn.beta, bn.run_mean, bn.run_var, BN_EPS))
            .collect(),
        (None, _) => pre,
    };
    let hidden: Vec<NodeId> = normed.iter().map(|&x| g.act(x, act)).collect();
    let dropped: Vec<NodeId> = if training && dropout > 0.0 {
        let rng = rng.expect("training-mode dropout needs an rng");
        hidden
            .iter()
            .map(|&h| {
                let mask = dropout_mask(net.hidden, dropout, rng);
                g.dropout(h, mask)
            })
            .collect()
    } else {
        hidden
    };
    dropped
        .iter()
        .map(|&h| g.affine(net.l2.w, net.l2.b, h))
        .collect()
}

/// Variational head: two affine layers producing (mu, log_var) for the
/// Gaussian model of c given z. No batch norm or dropout here — the head is
/// a density model, not a representation.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub l1: Affine,
    pub l2: Affine,
    pub d_prime: usize,
}

impl Head {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        d_prime: usize,
        rng: &mut ChaCha8Rng,
    ) -> Head {
        let l1 = Affine::register(store, &format!("{name}.l1"), d_prime, d_prime, rng);
        let l2 = Affine::register(store, &format!("{name}.l2"), 2 * d_prime, d_prime, rng);
        Head { l1, l2, d_prime }
    }
}

/// (mu, raw log_var) for one input. `frozen` runs the affines without
/// parameter gradients (and, under finite-difference replay, with snapshot
/// values), which is how the bound sees the head.
pub fn head_outputs(
    g: &mut Graph,
    head: &Head,
    z: NodeId,
    act: Activation,
    frozen: bool,
) -> (NodeId, NodeId) {
    let a = if frozen {
        g.affine_frozen(head.l1.w, head.l1.b, z)
    } else {
        g.affine(head.l1.w, head.l1.b, z)
    };
    let h = g.act(a, act);
    let o = if frozen {
        g.affine_frozen(head.l2.w, head.l2.b, h)
    } else {
        g.affine(head.l2.w, head.l2.b, h)
    };
    let mu = g.slice(o, 0, head.d_prime);
    let lv = g.slice(o, head.d_prime, head.d_prime);
    (mu, lv)
}

/// −Σ_dim (mu − c)² / exp(log_var), with log_var clamped to [−10, 10].
/// This is the unnormalized Gaussian log density the whole independence
/// machinery is built on; it is 0 at a perfect fit and negative otherwise.
pub fn gaussian_log_density(g: &mut Graph, mu: NodeId, lv_raw: NodeId, c: NodeId) -> NodeId {
    let inv = g.exp_neg_clamped(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX);
    let d = g.sub(mu, c);
    let sq = g.square(d);
    let weighted = g.mul(sq, inv);
    let s = g.sum(weighted);
    g.scale(s, -1.0)
}

/// Mean log density of aligned (z, c) pairs under the head. Callers pass
/// detached z/c nodes so this term trains only the head.
pub fn lld_loss(
    g: &mut Graph,
    head: &Head,
    zs: &[NodeId],
    cs: &[NodeId],
    act: Activation,
) -> Result<NodeId> {
    if zs.is_empty() {
        return Err(Error::Train("log-likelihood loss over an empty batch".into()));
    }
    let densities: Vec<NodeId> = zs
        .iter()
        .zip(cs)
        .map(|(&z, &c)| {
            let (mu, lv) = head_outputs(g, head, z, act, false);
            gaussian_log_density(g, mu, lv, c)
        })
        .collect();
    Ok(g.mean(&densities, 1))
}

/// Contrastive bound from precomputed head outputs:
/// (1/N) Σ_i [ density(i,i) − (1/N) Σ_{k≠i} density(i,k) ].
///
/// The mismatched sum has N−1 terms but is divided by N — that is how the
/// objective is defined here, so a batch of identical c vectors yields
/// (1/N²) Σ_i density(i,i) rather than exactly zero (zero at a perfect fit).
///
/// Computed via sufficient statistics over c (O(N·d) instead of O(N²·d)):
/// Σ_{k≠i} (mu_i − c_k)² = N·mu_i² − 2·mu_i·S + Q − (mu_i − c_i)², with
/// S = Σ_k c_k and Q = Σ_k c_k² per dimension.
pub fn mi_upper_bound_from_outputs(
    g: &mut Graph,
    mus: &[NodeId],
    lv_raws: &[NodeId],
    cs: &[NodeId],
) -> Result<NodeId> {
    let n = cs.len();
    if n < 2 {
        return Err(Error::Train(
            "mutual-information bound needs a batch of at least 2; skip the term".into(),
        ));
    }
    let sq_cs: Vec<NodeId> = cs.iter().map(|&c| g.square(c)).collect();
    let s_sum = g.add_many(cs);
    let q_sum = g.add_many(&sq_cs);
    let mut contribs = Vec::with_capacity(n);
    for i in 0..n {
        let inv = g.exp_neg_clamped(lv_raws[i], LOG_VAR_MIN, LOG_VAR_MAX);
        let diff = g.sub(mus[i], cs[i]);
        let dsq = g.square(diff);
        let pos_vec = g.mul(dsq, inv);
        let pos = g.sum(pos_vec);
        let mu_sq = g.square(mus[i]);
        let t1 = g.scale(mu_sq, n as f64);
        let ms = g.mul(mus[i], s_sum);
        let t2 = g.add_scaled(t1, ms, -2.0);
        let t3 = g.add(t2, q_sum);
        let neg_sq = g.sub(t3, dsq);
        let neg_vec = g.mul(neg_sq, inv);
        let neg = g.sum(neg_vec);
        let neg_pos = g.scale(pos, -1.0);
        contribs.push(g.add_scaled(neg_pos, neg, 1.0 / n as f64));
    }
    Ok(g.mean(&contribs, 1))
}

/// Contrastive bound for one side. z/c are live; the head is frozen, so
/// minimizing this shapes the embeddings, never the density model.
pub fn mi_upper_bound(
    g: &mut Graph,
    head: &Head,
    zs: &[NodeId],
    cs: &[NodeId],
    act: Activation,
) -> Result<NodeId> {
    let mut mus = Vec::with_capacity(zs.len());
    let mut lvs = Vec::with_capacity(zs.len());
    for &z in zs {
        let (mu, lv) = head_outputs(g, head, z, act, true);
        mus.push(mu);
        lvs.push(lv);
    }
    mi_upper_bound_from_outputs(g, &mus, &lvs, cs)
}

/// All parameters of the disentangling stage: four splitting networks and
/// the two variational heads.
#[derive(Clone, Debug)]
pub struct DisentangleParams {
    pub user_interest: Mlp2,
    pub user_social: Mlp2,
    pub item_interest: Mlp2,
    pub item_social: Mlp2,
    pub head_user: Head,
    pub head_item: Head,
}

impl DisentangleParams {
    pub fn register(
        store: &mut ParameterStore,
        d: usize,
        d_prime: usize,
        with_bn: bool,
        rng: &mut ChaCha8Rng,
    ) -> DisentangleParams {
        DisentangleParams {
            user_interest: Mlp2::register(store, "dis.user_interest", d, d_prime, d_prime, with_bn, rng),
            user_social: Mlp2::register(store, "dis.user_social", d, d_prime, d_prime, with_bn, rng),
            item_interest: Mlp2::register(store, "dis.item_interest", d, d_prime, d_prime, with_bn, rng),
            item_social: Mlp2::register(store, "dis.item_social", d, d_prime, d_prime, with_bn, rng),
            head_user: Head::register(store, "dis.head_user", d_prime, rng),
            head_item: Head::register(store, "dis.head_item", d_prime, rng),
        }
    }
}

/// Eval-mode split of a single user encoding into (interest, social).
pub fn split_user(
    g: &mut Graph,
    dis: &DisentangleParams,
    x_u: NodeId,
    act: Activation,
) -> (NodeId, NodeId) {
    let mut sink = Vec::new();
    let z = run_mlp2(g, &dis.user_interest, &[x_u], act, false, 0.0, None, &mut sink)[0];
    let c = run_mlp2(g, &dis.user_social, &[x_u], act, false, 0.0, None, &mut sink)[0];
    (z, c)
}

/// Eval-mode split of a single item encoding into (interest, social).
pub fn split_item(
    g: &mut Graph,
    dis: &DisentangleParams,
    x_v: NodeId,
    act: Activation,
) -> (NodeId, NodeId) {
    let mut sink = Vec::new();
    let z = run_mlp2(g, &dis.item_interest, &[x_v], act, false, 0.0, None, &mut sink)[0];
    let c = run_mlp2(g, &dis.item_social, &[x_v], act, false, 0.0, None, &mut sink)[0];
    (z, c)
}

// ---------------------------------------------------------------------------
// Plain-arithmetic twins (no tape) for evaluation-scale work: fitting and
// scoring the head on tens of thousands of samples, where building graphs
// would be pure overhead.

pub fn affine_apply(store: &ParameterStore, aff: Affine, x: &[f64]) -> Vec<f64> {
    let w = store.get(aff.w);
    let b = store.get(aff.b);
    (0..w.rows)
        .map(|r| {
            let row = w.row(r);
            let mut acc = b.data[r];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            acc
        })
        .collect()
}

pub fn head_apply(
    store: &ParameterStore,
    head: &Head,
    act: Activation,
    z: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut h = affine_apply(store, head.l1, z);
    for v in h.iter_mut() {
        *v = act.apply(*v);
    }
    let o = affine_apply(store, head.l2, &h);
    (
        o[..head.d_prime].to_vec(),
        o[head.d_prime..].to_vec(),
    )
}

/// Eval-mode forward of a two-layer net in plain arithmetic: affine, batch
/// norm with running statistics, activation, affine. Must agree with the
/// graph's eval path to machine precision.
pub fn mlp2_apply_eval(store: &ParameterStore, net: &Mlp2, act: Activation, x: &[f64]) -> Vec<f64> {
    let mut h = affine_apply(store, net.l1, x);
    if let Some(bn) = &net.bn {
        let gv = &store.get(bn.gamma).data;
        let bv = &store.get(bn.beta).data;
        let rm = &store.get(bn.run_mean).data;
        let rv = &store.get(bn.run_var).data;
        for (k, v) in h.iter_mut().enumerate() {
            *v = gv[k] * (*v - rm[k]) / (rv[k] + BN_EPS).sqrt() + bv[k];
        }
    }
    for v in h.iter_mut() {
        *v = act.apply(*v);
    }
    affine_apply(store, net.l2, &h)
}

pub fn log_density_plain(mu: &[f64], lv_raw: &[f64], c: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..mu.len() {
        let inv = (-lv_raw[k].clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp();
        let d = mu[k] - c[k];
        acc -= d * d * inv;
    }
    acc
}

/// The contrastive bound computed by the definition — full double loop over
/// mismatched pairs. Used as the reference implementation in tests and for
/// held-out estimates where no gradients are needed.
pub fn club_estimate_plain(
    store: &ParameterStore,
    head: &Head,
    act: Activation,
    zs: &[Vec<f64>],
    cs: &[Vec<f64>],
) -> f64 {
    let n = zs.len();
    assert!(n >= 2);
    let outs: Vec<(Vec<f64>, Vec<f64>)> =
        zs.iter().map(|z| head_apply(store, head, act, z)).collect();
    let mut total = 0.0;
    for i in 0..n {
        let (mu, lv) = &outs[i];
        let pos = log_density_plain(mu, lv, &cs[i]);
        let mut neg = 0.0;
        for (k, c) in cs.iter().enumerate() {
            if k != i {
                neg += log_density_plain(mu, lv, c);
            }
        }
        total += pos - neg / n as f64;
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Grads;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn store_with(d: usize, d_prime: usize) -> (ParameterStore, DisentangleParams) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dis = DisentangleParams::register(&mut store, d, d_prime, false, &mut rng);
        (store, dis)
    }

    #[test]
    fn density_is_zero_at_a_perfect_fit() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let mu = g.leaf(vec![0.3, -1.2]);
        let lv = g.leaf(vec![0.7, -0.4]);
        let c = g.leaf(vec![0.3, -1.2]);
        let d = gaussian_log_density(&mut g, mu, lv, c);
        assert_eq!(g.scalar(d), 0.0);
    }

    #[test]
    fn density_matches_hand_arithmetic() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        // residual 1 in each of 2 dims, unit variance -> -2
        let mu = g.leaf(vec![1.0, 1.0]);
        let lv = g.leaf(vec![0.0, 0.0]);
        let c = g.leaf(vec![0.0, 0.0]);
        let d = gaussian_log_density(&mut g, mu, lv, c);
        assert!((g.scalar(d) + 2.0).abs() < 1e-15);
        // residual 1, variance 4 -> -1/4
        let mu = g.leaf(vec![1.0]);
        let lv = g.leaf(vec![4.0f64.ln()]);
        let c = g.leaf(vec![0.0]);
        let d = gaussian_log_density(&mut g, mu, lv, c);
        assert!((g.scalar(d) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn log_var_clamp_caps_the_precision() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let mu = g.leaf(vec![1.0]);
        let lv = g.leaf(vec![-50.0]); // clamps to -10
        let c = g.leaf(vec![0.0]);
        let d = gaussian_log_density(&mut g, mu, lv, c);
        assert!((g.scalar(d) + 10.0f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn lld_is_the_mean_density_and_rejects_empty_batches() {
        let (store, dis) = store_with(3, 2);
        let mut g = Graph::new(&store);
        // Verify the mean by comparing against per-sample densities.
        let zs: Vec<NodeId> = (0..2).map(|i| g.leaf(vec![i as f64, 0.5, -0.5])).collect();
        let zs2: Vec<NodeId> = zs.iter().map(|&z| {
            let mut sink = Vec::new();
            run_mlp2(&mut g, &dis.user_interest, &[z], Activation::Softplus, false, 0.0, None, &mut sink)[0]
        }).collect();
        let cs: Vec<NodeId> = (0..2).map(|i| g.leaf(vec![0.1 * i as f64, 0.2])).collect();
        let loss = lld_loss(&mut g, &dis.head_user, &zs2, &cs, Activation::Softplus).unwrap();
        let mut acc = 0.0;
        for (&z, &c) in zs2.iter().zip(&cs) {
            let (mu, lv) = head_outputs(&mut g, &dis.head_user, z, Activation::Softplus, false);
            let d = gaussian_log_density(&mut g, mu, lv, c);
            acc += g.scalar(d);
        }
        assert!((g.scalar(loss) - acc / 2.0).abs() < 1e-12);
        assert!(lld_loss(&mut g, &dis.head_user, &[], &[], Activation::Softplus).is_err());
    }

    #[test]
    fn lld_means_hand_picked_densities() {
        // densities -2 and -4 -> mean -3, via leaves standing in for head outputs
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let d1 = {
            let mu = g.leaf(vec![1.0, 1.0]);
            let lv = g.leaf(vec![0.0, 0.0]);
            let c = g.leaf(vec![0.0, 0.0]);
            gaussian_log_density(&mut g, mu, lv, c)
        };
        let d2 = {
            let mu = g.leaf(vec![2.0, 0.0]);
            let lv = g.leaf(vec![0.0, 0.0]);
            let c = g.leaf(vec![0.0, 0.0]);
            gaussian_log_density(&mut g, mu, lv, c)
        };
        let m = g.mean(&[d1, d2], 1);
        assert!((g.scalar(m) + 3.0).abs() < 1e-15);
    }

    #[test]
    fn bound_matches_the_two_sample_hand_trace() {
        // mu_1=0 vs c=(1,2): pos (0-1)^2=1 -> density -1, mismatch (0-2)^2=4 -> -4
        // mu_2=3:            pos (3-2)^2=1 -> -1,         mismatch (3-1)^2=4 -> -4
        // (1/2)[(-1 + 4/2) + (-1 + 4/2)] = 1
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let mus = vec![g.leaf(vec![0.0]), g.leaf(vec![3.0])];
        let lvs = vec![g.leaf(vec![0.0]), g.leaf(vec![0.0])];
        let cs = vec![g.leaf(vec![1.0]), g.leaf(vec![2.0])];
        let mi = mi_upper_bound_from_outputs(&mut g, &mus, &lvs, &cs).unwrap();
        assert!((g.scalar(mi) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_needs_at_least_two_samples() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let mu = g.leaf(vec![0.0]);
        let lv = g.leaf(vec![0.0]);
        let c = g.leaf(vec![1.0]);
        assert!(mi_upper_bound_from_outputs(&mut g, &[mu], &[lv], &[c]).is_err());
    }

    #[test]
    fn identical_c_batch_reduces_to_scaled_positive_mass() {
        // With every c equal, each mismatched density equals the aligned one,
        // so the bound collapses to (1/N^2) Σ density(i,i): zero only at a
        // perfect fit (which we also check).
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let n = 3;
        let mus: Vec<NodeId> = [0.5, -1.0, 2.0].iter().map(|&v| g.leaf(vec![v])).collect();
        let lvs: Vec<NodeId> = (0..n).map(|_| g.leaf(vec![0.3])).collect();
        let cs: Vec<NodeId> = (0..n).map(|_| g.leaf(vec![0.25])).collect();
        let mi = mi_upper_bound_from_outputs(&mut g, &mus, &lvs, &cs).unwrap();
        let mut expect = 0.0;
        for &m in &[0.5, -1.0, 2.0] {
            expect += log_density_plain(&[m], &[0.3], &[0.25]);
        }
        expect /= (n * n) as f64;
        assert!((g.scalar(mi) - expect).abs() < 1e-12);

        let mut g2 = Graph::new(&store);
        let mus: Vec<NodeId> = (0..n).map(|_| g2.leaf(vec![0.25])).collect();
        let lvs: Vec<NodeId> = (0..n).map(|_| g2.leaf(vec![0.3])).collect();
        let cs: Vec<NodeId> = (0..n).map(|_| g2.leaf(vec![0.25])).collect();
        let mi = mi_upper_bound_from_outputs(&mut g2, &mus, &lvs, &cs).unwrap();
        assert_eq!(g2.scalar(mi), 0.0);
    }

    #[test]
    fn sufficient_statistics_agree_with_the_double_loop() {
        let (store, dis) = store_with(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 7;
        let zs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let cs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut g = Graph::new(&store);
        let z_nodes: Vec<NodeId> = zs.iter().map(|z| g.leaf(z.clone())).collect();
        let c_nodes: Vec<NodeId> = cs.iter().map(|c| g.leaf(c.clone())).collect();
        let mi = mi_upper_bound(&mut g, &dis.head_user, &z_nodes, &c_nodes, Activation::Softplus)
            .unwrap();
        let reference = club_estimate_plain(&store, &dis.head_user, Activation::Softplus, &zs, &cs);
        assert!((g.scalar(mi) - reference).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn bound_equals_reference_on_random_batches(
            seed in 0u64..1000,
            n in 2usize..9,
            d in 1usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            let head = Head::register(&mut store, "h", d, &mut rng);
            let zs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let cs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let mut g = Graph::new(&store);
            let z_nodes: Vec<NodeId> = zs.iter().map(|z| g.leaf(z.clone())).collect();
            let c_nodes: Vec<NodeId> = cs.iter().map(|c| g.leaf(c.clone())).collect();
            let mi = mi_upper_bound(&mut g, &head, &z_nodes, &c_nodes, Activation::Tanh).unwrap();
            let reference = club_estimate_plain(&store, &head, Activation::Tanh, &zs, &cs);
            prop_assert!((g.scalar(mi) - reference).abs() < 1e-9);
        }
    }

    #[test]
    fn interest_and_social_networks_share_no_parameters() {
        let (mut store, dis) = store_with(4, 3);
        let x = vec![0.4, -0.2, 0.9, 0.0];
        let (z0, c0) = {
            let mut g = Graph::new(&store);
            let xn = g.leaf(x.clone());
            let (z, c) = split_user(&mut g, &dis, xn, Activation::Softplus);
            (g.value(z).to_vec(), g.value(c).to_vec())
        };
        store.nudge(dis.user_interest.l1.w, 2, 0.05);
        let (z1, c1) = {
            let mut g = Graph::new(&store);
            let xn = g.leaf(x.clone());
            let (z, c) = split_user(&mut g, &dis, xn, Activation::Softplus);
            (g.value(z).to_vec(), g.value(c).to_vec())
        };
        assert_ne!(z0, z1);
        assert_eq!(c0, c1);

        // mirrored on the item side
        let (zv0, cv0) = {
            let mut g = Graph::new(&store);
            let xn = g.leaf(x.clone());
            let (z, c) = split_item(&mut g, &dis, xn, Activation::Softplus);
            (g.value(z).to_vec(), g.value(c).to_vec())
        };
        store.nudge(dis.item_social.l2.b, 1, 0.05);
        let (zv1, cv1) = {
            let mut g = Graph::new(&store);
            let xn = g.leaf(x);
            let (z, c) = split_item(&mut g, &dis, xn, Activation::Softplus);
            (g.value(z).to_vec(), g.value(c).to_vec())
        };
        assert_eq!(zv0, zv1);
        assert_ne!(cv0, cv1);
    }

    #[test]
    fn head_fitting_term_never_touches_the_splitting_networks() {
        let (store, dis) = store_with(3, 2);
        let mut grads = Grads::zeros_like(&store);
        let mut g = Graph::new(&store);
        let mut sink = Vec::new();
        let xs: Vec<NodeId> = (0..3).map(|i| g.leaf(vec![0.1 * i as f64, 0.5, -0.3])).collect();
        let zs = run_mlp2(&mut g, &dis.user_interest, &xs, Activation::Softplus, false, 0.0, None, &mut sink);
        let cs = run_mlp2(&mut g, &dis.user_social, &xs, Activation::Softplus, false, 0.0, None, &mut sink);
        let zd: Vec<NodeId> = zs.iter().map(|&z| g.detach(z)).collect();
        let cd: Vec<NodeId> = cs.iter().map(|&c| g.detach(c)).collect();
        let lld = lld_loss(&mut g, &dis.head_user, &zd, &cd, Activation::Softplus).unwrap();
        let neg = g.scale(lld, -1.0);
        g.backward(neg, &mut grads);
        for id in [dis.user_interest.l1.w, dis.user_interest.l2.w, dis.user_social.l1.w] {
            assert!(grads.of(id).iter().all(|&v| v == 0.0));
        }
        assert!(grads.of(dis.head_user.l1.w).iter().any(|&v| v != 0.0));
        assert!(grads.of(dis.head_user.l2.w).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bound_never_touches_the_head_but_reaches_the_networks() {
        let (store, dis) = store_with(3, 2);
        let mut grads = Grads::zeros_like(&store);
        let mut g = Graph::new(&store);
        let mut sink = Vec::new();
        let xs: Vec<NodeId> = (0..3).map(|i| g.leaf(vec![0.1 * i as f64, 0.5, -0.3])).collect();
        let zs = run_mlp2(&mut g, &dis.user_interest, &xs, Activation::Softplus, false, 0.0, None, &mut sink);
        let cs = run_mlp2(&mut g, &dis.user_social, &xs, Activation::Softplus, false, 0.0, None, &mut sink);
        let mi = mi_upper_bound(&mut g, &dis.head_user, &zs, &cs, Activation::Softplus).unwrap();
        g.backward(mi, &mut grads);
        assert!(grads.of(dis.head_user.l1.w).iter().all(|&v| v == 0.0));
        assert!(grads.of(dis.head_user.l2.w).iter().all(|&v| v == 0.0));
        assert!(grads.of(dis.user_interest.l1.w).iter().any(|&v| v != 0.0));
        assert!(grads.of(dis.user_social.l1.w).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn closer_means_are_a_strictly_better_fit() {
        // 1-dim toy: same variance, mean closer to c -> higher density, so
        // the (negated) fitting loss strictly decreases.
        let far = log_density_plain(&[2.0], &[0.0], &[0.0]);
        let near = log_density_plain(&[0.5], &[0.0], &[0.0]);
        assert!(near > far);
        assert!(-near < -far);
    }

    #[test]
    fn batch_norm_running_statistics_move_toward_batch_statistics() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp2::register(&mut store, "m", 2, 3, 2, true, &mut rng);
        let bn = net.bn.unwrap();
        let mut updates = Vec::new();
        {
            let mut g = Graph::new(&store);
            let xs: Vec<NodeId> = (0..4)
                .map(|i| g.leaf(vec![i as f64, -(i as f64)]))
                .collect();
            let _ = run_mlp2(
                &mut g,
                &net,
                &xs,
                Activation::Softplus,
                true,
                0.0,
                None,
                &mut updates,
            );
        }
        assert_eq!(updates.len(), 1);
        let before = store.get(bn.run_mean).data.clone();
        apply_bn_updates(&mut store, &updates);
        let after = &store.get(bn.run_mean).data;
        for ((b, a), m) in before.iter().zip(after).zip(&updates[0].stats.mean) {
            let expect = 0.9 * b + 0.1 * m;
            assert!((a - expect).abs() < 1e-12);
        }
    }
}
