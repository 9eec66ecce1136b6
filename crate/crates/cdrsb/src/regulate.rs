//! Per-pair gating of the social-influence embedding.
//!
//! Social influence only helps when a friend-recommended item actually
//! resembles what the user already consumes. We score that resemblance as the
//! maximum cosine similarity between the candidate item's interest embedding
//! and the interest embeddings of the user's other training-history items,
//! and turn it into a hard weight: alpha = 1 when the similarity clears the
//! threshold, 0 otherwise, and always 0 for items no friend interacted with.
//! Alpha is a constant in differentiation — the similarity machinery carries
//! no gradient.

use crate::dataset::DatasetBundle;
use crate::tape::{Graph, NodeId};
use serde::Serialize;

/// Cosine similarity, with near-zero vectors treated as dissimilar to
/// everything (0) rather than producing NaN.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let na = na.sqrt();
    let nb = nb.sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Maximum similarity between `item` and the user's other training-history
/// items, over the given per-item embedding table. Returns −1 when the user
/// has no history beyond the item itself — the sentinel forces alpha to 0.
pub fn max_history_similarity(
    bundle: &DatasetBundle,
    item_embeddings: &[Vec<f64>],
    user: u32,
    item: u32,
) -> f64 {
    let target = &item_embeddings[item as usize];
    let mut best = f64::NEG_INFINITY;
    for &(hist_item, _) in &bundle.user_hist[user as usize] {
        if hist_item == item {
            continue;
        }
        let s = cosine(target, &item_embeddings[hist_item as usize]);
        if s > best {
            best = s;
        }
    }
    if best.is_finite() {
        best
    } else {
        -1.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RegulationDecision {
    pub user: u32,
    pub item: u32,
    pub friend_recommended: bool,
    /// Present only for friend-recommended pairs.
    pub similarity: Option<f64>,
    pub alpha: u8,
}

/// The gate: alpha = 1 iff the item is friend-recommended AND its maximum
/// history similarity strictly exceeds the threshold. Equality stays closed.
pub fn regulation_weight(
    bundle: &DatasetBundle,
    item_embeddings: &[Vec<f64>],
    user: u32,
    item: u32,
    threshold: f64,
) -> RegulationDecision {
    if !bundle.friend_recommended(user, item) {
        return RegulationDecision {
            user,
            item,
            friend_recommended: false,
            similarity: None,
            alpha: 0,
        };
    }
    let s = max_history_similarity(bundle, item_embeddings, user, item);
    RegulationDecision {
        user,
        item,
        friend_recommended: true,
        similarity: Some(s),
        alpha: u8::from(s > threshold),
    }
}

/// h = z + alpha * c, with alpha a constant.
pub fn fuse(g: &mut Graph, z: NodeId, c: NodeId, alpha: f64) -> NodeId {
    g.add_scaled(z, c, alpha)
}

/// The weight a given ablation variant actually applies: the computed gate
/// for `full` and `no_mi`, always-on for `no_wt`, always-off for `no_sl`.
pub fn effective_alpha(
    variant: crate::config::Variant,
    bundle: &DatasetBundle,
    item_embeddings: &[Vec<f64>],
    user: u32,
    item: u32,
    threshold: f64,
) -> f64 {
    use crate::config::Variant;
    match variant {
        Variant::NoWt => 1.0,
        Variant::NoSl => 0.0,
        Variant::Full | Variant::NoMi => {
            f64::from(regulation_weight(bundle, item_embeddings, user, item, threshold).alpha)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct AlphaSummary {
    pub num_pairs: usize,
    pub num_friend_recommended: usize,
    /// Friend-recommended pairs whose influence embedding is kept (alpha = 1).
    pub num_positive: usize,
    /// Friend-recommended pairs whose influence embedding is dropped.
    pub num_negative: usize,
}

/// Decide every pair and tally how often social influence survives the gate.
pub fn alpha_report(
    bundle: &DatasetBundle,
    item_embeddings: &[Vec<f64>],
    pairs: &[(u32, u32)],
    threshold: f64,
) -> (Vec<RegulationDecision>, AlphaSummary) {
    let mut decisions = Vec::with_capacity(pairs.len());
    let mut summary = AlphaSummary {
        num_pairs: pairs.len(),
        ..AlphaSummary::default()
    };
    for &(u, v) in pairs {
        let d = regulation_weight(bundle, item_embeddings, u, v, threshold);
        if d.friend_recommended {
            summary.num_friend_recommended += 1;
            if d.alpha == 1 {
                summary.num_positive += 1;
            } else {
                summary.num_negative += 1;
            }
        }
        decisions.push(d);
    }
    (decisions, summary)
}
