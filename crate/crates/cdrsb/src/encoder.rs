//! Graph-based user/item encoder.
//!
//! A user's representation combines four projected-and-activated views: their
//! own id embedding, the mean of their rated items' embeddings, the mean of
//! the corresponding rating-level embeddings, and the mean of their trusted
//! neighbors' embeddings. An item symmetrically combines its id embedding
//! with the means over its raters and their rating levels. Every projection
//! site owns its own weight matrix and bias; empty neighborhoods contribute a
//! zero vector.

use crate::dataset::DatasetBundle;
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Activation, Graph, NodeId};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        out_dim: usize,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Affine {
        let w = store.add(&format!("{name}.w"), out_dim, in_dim, true);
        let b = store.add(&format!("{name}.b"), 1, out_dim, true);
        store.init_uniform(w, rng);
        // biases start at zero
        Affine { w, b }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub user_table: ParamId,
    pub item_table: ParamId,
    pub rating_table: ParamId,
    pub proj_user_id: Affine,
    pub proj_hist_item: Affine,
    pub proj_hist_rating: Affine,
    pub proj_neighbor: Affine,
    pub proj_item_id: Affine,
    pub proj_rater: Affine,
    pub proj_rater_rating: Affine,
    pub user_concat: Affine,
    pub item_concat: Affine,
    pub d: usize,
    pub rating_levels: usize,
}

impl EncoderParams {
    pub fn register(
        store: &mut ParameterStore,
        n_users: usize,
        n_items: usize,
        rating_levels: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> EncoderParams {
        let user_table = store.add("enc.user_table", n_users, d, true);
        let item_table = store.add("enc.item_table", n_items, d, true);
        let rating_table = store.add("enc.rating_table", rating_levels, d, true);
        store.init_uniform(user_table, rng);
        store.init_uniform(item_table, rng);
        store.init_uniform(rating_table, rng);
        EncoderParams {
            user_table,
            item_table,
            rating_table,
            proj_user_id: Affine::register(store, "enc.proj_user_id", d, d, rng),
            proj_hist_item: Affine::register(store, "enc.proj_hist_item", d, d, rng),
            proj_hist_rating: Affine::register(store, "enc.proj_hist_rating", d, d, rng),
            proj_neighbor: Affine::register(store, "enc.proj_neighbor", d, d, rng),
            proj_item_id: Affine::register(store, "enc.proj_item_id", d, d, rng),
            proj_rater: Affine::register(store, "enc.proj_rater", d, d, rng),
            proj_rater_rating: Affine::register(store, "enc.proj_rater_rating", d, d, rng),
            user_concat: Affine::register(store, "enc.user_concat", d, 4 * d, rng),
            item_concat: Affine::register(store, "enc.item_concat", d, 3 * d, rng),
            d,
            rating_levels,
        }
    }

    fn rating_row(&self, rating: u8) -> usize {
        if self.rating_levels == 1 {
            0
        } else {
            (rating as usize - 1).min(self.rating_levels - 1)
        }
    }
}

fn project(g: &mut Graph, aff: Affine, table: ParamId, row: usize, act: Activation) -> NodeId {
    let e = g.lookup(table, row);
    let a = g.affine(aff.w, aff.b, e);
    g.act(a, act)
}

/// The projected component embeddings a user's representation is built from.
pub struct UserComponents {
    pub id: NodeId,
    pub hist_items: Vec<NodeId>,
    pub hist_ratings: Vec<NodeId>,
    pub neighbors: Vec<NodeId>,
}

pub fn user_components(
    g: &mut Graph,
    p: &EncoderParams,
    bundle: &DatasetBundle,
    user: u32,
    act: Activation,
) -> UserComponents {
    let id = project(g, p.proj_user_id, p.user_table, user as usize, act);
    let hist = &bundle.user_hist[user as usize];
    let mut hist_items = Vec::with_capacity(hist.len());
    let mut hist_ratings = Vec::with_capacity(hist.len());
    for &(item, rating) in hist {
        hist_items.push(project(g, p.proj_hist_item, p.item_table, item as usize, act));
        hist_ratings.push(project(
            g,
            p.proj_hist_rating,
            p.rating_table,
            p.rating_row(rating),
            act,
        ));
    }
    let neighbors = bundle.neighbors[user as usize]
        .iter()
        .map(|&w| project(g, p.proj_neighbor, p.user_table, w as usize, act))
        .collect();
    UserComponents {
        id,
        hist_items,
        hist_ratings,
        neighbors,
    }
}

/// x_u: activation(W * [id ; mean(items) ; mean(ratings) ; mean(neighbors)] + b)
pub fn encode_user(
    g: &mut Graph,
    p: &EncoderParams,
    bundle: &DatasetBundle,
    user: u32,
    act: Activation,
) -> NodeId {
    let c = user_components(g, p, bundle, user, act);
    let items = g.mean(&c.hist_items, p.d);
    let ratings = g.mean(&c.hist_ratings, p.d);
    let social = g.mean(&c.neighbors, p.d);
    let cat = g.concat(&[c.id, items, ratings, social]);
    let a = g.affine(p.user_concat.w, p.user_concat.b, cat);
    g.act(a, act)
}

/// x_v: activation(W * [id ; mean(raters) ; mean(ratings)] + b)
pub fn encode_item(
    g: &mut Graph,
    p: &EncoderParams,
    bundle: &DatasetBundle,
    item: u32,
    act: Activation,
) -> NodeId {
    let id = project(g, p.proj_item_id, p.item_table, item as usize, act);
    let hist = &bundle.item_hist[item as usize];
    let mut raters = Vec::with_capacity(hist.len());
    let mut ratings = Vec::with_capacity(hist.len());
    for &(user, rating) in hist {
        raters.push(project(g, p.proj_rater, p.user_table, user as usize, act));
        ratings.push(project(
            g,
            p.proj_rater_rating,
            p.rating_table,
            p.rating_row(rating),
            act,
        ));
    }
    let raters_mean = g.mean(&raters, p.d);
    let ratings_mean = g.mean(&ratings, p.d);
    let cat = g.concat(&[id, raters_mean, ratings_mean]);
    let a = g.affine(p.item_concat.w, p.item_concat.b, cat);
    g.act(a, act)
}

/// Encode each user in `users` once; results align with the input order.
pub fn encode_users(
    g: &mut Graph,
    p: &EncoderParams,
    bundle: &DatasetBundle,
    users: &[u32],
    act: Activation,
) -> Vec<NodeId> {
    users
        .iter()
        .map(|&u| encode_user(g, p, bundle, u, act))
        .collect()
}

pub fn encode_items(
    g: &mut Graph,
    p: &EncoderParams,
    bundle: &DatasetBundle,
    items: &[u32],
    act: Activation,
) -> Vec<NodeId> {
    items
        .iter()
        .map(|&v| encode_item(g, p, bundle, v, act))
        .collect()
}
