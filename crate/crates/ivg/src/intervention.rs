//! Causal intervention head: confounder phrase embeddings with dataset
//! priors, the NWGM-moved backdoor adjustment `X (+) z_bar` where
//! `z_bar = mean over the three sets of sum_z p(z) g(embed(z))`, and the
//! start/end span scoring heads with their cross-entropy losses.
//!
//! Because the adjustment marginalizes over the whole vocabulary, the
//! prior-weighted sum collapses to a single broadcast-added vector; the
//! brute-force form `sum_z p(z) (X (+) z)` is kept in tests as the oracle.

use ndarray::Array2;

use crate::autodiff::{Graph, Mat, NodeId};
use crate::datamodel::BoundaryIndices;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore, Slot};
use crate::vocab::ConfounderVocab;

pub const LOG_EPS: f64 = 1e-12;

/// Per-set phrase embeddings, the shared projection `g`, and the cached
/// priors. `dim(z)` always equals the fused feature width `d`.
pub struct ConfounderEmbeddingTable {
    pub role_embed: Slot,
    pub action_embed: Slot,
    pub object_embed: Slot,
    pub g_w: Slot,
    pub g_b: Slot,
    role_priors: Vec<f64>,
    action_priors: Vec<f64>,
    object_priors: Vec<f64>,
    d_e: usize,
    d: usize,
}

impl ConfounderEmbeddingTable {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        vocab: &ConfounderVocab,
        d_e: usize,
        d: usize,
    ) -> Result<Self> {
        for (name, set) in
            [("role", &vocab.roles), ("action", &vocab.actions), ("object", &vocab.objects)]
        {
            if set.is_empty() {
                return Err(Error::Config(format!("confounder {name} set is empty")));
            }
        }
        Ok(ConfounderEmbeddingTable {
            role_embed: store
                .add("conf.role.embed", init.uniform_fan_in(vocab.roles.len(), d_e)),
            action_embed: store
                .add("conf.action.embed", init.uniform_fan_in(vocab.actions.len(), d_e)),
            object_embed: store
                .add("conf.object.embed", init.uniform_fan_in(vocab.objects.len(), d_e)),
            g_w: store.add("conf.g.w", init.identity_plus_noise(d_e, d, 0.01)),
            g_b: store.add("conf.g.b", init.zeros(1, d)),
            role_priors: vocab.roles.priors(),
            action_priors: vocab.actions.priors(),
            object_priors: vocab.objects.priors(),
            d_e,
            d,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    /// `z_bar` as a graph node (`1 x d`): the prior-weighted embedding mean
    /// of each set, averaged across the three sets, then projected by `g`.
    /// The projection bias passes through because each set's priors sum to 1.
    pub fn zbar_node(&self, g: &mut Graph, store: &ParamStore) -> NodeId {
        let sets = [
            (self.role_embed, &self.role_priors),
            (self.action_embed, &self.action_priors),
            (self.object_embed, &self.object_priors),
        ];
        let mut acc: Option<NodeId> = None;
        for (slot, priors) in sets {
            let p = g.input(Array2::from_shape_vec((1, priors.len()), priors.clone()).unwrap());
            let table = store.node(g, slot);
            let e = g.matmul(p, table);
            acc = Some(match acc {
                Some(prev) => g.add(prev, e),
                None => e,
            });
        }
        let mean_e = g.scale(acc.unwrap(), 1.0 / 3.0);
        let w = store.node(g, self.g_w);
        let b = store.node(g, self.g_b);
        let z = g.matmul(mean_e, w);
        g.add_row_broadcast(z, b)
    }

    /// `z_bar` as a plain `1 x d` matrix.
    pub fn zbar(&self, store: &ParamStore) -> Mat {
        let mut g = Graph::new();
        let z = self.zbar_node(&mut g, store);
        g.value(z).clone()
    }
}

/// Backdoor-adjusted features: `X (+) z_bar` (graph form).
pub fn deconfound_nodes(
    g: &mut Graph,
    store: &ParamStore,
    table: &ConfounderEmbeddingTable,
    x: NodeId,
) -> NodeId {
    let z = table.zbar_node(g, store);
    g.add_row_broadcast(x, z)
}

/// Backdoor-adjusted features as a plain matrix.
pub fn deconfound(x: &Mat, store: &ParamStore, table: &ConfounderEmbeddingTable) -> Result<Mat> {
    if x.ncols() != table.d {
        return Err(Error::Config(format!(
            "deconfound expects width {}, got {}",
            table.d,
            x.ncols()
        )));
    }
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let out = deconfound_nodes(&mut g, store, table, xn);
    Ok(g.value(out).clone())
}

/// Two position-wise scoring stacks (`[x_i; avg(x)] -> d -> 1`), one per
/// boundary.
pub struct SpanHeadParams {
    start_w1: Slot,
    start_b1: Slot,
    start_w2: Slot,
    start_b2: Slot,
    end_w1: Slot,
    end_b1: Slot,
    end_w2: Slot,
    end_b2: Slot,
    d: usize,
}

impl SpanHeadParams {
    pub fn init(store: &mut ParamStore, init: &mut Initializer, d: usize) -> Self {
        let mut head = |name: &str| {
            (
                store.add(format!("head.{name}.w1"), init.uniform_fan_in(2 * d, d)),
                store.add(format!("head.{name}.b1"), init.zeros(1, d)),
                store.add(format!("head.{name}.w2"), init.uniform_fan_in(d, 1)),
                store.add(format!("head.{name}.b2"), init.zeros(1, 1)),
            )
        };
        let (start_w1, start_b1, start_w2, start_b2) = head("start");
        let (end_w1, end_b1, end_w2, end_b2) = head("end");
        SpanHeadParams {
            start_w1,
            start_b1,
            start_w2,
            start_b2,
            end_w1,
            end_b1,
            end_w2,
            end_b2,
            d,
        }
    }
}

fn head_logits(
    g: &mut Graph,
    store: &ParamStore,
    x_with_ctx: NodeId,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
) -> NodeId {
    let w1 = store.node(g, w1);
    let b1 = store.node(g, b1);
    let w2 = store.node(g, w2);
    let b2 = store.node(g, b2);
    let h = g.matmul(x_with_ctx, w1);
    let h = g.add_row_broadcast(h, b1);
    let h = g.relu(h);
    let l = g.matmul(h, w2);
    let l = g.add_row_broadcast(l, b2);
    g.transpose(l)
}

/// Start/end probability nodes (`1 x t` each) from adjusted features.
pub fn span_distribution_nodes(
    g: &mut Graph,
    store: &ParamStore,
    heads: &SpanHeadParams,
    x_adj: NodeId,
) -> (NodeId, NodeId) {
    let t = g.value(x_adj).nrows();
    let all: Vec<usize> = (0..t).collect();
    let ctx = g.mean_rows(x_adj, &all);
    let ones = g.input(Array2::ones((t, 1)));
    let ctx_rows = g.matmul(ones, ctx);
    let u = g.concat_cols(&[x_adj, ctx_rows]);
    let ls = head_logits(g, store, u, heads.start_w1, heads.start_b1, heads.start_w2, heads.start_b2);
    let le = head_logits(g, store, u, heads.end_w1, heads.end_b1, heads.end_w2, heads.end_b2);
    (g.row_softmax(ls, None), g.row_softmax(le, None))
}

/// Length-`t` boundary probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistribution {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

impl SpanDistribution {
    pub fn t(&self) -> usize {
        self.p_start.len()
    }
}

/// Softmax the two scoring heads over positions.
pub fn span_distributions(
    x_adj: &Mat,
    store: &ParamStore,
    heads: &SpanHeadParams,
) -> Result<SpanDistribution> {
    if x_adj.ncols() != heads.d {
        return Err(Error::Config(format!(
            "span heads expect width {}, got {}",
            heads.d,
            x_adj.ncols()
        )));
    }
    if let Some(pos) = x_adj.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "span head input".into(), position: pos });
    }
    let mut g = Graph::new();
    let x = g.input(x_adj.clone());
    let (ps, pe) = span_distribution_nodes(&mut g, store, heads, x);
    let p_start: Vec<f64> = g.value(ps).iter().copied().collect();
    let p_end: Vec<f64> = g.value(pe).iter().copied().collect();
    if let Some(pos) = p_start.iter().chain(&p_end).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "span distribution".into(), position: pos });
    }
    Ok(SpanDistribution { p_start, p_end })
}

/// Cross-entropy loss nodes for the gold boundaries: `-ln p[gold]`, with the
/// probability clamped at `1e-12` (clamps are counted in the graph
/// diagnostics).
pub fn span_ce_nodes(
    g: &mut Graph,
    p_start: NodeId,
    p_end: NodeId,
    gold: &BoundaryIndices,
) -> (NodeId, NodeId) {
    let t = g.value(p_start).ncols();
    let pick = |g: &mut Graph, p: NodeId, idx: usize| {
        let onehot = Array2::from_shape_fn((t, 1), |(r, _)| if r == idx { 1.0 } else { 0.0 });
        let sel = g.input(onehot);
        let picked = g.matmul(p, sel);
        let logp = g.log_clamped(picked, LOG_EPS);
        g.scale(logp, -1.0)
    };
    (pick(g, p_start, gold.i_start), pick(g, p_end, gold.i_end))
}

/// `(L_s, L_e)` for a distribution and gold boundaries.
pub fn span_cross_entropy(dist: &SpanDistribution, gold: &BoundaryIndices) -> Result<(f64, f64)> {
    if gold.i_end >= dist.t() {
        return Err(Error::Config(format!(
            "gold index {} outside distribution of length {}",
            gold.i_end,
            dist.t()
        )));
    }
    let ls = -dist.p_start[gold.i_start].max(LOG_EPS).ln();
    let le = -dist.p_end[gold.i_end].max(LOG_EPS).ln();
    Ok((ls, le))
}

/// Joint-likelihood decoding: argmax over `i <= j` of
/// `p_start[i] * p_end[j]`, ties broken toward the smaller start then the
/// smaller end.
pub fn predict_span(dist: &SpanDistribution) -> BoundaryIndices {
    let t = dist.t();
    let (mut bi, mut bj, mut best) = (0usize, 0usize, f64::NEG_INFINITY);
    for i in 0..t {
        for j in i..t {
            let joint = dist.p_start[i] * dist.p_end[j];
            if joint > best {
                best = joint;
                bi = i;
                bj = j;
            }
        }
    }
    BoundaryIndices { i_start: bi, i_end: bj, t }
}
