//! Context-query attention fusion: trilinear similarities, context-to-query
//! and query-to-context attention, and a feed-forward projection of the
//! `[V'; A; V'.A; V'.B]` concatenation back to width `d`.

use ndarray::Array2;

use crate::autodiff::{Graph, Mat, NodeId};
use crate::encoder::ContextualizedFeatures;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore, Slot};

/// Trilinear similarity weights and the output feed-forward layer (`4d -> d`).
pub struct FusionParams {
    w_video: Slot,
    w_query: Slot,
    w_mix: Slot,
    ffn_w: Slot,
    ffn_b: Slot,
    d: usize,
}

impl FusionParams {
    pub fn init(store: &mut ParamStore, init: &mut Initializer, d: usize) -> Self {
        FusionParams {
            w_video: store.add("fuse.w_video", init.uniform_fan_in(d, 1)),
            w_query: store.add("fuse.w_query", init.uniform_fan_in(d, 1)),
            w_mix: store.add("fuse.w_mix", init.uniform_with_fan_in(1, d, d)),
            ffn_w: store.add("fuse.ffn.w", init.uniform_fan_in(4 * d, d)),
            ffn_b: store.add("fuse.ffn.b", init.zeros(1, d)),
            d,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

/// Build the fused representation `X` (`t x d`) in the graph.
/// `S_ij = w_v.v_i + w_q.q_j + w_m.(v_i * q_j)`; masked query positions get
/// zero attention weight.
pub fn cqa_fuse_nodes(
    g: &mut Graph,
    store: &ParamStore,
    p: &FusionParams,
    v_prime: NodeId,
    q_prime: NodeId,
    query_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let (t, d) = g.value(v_prime).dim();
    let (n, dq) = g.value(q_prime).dim();
    if d != p.d || dq != p.d {
        return Err(Error::Config(format!(
            "fusion expects width {}, got video {d} and query {dq}",
            p.d
        )));
    }
    if let Some(m) = query_mask {
        if m.len() != n {
            return Err(Error::Config("query mask length mismatch".into()));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::Config("all query positions are masked".into()));
        }
    }

    let w_v = store.node(g, p.w_video);
    let w_q = store.node(g, p.w_query);
    let w_m = store.node(g, p.w_mix);

    // S = (V' w_v) 1^T + 1 (Q' w_q)^T + (V' * w_m) Q'^T
    let sv = g.matmul(v_prime, w_v);
    let ones_n = g.input(Array2::ones((1, n)));
    let sa = g.matmul(sv, ones_n);
    let sq = g.matmul(q_prime, w_q);
    let sqt = g.transpose(sq);
    let ones_t = g.input(Array2::ones((t, 1)));
    let sb = g.matmul(ones_t, sqt);
    let vm = g.mul_row_broadcast(v_prime, w_m);
    let qt = g.transpose(q_prime);
    let sc = g.matmul(vm, qt);
    let s0 = g.add(sa, sb);
    let s = g.add(s0, sc);

    // context-to-query attention
    let s_row = g.row_softmax(s, query_mask);
    let a = g.matmul(s_row, q_prime);

    // query-to-context attention: softmax over video positions
    let st = g.transpose(s);
    let s_col_t = g.row_softmax(st, None);
    let b_attn = g.matmul(s_row, s_col_t);
    let b = g.matmul(b_attn, v_prime);

    let va = g.mul(v_prime, a);
    let vb = g.mul(v_prime, b);
    let cat = g.concat_cols(&[v_prime, a, va, vb]);
    let w = store.node(g, p.ffn_w);
    let bias = store.node(g, p.ffn_b);
    let x = g.matmul(cat, w);
    Ok(g.add_row_broadcast(x, bias))
}

/// Fuse encoded features outside of training.
pub fn cqa_fuse(
    feats: &ContextualizedFeatures,
    store: &ParamStore,
    p: &FusionParams,
    query_mask: Option<&[bool]>,
) -> Result<Mat> {
    let mut g = Graph::new();
    let v = g.input(feats.v_prime.clone());
    let q = g.input(feats.q_prime.clone());
    let x = cqa_fuse_nodes(&mut g, store, p, v, q, query_mask)?;
    Ok(g.value(x).clone())
}
