//! Shared feature encoder: modality projections, fixed sinusoidal positions,
//! four depthwise-separable convolution blocks, one multi-head attention
//! block, and a feed-forward block. Video and query run through the same
//! parameters; the pooled query vector is a masked column-wise max over the
//! contextualized tokens.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, NodeId};
use crate::datamodel::GroundingExample;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore, Slot};

pub const LN_EPS: f64 = 1e-6;

/// Encoder hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Model width.
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Depthwise convolution kernel size (odd).
    pub conv_kernel: usize,
    /// Word embedding width.
    pub d_w: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d: 128, heads: 8, conv_kernel: 7, d_w: 128 }
    }
}

struct ConvBlock {
    depthwise: Slot,
    pointwise: Slot,
    bias: Slot,
    ln_gamma: Slot,
    ln_beta: Slot,
}

struct AttnBlock {
    wq: Vec<Slot>,
    wk: Vec<Slot>,
    wv: Vec<Slot>,
    wo: Slot,
    bo: Slot,
    ln_gamma: Slot,
    ln_beta: Slot,
}

struct FfnBlock {
    w: Slot,
    b: Slot,
    ln_gamma: Slot,
    ln_beta: Slot,
}

/// Slots of every encoder parameter. The conv/attention/feed-forward stack
/// is instantiated once and reused by both modalities.
pub struct EncoderParams {
    pub token_embed: Slot,
    video_proj_w: Slot,
    video_proj_b: Slot,
    text_proj_w: Slot,
    text_proj_b: Slot,
    convs: Vec<ConvBlock>,
    attn: AttnBlock,
    ffn: FfnBlock,
    cfg: EncoderConfig,
    vocab_size: usize,
    d_v: usize,
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        cfg: &EncoderConfig,
        vocab_size: usize,
        d_v: usize,
    ) -> Result<Self> {
        if cfg.d % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                cfg.d, cfg.heads
            )));
        }
        if cfg.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv kernel size must be odd".into()));
        }
        let d = cfg.d;
        let dh = d / cfg.heads;
        let token_embed = store.add("embed.tokens", init.uniform_fan_in(vocab_size, cfg.d_w));
        let video_proj_w = store.add("proj.video.w", init.uniform_fan_in(d_v, d));
        let video_proj_b = store.add("proj.video.b", init.zeros(1, d));
        let text_proj_w = store.add("proj.text.w", init.uniform_fan_in(cfg.d_w, d));
        let text_proj_b = store.add("proj.text.b", init.zeros(1, d));

        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push(ConvBlock {
                depthwise: store.add(
                    format!("enc.conv{i}.depthwise"),
                    init.uniform_with_fan_in(cfg.conv_kernel, d, cfg.conv_kernel),
                ),
                pointwise: store.add(format!("enc.conv{i}.pointwise"), init.uniform_fan_in(d, d)),
                bias: store.add(format!("enc.conv{i}.bias"), init.zeros(1, d)),
                ln_gamma: store.add(format!("enc.conv{i}.ln.gamma"), init.ones(1, d)),
                ln_beta: store.add(format!("enc.conv{i}.ln.beta"), init.zeros(1, d)),
            });
        }

        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for h in 0..cfg.heads {
            wq.push(store.add(format!("enc.attn.h{h}.wq"), init.uniform_fan_in(d, dh)));
            wk.push(store.add(format!("enc.attn.h{h}.wk"), init.uniform_fan_in(d, dh)));
            wv.push(store.add(format!("enc.attn.h{h}.wv"), init.uniform_fan_in(d, dh)));
        }
        let attn = AttnBlock {
            wq,
            wk,
            wv,
            wo: store.add("enc.attn.wo", init.uniform_fan_in(d, d)),
            bo: store.add("enc.attn.bo", init.zeros(1, d)),
            ln_gamma: store.add("enc.attn.ln.gamma", init.ones(1, d)),
            ln_beta: store.add("enc.attn.ln.beta", init.zeros(1, d)),
        };
        let ffn = FfnBlock {
            w: store.add("enc.ffn.w", init.uniform_fan_in(d, d)),
            b: store.add("enc.ffn.b", init.zeros(1, d)),
            ln_gamma: store.add("enc.ffn.ln.gamma", init.ones(1, d)),
            ln_beta: store.add("enc.ffn.ln.beta", init.zeros(1, d)),
        };
        Ok(EncoderParams {
            token_embed,
            video_proj_w,
            video_proj_b,
            text_proj_w,
            text_proj_b,
            convs,
            attn,
            ffn,
            cfg: cfg.clone(),
            vocab_size,
            d_v,
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Fixed sinusoidal positional encoding, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Mat {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Contextualized representations for one example.
#[derive(Debug, Clone)]
pub struct ContextualizedFeatures {
    /// `t x d`
    pub v_prime: Mat,
    /// `n x d`
    pub q_prime: Mat,
    /// `1 x d`, masked column-wise max over `q_prime`
    pub q_pooled: Mat,
}

/// Graph node ids of the encoder outputs.
pub struct EncodedNodes {
    pub v_prime: NodeId,
    pub q_prime: NodeId,
    pub q_pooled: NodeId,
}

fn mask_rows(g: &mut Graph, x: NodeId, mask: &[bool]) -> NodeId {
    let d = g.value(x).ncols();
    let sel = Array2::from_shape_fn((mask.len(), d), |(r, _)| if mask[r] { 1.0 } else { 0.0 });
    let sel = g.input(sel);
    g.mul(x, sel)
}

/// One pass of the shared conv / attention / feed-forward stack over an
/// already-projected sequence. `mask` marks real positions.
fn encode_sequence(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    mut x: NodeId,
    mask: Option<&[bool]>,
) -> NodeId {
    for conv in &p.convs {
        let dw = store.node(g, conv.depthwise);
        let pw = store.node(g, conv.pointwise);
        let bias = store.node(g, conv.bias);
        let gamma = store.node(g, conv.ln_gamma);
        let beta = store.node(g, conv.ln_beta);
        let c = g.depthwise_conv1d(x, dw);
        let c = g.matmul(c, pw);
        let c = g.add_row_broadcast(c, bias);
        let c = g.relu(c);
        let r = g.add(x, c);
        x = g.layer_norm(r, gamma, beta, LN_EPS);
    }

    // multi-head self-attention; per-head projections, concatenated output
    let scale = 1.0 / ((p.cfg.d / p.cfg.heads) as f64).sqrt();
    let mut heads = Vec::new();
    for h in 0..p.cfg.heads {
        let wq = store.node(g, p.attn.wq[h]);
        let wk = store.node(g, p.attn.wk[h]);
        let wv = store.node(g, p.attn.wv[h]);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let kt = g.transpose(k);
        let s = g.matmul(q, kt);
        let s = g.scale(s, scale);
        let a = g.row_softmax(s, mask);
        heads.push(g.matmul(a, v));
    }
    let concat = g.concat_cols(&heads);
    let wo = store.node(g, p.attn.wo);
    let bo = store.node(g, p.attn.bo);
    let gamma = store.node(g, p.attn.ln_gamma);
    let beta = store.node(g, p.attn.ln_beta);
    let o = g.matmul(concat, wo);
    let o = g.add_row_broadcast(o, bo);
    let r = g.add(x, o);
    x = g.layer_norm(r, gamma, beta, LN_EPS);

    let w = store.node(g, p.ffn.w);
    let b = store.node(g, p.ffn.b);
    let gamma = store.node(g, p.ffn.ln_gamma);
    let beta = store.node(g, p.ffn.ln_beta);
    let f = g.matmul(x, w);
    let f = g.add_row_broadcast(f, b);
    let f = g.relu(f);
    let r = g.add(x, f);
    g.layer_norm(r, gamma, beta, LN_EPS)
}

/// Build the encoder subgraph for one example. `query_mask`, when given,
/// marks real tokens; padded positions are zeroed before the stack, excluded
/// from attention, and excluded from the pooled max.
pub fn encode_nodes(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    video: NodeId,
    token_ids: &[usize],
    query_mask: Option<&[bool]>,
) -> EncodedNodes {
    // video path
    let w = store.node(g, p.video_proj_w);
    let b = store.node(g, p.video_proj_b);
    let v0 = g.matmul(video, w);
    let v0 = g.add_row_broadcast(v0, b);
    let t = g.value(v0).nrows();
    let pe = g.input(positional_encoding(t, p.cfg.d));
    let v0 = g.add(v0, pe);
    let v_prime = encode_sequence(g, store, p, v0, None);

    // query path: one-hot gather from the embedding table keeps the
    // gradient flowing into the table through a plain matmul
    let n = token_ids.len();
    let onehot = Array2::from_shape_fn((n, p.vocab_size), |(r, c)| {
        if token_ids[r] == c {
            1.0
        } else {
            0.0
        }
    });
    let onehot = g.input(onehot);
    let table = store.node(g, p.token_embed);
    let q_emb = g.matmul(onehot, table);
    let w = store.node(g, p.text_proj_w);
    let b = store.node(g, p.text_proj_b);
    let q0 = g.matmul(q_emb, w);
    let q0 = g.add_row_broadcast(q0, b);
    let pe = g.input(positional_encoding(n, p.cfg.d));
    let mut q0 = g.add(q0, pe);
    if let Some(m) = query_mask {
        q0 = mask_rows(g, q0, m);
    }
    let q_prime = encode_sequence(g, store, p, q0, query_mask);

    let real: Vec<usize> = match query_mask {
        Some(m) => (0..n).filter(|&i| m[i]).collect(),
        None => (0..n).collect(),
    };
    let q_pooled = g.max_rows(q_prime, &real);
    EncodedNodes { v_prime, q_prime, q_pooled }
}

/// Run the encoder outside of training and return plain matrices.
pub fn encode(
    example: &GroundingExample,
    store: &ParamStore,
    p: &EncoderParams,
) -> Result<ContextualizedFeatures> {
    if example.video.d_v() != p.d_v {
        return Err(Error::Config(format!(
            "video feature dim {} does not match encoder projection ({})",
            example.video.d_v(),
            p.d_v
        )));
    }
    if let Some(&bad) = example.query.tokens.iter().find(|&&t| t >= p.vocab_size) {
        return Err(Error::Config(format!(
            "token id {bad} outside embedding table of size {}",
            p.vocab_size
        )));
    }
    let mut g = Graph::new();
    let video = g.input(example.video.features.clone());
    let nodes = encode_nodes(&mut g, store, p, video, &example.query.tokens, None);
    Ok(ContextualizedFeatures {
        v_prime: g.value(nodes.v_prime).clone(),
        q_prime: g.value(nodes.q_prime).clone(),
        q_pooled: g.value(nodes.q_pooled).clone(),
    })
}

/// Masked column-wise max over rows (the query pooling rule).
pub fn max_pool_rows(x: &Mat, mask: Option<&[bool]>) -> Mat {
    let rows: Vec<usize> = match mask {
        Some(m) => (0..x.nrows()).filter(|&i| m[i]).collect(),
        None => (0..x.nrows()).collect(),
    };
    let mut g = Graph::new();
    let id = g.input(x.clone());
    let pooled = g.max_rows(id, &rows);
    g.value(pooled).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{
        BoundaryIndices, QueryTokens, TimeInterval, VideoFeatureSequence,
    };
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { d: 8, heads: 2, conv_kernel: 7, d_w: 8 }
    }

    fn build(seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let p = EncoderParams::init(&mut store, &mut init, &small_cfg(), 7, 5).unwrap();
        (store, p)
    }

    fn example(t: usize, tokens: Vec<usize>, seed: u64) -> GroundingExample {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let features = Mat::from_shape_fn((t, 5), |_| rng.random_range(-1.0..1.0));
        GroundingExample {
            id: "ex".into(),
            video: VideoFeatureSequence::new(features).unwrap(),
            query: QueryTokens { tokens, raw_text: String::new() },
            gold_time: TimeInterval::new(0.0, 1.0, 4.0).unwrap(),
            gold_idx: BoundaryIndices::new(0, 1, t).unwrap(),
        }
    }

    #[test]
    fn init_requires_divisible_heads() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let cfg = EncoderConfig { d: 10, heads: 4, conv_kernel: 7, d_w: 8 };
        assert!(matches!(
            EncoderParams::init(&mut store, &mut init, &cfg, 7, 5),
            Err(Error::Config(_))
        ));
        // d = 64, h = 4 gives a 16-wide head
        let cfg = EncoderConfig { d: 64, heads: 4, conv_kernel: 7, d_w: 8 };
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, &mut init, &cfg, 7, 5).unwrap();
        assert_eq!(store.value(p.attn.wq[0]).ncols(), 16);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let (s1, _) = build(3);
        let (s2, _) = build(3);
        for ((n1, v1), (n2, v2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
        let (s3, _) = build(4);
        let differs = s1.iter().zip(s3.iter()).any(|((_, a), (_, b))| a != b);
        assert!(differs, "seed change must move at least one parameter");
    }

    #[test]
    fn encode_is_deterministic_and_shapes_hold() {
        let (store, p) = build(1);
        let ex = example(6, vec![1, 2, 3, 4], 9);
        let a = encode(&ex, &store, &p).unwrap();
        let b = encode(&ex, &store, &p).unwrap();
        assert_eq!(a.v_prime, b.v_prime);
        assert_eq!(a.q_prime, b.q_prime);
        assert_eq!(a.q_pooled, b.q_pooled);
        assert_eq!(a.v_prime.dim(), (6, 8));
        assert_eq!(a.q_prime.dim(), (4, 8));
        assert_eq!(a.q_pooled.dim(), (1, 8));
        assert!(a.v_prime.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_single_position_attention() {
        let (store, p) = build(1);
        let ex = example(2, vec![1], 5);
        // t = 2 is the minimum sequence; n = 1 exercises the single-token
        // softmax, whose attention weight is exactly 1
        let out = encode(&ex, &store, &p).unwrap();
        assert_eq!(out.q_prime.dim(), (1, 8));
        assert_eq!(out.q_pooled, out.q_prime);
    }

    #[test]
    fn pooling_is_columnwise_max() {
        let q = array![[1.0, 5.0], [3.0, 2.0]];
        assert_eq!(max_pool_rows(&q, None), array![[3.0, 5.0]]);
        // masked positions are excluded from the max
        assert_eq!(max_pool_rows(&q, Some(&[true, false])), array![[1.0, 5.0]]);
    }

    #[test]
    fn shared_weights_steer_both_modalities() {
        let (mut store, p) = build(1);
        let ex = example(6, vec![1, 2, 3], 9);
        let before = encode(&ex, &store, &p).unwrap();
        let mut bumped = store.value(p.convs[0].pointwise).clone();
        bumped[[0, 0]] += 0.5;
        store.set(p.convs[0].pointwise, bumped);
        let after = encode(&ex, &store, &p).unwrap();
        assert_ne!(before.v_prime, after.v_prime);
        assert_ne!(before.q_prime, after.q_prime);
    }

    #[test]
    fn mismatched_dims_are_config_errors() {
        let (store, p) = build(1);
        let mut ex = example(6, vec![1, 2], 9);
        ex.video =
            VideoFeatureSequence::new(Mat::zeros((6, 4))).unwrap();
        assert!(matches!(encode(&ex, &store, &p), Err(Error::Config(_))));

        let ex = example(6, vec![1, 99], 9);
        assert!(matches!(encode(&ex, &store, &p), Err(Error::Config(_))));
    }

    /// Analytic parameter gradients of a probe loss (sum of `v_prime`)
    /// against central finite differences.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (store, p) = build(2);
        let ex = example(6, vec![1, 2, 3, 4], 9);

        let mut g = Graph::new();
        let video = g.input(ex.video.features.clone());
        let nodes = encode_nodes(&mut g, &store, &p, video, &ex.query.tokens, None);
        let loss = g.sum_all(nodes.v_prime);
        let grads = g.backward(loss, store.len());

        let probe = |store: &ParamStore| {
            let mut g = Graph::new();
            let video = g.input(ex.video.features.clone());
            let nodes = encode_nodes(&mut g, &store, &p, video, &ex.query.tokens, None);
            let loss = g.sum_all(nodes.v_prime);
            g.scalar(loss)
        };

        let step = 1e-4;
        let mut checked = 0usize;
        for slot in 0..store.len() {
            let base = store.value(slot).clone();
            let analytic = grads.slot(slot).cloned().unwrap_or_else(|| Mat::zeros(base.dim()));
            // subsample large tensors to keep the test quick
            let stride = (base.len() / 8).max(1);
            for (k, (idx, _)) in base.indexed_iter().enumerate() {
                if k % stride != 0 {
                    continue;
                }
                let mut s = ParamStore::new();
                for (name, v) in store.iter() {
                    s.add(name, v.clone());
                }
                s.entry_mut(slot)[idx] += step;
                let up = probe(&s);
                s.entry_mut(slot)[idx] -= 2.0 * step;
                let down = probe(&s);
                let fd = (up - down) / (2.0 * step);
                let a = analytic[idx];
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-4);
                assert!(
                    rel < 1e-4,
                    "{} {:?}: analytic {a:.4e} vs fd {fd:.4e} (rel {rel:.2e})",
                    store.name(slot),
                    idx
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
