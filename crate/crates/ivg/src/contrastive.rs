//! Dual contrastive learning losses.
//!
//! Both heads estimate a Jensen-Shannon mutual-information lower bound with
//! a bilinear discriminator `C(a, b) = a^T W b`:
//!
//! `I = E_pos[-sp(-C)] - E_neg[sp(C)]`, `sp(x) = ln(1 + e^x)`
//!
//! QV contrasts the pooled query vector against in-moment video positions
//! (positives) and out-of-moment positions (negatives). VV does the same for
//! the boundary representations, with positives being the remaining
//! in-moment positions (the anchor itself when the moment is a single
//! index). Expectations are arithmetic means over the index sets.

use crate::autodiff::{Graph, Mat, NodeId};
use crate::datamodel::BoundaryIndices;
use crate::encoder::ContextualizedFeatures;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore, Slot};

/// Complementary position split: inside vs outside the gold moment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastMask {
    pub positive: Vec<bool>,
    pub negative: Vec<bool>,
}

impl ContrastMask {
    pub fn new(positive: Vec<bool>, negative: Vec<bool>) -> Result<Self> {
        if positive.len() != negative.len() {
            return Err(Error::Mask("positive/negative length mismatch".into()));
        }
        for i in 0..positive.len() {
            if positive[i] == negative[i] {
                return Err(Error::Mask(format!(
                    "position {i} must be in exactly one of positive/negative"
                )));
            }
        }
        let mask = ContrastMask { positive, negative };
        if mask.positive_indices().is_empty() {
            return Err(Error::Mask("no positive positions".into()));
        }
        if mask.negative_indices().is_empty() {
            return Err(Error::Mask("no negative positions".into()));
        }
        Ok(mask)
    }

    /// Positions inside the gold moment are positive, the rest negative.
    pub fn from_span(gold: &BoundaryIndices) -> Result<Self> {
        let positive: Vec<bool> =
            (0..gold.t).map(|i| i >= gold.i_start && i <= gold.i_end).collect();
        let negative: Vec<bool> = positive.iter().map(|p| !p).collect();
        ContrastMask::new(positive, negative)
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.positive.len()).filter(|&i| self.positive[i]).collect()
    }

    pub fn negative_indices(&self) -> Vec<usize> {
        (0..self.negative.len()).filter(|&i| self.negative[i]).collect()
    }
}

/// Bilinear discriminator weights, one per contrastive head.
pub struct DiscriminatorParams {
    pub qv: Slot,
    pub vv_start: Slot,
    pub vv_end: Slot,
}

impl DiscriminatorParams {
    pub fn init(store: &mut ParamStore, init: &mut Initializer, d: usize) -> Self {
        DiscriminatorParams {
            qv: store.add("disc.qv", init.uniform_fan_in(d, d)),
            vv_start: store.add("disc.vv_start", init.uniform_fan_in(d, d)),
            vv_end: store.add("disc.vv_end", init.uniform_fan_in(d, d)),
        }
    }
}

/// Discriminator scores of `anchor` against every row of `v_prime`, `t x 1`.
fn bilinear_scores(g: &mut Graph, anchor: NodeId, v_prime: NodeId, w: NodeId) -> NodeId {
    let aw = g.matmul(anchor, w);
    let vt = g.transpose(v_prime);
    let s = g.matmul(aw, vt);
    g.transpose(s)
}

/// MI lower bound over explicit index sets (graph form).
pub fn js_mi_node(
    g: &mut Graph,
    anchor: NodeId,
    v_prime: NodeId,
    pos: &[usize],
    neg: &[usize],
    w: NodeId,
) -> NodeId {
    debug_assert!(!pos.is_empty() && !neg.is_empty());
    let scores = bilinear_scores(g, anchor, v_prime, w);
    let neg_scores = g.scale(scores, -1.0);
    let sp_neg = g.softplus(neg_scores);
    let pos_mean = g.mean_rows(sp_neg, pos);
    let pos_term = g.scale(pos_mean, -1.0);
    let sp = g.softplus(scores);
    let neg_term = g.mean_rows(sp, neg);
    g.sub(pos_term, neg_term)
}

/// Jensen-Shannon MI lower bound between an anchor vector and a clip
/// sequence, split by `mask`.
pub fn js_mi_estimate(
    anchor: &Mat,
    v_prime: &Mat,
    mask: &ContrastMask,
    disc: &Mat,
) -> Result<f64> {
    if mask.positive.len() != v_prime.nrows() {
        return Err(Error::Mask(format!(
            "mask length {} does not cover {} positions",
            mask.positive.len(),
            v_prime.nrows()
        )));
    }
    let mut g = Graph::new();
    let a = g.input(anchor.clone());
    let v = g.input(v_prime.clone());
    let w = g.input(disc.clone());
    let mi = js_mi_node(
        &mut g,
        a,
        v,
        &mask.positive_indices(),
        &mask.negative_indices(),
        w,
    );
    Ok(g.scalar(mi))
}

/// QV contrastive loss node: `L_vq = -I(q_pooled, V')`.
pub fn qv_loss_node(
    g: &mut Graph,
    q_pooled: NodeId,
    v_prime: NodeId,
    mask: &ContrastMask,
    w: NodeId,
) -> NodeId {
    let mi = js_mi_node(
        g,
        q_pooled,
        v_prime,
        &mask.positive_indices(),
        &mask.negative_indices(),
        w,
    );
    g.scale(mi, -1.0)
}

pub fn qv_loss(feats: &ContextualizedFeatures, mask: &ContrastMask, disc: &Mat) -> Result<f64> {
    Ok(-js_mi_estimate(&feats.q_pooled, &feats.v_prime, mask, disc)?)
}

/// Positive set for a boundary anchor: the rest of the moment, or the anchor
/// itself when the moment is a single index.
fn anchor_positives(gold: &BoundaryIndices, anchor: usize) -> Vec<usize> {
    let others: Vec<usize> = (gold.i_start..=gold.i_end).filter(|&i| i != anchor).collect();
    if others.is_empty() {
        vec![anchor]
    } else {
        others
    }
}

/// VV contrastive loss node: `L_vv = -I(v'_s, V') - I(v'_e, V')`.
pub fn vv_loss_node(
    g: &mut Graph,
    v_prime: NodeId,
    gold: &BoundaryIndices,
    w_start: NodeId,
    w_end: NodeId,
) -> Result<NodeId> {
    let t = g.value(v_prime).nrows();
    if gold.i_end >= t {
        return Err(Error::Mask("gold span exceeds sequence length".into()));
    }
    let negatives: Vec<usize> =
        (0..t).filter(|&i| i < gold.i_start || i > gold.i_end).collect();
    if negatives.is_empty() {
        return Err(Error::Mask("moment spans the whole video; no negatives".into()));
    }
    let anchor_s = g.row_slice(v_prime, gold.i_start);
    let mi_s = js_mi_node(g, anchor_s, v_prime, &anchor_positives(gold, gold.i_start), &negatives, w_start);
    let anchor_e = g.row_slice(v_prime, gold.i_end);
    let mi_e = js_mi_node(g, anchor_e, v_prime, &anchor_positives(gold, gold.i_end), &negatives, w_end);
    let sum = g.add(mi_s, mi_e);
    Ok(g.scale(sum, -1.0))
}

pub fn vv_loss(
    feats: &ContextualizedFeatures,
    gold: &BoundaryIndices,
    disc_start: &Mat,
    disc_end: &Mat,
) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.input(feats.v_prime.clone());
    let ws = g.input(disc_start.clone());
    let we = g.input(disc_end.clone());
    let loss = vv_loss_node(&mut g, v, gold, ws, we)?;
    Ok(g.scalar(loss))
}

/// Weighted DCL contribution to the total loss.
pub fn dcl_objective(l_vq: f64, l_vv: f64, alpha: f64, beta: f64) -> f64 {
    alpha * l_vq + beta * l_vv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_inputs;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn mask(pos: &[usize], t: usize) -> ContrastMask {
        let positive: Vec<bool> = (0..t).map(|i| pos.contains(&i)).collect();
        let negative: Vec<bool> = positive.iter().map(|p| !p).collect();
        ContrastMask::new(positive, negative).unwrap()
    }

    #[test]
    fn zero_discriminator_gives_minus_two_ln_two() {
        let anchor = rand_mat(1, 4, 1);
        let v = rand_mat(6, 4, 2);
        let w = Mat::zeros((4, 4));
        let mi = js_mi_estimate(&anchor, &v, &mask(&[1, 2, 3], 6), &w).unwrap();
        assert!((mi - (-2.0 * LN2)).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_are_mask_independent() {
        // rows with first component 1 and anchor e_0 with W = c * E00 give
        // constant score c at every position
        let c = 0.7;
        let anchor = array![[1.0, 0.0]];
        let mut w = Mat::zeros((2, 2));
        w[[0, 0]] = c;
        let mut v = rand_mat(5, 2, 3);
        for i in 0..5 {
            v[[i, 0]] = 1.0;
        }
        let a = js_mi_estimate(&anchor, &v, &mask(&[0, 1], 5), &w).unwrap();
        let b = js_mi_estimate(&anchor, &v, &mask(&[2, 3, 4], 5), &w).unwrap();
        let expected = -(softplus(-c) + softplus(c));
        assert!((a - expected).abs() < 1e-12);
        assert!((a - b).abs() < 1e-12);
    }

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    #[test]
    fn hand_evaluated_three_position_case() {
        // scores [2, 2, -2] with positives {0, 1}
        let anchor = array![[1.0]];
        let w = array![[1.0]];
        let v = array![[2.0], [2.0], [-2.0]];
        let mi = js_mi_estimate(&anchor, &v, &mask(&[0, 1], 3), &w).unwrap();
        let expected = -2.0 * (1.0 + (-2.0f64).exp()).ln();
        assert!((mi - expected).abs() < 1e-12);
        assert!((mi - (-0.25386)).abs() < 1e-5);
    }

    #[test]
    fn qv_loss_values_and_monotonicity() {
        let feats = ContextualizedFeatures {
            v_prime: rand_mat(6, 4, 4),
            q_prime: rand_mat(3, 4, 5),
            q_pooled: rand_mat(1, 4, 6),
        };
        let m = mask(&[2, 3], 6);
        let zero = Mat::zeros((4, 4));
        let l = qv_loss(&feats, &m, &zero).unwrap();
        assert!((l - 2.0 * LN2).abs() < 1e-12);

        // perfectly separated scores approach zero loss
        let anchor = array![[1.0]];
        let w = array![[1.0]];
        let v = array![[10.0], [10.0], [-10.0], [-10.0]];
        let mi = js_mi_estimate(&anchor, &v, &mask(&[0, 1], 4), &w).unwrap();
        let l_sep = -mi;
        assert!((l_sep - 2.0 * softplus(-10.0)).abs() < 1e-12);
        assert!(l_sep < 1e-4 && l_sep > 0.0);

        // raising a positive score lowers the loss
        let v_better = array![[11.0], [10.0], [-10.0], [-10.0]];
        let mi_better = js_mi_estimate(&anchor, &v_better, &mask(&[0, 1], 4), &w).unwrap();
        assert!(-mi_better < l_sep);
    }

    #[test]
    fn vv_loss_constant_case_and_degenerate_span() {
        let feats = ContextualizedFeatures {
            v_prime: rand_mat(6, 4, 7),
            q_prime: rand_mat(3, 4, 8),
            q_pooled: rand_mat(1, 4, 9),
        };
        let gold = BoundaryIndices::new(1, 3, 6).unwrap();
        let zero = Mat::zeros((4, 4));
        let l = vv_loss(&feats, &gold, &zero, &zero).unwrap();
        assert!((l - 4.0 * LN2).abs() < 1e-12);

        // single-index moment falls back to the anchor as its own positive
        let gold = BoundaryIndices::new(1, 1, 4).unwrap();
        let feats = ContextualizedFeatures {
            v_prime: rand_mat(4, 4, 10),
            q_prime: rand_mat(2, 4, 11),
            q_pooled: rand_mat(1, 4, 12),
        };
        let w = rand_mat(4, 4, 13);
        let l = vv_loss(&feats, &gold, &w, &w).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn vv_loss_is_mirror_symmetric() {
        let v = rand_mat(7, 3, 14);
        let mut mirrored = Mat::zeros((7, 3));
        for i in 0..7 {
            for j in 0..3 {
                mirrored[[i, j]] = v[[6 - i, j]];
            }
        }
        let w = rand_mat(3, 3, 15);
        let feats = |vp: Mat| ContextualizedFeatures {
            v_prime: vp,
            q_prime: rand_mat(2, 3, 16),
            q_pooled: rand_mat(1, 3, 17),
        };
        let gold = BoundaryIndices::new(2, 4, 7).unwrap();
        let gold_mirror = BoundaryIndices::new(6 - 4, 6 - 2, 7).unwrap();
        let a = vv_loss(&feats(v), &gold, &w, &w).unwrap();
        let b = vv_loss(&feats(mirrored), &gold_mirror, &w, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_permutations_within_sets() {
        let anchor = rand_mat(1, 3, 18);
        let mut v = rand_mat(6, 3, 19);
        let w = rand_mat(3, 3, 20);
        let m = mask(&[0, 1, 2], 6);
        let before = js_mi_estimate(&anchor, &v, &m, &w).unwrap();
        // swap rows 0 and 2 (both positive), and rows 3 and 5 (both negative)
        for j in 0..3 {
            v.swap((0, j), (2, j));
            v.swap((3, j), (5, j));
        }
        let after = js_mi_estimate(&anchor, &v, &m, &w).unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn full_span_has_no_negatives() {
        assert!(matches!(
            ContrastMask::from_span(&BoundaryIndices::new(0, 5, 6).unwrap()),
            Err(Error::Mask(_))
        ));
        let feats = ContextualizedFeatures {
            v_prime: rand_mat(4, 2, 21),
            q_prime: rand_mat(2, 2, 22),
            q_pooled: rand_mat(1, 2, 23),
        };
        let gold = BoundaryIndices::new(0, 3, 4).unwrap();
        let w = Mat::zeros((2, 2));
        assert!(matches!(vv_loss(&feats, &gold, &w, &w), Err(Error::Mask(_))));
    }

    #[test]
    fn mask_complementarity_is_enforced() {
        assert!(ContrastMask::new(vec![true, true], vec![true, false]).is_err());
        assert!(ContrastMask::new(vec![true, false], vec![false, true]).is_ok());
        assert!(ContrastMask::new(vec![true, true], vec![false, false]).is_err());
    }

    #[test]
    fn dcl_objective_is_the_weighted_sum() {
        let v = dcl_objective(2.0 * LN2, 4.0 * LN2, 0.1, 0.01);
        assert!((v - 0.16635).abs() < 1e-5);
        assert_eq!(dcl_objective(5.0, 7.0, 0.0, 0.0), 0.0);
        assert_eq!(dcl_objective(1.0, 2.0, 1.0, 1.0), 3.0);
    }

    #[test]
    fn mi_gradients_match_finite_differences() {
        let anchor = rand_mat(1, 6, 24);
        let v = rand_mat(5, 6, 25);
        let w = rand_mat(6, 6, 26);
        check_inputs(
            &[anchor, v, w],
            |g, ids| {
                let mi = js_mi_node(g, ids[0], ids[1], &[1, 2], &[0, 3, 4], ids[2]);
                g.scale(mi, -1.0)
            },
            1e-4,
            1e-4,
        );
    }
}
