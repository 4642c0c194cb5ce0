//! Verify analytic gradients against central finite differences for the
//! three differentiable loss paths, using only the public evaluation
//! functions as the reference.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use ivg::autodiff::{Graph, Mat};
use ivg::contrastive::js_mi_node;
use ivg::intervention::{deconfound_nodes, span_ce_nodes, span_distribution_nodes};
use ivg::intervention::{ConfounderEmbeddingTable, SpanHeadParams};
use ivg::datamodel::BoundaryIndices;
use ivg::params::{Initializer, ParamStore};
use ivg::vocab::build_vocab;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn report(name: &str, analytic: f64, fd: f64) -> bool {
    let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-4);
    let ok = rel < TOL;
    if !ok {
        println!("  MISMATCH {name}: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.2e})");
    }
    ok
}

fn main() -> ivg::Result<()> {
    // 1. the MI estimator w.r.t. anchor, clips, and discriminator
    println!("js mutual-information estimator (t=5, d=6):");
    let anchor = rand_mat(1, 6, 1);
    let clips = rand_mat(5, 6, 2);
    let disc = rand_mat(6, 6, 3);
    let eval = |a: &Mat, v: &Mat, w: &Mat| {
        let mut g = Graph::new();
        let (an, vn, wn) = (g.input(a.clone()), g.input(v.clone()), g.input(w.clone()));
        let mi = js_mi_node(&mut g, an, vn, &[1, 2], &[0, 3, 4], wn);
        g.scalar(mi)
    };
    let mut g = Graph::new();
    let an = g.diff_input(anchor.clone());
    let vn = g.diff_input(clips.clone());
    let wn = g.diff_input(disc.clone());
    let mi = js_mi_node(&mut g, an, vn, &[1, 2], &[0, 3, 4], wn);
    let grads = g.backward(mi, 0);

    let mut all_ok = true;
    for (name, node, base) in
        [("anchor", an, &anchor), ("clips", vn, &clips), ("discriminator", wn, &disc)]
    {
        let analytic = grads.node(node).unwrap();
        for (idx, _) in base.indexed_iter() {
            let mut bumped = base.clone();
            bumped[idx] += STEP;
            let up = match name {
                "anchor" => eval(&bumped, &clips, &disc),
                "clips" => eval(&anchor, &bumped, &disc),
                _ => eval(&anchor, &clips, &bumped),
            };
            bumped[idx] -= 2.0 * STEP;
            let down = match name {
                "anchor" => eval(&bumped, &clips, &disc),
                "clips" => eval(&anchor, &bumped, &disc),
                _ => eval(&anchor, &clips, &bumped),
            };
            all_ok &= report(name, analytic[idx], (up - down) / (2.0 * STEP));
        }
    }
    println!("  {}", if all_ok { "all gradients match" } else { "FAILED" });

    // 2. the intervention head end to end: adjust, score, cross-entropy
    println!("\ndeconfound -> span heads -> cross-entropy (t=5, d=6):");
    let vocab = build_vocab(&[
        "person holds a vacuum".to_string(),
        "woman fixes a window".to_string(),
    ])?;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(4);
    let table = ConfounderEmbeddingTable::init(&mut store, &mut init, &vocab, 6, 6)?;
    let heads = SpanHeadParams::init(&mut store, &mut init, 6);
    let gold = BoundaryIndices::new(1, 3, 5)?;
    let x = rand_mat(5, 6, 5);

    let loss_of = |store: &ParamStore| {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let adj = deconfound_nodes(&mut g, store, &table, xn);
        let (ps, pe) = span_distribution_nodes(&mut g, store, &heads, adj);
        let (ls, le) = span_ce_nodes(&mut g, ps, pe, &gold);
        let sum = g.add(ls, le);
        g.scalar(sum)
    };

    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let adj = deconfound_nodes(&mut g, &store, &table, xn);
    let (ps, pe) = span_distribution_nodes(&mut g, &store, &heads, adj);
    let (ls, le) = span_ce_nodes(&mut g, ps, pe, &gold);
    let total = g.add(ls, le);
    let grads = g.backward(total, store.len());

    let mut checked = 0;
    let mut ok = true;
    for slot in 0..store.len() {
        let analytic = grads
            .slot(slot)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(store.value(slot).dim()));
        for (idx, _) in store.value(slot).indexed_iter() {
            let mut s = ParamStore::new();
            for (name, v) in store.iter() {
                s.add(name, v.clone());
            }
            s.entry_mut(slot)[idx] += STEP;
            let up = loss_of(&s);
            s.entry_mut(slot)[idx] -= 2.0 * STEP;
            let down = loss_of(&s);
            ok &= report(store.name(slot), analytic[idx], (up - down) / (2.0 * STEP));
            checked += 1;
        }
    }
    println!("  {checked} parameter entries checked: {}", if ok { "all match" } else { "FAILED" });
    Ok(())
}
