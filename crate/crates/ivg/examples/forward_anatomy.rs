//! Walk one example through every stage of the model: encoding, the two
//! contrastive losses, fusion, the backdoor adjustment, and span scoring.
//!
//! ```bash
//! cargo run --release --example forward_anatomy
//! ```

use ivg::contrastive::{dcl_objective, qv_loss, vv_loss, ContrastMask};
use ivg::datamodel::convert_index_to_time;
use ivg::encoder::encode;
use ivg::fusion::cqa_fuse;
use ivg::intervention::{deconfound, predict_span, span_cross_entropy, span_distributions};
use ivg::synthgen::{generate_dataset, BiasSpec, PairCount};
use ivg::trainer::{ModelConfig, ModelParams};
use ivg::vocab::{build_vocab, TokenVocab};

fn main() -> ivg::Result<()> {
    let spec = BiasSpec {
        roles: vec!["person".into()],
        actions: vec!["holds".into(), "fixes".into()],
        objects: vec!["vacuum".into(), "window".into()],
        train_counts: vec![
            PairCount { action: "holds".into(), object: "vacuum".into(), count: 4 },
            PairCount { action: "fixes".into(), object: "window".into(), count: 4 },
        ],
        test_counts: vec![PairCount {
            action: "fixes".into(),
            object: "vacuum".into(),
            count: 2,
        }],
        t: 24,
        d_v: 12,
        noise_sigma: 0.05,
        seed: 5,
    };
    let (train, _) = generate_dataset(&spec)?;
    let conf_vocab = build_vocab(&train.queries())?;
    let tokens = TokenVocab::build(&train.queries());
    let examples = train.prepare(&tokens)?;
    let ex = &examples[0];

    let model_cfg = ModelConfig { d: 32, heads: 4, conv_kernel: 7, d_w: 16, d_e: 32 };
    let (store, model) =
        ModelParams::init(&model_cfg, tokens.len(), train.d_v, Some(&conf_vocab), 11)?;

    println!("example {} -- {:?}", ex.id, ex.query.raw_text);
    println!("gold indices: ({}, {})", ex.gold_idx.i_start, ex.gold_idx.i_end);

    // 1. shared encoder
    let feats = encode(ex, &store, &model.encoder)?;
    println!("\nencoder:");
    println!("  V' {:?}  Q' {:?}  q {:?}", feats.v_prime.dim(), feats.q_prime.dim(), feats.q_pooled.dim());

    // 2. dual contrastive losses (training only)
    let mask = ContrastMask::from_span(&ex.gold_idx)?;
    let l_vq = qv_loss(&feats, &mask, store.value(model.disc.qv))?;
    let l_vv = vv_loss(
        &feats,
        &ex.gold_idx,
        store.value(model.disc.vv_start),
        store.value(model.disc.vv_end),
    )?;
    println!("\ncontrastive losses:");
    println!("  L_vq = {l_vq:.5}   L_vv = {l_vv:.5}");
    println!("  weighted DCL term = {:.5}", dcl_objective(l_vq, l_vv, 0.1, 0.01));

    // 3. context-query attention fusion
    let x = cqa_fuse(&feats, &store, &model.fusion, None)?;
    println!("\nfusion: X {:?}", x.dim());

    // 4. backdoor adjustment: a single learned shift over all positions
    let table = model.confounder.as_ref().expect("initialized with a vocabulary");
    let x_adj = deconfound(&x, &store, table)?;
    let shift = &x_adj - &x;
    println!("\nintervention:");
    println!("  z_bar[0..4] = {:?}", &shift.row(0).to_vec()[..4]);

    // 5. span scoring and decoding
    let dist = span_distributions(&x_adj, &store, &model.heads)?;
    let (l_s, l_e) = span_cross_entropy(&dist, &ex.gold_idx)?;
    let pred = predict_span(&dist);
    let time = convert_index_to_time(&pred, ex.gold_time.duration_s)?;
    println!("\nspan head (untrained):");
    println!("  L_s = {l_s:.5}  L_e = {l_e:.5}");
    println!(
        "  predicted ({}, {}) -> [{:.1}s, {:.1}s]",
        pred.i_start, pred.i_end, time.start_s, time.end_s
    );
    Ok(())
}
