//! Extract (subject, verb, object) tuples from captions and build the
//! confounder vocabulary with dataset priors.
//!
//! ```bash
//! cargo run --release --example build_confounder_vocab
//! ```

use ivg::vocab::{build_vocab, extract_svo, SetId};

fn main() -> ivg::Result<()> {
    for caption in [
        "a person fixes a vacuum",
        "people are shown throwing ping pong balls into beer-filled cups",
        "running",
        "a woman points with a stick",
    ] {
        let t = extract_svo(caption);
        println!("{caption:?}");
        println!("  -> subject {:?}, verb {:?}, object {:?}", t.subject, t.verb, t.object);
    }

    // priors mirror the occurrence counts: 208 holding captions vs 35 fixing
    let mut captions = vec!["person holds a vacuum".to_string(); 208];
    captions.extend(vec!["person fixes a vacuum".to_string(); 35]);
    let vocab = build_vocab(&captions)?;

    println!("\naction priors over {} captions:", captions.len());
    for entry in &vocab.actions.entries {
        println!("  p({}) = {:.5} ({} occurrences)", entry.phrase, entry.prior, entry.count);
    }
    let sum: f64 = vocab.actions.priors().iter().sum();
    println!("  sum = {sum:.12}");
    println!("\nprior lookup: p(holds) = {:.5}", vocab.prior(SetId::Action, "holds")?);
    Ok(())
}
