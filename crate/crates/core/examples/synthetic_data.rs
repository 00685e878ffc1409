//! Generate the seeded synthetic dialog task, build a vocabulary, batch the
//! records and round-trip a split through JSON on disk.

use uqrank::data::{
    build_vocab, encode_dialogs, gen_synthetic, truncate_and_batch, Limits, SyntheticTaskSpec,
};
use uqrank::train::run::{load_split, write_split};
use uqrank::Result;

fn main() -> Result<()> {
    let spec = SyntheticTaskSpec {
        num_dialogs: 6,
        rounds_per_dialog: 3,
        ..Default::default()
    };
    let dialogs = gen_synthetic(&spec)?;
    let d = &dialogs[0];
    println!("dialog {}: {}", d.id, d.caption);
    for r in &d.rounds {
        println!(
            "  Q: {}  A: {}  ({} candidates, gt at {})",
            r.question,
            r.answer,
            r.candidates.len(),
            r.gt_index
        );
    }

    let vocab = build_vocab(&dialogs, 1);
    println!("vocabulary: {} words", vocab.len());
    let records = encode_dialogs(&dialogs, &vocab, Limits::default());
    let batches = truncate_and_batch(&records, Limits::default(), 4);
    println!(
        "{} batches, first question matrix width {}",
        batches.len(),
        batches[0].questions(0).width()
    );

    let dir = std::env::temp_dir().join("uqrank-synthetic-example");
    write_split(&dir, "train", &dialogs)?;
    let back = load_split(&dir, "train")?;
    println!(
        "reloaded {} dialogs from {}, identical: {}",
        back.len(),
        dir.display(),
        back == dialogs
    );
    Ok(())
}
