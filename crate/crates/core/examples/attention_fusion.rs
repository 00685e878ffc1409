//! Encode a synthetic image, a caption and a question with the Bayesian
//! encoders, then fuse them with spatial attention.

use uqrank::bayes::{ConvStack, DropoutSchedule};
use uqrank::data::{build_vocab, gen_synthetic, SyntheticTaskSpec};
use uqrank::fusion::{attend_fuse, encode_image, encode_text, Attention, Embedding, TextEncoder};
use uqrank::tensor::{ParamStore, Tape};
use uqrank::{Result, RngStream};

fn main() -> Result<()> {
    let spec = SyntheticTaskSpec {
        num_dialogs: 4,
        ..Default::default()
    };
    let dialogs = gen_synthetic(&spec)?;
    let vocab = build_vocab(&dialogs, 1);
    let d = &dialogs[0];
    println!("caption: {}", d.caption);
    println!("question: {}", d.rounds[0].question);

    let schedule = DropoutSchedule::none();
    let mut rng = RngStream::new(1);
    let mut store = ParamStore::new();
    let cnn = ConvStack::new(&mut store, "cnn", 3, &[8, 16, 16], &schedule, &mut rng);
    let emb = Embedding::new(&mut store, "emb", vocab.len(), 16, &mut rng);
    let enc = TextEncoder::new(&mut store, "enc", &emb, 16, &schedule, &mut rng);
    let att = Attention::new(&mut store, "att", 16, 16, 16, &mut rng);

    let mut t = Tape::new(&store, RngStream::new(2), false);
    let grid = encode_image(
        &mut t,
        &cnn,
        d.image.as_ref().expect("synthetic dialogs carry images"),
    )?;
    let h = encode_text(&mut t, &emb, &enc, &vocab.encode(&d.caption))?;
    let q = encode_text(&mut t, &emb, &enc, &vocab.encode(&d.rounds[0].question))?;
    let fused = attend_fuse(&mut t, &att, grid, q, h)?;

    println!(
        "region grid {:?}, fused feature {:?}",
        t.shape(fused.grid),
        t.shape(fused.f)
    );
    let alpha = t.value(fused.alpha).data();
    for row in alpha.chunks(fused.v) {
        println!(
            "  {}",
            row.iter()
                .map(|a| format!("{a:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    println!("attention mass = {:.12}", alpha.iter().sum::<f64>());
    Ok(())
}
