//! Encodes caption triples with an untrained model: the triple embedding
//! `w_h + w_r - w_t`, the pooled knowledge vector and the fused text vector.

use sgclip::encoders::{Model, ModelConfig, Vocabulary};
use sgclip::tensor::dot;
use sgclip::textgraph::{Lexicon, Triple};

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn main() -> sgclip::Result<()> {
    let mut config = ModelConfig::default();
    config.image.input_dim = 8;
    let words = "a an the astronaut is riding horse red blue dress book and".split(' ');
    let model: Model<f64> = Model::new(config, Vocabulary::new(words), Lexicon::builtin(), 3)?;

    let forward = Triple::new("astronaut", "is riding", "horse");
    let reverse = Triple::new("horse", "is riding", "astronaut");
    let (f, r) = (model.encode_triple(&forward), model.encode_triple(&reverse));
    let diff: Vec<f64> = f.iter().zip(&r).map(|(a, b)| a - b).collect();
    println!(
        "|{forward}| = {:.4}, |{reverse}| = {:.4}, |difference| = {:.4}",
        norm(&f),
        norm(&r),
        norm(&diff)
    );

    let same = model.encode_triple(&Triple::new("horse", "is riding", "horse"));
    let rel = model.word_embed("is riding");
    let gap: Vec<f64> = same.iter().zip(&rel).map(|(a, b)| a - b).collect();
    println!("h = t leaves the relation: |gap| = {:.2e}", norm(&gap));

    let triples = model.caption_triples("the red dress and the blue book")?;
    let (e, _) = model.encode_knowledge(&triples)?;
    let mut flipped = triples.clone();
    flipped.reverse();
    let (e_rev, _) = model.encode_knowledge(&flipped)?;
    let shift: f64 = e
        .iter()
        .zip(&e_rev)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "{} triples -> knowledge vector of dim {}, order shift {shift:.2e}",
        triples.len(),
        e.len()
    );

    let a = model.embed_caption("the red dress and the blue book")?;
    let b = model.embed_caption("the blue dress and the red book")?;
    println!(
        "cosine between swapped captions: {:.4} (lambda {})",
        dot(&a.unit, &b.unit),
        model.lambda()
    );
    Ok(())
}
