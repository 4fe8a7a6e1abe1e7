//! Builds swapped negatives: every semantic candidate for a caption, then a
//! seeded draw from each sampler.

use sgclip::negsample::{all_negatives, describe_swap, sample_negative, sample_random_negative};
use sgclip::rng::SeededRng;
use sgclip::textgraph::{parse_scene_graph, Lexicon};

fn main() -> sgclip::Result<()> {
    let lexicon = Lexicon::builtin();
    let mut rng = SeededRng::new(0);
    for caption in [
        "An astronaut is riding a horse",
        "the red dress and the blue book",
        "Black and white cows sit in a pile of yellow hay",
        "a dog",
    ] {
        let sg = parse_scene_graph(caption, &lexicon)?;
        println!("{caption}");
        match all_negatives(caption, &sg) {
            Ok(negs) => {
                for n in negs {
                    println!(
                        "  [{}] {}  {}",
                        n.swap.kind(),
                        n.negative_caption,
                        describe_swap(&sg, n.swap)
                    );
                }
            }
            Err(e) => println!("  no semantic negative: {e}"),
        }
        if let Ok(n) = sample_negative(caption, &sg, &mut rng) {
            println!("  sampled: {}", n.negative_caption);
        }
        if let Ok(n) = sample_random_negative(caption, &mut rng) {
            println!("  random swap: {}", n.negative_caption);
        }
    }
    Ok(())
}
