//! Parses captions into scene graphs and prints their triples.
//!
//!     cargo run --example parse_captions -- "a small dog under the wooden table"

use sgclip::textgraph::{parse_scene_graph, scene_graph_to_triples, tokenize_and_tag, Lexicon};

fn main() -> sgclip::Result<()> {
    let lexicon = Lexicon::builtin();
    let mut captions: Vec<String> = std::env::args().skip(1).collect();
    if captions.is_empty() {
        captions = vec![
            "Black and white cows sit in a pile of yellow hay".into(),
            "An astronaut is riding a horse".into(),
            "the red dress and the blue book".into(),
        ];
    }
    for caption in &captions {
        println!("{caption}");
        let tags: Vec<String> = tokenize_and_tag(caption, &lexicon)?
            .iter()
            .map(|t| format!("{}/{}", t.text, t.pos))
            .collect();
        println!("  tags: {}", tags.join(" "));
        let sg = parse_scene_graph(caption, &lexicon)?;
        let objects: Vec<&str> = sg.objects.iter().map(|o| o.lemma.as_str()).collect();
        println!("  objects: {}", objects.join(", "));
        for t in scene_graph_to_triples(&sg) {
            println!("  {t}");
        }
    }
    Ok(())
}
