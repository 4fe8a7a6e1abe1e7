//! Recall@K from a hand-written similarity table, then swap discrimination
//! and retrieval for an untrained model on synthetic data.

use sgclip::encoders::ModelConfig;
use sgclip::evaluation::{build_eval_cases, eval_retrieval, eval_swap_discrimination, recall_at_k};
use sgclip::rng::SeededRng;
use sgclip::training::{gen_synthetic, init_model, SyntheticGenConfig};

fn main() -> sgclip::Result<()> {
    let sim = vec![
        vec![0.9, 0.1, 0.3],
        vec![0.2, 0.4, 0.8],
        vec![0.1, 0.2, 0.7],
    ];
    let r = recall_at_k(&sim, &[1, 2, 3])?;
    println!(
        "table: text {:?} image {:?}",
        r.text_retrieval, r.image_retrieval
    );

    let gen = SyntheticGenConfig {
        attribute_count: 100,
        relation_count: 100,
        ..SyntheticGenConfig::default()
    };
    let data = gen_synthetic(&gen)?;
    let lex = gen.lexicon();
    let model = init_model(ModelConfig::default(), &data, &lex, 1)?;
    let cases = build_eval_cases(&data, &lex, &mut SeededRng::new(99))?;
    let (report, _) = eval_swap_discrimination(&model, &cases)?;
    println!(
        "untrained swap accuracy {:.1}% over {} cases",
        100.0 * report.accuracy(),
        report.overall.count
    );
    let r = eval_retrieval(&model, &data, &[1, 10])?;
    println!(
        "untrained R@1 text {:.3} image {:.3}",
        r.text_retrieval[&1], r.image_retrieval[&1]
    );
    Ok(())
}
