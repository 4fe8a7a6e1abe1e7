//! Trains two epochs in one go and as 1 + 1 with a checkpoint round trip in
//! between; the resulting weights match bit for bit.

use sgclip::checkpoint::Checkpoint;
use sgclip::encoders::ModelConfig;
use sgclip::objectives::LossConfig;
use sgclip::training::{
    gen_synthetic, train, OptimConfig, SyntheticGenConfig, TrainConfig, Trainer,
};

fn main() -> sgclip::Result<()> {
    let gen = SyntheticGenConfig {
        attribute_count: 48,
        relation_count: 48,
        ..SyntheticGenConfig::default()
    };
    let data = gen_synthetic(&gen)?;
    let lex = gen.lexicon();
    let mut model = ModelConfig::default();
    model.kee.layers = 2;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };

    let (full, _) = train(
        &data,
        model.clone(),
        &lex,
        cfg.clone(),
        LossConfig::default(),
        OptimConfig::default(),
    )?;

    let first = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    let (half, _) = train(
        &data,
        model,
        &lex,
        first,
        LossConfig::default(),
        OptimConfig::default(),
    )?;
    let dir = std::env::temp_dir();
    let (mp, op) = (
        dir.join("sgclip_example_model.ckpt"),
        dir.join("sgclip_example_optim.ckpt"),
    );
    half.model_checkpoint().save(&mp)?;
    half.optimizer_checkpoint().save(&op)?;

    let mut resumed = Trainer::resume(&Checkpoint::load(&mp)?, &Checkpoint::load(&op)?, Some(cfg))?;
    resumed.run(&data, &mut |m| {
        println!("step {} final {:.5}", m.step, m.final_loss)
    })?;

    for e in resumed.model_checkpoint().manifest().iter().take(5) {
        println!("{} {:?}", e.name, e.shape);
    }
    let same = full
        .model
        .params
        .iter()
        .zip(resumed.model.params.iter())
        .all(|(a, b)| a.value == b.value);
    println!("resumed weights identical to uninterrupted run: {same}");
    Ok(())
}
