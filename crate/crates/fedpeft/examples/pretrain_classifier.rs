//! Manufacture the frozen starting point: pretrain the toy classifier on a
//! source task, evaluate it, and round-trip it through a checkpoint.
//!
//! Run with: cargo run --example pretrain_classifier

use fedpeft::checkpoint::Checkpoint;
use fedpeft::data::{split_train_test, synth_generate};
use fedpeft::model::{accuracy, pretrain};
use fedpeft::ModelConfig;

fn main() -> fedpeft::Result<()> {
    let config = ModelConfig::default();
    let source = synth_generate(config.num_classes, config.input_dim, 2000, 11)?;
    let (train, test) = split_train_test(&source, 0.6, 11)?;

    println!("pretraining on the source task (2000 samples, 20 classes)...");
    let w0 = pretrain(&config, &source, 3, 0.1, 11)?;
    println!(
        "  total params: {}, train acc {:.4}, test acc {:.4}",
        w0.total_params(),
        accuracy(&w0, &source, Some(&train))?,
        accuracy(&w0, &source, Some(&test))?,
    );

    // The target task has different class means: the frozen model starts
    // near chance there, which is what fine-tuning is for.
    let target = synth_generate(config.num_classes, config.input_dim, 2000, 7)?;
    println!(
        "  accuracy on an unseen target task: {:.4} (chance {:.4})",
        accuracy(&w0, &target, None)?,
        1.0 / config.num_classes as f64
    );

    let path = std::env::temp_dir().join("fedpeft_pretrain_example.ckpt");
    Checkpoint::model_only(w0.clone()).write_to(&path)?;
    let restored = Checkpoint::read_from(&path)?;
    println!(
        "checkpoint round-trip bit-exact: {}",
        restored.model == w0
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
