//! Attach every parameter-efficiency mechanism to the same frozen model and
//! compare trainable budgets; verify each attachment is a no-op at init.
//!
//! Run with: cargo run --example peft_methods

use fedpeft::data::synth_generate;
use fedpeft::model::{forward, pretrain};
use fedpeft::peft::{adapter_attach, bitfit_mask, lora_init_random, mask_generate};
use fedpeft::{AdapterPlacement, Matrix, ModelConfig, PeftModel, RankPlan, SparseMask};

fn main() -> fedpeft::Result<()> {
    let config = ModelConfig::default();
    let source = synth_generate(config.num_classes, config.input_dim, 2000, 11)?;
    let w0 = pretrain(&config, &source, 3, 0.1, 11)?;
    let probe = Matrix::from_fn(16, config.input_dim, |i, j| ((i * 13 + j) as f64 * 0.31).sin());
    let base_logits = forward(&w0, &probe)?.0;

    let plan = RankPlan::by_role(&w0, &RankPlan::default_roles(), 10, 18);
    let blocks = plan
        .entries
        .iter()
        .map(|&(idx, r)| lora_init_random(w0.layer(idx), idx, r, r as f64, 5))
        .collect::<fedpeft::Result<Vec<_>>>()?;

    let methods: Vec<(&str, PeftModel)> = vec![
        (
            "fft",
            PeftModel::Dense {
                model: w0.clone(),
                mask: SparseMask::full(&w0),
            },
        ),
        (
            "sft d=0.10",
            PeftModel::Dense {
                model: w0.clone(),
                mask: mask_generate(&w0, 0.10, 5)?,
            },
        ),
        (
            "bitfit",
            PeftModel::Dense {
                model: w0.clone(),
                mask: bitfit_mask(&w0),
            },
        ),
        (
            "lora r=10/18",
            PeftModel::Lora {
                base: w0.clone(),
                blocks,
            },
        ),
        (
            "houlsby r=8",
            PeftModel::Adapter {
                base: w0.clone(),
                sites: adapter_attach(&w0, 8, AdapterPlacement::AfterEachHidden, 5)?,
            },
        ),
        (
            "pfeiffer r=8",
            PeftModel::Adapter {
                base: w0.clone(),
                sites: adapter_attach(&w0, 8, AdapterPlacement::AfterLastHidden, 5)?,
            },
        ),
    ];

    println!(
        "{:<14} {:>10} {:>9} {:>14}",
        "method", "trainable", "density", "noop at init"
    );
    for (name, state) in &methods {
        let noop = state.forward_logits(&probe)? == base_logits;
        println!(
            "{name:<14} {:>10} {:>8.2}% {:>14}",
            state.trainable_count(),
            100.0 * state.trainable_density(),
            // Mask-based methods restrict existing params rather than adding
            // zero-initialized modules, so only module methods claim no-op.
            if matches!(state, PeftModel::Dense { .. }) {
                "n/a".to_string()
            } else {
                noop.to_string()
            },
        );
    }
    Ok(())
}
