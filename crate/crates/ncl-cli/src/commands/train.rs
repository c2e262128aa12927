//! `train`: run the configured objective and write checkpoint plus trace.

use ncl_core::io::save_checkpoint;
use ncl_core::training::train;
use ncl_core::NclError;

use crate::{RunContext, EXIT_OK};

pub fn run(ctx: &RunContext) -> Result<i32, NclError> {
    let model = ctx.config.model.build()?;
    let labels = ctx.config.label_map(&model)?;
    let mut encoder = super::build_encoder(&ctx.config, &model, ctx.seed)?;
    let transform = ctx.config.encoder.parse_transform()?;
    let objective = ctx
        .config
        .objective
        .build(&model, Some(&labels), transform)?;
    let train_cfg = ctx.config.train.build(ctx.seed);

    let outcome = train(encoder.as_dyn_mut(), &objective, &model, &train_cfg)?;

    save_checkpoint(&ctx.out("checkpoint.ckpt"), &encoder, ctx.seed)?;
    let mut trace_buf = Vec::new();
    outcome.trace.write_csv(&mut trace_buf)?;
    std::fs::write(ctx.out("trace.csv"), trace_buf)?;
    if let Some(head) = &outcome.head {
        let mut buf = Vec::new();
        ncl_core::io::write_matrix_csv(&mut buf, head)?;
        std::fs::write(ctx.out("head.csv"), buf)?;
    }

    let final_loss = outcome.trace.final_loss().unwrap_or(f64::NAN);
    let steps = outcome.trace.rows.len();
    println!(
        "trained {} encoder for {steps} steps, final loss {final_loss:.6e} -> {}",
        encoder.kind(),
        ctx.output_dir.display()
    );
    Ok(EXIT_OK)
}
