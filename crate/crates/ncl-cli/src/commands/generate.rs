//! `generate`: build the model and write its exact population matrices.

use ncl_core::io::{write_matrix_csv, write_vector_csv};
use ncl_core::latent_model::{cooccurrence, ground_truth_phi};
use ncl_core::NclError;

use crate::{RunContext, EXIT_OK};

pub fn run(ctx: &RunContext) -> Result<i32, NclError> {
    let model = ctx.config.model.build()?;
    let co = cooccurrence(&model);
    let perm: Vec<usize> = (0..model.n_classes()).collect();
    let phi = ground_truth_phi(&model, &perm)?;

    let write = |name: &str, body: &dyn Fn(&mut Vec<u8>) -> Result<(), NclError>| {
        let mut buf = Vec::new();
        body(&mut buf)?;
        std::fs::write(ctx.out(name), buf)?;
        Ok::<(), NclError>(())
    };
    write("cooccurrence_raw.csv", &|w| write_matrix_csv(w, co.raw()))?;
    write("cooccurrence_normalized.csv", &|w| {
        write_matrix_csv(w, co.normalized())
    })?;
    write("conditional.csv", &|w| write_matrix_csv(w, model.conditional()))?;
    write("posterior.csv", &|w| write_matrix_csv(w, model.posterior()))?;
    write("marginal.csv", &|w| write_vector_csv(w, model.marginal()))?;
    write("class_prior.csv", &|w| write_vector_csv(w, model.class_prior()))?;
    write("phi.csv", &|w| write_matrix_csv(w, phi.values()))?;

    println!(
        "generated model: m={} classes, N={} samples -> {}",
        model.n_classes(),
        model.n_samples(),
        ctx.output_dir.display()
    );
    Ok(EXIT_OK)
}
