//! Sampling from trained generators and simple diagnostics.

use crate::corpus::{Domain, ImageBatch};
use crate::error::{Error, Result};
use crate::nets::{role, Arch, Mode, Model};
use crate::tensor::Tensor;

/// Inference-mode samples for a batch of z vectors. Per-domain models need
/// `domain`; single-generator models label the batch with `domain` or S.
pub fn sample(model: &Model<f32>, z: &Tensor<f32>, domain: Option<Domain>) -> Result<ImageBatch> {
    let data = model.generate(z, domain)?;
    let label = domain.unwrap_or(Domain::S);
    Ok(ImageBatch {
        domains: vec![label; data.batch()],
        data,
    })
}

/// Both coupled generators on the same z, index-aligned.
pub fn sample_paired(model: &Model<f32>, z: &Tensor<f32>) -> Result<(ImageBatch, ImageBatch)> {
    if !matches!(model.arch, Arch::Coupled(_)) {
        return Err(Error::Invalid("paired sampling needs a coupled model".into()));
    }
    Ok((sample(model, z, Some(Domain::S))?, sample(model, z, Some(Domain::L))?))
}

/// Mean pairwise Euclidean distance between flattened samples, divided by
/// the square root of the per-sample value count. Near zero means the
/// generator has collapsed.
pub fn diversity_score(samples: &Tensor<f32>) -> Result<f64> {
    let n = samples.batch();
    if n < 2 {
        return Err(Error::Invalid("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = samples
                .item(i)
                .iter()
                .zip(samples.item(j))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            total += d.sqrt();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(total / pairs / (samples.item_len() as f64).sqrt())
}

/// Inference-mode domain predictions of a domain-adaptation model.
pub fn classify(model: &Model<f32>, images: &Tensor<f32>) -> Result<Vec<Domain>> {
    if !matches!(model.arch, Arch::Dann(_)) {
        return Err(Error::Invalid("only domain-adaptation models have a classifier".into()));
    }
    let a = model.forward(role::TRUNK, images, Mode::Eval)?;
    let logits = model.forward(role::CLASSIFIER, a.output(), Mode::Eval)?.into_output();
    Ok(logits
        .data()
        .chunks(2)
        .map(|r| if r[1] > r[0] { Domain::L } else { Domain::S })
        .collect())
}

/// Fraction of `images` whose predicted domain matches `labels`.
pub fn domain_accuracy(model: &Model<f32>, images: &Tensor<f32>, labels: &[Domain]) -> Result<f64> {
    let pred = classify(model, images)?;
    if pred.len() != labels.len() {
        return Err(Error::Invalid(format!("{} labels for {} images", labels.len(), pred.len())));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
