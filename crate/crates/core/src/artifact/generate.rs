use super::{manifest, ArchMeta, ModelArtifact, Tensor};
use crate::rng::Lcg64;

/// Deterministic artifact: every parameter, in manifest order and row-major
/// within a tensor, is the next value of an [`Lcg64`] seeded with `seed`.
pub fn generate_artifact(arch: &ArchMeta, seed: u64) -> ModelArtifact {
    let mut rng = Lcg64::new(seed);
    let tensors = manifest(arch)
        .into_iter()
        .map(|p| {
            let shape = p.shape(arch);
            let n: usize = shape.iter().product();
            Tensor {
                name: p.name(),
                shape,
                data: (0..n).map(|_| rng.next_param()).collect(),
            }
        })
        .collect();
    ModelArtifact::from_tensors(arch.clone(), tensors).expect("generated artifact matches manifest")
}

pub fn generate_reference_base(seed: u64) -> ModelArtifact {
    generate_artifact(&ArchMeta::reference_base(), seed)
}

pub fn generate_reference_draft(seed: u64) -> ModelArtifact {
    generate_artifact(&ArchMeta::reference_draft(), seed)
}
