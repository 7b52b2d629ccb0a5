//! Shared inputs for the benchmarks.

use cdsnas::eval::{generate_synthetic, Dataset, SyntheticSpec};
use cdsnas::space::{fixtures, scale_descriptor, ArchitectureDescriptor};
use cdsnas::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The searched CDNet at desk scale (3x64x32 inputs, quarter width).
pub fn desk_cdnet() -> ArchitectureDescriptor {
    scale_descriptor(&fixtures::cdnet(), 0.25, 0.25).expect("valid scale")
}

/// Four identities of four desk-scale images each, in PK order.
pub fn desk_batch(seed: u64) -> Dataset<f32> {
    let d = generate_synthetic::<f32>(&SyntheticSpec {
        identities: 4,
        instances: 5,
        seed,
        ..SyntheticSpec::default()
    })
    .expect("valid dataset settings");
    let idx: Vec<usize> = (0..4).flat_map(|i| (0..4).map(move |j| i * 5 + j)).collect();
    d.subset(&idx).expect("indices in range")
}

/// `n` standard-uniform embeddings of width `dim` with `n / per_id` labels.
pub fn random_embeddings(n: usize, dim: usize, per_id: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.gen::<f32>()).collect();
    let labels = (0..n).map(|i| i / per_id).collect();
    (Tensor::new(vec![n, dim], data).expect("shape matches"), labels)
}
