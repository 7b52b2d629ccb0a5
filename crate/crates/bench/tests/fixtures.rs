use cdsnas_bench::{desk_batch, desk_cdnet, random_embeddings};

#[test]
fn bench_inputs_are_deterministic() {
    let a = desk_batch(7);
    let b = desk_batch(7);
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.labels.len(), 16);
    let e = random_embeddings(12, 8, 3, 1);
    assert_eq!(e.0.shape(), &[12, 8]);
    assert_eq!(desk_cdnet(), desk_cdnet());
}
