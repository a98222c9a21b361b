use sarnas_bench::desk_batch;

#[test]
fn desk_batch_shape_and_labels() {
    for b in [1, 4, 16] {
        let batch = desk_batch(b);
        assert_eq!(batch.dims, [b, 3, 16, 12]);
        assert_eq!(batch.labels.len(), b);
        assert!(batch.labels.iter().all(|&l| l < 3));
        assert_eq!(batch.x, desk_batch(b).x);
    }
}
