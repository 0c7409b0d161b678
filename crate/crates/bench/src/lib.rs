//! Synthetic inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squadrank_core::{EmbeddingVector, FeatureMatrix, GalleryIndex, GalleryItem, QueryRecord, Tags};

fn uniform(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn gallery(n: usize, dim: usize, seed: u64) -> GalleryIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| GalleryItem {
            item_id: format!("g{i:07}"),
            embedding: EmbeddingVector::new(uniform(&mut rng, dim)).expect("finite"),
            image_ref: format!("frames/{i}.jpg"),
            tags: Tags::new(),
        })
        .collect();
    GalleryIndex::build(items).expect("unique ids")
}

pub fn query(dim: usize, seed: u64) -> QueryRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    QueryRecord {
        query_id: "q".into(),
        text: "a person in a dark coat running across the street".into(),
        embedding: EmbeddingVector::new(uniform(&mut rng, dim)).expect("finite"),
        tags: Tags::new(),
    }
}

pub fn features(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..rows).map(|_| uniform(&mut rng, cols)).collect();
    FeatureMatrix::from_rows(&rows).expect("non-empty")
}
