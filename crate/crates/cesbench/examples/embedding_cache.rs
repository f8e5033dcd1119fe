//! The on-disk embedding cache: content-addressed keys, at-most-once
//! computation, persistence across reopen, and checksum-verified reads.
//!
//! ```bash
//! cargo run -p cesbench --example embedding_cache
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};

use cesbench::cache::{CacheKey, EmbeddingCache, GetOrComputeError};
use cesbench::embedding::{EmbeddingVector, Modality};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cache = EmbeddingCache::open(dir.path())?;
    let key = CacheKey::new("img_0001", "dinov2-vit-s14", Modality::Image, "raw");
    println!("cache key: {}…", &key.as_str()[..16]);

    let calls = AtomicUsize::new(0);
    for round in 0..3 {
        let vector: Result<_, GetOrComputeError<std::convert::Infallible>> = cache
            .get_or_compute(&key, || {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(EmbeddingVector::new(
                    "img_0001",
                    Modality::Image,
                    "dinov2-vit-s14",
                    vec![0.25, -1.5, 3.0],
                )
                .unwrap())
            });
        println!(
            "round {round}: got {} dims, producer calls so far: {}",
            vector.unwrap().dims,
            calls.load(Ordering::SeqCst)
        );
    }

    // The same directory reopened serves the stored bytes.
    drop(cache);
    let reopened = EmbeddingCache::open(dir.path())?;
    let stored = reopened.get(&key)?.expect("persisted entry");
    println!("after reopen: {:?}", stored.values);

    // Distinct model ids never collide.
    let other = CacheKey::new("img_0001", "dinov2-vit-l14", Modality::Image, "raw");
    println!("other model cached? {}", reopened.contains(&other));
    Ok(())
}
