use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::summation::CompensatedSum;

/// RNG for one work chunk: the master seed keys the cipher, the chunk
/// index selects an independent counter stream. Streams never overlap,
/// so chunk results are independent of how work is scheduled.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// One pair of independent standard normals (Box-Muller).
pub fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    use rand::RngExt;
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * std::f64::consts::PI * u2;
    (r * t.cos(), r * t.sin())
}

/// First and second moments of a Monte Carlo run.
#[derive(Clone, Copy, Debug)]
pub struct McMoments {
    pub n: u64,
    pub mean: f64,
    pub stderr: f64,
}

const CHUNK: u64 = 4096;

/// Chunked Monte Carlo mean with deterministic reduction. Chunks are
/// evaluated in parallel, each from its own counter stream, and merged
/// in chunk order; the result is bitwise identical for a fixed
/// (seed, n) regardless of thread count.
pub fn parallel_mc<F>(n: u64, master_seed: u64, sample: F) -> McMoments
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    assert!(n > 0, "sample count must be positive");
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<(CompensatedSum, CompensatedSum)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(master_seed, c);
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut s = CompensatedSum::new();
            let mut s2 = CompensatedSum::new();
            for _ in lo..hi {
                let v = sample(&mut rng);
                s.add(v);
                s2.add(v * v);
            }
            (s, s2)
        })
        .collect();

    let mut sum = CompensatedSum::new();
    let mut sumsq = CompensatedSum::new();
    for (s, s2) in partials {
        sum.merge(s);
        sumsq.merge(s2);
    }
    let nf = n as f64;
    let mean = sum.value() / nf;
    let var = (sumsq.value() / nf - mean * mean).max(0.0);
    McMoments {
        n,
        mean,
        stderr: (var / nf).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn streams_are_independent_of_scheduling() {
        let f = |rng: &mut ChaCha8Rng| rng.random::<f64>();
        let a = parallel_mc(10_000, 7, f);
        let b = parallel_mc(10_000, 7, f);
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = stream_rng(1, 0);
        let mut b = stream_rng(1, 1);
        let xa: f64 = a.random();
        let xb: f64 = b.random();
        assert_ne!(xa, xb);
    }

    #[test]
    fn uniform_mean_is_half() {
        let m = parallel_mc(200_000, 42, |rng| rng.random::<f64>());
        assert!((m.mean - 0.5).abs() < 3.0 * m.stderr);
        assert!(m.stderr < 1e-3);
    }

    #[test]
    fn single_thread_pool_gives_same_bits() {
        let f = |rng: &mut ChaCha8Rng| rng.random::<f64>() - 0.5;
        let parallel = parallel_mc(50_000, 9, f);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let serial = pool.install(|| parallel_mc(50_000, 9, f));
        assert_eq!(parallel.mean.to_bits(), serial.mean.to_bits());
    }
}
