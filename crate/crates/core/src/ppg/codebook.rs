//! Seeded noise: timestep codebooks and the other named random sub-streams.
//!
//! Every draw comes from a ChaCha8 generator keyed on the global seed with a
//! stream id packing `(domain, t, k)`, so any entry can be regenerated on its
//! own and ablations that share a seed see identical draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ingest::{LatentGeometry, LatentTensor};

pub const DEFAULT_CODEBOOK_SIZE: usize = 64;

/// Named random sub-streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum NoiseStream {
    Codebook = 1,
    InitNoise = 2,
    Ancestral = 3,
}

pub fn stream_rng(seed: u64, stream: NoiseStream, t: usize, k: usize) -> ChaCha8Rng {
    assert!(t < (1 << 32) && k < (1 << 24), "stream index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) | ((t as u64) << 24) | k as u64);
    rng
}

pub fn standard_normal(geometry: LatentGeometry, rng: &mut ChaCha8Rng) -> LatentTensor {
    let data = (0..geometry.len()).map(|_| StandardNormal.sample(rng)).collect();
    LatentTensor::new(geometry, data).expect("normal draws are finite")
}

/// Standard-normal draw from a named stream.
pub fn stream_noise(seed: u64, stream: NoiseStream, t: usize, geometry: LatentGeometry) -> LatentTensor {
    standard_normal(geometry, &mut stream_rng(seed, stream, t, 0))
}

/// `K` unnormalized standard-normal candidates for timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCodebook {
    pub t: usize,
    pub entries: Vec<LatentTensor>,
}

impl NoiseCodebook {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, k: usize) -> &LatentTensor {
        &self.entries[k]
    }
}

pub fn make_codebook(t: usize, size: usize, seed: u64, geometry: LatentGeometry) -> Result<NoiseCodebook> {
    if size == 0 {
        return Err(Error::InvalidArgument("codebook size must be at least 1".into()));
    }
    let entries = (0..size)
        .map(|k| standard_normal(geometry, &mut stream_rng(seed, NoiseStream::Codebook, t, k)))
        .collect();
    Ok(NoiseCodebook { t, entries })
}
