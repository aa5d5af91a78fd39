//! Synthetic low-rank biased tensors for recovery tests.

use npil_core::{DataSplit, SparseTensor3, SplitRatio};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct SynthSpec {
    pub dims: [usize; 3],
    pub rank: usize,
    pub factor_max: f64,
    pub bias_max: f64,
    pub noise_sigma: f64,
    pub density: f64,
}

/// Full tensor of a random biased CP model plus Gaussian noise.
pub fn full_tensor(spec: &SynthSpec, seed: u64) -> SparseTensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [di, dj, dk] = spec.dims;
    let mut factor = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| {
                (0..spec.rank)
                    .map(|_| spec.factor_max * (1.0 - rng.gen::<f64>()))
                    .collect()
            })
            .collect()
    };
    let (a, b, c) = (factor(di), factor(dj), factor(dk));
    let mut bias =
        |n: usize| -> Vec<f64> { (0..n).map(|_| spec.bias_max * rng.gen::<f64>()).collect() };
    let (u, f, d) = (bias(di), bias(dj), bias(dk));
    let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
    let mut records = Vec::with_capacity(di * dj * dk);
    for i in 0..di {
        for j in 0..dj {
            for k in 0..dk {
                let mut y = u[i] + f[j] + d[k];
                for r in 0..spec.rank {
                    y += a[i][r] * b[j][r] * c[k][r];
                }
                if spec.noise_sigma > 0.0 {
                    y += noise.sample(&mut rng);
                }
                records.push((i, j, k, y));
            }
        }
    }
    SparseTensor3::build(di, dj, dk, records).unwrap()
}

/// Masked and split synthetic data.
pub fn split(spec: &SynthSpec, seed: u64) -> DataSplit {
    let full = full_tensor(spec, seed);
    let masked = npil_core::ingest::mask_to_density(&full, spec.density, seed ^ 0x5eed).unwrap();
    masked.split(SplitRatio::default(), seed ^ 0xabc).unwrap()
}

pub fn acceptance_spec() -> SynthSpec {
    SynthSpec {
        dims: [50, 8, 30],
        rank: 5,
        factor_max: 0.5,
        bias_max: 0.1,
        noise_sigma: 0.01,
        density: 0.10,
    }
}
