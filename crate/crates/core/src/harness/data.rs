use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::motion::{resample_frames, CorpusSample};
use crate::tensor::Tensor;

/// Stream domains so that different consumers of one seed never share draws.
pub(crate) const STREAM_INIT_STAGE1: u64 = 1;
pub(crate) const STREAM_STAGE1: u64 = 2;
pub(crate) const STREAM_INIT_STAGE2: u64 = 3;
pub(crate) const STREAM_STAGE2: u64 = 4;
pub(crate) const STREAM_GENERATE: u64 = 5;
pub(crate) const STREAM_EPOCH_STAGE1: u64 = 6;

/// Independent generator for `(seed, domain, index)`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) | index);
    rng
}

/// Positions `start..start + len` of an endless run of shuffled passes over `pool`;
/// pass `e` is shuffled by stream `e` of `domain`.
pub(crate) fn epoch_batch(pool: &[usize], seed: u64, domain: u64, start: usize, len: usize) -> Vec<usize> {
    let n = pool.len();
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + len)
        .map(|pos| {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order = pool.to_vec();
                order.shuffle(&mut stream_rng(seed, domain, epoch as u64));
                cached = Some((epoch, order));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One in five sample indices is held out, chosen by hash.
pub fn is_held_out(index: usize) -> bool {
    splitmix64(index as u64) % 5 == 0
}

/// `(train, held_out)` sample indices.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| !is_held_out(i))
}

/// Frames used by the nearest-centroid classifier.
pub const CLASSIFIER_FRAMES: usize = 16;

/// Motion resampled to a fixed length and flattened.
pub fn motion_feature(frames: &Tensor) -> Vec<f64> {
    resample_frames(frames, CLASSIFIER_FRAMES).into_data()
}

/// Parameter-free classifier: the class whose mean feature is nearest in L1.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidClassifier {
    centroids: Vec<Option<Vec<f64>>>,
}

impl CentroidClassifier {
    pub fn fit(samples: &[&CorpusSample], n_classes: usize) -> Result<Self> {
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; n_classes];
        for s in samples {
            let f = motion_feature(s.motion.frames());
            let slot = sums
                .get_mut(s.class)
                .ok_or(Error::Index {
                    index: s.class,
                    bound: n_classes,
                })?
                .get_or_insert_with(|| (vec![0.0; f.len()], 0));
            for (a, b) in slot.0.iter_mut().zip(&f) {
                *a += b;
            }
            slot.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|s| s.map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        Ok(Self { centroids })
    }

    pub fn predict(&self, frames: &Tensor) -> usize {
        let f = motion_feature(frames);
        let mut best = (0, f64::INFINITY);
        for (c, centroid) in self.centroids.iter().enumerate() {
            if let Some(centroid) = centroid {
                let d: f64 = centroid.iter().zip(&f).map(|(a, b)| (a - b).abs()).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
        }
        best.0
    }
}
