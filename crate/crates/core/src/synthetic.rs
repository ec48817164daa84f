//! Generated scenes with known, spectrally separable classes. Used by the
//! test suites and handy for smoke-testing the CLI without real data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{HsiCube, LabelRaster};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    /// Square block edge of the class layout, in pixels.
    pub block: usize,
    /// Per-band Gaussian noise.
    pub noise_sigma: f64,
    /// Mean reflectance on a class's own bands.
    pub peak: f64,
    /// Mean reflectance on every other band.
    pub floor: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { height: 32, width: 32, bands: 10, classes: 3, block: 8, noise_sigma: 0.02, peak: 0.7, floor: 0.2, seed: 1 }
    }
}

impl SyntheticSpec {
    /// Mean spectrum of class `k` (1-based): `peak` on bands `b` with
    /// `b % classes == k - 1`, `floor` elsewhere, so no two classes share a
    /// peak band.
    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        (0..self.bands)
            .map(|b| if b % self.classes == k - 1 { self.peak } else { self.floor })
            .collect()
    }

    /// Smallest Euclidean distance between two class means, in noise sigmas.
    pub fn separation_in_sigmas(&self) -> f64 {
        let means: Vec<Vec<f64>> = (1..=self.classes).map(|k| self.class_mean(k)).collect();
        let mut best = f64::INFINITY;
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                best = best.min(d.sqrt());
            }
        }
        best / self.noise_sigma
    }

    /// Class id of pixel `(y, x)`: blocks tiled with classes cycling along
    /// both axes.
    pub fn class_at(&self, y: usize, x: usize) -> usize {
        (y / self.block + x / self.block) % self.classes + 1
    }

    pub fn generate(&self) -> (HsiCube, LabelRaster) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
        let means: Vec<Vec<f64>> = (1..=self.classes).map(|k| self.class_mean(k)).collect();
        let mut values = Vec::with_capacity(self.height * self.width * self.bands);
        let mut labels = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let k = self.class_at(y, x);
                labels.push(k as u16);
                values.extend(means[k - 1].iter().map(|m| m + noise.sample(&mut rng)));
            }
        }
        let cube = HsiCube::new(self.height, self.width, self.bands, values).expect("consistent dims");
        let raster = LabelRaster::new(self.height, self.width, labels).expect("consistent dims");
        (cube, raster)
    }
}
