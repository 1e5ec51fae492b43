//! Seeded multi-label task whose pooled feature is the mean of per-label
//! prototype vectors plus Gaussian noise.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use vidtag_core::Error;

use crate::example::VideoExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab: usize,
    pub rgb_dim: usize,
    pub audio_dim: usize,
    /// Mean label-set size; sizes are `1 + Poisson(mean_tags − 1)`.
    pub mean_tags: f64,
    pub max_tags: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { vocab: 50, rgb_dim: 48, audio_dim: 16, mean_tags: 3.4, max_tags: 30, noise: 0.5, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.vocab == 0 || self.rgb_dim + self.audio_dim == 0 {
            return Err(Error::Domain("vocabulary and feature width must be positive".into()));
        }
        if self.max_tags == 0 || self.max_tags > self.vocab {
            return Err(Error::Domain(format!("max_tags {} must lie in 1..={}", self.max_tags, self.vocab)));
        }
        if !(self.mean_tags >= 1.0 && self.mean_tags <= self.max_tags as f64) {
            return Err(Error::Domain(format!("mean_tags {} must lie in [1, {}]", self.mean_tags, self.max_tags)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Domain(format!("noise {} must be finite and non-negative", self.noise)));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.rgb_dim + self.audio_dim
    }

    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    /// One `N(0, 1)` prototype per label (stream 0).
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut r = self.stream(0);
        let d = self.feature_dim();
        (0..self.vocab).map(|_| (0..d).map(|_| r.sample(StandardNormal)).collect()).collect()
    }
}

/// Videos `start .. start + n`; video `i` draws from stream `i + 1` only, so
/// any range is reproducible on its own.
pub fn generate_range(spec: &SyntheticSpec, start: usize, n: usize) -> Result<Vec<VideoExample>, Error> {
    spec.validate()?;
    let protos = spec.prototypes();
    let extra = Poisson::new(spec.mean_tags - 1.0).ok();
    let d = spec.feature_dim();
    let mut out = Vec::with_capacity(n);
    for index in start..start + n {
        let mut r = spec.stream(index as u64 + 1);
        let count = match &extra {
            Some(p) => 1 + p.sample(&mut r) as usize,
            None => 1,
        }
        .min(spec.max_tags);
        let mut labels = sample(&mut r, spec.vocab, count).into_vec();
        labels.sort_unstable();
        let mut feature = vec![0.0f64; d];
        for &l in &labels {
            for (f, p) in feature.iter_mut().zip(&protos[l]) {
                *f += p;
            }
        }
        for f in feature.iter_mut() {
            *f /= count as f64;
            if spec.noise > 0.0 {
                *f += spec.noise * r.sample::<f64, _>(StandardNormal);
            }
        }
        let (rgb, audio) = feature.split_at(spec.rgb_dim);
        out.push(VideoExample {
            id: format!("syn{index:07}").into_bytes(),
            labels,
            mean_rgb: rgb.iter().map(|&v| v as f32).collect(),
            mean_audio: audio.iter().map(|&v| v as f32).collect(),
        });
    }
    Ok(out)
}

pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<VideoExample>, Error> {
    generate_range(spec, 0, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_label_is_its_prototype() {
        let spec = SyntheticSpec { mean_tags: 1.0, noise: 0.0, vocab: 8, max_tags: 4, ..Default::default() };
        let protos = spec.prototypes();
        for ex in generate_synthetic(&spec, 20).unwrap() {
            assert_eq!(ex.labels.len(), 1);
            let expect: Vec<f32> = protos[ex.labels[0]].iter().map(|&v| v as f32).collect();
            assert_eq!([ex.mean_rgb, ex.mean_audio].concat(), expect);
        }
    }

    #[test]
    fn ranges_agree_with_full_generation() {
        let spec = SyntheticSpec::default();
        let all = generate_synthetic(&spec, 30).unwrap();
        assert_eq!(generate_range(&spec, 10, 5).unwrap(), all[10..15].to_vec());
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = SyntheticSpec { vocab: 10, max_tags: 30, ..Default::default() };
        assert!(matches!(generate_synthetic(&spec, 1), Err(Error::Domain(_))));
        let spec = SyntheticSpec { mean_tags: 0.5, ..Default::default() };
        assert!(generate_synthetic(&spec, 1).is_err());
    }

    #[test]
    fn label_sets_are_valid() {
        let spec = SyntheticSpec::default();
        for ex in generate_synthetic(&spec, 500).unwrap() {
            assert!(!ex.labels.is_empty() && ex.labels.len() <= 30);
            assert!(ex.labels.windows(2).all(|w| w[0] < w[1]));
            assert!(ex.labels.iter().all(|&l| l < 50));
        }
    }
}
