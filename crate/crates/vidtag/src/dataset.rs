//! In-memory video-level datasets and seeded minibatch sampling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtag_core::model::Batch;
use vidtag_core::Tensor;

use crate::example::{parse_example, serialize_example, FeatureSchema, VideoExample};
use crate::tfrecord::{read_tfrecord, write_tfrecord};
use crate::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<Vec<u8>>,
    /// `[N × (rgb_dim + audio_dim)]`.
    pub features: Tensor,
    /// Sorted, deduplicated, non-empty label sets.
    pub labels: Vec<Vec<usize>>,
    /// Videos dropped for having no labels.
    pub skipped: usize,
}

impl Dataset {
    pub fn from_examples(examples: &[VideoExample]) -> Result<Self> {
        let kept: Vec<&VideoExample> = examples.iter().filter(|e| !e.labels.is_empty()).collect();
        if kept.is_empty() {
            return Err(Error::Config("dataset has no labelled videos".into()));
        }
        let d = kept[0].mean_rgb.len() + kept[0].mean_audio.len();
        let mut data = Vec::with_capacity(kept.len() * d);
        for e in &kept {
            if e.mean_rgb.len() + e.mean_audio.len() != d {
                return Err(Error::Config(format!("video {:?} has a different feature width", e.id)));
            }
            data.extend(e.feature());
        }
        let labels = kept
            .iter()
            .map(|e| {
                let mut l = e.labels.clone();
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect();
        Ok(Self {
            ids: kept.iter().map(|e| e.id.clone()).collect(),
            features: Tensor::new(&[kept.len(), d], data)?,
            labels,
            skipped: examples.len() - kept.len(),
        })
    }

    pub fn load(paths: &[impl AsRef<Path>], schema: &FeatureSchema) -> Result<Self> {
        let mut examples = Vec::new();
        for path in paths {
            examples.extend(read_examples(path.as_ref(), schema)?);
        }
        Self::from_examples(&examples)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// One more than the largest label id.
    pub fn min_vocab(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |&m| m + 1)
    }

    pub fn rows(&self, indices: &[usize]) -> Tensor {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(&[indices.len(), d], data).expect("rows of a valid matrix")
    }

    pub fn batch(&self, indices: &[usize], vocab: usize) -> Result<Batch> {
        let labels: Vec<Vec<usize>> = indices.iter().map(|&i| self.labels[i].clone()).collect();
        Ok(Batch::new(self.rows(indices), &labels, vocab)?)
    }
}

pub fn read_examples(path: &Path, schema: &FeatureSchema) -> Result<Vec<VideoExample>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (index, record) in read_tfrecord(BufReader::new(file)).enumerate() {
        let bytes = record.map_err(|source| Error::Record { path: path.into(), source })?;
        out.push(parse_example(&bytes, schema).map_err(|source| Error::Schema { path: path.into(), index, source })?);
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[VideoExample], schema: &FeatureSchema) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_tfrecord(&mut w, examples.iter().map(|e| serialize_example(e, schema))).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Minibatches drawn from a fresh seeded permutation per epoch. The batch of
/// iteration `i` depends only on `(seed, len, batch, i)`.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    len: usize,
    batch: usize,
    perms: HashMap<u64, Vec<usize>>,
}

/// Stream offset keeping epoch permutations apart from other uses of the
/// run seed.
const EPOCH_STREAM_BASE: u64 = 1 << 32;

impl Sampler {
    pub fn new(seed: u64, len: usize, batch: usize) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::Config("sampler needs a non-empty dataset and batch".into()));
        }
        Ok(Self { seed, len, batch, perms: HashMap::new() })
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        let (seed, len) = (self.seed, self.len);
        self.perms.retain(|&e, _| e + 1 >= epoch);
        self.perms.entry(epoch).or_insert_with(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(EPOCH_STREAM_BASE + epoch);
            let mut p: Vec<usize> = (0..len).collect();
            p.shuffle(&mut r);
            p
        })
    }

    pub fn indices(&mut self, iteration: u64) -> Vec<usize> {
        let start = iteration * self.batch as u64;
        (start..start + self.batch as u64)
            .map(|pos| {
                let len = self.len as u64;
                self.permutation(pos / len)[(pos % len) as usize]
            })
            .collect()
    }
}

/// Consecutive index chunks covering `0..len`.
pub fn chunks(len: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..len).step_by(size.max(1)).map(move |s| (s..(s + size).min(len)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, labels: Vec<usize>) -> VideoExample {
        VideoExample { id: id.as_bytes().to_vec(), labels, mean_rgb: vec![1.0, 2.0], mean_audio: vec![3.0] }
    }

    #[test]
    fn unlabelled_videos_are_skipped() {
        let d = Dataset::from_examples(&[example("a", vec![2, 1, 2]), example("b", vec![]), example("c", vec![0])])
            .unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.skipped, 1);
        assert_eq!(d.labels[0], vec![1, 2]);
        assert_eq!(d.min_vocab(), 3);
        assert_eq!(d.features.row(1), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = Sampler::new(5, 10, 4).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|i| s.indices(i)).collect();
        assert_eq!(seen.len(), 20);
        seen.truncate(10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut again = Sampler::new(5, 10, 4).unwrap();
        assert_eq!(again.indices(3), s.indices(3));
    }

    #[test]
    fn chunks_cover_range() {
        let c: Vec<_> = chunks(7, 3).collect();
        assert_eq!(c, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
    }
}
