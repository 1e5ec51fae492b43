//! Minibatch training loop, evaluation and run-directory output.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtag_core::layers::{zero_grads, Mode, Parameters};
use vidtag_core::metrics::MetricReport;
use vidtag_core::model::{Losses, Model};
use vidtag_core::optim::Adam;
use vidtag_core::Tensor;

use crate::checkpoint::{Checkpoint, Entry, EntryKind, RngState};
use crate::config::ResolvedConfig;
use crate::dataset::{chunks, Dataset, Sampler};
use crate::{io_err, Error, Result};

pub const METRICS_HEADER: &str = "iteration,loss_word,loss_class,hit1,perr,gap";
const EVAL_CHUNK: usize = 256;

/// Stream of the run seed used for parameter initialization; the gate uses
/// `GATE_STREAM` and minibatch permutations use their own range.
const INIT_STREAM: u64 = 0;
const GATE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    /// Mean training losses over the iterations since the previous row.
    pub loss_word: f64,
    pub loss_class: f64,
    pub metrics: Option<MetricReport>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let m = match &self.metrics {
            Some(m) => format!("{:.6},{:.6},{:.6}", m.hit1, m.perr, m.gap),
            None => ",,".into(),
        };
        format!("{},{:.8},{:.8},{m}", self.iteration, self.loss_word, self.loss_class)
    }
}

pub struct Trainer {
    pub config: ResolvedConfig,
    pub model: Model,
    pub adam: Adam,
    pub gate: ChaCha8Rng,
    pub iteration: u64,
    sampler: Option<Sampler>,
}

impl Trainer {
    pub fn new(config: ResolvedConfig) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(config.train.seed);
        init.set_stream(INIT_STREAM);
        let mut model = Model::new(&mut init, config.model_config()?)?;
        let mut adam = Adam::new(&mut model, config.train.lr);
        adam.clip_norm = (config.train.clip_norm > 0.0).then_some(config.train.clip_norm);
        let mut gate = ChaCha8Rng::seed_from_u64(config.train.seed);
        gate.set_stream(GATE_STREAM);
        Ok(Self { config, model, adam, gate, iteration: 0, sampler: None })
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.feature_dim() != self.config.schema.feature_dim() {
            return Err(Error::Config(format!(
                "dataset feature width {} does not match the model's {}",
                data.feature_dim(),
                self.config.schema.feature_dim()
            )));
        }
        if data.min_vocab() > self.config.vocab {
            return Err(Error::Config(format!("dataset labels exceed vocabulary {}", self.config.vocab)));
        }
        Ok(())
    }

    /// Parameter with the largest (or a non-finite) norm, for diagnostics.
    fn worst_parameter(&mut self) -> String {
        let mut worst = (String::new(), -1.0f64);
        self.model.visit_params("", &mut |name, p| {
            let n = p.value.norm_sq().sqrt();
            // the first non-finite norm sticks
            if worst.1.is_finite() && (!n.is_finite() || n > worst.1) {
                worst = (name.to_string(), n);
            }
        });
        format!("largest parameter norm {} = {}", worst.0, worst.1)
    }

    fn diverged(&mut self, what: String) -> Error {
        let detail = format!("{what}; {}", self.worst_parameter());
        Error::Diverged { iteration: self.iteration, detail }
    }

    /// One optimizer step on the next minibatch.
    pub fn step(&mut self, data: &Dataset) -> Result<Losses> {
        let batch_size = self.config.train.batch_size;
        let sampler = match &mut self.sampler {
            Some(s) => s,
            None => self.sampler.insert(Sampler::new(self.config.train.seed, data.len(), batch_size)?),
        };
        let indices = sampler.indices(self.iteration);
        let batch = data.batch(&indices, self.config.vocab)?;
        zero_grads(&mut self.model);
        let pass = match self.model.forward(&batch, self.config.train.beta, &mut self.gate, Mode::Train) {
            Ok(p) => p,
            Err(vidtag_core::Error::NonFinite(what)) => return Err(self.diverged(what)),
            Err(e) => return Err(e.into()),
        };
        self.model.backward(&pass)?;
        if let Err(vidtag_core::Error::NonFinite(what)) = self.adam.update(&mut self.model) {
            return Err(self.diverged(what));
        }
        self.model.commit(&pass);
        self.iteration += 1;
        Ok(pass.losses)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.model.predict(features)?)
    }

    /// Inference-mode metrics over the whole dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<MetricReport> {
        self.check_data(data)?;
        let mut scores = Vec::with_capacity(data.len() * self.config.vocab);
        for idx in chunks(data.len(), EVAL_CHUNK) {
            scores.extend_from_slice(self.model.predict(&data.rows(&idx))?.data());
        }
        let scores = Tensor::new(&[data.len(), self.config.vocab], scores)?;
        Ok(MetricReport::evaluate(&scores, &data.labels)?)
    }

    /// Trains until `config.iterations`, emitting a row every `log_every`
    /// iterations and at the end; validation metrics are attached every
    /// `eval_every` iterations and at the end.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut log: impl FnMut(&LogRow) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        self.check_data(train)?;
        if let Some(v) = val {
            self.check_data(v)?;
        }
        let (total, log_every, eval_every) =
            (self.config.train.iterations, self.config.train.log_every, self.config.train.eval_every);
        let mut rows = Vec::new();
        let (mut word, mut class, mut n) = (0.0, 0.0, 0u64);
        while self.iteration < total {
            let l = self.step(train)?;
            word += l.word;
            class += l.class;
            n += 1;
            let it = self.iteration;
            let last = it == total;
            let eval_now = last || (eval_every > 0 && it % eval_every == 0);
            if last || it % log_every == 0 || eval_now {
                let metrics = match (val, eval_now) {
                    (Some(v), true) => Some(self.evaluate(v)?),
                    _ => None,
                };
                let row = LogRow { iteration: it, loss_word: word / n as f64, loss_class: class / n as f64, metrics };
                log(&row)?;
                rows.push(row);
                (word, class, n) = (0.0, 0.0, 0);
            }
        }
        Ok(rows)
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut entries = Vec::new();
        self.model.visit_params("", &mut |name, p| {
            entries.push(Entry {
                kind: EntryKind::Param,
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
        });
        self.model.visit_state("", &mut |name, t| {
            entries.push(Entry { kind: EntryKind::State, name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
        });
        for m in &self.adam.moments {
            for (kind, t) in [(EntryKind::AdamM, &m.m), (EntryKind::AdamV, &m.v)] {
                entries.push(Entry { kind, name: m.name.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() });
            }
        }
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            rng: RngState { seed: self.gate.get_seed(), stream: self.gate.get_stream(), word_pos: self.gate.get_word_pos() },
            adam_step: self.adam.step,
            entries,
        }
    }

    /// Rebuilds a trainer; every parameter, statistic and moment of the
    /// configured model must be present with a matching shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config.clone())?;
        let mut expected = 0usize;
        let mut lookup = std::collections::HashMap::new();
        for e in &ck.entries {
            if lookup.insert((e.kind as u8, e.name.as_str()), e).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry {}", e.name)));
            }
        }
        let mut missing = None;
        let mut restore = |kind: EntryKind, name: &str, target: &mut Tensor| match lookup.get(&(kind as u8, name)) {
            Some(e) if e.shape == target.shape() => {
                target.data_mut().copy_from_slice(&e.data);
                expected += 1;
            }
            _ => {
                missing.get_or_insert_with(|| format!("{kind:?} {name}"));
            }
        };
        t.model.visit_params("", &mut |name, p| restore(EntryKind::Param, name, &mut p.value));
        t.model.visit_state("", &mut |name, s| restore(EntryKind::State, name, s));
        for m in &mut t.adam.moments {
            restore(EntryKind::AdamM, &m.name, &mut m.m);
            restore(EntryKind::AdamV, &m.name, &mut m.v);
        }
        if let Some(what) = missing {
            return Err(Error::Checkpoint(format!("missing or mis-shaped entry {what}")));
        }
        if expected != ck.entries.len() {
            return Err(Error::Checkpoint(format!("{} unexpected entries", ck.entries.len() - expected)));
        }
        t.iteration = ck.iteration;
        t.adam.step = ck.adam_step;
        t.gate = ChaCha8Rng::from_seed(ck.rng.seed);
        t.gate.set_stream(ck.rng.stream);
        t.gate.set_word_pos(ck.rng.word_pos);
        Ok(t)
    }
}

/// Trains and writes `config.json`, `metrics.csv` and `checkpoint.bin` into
/// `out_dir`.
pub fn train_to_dir(config: ResolvedConfig, train: &Dataset, val: Option<&Dataset>, out_dir: &Path) -> Result<Trainer> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, config.to_json() + "\n").map_err(io_err(&cfg_path))?;
    let log_path = out_dir.join("metrics.csv");
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log, "{METRICS_HEADER}").map_err(io_err(&log_path))?;
    let mut trainer = Trainer::new(config)?;
    trainer.run(train, val, |row| writeln!(log, "{}", row.csv()).map_err(io_err(&log_path)))?;
    trainer.checkpoint().save(&out_dir.join("checkpoint.bin"))?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::example::FeatureSchema;
    use crate::synthetic::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (ResolvedConfig, Dataset) {
        let spec = SyntheticSpec { vocab: 8, rgb_dim: 5, audio_dim: 3, max_tags: 4, mean_tags: 2.0, ..Default::default() };
        let data = Dataset::from_examples(&generate_synthetic(&spec, 40).unwrap()).unwrap();
        let train = TrainConfig { hidden: 6, embed: 4, batch_size: 4, iterations: 5, log_every: 2, ..Default::default() };
        (ResolvedConfig::new(train, FeatureSchema::with_dims(5, 3), 8).unwrap(), data)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut cfg, data) = tiny();
        cfg.train.lr = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.checkpoint();
        let l = t.step(&data).unwrap();
        assert!(l.total.is_finite());
        let after = t.checkpoint();
        let params = |c: &Checkpoint| c.entries.iter().filter(|e| e.kind == EntryKind::Param).cloned().collect::<Vec<_>>();
        assert_eq!(params(&before), params(&after));
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let (cfg, data) = tiny();
        let mut a = Trainer::new(cfg).unwrap();
        a.step(&data).unwrap();
        a.step(&data).unwrap();
        let ck = a.checkpoint();
        let bytes = ck.encode();
        let mut b = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(b.checkpoint().encode(), bytes);
        let (la, lb) = (a.step(&data).unwrap(), b.step(&data).unwrap());
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
    }

    #[test]
    fn logs_follow_the_schedule() {
        let (cfg, data) = tiny();
        let mut t = Trainer::new(cfg).unwrap();
        let rows = t.run(&data, Some(&data), |_| Ok(())).unwrap();
        let its: Vec<u64> = rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![2, 4, 5]);
        assert!(rows[0].metrics.is_none() && rows[2].metrics.is_some());
        assert_eq!(rows[0].csv().matches(',').count(), 5);
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let (cfg, data) = tiny();
        let mut t = Trainer::new(cfg).unwrap();
        t.model.visit_params("", &mut |name, p| {
            if name.ends_with("projection.weight") {
                p.value.data_mut()[0] = f64::NAN;
            }
        });
        match t.step(&data) {
            Err(Error::Diverged { iteration: 0, detail }) => assert!(detail.contains("parameter norm"), "{detail}"),
            other => panic!("{other:?}"),
        }
    }
}
