//! Label-sentence translator: the pooled video feature is concatenated with a
//! word embedding at every step, the recurrent stack predicts the next label,
//! and a stochastic gate picks whether the next word input is the ground-truth
//! label or the model's own previous prediction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::{
    binary_cross_entropy_onehot_rows, join, softmax_cross_entropy_rows, BatchNorm, BatchNormCache, Embedding, Linear,
    Mode, Param, Parameters, BN_GAMMA_INIT,
};
use crate::recurrent::{CellKind, LstmStack, NormSettings, StackStepCache};
use crate::tensor::{argmax, softmax_in_place, Tensor};

pub const DEFAULT_T_MAX: usize = 32;

/// A canonical label sentence `[BOS, y₁, …, y_T, EOS]` with ascending ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSequence {
    ids: Vec<usize>,
}

impl WordSequence {
    /// Sorts and deduplicates `labels` and wraps them in BOS/EOS, where
    /// BOS = `vocab` and EOS = `vocab + 1`.
    pub fn canonicalize(labels: &[usize], vocab: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyLabels);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
            return Err(Error::Vocabulary { id: bad, size: vocab });
        }
        let mut sorted = labels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut ids = Vec::with_capacity(sorted.len() + 2);
        ids.push(vocab);
        ids.extend(sorted);
        ids.push(vocab + 1);
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn tag_count(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn vocab(&self) -> usize {
        self.ids[0]
    }
}

/// Label injection probability and the seed of the gate's random stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub beta: f64,
    pub seed: u64,
}

impl GateConfig {
    pub fn new(beta: f64, seed: u64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self { beta, seed })
    }
}

/// One Bernoulli(`beta`) draw of the stochastic gate: `true` feeds the
/// ground-truth word. Consumes exactly one uniform sample.
pub fn gate_open<R: Rng + ?Sized>(rng: &mut R, beta: f64) -> bool {
    rng.random::<f64>() < beta
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Config(format!("label injection probability {beta} outside [0, 1]")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordLoss {
    Softmax,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranslatorConfig {
    pub feature_dim: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub cell: CellKind,
    pub bn_projection: bool,
    pub norm: NormSettings,
    pub t_max: usize,
    pub word_loss: WordLoss,
}

#[derive(Clone, Debug)]
pub struct Translator {
    pub config: TranslatorConfig,
    pub embedding: Embedding,
    pub stack: LstmStack,
    pub projection: Linear,
    pub projection_bn: Option<BatchNorm>,
}

/// Output of one teacher/self-fed pass over a batch of label sentences.
#[derive(Clone, Debug)]
pub struct GuidedPass {
    /// Vocabulary logits per prediction step, `[B × (V+2)]`.
    pub logits: Vec<Tensor>,
    /// Word id fed at each step for each sample.
    pub fed_words: Vec<Vec<usize>>,
    /// Top-layer hidden after the extra EOS-fed step, `[B × hidden]`.
    pub h_final: Option<Tensor>,
    pub loss_word: f64,
    pub word_hits: usize,
    pub word_total: usize,
    cache: GuidedCache,
}

#[derive(Clone, Debug)]
struct GuidedCache {
    stack: Vec<StackStepCache>,
    tops: Vec<Tensor>,
    projection_bn: Vec<Option<BatchNormCache>>,
    dlogits: Vec<Tensor>,
    final_step: Vec<usize>,
}

/// Result of free-running decoding.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// Per-sample emitted label ids (EOS excluded).
    pub emitted: Vec<Vec<usize>>,
    /// Elementwise max over the active steps' softmax distributions, `[B × V]`.
    pub max_probs: Tensor,
    pub h_final: Tensor,
}

impl Translator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: TranslatorConfig) -> Result<Self> {
        if config.feature_dim == 0 || config.vocab == 0 || config.embed_dim == 0 || config.hidden == 0 || config.depth == 0 {
            return Err(Error::Config(format!("zero-sized translator dimension in {config:?}")));
        }
        if config.t_max == 0 || config.norm.t_cap == 0 {
            return Err(Error::Config("t_max and t_cap must be positive".into()));
        }
        let embedding = Embedding::new(rng, config.vocab, config.embed_dim);
        let stack = LstmStack::new(
            rng,
            config.feature_dim + config.embed_dim,
            config.hidden,
            config.depth,
            config.cell,
            config.norm,
        );
        let projection = Linear::new(rng, config.hidden, config.vocab + 2);
        let projection_bn = config
            .bn_projection
            .then(|| BatchNorm::new(config.vocab + 2, 1, BN_GAMMA_INIT, true, config.norm.decay, config.norm.eps));
        Ok(Self { config, embedding, stack, projection, projection_bn })
    }

    pub fn extended_vocab(&self) -> usize {
        self.config.vocab + 2
    }

    fn check_features(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.feature_dim {
            return Err(dim_err(
                "translator",
                format!("features {:?}, expected width {}", x.shape(), self.config.feature_dim),
            ));
        }
        Ok(())
    }

    fn step_input(&self, x: &Tensor, words: &[usize]) -> Result<Tensor> {
        x.concat(&self.embedding.embed(words)?)
    }

    fn project(&self, top: &Tensor, mode: Mode) -> Result<(Tensor, Option<BatchNormCache>)> {
        let logits = self.projection.forward(top)?;
        match &self.projection_bn {
            None => Ok((logits, None)),
            Some(bn) => {
                let (y, c) = bn.forward(&logits, 0, mode)?;
                Ok((y, Some(c)))
            }
        }
    }

    /// Runs the translator over ground-truth sentences.
    ///
    /// Step 1 is fed BOS. At step `t ≤ T+1` the gate draws, per sample, the
    /// ground-truth word `y_{t−1}` with probability `beta` and otherwise the
    /// argmax of the previous step's logits. Step `t` predicts `y_t`, with EOS
    /// as the target at `t = T+1`. When `with_final` is set one more step is
    /// fed EOS and its top hidden becomes `h_final`. Infer mode always uses
    /// `beta = 0` and never draws from `gate`.
    pub fn guided_forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        targets: &[WordSequence],
        beta: f64,
        gate: &mut R,
        mode: Mode,
        with_final: bool,
    ) -> Result<GuidedPass> {
        check_beta(beta)?;
        self.check_features(x)?;
        let batch = x.rows();
        if targets.len() != batch {
            return Err(dim_err("guided_forward", format!("{} sentences for {batch} features", targets.len())));
        }
        let vocab = self.config.vocab;
        if let Some(t) = targets.iter().find(|t| t.vocab() != vocab) {
            return Err(Error::Config(format!("sentence built for vocabulary {} used with {vocab}", t.vocab())));
        }
        let (bos, eos) = (self.embedding.bos(), self.embedding.eos());
        let v_ext = self.extended_vocab();
        let lengths: Vec<usize> = targets.iter().map(WordSequence::tag_count).collect();
        let pred_steps = lengths.iter().max().copied().unwrap_or(0) + 1;
        let total_steps = pred_steps + usize::from(with_final);

        let mut states = self.stack.zero_state(batch);
        let mut stack_caches = Vec::with_capacity(total_steps);
        let mut tops = Vec::with_capacity(total_steps);
        let mut logits_all: Vec<Tensor> = Vec::with_capacity(pred_steps);
        let mut bn_caches = Vec::with_capacity(pred_steps);
        let mut dlogits = Vec::with_capacity(pred_steps);
        let mut fed_words = Vec::with_capacity(total_steps);
        let mut h_final = with_final.then(|| Tensor::zeros(&[batch, self.config.hidden]));
        let final_step: Vec<usize> = lengths.iter().map(|&t| t + 2).collect();
        let mut loss_word = 0.0;
        let (mut word_hits, mut word_total) = (0, 0);

        for s in 1..=total_steps {
            let mut words = vec![eos; batch];
            for b in 0..batch {
                let open = if s >= 2 && mode == Mode::Train { gate_open(gate, beta) } else { false };
                words[b] = if s == 1 {
                    bos
                } else if s <= lengths[b] + 1 {
                    if open {
                        targets[b].ids()[s - 1]
                    } else {
                        argmax(logits_all[s - 2].row(b))
                    }
                } else {
                    eos
                };
            }
            let input = self.step_input(x, &words)?;
            let (next, cache) = self.stack.step(&input, &states, s, mode)?;
            states = next;
            let top = states.last().expect("depth >= 1").h.clone();
            if s <= pred_steps {
                let (logits, bn_cache) = self.project(&top, mode)?;
                let rows: Vec<Option<usize>> =
                    (0..batch).map(|b| (s <= lengths[b] + 1).then(|| targets[b].ids()[s])).collect();
                let loss = match self.config.word_loss {
                    WordLoss::Softmax => softmax_cross_entropy_rows(&logits, &rows, batch as f64)?,
                    WordLoss::Binary => binary_cross_entropy_onehot_rows(&logits, &rows, (batch * v_ext) as f64)?,
                };
                loss_word += loss.value;
                for (b, row) in rows.iter().enumerate() {
                    if let Some(t) = row {
                        word_total += 1;
                        word_hits += usize::from(argmax(logits.row(b)) == *t);
                    }
                }
                logits_all.push(logits);
                bn_caches.push(bn_cache);
                dlogits.push(loss.grad);
            }
            if let Some(hf) = h_final.as_mut() {
                for b in 0..batch {
                    if final_step[b] == s {
                        hf.row_mut(b).copy_from_slice(top.row(b));
                    }
                }
            }
            stack_caches.push(cache);
            tops.push(top);
            fed_words.push(words);
        }
        if !loss_word.is_finite() {
            return Err(Error::NonFinite("loss_word".into()));
        }
        Ok(GuidedPass {
            logits: logits_all,
            fed_words,
            h_final,
            loss_word,
            word_hits,
            word_total,
            cache: GuidedCache {
                stack: stack_caches,
                tops,
                projection_bn: bn_caches,
                dlogits,
                final_step: if with_final { final_step } else { Vec::new() },
            },
        })
    }

    /// Accumulates gradients of `loss_word + ⟨dh_final, h_final⟩`. The fed-back
    /// argmax words are treated as data.
    pub fn backward(&mut self, pass: &GuidedPass, dh_final: Option<&Tensor>) -> Result<()> {
        let cache = &pass.cache;
        let steps = cache.stack.len();
        let mut dh_top: Vec<Option<Tensor>> = Vec::with_capacity(steps);
        for s in 0..steps {
            let mut dh = None;
            if let Some(dl) = cache.dlogits.get(s) {
                let dl = match (&mut self.projection_bn, &cache.projection_bn[s]) {
                    (Some(bn), Some(c)) => bn.backward(c, dl),
                    _ => dl.clone(),
                };
                dh = Some(self.projection.backward(&cache.tops[s], &dl)?);
            }
            if let Some(df) = dh_final {
                let rows: Vec<usize> = (0..df.rows()).filter(|&b| cache.final_step.get(b) == Some(&(s + 1))).collect();
                if !rows.is_empty() {
                    let g = dh.get_or_insert_with(|| Tensor::zeros(df.shape()));
                    for b in rows {
                        for (a, &v) in g.row_mut(b).iter_mut().zip(df.row(b)) {
                            *a += v;
                        }
                    }
                }
            }
            dh_top.push(dh);
        }
        let dxs = self.stack.backward(&cache.stack, &dh_top)?;
        for (s, dx) in dxs.iter().enumerate() {
            let (_, dword) = dx.split_cols(self.config.feature_dim)?;
            self.embedding.backward(&pass.fed_words[s], &dword);
        }
        Ok(())
    }

    /// Applies the train-mode normalizer statistics gathered by a pass.
    pub fn commit(&mut self, pass: &GuidedPass) {
        self.stack.commit(&pass.cache.stack);
        if let Some(bn) = &mut self.projection_bn {
            for c in pass.cache.projection_bn.iter().flatten() {
                bn.commit(c);
            }
        }
    }

    /// Free-running inference: feed back argmax words until each sample emits
    /// EOS or `t_max` prediction steps have run, then run one EOS-fed step.
    pub fn decode(&self, x: &Tensor, t_max: usize) -> Result<Decoded> {
        self.check_features(x)?;
        let batch = x.rows();
        let (bos, eos, vocab) = (self.embedding.bos(), self.embedding.eos(), self.config.vocab);
        let mut states = self.stack.zero_state(batch);
        let mut words = vec![bos; batch];
        let mut max_probs = Tensor::zeros(&[batch, vocab]);
        let mut emitted = vec![Vec::new(); batch];
        let mut h_final = Tensor::zeros(&[batch, self.config.hidden]);
        // 0 = predicting, 1 = next step is the EOS-fed final step, 2 = done
        let mut phase = vec![0u8; batch];
        let mut s = 0;
        while phase.iter().any(|&p| p != 2) {
            s += 1;
            let input = self.step_input(x, &words)?;
            let (next, _) = self.stack.step(&input, &states, s, Mode::Infer)?;
            states = next;
            let top = &states.last().expect("depth >= 1").h;
            let predicting = phase.iter().any(|&p| p == 0);
            let logits = if predicting { Some(self.project(top, Mode::Infer)?.0) } else { None };
            for b in 0..batch {
                match phase[b] {
                    0 => {
                        let mut probs = logits.as_ref().expect("computed while predicting").row(b).to_vec();
                        softmax_in_place(&mut probs);
                        for (m, &p) in max_probs.row_mut(b).iter_mut().zip(&probs[..vocab]) {
                            if p > *m {
                                *m = p;
                            }
                        }
                        let w = argmax(&probs);
                        if w == eos || s == t_max {
                            phase[b] = 1;
                            words[b] = eos;
                        } else {
                            words[b] = w;
                        }
                        if w < vocab {
                            emitted[b].push(w);
                        }
                    }
                    1 => {
                        h_final.row_mut(b).copy_from_slice(top.row(b));
                        phase[b] = 2;
                    }
                    _ => {}
                }
            }
        }
        Ok(Decoded { emitted, max_probs, h_final })
    }

    /// Max-pooled per-step word distributions over the real vocabulary.
    pub fn base_predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.decode(x, self.config.t_max)?.max_probs)
    }

    /// Top-layer hidden state after the EOS-fed step of free-running decoding.
    pub fn extract_feature(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.decode(x, self.config.t_max)?.h_final)
    }
}

impl Parameters for Translator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embedding.visit_params(&join(prefix, "embedding"), f);
        self.stack.visit_params(&join(prefix, "stack"), f);
        self.projection.visit_params(&join(prefix, "projection"), f);
        if let Some(bn) = &mut self.projection_bn {
            bn.visit_params(&join(prefix, "projection_bn"), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stack.visit_state(&join(prefix, "stack"), f);
        if let Some(bn) = &mut self.projection_bn {
            bn.visit_state(&join(prefix, "projection_bn"), f);
        }
    }
}
