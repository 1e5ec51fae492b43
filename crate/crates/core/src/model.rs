//! Full models: the max-pooled translator baseline and the guided translator
//! feeding its final hidden state to a classifier head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::classifiers::{Head, HeadCache, Logistic, Moe, DEFAULT_EXPERTS};
use crate::error::{dim_err, Error, Result};
use crate::layers::{join, BatchNorm, BatchNormCache, Mode, Param, Parameters, BN_GAMMA_INIT};
use crate::recurrent::{CellKind, NormSettings};
use crate::tensor::Tensor;
use crate::translator::{GuidedPass, Translator, TranslatorConfig, WordLoss, WordSequence, DEFAULT_T_MAX};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    BaseMaxpool,
    GuidedLogistic,
    GuidedMoe,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub cell: CellKind,
    pub feature_dim: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub experts: usize,
    pub bn_feature: bool,
    pub bn_projection: bool,
    pub word_loss: WordLoss,
    pub lambda: f64,
    pub norm: NormSettings,
    pub t_max: usize,
}

impl ModelConfig {
    /// Hidden 256, word vectors 64, two layers, two experts.
    pub fn new(kind: ModelKind, feature_dim: usize, vocab: usize) -> Self {
        Self {
            kind,
            cell: CellKind::Lstm,
            feature_dim,
            vocab,
            embed_dim: 64,
            hidden: 256,
            depth: 2,
            experts: DEFAULT_EXPERTS,
            bn_feature: false,
            bn_projection: false,
            word_loss: WordLoss::Softmax,
            lambda: 1.0,
            norm: NormSettings::default(),
            t_max: DEFAULT_T_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.feature_dim, self.vocab, self.embed_dim, self.hidden, self.depth, self.t_max, self.norm.t_cap];
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero-sized dimension in {self:?}")));
        }
        if self.kind == ModelKind::GuidedMoe && self.experts == 0 {
            return Err(Error::Config("mixture needs at least one expert".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss_class weight {} must be finite and non-negative", self.lambda)));
        }
        if !(self.norm.decay > 0.0 && self.norm.decay < 1.0 && self.norm.eps > 0.0) {
            return Err(Error::Config("normalizer decay must lie in (0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn translator(&self) -> TranslatorConfig {
        TranslatorConfig {
            feature_dim: self.feature_dim,
            vocab: self.vocab,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            depth: self.depth,
            cell: self.cell,
            bn_projection: self.bn_projection,
            norm: self.norm,
            t_max: self.t_max,
            word_loss: self.word_loss,
        }
    }

    pub fn guided(&self) -> bool {
        self.kind != ModelKind::BaseMaxpool
    }
}

/// Features with their canonical sentences and multi-hot targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub sentences: Vec<WordSequence>,
    pub targets: Tensor,
}

impl Batch {
    pub fn new(features: Tensor, labels: &[Vec<usize>], vocab: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(dim_err("batch", format!("features {:?} for {} label sets", features.shape(), labels.len())));
        }
        let sentences = labels
            .iter()
            .map(|l| WordSequence::canonicalize(l, vocab))
            .collect::<Result<Vec<_>>>()?;
        let mut targets = Tensor::zeros(&[labels.len(), vocab]);
        for (b, s) in sentences.iter().enumerate() {
            for &l in s.labels() {
                targets.row_mut(b)[l] = 1.0;
            }
        }
        Ok(Self { features, sentences, targets })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub word: f64,
    pub class: f64,
    pub total: f64,
    /// Fraction of supervised steps whose argmax equals the target word.
    pub word_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub losses: Losses,
    pub guided: GuidedPass,
    feature_bn: Option<BatchNormCache>,
    head: Option<HeadCache>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub translator: Translator,
    pub feature_bn: Option<BatchNorm>,
    pub head: Option<Head>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let translator = Translator::new(rng, config.translator())?;
        let feature_bn = (config.guided() && config.bn_feature)
            .then(|| BatchNorm::new(config.hidden, 1, BN_GAMMA_INIT, true, config.norm.decay, config.norm.eps));
        let head = match config.kind {
            ModelKind::BaseMaxpool => None,
            ModelKind::GuidedLogistic => Some(Head::Logistic(Logistic::new(rng, config.hidden, config.vocab))),
            ModelKind::GuidedMoe => Some(Head::Moe(Moe::new(rng, config.hidden, config.vocab, config.experts)?)),
        };
        Ok(Self { config, translator, feature_bn, head })
    }

    /// Losses for one batch. Gradients and normalizer statistics are left
    /// untouched; see [`Model::backward`] and [`Model::commit`].
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Batch, beta: f64, gate: &mut R, mode: Mode) -> Result<ForwardPass> {
        let guided = self.config.guided();
        let pass = self.translator.guided_forward(&batch.features, &batch.sentences, beta, gate, mode, guided)?;
        let word_accuracy = if pass.word_total == 0 { 0.0 } else { pass.word_hits as f64 / pass.word_total as f64 };
        let mut losses = Losses { word: pass.loss_word, class: 0.0, total: pass.loss_word, word_accuracy };
        let (mut feature_bn, mut head_cache) = (None, None);
        if let (Some(head), Some(h)) = (&self.head, &pass.h_final) {
            let f = match &self.feature_bn {
                Some(bn) => {
                    let (y, c) = bn.forward(h, 0, mode)?;
                    feature_bn = Some(c);
                    y
                }
                None => h.clone(),
            };
            let (class, cache) = head.loss(&f, &batch.targets)?;
            losses.class = class;
            losses.total += self.config.lambda * class;
            head_cache = Some(cache);
        }
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss {}", losses.total)));
        }
        Ok(ForwardPass { losses, guided: pass, feature_bn, head: head_cache })
    }

    /// Accumulates gradients of the total loss of `pass`.
    pub fn backward(&mut self, pass: &ForwardPass) -> Result<()> {
        let mut dh = None;
        if let (Some(head), Some(cache)) = (&mut self.head, &pass.head) {
            let df = head.backward(cache, self.config.lambda)?;
            dh = Some(match (&mut self.feature_bn, &pass.feature_bn) {
                (Some(bn), Some(c)) => bn.backward(c, &df),
                _ => df,
            });
        }
        self.translator.backward(&pass.guided, dh.as_ref())
    }

    /// Folds the pass's train-mode batch statistics into the population
    /// statistics.
    pub fn commit(&mut self, pass: &ForwardPass) {
        self.translator.commit(&pass.guided);
        if let (Some(bn), Some(c)) = (&mut self.feature_bn, &pass.feature_bn) {
            bn.commit(c);
        }
    }

    /// Inference-mode scores `[B × V]`.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        match &self.head {
            None => self.translator.base_predict(features),
            Some(head) => {
                let mut f = self.translator.extract_feature(features)?;
                if let Some(bn) = &self.feature_bn {
                    f = bn.forward(&f, 0, Mode::Infer)?.0;
                }
                head.predict(&f)
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

impl Parameters for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.translator.visit_params(&join(prefix, "translator"), f);
        if let Some(bn) = &mut self.feature_bn {
            bn.visit_params(&join(prefix, "feature_bn"), f);
        }
        if let Some(head) = &mut self.head {
            head.visit_params(&join(prefix, "head"), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.translator.visit_state(&join(prefix, "translator"), f);
        if let Some(bn) = &mut self.feature_bn {
            bn.visit_state(&join(prefix, "feature_bn"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: ModelKind) -> ModelConfig {
        let mut c = ModelConfig::new(kind, 5, 6);
        c.embed_dim = 3;
        c.hidden = 4;
        c
    }

    #[test]
    fn defaults_follow_reference_sizes() {
        let c = ModelConfig::new(ModelKind::GuidedLogistic, 1152, 4716);
        assert_eq!((c.hidden, c.embed_dim, c.depth, c.experts, c.lambda), (256, 64, 2, 2, 1.0));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn batch_builds_multi_hot_targets() {
        let b = Batch::new(Tensor::zeros(&[2, 3]), &[vec![4, 1], vec![0]], 5).unwrap();
        assert_eq!(b.targets.data(), &[0., 1., 0., 0., 1., 1., 0., 0., 0., 0.]);
        assert_eq!(b.sentences[0].ids(), &[5, 1, 4, 6]);
        assert!(Batch::new(Tensor::zeros(&[1, 3]), &[vec![]], 5).is_err());
    }

    #[test]
    fn prediction_shapes_and_ranges() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x = init::gaussian(&mut r, &[3, 5], 1.0);
        for kind in [ModelKind::BaseMaxpool, ModelKind::GuidedLogistic, ModelKind::GuidedMoe] {
            for cell in [CellKind::Lstm, CellKind::BnLstm] {
                let mut c = tiny(kind);
                c.cell = cell;
                c.bn_feature = true;
                c.bn_projection = true;
                let m = Model::new(&mut r, c).unwrap();
                let p = m.predict(&x).unwrap();
                assert_eq!(p.shape(), &[3, 6]);
                assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn forward_is_pure_and_commit_moves_statistics() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut c = tiny(ModelKind::GuidedLogistic);
        c.cell = CellKind::BnLstm;
        c.bn_feature = true;
        let mut m = Model::new(&mut r, c).unwrap();
        let x = init::gaussian(&mut r, &[3, 5], 1.0);
        let batch = Batch::new(x.clone(), &[vec![1, 2], vec![3], vec![0, 4, 5]], 6).unwrap();
        let before = m.predict(&x).unwrap();
        let pass = m.forward(&batch, 0.5, &mut ChaCha8Rng::seed_from_u64(9), Mode::Train).unwrap();
        assert_eq!(m.predict(&x).unwrap(), before);
        m.commit(&pass);
        assert_ne!(m.predict(&x).unwrap(), before);
    }

    #[test]
    fn base_model_has_no_class_loss() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let m = Model::new(&mut r, tiny(ModelKind::BaseMaxpool)).unwrap();
        let batch = Batch::new(init::gaussian(&mut r, &[2, 5], 1.0), &[vec![1], vec![2, 3]], 6).unwrap();
        let pass = m.forward(&batch, 1.0, &mut r, Mode::Train).unwrap();
        assert_eq!(pass.losses.class, 0.0);
        assert_eq!(pass.losses.total, pass.losses.word);
        assert!(pass.guided.h_final.is_none());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny(ModelKind::GuidedMoe);
        c.experts = 0;
        assert!(c.validate().is_err());
        let mut c = tiny(ModelKind::GuidedLogistic);
        c.lambda = f64::NAN;
        assert!(c.validate().is_err());
        let mut c = tiny(ModelKind::GuidedLogistic);
        c.hidden = 0;
        assert!(c.validate().is_err());
    }
}
