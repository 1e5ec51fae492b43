//! Training configuration. Every field is a CLI flag with a `VIDTAG_*`
//! environment override; the resolved configuration is serialized into the
//! run directory and every checkpoint.

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use vidtag_core::model::{ModelConfig, ModelKind};
use vidtag_core::recurrent::{CellKind, NormSettings};
use vidtag_core::translator::WordLoss;

use crate::example::{FeatureSchema, AUDIO_DIM, RGB_DIM};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    BaseMaxpool,
    GuidedLogistic,
    GuidedMoe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CellArg {
    Lstm,
    Bnlstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WordLossArg {
    Softmax,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Args)]
pub struct TrainConfig {
    #[arg(long, value_enum, default_value_t = ModelArg::GuidedLogistic, env = "VIDTAG_MODEL")]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value_t = CellArg::Lstm, env = "VIDTAG_CELL")]
    pub cell: CellArg,
    /// Batch-normalize the final hidden state before the classifier.
    #[arg(long, env = "VIDTAG_BN_FEATURE")]
    pub bn_feature: bool,
    /// Batch-normalize the word-projection logits.
    #[arg(long, env = "VIDTAG_BN_PROJECTION")]
    pub bn_projection: bool,
    /// Label injection probability.
    #[arg(long, default_value_t = 0.0, env = "VIDTAG_BETA")]
    pub beta: f64,
    #[arg(long, default_value_t = 256, env = "VIDTAG_HIDDEN")]
    pub hidden: usize,
    #[arg(long, default_value_t = 64, env = "VIDTAG_EMBED")]
    pub embed: usize,
    #[arg(long, default_value_t = 2, env = "VIDTAG_DEPTH")]
    pub depth: usize,
    #[arg(long, default_value_t = 2, env = "VIDTAG_EXPERTS")]
    pub experts: usize,
    #[arg(long, default_value_t = 64, env = "VIDTAG_BATCH_SIZE")]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3, env = "VIDTAG_LR")]
    pub lr: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long, default_value_t = 5.0, env = "VIDTAG_CLIP_NORM")]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 1000, env = "VIDTAG_ITERATIONS")]
    pub iterations: u64,
    #[arg(long, default_value_t = 0, env = "VIDTAG_SEED")]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = WordLossArg::Softmax, env = "VIDTAG_LOSS_WORD")]
    pub loss_word: WordLossArg,
    /// Weight of the classifier loss in the total loss.
    #[arg(long, default_value_t = 1.0, env = "VIDTAG_LAMBDA")]
    pub lambda: f64,
    /// Decode-length ceiling at inference.
    #[arg(long, default_value_t = 32, env = "VIDTAG_T_MAX")]
    pub t_max: usize,
    /// Number of per-timestep normalizer statistics kept.
    #[arg(long, default_value_t = 32, env = "VIDTAG_T_CAP")]
    pub t_cap: usize,
    #[arg(long, default_value_t = vidtag_core::layers::BN_DECAY, env = "VIDTAG_BN_DECAY")]
    pub bn_decay: f64,
    #[arg(long, default_value_t = vidtag_core::layers::BN_EPS, env = "VIDTAG_BN_EPS")]
    pub bn_eps: f64,
    /// Rows of training loss are written every this many iterations.
    #[arg(long, default_value_t = 100, env = "VIDTAG_LOG_EVERY")]
    pub log_every: u64,
    /// Validation metrics are computed every this many iterations (0: only
    /// at the end).
    #[arg(long, default_value_t = 0, env = "VIDTAG_EVAL_EVERY")]
    pub eval_every: u64,
    /// Vocabulary size; inferred from the training labels when absent.
    #[arg(long, env = "VIDTAG_VOCAB")]
    pub vocab: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelArg::GuidedLogistic,
            cell: CellArg::Lstm,
            bn_feature: false,
            bn_projection: false,
            beta: 0.0,
            hidden: 256,
            embed: 64,
            depth: 2,
            experts: 2,
            batch_size: 64,
            lr: 1e-3,
            clip_norm: 5.0,
            iterations: 1000,
            seed: 0,
            loss_word: WordLossArg::Softmax,
            lambda: 1.0,
            t_max: 32,
            t_cap: 32,
            bn_decay: vidtag_core::layers::BN_DECAY,
            bn_eps: vidtag_core::layers::BN_EPS,
            log_every: 100,
            eval_every: 0,
            vocab: None,
        }
    }
}

impl TrainConfig {
    pub fn uses_batch_norm(&self) -> bool {
        self.cell == CellArg::Bnlstm || self.bn_projection || (self.bn_feature && self.model != ModelArg::BaseMaxpool)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad(format!("clip norm {} must be finite and non-negative", self.clip_norm));
        }
        if self.batch_size == 0 || (self.uses_batch_norm() && self.batch_size < 2) {
            return bad(format!("batch size {} too small for this model", self.batch_size));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.vocab == Some(0) {
            return bad("vocabulary must be non-empty".into());
        }
        Ok(())
    }

    pub fn model_config(&self, feature_dim: usize, vocab: usize) -> Result<ModelConfig> {
        self.validate()?;
        let kind = match self.model {
            ModelArg::BaseMaxpool => ModelKind::BaseMaxpool,
            ModelArg::GuidedLogistic => ModelKind::GuidedLogistic,
            ModelArg::GuidedMoe => ModelKind::GuidedMoe,
        };
        let mut c = ModelConfig::new(kind, feature_dim, vocab);
        c.cell = match self.cell {
            CellArg::Lstm => CellKind::Lstm,
            CellArg::Bnlstm => CellKind::BnLstm,
        };
        c.embed_dim = self.embed;
        c.hidden = self.hidden;
        c.depth = self.depth;
        c.experts = self.experts;
        c.bn_feature = self.bn_feature;
        c.bn_projection = self.bn_projection;
        c.word_loss = match self.loss_word {
            WordLossArg::Softmax => WordLoss::Softmax,
            WordLossArg::Binary => WordLoss::Binary,
        };
        c.lambda = self.lambda;
        c.norm = NormSettings { t_cap: self.t_cap, decay: self.bn_decay, eps: self.bn_eps };
        c.t_max = self.t_max;
        c.validate()?;
        Ok(c)
    }
}

/// Key aliases and widths of the record layout, as CLI flags.
#[derive(Clone, Debug, PartialEq, Args)]
pub struct SchemaArgs {
    #[arg(long, default_value_t = RGB_DIM, env = "VIDTAG_RGB_DIM")]
    pub rgb_dim: usize,
    #[arg(long, default_value_t = AUDIO_DIM, env = "VIDTAG_AUDIO_DIM")]
    pub audio_dim: usize,
    /// Accepted id feature names, tried in order.
    #[arg(long = "id-key", default_values_t = ["id".to_string(), "video_id".to_string()], env = "VIDTAG_ID_KEYS", value_delimiter = ',')]
    pub id_keys: Vec<String>,
    #[arg(long = "labels-key", default_values_t = ["labels".to_string()], env = "VIDTAG_LABELS_KEYS", value_delimiter = ',')]
    pub labels_keys: Vec<String>,
    #[arg(long = "rgb-key", default_values_t = ["mean_rgb".to_string()], env = "VIDTAG_RGB_KEYS", value_delimiter = ',')]
    pub rgb_keys: Vec<String>,
    #[arg(long = "audio-key", default_values_t = ["mean_audio".to_string()], env = "VIDTAG_AUDIO_KEYS", value_delimiter = ',')]
    pub audio_keys: Vec<String>,
}

impl SchemaArgs {
    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            id_keys: self.id_keys.clone(),
            labels_keys: self.labels_keys.clone(),
            rgb_keys: self.rgb_keys.clone(),
            audio_keys: self.audio_keys.clone(),
            rgb_dim: self.rgb_dim,
            audio_dim: self.audio_dim,
        }
    }
}

/// Everything needed to rebuild a model: the training settings plus the
/// data-derived sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub vocab: usize,
    pub schema: FeatureSchema,
}

impl ResolvedConfig {
    pub fn new(train: TrainConfig, schema: FeatureSchema, data_vocab: usize) -> Result<Self> {
        train.validate()?;
        let vocab = match train.vocab {
            Some(v) if v < data_vocab => {
                return Err(Error::Config(format!("vocabulary {v} smaller than the largest label id + 1 = {data_vocab}")))
            }
            Some(v) => v,
            None => data_vocab,
        };
        let mut train = train;
        train.vocab = Some(vocab);
        let r = Self { train, vocab, schema };
        r.model_config()?;
        Ok(r)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.train.model_config(self.schema.feature_dim(), self.vocab)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let r = ResolvedConfig::new(TrainConfig::default(), FeatureSchema::default(), 4716).unwrap();
        assert_eq!(r.train.vocab, Some(4716));
        let m = r.model_config().unwrap();
        assert_eq!((m.feature_dim, m.hidden, m.embed_dim), (1152, 256, 64));
        assert_eq!(ResolvedConfig::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn invalid_fields_are_rejected() {
        let cases: Vec<Box<dyn Fn(&mut TrainConfig)>> = vec![
            Box::new(|c| c.beta = 1.5),
            Box::new(|c| c.lr = f64::NAN),
            Box::new(|c| c.batch_size = 0),
            Box::new(|c| {
                c.cell = CellArg::Bnlstm;
                c.batch_size = 1
            }),
            Box::new(|c| c.hidden = 0),
            Box::new(|c| c.log_every = 0),
        ];
        for f in cases {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(ResolvedConfig::new(c, FeatureSchema::default(), 10).is_err());
        }
        let c = TrainConfig { vocab: Some(5), ..Default::default() };
        assert!(ResolvedConfig::new(c, FeatureSchema::default(), 10).is_err());
    }
}
