//! Video-level `Example` messages: a feature map of name to a bytes, float or
//! int64 list.

use std::collections::BTreeMap;

use prost::Message;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod proto {
    use std::collections::BTreeMap;

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct BytesList {
        #[prost(bytes = "vec", repeated, tag = "1")]
        pub value: Vec<Vec<u8>>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct FloatList {
        #[prost(float, repeated, tag = "1")]
        pub value: Vec<f32>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct Int64List {
        #[prost(int64, repeated, tag = "1")]
        pub value: Vec<i64>,
    }

    #[derive(Clone, PartialEq, prost::Oneof)]
    pub enum Kind {
        #[prost(message, tag = "1")]
        BytesList(BytesList),
        #[prost(message, tag = "2")]
        FloatList(FloatList),
        #[prost(message, tag = "3")]
        Int64List(Int64List),
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct Feature {
        #[prost(oneof = "Kind", tags = "1, 2, 3")]
        pub kind: Option<Kind>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct Features {
        #[prost(btree_map = "string, message", tag = "1")]
        pub feature: BTreeMap<String, Feature>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct Example {
        #[prost(message, optional, tag = "1")]
        pub features: Option<Features>,
    }
}

use proto::{BytesList, Example, Feature, Features, FloatList, Int64List, Kind};

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("malformed example: {0}")]
    Decode(String),
    #[error("missing feature {0:?}")]
    Missing(String),
    #[error("feature {key:?} has the wrong type, expected {expected}")]
    WrongType { key: String, expected: &'static str },
    #[error("feature {key:?} has {found} values, expected {expected}")]
    WrongLength { key: String, found: usize, expected: usize },
    #[error("feature {key:?} holds invalid label {value}")]
    BadLabel { key: String, value: i64 },
}

/// Key names and feature widths of the video-level record layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    /// Accepted names of the id feature, tried in order.
    pub id_keys: Vec<String>,
    pub labels_keys: Vec<String>,
    pub rgb_keys: Vec<String>,
    pub audio_keys: Vec<String>,
    pub rgb_dim: usize,
    pub audio_dim: usize,
}

pub const RGB_DIM: usize = 1024;
pub const AUDIO_DIM: usize = 128;

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::with_dims(RGB_DIM, AUDIO_DIM)
    }
}

impl FeatureSchema {
    pub fn with_dims(rgb_dim: usize, audio_dim: usize) -> Self {
        let keys = |k: &[&str]| k.iter().map(|s| s.to_string()).collect();
        Self {
            id_keys: keys(&["id", "video_id"]),
            labels_keys: keys(&["labels"]),
            rgb_keys: keys(&["mean_rgb"]),
            audio_keys: keys(&["mean_audio"]),
            rgb_dim,
            audio_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.rgb_dim + self.audio_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoExample {
    pub id: Vec<u8>,
    pub labels: Vec<usize>,
    pub mean_rgb: Vec<f32>,
    pub mean_audio: Vec<f32>,
}

impl VideoExample {
    /// `mean_rgb ⊕ mean_audio` in double precision.
    pub fn feature(&self) -> impl Iterator<Item = f64> + '_ {
        self.mean_rgb.iter().chain(&self.mean_audio).map(|&v| f64::from(v))
    }
}

fn lookup<'a>(map: &'a BTreeMap<String, Feature>, keys: &[String]) -> Result<(&'a String, &'a Feature), SchemaError> {
    keys.iter()
        .find_map(|k| map.get_key_value(k))
        .ok_or_else(|| SchemaError::Missing(keys.join("|")))
}

fn floats(map: &BTreeMap<String, Feature>, keys: &[String], dim: usize) -> Result<Vec<f32>, SchemaError> {
    let (key, f) = lookup(map, keys)?;
    match &f.kind {
        Some(Kind::FloatList(l)) if l.value.len() == dim => Ok(l.value.clone()),
        Some(Kind::FloatList(l)) => Err(SchemaError::WrongLength { key: key.clone(), found: l.value.len(), expected: dim }),
        _ => Err(SchemaError::WrongType { key: key.clone(), expected: "float list" }),
    }
}

pub fn parse_example(bytes: &[u8], schema: &FeatureSchema) -> Result<VideoExample, SchemaError> {
    let ex = Example::decode(bytes).map_err(|e| SchemaError::Decode(e.to_string()))?;
    let map = ex.features.map(|f| f.feature).unwrap_or_default();
    let (key, f) = lookup(&map, &schema.id_keys)?;
    let id = match &f.kind {
        Some(Kind::BytesList(l)) if l.value.len() == 1 => l.value[0].clone(),
        Some(Kind::BytesList(l)) => {
            return Err(SchemaError::WrongLength { key: key.clone(), found: l.value.len(), expected: 1 })
        }
        _ => return Err(SchemaError::WrongType { key: key.clone(), expected: "bytes list" }),
    };
    let (key, f) = lookup(&map, &schema.labels_keys)?;
    let labels = match &f.kind {
        Some(Kind::Int64List(l)) => l
            .value
            .iter()
            .map(|&v| usize::try_from(v).map_err(|_| SchemaError::BadLabel { key: key.clone(), value: v }))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(SchemaError::WrongType { key: key.clone(), expected: "int64 list" }),
    };
    Ok(VideoExample {
        id,
        labels,
        mean_rgb: floats(&map, &schema.rgb_keys, schema.rgb_dim)?,
        mean_audio: floats(&map, &schema.audio_keys, schema.audio_dim)?,
    })
}

/// Encodes with the first name of each key list.
pub fn serialize_example(ex: &VideoExample, schema: &FeatureSchema) -> Vec<u8> {
    let feature = |kind| Feature { kind: Some(kind) };
    let mut map = BTreeMap::new();
    map.insert(schema.id_keys[0].clone(), feature(Kind::BytesList(BytesList { value: vec![ex.id.clone()] })));
    map.insert(
        schema.labels_keys[0].clone(),
        feature(Kind::Int64List(Int64List { value: ex.labels.iter().map(|&l| l as i64).collect() })),
    );
    map.insert(schema.rgb_keys[0].clone(), feature(Kind::FloatList(FloatList { value: ex.mean_rgb.clone() })));
    map.insert(schema.audio_keys[0].clone(), feature(Kind::FloatList(FloatList { value: ex.mean_audio.clone() })));
    Example { features: Some(Features { feature: map }) }.encode_to_vec()
}
