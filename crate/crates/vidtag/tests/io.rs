use proptest::prelude::*;
use vidtag::dataset::{read_examples, write_examples, Dataset};
use vidtag::example::{parse_example, serialize_example, FeatureSchema, SchemaError, VideoExample};
use vidtag::synthetic::{generate_synthetic, SyntheticSpec};
use vidtag::tfrecord::{read_tfrecord, write_tfrecord, RecordError};

fn read_all(bytes: &[u8]) -> Result<Vec<Vec<u8>>, RecordError> {
    read_tfrecord(bytes).collect()
}

fn frame(records: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    write_tfrecord(&mut out, records).unwrap();
    out
}

#[test]
fn empty_stream_has_no_records() {
    assert!(read_all(&[]).unwrap().is_empty());
}

#[test]
fn zero_length_payload_is_framed() {
    let bytes = frame(&[Vec::new()]);
    assert_eq!(bytes.len(), 16);
    assert_eq!(&bytes[..8], &[0; 8]);
    assert_eq!(read_all(&bytes).unwrap(), vec![Vec::<u8>::new()]);
}

#[test]
fn known_framing_bytes() {
    let bytes = frame(&[b"abc".to_vec()]);
    assert_eq!(&bytes[..8], &3u64.to_le_bytes());
    let expect_len_crc = vidtag::tfrecord::masked_crc(&3u64.to_le_bytes());
    assert_eq!(&bytes[8..12], &expect_len_crc.to_le_bytes());
    assert_eq!(&bytes[12..15], b"abc");
    // standard CRC-32C check value
    assert_eq!(crc32c::crc32c(b"123456789"), 0xe306_9283);
}

#[test]
fn truncation_is_reported() {
    let bytes = frame(&[vec![1, 2, 3, 4], vec![5]]);
    for cut in 1..bytes.len() {
        if cut == 20 {
            continue; // record boundary
        }
        let r = read_all(&bytes[..cut]);
        assert!(matches!(r, Err(RecordError::Truncated { .. })), "cut at {cut}: {r:?}");
    }
}

#[test]
fn every_single_bit_flip_is_detected() {
    let records: Vec<Vec<u8>> = (0..5u8).map(|i| (0..i * 3).collect()).collect();
    let bytes = frame(&records);
    for pos in 0..bytes.len() {
        for bit in 0..8 {
            let mut bad = bytes.clone();
            bad[pos] ^= 1 << bit;
            assert!(read_all(&bad).is_err(), "flip of bit {bit} at byte {pos} went unnoticed");
        }
    }
}

#[test]
fn oversized_lengths_are_refused_before_allocation() {
    let mut bytes = Vec::new();
    let len = (1u64 << 40).to_le_bytes();
    bytes.extend_from_slice(&len);
    bytes.extend_from_slice(&vidtag::tfrecord::masked_crc(&len).to_le_bytes());
    assert!(matches!(read_all(&bytes), Err(RecordError::TooLarge { .. })));
    let small = frame(&[vec![0; 100]]);
    let r: Result<Vec<_>, _> = read_tfrecord(&small[..]).with_limit(99).collect();
    assert!(matches!(r, Err(RecordError::TooLarge { .. })));
}

proptest! {
    #[test]
    fn framing_round_trips(records in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..4096), 0..8)) {
        let bytes = frame(&records);
        prop_assert_eq!(read_all(&bytes).unwrap(), records);
    }
}

/// Minimal protobuf writer independent of the library's codec.
mod pb {
    pub fn varint(mut v: u64, out: &mut Vec<u8>) {
        while v >= 0x80 {
            out.push((v as u8) | 0x80);
            v >>= 7;
        }
        out.push(v as u8);
    }

    pub fn delimited(field: u32, body: &[u8], out: &mut Vec<u8>) {
        varint(u64::from(field << 3 | 2), out);
        varint(body.len() as u64, out);
        out.extend_from_slice(body);
    }

    /// `Feature` bodies; `kind` is 1 bytes, 2 float, 3 int64.
    pub fn bytes_feature(v: &[u8]) -> Vec<u8> {
        let mut list = Vec::new();
        delimited(1, v, &mut list);
        let mut f = Vec::new();
        delimited(1, &list, &mut f);
        f
    }

    pub fn float_feature(v: &[f32]) -> Vec<u8> {
        let packed: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        let mut list = Vec::new();
        delimited(1, &packed, &mut list);
        let mut f = Vec::new();
        delimited(2, &list, &mut f);
        f
    }

    /// Unpacked encoding, which parsers must accept alongside packed.
    pub fn int64_feature_unpacked(v: &[u64]) -> Vec<u8> {
        let mut list = Vec::new();
        for &x in v {
            varint(1 << 3, &mut list);
            varint(x, &mut list);
        }
        let mut f = Vec::new();
        delimited(3, &list, &mut f);
        f
    }

    pub fn example(entries: &[(&str, Vec<u8>)]) -> Vec<u8> {
        let mut features = Vec::new();
        for (key, value) in entries {
            let mut entry = Vec::new();
            delimited(1, key.as_bytes(), &mut entry);
            delimited(2, value, &mut entry);
            delimited(1, &entry, &mut features);
        }
        let mut ex = Vec::new();
        delimited(1, &features, &mut ex);
        // unknown varint field 7, to be skipped
        varint(7 << 3, &mut ex);
        varint(12345, &mut ex);
        ex
    }
}

fn schema() -> FeatureSchema {
    FeatureSchema::with_dims(3, 2)
}

#[test]
fn hand_encoded_fixture_parses() {
    let bytes = pb::example(&[
        ("video_id", pb::bytes_feature(b"vid1")),
        ("labels", pb::int64_feature_unpacked(&[1, 7])),
        ("mean_rgb", pb::float_feature(&[0.5, -1.0, 2.25])),
        ("mean_audio", pb::float_feature(&[3.0, 0.125])),
    ]);
    let ex = parse_example(&bytes, &schema()).unwrap();
    assert_eq!(ex.id, b"vid1");
    assert_eq!(ex.labels, vec![1, 7]);
    assert_eq!(ex.mean_rgb, vec![0.5, -1.0, 2.25]);
    assert_eq!(ex.mean_audio, vec![3.0, 0.125]);
}

#[test]
fn two_byte_varint_label() {
    let mut raw = Vec::new();
    pb::varint(300, &mut raw);
    assert_eq!(raw, vec![0xac, 0x02]);
    let bytes = pb::example(&[
        ("id", pb::bytes_feature(b"x")),
        ("labels", pb::int64_feature_unpacked(&[300])),
        ("mean_rgb", pb::float_feature(&[0.0; 3])),
        ("mean_audio", pb::float_feature(&[0.0; 2])),
    ]);
    assert_eq!(parse_example(&bytes, &schema()).unwrap().labels, vec![300]);
}

#[test]
fn missing_audio_is_a_schema_error() {
    let bytes = pb::example(&[
        ("id", pb::bytes_feature(b"x")),
        ("labels", pb::int64_feature_unpacked(&[1])),
        ("mean_rgb", pb::float_feature(&[0.0; 3])),
    ]);
    match parse_example(&bytes, &schema()) {
        Err(SchemaError::Missing(key)) => assert!(key.contains("mean_audio")),
        other => panic!("expected a missing-key error, got {other:?}"),
    }
}

#[test]
fn wrong_width_is_a_schema_error() {
    let bytes = pb::example(&[
        ("id", pb::bytes_feature(b"x")),
        ("labels", pb::int64_feature_unpacked(&[1])),
        ("mean_rgb", pb::float_feature(&[0.0; 4])),
        ("mean_audio", pb::float_feature(&[0.0; 2])),
    ]);
    assert!(matches!(
        parse_example(&bytes, &schema()),
        Err(SchemaError::WrongLength { found: 4, expected: 3, .. })
    ));
}

#[test]
fn serialize_then_parse_is_identity() {
    let ex = VideoExample { id: b"abc".to_vec(), labels: vec![0, 4, 300], mean_rgb: vec![1.5, -2.0, 0.0], mean_audio: vec![9.0, 1e-7] };
    let bytes = serialize_example(&ex, &schema());
    assert_eq!(parse_example(&bytes, &schema()).unwrap(), ex);
    assert_eq!(serialize_example(&ex, &schema()), bytes);
}

#[test]
fn dataset_files_round_trip() {
    let spec = SyntheticSpec::default();
    let examples = generate_synthetic(&spec, 40).unwrap();
    let s = FeatureSchema::with_dims(spec.rgb_dim, spec.audio_dim);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tfrecord");
    write_examples(&path, &examples, &s).unwrap();
    assert_eq!(read_examples(&path, &s).unwrap(), examples);
    let d = Dataset::load(&[&path], &s).unwrap();
    assert_eq!((d.len(), d.feature_dim()), (40, 64));
}

#[test]
fn synthetic_mean_tag_count() {
    let spec = SyntheticSpec::default();
    let examples = generate_synthetic(&spec, 10_000).unwrap();
    let mean = examples.iter().map(|e| e.labels.len()).sum::<usize>() as f64 / 1e4;
    assert!((mean - 3.4).abs() < 0.1, "mean tag count {mean}");
    assert!(examples.iter().all(|e| e.labels.len() <= 30));
}

#[test]
fn synthetic_is_deterministic() {
    let spec = SyntheticSpec { seed: 9, ..Default::default() };
    let s = FeatureSchema::with_dims(spec.rgb_dim, spec.audio_dim);
    let encode = |ex: Vec<VideoExample>| frame(&ex.iter().map(|e| serialize_example(e, &s)).collect::<Vec<_>>());
    let a = encode(generate_synthetic(&spec, 200).unwrap());
    assert_eq!(a, encode(generate_synthetic(&spec, 200).unwrap()));
    let other = SyntheticSpec { seed: 10, ..spec };
    assert_ne!(a, encode(generate_synthetic(&other, 200).unwrap()));
}
