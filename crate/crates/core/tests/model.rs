use dgenctr::data::DatasetSchema;
use dgenctr::error::{CheckpointError, Error};
use dgenctr::model::{load_checkpoint, save_checkpoint, Checkpoint, LoadMode, Model, ModelConfig};

fn config(schema: &DatasetSchema, dim: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        dim,
        blocks: 1,
        heads: 2,
        ff_width: 8,
        seed,
        ..ModelConfig::for_schema(schema)
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let schema = DatasetSchema::uniform(3, 5).unwrap();
    let m = Model::new(config(&schema, 6, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, 17, &path).unwrap();
    let back = load_checkpoint(&path, &m.config, LoadMode::Full).unwrap();
    assert_eq!(Checkpoint::from_model(&back, 17), Checkpoint::read(&path).unwrap());
    let recs: [&[usize]; 2] = [&[0, 1, 2, 0], &[4, 4, 4, 1]];
    assert_eq!(m.ctr_scores(&recs).unwrap(), back.ctr_scores(&recs).unwrap());
}

#[test]
fn corrupted_bytes_are_detected() {
    let schema = DatasetSchema::uniform(2, 3).unwrap();
    let m = Model::new(config(&schema, 4, 2)).unwrap();
    let bytes = Checkpoint::from_model(&m, 0).to_bytes();
    for pos in [0, bytes.len() / 2, bytes.len() - 1] {
        let mut b = bytes.clone();
        b[pos] ^= 0x40;
        assert!(Checkpoint::from_bytes(&b).is_err(), "flip at {pos} went unnoticed");
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(&bytes).is_ok());
}

#[test]
fn full_load_requires_matching_layout() {
    let schema = DatasetSchema::uniform(2, 3).unwrap();
    let ck = Checkpoint::from_model(&Model::new(config(&schema, 4, 2)).unwrap(), 0);
    let err = ck.restore(&config(&schema, 6, 2), LoadMode::Full).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::Fingerprint(_))));
    let other = DatasetSchema::uniform(2, 4).unwrap();
    assert!(ck.restore(&config(&other, 4, 2), LoadMode::Full).is_err());
    // the scoring network does not depend on vocabularies
    assert!(ck.restore(&config(&other, 4, 2), LoadMode::ScoringNetworkOnly).is_ok());
}

#[test]
fn missing_file_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Checkpoint::read(&dir.path().join("absent.ckpt")).is_err());
}

#[test]
fn initialization_is_seeded() {
    let schema = DatasetSchema::uniform(3, 5).unwrap();
    let a = Checkpoint::from_model(&Model::new(config(&schema, 6, 1)).unwrap(), 0);
    let b = Checkpoint::from_model(&Model::new(config(&schema, 6, 1)).unwrap(), 0);
    let c = Checkpoint::from_model(&Model::new(config(&schema, 6, 2)).unwrap(), 0);
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
}

#[test]
fn scores_are_probabilities_and_ignore_label_token() {
    let schema = DatasetSchema::uniform(3, 5).unwrap();
    let m = Model::new(config(&schema, 6, 3)).unwrap();
    let s = m.ctr_scores(&[&[1, 2, 3, 0], &[1, 2, 3, 1], &[1, 2, 3]]).unwrap();
    assert!(s.iter().all(|p| *p > 0.0 && *p < 1.0));
    assert_eq!(s[0], s[1]);
    assert_eq!(s[0], s[2]);
    // a masked feature cannot be scored
    assert!(m.ctr_scores(&[&[5, 2, 3, 0]]).is_err());
    let d = m.field_distribution(&[&[5, 2, 3, 2]], 0).unwrap();
    assert!((d[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
