use std::collections::BTreeMap;

use lbq_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use lbq_core::distill::{attach_quantizers, freeze_all, QuantizerInit};
use lbq_core::model::{perplexity, LinearSlot, Model, ModelConfig};
use lbq_core::ptq::{ptq_initialize_model, EmConfig, InitMethod};
use lbq_core::runtime::pack_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        max_seq_len: 32,
        ..ModelConfig::default()
    }
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..40)).collect()
}

/// Teacher, relaxed student and packed student built from one seed.
fn models() -> (Model, Model, Model) {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let teacher = Model::new(tiny(), &mut rng).unwrap();
    let calib: Vec<Vec<usize>> = (0..2).map(|_| tokens(&mut rng, 32)).collect();
    let relaxed = ptq_initialize_model(&teacher, &calib, 16, InitMethod::Em, &EmConfig::default(), 1).unwrap();
    let mut packed = relaxed.clone();
    freeze_all(&mut packed).unwrap();
    attach_quantizers(&mut packed, &calib[0], &QuantizerInit::default()).unwrap();
    pack_model(&mut packed).unwrap();
    (teacher, relaxed, packed)
}

fn ck(model: Model, stage: &str) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("stage".to_string(), stage.to_string());
    Checkpoint { model, meta }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (teacher, relaxed, packed) = models();
    assert!(matches!(packed.layers[0].linears[0], LinearSlot::Packed(_)));
    for (i, c) in [ck(teacher, "teacher"), ck(relaxed, "ptq-init"), ck(packed, "packed")].into_iter().enumerate() {
        let a = dir.path().join(format!("{i}a.lbq"));
        let b = dir.path().join(format!("{i}b.lbq"));
        save_checkpoint(&c, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, c);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn loaded_packed_model_evaluates_identically() {
    let (_, _, packed) = models();
    let bytes = encode_checkpoint(&ck(packed.clone(), "packed"));
    let loaded = decode_checkpoint(&bytes).unwrap().model;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let ids = tokens(&mut rng, 32);
    assert_eq!(packed.logits(&ids).unwrap(), loaded.logits(&ids).unwrap());
    let corpus = tokens(&mut rng, 300);
    let a = perplexity(&packed, &corpus, 32).unwrap();
    let b = perplexity(&loaded, &corpus, 32).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

/// Number of single-byte corruptions, out of 100, that still decode.
pub fn undetected_flips() -> usize {
    let (_, _, packed) = models();
    let bytes = encode_checkpoint(&ck(packed, "packed"));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..100)
        .filter(|_| {
            let mut b = bytes.clone();
            let i = rng.gen_range(0..b.len());
            b[i] ^= 1 << rng.gen_range(0..8);
            decode_checkpoint(&b).is_ok()
        })
        .count()
}

#[test]
fn corruption_is_detected() {
    assert_eq!(undetected_flips(), 0);
}

#[test]
fn truncation_is_detected() {
    let (teacher, _, _) = models();
    let bytes = encode_checkpoint(&ck(teacher, "teacher"));
    for cut in [1, 4, 100, bytes.len() / 2] {
        assert!(decode_checkpoint(&bytes[..bytes.len() - cut]).is_err());
    }
    let mut extended = bytes.clone();
    extended.push(0);
    assert!(decode_checkpoint(&extended).is_err());
}
