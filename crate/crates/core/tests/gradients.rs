//! Quick finite-difference checks; the acceptance suite covers every loss.

mod common;

use common::*;
use mever::datamodel::ClaimRecord;
use mever::trainer::{JointModel, RetrieverModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn contrastive_gradients_match_finite_differences() {
    let data = toy_data(3);
    let lookup = data.index();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = RetrieverModel::new(&toy_config(), vocab_of_size(&data, 50), &mut rng).unwrap();
    let pairs: Vec<(&ClaimRecord, &str)> = data
        .claims
        .iter()
        .filter(|c| !c.gold_evidence_ids.is_empty())
        .take(3)
        .map(|c| (c, c.gold_evidence_ids[0].as_str()))
        .collect();
    let (err, n) = gradient_check(&model.store, || model.batch_loss(&lookup, &pairs).unwrap(), 1, &mut rng);
    assert!(n > 0);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let data = toy_data(4);
    let lookup = data.index();
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = JointModel::new(&cfg, vocab_of_size(&data, 50), data.label_set.clone(), true, &mut rng).unwrap();
    let claim = data.claims.iter().find(|c| !c.gold_evidence_ids.is_empty()).unwrap();
    let loss = || {
        model
            .claim_loss(&lookup, claim, &claim.gold_evidence_ids)
            .unwrap()
            .total(cfg.effective_lambda())
            .unwrap()
    };
    let (err, n) = gradient_check(&model.store, loss, 1, &mut rng);
    assert!(n > 0);
    assert!(err <= 1e-4, "max relative error {err}");
}
