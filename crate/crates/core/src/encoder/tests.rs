use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{matrix, probe, to_flat, to_rows, ParamStore};

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        max_text_len: 8,
        patch_size: 2,
        channels: 3,
        vocab_size: 20,
        max_positions: 10,
    }
}

fn encoder(seed: u64) -> EncoderParams {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut store, &mut rng, 8);
    EncoderParams::new(&mut b, tiny_config(), EncoderFlags::default()).unwrap()
}

fn random_image(id: &str, rng: &mut ChaCha8Rng) -> ImageRecord {
    let mut img = RgbImage::new(4, 4);
    for p in img.pixels_mut() {
        *p = Rgb([rng.random(), rng.random(), rng.random()]);
    }
    ImageRecord::new(id, img)
}

fn random_state(rng: &mut ChaCha8Rng, images: usize) -> EncoderState {
    let mut m = |rows: usize| {
        let data = (0..rows * 8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        matrix(data, rows, 8).unwrap()
    };
    EncoderState {
        h: m(3),
        z: (0..images).map(|_| m(5)).collect(),
        step: 0,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · W` for a `1 × d` row and `d × d` weight, by loops.
fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let w = to_rows(w).unwrap();
    (0..w[0].len())
        .map(|j| x.iter().zip(&w).map(|(xi, row)| xi * row[j]).sum())
        .collect()
}

fn graph_oracle(query: &[f64], neighbors: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let d = query.len();
    let scores: Vec<f64> = neighbors
        .iter()
        .map(|n| {
            let s: f64 = (0..d).map(|k| b[k] * query[k] + b[d + k] * n[k]).sum();
            sigmoid(s)
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    (0..d)
        .map(|k| neighbors.iter().zip(&exps).map(|(n, e)| e / total * n[k]).sum())
        .collect()
}

#[test]
fn graph_edge_counts() {
    let g = build_graph("t", &[], GraphMode::Retrieval);
    assert!(g.text_self_loop && g.cross_edges.is_empty() && g.intra_image_edges.is_empty());
    for n in 1..=6 {
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let g = build_graph("t", &ids, GraphMode::Verification);
        assert_eq!(g.cross_edges.len(), n);
        assert_eq!(g.intra_image_edges.len(), n * (n - 1) / 2);
        assert!(!g.text_self_loop);
    }
}

#[test]
fn single_image_aggregate_is_its_projection() {
    let enc = encoder(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let state = random_state(&mut rng, 1);
    let (z_hat, _) = enc.image_to_text_aggregate(&state).unwrap();
    let z_cls = to_flat(&state.z[0].narrow(0, 0, 1).unwrap()).unwrap();
    let expected = project(&z_cls, enc.w_img.weight.as_tensor());
    let got = to_flat(&z_hat.unwrap()).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_images_share_weight_equally() {
    let enc = encoder(1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut state = random_state(&mut rng, 1);
    state.z.push(state.z[0].clone());
    let ((_, _), records) = probe::capture(|| enc.image_to_text_aggregate(&state).unwrap());
    let w = &records.iter().find(|r| r.site == probe::Site::ImageToText).unwrap().weights[0];
    assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
}

#[test]
fn image_to_text_matches_scalar_oracle() {
    let enc = encoder(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = random_state(&mut rng, 4);
    let (z_hat, h_hat) = enc.image_to_text_aggregate(&state).unwrap();
    let h_cls = to_flat(&state.h.narrow(0, 0, 1).unwrap()).unwrap();
    let h_tilde = project(&h_cls, enc.w_txt.weight.as_tensor());
    let z_tilde: Vec<Vec<f64>> = state
        .z
        .iter()
        .map(|z| project(&to_flat(&z.narrow(0, 0, 1).unwrap()).unwrap(), enc.w_img.weight.as_tensor()))
        .collect();
    let expected = graph_oracle(&h_tilde, &z_tilde, &to_flat(enc.b_i2t.as_tensor()).unwrap());
    for (a, b) in to_flat(&z_hat.unwrap()).unwrap().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-9);
    }
    for (a, b) in to_flat(&h_hat).unwrap().iter().zip(&h_tilde) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn text_to_image_matches_scalar_oracle() {
    let enc = encoder(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let state = random_state(&mut rng, 3);
    let z_tilde: Vec<Vec<f64>> = state
        .z
        .iter()
        .map(|z| project(&to_flat(&z.narrow(0, 0, 1).unwrap()).unwrap(), enc.w_img.weight.as_tensor()))
        .collect();
    let b = to_flat(enc.b_i2i.as_tensor()).unwrap();
    for i in 0..3 {
        let (z_hat, _) = enc.text_to_image_aggregate(&state, i).unwrap();
        let expected = graph_oracle(&z_tilde[i], &z_tilde, &b);
        for (a, e) in to_flat(&z_hat).unwrap().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-9);
        }
    }
}

#[test]
fn single_image_text_to_image_is_self() {
    let enc = encoder(6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let state = random_state(&mut rng, 1);
    let (z_hat, _) = enc.text_to_image_aggregate(&state, 0).unwrap();
    let expected = project(&to_flat(&state.z[0].narrow(0, 0, 1).unwrap()).unwrap(), enc.w_img.weight.as_tensor());
    for (a, e) in to_flat(&z_hat).unwrap().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn step_preserves_shapes() {
    let enc = encoder(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for images in 0..3 {
        let state = random_state(&mut rng, images);
        let next = enc.encoder_step(&state).unwrap();
        assert_eq!(next.h.dims(), state.h.dims());
        for (a, b) in next.z.iter().zip(&state.z) {
            assert_eq!(a.dims(), b.dims());
        }
        assert_eq!(next.step, 1);
    }
}

#[test]
fn step_rejects_wrong_width() {
    let enc = encoder(9);
    let state = EncoderState {
        h: matrix(vec![0.0; 6], 2, 3).unwrap(),
        z: vec![],
        step: 0,
    };
    assert!(matches!(enc.encoder_step(&state), Err(Error::ShapeMismatch(_))));
}

/// Single head, width 4, identity projections, no biases, no feed-forward:
/// the attention output is checked against a hand-rolled softmax.
#[test]
fn identity_step_matches_hand_attention() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = ParamBuilder::new(&mut store, &mut rng, 4);
    let step = StackStep::new(&mut b, "s", 4).unwrap();
    let eye = matrix(
        (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        4,
        4,
    )
    .unwrap();
    for lin in [&step.query, &step.key, &step.value, &step.out] {
        lin.weight.set(&eye).unwrap();
    }
    let x = [[0.5, -0.1, 0.3, 0.2], [0.0, 0.4, -0.3, 0.1]];
    let virt = [[0.2, 0.2, -0.5, 0.1]];
    let kv_rows: Vec<[f64; 4]> = virt.iter().chain(x.iter()).copied().collect();
    let xt = matrix(x.concat(), 2, 4).unwrap();
    let kv = matrix(kv_rows.concat(), 3, 4).unwrap();
    let attn = multi_head_attention(&xt, &kv, &kv, 1, None, Site::TextStep).unwrap();
    let got = to_rows(&attn).unwrap();
    for (qi, q) in x.iter().enumerate() {
        let scores: Vec<f64> = kv_rows
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / 2.0)
            .collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        for c in 0..4 {
            let want: f64 = kv_rows.iter().zip(&scores).map(|(k, s)| s.exp() / total * k[c]).sum();
            assert!((got[qi][c] - want).abs() < 1e-9);
        }
    }
    let out = step.forward(&xt, &kv, 1, None, Site::TextStep).unwrap();
    assert_eq!(out.dims(), &[2, 4]);
}

#[test]
fn encode_is_deterministic_and_permutation_invariant() {
    let enc = encoder(10);
    let vocab = Vocabulary::build(["alpha beta gamma delta"], 20);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let imgs: Vec<ImageRecord> = (0..3).map(|i| random_image(&format!("i{i}"), &mut rng)).collect();
    let refs: Vec<&ImageRecord> = imgs.iter().collect();
    let a = enc.encode(&vocab, "alpha beta gamma", &refs).unwrap();
    let b = enc.encode(&vocab, "alpha beta gamma", &refs).unwrap();
    assert_eq!(to_rows(&a.h).unwrap(), to_rows(&b.h).unwrap());
    let rev: Vec<&ImageRecord> = imgs.iter().rev().collect();
    let c = enc.encode(&vocab, "alpha beta gamma", &rev).unwrap();
    for (x, y) in to_flat(&a.text_embedding).unwrap().iter().zip(to_flat(&c.text_embedding).unwrap()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(to_rows(&a.text_embedding).unwrap()[0], to_rows(&a.h).unwrap()[0]);
}

#[test]
fn encode_rejects_empty_text() {
    let enc = encoder(10);
    let vocab = Vocabulary::build(["a"], 20);
    assert!(matches!(enc.encode(&vocab, "  ", &[]), Err(Error::EmptyText)));
}

#[test]
fn text_is_truncated_to_cap() {
    let enc = encoder(10);
    let vocab = Vocabulary::build(["a"], 20);
    let ids = enc.tokenize(&vocab, "a a a a a a a a a a a a").unwrap();
    assert_eq!(ids.len(), 8);
    let unit = enc.encode_ids(&ids, &[]).unwrap();
    assert_eq!(unit.h.dims(), &[8, 8]);
}

#[test]
fn parameter_groups_follow_layout() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = tiny_config();
    {
        let mut b = ParamBuilder::new(&mut store, &mut rng, cfg.hidden);
        b.scope("enc", |b| EncoderParams::new(b, cfg, EncoderFlags::default())).unwrap();
    }
    let counts = EncoderParams::param_counts(&store, "enc.");
    let (l, d, v, w, p, c) = (2, 8, 20, 10, 2, 3);
    assert_eq!(counts.text_stack, 12 * l * d * d + v * d + w * d);
    assert_eq!(counts.image_stack, 12 * l * d * d + p * p * c * d + w * d);
    assert_eq!(counts.graph, 2 * d * d + 4 * d);
}
