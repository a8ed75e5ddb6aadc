//! Loss invariances, determinism and checkpoint round trips.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg_grad::ops::softmax_multinomial_loss;
use volseg_grad::{checkpoint, Graph, LayerKind, ParamStore, Real, Tensor};

fn small_graph() -> Graph {
    let mut g = Graph::new();
    let x = g.add("x", LayerKind::Input { channels: 2 }, &[]);
    let c = g.add(
        "c",
        LayerKind::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1, bias: true },
        &[x],
    );
    g.add(
        "u",
        LayerKind::TransposedConv2d { in_channels: 3, out_channels: 2, kernel: 4, stride: 2, padding: 0 },
        &[c],
    );
    g
}

proptest! {
    #[test]
    fn softmax_loss_is_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<Real> = (0..2 * 3 * 3 * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<Real> = (0..2 * 3 * 2).map(|_| rng.gen_range(0..3) as Real).collect();
        let labels = Tensor::new(&[2, 3, 2], labels).unwrap();
        // Shift every class score of one pixel by the same amount.
        let mut shifted = scores.clone();
        for b in 0..2 {
            for k in 0..3 {
                shifted[(b * 3 + k) * 6 + 4] += shift as Real;
            }
        }
        let (a, _) = softmax_multinomial_loss(&Tensor::new(&[2, 3, 3, 2], scores).unwrap(), &labels).unwrap();
        let (b, _) = softmax_multinomial_loss(&Tensor::new(&[2, 3, 3, 2], shifted).unwrap(), &labels).unwrap();
        prop_assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn seeded_init_is_reproducible() {
    let g = small_graph();
    assert_eq!(ParamStore::init(&g, 9), ParamStore::init(&g, 9));
    assert_ne!(ParamStore::init(&g, 9), ParamStore::init(&g, 10));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let g = small_graph();
    let params = ParamStore::init(&g, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, params.iter()).unwrap();
    let mut restored = ParamStore::zeros(&g);
    checkpoint::load_into(&path, &mut restored).unwrap();
    assert_eq!(params, restored);
    let manifest = std::fs::read_to_string(&path).unwrap();
    assert!(manifest.contains("c.weight 3 2 3 3"));
    let payload = std::fs::metadata(checkpoint::payload_path(&path)).unwrap().len();
    assert_eq!(payload as usize, params.numel() * 8);
}

#[test]
fn checkpoint_rejects_other_architecture() {
    let g = small_graph();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, ParamStore::init(&g, 1).iter()).unwrap();
    let mut other = Graph::new();
    let x = other.add("x", LayerKind::Input { channels: 2 }, &[]);
    other.add(
        "c",
        LayerKind::Conv2d { in_channels: 2, out_channels: 4, kernel: 3, stride: 1, padding: 1, bias: true },
        &[x],
    );
    let mut p = ParamStore::zeros(&other);
    assert!(checkpoint::load_into(&path, &mut p).is_err());
}

#[test]
fn truncated_payload_is_rejected() {
    let g = small_graph();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, ParamStore::init(&g, 1).iter()).unwrap();
    let bin = checkpoint::payload_path(&path);
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(checkpoint::load(&path).is_err());
}
