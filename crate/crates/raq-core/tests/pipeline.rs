//! Public-API walkthrough: a minimal backbone trains for a handful of
//! steps, the codebook adapts in all three directions, and every artifact
//! survives a serialization round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use raq_core::cluster::{dkm_reduce, ikm_increase, DkmOptions, MmdConfig};
use raq_core::optim::AdamW;
use raq_core::seq2seq::{load_adapter, save_adapter, RateAdapter};
use raq_core::tape::{Tape, Var};
use raq_core::tensor::{shared, SharedTensor, Tensor};
use raq_core::training::{train_step, TrainConfig, VqBackbone};
use raq_core::vq::{load_codebook, quantize, save_codebook, Codebook, UpdateMode};

/// Per-pixel linear lift into d dimensions and back, enough to drive the
/// training loop without a real convolutional stack.
struct RowBackbone {
    w_enc: SharedTensor,
    w_dec: SharedTensor,
    side: usize,
}

impl RowBackbone {
    fn new(side: usize, dim: usize, rng: &mut ChaCha8Rng) -> RowBackbone {
        RowBackbone {
            w_enc: shared(Tensor::uniform(vec![1, dim], 1.0, rng).requires_grad(true)),
            w_dec: shared(Tensor::uniform(vec![dim, 1], 1.0, rng).requires_grad(true)),
            side,
        }
    }
}

impl VqBackbone for RowBackbone {
    fn encode(&self, tape: &mut Tape, batch: &Tensor) -> Var {
        let img = tape.constant_from(batch.shape().to_vec(), batch.data().to_vec());
        let rows = tape.nchw_to_rows(img);
        let w = tape.param(&self.w_enc);
        tape.matmul(rows, w)
    }

    fn decode(&self, tape: &mut Tape, rows: Var, batch: usize) -> Var {
        let w = tape.param(&self.w_dec);
        let flat = tape.matmul(rows, w);
        let img = tape.rows_to_nchw(flat, batch, 1, self.side, self.side);
        tape.sigmoid(img)
    }

    fn params(&self) -> Vec<SharedTensor> {
        vec![self.w_enc.clone(), self.w_dec.clone()]
    }
}

#[test]
fn short_training_run_and_adaptation_round_trip() {
    let side = 4usize;
    let (k, d) = (8usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    let backbone = RowBackbone::new(side, d, &mut rng);
    let mut codebook = Codebook::random(k, d, UpdateMode::Ema, &mut rng).expect("codebook");
    let adapter = RateAdapter::new(d, 2, &mut rng).expect("adapter");

    let mut params = backbone.params();
    params.push(codebook.vectors().clone());
    params.extend(adapter.params());
    let mut opt = AdamW::new(params, 1e-3, 0.01);

    let cfg = TrainConfig {
        k_min: 4,
        k_max: 16,
        ..TrainConfig::default()
    };
    let mut last = f64::INFINITY;
    for step in 0..8u64 {
        let batch = Tensor::new(
            vec![6, 1, side, side],
            (0..6 * side * side)
                .map(|_| rng.gen_range(0.0f32..1.0))
                .collect::<Vec<_>>(),
        );
        let metrics = train_step(&backbone, &mut codebook, &adapter, &mut opt, &batch, &cfg, &mut rng)
            .expect("train step");
        assert!(metrics.vq.total.is_finite(), "step {step}: non-finite base loss");
        assert!(metrics.raq.total.is_finite(), "step {step}: non-finite adapted loss");
        assert!(metrics.k_tilde >= cfg.k_min && metrics.k_tilde <= cfg.k_max);
        last = metrics.vq.total;
    }
    assert!(last.is_finite());

    // Adapt in all three directions off the trained book.
    let grown = ikm_increase(&codebook, 2 * k, &MmdConfig { max_iters: 50, ..MmdConfig::default() }, 0.01, &mut rng)
        .expect("growth")
        .codebook;
    assert_eq!(grown.k(), 2 * k);
    let reduced = dkm_reduce(&codebook, k / 2, &DkmOptions::default(), &mut rng).expect("reduction");
    assert_eq!(reduced.k(), k / 2);
    let resized = adapter
        .generate_rows(&Tensor::new(vec![k, d], codebook.to_vec()), k + 3, true)
        .expect("generated rows");
    assert_eq!(resized.shape(), &[k + 3, d]);

    // Artifacts round-trip bitwise through their wire formats.
    let dir = tempfile::tempdir().expect("tempdir");
    let cb_path = dir.path().join("book.rqcb");
    save_codebook(&codebook, &cb_path).expect("save codebook");
    let loaded = load_codebook(&cb_path).expect("load codebook");
    assert_eq!(loaded.to_vec(), codebook.to_vec());
    assert_eq!(loaded.mode(), UpdateMode::Ema);

    let ad_path = dir.path().join("adapter.rqs2");
    save_adapter(&adapter, &ad_path).expect("save adapter");
    let restored = load_adapter(&ad_path).expect("load adapter");
    let again = restored
        .generate_rows(&Tensor::new(vec![k, d], codebook.to_vec()), k + 3, true)
        .expect("generated rows");
    assert_eq!(again.data(), resized.data(), "adapter round trip must be exact");

    // The trained quantizer still selects valid rows for fresh points.
    let probe = Tensor::new(
        vec![5, d],
        (0..5 * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>(),
    );
    let q = quantize(&probe, &codebook).expect("quantize");
    assert!(q.indices.iter().all(|&i| (i as usize) < k));
    assert_eq!(q.usage_counts.iter().sum::<u64>(), 5);
}
