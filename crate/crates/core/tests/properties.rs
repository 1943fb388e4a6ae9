use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use movelab::attention::{retrieve_memory, scaled_gate, ValueBank};
use movelab::model::{bits_per_byte, Decoder, ModelConfig, ModelParams, Variant};
use movelab::numerics::{Tape, Tensor};
use movelab::{ModelParams64, Tensor64};

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

fn small_model(v: Variant, seed: u64) -> ModelParams64 {
    let mut c = ModelConfig::new(v, 2, 16, 2, 17, 12);
    c.latent_dim = Some(4);
    c.seed = seed;
    let mut p = ModelParams::init(&c).unwrap();
    p.randomize_memory(0.5, seed + 1);
    p
}

proptest! {
    #[test]
    fn gates_are_bounded(zs in prop::collection::vec(-30.0f64..30.0, 1..40), wide in prop::collection::vec(-1e6f64..1e6, 1..8)) {
        let g = scaled_gate(&Tensor::new(vec![zs.len()], zs.clone()).unwrap());
        for (&z, &v) in zs.iter().zip(g.data()) {
            prop_assert!(v > 0.0 && v < 2.0);
            prop_assert!((v - 2.0 / (1.0 + (-z).exp())).abs() <= 1e-14);
        }
        // Far outside, the float result saturates but never leaves [0, 2].
        let g = scaled_gate(&Tensor::new(vec![wide.len()], wide).unwrap());
        prop_assert!(g.data().iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    #[test]
    fn retrieval_copies_bank_rows(seed in 0u64..500, tokens in prop::collection::vec(0usize..9, 1..10)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = ValueBank::<f64>::random(9, 3, 8, 1.0, &mut rng);
        let m = retrieve_memory(&bank, &tokens, 2).unwrap();
        prop_assert_eq!(m.values().shape(), &[tokens.len(), 3, 2, 4]);
        for (t, &tok) in tokens.iter().enumerate() {
            prop_assert_eq!(&m.values().data()[t * 24..(t + 1) * 24], bank.token_row(tok).unwrap());
        }
    }

    #[test]
    fn bpb_identity(nats in 0.0f64..1e6, tokens in 1usize..10_000, bytes in 1usize..10_000) {
        let r = bits_per_byte("x", nats, tokens, bytes).unwrap();
        prop_assert!((r.bpb - nats / (std::f64::consts::LN_2 * bytes as f64)).abs() <= 1e-12 * r.bpb.max(1.0));
    }

    #[test]
    fn slot_counts_and_bank_sizes(layers in 1usize..9, scale in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let mut c = ModelConfig::new(Variant::Move, layers, 16, 2, 11, 8);
        c.scale = scale;
        if (scale * layers) % 2 != 0 {
            prop_assert!(c.validate().is_err());
        } else {
            prop_assert_eq!(c.slots(), scale * layers / 2);
            let audit = ModelParams64::init(&c).unwrap().audit();
            prop_assert_eq!(audit.shared_bank, 11 * c.slots() * 16);
            prop_assert_eq!(audit.layer_banks, 0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zeroed_memory_is_the_baseline(v in variant(), tokens in prop::collection::vec(0usize..17, 1..12)) {
        let mut c = ModelConfig::new(v, 2, 16, 2, 17, 12);
        c.latent_dim = Some(4);
        let with = ModelParams64::init(&c).unwrap().forward_logits(&tokens).unwrap();
        let without = ModelParams64::init(&c.memory_free()).unwrap().forward_logits(&tokens).unwrap();
        prop_assert_eq!(with, without);
    }

    #[test]
    fn outputs_are_causal(v in variant(), seed in 0u64..100, tokens in prop::collection::vec(0usize..17, 2..12), j in 0usize..12, tok in 0usize..17) {
        let p = small_model(v, seed);
        let j = j % tokens.len();
        let mut other = tokens.clone();
        other[j] = tok;
        let a = p.forward_logits(&tokens).unwrap();
        let b = p.forward_logits(&other).unwrap();
        for t in 0..j {
            for (x, y) in a.row(t).iter().zip(b.row(t)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cached_decode_matches_forward(v in variant(), seed in 0u64..100, tokens in prop::collection::vec(0usize..17, 1..12)) {
        let p = small_model(v, seed);
        let full = p.forward_logits(&tokens).unwrap();
        let mut dec = Decoder::new(&p).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            let (logits, _) = dec.step(tok).unwrap();
            for (x, y) in logits.iter().zip(full.row(t)) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
        prop_assert_eq!(dec.cache().len(), tokens.len());
    }

    #[test]
    fn tape_replay_is_bit_identical(v in variant(), seed in 0u64..100, tokens in prop::collection::vec(0usize..17, 2..10)) {
        let p = small_model(v, seed);
        let run = || {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, true);
            let n = tokens.len() - 1;
            let loss = movelab::model::sequence_loss(
                &mut tape, &p, &bound, &tokens[..n], &tokens[1..], None, movelab::attention::SeqShape::single(n),
            ).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g: Vec<Tensor64> = bound.leaves.iter().map(|&l| grads.get(l).cloned().unwrap()).collect();
            (tape.value(loss).item(), g)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(g1, g2);
    }
}
