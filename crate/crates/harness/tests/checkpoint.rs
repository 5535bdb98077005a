use mpq_core::model::{Activation, LayerSpec, Network};
use mpq_core::quant::{max_code, quantize_model};
use mpq_core::sensitivity::PrecisionAssignment;
use mpq_core::Rng;
use mpq_harness::checkpoint::{Checkpoint, CheckpointError, LayerRecord, HEADER_BYTES};
use mpq_harness::model_size_bytes;
use mpq_harness::size::SizeReport;
use proptest::prelude::*;

fn record() -> impl Strategy<Value = LayerRecord> {
    (
        1u32..6,
        1u32..7,
        prop::sample::select(vec![1u8, 2, 4, 8, 16]),
        1e-6f64..10.0,
    )
        .prop_flat_map(|(out_dim, in_dim, bits, alpha)| {
            let r_max = out_dim.min(in_dim);
            (1..=r_max).prop_flat_map(move |r| {
                let n = (r * (out_dim + in_dim)) as usize;
                let m = max_code(u32::from(bits));
                let codes = if bits == 1 {
                    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1 } else { -1 }), n).boxed()
                } else {
                    prop::collection::vec(-m..=m, n).boxed()
                };
                codes.prop_map(move |codes| LayerRecord {
                    out_dim,
                    in_dim,
                    bottleneck: r,
                    bits,
                    alpha,
                    codes,
                })
            })
        })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        prop::collection::vec(record(), 0..5),
        prop::option::of(prop::collection::vec(prop::num::f64::ANY, 0..20)),
    )
        .prop_map(|(layers, shadow)| Checkpoint { layers, shadow })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip_is_bit_exact(ckpt in checkpoint()) {
        let bytes = ckpt.encode().unwrap();
        prop_assert_eq!(bytes.len(), ckpt.encoded_len());
        let back = Checkpoint::decode(&bytes).unwrap();
        // compare bit patterns so NaN shadow weights count as equal
        prop_assert_eq!(&back.layers, &ckpt.layers);
        let bits = |c: &Checkpoint| c.shadow.as_ref().map(|w| w.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(bits(&back), bits(&ckpt));
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn every_proper_prefix_is_truncated(ckpt in checkpoint(), cut in 0.0f64..1.0) {
        let bytes = ckpt.encode().unwrap();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assume!(n < bytes.len());
        // dropping exactly the optional trailer leaves a valid shadow-less file
        let codes_end = Checkpoint { layers: ckpt.layers.clone(), shadow: None }.encoded_len();
        prop_assume!(ckpt.shadow.is_none() || n != codes_end);
        let is_truncated = matches!(Checkpoint::decode(&bytes[..n]), Err(CheckpointError::Truncated { .. }));
        prop_assert!(is_truncated);
    }

    #[test]
    fn size_report_matches_file(ckpt in checkpoint()) {
        let plain = Checkpoint { shadow: None, ..ckpt };
        let report = SizeReport::from_checkpoint(&plain).unwrap();
        prop_assert_eq!(report.total_bytes, plain.encode().unwrap().len() as u64);
        prop_assert_eq!(model_size_bytes(&plain), report.total_bytes);
    }
}

fn network(seed: u64) -> Network {
    let specs = [
        LayerSpec {
            out_dim: 6,
            in_dim: 3,
            bottleneck: 2,
            activation: Activation::Relu,
            context: vec![-1, 0, 1],
        },
        LayerSpec {
            out_dim: 4,
            in_dim: 6,
            bottleneck: 3,
            activation: Activation::Identity,
            context: vec![],
        },
    ];
    Network::init(&specs, &mut Rng::new(seed)).unwrap()
}

#[test]
fn model_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    for (i, bits) in [[1, 16], [2, 8], [4, 4], [8, 2], [16, 1]].iter().enumerate() {
        let net = network(i as u64);
        let a = PrecisionAssignment::new(bits.to_vec(), net.layer_param_counts()).unwrap();
        let q = quantize_model(&net, &a).unwrap();
        let ckpt = Checkpoint::from_model(&q).with_shadow(&net);
        let path = dir.path().join(format!("m{i}.mpq"));
        let written = ckpt.write(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, written);
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.to_model(&net).unwrap(), q);
        assert_eq!(back.shadow_network(&net).unwrap().unwrap(), net);
        // the spliced layer stores its spliced input width
        assert_eq!(back.layers[0].in_dim, 9);
    }
}

#[test]
fn template_mismatch_rejected() {
    let net = network(0);
    let a = PrecisionAssignment::uniform(4, net.layer_param_counts()).unwrap();
    let ckpt = Checkpoint::from_model(&quantize_model(&net, &a).unwrap());
    let other = Network::init(&[net.specs()[1].clone()], &mut Rng::new(0)).unwrap();
    assert!(ckpt.to_model(&other).is_err());
}

#[test]
fn header_only_file() {
    let ckpt = Checkpoint {
        layers: vec![],
        shadow: None,
    };
    assert_eq!(ckpt.encode().unwrap().len(), HEADER_BYTES);
}
