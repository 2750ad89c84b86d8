use proptest::prelude::*;
use splitadapt_core::protocol::{decode, encode, split_frames, Frame, Hello, Message, RepSet, RepUpload, Tag};
use splitadapt_core::quant::QuantizedRep;
use splitadapt_core::tensor::Tensor;

fn tag() -> impl Strategy<Value = Tag> {
    (0..Tag::ALL.len()).prop_map(|i| Tag::ALL[i])
}

fn frame() -> impl Strategy<Value = Frame> {
    (tag(), any::<u64>(), any::<u64>(), proptest::collection::vec(any::<u8>(), 0..300))
        .prop_map(|(tag, session, seq, payload)| Frame { tag, session, seq, payload })
}

fn message() -> impl Strategy<Value = Message> {
    let tensor = (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-1e6f64..1e6, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
    });
    prop_oneof![
        (any::<u64>(), any::<u64>(), any::<u16>(), any::<u32>(), any::<u32>()).prop_map(|(a, b, c, d, e)| {
            Message::Hello(Hello { spec_hash: a, seed: b, classes: c, train_samples: d, copies: e })
        }),
        proptest::collection::vec(any::<u8>(), 0..64).prop_map(Message::FrontendPackage),
        (any::<bool>(), any::<u32>(), proptest::collection::vec(any::<i8>(), 2 * 3 * 4), 1e-4f64..10.0).prop_map(
            |(test, index, codes, scale)| {
                let set = if test { RepSet::Test } else { RepSet::Train };
                Message::RepUpload(RepUpload { set, index, rep: QuantizedRep { shape: vec![2, 3, 4], codes, scale } })
            }
        ),
        tensor.clone().prop_flat_map(|logits| {
            proptest::collection::vec(any::<u32>(), logits.shape()[0])
                .prop_map(move |ids| Message::Logits { ids, logits: logits.clone() })
        }),
        (-1e3f64..1e3, tensor.clone()).prop_map(|(loss, grad)| Message::LossGrad { loss, grad }),
        tensor.prop_map(|logits| Message::EvalRequest { set: RepSet::Test, logits }),
        (0.0f64..=1.0).prop_map(|accuracy| Message::EvalResult { set: RepSet::Test, accuracy }),
        Just(Message::Done),
        "[a-z ]{0,40}".prop_map(Message::Error),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn frames_round_trip(f in frame()) {
        prop_assert_eq!(decode(&encode(&f)).unwrap(), f);
    }

    #[test]
    fn concatenated_frames_split_back(fs in proptest::collection::vec(frame(), 0..6)) {
        let bytes: Vec<u8> = fs.iter().flat_map(encode).collect();
        prop_assert_eq!(split_frames(&bytes).unwrap(), fs);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200), t in tag()) {
        let _ = decode(&bytes);
        let _ = split_frames(&bytes);
        let _ = Message::parse(t, &bytes);
    }

    #[test]
    fn single_byte_damage_is_detected(f in frame(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut bytes = encode(&f);
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        // the checksum covers the payload only, so tag, session and seq edits can
        // still decode; the endpoint and message parser catch those
        match decode(&bytes) {
            Err(_) => {}
            Ok(g) => prop_assert!((6..23).contains(&i) && g.payload == f.payload),
        }
    }

    #[test]
    fn messages_round_trip(m in message()) {
        let back = Message::parse(m.tag(), &m.payload()).unwrap();
        prop_assert_eq!(back, m);
    }
}
