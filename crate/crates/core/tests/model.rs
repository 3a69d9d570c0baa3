use dgsa::data::{Dataset, Inputs};
use dgsa::model::{build_model, ModelConfig, Variant};
use dgsa::rng::seeded;
use dgsa::{Tape, Tensor};
use rand::Rng as _;

fn images(b: usize, seed: u64) -> Dataset {
    let mut r = seeded(seed, "test-images", 0);
    let px = (0..b * 64).map(|_| r.random::<f64>()).collect();
    Dataset::new(Inputs::Images(Tensor::new(vec![b, 1, 8, 8], px).unwrap()), vec![0; b], 4).unwrap()
}

#[test]
fn vision_head_reads_only_the_class_token() {
    for variant in [Variant::Dgsa, Variant::Diff, Variant::Vanilla] {
        let model = build_model(&ModelConfig::vision_tiny(variant), &mut seeded(1, "init", 0)).unwrap();
        let batch = images(3, 2);
        let logits = model.logits(&batch).unwrap();
        let mut r = seeded(3, "scramble", 0);
        for i in 0..batch.len() {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let (states, _) = model.encode_sample(&mut tape, &vars, &batch, i, None, false).unwrap();
            let mut s = tape.value(states).clone();
            let d = s.cols();
            for v in &mut s.data_mut()[d..] {
                *v = r.random_range(-5.0..5.0);
            }
            let scrambled = tape.constant(s);
            let z = model.classify(&mut tape, &vars, scrambled).unwrap();
            assert_eq!(tape.value(z).row(0), logits.row(i), "{variant:?} sample {i}");
        }
    }
}

#[test]
fn eval_is_pure_and_train_mode_dropout_is_seeded() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..ModelConfig::vision_tiny(Variant::Dgsa)
    };
    let model = build_model(&cfg, &mut seeded(0, "init", 0)).unwrap();
    let before: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let batch = images(4, 5);
    let a = model.logits(&batch).unwrap();
    let b = model.logits(&batch).unwrap();
    assert_eq!(a, b);
    let after: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    assert_eq!(before, after);

    let train_mode = |seed| {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let mut r = seeded(seed, "dropout", 0);
        let f = model.forward(&mut tape, &vars, &batch, Some(&mut r), false).unwrap();
        tape.value(f.logits).clone()
    };
    assert_eq!(train_mode(7), train_mode(7));
    assert_ne!(train_mode(7), a);
}

#[test]
fn captured_maps_cover_every_layer_and_position() {
    let model = build_model(&ModelConfig::vision_tiny(Variant::Dgsa), &mut seeded(0, "init", 0)).unwrap();
    let maps = model.attention_maps(&images(2, 9)).unwrap();
    assert_eq!(maps.len(), 2);
    for sample in &maps {
        assert_eq!(sample.len(), model.config().depth);
        for m in sample {
            assert_eq!(m.fused.shape(), &[4, 17, 17]);
            assert_eq!(m.gate.as_ref().unwrap().shape(), &[17, 4]);
        }
    }
}
