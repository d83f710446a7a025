//! The cached-activation evaluator agrees with apply + full forward pass.

use std::sync::OnceLock;

use proptest::prelude::*;
use signlesion::bench::{gen_dataset, split, DeskArch, SyntheticDatasetSpec};
use signlesion::bitkit::FloatWord;
use signlesion::nnengine::{accuracy, Dataset, FlipEvaluator, Model};
use signlesion::tensorstore::ParamCoord;

fn fixture() -> &'static (Model, Dataset) {
    static F: OnceLock<(Model, Dataset)> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticDatasetSpec {
            samples_per_class: 40,
            ..SyntheticDatasetSpec::default()
        };
        let test = split(&gen_dataset(&spec).unwrap()).1;
        let (m, a) = DeskArch::default().build(spec.image_size, spec.classes, 9).unwrap();
        (Model::new(m, a).unwrap(), test)
    })
}

fn full_accuracy(model: &Model, data: &Dataset, flips: &[(ParamCoord, u32)]) -> f64 {
    let mut a = model.params.clone();
    for (c, bit) in flips {
        let w = a.word(&c.tensor, c.flat_index).unwrap();
        a.set_word(&c.tensor, c.flat_index, FloatWord(w.0 ^ (1 << bit))).unwrap();
    }
    accuracy(&model.with_params(a).unwrap(), data).unwrap()
}

fn flip_strategy() -> impl Strategy<Value = Vec<(usize, usize, u32)>> {
    prop::collection::vec((0usize..8, any::<usize>(), 0u32..32), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn incremental_matches_full_pass(raw in flip_strategy()) {
        let (model, data) = fixture();
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let mut flips: Vec<(ParamCoord, u32)> = Vec::new();
        for (t, i, bit) in raw {
            let name = &names[t % names.len()];
            let n = model.params.get(name).unwrap().numel();
            let c = ParamCoord { tensor: name.clone(), flat_index: i % n };
            if !flips.iter().any(|(f, _)| *f == c) {
                flips.push((c, bit));
            }
        }
        let eval = FlipEvaluator::new(model.network(), data).unwrap();
        prop_assert_eq!(eval.accuracy_with_flips(&flips).unwrap(), full_accuracy(model, data, &flips));
    }
}

#[test]
fn baseline_and_empty_flip_set() {
    let (model, data) = fixture();
    let eval = FlipEvaluator::new(model.network(), data).unwrap();
    let base = accuracy(model, data).unwrap();
    assert_eq!(eval.baseline_accuracy(), base);
    assert_eq!(eval.accuracy_with_flips(&[]).unwrap(), base);
}

#[test]
fn unknown_tensor_is_rejected() {
    let (model, data) = fixture();
    let eval = FlipEvaluator::new(model.network(), data).unwrap();
    let bad = ParamCoord {
        tensor: "nope".into(),
        flat_index: 0,
    };
    assert!(eval.accuracy_with_flips(&[(bad, 31)]).is_err());
}
