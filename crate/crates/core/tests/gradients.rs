mod common;

use maria::data::{synthesize_dataset, SynthSpec};
use maria::model::{EncoderConfig, FusionMode, MariaModel, ModelSpec};

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..3 {
        for case in common::op_cases(seed) {
            let err = common::op_grad_error(&case);
            assert!(err < 1e-4, "{} (seed {seed}): relative error {err:e}", case.name);
        }
    }
}

#[test]
fn model_parameters_match_finite_differences() {
    let ds = synthesize_dataset(&SynthSpec {
        n_samples: 50,
        modality_widths: vec![3, 2],
        missing_rate: 0.2,
        ..SynthSpec::default()
    })
    .unwrap();
    let idx: Vec<usize> = (0..12).collect();
    let samples = ds.samples(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    let enc = EncoderConfig {
        d_e: 8,
        heads: 2,
        layers: 1,
        ff_width: 12,
        shared_layers: 1,
    };
    for fusion in FusionMode::ALL {
        let model = MariaModel::new(ModelSpec::for_dataset(&ds, enc.clone(), fusion), 3).unwrap();
        for (name, idx, err) in common::model_grad_errors(&model, &samples, &labels, 20, 1) {
            assert!(err < 1e-3, "{fusion}: {name}[{idx}] relative error {err:e}");
        }
    }
}
