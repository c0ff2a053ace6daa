use hierplace::engine::{finite_difference_check, GradCheckOptions};
use hierplace::hier_embedding::Method;
use hierplace::model::{ModelConfig, ModelGradFragment};

fn small(method: Method, layers: usize) -> ModelConfig {
    ModelConfig {
        method,
        d: 16,
        readout: 16,
        hidden: 6,
        layers,
        ..ModelConfig::default()
    }
}

#[test]
fn full_model_matches_central_differences() {
    for method in Method::ALL {
        for seed in 0..20 {
            let mut frag = ModelGradFragment::random(&small(method, 2), 30, 3, 3, seed).unwrap();
            let report = finite_difference_check(
                &mut frag,
                GradCheckOptions {
                    seed,
                    ..GradCheckOptions::default()
                },
            );
            assert!(report.checked() > 1000);
            assert!(
                report.max_rel_err() < 1e-4,
                "{method} seed {seed}: {report:#?}"
            );
        }
    }
}

#[test]
fn longer_sequences_and_single_layer() {
    for seed in 0..5 {
        let mut frag =
            ModelGradFragment::random(&small(Method::Hier, 1), 20, 4, 9, 100 + seed).unwrap();
        let report = finite_difference_check(&mut frag, GradCheckOptions::default());
        assert!(report.max_rel_err() < 1e-4, "seed {seed}: {report:#?}");
    }
}

#[test]
fn default_width_sampled_entries() {
    let mut frag = ModelGradFragment::random(&ModelConfig::default(), 40, 2, 3, 7).unwrap();
    let report = finite_difference_check(
        &mut frag,
        GradCheckOptions {
            max_entries: Some(40),
            ..GradCheckOptions::default()
        },
    );
    assert!(report.max_rel_err() < 1e-4, "{report:#?}");
}
