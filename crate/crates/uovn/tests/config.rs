use std::path::{Path, PathBuf};

use proptest::prelude::*;
use uovn::config::{DataConfig, DomainChoice, Generated, RunConfig};
use uovn_core::config::{LossWeights, ModelConfig};
use uovn_core::eval::Task;
use uovn_core::synth::DomainSpec;
use uovn_core::train::OptimConfig;

fn run_config() -> impl Strategy<Value = RunConfig> {
    (
        (1usize..5, 1usize..4, 1usize..40, 0usize..4, 0usize..3, any::<u64>(), any::<bool>()),
        (0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0),
        (1e-4f64..1.0, 0.0f64..0.99, 0.1f64..10.0, 0usize..1000, any::<u64>()),
        (prop::collection::vec("[a-z]{1,8}", 0..3), prop::collection::vec((0usize..4, 1usize..20, any::<u64>()), 1..3)),
        (any::<u64>(), 1usize..500, prop::sample::subsequence(Task::ALL.to_vec(), 0..=4)),
    )
        .prop_map(|(m, l, o, d, rest)| {
            let heads = [1, 2, 4, 8][m.0 - 1];
            RunConfig {
                model: ModelConfig {
                    width: heads * 4 * m.1,
                    heads,
                    points: m.1,
                    queries: m.2,
                    pixel_layers: m.3,
                    decoder_rounds: m.4,
                    vocab_seed: m.5,
                    aux_loss: m.6,
                    ..ModelConfig::tiny()
                },
                loss: LossWeights { seg: l.0, det: l.1, cls: l.2, adapt: l.3 },
                optim: OptimConfig { lr: o.0, momentum: o.1, clip: o.2, steps: o.3, seed: o.4 },
                data: DataConfig {
                    datasets: d.0.into_iter().map(PathBuf::from).collect(),
                    generate: d
                        .1
                        .into_iter()
                        .map(|(k, samples, seed)| Generated {
                            domain: match k {
                                0 => DomainChoice::Stock("d1".into()),
                                1 => DomainChoice::Stock("d2".into()),
                                2 => DomainChoice::Stock("d3".into()),
                                _ => DomainChoice::Custom(DomainSpec { id: 9, ..DomainSpec::d2() }),
                            },
                            samples,
                            seed,
                        })
                        .collect(),
                },
                init_seed: rest.0,
                checkpoint_every: rest.1,
                eval_tasks: rest.2,
            }
        })
}

proptest! {
    #[test]
    fn parse_serialize_parse_is_identity(c in run_config()) {
        let path = Path::new("run.json");
        let once = RunConfig::from_json(path, &c.to_json()).unwrap();
        prop_assert_eq!(&once, &c);
        let twice = RunConfig::from_json(path, &once.to_json()).unwrap();
        prop_assert_eq!(twice.hash(), c.hash());
    }
}

#[test]
fn nested_unknown_keys_are_rejected_with_their_path() {
    let text = r#"{"data": {"generate": [{"domain": "d1", "samples": 2, "seed": 0, "colour": 1}]}}"#;
    let err = RunConfig::from_json(Path::new("run.json"), text).unwrap_err().to_string();
    assert!(err.contains("colour"), "{err}");
}
