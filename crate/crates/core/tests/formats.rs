//! Bitwise durability of the on-disk formats and rejection of corrupted files.

use std::path::PathBuf;

use proptest::prelude::*;
use rwfm_core::dataset::Standardizer;
use rwfm_core::episode::{DemoKind, EpisodeRecord, Generator, Outcome, Provenance, StepRecord, TaskKind};
use rwfm_core::policy::{FlowPolicy, PolicyDims, TactileDims};
use rwfm_core::reward::RewardAnnotation;
use rwfm_core::sim::{scripted_demo, SimConfig};
use rwfm_core::store::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointMeta};
use rwfm_core::store::episode::{decode_episode, encode_episode};
use rwfm_core::store::text;
use rwfm_core::tactile::RawTactileFrame;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/episode_v1_0.bin")
}

fn fixture_source() -> EpisodeRecord {
    scripted_demo(DemoKind::OverForce, TaskKind::Jar, &SimConfig::default(), 42).unwrap()
}

/// Regenerates the committed 1.0 fixture.
#[test]
#[ignore]
fn write_v1_0_fixture() {
    let bytes = rwfm_core::store::episode::encode_episode_v1_0(&fixture_source()).unwrap();
    std::fs::write(fixture_path(), bytes).unwrap();
}

#[test]
fn committed_v1_0_file_reads_with_defaulted_provenance() {
    let bytes = std::fs::read(fixture_path()).unwrap();
    assert_eq!(&bytes[4..8], &[1, 0, 0, 0], "fixture is a 1.0 file");
    let ep = decode_episode(&bytes).unwrap();
    assert_eq!(ep.provenance, Provenance::unknown());
    let src = fixture_source();
    assert_eq!(ep.steps, src.steps);
    assert_eq!(ep.cond, src.cond);
    assert_eq!(ep.outcome, src.outcome);
}

fn episode_strategy() -> impl Strategy<Value = EpisodeRecord> {
    (1usize..4, 1usize..4, 1usize..6, 1usize..5, 1usize..5, any::<u64>()).prop_flat_map(
        |(rows, cols, steps, pd, ad, seed)| {
            let taxels = rows * cols;
            let step = (
                prop::collection::vec(any::<f64>(), pd),
                prop::collection::vec(any::<f32>(), taxels),
                prop::collection::vec(any::<f32>(), taxels),
                any::<bool>(),
                prop::collection::vec(any::<f64>(), ad),
                prop::array::uniform3(any::<f64>()),
                any::<bool>(),
            )
                .prop_map(|(proprio, left, right, gripper_closed, action, object_pos, attached)| {
                    StepRecord {
                        proprio,
                        tactile: RawTactileFrame {
                            left,
                            right,
                            gripper_closed,
                        },
                        action,
                        object_pos,
                        attached,
                    }
                });
            (
                prop::collection::vec(step, steps),
                prop::collection::vec(any::<f64>(), 0..4),
                "[a-z0-9-]{1,12}",
                0usize..3,
                any::<[bool; 3]>(),
            )
                .prop_map(move |(steps, cond, id, task, flags)| EpisodeRecord {
                    id,
                    task: TaskKind::ALL[task],
                    group: TaskKind::ALL[task].name().to_string(),
                    cond,
                    grid_rows: rows,
                    grid_cols: cols,
                    steps,
                    outcome: Outcome {
                        success: flags[0],
                        drop: flags[1],
                        damage: flags[2],
                    },
                    provenance: Provenance {
                        generator: Generator::Policy(format!("p{}", seed % 7)),
                        seed,
                    },
                })
        },
    )
}

fn small_checkpoint(seed: u64) -> Checkpoint {
    let dims = PolicyDims {
        horizon: 2,
        action_dim: 2,
        cond_dim: 1,
        proprio_dim: 2,
        latent_dim: 2,
        hidden: 3,
        tactile: Some(TactileDims {
            input: 2,
            hidden: 2,
            embed: 2,
        }),
    };
    Checkpoint {
        meta: CheckpointMeta {
            label: "x".into(),
            step: seed,
            dims,
            scaler: Standardizer::identity(2, 2, 1),
            norm_scale: 1.0 / 3.0,
            dataset_hash: "d".into(),
            teacher_hash: Some("t".into()),
        },
        policy: FlowPolicy::new(dims, seed),
    }
}

fn annotation(values: Vec<f64>) -> RewardAnnotation {
    RewardAnnotation {
        episode_id: "e".into(),
        calibration_hash: "c".into(),
        holding: values.iter().map(|v| *v > 0.0).collect(),
        slips: values.iter().map(|v| *v < -1.0).collect(),
        exceedance: values.iter().map(|v| v.abs()).collect(),
        risk: values.iter().sum(),
        r_step: values.first().copied().unwrap_or(0.0),
        r_episode: -0.1,
        rewards: values,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_round_trip_bitwise(ep in episode_strategy()) {
        let bytes = encode_episode(&ep).unwrap();
        let back = decode_episode(&bytes).unwrap();
        prop_assert_eq!(encode_episode(&back).unwrap(), bytes);
    }

    /// A single flipped bit is either rejected or (in the minor-version
    /// field) decodes to the identical record.
    #[test]
    fn flipped_episode_bits_never_decode_silently(ep in episode_strategy(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let bytes = encode_episode(&ep).unwrap();
        let mut bad = bytes.clone();
        let i = at.index(bad.len());
        bad[i] ^= 1 << bit;
        if let Ok(back) = decode_episode(&bad) {
            prop_assert!((6..8).contains(&i), "flip at {} accepted", i);
            prop_assert_eq!(encode_episode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoints_round_trip_and_reject_flips(seed in any::<u64>(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let ck = small_checkpoint(seed);
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes.clone());
        let mut bad = bytes.clone();
        let i = at.index(bad.len());
        bad[i] ^= 1 << bit;
        if let Ok(back) = decode_checkpoint(&bad) {
            prop_assert!((6..8).contains(&i), "flip at {} accepted", i);
            prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn annotations_round_trip_and_reject_flips(
        values in prop::collection::vec(-1e6f64..1e6, 0..30),
        at in any::<prop::sample::Index>(),
        bit in 0u8..7,
    ) {
        let ann = annotation(values);
        let doc = text::encode(text::ANNOTATION, 1, 0, &ann).unwrap();
        let (_, back): (u16, RewardAnnotation) = text::decode(&doc, text::ANNOTATION, 1).unwrap();
        prop_assert_eq!(text::encode(text::ANNOTATION, 1, 0, &back).unwrap(), doc.clone());

        // ASCII-preserving flip (bit 7 untouched) so the text stays UTF-8.
        let mut bad = doc.clone().into_bytes();
        let i = at.index(bad.len());
        bad[i] ^= 1 << bit;
        let bad = String::from_utf8(bad).unwrap();
        if let Ok((_, back)) = text::decode::<RewardAnnotation>(&bad, text::ANNOTATION, 1) {
            prop_assert_eq!(back, ann);
            prop_assert!(i < doc.find('\n').unwrap(), "flip at {} accepted", i);
        }
    }
}
