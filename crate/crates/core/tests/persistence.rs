use mmrl_core::checkpoint::{Checkpoint, NamedArray, VERSION};
use mmrl_core::config::RunConfig;
use mmrl_core::env::{TaskConfig, TaskKind};
use mmrl_core::model::ModelConfig;
use mmrl_core::numeric::Params;
use mmrl_core::trainer::{TrainConfig, Trainer};
use mmrl_core::Error;
use proptest::prelude::*;

fn small_trainer(seed: u64) -> Trainer {
    let mut task = TaskConfig::dispersion(2, 2);
    task.horizon = 6;
    let mc = ModelConfig {
        feature_hidden: vec![8],
        critic_hidden: vec![8],
        embed: 8,
        heads: 2,
        blocks: 1,
        ff: 8,
        rank: 2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        envs: 2,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(task, mc, tc).unwrap()
}

fn trained_checkpoint() -> Checkpoint {
    let mut tr = small_trainer(1);
    tr.iterate().unwrap();
    Checkpoint::from_trainer(&tr)
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained_checkpoint();
    let a = dir.path().join("a.mmrl");
    let b = dir.path().join("b.mmrl");
    ck.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ck);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn restored_model_reproduces_arrays_within_single_precision() {
    let mut tr = small_trainer(2);
    tr.iterate().unwrap();
    let ck = Checkpoint::from_trainer(&tr);
    let model = ck.to_model().unwrap();
    let mut original = Vec::new();
    tr.model.visit("", &mut |_, t| original.extend_from_slice(t.data()));
    let mut restored = Vec::new();
    model.visit("", &mut |_, t| restored.extend_from_slice(t.data()));
    assert_eq!(original.len(), restored.len());
    for (a, b) in original.iter().zip(&restored) {
        assert_eq!(*b, *a as f32 as f64);
    }
    let again = Checkpoint::from_model(&model, ck.meta.clone());
    assert_eq!(again.to_bytes().unwrap(), ck.to_bytes().unwrap());
}

#[test]
fn other_versions_are_rejected() {
    let mut bytes = trained_checkpoint().to_bytes().unwrap();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
    assert!(matches!(err, Error::Format(ref m) if m.contains("version")), "{err}");
}

#[test]
fn bad_magic_truncation_and_trailing_bytes_are_rejected() {
    let bytes = trained_checkpoint().to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::read_from(&mut bad_magic.as_slice()), Err(Error::Format(_))));
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        let r = Checkpoint::read_from(&mut &bytes[..cut]);
        assert!(matches!(r, Err(Error::Format(_))), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::read_from(&mut long.as_slice()), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arbitrary_arrays_survive_the_round_trip(
        arrays in prop::collection::vec(
            ("[a-z.]{1,12}", prop::collection::vec(1u64..5, 0..3), any::<u64>()),
            0..5,
        ),
    ) {
        let mut ck = trained_checkpoint();
        ck.arrays = arrays
            .into_iter()
            .map(|(name, dims, seed)| {
                let n: u64 = dims.iter().product();
                let data = (0..n).map(|i| ((seed ^ i).wrapping_mul(2654435761) % 1000) as f32 / 7.0 - 50.0).collect();
                NamedArray { name, dims, data }
            })
            .collect();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn misspelled_key_is_named_with_its_line() {
    let text = "[task]\nname = dispersion\n\n[train]\nleraning_rate = 0.001\n";
    let err = RunConfig::parse(text, "run.cfg").unwrap_err();
    match &err {
        Error::ConfigKey { line, key, .. } => {
            assert_eq!(*line, 5);
            assert_eq!(key, "leraning_rate");
        }
        other => panic!("unexpected error {other}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("leraning_rate") && msg.contains('5'), "{msg}");
}

#[test]
fn bad_values_name_their_key() {
    for (text, key) in [
        ("[train]\nenvs = many\n", "envs"),
        ("[train]\nenvs = 4\nenvs = 5\n", "envs"),
        ("[model]\nheads = 3\nembed = 16\n", "heads"),
        ("[eval]\nperturb = remove:nobody\n", "perturb"),
        ("[nope]\n", "nope"),
        ("envs = 4\n", "envs"),
    ] {
        match RunConfig::parse(text, "x.cfg") {
            Err(Error::ConfigKey { key: k, line, .. }) => {
                assert!(line >= 1, "{text:?}");
                assert_eq!(k, key, "{text:?}");
            }
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn default_file_lists_every_key_and_parses_to_defaults() {
    let text = RunConfig::default_file();
    let parsed = RunConfig::parse(&text, "defaults").unwrap();
    assert_eq!(parsed, RunConfig::default());
    assert!(text.contains("learning_rate"));
}

#[test]
fn task_name_selects_task_defaults() {
    let cfg = RunConfig::parse("[task]\nname = pressure_plate\n", "pp").unwrap();
    assert_eq!(cfg.task.task, TaskKind::PressurePlate);
    assert_eq!(cfg.task, TaskConfig::pressure_plate());
}

#[test]
fn parsing_is_deterministic() {
    let text = "[train]\nseed = 7\nlearning_rate = 0.0003\n[eval]\nnmd_des = 0.8\n";
    let a = RunConfig::parse(text, "a").unwrap();
    let b = RunConfig::parse(text, "a").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train.seed, 7);
    assert_eq!(a.eval.nmd_des, Some(0.8));
}

#[test]
fn shipped_desk_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let disp = RunConfig::load(&dir.join("dispersion_desk.cfg")).unwrap();
    assert_eq!(disp.task.task, TaskKind::Dispersion);
    assert_eq!(disp.model.feature_hidden, vec![64, 64]);
    assert_eq!(disp.train.total_steps, 500_000);
    let pp = RunConfig::load(&dir.join("pressure_plate_desk.cfg")).unwrap();
    assert_eq!(pp.task, TaskConfig::pressure_plate());
    assert_eq!(pp.train.reward_scale, 0.1);
}
