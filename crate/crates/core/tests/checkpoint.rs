use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stfuse::checkpoint::{load, save, Checkpoint, MANIFEST, PARAM_DIR};
use stfuse::config::RunConfig;
use stfuse::fusion::Variant;
use stfuse::protocols::{build_model, load_dataset, Split};
use stfuse::train::RngState;

fn desk() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    RunConfig::load(&path).unwrap().with("data.target_rate", 0.05)
}

fn checkpoint(variant: Variant) -> Checkpoint {
    let config = desk().with("variant", variant);
    let s = config.resolve().unwrap();
    let split = Split::temporal(load_dataset(&s.data).unwrap(), s.data.train_fraction).unwrap();
    Checkpoint {
        model: build_model(&s, &split, variant).unwrap(),
        config,
        epoch: 3,
        rng: RngState { seed: 11, word_pos: 4096 },
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    let ck = checkpoint(Variant::Full);
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    save(&a, &ck).unwrap();
    let back = load(&a).unwrap();
    assert_eq!(back.model.params, ck.model.params);
    assert_eq!(back.model.frozen, ck.model.frozen);
    assert_eq!(back.model.stats, ck.model.stats);
    assert_eq!(back.model.vocab, ck.model.vocab);
    assert_eq!((back.epoch, back.rng.clone()), (3, ck.rng.clone()));
    save(&b, &back).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new(MANIFEST)));
    assert_eq!(ta, tb);
}

#[test]
fn ablated_models_round_trip() {
    let ck = checkpoint(Variant::LlmOff);
    assert!(ck.model.frozen.is_empty());
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &ck).unwrap();
    let back = load(dir.path()).unwrap();
    assert_eq!(back.model, ck.model);
}

#[test]
fn corrupted_parameters_are_detected() {
    let ck = checkpoint(Variant::Full);
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &ck).unwrap();
    let name = ck.model.params.names().next().unwrap().clone();
    let file = dir.path().join(PARAM_DIR).join(format!("{name}.f64"));
    let mut bytes = std::fs::read(&file).unwrap();
    bytes[0] ^= 0x40;
    std::fs::write(&file, &bytes).unwrap();
    assert!(load(dir.path()).is_err());

    bytes.truncate(bytes.len() - 8);
    std::fs::write(&file, &bytes).unwrap();
    let err = load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("expected"), "{err}");
}

#[test]
fn tampered_manifest_is_rejected() {
    let ck = checkpoint(Variant::Full);
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &ck).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("format=", "format=x")).unwrap();
    assert!(load(dir.path()).is_err());
    std::fs::write(&path, text.replace("schema.target=", "schema.target=other ")).unwrap();
    assert!(load(dir.path()).is_err());
    std::fs::remove_file(&path).unwrap();
    assert!(load(dir.path()).is_err());
}
