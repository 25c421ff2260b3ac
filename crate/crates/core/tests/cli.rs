//! End-to-end checks of the `concept-forge` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use concept_forge::dataset::{read_dataset, write_dataset, Dataset, Instance, Split};
use concept_forge::scorer::{forward, init_params, write_checkpoint, OptimState};
use concept_forge::tracker::ConfidenceTracker;
use concept_forge::{ConceptSpace, ConceptStatus};
use ndarray::Array2;
use tempfile::TempDir;

const SMALL_WORLD: &[&str] = &[
    "--n-verbs",
    "6",
    "--n-objects",
    "5",
    "--n-groups",
    "2",
    "--d-v",
    "4",
    "--d-o",
    "4",
    "--instances-per-concept",
    "3",
    "--heldout-per-object",
    "2",
];

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concept-forge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth_small(dir: &Path, seed: &str, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out, "--seed", seed];
    args.extend_from_slice(SMALL_WORLD);
    args.extend_from_slice(extra);
    ok(&args);
}

fn read_bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn synth_is_deterministic_and_readable() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_small(&a, "7", &[]);
    synth_small(&b, "7", &[]);
    for name in ["train/instances.bin", "train/meta.txt", "heldout/instances.bin", "concepts.csv"] {
        assert_eq!(read_bytes(&a, name), read_bytes(&b, name), "{name}");
    }
    let train = read_dataset(&a.join("train")).unwrap();
    let heldout = read_dataset(&a.join("heldout")).unwrap();
    assert_eq!(train.space().n_verbs(), 6);
    assert_eq!(train.space().n_objects(), 5);
    assert_eq!(heldout.len(), 10);
    for inst in train.instances() {
        for &v in inst.verb_labels() {
            assert_eq!(train.space().status(v, inst.object_label()), ConceptStatus::Known);
        }
    }
}

#[test]
fn known_fraction_sets_known_count() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["synth", "--out", out, "--seed", "1", "--known-fraction", "0.5", "--d-v", "4", "--d-o", "4"]);
    let space = read_dataset(&tmp.path().join("train")).unwrap().space().clone();
    let concepts = space.count(ConceptStatus::Known) + space.count(ConceptStatus::Unknown);
    assert_eq!(space.n_cells(), 120);
    assert!(concepts > 0);
    let expected = (0.5 * concepts as f64).ceil() as usize;
    assert!(space.count(ConceptStatus::Known).abs_diff(expected) <= 1);
}

#[test]
fn train_twice_gives_identical_files() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, "2", &[]);
    let d = data.to_str().unwrap();
    for run in ["r1", "r2"] {
        let out = tmp.path().join(run);
        ok(&["train", "--data", d, "--out", out.to_str().unwrap(), "--iterations", "30", "--hidden", "8"]);
    }
    for name in ["checkpoint.bin", "matrix.csv", "history.csv"] {
        let a = read_bytes(&tmp.path().join("r1"), name);
        let b = read_bytes(&tmp.path().join("r2"), name);
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn without_self_training_that_loss_column_is_zero() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, "3", &[]);
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--iterations",
        "20",
        "--eval-every",
        "5",
        "--no-self-training",
    ]);
    let text = fs::read_to_string(out.join("history.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "self_training_loss").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let v: f64 = row.split(',').nth(col).unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
    }
}

#[test]
fn hico_profile_is_echoed() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, "4", &[]);
    let out = tmp.path().join("run");
    let stdout = ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--profile",
        "hico",
        "--iterations",
        "2",
    ]);
    let log = fs::read_to_string(out.join("run.log")).unwrap();
    for text in [&stdout, &log] {
        for line in ["profile=hico", "lambda1=2", "lambda2=0.5", "lambda3=0.5", "temperature=1"] {
            assert!(text.lines().any(|l| l == line), "missing {line} in {text}");
        }
    }
}

fn write_matrix_and_concepts(dir: &Path, m: &[f64], space: &ConceptSpace) -> (String, String) {
    let tracker =
        ConfidenceTracker::load_snapshot(space.n_verbs(), space.n_objects(), m.to_vec(), vec![1.0; m.len()]).unwrap();
    let (mp, cp) = (dir.join("matrix.csv"), dir.join("concepts.csv"));
    tracker.save(&mp).unwrap();
    fs::write(&cp, space.to_csv()).unwrap();
    (mp.to_str().unwrap().to_string(), cp.to_str().unwrap().to_string())
}

/// 3x3 grid: Known on the diagonal, Unknown at (0,1), (1,2), (2,0), Invalid
/// elsewhere.
fn small_space() -> ConceptSpace {
    let mut s = ConceptSpace::new(3, 3).unwrap();
    for i in 0..3 {
        s.set(i, i, ConceptStatus::Known).unwrap();
        s.set(i, (i + 1) % 3, ConceptStatus::Unknown).unwrap();
    }
    s
}

#[test]
fn discover_ranks_non_known_cells() {
    let tmp = TempDir::new().unwrap();
    let space = small_space();
    let m: Vec<f64> = (0..9).map(|i| 0.05 + 0.1 * i as f64).collect();
    let (mp, cp) = write_matrix_and_concepts(tmp.path(), &m, &space);

    let zero = ok(&["discover", "--matrix", &mp, "--concepts", &cp, "--k", "0"]);
    let lines: Vec<&str> = zero.lines().collect();
    assert_eq!(lines[0], "rank,verb_id,object_id,score");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("recall_at_k,0,"));
    let r: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(r, 0.0);

    // Oracle: sort the six non-Known cells by score, ties by index.
    let mut cells: Vec<(usize, f64)> = (0..9).filter(|&i| i % 4 != 0).map(|i| (i, m[i])).collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let three = ok(&["discover", "--matrix", &mp, "--concepts", &cp, "--k", "3"]);
    let rows: Vec<&str> = three.lines().skip(1).take(3).collect();
    let mut hits = 0;
    for (r, (row, &(idx, score))) in rows.iter().zip(&cells).enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), r + 1);
        assert_eq!(f[1].parse::<usize>().unwrap(), idx / 3);
        assert_eq!(f[2].parse::<usize>().unwrap(), idx % 3);
        assert_eq!(f[3].parse::<f64>().unwrap(), score);
        if space.status(idx / 3, idx % 3) == ConceptStatus::Unknown {
            hits += 1;
        }
    }
    let last = three.lines().last().unwrap();
    let r: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!((r - hits as f64 / 3.0).abs() < 1e-15);

    let all = ok(&["discover", "--matrix", &mp, "--concepts", &cp, "--k", "6"]);
    let r: f64 = all.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(r, 1.0);
}

#[test]
fn eval_of_indicator_matrix_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let space = small_space();
    let m: Vec<f64> = (0..9)
        .map(|i| {
            if space.status(i / 3, i % 3) == ConceptStatus::Unknown {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let (mp, cp) = write_matrix_and_concepts(tmp.path(), &m, &space);
    let text = ok(&["eval", "--matrix", &mp, "--concepts", &cp]);
    assert_eq!(text.lines().next().unwrap(), "metric,target,k,value");
    let unknown_ap = text.lines().find(|l| l.starts_with("ap,unknown,")).unwrap();
    let v: f64 = unknown_ap.rsplit(',').next().unwrap().parse().unwrap();
    assert!((v - 1.0).abs() < 1e-12);
}

#[test]
fn random_baseline_is_seeded() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, "5", &[]);
    let d = data.to_str().unwrap();
    let path = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    for (name, seed) in [("a.csv", "9"), ("b.csv", "9"), ("c.csv", "10")] {
        ok(&["baseline", "--kind", "random", "--data", d, "--seed", seed, "--out", &path(name)]);
    }
    let read = |n: &str| fs::read(path(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    let m = ConfidenceTracker::load(Path::new(&path("a.csv"))).unwrap();
    assert_eq!(m.n_verbs(), 6);
    assert!(m.confidences().iter().all(|&x| (0.0..1.0).contains(&x)));
}

#[test]
fn offline_affordance_on_single_instance() {
    let tmp = TempDir::new().unwrap();
    let mut space = ConceptSpace::new(3, 2).unwrap();
    space.set(0, 1, ConceptStatus::Known).unwrap();
    space.set(2, 1, ConceptStatus::Known).unwrap();
    let (vf, of) = (vec![0.3, -1.2], vec![0.7, 0.1, -0.4]);
    let inst = Instance::new(vec![2, 0], 1, vf.clone(), of.clone());
    let dataset = Dataset::new(space, 2, 3, Split::Train, vec![inst]).unwrap();
    let dir = tmp.path().join("one");
    write_dataset(&dataset, &dir).unwrap();
    let params = init_params(2, 3, 5, 3, 11).unwrap();
    let ckpt = tmp.path().join("ckpt.bin");
    write_checkpoint(&ckpt, &params, &OptimState::new(&params, 0.01, 0.9).unwrap()).unwrap();
    let out = tmp.path().join("m.csv");
    ok(&[
        "baseline",
        "--kind",
        "offline-affordance",
        "--data",
        dir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let m = ConfidenceTracker::load(&out).unwrap();
    let x = Array2::from_shape_vec((1, 5), vf.into_iter().chain(of).collect()).unwrap();
    let (logits, _) = forward(&params, x.view()).unwrap();
    for v in 0..3 {
        let p = 1.0 / (1.0 + (-logits[[0, v]]).exp());
        if v == 1 {
            assert_eq!(m.count(v, 1), 0.0);
        } else {
            assert_eq!(m.count(v, 1), 1.0);
            assert!((m.confidence(v, 1) - p).abs() < 1e-12);
        }
        assert_eq!(m.count(v, 0), 0.0);
    }
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope");
    let out = tmp.path().join("out");
    let code = |args: &[&str]| bin(args).status.code().unwrap();
    assert_eq!(code(&["train", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["--help"]), 0);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key=1\n").unwrap();
    synth_small(&tmp.path().join("d"), "0", &[]);
    let d = tmp.path().join("d");
    assert_eq!(
        code(&["train", "--data", d.to_str().unwrap(), "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap()]),
        1
    );
}
