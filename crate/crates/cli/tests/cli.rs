use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use multiformer::datakit::Annotation;
use multiformer::plot::decode_pgm;
use multiformer::pose::SkeletonFile;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multiformer"));
    // keep the caller's MF_* settings out of the tests
    for (k, _) in std::env::vars() {
        if k.starts_with("MF_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, samples: usize, persons: usize, seed: u64) {
    let o = run(&[
        "synth",
        "--out",
        p(dir),
        "--samples",
        &samples.to_string(),
        "--persons",
        &persons.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "csi", "ann"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for n in names {
            out.push((
                format!("{sub}/{}", n.file_name().unwrap().to_string_lossy()),
                std::fs::read(n).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn synth_writes_requested_samples() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("ds"), 4, 1, 5);
    let all = files(&t.path().join("ds"));
    assert_eq!(all.iter().filter(|(n, _)| n.starts_with("csi/")).count(), 4);
    assert_eq!(all.iter().filter(|(n, _)| n.starts_with("ann/")).count(), 4);
    assert!(all.iter().any(|(n, _)| n == "/manifest.json"));
}

#[test]
fn synth_is_byte_identical_for_equal_seeds() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("a"), 3, 1, 8);
    synth(&t.path().join("b"), 3, 1, 8);
    synth(&t.path().join("c"), 3, 1, 9);
    assert_eq!(files(&t.path().join("a")), files(&t.path().join("b")));
    assert_ne!(files(&t.path().join("a")), files(&t.path().join("c")));
}

#[test]
fn synth_two_persons_annotates_two_persons() {
    let t = tempfile::tempdir().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, 3, 2, 2);
    for i in 0..3 {
        let ann = Annotation::read(&ds.join(format!("ann/{i:05}.json"))).unwrap();
        assert_eq!(ann.persons.len(), 2);
    }
}

#[test]
fn train_eval_decode_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let (ds, run_dir) = (t.path().join("ds"), t.path().join("run"));
    synth(&ds, 16, 1, 4);
    let o = run(&[
        "train",
        "--data",
        p(&ds),
        "--out",
        p(&run_dir),
        "--preset",
        "desk",
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run_dir.join("last.mfck").is_file());
    assert!(run_dir.join("best.mfck").is_file());
    let csv = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(std::fs::read_to_string(run_dir.join("config.ini"))
        .unwrap()
        .contains("epochs = 3 ; flag"));

    let report = t.path().join("report.json");
    let ck = run_dir.join("last.mfck");
    let o = run(&[
        "eval",
        "--ckpt",
        p(&ck),
        "--data",
        p(&ds),
        "--alpha",
        "5,10,20",
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("PCK@10"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let keys: Vec<&String> = json["alpha"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["10", "20", "5"]);
    assert_eq!(json["alpha"]["5"].as_object().unwrap().len(), 18);
    assert!(json["params"].as_u64().unwrap() > 0);

    let out = t.path().join("pose.json");
    let svg = t.path().join("pose.svg");
    let maps = t.path().join("maps");
    let csi = ds.join("csi/00000.csit");
    let o = run(&[
        "decode",
        "--ckpt",
        p(&ck),
        "--csi",
        p(&csi),
        "--out",
        p(&out),
        "--svg",
        p(&svg),
        "--heatmaps",
        p(&maps),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    SkeletonFile::read(&out).unwrap();
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    assert_eq!(std::fs::read_dir(&maps).unwrap().count(), 57 + 1);

    // resume extends the same run to 4 epochs
    let o = run(&[
        "train",
        "--data",
        p(&ds),
        "--out",
        p(&run_dir),
        "--epochs",
        "4",
        "--resume",
        p(&ck),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn eval_scores_saved_skeletons() {
    let t = tempfile::tempdir().unwrap();
    let ds = t.path().join("ds");
    let pred = t.path().join("pred");
    synth(&ds, 5, 1, 6);
    std::fs::create_dir_all(&pred).unwrap();
    for i in 0..5 {
        let ann = ds.join(format!("ann/{i:05}.json"));
        let o = run(&[
            "decode",
            "--ann",
            p(&ann),
            "--side",
            "36",
            "--out",
            p(&pred.join(format!("{i:05}.json"))),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let report = t.path().join("r.json");
    let o = run(&[
        "eval",
        "--pred",
        p(&pred),
        "--data",
        p(&ds),
        "--split",
        "all",
        "--alpha",
        "5",
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    for (_, v) in json["alpha"]["5"].as_object().unwrap() {
        assert_eq!(v.as_f64(), Some(1.0));
    }
}

#[test]
fn decode_of_rendered_labels_recovers_person_count() {
    let t = tempfile::tempdir().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, 2, 2, 7);
    let ann_path = ds.join("ann/00001.json");
    let out = t.path().join("pose.json");
    let o = run(&["decode", "--ann", p(&ann_path), "--side", "36", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ann = Annotation::read(&ann_path).unwrap();
    assert_eq!(SkeletonFile::read(&out).unwrap().persons.len(), ann.persons.len());
}

#[test]
fn gradcheck_single_op_passes() {
    let o = run(&["gradcheck", "--ops", "softmax"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("softmax"))
        .unwrap()
        .to_string();
    let worst: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(worst < 1e-4, "{line}");
    assert!(line.ends_with("pass"));
}

#[test]
fn gradcheck_unknown_op_lists_ops() {
    let o = run(&["gradcheck", "--ops", "fourier"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(
        err.contains("fourier") && err.contains("softmax") && err.contains("model"),
        "{err}"
    );
}

#[test]
fn gradcheck_all_fits_the_time_budget() {
    let start = Instant::now();
    let o = run(&["gradcheck", "--preset", "desk", "--ops", "all"]);
    let took = start.elapsed();
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("model"));
    assert!(took < Duration::from_secs(120), "{took:?}");
}

#[test]
fn attention_export_on_full_preset() {
    let t = tempfile::tempdir().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, 1, 1, 1);
    let out = t.path().join("attn");
    let csi = ds.join("csi/00000.csit");
    let o = run(&[
        "attn",
        "--preset",
        "MultiFormer",
        "--csi",
        p(&csi),
        "--branch",
        "freq",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("salience.csv")).unwrap();
    let values: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 64);
    let (lo, hi) = values
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 1.5, "salience ratio {}", hi / lo);
    let pgm_path = out.join("attention.pgm");
    let (w, h, px) = decode_pgm(&std::fs::read(&pgm_path).unwrap(), &pgm_path).unwrap();
    assert_eq!((w, h, px.len()), (64, 64, 64 * 64));
}

#[test]
fn attention_index_out_of_range_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, 1, 1, 1);
    let csi = ds.join("csi/00000.csit");
    let out = t.path().join("attn");
    for extra in [["--layer", "9"], ["--head", "9"]] {
        let mut args = vec!["attn", "--csi", p(&csi), "--out", p(&out)];
        args.extend(extra);
        let o = run(&args);
        assert_eq!(code(&o), 2, "{}", stderr(&o));
    }
}

#[test]
fn flag_beats_env_beats_file() {
    let t = tempfile::tempdir().unwrap();
    let ini = t.path().join("run.ini");
    std::fs::write(&ini, "[train]\nlr = 0.1\nbatch_size = 4\nepochs = 7\n").unwrap();
    let o = bin()
        .args(["config", "--config", p(&ini), "--set", "train.lr=0.3"])
        .env("MF_TRAIN_LR", "0.2")
        .env("MF_TRAIN_BATCH_SIZE", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("lr = 0.3 ; flag"), "{text}");
    assert!(text.contains("batch_size = 5 ; env"), "{text}");
    assert!(text.contains("epochs = 7 ; file"), "{text}");
    assert!(text.contains("seed = 0\n"), "{text}");

    // the config file can also come from MF_CONFIG
    let o = bin().args(["config"]).env("MF_CONFIG", p(&ini)).output().unwrap();
    assert!(stdout(&o).contains("epochs = 7 ; file"));
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let t = tempfile::tempdir().unwrap();
    let ini = t.path().join("run.ini");
    std::fs::write(&ini, "[train]\nwarmup = 3\n").unwrap();
    let o = run(&["config", "--config", p(&ini)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.warmup"));

    let o = bin().args(["config"]).env("MF_TRAIN_WARMUP", "3").output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("MF_TRAIN_WARMUP"));

    let o = run(&["config", "--set", "eval.beta=1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("eval.beta"));
}

#[test]
fn exit_codes_follow_the_table() {
    let t = tempfile::tempdir().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, 6, 1, 3);

    let missing = t.path().join("missing.mfck");
    let o = run(&["eval", "--ckpt", p(&missing), "--data", p(&ds)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let bad = t.path().join("v9.mfck");
    let mut bytes = b"MFCK".to_vec();
    bytes.extend(9u32.to_le_bytes());
    std::fs::write(&bad, bytes).unwrap();
    let o = run(&[
        "decode",
        "--ckpt",
        p(&bad),
        "--csi",
        p(&ds.join("csi/00000.csit")),
        "--out",
        p(&t.path().join("x.json")),
    ]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let o = run(&[
        "train",
        "--data",
        p(&ds),
        "--out",
        p(&t.path().join("nan")),
        "--epochs",
        "3",
        "--lr",
        "1e30",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));

    let o = run(&["synth", "--out", p(&t.path().join("x")), "--samples", "lots"]);
    assert_eq!(code(&o), 2);

    let o = run(&[
        "train",
        "--data",
        p(&ds),
        "--out",
        p(&t.path().join("y")),
        "--preset",
        "giant",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expected: &[(&str, &[&str])] = &[
        (
            "synth",
            &["--config", "--set", "--out", "--samples", "--persons", "--seed"],
        ),
        (
            "train",
            &[
                "--config",
                "--set",
                "--data",
                "--out",
                "--preset",
                "--epochs",
                "--seed",
                "--lr",
                "--batch-size",
                "--resume",
                "--precision",
            ],
        ),
        (
            "eval",
            &[
                "--config",
                "--set",
                "--ckpt",
                "--pred",
                "--data",
                "--split",
                "--alpha",
                "--out",
                "--precision",
            ],
        ),
        (
            "decode",
            &[
                "--config",
                "--set",
                "--ckpt",
                "--csi",
                "--ann",
                "--side",
                "--out",
                "--svg",
                "--heatmaps",
            ],
        ),
        ("gradcheck", &["--preset", "--ops", "--seed", "--coords"]),
        (
            "attn",
            &[
                "--config", "--set", "--ckpt", "--preset", "--seed", "--csi", "--branch", "--layer", "--head", "--out",
            ],
        ),
        ("config", &["--config", "--set"]),
    ];
    for (cmd, flags) in expected {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    let o = run(&["--help"]);
    assert!(stdout(&o).contains("Exit codes"));
}
