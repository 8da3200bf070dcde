use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use packetlm::datasets::{load_csv, synth_schema};
use packetlm::metrics::{confusion, MetricsReport};
use packetlm::trainer::read_log;
use packetlm_cli::commands::{EvalResult, OneshotReport, SplitResult, TrainResult};
use packetlm_cli::attention::AttentionReport;
use serde::de::DeserializeOwned;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_packetlm"));
    c.env_remove("PACKETLM_CONFIG_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json<T: DeserializeOwned>(path: impl AsRef<Path>) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a small explicit split.
fn prepare(dir: &Path, n: usize, per_class: (usize, usize)) -> (PathBuf, PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&["synth", "--n", &n.to_string(), "--seed", "3", "--out-dir", s(&data)]);
    let cfg = dir.join("split.toml");
    let (tr, te) = per_class;
    let mut text = String::from("schema = \"data/schema.toml\"\ninputs = [\"data/synth.csv\"]\nout_dir = \"split\"\nseed = 5\n\n[split]\nmode = \"explicit\"\n\n[split.counts]\n");
    for c in ["benign", "attack_a", "attack_b", "attack_c"] {
        text.push_str(&format!("{c} = {{ train = {tr}, test = {te} }}\n"));
    }
    std::fs::write(&cfg, text).unwrap();
    ok(&["split", "--config", s(&cfg)]);
    (data.join("schema.toml"), dir.join("split/train.csv"), dir.join("split/test.csv"))
}

const TINY: [&str; 10] = ["--n-layers", "1", "--n-heads", "1", "--emb-size", "8", "--batch-size", "8", "--lr", "1e-2"];

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    let out = run(&["eval", "--test", "x.csv", "--out-dir", "y"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn missing_input_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "40", "--out-dir", s(&data)]);
    let missing = dir.path().join("nope.csv");
    let out = run(&[
        "split",
        "--schema",
        s(&data.join("schema.toml")),
        "--input",
        s(&missing),
        "--preset",
        "one-shot",
        "--majority",
        "benign",
        "--majority-train",
        "5",
        "--majority-test",
        "2",
        "--minority-test",
        "2",
        "--out-dir",
        s(&dir.path().join("split")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn zero_mlp_ratio_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let (schema, train, _) = prepare(dir.path(), 80, (4, 2));
    let out_dir = dir.path().join("model");
    let out = run(&["train", "--schema", s(&schema), "--train", s(&train), "--out-dir", s(&out_dir), "--mlp-ratio", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mlp_ratio"));
    assert!(!out_dir.join("train_log.jsonl").exists());
}

#[test]
fn one_shot_split_is_deterministic_and_keeps_one_sample_per_attack() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "400", "--seed", "9", "--out-dir", s(&data)]);
    let mut digests = Vec::new();
    for (i, seed) in ["4", "4", "5"].iter().enumerate() {
        let out = dir.path().join(format!("split{i}"));
        ok(&[
            "split",
            "--schema",
            s(&data.join("schema.toml")),
            "--input",
            s(&data.join("synth.csv")),
            "--preset",
            "one-shot",
            "--majority",
            "benign",
            "--majority-train",
            "50",
            "--majority-test",
            "20",
            "--minority-test",
            "10",
            "--seed",
            seed,
            "--out-dir",
            s(&out),
        ]);
        let res: SplitResult = json(out.join("split.json"));
        let manifest = packetlm_cli::commands::read_manifest(&out.join("manifest.toml")).unwrap();
        for c in &manifest.classes {
            let want = if c.name == "benign" { 50 } else { 1 };
            assert_eq!(c.train, want, "{}", c.name);
        }
        assert_eq!(manifest.sources.len(), 1);
        assert_eq!(manifest.digest(), res.manifest_digest);
        digests.push(res.manifest_digest);
    }
    assert_eq!(digests[0], digests[1]);
    assert_ne!(digests[0], digests[2]);
}

#[test]
fn train_eval_predict_attention_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (schema, train, test) = prepare(dir.path(), 200, (30, 10));
    let model = dir.path().join("model");
    let mut args = vec!["train", "--schema", s(&schema), "--train", s(&train), "--out-dir", s(&model), "--epochs", "3", "--seed", "2"];
    args.extend(TINY);
    let summary = ok(&args);
    assert!(summary.contains("epoch   3"));
    let res: TrainResult = json(model.join("train.json"));
    assert_eq!(res.steps, 3 * 15);
    let log = read_log(model.join("train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log[2].nll < log[0].nll);
    let ckpt = model.join("model.ckpt");

    // eval output agrees with the metrics module applied to the written predictions
    let eval_dir = dir.path().join("eval");
    let text = ok(&["eval", "--checkpoint", s(&ckpt), "--test", s(&test), "--out-dir", s(&eval_dir)]);
    let res: EvalResult = json(eval_dir.join("eval.json"));
    let mut rdr = csv::Reader::from_path(eval_dir.join("predictions.csv")).unwrap();
    let (mut truths, mut preds) = (Vec::new(), Vec::new());
    for row in rdr.records() {
        let row = row.unwrap();
        truths.push(row[3].parse::<usize>().unwrap());
        preds.push(row[4].parse::<usize>().unwrap());
        let p: f64 = (5..9).map(|i| row[i].parse::<f64>().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-5);
    }
    assert_eq!(truths.len(), 40);
    let names: Vec<String> = synth_schema().label_names;
    let direct = MetricsReport::from_confusion(&confusion(&truths, &preds, 4).unwrap(), &names);
    assert_eq!(direct, res.report);
    assert_eq!(text.lines().filter(|l| l.starts_with("attack_") || l.starts_with("benign")).count(), 4);
    assert!(text.contains("macro avg (weighted)") && text.contains("macro avg (unweighted)"));
    assert_eq!(std::fs::read_to_string(eval_dir.join("metrics.txt")).unwrap(), res.report.to_text());

    let pred_dir = dir.path().join("pred");
    let out = ok(&["predict", "--checkpoint", s(&ckpt), "--values", "1234,80,64,1500", "--out-dir", s(&pred_dir)]);
    assert!(names.iter().any(|n| out.starts_with(n.as_str())));
    assert!(pred_dir.join("predict.json").exists());

    for mode in ["per-head", "mean-heads", "mean-all"] {
        let att = dir.path().join(format!("att-{mode}"));
        ok(&["attention", "--checkpoint", s(&ckpt), "--input", s(&test), "--row", "3", "--mode", mode, "--out-dir", s(&att), "--svg", "true"]);
        let rep: AttentionReport = json(att.join("attention.json"));
        assert_eq!(rep.groups.len(), 5);
        assert_eq!(rep.maps.len(), 1);
        for m in &rep.maps {
            for row in m.fields.iter().chain([&m.label_query]) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
            for row in &m.tokens {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
            assert_eq!(m.label_query[4], 0.0);
        }
        assert!(std::fs::read_to_string(att.join("attention.svg")).unwrap().starts_with("<svg"));
    }
    let bad = run(&["attention", "--checkpoint", s(&ckpt), "--values", "1,2,3", "--out-dir", s(&dir.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn memorizing_a_single_packet_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("one.csv");
    std::fs::write(&csv, "src_port,dst_port,ttl,length,label\n406,22,64,1500,attack_b\n").unwrap();
    let schema = dir.path().join("schema.toml");
    synth_schema().save(&schema).unwrap();
    let model = dir.path().join("m");
    let mut args = vec!["train", "--schema", s(&schema), "--train", s(&csv), "--out-dir", s(&model), "--epochs", "40"];
    args.extend(TINY);
    ok(&args);
    let ev = dir.path().join("e");
    ok(&["eval", "--checkpoint", s(&model.join("model.ckpt")), "--test", s(&csv), "--out-dir", s(&ev)]);
    let res: EvalResult = json(ev.join("eval.json"));
    let r = &res.report;
    assert_eq!((r.weighted.precision, r.weighted.recall, r.weighted.f1), (1.0, 1.0, 1.0));
    let row = &r.classes[2].scores;
    assert_eq!((row.precision, row.recall, row.f1, row.support), (1.0, 1.0, 1.0, 1));
}

#[test]
fn flags_override_config_file_and_env_dir_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (schema, train, _) = prepare(dir.path(), 80, (8, 2));
    let cfg_dir = dir.path().join("cfg");
    std::fs::create_dir(&cfg_dir).unwrap();
    std::fs::write(
        cfg_dir.join("train.toml"),
        format!(
            "schema = {:?}\ntrain = {:?}\nout_dir = \"../model\"\nepochs = 2\nn_layers = 1\nn_heads = 1\nemb_size = 8\nbatch_size = 16\nlr = 1e-3\n",
            s(&schema),
            s(&train)
        ),
    )
    .unwrap();

    let run_with_env = |extra: &[&str]| {
        let out = bin().env("PACKETLM_CONFIG_DIR", &cfg_dir).arg("train").args(extra).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        json::<TrainResult>(dir.path().join("model/train.json"))
    };
    let from_file = run_with_env(&[]);
    assert_eq!(from_file.config.epochs, 2);
    assert_eq!(from_file.config.batch_size, 16);
    assert_eq!(from_file.config.min_lr, None);

    let overridden = run_with_env(&["--epochs", "1", "--config", "train.toml"]);
    assert_eq!(overridden.config.epochs, 1);
    assert_eq!(overridden.config.batch_size, 16);

    // defaults: base size learning rate when neither flag nor file sets it
    std::fs::write(cfg_dir.join("train.toml"), std::fs::read_to_string(cfg_dir.join("train.toml")).unwrap().replace("lr = 1e-3\n", "")).unwrap();
    assert_eq!(run_with_env(&[]).config.base_lr, 1e-4);

    let out = bin().env("PACKETLM_CONFIG_DIR", &cfg_dir).args(["train", "--config", "absent.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resumed_training_matches_the_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    let (schema, train, _) = prepare(dir.path(), 120, (10, 2));
    let common = |out: &Path| {
        let mut v: Vec<String> = ["train", "--schema", s(&schema), "--train", s(&train), "--epochs", "3", "--seed", "4", "--out-dir", s(out)]
            .iter()
            .map(|x| x.to_string())
            .collect();
        v.extend(TINY.iter().map(|x| x.to_string()));
        v
    };
    let full = dir.path().join("full");
    let args = common(&full);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let part = dir.path().join("part");
    let mut args = common(&part);
    args.extend(["--stop-after-step".to_string(), "7".to_string()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let first: TrainResult = json(part.join("train.json"));
    assert_eq!(first.steps, 7);
    let ckpt = part.join("model.ckpt");
    ok(&["train", "--resume", s(&ckpt), "--train", s(&train), "--out-dir", s(&part)]);

    let a: TrainResult = json(full.join("train.json"));
    let b: TrainResult = json(part.join("train.json"));
    assert_eq!(b.steps, a.steps);
    assert_eq!(a.checkpoint_digest, b.checkpoint_digest);
    assert!((a.last_epoch_nll.unwrap() - b.last_epoch_nll.unwrap()).abs() < 1e-6);
}

#[test]
fn oneshot_mean_is_the_mean_of_seed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let go = |seeds: &str, out: &str| -> OneshotReport {
        let out = dir.path().join(out);
        let mut args = vec![
            "oneshot",
            "--synth-n",
            "400",
            "--seeds",
            seeds,
            "--majority-train",
            "20",
            "--majority-test",
            "10",
            "--minority-test",
            "5",
            "--epochs",
            "2",
            "--out-dir",
            s(&out),
        ];
        args.extend(TINY);
        ok(&args);
        json(out.join("oneshot.json"))
    };
    let three = go("1..3", "a");
    assert_eq!(three.seeds.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2, 3]);
    let m: f64 = three.seeds.iter().map(|r| r.report.unweighted.f1).sum::<f64>() / 3.0;
    assert!((three.mean.unweighted.f1 - m).abs() < 1e-12);
    assert_eq!(go("1..3", "b"), three);

    let single = go("2", "c");
    assert_eq!(single.mean.weighted, single.seeds[0].report.weighted);
    assert_eq!(single.mean.unweighted, single.seeds[0].report.unweighted);
    assert_eq!(single.seeds[0], three.seeds[1]);
}

#[test]
fn shipped_schemas_and_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["cicids2017", "car_hacking"] {
        let schema = packetlm::PacketSchema::load(root.join(format!("schemas/{name}.schema.toml"))).unwrap();
        assert!(schema.worst_case_tokens() <= schema.seq_len);
    }
    let cic = packetlm::PacketSchema::load(root.join("schemas/cicids2017.schema.toml")).unwrap();
    assert_eq!(cic.label_names, packetlm::datasets::CICIDS2017_CLASSES.map(String::from).to_vec());
    assert_eq!(cic.resolve_label("Web Attack \u{2013} XSS"), Some(10));
    for entry in std::fs::read_dir(root.join("synth")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        text.parse::<toml::Table>().unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("can.csv");
    std::fs::write(&csv, "Timestamp,CAN ID,DLC,DATA0,DATA1,DATA2,DATA3,DATA4,DATA5,DATA6,DATA7,Label\n1.0,0316,8,05,21,68,09,21,21,00,6f,R\n").unwrap();
    let car = packetlm::PacketSchema::load(root.join("schemas/car_hacking.schema.toml")).unwrap();
    let rep = load_csv(&csv, &car).unwrap();
    assert_eq!(rep.records.len(), 1);
}
