use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spcl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

fn indices(s: &str) -> Vec<usize> {
    s.split(',').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = spcl(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = spcl(&["flops", "--depht", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn partition_of_a_hundred_at_thirty_percent() {
    let o = spcl(&["partition", "--n", "100", "--ratio", "0.3", "--seed", "7"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let (a, b) = (indices(field(&text, "group_a")), indices(field(&text, "group_b")));
    assert_eq!((a.len(), b.len()), (35, 35));
    assert!(a.iter().all(|i| !b.contains(i)));
    assert_eq!(stdout(&spcl(&["partition", "--n", "100", "--ratio", "0.3", "--seed", "7"])), text);
}

#[test]
fn impossible_ratio_is_a_usage_error() {
    assert_eq!(spcl(&["partition", "--n", "4", "--ratio", "0.9"]).status.code(), Some(1));
}

#[test]
fn flops_at_vit_base() {
    let o = spcl(&[
        "flops", "--depth", "12", "--dim", "768", "--heads", "12", "--patch", "16", "--image", "224", "--ratio", "0.6",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total: f64 = field(&text, "spcl_total").parse().unwrap();
    assert!((total / 6.9e9 - 1.0).abs() < 0.01, "{total}");
    assert!(field(&text, "ratio").parse::<f64>().unwrap() < 1.0);
}

fn gen(dir: &Path, seed: &str) {
    let o = spcl(&[
        "gen-data", "--out", dir.to_str().unwrap(), "--count", "8", "--test", "4", "--size", "16", "--seed", seed,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

const TINY: &[&str] = &[
    "--set", "encoder.depth=1", "--set", "encoder.dim=16", "--set", "encoder.heads=2", "--set", "encoder.patch=4",
    "--set", "encoder.image=16", "--set", "train.batch_size=4", "--set", "train.epochs=2",
];

fn pretrain(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    spcl(&args)
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "3");
    let again = tmp.path().join("data2");
    gen(&again, "3");
    assert_eq!(fs::read(data.join("manifest.tsv")).unwrap(), fs::read(again.join("manifest.tsv")).unwrap());

    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for out in [&r1, &r2] {
        let mut extra = TINY.to_vec();
        extra.extend(["--seed", "5", "--threads", "1"]);
        let o = pretrain(&data, out, &extra);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = fs::read_to_string(r1.join("metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);
    assert_eq!(log, fs::read_to_string(r2.join("metrics.tsv")).unwrap());
    let ckpt = r1.join("checkpoint-000004.spcl");
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(r2.join("checkpoint-000004.spcl")).unwrap());

    let (train, test) = (tmp.path().join("train.tsv"), tmp.path().join("test.tsv"));
    for (split, out) in [("train", &train), ("test", &test)] {
        let o = spcl(&[
            "embed", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--split", split, "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read_to_string(&test).unwrap().lines().count(), 1 + 4);

    for mode in [vec!["--linear"], vec!["--knn", "3"]] {
        let mut args = vec!["probe", "--train", train.to_str().unwrap(), "--test", test.to_str().unwrap()];
        args.extend(mode);
        let o = spcl(&args);
        assert!(o.status.success());
        let text = stdout(&o);
        let acc: f64 = text.lines().next().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn resume_continues_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "1");
    let full = tmp.path().join("full");
    let split = tmp.path().join("split");
    assert!(pretrain(&data, &full, TINY).status.success());
    let mut first = TINY.to_vec();
    first.extend(["--stop-after", "2"]);
    assert!(pretrain(&data, &split, &first).status.success());
    let ckpt = split.join("checkpoint-000002.spcl");
    let o = pretrain(&data, &split, &["--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(full.join("metrics.tsv")).unwrap(),
        fs::read_to_string(split.join("metrics.tsv")).unwrap()
    );
}

#[test]
fn config_file_typos_and_bad_data_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "0");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# typo below\ntrain.epoch = 3\n").unwrap();
    let o = pretrain(&data, &tmp.path().join("o"), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epoch"));

    let bad = tmp.path().join("bad.tsv");
    fs::write(&bad, "label\td0\n0\tnot-a-number\n").unwrap();
    let o = spcl(&["probe", "--train", bad.to_str().unwrap(), "--test", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let missing = tmp.path().join("nope");
    assert_eq!(pretrain(&missing, &tmp.path().join("o"), TINY).status.code(), Some(2));
}

#[test]
fn random_init_embedding_needs_a_source() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "0");
    let out = tmp.path().join("e.tsv");
    let o = spcl(&["embed", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let mut args = vec!["embed", "--random-init", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    assert!(spcl(&args).status.success());
}
