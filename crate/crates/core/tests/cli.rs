use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kw"))
        .args(args)
        .output()
        .expect("run kw")
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn plan_resnet18_reports_table() {
    let o = kw(&["plan", &config("resnet18_kw_1x.toml")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for n in [56, 47, 47, 27] {
        assert!(text.contains(&format!("n={n}")), "{text}");
    }
    assert!(text.contains("11.93M"));
    let json: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(json["params"]["total"], 11_928_355);
    let n: Vec<u64> = json["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["n"].as_u64().unwrap())
        .collect();
    assert_eq!(n, [56, 47, 47, 27]);
}

#[test]
fn plan_json_only() {
    let o = kw(&["plan", "--json", &config("resnet18_baseline.toml")]);
    assert!(o.status.success());
    let json: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(json["params"]["total"], 11_689_512);
    assert_eq!(json["total_m"], "11.69M");
}

#[test]
fn every_shipped_config_plans() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let o = kw(&["plan", "--json", path.to_str().unwrap()]);
            assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
            count += 1;
        }
    }
    assert!(count >= 8);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let toy = std::fs::read_to_string(config("toy.toml")).unwrap();

    let bad_budget = write(dir.path(), "frac.toml", &toy.replace("b = \"1\"", "b = \"3/5\""));
    let o = kw(&["plan", &bad_budget]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("nearest valid b is 4/7"), "{err}");
    assert!(err.contains("kw1, kw2, kw3"), "{err}");

    let indivisible = write(
        dir.path(),
        "div.toml",
        &toy.replace("b = \"1\"", "b = \"1\"\nscale_divisors = { c = 3 }"),
    );
    let o = kw(&["plan", &indivisible]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let empty = write(dir.path(), "empty.toml", "[model]\n");
    assert_eq!(kw(&["plan", &empty]).status.code(), Some(2));

    let broken = write(dir.path(), "broken.toml", "[model\n");
    assert_eq!(kw(&["plan", &broken]).status.code(), Some(2));

    let unknown = write(dir.path(), "unknown.toml", "[model]\npreset = \"vgg\"\n");
    assert_eq!(kw(&["plan", &unknown]).status.code(), Some(2));

    assert_eq!(kw(&["plan", "/nonexistent/config.toml"]).status.code(), Some(2));
    assert_eq!(kw(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_then_dump() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("toy.kwck");
    let metrics = dir.path().join("metrics.csv");
    let o = kw(&[
        "train",
        &config("toy.toml"),
        "--epochs",
        "2",
        "--seed",
        "4",
        "--out",
        ckpt.to_str().unwrap(),
        "--metrics",
        metrics.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("epoch=1 loss="));
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("epoch,loss,accuracy,tau\n1,"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(&std::fs::read(&ckpt).unwrap()[..4], b"KWCK");

    let out = dir.path().join("attn");
    let o = kw(&[
        "attn-dump",
        ckpt.to_str().unwrap(),
        &config("toy.toml"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("w.csv")).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("e1,e2,e3,e4,e5,e6,e7"));
    assert_eq!(rows.count(), 7);

    let o = kw(&[
        "attn-dump",
        ckpt.to_str().unwrap(),
        &config("toy_half.toml"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn untrained_dump_is_one_hot() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.kwck");
    let o = kw(&[
        "train",
        &config("toy_half.toml"),
        "--epochs",
        "0",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("attn");
    let o = kw(&[
        "attn-dump",
        ckpt.to_str().unwrap(),
        &config("toy_half.toml"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("w.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("e1,e2,") && header.ends_with(",e14,ez"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 28);
    for (r, row) in rows.iter().enumerate() {
        let hot = if r < 14 { r } else { 14 };
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, if j == hot { "1" } else { "0" }, "row {r} col {j}");
        }
    }
}

#[test]
fn gradcheck_passes_and_fails_on_threshold() {
    let o = kw(&["gradcheck", &config("toy_half.toml"), "--tau", "0.25"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("max_rel_err="));
    let o = kw(&["gradcheck", &config("toy.toml"), "--threshold", "1e-300"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sequential_flag_gives_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.kwck");
    let b = dir.path().join("b.kwck");
    for (path, extra) in [(&a, None), (&b, Some("--sequential"))] {
        let mut args = vec![
            "train",
            &config("toy.toml"),
            "--epochs",
            "1",
            "--out",
            path.to_str().unwrap(),
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.map(String::from));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        assert!(kw(&refs).status.success());
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}
