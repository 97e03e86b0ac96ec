use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cocos-lab"))
        .args(args)
        .env_remove("COCOS_LAB_SEED")
        .output()
        .expect("spawn cocos-lab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "
[experiment]
seed = 3
repeats = 2

[dataset]
num_tuples = 150

[cocos]
batch_n = 16

[run.sh]
loss = triplet_sh
epochs = 2
batch_n = 16
d_out = 8
";

#[test]
fn gradcheck_passes() {
    let o = lab(&["gradcheck", "--trials", "20", "--dims", "2,4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.contains(" PASS ")).count(), 8, "{out}");
}

#[test]
fn exit_codes() {
    assert_eq!(lab(&["--help"]).status.code(), Some(0));
    assert_eq!(lab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lab(&["gen"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let o = lab(&["eval", "--checkpoint", p(&missing), "--data", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    let o = lab(&["report", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, "[run.x]\nloss = nope\n").unwrap();
    assert_eq!(lab(&["run", "--config", p(&bad), "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn gen_train_eval_cocos_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.ini");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let train_out = dir.path().join("train");

    let o = lab(&["gen", "--config", p(&cfg), "--out", p(&data), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(data.join("manifest.txt").is_file());

    let o = lab(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&train_out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = train_out.join("checkpoint.txt");
    assert!(ck.is_file());
    assert!(train_out.join("metrics.txt").is_file());
    assert!(train_out.join("cocos_i2t.txt").is_file());

    let o = lab(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--split", "val"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("val.i2t.r1="), "{out}");
    assert!(out.contains("val.t2i.rsum="), "{out}");

    let o = lab(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--split", "nope"]);
    assert_eq!(o.status.code(), Some(1));

    let o = lab(&["cocos", "--checkpoint", p(&ck), "--data", p(&data), "--loss", "triplet", "--batch-n", "16"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("c_batch.mean="), "{out}");
}

#[test]
fn run_then_report_reproduces_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.ini");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");

    let o = lab(&["run", "--config", p(&cfg), "--out", p(&out), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("label,direction,metric,mean,std"));
    assert!(csv.contains("sh,all,rsum,"));
    assert!(out.join("sh/rep1/metrics.txt").is_file());

    let o = lab(&["report", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap(), csv);
}
