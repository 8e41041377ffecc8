use std::path::Path;
use std::process::{Command, Output};

fn ccnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccnn")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Fields of the line starting with `name`; CSV when the line has no spaces.
fn row<'a>(text: &'a str, name: &str) -> Vec<&'a str> {
    text.lines()
        .map(|l| if l.contains(' ') { l.split_whitespace().collect::<Vec<_>>() } else { l.split(',').collect() })
        .find(|cols| cols.first() == Some(&name))
        .unwrap_or_else(|| panic!("no {name} row in\n{text}"))
}

#[test]
fn cost_report_rows() {
    let csv = stdout(&ccnn(&["cost-report", "--format", "csv"]));
    assert_eq!(row(&csv, "fire2"), ["fire2", "11840", "11534336"]);
    assert_eq!(row(&csv, "exit:final"), ["exit:final", "2689259", "90953216"]);
    let table = stdout(&ccnn(&["cost-report", "--spec", "baseline"]));
    assert_eq!(row(&table, "total"), ["total", "2,689,259", "90,953,216"]);
    let q = stdout(&ccnn(&["cost-report", "--quant", "conv=8,fc=4,gwap=8", "--format", "csv"]));
    assert_eq!(row(&q, "storage_bytes"), ["storage_bytes", "3228320.5"]);
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.ccnn");
    let quant = dir.path().join("q.ccnn");
    let metrics = dir.path().join("metrics.csv");
    let trace = dir.path().join("trace.csv");
    let p = |x: &Path| x.to_str().unwrap().to_string();

    let out = ccnn(&[
        "train", "--data", "synth:3x6", "--width-divisor", "8", "--epochs", "1", "--out", &p(&model),
        "--metrics", &p(&metrics),
    ]);
    stdout(&out);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("epoch,head,loss,accuracy,lr\n"));
    assert_eq!(csv.lines().count(), 4);

    let sweep = stdout(&ccnn(&["cascade", "--model", &p(&model), "--data", "synth:3x4:1", "--threshold", "0,1.01", "--trace", &p(&trace)]));
    assert_eq!(row(&sweep, "0.0000")[2], "1.0000");
    assert_eq!(row(&sweep, "1.0100")[2], "0.0000");
    let trace = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(trace.lines().count(), 13);
    assert!(trace.lines().skip(1).all(|l| l.split(',').nth(1) == Some("early")), "{trace}");

    let eval = stdout(&ccnn(&["eval", "--model", &p(&model), "--data", "synth:3x4:1", "--head", "final"]));
    assert_eq!(row(&eval, "final").len(), 2);

    stdout(&ccnn(&["quantize", "--model", &p(&model), "--out", &p(&quant), "--bits", "conv=8,fc=4"]));
    let inspect = stdout(&ccnn(&["inspect", "--model", &p(&quant)]));
    assert!(inspect.contains("q4") && inspect.contains("q8") && inspect.contains("float32"));
}

#[test]
fn failures_exit_nonzero() {
    let unknown = ccnn(&["cost-report", "--bogus"]);
    assert!(!unknown.status.success());
    let missing = ccnn(&["inspect", "--model", "/no/such/file.ccnn"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/no/such/file.ccnn"));
    let bad_bits = ccnn(&["cost-report", "--quant", "conv=7"]);
    assert_eq!(bad_bits.status.code(), Some(1));
    let bad_threshold = ccnn(&["cascade", "--model", "x", "--data", "synth:2x2", "--threshold", "abc"]);
    assert!(!bad_threshold.status.success());
}
