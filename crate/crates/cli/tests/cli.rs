use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn saboteur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saboteur"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn saboteur")
}

fn ok(args: &[&str]) -> Output {
    let out = saboteur(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: TempDir,
    model: PathBuf,
}

fn lenet_setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = dir.path().join("lenet");
    let out = ok(&["make-model", "--seed", "3", "--out", s(&model_dir)]);
    let model = PathBuf::from(stdout(&out).trim());
    assert!(model.exists());
    Setup { dir, model }
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn analyze_produces_loadable_db() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth-corpus", "--kind", "Conv2D", "--shape", "8,6,6", "--pairs", "300", "--seed", "1", "--out", s(&corpus)]);
    let db = dir.path().join("db.json");
    let out = ok(&["analyze", "--corpus", s(&corpus), "--out", s(&db)]);
    assert!(stdout(&out).contains("Conv2D"));
    assert!(dir.path().join("db.json.report.json").exists());
    let v = ok(&["validate-db", s(&db)]);
    assert!(stdout(&v).starts_with("ok:"));
}

#[test]
fn analyze_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = saboteur(&["analyze", "--corpus", s(dir.path()), "--out", s(&dir.path().join("db.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no corpus entries"), "{}", stderr(&out));
    assert!(!dir.path().join("db.json").exists());
}

#[test]
fn analyze_warns_on_unknown_meta_field() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth-corpus", "--kind", "Add", "--shape", "4,5,5", "--pairs", "20", "--out", s(&corpus)]);
    let batch = fs::read_dir(&corpus).unwrap().next().unwrap().unwrap().path();
    let meta = batch.join("meta.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta).unwrap()).unwrap();
    v["camera"] = "unused".into();
    fs::write(&meta, v.to_string()).unwrap();
    let out = ok(&["analyze", "--corpus", s(&corpus), "--out", s(&dir.path().join("db.json")), "--min-samples", "1"]);
    assert!(stderr(&out).contains("unknown field `camera`"), "{}", stderr(&out));
}

#[test]
fn validate_db_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("db.json");
    fs::write(&p, "{\"schema_version\": 1, \"kinds\": 3}").unwrap();
    assert_eq!(saboteur(&["validate-db", s(&p)]).status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible_across_workers() {
    let st = lenet_setup();
    let cfg = write_config(st.dir.path(), "c.toml", "experiments = 300\nseed = 11\n");
    let mut runs = Vec::new();
    for (i, w) in ["1", "8", "1"].iter().enumerate() {
        let out = st.dir.path().join(format!("r{i}.jsonl"));
        let o = ok(&["simulate", "--model", s(&st.model), "--config", s(&cfg), "--workers", w, "--out", s(&out)]);
        assert!(stdout(&o).contains("300 experiments"), "{}", stdout(&o));
        assert!(st.dir.path().join(format!("r{i}.jsonl.meta.json")).exists());
        runs.push(fs::read(&out).unwrap());
    }
    assert!(runs.iter().all(|r| *r == runs[0]));
    assert_eq!(runs[0].iter().filter(|b| **b == b'\n').count(), 300);
}

#[test]
fn simulate_rejects_zero_experiments() {
    let st = lenet_setup();
    let cfg = write_config(st.dir.path(), "c.toml", "experiments = 0\nseed = 1\n");
    let out = st.dir.path().join("r.jsonl");
    let o = saboteur(&["simulate", "--model", s(&st.model), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn simulate_without_fallback_names_missing_kinds() {
    let st = lenet_setup();
    let cfg = write_config(st.dir.path(), "c.toml", "experiments = 10\nseed = 1\nfallback = false\n");
    let out = st.dir.path().join("r.jsonl");
    let o = saboteur(&["simulate", "--model", s(&st.model), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for kind in ["Dense", "Flatten", "MaxPool", "Softmax"] {
        assert!(err.contains(kind), "{err}");
    }
}

#[test]
fn report_renders_text_and_json() {
    let st = lenet_setup();
    let cfg = write_config(st.dir.path(), "c.toml", "experiments = 400\nseed = 4\n");
    let rec = st.dir.path().join("r.jsonl");
    ok(&["simulate", "--model", s(&st.model), "--config", s(&cfg), "--out", s(&rec)]);

    let text = stdout(&ok(&["report", "--records", s(&rec)]));
    assert!(text.contains("400"), "{text}");

    let json_path = st.dir.path().join("report.json");
    ok(&["report", "--records", s(&rec), "--format", "json", "--out", s(&json_path)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert!(v["schema_version"].is_u64());
    assert_eq!(v["totals"]["count"], 400);
    assert_eq!(v["metadata"]["seed"], 4);

    let site_rows: Vec<f64> = text
        .lines()
        .skip_while(|l| !l.starts_with("site "))
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().last().unwrap().trim_end_matches('%').parse().unwrap())
        .collect();
    assert_eq!(site_rows.len(), 13, "{text}");
    assert!(site_rows.windows(2).all(|w| w[0] >= w[1]), "{site_rows:?}");
}

#[test]
fn report_names_truncated_line() {
    let st = lenet_setup();
    let cfg = write_config(st.dir.path(), "c.toml", "experiments = 20\nseed = 4\n");
    let rec = st.dir.path().join("r.jsonl");
    ok(&["simulate", "--model", s(&st.model), "--config", s(&cfg), "--out", s(&rec)]);
    let mut bytes = fs::read(&rec).unwrap();
    bytes.truncate(bytes.len() - 10);
    fs::write(&rec, bytes).unwrap();
    let o = saboteur(&["report", "--records", s(&rec)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 20"), "{}", stderr(&o));
}

fn tiny_model(dir: &Path) -> PathBuf {
    let manifest = serde_json::json!({
        "inputs": [{ "name": "x", "shape": [4] }],
        "outputs": ["s"],
        "nodes": [
            { "id": "e", "kind": "Exp", "inputs": ["x"] },
            { "id": "s", "kind": "Sigmoid", "inputs": ["e"] }
        ]
    });
    let p = dir.join("model.json");
    fs::write(&p, manifest.to_string()).unwrap();
    p
}

#[test]
fn trace_dumps_every_node() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let input = dir.path().join("x.bin");
    let values: Vec<u8> = [0.5f32, -1.0, 2.0, 0.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&input, values).unwrap();

    let dump = |name: &str| {
        let out = dir.path().join(name);
        ok(&["trace", "--model", s(&model), "--input", &format!("x={}", s(&input)), "--out", s(&out)]);
        out
    };
    let a = dump("a");
    let mut files: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["000_e.bin", "001_s.bin", "sites.json"]);
    let sites: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("sites.json")).unwrap()).unwrap();
    assert_eq!(sites["sites"].as_array().unwrap().len(), 2);
    let e = fs::read(a.join("000_e.bin")).unwrap();
    assert_eq!(f32::from_le_bytes(e[0..4].try_into().unwrap()), 0.5f32.exp());

    let b = dump("b");
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn trace_without_input_fails() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let o = saboteur(&["trace", "--model", s(&model), "--input", "y=/nonexistent", "--out", s(&dir.path().join("t"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing input `x`"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(saboteur(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(saboteur(&["simulate"]).status.code(), Some(1));
    assert_eq!(saboteur(&["--help"]).status.code(), Some(0));
}
