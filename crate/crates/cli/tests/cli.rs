use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use relfuzz::protocol::{PairedRequest, PairedResponse, SourceCall, Tolerance};
use relfuzz::synthesizer::TargetCall;
use relfuzz::ValueRepr;
use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mini(file: &str) -> String {
    root().join("fixtures/mini").join(file).to_str().unwrap().to_string()
}

fn relfuzz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relfuzz")).args(args).output().unwrap()
}

fn mock_exec_cmd(script: &str) -> String {
    format!("{} {}", env!("CARGO_BIN_EXE_relfuzz-mock-exec"), script)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn verify_with_agreeing_executor_exits_clean() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("equal.json");
    std::fs::write(&script, r#"{"default": {}}"#).unwrap();
    let out = dir.path().join("report.json");
    let res = relfuzz(&[
        "verify",
        "--corpus",
        &mini("corpus.json"),
        "--mock-script",
        script.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&out);
    assert_eq!(report["iterations"].as_array().unwrap().len(), 1);
    assert_eq!(report["iterations"][0]["fuzz_inputs"], 0);
    assert!(report["inconsistencies"].as_array().unwrap().is_empty());
    assert!(report["verified_pairs"].as_array().unwrap().len() > 10);
}

#[test]
fn infrastructure_errors_exit_2() {
    let res = relfuzz(&[
        "run",
        "--corpus",
        "/nonexistent/corpus.json",
        "--mock-script",
        &mini("mock_script.json"),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("error"));

    let res = relfuzz(&["run", "--corpus", &mini("corpus.json")]);
    assert_eq!(res.status.code(), Some(2), "no executor given");

    let res = relfuzz(&[
        "run",
        "--corpus",
        &mini("corpus.json"),
        "--executor-cmd",
        "/nonexistent/executor",
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("failed to launch"));
}

#[test]
fn unlabeled_inconsistencies_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.json");
    std::fs::write(&labels, r#"{"pairs": []}"#).unwrap();
    let res = relfuzz(&[
        "run",
        "--corpus",
        &mini("corpus.json"),
        "--mock-script",
        &mini("mock_script.json"),
        "--fuzz-count",
        "50",
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("mini.avg_pool -> mini.max_pool"), "{err}");
}

fn golden_run(extra: &[&str]) -> (Output, String) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let mut args = vec![
        "run",
        "--seed",
        "42",
        "--fuzz-count",
        "200",
        "--corpus",
        &mini("corpus.json"),
        "--labels",
        &mini("labels.json"),
        "--out",
        out.to_str().unwrap(),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let res = relfuzz(&refs);
    let text = std::fs::read_to_string(&out).unwrap_or_default();
    (res, text)
}

#[test]
fn mini_campaign_matches_golden_report() {
    let (res, text) = golden_run(&["--mock-script", &mini("mock_script.json")]);
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));
    let golden = root().join("fixtures/mini/golden_report.json");
    if std::env::var_os("RELFUZZ_UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    let want = std::fs::read_to_string(&golden).unwrap();
    assert!(text == want, "report differs from {}", golden.display());

    let report: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["stop_reason"], "fixpoint");
    assert!(report["iterations"].as_array().unwrap().len() < 10);
    assert!(!report["iterations"][0]["newly_covered"].as_array().unwrap().is_empty());
    assert_eq!(report["fpr"]["rate"], 0.0);

    // every seeded relation holds with the expected verdict and plan kind
    let labels = json(&root().join("fixtures/mini/labels.json"));
    let pairs = report["verified_pairs"].as_array().unwrap();
    for rel in labels["relations"].as_array().unwrap() {
        let found = pairs.iter().find(|p| {
            p["source"] == rel["source"]
                && p["target"] == rel["target"]
                && (rel["plan"].is_null() || p["plan"] == rel["plan"])
        });
        let found = found.unwrap_or_else(|| panic!("relation {rel} not verified"));
        assert_eq!(found["verdict"], rel["verdict"], "{rel}");
    }
    let template = pairs.iter().find(|p| p["plan"] == "template").unwrap();
    assert_eq!(template["channel"], "template");
    assert_eq!(
        template["target_call"],
        "mini.tensor_scatter_nd_add(mini.zeros(#3, #2.dtype), #1, #2)"
    );

    let oracles: Vec<(&str, &str)> = report["inconsistencies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| (i["source"].as_str().unwrap(), i["oracle"].as_str().unwrap()))
        .collect();
    assert!(oracles.contains(&("mini.avg_pool", "status")));
    assert!(oracles.contains(&("mini.kth_value", "value")));
}

#[test]
fn subprocess_executor_matches_in_process_mock() {
    let (a, in_process) = golden_run(&["--mock-script", &mini("mock_script.json")]);
    let (b, subprocess) = golden_run(&[
        "--executor-cmd",
        &mock_exec_cmd(&mini("mock_script.json")),
        "--workers",
        "2",
    ]);
    assert_eq!(a.status.code(), Some(1));
    assert_eq!(b.status.code(), Some(1), "{}", String::from_utf8_lossy(&b.stderr));
    assert!(in_process == subprocess, "reports differ between executors");
}

#[test]
fn match_and_synth_subcommands() {
    let res = relfuzz(&["match", "--corpus", &mini("corpus.json"), "--top-k", "3"]);
    assert_eq!(res.status.code(), Some(0));
    let pairs: Value = serde_json::from_slice(&res.stdout).unwrap();
    let pairs = pairs.as_array().unwrap();
    let for_sum: Vec<&Value> = pairs.iter().filter(|p| p["source"] == "mini.sum").collect();
    assert_eq!(for_sum.len(), 3);
    assert_eq!(for_sum[0]["target"], "mini.total");
    assert!(pairs
        .iter()
        .any(|p| p["source"] == "mini.scatter_nd" && p["channel"] == "template"));

    let res = relfuzz(&["synth", "--corpus", &mini("corpus.json")]);
    assert_eq!(res.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&res.stdout).unwrap();
    let plans = doc["plans"].as_array().unwrap();
    let split = plans
        .iter()
        .find(|p| p["source"] == "mini.vsplit" && p["target"] == "mini.tensor_split")
        .unwrap();
    assert_eq!(split["target_call"], "mini.tensor_split(#1, #2, dim=0)");
    assert!(doc["synthesis_failures"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f["source"] == "mini.abs" && f["target"] == "mini.maximum"));
}

#[test]
fn timings_only_when_requested() {
    let (_, plain) = golden_run(&["--mock-script", &mini("mock_script.json")]);
    assert!(!plain.contains("timings"));
    let (_, timed) = golden_run(&["--mock-script", &mini("mock_script.json"), "--record-timings"]);
    let report: Value = serde_json::from_str(&timed).unwrap();
    assert!(report["iterations"][0]["timings"]["verify_ms"].is_u64());
}

/// Replays the shipped request/response transcript against the mock
/// executor process. Any executor implementation must reproduce it.
#[test]
fn protocol_transcript() {
    let dir = root().join("fixtures/protocol");
    let transcript = dir.join("transcript.ndjson");
    let script = dir.join("script.json");
    if std::env::var_os("RELFUZZ_UPDATE_GOLDEN").is_some() {
        write_transcript(&transcript, &script);
    }
    let text = std::fs::read_to_string(&transcript).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_relfuzz-mock-exec"))
        .arg(&script)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let handshake: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    assert_eq!(handshake, serde_json::json!({"ready": true, "protocol": 1}));
    let mut count = 0;
    for line in text.lines() {
        let entry: Value = serde_json::from_str(line).unwrap();
        let req: PairedRequest = serde_json::from_value(entry["request"].clone()).unwrap();
        let want: PairedResponse = serde_json::from_value(entry["response"].clone()).unwrap();
        writeln!(stdin, "{}", serde_json::to_string(&req).unwrap()).unwrap();
        let got: PairedResponse = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
        assert_eq!(got, want, "request {}", req.id);
        count += 1;
    }
    drop(stdin);
    assert!(child.wait().unwrap().success());
    assert!(count >= 4);
}

fn write_transcript(transcript: &Path, script: &Path) {
    let tensor = |shape: Vec<i64>, seed| ValueRepr::tensor_seeded(shape, "float32", seed);
    let call = |id, src: &str, tgt: &str, args: Vec<ValueRepr>| PairedRequest {
        id,
        source: SourceCall {
            api: src.into(),
            positional: args.clone(),
            keyword: Default::default(),
        },
        target: TargetCall::Call {
            api: tgt.into(),
            positional: args,
            keyword: Default::default(),
        },
        tolerance: Tolerance::default(),
        timeout_ms: 1000,
    };
    let mut requests = vec![
        call(1, "mini.sum", "mini.total", vec![tensor(vec![2, 2], 7)]),
        call(
            2,
            "mini.avg_pool",
            "mini.max_pool",
            vec![tensor(vec![1, 4, 4], 1), ValueRepr::int(2)],
        ),
        call(
            3,
            "mini.avg_pool",
            "mini.max_pool",
            vec![tensor(vec![1, -4, 4], 1), ValueRepr::int(2)],
        ),
        call(
            4,
            "mini.kth_value",
            "mini.Tensor.kth_value",
            vec![tensor(vec![5], 3), ValueRepr::int(9)],
        ),
        call(5, "mini.unknown", "mini.sum", vec![ValueRepr::int(5)]),
    ];
    requests.push(PairedRequest {
        id: 6,
        source: SourceCall {
            api: "mini.scatter_nd".into(),
            positional: vec![
                ValueRepr::tensor_seeded(vec![2, 1], "int64", 1),
                tensor(vec![2], 2),
                ValueRepr::List {
                    items: vec![ValueRepr::int(4)],
                },
            ],
            keyword: Default::default(),
        },
        target: TargetCall::Template {
            api: "mini.tensor_scatter_nd_add".into(),
            expr: "mini.tensor_scatter_nd_add(mini.zeros(#3, #2.dtype), #1, #2)".into(),
            bindings: vec![
                ValueRepr::tensor_seeded(vec![2, 1], "int64", 1),
                tensor(vec![2], 2),
                ValueRepr::List {
                    items: vec![ValueRepr::int(4)],
                },
            ],
        },
        tolerance: Tolerance::default(),
        timeout_ms: 1000,
    });
    let script = relfuzz::protocol::MockScript::load(script).unwrap();
    let mut out = String::new();
    for (i, req) in requests.iter().enumerate() {
        let relfuzz::protocol::mock::MockAction::Respond(resp) = script.resolve(i as u64 + 1, req).unwrap() else {
            panic!("transcript requests must not crash the executor");
        };
        let entry = serde_json::json!({ "request": req, "response": resp });
        out.push_str(&serde_json::to_string(&entry).unwrap());
        out.push('\n');
    }
    std::fs::write(transcript, out).unwrap();
}
