use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn chunkflow(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkflow"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const RING4: [&str; 6] = [
    "--template",
    "ring_allgather",
    "--world-size",
    "4",
    "--shape",
    "512x256",
];
const AG4: [&str; 6] = [
    "--gemm",
    "1024,512,256",
    "--template",
    "ring_allgather",
    "--world-size",
    "4",
];
const AR4: [&str; 6] = [
    "--gemm",
    "1024,1024,512",
    "--template",
    "partition_allreduce",
    "--world-size",
    "4",
];

#[test]
fn validate_ring_template() {
    let d = tempfile::tempdir().unwrap();
    let o = chunkflow(&[&["validate"][..], &RING4].concat(), d.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(json(&d.path().join("validate.json"))["valid"], true);
    assert!(d.path().join("validate.txt").exists());
}

#[test]
fn validate_names_the_cycle() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&chunkflow(&[&["lower"][..], &RING4].concat(), d.path())),
        0
    );
    // ring op (1,1) waits on (0,0); make (0,0) wait on (1,1) too
    let mut s = json(&d.path().join("schedule.json"));
    assert_eq!(
        s["plans"][1][1]["deps"][0],
        serde_json::json!({"rank": 0, "index": 0})
    );
    s["plans"][0][0]["deps"] = serde_json::json!([{"rank": 1, "index": 1}]);
    let bad = d.path().join("cyclic.json");
    std::fs::write(&bad, s.to_string()).unwrap();

    let o = chunkflow(&["validate", "--schedule", bad.to_str().unwrap()], d.path());
    assert_eq!(code(&o), 1, "{}", text(&o));
    let report = std::fs::read_to_string(d.path().join("validate.txt")).unwrap();
    let line = report
        .lines()
        .find(|l| l.contains("cycle"))
        .expect("cycle reported");
    assert!(line.contains("(0,0)") && line.contains("(1,1)"), "{line}");
}

#[test]
fn missing_kernel_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.json");
    let o = chunkflow(
        &[
            &["validate", "--kernel", missing.to_str().unwrap()][..],
            &RING4,
        ]
        .concat(),
        d.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("file not found"), "{}", text(&o));
}

#[test]
fn bad_flag_values_are_parse_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = chunkflow(
        &[
            "validate",
            "--template",
            "ring",
            "--world-size",
            "2",
            "--shape",
            "8x8",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 2);
    let o = chunkflow(
        &[&["simulate", "--backends", "nvlink"][..], &AG4].concat(),
        d.path(),
    );
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn manifest_paths_resolve_against_its_directory() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&chunkflow(&[&["lower"][..], &RING4].concat(), d.path())),
        0
    );
    let m = d.path().join("run.json");
    std::fs::write(&m, r#"{"schedule": "schedule.json", "out": "res"}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_chunkflow"))
        .args(["validate", "--manifest", m.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(d.path().join("res/validate.json").exists());
}

#[test]
fn simulate_ring_ag_gemm_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = chunkflow(&[&["simulate"][..], &AG4].concat(), d.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let v = json(&d.path().join("verdict.json"));
    assert_eq!(v["verdict"], "PASS");
    assert_eq!(v["oracle_equal"], true);
    let csv = std::fs::read_to_string(d.path().join("trace.csv")).unwrap();
    for r in 0..4 {
        assert!(
            csv.contains(&format!("rank{r}/comm:")),
            "rank {r} comm lane"
        );
        assert!(
            csv.contains(&format!("rank{r}/sm0")),
            "rank {r} compute lane"
        );
    }
    let trace = json(&d.path().join("trace.json"));
    assert!(trace["traceEvents"]
        .as_array()
        .is_some_and(|e| !e.is_empty()));
}

#[test]
fn dropped_wait_under_jitter_fails_citing_a_tile() {
    let d = tempfile::tempdir().unwrap();
    let o = chunkflow(
        &[
            &[
                "simulate",
                "--drop-wait",
                "0",
                "--jitter-us",
                "10",
                "--seed",
                "3",
            ][..],
            &AG4,
        ]
        .concat(),
        d.path(),
    );
    assert_eq!(code(&o), 1, "{}", text(&o));
    let v = json(&d.path().join("verdict.json"));
    assert_eq!(v["verdict"], "FAIL");
    assert!(
        v["first_violation"].as_str().unwrap().starts_with("tile "),
        "{v}"
    );
}

#[test]
fn drop_wait_out_of_range() {
    let d = tempfile::tempdir().unwrap();
    let o = chunkflow(
        &[&["simulate", "--drop-wait", "100000"][..], &AG4].concat(),
        d.path(),
    );
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn single_rank_runs_at_compute_bound() {
    let d = tempfile::tempdir().unwrap();
    // 64 x 4 = 256 tiles on 132 SMs: two waves of 2*128*128*256 flops at 7.5 TFLOP/s per SM
    let o = chunkflow(
        &[
            "simulate",
            "--gemm",
            "8192,512,256",
            "--template",
            "ring_allgather",
            "--world-size",
            "1",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
    let v = json(&d.path().join("verdict.json"));
    let want = 2.0 * (2.0 * 128.0 * 128.0 * 256.0) / 7.5e12 * 1e6;
    let got = v["makespan_us"].as_f64().unwrap();
    assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
}

#[test]
fn plan_then_simulate_saved_program() {
    let d = tempfile::tempdir().unwrap();
    let o = chunkflow(&[&["plan"][..], &AG4].concat(), d.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    for r in 0..4 {
        let dot = std::fs::read_to_string(d.path().join(format!("depgraph_rank{r}.dot"))).unwrap();
        assert!(dot.starts_with("digraph"));
    }
    let prog = d.path().join("program.json");
    let o = chunkflow(&["simulate", "--program", prog.to_str().unwrap()], d.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn trace_reexport_roundtrips() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&chunkflow(&[&["simulate"][..], &AG4].concat(), d.path())),
        0
    );
    let src = d.path().join("trace.json");
    let csv = std::fs::read_to_string(d.path().join("trace.csv")).unwrap();
    let again = d.path().join("again");
    let o = Command::new(env!("CARGO_BIN_EXE_chunkflow"))
        .args([
            "trace",
            "--input",
            src.to_str().unwrap(),
            "--out",
            again.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(
        std::fs::read_to_string(again.join("trace.csv")).unwrap(),
        csv
    );
}

fn tune_rows(dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(dir.join("tune.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn tune_gemm_ar_sweep() {
    let d = tempfile::tempdir().unwrap();
    let args = [
        &[
            "tune",
            "--splits",
            "1,2,3,4,8",
            "--backends",
            "copy_engine,ldst_specialized",
        ][..],
        &AR4,
    ]
    .concat();
    let o = chunkflow(&args, d.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let rows = tune_rows(d.path());
    assert_eq!(rows.len(), 5 * 2);
    // the copy engine cannot reduce
    for r in rows.iter().filter(|r| r[1] == "copy_engine") {
        assert_eq!((r[10].as_str(), r[11].as_str()), ("false", "illegal"));
    }
    let best: Vec<_> = rows.iter().filter(|r| r[12] == "true").collect();
    assert_eq!(best.len(), 1);
    let min = rows
        .iter()
        .filter_map(|r| r[9].parse::<f64>().ok())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best[0][9].parse::<f64>().unwrap(), min);
    let b = json(&d.path().join("best.json"));
    assert_eq!(b["config"]["split"].to_string(), best[0][0]);

    // identical bytes on a repeat run
    let first = std::fs::read(d.path().join("tune.csv")).unwrap();
    let d2 = tempfile::tempdir().unwrap();
    assert_eq!(code(&chunkflow(&args, d2.path())), 0);
    assert_eq!(std::fs::read(d2.path().join("tune.csv")).unwrap(), first);
}

#[test]
fn fully_pruned_space_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let o = chunkflow(
        &[
            &["tune", "--splits", "1,2", "--backends", "copy_engine"][..],
            &AR4,
        ]
        .concat(),
        d.path(),
    );
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(text(&o).contains("pruned illegal: 2"), "{}", text(&o));
    let rows = tune_rows(d.path());
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| !r[11].is_empty()));
}

#[test]
fn annotated_kernel_source() {
    let d = tempfile::tempdir().unwrap();
    let k = d.path().join("gemm.py");
    let src = chunkflow::kernel::print_annotated(&chunkflow::kernel::TileProgram::gemm(
        1024, 512, 256, 128, 128, 64,
    ));
    std::fs::write(&k, src).unwrap();
    let o = chunkflow(
        &[
            "simulate",
            "--kernel",
            k.to_str().unwrap(),
            "--template",
            "ring_allgather",
            "--world-size",
            "2",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
}
