//! Command-line contract: exit codes, outputs and determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

use memlqr::dump::decode_table;
use serde_json::Value;

fn problem(name: &str) -> String {
    format!("{}/../../problems/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str], out: &Path) -> i32 {
    let mut full = vec!["memlqr".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    full.push("--out".into());
    full.push(out.display().to_string());
    memlqr::cli::run(full)
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn out_dir(tmp: &tempfile::TempDir, name: &str) -> PathBuf {
    tmp.path().join(name)
}

#[test]
fn solve_scalar_lqr_writes_report_and_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "solve");
    assert_eq!(run(&["solve", &problem("scalar_lqr.json"), "--no-timing"], &out), 0);
    let r = report(&out);
    assert_eq!(r["schema"], "memlqr-report/1");
    assert_eq!(r["command"], "solve");
    assert_eq!(r["instance"]["N"], 200);
    let j = r["scalars"]["j_open_loop"].as_f64().unwrap();
    assert!((j - 1f64.tanh()).abs() < 1e-3);
    assert!(r.get("timing").is_none());
    let csv = std::fs::read_to_string(out.join("openloop.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,w_1,u_1"));
    assert_eq!(csv.lines().count(), 202);
    let closed = std::fs::read_to_string(out.join("closedloop.csv")).unwrap();
    assert_eq!(closed.lines().count(), 202);
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn zero_weight_gives_zero_cost_and_gains() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "zero");
    assert_eq!(run(&["solve", &problem("zero_weight.json")], &out), 0);
    let r = report(&out);
    assert_eq!(r["scalars"]["j_open_loop"], 0.0);
    assert_eq!(r["scalars"]["j_closed_loop"], 0.0);
    assert_eq!(r["scalars"]["max_gain"], 0.0);
    assert!(r["timing"].is_object());
}

#[test]
fn malformed_file_exits_one_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "bad");
    assert_eq!(run(&["solve", &problem("malformed.json")], &out), 1);
    assert!(!out.exists());
    assert_eq!(run(&["solve", &problem("no_such_file.json")], &out), 1);
    assert!(!out.exists());
    assert_eq!(run(&["frobnicate"], &out), 1);
}

#[test]
fn invalid_instance_exits_two_before_any_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "asym");
    assert_eq!(run(&["verify", &problem("asymmetric_q.json")], &out), 2);
    assert!(!out.exists());
    assert_eq!(run(&["solve", &problem("scalar_lqr.json"), "--checkpoints", "999"], &out), 2);
    assert_eq!(run(&["convergence", &problem("scalar_lqr.json"), "--n", "50,100"], &out), 2);
    assert_eq!(run(&["solve", &problem("scalar_lqr.json"), "--threads", "0"], &out), 2);
    assert!(!out.exists());
}

#[test]
fn reports_are_byte_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (out_dir(&tmp, "a"), out_dir(&tmp, "b"));
    let file = problem("history.json");
    assert_eq!(run(&["solve", &file, "--no-timing"], &a), 0);
    assert_eq!(run(&["solve", &file, "--no-timing", "--threads", "3"], &b), 0);
    for name in ["report.json", "openloop.csv", "closedloop.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn dump_tables_are_decodable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "dump");
    assert_eq!(run(&["solve", &problem("zero_weight.json"), "--dump-tables", "--checkpoints", "10"], &out), 0);
    let tables = decode_table(&std::fs::read(out.join("tables.bin")).unwrap()).unwrap();
    assert_eq!((tables.n, tables.steps), (1, 50));
    assert_eq!(tables.blocks.len(), 4 * 51);
    assert_eq!(tables.blocks[0][(0, 0)], 1.0);
    let checkpoints = decode_table(&std::fs::read(out.join("checkpoints.bin")).unwrap()).unwrap();
    // nodes 0 and 10: 1 + 1 + 1 and 1 + 11 + 121 blocks
    assert_eq!(checkpoints.blocks.len(), 3 + 133);
    let r = report(&out);
    let nodes: Vec<u64> = r["checkpoints"].as_array().unwrap().iter().map(|c| c["node"].as_u64().unwrap()).collect();
    assert_eq!(nodes, vec![0, 10]);
}

#[test]
fn tables_command_checks_identities() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "tables");
    assert_eq!(run(&["tables", &problem("scalar_memory.json")], &out), 0);
    let r = report(&out);
    let names: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"propagator.m_tau_derivative"));
    assert!(out.join("tables.bin").exists());
}

#[test]
fn verify_scalar_lqr_passes_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "verify");
    assert_eq!(run(&["verify", &problem("scalar_lqr.json")], &out), 0);
    let r = report(&out);
    let checks = r["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["name"] == "memoryless.p2_zero"));
    assert!(checks.iter().all(|c| c["tolerance"].is_number()));
}

#[test]
fn convergence_orders_match_the_scheme() {
    let tmp = tempfile::tempdir().unwrap();
    for (scheme, lo, hi) in [("heun", 1.6, 2.4), ("euler", 0.6, 1.4)] {
        let out = out_dir(&tmp, scheme);
        assert_eq!(run(&["convergence", &problem("scalar_lqr.json"), "--scheme", scheme], &out), 0);
        let r = report(&out);
        let order = r["orders"]["p0"]["order"].as_f64().unwrap();
        assert!((lo..=hi).contains(&order), "{scheme}: {order}");
        let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }
    let out = out_dir(&tmp, "zero");
    assert_eq!(run(&["convergence", &problem("zero_weight.json"), "--n", "10,20,40"], &out), 0);
    assert_eq!(report(&out)["orders"]["j_open_loop"]["order"], "exact");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_memlqr");
    let tmp = tempfile::tempdir().unwrap();
    let status = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .arg("--out")
            .arg(tmp.path().join("bin"))
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["solve", &problem("malformed.json")]), Some(1));
    assert_eq!(status(&["solve", &problem("asymmetric_q.json")]), Some(2));
    assert_eq!(status(&["solve", &problem("zero_weight.json")]), Some(0));
}

#[test]
fn numerical_failure_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("explode.json");
    std::fs::write(
        &file,
        r#"{"n":1,"m":1,"A":[800],"B":[1],"Q":[1],"kernel":{"type":"zero"},"T":1,"N":10,"xi0":[1]}"#,
    )
    .unwrap();
    let out = out_dir(&tmp, "explode");
    assert_eq!(run(&["solve", file.to_str().unwrap()], &out), 3);
    assert!(!out.exists());
}
