use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn npil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npil"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn npil")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// File contents without `#` comment lines.
fn body(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref())
        .unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Data rows (no comments, no header) of a CSV.
fn rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    body(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

/// Fully observed 12x3x10 tensor from a rank-2 model, as COO text.
fn synthetic_coo(dir: &Path) -> PathBuf {
    let mut text = String::from("i,j,k,value\n");
    for i in 0..12 {
        for j in 0..3 {
            for k in 0..10 {
                let a = [0.1 + 0.03 * i as f64, 0.4 - 0.02 * i as f64];
                let b = [0.5 + 0.1 * j as f64, 0.3];
                let c = [0.2 + 0.05 * k as f64, 0.6 - 0.04 * k as f64];
                let y: f64 = (0..2).map(|r| a[r] * b[r] * c[r]).sum::<f64>() + 0.05;
                text.push_str(&format!("{i},{j},{k},{y}\n"));
            }
        }
    }
    let path = dir.join("synth.coo");
    fs::write(&path, text).unwrap();
    path
}

/// Zero factors with biases u=[0.1,0.2], f=[0,0.3], d=[0,0] and identity params.
const BIAS_MODEL: &str = "npil-model v1
dims 2 2 2 rank 1
0
0
0
0
0
0
0.1 0.2
0 0.3
0 0
params 2
0,0,1
1,0,1
";

fn bias_value(i: usize, j: usize) -> f64 {
    [0.1, 0.2][i] + [0.0, 0.3][j]
}

#[test]
fn ingest_maps_rows_to_cells() {
    let tmp = TempDir::new().unwrap();
    let csv = "day,second,p,q,v\n0,0,1,2,3\n0,1,4,5,6\n1,0,7,8,9\n";
    fs::write(tmp.path().join("raw.csv"), csv).unwrap();
    let out = npil(tmp.path(), &["ingest", "--input", "raw.csv", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let coo = rows(tmp.path().join("o/tensor.coo"));
    assert_eq!(coo.len(), 9);
    assert!(fs::read_to_string(tmp.path().join("o/tensor.coo"))
        .unwrap()
        .contains("# dims 86400 3 2"));
    // Channel p spans 1..7: the middle row maps to 0.5.
    assert!(coo.contains(&vec!["1".into(), "0".into(), "0".into(), "0.5".into()]));
    let params = rows(tmp.path().join("o/params.csv"));
    assert_eq!(params.len(), 2); // first line is treated as a header by `rows`
    assert_eq!(
        body(tmp.path().join("o/params.csv")).lines().next(),
        Some("0,1,7")
    );
}

#[test]
fn ingest_empty_file_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("raw.csv"), "").unwrap();
    let out = npil(tmp.path(), &["ingest", "--input", "raw.csv", "--out", "o"]);
    assert_eq!(code(&out), 2);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn ingest_parse_error_names_line() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("raw.csv"), "day,second,p\n0,0,1\n0,x,2\n").unwrap();
    let out = npil(tmp.path(), &["ingest", "--input", "raw.csv", "--out", "o"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn ingest_density_gives_exact_count() {
    let tmp = TempDir::new().unwrap();
    let mut csv = String::from("day,second,p\n");
    for s in 0..86_400 {
        csv.push_str(&format!("0,{s},{}\n", s % 97));
    }
    fs::write(tmp.path().join("raw.csv"), csv).unwrap();
    let args = [
        "ingest",
        "--input",
        "raw.csv",
        "--density",
        "0.05",
        "--mask-seed",
        "7",
        "--out",
    ];
    let a = npil(tmp.path(), &[&args[..], &["a"]].concat());
    let b = npil(tmp.path(), &[&args[..], &["b"]].concat());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0);
    assert_eq!(rows(tmp.path().join("a/tensor.coo")).len(), 4320);
    assert_eq!(
        fs::read(tmp.path().join("a/tensor.coo")).unwrap(),
        fs::read(tmp.path().join("b/tensor.coo")).unwrap()
    );
}

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--data",
        "synth.coo",
        "--rank",
        "2",
        "--eta",
        "0.02",
        "--lambda",
        "0.001",
        "--max-iters",
        "15",
        "--tol",
        "1e-12",
        "--seed",
        "3",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_plain_writes_artifacts_reproducibly() {
    let tmp = TempDir::new().unwrap();
    synthetic_coo(tmp.path());
    for dir in ["a", "b"] {
        let out = npil(tmp.path(), &train_args(&["--out", dir]));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for file in ["model.txt", "epochs.csv"] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    let epochs = rows(tmp.path().join("a/epochs.csv"));
    assert_eq!(epochs.len(), 15);
    assert!(epochs.iter().all(|r| r[4] == "0"));
    let model = fs::read_to_string(tmp.path().join("a/model.txt")).unwrap();
    assert!(model.starts_with("npil-model v1\n# npil train\n"));
    assert!(model.contains("\"eta\": 0.02"));
    assert!(!tmp.path().join("a/swarm.csv").exists());
}

#[test]
fn identity_gains_match_plain() {
    let tmp = TempDir::new().unwrap();
    synthetic_coo(tmp.path());
    let plain = npil(tmp.path(), &train_args(&["--out", "plain"]));
    let npid = npil(
        tmp.path(),
        &train_args(&[
            "--out",
            "npid",
            "--optimizer",
            "npid-fixed",
            "--gains",
            "1,0,0.005,0,0.005,0,0,0.2,0.005",
        ]),
    );
    assert_eq!(code(&plain), 0, "{}", stderr(&plain));
    assert_eq!(code(&npid), 0, "{}", stderr(&npid));
    for file in ["model.txt", "epochs.csv"] {
        assert_eq!(
            body(tmp.path().join("plain").join(file)),
            body(tmp.path().join("npid").join(file)),
            "{file}"
        );
    }
}

#[test]
fn npil_writes_swarm_trace() {
    let tmp = TempDir::new().unwrap();
    synthetic_coo(tmp.path());
    let out = npil(
        tmp.path(),
        &train_args(&["--out", "o", "--optimizer", "npil", "--max-iters", "4"]),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let header = body(tmp.path().join("o/swarm.csv"))
        .lines()
        .next()
        .unwrap()
        .to_owned();
    assert_eq!(
        header,
        "iteration,particle,fitness,Kp1,Kp2,Kp3,Ki1,Ki2,Kd1,Kd2,Kd3,Kd4"
    );
    let trace = rows(tmp.path().join("o/swarm.csv"));
    let epochs = rows(tmp.path().join("o/epochs.csv")).len();
    assert_eq!(trace.len(), 5 * epochs);
    for it in 1..=epochs {
        let particles: Vec<&str> = trace
            .iter()
            .filter(|r| r[0] == it.to_string())
            .map(|r| r[1].as_str())
            .collect();
        assert_eq!(particles, ["0", "1", "2", "3", "4"]);
    }
    assert!(fs::read_to_string(tmp.path().join("o/model.txt"))
        .unwrap()
        .contains("# gains: Kp1="));
}

#[test]
fn train_divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    synthetic_coo(tmp.path());
    let out = npil(tmp.path(), &train_args(&["--out", "o", "--eta", "50"]));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(tmp.path().join("o/model.txt").exists());
}

#[test]
fn usage_errors_exit_1() {
    let tmp = TempDir::new().unwrap();
    synthetic_coo(tmp.path());
    assert_eq!(code(&npil(tmp.path(), &["train", "--bogus"])), 1);
    assert_eq!(
        code(&npil(tmp.path(), &["train", "--data", "missing.coo"])),
        1
    );
    assert_eq!(
        code(&npil(
            tmp.path(),
            &train_args(&["--optimizer", "npid-fixed"])
        )),
        1
    );
    assert_eq!(code(&npil(tmp.path(), &train_args(&["--eta", "-1"]))), 1);
    assert_eq!(code(&npil(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&npil(tmp.path(), &["--help"])), 0);
}

#[test]
fn config_file_with_flag_override() {
    let tmp = TempDir::new().unwrap();
    synthetic_coo(tmp.path());
    fs::write(
        tmp.path().join("run.json"),
        r#"{"data": "synth.coo", "rank": 2, "eta": 0.02, "lambda": 0.001,
            "max_iters": 15, "tol": 1e-12, "seed": 3, "out": "from-file"}"#,
    )
    .unwrap();
    let out = npil(
        tmp.path(),
        &["train", "--config", "run.json", "--max-iters", "5"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(rows(tmp.path().join("from-file/epochs.csv")).len(), 5);

    // Same run purely from flags gives the same model.
    let flags = npil(
        tmp.path(),
        &train_args(&["--max-iters", "5", "--out", "flags"]),
    );
    assert_eq!(code(&flags), 0);
    assert_eq!(
        body(tmp.path().join("from-file/model.txt")),
        body(tmp.path().join("flags/model.txt"))
    );

    fs::write(tmp.path().join("bad.json"), r#"{"rank": "two"}"#).unwrap();
    assert_eq!(
        code(&npil(tmp.path(), &["train", "--config", "bad.json"])),
        1
    );
    fs::write(tmp.path().join("broken.json"), "{").unwrap();
    assert_eq!(
        code(&npil(tmp.path(), &["train", "--config", "broken.json"])),
        1
    );
}

fn bias_fixture(dir: &Path, observed: usize) {
    fs::write(dir.join("model.txt"), BIAS_MODEL).unwrap();
    let mut coo = String::from("# dims 2 2 2\ni,j,k,value\n");
    let mut n = 0;
    'outer: for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                if n == observed {
                    break 'outer;
                }
                coo.push_str(&format!("{i},{j},{k},{}\n", bias_value(i, j)));
                n += 1;
            }
        }
    }
    fs::write(dir.join("t.coo"), coo).unwrap();
}

#[test]
fn evaluate_exact_model_scores_zero() {
    let tmp = TempDir::new().unwrap();
    bias_fixture(tmp.path(), 8);
    let out = npil(
        tmp.path(),
        &[
            "evaluate",
            "--model",
            "model.txt",
            "--data",
            "t.coo",
            "--set",
            "all",
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = rows(tmp.path().join("e/eval.csv"));
    assert_eq!(r.len(), 1);
    assert_eq!(r[0][0], "all");
    assert!(r[0][1].parse::<f64>().unwrap() < 1e-15);
    assert!(r[0][2].parse::<f64>().unwrap() < 1e-15);
    assert_eq!(r[0][3], "8");

    let test = npil(
        tmp.path(),
        &[
            "evaluate",
            "--model",
            "model.txt",
            "--data",
            "t.coo",
            "--out",
            "t",
        ],
    );
    assert_eq!(code(&test), 0, "{}", stderr(&test));
    assert_eq!(rows(tmp.path().join("t/eval.csv"))[0][3], "1");
}

#[test]
fn evaluate_shape_mismatch_names_both() {
    let tmp = TempDir::new().unwrap();
    bias_fixture(tmp.path(), 8);
    fs::write(
        tmp.path().join("big.coo"),
        "# dims 3 2 2\ni,j,k,value\n0,0,0,1\n",
    )
    .unwrap();
    let out = npil(
        tmp.path(),
        &[
            "evaluate",
            "--model",
            "model.txt",
            "--data",
            "big.coo",
            "--set",
            "all",
        ],
    );
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(
        err.contains("[2, 2, 2]") && err.contains("[3, 2, 2]"),
        "{err}"
    );
}

#[test]
fn impute_bias_model_returns_bias_sums() {
    let tmp = TempDir::new().unwrap();
    bias_fixture(tmp.path(), 8);
    let out = npil(
        tmp.path(),
        &[
            "impute",
            "--model",
            "model.txt",
            "--cell",
            "1,1,0",
            "--cell",
            "0,1,1",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = rows(tmp.path().join("o/impute.csv"));
    assert_eq!(r.len(), 2);
    for row in &r {
        let (i, j): (usize, usize) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        let norm: f64 = row[3].parse().unwrap();
        let raw: f64 = row[4].parse().unwrap();
        assert!((norm - bias_value(i, j)).abs() < 1e-15);
        assert!((raw - norm).abs() < 1e-15);
    }
}

#[test]
fn impute_all_missing_emits_complement() {
    let tmp = TempDir::new().unwrap();
    bias_fixture(tmp.path(), 7);
    let out = npil(
        tmp.path(),
        &[
            "impute",
            "--model",
            "model.txt",
            "--all-missing",
            "--data",
            "t.coo",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = rows(tmp.path().join("o/impute.csv"));
    assert_eq!(r.len(), 1);
    assert_eq!(&r[0][..3], ["1", "1", "1"]);
}

#[test]
fn impute_rejects_out_of_range_cell() {
    let tmp = TempDir::new().unwrap();
    bias_fixture(tmp.path(), 8);
    let out = npil(
        tmp.path(),
        &["impute", "--model", "model.txt", "--cell", "0,2,0"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn benchmark_matrix_is_cross_product() {
    let tmp = TempDir::new().unwrap();
    synthetic_coo(tmp.path());
    let out = npil(
        tmp.path(),
        &[
            "benchmark",
            "--data",
            "synth.coo",
            "--optimizers",
            "plain,npil",
            "--densities",
            "0.5",
            "--seeds",
            "1,2",
            "--rank",
            "2",
            "--eta",
            "0.02",
            "--lambda",
            "0.001",
            "--max-iters",
            "5",
            "--out",
            "b",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = body(tmp.path().join("b/summary.csv"));
    assert_eq!(
        summary.lines().next(),
        Some("optimizer,density,seed,final_rmse,final_mae,epochs,seconds")
    );
    let r = rows(tmp.path().join("b/summary.csv"));
    let keys: Vec<(&str, &str)> = r.iter().map(|r| (r[0].as_str(), r[2].as_str())).collect();
    assert_eq!(
        keys,
        [("plain", "1"), ("plain", "2"), ("npil", "1"), ("npil", "2")]
    );
    assert!(r.iter().all(|r| r[3].parse::<f64>().unwrap().is_finite()));
    assert!(tmp.path().join("b/runs/npil-d0.5-s1/swarm.csv").exists());
    assert!(tmp.path().join("b/runs/plain-d0.5-s2/epochs.csv").exists());
}

#[test]
fn benchmark_keeps_going_after_failed_run() {
    let tmp = TempDir::new().unwrap();
    synthetic_coo(tmp.path());
    // A density above the data's own density cannot be produced by masking.
    let out = npil(
        tmp.path(),
        &[
            "benchmark",
            "--data",
            "synth.coo",
            "--optimizers",
            "plain",
            "--densities",
            "0.5,1.5",
            "--seeds",
            "1",
            "--rank",
            "2",
            "--max-iters",
            "3",
            "--out",
            "b",
        ],
    );
    assert_eq!(code(&out), 2);
    let r = rows(tmp.path().join("b/summary.csv"));
    assert_eq!(r.len(), 2);
    assert!(r[0][3].parse::<f64>().unwrap().is_finite());
    assert_eq!(r[1][3], "NaN");
}
