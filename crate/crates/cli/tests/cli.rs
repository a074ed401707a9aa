use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dsse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsse")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_for_equal_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dsse(&["synth", "--pages", "10", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("0 violations"));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 30);
    assert!(ta == tb, "directories differ");
}

#[test]
fn paragraph_only_masks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = dsse(&["synth", "--pages", "4", "--seed", "1", "--classes", "paragraph", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..4 {
        let m = image::open(out.join(format!("pages/{i:06}.mask.png"))).unwrap().to_luma8();
        let mut seen: Vec<u8> = m.pixels().map(|p| p.0[0]).collect();
        seen.sort_unstable();
        seen.dedup();
        assert!(seen.iter().all(|v| *v == 0 || *v == 6), "{seen:?}");
        assert!(seen.contains(&6));
    }
}

#[test]
fn template_pages_pass_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = dsse(&["synth", "--pages", "3", "--template", "report", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 violations"));
}

#[test]
fn bad_config_and_missing_paths_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let o = dsse(&["synth", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = dsse(&["synth", "--classes", "sidebar", "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("missing.toml");
    let o = dsse(&["train", "--config", missing.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = dsse(&["eval", "--pred", dir.path().join("a").to_str().unwrap(), "--gt", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let o = dsse(&["gradcheck", "--seed", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = dsse(&["gradcheck", "--seed", "0", "--inject-fault", "conv2d"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

fn eval_json(pred: &Path, gt: &Path, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["eval", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = dsse(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    assert_eq!(code(&dsse(&["synth", "--pages", "3", "--seed", "2", "--out", gt.to_str().unwrap()])), 0);
    let r = eval_json(&gt, &gt, &[]);
    assert_eq!(r["mean_iou"].as_f64(), Some(1.0));
    assert_eq!(r["pixel_accuracy"].as_f64(), Some(1.0));
    let r = eval_json(&gt, &gt, &["--remap", "3class"]);
    assert_eq!(r["scheme"], "3class");
    assert_eq!(r["mean_iou"].as_f64(), Some(1.0));
}

#[test]
fn eval_reports_mismatched_page_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&dsse(&["synth", "--pages", "3", "--out", a.to_str().unwrap()])), 0);
    assert_eq!(code(&dsse(&["synth", "--pages", "2", "--out", b.to_str().unwrap()])), 0);
    let o = dsse(&["eval", "--pred", b.to_str().unwrap(), "--gt", a.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("000002"));
}
