use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tractseg::eval::dice;
use tractseg::synth::{toy_sample, ToyOptions};
use tractseg::tensorfit::{simulate_dwi, DiffusionScheme, TensorField};
use tractseg::volume::{load_nifti, save_nifti, Mask, Volume};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tractseg"))
        .args(args)
        .env("N4N_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["gradcheck", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["regress", "--table", "x.csv", "--model", "3", "--out", "y"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["scalars", "--tensor", p(&dir.path().join("missing.nii")), "--out-prefix", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.nii");
    write(&bad, "definitely not nifti");
    let out = run(&["roi", "--masks", p(&bad), "--out", p(&dir.path().join("roi.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("roi.json").exists());
}

#[test]
fn gradcheck_default_config_passes() {
    let out = run(&["gradcheck", "--tol", "1e-4"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
}

#[test]
fn tensor_fit_and_scalars() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let grid = Volume::zeros(&[3, 2, 2]);
    let mut truth = TensorField::zeros_like(&grid);
    for i in 0..truth.n_voxels() {
        let s = 1.0 + 0.1 * i as f64;
        truth.set(i, &[1.7e-3 * s, 0.0, 0.0, 0.2e-3 * s, 0.0, 0.2e-3 * s]);
    }
    let scheme = DiffusionScheme::clinical_25();
    save_nifti(&simulate_dwi(&truth, 1000.0, &scheme), d.join("dwi.nii")).unwrap();
    save_nifti(Mask::full(&grid).volume(), d.join("mask.nii")).unwrap();
    let bvals: Vec<String> = scheme.bvals().iter().map(|b| b.to_string()).collect();
    write(&d.join("bval"), &bvals.join(" "));
    let rows: Vec<String> = (0..3)
        .map(|c| scheme.bvecs().iter().map(|g| format!("{:.10}", g[c])).collect::<Vec<_>>().join(" "))
        .collect();
    write(&d.join("bvec"), &rows.join("\n"));

    let tensor = d.join("tensor.nii");
    ok(&run(&[
        "fit-tensor", "--dwi", p(&d.join("dwi.nii")), "--bval", p(&d.join("bval")), "--bvec", p(&d.join("bvec")),
        "--mask", p(&d.join("mask.nii")), "--out", p(&tensor),
    ]));
    let fitted = load_nifti(&tensor).unwrap();
    assert_eq!(fitted.channels(), 6);
    for (a, b) in fitted.data().iter().zip(truth.tensor.data()) {
        assert!((a - b).abs() <= 1e-6 * 2e-3, "{a} vs {b}");
    }

    let prefix = format!("{}/s_", d.display());
    ok(&run(&["scalars", "--tensor", p(&tensor), "--out-prefix", &prefix]));
    let fa = load_nifti(format!("{prefix}FA.nii")).unwrap();
    assert!((fa.data()[0] - 0.8704).abs() < 1e-3);
    let mo = load_nifti(format!("{prefix}MO.nii")).unwrap();
    assert!((mo.data()[0] - 1.0).abs() < 1e-4);

    let norm = d.join("norm.nii");
    ok(&run(&[
        "fit-tensor", "--dwi", p(&d.join("dwi.nii")), "--bval", p(&d.join("bval")), "--bvec", p(&d.join("bvec")),
        "--mask", p(&d.join("mask.nii")), "--out", p(&norm), "--normalize", "--no-lm",
    ]));
    let v = load_nifti(&norm).unwrap();
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.data().len() as f64;
    assert!(mean.abs() < 1e-5);
}

/// Toy volumes on disk plus a manifest; returns (manifest, tensors, labels).
fn toy_files(d: &Path, n: usize, dims: [usize; 3]) -> (PathBuf, Vec<PathBuf>, Vec<PathBuf>) {
    let mut lines = vec!["tensor,label".to_string()];
    let (mut ts, mut ls) = (vec![], vec![]);
    for i in 0..n {
        let s = toy_sample(100 + i as u64, &ToyOptions { dims, ..Default::default() });
        let (t, l) = (d.join(format!("t{i}.nii")), d.join(format!("l{i}.nii")));
        save_nifti(&s.tensor, &t).unwrap();
        save_nifti(s.label.volume(), &l).unwrap();
        lines.push(format!("t{i}.nii,l{i}.nii"));
        ts.push(t);
        ls.push(l);
    }
    let m = d.join("train.csv");
    write(&m, &(lines.join("\n") + "\n"));
    (m, ts, ls)
}

#[test]
fn train_segment_overfits_toy_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (manifest, tensors, labels) = toy_files(d, 2, [16, 16, 16]);
    let cfg = d.join("cfg.json");
    write(&cfg, r#"{"depth": 2, "base_channels": 8, "epochs": 150, "target_dice": 0.97}"#);
    let ck = d.join("model.ckpt");
    let hist = d.join("history.csv");
    ok(&run(&[
        "train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&ck), "--history", p(&hist),
        "--validation", "train",
    ]));
    assert!(std::fs::read_to_string(&hist).unwrap().lines().nth(1).unwrap().ends_with(",42"));

    let mask = d.join("seg.nii");
    ok(&run(&[
        "segment", "--checkpoint", p(&ck), "--tensor", p(&tensors[0]), "--mask", p(&mask), "--prob",
        p(&d.join("prob.nii")),
    ]));
    let pred = Mask::try_from_volume(load_nifti(&mask).unwrap()).unwrap();
    let truth = Mask::try_from_volume(load_nifti(&labels[0]).unwrap()).unwrap();
    let dc = dice(&pred, &truth, None).unwrap();
    assert!(dc >= 0.95, "Dice {dc}");

    // eval over the same pair in both manifests
    let pm = d.join("pred.csv");
    write(&pm, "subject,tract,mask\ns1,toy,seg.nii\n");
    let rm = d.join("ref.csv");
    write(&rm, "subject,tract,mask\ns1,toy,l0.nii\n");
    let out = d.join("eval.csv");
    ok(&run(&["eval", "--pred", p(&pm), "--ref", p(&rm), "--out", p(&out)]));
    let text = std::fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "s1");
    assert!((row[2].parse::<f64>().unwrap() - dc).abs() < 1e-6);
}

#[test]
fn training_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (manifest, _, _) = toy_files(d, 3, [8, 8, 8]);
    let cfg = d.join("cfg.json");
    write(&cfg, r#"{"depth": 2, "base_channels": 4, "epochs": 3}"#);
    let (a, b) = (d.join("a.ckpt"), d.join("b.ckpt"));
    for out in [&a, &b] {
        ok(&run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(out), "--seed", "7"]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = d.join("c.ckpt");
    ok(&run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&c), "--seed", "8"]));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn roi_union_is_aligned_to_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut m1 = Mask::empty([20, 20, 20]);
    m1.set(3, 4, 5, true);
    let mut m2 = Mask::empty([20, 20, 20]);
    m2.set(9, 6, 5, true);
    save_nifti(m1.volume(), d.join("m1.nii")).unwrap();
    save_nifti(m2.volume(), d.join("m2.nii")).unwrap();
    let out = d.join("roi.json");
    ok(&run(&["roi", "--masks", p(&d.join("m1.nii")), p(&d.join("m2.nii")), "--out", p(&out)]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["min"], serde_json::json!([3, 4, 5]));
    assert_eq!(v["max"], serde_json::json!([9, 6, 5]));
    assert_eq!(v["seed"], 42);

    let cfg = d.join("cfg.json");
    write(&cfg, r#"{"depth": 3}"#);
    ok(&run(&["roi", "--masks", p(&d.join("m1.nii")), p(&d.join("m2.nii")), "--config", p(&cfg), "--out", p(&out)]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    // depth 3: at least 8 voxels and a multiple of 4 on every axis
    assert_eq!(v["dims"], serde_json::json!([8, 8, 8]));
}

#[test]
fn rescan_reports_epsilon_kappa_and_r2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let grid = Volume::zeros(&[6, 6, 6]);
    let mut lines = vec!["subject,tract,tensor1,mask1,tensor2,mask2".to_string()];
    for s in 0..4 {
        for scan in 0..2 {
            let mut t = TensorField::zeros_like(&grid);
            let l1 = 1.5e-3 + 0.1e-3 * s as f64 + 0.01e-3 * scan as f64;
            for i in 0..t.n_voxels() {
                t.set(i, &[l1, 0.0, 0.0, 0.3e-3, 0.0, 0.3e-3]);
            }
            save_nifti(&t.tensor, d.join(format!("t{s}_{scan}.nii"))).unwrap();
            let mut m = Mask::empty([6, 6, 6]);
            for x in 1..4 + scan {
                m.set(x, 2, 2, true);
                m.set(x, 3, 2, true);
            }
            save_nifti(m.volume(), d.join(format!("m{s}_{scan}.nii"))).unwrap();
        }
        lines.push(format!("s{s},cgc,t{s}_0.nii,m{s}_0.nii,t{s}_1.nii,m{s}_1.nii"));
    }
    let manifest = d.join("rescan.csv");
    write(&manifest, &(lines.join("\n") + "\n"));
    let (out, r2) = (d.join("out.csv"), d.join("r2.csv"));
    ok(&run(&["rescan", "--manifest", p(&manifest), "--out", p(&out), "--r2-out", p(&r2), "--seed", "5"]));
    let text = std::fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[..2], ["s0", "cgc"]);
    // 6 vs 8 voxels, 6 shared
    assert!((row[2].parse::<f64>().unwrap() - 12.0 / 14.0).abs() < 1e-6);
    assert!((row[6].parse::<f64>().unwrap() - 2.0 / 7.0 * 100.0).abs() < 1e-4);
    assert_eq!(row[7], "5");
    let r2_text = std::fs::read_to_string(&r2).unwrap();
    assert!(r2_text.lines().any(|l| l.starts_with("cgc,FA,4,")));
}

#[test]
fn regress_and_group_compare() {
    use tractseg::stats::{synthetic_cohort, CohortOptions};
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let table = d.join("cohort.csv");
    write(&table, &synthetic_cohort(&CohortOptions::default()).to_csv());
    let out = d.join("report.csv");
    ok(&run(&["regress", "--table", p(&table), "--model", "2", "--tests", "84", "--out", p(&out)]));
    let text = std::fs::read_to_string(&out).unwrap();
    let fa: Vec<&str> = text.lines().find(|l| l.starts_with("T,FA,2,")).unwrap().split(',').collect();
    assert!((fa[4].parse::<f64>().unwrap() + 1.0).abs() < 0.3);
    assert!(fa[7].starts_with("5.952381e-4"));

    let mut lines = vec!["group,FA_X,MD_X".to_string()];
    for (g, shift) in [("ad", 0.0), ("bvftd", 0.05), ("ctrl", 0.1)] {
        for k in 0..12 {
            let jitter = ((k * 7) % 5) as f64 * 0.01;
            lines.push(format!("{g},{},{}", 0.4 + shift + jitter, 0.8 + jitter));
        }
    }
    let gt = d.join("groups.csv");
    write(&gt, &(lines.join("\n") + "\n"));
    let out = d.join("groups_out.csv");
    ok(&run(&["group-compare", "--table", p(&gt), "--welch", "off", "--out", p(&out)]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().any(|l| l.starts_with("FA_X,anova,")));
    assert!(text.lines().any(|l| l.starts_with("FA_X,bonferroni_t,ad,bvftd,")));
    ok(&run(&["group-compare", "--table", p(&gt), "--welch", "on", "--measures", "FA_X", "--out", p(&out)]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().any(|l| l.starts_with("FA_X,games_howell,ad,ctrl,")));
    assert!(!text.contains("MD_X"));
}
