use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpt_core::io::{load_tensor, save_tensor};
use mpt_core::Tensor;

fn mpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpt")).args(args).output().expect("spawn mpt")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_spec(dir: &Path, n_train: usize, n_eval: usize) -> std::path::PathBuf {
    let spec = dir.join("spec.cfg");
    fs::write(&spec, format!("preset = curved\nseed = 3\nn_train = {n_train}\nn_eval = {n_eval}\n")).unwrap();
    spec
}

#[test]
fn phantom_writes_pairs_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 8, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mpt(&["phantom", "--spec", p(&spec), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let train = a.join("train");
    let count = |prefix: &str| {
        fs::read_dir(&train)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_str().unwrap().starts_with(prefix))
            .count()
    };
    assert_eq!(count("img_"), 8);
    assert_eq!(count("mask_"), 8);
    assert_eq!(fs::read_to_string(train.join("manifest.txt")).unwrap().lines().count(), 8);
    for split in ["train", "eval"] {
        for e in fs::read_dir(a.join(split)).unwrap() {
            let name = e.unwrap().file_name();
            assert_eq!(fs::read(a.join(split).join(&name)).unwrap(), fs::read(b.join(split).join(&name)).unwrap());
        }
    }
    let mask = load_tensor(train.join("mask_0000.mtk")).unwrap();
    assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 1, 1);
    let img = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        assert!(mpt(&["--seed", seed, "phantom", "--spec", p(&spec), "--out", p(&out)]).status.success());
        fs::read(out.join("train/img_0000.mtk")).unwrap()
    };
    assert_ne!(img("1", "s1"), img("2", "s2"));
    assert_eq!(img("1", "s1"), img("1", "s1b"));
}

#[test]
fn config_typo_is_a_single_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.cfg");
    fs::write(&spec, "preset = curved\nnoise_sigmaa = 0.1\n").unwrap();
    let o = mpt(&["phantom", "--spec", p(&spec), "--out", p(&dir.path().join("x"))]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("noise_sigmaa"), "{err}");
}

#[test]
fn malformed_magic_and_missing_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mtk");
    fs::write(&bad, b"NOPE\x00\x00\x00\x00").unwrap();
    let img = dir.path().join("img.mtk");
    save_tensor(&img, &Tensor::zeros(&[1, 4, 4])).unwrap();
    let out = dir.path().join("out");
    for args in [
        vec!["deform", "--velocity", p(&bad), "--image", p(&img), "--out", p(&out)],
        vec!["deform", "--velocity", p(&dir.path().join("missing.mtk")), "--image", p(&img), "--out", p(&out)],
    ] {
        let o = mpt(&args);
        assert!(!o.status.success());
        assert_eq!(stderr(&o).trim_end().lines().count(), 1, "{}", stderr(&o));
    }
}

#[test]
fn zero_velocity_deform_reproduces_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let (vel, img, out) = (dir.path().join("v.mtk"), dir.path().join("img.mtk"), dir.path().join("out"));
    save_tensor(&vel, &Tensor::zeros(&[2, 12, 10])).unwrap();
    save_tensor(&img, &Tensor::from_fn(&[1, 12, 10], |i| ((i * 37) % 11) as f64 - 3.5)).unwrap();
    let o = mpt(&["deform", "--velocity", p(&vel), "--steps", "7", "--image", p(&img), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("warped.mtk")).unwrap(), fs::read(&img).unwrap());
    let jac = load_tensor(out.join("jacobian.mtk")).unwrap();
    assert!(jac.data().iter().all(|&v| v == 1.0));
    for name in ["field_row.pgm", "field_col.pgm", "jacobian.pgm", "warped.pgm"] {
        let bytes = fs::read(out.join(name)).unwrap();
        assert!(bytes.starts_with(b"P5\n10 12\n255\n"), "{name}");
        assert_eq!(bytes.len(), "P5\n10 12\n255\n".len() + 120);
    }
}

#[test]
fn gradcheck_single_kernel() {
    let o = mpt(&["gradcheck", "--kernel", "softmax"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max rel-err"));
    let o = mpt(&["gradcheck", "--kernel", "no_such_kernel"]);
    assert!(!o.status.success());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 1, 3);
    let data = dir.path().join("data");
    assert!(mpt(&["phantom", "--spec", p(&spec), "--out", p(&data)]).status.success());
    let o = mpt(&["eval", "--pred", p(&data.join("eval")), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("Dice 1.000 (0.000)"), "{s}");
    assert!(s.contains("clDice 1.000 (0.000)"), "{s}");
    assert!(s.contains("metric,class,value\ndice,1,1.000000\niou,1,1.000000\ncldice,1,1.000000"), "{s}");
}

#[test]
fn train_is_reproducible_and_checkpoint_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 4, 2);
    let data = dir.path().join("data");
    assert!(mpt(&["phantom", "--spec", p(&spec), "--out", p(&data)]).status.success());
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "epochs = 2\nbatch_size = 2\nlr = 1e-3\nn_clusters = 4\n").unwrap();
    let run = |name: &str, extra: &[&str]| {
        let ckpt = dir.path().join(name);
        let mut args = vec!["--seed", "4", "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)];
        args.extend_from_slice(extra);
        let o = mpt(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let log = fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap();
        (fs::read(&ckpt).unwrap(), log)
    };
    let (a, log_a) = run("a.mpck", &[]);
    let (b, log_b) = run("b.mpck", &[]);
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert!(a.starts_with(b"MPCK"));
    let lines: Vec<_> = log_a.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,eval_dice,eval_cldice,min_jacobian");
    assert_eq!(lines.len(), 3);

    let o = mpt(&["eval", "--ckpt", p(&dir.path().join("a.mpck")), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("Dice "));

    // ablations produce smaller checkpoints and still evaluate
    let (c, _) = run("c.mpck", &["--no-mp", "--no-sca"]);
    assert!(c.len() < a.len());
    let o = mpt(&["eval", "--ckpt", p(&dir.path().join("c.mpck")), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
}
