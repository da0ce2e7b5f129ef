use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mkanet::mask::{ClassMask, IGNORE};
use mkanet::pnm::{read_mask, write_mask};

fn mkanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkanet"))
        .args(args)
        .env("MKANET_THREADS", "1")
        .output()
        .expect("spawn mkanet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(code(&mkanet(&["--help"])), 0);
    assert_eq!(code(&mkanet(&["train", "--help"])), 0);
    let o = mkanet(&["bench", "--sizes", "64"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("--sizes"), "{}", stderr(&o));
    let o = mkanet(&["synth", "--n", "two", "--out", "/tmp/x"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("--n"), "{}", stderr(&o));
}

#[test]
fn gen_boundary_stripes_and_constant() {
    let dir = tempfile::tempdir().unwrap();
    // Vertical stripes 6 px wide: thinner than 2d for d = 50, so kept whole.
    let stripes = ClassMask::from_fn(64, 96, |_, x| ((x / 6) % 3) as u8);
    let input = dir.path().join("stripes.pgm");
    let out = dir.path().join("b.pgm");
    write_mask(&input, &stripes).unwrap();
    assert_eq!(code(&mkanet(&["gen-boundary", "--mask", p(&input), "--d", "50", "--out", p(&out)])), 0);
    assert_eq!(read_mask(&out).unwrap(), stripes);

    let flat = dir.path().join("flat.pgm");
    write_mask(&flat, &ClassMask::filled(16, 16, 2)).unwrap();
    assert_eq!(code(&mkanet(&["gen-boundary", "--mask", p(&flat), "--d", "3", "--out", p(&out)])), 0);
    assert!(read_mask(&out).unwrap().labels().iter().all(|&l| l == IGNORE));

    assert_eq!(code(&mkanet(&["gen-boundary", "--mask", p(&flat), "--d", "0", "--out", p(&out)])), 3);
    let missing = dir.path().join("none.pgm");
    assert_eq!(code(&mkanet(&["gen-boundary", "--mask", p(&missing), "--d", "1", "--out", p(&out)])), 2);
}

#[test]
fn params_closed_forms() {
    let o = mkanet(&["params", "--M", "3", "--N", "64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("mka,64,") && l.contains(",15040,15040,576,2176,12288,true")), "{out}");
    assert!(out.lines().all(|l| !l.ends_with("false")), "{out}");

    let o = mkanet(&["params", "--M", "1", "--N", "8"]);
    assert_eq!(code(&o), 0);
    let row = stdout(&o).lines().find(|l| l.starts_with("mka,")).unwrap().to_string();
    assert_eq!(row.split(',').nth(7), Some("0"), "{row}");
    assert_eq!(code(&mkanet(&["params", "--variant", "huge"])), 3);
}

#[test]
fn bench_orders_variants() {
    let o = mkanet(&["bench", "--size", "64", "--repeat", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<Vec<String>> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let params: Vec<u64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    let macs: Vec<u64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(params[0] < params[1] && params[1] < params[2]);
    assert!(macs[0] < macs[1] && macs[1] < macs[2]);
    for r in &rows {
        let (min, med): (f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap());
        assert!(min > 0.0 && min <= med);
    }
}

#[test]
fn eval_identity_and_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    let m = ClassMask::from_fn(8, 8, |y, x| ((y + x) % 2) as u8);
    write_mask(gt.join("a.pgm"), &m).unwrap();
    write_mask(pred.join("a.pgm"), &m).unwrap();
    let o = mkanet(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--K", "2"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("mean,1.0,1.0"), "{}", stdout(&o));

    let flipped = ClassMask::from_fn(8, 8, |y, x| 1 - m.get(y, x));
    write_mask(pred.join("a.pgm"), &flipped).unwrap();
    let o = mkanet(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--K", "2"]);
    assert!(stdout(&o).contains("mean,0.0,0.0"), "{}", stdout(&o));

    // Shared oracle: the worked confusion matrix [[3, 1], [1, 3]].
    let g = ClassMask::new(1, 8, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
    let q = ClassMask::new(1, 8, vec![0, 0, 0, 1, 0, 1, 1, 1]).unwrap();
    write_mask(gt.join("a.pgm"), &g).unwrap();
    write_mask(pred.join("a.pgm"), &q).unwrap();
    let o = mkanet(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--K", "2"]);
    let mean = stdout(&o).lines().last().unwrap().to_string();
    let v: Vec<f64> = mean.split(',').skip(1).map(|s| s.parse().unwrap()).collect();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12, "{mean}");

    assert_eq!(code(&mkanet(&["eval", "--pred", p(&pred), "--gt", p(&gt)])), 3);
}

#[test]
fn synth_train_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = mkanet(&["synth", "--n", "2", "--size", "64", "--K", "3", "--seed", "5", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = dir.path().join("again");
    mkanet(&["synth", "--n", "2", "--size", "64", "--K", "3", "--seed", "5", "--out", p(&again)]);
    for f in ["images/0001.ppm", "masks/0001.pgm", "palette.txt"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "c = 16\nepochs = 2\nwarmup_epochs = 1\nbatch = 2\naux_losses = false\n").unwrap();
    let (ck, log) = (dir.path().join("m.ck"), dir.path().join("log.csv"));
    let o = mkanet(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ck), "--log", p(&log), "--set", "seed=3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&log).unwrap();
    assert!(csv.starts_with("epoch,l_m,l_a,l_b,lr,train_miou\n"));
    for row in csv.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[2], f[3]), ("0.0", "0.0"), "{row}");
    }

    let pred = dir.path().join("pred.pgm");
    let image = data.join("images/0000.ppm");
    assert_eq!(code(&mkanet(&["infer", "--ckpt", p(&ck), "--image", p(&image), "--out", p(&pred)])), 0);
    assert_eq!(read_mask(&pred).unwrap().height(), 64);
    let probs = dir.path().join("p.csv");
    let o = mkanet(&[
        "infer", "--ckpt", p(&ck), "--image", p(&image), "--out", p(&pred), "--tile", "64", "--probs", p(&probs),
    ]);
    assert_eq!(code(&o), 0);
    let first = fs::read_to_string(&probs).unwrap().lines().nth(1).unwrap().to_string();
    let s: f64 = first.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
    assert!((s - 1.0).abs() < 1e-9);

    let missing = dir.path().join("none.ck");
    assert_eq!(code(&mkanet(&["infer", "--ckpt", p(&missing), "--image", p(&image), "--out", p(&pred)])), 2);
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "epochs = 2\nwarmup = 1\n").unwrap();
    let o = mkanet(&["train", "--config", p(&bad_cfg), "--data", p(&data), "--out", p(&ck)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 2") && stderr(&o).contains("warmup"), "{}", stderr(&o));
}
