use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mvdesc(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mvdesc"))
        .args(args)
        .env("MVDESC_THREADS", "2")
        .output()
        .expect("spawn mvdesc");
    assert!(
        out.status.success(),
        "mvdesc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_extract_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mvdesc(&["gen-synthetic", "--out", s(&data), "--pairs", "1", "--points", "1500", "--seed", "3"]);
    let manifest = data.join("manifest.txt");
    assert!(manifest.is_file());

    let ckpt = dir.path().join("model.mvdw");
    let losses = dir.path().join("loss.csv");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&ckpt), "--loss-csv", s(&losses)];
    for kv in [
        "epochs=1",
        "batch_size=4",
        "n_views=1",
        "descriptor_dim=8",
        "image_size=16",
        "crop_radius=0.25",
    ] {
        args.extend(["--set", kv]);
    }
    mvdesc(&args);
    let csv = fs::read_to_string(&losses).unwrap();
    assert!(csv.starts_with("epoch,batch,bh_loss,ov_loss,total"));
    assert_eq!(csv.lines().count(), 2);

    let descs = dir.path().join("desc");
    fs::create_dir(&descs).unwrap();
    for frag in ["pair_000_a", "pair_000_b"] {
        let out = descs.join(format!("{frag}.mvdf"));
        let ply = data.join(format!("{frag}.ply"));
        let o = mvdesc(&[
            "extract", "--checkpoint", s(&ckpt), "--fragment", s(&ply), "--num-keypoints", "40", "--out", s(&out),
        ]);
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("40 descriptors of dimension 8"));
        let f = mvdesc::io::DescriptorFile::load(&out).unwrap();
        assert_eq!(f.len(), 40);
        assert_eq!(f.dim(), 8);
    }

    let matches = dir.path().join("matches.csv");
    mvdesc(&[
        "match",
        s(&descs.join("pair_000_a.mvdf")),
        s(&descs.join("pair_000_b.mvdf")),
        "--out",
        s(&matches),
    ]);
    assert!(fs::read_to_string(&matches).unwrap().starts_with("row_a,row_b,keypoint_a,keypoint_b"));

    let report = dir.path().join("report.csv");
    let o = mvdesc(&[
        "evaluate", "--manifest", s(&manifest), "--descriptors", s(&descs), "--tau1", "0.10", "--tau2", "0.05", "--out",
        s(&report),
    ]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    let r: f64 = stdout.trim().strip_prefix("recall ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&r));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().last().unwrap().starts_with("# tau2=0.05"), "{text}");

    let colored = dir.path().join("colored.ply");
    mvdesc(&[
        "colorize", "--fragment", s(&data.join("pair_000_a.ply")), "--descriptors", s(&descs.join("pair_000_a.mvdf")),
        "--out", s(&colored), "--format", "ascii",
    ]);
    assert!(fs::read_to_string(&colored).unwrap().contains("property uchar red"));

    let patches = dir.path().join("patches");
    mvdesc(&[
        "render-debug", "--fragment", s(&data.join("pair_000_a.ply")), "--keypoint", "5", "--checkpoint", s(&ckpt),
        "--out", s(&patches),
    ]);
    assert_eq!(fs::read_dir(&patches).unwrap().count(), 4);
    let pgm = fs::read(patches.join("view0_rot0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = Command::new(env!("CARGO_BIN_EXE_mvdesc")).arg("bogus").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = Command::new(env!("CARGO_BIN_EXE_mvdesc"))
        .args(["evaluate", "--bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn default_thresholds() {
    let out = Command::new(env!("CARGO_BIN_EXE_mvdesc"))
        .args(["evaluate", "--help"])
        .output()
        .unwrap();
    let help = String::from_utf8_lossy(&out.stdout);
    assert!(help.contains("default: 0.1"), "{help}");
    assert!(help.contains("default: 0.05"), "{help}");
}
