use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SIDE: usize = 8;
const IMAGES: usize = 400;

fn saak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saak"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = saak(args);
    assert!(
        out.status.success(),
        "saak {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn speckle(n: usize, r: usize, c: usize) -> u8 {
    let mut h = (n * SIDE * SIDE + r * SIDE + c) as u64 ^ 0x9e37_79b9_7f4a_7c15;
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ((h ^ (h >> 31)) % 49) as u8
}

/// Three classes of 8x8 images: a bright row, a bright column or a bright
/// diagonal, with deterministic speckle.
fn write_idx(dir: &Path, count: usize, offset: usize) -> (PathBuf, PathBuf) {
    let mut images = Vec::new();
    images.extend(0x0000_0803u32.to_be_bytes());
    images.extend((count as u32).to_be_bytes());
    images.extend((SIDE as u32).to_be_bytes());
    images.extend((SIDE as u32).to_be_bytes());
    let mut labels = Vec::new();
    labels.extend(0x0000_0801u32.to_be_bytes());
    labels.extend((count as u32).to_be_bytes());
    for n in offset..offset + count {
        let class = n % 3;
        let line = 1 + (n / 3) % (SIDE - 2);
        for r in 0..SIDE {
            for c in 0..SIDE {
                let on = match class {
                    0 => r == line,
                    1 => c == line,
                    _ => r == c,
                };
                let speckle = speckle(n, r, c);
                images.push(if on { 200 + speckle } else { speckle });
            }
        }
        labels.push(class as u8);
    }
    let (ip, lp) = (
        dir.join(format!("images{offset}.idx")),
        dir.join(format!("labels{offset}.idx")),
    );
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

struct Fixture {
    dir: tempfile::TempDir,
    images: PathBuf,
    labels: PathBuf,
    model: PathBuf,
}

fn fitted() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_idx(dir.path(), IMAGES, 0);
    let model = dir.path().join("model.saak");
    let stdout = ok(&["fit", "--images", s(&images), "--side", "8", "--out", s(&model)]);
    assert!(stdout.contains("stages 3"), "{stdout}");
    assert!(stdout.contains("lossless true"), "{stdout}");
    Fixture {
        dir,
        images,
        labels,
        model,
    }
}

#[test]
fn refit_is_byte_identical() {
    let fx = fitted();
    let again = fx.dir.path().join("again.saak");
    ok(&["fit", "--images", s(&fx.images), "--side", "8", "--out", s(&again)]);
    assert_eq!(fs::read(&fx.model).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn transform_then_invert_dump_round_trips() {
    let fx = fitted();
    let coeffs = fx.dir.path().join("c.saakc");
    let stdout = ok(&[
        "transform",
        "--model",
        s(&fx.model),
        "--images",
        s(&fx.images),
        "--labels",
        s(&fx.labels),
        "--limit",
        "5",
        "--last-only",
        "--out",
        s(&coeffs),
    ]);
    assert!(stdout.contains("images 5"), "{stdout}");
    let out_dir = fx.dir.path().join("inv");
    ok(&[
        "reconstruct",
        "--model",
        s(&fx.model),
        "--dump",
        s(&coeffs),
        "--out-dir",
        s(&out_dir),
    ]);
    let pgm = fs::read(out_dir.join("img00000.pgm")).unwrap();
    let header = b"P5\n8 8\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    // first image is class 0 with its bright row at index 1
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), SIDE * SIDE);
    let expected: Vec<u8> = (0..SIDE * SIDE)
        .map(|i| {
            let (r, c) = (i / SIDE, i % SIDE);
            let speckle = speckle(0, r, c);
            if r == 1 {
                200 + speckle
            } else {
                speckle
            }
        })
        .collect();
    assert_eq!(pixels, &expected[..]);
}

#[test]
fn truncated_reconstruction_reports_mse() {
    let fx = fitted();
    let out_dir = fx.dir.path().join("rec");
    let stdout = ok(&[
        "reconstruct",
        "--model",
        s(&fx.model),
        "--images",
        s(&fx.images),
        "--k",
        "4,64,all",
        "--count",
        "3",
        "--out-dir",
        s(&out_dir),
    ]);
    assert!(stdout.contains("k 256: mean mse"), "{stdout}");
    let csv = fs::read_to_string(out_dir.join("mse.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    assert!(out_dir.join("img0002_k4.pgm").exists());
    assert!(out_dir.join("img0000_orig.pgm").exists());
}

#[test]
fn features_and_classification_pipeline() {
    let fx = fitted();
    let (test_images, test_labels) = write_idx(fx.dir.path(), 30, 1000);
    let spec = fx.dir.path().join("f.saakf");
    let stdout = ok(&[
        "features",
        "--model",
        s(&fx.model),
        "--images",
        s(&fx.images),
        "--labels",
        s(&fx.labels),
        "--setting",
        "3",
        "--n",
        "40",
        "--reduce",
        "8",
        "--out",
        s(&spec),
    ]);
    assert!(stdout.contains("setting 3 selected 40 reduced to 8"), "{stdout}");

    let out_dir = fx.dir.path().join("clf");
    let args = [
        "classify",
        "--model",
        s(&fx.model),
        "--spec",
        s(&spec),
        "--train-images",
        s(&fx.images),
        "--train-labels",
        s(&fx.labels),
        "--test-images",
        s(&test_images),
        "--test-labels",
        s(&test_labels),
        "--classifier",
        "both",
        "--k",
        "3",
        "--out-dir",
        s(&out_dir),
    ];
    let stdout = ok(&args);
    assert!(stdout.contains("accuracy"), "{stdout}");
    assert!(out_dir.join("summary.csv").exists());
    assert!(out_dir.join("confusion_knn.csv").exists());
    let saved = out_dir.join("svm.saakm");
    assert!(saved.exists());

    let stdout = ok(&[
        "classify",
        "--model",
        s(&fx.model),
        "--spec",
        s(&spec),
        "--test-images",
        s(&test_images),
        "--test-labels",
        s(&test_labels),
        "--load",
        s(&saved),
    ]);
    assert!(stdout.contains("loaded"), "{stdout}");
}

#[test]
fn config_file_supplies_defaults() {
    let fx = fitted();
    let cfg = fx.dir.path().join("run.toml");
    let out_dir = fx.dir.path().join("out");
    fs::write(
        &cfg,
        format!(
            "output_dir = {:?}\n[data]\ntrain_images = {:?}\n[model]\nside = 8\ncaps = [\"all\", 20, \"all\"]\n",
            s(&out_dir),
            s(&fx.images)
        ),
    )
    .unwrap();
    let stdout = ok(&["--config", s(&cfg), "fit"]);
    assert!(stdout.contains("lossless false"), "{stdout}");
    assert!(out_dir.join("model.saak").exists());
}

#[test]
fn recos_report_writes_identity_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("recos.csv");
    let stdout = ok(&["recos-report", "--samples", "50", "--oblique", "--out", s(&out)]);
    assert!(stdout.contains("samples 50"), "{stdout}");
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("sample,E_total,E_approx,E_rect,cross"));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.idx");
    assert_eq!(saak(&["fit", "--images", s(&missing)]).status.code(), Some(3));

    let garbage = dir.path().join("garbage.idx");
    fs::write(&garbage, b"not an idx file").unwrap();
    assert_eq!(saak(&["fit", "--images", s(&garbage)]).status.code(), Some(3));

    let (images, _) = write_idx(dir.path(), 12, 0);
    let bad_caps = saak(&["fit", "--images", s(&images), "--side", "8", "--caps", "all,nope,all"]);
    assert_eq!(bad_caps.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_caps.stderr).contains("error"));

    assert_eq!(saak(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn stats_writes_normality_and_histograms() {
    let fx = fitted();
    let out_dir = fx.dir.path().join("stats");
    ok(&[
        "stats",
        "--model",
        s(&fx.model),
        "--images",
        s(&fx.images),
        "--labels",
        s(&fx.labels),
        "--samples",
        "20,100",
        "--leading",
        "16",
        "--hist-coeffs",
        "0,1",
        "--bins",
        "10",
        "--out-dir",
        s(&out_dir),
    ]);
    let normality = fs::read_to_string(out_dir.join("normality.csv")).unwrap();
    assert_eq!(normality.lines().count(), 1 + 2 * 3);
    let hist = fs::read_to_string(out_dir.join("hist_coeff1.csv")).unwrap();
    assert!(hist.starts_with("class,bin_center,density"));
    assert_eq!(hist.lines().count(), 1 + 3 * 10);
}
