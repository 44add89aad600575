use cagn_cli::checkpoint;
use cagn_cli::commands::{self, Ctx};
use cagn_cli::config::ExperimentConfig;
use cagn_cli::ppm;
use cagn_core::data::Family;
use cagn_core::Error;
use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
seed = 5

[[tasks]]
family = "blobs"
palette_seed = 1
samples = 80
held_out = 80

[[tasks]]
family = "stripes"
palette_seed = 2
samples = 80
held_out = 80

[generator]
latent_dim = 16
base_channels = 8
base_res = 4
blocks = [{ channels = 8, upsample = true }, { channels = 8, upsample = true }]

[adapters]
k = 4
z = 4

[train]
batch = 4
iterations = 12

[eval]
samples = 70
"#;

fn ctx(dir: &Path, text: &str) -> Ctx {
    let cfg = ExperimentConfig::parse(text).unwrap();
    Ctx::new(cfg, dir.to_path_buf(), Some(dir.join("run")), None).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn train_generate_and_rerun_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let c = ctx(d, TINY);
        let s = commands::train_base(&c).unwrap();
        assert_eq!(s.iterations, 12);
        commands::train_task(&c, 1).unwrap();
    }
    let run_a = a.path().join("run");
    for f in ["theta.ckpt", "psi.ckpt", "phi_0.ckpt", "phi_1.ckpt", "losses_0.csv", "losses_1.csv", "cost.csv", "manifest.txt"] {
        assert_eq!(read(&run_a.join(f)), read(&b.path().join("run").join(f)), "{} differs", f);
    }
    let losses = std::fs::read_to_string(run_a.join("losses_1.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 12);

    let c = ctx(a.path(), TINY);
    let dest = a.path().join("imgs");
    let files = commands::generate(&c, 1, 4, 9, &dest).unwrap();
    assert_eq!(files.len(), 4);
    assert!(dest.join("1_9_3.ppm").exists());
    let first = read(&files[0]);
    commands::generate(&c, 1, 4, 9, &dest).unwrap();
    assert_eq!(read(&files[0]), first);
    let other = commands::generate(&c, 0, 1, 9, &dest).unwrap();
    assert_ne!(read(&other[0]), first);
    assert!(matches!(commands::generate(&c, 7, 1, 9, &dest), Err(Error::NotFound(_))));
}

#[test]
fn interpolation_rows_match_task_endpoints() {
    let d = tempfile::tempdir().unwrap();
    let c = ctx(d.path(), TINY);
    commands::train_base(&c).unwrap();
    commands::train_task(&c, 1).unwrap();
    let sheet = commands::interpolate(&c, 1, 0, &[0.0, 0.5, 1.0], 2, 3).unwrap();
    let s = ppm::decode(&read(&sheet)).unwrap();
    assert_eq!(s.shape(), &[1, 3, 48, 32]);
    let dest = d.path().join("g");
    let t0 = commands::generate(&c, 0, 2, 3, &dest).unwrap();
    let t1 = commands::generate(&c, 1, 2, 3, &dest).unwrap();
    let crop = |row: usize, col: usize| -> Vec<u8> {
        let one = ppm::sheet(&[s.clone()]).unwrap();
        let data = one.data();
        let mut px = Vec::new();
        for ch in 0..3 {
            for y in 0..16 {
                let off = (ch * 48 + row * 16 + y) * 32 + col * 16;
                px.extend_from_slice(&data[off..off + 16]);
            }
        }
        let t = cagn_core::Tensor::new(vec![1, 3, 16, 16], px).unwrap();
        ppm::encode(&t, 0).unwrap()
    };
    for col in 0..2 {
        assert_eq!(crop(0, col), read(&t0[col]), "lambda 0 column {}", col);
        assert_eq!(crop(2, col), read(&t1[col]), "lambda 1 column {}", col);
        assert_ne!(crop(1, col), crop(0, col));
    }
    assert!(matches!(commands::interpolate(&c, 1, 0, &[1.5], 2, 3), Err(Error::Config(_))));
}

#[test]
fn missing_prerequisites_are_not_found() {
    let d = tempfile::tempdir().unwrap();
    let c = ctx(d.path(), TINY);
    assert!(matches!(commands::train_task(&c, 1), Err(Error::NotFound(_))));
    assert!(matches!(commands::eval(&c), Err(Error::NotFound(_))));
}

#[test]
fn cost_without_adapters_is_zero_growth() {
    let d = tempfile::tempdir().unwrap();
    let text = TINY.replace("[adapters]\n", "[adapters]\nenabled = false\n");
    let text = text.replace("[[tasks]]\nfamily = \"stripes\"\npalette_seed = 2\nsamples = 80\nheld_out = 80\n", "");
    let c = ctx(d.path(), &text);
    let table = commands::cost(&c).unwrap();
    assert!(table.contains("0.00%"), "{}", table);
    assert!(table.contains("UNRECONCILED"));
    let csv = std::fs::read_to_string(d.path().join("run/cost.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "total,adapter,0,0"));
}

#[test]
fn synth_data_round_trips_through_directory_tasks() {
    let d = tempfile::tempdir().unwrap();
    let files = commands::synth_data(Family::Rings, 4, 12, 16, &d.path().join("rings")).unwrap();
    assert_eq!(files.len(), 12);
    let text = TINY.replace(
        "family = \"blobs\"\npalette_seed = 1\nsamples = 80\nheld_out = 80",
        "dir = \"rings\"\nlabels = \"rings/labels.txt\"",
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let (train, held) = cfg.task_data(0, d.path()).unwrap();
    assert_eq!((train.len(), held.len()), (9, 3));
    let direct = cagn_core::data::synth(Family::Rings, 4, 12, 16).unwrap();
    let again = ppm::encode(&direct.images, 0).unwrap();
    assert_eq!(ppm::encode(&train.images, 0).unwrap(), again);
}

#[test]
fn checkpoint_files_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let c = ctx(d.path(), TINY);
    commands::train_base(&c).unwrap();
    let p = d.path().join("run/theta.ckpt");
    let ck = checkpoint::load(&p).unwrap();
    assert_eq!(checkpoint::encode(&ck).unwrap(), read(&p));
    let mut bytes = read(&p);
    bytes[20] ^= 0x40;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(checkpoint::load(&p), Err(Error::Format(_))));
}

#[test]
fn binary_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_cagn");
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "[[tasks]]\nfamily = \"blobs\"\n[train]\ngamma = -1.0\nbatch = 0\n").unwrap();
    let out = Command::new(bin).args(["cost", "--config"]).arg(&bad).arg("--out").arg(d.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gamma") && err.contains("batch"), "{}", err);

    let good = d.path().join("good.toml");
    std::fs::write(&good, TINY).unwrap();
    let out = Command::new(bin)
        .args(["generate", "--task", "0", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(d.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let out = Command::new(bin).args(["synth-data", "--family", "plaid", "--n", "1", "--out"]).arg(d.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(bin)
        .args(["cost", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(d.path().join("c"))
        .env("CAGN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
