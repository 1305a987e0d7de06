use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlnet::wav::write_wav;
use mlnet::{EvalReport, Waveform};

fn mlnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = mlnet(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small settings that keep a training run to a few seconds.
const TINY: &[&str] = &[
    "--receptive-fields",
    "0,1,2",
    "--gated-dim",
    "8",
    "--attn-hidden",
    "8",
    "--lstm-hidden",
    "8",
    "--lstm-layers",
    "1",
    "--fc-hidden",
    "8",
    "--batch",
    "4",
    "--lr",
    "0.01",
];

/// Enough capacity and steps to learn the synthetic corpus.
const SMOKE: &[&str] = &[
    "--gated-dim",
    "16",
    "--attn-hidden",
    "16",
    "--lstm-hidden",
    "16",
    "--lstm-layers",
    "1",
    "--fc-hidden",
    "16",
    "--batch",
    "8",
    "--lr",
    "0.005",
    "--epochs",
    "10",
    "--seed",
    "1",
];

fn corpus(dir: &Path, n: &str, seed: &str, pad: &str) -> PathBuf {
    let out = dir.join("corpus");
    ok(&["mix", "--out", p(&out), "--n", n, "--seed", seed, "--silence-pad", pad, "--n-eval", "2"]);
    out.join("manifest.tsv")
}

fn small_corpus(dir: &Path, n: &str, seed: &str) -> PathBuf {
    corpus(dir, n, seed, "0.5")
}

fn train_tiny(manifest: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--manifest", p(manifest), "--out", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn mix_is_deterministic_and_respects_snr_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["mix", "--out", p(out), "--n", "12", "--seed", "7", "--snr-min", "-5", "--snr-max", "20"]);
    }
    let ma = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("manifest.tsv")).unwrap());
    let records = mlnet::corpus::read_manifest(&a.join("manifest.tsv")).unwrap();
    assert_eq!(records.len(), 12);
    for r in &records {
        let snr = r.snr_db.unwrap();
        assert!((-5.0..=20.0).contains(&snr), "{snr}");
        assert!(a.join(&r.wav).exists() && a.join(&r.mask).exists());
    }

    // a populated directory needs --force
    let o = mlnet(&["mix", "--out", p(&a), "--n", "3"]);
    assert_eq!(o.status.code(), Some(2));
    ok(&["mix", "--out", p(&a), "--n", "3", "--force"]);
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(mlnet(&["mix", "--n", "0"]).status.code(), Some(2));
    assert_eq!(mlnet(&["mix", "--snr-min", "5", "--snr-max", "1", "--out", "/nonexistent/x"]).status.code(), Some(2));
    assert_eq!(mlnet(&["train", "--manifest", "/nonexistent/manifest.tsv"]).status.code(), Some(2));
    assert_eq!(mlnet(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav").unwrap();
    let o = mlnet(&["predict", "--wav", p(&junk), "--checkpoint", p(&dir.path().join("none.mlnt"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = mlnet(&["featurize", "--wav", p(&junk), "--out", p(&dir.path().join("f.mlfb"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_training_defaults() {
    let help = ok(&["train", "--help"]);
    assert!(help.contains("[default: 0.001]"), "{help}");
    assert!(help.contains("[default: 32]"));
    assert!(help.contains("[default: full_attention]"));
    for sub in ["mix", "featurize", "eval", "predict", "ablate"] {
        ok(&[sub, "--help"]);
    }
    assert!(ok(&["mix", "--help"]).contains("[default: -5]"));
}

#[test]
fn featurize_writes_mlfb() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("s.wav");
    let tone: Vec<f64> = (0..16_000).map(|i| 0.3 * (i as f64 * 0.1).sin()).collect();
    write_wav(&wav, &Waveform::new(tone, 16_000).unwrap()).unwrap();
    let out = dir.path().join("s.mlfb");
    ok(&["featurize", "--wav", p(&wav), "--out", p(&out)]);
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"MLFB");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 98);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 40);
    assert_eq!(bytes.len(), 12 + 98 * 40 * 4);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), "10", "3");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let log = train_tiny(&manifest, &a, &["--epochs", "3", "--seed", "1"]);
    assert!(log.contains("lr=0.01 batch=4"), "{log}");
    train_tiny(&manifest, &b, &["--epochs", "3", "--seed", "1"]);
    for f in ["epoch_3.mlnt", "best.mlnt", "run.json", "train.log"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn smoke_trained_model_predicts_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "30", "3", "2.0");
    let run = dir.path().join("run");
    let mut args = vec!["train", "--manifest", p(&manifest), "--out", p(&run)];
    args.extend_from_slice(SMOKE);
    ok(&args);
    let ckpt = run.join("best.mlnt");

    // one second of digital silence: 98 frames, mostly labeled non-speech
    let silence = dir.path().join("silence.wav");
    write_wav(&silence, &Waveform::silence(16_000, 16_000)).unwrap();
    let out = ok(&["predict", "--wav", p(&silence), "--checkpoint", p(&ckpt), "--dump-attention"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 98);
    let mut speech = 0;
    for line in &lines {
        let cols: Vec<f64> = line.split('\t').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 3 + 5);
        // weights are printed with 6 decimals
        assert!((cols[3..].iter().sum::<f64>() - 1.0).abs() <= 5e-6);
        speech += cols[2] as usize;
    }
    assert!(speech < 49, "{speech} of 98 silent frames labeled speech");

    // eval defaults to dev and writes both report files
    let prefix = dir.path().join("report");
    let tsv = ok(&["eval", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(&prefix)]);
    assert!(tsv.lines().any(|l| l.starts_with("macro\t")));
    let json = std::fs::read_to_string(prefix.with_extension("json")).unwrap();
    let rep = EvalReport::from_json(&json).unwrap();
    assert_eq!(rep.recordings.len(), 6);
    assert!(prefix.with_extension("tsv").exists());

    // reference labels as predictions score perfectly
    let prefix = dir.path().join("oracle");
    ok(&["eval", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--oracle-labels", "--out", p(&prefix)]);
    let rep = EvalReport::from_json(&std::fs::read_to_string(prefix.with_extension("json")).unwrap()).unwrap();
    assert_eq!((rep.macro_avg.f1, rep.macro_avg.dcf), (1.0, 0.0));

    // theta 0 labels every frame speech: DCF is a quarter of the false-alarm rate
    let prefix = dir.path().join("zero");
    ok(&["eval", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--split", "eval", "--theta", "0", "--out", p(&prefix)]);
    let rep = EvalReport::from_json(&std::fs::read_to_string(prefix.with_extension("json")).unwrap()).unwrap();
    for r in &rep.recordings {
        assert_eq!((r.counts.fn_, r.counts.tn), (0, 0));
        let p_fa = r.counts.fp as f64 / (r.counts.fp + r.counts.tn) as f64;
        assert!((r.dcf - 0.25 * p_fa).abs() < 1e-12);
    }

    // a mismatched expectation names both configs
    let o = mlnet(&["eval", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--variant", "bilstm_base"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("variant=bilstm_base") && err.contains("variant=full_attention"), "{err}");
}

#[test]
fn config_file_sits_under_explicit_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), "10", "4");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nepochs=1\nlr=0.5\nbatch=2\nlstm_layers=1\nnormalize=true\n").unwrap();
    let run = dir.path().join("run");
    let out = ok(&[
        "train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run), "--lr", "0.003",
        "--gated-dim", "4", "--attn-hidden", "4", "--lstm-hidden", "4", "--fc-hidden", "4",
    ]);
    assert!(out.contains("lr=0.003 batch=2 epochs=1"), "{out}");
    assert!(out.contains("normalize=true"));

    std::fs::write(&cfg, "learning_rate=0.1\n").unwrap();
    let o = mlnet(&["train", "--config", p(&cfg), "--manifest", p(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn variants_train_and_ablation_reports_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), "20", "5");
    for variant in ["bilstm_base", "full_attention"] {
        train_tiny(&manifest, &dir.path().join(variant), &["--epochs", "1", "--variant", variant]);
    }
    let mut args = vec!["ablate", "--manifest", p(&manifest), "--epochs", "1"];
    args.extend_from_slice(TINY);
    let table = ok(&args);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{table}");
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols.len(), 5);
        for c in &cols[1..] {
            let v: f64 = c.parse().unwrap();
            assert!((0.0..=100.0).contains(&v));
        }
    }
}

#[test]
fn mix_accepts_user_supplied_clean_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut clean = Vec::new();
    for (i, f) in [220.0, 330.0, 440.0].iter().enumerate() {
        let path = dir.path().join(format!("clean{i}.wav"));
        let x: Vec<f64> = (0..8_000).map(|n| 0.3 * (std::f64::consts::TAU * f * n as f64 / 16_000.0).sin()).collect();
        write_wav(&path, &Waveform::new(x, 16_000).unwrap()).unwrap();
        clean.push(path);
    }
    let noise = dir.path().join("noise.wav");
    let x: Vec<f64> = (0..3_000).map(|n| 0.1 * ((n * 7919 % 113) as f64 / 56.0 - 1.0)).collect();
    write_wav(&noise, &Waveform::new(x, 16_000).unwrap()).unwrap();

    let out = dir.path().join("mixed");
    let mut args = vec!["mix", "--out", p(&out), "--snr-min", "5", "--snr-max", "5", "--silence-pad", "0.25", "--clean"];
    args.extend(clean.iter().map(|c| p(c)));
    args.extend(["--noise", p(&noise)]);
    ok(&args);
    let records = mlnet::corpus::read_manifest(&out.join("manifest.tsv")).unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert_eq!(r.snr_db, Some(5.0));
        let mask = mlnet::corpus::read_mask(&out.join(&r.mask)).unwrap();
        assert_eq!(mask.len(), 8_000 + 2 * 4_000);
        assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 8_000);
    }
}
