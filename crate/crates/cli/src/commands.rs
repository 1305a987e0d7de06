use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mlnet::checkpoint;
use mlnet::corpus::{
    load_record, mix_noise, pad_silence, read_manifest, split_train_dev, synth_waveforms, write_manifest, write_mask,
    ManifestRecord, Split,
};
use mlnet::metrics::{evaluate, score_recordings, Scored};
use mlnet::model::mlnet_forward;
use mlnet::train::train as fit;
use mlnet::wav::{read_wav, write_wav};
use mlnet::{FrontendConfig, LabeledUtterance, MixSpec, MlnetParams, ModelConfig, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{
    mlfb, AblateArgs, EvalArgs, Failure, FeaturizeArgs, FrontendArgs, MixArgs, OrUsage, PredictArgs, TrainArgs, Units,
};

type CmdResult = Result<(), Failure>;

const RUN_FILE: &str = "run.json";

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

pub fn mix(a: &MixArgs) -> CmdResult {
    let spec = MixSpec {
        snr_db_min: a.snr_min,
        snr_db_max: a.snr_max,
        silence_pad_s: a.silence_pad,
        seed: a.seed,
    };
    spec.validate().or_usage()?;
    if !(0.0..=1.0).contains(&a.train_frac) {
        return Err(usage(format!("--train-frac {} outside [0, 1]", a.train_frac)));
    }
    if a.out.exists() && !a.force && fs::read_dir(&a.out).or_usage()?.next().is_some() {
        return Err(usage(format!("{} is not empty (use --force)", a.out.display())));
    }

    // (id, wave, mask, snr)
    let utts: Vec<(String, mlnet::Waveform, Vec<u8>, f64)> = if a.clean.is_empty() {
        synth_waveforms(a.n as usize, &spec, 16_000)?
            .into_iter()
            .map(|u| (u.id, u.wave, u.mask, u.snr_db))
            .collect()
    } else {
        if a.noise.is_empty() {
            return Err(usage("--clean needs at least one --noise file"));
        }
        let noises = a.noise.iter().map(|p| read_wav(p)).collect::<Result<Vec<_>, _>>().or_usage()?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut out = Vec::with_capacity(a.clean.len());
        for (i, path) in a.clean.iter().enumerate() {
            let clean = read_wav(path).or_usage()?;
            let (padded, mask) = pad_silence(&clean, None, &spec)?;
            let noise = &noises[rng.random_range(0..noises.len())];
            let snr = if spec.snr_db_max > spec.snr_db_min {
                rng.random_range(spec.snr_db_min..spec.snr_db_max)
            } else {
                spec.snr_db_min
            };
            let m = mix_noise(&padded, noise, snr, Some(&mask)).with_context(|| format!("mixing {}", path.display()))?;
            out.push((format!("mix{i:05}"), m.mixed, mask, snr));
        }
        out
    };

    let n = utts.len();
    let n_eval = a.n_eval as usize;
    if n_eval >= n {
        return Err(usage(format!("--n-eval {n_eval} leaves no utterances for train/dev out of {n}")));
    }
    let mut splits = vec![Split::Eval; n];
    let (train_idx, dev_idx) = split_train_dev(n - n_eval, a.train_frac, a.seed);
    train_idx.iter().for_each(|&i| splits[i] = Split::Train);
    dev_idx.iter().for_each(|&i| splits[i] = Split::Dev);

    let wav_dir = a.out.join("wav");
    fs::create_dir_all(&wav_dir).with_context(|| format!("creating {}", wav_dir.display()))?;
    let mut records = Vec::with_capacity(n);
    for ((id, wave, mask, snr), split) in utts.into_iter().zip(splits) {
        let wav = PathBuf::from("wav").join(format!("{id}.wav"));
        let mask_path = PathBuf::from("wav").join(format!("{id}.mask"));
        write_wav(&a.out.join(&wav), &wave)?;
        write_mask(&a.out.join(&mask_path), &mask)?;
        records.push(ManifestRecord {
            id,
            wav,
            mask: mask_path,
            split,
            snr_db: Some(snr),
        });
    }
    let manifest = a.out.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    println!(
        "wrote {n} utterances ({} train, {} dev, {} eval) to {}",
        count(Split::Train),
        count(Split::Dev),
        count(Split::Eval),
        manifest.display()
    );
    Ok(())
}

pub fn featurize(a: &FeaturizeArgs) -> CmdResult {
    let cfg = a.frontend.to_config();
    cfg.validate().or_usage()?;
    let wave = read_wav(&a.wav).or_usage()?;
    let feats = mlnet::frontend::featurize(&wave, &cfg, &a.wav.to_string_lossy()).or_usage()?;
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    mlfb::write(BufWriter::new(file), &feats).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} frames x {} bands -> {}", feats.len(), feats.n_mels(), a.out.display());
    Ok(())
}

/// Featurized utterances of one manifest split.
fn load_split(manifest: &Path, split: Split, cfg: &FrontendConfig) -> Result<Vec<LabeledUtterance>, Failure> {
    let records = read_manifest(manifest).or_usage()?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_record(r, base, cfg))
        .collect::<Result<Vec<_>, _>>()
        .or_usage()
}

fn echo_config(fcfg: &FrontendConfig, mcfg: &ModelConfig, tcfg: &TrainConfig) {
    println!(
        "lr={} batch={} epochs={} lambda={} clip={} seed={} theta={}",
        tcfg.lr, tcfg.batch_size, tcfg.epochs, tcfg.attention_loss_weight, tcfg.clip_hi, tcfg.seed, tcfg.theta
    );
    println!("{mcfg}");
    println!("normalize={} preemphasis={}", fcfg.normalize, fcfg.preemphasis);
}

fn checked_configs(
    frontend: &FrontendArgs,
    model: &crate::ModelArgs,
    optim: &crate::OptimArgs,
) -> Result<(FrontendConfig, ModelConfig, TrainConfig), Failure> {
    let fcfg = frontend.to_config();
    let mcfg = model.to_config(fcfg.n_mels);
    let tcfg = optim.to_config();
    fcfg.validate().or_usage()?;
    mcfg.validate().or_usage()?;
    tcfg.validate().or_usage()?;
    Ok((fcfg, mcfg, tcfg))
}

fn write_run_file(dir: &Path, fcfg: &FrontendConfig, mcfg: &ModelConfig, tcfg: &TrainConfig) -> anyhow::Result<()> {
    let doc = json!({ "frontend": fcfg, "model": mcfg, "train": tcfg });
    let path = dir.join(RUN_FILE);
    fs::write(&path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))
}

/// Frontend settings recorded next to `checkpoint`, or `fallback`.
fn frontend_for(checkpoint: &Path, fallback: &FrontendArgs) -> Result<FrontendConfig, Failure> {
    let run = checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_FILE);
    if !run.exists() {
        return Ok(fallback.to_config());
    }
    let text = fs::read_to_string(&run).or_usage()?;
    let doc: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", run.display()))
        .or_usage()?;
    serde_json::from_value(doc["frontend"].clone())
        .with_context(|| format!("frontend section of {}", run.display()))
        .or_usage()
}

fn load_model(path: &Path, fcfg: &FrontendConfig) -> Result<MlnetParams<f32>, Failure> {
    let params: MlnetParams<f32> = checkpoint::load(path).or_usage()?;
    if params.config().n_mels != fcfg.n_mels {
        return Err(usage(format!(
            "checkpoint expects {} mel bands, frontend produces {}",
            params.config().n_mels,
            fcfg.n_mels
        )));
    }
    Ok(params)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let (fcfg, mcfg, tcfg) = checked_configs(&a.frontend, &a.model, &a.optim)?;
    echo_config(&fcfg, &mcfg, &tcfg);
    let train_set = load_split(&a.manifest, Split::Train, &fcfg)?;
    let dev_set = load_split(&a.manifest, Split::Dev, &fcfg)?;
    if train_set.is_empty() {
        return Err(usage(format!("{} has no train utterances", a.manifest.display())));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_run_file(&a.out, &fcfg, &mcfg, &tcfg)?;
    println!("epoch\ttrain_loss\tdev_f1\tdev_dcf");
    let out = fit::<f32>(&train_set, &dev_set, &tcfg, &mcfg, Some(&a.out), |e| println!("{e}"))?;
    println!("best epoch {} -> {}", out.best_epoch, a.out.join("best.mlnt").display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.theta) {
        return Err(usage(format!("--theta {} outside [0, 1]", a.theta)));
    }
    let fcfg = frontend_for(&a.checkpoint, &a.frontend)?;
    let params = load_model(&a.checkpoint, &fcfg)?;
    if let Some(expected) = a.expect.apply(params.config()) {
        if &expected != params.config() {
            return Err(Failure::Usage(
                mlnet::Error::ConfigMismatch {
                    expected: expected.to_string(),
                    found: params.config().to_string(),
                }
                .into(),
            ));
        }
    }
    let split = Split::from(a.split);
    let corpus = load_split(&a.manifest, split, &fcfg)?;
    if corpus.is_empty() {
        return Err(usage(format!("split {split} of {} is empty", a.manifest.display())));
    }
    let report = if a.oracle_labels {
        let probs: Vec<Vec<f64>> = corpus
            .iter()
            .map(|u| u.labels.iter().map(|&l| l as f64).collect())
            .collect();
        let items: Vec<Scored<'_>> = corpus
            .iter()
            .zip(&probs)
            .map(|(u, p)| Scored {
                id: &u.source_id,
                probs: p,
                labels: &u.labels,
            })
            .collect();
        score_recordings(&items, a.theta, a.micro)?
    } else {
        evaluate(&corpus, &params, a.theta, a.micro)?
    };
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(prefix) = &a.out {
        let with_ext = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        let (tsv_path, json_path) = (with_ext(".tsv"), with_ext(".json"));
        fs::write(&tsv_path, &tsv).with_context(|| format!("writing {}", tsv_path.display()))?;
        fs::write(&json_path, report.to_json()).with_context(|| format!("writing {}", json_path.display()))?;
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.theta) {
        return Err(usage(format!("--theta {} outside [0, 1]", a.theta)));
    }
    let fcfg = frontend_for(&a.checkpoint, &a.frontend)?;
    let params = load_model(&a.checkpoint, &fcfg)?;
    if a.dump_attention && params.config().variant != Variant::FullAttention {
        return Err(usage(format!("variant {} has no attention weights to dump", params.config().variant)));
    }
    let wave = read_wav(&a.wav).or_usage()?;
    let feats = mlnet::frontend::featurize(&wave, &fcfg, &a.wav.to_string_lossy()).or_usage()?;
    if feats.is_empty() {
        return Err(usage(format!("{} is shorter than one frame", a.wav.display())));
    }
    let pred = mlnet_forward(&feats, &params)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for (t, (&time, &p)) in feats.frame_times().iter().zip(&pred.probs).enumerate() {
        write!(out, "{time:.3}\t{p:.6}\t{}", (p >= a.theta) as u8)?;
        if let (true, Some(trace)) = (a.dump_attention, &pred.trace) {
            for w in &trace.p[t] {
                write!(out, "\t{w:.6}")?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> CmdResult {
    let (fcfg, base, tcfg) = checked_configs(&a.frontend, &a.model, &a.optim)?;
    let train_set = load_split(&a.manifest, Split::Train, &fcfg)?;
    let dev_set = load_split(&a.manifest, Split::Dev, &fcfg)?;
    let eval_set = load_split(&a.manifest, Split::Eval, &fcfg)?;
    if train_set.is_empty() {
        return Err(usage(format!("{} has no train utterances", a.manifest.display())));
    }
    let scale = match a.units {
        Units::Percent => 100.0,
        Units::Fraction => 1.0,
    };
    let cell = |set: &[LabeledUtterance], params: &MlnetParams<f32>| -> anyhow::Result<(String, String)> {
        if set.is_empty() {
            return Ok(("-".into(), "-".into()));
        }
        let r = evaluate(set, params, tcfg.theta, false)?;
        Ok((
            format!("{:.4}", scale * r.macro_avg.f1),
            format!("{:.4}", scale * r.macro_avg.dcf),
        ))
    };

    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mcfg = ModelConfig { variant, ..base.clone() };
        let dir = a.out.as_ref().map(|d| d.join(variant.as_str()));
        if let Some(d) = &dir {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            write_run_file(d, &fcfg, &mcfg, &tcfg)?;
        }
        let out = fit::<f32>(&train_set, &dev_set, &tcfg, &mcfg, dir.as_deref(), |e| {
            log::info!("{variant} {e}")
        })?;
        let (dev_f1, dev_dcf) = cell(&dev_set, &out.best)?;
        let (eval_f1, eval_dcf) = cell(&eval_set, &out.best)?;
        rows.push(format!("{variant}\t{dev_f1}\t{dev_dcf}\t{eval_f1}\t{eval_dcf}"));
    }
    println!("variant\tdev_f1\tdev_dcf\teval_f1\teval_dcf");
    for r in rows {
        println!("{r}");
    }
    Ok(())
}
