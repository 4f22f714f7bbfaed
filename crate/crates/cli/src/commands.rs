use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use uttnet::checkpoint::{encode_checkpoint, load_checkpoint};
use uttnet::config::RunConfig;
use uttnet::encoding::EncoderKind;
use uttnet::evalkit::{
    det_csv, evaluate, format_scores, parse_scores, read_trials, run_verification, score_trials, trial_ids,
    CostParams, Trial,
};
use uttnet::features::{encode_uefb, read_uefb, synth_corpus, FrameSequence, SynthConfig};
use uttnet::gradcheck::{run_suite, TOLERANCE};
use uttnet::losses::LossKind;
use uttnet::trainer::{train as run_training, Outcome};

use crate::corpus::{self, feature_path, Entry};
use crate::output::{guard, write_atomic, Created};
use crate::{EmbedArgs, EncoderArg, EvalArgs, Exit, GradcheckArgs, LossArg, ScoreArgs, SynthArgs, TrainArgs};

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_classes: a.classes,
        utts_per_class: a.per_class,
        dim: a.dim,
        min_len: a.min_len,
        max_len: a.max_len,
        latent_dim: a.latent_dim,
        class_spread: a.spread,
        noise_std: a.noise_std,
        session_std: a.session_std,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    if a.held_out >= a.classes {
        return Err(Exit::config(format!("--held-out {} leaves no training classes", a.held_out)).into());
    }
    guard(&a.out.join("manifest.csv"), a.force)?;
    let corpus = synth_corpus(&cfg)?;
    let mut created = Created::in_dir(&a.out)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for seq in &corpus {
        created.write(&feature_path(&a.out, &seq.utterance_id), &encode_uefb(seq))?;
        entries.push(Entry { utterance_id: seq.utterance_id.clone(), class: seq.label.unwrap_or(0), length: seq.len() });
    }
    created.write(&a.out.join("manifest.csv"), &corpus::write_manifest(&entries)?)?;
    if a.held_out > 0 {
        let cut = a.classes - a.held_out;
        let (train, test): (Vec<Entry>, Vec<Entry>) = entries.into_iter().partition(|e| e.class < cut);
        created.write(&a.out.join("train.csv"), &corpus::write_manifest(&train)?)?;
        created.write(&a.out.join("held_out.csv"), &corpus::write_manifest(&test)?)?;
        let mut trials = String::new();
        for (i, e) in test.iter().enumerate() {
            for f in &test[i + 1..] {
                let label = u8::from(e.class == f.class);
                trials.push_str(&format!("{label} {} {}\n", e.utterance_id, f.utterance_id));
            }
        }
        created.write(&a.out.join("trials.txt"), trials.as_bytes())?;
    }
    created.commit();
    println!("wrote {} utterances to {}", corpus.len(), a.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(e) = a.encoder {
        cfg.model.encoder = match e {
            EncoderArg::Tap => EncoderKind::Tap,
            EncoderArg::Sap => EncoderKind::Sap,
            EncoderArg::Lde => EncoderKind::Lde,
        };
    }
    if let Some(l) = a.loss {
        cfg.model.loss = match l {
            LossArg::Softmax => LossKind::Softmax,
            LossArg::Center => LossKind::Center,
            LossArg::Asoftmax => LossKind::Asoftmax,
        };
    }
    if let Some(m) = a.margin {
        cfg.model.margin.m = m;
    }
    if let Some(c) = a.lde_components {
        cfg.model.lde_components = c;
    }
    if let Some(w) = a.width {
        cfg.model.frontend.width_multiplier = w;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = &a.lr_stages {
        cfg.train.lr_stages = lr.clone();
    }
    if let Some(c) = a.crop_range {
        cfg.train.crop_range = c;
    }
    if let Some(t) = a.target_acc {
        cfg.train.target_train_acc = Some(t);
    }
    if let Some(s) = a.seed {
        cfg.seed = Some(s);
    }
    if let Some(p) = &a.manifest {
        cfg.paths.corpus = p.parent().map(Path::to_path_buf);
    }
    if let Some(p) = &a.out {
        cfg.paths.checkpoint = Some(p.clone());
    }
    if let Some(p) = &a.log {
        cfg.paths.log = Some(p.clone());
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, a);
    let mut cfg = cfg.resolve();

    let manifest = match (&a.manifest, &cfg.paths.corpus) {
        (Some(m), _) => m.clone(),
        (None, Some(dir)) => dir.join("manifest.csv"),
        (None, None) => return Err(Exit::config("no corpus: pass --manifest or set paths.corpus").into()),
    };
    let out = cfg
        .paths
        .checkpoint
        .clone()
        .ok_or_else(|| Exit::config("no checkpoint path: pass --out or set paths.checkpoint"))?;
    let log = cfg.paths.log.clone().unwrap_or_else(|| out.with_extension("csv"));
    cfg.paths.log = Some(log.clone());

    let data = corpus::load(&manifest)?;
    cfg.model.n_classes = data.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1);
    let problems = cfg.problems();
    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        return Err(Exit::config(format!("invalid configuration:\n{}", list.join("\n"))).into());
    }
    guard(&out, a.force)?;
    guard(&log, a.force)?;

    let mut tmp_log = log.as_os_str().to_owned();
    tmp_log.push(".partial");
    let tmp_log = PathBuf::from(tmp_log);
    if let Some(parent) = log.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = File::create(&tmp_log).with_context(|| format!("creating {}", tmp_log.display()))?;
    let mut writer = BufWriter::new(file);
    let result = run_training::<f32>(&data, &cfg.model, &cfg.train, Some(&mut writer));
    let flushed = writer.flush();
    drop(writer);
    let report = match result.and_then(|r| flushed.map(|_| r).map_err(|e| uttnet::Error::Degenerate(e.to_string()))) {
        Ok(r) => r,
        Err(e) => {
            let _ = fs::remove_file(&tmp_log);
            return Err(e.into());
        }
    };
    let run = serde_json::to_value(&cfg)?;
    let bytes = encode_checkpoint(&report.network, &run)?;
    write_atomic(&out, &bytes)?;
    fs::rename(&tmp_log, &log).with_context(|| format!("renaming into {}", log.display()))?;
    if let Some(last) = report.history.last() {
        println!(
            "epoch {} step {} loss {:.4} train_acc {:.4}",
            last.epoch, last.step, last.loss, last.train_acc
        );
    }
    match report.outcome {
        Outcome::Completed => {
            println!("wrote {} and {}", out.display(), log.display());
            Ok(())
        }
        Outcome::Diverged { epoch, step, reason } => Err(Exit::numeric(format!(
            "training diverged in epoch {epoch} at step {step} ({reason}); {} holds the last good state",
            out.display()
        ))
        .into()),
    }
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let entries = corpus::read_manifest(&a.manifest)?;
    for e in &entries {
        guard(&feature_path(&a.out, &e.utterance_id), a.force)?;
    }
    let (net, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let seqs = corpus::load(&a.manifest)?;
    let threads = if a.threads > 0 { a.threads } else { std::thread::available_parallelism().map_or(1, |n| n.get()) };
    let embs = net.embed_all(&seqs, threads)?;
    let mut created = Created::in_dir(&a.out)?;
    for (seq, emb) in seqs.iter().zip(embs) {
        let dim = emb.len();
        let out = FrameSequence::new(dim, 1, emb)?.with_id(seq.utterance_id.clone());
        created.write(&feature_path(&a.out, &seq.utterance_id), &encode_uefb(&out))?;
    }
    created.commit();
    println!("wrote {} embeddings to {}", seqs.len(), a.out.display());
    Ok(())
}

fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    read_trials(path).map_err(|e| Exit::data(format!("{}: {e}", path.display())).into())
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    guard(&a.out, a.force)?;
    let trials = load_trials(&a.trials)?;
    let mut embeddings = HashMap::new();
    for id in trial_ids(&trials) {
        let path = feature_path(&a.embeddings, &id);
        if !path.exists() {
            return Err(Exit::data(format!("no embedding for utterance `{id}` at {}", path.display())).into());
        }
        let seq = read_uefb(&path)?;
        if seq.len() != 1 {
            return Err(Exit::data(format!("{} is not an embedding file ({} frames)", path.display(), seq.len())).into());
        }
        embeddings.insert(id, seq.features().to_vec());
    }
    let scores = score_trials(&trials, &embeddings)?;
    write_atomic(&a.out, format_scores(&trials, &scores).as_bytes())?;
    println!("scored {} trials into {}", trials.len(), a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let params = CostParams { p_target: a.p_target, c_miss: a.c_miss, c_fa: a.c_fa };
    let problems = params.problems();
    if !problems.is_empty() {
        return Err(Exit::config(problems.join("; ")).into());
    }
    guard(&a.report, a.force)?;
    if let Some(det) = &a.det {
        guard(det, a.force)?;
    }
    let trials = load_trials(&a.trials)?;
    let (report, points) = match (&a.scores, &a.checkpoint, &a.features) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let scores = parse_scores(&text, &trials)?;
            evaluate(&scores, &trials, &params)?
        }
        (None, Some(ckpt), Some(dir)) => {
            let (net, _) = load_checkpoint::<f32>(ckpt)?;
            let lookup = |id: &str| {
                let path = feature_path(dir, id);
                if !path.exists() {
                    return Err(uttnet::Error::MissingUtterance(id.to_string()));
                }
                read_uefb(&path)
            };
            let threads = if a.threads > 0 { a.threads } else { std::thread::available_parallelism().map_or(1, |n| n.get()) };
            let (_, report, points) = run_verification(&net, &trials, lookup, &params, threads)?;
            (report, points)
        }
        _ => return Err(Exit::config("pass --scores, or --checkpoint with --features").into()),
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    let mut written = Vec::new();
    let result = (|| -> Result<()> {
        write_atomic(&a.report, json.as_bytes())?;
        written.push(a.report.clone());
        if let Some(det) = &a.det {
            write_atomic(det, det_csv(&points).as_bytes())?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        for p in written {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    println!(
        "EER {:.2}%  min C_det {:.4}  ({} trials, {} target)",
        100.0 * report.eer,
        report.min_cdet,
        report.n_trials,
        report.n_target
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let reports = run_suite(a.seed)?;
    let mut failed = 0;
    println!("{:<24} {:>12} {:>7}", "component", "max_rel_err", "coords");
    for r in &reports {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>12.3e} {:>7} {mark}", r.component, r.max_rel_err, r.coords);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Exit::numeric(format!("{failed} components above tolerance {TOLERANCE:e}")).into());
    }
    Ok(())
}
