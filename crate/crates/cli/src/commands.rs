use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use multiformer::binio::write_file;
use multiformer::datakit::{generate, read_dataset, render_labels, write_dataset, Annotation, Dataset, Sample, Split};
use multiformer::encoder::export_attention;
use multiformer::frontend::CsiWindow;
use multiformer::model::{MultiFormer, Preset};
use multiformer::msfn::dump_heatmaps;
use multiformer::numerics::checkpoint::Checkpoint;
use multiformer::numerics::gradcheck::{check_primitive, primitive_names, CheckReport, MODEL_TOL, PRIMITIVE_TOL};
use multiformer::numerics::{Mode, Real, Tensor};
use multiformer::plot::{write_pgm, write_skeleton_svg};
use multiformer::pose::{decode_poses, SkeletonFile, SkeletonSet};
use multiformer::skeleton::NUM_KEYPOINTS;
use multiformer::train::{check_model_gradients, evaluate, EvalReport, Pose, Prepared, Trainer};
use multiformer::Error;

use crate::config::{show, RunConfig, Settings, KEYS};
use crate::{
    AttnArgs, BranchArg, CliError, CliResult, ConfigArgs, ConfigLayer, DecodeArgs, EvalArgs, GradcheckArgs, Precision,
    SplitArg, SynthArgs, TrainArgs,
};

fn abs(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e).into())
}

/// Merges the config layers; `flags` are the subcommand's own typed flags.
fn settings(layer: &ConfigLayer, flags: Vec<(&str, Option<String>)>) -> CliResult<(RunConfig, Settings)> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for s in &layer.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects SECTION.KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let file = layer.config.as_deref().map(abs).transpose()?;
    let cfg = RunConfig::load(file.as_deref(), std::env::vars(), &pairs)?;
    let s = cfg.settings()?;
    Ok((cfg, s))
}

fn render_config(cfg: &RunConfig, s: &Settings) -> String {
    let mut out = String::new();
    let mut section = "";
    for key in KEYS {
        let (sec, name) = key.split_once('.').expect("dotted key");
        if sec != section {
            if !section.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{sec}]");
            section = sec;
        }
        let _ = write!(out, "{name} = {}", show(s, key));
        if let Some(src) = cfg.source(key) {
            let _ = write!(out, " ; {src}");
        }
        out.push('\n');
    }
    out
}

pub fn show_config(a: ConfigArgs) -> CliResult {
    let (cfg, s) = settings(&a.layer, vec![])?;
    print!("{}", render_config(&cfg, &s));
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult {
    let out = abs(&a.out)?;
    let (_, s) = settings(
        &a.layer,
        vec![
            ("synth.samples", a.samples.map(|v| v.to_string())),
            ("synth.persons", a.persons.map(|v| v.to_string())),
            ("synth.seed", a.seed.map(|v| v.to_string())),
        ],
    )?;
    let ds = generate(&s.synth, s.synth_seed)?;
    write_dataset(&ds, &out)?;
    let val = ds.split(Split::Val).count();
    println!(
        "wrote {} samples ({} train, {val} val, {} persons each) to {}",
        ds.samples.len(),
        ds.samples.len() - val,
        s.synth.scene.persons,
        out.display()
    );
    Ok(())
}

fn select(ds: &Dataset, split: SplitArg) -> Vec<(usize, &Sample)> {
    ds.samples
        .iter()
        .enumerate()
        .filter(|(_, s)| match split {
            SplitArg::All => true,
            SplitArg::Train => s.split == Split::Train,
            SplitArg::Val => s.split == Split::Val,
        })
        .collect()
}

pub fn train(a: TrainArgs) -> CliResult {
    let (data, out) = (abs(&a.data)?, abs(&a.out)?);
    let resume = a.resume.as_deref().map(abs).transpose()?;
    let (cfg, s) = settings(
        &a.layer,
        vec![
            ("model.preset", a.preset.clone()),
            ("train.epochs", a.epochs.map(|v| v.to_string())),
            ("train.seed", a.seed.map(|v| v.to_string())),
            ("train.lr", a.lr.map(|v| v.to_string())),
            ("train.batch_size", a.batch_size.map(|v| v.to_string())),
        ],
    )?;
    let ds = read_dataset(&data)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join("config.ini"), render_config(&cfg, &s).as_bytes())?;
    match a.precision {
        Precision::F32 => train_as::<f32>(&s, &ds, &out, resume.as_deref()),
        Precision::F64 => train_as::<f64>(&s, &ds, &out, resume.as_deref()),
    }
}

fn train_as<T: Real>(s: &Settings, ds: &Dataset, out: &Path, resume: Option<&Path>) -> CliResult {
    let mut trainer = match resume {
        Some(p) => Trainer::<T>::resume(s.train.clone(), &Checkpoint::read(p)?)?,
        None => Trainer::<T>::new(s.train.clone())?,
    };
    let train: Vec<&Sample> = ds.split(Split::Train).collect();
    let val: Vec<&Sample> = ds.split(Split::Val).collect();
    if train.is_empty() {
        return Err(Error::Empty("training split".into()).into());
    }
    let train_data = Prepared::new(&trainer.model, &train, &s.train.render)?;
    let val_data = Prepared::new(&trainer.model, &val, &s.train.render)?;
    println!(
        "training {} ({} parameters) on {} samples, validating on {}",
        s.train.preset,
        trainer.model.count_parameters(),
        train.len(),
        val.len()
    );
    let started = Instant::now();
    trainer.fit(&train_data, (!val.is_empty()).then_some(&val_data), Some(out), |log| {
        let val = log.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>4}  train {:.6}  val {val}  lr {:.3e}",
            log.epoch, log.train_loss, log.lr
        );
    })?;
    println!(
        "done in {:.1} s; checkpoints and loss.csv in {}",
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let data = abs(&a.data)?;
    let ckpt = a.ckpt.as_deref().map(abs).transpose()?;
    let pred = a.pred.as_deref().map(abs).transpose()?;
    let out = a.out.as_deref().map(abs).transpose()?;
    let (_, s) = settings(&a.layer, vec![("eval.alphas", a.alpha.clone())])?;
    let ds = read_dataset(&data)?;
    let picked = select(&ds, a.split);
    if picked.is_empty() {
        return Err(Error::Empty(format!("{:?} split of {}", a.split, data.display()).to_lowercase()).into());
    }
    let started = Instant::now();
    let report = match (ckpt, pred) {
        (Some(ck), _) => {
            let ck = Checkpoint::read(&ck)?;
            let samples: Vec<&Sample> = picked.iter().map(|(_, s)| *s).collect();
            match a.precision {
                Precision::F32 => evaluate(&MultiFormer::<f32>::from_checkpoint(&ck)?, &samples, &s.eval)?,
                Precision::F64 => evaluate(&MultiFormer::<f64>::from_checkpoint(&ck)?, &samples, &s.eval)?,
            }
        }
        (None, Some(dir)) => {
            let mut preds: Vec<Vec<Pose>> = Vec::with_capacity(picked.len());
            for (i, _) in &picked {
                preds.push(SkeletonFile::read(&dir.join(format!("{i:05}.json")))?.normalized());
            }
            let truth: Vec<Vec<Pose>> = picked.iter().map(|(_, s)| s.annotation.normalized()).collect();
            EvalReport::from_predictions(&[preds], &truth, &s.eval.alphas, 0)?
        }
        (None, None) => return Err(CliError::usage("either --ckpt or --pred is required")),
    };
    print!("{}", report.table());
    println!(
        "{} samples, {} persons scored, {} skipped, {:.2} s",
        report.samples,
        report.persons,
        report.skipped,
        started.elapsed().as_secs_f64()
    );
    if let Some(path) = out {
        write_file(&path, report.to_json().as_bytes())?;
    }
    Ok(())
}

/// Final-stage heatmaps of one window as `[19, S, S]` and `[38, S, S]`.
fn model_heatmaps(ck: &Path, csi: &Path) -> CliResult<(Tensor<f64>, Tensor<f64>)> {
    let model = MultiFormer::<f32>::from_checkpoint(&Checkpoint::read(ck)?)?;
    let window = CsiWindow::read(csi)?;
    let batch = model.token_batch(&[&window])?;
    let mut tape = model.tape(Mode::Eval);
    let res = model.forward_batch(&mut tape, &batch)?;
    let last = res.msfn.last();
    let side = model.config.side();
    let pcm = Tensor::new(&[19, side, side], tape.value(last.pcm).to_f64_vec())?;
    let paf = Tensor::new(&[38, side, side], tape.value(last.paf).to_f64_vec())?;
    Ok((pcm, paf))
}

pub fn decode(a: DecodeArgs) -> CliResult {
    let out = abs(&a.out)?;
    let svg = a.svg.as_deref().map(abs).transpose()?;
    let maps = a.heatmaps.as_deref().map(abs).transpose()?;
    let (_, s) = settings(&a.layer, vec![])?;
    let (pcm, paf) = match (&a.ckpt, &a.csi, &a.ann) {
        (Some(ck), Some(csi), _) => model_heatmaps(&abs(ck)?, &abs(csi)?)?,
        (None, _, Some(ann)) => {
            let ann = Annotation::read(&abs(ann)?)?;
            let side = a.side.unwrap_or_else(|| s.train.model_config().side());
            render_labels(&ann, side, &s.train.render)
        }
        _ => return Err(CliError::usage("decode needs --ckpt with --csi, or --ann")),
    };
    let side = *pcm.shape().last().expect("rank 3");
    let set = decode_poses(pcm.data(), paf.data(), side, &s.decode)?;
    set.write_json(&out)?;
    if let Some(path) = svg {
        write_skeleton_svg(&path, &set, Some(&keypoint_max(&pcm, side)))?;
    }
    if let Some(dir) = maps {
        dump_heatmaps(&dir, &pcm, &paf)?;
    }
    report_skeletons(&set);
    Ok(())
}

/// Per-pixel maximum over the keypoint channels.
fn keypoint_max(pcm: &Tensor<f64>, side: usize) -> Vec<f64> {
    let plane = side * side;
    (0..plane)
        .map(|p| {
            (0..NUM_KEYPOINTS)
                .map(|j| pcm.data()[j * plane + p])
                .fold(f64::MIN, f64::max)
        })
        .collect()
}

fn report_skeletons(set: &SkeletonSet) {
    println!("{} persons", set.persons.len());
    for (i, p) in set.persons.iter().enumerate() {
        println!("  person {i}: {} keypoints, score {:.3}", p.present(), p.score);
    }
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    let preset: Preset = a.preset.parse()?;
    let mut ops: Vec<&str> = primitive_names();
    ops.push("model");
    let selected: Vec<&str> = if a.ops == "all" {
        ops.clone()
    } else if ops.contains(&a.ops.as_str()) {
        vec![a.ops.as_str()]
    } else {
        return Err(CliError::usage(format!(
            "unknown op `{}`; expected all or one of: {}",
            a.ops,
            ops.join(", ")
        )));
    };
    if selected.contains(&"model") && preset != Preset::Desk {
        return Err(CliError::usage(format!(
            "the end-to-end check runs on the desk preset only; {preset} is too large for 64-bit differencing"
        )));
    }
    println!("{:<16} {:>7} {:>12} {:>8}  status", "op", "coords", "worst", "tol");
    let mut failed = Vec::new();
    for op in selected {
        let started = Instant::now();
        let (report, tol): (CheckReport, f64) = if op == "model" {
            (check_model_gradients(a.seed, a.coords)?, MODEL_TOL)
        } else {
            (check_primitive(op, a.seed)?, PRIMITIVE_TOL)
        };
        let worst = report.worst();
        let ok = worst < tol;
        println!(
            "{op:<16} {:>7} {worst:>12.3e} {tol:>8.0e}  {}{}",
            report.coords(),
            if ok { "pass" } else { "FAIL" },
            if op == "model" {
                format!(
                    "  ({} reduced-step coordinates, {} draws rejected, {:.1} s)",
                    report.reduced(),
                    report.screened(),
                    started.elapsed().as_secs_f64()
                )
            } else {
                String::new()
            }
        );
        if !ok {
            failed.push(op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::check(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

pub fn attn(a: AttnArgs) -> CliResult {
    let out = abs(&a.out)?;
    let csi = abs(&a.csi)?;
    let (_, s) = settings(&a.layer_cfg, vec![("model.preset", a.preset.clone())])?;
    let model = match &a.ckpt {
        Some(ck) => MultiFormer::<f32>::from_checkpoint(&Checkpoint::read(&abs(ck)?)?)?,
        None => MultiFormer::<f32>::new(&s.train.model_config(), a.seed)?,
    };
    let window = CsiWindow::read(&csi)?;
    let batch = model.token_batch(&[&window])?;
    let mut tape = model.tape(Mode::Eval);
    let res = model.forward_batch(&mut tape, &batch)?;
    let branch = match a.branch {
        BranchArg::Freq => &res.encoder.freq,
        BranchArg::Time => &res.encoder.time,
    };
    let exp = export_attention(&tape, &branch.attention, a.layer, a.head, 0)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_pgm(&out.join("attention.pgm"), exp.tokens, exp.tokens, &exp.matrix)?;
    let mut csv = String::from("token,salience\n");
    for (i, v) in exp.salience.iter().enumerate() {
        let _ = writeln!(csv, "{i},{v}");
    }
    write_file(&out.join("salience.csv"), csv.as_bytes())?;
    let (lo, hi) = exp
        .salience
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    println!(
        "{} tokens, salience max/min ratio {:.3}; wrote attention.pgm and salience.csv to {}",
        exp.tokens,
        hi / lo,
        out.display()
    );
    Ok(())
}
