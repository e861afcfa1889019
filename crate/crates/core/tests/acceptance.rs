//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::path::Path;
use std::time::Instant;

use multiformer::datakit::{generate, render_labels, write_dataset, RenderParams, Split, SynthConfig};
use multiformer::frontend::{make_tokens, resample, AmplitudeGrid, Branch, CsiWindow, Resampler};
use multiformer::model::{ModelConfig, MultiFormer, Preset};
use multiformer::msfn::AttentionMode;
use multiformer::numerics::gradcheck::{check_primitive, primitive_names, MODEL_TOL, PRIMITIVE_TOL};
use multiformer::numerics::{Mode, Tensor};
use multiformer::pose::{decode_poses, match_limb, DecodeParams, PafScore};
use multiformer::train::{
    check_model_gradients, evaluate, parameter_report, EvalConfig, EvalReport, Prepared, TrainConfig, Trainer,
};
use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn window(cfg: &ModelConfig, seed: u64) -> CsiWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.packets * cfg.links() * cfg.raw_subcarriers;
    let samples = (0..n)
        .map(|_| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    CsiWindow::new(cfg.packets, cfg.n_tx, cfg.n_rx, cfg.raw_subcarriers, 1e3, samples).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let mut worst_primitive = 0.0f64;
    for name in primitive_names() {
        let w = check_primitive(name, 1).map_err(|e| e.to_string())?.worst();
        ensure(w < PRIMITIVE_TOL, || format!("{name}: relative error {w:e}"))?;
        worst_primitive = worst_primitive.max(w);
    }
    let model = check_model_gradients(1, 5).map_err(|e| e.to_string())?;
    ensure(model.params.iter().all(|p| p.coords >= 1), || {
        "a parameter tensor had no kink-free coordinate".into()
    })?;
    let w = model.worst();
    ensure(w < MODEL_TOL, || format!("desk model: relative error {w:e}"))?;
    Ok(format!(
        "{} primitives worst {worst_primitive:.1e}; desk model {} coords over {} tensors worst {w:.1e}",
        primitive_names().len(),
        model.coords(),
        model.params.len()
    ))
}

fn full_shape_contract() -> Outcome {
    let cfg = Preset::MultiFormer.config();
    let model = MultiFormer::<f32>::new(&cfg, 0).map_err(|e| e.to_string())?;
    let w = window(&cfg, 1);
    let batch = model.token_batch(&[&w]).map_err(|e| e.to_string())?;
    let mut tape = model.tape(Mode::Eval);
    let out = model.forward_batch(&mut tape, &batch).map_err(|e| e.to_string())?;
    for (name, b) in [("freq", &out.encoder.freq), ("time", &out.encoder.time)] {
        let s = tape.shape(b.tokens);
        ensure(s == [1, 64, 1296], || format!("{name} tokens {s:?}"))?;
    }
    let phi = tape.shape(out.encoder.phi);
    ensure(phi == [1, 256, 36, 36], || format!("phi {phi:?}"))?;
    ensure(out.msfn.stages.len() == 3, || {
        format!("{} stages", out.msfn.stages.len())
    })?;
    for s in &out.msfn.stages {
        let (pcm, paf) = (tape.shape(s.heatmaps.pcm), tape.shape(s.heatmaps.paf));
        ensure(pcm == [1, 19, 36, 36] && paf == [1, 38, 36, 36], || {
            format!("stage {}: {pcm:?} {paf:?}", s.heatmaps.stage)
        })?;
    }
    Ok("tokens 64x1296 per branch, phi 256x36x36, PCM 19x36x36 and PAF 38x36x36 at 3 stages".into())
}

fn tokenizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (m, l, s) = (rng.random_range(1..9), rng.random_range(1..5), rng.random_range(1..9));
        let values: Vec<f64> = (0..m * l * s).map(|_| rng.random_range(0.0..10.0)).collect();
        let g = AmplitudeGrid::new(m, l, s, values).map_err(|e| e.to_string())?;
        let mut sorted = g.values.clone();
        sorted.sort_by(f64::total_cmp);
        for branch in Branch::BOTH {
            let tok = make_tokens(&g, branch);
            for r in 0..tok.rows {
                for p in 0..tok.width {
                    let want = match branch {
                        Branch::Frequency => g.at(p % m, p / m, r),
                        Branch::Temporal => g.at(r, p % l, p / l),
                    };
                    ensure(tok.row(r)[p] == want, || {
                        format!("{branch:?} ({m},{l},{s}) row {r} pos {p}")
                    })?;
                }
            }
            let mut got = tok.data.clone();
            got.sort_by(f64::total_cmp);
            ensure(got == sorted, || {
                format!("{branch:?} ({m},{l},{s}) changed the value multiset")
            })?;
        }
    }
    Ok("100 grids equal the index oracle in both branches; value multiset preserved".into())
}

fn resampler_contract() -> Outcome {
    for n in [10, 30] {
        let len = resample(&vec![0.0; n], 64).map_err(|e| e.to_string())?.len();
        ensure(len == 64, || format!("{n} -> {len}"))?;
        for c in [1.0, -2.5, 731.0] {
            for v in resample(&vec![c; n], 64).map_err(|e| e.to_string())? {
                ensure((v - c).abs() <= 1e-6 * f64::max(1.0, c.abs()), || {
                    format!("DC {c} became {v}")
                })?;
            }
        }
        let r = Resampler::new(n, 64).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        for _ in 0..100 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (rx, ry, rm) = (r.apply(&x), r.apply(&y), r.apply(&mix));
            for k in 0..64 {
                let err = (rm[k] - (a * rx[k] + b * ry[k])).abs();
                ensure(err < 1e-9, || format!("{n}->64 linearity error {err:e}"))?;
            }
        }
    }
    Ok("10->64 and 30->64, DC within 1e-6, linearity within 1e-9".into())
}

/// Best total over every injective partial matching of gated pairs.
fn exhaustive_best(s: &[Vec<PafScore>], p: &DecodeParams) -> f64 {
    fn go(i: usize, used: u32, s: &[Vec<PafScore>], p: &DecodeParams, acc: f64, best: &mut f64) {
        if i == s.len() {
            *best = best.max(acc);
            return;
        }
        go(i + 1, used, s, p, acc, best);
        for (j, c) in s[i].iter().enumerate() {
            if used & (1 << j) == 0 && c.score > p.score_gate && c.fraction >= p.fraction_gate {
                go(i + 1, used | (1 << j), s, p, acc + c.score, best);
            }
        }
    }
    let mut best = 0.0;
    go(0, 0, s, p, 0.0, &mut best);
    best
}

fn matching_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = DecodeParams::default();
    for case in 0..200 {
        let (rows, cols) = (rng.random_range(0..5), rng.random_range(0..5));
        let scores: Vec<Vec<PafScore>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| PafScore {
                        score: rng.random_range(-0.2..1.0),
                        fraction: rng.random_range(0.5..1.0),
                    })
                    .collect()
            })
            .collect();
        let m = match_limb(&scores, &p);
        let total: f64 = m.iter().map(|c| c.score).sum();
        let best = exhaustive_best(&scores, &p);
        ensure(total == best, || format!("case {case}: {total} vs exhaustive {best}"))?;
        let (mut ru, mut cu) = (vec![0; rows], vec![0; cols]);
        for c in &m {
            ru[c.a] += 1;
            cu[c.b] += 1;
        }
        ensure(ru.iter().chain(&cu).all(|&k| k <= 1), || {
            format!("case {case}: a candidate is used twice")
        })?;
    }
    Ok("200 instances with up to 4 candidates per side equal exhaustive enumeration".into())
}

fn render_decode_round_trip() -> Outcome {
    let start = Instant::now();
    let side = 36;
    let (mut stage, mut truth) = (Vec::new(), Vec::new());
    for persons in [1, 2] {
        let mut cfg = SynthConfig {
            samples: 16,
            ..Default::default()
        };
        cfg.scene.persons = persons;
        let ds = generate(&cfg, 40 + persons as u64).map_err(|e| e.to_string())?;
        for (i, s) in ds.samples.iter().enumerate() {
            let (pcm, paf) = render_labels(&s.annotation, side, &RenderParams::default());
            let set =
                decode_poses(pcm.data(), paf.data(), side, &DecodeParams::default()).map_err(|e| e.to_string())?;
            ensure(set.persons.len() == persons, || {
                format!("{persons}-person sample {i} decoded to {}", set.persons.len())
            })?;
            stage.push(set.normalized());
            truth.push(s.annotation.normalized());
        }
    }
    let report = EvalReport::from_predictions(&[stage], &truth, &[5.0], 0).map_err(|e| e.to_string())?;
    for (kp, v) in &report.alpha["5"] {
        ensure(*v == Some(1.0), || format!("PCK@5 for {kp} is {v:?}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("32 samples, PCK@5 = 1.0, person counts exact, {secs:.1} s"))
}

fn overfit_convergence() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        lr: 1e-3,
        decay_interval: 100,
        decay_factor: 0.5,
        seed: 1,
        ..Default::default()
    };
    let ds = generate(
        &SynthConfig {
            samples: 16,
            val_fraction: 0.0,
            ..Default::default()
        },
        1,
    )
    .map_err(|e| e.to_string())?;
    let train: Vec<_> = ds.split(Split::Train).collect();
    ensure(train.len() == 16, || format!("{} training samples", train.len()))?;
    let mut t = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let data = Prepared::new(&t.model, &train, &t.cfg.render).map_err(|e| e.to_string())?;
    t.fit(&data, None, None, |_| {}).map_err(|e| e.to_string())?;
    let (first, last) = (t.history[0].train_loss, t.history.last().unwrap().train_loss);
    ensure(last <= 0.1 * first, || format!("loss {first:.3} -> {last:.3}"))?;
    let report = evaluate(&t.model, &train, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let pck = |i: usize| report.per_stage[i].mean["10"];
    let (s1, s3) = (pck(0), pck(2));
    ensure(s3 >= s1, || format!("stage-3 PCK@10 {s3:.3} < stage-1 {s1:.3}"))?;
    Ok(format!(
        "{} epochs, loss {first:.1} -> {last:.2} ({:.1}%), PCK@10 stage 1 {s1:.3} -> stage 3 {s3:.3}, {:.0} s",
        t.history.len(),
        100.0 * last / first,
        start.elapsed().as_secs_f64()
    ))
}

fn unit_attention_identity() -> Outcome {
    let cfg = Preset::Desk.config();
    let model = MultiFormer::<f64>::new(&cfg, 3).map_err(|e| e.to_string())?;
    let w = window(&cfg, 2);
    let batch = model.token_batch(&[&w]).map_err(|e| e.to_string())?;
    let mut tape = model.tape(Mode::Eval);
    let out = model.forward_batch(&mut tape, &batch).map_err(|e| e.to_string())?;
    let phi0 = out.encoder.phi;
    // stage one always runs on the unweighted features
    let first = &out.msfn.stages[0];
    ensure(
        first.phi == phi0 && first.channel_weights.is_none() && first.spatial_weights.is_none(),
        || "stage 1 is not fed the raw features".into(),
    )?;
    let unit = model
        .msfn
        .run_stages(&mut tape, phi0, 3, AttentionMode::Unit)
        .map_err(|e| e.to_string())?;
    let want: Tensor<f64> = tape.value(phi0).clone();
    for (i, s) in unit.stages.iter().enumerate() {
        ensure(tape.value(s.phi).data() == want.data(), || {
            format!("stage {} features differ", i + 1)
        })?;
    }
    Ok("unit weights keep phi equal to phi0 at all 3 stages; stage 1 takes phi0 unweighted".into())
}

fn parameter_count() -> Outcome {
    let r = parameter_report(Preset::MultiFormer).map_err(|e| e.to_string())?;
    ensure(r.within_tolerance || r.justification.is_some(), || {
        "count outside tolerance without justification".into()
    })?;
    let note = if r.within_tolerance {
        "within +-25%"
    } else {
        "outside +-25%, justification attached"
    };
    Ok(format!(
        "{:.2} M vs {:.2} M reported (ratio {:.3}, {note})",
        r.params as f64 / 1e6,
        r.reference_params / 1e6,
        r.ratio
    ))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SynthConfig {
        samples: 6,
        ..Default::default()
    };
    for name in ["a", "b"] {
        let ds = generate(&cfg, 21).map_err(|e| e.to_string())?;
        write_dataset(&ds, &tmp.path().join(name)).map_err(|e| e.to_string())?;
    }
    ensure(
        dir_bytes(&tmp.path().join("a")) == dir_bytes(&tmp.path().join("b")),
        || "datasets differ".into(),
    )?;

    let ds = generate(&cfg, 21).map_err(|e| e.to_string())?;
    let train: Vec<_> = ds.split(Split::Train).collect();
    let val: Vec<_> = ds.split(Split::Val).collect();
    let run = || -> Result<(Vec<u8>, String), String> {
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 4,
            ..Default::default()
        };
        let mut t = Trainer::<f64>::new(tc).map_err(|e| e.to_string())?;
        let data = Prepared::new(&t.model, &train, &t.cfg.render).map_err(|e| e.to_string())?;
        t.fit(&data, None, None, |_| {}).map_err(|e| e.to_string())?;
        let report = evaluate(&t.model, &val, &EvalConfig::default()).map_err(|e| e.to_string())?;
        Ok((t.to_checkpoint().to_bytes(), report.to_json()))
    };
    let (a, b) = (run()?, run()?);
    ensure(a.0 == b.0, || "64-bit checkpoints differ".into())?;
    ensure(a.1 == b.1, || "evaluation reports differ".into())?;
    Ok(format!(
        "datasets, {}-byte f64 checkpoints and evaluation reports are bit-identical",
        a.0.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("full-preset shape contract", full_shape_contract),
        ("tokenizer oracle", tokenizer_oracle),
        ("resampler", resampler_contract),
        ("matching optimality", matching_optimality),
        ("render/decode round trip", render_decode_round_trip),
        ("overfit convergence", overfit_convergence),
        ("unit-attention identity", unit_attention_identity),
        ("parameter-count report", parameter_count),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
