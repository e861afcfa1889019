use multiformer::frontend::CsiWindow;
use multiformer::model::{ModelConfig, MultiFormer, Preset};
use multiformer::msfn::AttentionMode;
use multiformer::numerics::checkpoint::Checkpoint;
use multiformer::numerics::{Mode, Tensor};
use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn window(cfg: &ModelConfig, seed: u64) -> CsiWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.packets * cfg.links() * cfg.raw_subcarriers;
    let samples = (0..n)
        .map(|_| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    CsiWindow::new(cfg.packets, cfg.n_tx, cfg.n_rx, cfg.raw_subcarriers, 1e3, samples).unwrap()
}

#[test]
fn desk_forward_shapes() {
    let cfg = Preset::Desk.config();
    let model = MultiFormer::<f64>::new(&cfg, 1).unwrap();
    let (w0, w1) = (window(&cfg, 0), window(&cfg, 1));
    let batch = model.token_batch(&[&w0, &w1]).unwrap();
    assert_eq!(batch.freq.shape(), &[2, 16, 48]);
    assert_eq!(batch.time.shape(), &[2, 16, 48]);
    let mut tape = model.tape(Mode::Train).with_seed(3);
    let out = model.forward_batch(&mut tape, &batch).unwrap();
    assert_eq!(tape.shape(out.encoder.phi), &[2, 32, 12, 12]);
    assert_eq!(out.msfn.stages.len(), 3);
    for s in &out.msfn.stages {
        assert_eq!(tape.shape(s.heatmaps.pcm), &[2, 19, 12, 12]);
        assert_eq!(tape.shape(s.heatmaps.paf), &[2, 38, 12, 12]);
        assert!(tape.value(s.heatmaps.pcm).all_finite());
    }
    assert!(out.msfn.stages[0].channel_weights.is_none());
}

#[test]
fn desk_parameter_count_is_stable_across_seeds() {
    let cfg = Preset::Desk.config();
    let a = MultiFormer::<f64>::new(&cfg, 1).unwrap();
    let b = MultiFormer::<f64>::new(&cfg, 2).unwrap();
    assert_eq!(a.count_parameters(), b.count_parameters());
    assert_eq!(a.parameter_breakdown().values().sum::<usize>(), a.count_parameters());
    assert!(a.parameter_breakdown().contains_key("msfn.stage3"));
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let cfg = Preset::Desk.config();
    let model = MultiFormer::<f64>::new(&cfg, 7).unwrap();
    let bytes = model.to_checkpoint().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    let loaded = MultiFormer::<f64>::from_checkpoint(&ck).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.to_checkpoint().to_bytes(), bytes);

    let w = window(&cfg, 4);
    let batch = model.token_batch(&[&w]).unwrap();
    let mut t1 = model.tape(Mode::Eval);
    let mut t2 = loaded.tape(Mode::Eval);
    let o1 = model.forward_batch(&mut t1, &batch).unwrap();
    let o2 = loaded.forward_batch(&mut t2, &batch).unwrap();
    let (a, b) = (o1.msfn.last(), o2.msfn.last());
    assert_eq!(t1.value(a.pcm).data(), t2.value(b.pcm).data());
}

#[test]
fn loading_a_mismatched_checkpoint_fails() {
    let desk = MultiFormer::<f64>::new(&Preset::Desk.config(), 0).unwrap();
    let mut other_cfg = Preset::Desk.config();
    other_cfg.encoder.channels = 16;
    let mut other = MultiFormer::<f64>::new(&other_cfg, 0).unwrap();
    assert!(other.load_checkpoint(&desk.to_checkpoint()).is_err());
}

#[test]
fn every_parameter_receives_gradient_and_each_stage_reaches_the_encoder() {
    let cfg = Preset::Desk.config();
    let model = MultiFormer::<f64>::new(&cfg, 11).unwrap();
    let (w0, w1) = (window(&cfg, 5), window(&cfg, 6));
    let batch = model.token_batch(&[&w0, &w1]).unwrap();

    // full loss: every learnable tensor must see a nonzero gradient
    let mut tape = model.tape(Mode::Train).with_seed(0);
    let out = model.forward_batch(&mut tape, &batch).unwrap();
    let mut terms = Vec::new();
    for s in &out.msfn.stages {
        let h = s.heatmaps.stacked(&mut tape).unwrap();
        let target = tape.constant(Tensor::full(tape.shape(h), 0.3));
        terms.push(tape.mse(h, target).unwrap());
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t).unwrap();
    }
    let grads = tape.backward(loss).unwrap();
    for (id, p) in model.params.iter() {
        let g = grads.get(id).unwrap_or_else(|| panic!("no gradient for {}", p.name));
        assert!(g.data().iter().any(|&v| v != 0.0), "zero gradient for {}", p.name);
    }

    // per-stage loss alone still reaches the encoder
    for stage in 1..=3 {
        let mut tape = model.tape(Mode::Train).with_seed(0);
        let f = tape.constant(batch.freq.clone());
        let t = tape.constant(batch.time.clone());
        let out = model.forward(&mut tape, f, t, stage, AttentionMode::Papm).unwrap();
        let h = out.msfn.last().stacked(&mut tape).unwrap();
        let target = tape.constant(Tensor::full(tape.shape(h), 0.3));
        let loss = tape.mse(h, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        let reached = model
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("encoder."))
            .all(|(id, _)| grads.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)));
        assert!(reached, "stage {stage} loss does not reach every encoder parameter");
    }
}
