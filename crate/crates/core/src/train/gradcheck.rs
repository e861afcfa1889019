use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss_total;
use crate::error::Result;
use crate::model::{MultiFormer, Preset};
use crate::msfn::AttentionMode;
use crate::numerics::gradcheck::{check_piecewise, CheckReport, FD_STEP};
use crate::numerics::{Gradients, Mode, ParamStore, Tape, Tensor};

/// Standard deviation of the label offsets around each stage's initial
/// output.
const LABEL_JITTER: f64 = 0.01;

/// Finite-difference check of the full training loss of the desk model
/// (batch 2, all stages, dropout masks fixed by `seed`). Coordinates whose
/// ±h window flips a ReLU or max branch are redrawn; see
/// [`check_piecewise`](crate::numerics::gradcheck::check_piecewise).
pub fn check_model_gradients(seed: u64, per_tensor: usize) -> Result<CheckReport> {
    let model = MultiFormer::<f64>::new(&Preset::Desk.config(), seed)?;
    let shape = model.config.token_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let freq = Tensor::randn(&[2, shape.freq_tokens, shape.freq_width], 1.0, &mut rng);
    let time = Tensor::randn(&[2, shape.time_tokens, shape.time_width], 1.0, &mut rng);

    // Each stage gets labels near its own initial output. A small loss keeps
    // the cancellation error of the differences well below the gradients.
    let labels: Vec<(Tensor<f64>, Tensor<f64>)> = {
        let mut tape = Tape::new(&model.params, Mode::Train)
            .with_buffers(&model.buffers)
            .with_seed(seed);
        let f = tape.constant(freq.clone());
        let t = tape.constant(time.clone());
        let out = model.forward(&mut tape, f, t, model.config.stages, AttentionMode::Papm)?;
        let mut jitter = |v: &Tensor<f64>| {
            let mut out = Tensor::randn(v.shape(), LABEL_JITTER, &mut rng);
            out.data_mut().iter_mut().zip(v.data()).for_each(|(o, x)| *o += x);
            out
        };
        out.msfn
            .heatmaps()
            .map(|h| (jitter(tape.value(h.pcm)), jitter(tape.value(h.paf))))
            .collect()
    };
    // Loss, branch signature and, on request, gradients.
    let run = |store: &ParamStore<f64>, backward: bool| -> Result<(f64, u64, Option<Gradients<f64>>)> {
        let mut tape = Tape::new(store, Mode::Train)
            .with_buffers(&model.buffers)
            .with_seed(seed);
        let f = tape.constant(freq.clone());
        let t = tape.constant(time.clone());
        let out = model.forward(&mut tape, f, t, model.config.stages, AttentionMode::Papm)?;
        let mut total = None;
        for (h, (pcm, paf)) in out.msfn.heatmaps().zip(&labels) {
            let p = tape.constant(pcm.clone());
            let q = tape.constant(paf.clone());
            let stage = loss_total(&mut tape, [h], p, q)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, stage)?,
                None => stage,
            });
        }
        let loss = total.expect("at least one stage");
        let value = tape.value(loss).data()[0];
        let sig = tape.branch_signature();
        let grads = if backward { Some(tape.backward(loss)?) } else { None };
        Ok((value, sig, grads))
    };
    check_piecewise(
        &model.params,
        per_tensor,
        seed,
        FD_STEP,
        |store| {
            let (v, sig, _) = run(store, false)?;
            Ok((v, sig))
        },
        |store| Ok(run(store, true)?.2.expect("requested")),
    )
}
