//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::{Gradients, ParamId, ParamStore};
use super::tape::{Mode, ReduceKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
/// Primitive tolerance on relative error.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Composed-model tolerance on relative error.
pub const MODEL_TOL: f64 = 1e-3;
/// Denominator floor so exactly-zero gradients compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// Up to `per_tensor` random coordinates per parameter tensor.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Coordinates [`check_piecewise`] verified with a reduced step because
    /// a branch flipped within ±h.
    pub reduced: usize,
    /// Draws rejected by [`check_piecewise`] because every step tried
    /// flipped a branch.
    pub screened: usize,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }

    pub fn reduced(&self) -> usize {
        self.params.iter().map(|p| p.reduced).sum()
    }

    pub fn screened(&self) -> usize {
        self.params.iter().map(|p| p.screened).sum()
    }
}

/// Compares the analytic gradient from `grads_fn` against central differences
/// of `loss_fn` on the selected coordinates of every gradient-requiring
/// parameter.
pub fn check<L, G>(store: &ParamStore<f64>, coords: Coords, h: f64, loss_fn: L, grads_fn: G) -> Result<CheckReport>
where
    L: Fn(&ParamStore<f64>) -> Result<f64>,
    G: Fn(&ParamStore<f64>) -> Result<Gradients<f64>>,
{
    let grads = grads_fn(store)?;
    let mut work = store.clone();
    let mut rng = match coords {
        Coords::Sample { seed, .. } => ChaCha8Rng::seed_from_u64(seed),
        Coords::All => ChaCha8Rng::seed_from_u64(0),
    };
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if !p.requires_grad {
            continue;
        }
        let n = p.value.numel();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_tensor, .. } if n <= per_tensor => (0..n).collect(),
            Coords::Sample { per_tensor, .. } => (0..per_tensor).map(|_| rng.random_range(0..n)).collect(),
        };
        let analytic = grads.get(id);
        let mut worst: f64 = 0.0;
        for &c in &picks {
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            let (up, down) = probe(&mut work, id, c, h, &loss_fn)?;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
        }
        out.push(ParamCheck {
            name: p.name.clone(),
            coords: picks.len(),
            max_rel_err: worst,
            reduced: 0,
            screened: 0,
        });
    }
    Ok(CheckReport { params: out })
}

/// Steps tried, as fractions of `h`, when the ±h window is not smooth.
const STEP_FRACTIONS: [f64; 4] = [1.0, 1e-1, 1e-2, 1e-3];

/// Like [`check`] with [`Coords::Sample`], for piecewise-smooth losses.
/// `loss_fn` also returns a branch signature (see
/// [`Tape::branch_signature`]). A coordinate whose signature changes
/// between `x − h`, `x` and `x + h` straddles a kink; it is differenced with
/// the largest step in `h · STEP_FRACTIONS` that stays on one smooth piece,
/// or redrawn if none does (up to `8 * per_tensor` draws per tensor).
/// Step selection never consults the analytic gradient.
pub fn check_piecewise<L, G>(
    store: &ParamStore<f64>,
    per_tensor: usize,
    seed: u64,
    h: f64,
    loss_fn: L,
    grads_fn: G,
) -> Result<CheckReport>
where
    L: Fn(&ParamStore<f64>) -> Result<(f64, u64)>,
    G: Fn(&ParamStore<f64>) -> Result<Gradients<f64>>,
{
    let grads = grads_fn(store)?;
    let (_, base) = loss_fn(store)?;
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if !p.requires_grad {
            continue;
        }
        let n = p.value.numel();
        let analytic = grads.get(id);
        let (mut worst, mut checked, mut reduced, mut screened): (f64, usize, usize, usize) = (0.0, 0, 0, 0);
        let mut draws = 0;
        while checked < per_tensor.min(n) && draws < 8 * per_tensor {
            let c = if n <= per_tensor {
                draws % n
            } else {
                rng.random_range(0..n)
            };
            draws += 1;
            let mut numeric = None;
            for (k, frac) in STEP_FRACTIONS.iter().enumerate() {
                let step = h * frac;
                let ((up, s_up), (down, s_down)) = probe(&mut work, id, c, step, &loss_fn)?;
                if s_up == base && s_down == base {
                    numeric = Some((up - down) / (2.0 * step));
                    reduced += usize::from(k > 0);
                    break;
                }
            }
            let Some(num) = numeric else {
                screened += 1;
                continue;
            };
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            worst = worst.max(rel_err(a, num));
            checked += 1;
        }
        out.push(ParamCheck {
            name: p.name.clone(),
            coords: checked,
            max_rel_err: worst,
            reduced,
            screened,
        });
    }
    Ok(CheckReport { params: out })
}

/// Loss at `x + h·e_c` and `x − h·e_c`.
fn probe<R, L>(work: &mut ParamStore<f64>, id: ParamId, c: usize, h: f64, loss_fn: &L) -> Result<(R, R)>
where
    L: Fn(&ParamStore<f64>) -> Result<R>,
{
    let orig = work.value(id).data()[c];
    work.value_mut(id).data_mut()[c] = orig + h;
    let up = loss_fn(work)?;
    work.value_mut(id).data_mut()[c] = orig - h;
    let down = loss_fn(work)?;
    work.value_mut(id).data_mut()[c] = orig;
    Ok((up, down))
}

/// Signature of a single-primitive check: given tensors registered as
/// parameters, build the op on the tape and return its output.
type PrimitiveFn = fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

struct PrimitiveCase {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    mode: Mode,
    build: PrimitiveFn,
}

fn cases() -> Vec<PrimitiveCase> {
    use Mode::{Eval, Train};
    let c = |name, inputs: &[&[usize]], mode, build: PrimitiveFn| PrimitiveCase {
        name,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        mode,
        build,
    };
    vec![
        c("add", &[&[3, 4], &[3, 4]], Eval, |t, v| t.add(v[0], v[1])),
        c("sub", &[&[3, 4], &[3, 4]], Eval, |t, v| t.sub(v[0], v[1])),
        c("mul", &[&[3, 4], &[3, 4]], Eval, |t, v| t.mul(v[0], v[1])),
        c("scale", &[&[5]], Eval, |t, v| t.scale(v[0], -1.7)),
        c("broadcast_mul", &[&[2, 3, 4], &[2, 1, 4]], Eval, |t, v| {
            t.broadcast_mul(v[0], v[1], [2, 3, 4], [2, 1, 4])
        }),
        c("broadcast_add", &[&[2, 3, 4], &[3, 1]], Eval, |t, v| {
            t.broadcast_add(v[0], v[1], [2, 3, 4], [1, 3, 1])
        }),
        c("linear", &[&[3, 4], &[4, 5], &[5]], Eval, |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        c("bmm", &[&[2, 3, 4], &[2, 4, 5]], Eval, |t, v| t.bmm(v[0], v[1], false)),
        c("bmm_nt", &[&[2, 3, 4], &[2, 5, 4]], Eval, |t, v| {
            t.bmm(v[0], v[1], true)
        }),
        c("softmax", &[&[3, 5]], Eval, |t, v| t.softmax(v[0], 1)),
        c("softmax_axis0", &[&[4, 3]], Eval, |t, v| t.softmax(v[0], 0)),
        c("relu", &[&[4, 6]], Eval, |t, v| t.relu(v[0])),
        c("sigmoid", &[&[4, 6]], Eval, |t, v| t.sigmoid(v[0])),
        c("conv2d", &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]], Eval, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        c("conv2d_strided", &[&[2, 2, 5, 5], &[2, 2, 3, 3]], Eval, |t, v| {
            t.conv2d(v[0], v[1], None, 2, 1)
        }),
        c(
            "conv2d_pointwise",
            &[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]],
            Eval,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        ),
        c("batch_norm", &[&[4, 3, 2], &[3], &[3]], Train, |t, v| {
            t.batch_norm_train(v[0], v[1], v[2], 1).map(|r| r.0)
        }),
        c("batch_norm_eval", &[&[4, 3], &[3], &[3]], Eval, |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], 1, &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0])
        }),
        c("layer_norm", &[&[3, 6], &[6], &[6]], Eval, |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        }),
        c("reduce_max", &[&[2, 5, 3]], Eval, |t, v| {
            t.reduce(v[0], ReduceKind::Max, 1)
        }),
        c("reduce_mean", &[&[2, 5, 3]], Eval, |t, v| {
            t.reduce(v[0], ReduceKind::Mean, 1)
        }),
        c("global_pool_max", &[&[2, 3, 4, 4]], Eval, |t, v| {
            t.global_pool(v[0], ReduceKind::Max)
        }),
        c("global_pool_avg", &[&[2, 3, 4, 4]], Eval, |t, v| {
            t.global_pool(v[0], ReduceKind::Mean)
        }),
        c("pool2d_max", &[&[1, 2, 4, 4]], Eval, |t, v| {
            t.pool2d(v[0], ReduceKind::Max, 2, 2)
        }),
        c("pool2d_avg", &[&[1, 2, 5, 5]], Eval, |t, v| {
            t.pool2d(v[0], ReduceKind::Mean, 3, 1)
        }),
        c("reshape", &[&[2, 6]], Eval, |t, v| t.reshape(v[0], &[3, 4])),
        c("concat", &[&[2, 3, 4], &[2, 1, 4]], Eval, |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        c("sum", &[&[3, 3]], Eval, |t, v| t.sum(v[0])),
        c("mse", &[&[3, 4], &[3, 4]], Eval, |t, v| t.mse(v[0], v[1])),
    ]
}

pub fn primitive_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs the finite-difference check for one named primitive on random
/// inputs. The scalar loss is `Σ out ⊙ R` for a fixed random `R`.
pub fn check_primitive(name: &str, seed: u64) -> Result<CheckReport> {
    let case = cases()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::config(format!("unknown primitive `{name}`")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("{}.in{i}", case.name), Tensor::randn(s, 1.0, &mut rng)))
        .collect();
    if case.name.starts_with("batch_norm") || case.name == "layer_norm" {
        // keep the affine scale away from zero so the input gradient is informative
        for id in &ids[1..] {
            store
                .value_mut(*id)
                .data_mut()
                .iter_mut()
                .for_each(|g| *g = 1.0 + 0.5 * *g);
        }
    }
    let mode = case.mode;
    let build = case.build;
    let probe_shape = {
        let mut t = Tape::new(&store, mode);
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
        let out = build(&mut t, &vars)?;
        t.shape(out).to_vec()
    };
    let weights = Tensor::<f64>::randn(&probe_shape, 1.0, &mut rng);

    let forward = |store: &ParamStore<f64>, want_grads: bool| -> Result<(f64, Option<Gradients<f64>>)> {
        let mut t = Tape::new(store, mode);
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
        let out = build(&mut t, &vars)?;
        let w = t.constant(weights.clone());
        let prod = t.mul(out, w)?;
        let loss = t.sum(prod)?;
        let value = t.value(loss).data()[0];
        let grads = if want_grads { Some(t.backward(loss)?) } else { None };
        Ok((value, grads))
    };
    check(
        &store,
        Coords::All,
        FD_STEP,
        |s| forward(s, false).map(|r| r.0),
        |s| forward(s, true).map(|r| r.1.unwrap()),
    )
}
