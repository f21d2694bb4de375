//! Central finite-difference verification of the conditioning modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::attention::{ChannelAttention, Coam, PositionAttention};
use super::layers::Conv;
use super::prenet::PreNet;
use super::tape::{ParamStore, Tape, Var};
use super::tensor::Tensor;
use super::tokens::TokenEncoder;
use crate::error::Result;

/// Denominator floor of the relative error, so that gradients which are zero
/// up to rounding do not produce spurious failures.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCheckModule {
    PositionAttention,
    ChannelAttention,
    Coam,
    PrenetFuse,
    ConditionTokens,
    /// The condition-token projection alone: a map that is linear in every
    /// input, so differences are exact up to rounding.
    LinearProjection,
}

impl GradCheckModule {
    pub const ALL: [GradCheckModule; 6] = [
        GradCheckModule::PositionAttention,
        GradCheckModule::ChannelAttention,
        GradCheckModule::Coam,
        GradCheckModule::PrenetFuse,
        GradCheckModule::ConditionTokens,
        GradCheckModule::LinearProjection,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub worst_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub module: GradCheckModule,
    pub eps: f64,
    pub max_rel_error: f64,
    pub groups: Vec<GroupReport>,
    /// Coordinates skipped because a perturbation flipped a ReLU.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn worst_group(&self) -> &GroupReport {
        self.groups
            .iter()
            .max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error))
            .expect("at least one group")
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

type Build = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>;

struct Setup {
    store: ParamStore<f64>,
    inputs: Vec<(String, Tensor<f64>)>,
    build: Build,
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Perturbs every parameter away from the structured init (zero biases etc.).
fn jitter_params<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn setup(module: GradCheckModule, rng: &mut ChaCha8Rng) -> Setup {
    let (c, cc, h, w) = (4, 3, 4, 4);
    let mut store = ParamStore::new();
    let feat_cond = |rng: &mut ChaCha8Rng| {
        vec![
            ("feat".to_string(), random_tensor(rng, &[c, h, w], 1.0)),
            ("cond".to_string(), random_tensor(rng, &[cc, h, w], 1.0)),
        ]
    };
    let (inputs, build): (Vec<(String, Tensor<f64>)>, Build) = match module {
        GradCheckModule::PositionAttention => {
            let m = PositionAttention::new(&mut store, "pos", c, cc, rng);
            (feat_cond(rng), Box::new(move |t, x| m.forward(t, x[0], x[1])))
        }
        GradCheckModule::ChannelAttention => {
            let m = ChannelAttention::new(&mut store, "ch", c, cc, rng);
            (feat_cond(rng), Box::new(move |t, x| m.forward(t, x[0], x[1])))
        }
        GradCheckModule::Coam => {
            let m = Coam::new(&mut store, "coam", c, cc, rng);
            (feat_cond(rng), Box::new(move |t, x| m.forward(t, x[0], x[1])))
        }
        GradCheckModule::PrenetFuse => {
            let m = PreNet::new(&mut store, "prenet", 3, cc, c, rng);
            let inputs = vec![
                ("image".to_string(), random_tensor(rng, &[3, 16, 16], 1.0)),
                ("cond".to_string(), random_tensor(rng, &[cc, 16, 16], 1.0)),
            ];
            (inputs, Box::new(move |t, x| m.forward(t, x[0], x[1])))
        }
        GradCheckModule::ConditionTokens => {
            let dim = 8;
            let m = TokenEncoder::new(&mut store, "tokens", dim, cc, rng);
            let inputs = vec![
                ("image_tokens".to_string(), random_tensor(rng, &[dim, h * w], 1.0)),
                ("cond".to_string(), random_tensor(rng, &[cc, h, w], 1.0)),
            ];
            (
                inputs,
                Box::new(move |t, x| {
                    let seq = m.condition_tokens(t, x[1], x[0], (h, w))?;
                    Ok(m.encode(t, seq, (h, w)))
                }),
            )
        }
        GradCheckModule::LinearProjection => {
            let m = Conv::new(&mut store, "proj", cc, 8, 1, 1, true, rng);
            let inputs = vec![("cond".to_string(), random_tensor(rng, &[cc, h, w], 1.0))];
            (inputs, Box::new(move |t, x| Ok(m.forward(t, x[0]))))
        }
    };
    jitter_params(&mut store, rng);
    Setup { store, inputs, build }
}

struct Eval {
    loss: f64,
    relu: Vec<bool>,
}

fn evaluate(s: &Setup, store: &ParamStore<f64>, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<Eval> {
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = (s.build)(&mut tape, &vars)?;
    let loss = tape.weighted_sum(out, weights.to_vec());
    Ok(Eval {
        loss: tape.value(loss).item(),
        relu: tape.relu_pattern(),
    })
}

/// Compares tape gradients of a random linear functional of the module output
/// with central differences, for every parameter and input coordinate.
pub fn grad_check(module: GradCheckModule, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = setup(module, &mut rng);
    let inputs: Vec<Tensor<f64>> = s.inputs.iter().map(|(_, t)| t.clone()).collect();

    let mut tape = Tape::new(&s.store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = (s.build)(&mut tape, &vars)?;
    let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = tape.weighted_sum(out, weights.clone());
    let grads = tape.backward(loss);

    let mut groups = Vec::new();
    let mut skipped = 0;

    let mut record = |name: String, analytic: &[f64], numeric: Vec<Option<f64>>| {
        let mut g = GroupReport {
            name,
            worst_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let Some(n) = n else {
                skipped += 1;
                continue;
            };
            g.checked += 1;
            let e = rel_error(*a, n);
            if e > g.worst_rel_error || g.checked == 1 {
                g.worst_rel_error = e;
                g.worst_index = i;
                g.analytic = *a;
                g.numeric = n;
            }
        }
        groups.push(g);
    };

    let central = |plus: Eval, minus: Eval| -> Option<f64> {
        (plus.relu == minus.relu).then(|| (plus.loss - minus.loss) / (2.0 * eps))
    };

    for id in s.store.ids() {
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; s.store.get(id).len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut store = s.store.clone();
        for i in 0..analytic.len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = evaluate(&s, &store, &inputs, &weights)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = evaluate(&s, &store, &inputs, &weights)?;
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push(central(plus, minus));
        }
        record(s.store.name(id).to_string(), &analytic, numeric);
    }

    for (k, (name, _)) in s.inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut xs = inputs.clone();
        for i in 0..analytic.len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let plus = evaluate(&s, &s.store, &xs, &weights)?;
            xs[k].data_mut()[i] = orig - eps;
            let minus = evaluate(&s, &s.store, &xs, &weights)?;
            xs[k].data_mut()[i] = orig;
            numeric.push(central(plus, minus));
        }
        record(format!("input:{name}"), &analytic, numeric);
    }

    let max_rel_error = groups.iter().map(|g| g.worst_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        module,
        eps,
        max_rel_error,
        groups,
        skipped_kinks: skipped,
    })
}
