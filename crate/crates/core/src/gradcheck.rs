//! Central finite-difference verification of analytic gradients.
//!
//! A check perturbs sampled coordinates of the trainable parameters in a
//! [`ParamStore<f64>`] and compares `(f(θ+h) − f(θ−h)) / 2h` with the
//! gradient produced by [`Graph::backward`]. The error of a coordinate is
//! `|analytic − numeric| / max(1, |analytic|)`.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamGroup, ParamStore, Parameter};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter group; groups with fewer are checked exhaustively.
    pub samples_per_group: usize,
    pub seed: u64,
    pub max_report: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            samples_per_group: 100,
            seed: 0,
            max_report: 5,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub checked_per_group: BTreeMap<ParamGroup, usize>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Largest errors first.
    pub worst: Vec<CoordinateCheck>,
}

/// Checks `loss_fn` against finite differences over the trainable parameters of `store`.
///
/// Gradient buffers in `store` are overwritten; values are restored bit-exactly.
pub fn grad_check<F>(store: &mut ParamStore<f64>, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = loss_fn(&mut g, store)?;
        Ok(g.value(loss).data()[0])
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    for p in store.iter_mut() {
        p.grad = None;
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_into(store);

    let mut by_group: BTreeMap<ParamGroup, Vec<(usize, usize)>> = BTreeMap::new();
    for (pi, p) in store.iter().enumerate().filter(|(_, p)| p.trainable) {
        let coords = by_group.entry(p.group).or_default();
        coords.extend((0..p.numel()).map(|c| (pi, c)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = Vec::new();
    let mut checked_per_group = BTreeMap::new();
    let ids: Vec<_> = store.names().map(str::to_string).collect();
    for (group, coords) in by_group {
        let chosen: Vec<(usize, usize)> = if coords.len() <= cfg.samples_per_group {
            coords
        } else {
            sample(&mut rng, coords.len(), cfg.samples_per_group)
                .into_iter()
                .map(|i| coords[i])
                .collect()
        };
        checked_per_group.insert(group, chosen.len());
        for (pi, c) in chosen {
            let name = &ids[pi];
            let analytic = store
                .get(name)?
                .grad
                .as_ref()
                .map_or(0.0, |g| g[c]);
            let original = store.get(name)?.value.data()[c];
            store.get_mut(name)?.value.data_mut()[c] = original + cfg.step;
            let plus = eval(store)?;
            store.get_mut(name)?.value.data_mut()[c] = original - cfg.step;
            let minus = eval(store)?;
            store.get_mut(name)?.value.data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let error = (analytic - numeric).abs() / analytic.abs().max(1.0);
            results.push(CoordinateCheck {
                param: name.clone(),
                index: c,
                analytic,
                numeric,
                error: if error.is_nan() { f64::INFINITY } else { error },
            });
        }
    }

    results.sort_by(|a, b| b.error.total_cmp(&a.error));
    let max_error = results.first().map_or(0.0, |r| r.error);
    let checked = results.len();
    results.truncate(cfg.max_report);
    Ok(GradCheckReport {
        checked,
        checked_per_group,
        max_error,
        tolerance: cfg.tolerance,
        passed: max_error <= cfg.tolerance,
        worst: results,
    })
}

/// Outcome of checking one primitive over many random cases.
#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub passed: bool,
}

type OpCase = fn(&mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss);
type OpLoss = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

/// Every differentiable primitive, each reduced to a scalar through a fixed random weighting.
pub fn primitive_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("add", case_add),
        ("sub", case_sub),
        ("mul", case_mul),
        ("scale", case_scale),
        ("broadcast_to", case_broadcast),
        ("matmul", case_matmul),
        ("matmul_batched", case_matmul_batched),
        ("matmul_nt", case_matmul_nt),
        ("linear", case_linear),
        ("relu", case_relu),
        ("gelu", case_gelu),
        ("sigmoid", case_sigmoid),
        ("softmax", case_softmax),
        ("layer_norm", case_layer_norm),
        ("sum", case_sum),
        ("mean", case_mean),
        ("reshape", case_reshape),
        ("permute", case_permute),
        ("slice", case_slice),
        ("concat", case_concat),
        ("cross_entropy", case_cross_entropy),
    ]
}

/// Runs every primitive over `cases` random instances.
pub fn check_primitives(cases: usize, cfg: &GradCheckConfig) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (i, (op, make)) in primitive_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let mut max_error: f64 = 0.0;
        for _ in 0..cases {
            let (mut store, loss) = make(&mut rng);
            let report = grad_check(&mut store, loss, cfg)?;
            max_error = max_error.max(report.max_error);
        }
        out.push(OpCheck {
            op,
            cases,
            max_error,
            passed: max_error <= cfg.tolerance,
        });
    }
    Ok(out)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.01..1.5);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..5)
}

fn store_of(tensors: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in tensors {
        s.insert(Parameter::new(name, t, ParamGroup::Backbone)).expect("unique");
    }
    s
}

/// `sum(y ⊙ r)` for a fixed random `r` matching `y`'s shape.
fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = g.input(weights.clone());
    let r = g.reshape(r, &g.shape(y).to_vec())?;
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    x: Tensor<f64>,
    op: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> (ParamStore<f64>, OpLoss) {
    let out_probe = {
        let mut g = Graph::<f64>::inference();
        let v = g.input(x.clone());
        let y = op(&mut g, v).expect("valid case");
        g.shape(y).to_vec()
    };
    let weights = rand_tensor(rng, &out_probe);
    let store = store_of(vec![("x", x)]);
    let loss: OpLoss = Box::new(move |g, s| {
        let x = g.param(s, "x")?;
        let y = op(g, x)?;
        weighted_sum(g, y, &weights)
    });
    (store, loss)
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    a: Tensor<f64>,
    b: Tensor<f64>,
    op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> (ParamStore<f64>, OpLoss) {
    let out_probe = {
        let mut g = Graph::<f64>::inference();
        let va = g.input(a.clone());
        let vb = g.input(b.clone());
        let y = op(&mut g, va, vb).expect("valid case");
        g.shape(y).to_vec()
    };
    let weights = rand_tensor(rng, &out_probe);
    let store = store_of(vec![("a", a), ("b", b)]);
    let loss: OpLoss = Box::new(move |g, s| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        let y = op(g, a, b)?;
        weighted_sum(g, y, &weights)
    });
    (store, loss)
}

fn case_add(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng)];
    let (a, b) = (rand_tensor(rng, &s), rand_tensor(rng, &s));
    binary_case(rng, a, b, |g, a, b| g.add(a, b))
}

fn case_sub(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng)];
    let (a, b) = (rand_tensor(rng, &s), rand_tensor(rng, &s));
    binary_case(rng, a, b, |g, a, b| g.sub(a, b))
}

fn case_mul(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng), dim(rng)];
    let (a, b) = (rand_tensor(rng, &s), rand_tensor(rng, &s));
    binary_case(rng, a, b, |g, a, b| g.mul(a, b))
}

fn case_scale(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| Ok(g.scale(x, -1.75)))
}

fn case_broadcast(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), 1, dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| {
        let s = g.shape(x).to_vec();
        g.broadcast_to(x, &[3, s[0], 2, s[2]])
    })
}

fn case_matmul(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let a = rand_tensor(rng, &[2, m, k]);
    let b = rand_tensor(rng, &[k, n]);
    binary_case(rng, a, b, |g, a, b| g.matmul(a, b))
}

fn case_matmul_batched(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    if rng.random_bool(0.5) {
        let a = rand_tensor(rng, &[3, m, k]);
        let b = rand_tensor(rng, &[3, k, n]);
        binary_case(rng, a, b, |g, a, b| g.matmul(a, b))
    } else {
        let a = rand_tensor(rng, &[m, k]);
        let b = rand_tensor(rng, &[2, k, n]);
        binary_case(rng, a, b, |g, a, b| g.matmul(a, b))
    }
}

fn case_matmul_nt(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let a = rand_tensor(rng, &[2, m, k]);
    let b = rand_tensor(rng, &[2, n, k]);
    binary_case(rng, a, b, |g, a, b| g.matmul_nt(a, b))
}

fn case_linear(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let (r, i, o) = (dim(rng), dim(rng), dim(rng));
    let x = rand_tensor(rng, &[2, r, i]);
    let w = rand_tensor(rng, &[o, i]);
    let b = rand_tensor(rng, &[o]);
    let weights = rand_tensor(rng, &[2, r, o]);
    let store = store_of(vec![("x", x), ("w", w), ("b", b)]);
    let loss: OpLoss = Box::new(move |g, s| {
        let x = g.param(s, "x")?;
        let w = g.param(s, "w")?;
        let b = g.param(s, "b")?;
        let y = g.linear(x, w, Some(b))?;
        weighted_sum(g, y, &weights)
    });
    (store, loss)
}

fn case_relu(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng)];
    let x = rand_away_from_zero(rng, &s);
    unary_case(rng, x, |g, x| Ok(g.relu(x)))
}

fn case_gelu(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| Ok(g.gelu(x)))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| Ok(g.sigmoid(x)))
}

fn case_softmax(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng) + 1];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| g.softmax(x))
}

fn case_layer_norm(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let (r, d) = (dim(rng), dim(rng) + 1);
    let x = rand_tensor(rng, &[r, d]);
    let gamma = rand_tensor(rng, &[d]);
    let beta = rand_tensor(rng, &[d]);
    let weights = rand_tensor(rng, &[r, d]);
    let store = store_of(vec![("x", x), ("gamma", gamma), ("beta", beta)]);
    let loss: OpLoss = Box::new(move |g, s| {
        let x = g.param(s, "x")?;
        let gm = g.param(s, "gamma")?;
        let bt = g.param(s, "beta")?;
        let y = g.layer_norm(x, gm, bt, 1e-6)?;
        weighted_sum(g, y, &weights)
    });
    (store, loss)
}

fn case_sum(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| Ok(g.sum(x)))
}

fn case_mean(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| Ok(g.mean(x)))
}

fn case_reshape(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), 2, dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| {
        let s = g.shape(x).to_vec();
        g.reshape(x, &[s[0] * 2, s[2]])
    })
}

fn case_permute(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), dim(rng), dim(rng), dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| g.permute(x, &[0, 2, 1, 3]))
}

fn case_slice(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let s = [dim(rng), 5, dim(rng)];
    let x = rand_tensor(rng, &s);
    unary_case(rng, x, |g, x| g.slice(x, 1, 1, 3))
}

fn case_concat(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let (b, d) = (dim(rng), dim(rng));
    let (la, lc) = (dim(rng), dim(rng));
    let a = rand_tensor(rng, &[b, la, d]);
    let c = rand_tensor(rng, &[b, lc, d]);
    binary_case(rng, a, c, |g, a, c| g.concat_seq(&[a, c, a]))
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpLoss) {
    let (b, c) = (dim(rng), dim(rng) + 1);
    let logits = rand_tensor(rng, &[b, c]);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let store = store_of(vec![("logits", logits)]);
    let loss: OpLoss = Box::new(move |g, s| {
        let z = g.param(s, "logits")?;
        g.cross_entropy(z, &labels)
    });
    (store, loss)
}
