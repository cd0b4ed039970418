//! Central finite-difference verification of tape gradients (f64 only).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn is_finite(&self) -> bool {
        self.max_rel_err.is_finite() && self.mean_rel_err.is_finite()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.is_finite() && self.max_rel_err <= tol
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of the scalar `f(point)` against central
/// differences with the given `step`.
///
/// `f` receives a fresh graph and the leaf holding the (possibly perturbed)
/// point and must return a one-element node.
pub fn grad_check<Fun>(f: Fun, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::Parameter(alloc::format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = f(&mut g, x)?;
        g.value(y).item()
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(t) => t.data().to_vec(),
        None => alloc::vec![0.0; point.len()],
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    let mut total = 0.0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        total += e;
        if e > max_rel_err || e.is_nan() {
            max_rel_err = e;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        mean_rel_err: total / point.len() as f64,
        worst_index,
        analytic,
        numeric,
    })
}

/// One input of a suite case.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    /// Draw values from `[0.5, 1.5)` instead of a standard normal.
    pub positive: bool,
}

fn input(shape: &[usize]) -> InputSpec {
    InputSpec {
        shape: shape.to_vec(),
        positive: false,
    }
}

/// Inputs plus integer settings (stride, group count) of one draw.
pub struct Draw {
    pub inputs: Vec<InputSpec>,
    pub settings: Vec<usize>,
}

impl From<Vec<InputSpec>> for Draw {
    fn from(inputs: Vec<InputSpec>) -> Self {
        Self {
            inputs,
            settings: Vec::new(),
        }
    }
}

type Build = fn(&mut Graph<f64>, &[Var], &[usize]) -> Result<Var>;
type Shapes = fn(&mut SplitMix64) -> Draw;

/// A named differentiable operation with a generator of random input shapes.
pub struct SuiteCase {
    pub name: &'static str,
    shapes: Shapes,
    build: Build,
}

fn dim(rng: &mut SplitMix64, lo: u64, hi: u64) -> usize {
    (lo + rng.below(hi - lo + 1)) as usize
}

fn matrix(rng: &mut SplitMix64) -> Draw {
    vec![input(&[dim(rng, 1, 4), dim(rng, 2, 5)])].into()
}

fn pair(rng: &mut SplitMix64) -> Draw {
    let s = [dim(rng, 1, 4), dim(rng, 2, 5)];
    vec![input(&s), input(&s)].into()
}

/// Every tape primitive plus the full distillation objective.
pub fn suite() -> Vec<SuiteCase> {
    use crate::distill::{distill_loss, DistillSpec, Reduction};
    use alloc::collections::BTreeMap;

    fn case(name: &'static str, shapes: Shapes, build: Build) -> SuiteCase {
        SuiteCase { name, shapes, build }
    }
    vec![
        case(
            "matmul",
            |r| {
                let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                vec![input(&[m, k]), input(&[k, n])].into()
            },
            |g, x, _| g.matmul(x[0], x[1]),
        ),
        case("transpose", matrix, |g, x, _| g.transpose(x[0])),
        case("add", pair, |g, x, _| g.add(x[0], x[1])),
        case("sub", pair, |g, x, _| g.sub(x[0], x[1])),
        case("mul", pair, |g, x, _| g.mul(x[0], x[1])),
        case(
            "bias_add",
            |r| {
                let (m, n) = (dim(r, 1, 4), dim(r, 1, 5));
                vec![input(&[m, n]), input(&[n])].into()
            },
            |g, x, _| g.bias_add(x[0], x[1]),
        ),
        case("scale", matrix, |g, x, _| Ok(g.scale(x[0], -0.7))),
        case(
            "mul_scalar",
            |r| {
                let mut v = matrix(r);
                v.inputs.push(input(&[1]));
                v
            },
            |g, x, _| g.mul_scalar(x[0], x[1]),
        ),
        case(
            "conv1d",
            |r| {
                let groups = dim(r, 1, 2);
                let (ci, co, k) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 3));
                let stride = dim(r, 1, 2);
                let t = k + dim(r, 1, 5);
                Draw {
                    inputs: vec![input(&[t, groups * ci]), input(&[groups * co, k, ci]), input(&[groups * co])],
                    settings: vec![stride, groups],
                }
            },
            |g, x, s| g.conv1d(x[0], x[1], Some(x[2]), s[0], s[1]),
        ),
        case(
            "group_norm",
            |r| {
                let groups = dim(r, 1, 2);
                let c = groups * dim(r, 1, 2);
                let t = dim(r, 3, 6);
                Draw {
                    inputs: vec![input(&[t, c]), input(&[c]), input(&[c])],
                    settings: vec![groups],
                }
            },
            |g, x, s| g.group_norm(x[0], x[1], x[2], s[0]),
        ),
        case(
            "layer_norm",
            |r| {
                let (m, n) = (dim(r, 1, 4), dim(r, 2, 6));
                vec![input(&[m, n]), input(&[n]), input(&[n])].into()
            },
            |g, x, _| g.layer_norm(x[0], x[1], x[2]),
        ),
        case("gelu", matrix, |g, x, _| Ok(g.gelu(x[0]))),
        case("sigmoid", matrix, |g, x, _| Ok(g.sigmoid(x[0]))),
        case(
            "log",
            |r| {
                let mut v = matrix(r);
                v.inputs[0].positive = true;
                v
            },
            |g, x, _| Ok(g.log(x[0])),
        ),
        case("softmax", matrix, |g, x, _| Ok(g.softmax(x[0]))),
        case("log_softmax", matrix, |g, x, _| Ok(g.log_softmax(x[0]))),
        case("l1_distance", pair, |g, x, _| g.l1_distance(x[0], x[1])),
        case("cosine_similarity", pair, |g, x, _| g.cosine_similarity(x[0], x[1])),
        case("sum", matrix, |g, x, _| Ok(g.sum(x[0]))),
        case("mean", matrix, |g, x, _| Ok(g.mean(x[0]))),
        case("mean_rows", matrix, |g, x, _| g.mean_rows(x[0])),
        case(
            "concat",
            |r| {
                let (m, n, m2) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
                vec![input(&[m, n]), input(&[m2, n])].into()
            },
            |g, x, _| {
                let a = g.concat(&[x[0], x[1]], 0)?;
                let t0 = g.transpose(x[0])?;
                let t1 = g.transpose(x[1])?;
                let b = g.concat(&[t0, t1], 1)?;
                let b = g.transpose(b)?;
                g.add(a, b)
            },
        ),
        case("slice", matrix, |g, x, _| {
            let n = g.shape(x[0])[1];
            let a = g.slice(x[0], 1, 1, n)?;
            let b = g.slice(x[0], 0, 0, 1)?;
            let (sa, sb) = (g.sum(a), g.sum(b));
            let sb = g.scale(sb, 1.3);
            g.add(sa, sb)
        }),
        case("reshape", matrix, |g, x, _| {
            let s = g.shape(x[0]).to_vec();
            g.reshape(x[0], &[s[1], s[0]])
        }),
        case(
            "distill_loss",
            |r| {
                let s = [dim(r, 1, 4), dim(r, 2, 5)];
                vec![input(&s), input(&s), input(&s), input(&s)].into()
            },
            |g, x, _| {
                let spec = DistillSpec {
                    predicted_layers: vec![1, 2],
                    lambda: 1.0,
                    reduction: Reduction::MeanOverTime,
                };
                let student: BTreeMap<usize, Var> = [(1, x[0]), (2, x[1])].into_iter().collect();
                let teacher: BTreeMap<usize, Var> = [(1, x[2]), (2, x[3])].into_iter().collect();
                Ok(distill_loss(g, &student, &teacher, &spec)?.total)
            },
        ),
    ]
}

/// Fixed pseudo-random projection weights shaped like `y`, so every output
/// element contributes a distinct amount to the checked scalar.
fn weights(g: &mut Graph<f64>, y: Var, salt: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = SplitMix64::new(derive_seed(salt, &[n as u64]));
    let w = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    g.constant(Tensor::new(shape, w).expect("non-empty output"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub report: GradCheckReport,
}

/// Runs every case of [`suite`] on `shapes_per_case` random shape draws.
pub fn run_suite(seed: u64, shapes_per_case: usize, step: f64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (ci, case) in suite().iter().enumerate() {
        for si in 0..shapes_per_case {
            let mut rng = SplitMix64::new(derive_seed(seed, &[ci as u64, si as u64]));
            let draw = (case.shapes)(&mut rng);
            let specs = &draw.inputs;
            let sizes: Vec<usize> = specs.iter().map(|s| s.shape.iter().product()).collect();
            let total: usize = sizes.iter().sum();
            let point: Vec<f64> = specs
                .iter()
                .zip(&sizes)
                .flat_map(|(s, &n)| (0..n).map(|_| if s.positive { rng.uniform_range(0.5, 1.5) } else { rng.normal() }).collect::<Vec<_>>())
                .collect();
            let point = Tensor::new(vec![1, total], point)?;
            let build = case.build;
            let f = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
                let mut inputs = Vec::with_capacity(specs.len());
                let mut off = 0;
                for (s, &n) in specs.iter().zip(&sizes) {
                    let part = g.slice(x, 1, off, off + n)?;
                    inputs.push(g.reshape(part, &s.shape)?);
                    off += n;
                }
                let y = build(g, &inputs, &draw.settings)?;
                if g.shape(y).iter().product::<usize>() == 1 {
                    return Ok(y);
                }
                let w = weights(g, y, ci as u64);
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            };
            out.push(SuiteResult {
                name: case.name,
                shapes: specs.iter().map(|s| s.shape.clone()).collect(),
                report: grad_check(f, &point, step)?,
            });
        }
    }
    Ok(out)
}
