//! Central finite-difference verification of autodiff gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::model::{DbfemNet, ModelConfig, Variant};
use crate::nn::{Block, BlockSpec};
use crate::params::{Init, Layout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step; must lie in `[1e-6, 1e-4]`.
    pub h: f64,
    /// Check at most this many coordinates, sampled uniformly over all inputs.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1, |a|, |n|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a relu kink or
    /// changed a max-pool winner.
    pub skipped: usize,
}

/// Relative error used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must return a scalar, got {:?}", value.shape()),
        ));
    }
    Ok((value.data()[0], g.kink_signature()))
}

/// Compares autodiff gradients of a scalar function of several tensors with
/// central differences `(f(x+h) - f(x-h)) / 2h`.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::InvalidArgument(format!("step {} outside [1e-6, 1e-4]", opts.h)));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base_signature = g.kink_signature();
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    if let Some(limit) = opts.max_coords {
        if limit < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), limit).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|k| coords[k]).collect();
        }
    }

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + opts.h;
        let (plus, sig_plus) = evaluate(&f, &work)?;
        work[i].data_mut()[j] = orig - opts.h;
        let (minus, sig_minus) = evaluate(&f, &work)?;
        work[i].data_mut()[j] = orig;
        if sig_plus != base_signature || sig_minus != base_signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.h);
        let err = relative_error(analytic[i][j], numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

/// Single-input convenience form; returns the maximum relative error.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        h,
        ..GradCheckOptions::default()
    };
    let report = grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(point), opts)?;
    Ok(report.max_rel_error)
}

/// Scalar-valued function of the inputs of a suite case.
pub type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// One entry of the registered gradient-check suite.
pub struct SuiteCase {
    pub name: String,
    /// Independent random draws of the inputs.
    pub points: Vec<Vec<Tensor<f64>>>,
    pub max_coords: Option<usize>,
    pub func: CaseFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CaseResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && self.checked > 0
    }
}

/// Tolerance every suite case must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Contracts `y` with a fixed random tensor so every output element
/// contributes a distinct weight to the scalar.
fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn op_case(
    name: &str,
    shapes: &[&[usize]],
    out_shape: &[usize],
    draws: usize,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> SuiteCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..draws)
        .map(|_| shapes.iter().map(|s| uniform(&mut rng, s, 1.0)).collect())
        .collect();
    let weights = uniform(&mut rng, out_shape, 1.0);
    SuiteCase {
        name: name.to_string(),
        points,
        max_coords: None,
        func: Box::new(move |g, v| {
            let y = f(g, v)?;
            project(g, y, &weights)
        }),
    }
}

/// Random values for every parameter of `layout`, including those a fresh
/// network initialises to zero or a constant.
fn random_params(layout: &Layout, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    layout
        .specs()
        .iter()
        .map(|spec| {
            let bound = match spec.init {
                Init::HeUniform { fan_in } => (6.0 / fan_in.max(1) as f64).sqrt(),
                Init::Zeros | Init::Constant(_) => 0.3,
            };
            uniform(rng, &spec.shape, bound)
        })
        .collect()
}

fn block_case(name: &str, spec: BlockSpec, input: [usize; 4], draws: usize, seed: u64) -> Result<SuiteCase> {
    let mut layout = Layout::new();
    let block = Block::build(&mut layout, name, &spec)?;
    let (out, _) = block.trace([input[1], input[2], input[3]])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..draws)
        .map(|_| {
            let mut p = vec![uniform(&mut rng, &input, 1.0)];
            p.extend(random_params(&layout, &mut rng));
            p
        })
        .collect();
    let weights = uniform(&mut rng, &[input[0], out[0], out[1], out[2]], 1.0);
    Ok(SuiteCase {
        name: name.to_string(),
        points,
        max_coords: Some(120),
        func: Box::new(move |g, v| {
            let y = block.forward(g, &v[1..], v[0])?;
            project(g, y, &weights)
        }),
    })
}

fn model_case(config: &ModelConfig, draws: usize, seed: u64) -> Result<SuiteCase> {
    let net = DbfemNet::new(config)?;
    let shape = crate::model::InputShape::of(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 2;
    let labels: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();
    let with_batch = |s: [usize; 3]| [batch, s[0], s[1], s[2]];
    let points = (0..draws)
        .map(|_| {
            let mut p = vec![
                uniform(&mut rng, &with_batch(shape.global), 1.0),
                uniform(&mut rng, &with_batch(shape.regions), 1.0),
            ];
            p.extend(random_params(net.layout(), &mut rng));
            p
        })
        .collect();
    Ok(SuiteCase {
        name: format!("model {}", config.variant),
        points,
        max_coords: Some(200),
        func: Box::new(move |g, v| {
            let logits = net.forward(g, &v[2..], Some(v[0]), Some(v[1]))?;
            g.softmax_cross_entropy(logits, &labels)
        }),
    })
}

/// Every differentiable op, every block kind and the desk-scale network
/// with attention fusion, each with `draws` seeded random input points.
pub fn suite_cases(draws: usize, seed: u64) -> Result<Vec<SuiteCase>> {
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let mut cases = vec![
        op_case(
            "conv2d",
            &[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]],
            &[2, 4, 3, 3],
            draws,
            s(1),
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        op_case(
            "add",
            &[&[2, 3, 4, 4], &[2, 3, 1, 1]],
            &[2, 3, 4, 4],
            draws,
            s(2),
            |g, v| g.add(v[0], v[1]),
        ),
        op_case(
            "mul",
            &[&[2, 3, 4, 4], &[2, 1, 4, 4]],
            &[2, 3, 4, 4],
            draws,
            s(3),
            |g, v| g.mul(v[0], v[1]),
        ),
        op_case("relu", &[&[2, 3, 4, 4]], &[2, 3, 4, 4], draws, s(4), |g, v| {
            Ok(g.relu(v[0]))
        }),
        op_case("sigmoid", &[&[2, 3, 4, 4]], &[2, 3, 4, 4], draws, s(5), |g, v| {
            Ok(g.sigmoid(v[0]))
        }),
        op_case("maxpool2d", &[&[2, 3, 6, 5]], &[2, 3, 3, 2], draws, s(6), |g, v| {
            g.max_pool2d(v[0], 2, 2)
        }),
        op_case("avgpool2d", &[&[2, 3, 6, 5]], &[2, 3, 3, 3], draws, s(7), |g, v| {
            g.avg_pool2d(v[0], 3, 2, 1)
        }),
        op_case(
            "adaptive_avgpool2d",
            &[&[2, 3, 7, 5]],
            &[2, 3, 3, 2],
            draws,
            s(8),
            |g, v| g.adaptive_avg_pool2d(v[0], 3, 2),
        ),
        op_case(
            "global_maxpool",
            &[&[2, 3, 4, 5]],
            &[2, 3, 1, 1],
            draws,
            s(9),
            |g, v| g.global_max_pool(v[0]),
        ),
        op_case("channel_mean", &[&[2, 3, 4, 5]], &[2, 1, 4, 5], draws, s(10), |g, v| {
            g.channel_mean(v[0])
        }),
        op_case("channel_max", &[&[2, 3, 4, 5]], &[2, 1, 4, 5], draws, s(11), |g, v| {
            g.channel_max(v[0])
        }),
        op_case(
            "concat",
            &[&[2, 3, 4, 4], &[2, 2, 4, 4]],
            &[2, 5, 4, 4],
            draws,
            s(12),
            |g, v| g.concat(&[v[0], v[1]]),
        ),
        op_case("linear", &[&[3, 6], &[4, 6], &[4]], &[3, 4], draws, s(13), |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        op_case("reshape", &[&[2, 3, 2, 2]], &[2, 12], draws, s(14), |g, v| {
            g.reshape(v[0], &[2, 12])
        }),
        op_case("softmax_cross_entropy", &[&[4, 5]], &[1], draws, s(15), |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
        }),
        op_case("sum", &[&[2, 3, 4]], &[1], draws, s(16), |g, v| Ok(g.sum(v[0]))),
    ];
    cases.push(block_case(
        "basic_block",
        BlockSpec::basic(4, 6, 2),
        [2, 4, 6, 6],
        draws,
        s(20),
    )?);
    cases.push(block_case(
        "bottleneck",
        BlockSpec::bottleneck(8, 8, 1),
        [2, 8, 5, 5],
        draws,
        s(21),
    )?);
    cases.push(block_case(
        "inception",
        BlockSpec::inception(4, [2, 3, 2, 2]),
        [2, 4, 6, 6],
        draws,
        s(22),
    )?);
    cases.push(block_case("cbam", BlockSpec::cbam(8, 4), [2, 8, 5, 5], draws, s(23))?);
    cases.push(model_case(
        &ModelConfig::desk().with_variant(Variant::DbfemCaffm),
        draws,
        s(30),
    )?);
    Ok(cases)
}

/// Runs one case over all of its points, optionally with a deliberately
/// corrupted backward for one op kind.
pub fn run_case(case: &SuiteCase, h: f64, fault: Option<OpKind>) -> Result<CaseResult> {
    let mut result = CaseResult {
        name: case.name.clone(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        if let Some(kind) = fault {
            g.inject_fault(kind);
        }
        (case.func)(g, v)
    };
    for (k, point) in case.points.iter().enumerate() {
        let opts = GradCheckOptions {
            h,
            max_coords: case.max_coords,
            seed: k as u64,
        };
        let r = grad_check_many(f, point, opts)?;
        result.max_rel_error = result.max_rel_error.max(r.max_rel_error);
        result.checked += r.checked;
        result.skipped += r.skipped;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_corrupted_backward() {
        let x = Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = grad_check_many(
            |g, v| {
                g.inject_fault(OpKind::Sigmoid);
                let s = g.sigmoid(v[0]);
                Ok(g.sum(s))
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
    }

    #[test]
    fn rejects_step_outside_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
    }
}
