//! A fixed battery of gradient checks: every graph primitive, then the
//! classifier's joint objective through the attention block and the
//! segmentation objective, all at `f64`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, finite_diff_check_many, GradCheckReport};
use crate::attention::{SaliencyMask, GAMMA};
use crate::error::Result;
use crate::graph::{Conv2dAttrs, Graph, Var};
use crate::losses::{balanced_seed_loss, boundary_loss, classification_loss, seed_loss, sgan_total};
use crate::model::{ClassifierModel, SegModel, Variant};
use crate::nn::{BackboneConfig, ParamStore, Session};
use crate::seeds::{ImageLabels, SeedMask};
use crate::tensor::Tensor;

/// Finite-difference step used by the suite.
pub const SUITE_EPS: f64 = 1e-6;

/// Largest acceptable relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
    /// Number of scalar inputs differentiated.
    pub inputs: usize,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < SUITE_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces a tensor to a scalar with fixed random weights so every output
/// coordinate gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(v, w)?;
    g.sum(p)
}

type Unary = fn(&mut Graph<f64>, Var) -> Result<Var>;
type Binary = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;

fn push(cases: &mut Vec<SuiteCase>, name: &str, inputs: &[&Tensor<f64>], report: GradCheckReport) {
    cases.push(SuiteCase {
        name: name.to_string(),
        report,
        inputs: inputs.iter().map(|t| t.len()).sum(),
    });
}

fn primitives(cases: &mut Vec<SuiteCase>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let pos = uniform(&mut rng, &[2, 3, 4], 0.2, 2.0);
    let unary: [(&str, &Tensor<f64>, Unary); 11] = [
        ("relu", &x, |g, v| g.relu(v)),
        ("sigmoid", &x, |g, v| g.sigmoid(v)),
        ("softmax axis 0", &x, |g, v| g.softmax(v, 0)),
        ("softmax axis 2", &x, |g, v| g.softmax(v, 2)),
        ("log", &pos, |g, v| g.log(v)),
        ("clamp_min", &x, |g, v| g.clamp_min(v, 0.1)),
        ("scale", &x, |g, v| g.scale(v, -2.5)),
        ("global_avg_pool", &x, |g, v| g.global_avg_pool(v)),
        ("max_pool2d", &x, |g, v| g.max_pool2d(v, 2, 2)),
        ("reshape", &x, |g, v| g.reshape(v, &[6, 4])),
        ("mean", &x, |g, v| g.mean(v)),
    ];
    for (i, (name, input, op)) in unary.into_iter().enumerate() {
        let r = finite_diff_check(
            |g, v| {
                let y = op(g, v)?;
                weighted_sum(g, y, 100 + i as u64)
            },
            input,
            SUITE_EPS,
        )?;
        push(cases, name, &[input], r);
    }

    let m = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let r = finite_diff_check(
        |g, v| {
            let t = g.transpose(v)?;
            weighted_sum(g, t, 7)
        },
        &m,
        SUITE_EPS,
    )?;
    push(cases, "transpose", &[&m], r);
    let r = finite_diff_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            g.sum(sq)
        },
        &m,
        SUITE_EPS,
    )?;
    push(cases, "sum", &[&m], r);

    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let binary: [(&str, Binary); 3] = [
        ("add", |g, x, y| g.add(x, y)),
        ("sub", |g, x, y| g.sub(x, y)),
        ("mul", |g, x, y| g.mul(x, y)),
    ];
    for (i, (name, op)) in binary.into_iter().enumerate() {
        let r = finite_diff_check_many(
            |g, v| {
                let y = op(g, v[0], v[1])?;
                weighted_sum(g, y, 200 + i as u64)
            },
            &[a.clone(), b.clone()],
            SUITE_EPS,
        )?;
        push(cases, name, &[&a, &b], r);
    }
    let m1 = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let m2 = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let r = finite_diff_check_many(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 210)
        },
        &[m1.clone(), m2.clone()],
        SUITE_EPS,
    )?;
    push(cases, "matmul", &[&m1, &m2], r);
    let s = Tensor::scalar(0.7);
    let r = finite_diff_check_many(
        |g, v| {
            let y = g.scalar_mul(v[0], v[1])?;
            weighted_sum(g, y, 211)
        },
        &[s.clone(), a.clone()],
        SUITE_EPS,
    )?;
    push(cases, "scalar_mul", &[&s, &a], r);

    let img = uniform(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let w3 = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let w1 = uniform(&mut rng, &[3, 2, 1, 1], -1.0, 1.0);
    let bias = uniform(&mut rng, &[3], -1.0, 1.0);
    for (name, w, attrs) in [
        ("conv2d 3x3 same", &w3, Conv2dAttrs::SAME_3X3),
        ("conv2d 3x3 stride 2", &w3, Conv2dAttrs { stride: 2, pad: 1 }),
        ("conv2d 1x1", &w1, Conv2dAttrs::POINTWISE),
    ] {
        let r = finite_diff_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), attrs)?;
                weighted_sum(g, y, 300)
            },
            &[img.clone(), w.clone(), bias.clone()],
            SUITE_EPS,
        )?;
        push(cases, name, &[&img, w, &bias], r);
    }

    let p = uniform(&mut rng, &[6, 6], -1.0, 1.0);
    let groups = vec![true, false, true, true, false, false];
    for (name, mask) in [("masked_row_normalize unguided", None), ("masked_row_normalize guided", Some(groups))] {
        let r = finite_diff_check(
            |g, v| {
                let d = g.masked_row_normalize(v, mask.clone(), 1e-8)?;
                weighted_sum(g, d, 400)
            },
            &p,
            SUITE_EPS,
        )?;
        push(cases, name, &[&p], r);
    }
    Ok(())
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        block_channels: vec![4, 5],
        pool_after: vec![0],
        ..Default::default()
    }
}

/// Differentiates `build` with respect to every parameter in `params`.
fn check_params(params: &ParamStore<f64>, build: impl Fn(&mut Session<'_, f64>) -> Result<Var>) -> Result<GradCheckReport> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let xs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    finite_diff_check_many(
        |g, vars| {
            let graph = core::mem::replace(g, Graph::new());
            let mut sess = Session::with_graph(params, graph, true);
            for (n, &v) in names.iter().zip(vars) {
                sess.bind(n, v)?;
            }
            let out = build(&mut sess);
            *g = sess.graph;
            out
        },
        &xs,
        SUITE_EPS,
    )
}

fn objectives(cases: &mut Vec<SuiteCase>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = ClassifierModel::<f64>::new(&mut rng, tiny_backbone(), 3, Variant::Full)?;
    // Open the gate and sharpen the heads so the attention path carries a
    // gradient comparable to the skip path.
    if let Some(g) = model.params.get_mut(GAMMA) {
        *g = Tensor::scalar(0.8);
    }
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("classifier") || name.starts_with("seed_branch") {
            *t = t.map(|v| v * 30.0);
        }
    }
    let image = uniform(&mut rng, &[3, 8, 8], -1.0, 1.0);
    let labels = ImageLabels::new(vec![true, false, true]);
    let bits: Vec<bool> = (0..16).map(|u| (u % 4) >= 1 && (u / 4) <= 2).collect();
    let mask = SaliencyMask::from_bits(bits, 4, 4)?;
    let mut seed_labels = vec![SeedMask::UNLABELED; 16];
    seed_labels[5] = 1;
    seed_labels[6] = 3;
    seed_labels[10] = 1;
    seed_labels[0] = SeedMask::BACKGROUND;
    let seeds = SeedMask::from_labels(4, 4, seed_labels, 3)?;
    let r = check_params(&model.params, |sess| {
        let x = sess.graph.constant(image.clone());
        let pass = model.forward(sess, x, Some(&mask))?;
        let cls = classification_loss(&mut sess.graph, pass.tau, &labels)?;
        let probs = pass.seed_probs.ok_or_else(|| crate::Error::MissingParam("seed branch".to_string()))?;
        let s = seed_loss(&mut sess.graph, probs, &seeds, 3)?;
        sgan_total(&mut sess.graph, cls, s.loss, 0.15)
    })?;
    let all: Vec<&Tensor<f64>> = model.params.iter().map(|(_, t)| t).collect();
    push(cases, "joint classification and seed objective", &all, r);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = SegModel::<f64>::new(&mut rng, tiny_backbone(), 2)?;
    let image = uniform(&mut rng, &[3, 8, 8], -1.0, 1.0);
    let mut seed_labels = vec![SeedMask::UNLABELED; 16];
    seed_labels[0] = SeedMask::BACKGROUND;
    seed_labels[3] = SeedMask::BACKGROUND;
    seed_labels[9] = 2;
    seed_labels[14] = 1;
    let seeds = SeedMask::from_labels(4, 4, seed_labels, 2)?;
    let raw = uniform(&mut rng, &[3, 4, 4], 0.2, 2.0);
    let mut target = raw.clone();
    for u in 0..16 {
        let total: f64 = (0..3).map(|c| raw.data()[c * 16 + u]).sum();
        for c in 0..3 {
            target.data_mut()[c * 16 + u] = raw.data()[c * 16 + u] / total;
        }
    }
    let r = check_params(&model.params, |sess| {
        let x = sess.graph.constant(image.clone());
        let phi = model.forward(sess, x)?;
        let a = balanced_seed_loss(&mut sess.graph, phi, &seeds, 2)?;
        let b = boundary_loss(&mut sess.graph, phi, &target)?;
        sess.graph.add(a, b)
    })?;
    let all: Vec<&Tensor<f64>> = model.params.iter().map(|(_, t)| t).collect();
    push(cases, "balanced seed and boundary objective", &all, r);
    Ok(())
}

/// Runs every check in the suite.
pub fn run_suite() -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    primitives(&mut cases)?;
    objectives(&mut cases)?;
    Ok(cases)
}
