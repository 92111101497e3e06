//! Finite-difference cases for every differentiable op and both full
//! training objectives.

use abmt::encoder::{EncoderConfig, EncoderState};
use abmt::losses::{source_objective, target_objective, LossWeights, TargetOptions};
use abmt::tensor::{finite_diff_check, Graph, Pooling, Tensor, Var};
use abmt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rand_tensor;

/// Step sizes tried per case. A perturbation that straddles a relu, hinge
/// or hardest-example switch spoils one step but not both; a wrong gradient
/// fails at every step.
pub const STEPS: [f64; 2] = [1e-4, 1e-5];

fn fd_check<F>(params: &[Tensor], mut f: F) -> f64
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    STEPS
        .iter()
        .map(|&h| finite_diff_check(params, h, &mut f).unwrap())
        .fold(f64::INFINITY, f64::min)
}

pub struct GradCase {
    pub name: &'static str,
    pub elementwise: bool,
    pub max_rel_err: f64,
}

/// Random linear functional so every output coordinate matters.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let n = g.value(y).len();
    let flat = g.reshape(y, vec![1, n])?;
    let wv = g.constant(w);
    let s = g.linear(flat, wv, None)?;
    g.sum(s)
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    rand_tensor(rng, vec![1, n], -1.0, 1.0)
}

/// Values kept away from the kinks of relu and max.
fn off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn check1(
    name: &'static str,
    elementwise: bool,
    x: Tensor,
    out_len: usize,
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> GradCase {
    let w = weights(rng, out_len);
    let err = fd_check(&[x], |g, v| {
        let y = op(g, v[0])?;
        project(g, y, &w)
    });
    GradCase {
        name,
        elementwise,
        max_rel_err: err,
    }
}

fn small_encoder(seed: u64, asymmetric: bool) -> EncoderState {
    let cfg = EncoderConfig {
        d_in: 3,
        d_hidden: 6,
        d_feat: 4,
        num_classes: 4,
        ..EncoderConfig::default()
    };
    EncoderState::new(if asymmetric { cfg } else { cfg.symmetric() }, seed).unwrap()
}

/// Every case for one seed. Toy batches have 8 samples of 4 identities.
pub fn cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    out.push(check1("add", true, rand_tensor(r, vec![8, 3], -1.0, 1.0), 24, r, |g, x| g.add(x, x)));
    let other = rand_tensor(r, vec![8, 3], -1.0, 1.0);
    out.push(check1("sub", true, rand_tensor(r, vec![8, 3], -1.0, 1.0), 24, r, move |g, x| {
        let c = g.constant(&other);
        g.sub(c, x)
    }));
    out.push(check1("scale", true, rand_tensor(r, vec![8, 3], -1.0, 1.0), 24, r, |g, x| g.scale(x, -1.7)));
    out.push(check1("add_scalar", true, rand_tensor(r, vec![8, 3], -1.0, 1.0), 24, r, |g, x| g.add_scalar(x, 0.3)));
    out.push(check1("relu", true, off_kink(r, vec![8, 3]), 24, r, |g, x| g.relu(x)));
    out.push(check1("sigmoid", true, rand_tensor(r, vec![8, 3], -3.0, 3.0), 24, r, |g, x| g.sigmoid(x)));

    let w = rand_tensor(r, vec![5, 3], -1.0, 1.0);
    let b = rand_tensor(r, vec![5], -1.0, 1.0);
    let x = rand_tensor(r, vec![8, 3], -1.0, 1.0);
    let pw = weights(r, 40);
    let err = fd_check(&[x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, &pw)
    });
    out.push(GradCase {
        name: "linear",
        elementwise: false,
        max_rel_err: err,
    });

    out.push(check1("log_softmax", false, rand_tensor(r, vec![8, 4], -2.0, 2.0), 32, r, |g, x| g.log_softmax(x)));
    out.push(check1("reshape", false, rand_tensor(r, vec![8, 3], -1.0, 1.0), 24, r, |g, x| g.reshape(x, vec![4, 6])));
    out.push(check1("pool_mean", false, rand_tensor(r, vec![8, 3, 2], -1.0, 1.0), 16, r, |g, x| g.pool(x, Pooling::Mean)));
    out.push(check1("pool_max", false, off_kink(r, vec![8, 3, 2]), 16, r, |g, x| g.pool(x, Pooling::Max)));
    let other = rand_tensor(r, vec![8, 2], -1.0, 1.0);
    out.push(check1("concat", false, rand_tensor(r, vec![8, 3], -1.0, 1.0), 40, r, move |g, x| {
        let c = g.constant(&other);
        g.concat(x, c)
    }));
    out.push(check1("l2_normalize", false, rand_tensor(r, vec![8, 3], -1.0, 1.0), 24, r, |g, x| g.l2_normalize(x, 1e-12)));
    out.push(check1("sum", false, rand_tensor(r, vec![8, 3], -1.0, 1.0), 1, r, |g, x| g.sum(x)));
    out.push(check1("mean", false, rand_tensor(r, vec![8, 3], -1.0, 1.0), 1, r, |g, x| g.mean(x)));
    out.push(check1("pairwise_distance", false, rand_tensor(r, vec![8, 3], -1.0, 1.0), 64, r, |g, x| g.pairwise_distance(x)));
    out.push(check1("gather", false, rand_tensor(r, vec![8, 3], -1.0, 1.0), 5, r, |g, x| g.gather(x, vec![0, 4, 4, 23, 7])));
    let labels = [0usize, 1, 2, 3, 0, 1, 2, 3];
    out.push(check1("nll", false, rand_tensor(r, vec![8, 4], -3.0, -0.1), 1, r, move |g, x| g.nll(x, &labels)));
    let target: Vec<f64> = (0..32).map(|_| r.random_range(0.0..1.0)).collect();
    out.push(check1("soft_nll", false, rand_tensor(r, vec![8, 4], -3.0, -0.1), 1, r, move |g, x| g.soft_nll(x, &target)));
    for literal in [false, true] {
        let target: Vec<f64> = (0..8).map(|_| r.random_range(0.05..0.95)).collect();
        out.push(check1(
            if literal { "binary_soft_ce_literal" } else { "binary_soft_ce" },
            false,
            rand_tensor(r, vec![8], 0.05, 0.95),
            1,
            r,
            move |g, x| g.binary_soft_ce(x, &target, literal),
        ));
    }

    let samples = rand_tensor(r, vec![8, 2, 3], -1.0, 1.0);
    let student = small_encoder(seed, true);
    let w = LossWeights::default();
    let err = fd_check(student.params(), |g, v| {
        let x = g.constant(&samples);
        let out = student.forward_graph(g, v, x)?;
        source_objective(g, &out, &labels, &w)
    });
    out.push(GradCase {
        name: "source_objective",
        elementwise: false,
        max_rel_err: err,
    });

    for (name, asym, cross, literal) in [
        ("target_objective_cross", true, true, false),
        ("target_objective_literal", true, true, true),
        ("target_objective_self", false, false, false),
    ] {
        let student = small_encoder(seed, asym);
        let teacher = small_encoder(seed + 100, asym).forward(&samples).unwrap();
        let opts = TargetOptions {
            cross_branch: cross,
            literal_soft_triplet: literal,
        };
        let err = fd_check(student.params(), |g, v| {
            let x = g.constant(&samples);
            let out = student.forward_graph(g, v, x)?;
            Ok(target_objective(g, &out, &teacher, &labels, &w, opts)?.total)
        });
        out.push(GradCase {
            name,
            elementwise: false,
            max_rel_err: err,
        });
    }
    out
}

pub fn tolerance(case: &GradCase) -> f64 {
    if case.elementwise {
        1e-4
    } else {
        1e-3
    }
}
