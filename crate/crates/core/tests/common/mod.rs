//! Shared helpers: seeded random tensors, a central finite-difference
//! gradient checker and the per-op gradient cases.

#![allow(dead_code)]

use planeqc::encoder::{Encoder, EncoderConfig, LevelAdapter};
use planeqc::losses::{cosine_mean, jacobian_energy, loss_ncc, loss_orth, loss_sim, loss_smooth, ncc_mean, ExpertPair, OrthVariant};
use planeqc::lra::{affine_from_params, affine_grid, cascade_align, sample_bilinear, warp, Aligner, LraConfig, TransformMode};
use planeqc::numerics::{Reduction, Tape, Tensor, Var};
use planeqc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Uniform magnitudes in `[lo, hi]` with random signs.
pub fn rand_signed(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Forward value of `f` with every input as a constant; non-scalar outputs
/// are contracted with `weights`.
fn eval_scalar<F>(inputs: &[Tensor], weights: Option<&Tensor>, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?.value();
    Ok(match weights {
        Some(w) => out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
        None => out.item(),
    })
}

/// Largest relative error between tape gradients and central differences
/// of `f` with respect to every input.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    let weights = (out.value().len() != 1).then(|| randn(&out.shape(), &mut rng(seed ^ 0x5eed)));
    let loss = match &weights {
        Some(w) => out.mul(tape.constant(w.clone()))?.sum(),
        None => out,
    };
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> =
        vars.iter().zip(inputs).map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))).collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x = input.data()[i];
            probe[k].data_mut()[i] = x + FD_STEP;
            let up = eval_scalar(&probe, weights.as_ref(), &f)?;
            probe[k].data_mut()[i] = x - FD_STEP;
            let down = eval_scalar(&probe, weights.as_ref(), &f)?;
            probe[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Ranks by counting, with ties at their average rank.
pub fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson by the textbook sums formula.
pub fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Linear-interpolation quantile written from the sorted order directly.
pub fn sorted_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let (i, frac) = (pos as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

/// Brute-force `argmin` of the summed score over all `k`-subsets; ties go
/// to the lexicographically smallest subset.
pub fn exhaustive_min_subset(scores: &[f64], k: usize) -> (f64, Vec<usize>) {
    let n = scores.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let cost: f64 = subset.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((c, s)) => cost < *c || (cost == *c && subset < *s),
        };
        if better {
            best = Some((cost, subset));
        }
    }
    best.expect("k <= n")
}

/// Distance of the nearest grid sample to a pixel boundary, in pixels.
fn kink_distance(theta: &Tensor, h: usize, w: usize, src_h: usize, src_w: usize) -> f64 {
    let t = theta.data();
    let coord = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let mut best = f64::INFINITY;
    for i in 0..h {
        for j in 0..w {
            let (px, py) = (coord(j, w), coord(i, h));
            let gx = (t[0] * px + t[1] * py + t[2] + 1.0) * (src_w - 1) as f64 / 2.0;
            let gy = (t[3] * px + t[4] * py + t[5] + 1.0) * (src_h - 1) as f64 / 2.0;
            best = best.min((gx - gx.round()).abs()).min((gy - gy.round()).abs());
        }
    }
    best
}

/// A near-identity `θ` whose grid stays clear of bilinear kinks.
pub fn smooth_theta(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let noise = randn(&[2, 3], rng).scale(0.15);
        let theta = Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap().add(&noise).unwrap();
        if kink_distance(&theta, h, w, h, w) > 1e-3 {
            return theta;
        }
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// One gradient case: its name and a checker taking an instance seed.
pub struct GradCase {
    pub name: String,
    pub check: Box<dyn Fn(u64) -> Result<f64>>,
}

fn case(name: impl Into<String>, check: impl Fn(u64) -> Result<f64> + 'static) -> GradCase {
    GradCase { name: name.into(), check: Box::new(check) }
}

fn binary_case(name: &str, op: for<'a> fn(Var<'a>, Var<'a>) -> Result<Var<'a>>, positive_rhs: bool) -> GradCase {
    case(name, move |s| {
        let mut r = rng(s);
        let shape = [dims(&mut r, 1, 4), dims(&mut r, 1, 5)];
        let a = randn(&shape, &mut r);
        let b = if positive_rhs { rand_signed(&shape, 0.5, 2.0, &mut r) } else { randn(&shape, &mut r) };
        gradcheck(&[a, b], s, |_, v| op(v[0], v[1]))
    })
}

fn unary_case(name: &str, input: fn(&[usize], &mut ChaCha8Rng) -> Tensor, op: fn(Var<'_>) -> Result<Var<'_>>) -> GradCase {
    case(name, move |s| {
        let mut r = rng(s);
        let shape = [dims(&mut r, 1, 4), dims(&mut r, 1, 5)];
        let x = input(&shape, &mut r);
        gradcheck(&[x], s, |_, v| op(v[0]))
    })
}

fn normal(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    randn(shape, r)
}

fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    rand_signed(shape, 0.1, 2.0, r)
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    rand_uniform(shape, 0.5, 2.0, r)
}

fn feature_pair(r: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (c, h, w) = (dims(r, 2, 4), dims(r, 3, 5), dims(r, 3, 5));
    (randn(&[c, h, w], r), randn(&[c, h, w], r))
}

/// Every differentiable op and loss, each checked on [`INSTANCES`] seeds.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = vec![
        binary_case("add", |a, b| a.add(b), false),
        binary_case("sub", |a, b| a.sub(b), false),
        binary_case("mul", |a, b| a.mul(b), false),
        binary_case("div", |a, b| a.div(b), true),
        unary_case("add_scalar", normal, |x| Ok(x.add_scalar(0.7))),
        unary_case("scale", normal, |x| Ok(x.scale(-1.3))),
        unary_case("neg", normal, |x| Ok(x.neg())),
        unary_case("square", normal, |x| Ok(x.square())),
        unary_case("sqrt", positive, |x| x.sqrt()),
        unary_case("abs", off_zero, |x| Ok(x.abs())),
        unary_case("relu", off_zero, |x| Ok(x.relu())),
        unary_case("transpose", normal, |x| x.transpose()),
        unary_case("reshape", normal, |x| {
            let n = x.value().len();
            x.reshape([n])
        }),
        unary_case("sum", normal, |x| Ok(x.sum())),
        unary_case("mean", normal, |x| Ok(x.mean())),
        unary_case("reduce_min", normal, |x| x.reduce(Reduction::Min)),
        unary_case("reduce_max", normal, |x| x.reduce(Reduction::Max)),
        unary_case("reduce_l1", off_zero, |x| x.reduce(Reduction::L1)),
        unary_case("reduce_l2", normal, |x| x.reduce(Reduction::L2)),
        case("reduce_std", |s| {
            let mut r = rng(s);
            let x = randn(&[dims(&mut r, 2, 4), dims(&mut r, 2, 5)], &mut r);
            gradcheck(&[x], s, |_, v| v[0].reduce(Reduction::Std))
        }),
        case("matmul", |s| {
            let mut r = rng(s);
            let (m, k, n) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
            gradcheck(&[randn(&[m, k], &mut r), randn(&[k, n], &mut r)], s, |_, v| v[0].matmul(v[1]))
        }),
        case("concat", |s| {
            let mut r = rng(s);
            let (h, w) = (dims(&mut r, 2, 3), dims(&mut r, 2, 3));
            let a = randn(&[dims(&mut r, 1, 3), h, w], &mut r);
            let b = randn(&[dims(&mut r, 1, 3), h, w], &mut r);
            gradcheck(&[a, b], s, |_, v| Var::concat(&[v[0], v[1]]))
        }),
        case("concat_cols", |s| {
            let mut r = rng(s);
            let m = dims(&mut r, 1, 4);
            let a = randn(&[m, dims(&mut r, 1, 3)], &mut r);
            let b = randn(&[m, dims(&mut r, 1, 3)], &mut r);
            gradcheck(&[a, b], s, |_, v| Var::concat_cols(&[v[0], v[1]]))
        }),
        case("select_rows", |s| {
            let mut r = rng(s);
            let (m, n) = (dims(&mut r, 2, 5), dims(&mut r, 1, 4));
            let rows: Vec<usize> = (0..3).map(|_| r.random_range(0..m)).collect();
            gradcheck(&[randn(&[m, n], &mut r)], s, move |_, v| v[0].select_rows(&rows))
        }),
        case("select_cols", |s| {
            let mut r = rng(s);
            let (m, n) = (dims(&mut r, 1, 4), dims(&mut r, 2, 5));
            let cols: Vec<usize> = (0..3).map(|_| r.random_range(0..n)).collect();
            gradcheck(&[randn(&[m, n], &mut r)], s, move |_, v| v[0].select_cols(&cols))
        }),
        case("avg_pool2", |s| {
            let mut r = rng(s);
            let x = randn(&[dims(&mut r, 1, 3), 2 * dims(&mut r, 1, 3), 2 * dims(&mut r, 1, 3)], &mut r);
            gradcheck(&[x], s, |_, v| v[0].avg_pool2())
        }),
        case("global_avg_pool", |s| {
            let mut r = rng(s);
            let x = randn(&[dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 1, 4)], &mut r);
            gradcheck(&[x], s, |_, v| v[0].global_avg_pool())
        }),
        case("affine_grid", |s| {
            let mut r = rng(s);
            let (h, w) = (dims(&mut r, 1, 5), dims(&mut r, 1, 5));
            gradcheck(&[randn(&[2, 3], &mut r)], s, move |_, v| affine_grid(v[0], h, w))
        }),
        case("sample_bilinear", |s| {
            let mut r = rng(s);
            let (c, h, w) = (dims(&mut r, 1, 3), dims(&mut r, 3, 5), dims(&mut r, 3, 5));
            let (ho, wo) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4));
            // grid points clear of pixel boundaries, some outside the raster
            let grid = Tensor::from_fn([ho, wo, 2], |i| {
                let n = if i % 2 == 0 { w } else { h };
                let scale = (n - 1) as f64 / 2.0;
                loop {
                    let g: f64 = r.random_range(-1.3..1.3);
                    let p = (g + 1.0) * scale;
                    if (p - p.round()).abs() > 1e-3 {
                        return g;
                    }
                }
            });
            gradcheck(&[randn(&[c, h, w], &mut r), grid], s, |_, v| sample_bilinear(v[0], v[1]))
        }),
        case("warp", |s| {
            let mut r = rng(s);
            let (c, h, w) = (dims(&mut r, 1, 3), dims(&mut r, 3, 6), dims(&mut r, 3, 6));
            let theta = smooth_theta(h, w, &mut r);
            gradcheck(&[randn(&[c, h, w], &mut r), theta], s, |_, v| warp(v[0], v[1]))
        }),
        case("cosine_mean", |s| {
            let (a, b) = feature_pair(&mut rng(s));
            gradcheck(&[a, b], s, |_, v| cosine_mean(v[0], v[1]))
        }),
        case("ncc_mean", |s| {
            let (a, b) = feature_pair(&mut rng(s));
            gradcheck(&[a, b], s, |_, v| ncc_mean(v[0], v[1]))
        }),
        case("jacobian_energy", |s| gradcheck(&[randn(&[2, 3], &mut rng(s))], s, |_, v| jacobian_energy(v[0]))),
        case("loss_sim", |s| {
            let mut r = rng(s);
            let levels: Vec<Tensor> = (0..6).map(|l| randn(&[2 + l % 3, 3, 4], &mut r)).collect();
            let levels: Vec<Tensor> =
                levels.iter().enumerate().map(|(i, t)| if i < 3 { t.clone() } else { randn(levels[i - 3].shape(), &mut r) }).collect();
            gradcheck(&levels, s, |_, v| loss_sim(&v[..3], &v[3..]))
        }),
        case("loss_ncc", |s| {
            let mut r = rng(s);
            let a: Vec<Tensor> = (0..3).map(|l| randn(&[2 + l, 3, 4], &mut r)).collect();
            let b: Vec<Tensor> = a.iter().map(|t| randn(t.shape(), &mut r)).collect();
            gradcheck(&[a, b].concat(), s, |_, v| loss_ncc(&v[..3], &v[3..]))
        }),
        case("loss_smooth", |s| {
            let mut r = rng(s);
            let thetas: Vec<Tensor> = (0..3).map(|_| randn(&[2, 3], &mut r)).collect();
            gradcheck(&thetas, s, |_, v| loss_smooth(v))
        }),
        case("encoder_project", |s| {
            let mut r = rng(s);
            let enc = Encoder::build(&EncoderConfig { channels: [4, 6, 8], seed: s }).unwrap();
            let level = (s % 3) as usize;
            let d = enc.channels()[level];
            let k = dims(&mut r, 1, d / 2);
            let x = randn(&[d, 3, 3], &mut r);
            let (a, b) = (randn(&[k, d], &mut r), randn(&[d, k], &mut r));
            gradcheck(&[x, a, b], s, move |_, v| enc.project(level, v[0], Some(LevelAdapter { a: v[1], b: v[2], scale: 0.5 })))
        }),
        case("conv2d", |s| {
            let mut r = rng(s);
            let (ci, co) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3));
            let stride = 1 + (s % 2) as usize;
            let x = randn(&[ci, dims(&mut r, 3, 6), dims(&mut r, 3, 6)], &mut r);
            let w = randn(&[co, ci, 3, 3], &mut r);
            let b = randn(&[co], &mut r);
            gradcheck(&[x, w, b], s, move |_, v| v[0].conv2d(v[1], v[2], stride))
        }),
        case("registration_pipeline", |s| {
            // loc-net weights through the cascade, warps and all three
            // registration losses
            let mut r = rng(s);
            let channels = [2, 3, 3];
            let cfg = LraConfig { hidden: 3, seed: s, ..LraConfig::default() };
            let mut aligner = Aligner::new(channels, &cfg).unwrap();
            // random biases keep every level's grid off the pixel lattice and
            // the ReLUs off zero, where the pipeline has kinks
            for net in &mut aligner.nets {
                net.conv1.bias = randn(net.conv1.bias.shape(), &mut r).scale(0.1);
                net.conv2.bias = randn(net.conv2.bias.shape(), &mut r).scale(0.1);
                net.head_w = randn(net.head_w.shape(), &mut r).scale(0.05);
                net.head_b = randn(net.head_b.shape(), &mut r).scale(0.1);
            }
            let sizes = [8, 4, 2];
            let feats: Vec<Tensor> = (0..6).map(|i| randn(&[channels[i % 3], sizes[i % 3], sizes[i % 3]], &mut r)).collect();
            let mode = aligner.mode;
            let nets = aligner.nets.clone();
            let mut inputs: Vec<Tensor> = nets.iter().flat_map(|n| n.params().map(|p| p.clone())).collect();
            inputs.push(feats[3].clone());
            let n_params = inputs.len() - 1;
            gradcheck(&inputs, s, move |tape, v| {
                let mut bound = aligner.bind(tape, false);
                for (i, net) in bound.iter_mut().enumerate() {
                    let p = &v[i * 6..i * 6 + 6];
                    net.conv1.weight = p[0];
                    net.conv1.bias = p[1];
                    net.conv2.weight = p[2];
                    net.conv2.bias = p[3];
                    net.head_w = p[4];
                    net.head_b = p[5];
                }
                let a = [0, 1, 2].map(|l| tape.constant(feats[l].clone()));
                let b = [v[n_params], tape.constant(feats[4].clone()), tape.constant(feats[5].clone())];
                let al = cascade_align(&bound, mode, false, &a, &b)?;
                loss_sim(&al.a, &al.b)?.add(loss_ncc(&al.a, &al.b)?)?.add(loss_smooth(&al.thetas)?)
            })
        }),
    ];
    for mode in TransformMode::ALL {
        cases.push(case(format!("affine_from_params[{}]", mode.name()), move |s| {
            let mut r = rng(s);
            let p = Tensor::new([mode.param_count()], mode.identity_params())
                .unwrap()
                .add(&randn(&[mode.param_count()], &mut r).scale(0.3))
                .unwrap();
            gradcheck(&[p], s, move |_, v| affine_from_params(mode, v[0]))
        }));
    }
    for variant in OrthVariant::ALL {
        cases.push(case(format!("loss_orth[{}]", variant.name()), move |s| {
            let mut r = rng(s);
            let planes = 2 + (s % 3) as usize;
            let (rank, d) = (2, 5);
            let mut inputs = Vec::new();
            for _ in 0..2 * planes {
                inputs.push(randn(&[rank, d], &mut r));
                inputs.push(randn(&[d, rank], &mut r));
            }
            gradcheck(&inputs, s, move |_, v| {
                let levels: Vec<Vec<ExpertPair<'_>>> = (0..2)
                    .map(|l| (0..planes).map(|c| ExpertPair { a: v[(l * planes + c) * 2], b: v[(l * planes + c) * 2 + 1] }).collect())
                    .collect();
                Ok(loss_orth(&levels, variant)?.expect("two or more planes"))
            })
        }));
    }
    cases
}

/// Worst relative error of `case` over [`INSTANCES`] seeds.
pub fn run_case(case: &GradCase) -> Result<f64> {
    (0..INSTANCES).try_fold(0.0f64, |acc, s| Ok(acc.max((case.check)(s)?)))
}

/// A small pipeline config: 32×32 images, few images per split, one epoch.
pub const TINY_CONFIG: &str = r#"{
  "corpus": {"image_size": 32, "pool_per_plane": 6, "train_per_plane": 10, "query_per_plane": 6, "k1": 2},
  "encoder": {"channels": [4, 8, 8]},
  "train": {"epochs": 1, "lr": 0.001, "checkpoint_every": 1},
  "sweep": {"images": 4, "levels": 3}
}"#;

pub const PIPELINE: [&str; 8] = ["gen-data", "select-anchors", "train", "calibrate", "score", "eval", "sweep", "export-embeddings"];

pub fn planeqc(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_planeqc")).args(args).output().expect("binary runs")
}

/// Runs every pipeline command single-threaded in `run` with `config`.
pub fn run_pipeline(run: &std::path::Path, config: &std::path::Path) -> std::result::Result<(), String> {
    for cmd in PIPELINE {
        let out = planeqc(&["--threads", "1", cmd, "--run", run.to_str().unwrap(), "--config", config.to_str().unwrap()]);
        if !out.status.success() {
            return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Paths whose bytes differ, or that exist on one side only.
pub fn snapshot_diff(a: &std::collections::BTreeMap<String, Vec<u8>>, b: &std::collections::BTreeMap<String, Vec<u8>>) -> Vec<String> {
    a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect()
}
