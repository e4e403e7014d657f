//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness so the lines are always printed; exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use planeqc::anchors::{select_anchors, select_variance_spectrum, AnchorScore, AnchorSet, AnchorStrategy};
use planeqc::encoder::{BackboneFeatures, EncoderConfig};
use planeqc::eval::{plcc, pristine_bases, severity_levels, severity_sweep, srcc, SweepResult};
use planeqc::imaging::{deform, gen_synthetic_corpus, CorpusSpec, DatasetSplit, DeformKind, Image};
use planeqc::losses::{loss_ncc, loss_sim, loss_smooth, ncc_mean};
use planeqc::lra::{cascade_align, warp, Aligner, LraConfig};
use planeqc::model::Model;
use planeqc::numerics::{Tape, Tensor};
use planeqc::oks::{build_conflict_mask, mask_matrix, top_kappa, BasisSource, KnowledgeSpace, OksBank, OksConfig, TaskVector};
use planeqc::scoring::{calibrate, quality_score, quality_score_uncached, AnchorCache, CalibrationStats, ScoreConfig};
use planeqc::training::{train, TrainConfig};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn run(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    println!("criterion {n} {}: {title}: {} [{:.1}s]", if out.pass { "PASS" } else { "FAIL" }, out.detail, start.elapsed().as_secs_f64());
    out.pass
}

// 1. Gradient suite

fn gradients() -> Outcome {
    let cases = common::gradient_cases();
    let mut worst = (String::new(), 0.0f64);
    let mut failed = Vec::new();
    for case in &cases {
        let err = common::run_case(case).unwrap_or(f64::INFINITY);
        if err.is_nan() || err > common::GRAD_TOL {
            failed.push(case.name.clone());
        }
        if err > worst.1 || err.is_nan() {
            worst = (case.name.clone(), err);
        }
    }
    outcome(
        failed.is_empty(),
        format!(
            "{} cases x {} instances, worst rel err {:.2e} ({}), tol {:.0e}{}",
            cases.len(),
            common::INSTANCES,
            worst.1,
            worst.0,
            common::GRAD_TOL,
            if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") }
        ),
    )
}

// 2. Registration identities

fn identities() -> Outcome {
    let mut r = common::rng(2);
    let mut problems = Vec::new();
    let identity = Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();

    for _ in 0..20 {
        let f = common::randn(&[r.random_range(1..5), r.random_range(2..12), r.random_range(2..12)], &mut r);
        let tape = Tape::new();
        let out = warp(tape.constant(f.clone()), tape.constant(identity.clone())).unwrap().value();
        if *out != f {
            problems.push("identity warp is not bit-exact".to_string());
        }
    }

    let channels = [3, 4, 5];
    let aligner = Aligner::new(channels, &LraConfig::default()).unwrap();
    let (mut sim_err, mut ncc_err) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let feats: Vec<Tensor> = (0..3).map(|l| common::randn(&[channels[l], 16 >> l, 16 >> l], &mut r)).collect();
        let tape = Tape::new();
        let a = [0, 1, 2].map(|l| tape.constant(feats[l].clone()));
        let b = [0, 1, 2].map(|l| tape.constant(feats[l].clone()));
        let al = cascade_align(&aligner.bind(&tape, false), aligner.mode, false, &a, &b).unwrap();
        if (0..3).any(|l| al.b[l].value() != al.a[l].value()) {
            problems.push("fresh cascade altered a self-pair".into());
        }
        sim_err = sim_err.max((loss_sim(&al.a, &al.b).unwrap().item() + 3.0).abs());
        ncc_err = ncc_err.max((loss_ncc(&al.a, &al.b).unwrap().item() + 3.0).abs());
        let smooth = loss_smooth(&al.thetas).unwrap().item();
        if smooth != 0.0 {
            problems.push(format!("identity smoothness {smooth}"));
        }
    }

    let mut smooth_translation = 0.0f64;
    for _ in 0..20 {
        let tape = Tape::new();
        let thetas = [0, 1, 2].map(|_| {
            let (tx, ty) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            tape.constant(Tensor::new([2, 3], vec![1.0, 0.0, tx, 0.0, 1.0, ty]).unwrap())
        });
        smooth_translation = smooth_translation.max(loss_smooth(&thetas).unwrap().item().abs());
    }

    let mut ncc_affine = 0.0f64;
    for a in [0.5, 2.0, 10.0] {
        for _ in 0..10 {
            let f = common::randn(&[3, 8, 8], &mut r);
            let b = r.random_range(-5.0..5.0);
            let g = f.map(|v| a * v + b);
            let tape = Tape::new();
            let ncc = ncc_mean(tape.constant(f), tape.constant(g)).unwrap().item();
            ncc_affine = ncc_affine.max((ncc - 1.0).abs());
        }
    }
    if sim_err > 1e-5 || ncc_err > 1e-5 {
        problems.push(format!("self-pair off by sim {sim_err:.1e} ncc {ncc_err:.1e}"));
    }
    if smooth_translation != 0.0 {
        problems.push(format!("translation smoothness {smooth_translation}"));
    }
    if ncc_affine > 1e-5 {
        problems.push(format!("affine NCC off by {ncc_affine:.1e}"));
    }
    outcome(
        problems.is_empty(),
        format!(
            "identity warp bit-exact, |L_sim+3| {sim_err:.1e}, |L_ncc+3| {ncc_err:.1e}, translation smooth {smooth_translation}, max |NCC(f,af+b)-1| {ncc_affine:.1e}{}",
            if problems.is_empty() { String::new() } else { format!("; {problems:?}") }
        ),
    )
}

// 3. OKS properties

fn oks_properties() -> Outcome {
    let mut r = common::rng(3);
    let mut problems = Vec::new();

    let mut worst_density = 0.0f64;
    for planes in [2usize, 3, 4] {
        for _ in 0..30 {
            let (rank, d) = (r.random_range(1..9), r.random_range(16..65));
            let tv = TaskVector { a: common::randn(&[rank, d], &mut r), b: common::randn(&[d, rank], &mut r) };
            let m = build_conflict_mask(&tv, planes).unwrap();
            for (mask, n) in [(&m.a, tv.a.len()), (&m.b, tv.b.len())] {
                let ones = mask.data().iter().sum::<f64>();
                worst_density = worst_density.max((ones - n as f64 / planes as f64).abs());
            }
        }
    }
    if worst_density > 1.0 {
        problems.push(format!("mask density off by {worst_density} entries"));
    }

    let (mut worst_orth, mut worst_idem) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let d = r.random_range(8..200);
        let mut k = KnowledgeSpace::new(d);
        for _ in 0..r.random_range(1..6) {
            k.push(common::randn(&[d], &mut r).data()).unwrap();
        }
        let g = common::randn(&[d], &mut r).scale(r.random_range(0.1..100.0));
        let p = k.project(g.data(), false).unwrap();
        let kp: f64 = k.rows().iter().map(|row| row.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum::<f64>().sqrt();
        worst_orth = worst_orth.max(kp);
        let pp = k.project(&p, false).unwrap();
        worst_idem = worst_idem.max(pp.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    if worst_orth > 1e-8 {
        problems.push(format!("|K g_orth| = {worst_orth:.1e}"));
    }
    if worst_idem > 1e-10 {
        problems.push(format!("idempotence gap {worst_idem:.1e}"));
    }

    // kappa and the synergy forward through real expert banks
    let mut kappa_ok = true;
    let mut worst_synergy = 0.0f64;
    for trial in 0..30u64 {
        let planes = 2 + (trial % 3) as usize;
        let channels = [8, 16, 32];
        let cfg = OksConfig { r: [4, 8, 16][(trial % 3) as usize], seed: trial, ..OksConfig::default() };
        let mut bank = OksBank::new(channels, planes, &cfg).unwrap();
        for level in &mut bank.levels {
            for p in &mut level.planes {
                p.weights.b = common::randn(p.weights.b.shape(), &mut r);
            }
            level.general.b = common::randn(level.general.b.shape(), &mut r);
        }
        let feats = BackboneFeatures { levels: channels.map(|c| common::rand_uniform(&[c, 4, 4], 0.0, 3.0, &mut r)) };
        let experts = bank.synergy(&feats).unwrap();
        for (l, e) in experts.iter().enumerate() {
            let rank = bank.levels[l].rank();
            for c in 0..planes {
                let picked = e.selection.iter().filter(|(s, _)| *s == BasisSource::Plane(c)).count();
                kappa_ok &= picked <= rank / planes;
            }
            let x = feats.pooled(l);
            let got = e.contribution(&x);
            let mut want = vec![0.0; x.len()];
            for &(src, k) in &e.selection {
                let w = match src {
                    BasisSource::Plane(c) => &bank.levels[l].planes[c].weights,
                    BasisSource::General => &bank.levels[l].general,
                };
                let ax: f64 = w.a.row(k).iter().zip(&x).map(|(a, b)| a * b).sum();
                for (i, v) in want.iter_mut().enumerate() {
                    *v += e.scale * w.b.at2(i, k) * ax;
                }
            }
            worst_synergy = worst_synergy.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    for _ in 0..500 {
        let rank = r.random_range(1..33);
        let planes = r.random_range(1..7);
        let z: Vec<f64> = (0..rank).map(|_| r.random_range(-2.0..2.0)).collect();
        let active: Vec<usize> = (0..rank).filter(|&k| z[k] > 0.1).collect();
        kappa_ok &= top_kappa(&active, &z, rank, planes, false).len() <= rank / planes;
    }
    if !kappa_ok {
        problems.push("kappa exceeded floor(r/|C|)".into());
    }
    if worst_synergy > 1e-6 {
        problems.push(format!("synergy off rank-1 oracle by {worst_synergy:.1e}"));
    }
    outcome(
        problems.is_empty(),
        format!(
            "mask density within {worst_density} entries, max |K g_orth| {worst_orth:.1e}, idempotence {worst_idem:.1e}, kappa bound held: {kappa_ok}, synergy vs rank-1 sum {worst_synergy:.1e}{}",
            if problems.is_empty() { String::new() } else { format!("; {problems:?}") }
        ),
    )
}

// 4. Orthogonality trend

/// Cross-Gram at initialisation and after every epoch.
fn gram_trace(lambda: f64) -> Vec<f64> {
    let spec = CorpusSpec { image_size: 64, pool_per_plane: 20, train_per_plane: 40, query_per_plane: 4, k1: 8, ..CorpusSpec::default() };
    let data = gen_synthetic_corpus(&spec, 11).unwrap();
    let names = data.planes.iter().map(|p| p.name.clone()).collect();
    let mut model = Model::new(names, &EncoderConfig::default(), &LraConfig::default(), &OksConfig::default()).unwrap();
    let anchors = select_anchors(&model.encoder, &data, AnchorStrategy::Variance, spec.k1, 0).unwrap();
    let mut trace = vec![model.oks.cross_gram_mean_abs().unwrap()];
    let cfg = TrainConfig { epochs: 30, lr: 1e-3, lambda, ..TrainConfig::default() };
    train(&cfg, &data, &anchors, &mut model, |_, m| {
        trace.push(m.oks.cross_gram_mean_abs()?);
        Ok(())
    })
    .unwrap();
    trace
}

fn orthogonality() -> Outcome {
    let with = gram_trace(0.5);
    let without = gram_trace(0.0);
    let (g0, end, end0) = (with[0], *with.last().unwrap(), *without.last().unwrap());
    let monotone = with.windows(2).all(|w| w[1] < w[0]);
    let ratio = g0 / end;
    outcome(
        ratio >= 10.0 && end < end0 && monotone,
        format!(
            "cross-Gram {g0:.4} -> {end:.5} with lambda 0.5 ({ratio:.1}x, need >= 10x, monotone over {} epochs: {monotone}); {end0:.5} with lambda 0",
            with.len() - 1
        ),
    )
}

// 5 and 6 share one trained desk-scale model.

struct Desk {
    data: DatasetSplit,
    model: Model,
    anchors: AnchorSet,
    train_secs: f64,
}

fn desk_model() -> Desk {
    let start = Instant::now();
    let spec = CorpusSpec { image_size: 64, ..CorpusSpec::default() };
    let data = gen_synthetic_corpus(&spec, 7).unwrap();
    let names = data.planes.iter().map(|p| p.name.clone()).collect();
    let mut model = Model::new(names, &EncoderConfig::default(), &LraConfig::default(), &OksConfig::default()).unwrap();
    let anchors = select_anchors(&model.encoder, &data, AnchorStrategy::Variance, spec.k1, 1).unwrap();
    let cfg = TrainConfig { epochs: 30, lr: 1e-3, ..TrainConfig::default() };
    train(&cfg, &data, &anchors, &mut model, |_, _| Ok(())).unwrap();
    let model = model.rounded().unwrap();
    Desk { data, model, anchors, train_secs: start.elapsed().as_secs_f64() }
}

fn sweep_with(desk: &Desk, anchors: &AnchorSet, seed: u64) -> SweepResult {
    let cache = AnchorCache::build(&desk.model, anchors, &desk.data).unwrap();
    let stats = calibrate(&desk.model, &desk.data, &cache).unwrap();
    let bases = pristine_bases(&desk.data, &desk.model, 20).unwrap();
    severity_sweep(&desk.model, &stats, &cache, &bases, &DeformKind::ALL, &severity_levels(6), seed, &ScoreConfig::default()).unwrap()
}

fn monotonicity(desk: &Desk) -> Outcome {
    let start = Instant::now();
    let res = sweep_with(desk, &desk.anchors, 3);
    let in_range = res.rows.iter().all(|r| (0.0..=1.0).contains(&r.q));
    let rigid = res.per_kind["rigid"].srcc;
    let nonrigid = res.per_kind["nonrigid"].srcc;
    let secs = desk.train_secs + start.elapsed().as_secs_f64();
    outcome(
        rigid <= -0.9 && nonrigid <= -0.9 && in_range && secs <= 900.0,
        format!(
            "2 planes, 64x64, 30 epochs/plane, {} points/kind: SRCC rigid {rigid:.3}, non-rigid {nonrigid:.3} (need <= -0.9), Q in [0,1]: {in_range}, {secs:.0}s CPU",
            res.per_kind["rigid"].n
        ),
    )
}

fn anchor_ablation(desk: &Desk) -> Outcome {
    let mut sums = [[0.0; 2]; 2];
    let kinds = ["rigid", "nonrigid"];
    for seed in 0..3u64 {
        let random = select_anchors(&desk.model.encoder, &desk.data, AnchorStrategy::Random, desk.data.k1, seed).unwrap();
        for (s, anchors) in [&desk.anchors, &random].into_iter().enumerate() {
            let res = sweep_with(desk, anchors, 100 + seed);
            for (k, kind) in kinds.iter().enumerate() {
                sums[s][k] += res.per_kind[*kind].srcc / 3.0;
            }
        }
    }
    let ok = (0..2).all(|k| sums[0][k] <= sums[1][k] + 0.02);
    outcome(
        ok,
        format!(
            "mean SRCC over 3 seeds, variance vs random: rigid {:.3} vs {:.3}, non-rigid {:.3} vs {:.3} (tolerance 0.02)",
            sums[0][0], sums[1][0], sums[0][1], sums[1][1]
        ),
    )
}

// 7. Oracle equivalences

fn oracles() -> Outcome {
    let mut r = common::rng(7);
    let mut problems = Vec::new();
    let mut instances = 0;
    for n in 1..=12usize {
        for k1 in 1..=4usize.min(n) {
            for _ in 0..10 {
                let sig: Vec<f64> = (0..n).map(|_| r.random_range(0.0..3.0)).collect();
                let scores: Vec<AnchorScore> =
                    sig.iter().enumerate().map(|(i, &s)| AnchorScore { id: i.to_string(), embedding: vec![s], sigma2: s }).collect();
                let (_, best) = common::exhaustive_min_subset(&sig, k1);
                if select_variance_spectrum(&scores, k1) != best {
                    problems.push(format!("variance spectrum differs at n={n} k1={k1}"));
                }
                instances += 1;
            }
        }
    }
    let mut worst_corr = 0.0f64;
    for _ in 0..300 {
        let n = r.random_range(3..=50);
        let ties = r.random_bool(0.5);
        let draw = |r: &mut rand_chacha::ChaCha8Rng| -> f64 {
            if ties {
                r.random_range(0..5) as f64
            } else {
                r.random_range(-10.0..10.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
            continue;
        }
        let s = (srcc(&x, &y).unwrap() - common::naive_pearson(&common::naive_ranks(&x), &common::naive_ranks(&y))).abs();
        let p = (plcc(&x, &y).unwrap() - common::naive_pearson(&x, &y)).abs();
        worst_corr = worst_corr.max(s).max(p);
    }
    if worst_corr > 1e-10 {
        problems.push(format!("correlation oracle gap {worst_corr:.1e}"));
    }
    let mut mask_mismatch = 0;
    for _ in 0..300 {
        let n = r.random_range(2..150);
        let planes = r.random_range(2..6);
        let v: Vec<f64> =
            (0..n).map(|_| if r.random_bool(0.3) { r.random_range(0..4) as f64 } else { r.random_range(-3.0..3.0) }).collect();
        let q = common::sorted_quantile(&v, (planes - 1) as f64 / planes as f64);
        let want: Vec<f64> = v.iter().map(|&x| if x > q { 1.0 } else { 0.0 }).collect();
        if mask_matrix(&Tensor::new([n], v).unwrap(), planes).unwrap().data() != &want[..] {
            mask_mismatch += 1;
        }
    }
    if mask_mismatch > 0 {
        problems.push(format!("{mask_mismatch} quantile masks differ"));
    }
    outcome(
        problems.is_empty(),
        format!(
            "variance spectrum == exhaustive on {instances} instances (n<=12, k1<=4), correlation gap {worst_corr:.1e}, quantile masks exact: {}{}",
            mask_mismatch == 0,
            if problems.is_empty() { String::new() } else { format!("; {:?}", &problems[..problems.len().min(3)]) }
        ),
    )
}

// 8. Determinism of the command-line pipeline

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, common::TINY_CONFIG.replace("\"epochs\": 1", "\"epochs\": 2")).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if let Err(e) = common::run_pipeline(&a, &cfg).and_then(|_| common::run_pipeline(&b, &cfg)) {
        return outcome(false, e);
    }
    let (sa, sb) = (common::snapshot(&a), common::snapshot(&b));
    let diff = common::snapshot_diff(&sa, &sb);
    outcome(diff.is_empty(), format!("{} files over {} commands, differing: {diff:?}", sa.len(), common::PIPELINE.len()))
}

// 9. Scoring contract

fn scoring_contract() -> Outcome {
    let spec = CorpusSpec { image_size: 32, pool_per_plane: 12, train_per_plane: 20, query_per_plane: 10, k1: 4, ..CorpusSpec::default() };
    let data = gen_synthetic_corpus(&spec, 9).unwrap();
    let names = data.planes.iter().map(|p| p.name.clone()).collect();
    let enc = EncoderConfig { channels: [4, 8, 8], seed: 0 };
    let mut model = Model::new(names, &enc, &LraConfig::default(), &OksConfig::default()).unwrap();
    let anchors = select_anchors(&model.encoder, &data, AnchorStrategy::Variance, spec.k1, 0).unwrap();
    let cfg = TrainConfig { epochs: 2, lr: 1e-3, ..TrainConfig::default() };
    train(&cfg, &data, &anchors, &mut model, |_, _| Ok(())).unwrap();
    let model = model.rounded().unwrap();
    let cache = AnchorCache::build(&model, &anchors, &data).unwrap();
    let stats: CalibrationStats = calibrate(&model, &data, &cache).unwrap();
    let score_cfg = ScoreConfig::default();

    let mut r = common::rng(9);
    let (mut out_of_range, mut perm_gap, mut cache_mismatch) = (0, 0.0f64, 0);
    let (mut qmin, mut qmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..1000 {
        let c = r.random_range(0..data.planes.len());
        let (_, base) = &data.query[c][r.random_range(0..data.query[c].len())];
        let query: Image = match i % 4 {
            0 => deform(base, DeformKind::Rigid, r.random_range(0.0..1.0), r.random()).unwrap(),
            1 => deform(base, DeformKind::Nonrigid, r.random_range(0.0..1.0), r.random()).unwrap(),
            2 => Image::new(32, 32, (0..32 * 32).map(|_| r.random_range(0.0..1.0)).collect()).unwrap(),
            _ => {
                let (_, other) = &data.query[1 - c][0];
                other.clone()
            }
        };
        let plane_anchors = cache.plane(c).unwrap();
        let rep = quality_score(&model, "q", &query, c, plane_anchors, &stats, &score_cfg).unwrap();
        qmin = qmin.min(rep.q);
        qmax = qmax.max(rep.q);
        if !(0.0..=1.0).contains(&rep.q) {
            out_of_range += 1;
        }
        if i % 10 == 0 {
            let mut shuffled = plane_anchors.to_vec();
            shuffled.reverse();
            shuffled.rotate_left(1);
            let q2 = quality_score(&model, "q", &query, c, &shuffled, &stats, &score_cfg).unwrap().q;
            perm_gap = perm_gap.max((q2 - rep.q).abs());
            let images = anchors.images(&data, c).unwrap();
            let pairs: Vec<(&str, &Image)> = anchors.for_plane(c).unwrap().iter().map(|a| a.path.as_str()).zip(images).collect();
            let q3 = quality_score_uncached(&model, "q", &query, c, &pairs, &stats, &score_cfg).unwrap().q;
            if q3.to_bits() != rep.q.to_bits() {
                cache_mismatch += 1;
            }
        }
    }
    outcome(
        out_of_range == 0 && perm_gap <= 1e-12 && cache_mismatch == 0,
        format!(
            "1000 queries, Q range [{qmin:.3}, {qmax:.3}], {out_of_range} outside [0,1]; permutation gap {perm_gap:.1e}; {cache_mismatch} cache mismatches in 100 checks"
        ),
    )
}

fn main() {
    let mut passed = vec![
        run(1, "gradient suite", gradients),
        run(2, "registration identities", identities),
        run(3, "OKS properties", oks_properties),
        run(4, "orthogonality trend", orthogonality),
    ];
    let desk = desk_model();
    println!("(desk-scale model trained in {:.0}s)", desk.train_secs);
    passed.push(run(5, "severity monotonicity", || monotonicity(&desk)));
    passed.push(run(6, "anchor ablation direction", || anchor_ablation(&desk)));
    passed.push(run(7, "oracle equivalences", oracles));
    passed.push(run(8, "determinism", determinism));
    passed.push(run(9, "scoring contract", scoring_contract));
    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
