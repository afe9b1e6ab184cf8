//! End-to-end acceptance run. One line per criterion; non-zero exit if any fails.
//!
//! Trains the desk model once (|G|=8, a few minutes on one core) and reuses it
//! for every criterion that needs a trained network.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use group_align::autodiff::GradCheckOptions;
use group_align::datagen::{decompose_rotation, make_pair, texture, Homography, HomographyRanges, JitterConfig, PairConfig, TrainingPair};
use group_align::eqnn::{equivariance_suite, Backbone, BackboneConfig};
use group_align::invmap::{Descriptor, Method};
use group_align::losses::{descriptor_loss, orientation_loss, softmax_entropy, LossConfig};
use group_align::matcheval::{
    build_roto_benchmark, corner_error, fit_homography, hestimation, mma, mutual_nn_match, orientation_consistency,
    ransac_homography, roto_angles, run_benchmark, run_benchmark_methods, BenchConfig, Match, MatchReport, MethodSpec,
    Protocol, RansacConfig, ScalePyramidConfig,
};
use group_align::trainer::{pipeline_grad_check, train_loop, TrainConfig, TrainState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn run(results: &mut Vec<bool>, id: u32, name: &str, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let o = f();
    println!(
        "criterion {id:>2} {:<4} {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        t.elapsed().as_secs_f64()
    );
    results.push(o.pass);
}

fn c1_equivariance() -> Outcome {
    let g4 = Backbone::new(BackboneConfig::desk()).unwrap();
    let r4 = equivariance_suite(&g4, 10, 64, 1).unwrap();
    let g16 = Backbone::new(BackboneConfig { order: 16, ..BackboneConfig::desk() }).unwrap();
    let r16 = equivariance_suite(&g16, 10, 64, 1).unwrap();
    outcome(
        r4.max_error <= 1e-4 && r16.per_turn[0] <= 1e-3,
        format!("|G|=4 max {:.2e} (tol 1e-4), |G|=16 at 90° {:.2e} (tol 1e-3)", r4.max_error, r16.per_turn[0]),
    )
}

fn c2a_lossless_alignment() -> Outcome {
    let model = Backbone::new(BackboneConfig::desk()).unwrap();
    let imgs = (0..3).map(|s| texture::mixed(64, 64, 300 + s)).collect();
    let bench = build_roto_benchmark(imgs, &[0.0, 90.0, 180.0, 270.0]).unwrap();
    let cfg = BenchConfig {
        protocol: Protocol::Gt,
        keypoints: 64,
        thresholds: vec![1.0],
        ..Default::default()
    };
    let r = run_benchmark(&model, &bench, &cfg, MethodSpec::align_gt()).unwrap();
    let m = r.summary.mma[0];
    outcome(m == 1.0, format!("untrained |G|=4, quarter turns, MMA@1 = {m} (need 1.0)"))
}

fn c2b_gt_shift_across_angles(gt: &MatchReport) -> Outcome {
    let at = |p: &group_align::matcheval::AnglePoint| p.mma[gt.thresholds.iter().position(|t| *t == 5.0).unwrap()];
    let zero = at(&gt.curve[0]);
    let worst = gt.curve.iter().map(at).fold(f64::INFINITY, f64::min);
    outcome(
        worst >= 0.9 * zero,
        format!("align-gt worst MMA@5 over 36 angles {worst:.3} vs 0.9 × {zero:.3}"),
    )
}

fn c3_ordering(r: &[MatchReport]) -> Outcome {
    let m = |name: &str| r.iter().find(|x| x.method == name).unwrap().mma_at(5.0).unwrap();
    let (align, avg, max, none) = (m("align"), m("avg"), m("max"), m("none"));
    outcome(
        align > avg && align > max && avg.min(max) > none,
        format!("MMA@5 align {align:.3}, avg {avg:.3}, max {max:.3}, none {none:.3}"),
    )
}

fn c4_curve_spread(r: &[MatchReport]) -> Outcome {
    let s = |name: &str| r.iter().find(|x| x.method == name).unwrap().curve_spread(5.0).unwrap();
    let (align, none) = (s("align"), s("none"));
    outcome(align < 0.5 * none, format!("MMA@5 spread align {align:.3}, none {none:.3}"))
}

fn c5_gradients() -> Outcome {
    let model = Backbone::new(BackboneConfig::desk()).unwrap();
    let r = pipeline_grad_check(&model, &LossConfig::default(), 16, 0, &GradCheckOptions::default()).unwrap();
    let bad = GradCheckOptions {
        corrupt: Some(group_align::autodiff::Primitive::Conv),
        ..Default::default()
    };
    let control = pipeline_grad_check(&model, &LossConfig::default(), 16, 0, &bad).unwrap();
    outcome(
        r.max_rel_err <= 1e-3 && !control.passed,
        format!(
            "desk |G|=4, 16x16, max rel err {:.2e} (tol 1e-3); corrupted conv adjoint {:.2e}",
            r.max_rel_err, control.max_rel_err
        ),
    )
}

fn c6_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0f64;
    for _ in 0..100 {
        let n = [4, 8, 16][rng.random_range(0..3)];
        let k = rng.random_range(1..6);
        let delta = rng.random_range(0..n);
        let a: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        // b = shift(a, −Δ): b[i] = a[i − Δ]
        let b: Vec<Vec<f64>> = a.iter().map(|r| (0..n).map(|i| r[(i + n - delta) % n]).collect()).collect();
        let want: f64 = a.iter().map(|r| softmax_entropy(r)).sum();
        worst = worst.max((orientation_loss(&a, &b, delta).unwrap() - want).abs());
    }
    let d = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let excl = descriptor_loss(&d, &d, 1.0, false).unwrap();
    let incl = descriptor_loss(&d, &d, 1.0, true).unwrap();
    outcome(
        worst <= 1e-6 && (excl + 2.0).abs() <= 1e-4 && (incl - 0.6266).abs() <= 1e-4,
        format!("entropy identity worst {worst:.1e}; K=2 exclusive {excl:.4}, inclusive {incl:.4}"),
    )
}

fn c7_geometry() -> Outcome {
    let worst = [0.0, 30.0, 90.0, 200.0, 350.0]
        .iter()
        .map(|&t| {
            let got = decompose_rotation(&Homography::rotation_about(t, 0.0, 0.0)).unwrap();
            let d = (got - t).abs();
            d.min(360.0 - d)
        })
        .fold(0f64, f64::max);
    let levels = ScalePyramidConfig::default().level_sides().len();
    let one = build_roto_benchmark(vec![texture::mixed(16, 16, 0)], &roto_angles()).unwrap().len();
    let ten = build_roto_benchmark((0..10).map(|s| texture::mixed(16, 16, s)).collect(), &roto_angles())
        .unwrap()
        .len();
    outcome(
        worst <= 1e-6 && levels == 9 && one == 36 && ten == 360,
        format!("rotation error {worst:.1e}, pyramid levels {levels}, roto pairs {one}/{ten}"),
    )
}

fn descriptors(rows: &[Vec<f32>]) -> Vec<Descriptor> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| Descriptor {
            data: r.clone(),
            method: Method::None,
            delta: None,
            keypoint: i as u32,
        })
        .collect()
}

/// Pairs (i, j) where j is i's best and i is j's best, by dot product.
fn brute_force_matches(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<(u32, u32)> {
    let dot = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f32>();
    let argmax = |v: Vec<f32>| {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        best
    };
    let mut out = Vec::new();
    for (i, ra) in a.iter().enumerate() {
        let j = argmax(b.iter().map(|rb| dot(ra, rb)).collect());
        if argmax(a.iter().map(|r| dot(r, &b[j])).collect()) == i {
            out.push((i as u32, j as u32));
        }
    }
    out
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn transfer(h: &Homography, p: (f64, f64), q: (f64, f64)) -> f64 {
    h.project(p.0, p.1).map_or(f64::INFINITY, |(x, y)| (x - q.0).hypot(y - q.1))
}

fn collinear(p: &[(f64, f64)]) -> bool {
    let area = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs();
    (0..4).any(|s| {
        let q: Vec<_> = (0..4).filter(|i| *i != s).map(|i| p[i]).collect();
        area(q[0], q[1], q[2]) < 1e-9
    })
}

/// Best support over every 4-subset, and the homography reaching it.
fn exhaustive_support(src: &[(f64, f64)], dst: &[(f64, f64)], threshold: f64) -> (usize, Homography) {
    let n = src.len();
    let mut best = (0, Homography::identity());
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let s = [src[i], src[j], src[k], src[l]];
                    let d = [dst[i], dst[j], dst[k], dst[l]];
                    if collinear(&s) || collinear(&d) {
                        continue;
                    }
                    let Ok(h) = fit_homography(&s, &d) else { continue };
                    let c = (0..n).filter(|&m| transfer(&h, src[m], dst[m]) <= threshold).count();
                    if c > best.0 {
                        best = (c, h);
                    }
                }
            }
        }
    }
    best
}

fn c8_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut matcher_ok = 0;
    let mut mma_ok = 0;
    for _ in 0..200 {
        let (na, nb, dim) = (rng.random_range(1..=50), rng.random_range(1..=50), rng.random_range(2..12));
        let a: Vec<Vec<f32>> = (0..na).map(|_| unit(&mut rng, dim)).collect();
        let b: Vec<Vec<f32>> = (0..nb).map(|_| unit(&mut rng, dim)).collect();
        let got: Vec<(u32, u32)> = mutual_nn_match(&descriptors(&a), &descriptors(&b))
            .unwrap()
            .iter()
            .map(|m| (m.a, m.b))
            .collect();
        if got == brute_force_matches(&a, &b) {
            matcher_ok += 1;
        }
        // MMA against a direct reprojection count
        let kp_a: Vec<(f64, f64)> = (0..na).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let kp_b: Vec<(f64, f64)> = (0..nb).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let h = Homography::rotation_about(rng.random_range(0.0..360.0), 50.0, 50.0);
        let ms: Vec<Match> = got.iter().map(|&(a, b)| Match { a, b, similarity: 1.0 }).collect();
        let r = mma(&ms, &kp_a, &kp_b, &h, &[3.0, 5.0, 10.0, 200.0]);
        let want: Vec<usize> = [3.0, 5.0, 10.0, 200.0]
            .iter()
            .map(|t| got.iter().filter(|&&(a, b)| transfer(&h, kp_a[a as usize], kp_b[b as usize]) <= *t).count())
            .collect();
        if r.correct == want && r.predicted == got.len() {
            mma_ok += 1;
        }
    }

    let h = Homography::from_rows([0.9, -0.3, 12.0, 0.25, 1.05, -4.0, 4e-4, -2e-4, 1.0]).unwrap();
    let identity: Vec<Match> = (0..12).map(|i| Match { a: i, b: i, similarity: 1.0 }).collect();
    let mut noiseless_ok = 0;
    for n in 4..=12 {
        let src: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let dst: Vec<(f64, f64)> = src.iter().map(|p| h.project(p.0, p.1).unwrap()).collect();
        let r = hestimation(&identity[..n], &src, &dst, &h, 100, 100, &RansacConfig::default());
        noiseless_ok += r.pass as usize;
    }
    let mut outlier_ok = 0;
    for seed in 0..10 {
        let src: Vec<(f64, f64)> = (0..12).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let mut dst: Vec<(f64, f64)> = src.iter().map(|p| h.project(p.0, p.1).unwrap()).collect();
        // 7 of 12 inliers, the rest uniform
        for d in dst.iter_mut().skip(7) {
            *d = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        }
        let cfg = RansacConfig { seed, ..Default::default() };
        let fit = ransac_homography(&src, &dst, &cfg).unwrap();
        let (support, oracle_h) = exhaustive_support(&src, &dst, cfg.threshold);
        let r = hestimation(&identity, &src, &dst, &h, 100, 100, &cfg);
        if r.pass && fit.num_inliers() >= support && corner_error(&oracle_h, &h, 100, 100) <= cfg.epsilon {
            outlier_ok += 1;
        }
    }
    outcome(
        matcher_ok == 200 && mma_ok == 200 && noiseless_ok == 9 && outlier_ok == 10,
        format!(
            "matcher {matcher_ok}/200, MMA counts {mma_ok}/200, noiseless H {noiseless_ok}/9, 7-of-12 inliers {outlier_ok}/10"
        ),
    )
}

fn held_out_rotations() -> Vec<TrainingPair> {
    let cfg = PairConfig {
        ranges: HomographyRanges::rotation_only(),
        jitter: JitterConfig::none(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    (0..50)
        .map(|i| {
            let img = texture::mixed(96, 96, 9000 + i);
            (0..20).find_map(|_| make_pair(&img, &mut rng, &cfg).ok()).expect("pair")
        })
        .collect()
}

fn c9_consistency(trained: &Backbone) -> Outcome {
    let pairs = held_out_rotations();
    let untrained = Backbone::new(trained.config().clone()).unwrap();
    let t = orientation_consistency(trained, &pairs, 30.0).unwrap();
    let u = orientation_consistency(&untrained, &pairs, 30.0).unwrap();
    outcome(
        t.rate > u.rate,
        format!("30° consistency trained {:.3} vs untrained {:.3} ({} keypoints)", t.rate, u.rate, t.total),
    )
}

fn c10_candidates(r: &[MatchReport]) -> Outcome {
    let get = |name: &str| r.iter().find(|x| x.method == name).unwrap();
    let (single, multi) = (get("align"), get("align-c0.6"));
    let (ms, mm) = (single.mma_at(5.0).unwrap(), multi.mma_at(5.0).unwrap());
    let (ps, pm) = (single.summary.mean_predicted, multi.summary.mean_predicted);
    outcome(
        mm >= ms && pm > ps,
        format!("MMA@5 ratio-0.6 {mm:.3} vs single {ms:.3}; predicted {pm:.1} vs {ps:.1}"),
    )
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    run(&mut results, 1, "equivariance law", c1_equivariance);
    run(&mut results, 2, "alignment upper bound, quarter turns", c2a_lossless_alignment);
    run(&mut results, 5, "gradient fidelity", c5_gradients);
    run(&mut results, 6, "loss identities", c6_losses);
    run(&mut results, 7, "geometry", c7_geometry);
    run(&mut results, 8, "metric oracles", c8_metric_oracles);

    let t = Instant::now();
    let cfg = TrainConfig::desk();
    let corpus: Vec<_> = (0..16).map(|s| texture::mixed(128, 128, 1000 + s)).collect();
    let mut state = TrainState::new(&cfg).unwrap();
    let report = train_loop(&corpus, &cfg, &mut state, None, |_, _| {}).unwrap();
    let model = state.model;
    println!(
        "trained |G|={} for {} iterations in {:.0}s",
        model.config().order,
        report.iterations.len(),
        t.elapsed().as_secs_f64()
    );

    // Roto-mini: held-out textures, every 10° turn, predicted keypoints
    let t = Instant::now();
    let imgs = (0..5).map(|s| texture::mixed(128, 128, 5000 + s)).collect();
    let bench = build_roto_benchmark(imgs, &roto_angles()).unwrap();
    let bcfg = BenchConfig {
        protocol: Protocol::Pred,
        keypoints: 128,
        ..Default::default()
    };
    let specs = [
        MethodSpec::new(Method::Align),
        MethodSpec::new(Method::Avg),
        MethodSpec::new(Method::Max),
        MethodSpec::new(Method::None),
        MethodSpec::align_candidates(0.6, 4),
        MethodSpec::align_gt(),
    ];
    let reports = run_benchmark_methods(&model, &bench, &bcfg, &specs).unwrap();
    println!("roto-mini: {} pairs x {} methods in {:.0}s", bench.len(), specs.len(), t.elapsed().as_secs_f64());

    run(&mut results, 2, "alignment upper bound, 10° grid", || c2b_gt_shift_across_angles(&reports[5]));
    run(&mut results, 3, "invariant-mapping ordering", || c3_ordering(&reports));
    run(&mut results, 4, "rotation-consistency curve", || c4_curve_spread(&reports));
    run(&mut results, 9, "orientation consistency", || c9_consistency(&model));
    run(&mut results, 10, "multi-candidate monotonicity", || c10_candidates(&reports));

    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
