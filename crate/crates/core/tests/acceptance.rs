//! End-to-end acceptance criteria, one pass/fail line each. Runs as a plain
//! binary so the summary is always printed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dppn::checkpoint::Checkpoint;
use dppn::config::RunConfig;
use dppn::data::{gen_data, Dataset, Split, SyntheticSpec};
use dppn::deform::{predict_offsets, similarity_map, similarity_nondeformable, DeformablePrototype, PartGrid, SimilarityMap};
use dppn::explain::reasoning_report;
use dppn::io::{decode_tensor, encode_tensor};
use dppn::losses::{margin_adjust, orthogonality_loss, subtractive_margin_scores, ARCCOS_CLAMP};
use dppn::model::{init_model, Model, ModelConfig};
use dppn::sphere::{augment_epsilon, normalize_locations, FeatureGrid};
use dppn::train::{evaluate, project_prototypes, train, EpochMetrics};
use dppn::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f32, hi: f32) -> Tensor4 {
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

fn norm_preservation() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (c, h, w) = (rng.random_range(1..9), rng.random_range(2..9), rng.random_range(2..9));
        let rho = [1, 4, 9][rng.random_range(0..3)];
        // ReLU-like features with some exact zeros
        let z = random_tensor(&mut rng, [1, c, h, w], -0.5, 2.0).map(|v| v.max(0.0));
        let u = normalize_locations(&augment_epsilon(&z, 1e-5), rho).unwrap();
        let g = u.grid(0);
        for _ in 0..100 {
            let x = rng.random_range(0.0..=(h - 1) as f32);
            let y = rng.random_range(0.0..=(w - 1) as f32);
            worst = worst.max((norm(&g.interpolate(x, y)) - u.radius as f64).abs());
        }
    }
    // orthogonal corners r·e_k: bilinear blending halves the norm
    let r = 0.5f32;
    let mut t = Tensor4::<f32>::zeros([1, 4, 2, 2]);
    for k in 0..4 {
        t.set(0, k, k / 2, k % 2, r);
    }
    let g = FeatureGrid::new(t.data(), 4, 2, 2);
    let np = norm(&g.interpolate(0.5, 0.5));
    let bilinear: Vec<f32> = (0..4).map(|k| 0.25 * g.column(k / 2, k % 2)[k]).collect();
    let bl = norm(&bilinear);
    let counter = (np - r as f64).abs() <= 1e-6 && (bl - r as f64 / 2.0).abs() <= 1e-6;
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-5 && counter && elapsed < Duration::from_secs(5),
        format!("10^4 samples max |norm - r| = {worst:.2e}; counterexample bilinear {bl:.6} vs preserved {np:.6}; {elapsed:.2?}"),
    )
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let report = dppn::gradcheck::run(0).unwrap();
    let elapsed = start.elapsed();
    let worst = report.groups.iter().map(|g| g.max_rel_error).fold(0f64, f64::max);
    verdict(
        report.passed() && report.groups.len() == 8 && elapsed < Duration::from_secs(60),
        format!("{} groups, worst relative error {worst:.2e}; {elapsed:.2?}", report.groups.len()),
    )
}

fn zero_offset_equivalence() -> Verdict {
    let start = Instant::now();
    let mut worst = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let m: Model = init_model(&ModelConfig::default(), i).unwrap();
        let x = random_tensor(&mut rng, [1, 3, 64, 64], 0.0, 1.0);
        let (_, _, _, zhat) = m.embed(&x).unwrap();
        let branch = m.layer.branch.as_ref().unwrap();
        let field = predict_offsets(&zhat, branch, m.layer.grid.rho()).unwrap();
        for p in &m.layer.prototypes {
            let a = similarity_map(&zhat, 0, p, &field, false).unwrap();
            let b = similarity_nondeformable(&zhat, 0, p, false).unwrap();
            for (u, v) in a.values.iter().zip(&b.values) {
                worst = worst.max((u - v).abs() as f64);
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("100 instances max |deformable - rigid| = {worst:.2e}; {elapsed:.2?}"),
    )
}

fn range_invariants(metrics: &[EpochMetrics], rho: usize) -> Verdict {
    let tol = 1e-5;
    let bound = 1.0 / rho as f64;
    let (mut smin, mut smax, mut pmin, mut pmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for m in metrics {
        smin = smin.min(m.bounds.score_min);
        smax = smax.max(m.bounds.score_max);
        pmin = pmin.min(m.bounds.part_min);
        pmax = pmax.max(m.bounds.part_max);
    }
    verdict(
        smin >= -1.0 - tol && smax <= 1.0 + tol && pmin >= -bound - tol && pmax <= bound + tol,
        format!(
            "{} epochs: scores in [{smin:.6}, {smax:.6}], parts in [{pmin:.6}, {pmax:.6}] (bound {bound})",
            metrics.len()
        ),
    )
}

/// Independent clamped-angle oracle.
fn margin_oracle(g: f64, phi: f64) -> f64 {
    let theta = g.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP).acos();
    (theta - phi).max(0.0).cos()
}

fn margin_monotonicity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let classes = [0, 0, 1, 1, 2, 2];
    let (mut ok, mut worst_formula, mut worst_identity) = (true, 0f64, 0f64);
    for _ in 0..1000 {
        let label = rng.random_range(0..3);
        let phi = rng.random_range(0.0..0.5);
        let maps: Vec<SimilarityMap> = classes
            .iter()
            .map(|_| SimilarityMap {
                height: 1,
                width: 1,
                values: vec![rng.random_range(-1.0..=1.0)],
                eligible: vec![true],
            })
            .collect();
        let picks = subtractive_margin_scores(&maps, label, &classes, phi).unwrap();
        let plain = subtractive_margin_scores(&maps, label, &classes, 0.0).unwrap();
        for ((m, &c), (pick, p0)) in maps.iter().zip(&classes).zip(picks.iter().zip(&plain)) {
            let g = m.values[0] as f64;
            worst_identity = worst_identity.max((p0.value - g).abs());
            if c == label {
                ok &= pick.value == g;
            } else {
                ok &= pick.value >= g;
                worst_formula = worst_formula.max((pick.value - margin_oracle(g, phi)).abs());
            }
        }
    }
    ok &= margin_adjust(0.3, 0.0).0 == 0.3;
    verdict(
        ok && worst_formula <= 1e-12 && worst_identity <= 1e-7,
        format!("1000 instances: formula error {worst_formula:.2e}, phi = 0 error {worst_identity:.2e}"),
    )
}

fn orthogonality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = true;
    let mut worst_zero = 0f64;
    let mut min_positive = f64::INFINITY;
    for d in 4..=8usize {
        let grid = PartGrid::new(2, 2, 2).unwrap();
        let r = 0.5f64;
        // Gram-Schmidt on random vectors: an orthogonal family of 4 norm-r parts
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < 4 {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let parts: Vec<f64> = basis.iter().flatten().map(|x| r * x).collect();
        let p = DeformablePrototype::new(0, 0, grid, d, parts.clone()).unwrap();
        let zero = orthogonality_loss(&[p]).0;
        worst_zero = worst_zero.max(zero);
        // any other norm-r family is penalized
        let q = DeformablePrototype::<f64>::random(0, 0, grid, d, &mut rng);
        let l = orthogonality_loss(&[q]).0;
        min_positive = min_positive.min(l);
        ok &= l > 0.0;
    }
    let grid = PartGrid::new(1, 2, 2).unwrap();
    let r = 1.0 / 2f64.sqrt();
    let part = [r, 0.0, 0.0];
    let twin = DeformablePrototype::new(0, 0, grid, 3, [part, part].concat()).unwrap();
    let twin_loss = orthogonality_loss(&[twin]).0;
    let expect = 2.0 * r.powi(4);
    verdict(
        ok && worst_zero <= 1e-12 && (twin_loss - expect).abs() <= 1e-7,
        format!("orthogonal families loss <= {worst_zero:.1e}, others >= {min_positive:.3e}; identical parts {twin_loss:.9} vs 2r^4 = {expect:.9}"),
    )
}

fn projection_fixed_point(model: &Model, data: &Dataset, records: &[dppn::train::ProjectionRecord]) -> Verdict {
    let mut worst = 0f64;
    for r in records {
        let fwd = model.forward(&data.images[r.image]).unwrap();
        let s = fwd.layer.maps[r.prototype].get(r.center.0, r.center.1) as f64;
        worst = worst.max((s - 1.0).abs());
    }
    let mut again = model.clone();
    let second = project_prototypes(&mut again, data, 1).unwrap();
    let idempotent = again == *model && second == records;
    verdict(
        records.len() == model.num_prototypes() && worst <= 1e-4 && idempotent,
        format!("{} prototypes, max |cos - 1| at source = {worst:.2e}, re-projection no-op: {idempotent}", records.len()),
    )
}

struct Run {
    model: Model,
    checkpoint: Vec<u8>,
    train: Dataset,
    test: Dataset,
    metrics: Vec<EpochMetrics>,
    projections: Vec<dppn::train::ProjectionRecord>,
    train_acc: f64,
    test_acc: f64,
    elapsed: Duration,
}

/// The full pipeline on generated files: default desk-scale config, one thread.
fn pipeline(seed: u64, deformable: bool) -> Run {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.model.deformable = deformable;
    cfg.sync();
    cfg.validate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_data(dir.path(), &cfg.data).unwrap();
    let train_set = Dataset::load(&manifest, Split::Train, cfg.mean, cfg.std).unwrap();
    let test_set = Dataset::load(&manifest, Split::Test, cfg.mean, cfg.std).unwrap();
    let start = Instant::now();
    let mut model: Model = init_model(&cfg.model, seed).unwrap();
    let out = train(&mut model, &train_set, &cfg.schedule, &cfg.weights, |_| {}).unwrap();
    let elapsed = start.elapsed();
    let train_acc = evaluate(&model, &train_set, 1).unwrap().accuracy;
    let test_acc = evaluate(&model, &test_set, 1).unwrap().accuracy;
    let checkpoint = Checkpoint {
        config: cfg,
        model: model.clone(),
        projections: out.projections.clone(),
    }
    .encode()
    .unwrap();
    Run {
        model,
        checkpoint,
        train: train_set,
        test: test_set,
        metrics: out.metrics,
        projections: out.projections,
        train_acc,
        test_acc,
        elapsed,
    }
}

fn desk_scale_learning(run: &Run) -> Verdict {
    let spec = SyntheticSpec::default();
    verdict(
        run.train_acc >= 0.95 && run.test_acc >= 0.80 && run.metrics.len() <= 30 && run.elapsed < Duration::from_secs(900),
        format!(
            "K = {}, jitter {} px, {} epochs: train {:.3}, test {:.3}; {:.1?}",
            spec.num_classes,
            spec.pose_jitter,
            run.metrics.len(),
            run.train_acc,
            run.test_acc,
            run.elapsed
        ),
    )
}

fn deformation_direction(first: &Run) -> Verdict {
    let mut deformable = vec![first.test_acc];
    let mut rigid = Vec::new();
    for seed in 0..5 {
        if seed > 0 {
            deformable.push(pipeline(seed, true).test_acc);
        }
        rigid.push(pipeline(seed, false).test_acc);
    }
    let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    let (d, n) = (mean(&deformable), mean(&rigid));
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        d >= n - 2.0,
        format!(
            "mean test accuracy deformable {d:.1} [{}] vs nd {n:.1} [{}] (desk-scale analog only)",
            fmt(&deformable),
            fmt(&rigid)
        ),
    )
}

fn determinism_and_io(first: &Run) -> Verdict {
    let repeat = pipeline(0, true);
    let reproducible = repeat.checkpoint == first.checkpoint;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tensors_exact = true;
    for _ in 0..20 {
        let dims = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6)];
        let mut t = random_tensor(&mut rng, dims, -1e3, 1e3);
        t.data_mut()[0] = f32::MIN_POSITIVE / 2.0;
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        tensors_exact &= back.dims() == t.dims() && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let decoded = Checkpoint::decode(&first.checkpoint).unwrap();
    let checkpoint_exact = decoded.model == first.model && decoded.encode().unwrap() == first.checkpoint;

    let ev = evaluate(&first.model, &first.test, 1).unwrap();
    let mut worst = 0f64;
    let mut same_prediction = true;
    for (x, p) in first.test.images.iter().zip(&ev.predictions) {
        let report = reasoning_report(&first.model, x).unwrap();
        same_prediction &= report.predicted == p.predicted;
        for (a, b) in report.class_totals.iter().zip(&p.logits) {
            worst = worst.max((a - b).abs());
        }
        for c in 0..report.class_totals.len() {
            let sum: f64 = report
                .rows
                .iter()
                .map(|r| r.score * first.model.last.get(r.prototype, c) as f64)
                .sum();
            worst = worst.max((sum - p.logits[c]).abs());
        }
    }
    verdict(
        reproducible && tensors_exact && checkpoint_exact && same_prediction && worst <= 1e-5,
        format!(
            "checkpoint reproducible: {reproducible} ({} bytes); tensor round-trip exact: {tensors_exact}; \
             checkpoint round-trip exact: {checkpoint_exact}; report vs evaluate max logit gap {worst:.2e}",
            first.checkpoint.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("criterion {}: {} {name}: {}", results.len() + 1, if v.passed { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    report("norm preservation", norm_preservation());
    report("gradient suite", gradient_suite());
    report("zero-offset equivalence", zero_offset_equivalence());
    let run = pipeline(0, true);
    report("cosine and part bounds", range_invariants(&run.metrics, run.model.layer.grid.rho()));
    report("margin monotonicity", margin_monotonicity());
    report("orthogonality loss", orthogonality());
    report("projection fixed point", projection_fixed_point(&run.model, &run.train, &run.projections));
    report("desk-scale learning", desk_scale_learning(&run));
    report("deformation direction", deformation_direction(&run));
    report("determinism and io", determinism_and_io(&run));
    let failed = results.iter().filter(|(_, v)| !v.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
