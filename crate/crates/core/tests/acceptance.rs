//! Acceptance checks. Each criterion prints one PASS or FAIL line; the process exits
//! nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dictbench::dictionary::{fit_mean_dictionary, fit_mse_dictionary, normal_equation_residual, variance_explained};
use dictbench::edit::{brute_force_edit, feature_weights, greedy_edit};
use dictbench::eval::{counterfactual_pairs, greedy_edit_test, FeatureSpace, LinearSurrogate};
use dictbench::interp::{f1, precision_recall_f1, score_dictionary, PredicateTable, SiteKind};
use dictbench::mech::{attention_score_decomposition, decompose_query, residual_sigma, LnStats, ScaleMode, Upstream};
use dictbench::sae::{sae_grad, sae_loss, SaeParams};
use dictbench::store::ActivationDataset;
use dictbench::synth::FactorialTask;
use dictbench::toy::{
    gen_gaussian_mixture, run_occlusion_sweep, run_oversplit, summarize_occlusion, surgical_reduction,
    train_two_feature_sae, MixtureConfig, OcclusionConfig, TWO_FEATURE_SAMPLES,
};
use fixedbitset::FixedBitSet;
use ndarray::{Array1, Array2, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn normal2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal))
}

fn normal1(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal))
}

fn mse_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_rel, mut worst_res) = (0.0f64, 0.0f64);
    for seed in 0..50 {
        let n = rng.random_range(20..=200);
        let d = rng.random_range(1..=16);
        let cards: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=5)).collect();
        let ds = common::random_dataset(n, d, &cards, seed);
        let dict = fit_mse_dictionary(&ds, 0.0).map_err(|e| e.to_string())?;
        let oracle = common::svd_mse_features(&ds);
        let diff: f64 = dict.features.indexed_iter().map(|((i, j), x)| (x - oracle[(i, j)]).powi(2)).sum::<f64>().sqrt();
        worst_rel = worst_rel.max(diff / oracle.norm().max(1e-12));
        worst_res = worst_res.max(normal_equation_residual(&dict, &ds));
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    check(
        worst_rel <= 1e-6 && worst_res <= 1e-6,
        format!("max relative error {worst_rel:.2e}, max normal-equation residual {worst_res:.2e}"),
    )
}

fn null_convergence() -> Outcome {
    let mean_norm = |n: usize, seed: u64| {
        let dict = fit_mean_dictionary(&common::random_dataset(n, 12, &[4, 3], seed));
        dict.features.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / dict.features.nrows() as f64
    };
    let ratios: Vec<f64> = (0..20).map(|s| mean_norm(400, s) / mean_norm(6400, 1000 + s)).collect();
    let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
    check((2.5..=6.0).contains(&avg), format!("shrink factor {avg:.3} for 16x samples"))
}

/// Two additive attributes plus a third whose labels are drawn independently of the rows.
fn independence_lemma() -> Outcome {
    let (n, d) = (1200, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u0 = normal2(&mut rng, 3, d);
    let u1 = normal2(&mut rng, 4, d);
    let base = common::random_dataset(n, d, &[3, 4, 3], 21);
    let mut rows = base.to_array();
    for i in 0..n {
        let mut row = rows.row_mut(i);
        row += &(&u0.row(base.label(i, 0)) * 2.0);
        row += &(&u1.row(base.label(i, 1)) * 2.0);
    }
    let labels: Vec<u16> = (0..n).flat_map(|i| base.row_labels(i).to_vec()).collect();
    let spread = |labels: Vec<u16>| -> f64 {
        let ds = ActivationDataset::from_rows(base.location, base.schema.clone(), &rows, labels).unwrap();
        let dict = fit_mse_dictionary(&ds, 0.0).unwrap();
        common::max_pairwise_distance(&(0..3).map(|v| dict.feature(2, v).unwrap().to_owned()).collect::<Vec<_>>())
    };
    let observed = spread(labels.clone());
    let mut floor = 0.0;
    let trials = 20;
    for _ in 0..trials {
        let mut third: Vec<u16> = (0..n).map(|i| labels[3 * i + 2]).collect();
        third.shuffle(&mut rng);
        let mut permuted = labels.clone();
        for (i, v) in third.into_iter().enumerate() {
            permuted[3 * i + 2] = v;
        }
        floor += spread(permuted) / trials as f64;
    }
    check(observed < 10.0 * floor, format!("spread {observed:.4}, permutation floor {floor:.4}"))
}

fn min_abs_preactivation(p: &SaeParams, batch: &Array2<f64>) -> f64 {
    let pre = (batch - &p.b_dec).dot(&p.w_enc.t()) + &p.b_enc;
    pre.iter().fold(f64::INFINITY, |a, &x| a.min(x.abs()))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let (mut done, mut seed, mut worst) = (0, 0u64, 0.0f64);
    while done < 100 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (rng.random_range(2..8), rng.random_range(2..12));
        let mut p = SaeParams::init(n, m, seed);
        p.b_enc.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        p.b_dec.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let rows = rng.random_range(1..8);
        let batch = normal2(&mut rng, rows, n);
        if min_abs_preactivation(&p, &batch) <= 1e-6 {
            continue;
        }
        let lambda = rng.random_range(0.0..2.0);
        let g = sae_grad(&p, batch.view(), lambda, false).map_err(|e| e.to_string())?;
        let loss = |q: &SaeParams| sae_loss(q, batch.view(), lambda).unwrap().total;
        let analytic = [g.w_enc.into_dyn(), g.b_enc.into_dyn(), g.w_dec.into_dyn(), g.b_dec.into_dyn()];
        let (mut err, mut scale) = (0.0, 0.0);
        for (slot, a) in analytic.iter().enumerate() {
            for idx in 0..a.len() {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let mut view: ArrayViewMutD<f64> = match slot {
                        0 => q.w_enc.view_mut().into_dyn(),
                        1 => q.b_enc.view_mut().into_dyn(),
                        2 => q.w_dec.view_mut().into_dyn(),
                        _ => q.b_dec.view_mut().into_dyn(),
                    };
                    *view.iter_mut().nth(idx).unwrap() += delta;
                    loss(&q)
                };
                let h = 1e-8;
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let x = *a.iter().nth(idx).unwrap();
                err += (fd - x) * (fd - x);
                scale += x * x;
            }
        }
        worst = worst.max(err.sqrt() / scale.sqrt().max(1e-3));
        done += 1;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over 100 instances, {} near kinks skipped", seed - 100))
}

fn greedy_vs_oracle() -> Outcome {
    let (mut gaps, mut k1_mismatch) = (0, 0);
    for seed in 0..200u64 {
        let x = common::edit_instance(seed, 6);
        let k = 1 + (seed % 3) as usize;
        let g = greedy_edit(x.u.view(), x.a_s.view(), &x.active_s, x.a_t.view(), &x.active_t, k).map_err(|e| e.to_string())?;
        let b = brute_force_edit(x.u.view(), x.a_s.view(), &x.active_s, x.a_t.view(), &x.active_t, k).map_err(|e| e.to_string())?;
        if g.residual_distance < b.residual_distance - 1e-12 {
            gaps += 1;
        }
        let g1 = greedy_edit(x.u.view(), x.a_s.view(), &x.active_s, x.a_t.view(), &x.active_t, 1).unwrap();
        let b1 = brute_force_edit(x.u.view(), x.a_s.view(), &x.active_s, x.a_t.view(), &x.active_t, 1).unwrap();
        if (g1.residual_distance - b1.residual_distance).abs() > 1e-12 * b1.residual_distance.max(1.0) {
            k1_mismatch += 1;
        }
    }
    check(
        gaps == 0 && k1_mismatch == 0,
        format!("{gaps} instances below the exhaustive optimum, {k1_mismatch} mismatches at k=1"),
    )
}

fn weight_identity() -> Outcome {
    let (mut worst_sum, mut worst_add) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let x = common::edit_instance(1000 + seed, 6);
        let w = feature_weights(&x.active_s, x.u.view()).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let mut c = Array1::<f64>::zeros(x.u.ncols());
        for &(i, f) in &x.active_s {
            c.scaled_add(f, &x.u.row(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = (0..w.len()).map(|_| rng.random()).collect();
        let mut v = Array1::<f64>::zeros(x.u.ncols());
        let mut summed = 0.0;
        for (k, &(i, f)) in x.active_s.iter().enumerate() {
            if mask[k] {
                v.scaled_add(f, &x.u.row(i));
                summed += w[k];
            }
        }
        worst_add = worst_add.max((v.dot(&c) / c.dot(&c) - summed).abs());
    }
    check(
        worst_sum <= 1e-6 && worst_add <= 1e-9,
        format!("max |sum - 1| {worst_sum:.2e}, max subset gap {worst_add:.2e}"),
    )
}

fn f1_fixed_points() -> Outcome {
    let bits = |v: &[usize], n: usize| {
        let mut b = FixedBitSet::with_capacity(n);
        v.iter().for_each(|&i| b.insert(i));
        b
    };
    let a = bits(&[0, 2, 5, 7], 10);
    let same = precision_recall_f1(&a, &a).2;
    let disjoint = precision_recall_f1(&bits(&[1, 3], 10), &a).2;
    let skewed = f1(0.5, 0.02);
    let mut lowest = 1.0f64;
    for i in 0..=1000 {
        for j in 0..=1000 {
            let (p, r) = (i as f64 / 1000.0, j as f64 / 1000.0);
            if f1(p, r) >= 0.8 {
                lowest = lowest.min(p.min(r));
            }
        }
    }
    check(
        same == 1.0 && disjoint == 0.0 && (skewed - 0.0385).abs() <= 5e-4 && lowest >= 0.666,
        format!("identical {same}, disjoint {disjoint}, (0.5, 0.02) {skewed:.4}, min(p, r) at F1 >= 0.8 is {lowest:.3}"),
    )
}

fn factorial_end_to_end() -> Outcome {
    let task = FactorialTask::new(&[3, 4, 2], 10, 4);
    let ds = task.full_factorial(2);
    let dict = fit_mean_dictionary(&ds);
    let ve = variance_explained(&dict, &ds).map_err(|e| e.to_string())?;

    let codes = FeatureSpace::from_dictionary(&dict, &ds).map_err(|e| e.to_string())?.codes;
    let table = PredicateTable::build(&ds, SiteKind::Generic, None).map_err(|e| e.to_string())?;
    let score = score_dictionary(codes.view(), &table, 1, 0.99).map_err(|e| e.to_string())?;
    let offsets = ds.schema.value_offsets();
    let own = score.explanations.iter().all(|e| {
        e.f1 == 1.0 && e.predicate.as_ref().is_some_and(|p| p.attr.is_some_and(|a| offsets[a] + p.params[0] == e.feature))
    });
    let all_features = score.n_explained == dict.features.nrows();

    let a = ds.to_array();
    let space = FeatureSpace::from_dictionary(&dict, &ds).map_err(|e| e.to_string())?;
    let (mut worst_edit, mut worst_agreement) = (0.0f64, 1.0f64);
    for attr in &ds.schema.attributes {
        let pairs = counterfactual_pairs(&ds, &attr.name, None, 0).map_err(|e| e.to_string())?;
        let k = ds.schema.index_of(&attr.name).unwrap();
        for p in &pairs {
            let (old, new) = (ds.label(p.source, k), ds.label(p.target, k));
            let edited = dict.edit_attribute(a.row(p.source), &attr.name, old, new).map_err(|e| e.to_string())?;
            let target = a.row(p.target);
            let rel = (&edited - &target).mapv(|x| x * x).sum().sqrt() / target.dot(&target).sqrt().max(1e-12);
            worst_edit = worst_edit.max(rel);
        }
        let readout = LinearSurrogate::fit_centroids(&ds, &attr.name, None).map_err(|e| e.to_string())?;
        let report = greedy_edit_test(&readout, &ds, &space, &pairs, 2).map_err(|e| e.to_string())?;
        worst_agreement = worst_agreement.min(report.agreement);
    }
    check(
        ve >= 1.0 - 1e-6 && own && all_features && worst_edit <= 1e-6 && worst_agreement == 1.0,
        format!(
            "variance explained {ve:.9}, {}/{} features at F1 1 on their own value, max edit error {worst_edit:.2e}, min agreement {worst_agreement}",
            score.n_explained,
            dict.features.nrows()
        ),
    )
}

fn oversplit(config: MixtureConfig, limit: Duration) -> Outcome {
    let start = Instant::now();
    let report = run_oversplit(&config, 0).map_err(|e| e.to_string())?;
    within(start.elapsed(), limit)?;
    let below: Vec<_> = report.comparisons.iter().filter(|c| c.below_cutoff).collect();
    let weakest = below.iter().map(|c| c.margin / c.margin_se).fold(f64::INFINITY, f64::min);
    check(
        report.randomized_wins(2.0) && !below.is_empty(),
        format!(
            "{} grid points below the cutoff {:?}, smallest margin {weakest:.1} standard errors, {:.1?}",
            below.len(),
            report.cutoff_lambda,
            start.elapsed()
        ),
    )
}

fn two_feature_recovery() -> Outcome {
    let config = MixtureConfig { n_samples: TWO_FEATURE_SAMPLES, ..MixtureConfig::full() };
    let mut counts = Vec::new();
    for lambda in [1.0, 2.0, 3.0] {
        let mut ok = 0;
        for seed in 0..5u64 {
            let mix = gen_gaussian_mixture(&config, 100 + seed).map_err(|e| e.to_string())?;
            let fit = train_two_feature_sae(&mix, lambda, seed).map_err(|e| e.to_string())?;
            if fit.report.aligned(0.9) && fit.report.opposite() {
                ok += 1;
            }
        }
        counts.push((lambda, ok));
    }
    check(
        counts.iter().all(|&(_, ok)| ok >= 4),
        counts.iter().map(|(l, ok)| format!("lambda {l}: {ok}/5")).collect::<Vec<_>>().join(", "),
    )
}

fn occlusion() -> Outcome {
    let start = Instant::now();
    let config = OcclusionConfig::reduced();
    let ratio = summarize_occlusion(&run_occlusion_sweep(&config).map_err(|e| e.to_string())?);
    let equal = summarize_occlusion(&run_occlusion_sweep(&config.with_equal_norms()).map_err(|e| e.to_string())?);
    within(start.elapsed(), Duration::from_secs(20 * 60))?;
    check(
        ratio.hi_at_least_lo >= 0.9 && equal.relative_gap < 0.1,
        format!(
            "hi >= lo in {:.0}% of {} cells (mean {:.1} vs {:.1}); equal norms gap {:.3} (mean {:.1} vs {:.1}); {:.1?}",
            100.0 * ratio.hi_at_least_lo,
            ratio.cells,
            ratio.mean_hi,
            ratio.mean_lo,
            equal.relative_gap,
            equal.mean_hi,
            equal.mean_lo,
            start.elapsed()
        ),
    )
}

fn surgical_monotonicity() -> Outcome {
    let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let points = surgical_reduction(&OcclusionConfig::reduced(), 64, 0.4, 0.5, &alphas, 0).map_err(|e| e.to_string())?;
    let lo: Vec<usize> = points.iter().map(|p| p.lo_count).collect();
    let drops: Vec<usize> = lo.windows(2).filter(|w| w[1] < w[0]).map(|w| w[0] - w[1]).collect();
    check(
        drops.len() <= 1 && drops.iter().all(|&d| d <= 1),
        format!("lo-family counts over alpha {lo:?}"),
    )
}

fn mech_identities() -> Outcome {
    let (mut worst_bilinear, mut worst_exact, mut worst_fixed) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nq, nk, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..10));
        let (q, k) = (normal2(&mut rng, nq, d), normal2(&mut rng, nk, d));
        let terms = attention_score_decomposition(q.view(), k.view(), d).map_err(|e| e.to_string())?;
        let full = q.sum_axis(Axis(0)).dot(&k.sum_axis(Axis(0))) / (d as f64).sqrt();
        worst_bilinear = worst_bilinear.max((terms.sum() - full).abs());

        let (d_model, d_head, heads) = (16, 4, rng.random_range(1..5));
        let center = rng.random();
        let ws: Vec<Array2<f64>> = (0..heads).map(|_| normal2(&mut rng, d_model, d_head)).collect();
        let zs: Vec<Array1<f64>> = (0..heads).map(|_| normal1(&mut rng, d_head)).collect();
        let rest = normal1(&mut rng, d_model);
        let w_q = normal2(&mut rng, d_head, d_model);
        let b_q = normal1(&mut rng, d_head);
        let ln = LnStats {
            gamma: normal1(&mut rng, d_model),
            beta: normal1(&mut rng, d_model),
            sigma_hat: rng.random_range(0.5..2.0),
            eps: 1e-5,
            center,
        };
        let upstream: Vec<Upstream> = zs.iter().zip(&ws).map(|(z, w)| Upstream { z: z.view(), w_o: w.view() }).collect();
        let mut r = rest.clone();
        for (z, w) in zs.iter().zip(&ws) {
            r += &w.dot(z);
        }
        let exact = decompose_query(&upstream, rest.view(), w_q.view(), Some(b_q.view()), &ln, ScaleMode::Exact(residual_sigma(r.view(), center)))
            .map_err(|e| e.to_string())?;
        let query = w_q.dot(&ln.apply(r.view())) + &b_q;
        worst_exact = worst_exact.max((&exact.total() - &query).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));

        let fixed = decompose_query(&upstream, rest.view(), w_q.view(), Some(b_q.view()), &ln, ScaleMode::DatasetMean).map_err(|e| e.to_string())?;
        let mu = if center { r.mean().unwrap() } else { 0.0 };
        let linear = (&r - mu) * &ln.gamma / (ln.sigma_hat.powi(2) + ln.eps).sqrt() + &ln.beta;
        let oracle = w_q.dot(&linear) + &b_q;
        worst_fixed = worst_fixed.max((&fixed.total() - &oracle).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    check(
        worst_bilinear <= 1e-6 && worst_exact <= 1e-5 && worst_fixed <= 1e-5,
        format!("bilinearity {worst_bilinear:.2e}, additivity exact scale {worst_exact:.2e}, fixed scale {worst_fixed:.2e}"),
    )
}

fn main() {
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("mse_dictionary_matches_pseudoinverse", Box::new(mse_oracle)),
        ("mean_dictionary_null_convergence", Box::new(null_convergence)),
        ("independent_attribute_features_collapse", Box::new(independence_lemma)),
        ("sae_gradient_check", Box::new(gradient_check)),
        ("greedy_edit_vs_exhaustive", Box::new(greedy_vs_oracle)),
        ("feature_weight_identity", Box::new(weight_identity)),
        ("f1_fixed_points", Box::new(f1_fixed_points)),
        ("supervised_factorial_end_to_end", Box::new(factorial_end_to_end)),
        ("mech_bilinearity_and_additivity", Box::new(mech_identities)),
        ("oversplit_reduced_preset", Box::new(|| oversplit(MixtureConfig::reduced(), Duration::from_secs(180)))),
        ("oversplit_full_preset", Box::new(|| oversplit(MixtureConfig::full(), Duration::from_secs(30 * 60)))),
        ("two_feature_recovery", Box::new(two_feature_recovery)),
        ("surgical_reduction_monotone", Box::new(surgical_monotonicity)),
        ("occlusion_reduced_grid", Box::new(occlusion)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(r) => r,
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
