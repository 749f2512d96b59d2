//! Acceptance suite. Each test checks one criterion and writes a single
//! `criterion N: PASS|FAIL` line straight to stderr, bypassing capture.

#[path = "../../core/tests/support/stub.rs"]
mod stub;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use camab_core::bandit::{run_with_state, ArmPosterior, CtsConfig};
use camab_core::baselines::{
    avg_log_likelihood, exact_shapley, kernel_shap_values, lasso_coordinate_descent, LassoProblem,
};
use camab_core::eval::{
    compare_methods, planted_instances, recovery_rows, run_grid, CellStatus, CompareSpec,
    ComparisonReport, PlantedSpec,
};
use camab_core::oracle::{session, RemoteConfig, RemoteOracle, SyntheticModel, SyntheticOracle};
use camab_core::{Error, Instance, LikelihoodOracle, Method, RewardContext, SubsetMask};

fn report(n: u32, title: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n}: {verdict} - {title} ({detail})"
    );
    assert!(passed, "criterion {n} failed: {title} ({detail})");
}

fn random_instance(rng: &mut ChaCha8Rng, id: &str, n: usize, t: usize) -> Instance {
    loop {
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
        let offsets: Vec<f64> = (0..t).map(|_| rng.random_range(-4.0..1.0)).collect();
        let inst = Instance::new(
            id,
            "q",
            (0..n).map(|j| format!("segment {j}")).collect(),
            (0..t).map(|k| format!("tok{k}")).collect(),
        )
        .unwrap()
        .with_synthetic(SyntheticModel::new(offsets, weights))
        .unwrap();
        if RewardContext::prepare(&inst, &SyntheticOracle).is_ok() {
            return inst;
        }
    }
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> SubsetMask {
    SubsetMask::from_bools(&(0..n).map(|_| rng.random_bool(0.5)).collect::<Vec<_>>())
}

#[test]
fn criterion_1_reward_axioms() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut anchors_exact = true;
    let mut in_range = true;
    let mut evaluated = 0usize;
    for i in 0..200 {
        let n = rng.random_range(1..=16);
        let t = rng.random_range(1..=6);
        let inst = random_instance(&mut rng, &format!("r{i}"), n, t);
        let ctx = RewardContext::prepare(&inst, &SyntheticOracle).unwrap();
        anchors_exact &= ctx
            .reward(&inst, &inst.full_mask(), &SyntheticOracle)
            .unwrap()
            == 1.0;
        anchors_exact &= ctx
            .reward(&inst, &inst.empty_mask(), &SyntheticOracle)
            .unwrap()
            == 0.0;
        // the anchors also have to come out exact when scored as ordinary masks
        anchors_exact &= ctx.value_of(ctx.full_likelihoods()) == 1.0;
        anchors_exact &= ctx.value_of(ctx.empty_likelihoods()) == 0.0;
        for _ in 0..1000 {
            let m = random_mask(&mut rng, n);
            let v = ctx.reward(&inst, &m, &SyntheticOracle).unwrap();
            in_range &= (0.0..=1.0).contains(&v);
            evaluated += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        "reward axioms",
        anchors_exact && in_range && elapsed < Duration::from_secs(5),
        &format!("200 instances, {evaluated} masks, anchors exact: {anchors_exact}, in [0,1]: {in_range}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_conjugate_update() {
    let worked = ArmPosterior {
        mean: 0.125,
        variance: 1.0,
    }
    .observe(1.0, 1.0);
    let worked_ok = worked.mean == 0.5625 && worked.variance == 0.5;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut means_match = true;
    for i in 0..40 {
        let n = rng.random_range(2..=14);
        let inst = random_instance(&mut rng, &format!("c{i}"), n, 2);
        let config = CtsConfig {
            max_rounds: rng.random_range(1..=80),
            top_p: rng.random_range(0.05..0.95),
            noise_variance: rng.random_range(0.2..3.0),
            prior_variance: rng.random_range(0.2..3.0),
            seed: i,
        };
        let (result, state) = run_with_state(&inst, &SyntheticOracle, &config).unwrap();
        let mut counts = vec![0usize; n];
        let mut replayed = vec![
            ArmPosterior {
                mean: 1.0 / n as f64,
                variance: config.prior_variance,
            };
            n
        ];
        for (mask, v) in state.history() {
            for j in mask.indices() {
                counts[j] += 1;
                replayed[j] = replayed[j].observe(*v, config.noise_variance);
            }
        }
        for j in 0..n {
            let closed =
                1.0 / (1.0 / config.prior_variance + counts[j] as f64 / config.noise_variance);
            worst = worst.max((state.posteriors()[j].variance - closed).abs());
            worst = worst.max((replayed[j].variance - closed).abs());
            means_match &= replayed[j].mean == result.scores[j];
        }
    }
    report(
        2,
        "conjugate update",
        worked_ok && worst <= 1e-12 && means_match,
        &format!(
            "worked example ({}, {}), max variance error {worst:e} over 40 histories",
            worked.mean, worked.variance
        ),
    );
}

#[test]
fn criterion_3_planted_recovery() {
    let start = Instant::now();
    let planted = planted_instances(&PlantedSpec::default(), 100, 0).unwrap();
    let instances: Vec<Instance> = planted.iter().map(|p| p.instance.clone()).collect();
    let spec = CompareSpec::new("synthetic", vec![Method::Cts], vec![60], vec![3]);
    let outcomes = run_grid(&instances, &spec, &SyntheticOracle, None).unwrap();
    let row = recovery_rows("synthetic", &outcomes, &planted, &[Method::Cts], &[60]).remove(0);
    let elapsed = start.elapsed();
    let rate = row.mean.unwrap();
    report(
        3,
        "planted-segment recovery",
        row.n == 100 && rate >= 0.95 && elapsed < Duration::from_secs(10),
        &format!(
            "N=12, 3 planted at 2.0, p=0.2, T=60, 100 seeds: recovery {rate:.2}, {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_4_shapley_exactness() {
    let mut worst_gap = 0.0f64;
    let mut worst_eff = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [4usize, 6, 8] {
        for rep in 0..3 {
            let inst = random_instance(&mut rng, &format!("s{n}-{rep}"), n, 3);
            let f = |m: &SubsetMask| avg_log_likelihood(&inst, &SyntheticOracle, m);
            let exact = exact_shapley(n, |m| f(m).unwrap()).unwrap();
            let kernel = kernel_shap_values(n, f, (1 << n) - 2, &mut rng).unwrap();
            for (a, b) in exact.iter().zip(&kernel) {
                worst_gap = worst_gap.max((a - b).abs());
            }
            let total = f(&inst.full_mask()).unwrap() - f(&inst.empty_mask()).unwrap();
            worst_eff = worst_eff.max((exact.iter().sum::<f64>() - total).abs());
        }
    }
    report(
        4,
        "Shapley exactness",
        worst_gap <= 1e-6 && worst_eff <= 1e-9,
        &format!(
            "N in {{4,6,8}}: max |kernel - exact| {worst_gap:e}, efficiency error {worst_eff:e}"
        ),
    );
}

/// Least squares with intercept by Gaussian elimination on the normal equations.
fn least_squares(design: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = design[0].len() + 1;
    let row = |r: &Vec<f64>| {
        std::iter::once(1.0)
            .chain(r.iter().copied())
            .collect::<Vec<f64>>()
    };
    let mut a = vec![vec![0.0; p + 1]; p];
    for (r, &yi) in design.iter().zip(y) {
        let x = row(r);
        for i in 0..p {
            for j in 0..p {
                a[i][j] += x[i] * x[j];
            }
            a[i][p] += x[i] * yi;
        }
    }
    for c in 0..p {
        let piv = (c..p)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, piv);
        let pivot = a[c].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != c {
                let f = row[c] / pivot[c];
                for (v, pv) in row.iter_mut().zip(&pivot).skip(c) {
                    *v -= f * pv;
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

#[test]
fn criterion_5_lasso_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut kkt_worst = 0.0f64;
    let mut ols_worst = 0.0f64;
    let mut zero_ok = true;
    for _ in 0..50 {
        let n = rng.random_range(30..80);
        let p = rng.random_range(2..9);
        let design: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let truth: Vec<f64> = (0..p)
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(-2.0..2.0)
                } else {
                    0.0
                }
            })
            .collect();
        let y: Vec<f64> = design
            .iter()
            .map(|r| {
                0.3 + r.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>()
                    + rng.random_range(-0.3..0.3)
            })
            .collect();

        let mut problem = LassoProblem::new(&design, y.clone(), 0.0).unwrap();
        let lmax = problem.lambda_max();
        problem.lambda = lmax * rng.random_range(0.01..0.8);
        let fit = lasso_coordinate_descent(&problem, 1e-8, 10_000).unwrap();
        let resid = problem.residual(&fit);
        for j in 0..p {
            let g = design
                .iter()
                .zip(&resid)
                .map(|(r, e)| r[j] * e)
                .sum::<f64>()
                / n as f64;
            let b = fit.coefficients[j];
            let violation = if b == 0.0 {
                (g.abs() - problem.lambda).max(0.0)
            } else {
                (g - problem.lambda * b.signum()).abs()
            };
            kkt_worst = kkt_worst.max(violation);
        }

        problem.lambda = 0.0;
        let fit = lasso_coordinate_descent(&problem, 1e-12, 100_000).unwrap();
        let ols = least_squares(&design, &y);
        ols_worst = ols_worst.max((fit.intercept - ols[0]).abs());
        for j in 0..p {
            ols_worst = ols_worst.max((fit.coefficients[j] - ols[j + 1]).abs());
        }

        for scale in [1.0, 1.5] {
            problem.lambda = lmax * scale;
            let fit = lasso_coordinate_descent(&problem, 1e-8, 10_000).unwrap();
            zero_ok &= fit.coefficients.iter().all(|&b| b == 0.0);
        }
    }
    report(
        5,
        "LASSO correctness",
        kkt_worst <= 1e-6 && ols_worst <= 1e-6 && zero_ok,
        &format!("50 problems: KKT violation {kkt_worst:e}, |lambda=0 - OLS| {ols_worst:e}, zero at lambda_max: {zero_ok}"),
    );
}

#[test]
fn criterion_6_budget_trend() {
    let start = Instant::now();
    let planted = planted_instances(&PlantedSpec::default(), 50, 0).unwrap();
    let instances: Vec<Instance> = planted.iter().map(|p| p.instance.clone()).collect();
    let mut spec = CompareSpec::new(
        "synthetic",
        vec![Method::Cts, Method::ContextCite],
        vec![40, 60],
        vec![3],
    );
    spec.replicates = 5;
    let outcomes = run_grid(&instances, &spec, &SyntheticOracle, None).unwrap();
    let report_ = ComparisonReport::from_outcomes("synthetic", &outcomes, &[3]);
    let elapsed = start.elapsed();
    let cts = report_.row(Method::Cts, 40, Some(3), "top_k_drop").unwrap();
    let cc = report_
        .row(Method::ContextCite, 60, Some(3), "top_k_drop")
        .unwrap();
    let rec = recovery_rows(
        "synthetic",
        &outcomes,
        &planted,
        &spec.methods,
        &spec.budgets,
    );
    let rate = |m: Method, s: usize| {
        rec.iter()
            .find(|r| r.method == m && r.budget == s)
            .unwrap()
            .mean
            .unwrap()
    };
    let (a, b) = (cts.mean.unwrap(), cc.mean.unwrap());
    report(
        6,
        "budget trend, CTS@40 >= ContextCite@60 mean top-3 drop",
        cts.n == 250 && cc.n == 250 && a >= b && elapsed < Duration::from_secs(60),
        &format!(
            "50 instances x 5 seeds: cts@40 {a:.4} (recovery {:.3}) vs contextcite@60 {b:.4} (recovery {:.3}), {elapsed:.2?}",
            rate(Method::Cts, 40),
            rate(Method::ContextCite, 60)
        ),
    );
}

#[test]
fn criterion_7_budget_ledger() {
    let planted = planted_instances(&PlantedSpec::default(), 12, 7).unwrap();
    let mut instances: Vec<Instance> = planted.iter().map(|p| p.instance.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    instances.extend((0..8).map(|i| random_instance(&mut rng, &format!("x{i}"), 3 + i, 2)));
    let spec = CompareSpec::new("ledger", Method::ALL.to_vec(), vec![20, 40, 60], vec![1, 3]);
    let outcomes = run_grid(&instances, &spec, &SyntheticOracle, None).unwrap();
    let mut checked = 0;
    let mut worst: BTreeMap<(String, usize), u64> = BTreeMap::new();
    let mut within = true;
    for cell in outcomes.iter().flat_map(|o| &o.cells) {
        if let CellStatus::Ran { ledger, result, .. } = &cell.status {
            let calls = ledger.unwrap().oracle_calls;
            within &= calls <= cell.budget as u64 + 2 && result.oracle_calls == calls;
            let w = worst
                .entry((cell.method.to_string(), cell.budget))
                .or_default();
            *w = (*w).max(calls);
            checked += 1;
        }
    }
    let rep = compare_methods(&instances, &spec, &SyntheticOracle, None).unwrap();
    let documented =
        rep.to_json().contains("\"anchor_convention\"") && rep.anchor_convention.contains("anchor");
    let totals_ok = rep
        .ledgers
        .iter()
        .all(|l| l.max_oracle_calls <= l.limit_per_run);
    let summary: Vec<String> = worst
        .iter()
        .map(|((m, s), c)| format!("{m}@{s}<={c}"))
        .collect();
    report(
        7,
        "budget ledger",
        within && documented && totals_ok && checked > 0,
        &format!("{checked} runs, max calls {}", summary.join(" ")),
    );
}

fn camab(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_camab"))
        .args(args)
        .output()
        .expect("run camab")
        .status
        .code()
        .unwrap_or(-1)
}

fn corpus(dir: &Path) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut lines = String::new();
    for i in 0..10 {
        lines
            .push_str(&random_instance(&mut rng, &format!("d{i:02}"), 4 + i % 5, 3).to_json_line());
        lines.push('\n');
    }
    lines.push_str(r#"{"id":"text","question":"Where is the key?","context":"The key is under the mat. The door is red. Nobody is home.","response":"under the mat"}"#);
    lines.push('\n');
    let path = dir.join("corpus.jsonl");
    std::fs::write(&path, lines).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path());
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    let methods = "cts,shap,contextcite,loo";
    let mut codes = Vec::new();

    for out in ["s1.jsonl", "s2.jsonl"] {
        codes.push(camab(&[
            "attribute",
            "--input",
            &input,
            "--method",
            methods,
            "--seed",
            "7",
            "--output",
            &p(out),
        ]));
    }
    for out in ["e1.csv", "e2.csv"] {
        codes.push(camab(&[
            "evaluate",
            "--input",
            &input,
            "--attributions",
            &p("s1.jsonl"),
            "--k",
            "1,3,5",
            "--format",
            "csv",
            "--output",
            &p(out),
        ]));
    }
    codes.push(camab(&[
        "attribute",
        "--input",
        &input,
        "--method",
        methods,
        "--seed",
        "7",
        "--budget",
        "40",
        "--record",
        &p("store.jsonl"),
        "--output",
        &p("live.jsonl"),
    ]));
    let replay = format!("replay:{}", p("store.jsonl"));
    for out in ["r1.jsonl", "r2.jsonl"] {
        codes.push(camab(&[
            "attribute",
            "--input",
            &input,
            "--method",
            methods,
            "--seed",
            "7",
            "--budget",
            "40",
            "--oracle",
            &replay,
            "--output",
            &p(out),
        ]));
    }
    for out in ["b1.json", "b2.json"] {
        codes.push(camab(&[
            "bench-synthetic",
            "--runs",
            "8",
            "--budgets",
            "20,40",
            "--seed",
            "3",
            "--format",
            "json",
            "--output",
            &p(out),
        ]));
    }
    let synthetic_same = read("s1.jsonl") == read("s2.jsonl") && read("e1.csv") == read("e2.csv");
    let replay_same =
        read("r1.jsonl") == read("r2.jsonl") && read("r1.jsonl") == read("live.jsonl");
    let bench_same = read("b1.json") == read("b2.json");
    let codes_ok = codes.iter().all(|&c| c == 0 || c == 2);
    let non_empty = !read("s1.jsonl").is_empty() && !read("r1.jsonl").is_empty();
    report(
        8,
        "determinism",
        synthetic_same && replay_same && bench_same && codes_ok && non_empty,
        &format!(
            "synthetic identical: {synthetic_same}, replay identical: {replay_same}, bench identical: {bench_same}, exit codes {codes:?}"
        ),
    );
}

#[test]
fn criterion_9_remote_contract() {
    let inst = Instance::new(
        "remote",
        "Who signed the memo?",
        vec![
            "Ann signed the memo.".into(),
            "Bob filed it.".into(),
            "It rained.".into(),
        ],
        vec![
            "Ann".into(),
            "signed".into(),
            "it".into(),
            "yesterday.".into(),
        ],
    )
    .unwrap();
    let config = |s: &stub::Stub| {
        let mut c = RemoteConfig::new(&s.base_url, "stub");
        c.initial_backoff = Duration::from_millis(10);
        c
    };

    let good = stub::Stub::start(stub::echo_handler("unused"));
    let oracle = RemoteOracle::new(config(&good));
    let mut worst = 0.0f64;
    let masks = [
        inst.full_mask(),
        inst.empty_mask(),
        SubsetMask::from_indices(3, [1]).unwrap(),
    ];
    for m in &masks {
        let l = oracle.score(&inst, m).unwrap();
        for (got, tok) in l.values().iter().zip(inst.response_tokens()) {
            worst = worst.max((got - stub::stub_logprob(&format!(" {tok}")).exp()).abs());
        }
    }
    // through a metered session as well
    let metered = session(&oracle, Some(4));
    let l = metered.score(&inst, &inst.full_mask()).unwrap();
    let via_session = l.values().len() == 4;

    let bad = stub::Stub::start(stub::split_last_handler());
    let mismatch = RemoteOracle::new(config(&bad)).score(&inst, &inst.full_mask());
    let alignment = matches!(mismatch, Err(Error::Alignment { .. }));
    report(
        9,
        "remote-oracle contract",
        worst <= 1e-12 && alignment && via_session,
        &format!("max |l - exp(logprob)| {worst:e} over {} masks, mismatch raises alignment error: {alignment}", masks.len()),
    );
}
