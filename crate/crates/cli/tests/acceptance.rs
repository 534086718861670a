//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use densmat::datasets::gen_spirals_2d;
use densmat::density_ops::{born_probability_dense, DenseDensityMatrix};
use densmat::dmkdc::{DmkdcModel, DmkdcObjective};
use densmat::dmkde::{categorical_density_matrix, normalizing_constant, DmkdeConfig, DmkdeModel, DmkdeObjective};
use densmat::experiments::{accuracy, convergence_study, random_search, ConvergenceConfig, Hyperparams, SearchConfig, Strategy};
use densmat::kde::{crossover, timing_sweep, TimedMethod, TimingConfig};
use densmat::model_io::ModelKind;
use densmat::qmc::{InputMap, OutputMap, QmcModel, QmcObjective};
use densmat::qmr::{expectation_and_variance, mae, nearest_label, ordinal_bin, QmrConfig, QmrModel, QmrObjective};
use densmat::seed;
use densmat::training::{check_objective, rolling_median, Objective, OptimizerConfig};
use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gaussian(rows: usize, cols: usize, seed_value: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed_value);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

fn born_rule() -> Outcome {
    let h = 0.5;
    let rho1 = DenseDensityMatrix::new(array![[h, -h], [-h, h]]).map_err(err)?;
    let rho2 = DenseDensityMatrix::new(array![[h, 0.0], [0.0, h]]).map_err(err)?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let phi = array![s, -s];
    let p1 = born_probability_dense(&rho1, phi.view()).map_err(err)?;
    let p2 = born_probability_dense(&rho2, phi.view()).map_err(err)?;
    ensure((p1 - 1.0).abs() < 1e-12, || format!("P(phi|rho1) = {p1}"))?;
    ensure((p2 - 0.5).abs() < 1e-12, || format!("P(phi|rho2) = {p2}"))?;
    Ok(format!("P1={p1} P2={p2}"))
}

fn oracle_equivalence() -> Outcome {
    let (n, d, dim, gamma) = (200, 2, 64, 1.0);
    let x = gaussian(n, d, 11);
    let q = gaussian(100, d, 12);
    let cfg = DmkdeConfig {
        gamma,
        rff_dim: dim,
        rank: dim,
        seed: 13,
    };
    let model = DmkdeModel::fit_estimation_raw(x.view(), &cfg).map_err(err)?;
    let got = model.density_batch(q.view()).map_err(err)?;
    let zx = model.rff().apply_batch(x.view()).map_err(err)?;
    let zq = model.rff().apply_batch(q.view()).map_err(err)?;
    let m = normalizing_constant(gamma, d).map_err(err)?;
    let mut worst = 0.0f64;
    for (i, zqi) in zq.rows().into_iter().enumerate() {
        let direct: f64 = zx.rows().into_iter().map(|zi| zi.dot(&zqi).powi(2)).sum::<f64>() / (n as f64 * m);
        worst = worst.max((direct - got[i]).abs());
    }
    ensure(worst < 1e-10, || format!("max |difference| {worst:e}"))?;
    Ok(format!("max |difference| {worst:.2e}"))
}

fn categorical_reduction() -> Outcome {
    let mut worst = 0.0f64;
    for t in 0..10u64 {
        let mut rng = seed::rng(100 + t);
        let k = rng.random_range(2..8);
        let n = rng.random_range(20..200);
        let samples: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let rho = categorical_density_matrix(&samples, k).map_err(err)?;
        let e = rho.entries();
        for i in 0..k {
            for j in 0..k {
                let expected = if i == j {
                    samples.iter().filter(|&&s| s == i).count() as f64 / n as f64
                } else {
                    0.0
                };
                worst = worst.max((e[[i, j]] - expected).abs());
            }
        }
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("10 datasets, max deviation {worst:.1e}"))
}

fn convergence() -> Outcome {
    let cfg = ConvergenceConfig::default();
    let rows = convergence_study(&cfg).map_err(err)?;
    let medians: Vec<f64> = rows.iter().map(|r| r.vs_kde.median).collect();
    let strictly_decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let at_1024 = rows.iter().find(|r| r.rff_dim == 1024).ok_or("no D=1024 row")?;
    let ratio = at_1024.vs_true.median / at_1024.kde_vs_true.median;
    let detail = format!(
        "median RMSE vs KDE {:?}; at D=1024 median RMSE vs truth {:.5} = {:.2}x KDE's {:.5} (means {:.5} and {:.5})",
        medians.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>(),
        at_1024.vs_true.median,
        ratio,
        at_1024.kde_vs_true.median,
        at_1024.vs_true.mean,
        at_1024.kde_vs_true.mean
    );
    ensure(strictly_decreasing, || format!("not strictly decreasing: {detail}"))?;
    ensure(ratio <= 2.0, || format!("ratio above 2: {detail}"))?;
    Ok(detail)
}

fn timing_scaling() -> Outcome {
    let rows = timing_sweep(&TimingConfig::default()).map_err(err)?;
    let t = |m: TimedMethod, n: usize| {
        rows.iter()
            .find(|r| r.method == m && r.n == n)
            .map(|r| r.median_seconds)
            .ok_or(format!("missing {m} at N={n}"))
    };
    let kde_growth = t(TimedMethod::Kde, 100_000)? / t(TimedMethod::Kde, 10_000)?;
    let dmkde_growth = t(TimedMethod::Dmkde, 100_000)? / t(TimedMethod::Dmkde, 10_000)?;
    let cross = crossover(&rows);
    let detail = format!("KDE grows {kde_growth:.2}x, DMKDE grows {dmkde_growth:.2}x, crossover at N={cross:?}");
    ensure(kde_growth >= 5.0 && dmkde_growth <= 1.5 && cross.is_some(), || detail.clone())?;
    Ok(detail)
}

fn perturbed(params: &[f64]) -> Vec<f64> {
    params
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.03 * ((i as f64) * 0.77).sin())
        .collect()
}

fn worst_gradient<O: Objective>(name: &str, obj: &O, params: &[f64]) -> Result<f64, String> {
    let batch: Vec<usize> = (0..obj.num_samples()).collect();
    let reports = check_objective(obj, &perturbed(params), &batch, 1e-5).map_err(err)?;
    let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    if let Some(r) = reports.iter().find(|r| r.flagged()) {
        return Err(format!("{name}: {} analytic {} numeric {}", r.parameter, r.analytic, r.numeric));
    }
    Ok(worst)
}

fn gradient_checks() -> Outcome {
    let x = gaussian(16, 2, 21);
    let dmkde = DmkdeModel::fit_estimation(
        x.view(),
        &DmkdeConfig {
            gamma: 0.5,
            rff_dim: 8,
            rank: 3,
            seed: 1,
        },
    )
    .map_err(err)?;
    let obj = DmkdeObjective::new(&dmkde, x.view()).map_err(err)?;
    let g1 = worst_gradient("DMKDE NLL", &obj, &DmkdeObjective::params_of(&dmkde))?;

    let x = gaussian(12, 2, 22);
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let dmkdc = DmkdcModel::fit_estimation(
        x.view(),
        &labels,
        3,
        &DmkdeConfig {
            gamma: 0.5,
            rff_dim: 8,
            rank: 2,
            seed: 2,
        },
    )
    .map_err(err)?;
    let obj = DmkdcObjective::new(&dmkdc, x.view(), &labels).map_err(err)?;
    let g2 = worst_gradient("DMKDC cross-entropy", &obj, &DmkdcObjective::params_of(&dmkdc))?;

    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let input = InputMap::rff(2, 4, 0.5, 3).map_err(err)?;
    let qmc = QmcModel::fit_estimation(x.view(), &y, input, OutputMap::OneHot { classes: 3 }, Some(2)).map_err(err)?;
    let obj = QmcObjective::new(&qmc, x.view(), &y).map_err(err)?;
    let g3 = worst_gradient("QMC log-loss", &obj, &QmcObjective::params_of(&qmc))?;

    let targets: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let qmr = QmrModel::fit_estimation(
        x.view(),
        &targets,
        &QmrConfig {
            gamma: 0.5,
            rff_dim: 6,
            landmarks: 4,
            beta: 5.0,
            rank: Some(2),
            alpha_tradeoff: 0.3,
            seed: 4,
            scaler: None,
        },
    )
    .map_err(err)?;
    let scaled: Vec<f64> = targets.iter().map(|&t| qmr.scaler().scale(t)).collect();
    let obj = QmrObjective::new(&qmr, x.view(), &scaled).map_err(err)?;
    let g4 = worst_gradient("QMR loss", &obj, &obj.params_of(&qmr))?;
    Ok(format!(
        "worst relative errors: DMKDE {g1:.1e}, DMKDC {g2:.1e}, QMC {g3:.1e}, QMR (incl. RFF and beta) {g4:.1e}"
    ))
}

fn labels_of(ds: &densmat::datasets::Dataset) -> Result<Vec<usize>, String> {
    ds.class_labels().map_err(err)
}

fn decreasing(losses: &[f64]) -> bool {
    let smooth = rolling_median(losses, 5);
    smooth.last() < smooth.first()
}

fn spirals_dmkdc() -> Outcome {
    let train = gen_spirals_2d(1000, 31).map_err(err)?;
    let test = gen_spirals_2d(1000, 32).map_err(err)?;
    let (ytr, yte) = (labels_of(&train)?, labels_of(&test)?);
    let cfg = SearchConfig {
        kind: ModelKind::Dmkdc,
        strategy: Strategy::Estimate,
        seed: 33,
        base: Hyperparams {
            rff_dim: 256,
            classes: Some(3),
            ..Hyperparams::default()
        },
        ..SearchConfig::default()
    };
    let found = random_search(&cfg, train.features.view(), train.labels.as_deref()).map_err(err)?;
    let hp = found.best.hyperparams;
    let dcfg = DmkdeConfig {
        gamma: hp.gamma,
        rff_dim: hp.rff_dim,
        rank: hp.rank,
        seed: hp.seed,
    };
    let est = DmkdcModel::fit_estimation(train.features.view(), &ytr, 3, &dcfg).map_err(err)?;
    let opt = OptimizerConfig {
        learning_rate: hp.learning_rate,
        epochs: 20,
        batch_size: 32,
        seed: 34,
        ..OptimizerConfig::default()
    };
    let (sgd, report) = est.clone().train_sgd(train.features.view(), &ytr, &opt).map_err(err)?;
    let a_est = accuracy(&est.classify_batch(test.features.view()).map_err(err)?, &yte).map_err(err)?;
    let a_sgd = accuracy(&sgd.classify_batch(test.features.view()).map_err(err)?, &yte).map_err(err)?;
    let detail = format!(
        "searched gamma={:.3} r={} lr={:.2e}; estimation {a_est:.3}, SGD {a_sgd:.3}; SGD loss decreasing: {}",
        hp.gamma,
        hp.rank,
        hp.learning_rate,
        decreasing(&report.losses())
    );
    ensure(a_est >= 0.85 && a_sgd >= a_est, || detail.clone())?;
    Ok(detail)
}

fn qmc_matches_dmkdc() -> Outcome {
    let train = gen_spirals_2d(150, 41).map_err(err)?;
    let labels = labels_of(&train)?;
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let (gamma, dim, seed_value) = (4.0, 32, 42);
    let dmkdc = DmkdcModel::fit_estimation(
        train.features.view(),
        &labels,
        3,
        &DmkdeConfig {
            gamma,
            rff_dim: dim,
            rank: dim,
            seed: seed_value,
        },
    )
    .map_err(err)?;
    let input = InputMap::rff(2, dim, gamma, seed_value).map_err(err)?;
    let qmc = QmcModel::fit_estimation(train.features.view(), &y, input, OutputMap::OneHot { classes: 3 }, Some(3 * dim))
        .map_err(err)?;
    let queries = gaussian(50, 2, 43);
    let a = dmkdc.posterior_batch(queries.view()).map_err(err)?;
    let b = qmc.predict_batch(queries.view()).map_err(err)?;
    let worst = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(worst < 1e-8, || format!("max |difference| {worst:e}"))?;
    Ok(format!("50 queries, max |difference| {worst:.1e}"))
}

fn ordinal_task(n: usize, seed_value: u64) -> (Array2<f64>, Vec<f64>) {
    let mut rng = seed::rng(seed_value);
    let x = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0f64..1.0));
    let y = x
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt() + 0.05 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (x, y)
}

fn qmr_sanity() -> Outcome {
    let (x, y) = ordinal_task(2000, 51);
    let (labels, _) = ordinal_bin(&y, 5).map_err(err)?;
    let xtr = x.slice(ndarray::s![..1000, ..]).to_owned();
    let xte = x.slice(ndarray::s![1000.., ..]).to_owned();
    let ytr: Vec<f64> = labels[..1000].iter().map(|&l| l as f64).collect();
    let truth = &labels[1000..];
    let cfg = QmrConfig {
        gamma: 4.0,
        rff_dim: 64,
        landmarks: 5,
        beta: 8.0,
        rank: Some(32),
        alpha_tradeoff: 0.1,
        seed: 52,
        scaler: None,
    };
    let est = QmrModel::fit_estimation(xtr.view(), &ytr, &cfg).map_err(err)?;
    let opt = OptimizerConfig {
        epochs: 20,
        batch_size: 32,
        seed: 53,
        ..OptimizerConfig::default()
    };
    let (sgd, report) = est.clone().train_sgd(xtr.view(), &ytr, &opt).map_err(err)?;
    let score = |m: &QmrModel| -> Result<(f64, f64), String> {
        let preds = m.predict_batch(xte.view()).map_err(err)?;
        let worst_sum = preds
            .iter()
            .map(|p| (p.distribution.sum() - 1.0).abs())
            .fold(0.0, f64::max);
        let classes: Vec<usize> = preds.iter().map(|p| nearest_label(p.y_hat, 5)).collect();
        Ok((mae(&classes, truth).map_err(err)?, worst_sum))
    };
    let (mae_est, s1) = score(&est)?;
    let (mae_sgd, s2) = score(&sgd)?;
    let mae_mid = mae(&vec![3; truth.len()], truth).map_err(err)?;
    let lm = sgd.softmax_map().landmarks().to_owned();
    let (_, one_hot_var) = expectation_and_variance(Array1::from(vec![0.0, 0.0, 1.0, 0.0, 0.0]).view(), lm.view());
    let detail = format!(
        "MAE SGD {mae_sgd:.3}, estimation {mae_est:.3}, middle class {mae_mid:.3}; max |sum-1| {:.1e}; one-hot variance {one_hot_var}; SGD loss decreasing: {}",
        s1.max(s2),
        decreasing(&report.losses())
    );
    ensure(
        mae_sgd < mae_est && mae_sgd < mae_mid && s1.max(s2) < 1e-9 && one_hot_var == 0.0,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_densmat"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!("densmat {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn determinism() -> Outcome {
    let fits: &[(&str, &str, &str, &[&str])] = &[
        ("dmkde", "estimate", "mix.csv", &["--gamma", "8", "--rff-dim", "128", "--rank", "30"]),
        ("dmkde", "sgd", "mix.csv", &["--gamma", "8", "--rff-dim", "64", "--rank", "16", "--epochs", "2"]),
        ("dmkdc", "estimate", "spi.csv", &["--gamma", "10", "--rff-dim", "64", "--rank", "16"]),
        ("dmkdc", "sgd", "spi.csv", &["--gamma", "10", "--rff-dim", "64", "--rank", "16", "--epochs", "2"]),
        ("qmc", "estimate", "spi.csv", &["--gamma", "10", "--rff-dim", "32", "--rank", "32"]),
        ("qmc", "sgd", "spi.csv", &["--gamma", "10", "--rff-dim", "32", "--rank", "32", "--epochs", "2"]),
        ("qmr", "estimate", "spi.csv", &["--gamma", "10", "--rff-dim", "32", "--rank", "16"]),
        ("qmr", "sgd", "spi.csv", &["--gamma", "10", "--rff-dim", "32", "--rank", "16", "--epochs", "2"]),
    ];
    let mut outputs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let p = dir.path();
        run_cli(p, &["synth", "--kind", "mixture1d", "--n", "400", "--seed", "7", "--out", "mix.csv"])?;
        run_cli(p, &["synth", "--kind", "spirals", "--n", "300", "--seed", "7", "--out", "spi.csv"])?;
        let mut files = vec!["mix.csv".to_string(), "spi.csv".to_string()];
        for (model, strategy, data, extra) in fits {
            let out = format!("{model}-{strategy}.json");
            let mut args = vec!["fit", "--model", model, "--strategy", strategy, "--data", data, "--seed", "5", "--out", &out];
            args.extend_from_slice(extra);
            run_cli(p, &args)?;
            files.push(out.clone());
            let (task, eval_data): (&str, &str) = match *model {
                "dmkde" => ("loglik", "mix.csv"),
                "qmr" => ("mae", "spi.csv"),
                _ => ("accuracy", "spi.csv"),
            };
            let metrics = format!("eval-{model}-{strategy}.json");
            run_cli(p, &["eval", "--task", task, "--model", &out, "--data", eval_data, "--out", &metrics])?;
            files.push(metrics);
        }
        run_cli(p, &["eval", "--task", "density-rmse", "--model", "dmkde-estimate.json", "--out", "rmse.json"])?;
        files.push("rmse.json".into());
        run_cli(
            p,
            &[
                "search", "--model", "dmkdc", "--data", "spi.csv", "--rff-dim", "32", "--n-configs", "3", "--folds", "3",
                "--seed", "9", "--out", "search.json",
            ],
        )?;
        files.push("search.json".into());
        let mut run = Vec::new();
        for f in files {
            let bytes = std::fs::read(p.join(&f)).map_err(err)?;
            run.push((f, bytes));
        }
        outputs.push(run);
    }
    let differing: Vec<&str> = outputs[0]
        .iter()
        .zip(&outputs[1])
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    ensure(differing.is_empty(), || format!("outputs differ: {differing:?}"))?;
    Ok(format!("{} result files byte-identical across two runs", outputs[0].len()))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "Born rule worked example",
            limit: Some(Duration::from_secs(1)),
            run: born_rule,
        },
        Criterion {
            id: 2,
            name: "raw-embedding DMKDE equals the double-sum oracle",
            limit: Some(Duration::from_secs(10)),
            run: oracle_equivalence,
        },
        Criterion {
            id: 3,
            name: "categorical reduction",
            limit: None,
            run: categorical_reduction,
        },
        Criterion {
            id: 4,
            name: "convergence in the RFF dimension",
            limit: Some(Duration::from_secs(600)),
            run: convergence,
        },
        Criterion {
            id: 5,
            name: "prediction-time scaling",
            limit: None,
            run: timing_scaling,
        },
        Criterion {
            id: 6,
            name: "finite-difference gradient checks",
            limit: Some(Duration::from_secs(60)),
            run: gradient_checks,
        },
        Criterion {
            id: 7,
            name: "DMKDC on three spirals",
            limit: None,
            run: spirals_dmkdc,
        },
        Criterion {
            id: 8,
            name: "QMC reduces to DMKDC",
            limit: None,
            run: qmc_matches_dmkdc,
        },
        Criterion {
            id: 9,
            name: "QMR on the 5-bin ordinal task",
            limit: None,
            run: qmr_sanity,
        },
        Criterion {
            id: 10,
            name: "CLI determinism",
            limit: None,
            run: determinism,
        },
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(d), Some(limit)) if elapsed > limit => Err(format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {} [{elapsed:.1?}]: {detail}", c.id, c.name),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {} [{elapsed:.1?}]: {detail}", c.id, c.name);
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
