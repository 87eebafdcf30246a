//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --release --test acceptance -- 1 2 3`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use knockoff_forge::autoregressive::AutoregressiveModel;
use knockoff_forge::benchmarks::{
    gen_gaussian, kde_modes, run_experiment, swap_probe_auc, BenchmarkSpec, ExperimentResult, KnockoffMethod,
    MethodConfig,
};
use knockoff_forge::data::{split_rows, write_csv, DataMatrix};
use knockoff_forge::filter::{knockoff_threshold, KnockoffStatistics};
use knockoff_forge::gmm::GaussianMixture1D;
use knockoff_forge::mdn::ConditionalDensityNetwork;
use knockoff_forge::seeding::child_rng;
use knockoff_forge::swap::{swap_log_prob, SwapIndicator};
use knockoff_forge::trainer::{conditional_entropy, ddlk_objective_batch, fit_ddlk, KnockoffNoise, TrainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

fn perturbed_net(rng: &mut ChaCha8Rng, input_dim: usize, hidden: usize, k: usize) -> ConditionalDensityNetwork {
    let mut net = ConditionalDensityNetwork::init_with_hidden(input_dim, hidden, k, (-2.0, 2.0), rng).unwrap();
    for p in net.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    net
}

fn perturbed_model(rng: &mut ChaCha8Rng, base_dim: usize, d: usize, hidden: usize, k: usize) -> AutoregressiveModel {
    let nets = (0..d).map(|j| perturbed_net(rng, base_dim + j, hidden, k)).collect();
    AutoregressiveModel::from_parts(base_dim, nets, vec![(-2.0, 2.0); d]).unwrap()
}

fn random_mixture(rng: &mut ChaCha8Rng) -> GaussianMixture1D {
    let k = rng.random_range(1..5);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    GaussianMixture1D::new(
        raw.iter().map(|w| w / total).collect(),
        (0..k).map(|_| rng.random_range(-3.0..3.0)).collect(),
        (0..k).map(|_| rng.random_range(0.3..2.0)).collect(),
    )
    .unwrap()
}

fn with_param(g: &GaussianMixture1D, means: bool, i: usize, delta: f64) -> GaussianMixture1D {
    let mut m = g.means().to_vec();
    let mut s = g.stddevs().to_vec();
    if means {
        m[i] += delta;
    } else {
        s[i] += delta;
    }
    GaussianMixture1D::new(g.weights().to_vec(), m, s).unwrap()
}

/// Central differences against every analytic gradient: mixture partials,
/// network log-prob and pathwise gradients, the joint chain, and the full
/// knockoff objective under common random numbers.
fn gradient_fidelity() -> Outcome {
    let mut rng = child_rng(101, 0);
    let h = 1e-6;
    let n = 100;
    let mut logprob_worst: f64 = 0.0;
    let mut path_worst: f64 = 0.0;

    for _ in 0..n {
        let g = random_mixture(&mut rng);
        let z = rng.random_range(-3.0..3.0);
        let a = g.log_prob_partials(z);
        for i in 0..g.components() {
            for means in [true, false] {
                let fd = (with_param(&g, means, i, h).log_prob(z).unwrap()
                    - with_param(&g, means, i, -h).log_prob(z).unwrap())
                    / (2.0 * h);
                let an = if means { a.d_means[i] } else { a.d_stddevs[i] };
                logprob_worst = logprob_worst.max(rel_err(an, fd));
            }
        }
        let fd_z = (g.log_prob(z + h).unwrap() - g.log_prob(z - h).unwrap()) / (2.0 * h);
        logprob_worst = logprob_worst.max(rel_err(a.d_z, fd_z));

        let u = rng.random_range(0.05..0.95);
        let zu = g.quantile(u).unwrap();
        let p = g.path_gradients(zu);
        for i in 0..g.components() {
            for means in [true, false] {
                let fd = (with_param(&g, means, i, h).quantile(u).unwrap()
                    - with_param(&g, means, i, -h).quantile(u).unwrap())
                    / (2.0 * h);
                let an = if means { p.d_means[i] } else { p.d_stddevs[i] };
                path_worst = path_worst.max(rel_err(an, fd));
            }
        }
    }

    for _ in 0..n {
        let input_dim = rng.random_range(0..4);
        let k = rng.random_range(1..4);
        let mut net = perturbed_net(&mut rng, input_dim, 8, k);
        let cond: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let z = rng.random_range(-2.0..2.0);
        let (_, grad, d_cond) = net.logprob_backward(&cond, z).unwrap();
        let lp = |net: &ConditionalDensityNetwork, c: &[f64]| net.forward(c).unwrap().log_prob(z).unwrap();
        for i in 0..net.param_count() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let up = lp(&net, &cond);
            net.params_mut()[i] = orig - h;
            let down = lp(&net, &cond);
            net.params_mut()[i] = orig;
            logprob_worst = logprob_worst.max(rel_err(grad.0[i], (up - down) / (2.0 * h)));
        }
        for i in 0..input_dim {
            let mut c = cond.clone();
            c[i] += h;
            let up = lp(&net, &c);
            c[i] -= 2.0 * h;
            let down = lp(&net, &c);
            logprob_worst = logprob_worst.max(rel_err(d_cond[i], (up - down) / (2.0 * h)));
        }

        let u: f64 = rng.random_range(0.05..0.95);
        let (_, grad, d_cond) = net.sample_backward_with(&cond, |m| m.quantile(u).unwrap()).unwrap();
        let at = |net: &ConditionalDensityNetwork, c: &[f64]| net.forward(c).unwrap().quantile(u).unwrap();
        for i in 0..net.param_count() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let up = at(&net, &cond);
            net.params_mut()[i] = orig - h;
            let down = at(&net, &cond);
            net.params_mut()[i] = orig;
            path_worst = path_worst.max(rel_err(grad.0[i], (up - down) / (2.0 * h)));
        }
        for i in 0..input_dim {
            let mut c = cond.clone();
            c[i] += h;
            let up = at(&net, &c);
            c[i] -= 2.0 * h;
            let down = at(&net, &c);
            path_worst = path_worst.max(rel_err(d_cond[i], (up - down) / (2.0 * h)));
        }
    }

    for _ in 0..n {
        let d = rng.random_range(1..4);
        let mut model = perturbed_model(&mut rng, 0, d, 6, 2);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut grads: Vec<Vec<f64>> = model.conditionals().iter().map(|c| vec![0.0; c.param_count()]).collect();
        let (_, _, d_v) = model.log_prob_backward(&[], &v, 1.0, Some(&mut grads));
        for c in 0..d {
            for p in 0..grads[c].len() {
                let orig = model.conditionals()[c].params()[p];
                model.conditionals_mut()[c].params_mut()[p] = orig + h;
                let up = model.log_prob(&[], &v).unwrap();
                model.conditionals_mut()[c].params_mut()[p] = orig - h;
                let down = model.log_prob(&[], &v).unwrap();
                model.conditionals_mut()[c].params_mut()[p] = orig;
                logprob_worst = logprob_worst.max(rel_err(grads[c][p], (up - down) / (2.0 * h)));
            }
        }
        for j in 0..d {
            let mut w = v.clone();
            w[j] += h;
            let up = model.log_prob(&[], &w).unwrap();
            w[j] -= 2.0 * h;
            let down = model.log_prob(&[], &w).unwrap();
            logprob_worst = logprob_worst.max(rel_err(d_v[j], (up - down) / (2.0 * h)));
        }
    }

    for _ in 0..n {
        let d = rng.random_range(1..4);
        let theta = perturbed_model(&mut rng, 0, d, 6, 2);
        let mut phi = perturbed_model(&mut rng, d, d, 6, 2);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let batch = DataMatrix::from_rows(&rows).unwrap();
        let levels: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(0.05..0.95)).collect()).collect();
        let bits: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.5)).collect();
        let hs = SwapIndicator::from_indices(d, &bits).unwrap();
        let lambda = rng.random_range(0.0..1.0);
        let objective = |phi: &AutoregressiveModel| {
            ddlk_objective_batch(&theta, phi, &batch, &hs, &vec![0.0; d], lambda, KnockoffNoise::Levels(&levels))
                .unwrap()
        };
        let out = objective(&phi);
        for c in 0..d {
            for p in (0..phi.conditionals()[c].param_count()).step_by(4) {
                let orig = phi.conditionals()[c].params()[p];
                phi.conditionals_mut()[c].params_mut()[p] = orig + h;
                let up = objective(&phi).report.objective;
                phi.conditionals_mut()[c].params_mut()[p] = orig - h;
                let down = objective(&phi).report.objective;
                phi.conditionals_mut()[c].params_mut()[p] = orig;
                path_worst = path_worst.max(rel_err(out.grads_phi[c][p], (up - down) / (2.0 * h)));
            }
        }
    }

    outcome(
        logprob_worst <= 1e-4 && path_worst <= 1e-3,
        format!("worst relative error: log-prob {logprob_worst:.2e} (<= 1e-4), pathwise {path_worst:.2e} (<= 1e-3)"),
    )
}

/// Swapped log-density against the joint evaluated at an independently
/// permuted vector.
fn swap_identity() -> Outcome {
    let mut rng = child_rng(102, 0);
    let mut cases = 0;
    let mut mismatches = 0;
    for _ in 0..100 {
        let d = rng.random_range(1..7);
        let theta = perturbed_model(&mut rng, 0, d, 4, 2);
        let phi = perturbed_model(&mut rng, d, d, 4, 2);
        let joint = |u: &[f64], ut: &[f64]| Ok(theta.log_prob(&[], u)? + phi.log_prob(u, ut)?);
        for _ in 0..100 {
            let mut v: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-2.5..2.5)).collect();
            let idx: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.5)).collect();
            let hs = SwapIndicator::from_indices(d, &idx).unwrap();
            let got = swap_log_prob(joint, &v[..d], &v[d..], &hs).unwrap();
            for &j in &idx {
                v.swap(j, d + j);
            }
            let want = joint(&v[..d], &v[d..]).unwrap();
            cases += 1;
            if got.to_bits() != want.to_bits() {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of {cases} cases differ bitwise"))
}

fn brute_force_threshold(w: &[f64], p: f64) -> f64 {
    let mut candidates: Vec<f64> = w.iter().map(|v| v.abs()).filter(|v| *v > 0.0).collect();
    candidates.sort_by(f64::total_cmp);
    for t in candidates {
        let neg = w.iter().filter(|v| **v <= -t).count() as f64;
        let pos = w.iter().filter(|v| **v >= t).count() as f64;
        if (1.0 + neg) / pos.max(1.0) <= p {
            return t;
        }
    }
    f64::INFINITY
}

fn threshold_oracle() -> Outcome {
    let mut rng = child_rng(103, 0);
    let mut mismatches = 0;
    let (mut all_negative, mut tied) = (0, 0);
    for case in 0..1000 {
        let d = rng.random_range(1..40);
        let w: Vec<f64> = match case % 4 {
            0 => (0..d).map(|_| -rng.random_range(0.01..3.0)).collect(),
            1 => (0..d).map(|_| rng.random_range(-3..6) as f64).collect(),
            2 => (0..d).map(|_| (rng.random_range(-2.0f64..5.0) * 4.0).round() / 4.0).collect(),
            _ => (0..d).map(|_| rng.random_range(-2.0..5.0)).collect(),
        };
        if w.iter().all(|v| *v < 0.0) {
            all_negative += 1;
        }
        let mut sorted: Vec<f64> = w.iter().map(|v| v.abs()).collect();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|p| p[0] == p[1]) {
            tied += 1;
        }
        let p = rng.random_range(0.01..0.6);
        let got = knockoff_threshold(&KnockoffStatistics::new(w.clone()).unwrap(), p).unwrap();
        let want = brute_force_threshold(&w, p);
        let selected: Vec<usize> = (0..d).filter(|&j| w[j] >= want).collect();
        if got.threshold.to_bits() != want.to_bits() || got.selected != selected {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over 1000 vectors ({all_negative} all-negative, {tied} with ties)"),
    )
}

fn curve_at(result: &ExperimentResult, p: f64) -> (f64, f64) {
    let c = result.curve.iter().find(|c| (c.p - p).abs() < 1e-9).expect("level on grid");
    (c.mean_fdp, c.mean_power)
}

fn oracle_knockoffs() -> Outcome {
    let method = MethodConfig {
        knockoffs: KnockoffMethod::OracleGaussian,
        ..MethodConfig::default()
    };
    let r = run_experiment(&BenchmarkSpec::gaussian(), &method).unwrap();
    let worst = r.curve.iter().map(|c| c.mean_fdp - c.p).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        r.seeds.len() == 10 && worst <= 0.03,
        format!(
            "{} seeds; max(mean FDP - p) = {worst:.3} (<= 0.03); power at 0.2 = {:.3}",
            r.seeds.len(),
            curve_at(&r, 0.2).1
        ),
    )
}

fn ddlk_gaussian() -> Outcome {
    let r = run_experiment(&BenchmarkSpec::gaussian(), &MethodConfig::default()).unwrap();
    let mut pass = r.seeds.len() == 10;
    let mut detail = format!("{} seeds;", r.seeds.len());
    for p in [0.1, 0.2, 0.3] {
        let (fdp, _) = curve_at(&r, p);
        pass &= fdp <= p + 0.05;
        detail += &format!(" FDP@{p} = {fdp:.3};");
    }
    let power = curve_at(&r, 0.2).1;
    pass &= power >= 0.9;
    detail += &format!(" power@0.2 = {power:.3}");
    outcome(pass, detail)
}

fn ddlk_mixture() -> Outcome {
    let mut method = MethodConfig::default();
    method.train.patience = method.train.max_epochs_knockoff;
    let r = run_experiment(&BenchmarkSpec::mixture(), &method).unwrap();
    let mut pass = r.seeds.len() == 10;
    let mut detail = format!("{} seeds;", r.seeds.len());
    for p in [0.2, 0.3] {
        let (fdp, _) = curve_at(&r, p);
        pass &= fdp <= p + 0.05;
        detail += &format!(" FDP@{p} = {fdp:.3};");
    }
    let power = curve_at(&r, 0.3).1;
    pass &= power >= 0.6;
    detail += &format!(" power@0.3 = {power:.3};");
    let pair = r.samples.as_ref().expect("at least one completed seed");
    let mut good_columns = 0;
    for j in 0..pair.knockoffs.cols() {
        let modes = kde_modes(&pair.knockoffs.column(j), None, 0.1);
        let matched = modes.len() == 3
            && [0.0, 20.0, 40.0].iter().zip(&modes).all(|(c, m)| (c - m).abs() <= 2.0);
        good_columns += matched as usize;
    }
    pass &= good_columns == pair.knockoffs.cols();
    detail += &format!(" knockoff columns with 3 modes near 0/20/40: {good_columns}/{}", pair.knockoffs.cols());
    outcome(pass, detail)
}

fn ar_splits(d: usize, n: usize, seed: u64) -> (DataMatrix, DataMatrix, DataMatrix) {
    let spec = BenchmarkSpec {
        n,
        d,
        m: 0,
        seeds: vec![seed],
        ..BenchmarkSpec::gaussian()
    };
    let x = gen_gaussian(&spec, &mut child_rng(seed, 0)).unwrap().data.x;
    let s = split_rows(n, (0.7, 0.15, 0.15), Some(&mut child_rng(seed, 1))).unwrap();
    (x.select_rows(&s.train), x.select_rows(&s.val), x.select_rows(&s.test))
}

fn swap_probe() -> Outcome {
    let mut aucs = Vec::new();
    for seed in 0..3 {
        let (train, val, test) = ar_splits(5, 2000, seed);
        let config = TrainConfig {
            seed,
            batch_size: 16,
            patience: TrainConfig::default().max_epochs_knockoff,
            ..TrainConfig::default()
        };
        let (model, _) = fit_ddlk(&train, &val, &config).unwrap();
        let xk_train = model.sample_knockoffs(&train, 1000 + seed).unwrap();
        let xk_test = model.sample_knockoffs(&test, 2000 + seed).unwrap();
        aucs.push(swap_probe_auc(&train, &xk_train, &test, &xk_test).unwrap());
    }
    outcome(
        aucs.iter().all(|a| *a <= 0.60),
        format!("held-out AUC per seed {aucs:.3?} (<= 0.60)"),
    )
}

fn entropy_monotone(criterion_5: Option<bool>) -> Outcome {
    let spec = BenchmarkSpec::gaussian();
    let (train, val, _) = ar_splits(spec.d, spec.n, 0);
    let entropy = |lambda: f64| {
        let config = TrainConfig {
            lambda,
            ..TrainConfig::default()
        };
        let (model, _) = fit_ddlk(&train, &val, &config).unwrap();
        let z = model.standardizer.transform(&val).unwrap();
        conditional_entropy(&model.knockoff, &z, 7).unwrap()
    };
    let low = entropy(0.001);
    let high = entropy(10.0);
    let robust = match criterion_5 {
        Some(pass) => pass,
        None => ddlk_gaussian().pass,
    };
    outcome(
        high > low && robust,
        format!("entropy at 0.001 = {low:.3}, at 10 = {high:.3}; lambda = 0.1 benchmark passes: {robust}"),
    )
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_knockoff-forge"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = BenchmarkSpec {
        n: 300,
        d: 5,
        m: 2,
        ..BenchmarkSpec::gaussian()
    };
    let sim = gen_gaussian(&spec, &mut child_rng(9, 0)).unwrap();
    let y: Vec<String> = sim.data.y.unwrap().values().iter().map(|v| format!("{v:?}")).collect();
    let data = root.join("data.csv");
    write_csv(std::fs::File::create(&data).unwrap(), &sim.data.x, &[("y".into(), y)]).unwrap();
    let config = root.join("config.toml");
    std::fs::write(
        &config,
        "[train]\nmax_epochs_joint = 5\nmax_epochs_knockoff = 5\nhidden = 16\n\
         [benchmark]\nn = 300\nd = 5\nm = 2\nseeds = [0, 1]\n\
         [response]\nkind = \"network\"\nhidden = 16\nmax_epochs = 10\n",
    )
    .unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let run_all = |tag: &str| -> Option<Vec<(String, Vec<u8>)>> {
        let out = root.join(tag);
        let o = s(&out);
        let c = s(&config);
        let steps: Vec<Vec<String>> = vec![
            vec!["fit-joint".into(), "--data".into(), s(&data), "--exclude".into(), "y".into()],
            vec!["fit-knockoff".into(), "--data".into(), s(&data), "--joint".into(), format!("{o}/joint.kfm")],
            vec!["sample".into(), "--model".into(), format!("{o}/knockoff.kfm"), "--data".into(), s(&data)],
            vec![
                "select".into(),
                "--data".into(),
                s(&data),
                "--knockoffs".into(),
                format!("{o}/knockoffs.csv"),
                "--response".into(),
                "y".into(),
            ],
            vec!["benchmark".into(), "--out".into(), format!("{o}/bench")],
        ];
        for mut step in steps {
            step.extend(["--config".into(), c.clone(), "--seed".into(), "4".into()]);
            if !step.contains(&"--out".to_string()) {
                step.extend(["--out".into(), o.clone()]);
            }
            let args: Vec<&str> = step.iter().map(String::as_str).collect();
            if !cli(&args) {
                return None;
            }
        }
        Some(files(&out))
    };
    match (run_all("first"), run_all("second")) {
        (Some(a), Some(b)) => {
            let differing: Vec<&str> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.0.as_str())
                .collect();
            outcome(
                a.len() == b.len() && differing.is_empty(),
                format!("{} output files compared, differing: {differing:?}", a.len()),
            )
        }
        _ => outcome(false, "a command failed".into()),
    }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let enabled = |c: u32| wanted.is_empty() || wanted.contains(&c);
    let mut all_pass = true;
    let mut criterion_5 = None;
    let mut report = |c: u32, name: &str, f: &mut dyn FnMut() -> Outcome| -> Option<bool> {
        if !enabled(c) {
            return None;
        }
        let start = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {c} [{name}]: {verdict} - {} ({:.1?})", o.detail, start.elapsed());
        all_pass &= o.pass;
        Some(o.pass)
    };
    report(1, "gradient fidelity", &mut gradient_fidelity);
    report(2, "swap identity", &mut swap_identity);
    report(3, "threshold oracle", &mut threshold_oracle);
    report(4, "oracle gaussian knockoffs", &mut oracle_knockoffs);
    if let Some(p) = report(5, "ddlk gaussian benchmark", &mut ddlk_gaussian) {
        criterion_5 = Some(p);
    }
    report(6, "ddlk mixture benchmark", &mut ddlk_mixture);
    report(7, "swap probe", &mut swap_probe);
    report(8, "entropy regularization", &mut || entropy_monotone(criterion_5));
    report(9, "cli determinism", &mut cli_determinism);
    if !all_pass {
        std::process::exit(1);
    }
}
