//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --release -p survkit-cli --test acceptance`.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use survkit::coxph::{fit_coxph, wald_stats, FitOptions, Penalty};
use survkit::deephit::{deephit_loss, fit_deephit, DeepHitParams};
use survkit::deepsurv::{deepsurv_loss, fit_deepsurv, DeepSurvParams};
use survkit::harness::{prepare_fold, split, Pipeline, PreprocessConfig, SplitPlan};
use survkit::impute::{mice_impute, pool_rubin};
use survkit::metrics::{brier_score, censoring_km, concordance_index};
use survkit::nnet::{Layer, Mlp, Mode};
use survkit::rng::{rng_from, Rng};
use survkit::synth::{generate, CovariateSpec, GeneratorSpec, GroundTruth, MarRule, Weibull};
use survkit::{ColumnSpec, SurvivalDataset};
use survkit_cli::{cmd_experiment, cmd_synth, DataArgs, ExperimentArgs, SynthArgs};

type Outcome = (bool, String);

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn matrix(rng: &mut Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, p), || normal(rng))
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

fn rel_err(num: f64, ana: f64) -> f64 {
    (num - ana).abs() / (num.abs() + ana.abs()).max(1e-6)
}

/// Proportional-hazards data with exponential baseline and exponential
/// censoring whose rate is bisected to hit `censored` as closely as possible.
fn ph_data(
    rng: &mut Rng,
    n: usize,
    beta: &[f64],
    censored: f64,
) -> (Array2<f64>, Vec<f64>, Vec<bool>) {
    let x = matrix(rng, n, beta.len());
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let eta: f64 = beta.iter().enumerate().map(|(j, b)| b * x[[i, j]]).sum();
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -u.ln() / (0.1 * eta.exp())
        })
        .collect();
    let e0: Vec<f64> = (0..n)
        .map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln())
        .collect();
    let frac = |rate: f64| (0..n).filter(|&i| e0[i] / rate < t[i]).count() as f64 / n as f64;
    let (mut lo, mut hi) = (1e-6f64, 10.0f64);
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if frac(mid) < censored {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rate = (lo * hi).sqrt();
    let times = (0..n).map(|i| t[i].min(e0[i] / rate)).collect();
    let events = (0..n).map(|i| t[i] <= e0[i] / rate).collect();
    (x, times, events)
}

fn mlp_fd(seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let mut layers = Mlp::new(&[4, 6, 5, 3], 0.2, seed)
        .unwrap()
        .layers()
        .to_vec();
    // nonzero biases so their gradients are exercised
    for l in &mut layers {
        l.bias.mapv_inplace(|_| 0.1 * normal(&mut rng));
    }
    let build = |layers: &[Layer]| Mlp::from_layers(layers.to_vec(), 0.2).unwrap();
    let net = build(&layers);
    let x = matrix(&mut rng, 7, 4);
    let w = matrix(&mut rng, 7, 3);
    let mode = Mode::Train { seed: seed + 1000 };
    let loss = |n: &Mlp| (n.forward(x.view(), mode).unwrap().0 * &w).sum();
    let (_, cache) = net.forward(x.view(), mode).unwrap();
    let grads = net.backward(&cache, w.view()).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..layers.len() {
        for idx in ndarray::indices(layers[k].weights.raw_dim()) {
            let bump = |d: f64| {
                let mut p = layers.clone();
                p[k].weights[idx] += d;
                loss(&build(&p))
            };
            let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
            worst = worst.max(rel_err(num, grads.layers[k].weights[idx]));
        }
        for j in 0..layers[k].bias.len() {
            let bump = |d: f64| {
                let mut p = layers.clone();
                p[k].bias[j] += d;
                loss(&build(&p))
            };
            let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
            worst = worst.max(rel_err(num, grads.layers[k].bias[j]));
        }
    }
    worst
}

fn deepsurv_fd(seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let n = 15;
    let s = Array1::from_shape_simple_fn(n, || normal(&mut rng));
    // coarse times so ties occur
    let times: Vec<f64> = (0..n)
        .map(|_| (rng.random::<f64>() * 6.0).floor())
        .collect();
    let mut events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
    events[0] = true;
    let (_, g) = deepsurv_loss(s.view(), &times, &events).unwrap();
    let eps = 1e-5;
    (0..n)
        .map(|i| {
            let at = |d: f64| {
                let mut p = s.clone();
                p[i] += d;
                deepsurv_loss(p.view(), &times, &events).unwrap().0
            };
            rel_err((at(eps) - at(-eps)) / (2.0 * eps), g[i])
        })
        .fold(0.0, f64::max)
}

fn deephit_fd(seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let (n, bins) = (9, 6);
    let z = matrix(&mut rng, n, bins);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..bins)).collect();
    let events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
    let (alpha, sigma) = (0.2 + 0.6 * rng.random::<f64>(), 0.1 + rng.random::<f64>());
    let (_, g) = deephit_loss(z.view(), &labels, &events, alpha, sigma).unwrap();
    let eps = 1e-5;
    ndarray::indices((n, bins))
        .into_iter()
        .map(|idx| {
            let at = |d: f64| {
                let mut p = z.clone();
                p[idx] += d;
                deephit_loss(p.view(), &labels, &events, alpha, sigma)
                    .unwrap()
                    .0
            };
            rel_err((at(eps) - at(-eps)) / (2.0 * eps), g[idx])
        })
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (mut mlp, mut ds, mut dh) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..10 {
        mlp = mlp.max(mlp_fd(seed));
        ds = ds.max(deepsurv_fd(seed));
        dh = dh.max(deephit_fd(seed));
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = mlp.max(ds).max(dh);
    (
        worst < 1e-5 && secs < 30.0,
        format!("max rel err mlp {mlp:.2e}, deepsurv {ds:.2e}, deephit {dh:.2e} over 10 seeds; {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let beta = [0.7, -0.5, 0.3];
    let mut rng = rng_from(2);
    let (x, t, e) = ph_data(&mut rng, 5000, &beta, 0.3);
    let censored = e.iter().filter(|&&v| !v).count() as f64 / 5000.0;
    let start = Instant::now();
    let fit = fit_coxph(
        &x,
        &t,
        &e,
        &names(3),
        Penalty::new(0.0, 0.0),
        &FitOptions::default(),
    );
    let secs = start.elapsed().as_secs_f64();
    match fit {
        Ok(m) => {
            let err = m
                .beta
                .iter()
                .zip(&beta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            (
                err < 0.08 && secs < 10.0,
                format!(
                    "beta {:?}, max abs err {err:.4}, censored {:.1}%, {secs:.3}s",
                    round4(&m.beta),
                    100.0 * censored
                ),
            )
        }
        Err(err) => (false, format!("fit failed: {err}")),
    }
}

fn round4(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

/// Breslow log partial likelihood for one covariate and untied times.
fn log_pl(beta: f64, order: &[usize], x: &[f64], events: &[bool]) -> f64 {
    // order: decreasing time, so the running sum is the risk set
    let mut acc = 0.0;
    let mut ll = 0.0;
    for &i in order {
        acc += (beta * x[i]).exp();
        if events[i] {
            ll += beta * x[i] - acc.ln();
        }
    }
    ll
}

fn criterion_3() -> Outcome {
    let mut rng = rng_from(3);
    let (x, t, e) = ph_data(&mut rng, 400, &[0.8], 0.3);
    let xs: Vec<f64> = x.column(0).to_vec();
    let mut order: Vec<usize> = (0..400).collect();
    order.sort_by(|&a, &b| t[b].total_cmp(&t[a]));
    let (mut best, mut best_ll) = (0.0, f64::NEG_INFINITY);
    for k in 0..=40_000 {
        let b = -2.0 + 1e-4 * k as f64;
        let ll = log_pl(b, &order, &xs, &e);
        if ll > best_ll {
            best_ll = ll;
            best = b;
        }
    }
    match fit_coxph(
        &x,
        &t,
        &e,
        &names(1),
        Penalty::new(0.0, 0.0),
        &FitOptions::default(),
    ) {
        Ok(m) => {
            let diff = (m.beta[0] - best).abs();
            (
                diff < 2e-4,
                format!(
                    "fit {:.6}, grid argmax {best:.4}, diff {diff:.2e}",
                    m.beta[0]
                ),
            )
        }
        Err(err) => (false, format!("fit failed: {err}")),
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            r[k] = (i + j - 1) as f64 / 2.0;
        }
        i = j;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_4() -> Outcome {
    let beta = [0.7, -0.4, 0.25];
    let mut rng = rng_from(4);
    let (x, t, e) = ph_data(&mut rng, 2000, &beta, 0.3);
    let (xt, tt, et) = ph_data(&mut rng, 1000, &beta, 0.3);
    let cox = match fit_coxph(
        &x,
        &t,
        &e,
        &names(3),
        Penalty::new(0.0, 0.0),
        &FitOptions::default(),
    ) {
        Ok(m) => m,
        Err(err) => return (false, format!("cox fit failed: {err}")),
    };
    let params = DeepSurvParams {
        hidden: vec![],
        dropout: 0.0,
        epochs: 40,
        batch_size: 256,
        learning_rate: 0.01,
        gamma: 1.0,
        weight_decay: 0.0,
    };
    let ds = match fit_deepsurv(x.view(), &t, &e, &names(3), &params, 4) {
        Ok(m) => m,
        Err(err) => return (false, format!("deepsurv fit failed: {err}")),
    };
    let r_cox = cox.risk_scores(&xt).unwrap();
    let r_ds = ds.risk_scores(xt.view()).unwrap();
    let c_cox = concordance_index(&tt, &et, &r_cox).unwrap();
    let c_ds = concordance_index(&tt, &et, &r_ds).unwrap();
    let rho = pearson(&ranks(&r_cox), &ranks(&r_ds));
    (
        (c_cox - c_ds).abs() < 0.01 && rho > 0.99,
        format!(
            "test C cox {c_cox:.4}, deepsurv {c_ds:.4}, diff {:.4}; Spearman {rho:.5}",
            (c_cox - c_ds).abs()
        ),
    )
}

fn brute_c(times: &[f64], events: &[bool], risk: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        for j in 0..times.len() {
            if j == i {
                continue;
            }
            if times[j] > times[i] || (times[j] == times[i] && !events[j]) {
                den += 1.0;
                if risk[i] > risk[j] {
                    num += 1.0;
                } else if risk[i] == risk[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn criterion_5() -> Outcome {
    let mut rng = rng_from(5);
    let mut mismatches = 0;
    for d in 0..20 {
        let n = 20 + 9 * d;
        let times: Vec<f64> = (0..n)
            .map(|_| (rng.random::<f64>() * 30.0).floor())
            .collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
        let risk: Vec<f64> = (0..n)
            .map(|_| (rng.random::<f64>() * 10.0).floor())
            .collect();
        let fast = concordance_index(&times, &events, &risk).unwrap();
        if fast.to_bits() != brute_c(&times, &events, &risk).to_bits() {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("{mismatches} of 20 datasets differ (n 20..191, tied times and scores)"),
    )
}

/// Censoring survivor `G(t)` (or its left limit) by a direct product over
/// censoring times; events at a censoring time stay in its risk set.
fn direct_g(t: f64, left: bool, times: &[f64], events: &[bool]) -> f64 {
    let mut distinct: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| !e)
        .map(|(&s, _)| s)
        .collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut g = 1.0;
    for s in distinct {
        if (left && s >= t) || (!left && s > t) {
            break;
        }
        let d = times
            .iter()
            .zip(events)
            .filter(|(&u, &e)| u == s && !e)
            .count() as f64;
        let r = times.iter().filter(|&&u| u >= s).count() as f64;
        g *= 1.0 - d / r;
    }
    g
}

fn criterion_6() -> Outcome {
    let mut rng = rng_from(6);
    let mut worst = 0.0f64;
    for d in 0..10 {
        let n = 30 + 7 * d;
        let times: Vec<f64> = (0..n)
            .map(|_| (rng.random::<f64>() * 20.0).floor() + 1.0)
            .collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.65).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let km = censoring_km(&times, &events).unwrap();
        for &t in &[2.0, 5.5, 8.0, 12.0, 15.0] {
            let ours = brier_score(t, &pred, &times, &events, &km).unwrap().value;
            let mut sum = 0.0;
            for i in 0..n {
                if times[i] <= t && events[i] {
                    let g = direct_g(times[i], true, &times, &events);
                    if g > 0.0 {
                        sum += pred[i].powi(2) / g;
                    }
                } else if times[i] > t {
                    let g = direct_g(t, false, &times, &events);
                    if g > 0.0 {
                        sum += (1.0 - pred[i]).powi(2) / g;
                    }
                }
            }
            worst = worst.max((ours - sum / n as f64).abs());
        }
    }
    (
        worst < 1e-10,
        format!("max abs diff {worst:.2e} over 10 datasets x 5 times"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = rng_from(7);
    let x = matrix(&mut rng, 400, 3);
    let t: Vec<f64> = (0..400)
        .map(|i| (1.0 + rng.random::<f64>() * 10.0) * (-0.5 * x[[i, 0]]).exp())
        .collect();
    let e: Vec<bool> = (0..400).map(|_| rng.random::<f64>() < 0.7).collect();
    let params = DeepHitParams {
        hidden: vec![16, 16],
        epochs: 30,
        n_bins: 20,
        ..DeepHitParams::dfs()
    };
    let model = match fit_deephit(x.view(), &t, &e, &names(3), &params, 7) {
        Ok(m) => m,
        Err(err) => return (false, format!("fit failed: {err}")),
    };
    let mut inputs = matrix(&mut rng, 10_000, 3);
    // a tail of extreme inputs
    for i in 9_000..10_000 {
        inputs.row_mut(i).mapv_inplace(|v| 25.0 * v);
    }
    let pmf = model.pmf(inputs.view()).unwrap();
    let sum_err = pmf
        .sum_axis(Axis(1))
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    let t_max = model.grid.t_max();
    let grid: Vec<f64> = (0..=100).map(|k| t_max * k as f64 / 100.0).collect();
    let s = model.survival_matrix(inputs.view(), &grid).unwrap();
    let monotone = s
        .rows()
        .into_iter()
        .all(|r| r.windows(2).into_iter().all(|w| w[1] <= w[0]));
    let start_ok = s.column(0).iter().all(|&v| v == 1.0);
    let terminal = s.column(100).iter().fold(0.0f64, |a, &b| a.max(b));
    (
        sum_err < 1e-6 && monotone && start_ok && terminal < 1e-6,
        format!(
            "10000 inputs: max |sum pmf - 1| {sum_err:.1e}, non-increasing {monotone}, S(0)=1 {start_ok}, max terminal S {terminal:.1e}"
        ),
    )
}

fn mice_toy(seed: u64) -> (SurvivalDataset, Vec<f64>) {
    let mut rng = rng_from(seed);
    let n = 500;
    let mut values = Array2::zeros((n, 2));
    let mut missing = Array2::from_elem((n, 2), false);
    let mut truth = vec![0.0; n];
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for i in 0..n {
        let x = normal(&mut rng);
        values[[i, 0]] = x;
        values[[i, 1]] = 2.0 * x;
        truth[i] = 2.0 * x;
        // MAR through x; 20% missing on average
        missing[[i, 1]] = rng.random::<f64>() < 0.4 / (1.0 + (-x).exp());
        time.push(0.5 + rng.random::<f64>() * 50.0);
        event.push(rng.random::<f64>() < 0.6);
    }
    let ds = SurvivalDataset::new(
        vec![ColumnSpec::continuous("x"), ColumnSpec::continuous("y")],
        values,
        missing,
        time,
        event,
    )
    .unwrap();
    (ds, truth)
}

fn criterion_8() -> Outcome {
    let mut worst_ratio = 0.0f64;
    let mut outcomes_same = true;
    for seed in 0..10 {
        let (ds, truth) = mice_toy(seed);
        let set = match mice_impute(&ds, 1, 10, 100 + seed) {
            Ok(s) => s,
            Err(err) => return (false, format!("seed {seed}: {err}")),
        };
        let out = &set.datasets[0];
        outcomes_same &= out
            .time()
            .iter()
            .zip(ds.time())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && out.event() == ds.event();
        let mis: Vec<usize> = (0..ds.n_rows()).filter(|&i| ds.missing()[[i, 1]]).collect();
        let obs: Vec<usize> = (0..ds.n_rows())
            .filter(|&i| !ds.missing()[[i, 1]])
            .collect();
        let mean = obs.iter().map(|&i| truth[i]).sum::<f64>() / obs.len() as f64;
        let rmse = |f: &dyn Fn(usize) -> f64| {
            (mis.iter().map(|&i| (f(i) - truth[i]).powi(2)).sum::<f64>() / mis.len() as f64).sqrt()
        };
        let ratio = rmse(&|i| out.values()[[i, 1]]) / rmse(&|_| mean);
        worst_ratio = worst_ratio.max(ratio);
    }
    (
        worst_ratio <= 0.9 && outcomes_same,
        format!("worst MICE/mean RMSE ratio {worst_ratio:.4} over 10 seeds; outcomes bit-unchanged {outcomes_same}"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = rng_from(9);
    let mut bad = 0;
    for _ in 0..1000 {
        let m = rng.random_range(2..30);
        let q = normal(&mut rng) * 10f64.powi(rng.random_range(-3..4));
        let u: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
        match pool_rubin(&vec![q; m], &u) {
            Ok(p) => {
                let w = u.iter().sum::<f64>() / m as f64;
                if p.between_variance != 0.0
                    || p.total_variance != p.within_variance
                    || p.estimate != q
                    || (p.within_variance - w).abs() > 1e-15
                {
                    bad += 1;
                }
            }
            Err(_) => bad += 1,
        }
    }
    (
        bad == 0,
        format!("{bad} of 1000 identical-estimate poolings with B != 0 or T != W"),
    )
}

fn leakage_spec() -> GeneratorSpec {
    let cont = |name: &str, beta: f64, parent: Option<(&str, f64)>| CovariateSpec::Continuous {
        name: name.into(),
        mean: 0.0,
        sd: 1.0,
        beta,
        parent: parent.map(|(p, r)| (p.into(), r)),
    };
    GeneratorSpec {
        n: 600,
        seed: 10,
        covariates: vec![
            cont("x0", 0.5, None),
            cont("x1", -0.3, None),
            cont("x2", 0.0, Some(("x0", 0.9))),
            CovariateSpec::Binary {
                name: "b".into(),
                p: 0.4,
                beta: 0.3,
            },
        ],
        baseline: Weibull {
            shape: 1.2,
            scale: 10.0,
        },
        censoring_fraction: 0.35,
        missingness: vec![MarRule {
            column: "x1".into(),
            intercept: -1.5,
            weights: vec![("x0".into(), 0.8)],
            center_effects: vec![],
        }],
        n_centers: 0,
        time_name: "time".into(),
        event_name: "event".into(),
    }
}

fn shifted(ds: &SurvivalDataset, column: &str, rows: &[usize]) -> SurvivalDataset {
    let j = ds.column_index(column).unwrap();
    let mut v = ds.values().clone();
    for &i in rows {
        v[[i, j]] += 1000.0;
    }
    ds.with_cells(v, ds.missing().clone()).unwrap()
}

fn criterion_10() -> Outcome {
    let (ds, _) = generate(&leakage_spec()).unwrap();
    let cfg = PreprocessConfig::default();
    let part = split(&ds, &SplitPlan::default(), 10).unwrap();
    let mut leaks = Vec::new();
    let mut checks = 0;
    for column in ["x0", "x1", "x2"] {
        for (k, f) in part.folds.iter().enumerate() {
            let a = prepare_fold(&ds, &f.train, &f.validation, &cfg, 11).unwrap();
            let b = prepare_fold(
                &shifted(&ds, column, &f.validation),
                &f.train,
                &f.validation,
                &cfg,
                11,
            )
            .unwrap();
            checks += 1;
            if a.pipeline != b.pipeline || a.train != b.train {
                leaks.push(format!("fold {k} {column}"));
            }
        }
        let probe = shifted(&ds, column, &part.test);
        let a = Pipeline::fit(&ds.select_rows(&part.train), &cfg, 12).unwrap();
        let b = Pipeline::fit(&probe.select_rows(&part.train), &cfg, 12).unwrap();
        checks += 1;
        if a != b {
            leaks.push(format!("final {column}"));
        }
    }
    (
        leaks.is_empty(),
        format!("{checks} perturbation checks, fitted state changed in {leaks:?}"),
    )
}

fn criterion_11() -> Outcome {
    let mut rng = rng_from(11);
    let mut hits = 0;
    let mut failed = 0;
    for _ in 0..200 {
        let (_, t, e) = ph_data(&mut rng, 200, &[0.0], 0.3);
        let x = matrix(&mut rng, 200, 1);
        match fit_coxph(
            &x,
            &t,
            &e,
            &names(1),
            Penalty::new(0.0, 0.0),
            &FitOptions::default(),
        )
        .and_then(|m| wald_stats(&m))
        {
            Ok(rows) => hits += (rows[0].p_value < 0.05) as usize,
            Err(_) => failed += 1,
        }
    }
    let rate = hits as f64 / 200.0;
    (
        (0.03..=0.08).contains(&rate) && failed == 0,
        format!(
            "{hits} of 200 null replicates with p < 0.05 ({:.1}%), {failed} failed fits",
            100.0 * rate
        ),
    )
}

struct Experiment {
    report: Vec<u8>,
    secs: f64,
    outcome: Outcome,
}

fn experiment_run(root: &std::path::Path) -> Result<Experiment, String> {
    let synth = cmd_synth(
        &SynthArgs {
            ensure_like: true,
            spec: None,
            seed: Some(1),
        },
        &root.join("synth"),
    )
    .map_err(|e| e.to_string())?;
    let data = DataArgs {
        data: synth.file("cohort.csv"),
        schema: synth.file("schema.json"),
    };
    let truth: GroundTruth = serde_json::from_str(
        &std::fs::read_to_string(synth.file("truth.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let args = ExperimentArgs {
        input: data,
        config: None,
        models: None,
        plot_patients: None,
        seed: Some(1),
    };
    let start = Instant::now();
    let run = cmd_experiment(&args, &root.join("experiment")).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let bytes = std::fs::read(run.file("report.json")).map_err(|e| e.to_string())?;
    let report: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;

    let ds = survkit_cli::load_dataset(&args.input).map_err(|e| e.to_string())?;
    let row_of = |id: &str| ds.ids().iter().position(|x| x == id);
    let lp_of = |id: &str| {
        truth
            .ids
            .iter()
            .position(|x| x == id)
            .map(|k| truth.linear_predictor[k])
    };
    let ids: Vec<&str> = report["test_ids"]
        .as_array()
        .ok_or("report has no test ids")?
        .iter()
        .filter_map(|v| v.as_str())
        .collect();
    let (mut t, mut e, mut lp) = (vec![], vec![], vec![]);
    for id in &ids {
        let (i, v) = row_of(id)
            .zip(lp_of(id))
            .ok_or(format!("unknown test id {id}"))?;
        t.push(ds.time()[i]);
        e.push(ds.event()[i]);
        lp.push(v);
    }
    let oracle = concordance_index(&t, &e, &lp).map_err(|e| e.to_string())?;
    let mut ok = secs < 1200.0;
    let mut parts = vec![format!("{secs:.1}s, oracle test C {oracle:.4}")];
    for m in report["models"].as_array().ok_or("report has no models")? {
        let c = m["test"]
            .as_array()
            .and_then(|v| v.iter().find(|r| r["metric"] == "c_index"))
            .and_then(|r| r["estimate"].as_f64())
            .ok_or("model without a C-index")?;
        let gap = oracle - c;
        ok &= gap < 0.03;
        parts.push(format!(
            "{} C {c:.4} (gap {gap:.4})",
            m["family"].as_str().unwrap_or("?")
        ));
    }
    Ok(Experiment {
        report: bytes,
        secs,
        outcome: (ok, parts.join(", ")),
    })
}

fn main() {
    let checks: [(usize, fn() -> Outcome); 11] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    let mut all = true;
    let mut report = |n: usize, (ok, detail): Outcome| {
        all &= ok;
        println!(
            "criterion {n}: {}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    };
    for (n, f) in checks {
        report(n, f());
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    match (
        experiment_run(&tmp.path().join("first")),
        experiment_run(&tmp.path().join("second")),
    ) {
        (Ok(a), Ok(b)) => {
            report(12, a.outcome);
            let same = a.report == b.report;
            report(
                13,
                (
                    same,
                    format!(
                        "report.json {} bytes, identical on rerun: {same} (runs {:.1}s, {:.1}s)",
                        a.report.len(),
                        a.secs,
                        b.secs
                    ),
                ),
            );
        }
        (Err(e), _) | (_, Err(e)) => {
            report(12, (false, format!("experiment failed: {e}")));
            report(13, (false, "no report to compare".into()));
        }
    }
    if !all {
        std::process::exit(1);
    }
}
