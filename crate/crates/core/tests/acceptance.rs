//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Runs without the libtest harness so the verdict lines are always printed.

use std::path::Path;
use std::time::{Duration, Instant};

use zopro::analysis::{distance_correlation, pearson_delta_correlation, procrustes_disparity, relative_angle, CheckpointSeries};
use zopro::cli;
use zopro::models::{MlpLayout, MlpPolicy, PromptBatch, RewardModel};
use zopro::objectives::RlooObjective;
use zopro::optim::{spsa_step, zopro_direction, IterationState, Method};
use zopro::param::{sample_gaussian, NoiseSpec, ParamVector};
use zopro::rundir::{policy_checkpoint, reward_checkpoint, METRICS_FILE};
use zopro::seed::derive;
use zopro::training::{compare_methods, run_experiment};
use zopro::ExperimentConfig;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

fn gaussian(seed: u64, dim: usize) -> ParamVector {
    sample_gaussian(NoiseSpec::new(seed, dim)).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn spsa_fidelity() -> Verdict {
    let d = 50;
    let c = gaussian(101, d);
    let theta = gaussian(102, d);
    let linear = |p: &ParamVector, _: u64| Ok(p.dot(&c).unwrap());
    let mut mean = vec![0.0; d];
    let m = 50_000;
    for i in 0..m {
        let z = gaussian(derive(103, &[i as u64]), d);
        let out = spsa_step(&theta, linear, &z, 1e-3, 1.0, 0).unwrap();
        for (acc, zi) in mean.iter_mut().zip(z.as_slice()) {
            *acc += out.projected_grad * zi / m as f64;
        }
    }
    let cos = cosine(&mean, c.as_slice());

    // J(p) = 0.5 sum a_k p_k^2 + <b, p>, so the central difference along z is exact
    let a: Vec<f64> = (0..d).map(|k| 0.5 + (k % 7) as f64 * 0.3).collect();
    let b = gaussian(104, d);
    let quad = |p: &ParamVector, _: u64| {
        Ok(p.as_slice().iter().zip(&a).map(|(x, ak)| 0.5 * ak * x * x).sum::<f64>() + p.dot(&b).unwrap())
    };
    let mut worst: f64 = 0.0;
    for i in 0..200u64 {
        let th = gaussian(derive(105, &[i]), d);
        let z = gaussian(derive(106, &[i]), d);
        let out = spsa_step(&th, quad, &z, 0.1, 1.0, 0).unwrap();
        let exact: f64 = (0..d)
            .map(|k| (a[k] * th.as_slice()[k] + b.as_slice()[k]) * z.as_slice()[k])
            .sum();
        worst = worst.max((out.projected_grad - exact).abs());
    }
    verdict(
        cos >= 0.95 && worst <= 1e-10,
        format!("mean-estimate cosine {cos:.4} (>= 0.95), quadratic max error {worst:.2e} (<= 1e-10)"),
    )
}

fn sampler_geometry() -> Verdict {
    let d = 2000;
    let steps = 1000;
    let mut worst_proj: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    let mut bitwise = true;
    let mut samples = 0;
    for instance in 0..4u64 {
        let dpi = gaussian(derive(201, &[instance]), d).scaled(0.1 + instance as f64);
        // correlate the reward delta with the policy delta so cos(dpi, dr) is not ~0
        let dr = gaussian(derive(202, &[instance]), d).offset(0.5, &dpi).unwrap();
        let cos_dpi_dr = dpi.cosine(&dr).unwrap();
        for i in (0..steps).step_by(4) {
            let state = IterationState {
                delta_pi: Some(dpi.clone()),
                delta_r: Some(dr.clone()),
                step_index: i,
                iteration_index: 2,
            };
            let dir = zopro_direction(&state, steps, d, derive(203, &[instance, i as u64])).unwrap();
            let alpha = dir.alpha().unwrap();
            let u = dir.u.as_ref().unwrap();
            worst_proj = worst_proj.max(u.cosine(&dr).unwrap().abs());
            if alpha == 0.0 {
                worst_norm = worst_norm.max((dir.z.norm() - dpi.norm()).abs());
            }
            if alpha == 1.0 {
                bitwise &= dir.z.as_slice().iter().zip(dpi.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
            }
            let lhs = dir.z.cosine(&dr).unwrap() * dir.z.norm();
            let rhs = alpha * dpi.norm() * cos_dpi_dr;
            worst_identity = worst_identity.max((lhs - rhs).abs());
            samples += 1;
        }
    }
    verdict(
        samples >= 1000 && worst_proj <= 1e-10 && worst_norm <= 1e-10 && bitwise && worst_identity <= 1e-10,
        format!(
            "{samples} directions: max |cos(u, dR)| {worst_proj:.1e}, alpha=0 norm error {worst_norm:.1e}, \
             alpha=1 bitwise {bitwise}, identity error {worst_identity:.1e}"
        ),
    )
}

fn first_order_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let layout = MlpLayout::new(vec![4, 6, 5]).unwrap();
        let policy = MlpPolicy::init(layout.clone(), derive(301, &[instance]));
        let rm = RewardModel::new(
            layout.clone(),
            layout.init(derive(302, &[instance])),
            gaussian(derive(303, &[instance]), 6),
        )
        .unwrap();
        let batch = PromptBatch::gaussian(8, 4, derive(304, &[instance])).unwrap();
        let obj = RlooObjective::new(&policy, &rm, &batch, 2);
        let seed = derive(305, &[instance]);
        let (grad, _) = obj.gradient(seed).unwrap();
        let h = 1e-6;
        let theta = policy.params();
        let mut fd = Vec::with_capacity(theta.dim());
        for k in 0..theta.dim() {
            let mut e = vec![0.0; theta.dim()];
            e[k] = 1.0;
            let e = pv(e);
            let jp = obj.evaluate_at(&theta.offset(h, &e).unwrap(), seed).unwrap().value;
            let jm = obj.evaluate_at(&theta.offset(-h, &e).unwrap(), seed).unwrap().value;
            fd.push((jp - jm) / (2.0 * h));
        }
        let scale = grad.as_slice().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let err = grad.as_slice().iter().zip(&fd).fold(0.0f64, |m, (g, f)| m.max((g - f).abs()));
        worst = worst.max(err / scale.max(1e-12));
    }
    verdict(worst <= 1e-4, format!("20 instances, max relative error {worst:.2e} (<= 1e-4)"))
}

fn end_to_end() -> Verdict {
    let mut improved = 0;
    let mut min_agreement = f64::INFINITY;
    let mut lines = Vec::new();
    for s in SEEDS {
        let mut cfg = ExperimentConfig::default();
        cfg.override_seeds(s);
        let log = match run_experiment(&cfg) {
            Ok(log) => log,
            Err(f) => return verdict(false, format!("seed {s} aborted: {}", f.error)),
        };
        let last = log.final_mean_reward();
        if last > log.initial_mean_reward {
            improved += 1;
        }
        for it in log.iterations.iter().filter(|it| it.iteration >= 2) {
            min_agreement = min_agreement.min(it.judge_agreement);
        }
        lines.push(format!("{:+.3}", last - log.initial_mean_reward));
    }
    verdict(
        improved >= 4 && min_agreement >= 0.8,
        format!(
            "reward(t=5) - reward(t=0) per seed [{}], improved {improved}/5 (>= 4), \
             min agreement at t>=2 {min_agreement:.3} (>= 0.80)",
            lines.join(", ")
        ),
    )
}

fn acceleration() -> Verdict {
    let mut z_evals = Vec::new();
    let mut s_evals = Vec::new();
    for s in SEEDS {
        let mut cfg = ExperimentConfig::default();
        cfg.override_seeds(s);
        let cmp = match compare_methods(&cfg, &[Method::Zopro, Method::Spsa, Method::FirstOrder]) {
            Ok(c) => c,
            Err(e) => return verdict(false, format!("seed {s}: {e}")),
        };
        let th = cmp.threshold.expect("first-order present");
        let hit = |m| cmp.trace(m).unwrap().evaluations_to(th).unwrap_or(usize::MAX);
        z_evals.push(hit(Method::Zopro));
        s_evals.push(hit(Method::Spsa));
    }
    let median = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v[v.len() / 2]
    };
    let (mz, ms) = (median(&z_evals), median(&s_evals));
    let wins = z_evals.iter().zip(&s_evals).filter(|(z, s)| z < s).count();
    let show = |v: &[usize]| {
        v.iter()
            .map(|&e| if e == usize::MAX { "never".to_string() } else { e.to_string() })
            .collect::<Vec<_>>()
            .join(", ")
    };
    verdict(
        mz != usize::MAX && mz <= ms && wins >= 3,
        format!(
            "evaluations to threshold zopro [{}] spsa [{}], median {} vs {}, strict wins {wins}/5 (>= 3)",
            show(&z_evals),
            show(&s_evals),
            if mz == usize::MAX { "never".into() } else { mz.to_string() },
            if ms == usize::MAX { "never".into() } else { ms.to_string() },
        ),
    )
}

fn series(label: &str, rows: Vec<Vec<f64>>) -> CheckpointSeries {
    let tags = (0..rows.len()).collect();
    CheckpointSeries::new(label, tags, rows.into_iter().map(pv).collect()).unwrap()
}

/// `scale * x * Q + shift`, Q a product of plane rotations.
fn similarity(x: &[Vec<f64>], scale: f64, shift: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut r = row.clone();
            for (k, angle) in [(0usize, 0.7f64), (2, -1.9), (1, 2.3), (3, 0.4)] {
                let (c, s) = (angle.cos(), angle.sin());
                let (a, b) = (r[k], r[k + 1]);
                r[k] = c * a - s * b;
                r[k + 1] = s * a + c * b;
            }
            r.iter().zip(shift).map(|(v, t)| scale * v + t).collect()
        })
        .collect()
}

fn brute_dcor(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let centred = |m: &[Vec<f64>]| {
        let d: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| m[i].iter().zip(&m[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                    .collect()
            })
            .collect();
        let row: Vec<f64> = d.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let col: Vec<f64> = (0..n).map(|j| d.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n)
            .map(|i| (0..n).map(|j| d[i][j] - row[i] - col[j] + all).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    };
    let (a, b) = (centred(x), centred(y));
    let mean = |p: &dyn Fn(usize, usize) -> f64| {
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| p(i, j)).sum::<f64>() / (n * n) as f64
    };
    let cov = mean(&|i, j| a[i][j] * b[i][j]);
    let vx = mean(&|i, j| a[i][j] * a[i][j]);
    let vy = mean(&|i, j| b[i][j] * b[i][j]);
    (cov / (vx * vy).sqrt()).sqrt()
}

fn rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| gaussian(derive(seed, &[i as u64]), d).into_vec()).collect()
}

fn analytics_oracles() -> Verdict {
    let mut failures = Vec::new();

    let x = rows(401, 6, 5);
    let y = similarity(&x, 2.5, &[1.0, -3.0, 0.5, 7.0, 2.0]);
    let disparity = procrustes_disparity(&series("x", x.clone()), &series("y", y.clone())).unwrap().value;
    if disparity > 1e-10 {
        failures.push(format!("procrustes {disparity:.1e}"));
    }

    let dcor_affine = distance_correlation(&series("x", x.clone()), &series("y", y)).unwrap().value;
    if (dcor_affine - 1.0).abs() > 1e-10 {
        failures.push(format!("affine dcor {dcor_affine}"));
    }
    let mut dcor_err: f64 = 0.0;
    for k in 0..10u64 {
        let a = rows(derive(402, &[k]), 6, 4);
        let b = rows(derive(403, &[k]), 6, 3);
        let got = distance_correlation(&series("a", a.clone()), &series("b", b.clone())).unwrap().value;
        dcor_err = dcor_err.max((got - brute_dcor(&a, &b)).abs());
    }
    if dcor_err > 1e-12 {
        failures.push(format!("brute-force dcor error {dcor_err:.1e}"));
    }

    let cases = [
        (vec![1.0, 0.0], vec![0.0, 3.0], 90.0),
        (vec![2.0, -1.0, 4.0], vec![2.0, -1.0, 4.0], 0.0),
        (vec![1.0, 2.0], vec![-3.0, -6.0], 180.0),
        (vec![1.0, 0.0], vec![1.0, 1.0], 45.0),
        (vec![1.0, 0.0], vec![-1.0, 3f64.sqrt()], 120.0),
    ];
    for (a, b, want) in cases {
        let got = relative_angle(&pv(a.clone()), &pv(b.clone())).unwrap();
        if (got - want).abs() > 1e-12 {
            failures.push(format!("angle {a:?} {b:?} = {got}, want {want}"));
        }
    }

    let base = gaussian(404, 30).into_vec();
    let dx = gaussian(405, 30).into_vec();
    let sx = series("x", vec![base.clone(), base.iter().zip(&dx).map(|(b, d)| b + d).collect()]);
    for (sign, want) in [(3.0, 1.0), (-0.5, -1.0)] {
        let sy = series("y", vec![base.clone(), base.iter().zip(&dx).map(|(b, d)| b + sign * d + 0.25).collect()]);
        let got = pearson_delta_correlation(&sx, &sy, 1).unwrap().value;
        if (got - want).abs() > 1e-12 {
            failures.push(format!("pearson {got}, want {want}"));
        }
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("procrustes {disparity:.1e}, affine dcor {dcor_affine:.12}, brute dcor error {dcor_err:.1e}, angles and pearson exact")
        } else {
            failures.join("; ")
        },
    )
}

fn grid_harness(tmp: &Path) -> Verdict {
    let values = [1e-3, 1e-4, 1e-5];
    let rows = match cli::grid(&ExperimentConfig::default(), &values, &values, &tmp.join("grid")) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("grid aborted: {e}")),
    };
    let written = csv::Reader::from_path(tmp.join("grid/grid.csv")).map(|mut r| r.records().count()).unwrap_or(0);
    let positive = rows.iter().filter(|r| r.final_reward_delta > 0.0).count();
    let collapsed = rows.iter().filter(|r| r.collapsed_flag).count();
    verdict(
        rows.len() == 9 && written == 9 && positive >= 1,
        format!("{} rows ({written} in grid.csv), {positive} positive, {collapsed} collapsed", rows.len()),
    )
}

fn determinism(tmp: &Path) -> Verdict {
    let cfg = ExperimentConfig::default();
    let (a, b) = (tmp.join("det_a"), tmp.join("det_b"));
    for dir in [&a, &b] {
        match cli::train(&cfg, dir) {
            Ok(o) if o.succeeded() => {}
            Ok(o) => return verdict(false, format!("run failed: {:?}", o.error)),
            Err(e) => return verdict(false, format!("run failed: {e}")),
        }
    }
    let mut files = vec![METRICS_FILE.to_string()];
    for t in 1..=cfg.n_iterations {
        for p in [policy_checkpoint(Path::new(""), t), reward_checkpoint(Path::new(""), t)] {
            files.push(p.to_string_lossy().into_owned());
        }
    }
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok().zip(std::fs::read(b.join(f)).ok()).is_none_or(|(x, y)| x != y))
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", files.len())
        } else {
            format!("differing or missing: {differing:?}")
        },
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("SPSA estimator fidelity", Duration::from_secs(10), Box::new(spsa_fidelity)),
        ("ZOPrO sampler geometry", Duration::from_secs(5), Box::new(sampler_geometry)),
        ("first-order oracle", Duration::from_secs(30), Box::new(first_order_oracle)),
        ("end-to-end loop", Duration::from_secs(300), Box::new(end_to_end)),
        ("convergence acceleration", Duration::from_secs(600), Box::new(acceleration)),
        ("analytics oracles", Duration::from_secs(5), Box::new(analytics_oracles)),
        ("grid harness", Duration::from_secs(900), Box::new(|| grid_harness(tmp.path()))),
        ("determinism", Duration::from_secs(600), Box::new(|| determinism(tmp.path()))),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name}: {} [{:.1}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
