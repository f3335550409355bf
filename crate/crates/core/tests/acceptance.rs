//! End-to-end acceptance run. Trains the pre-trained policy, runs the loop
//! with the default configuration, runs the analytical-proxy baseline, then
//! prints one PASS/FAIL line per criterion and exits nonzero on any failure.
//!
//! Takes tens of minutes on one core; run alone with
//! `cargo test -p powertune --test acceptance`.

mod common;

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::probes::{GruProbe, MlpProbe};
use common::{tiny_config, tiny_pipeline, tiny_ppo, tiny_pretrained};
use powertune::config::RunConfig;
use powertune::diffkit::{finite_diff_check, LayoutBuilder, MlpSpec, RecurrentSpec, Tape, TapeObjective, Var};
use powertune::envsim::{EnvParams, MOTORS};
use powertune::measurement::{eval_rmse, fit_normalizer, MeasurementModel, RealDataset, SequenceMse, FEATURES};
use powertune::metrics::{analytical_proxy_reward, delta_p, find_ranking_disagreement, power_report, segment_powers};
use powertune::pipeline::{collect_real, data_driven_comparison, load_state, run_baseline, save_iteration, BaselineReport, LoopState, RunStore};
use powertune::policy::{gaussian_log_prob, PolicyCheckpoint};
use powertune::realworld::{measure_idle, soc_curve};
use powertune::rl::{finetune, gae, measure_anchor_kl, pretrain, EnergySource, PretrainConfig, RewardConfig, RolloutCollector, SurrogateObjective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Net ΔP at v = 0.8 reached by the first green default run; later runs must
/// not fall more than half a point below it.
const PINNED_NET_DELTA_P: f64 = 47.99;
const RUN_BUDGET_SECONDS: f64 = 7200.0;

struct Verdicts(Vec<(usize, bool, String)>);

impl Verdicts {
    fn record(&mut self, n: usize, ok: bool, what: impl Display) {
        println!("criterion {n:>2} {} {what}", if ok { "PASS" } else { "FAIL" });
        self.0.push((n, ok, what.to_string()));
    }

    fn fail<E: Display>(&mut self, n: usize, e: E) {
        self.record(n, false, format!("error: {e}"));
    }
}

fn random_vec(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

struct MainRun {
    cfg: RunConfig,
    store: RunStore,
    pre: PolicyCheckpoint,
    state: LoopState,
    seconds: f64,
}

fn main_run(root: &Path) -> powertune::Result<MainRun> {
    let mut cfg = RunConfig::default();
    // run every iteration so the iteration curve and the last two elite sets exist
    cfg.pipeline.target_delta_p = f64::INFINITY;
    let t = Instant::now();
    let (pre, _) = pretrain(&cfg.env, &cfg.pretrain, cfg.seed)?;
    eprintln!("pretrained in {:.0} s", t.elapsed().as_secs_f64());
    let store = RunStore::new(root.join("default"));
    store.init(&pre, cfg.seed)?;
    let pipeline = cfg.pipeline()?;
    let state = pipeline.run(load_state(&store)?, cfg.pipeline.iterations, |s, o| {
        save_iteration(&store, s, o)?;
        let r = &o.record;
        eprintln!(
            "iteration {} done at {:.0} s: best {} net dP {:.2}%, model rel rmse {:.4}",
            r.iteration,
            t.elapsed().as_secs_f64(),
            r.best_id,
            r.best_net_delta_p,
            r.model_heldout_relative_rmse
        );
        Ok(())
    })?;
    Ok(MainRun {
        seconds: t.elapsed().as_secs_f64(),
        cfg,
        store,
        pre,
        state,
    })
}

fn criterion_1(v: &mut Verdicts, run: &MainRun) {
    let r = run.state.records.last().expect("at least one iteration");
    let e = &r.evaluations[&r.best_id];
    let dp = r.best_net_delta_p;
    let occ = e.report.band_occupancy;
    let ok = dp >= 15.0 && occ >= 0.8 && run.seconds <= RUN_BUDGET_SECONDS && dp >= PINNED_NET_DELTA_P - 0.5;
    v.record(
        1,
        ok,
        format!(
            "net dP at v=0.8 after {} iterations {dp:.2}% (>= 15, pinned {PINNED_NET_DELTA_P:.2} - 0.5), gross {:.2}%, occupancy {occ:.3} (>= 0.8), run {:.0} s (<= {RUN_BUDGET_SECONDS:.0})",
            run.state.records.len(),
            r.best_gross_delta_p,
            run.seconds
        ),
    );
}

fn criterion_2(v: &mut Verdicts, run: &MainRun) {
    let curve: Vec<f64> = run.state.records.iter().map(|r| r.best_net_delta_p).collect();
    let first3 = &curve[..curve.len().min(3)];
    let ok = first3.len() == 3 && first3.windows(2).all(|w| w[1] >= w[0] - 2.0);
    let shown: Vec<String> = curve.iter().map(|x| format!("{x:.2}")).collect();
    v.record(2, ok, format!("net dP per iteration [{}], non-decreasing over the first 3 within 2 points", shown.join(", ")));
}

fn criterion_3(v: &mut Verdicts, run: &MainRun, baseline: &BaselineReport) {
    let dd = data_driven_comparison(&run.state.records, 2);
    let a = baseline.comparison.correlation;
    let ok = matches!((dd.correlation, a), (Some(d), Some(a)) if d > 0.0 && a < d);
    let pipeline_steps: usize = run.state.records.iter().map(|r| r.real_steps).sum();
    let fmt = |c: Option<f64>| c.map_or("undefined".into(), |x| format!("{x:.3}"));
    v.record(
        3,
        ok,
        format!(
            "data-driven correlation {} over {} elites (> 0); analytical {} over {} (< data-driven); best baseline net dP {:.2}%; real steps pipeline {pipeline_steps}, baseline {}",
            fmt(dd.correlation),
            dd.predicted.len(),
            fmt(a),
            baseline.comparison.predicted.len(),
            baseline.best_net_delta_p,
            baseline.real_steps
        ),
    );
}

fn criterion_4(v: &mut Verdicts, run: &MainRun, baseline_policies: &[PolicyCheckpoint]) -> powertune::Result<()> {
    let model0 = MeasurementModel::load(&run.store.iter_dir(0).join("model.ckpt"))?;
    let in_dist = model0.heldout_relative_rmse;
    let cfg = &run.cfg;
    // the most distant unconstrained baseline policy
    let mut far: Option<(f64, &PolicyCheckpoint)> = None;
    for p in baseline_policies.iter().filter(|p| p.config_tag.as_ref().is_some_and(|t| t.kl_bound.is_none())) {
        let kl = measure_anchor_kl(&cfg.env, &cfg.pipeline.commands, p, &run.pre, 8, 500, 91)?;
        if far.is_none_or(|(k, _)| kl > k) {
            far = Some((kl, p));
        }
    }
    let (kl, ood) = far.expect("baseline grid has an unconstrained column");
    let data = RealDataset::from_trajectories(collect_real(&cfg.real(), &[ood], cfg.pipeline.episodes_per_command, &cfg.pipeline.commands, 0, 92)?)?;
    let (_, ood_rel) = eval_rmse(&model0, &data)?;
    let ok = in_dist <= 0.10 && kl >= 1.0 && ood_rel > in_dist;
    v.record(
        4,
        ok,
        format!(
            "held-out relative RMSE on pre-trained data {in_dist:.4} (<= 0.10); policy {} at KL {kl:.2} (>= 1) gives {ood_rel:.4} (> in-distribution)",
            ood.id
        ),
    );
    Ok(())
}

fn criterion_5(v: &mut Verdicts, run: &MainRun, baseline: &BaselineReport) -> powertune::Result<()> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut ok = true;
    let all = run.state.records.iter().flat_map(|r| r.candidates.iter()).chain(baseline.candidates.iter());
    for c in all {
        if let Some(bound) = c.tag.kl_bound {
            let kl = c.anchor_kl.unwrap_or(f64::INFINITY);
            ok &= kl <= 1.5 * bound;
            worst = worst.max(kl / bound);
            checked += 1;
        }
    }
    let cfg = &run.cfg;
    let pipeline = cfg.pipeline()?;
    let model0 = MeasurementModel::load(&run.store.iter_dir(0).join("model.ckpt"))?;
    let tight = finetune(
        &cfg.env,
        &run.pre,
        EnergySource::Model(&model0),
        &cfg.pipeline.reward.with_lambda(5.0),
        Some(1e-6),
        &cfg.pipeline.finetune,
        &cfg.pipeline.commands,
        93,
        "tight",
    )?;
    let e = pipeline.evaluate(&tight.policy, &run.pre, 0.0)?;
    let dp = e.net_delta_p.unwrap_or(f64::NAN);
    ok &= dp.abs() <= 3.0;
    v.record(
        5,
        ok,
        format!("{checked} bounded candidates, max measured KL/c {worst:.3} (<= 1.5); c=1e-6 policy real net dP {dp:.3}% (|.| <= 3)"),
    );
    Ok(())
}

fn criterion_6(v: &mut Verdicts) {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    check("delta_p(100, 75) = 25", delta_p(100.0, 75.0).unwrap() == 25.0);
    check("delta_p(x, x) = 0", delta_p(37.5, 37.5).unwrap() == 0.0);
    check("delta_p(0, x) rejected", delta_p(0.0, 1.0).is_err());
    let n = 150;
    let segs = segment_powers(&vec![5.0; n], &vec![0.8; n], 0.8, 0.02).unwrap();
    check("3 s at 5 A -> 3 segments", segs.len() == 3 && segs.iter().all(|s| (s.charge - 5.0).abs() <= 1e-12));
    let mut vel = vec![0.8; n];
    vel[60] = 0.88 * 0.8;
    let segs = segment_powers(&vec![5.0; n], &vel, 0.8, 0.02).unwrap();
    check("0.88 v sample excludes its window", segs.len() == 2 && segs.iter().all(|s| s.start_step != 50));
    let mut vel = vec![0.8; 50];
    vel[10] = 0.8 * 1.1;
    check("band edge 1.1 v kept", segment_powers(&[2.0; 50], &vel, 0.8, 0.02).unwrap().len() == 1);
    check("short trace -> no segments", segment_powers(&[1.0; 49], &[0.8; 49], 0.8, 0.02).unwrap().is_empty());
    let segs = segment_powers(&vec![3.0; n], &vec![0.8; n], 0.8, 0.02).unwrap();
    let r = power_report("p", &vec![3.0; n], &vec![0.8; n], 0.8, 0.02, 24.0, 0.5, segs);
    let (g, nt) = (r.gross_power.unwrap(), r.net_power.unwrap());
    check("gross = mean current x V", (g - 72.0).abs() <= 1e-12);
    check("net = gross - idle x V", (nt - (g - 0.5 * 24.0)).abs() <= 1e-12 && nt <= g);
    let one = |t: f64, q: f64| analytical_proxy_reward(&[t, 0.0, 0.0, 0.0], &[q, 0.0, 0.0, 0.0], &[0.1, 0.0, 0.0, 0.0]);
    check("proxy positive branch -2.1", (one(1.0, 2.0) + 2.1).abs() <= 1e-12);
    check("proxy clip branch 0", one(1.0, -2.0) == 0.0);
    check("proxy zeros 0", analytical_proxy_reward(&[0.0; MOTORS], &[0.0; MOTORS], &[4.0; MOTORS]) == 0.0);
    let ok = fails.is_empty();
    v.record(6, ok, if ok { "delta_p, segment band filter, net/gross identity and proxy branches exact".to_string() } else { format!("mismatches: {}", fails.join("; ")) });
}

fn criterion_7(v: &mut Verdicts) -> powertune::Result<()> {
    const TOL: f64 = 1e-4;
    let mut worst: Vec<(String, f64, bool)> = Vec::new();

    let spec = MlpSpec::new(11, &[16, 16], 4);
    let mlp = MlpProbe {
        spec: spec.clone(),
        inputs: random_vec(5 * 11, 1, 1.0),
        batch: 5,
        weights: random_vec(5 * 4, 2, 1.0),
    };
    let r = finite_diff_check(&mlp, spec.init(3).values(), TOL, 4);
    worst.push(("mlp".into(), r.max_rel_err, r.passed));

    let rspec = RecurrentSpec::new(FEATURES, 8, 1);
    let gru = GruProbe {
        spec: rspec.clone(),
        inputs: random_vec(12 * 3 * FEATURES, 5, 1.0),
        batch: 3,
        steps: 12,
        weights: random_vec(12 * 3, 6, 1.0),
    };
    let r = finite_diff_check(&gru, rspec.init(7).values(), TOL, 8);
    worst.push(("recurrent".into(), r.max_rel_err, r.passed));

    let action = [0.4, -0.9, 1.3, 0.0];
    let lp = TapeObjective {
        loss_fn: move |tape: &mut Tape, p: &[Var]| {
            let mut terms = Vec::new();
            for k in 0..MOTORS {
                let a = tape.var(action[k]);
                let d = tape.sub(a, p[k]);
                let nls = tape.neg(p[MOTORS + k]);
                let inv = tape.exp(nls);
                let z = tape.mul(d, inv);
                let z2 = tape.square(z);
                let h = tape.scale(z2, -0.5);
                terms.push(tape.add(h, nls));
            }
            let s = tape.sum(&terms);
            tape.add_const(s, -0.5 * MOTORS as f64 * (2.0 * std::f64::consts::PI).ln())
        },
        layout: LayoutBuilder::default().push("theta", 2 * MOTORS, 1).finish(),
    };
    let theta = [0.1, -0.3, 0.9, 0.2, -0.5, -1.0, 0.3, -0.2];
    use powertune::diffkit::Objective;
    let same = (lp.value(&theta) - gaussian_log_prob(&theta[..MOTORS], &theta[MOTORS..], &action)).abs() <= 1e-12;
    let r = finite_diff_check(&lp, &theta, TOL, 9);
    worst.push(("log-prob".into(), r.max_rel_err, r.passed && same));

    let policy = PolicyCheckpoint::fresh("p", &[16, 16], -0.6, 10)?;
    let anchor = PolicyCheckpoint::fresh("a", &[16, 16], -0.4, 11)?;
    let mut col = RolloutCollector::new(&EnvParams::default(), &[0.5, 1.1], EnergySource::AnalyticalProxy([4.0; MOTORS]), 2, 12)?;
    let mut reward = RewardConfig::default().with_lambda(0.01);
    let batch = col.collect(&policy, None, &mut reward, 50, true)?;
    let adv = gae(&batch, 0.99, 0.95);
    let n = batch.len();
    let sur = SurrogateObjective {
        spec: policy.spec.clone(),
        obs: batch.obs.clone(),
        actions: batch.actions.clone(),
        old_log_probs: batch.log_probs.clone(),
        advantages: adv.advantages.clone(),
        anchor_means: Some(anchor.mean_batch(&batch.obs, n).output().to_vec()),
        anchor_log_std: Some(anchor.log_std.clone()),
        clip: 0.2,
        beta: 0.8,
        entropy_coef: 0.01,
    };
    let mut th: Vec<f64> = policy.params.values().to_vec();
    th.extend(&policy.log_std);
    let noise = random_vec(th.len(), 13, 0.05);
    th.iter_mut().zip(noise).for_each(|(t, d)| *t += d);
    let r = finite_diff_check(&sur, &th, TOL, 14);
    worst.push(("ppo surrogate".into(), r.max_rel_err, r.passed));

    let pipeline = tiny_pipeline();
    let data = RealDataset::from_trajectories(collect_real(&pipeline.real, &[&tiny_pretrained()], 2, &[0.5, 1.1], 0, 15)?)?;
    let norm = fit_normalizer(&data)?;
    let mspec = RecurrentSpec::new(FEATURES, 6, 1);
    let mse = SequenceMse {
        spec: &mspec,
        trajectories: data.trajectories().iter().collect(),
        normalizer: &norm,
    };
    let r = finite_diff_check(&mse, mspec.init(16).values(), TOL, 17);
    worst.push(("measurement mse".into(), r.max_rel_err, r.passed));

    let ok = worst.iter().all(|w| w.2);
    let shown: Vec<String> = worst.iter().map(|(n, e, p)| format!("{n} {e:.1e}{}", if *p { "" } else { " FAILED" })).collect();
    v.record(7, ok, format!("finite-difference max relative error (<= 1e-4): {}", shown.join(", ")));
    Ok(())
}

fn cli(root: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_powertune"))
        .args(args)
        .env("POWERTUNE_RUNS_ROOT", root)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_session(root: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = root.join("cfg.toml");
    tiny_config().save(&cfg).unwrap();
    let c = cfg.to_str().unwrap();
    let init = root.join("init.toml");
    let init = init.to_str().unwrap();
    RunStore::new(root.join("fixture")).init(&tiny_pretrained(), tiny_config().seed).unwrap();
    let steps: [&[&str]; 7] = [
        &["init-config", "--out", init],
        &["pretrain", "--config", c, "--run", "trained"],
        &["iterate", "--config", c, "--run", "fixture", "-n", "2"],
        &["evaluate", "--config", c, "--run", "fixture", "--policy", "best"],
        &["compare-baseline", "--config", c, "--run", "fixture"],
        &["report", "--run", "fixture"],
        &["report", "--run", "fixture"],
    ];
    let mut ok = true;
    for s in steps {
        ok &= cli(root, s);
    }
    let mut files = Vec::new();
    if !ok {
        files.push(("exit status".to_string(), b"failed".to_vec()));
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn criterion_8(v: &mut Verdicts) -> powertune::Result<()> {
    let env = common::tiny_env();
    let pcfg = PretrainConfig {
        ppo: tiny_ppo(),
        hidden: vec![8],
        eval_every: 1,
        min_occupancy: 0.0,
        ..PretrainConfig::default()
    };
    let pre_same = pretrain(&env, &pcfg, 1)? == pretrain(&env, &pcfg, 1)?;
    let anchor = tiny_pretrained();
    let reward = RewardConfig::default().with_lambda(0.5);
    let ft = || finetune(&env, &anchor, EnergySource::AnalyticalProxy([4.0; MOTORS]), &reward, Some(0.5), &tiny_ppo(), &[0.8], 3, "x");
    let (a, b) = (ft()?, ft()?);
    let ft_same = a.policy == b.policy && a.stats == b.stats;
    let pl = tiny_pipeline();
    let s = LoopState::new(tiny_pretrained(), 4);
    let (x, ox) = pl.run_iteration(&s)?;
    let (y, oy) = pl.run_iteration(&s)?;
    let it_same = x == y && ox.record == oy.record && ox.model == oy.model;
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let s1 = cli_session(d1.path());
    let s2 = cli_session(d2.path());
    let cli_same = s1 == s2 && !s1.iter().any(|(n, _)| n == "exit status");
    let ok = pre_same && ft_same && it_same && cli_same;
    v.record(
        8,
        ok,
        format!("bit-identical reruns: pretrain {pre_same}, finetune {ft_same}, run_iteration {it_same}, CLI session ({} files) {cli_same}", s1.len()),
    );
    Ok(())
}

fn criterion_9(v: &mut Verdicts, run: &MainRun) -> powertune::Result<()> {
    let real = run.cfg.real();
    let schedule = [(0.5, 60.0), (0.8, 60.0), (1.1, 60.0)];
    let fine = soc_curve(&real, &run.state.best, &schedule, 1.0)?;
    let pre = soc_curve(&real, &run.pre, &schedule, 1.0)?;
    let marks = fine.len().min(pre.len());
    let (dist, f, p) = (fine[marks - 1].0, fine[marks - 1].1, pre[marks - 1].1);
    v.record(9, f >= p && marks > 1, format!("SoC after {dist:.0} m: fine-tuned {f:.6} >= pre-trained {p:.6}"));
    Ok(())
}

fn criterion_10(v: &mut Verdicts, cfg: &RunConfig) {
    let levels: Vec<f64> = (0..=12).map(|k| k as f64 * 0.25).collect();
    let found = find_ranking_disagreement(&cfg.real(), &cfg.baseline.r_over_k2, &cfg.env.gear_ratios, 0.8, 10.0, &levels, 0.25);
    match found {
        Some(d) => v.record(
            10,
            d.proxy_costs.0 < d.proxy_costs.1 && d.oracle_currents.0 > d.oracle_currents.1,
            format!(
                "at v=0.8 the proxy ranks {:?} below {:?} ({:.2} < {:.2} W) while the real twin draws {:.3} A vs {:.3} A",
                d.proxy_prefers, d.oracle_prefers, d.proxy_costs.0, d.proxy_costs.1, d.oracle_currents.0, d.oracle_currents.1
            ),
        ),
        None => v.record(10, false, "no disagreeing action pair on the grid"),
    }
}

fn main() {
    // cargo passes harness flags such as --list; only a plain run does work
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let mut v = Verdicts(Vec::new());
    let t = Instant::now();

    criterion_6(&mut v);
    if let Err(e) = criterion_7(&mut v) {
        v.fail(7, e);
    }
    criterion_10(&mut v, &RunConfig::default());
    if let Err(e) = criterion_8(&mut v) {
        v.fail(8, e);
    }

    let root = tempfile::tempdir().expect("temp dir");
    match main_run(root.path()) {
        Ok(run) => {
            criterion_1(&mut v, &run);
            criterion_2(&mut v, &run);
            let pipeline = run.cfg.pipeline().expect("validated");
            match run_baseline(&pipeline, &run.pre, &run.cfg.baseline, run.cfg.seed) {
                Ok((baseline, policies)) => {
                    eprintln!("baseline done at {:.0} s", t.elapsed().as_secs_f64());
                    criterion_3(&mut v, &run, &baseline);
                    if let Err(e) = criterion_4(&mut v, &run, &policies) {
                        v.fail(4, e);
                    }
                    if let Err(e) = criterion_5(&mut v, &run, &baseline) {
                        v.fail(5, e);
                    }
                }
                Err(e) => {
                    for n in [3, 4, 5] {
                        v.fail(n, &e);
                    }
                }
            }
            if let Err(e) = criterion_9(&mut v, &run) {
                v.fail(9, e);
            }
            let idle = measure_idle(&run.cfg.real());
            eprintln!("idle current {idle:.3} A");
        }
        Err(e) => {
            for n in [1, 2, 3, 4, 5, 9] {
                v.fail(n, &e);
            }
        }
    }

    v.0.sort_by_key(|x| x.0);
    println!("acceptance summary ({:.0} s):", t.elapsed().as_secs_f64());
    for (n, ok, what) in &v.0 {
        println!("  {n:>2} {} {what}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed = v.0.iter().filter(|x| !x.1).count();
    println!("{} of {} criteria passed", v.0.len() - failed, v.0.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
