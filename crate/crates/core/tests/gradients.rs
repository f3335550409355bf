//! Hand-derived backward passes against finite differences and against an
//! independent reverse-mode re-implementation built on the scalar tape.

mod common;

use powertune::diffkit::{finite_diff_check, grad, MlpSpec, Objective, ParamVector, RecurrentSpec, Tape, TapeObjective, Var};
use powertune::envsim::EnvParams;
use powertune::measurement::{fit_normalizer, RealDataset, SequenceMse, FEATURES};
use powertune::pipeline::collect_real;
use powertune::policy::{gaussian_log_prob, PolicyCheckpoint};
use powertune::realworld::RealParams;
use powertune::rl::{gae, EnergySource, RewardConfig, RolloutCollector, SurrogateObjective};
use common::probes::{GruProbe, MlpProbe};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random_vec(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "index {i}: {x} vs {y}");
    }
}

fn mlp_on_tape(tape: &mut Tape, leaves: &[Var], dims: &[usize], input: &[f64]) -> Vec<Var> {
    let mut x: Vec<Var> = input.iter().map(|&v| tape.var(v)).collect();
    let mut off = 0;
    for (k, w) in dims.windows(2).enumerate() {
        let (inp, out) = (w[0], w[1]);
        let weights = &leaves[off..off + inp * out];
        let bias = &leaves[off + inp * out..off + inp * out + out];
        off += inp * out + out;
        let mut y = Vec::with_capacity(out);
        for o in 0..out {
            let z = tape.dot(&weights[o * inp..(o + 1) * inp], &x);
            let z = tape.add(z, bias[o]);
            y.push(if k + 2 < dims.len() { tape.tanh(z) } else { z });
        }
        x = y;
    }
    x
}

#[test]
fn mlp_backward_matches_fd_and_tape() {
    let dims = [5, 7, 6, 3];
    let spec = MlpSpec::new(5, &[7, 6], 3);
    let batch = 4;
    let probe = MlpProbe {
        spec: spec.clone(),
        inputs: random_vec(batch * 5, 1, 1.5),
        batch,
        weights: random_vec(batch * 3, 2, 1.0),
    };
    let params = spec.init(3);
    let report = finite_diff_check(&probe, params.values(), TOL, 4);
    assert!(report.passed, "{report:?}");

    let (inputs, weights) = (probe.inputs.clone(), probe.weights.clone());
    let (value, tape_grad) = grad(
        |tape, leaves| {
            let mut terms = Vec::new();
            for b in 0..batch {
                let y = mlp_on_tape(tape, leaves, &dims, &inputs[b * 5..(b + 1) * 5]);
                for (k, yk) in y.into_iter().enumerate() {
                    terms.push(tape.scale(yk, weights[b * 3 + k]));
                }
            }
            tape.sum(&terms)
        },
        &params,
    )
    .unwrap();
    assert!((value - probe.value(params.values())).abs() < 1e-12);
    assert_close(&probe.gradient(params.values()), tape_grad.values(), 1e-10);
}

/// Same cell written directly from its equations on the tape.
fn gru_on_tape(tape: &mut Tape, p: &[Var], ni: usize, hd: usize, no: usize, xs: &[&[f64]]) -> Vec<Var> {
    let w_ih = 0;
    let w_hh = w_ih + 3 * hd * ni;
    let b_ih = w_hh + 3 * hd * hd;
    let b_hh = b_ih + 3 * hd;
    let w_out = b_hh + 3 * hd;
    let b_out = w_out + no * hd;
    let mut h: Vec<Var> = (0..hd).map(|_| tape.var(0.0)).collect();
    let mut outs = Vec::new();
    for x in xs {
        let xv: Vec<Var> = x.iter().map(|&v| tape.var(v)).collect();
        let mut gi = Vec::new();
        let mut gh = Vec::new();
        for row in 0..3 * hd {
            let a = tape.dot(&p[w_ih + row * ni..w_ih + (row + 1) * ni], &xv);
            gi.push(tape.add(a, p[b_ih + row]));
            let b = tape.dot(&p[w_hh + row * hd..w_hh + (row + 1) * hd], &h);
            gh.push(tape.add(b, p[b_hh + row]));
        }
        let mut next = Vec::with_capacity(hd);
        for j in 0..hd {
            let r = tape.add(gi[j], gh[j]);
            let r = tape.sigmoid(r);
            let z = tape.add(gi[hd + j], gh[hd + j]);
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, gh[2 * hd + j]);
            let n = tape.add(gi[2 * hd + j], rn);
            let n = tape.tanh(n);
            // h' = n + z (h − n)
            let d = tape.sub(h[j], n);
            let zd = tape.mul(z, d);
            next.push(tape.add(n, zd));
        }
        h = next;
        for o in 0..no {
            let y = tape.dot(&p[w_out + o * hd..w_out + (o + 1) * hd], &h);
            outs.push(tape.add(y, p[b_out + o]));
        }
    }
    outs
}

#[test]
fn recurrent_backward_matches_fd_and_tape() {
    let (ni, hd, no, batch, steps) = (3, 5, 2, 2, 6);
    let spec = RecurrentSpec::new(ni, hd, no);
    let probe = GruProbe {
        spec: spec.clone(),
        inputs: random_vec(steps * batch * ni, 7, 1.0),
        batch,
        steps,
        weights: random_vec(steps * batch * no, 8, 1.0),
    };
    let mut params = spec.init(9);
    // nonzero biases so every bias path is exercised
    let noisy: Vec<f64> = params.values().iter().zip(random_vec(params.len(), 10, 0.2)).map(|(a, b)| a + b).collect();
    params = params.with_values(noisy).unwrap();
    let report = finite_diff_check(&probe, params.values(), TOL, 11);
    assert!(report.passed, "{report:?}");

    let (inputs, weights) = (probe.inputs.clone(), probe.weights.clone());
    let (value, tape_grad) = grad(
        |tape, leaves| {
            let mut terms = Vec::new();
            for b in 0..batch {
                let xs: Vec<&[f64]> = (0..steps).map(|t| &inputs[(t * batch + b) * ni..(t * batch + b + 1) * ni]).collect();
                let ys = gru_on_tape(tape, leaves, ni, hd, no, &xs);
                for (t, chunk) in ys.chunks(no).enumerate() {
                    for (o, y) in chunk.iter().enumerate() {
                        terms.push(tape.scale(*y, weights[(t * batch + b) * no + o]));
                    }
                }
            }
            tape.sum(&terms)
        },
        &params,
    )
    .unwrap();
    assert!((value - probe.value(params.values())).abs() < 1e-10);
    assert_close(&probe.gradient(params.values()), tape_grad.values(), 1e-9);
}

#[test]
fn gaussian_log_prob_gradient() {
    // θ = [mean (3), log_std (3)], action fixed
    let action = [0.3, -1.2, 0.8];
    let theta = ParamVector::from_parts(vec![0.1, -0.7, 1.1, -0.4, 0.2, -1.3], powertune::diffkit::LayoutBuilder::default().push("theta", 6, 1).finish()).unwrap();
    let loss = move |tape: &mut Tape, v: &[Var]| {
        let mut terms = Vec::new();
        for k in 0..3 {
            let a = tape.var(action[k]);
            let diff = tape.sub(a, v[k]);
            let neg_ls = tape.neg(v[3 + k]);
            let inv_std = tape.exp(neg_ls);
            let z = tape.mul(diff, inv_std);
            let z2 = tape.square(z);
            let half = tape.scale(z2, -0.5);
            let t = tape.add(half, neg_ls);
            terms.push(t);
        }
        let s = tape.sum(&terms);
        tape.add_const(s, -1.5 * (2.0 * std::f64::consts::PI).ln())
    };
    let obj = TapeObjective {
        loss_fn: loss,
        layout: theta.layout().to_vec(),
    };
    let v = theta.values();
    assert!((obj.value(v) - gaussian_log_prob(&v[..3], &v[3..], &action)).abs() < 1e-12);
    let report = finite_diff_check(&obj, v, TOL, 0);
    assert!(report.passed, "{report:?}");
    // closed form: ∂/∂μ = z/σ, ∂/∂log σ = z² − 1
    let g = obj.gradient(v);
    for k in 0..3 {
        let s = v[3 + k].exp();
        let z = (action[k] - v[k]) / s;
        assert!((g[k] - z / s).abs() < 1e-12);
        assert!((g[3 + k] - (z * z - 1.0)).abs() < 1e-12);
    }
}

#[test]
fn ppo_surrogate_gradient() {
    let policy = PolicyCheckpoint::fresh("p", &[16, 16], -0.6, 21).unwrap();
    let anchor = PolicyCheckpoint::fresh("a", &[16, 16], -0.4, 22).unwrap();
    let mut c = RolloutCollector::new(&EnvParams::default(), &[0.5, 1.1], EnergySource::AnalyticalProxy([4.0; 4]), 2, 23).unwrap();
    let mut reward = RewardConfig::default().with_lambda(0.01);
    let batch = c.collect(&policy, None, &mut reward, 50, true).unwrap();
    let adv = gae(&batch, 0.99, 0.95);
    let n = batch.len();
    for beta in [0.0, 0.8] {
        let obj = SurrogateObjective {
            spec: policy.spec.clone(),
            obs: batch.obs.clone(),
            actions: batch.actions.clone(),
            old_log_probs: batch.log_probs.clone(),
            advantages: adv.advantages.clone(),
            anchor_means: Some(anchor.mean_batch(&batch.obs, n).output().to_vec()),
            anchor_log_std: Some(anchor.log_std.clone()),
            clip: 0.2,
            beta,
            entropy_coef: 0.01,
        };
        let mut theta: Vec<f64> = policy.params.values().to_vec();
        theta.extend(&policy.log_std);
        // step off ratio = 1 so both clip branches are populated
        let noise = random_vec(theta.len(), 24, 0.05);
        for (t, d) in theta.iter_mut().zip(noise) {
            *t += d;
        }
        let report = finite_diff_check(&obj, &theta, TOL, 25);
        assert!(report.passed, "beta {beta}: {report:?}");
    }
}

#[test]
fn measurement_mse_gradient() {
    let real = RealParams::default().with_episode_len(40);
    let p = PolicyCheckpoint::fresh("pre", &[8], -0.8, 31).unwrap();
    let trajs = collect_real(&real, &[&p], 2, &[0.5, 1.1], 0, 32).unwrap();
    let dataset = RealDataset::from_trajectories(trajs).unwrap();
    let norm = fit_normalizer(&dataset).unwrap();
    let spec = RecurrentSpec::new(FEATURES, 6, 1);
    let obj = SequenceMse {
        spec: &spec,
        trajectories: dataset.trajectories().iter().collect(),
        normalizer: &norm,
    };
    let params = spec.init(33);
    let report = finite_diff_check(&obj, params.values(), TOL, 34);
    assert!(report.passed, "{report:?}");
    assert!(obj.value(params.values()) > 0.0);
}
