//! Power measurement and analysis: one-second segment integration under a
//! velocity-band filter, gross/net power and ΔP, the alternating head-to-head
//! protocol, the analytical energy proxy, and proxy-vs-real correlation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envsim::{self, Torques, MOTORS, OBS_DIM};
use crate::error::{Error, Result};
use crate::persist;
use crate::policy::PolicyCheckpoint;
use crate::realworld::{self, RealParams};

pub const REPORT_SCHEMA: &str = "powertune.power-report/1";
pub const SEGMENT_TABLE_HEADER: &str = "policy\tcommand\tstart_step\tcharge\tmean_velocity\tnet_power";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_step: usize,
    /// Integrated current over the window, A·s.
    pub charge: f64,
    pub mean_velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub policy_id: String,
    pub command: f64,
    pub segments: Vec<Segment>,
    pub segment_seconds: f64,
    pub bus_voltage: f64,
    /// Idle draw, A.
    pub idle_current: f64,
    /// Mean segment current × bus voltage, W. `None` when no segment qualified.
    pub gross_power: Option<f64>,
    /// Gross minus idle × voltage, W.
    pub net_power: Option<f64>,
    pub band_occupancy: f64,
    pub steps: usize,
}

impl PowerReport {
    /// Net power of each segment, W.
    pub fn segment_net_powers(&self) -> Vec<f64> {
        self.segments
            .iter()
            .map(|s| (s.charge / self.segment_seconds - self.idle_current) * self.bus_voltage)
            .collect()
    }

    /// Usable for selection: some qualifying segment and band occupancy at least `min_occupancy`.
    pub fn is_eligible(&self, min_occupancy: f64) -> bool {
        self.net_power.is_some() && self.band_occupancy >= min_occupancy
    }
}

/// Samples per one-second window at step `dt`.
fn window_len(dt: f64) -> Result<usize> {
    let w = (1.0 / dt).round();
    if !(dt > 0.0) || w < 1.0 || ((w * dt) - 1.0).abs() > 1e-9 {
        return Err(Error::rejected(format!("dt {dt} does not tile one second")));
    }
    Ok(w as usize)
}

/// Tile the traces into consecutive one-second windows and keep those whose
/// every velocity sample lies in the command band; each kept window's current
/// is integrated by the rectangle rule.
pub fn segment_powers(current: &[f64], velocity: &[f64], command: f64, dt: f64) -> Result<Vec<Segment>> {
    if current.len() != velocity.len() {
        return Err(Error::rejected(format!(
            "{} current samples but {} velocity samples",
            current.len(),
            velocity.len()
        )));
    }
    let w = window_len(dt)?;
    Ok(current
        .chunks_exact(w)
        .zip(velocity.chunks_exact(w))
        .enumerate()
        .filter(|(_, (_, v))| v.iter().all(|x| envsim::in_band(*x, command)))
        .map(|(k, (c, v))| Segment {
            start_step: k * w,
            charge: c.iter().sum::<f64>() * dt,
            mean_velocity: v.iter().sum::<f64>() / w as f64,
        })
        .collect())
}

/// `(p_pre − p_fine) / p_pre × 100`.
pub fn delta_p(p_pre: f64, p_fine: f64) -> Result<f64> {
    if !(p_pre > 0.0) {
        return Err(Error::rejected(format!("reference power {p_pre} must be > 0")));
    }
    Ok((p_pre - p_fine) / p_pre * 100.0)
}

/// Build a report from per-step traces.
#[allow(clippy::too_many_arguments)]
pub fn power_report(
    policy_id: &str,
    current: &[f64],
    velocity: &[f64],
    command: f64,
    dt: f64,
    bus_voltage: f64,
    idle_current: f64,
    segments: Vec<Segment>,
) -> PowerReport {
    let secs = window_len(dt).map(|w| w as f64 * dt).unwrap_or(1.0);
    let gross = (!segments.is_empty())
        .then(|| segments.iter().map(|s| s.charge / secs).sum::<f64>() / segments.len() as f64 * bus_voltage);
    let inside = velocity.iter().filter(|v| envsim::in_band(**v, command)).count();
    PowerReport {
        policy_id: policy_id.to_string(),
        command,
        segments,
        segment_seconds: secs,
        bus_voltage,
        idle_current,
        gross_power: gross,
        net_power: gross.map(|g| g - idle_current * bus_voltage),
        band_occupancy: if velocity.is_empty() { 0.0 } else { inside as f64 / velocity.len() as f64 },
        steps: current.len(),
    }
}

/// Alternate `a` and `b` in blocks within one continuous real run (thermal
/// and charge state carried across blocks, `a` first). Each policy's windows
/// are tiled within its own blocks.
pub fn head_to_head(
    real: &RealParams,
    policy_a: &PolicyCheckpoint,
    policy_b: &PolicyCheckpoint,
    command: f64,
    block_seconds: f64,
    total_seconds: f64,
    seed: u64,
) -> Result<(PowerReport, PowerReport)> {
    for p in [policy_a, policy_b] {
        if p.obs_dim() != OBS_DIM || p.action_dim() != MOTORS {
            return Err(Error::rejected(format!("policy {} does not match the environment", p.id)));
        }
    }
    let dt = real.dt();
    let block = (block_seconds / dt).round() as usize;
    let total = (total_seconds / dt).round() as usize;
    if block == 0 || total % (2 * block) != 0 {
        return Err(Error::rejected("total time must be an even number of blocks"));
    }
    let run = real.with_episode_len(total);
    let mut state = realworld::real_reset(&run, command, seed, 1.0)?;
    let mut traces = [(Vec::new(), Vec::new(), Vec::new()), (Vec::new(), Vec::new(), Vec::new())];
    for b in 0..total / block {
        let who = b % 2;
        let policy = if who == 0 { policy_a } else { policy_b };
        let (mut cur, mut vel) = (Vec::with_capacity(block), Vec::with_capacity(block));
        for _ in 0..block {
            let action = policy.mean_action(&envsim::observe(&state.env_state))?;
            let (next, sample, _) = realworld::real_step(&run, &state, &action)?;
            state = next;
            cur.push(sample.current);
            vel.push(state.env_state.cart_velocity);
        }
        let offset = traces[who].0.len();
        let segs = segment_powers(&cur, &vel, command, dt)?;
        traces[who].2.extend(segs.into_iter().map(|mut s| {
            s.start_step += offset;
            s
        }));
        traces[who].0.extend(cur);
        traces[who].1.extend(vel);
    }
    let idle = realworld::measure_idle(real);
    let [(ca, va, sa), (cb, vb, sb)] = traces;
    let v = real.bus_voltage();
    Ok((
        power_report(&policy_a.id, &ca, &va, command, dt, v, idle, sa),
        power_report(&policy_b.id, &cb, &vb, command, dt, v, idle, sb),
    ))
}

/// Analytical energy reward: `−Σ max(τᵢ q̇ᵢ + (r/k²)ᵢ τᵢ², 0)`, in watts.
pub fn analytical_proxy_reward(torques: &Torques, motor_velocities: &Torques, r_over_k2: &[f64; MOTORS]) -> f64 {
    -(0..MOTORS)
        .map(|i| (torques[i] * motor_velocities[i] + r_over_k2[i] * torques[i] * torques[i]).max(0.0))
        .sum::<f64>()
}

/// Paired (proxy-predicted, measured) reductions for one proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyComparison {
    pub proxy: String,
    pub policy_ids: Vec<String>,
    pub predicted: Vec<f64>,
    pub measured: Vec<f64>,
    pub correlation: Option<f64>,
}

/// Pearson correlation of predicted against measured reductions.
pub fn proxy_correlation(predicted: &[f64], measured: &[f64]) -> Result<f64> {
    if predicted.len() != measured.len() || predicted.len() < 3 {
        return Err(Error::rejected("need at least three paired values"));
    }
    let n = predicted.len() as f64;
    let mx = predicted.iter().sum::<f64>() / n;
    let my = measured.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in predicted.iter().zip(measured) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::rejected("correlation undefined for zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Each fine-tuned segment's net power over the mean pre-trained net power.
pub fn normalized_power_distribution(report_fine: &PowerReport, reports_pre: &[PowerReport]) -> Result<Vec<f64>> {
    let pre: Vec<f64> = reports_pre.iter().filter_map(|r| r.net_power).collect();
    if pre.is_empty() || report_fine.segments.is_empty() {
        return Err(Error::rejected("need qualifying segments on both sides"));
    }
    let mean = pre.iter().sum::<f64>() / pre.len() as f64;
    if mean == 0.0 {
        return Err(Error::rejected("mean pre-trained net power is zero"));
    }
    Ok(report_fine.segment_net_powers().iter().map(|p| p / mean).collect())
}

/// A pair of equal-force actions ranked differently by the proxy and the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingDisagreement {
    pub cart_velocity: f64,
    /// Cheaper by the proxy, dearer by the oracle.
    pub proxy_prefers: Torques,
    pub oracle_prefers: Torques,
    pub proxy_costs: (f64, f64),
    pub oracle_currents: (f64, f64),
}

/// Grid search over torque allocations producing `force` (±`tolerance`) at
/// `cart_velocity`. Returns the pair with the largest oracle-current gap
/// among those the proxy ranks the other way.
pub fn find_ranking_disagreement(
    real: &RealParams,
    r_over_k2: &[f64; MOTORS],
    gear_ratios: &Torques,
    cart_velocity: f64,
    force: f64,
    torque_levels: &[f64],
    tolerance: f64,
) -> Option<RankingDisagreement> {
    let qd = gear_ratios.map(|g| g * cart_velocity);
    let l = torque_levels.len();
    let mut pool: Vec<(Torques, f64, f64)> = Vec::new();
    for code in 0..l.pow(MOTORS as u32) {
        let mut c = code;
        let tau: Torques = std::array::from_fn(|_| {
            let t = torque_levels[c % l];
            c /= l;
            t
        });
        let f: f64 = tau.iter().zip(gear_ratios).map(|(t, g)| t * g).sum();
        if (f - force).abs() <= tolerance {
            let proxy_cost = -analytical_proxy_reward(&tau, &qd, r_over_k2);
            let oracle = realworld::oracle_current(real, &tau, &qd, &[0.0; MOTORS]);
            pool.push((tau, proxy_cost, oracle));
        }
    }
    let mut best: Option<RankingDisagreement> = None;
    for a in &pool {
        for b in &pool {
            if a.1 < b.1 && a.2 > b.2 {
                let gap = a.2 - b.2;
                if best.as_ref().is_none_or(|d| gap > d.oracle_currents.0 - d.oracle_currents.1) {
                    best = Some(RankingDisagreement {
                        cart_velocity,
                        proxy_prefers: a.0,
                        oracle_prefers: b.0,
                        proxy_costs: (a.1, b.1),
                        oracle_currents: (a.2, b.2),
                    });
                }
            }
        }
    }
    best
}

/// One row per segment, tab separated, with a header line.
pub fn segment_table(reports: &[&PowerReport]) -> String {
    let mut out = String::from(SEGMENT_TABLE_HEADER);
    out.push('\n');
    for r in reports {
        for (s, p) in r.segments.iter().zip(r.segment_net_powers()) {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.policy_id, r.command, s.start_step, s.charge, s.mean_velocity, p
            );
        }
    }
    out
}

/// Parsed row of [`segment_table`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    pub policy_id: String,
    pub command: f64,
    pub segment: Segment,
    pub net_power: f64,
}

pub fn parse_segment_table(text: &str, origin: &Path) -> Result<Vec<SegmentRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SEGMENT_TABLE_HEADER) {
        return Err(Error::format(origin, "missing segment table header"));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format(origin, format!("row {}: malformed", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(SegmentRow {
                policy_id: f[0].to_string(),
                command: num(f[1])?,
                segment: Segment {
                    start_step: f[2].parse().map_err(|_| bad())?,
                    charge: num(f[3])?,
                    mean_velocity: num(f[4])?,
                },
                net_power: num(f[5])?,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    schema: String,
    reports: BTreeMap<String, PowerReport>,
}

pub fn save_reports(path: &Path, reports: &BTreeMap<String, PowerReport>) -> Result<()> {
    persist::write_json(
        path,
        &ReportFile {
            schema: REPORT_SCHEMA.to_string(),
            reports: reports.clone(),
        },
    )
}

pub fn load_reports(path: &Path) -> Result<BTreeMap<String, PowerReport>> {
    let f: ReportFile = persist::read_json(path)?;
    persist::check_schema(path, &f.schema, REPORT_SCHEMA)?;
    Ok(f.reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DT: f64 = 0.02;

    #[test]
    fn constant_trace_three_segments() {
        let segs = segment_powers(&[5.0; 150], &[0.8; 150], 0.8, DT).unwrap();
        assert_eq!(segs.len(), 3);
        for (k, s) in segs.iter().enumerate() {
            assert_eq!(s.start_step, 50 * k);
            assert!((s.charge - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn band_edge_excludes_window() {
        let mut v = vec![0.8; 100];
        v[60] = 0.88 * 0.8;
        let segs = segment_powers(&[1.0; 100], &v, 0.8, DT).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].start_step, 0);
        v[60] = 0.9 * 0.8;
        assert_eq!(segment_powers(&[1.0; 100], &v, 0.8, DT).unwrap().len(), 2);
    }

    #[test]
    fn zero_command_uses_absolute_band() {
        let segs = segment_powers(&[1.0; 50], &[0.04; 50], 0.0, DT).unwrap();
        assert_eq!(segs.len(), 1);
        assert!(segment_powers(&[1.0; 50], &[0.06; 50], 0.0, DT).unwrap().is_empty());
    }

    #[test]
    fn short_or_mismatched_traces() {
        assert!(segment_powers(&[1.0; 49], &[0.8; 49], 0.8, DT).unwrap().is_empty());
        assert!(segment_powers(&[1.0; 3], &[0.8; 2], 0.8, DT).is_err());
        assert!(segment_powers(&[], &[], 0.8, 0.3).is_err());
    }

    #[test]
    fn delta_p_examples() {
        assert_eq!(delta_p(100.0, 75.0).unwrap(), 25.0);
        assert_eq!(delta_p(42.0, 42.0).unwrap(), 0.0);
        assert!(delta_p(0.0, 1.0).is_err());
        assert!(delta_p(-1.0, 1.0).is_err());
    }

    #[test]
    fn net_gross_identity() {
        let r = power_report("p", &[2.0; 100], &[0.8; 100], 0.8, DT, 24.0, 0.5, segment_powers(&[2.0; 100], &[0.8; 100], 0.8, DT).unwrap());
        let g = r.gross_power.unwrap();
        let n = r.net_power.unwrap();
        assert!((g - 48.0).abs() < 1e-12);
        assert!((g - n - 0.5 * 24.0).abs() < 1e-12);
        assert!(n <= g);
        assert_eq!(r.band_occupancy, 1.0);
        let empty = power_report("p", &[2.0; 10], &[0.0; 10], 0.8, DT, 24.0, 0.5, vec![]);
        assert!(empty.gross_power.is_none() && !empty.is_eligible(0.0));
    }

    #[test]
    fn proxy_formula_branches() {
        let rk = [0.1; 4];
        assert!((analytical_proxy_reward(&[1.0, 0.0, 0.0, 0.0], &[2.0, 0.0, 0.0, 0.0], &rk) - (-2.1)).abs() < 1e-12);
        assert_eq!(analytical_proxy_reward(&[1.0, 0.0, 0.0, 0.0], &[-2.0, 0.0, 0.0, 0.0], &rk), 0.0);
        assert_eq!(analytical_proxy_reward(&[0.0; 4], &[0.0; 4], &rk), 0.0);
    }

    #[test]
    fn correlation_examples() {
        assert!((proxy_correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((proxy_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(proxy_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(proxy_correlation(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    fn report_with(net: &[f64]) -> PowerReport {
        let v = 24.0;
        let idle = 0.5;
        let segments = net
            .iter()
            .enumerate()
            .map(|(k, p)| Segment {
                start_step: 50 * k,
                charge: p / v + idle,
                mean_velocity: 0.8,
            })
            .collect();
        let mut r = power_report("x", &[], &[], 0.8, DT, v, idle, segments);
        r.policy_id = "x".into();
        r
    }

    #[test]
    fn normalized_distribution_examples() {
        let pre = report_with(&[10.0, 10.0]);
        let same = normalized_power_distribution(&pre, std::slice::from_ref(&pre)).unwrap();
        assert!(same.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let half = normalized_power_distribution(&report_with(&[5.0, 5.0, 5.0]), &[pre]).unwrap();
        assert!(half.iter().all(|x| (x - 0.5).abs() < 1e-12));
        assert!(normalized_power_distribution(&report_with(&[1.0]), &[report_with(&[0.0])]).is_err());
    }

    #[test]
    fn segment_table_round_trip() {
        let r = report_with(&[10.0 / 3.0, 7.25]);
        let text = segment_table(&[&r]);
        let rows = parse_segment_table(&text, Path::new("mem")).unwrap();
        assert_eq!(rows.len(), 2);
        for (row, (s, p)) in rows.iter().zip(r.segments.iter().zip(r.segment_net_powers())) {
            assert_eq!(&row.segment, s);
            assert_eq!(row.net_power, p);
        }
        assert!(parse_segment_table("nope", Path::new("mem")).is_err());
    }

    #[test]
    fn proxy_and_oracle_disagree_somewhere() {
        let env = envsim::EnvParams::default();
        let levels: Vec<f64> = (0..=12).map(|k| k as f64 * 0.25).collect();
        let d = find_ranking_disagreement(&RealParams::default(), &[4.0; 4], &env.gear_ratios, 0.8, 10.0, &levels, 0.25).unwrap();
        assert!(d.proxy_costs.0 < d.proxy_costs.1);
        assert!(d.oracle_currents.0 > d.oracle_currents.1);
    }

    proptest! {
        #[test]
        fn delta_p_role_swap(a in 0.1f64..100.0, b in 0.1f64..100.0) {
            let ab = delta_p(a, b).unwrap();
            let ba = delta_p(b, a).unwrap();
            prop_assert!((ab + ba * b / a).abs() < 1e-9);
        }

        #[test]
        fn segment_filter_soundness(vs in proptest::collection::vec(0.6f64..1.0, 0..400)) {
            let cur = vec![1.0; vs.len()];
            let segs = segment_powers(&cur, &vs, 0.8, DT).unwrap();
            let kept: Vec<usize> = segs.iter().map(|s| s.start_step).collect();
            for (k, w) in vs.chunks_exact(50).enumerate() {
                let all_in = w.iter().all(|v| envsim::in_band(*v, 0.8));
                prop_assert_eq!(kept.contains(&(k * 50)), all_in);
            }
        }

        #[test]
        fn net_never_exceeds_gross(cs in proptest::collection::vec(0.0f64..5.0, 50..300)) {
            let v = vec![0.8; cs.len()];
            let segs = segment_powers(&cs, &v, 0.8, DT).unwrap();
            let r = power_report("p", &cs, &v, 0.8, DT, 24.0, 0.5, segs);
            let (g, n) = (r.gross_power.unwrap(), r.net_power.unwrap());
            prop_assert!(n <= g);
            prop_assert!((g - n - 12.0).abs() < 1e-9);
        }
    }
}
