//! Closed-loop evaluation, overlap diagnostics and report export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ProbabilityCurve;
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fmt::{parse_record, to_line};
use crate::numeric::SeededRng;
use crate::par;
use crate::synth::{env_rollout, ChunkPolicy, Outcome, RolloutOutcome, TaskSpec};

pub const VERSION: &str = concat!("xdiff ", env!("CARGO_PKG_VERSION"));

/// Variance floor for the Gaussian fits.
pub const VAR_FLOOR: f64 = 1e-8;

const ENV_TAG: u64 = 0x6576_616c_656e_7600;
const SAMPLER_TAG: u64 = 0x6576_616c_736d_7000;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE5_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Initial-condition seed of rollout `r` under training seed `seed`.
///
/// Independent of the regime, so every regime faces the same worlds.
pub fn env_seed(seed: u64, rollout: usize) -> u64 {
    splitmix(splitmix(seed ^ ENV_TAG) ^ rollout as u64)
}

/// Seed for the sampler noise of rollout `r`.
pub fn sampler_seed(seed: u64, rollout: usize) -> u64 {
    splitmix(splitmix(seed ^ SAMPLER_TAG) ^ rollout as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub regime: String,
    pub seed: u64,
    pub rollout: usize,
    pub env_seed: u64,
    #[serde(flatten)]
    pub outcome: RolloutOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub n: usize,
    pub successes: usize,
    #[serde(serialize_with = "crate::fmt::f64_17")]
    pub success_rate: f64,
    #[serde(serialize_with = "crate::fmt::f64_17")]
    pub mean_steps: f64,
    pub infeasible_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    /// Training regime name, or `demodiffusion`.
    pub regime: String,
    pub n: usize,
    #[serde(serialize_with = "crate::fmt::f64_17")]
    pub success_rate: f64,
    /// Binomial standard error over the pooled rollouts.
    #[serde(serialize_with = "crate::fmt::f64_17")]
    pub success_se: f64,
    #[serde(serialize_with = "crate::fmt::f64_17")]
    pub mean_events: f64,
    pub infeasible_events: usize,
    pub outcomes: BTreeMap<String, usize>,
    pub per_seed: Vec<SeedSummary>,
    #[serde(skip)]
    pub rollouts: Vec<RolloutRecord>,
}

impl RegimeReport {
    pub fn from_rollouts(regime: &str, rollouts: Vec<RolloutRecord>) -> Self {
        let n = rollouts.len();
        let successes = rollouts.iter().filter(|r| r.outcome.success).count();
        let events: usize = rollouts.iter().map(|r| r.outcome.infeasible_events).sum();
        let p = if n == 0 { 0.0 } else { successes as f64 / n as f64 };
        let mut outcomes = BTreeMap::new();
        for r in &rollouts {
            *outcomes.entry(outcome_name(r.outcome.outcome)).or_insert(0) += 1;
        }
        let mut seeds: Vec<u64> = rollouts.iter().map(|r| r.seed).collect();
        seeds.dedup();
        let per_seed = seeds
            .into_iter()
            .map(|seed| {
                let rs: Vec<&RolloutRecord> = rollouts.iter().filter(|r| r.seed == seed).collect();
                let k = rs.len();
                let succ = rs.iter().filter(|r| r.outcome.success).count();
                SeedSummary {
                    seed,
                    n: k,
                    successes: succ,
                    success_rate: succ as f64 / k as f64,
                    mean_steps: rs.iter().map(|r| r.outcome.steps as f64).sum::<f64>() / k as f64,
                    infeasible_events: rs.iter().map(|r| r.outcome.infeasible_events).sum(),
                }
            })
            .collect();
        Self {
            regime: regime.to_string(),
            n,
            success_rate: p,
            success_se: if n == 0 { 0.0 } else { (p * (1.0 - p) / n as f64).sqrt() },
            mean_events: if n == 0 { 0.0 } else { events as f64 / n as f64 },
            infeasible_events: events,
            outcomes,
            per_seed,
            rollouts,
        }
    }
}

fn outcome_name(o: Outcome) -> String {
    serde_json::to_value(o)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub task: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub n_rollouts: usize,
    pub version: String,
    /// Artifact name to sha256 of every input the report depends on.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub regimes: Vec<RegimeReport>,
}

impl EvalReport {
    pub fn regime(&self, name: &str) -> Option<&RegimeReport> {
        self.regimes.iter().find(|r| r.regime.eq_ignore_ascii_case(name))
    }
}

/// Runs `n_rollouts` episodes per seed.
///
/// `make(seed, sampler_seed)` builds the sampler for one rollout. A failed
/// build is recorded as a failed rollout with its error as the diagnostic.
pub fn evaluate_policy<P, F>(
    regime: &str,
    task: &TaskSpec,
    seeds: &[u64],
    n_rollouts: usize,
    action_horizon: usize,
    make: F,
) -> Result<RegimeReport>
where
    P: ChunkPolicy,
    F: Fn(u64, u64) -> Result<P> + Sync + Send,
{
    if n_rollouts == 0 || seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed and rollout".into()));
    }
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..n_rollouts).map(move |r| (s, r)))
        .collect();
    let rollouts = par::map(&jobs, |_, &(seed, r)| {
        let env = env_seed(seed, r);
        let outcome = match make(seed, sampler_seed(seed, r)) {
            Ok(mut p) => env_rollout(task, &mut p, env, action_horizon),
            Err(e) => RolloutOutcome {
                success: false,
                steps: 0,
                infeasible_events: 0,
                outcome: Outcome::NonFinite,
                diagnostic: Some(format!("sampler construction failed: {e}")),
            },
        };
        RolloutRecord {
            regime: regime.to_string(),
            seed,
            rollout: r,
            env_seed: env,
            outcome,
        }
    });
    Ok(RegimeReport::from_rollouts(regime, rollouts))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Header { created_unix: u64 },
    Meta(EvalMeta),
    Regime(RegimeReport),
    Rollout(RolloutRecord),
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// JSONL: a timestamp header, the metadata, one line per regime, then every rollout.
pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = to_line(&ReportLine::Header { created_unix: now_unix() });
    out.push_str(&to_line(&ReportLine::Meta(report.meta.clone())));
    for r in &report.regimes {
        out.push_str(&to_line(&ReportLine::Regime(r.clone())));
    }
    for r in report.regimes.iter().flat_map(|r| &r.rollouts) {
        out.push_str(&to_line(&ReportLine::Rollout(r.clone())));
    }
    write_text(path, &out)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut meta = None;
    let mut regimes: Vec<RegimeReport> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match parse_record::<ReportLine>(line, path, i)? {
            ReportLine::Header { .. } => {}
            ReportLine::Meta(m) => meta = Some(m),
            ReportLine::Regime(r) => regimes.push(r),
            ReportLine::Rollout(r) => {
                let reg = regimes
                    .iter_mut()
                    .find(|g| g.regime == r.regime)
                    .ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        record: i,
                        reason: format!("rollout for unknown regime `{}`", r.regime),
                    })?;
                reg.rollouts.push(r);
            }
        }
    }
    let meta = meta.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        record: 0,
        reason: "no meta record".into(),
    })?;
    Ok(EvalReport { meta, regimes })
}

/// One row per (regime, seed): success rate, mean episode length, event total.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("regime,task,seed,success,steps,infeasible_events\n");
    for r in &report.regimes {
        for p in &r.per_seed {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.regime, report.meta.task, p.seed, p.success_rate, p.mean_steps, p.infeasible_events
            );
        }
    }
    s
}

pub fn save_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    write_text(path, &report_csv(report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    #[default]
    GaussianFit,
}

/// Diagonal Gaussian fitted to flattened vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Dimensions whose variance was raised to the floor.
    pub floored: usize,
}

impl DiagGaussian {
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot fit a Gaussian to no samples".into()))?;
        let d = first.len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::Shape { expected: d, got: bad.len() });
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for s in samples {
            for ((q, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
        let mut floored = 0;
        for q in &mut var {
            *q /= n;
            if !(*q >= VAR_FLOOR) {
                *q = VAR_FLOOR;
                floored += 1;
            }
        }
        if floored > 0 {
            log::warn!("{floored} degenerate variance(s) floored at {VAR_FLOOR}");
        }
        Ok(Self { mean, var, floored })
    }

    /// Closed-form `KL(self || other)` in nats.
    pub fn kl(&self, other: &DiagGaussian) -> f64 {
        self.mean
            .iter()
            .zip(&self.var)
            .zip(other.mean.iter().zip(&other.var))
            .map(|((m1, v1), (m2, v2))| 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0))
            .sum()
    }
}

/// `KL(fit(p) || fit(q))` for two sample sets.
pub fn gaussian_kl_fit(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    Ok(DiagGaussian::fit(p)?.kl(&DiagGaussian::fit(q)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCurve {
    pub ks: Vec<usize>,
    /// `KL(p_H^k || p_R^k)`, clamped at zero.
    #[serde(serialize_with = "crate::fmt::vec_f64_17")]
    pub kl: Vec<f64>,
    pub estimator: KlEstimator,
    /// Negative estimates raised to zero.
    pub clamped: usize,
    /// Variances raised to the floor, over all k and both sources.
    pub floored: usize,
    /// Classifier robot-vs-human probability gap on the same grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob_gap: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob_gap_se: Option<Vec<f64>>,
}

impl OverlapCurve {
    /// First k with KL at or below `epsilon`.
    pub fn crossing(&self, epsilon: f64) -> Option<usize> {
        self.ks.iter().zip(&self.kl).find(|(_, &d)| d <= epsilon).map(|(&k, _)| k)
    }

    pub fn with_probability(mut self, pc: &ProbabilityCurve) -> Result<Self> {
        if pc.ks != self.ks {
            return Err(Error::Config("probability curve uses a different k grid".into()));
        }
        self.prob_gap = Some(pc.gap());
        self.prob_gap_se = Some(pc.gap_se());
        Ok(self)
    }

    /// Rank correlation between the KL and probability-gap curves.
    pub fn spearman(&self) -> Option<f64> {
        self.prob_gap.as_ref().map(|g| spearman(&self.kl, g))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,kl,prob_gap,se\n");
        for (i, k) in self.ks.iter().enumerate() {
            let gap = self.prob_gap.as_ref().map(|g| g[i].to_string()).unwrap_or_default();
            let se = self.prob_gap_se.as_ref().map(|g| g[i].to_string()).unwrap_or_default();
            let _ = writeln!(s, "{k},{},{gap},{se}", self.kl[i]);
        }
        s
    }

    pub fn save(&self, json: &Path, csv: Option<&Path>) -> Result<()> {
        write_text(json, &to_line(self))?;
        if let Some(p) = csv {
            write_text(p, &self.to_csv())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_record(text.trim(), path, 0)
    }
}

/// Noises both chunk sets at every k and fits diagonal Gaussians.
///
/// Both sources draw their noise from the same per-k stream, so identical
/// inputs give exactly zero. `k = 0` uses the clean chunks.
pub fn kl_curve(
    human: &[Vec<f64>],
    robot: &[Vec<f64>],
    schedule: &NoiseSchedule,
    ks: &[usize],
    seed: u64,
) -> Result<OverlapCurve> {
    if human.is_empty() || robot.is_empty() {
        return Err(Error::Config("kl_curve needs nonempty chunk sets".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > schedule.steps()) {
        return Err(Error::StepOutOfRange { k, max: schedule.steps() });
    }
    let noised = |set: &[Vec<f64>], k: usize| -> Result<Vec<Vec<f64>>> {
        if k == 0 {
            return Ok(set.to_vec());
        }
        let mut rng = SeededRng::with_stream(seed, k as u64);
        set.iter()
            .map(|a| forward_noise(schedule, a, k, &rng.normal_vec(a.len())))
            .collect()
    };
    let per_k = par::map(ks, |_, &k| -> Result<(f64, usize)> {
        let h = DiagGaussian::fit(&noised(human, k)?)?;
        let r = DiagGaussian::fit(&noised(robot, k)?)?;
        Ok((h.kl(&r), h.floored + r.floored))
    });
    let mut kl = Vec::with_capacity(ks.len());
    let (mut clamped, mut floored) = (0, 0);
    for entry in per_k {
        let (d, f) = entry?;
        floored += f;
        if d < 0.0 {
            clamped += 1;
        }
        kl.push(d.max(0.0));
    }
    Ok(OverlapCurve {
        ks: ks.to_vec(),
        kl,
        estimator: KlEstimator::GaussianFit,
        clamped,
        floored,
        prob_gap: None,
        prob_gap_se: None,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; 0 if either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ActionChunk;
    use crate::synth::{ScriptedPolicy, TaskKind, ACTION_DIM};

    fn gauss(n: usize, mu: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| vec![mu + rng.normal()]).collect()
    }

    #[test]
    fn one_d_oracle() {
        let d = gaussian_kl_fit(&gauss(10_000, 0.0, 1), &gauss(10_000, 1.0, 2)).unwrap();
        assert!((d - 0.5).abs() < 0.025, "{d}");
    }

    #[test]
    fn identical_sets_give_zero_everywhere() {
        let s = crate::diffusion::NoiseSchedule::new(Default::default()).unwrap();
        let x: Vec<Vec<f64>> = gauss(200, 0.3, 5).into_iter().map(|v| vec![v[0], 2.0 * v[0]]).collect();
        let c = kl_curve(&x, &x, &s, &[0, 1, 50, 100], 9).unwrap();
        assert!(c.kl.iter().all(|&d| d == 0.0), "{:?}", c.kl);
    }

    #[test]
    fn constant_dimension_is_floored() {
        let a = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let g = DiagGaussian::fit(&a).unwrap();
        assert_eq!(g.floored, 1);
        assert_eq!(g.var[0], VAR_FLOOR);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 5.0]), 0.0);
    }

    #[test]
    fn expert_succeeds_and_idle_times_out() {
        let task = TaskSpec::new(TaskKind::PickPlace);
        let rep = evaluate_policy("expert", &task, &[0, 1], 5, 8, |_, _| {
            Ok(ScriptedPolicy::expert(&task, 8))
        })
        .unwrap();
        assert_eq!(rep.success_rate, 1.0);
        assert_eq!(rep.infeasible_events, 0);
        let idle = evaluate_policy("idle", &task, &[0], 3, 8, |_, _| {
            Ok(|s: &[f64]| ActionChunk::new(8, ACTION_DIM, s[..ACTION_DIM].repeat(8)))
        })
        .unwrap();
        assert_eq!(idle.success_rate, 0.0);
    }

    #[test]
    fn failed_sampler_is_a_failed_rollout() {
        let task = TaskSpec::new(TaskKind::PushPlate);
        let rep = evaluate_policy("broken", &task, &[3], 2, 8, |_, _| {
            Err::<ScriptedPolicy, _>(Error::Config("nope".into()))
        })
        .unwrap();
        assert_eq!(rep.n, 2);
        assert_eq!(rep.success_rate, 0.0);
        assert!(rep.rollouts[0].outcome.diagnostic.as_deref().unwrap().contains("nope"));
    }

    #[test]
    fn report_round_trips() {
        let task = TaskSpec::new(TaskKind::PickPlace);
        let reg = evaluate_policy("expert", &task, &[0, 4], 3, 8, |_, _| Ok(ScriptedPolicy::expert(&task, 8)))
            .unwrap();
        let report = EvalReport {
            meta: EvalMeta {
                task: "pick_place".into(),
                config_hash: "abc".into(),
                seeds: vec![0, 4],
                n_rollouts: 3,
                version: VERSION.into(),
                inputs: BTreeMap::new(),
            },
            regimes: vec![reg],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        save_report(&report, &p).unwrap();
        assert_eq!(load_report(&p).unwrap(), report);
        let csv = report_csv(&report);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("regime,task,seed,success,steps,infeasible_events\n"));
    }
}
