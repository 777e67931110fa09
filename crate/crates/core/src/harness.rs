//! Experiment orchestration.
//!
//! Each command reads its inputs from the output directory, checks their
//! provenance and writes its own artifacts next to a `<file>.meta.json`
//! record holding the config hash, the artifact's own sha256 and the sha256
//! of every input it was built from. Consumers refuse artifacts whose record
//! disagrees with the current config or files unless forced.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/{robot,human}_{train,val}.jsonl
//! classifier/seed{s}.ckpt (+ .json sidecar, .curves.json)
//! annotation/seed{s}.jsonl
//! policy/{regime}_seed{s}.ckpt (+ .json sidecar, .train.json)
//! eval/report.jsonl, eval/report.csv
//! analysis/overlap_seed{s}.json, analysis/overlap_seed{s}.csv, analysis/summary.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{
    annotate_kstar, heldout_accuracy, probability_curve, train_classifier, BalanceAudit,
    ClassifierModel, KStarAnnotation, ProbabilityCurve,
};
use crate::config::ExperimentConfig;
use crate::diffusion::{build_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_policy, kl_curve, save_report, save_report_csv, EvalMeta, EvalReport,
    RegimeReport, VERSION,
};
use crate::par;
use crate::policy::{
    train_policy, PolicyModel, PolicySampler, SampleCounters, TrainInputs, TrainRegime,
};
use crate::synth::{
    generate_human_demos, generate_robot_demos, load_dataset, save_dataset, Chunk, DemoDataset,
    Embodiment, Normalizer, Split, TaskSpec,
};
use crate::numeric::SeededRng;

pub const DEMODIFFUSION: &str = "demodiffusion";

const GEN_DATA: &str = "gen-data";
const TRAIN_CLASSIFIER: &str = "train-classifier";
const ANNOTATE: &str = "annotate";
const TRAIN_POLICY: &str = "train-policy";
const EVAL: &str = "eval";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub producer: String,
    pub config_hash: String,
    pub sha256: String,
    /// Output-relative path of each input to its sha256 when this was written.
    pub inputs: BTreeMap<String, String>,
    pub version: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn sidecar_of(path: &Path) -> Option<PathBuf> {
    (path.extension().and_then(|e| e.to_str()) == Some("ckpt")).then(|| path.with_extension("json"))
}

/// sha256 of a file, folding in the `.json` sidecar of a checkpoint.
pub fn artifact_sha(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(std::fs::read(path).map_err(|e| Error::io(path, e))?);
    if let Some(side) = sidecar_of(path) {
        h.update(std::fs::read(&side).map_err(|e| Error::io(&side, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE5_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-purpose seed derived from the master seed.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut z = splitmix(master);
    for b in tag.bytes() {
        z = splitmix(z ^ b as u64);
    }
    splitmix(z ^ index)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        record: 0,
        reason: e.to_string(),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Classifier diagnostics written next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierCurves {
    pub seed: u64,
    pub split: Split,
    pub ks: Vec<usize>,
    /// Balanced accuracy per k.
    pub accuracy: Vec<f64>,
    pub probability: ProbabilityCurve,
    pub audit: BalanceAudit,
    /// Mean loss over consecutive windows of 100 steps.
    pub loss_windows: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainLog {
    pub regime: TrainRegime,
    pub seed: u64,
    pub counters: SampleCounters,
    pub effective_human_fraction: f64,
    pub loss_windows: Vec<f64>,
    pub val_trace: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAnalysis {
    pub seed: u64,
    pub kl_crossing: Option<usize>,
    pub spearman: Option<f64>,
    pub kl_first: f64,
    pub kl_last: f64,
    pub clamped: usize,
    pub floored: usize,
    pub accuracy_first: f64,
    pub gap_last: f64,
    pub median_kstar_feasible: Option<f64>,
    pub median_kstar_infeasible: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub config_hash: String,
    pub epsilon: f64,
    pub split: Split,
    pub seeds: Vec<SeedAnalysis>,
}

fn windows(trace: &[f64]) -> Vec<f64> {
    trace.chunks(100).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
}

fn median(mut v: Vec<usize>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    })
}

pub struct Harness {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    hash: String,
    schedule: NoiseSchedule,
    task: TaskSpec,
}

impl Harness {
    /// `out` overrides the configured output directory.
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>, force: bool) -> Result<Self> {
        cfg.validate()?;
        let schedule = build_schedule(cfg.schedule)?;
        let task = cfg.task.spec()?;
        Ok(Self {
            out: out.unwrap_or_else(|| cfg.out_dir.clone()),
            hash: cfg.hash(),
            cfg,
            force,
            schedule,
            task,
        })
    }

    pub fn from_path(path: &Path, out: Option<PathBuf>, force: bool) -> Result<Self> {
        Self::new(ExperimentConfig::load(path)?, out, force)
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn dataset_rel(embodiment: Embodiment, split: Split) -> String {
        let e = match embodiment {
            Embodiment::Robot => "robot",
            Embodiment::Human => "human",
        };
        let s = match split {
            Split::Train => "train",
            Split::Validation => "val",
        };
        format!("data/{e}_{s}.jsonl")
    }

    pub fn classifier_rel(seed: u64) -> String {
        format!("classifier/seed{seed}.ckpt")
    }

    pub fn curves_rel(seed: u64) -> String {
        format!("classifier/seed{seed}.curves.json")
    }

    pub fn annotation_rel(seed: u64) -> String {
        format!("annotation/seed{seed}.jsonl")
    }

    pub fn policy_rel(regime: TrainRegime, seed: u64) -> String {
        format!("policy/{}_seed{seed}.ckpt", regime.name())
    }

    pub const REPORT: &'static str = "eval/report.jsonl";
    pub const REPORT_CSV: &'static str = "eval/report.csv";
    pub const SUMMARY: &'static str = "analysis/summary.json";

    pub fn overlap_rel(seed: u64) -> String {
        format!("analysis/overlap_seed{seed}.json")
    }

    fn stale(&self, path: &Path, reason: String) -> Result<()> {
        if self.force {
            warn!("using stale {} ({reason}) because --force was given", path.display());
            Ok(())
        } else {
            Err(Error::StaleArtifact {
                path: path.to_path_buf(),
                reason,
            })
        }
    }

    /// Checks an input's provenance and returns its `(rel, sha256)`.
    pub fn require(&self, rel: &str, producer: &str) -> Result<(String, String)> {
        self.require_path(&self.path(rel), rel, producer)
    }

    fn require_path(&self, path: &Path, rel: &str, producer: &str) -> Result<(String, String)> {
        if !path.exists() || sidecar_of(path).is_some_and(|s| !s.exists()) {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer: producer.to_string(),
            });
        }
        let sha = artifact_sha(path)?;
        let mp = meta_path(path);
        if !mp.exists() {
            self.stale(path, "no provenance record".into())?;
            return Ok((rel.to_string(), sha));
        }
        let meta: ArtifactMeta = read_json(&mp)?;
        if meta.config_hash != self.hash {
            self.stale(
                path,
                format!("written under config {}, current config is {}", meta.config_hash, self.hash),
            )?;
        }
        if meta.sha256 != sha {
            self.stale(path, "file changed after it was written".into())?;
        }
        for (input, want) in &meta.inputs {
            let ip = self.path(input);
            let now = if ip.exists() { artifact_sha(&ip).ok() } else { None };
            if now.as_deref() != Some(want.as_str()) {
                self.stale(path, format!("input {input} changed since it was built"))?;
            }
        }
        Ok((rel.to_string(), sha))
    }

    fn record(&self, rel: &str, producer: &str, inputs: &[(String, String)]) -> Result<()> {
        let path = self.path(rel);
        let meta = ArtifactMeta {
            producer: producer.to_string(),
            config_hash: self.hash.clone(),
            sha256: artifact_sha(&path)?,
            inputs: inputs.iter().cloned().collect(),
            version: VERSION.to_string(),
        };
        write_json(&meta_path(&path), &meta)
    }

    fn ckpt_meta(&self, seed: u64) -> serde_json::Value {
        serde_json::json!({ "config_hash": self.hash, "seed": seed })
    }

    fn load_data(&self, e: Embodiment, split: Split) -> Result<(DemoDataset, (String, String))> {
        let rel = Self::dataset_rel(e, split);
        let dep = self.require(&rel, GEN_DATA)?;
        Ok((load_dataset(&self.path(&rel))?, dep))
    }

    /// Writes the four demo datasets, all normalized with robot-train statistics.
    pub fn gen_data(&self) -> Result<()> {
        let d = &self.cfg.data;
        let m = self.cfg.seed;
        let mut robot = generate_robot_demos(&self.task, d.robot_demos, derive_seed(m, "robot_train", 0))?;
        let mut human = generate_human_demos(
            &self.task,
            d.human_demos,
            &d.style_mix,
            &d.noise,
            derive_seed(m, "human_train", 0),
        )?;
        let mut robot_val =
            generate_robot_demos(&self.task, d.validation_demos, derive_seed(m, "robot_val", 0))?;
        let mut human_val = generate_human_demos(
            &self.task,
            d.validation_demos,
            &d.style_mix,
            &d.noise,
            derive_seed(m, "human_val", 0),
        )?;
        robot_val.split = Split::Validation;
        human_val.split = Split::Validation;
        let norm = Normalizer::fit_robot(&robot)?;
        for ds in [&mut robot, &mut human, &mut robot_val, &mut human_val] {
            ds.normalizer = Some(norm.clone());
        }
        info!(
            "generated {} robot and {} human demos ({} feasible)",
            robot.len(),
            human.len(),
            human.feasible_count()
        );
        for (ds, e) in [
            (&robot, Embodiment::Robot),
            (&human, Embodiment::Human),
            (&robot_val, Embodiment::Robot),
            (&human_val, Embodiment::Human),
        ] {
            let rel = Self::dataset_rel(e, ds.split);
            let path = self.path(&rel);
            ensure_parent(&path)?;
            save_dataset(ds, &path)?;
            self.record(&rel, GEN_DATA, &[])?;
        }
        Ok(())
    }

    fn curve_chunks(&self, heldout: bool) -> Result<(Vec<Chunk>, Vec<(String, String)>)> {
        let split = if heldout { Split::Validation } else { Split::Train };
        let (r, dr) = self.load_data(Embodiment::Robot, split)?;
        let (h, dh) = self.load_data(Embodiment::Human, split)?;
        let mut chunks = r.chunks(self.cfg.policy.horizon)?;
        chunks.extend(h.chunks(self.cfg.policy.horizon)?);
        Ok((chunks, vec![dr, dh]))
    }

    /// One classifier per seed, plus accuracy and probability curves.
    pub fn train_classifier(&self) -> Result<()> {
        let (robot, dr) = self.load_data(Embodiment::Robot, Split::Train)?;
        let (human, dh) = self.load_data(Embodiment::Human, Split::Train)?;
        let heldout = self.cfg.analysis.heldout;
        let (chunks, cdeps) = self.curve_chunks(heldout)?;
        let ks = self.cfg.analysis_ks();
        let c = &self.cfg.classifier;
        let seeds = &self.cfg.eval.seeds;
        let results = par::map(seeds, |_, &s| -> Result<()> {
            let m = self.cfg.seed;
            let tr = train_classifier(
                &robot,
                &human,
                &self.schedule,
                c,
                self.cfg.policy.horizon,
                derive_seed(m, "classifier", s),
            )?;
            let cs = derive_seed(m, "curves", s);
            let accuracy = heldout_accuracy(&tr.model, &self.schedule, &chunks, &ks, c.n_draws, cs)?;
            let probability = probability_curve(&tr.model, &self.schedule, &chunks, &ks, c.n_draws, cs)?;
            info!(
                "classifier seed {s}: accuracy {:.3} at k={}, gap {:.3} at k={}",
                accuracy[0],
                ks[0],
                probability.gap().last().copied().unwrap_or(f64::NAN),
                ks.last().copied().unwrap_or(0)
            );
            let rel = Self::classifier_rel(s);
            let path = self.path(&rel);
            ensure_parent(&path)?;
            tr.model.save(&path, Some(self.ckpt_meta(s)))?;
            self.record(&rel, TRAIN_CLASSIFIER, &[dr.clone(), dh.clone()])?;
            let curves = ClassifierCurves {
                seed: s,
                split: if heldout { Split::Validation } else { Split::Train },
                ks: ks.clone(),
                accuracy,
                probability,
                audit: tr.audit,
                loss_windows: windows(&tr.loss_trace),
            };
            let crel = Self::curves_rel(s);
            write_json(&self.path(&crel), &curves)?;
            let mut inputs = cdeps.clone();
            inputs.push((rel.clone(), artifact_sha(&path)?));
            self.record(&crel, TRAIN_CLASSIFIER, &inputs)
        });
        results.into_iter().collect()
    }

    /// k* for every human training chunk, per seed.
    pub fn annotate(&self) -> Result<()> {
        let (human, dh) = self.load_data(Embodiment::Human, Split::Train)?;
        let seeds = &self.cfg.eval.seeds;
        let results = par::map(seeds, |_, &s| -> Result<()> {
            let crel = Self::classifier_rel(s);
            let dc = self.require(&crel, TRAIN_CLASSIFIER)?;
            let (model, _) = ClassifierModel::load(&self.path(&crel))?;
            let ann = annotate_kstar(
                &model,
                &self.schedule,
                &human,
                &format!("human_train:{}", &dh.1[..16]),
                self.cfg.classifier.n_draws,
                derive_seed(self.cfg.seed, "annotate", s),
                self.cfg.annotation.mode,
                self.cfg.annotation.curve_stride,
            )?;
            let rel = Self::annotation_rel(s);
            let path = self.path(&rel);
            ensure_parent(&path)?;
            ann.save(&path)?;
            self.record(&rel, ANNOTATE, &[dh.clone(), dc])
        });
        results.into_iter().collect()
    }

    fn regimes(&self, only: Option<TrainRegime>) -> Result<Vec<TrainRegime>> {
        match only {
            Some(r) if !self.cfg.policy.regimes.contains(&r) => Err(Error::Config(format!(
                "regime {r} is not listed in policy.regimes"
            ))),
            Some(r) => Ok(vec![r]),
            None => Ok(self.cfg.policy.regimes.clone()),
        }
    }

    /// Trains the configured regimes (or just `only`) for every seed.
    pub fn train_policy(&self, only: Option<TrainRegime>) -> Result<()> {
        let regimes = self.regimes(only)?;
        let (robot, dr) = self.load_data(Embodiment::Robot, Split::Train)?;
        let needs_human = regimes.iter().any(|&r| r != TrainRegime::Robot);
        let human = if needs_human {
            Some(self.load_data(Embodiment::Human, Split::Train)?)
        } else {
            None
        };
        let p = &self.cfg.policy;
        let validation = if p.train.val_every > 0 {
            Some(self.load_data(Embodiment::Robot, Split::Validation)?)
        } else {
            None
        };
        let jobs: Vec<(TrainRegime, u64)> = regimes
            .iter()
            .flat_map(|&r| self.cfg.eval.seeds.iter().map(move |&s| (r, s)))
            .collect();
        let results = par::map(&jobs, |_, &(regime, s)| -> Result<()> {
            let mut inputs = vec![dr.clone()];
            let ann = if regime == TrainRegime::XDiffusion {
                let arel = Self::annotation_rel(s);
                inputs.push(self.require(&arel, ANNOTATE)?);
                Some(KStarAnnotation::load(&self.path(&arel))?)
            } else {
                None
            };
            let human_ds = match (&human, regime) {
                (_, TrainRegime::Robot) => None,
                (Some((h, dh)), _) => {
                    inputs.push(dh.clone());
                    Some(h)
                }
                (None, _) => unreachable!("human data loaded for human regimes"),
            };
            if let Some((_, dv)) = &validation {
                inputs.push(dv.clone());
            }
            let tr = train_policy(
                regime,
                TrainInputs {
                    robot: &robot,
                    human: human_ds,
                    annotation: ann.as_ref(),
                    validation: validation.as_ref().map(|(v, _)| v),
                },
                &self.schedule,
                &p.train,
                p.horizon,
                derive_seed(self.cfg.seed, "policy", s),
            )?;
            info!(
                "{regime} seed {s}: final loss {:.4}, human fraction {:.3}",
                windows(&tr.loss_trace).last().copied().unwrap_or(f64::NAN),
                tr.counters.effective_human_fraction()
            );
            let rel = Self::policy_rel(regime, s);
            let path = self.path(&rel);
            ensure_parent(&path)?;
            tr.model.save(&path, Some(self.ckpt_meta(s)))?;
            self.record(&rel, TRAIN_POLICY, &inputs)?;
            let log = PolicyTrainLog {
                regime,
                seed: s,
                counters: tr.counters,
                effective_human_fraction: tr.counters.effective_human_fraction(),
                loss_windows: windows(&tr.loss_trace),
                val_trace: tr.val_trace,
            };
            write_json(&path.with_extension("train.json"), &log)
        });
        results.into_iter().collect()
    }

    fn load_policies(
        &self,
        regime: TrainRegime,
        inputs: &mut BTreeMap<String, String>,
    ) -> Result<BTreeMap<u64, PolicyModel>> {
        let mut out = BTreeMap::new();
        for &s in &self.cfg.eval.seeds {
            let rel = Self::policy_rel(regime, s);
            let (k, sha) = self.require(&rel, TRAIN_POLICY)?;
            inputs.insert(k, sha);
            out.insert(s, PolicyModel::load(&self.path(&rel))?.0);
        }
        Ok(out)
    }

    fn run_regime(
        &self,
        label: &str,
        policies: &BTreeMap<u64, PolicyModel>,
        human: Option<(&BTreeMap<u64, PolicyModel>, f64)>,
    ) -> Result<RegimeReport> {
        let p = &self.cfg.policy;
        let report = evaluate_policy(
            label,
            &self.task,
            &self.cfg.eval.seeds,
            self.cfg.eval.n_rollouts,
            p.action_horizon,
            |seed, sampler_seed| {
                Ok(PolicySampler {
                    policy: pick(policies, seed),
                    human: human.map(|(h, split)| (pick(h, seed), split)),
                    schedule: &self.schedule,
                    inference_steps: p.inference_steps,
                    rng: SeededRng::new(sampler_seed),
                })
            },
        )?;
        info!(
            "{label}: success {:.3} +- {:.3}, events/rollout {:.2}",
            report.success_rate, report.success_se, report.mean_events
        );
        Ok(report)
    }

    /// Evaluates trained regimes, or explicit checkpoints when given.
    pub fn eval(&self, only: Option<TrainRegime>, checkpoints: &[PathBuf]) -> Result<EvalReport> {
        let mut inputs = BTreeMap::new();
        let mut regimes = Vec::new();
        if checkpoints.is_empty() {
            let mut loaded = BTreeMap::new();
            for r in self.regimes(only)? {
                loaded.insert(r, self.load_policies(r, &mut inputs)?);
            }
            for (r, models) in &loaded {
                regimes.push(self.run_regime(r.name(), models, None)?);
            }
            if self.cfg.eval.demodiffusion && only.is_none() {
                let robot = &loaded[&TrainRegime::Robot];
                let naive = &loaded[&TrainRegime::Naive];
                let split = self.cfg.eval.demodiffusion_split;
                regimes.push(self.run_regime(DEMODIFFUSION, robot, Some((naive, split)))?);
            }
        } else {
            for ck in checkpoints {
                let label = ck
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| ck.display().to_string());
                let (k, sha) = self.require_path(ck, &ck.display().to_string(), TRAIN_POLICY)?;
                inputs.insert(k, sha);
                let model = PolicyModel::load(ck)?.0;
                let one: BTreeMap<u64, PolicyModel> = [(0, model)].into_iter().collect();
                regimes.push(self.run_regime(&label, &one, None)?);
            }
        }
        let report = EvalReport {
            meta: EvalMeta {
                task: self.task.kind.name().to_string(),
                config_hash: self.hash.clone(),
                seeds: self.cfg.eval.seeds.clone(),
                n_rollouts: self.cfg.eval.n_rollouts,
                version: VERSION.to_string(),
                inputs: inputs.clone(),
            },
            regimes,
        };
        let deps: Vec<(String, String)> = inputs.into_iter().collect();
        let path = self.path(Self::REPORT);
        save_report(&report, &path)?;
        // The header line carries a timestamp, so the record covers the CSV only.
        save_report_csv(&report, &self.path(Self::REPORT_CSV))?;
        self.record(Self::REPORT_CSV, EVAL, &deps)?;
        Ok(report)
    }

    /// KL and probability-gap curves per seed, plus a summary.
    pub fn analyze(&self) -> Result<AnalysisSummary> {
        let heldout = self.cfg.analysis.heldout;
        let (chunks, deps) = self.curve_chunks(heldout)?;
        let (robot, human): (Vec<&Chunk>, Vec<&Chunk>) =
            chunks.iter().partition(|c| c.embodiment == Embodiment::Robot);
        let flat = |v: &[&Chunk]| v.iter().map(|c| c.actions.clone()).collect::<Vec<_>>();
        let ks = self.cfg.analysis_ks();
        let base = kl_curve(
            &flat(&human),
            &flat(&robot),
            &self.schedule,
            &ks,
            derive_seed(self.cfg.seed, "kl", 0),
        )?;
        let human_train = self.load_data(Embodiment::Human, Split::Train)?;
        let train_chunks = human_train.0.chunks(self.cfg.policy.horizon)?;
        let eps = self.cfg.analysis.epsilon;
        let mut seeds = Vec::new();
        for &s in &self.cfg.eval.seeds {
            let crel = Self::curves_rel(s);
            let arel = Self::annotation_rel(s);
            let mut inputs = deps.clone();
            inputs.push(self.require(&crel, TRAIN_CLASSIFIER)?);
            inputs.push(self.require(&arel, ANNOTATE)?);
            let curves: ClassifierCurves = read_json(&self.path(&crel))?;
            let ann = KStarAnnotation::load(&self.path(&arel))?;
            let overlap = base.clone().with_probability(&curves.probability)?;
            let rel = Self::overlap_rel(s);
            let path = self.path(&rel);
            let csv = path.with_extension("csv");
            overlap.save(&path, Some(&csv))?;
            self.record(&rel, "analyze", &inputs)?;
            let table = ann.table();
            let ks_of = |feasible: bool| -> Vec<usize> {
                train_chunks
                    .iter()
                    .filter(|c| c.feasible == feasible)
                    .filter_map(|c| table.get(c.traj).and_then(|r| r.get(c.index)).copied())
                    .collect()
            };
            seeds.push(SeedAnalysis {
                seed: s,
                kl_crossing: overlap.crossing(eps),
                spearman: overlap.spearman(),
                kl_first: overlap.kl[0],
                kl_last: *overlap.kl.last().expect("nonempty grid"),
                clamped: overlap.clamped,
                floored: overlap.floored,
                accuracy_first: curves.accuracy[0],
                gap_last: *curves.probability.gap().last().expect("nonempty grid"),
                median_kstar_feasible: median(ks_of(true)),
                median_kstar_infeasible: median(ks_of(false)),
            });
        }
        let summary = AnalysisSummary {
            config_hash: self.hash.clone(),
            epsilon: eps,
            split: if heldout { Split::Validation } else { Split::Train },
            seeds,
        };
        write_json(&self.path(Self::SUMMARY), &summary)?;
        Ok(summary)
    }

    /// Every stage in dependency order.
    pub fn pipeline(&self) -> Result<EvalReport> {
        let t = std::time::Instant::now();
        self.gen_data()?;
        self.train_classifier()?;
        self.annotate()?;
        self.train_policy(None)?;
        let report = self.eval(None, &[])?;
        self.analyze()?;
        info!("pipeline finished in {:.1}s", t.elapsed().as_secs_f64());
        Ok(report)
    }

    pub fn load_report(&self) -> Result<EvalReport> {
        crate::eval::load_report(&self.path(Self::REPORT))
    }
}

/// The model trained under `seed`; a lone explicit checkpoint serves every seed.
fn pick(models: &BTreeMap<u64, PolicyModel>, seed: u64) -> &PolicyModel {
    models
        .get(&seed)
        .or_else(|| models.values().next())
        .expect("at least one policy")
}

/// Runs `f` on a pool of `jobs` threads (the global pool when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build a pool of {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(f()),
        None => Ok(f()),
    }
}
