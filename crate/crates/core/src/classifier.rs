//! Noised-action embodiment classifier and the minimum indistinguishability
//! step k* derived from it.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::{conditioned_width, forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fmt::{parse_record, to_line};
use crate::numeric::checkpoint::{load_net, save_net};
use crate::numeric::{sigmoid, Activation, AdamConfig, AdamState, FeedForwardNet, SeededRng};
use crate::par;
use crate::synth::{Chunk, DemoDataset, Embodiment, ACTION_DIM, STATE_DIM};
use crate::train::{apply_update, check_loss, InputBatch};

/// Which part of the state vector conditions the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextFeatures {
    /// No state conditioning.
    #[default]
    None,
    /// Object pose and goal offset. Proprioception is left out because it is
    /// the action history of the very trajectory being classified.
    Task,
    /// The whole state vector.
    Full,
}

impl ContextFeatures {
    pub fn width(self) -> usize {
        match self {
            ContextFeatures::None => 0,
            ContextFeatures::Task => STATE_DIM - 4,
            ContextFeatures::Full => STATE_DIM,
        }
    }

    pub fn select(self, state: &[f64]) -> &[f64] {
        match self {
            ContextFeatures::None => &[],
            ContextFeatures::Task => &state[4..],
            ContextFeatures::Full => state,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
    pub n_draws: usize,
    pub context: ContextFeatures,
    pub frame: ChunkFrame,
    /// Rotate the relative planar motion by a random angle per training sample.
    pub rotate: bool,
    /// Half-width in radians of a uniform offset added to the clean
    /// orientation channel of every training chunk. Keeps the classifier from
    /// keying on the handful of exact wrist angles in a small robot set.
    pub orientation_shift: f64,
}

/// Coordinates in which the classifier sees a noised chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChunkFrame {
    /// As stored: absolute next proprioceptions.
    Absolute,
    /// Planar position minus the scaled current position,
    /// `A^k - sqrt(abar_k) q_t`, so the signal part of x and y is the motion
    /// relative to where the chunk starts. Orientation and gripper stay absolute.
    #[default]
    Relative,
    /// Position and orientation relative, gripper absolute.
    RelativePose,
    /// Every channel relative to the current proprioception.
    RelativeAll,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 12000,
            batch: 64,
            lr: 1e-3,
            hidden: 64,
            depth: 2,
            activation: Activation::Silu,
            n_draws: 16,
            context: ContextFeatures::None,
            frame: ChunkFrame::Relative,
            rotate: true,
            orientation_shift: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub net: FeedForwardNet,
    pub context: ContextFeatures,
    pub frame: ChunkFrame,
    pub horizon: usize,
}

/// Structured-text companion of a classifier checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSidecar {
    pub context: ContextFeatures,
    pub frame: ChunkFrame,
    pub horizon: usize,
    #[serde(default)]
    pub meta: Option<serde_json::Value>,
}

impl ClassifierModel {
    pub fn new(
        net: FeedForwardNet,
        context: ContextFeatures,
        frame: ChunkFrame,
        horizon: usize,
    ) -> Result<Self> {
        let chunk = horizon * ACTION_DIM;
        let want = conditioned_width(chunk, context.width());
        if net.input_width() != want || net.output_width() != 1 {
            return Err(Error::Shape {
                expected: want,
                got: net.input_width(),
            });
        }
        Ok(Self {
            net,
            context,
            frame,
            horizon,
        })
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * ACTION_DIM
    }

    /// Robot probability for each `(k, noisy chunk, source chunk)` row; the
    /// source supplies the state and the anchor proprioception.
    pub fn probabilities(
        &self,
        schedule: &NoiseSchedule,
        rows: &[(usize, &[f64], &Chunk)],
    ) -> Result<Vec<f64>> {
        let mut b = InputBatch::new(rows.len(), self.chunk_len(), self.context.width());
        let mut buf = vec![0.0; self.chunk_len()];
        for (i, (k, noisy, c)) in rows.iter().enumerate() {
            encode(self.frame, schedule, *k, noisy, &c.anchor, &mut buf);
            b.set(i, *k, &buf, self.context.select(&c.state));
        }
        let out = self.net.forward_batch(b.x.view())?;
        Ok(out.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn save(&self, path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
        save_net(&self.net, path)?;
        let side = ClassifierSidecar {
            context: self.context,
            frame: self.frame,
            horizon: self.horizon,
            meta,
        };
        let sp = path.with_extension("json");
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        std::fs::write(&sp, text).map_err(|e| Error::io(sp, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ClassifierSidecar)> {
        let net = load_net(path)?;
        let sp = path.with_extension("json");
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: ClassifierSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: sp.clone(),
            record: 0,
            reason: e.to_string(),
        })?;
        let model = Self::new(net, side.context, side.frame, side.horizon)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok((model, side))
    }
}

fn encode(
    frame: ChunkFrame,
    schedule: &NoiseSchedule,
    k: usize,
    noisy: &[f64],
    anchor: &[f64],
    out: &mut [f64],
) {
    out.copy_from_slice(noisy);
    let dims = match frame {
        ChunkFrame::Absolute => 0,
        ChunkFrame::Relative => 2,
        ChunkFrame::RelativePose => 3,
        ChunkFrame::RelativeAll => ACTION_DIM,
    };
    if dims > 0 {
        let scale = schedule.alpha_bar(k).sqrt();
        for row in out.chunks_mut(ACTION_DIM) {
            for d in 0..dims {
                row[d] -= scale * anchor[d];
            }
        }
    }
}

/// How often each class was drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BalanceAudit {
    pub robot: u64,
    pub human: u64,
}

impl BalanceAudit {
    pub fn robot_fraction(&self) -> f64 {
        self.robot as f64 / (self.robot + self.human).max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierTraining {
    pub model: ClassifierModel,
    pub loss_trace: Vec<f64>,
    pub audit: BalanceAudit,
}

fn check_pair(d_r: &DemoDataset, d_h: &DemoDataset) -> Result<()> {
    if d_r.is_empty() || d_h.is_empty() {
        return Err(Error::Config("classifier needs nonempty robot and human datasets".into()));
    }
    if d_r.task.kind != d_h.task.kind {
        return Err(Error::Config("robot and human datasets are for different tasks".into()));
    }
    if d_r.normalizer()? != d_h.normalizer()? {
        return Err(Error::Config("robot and human datasets use different normalizers".into()));
    }
    Ok(())
}

/// Balanced binary cross-entropy training on noised chunks (robot = 1).
pub fn train_classifier(
    d_r: &DemoDataset,
    d_h: &DemoDataset,
    schedule: &NoiseSchedule,
    cfg: &ClassifierConfig,
    horizon: usize,
    seed: u64,
) -> Result<ClassifierTraining> {
    check_pair(d_r, d_h)?;
    if cfg.batch == 0 {
        return Err(Error::Config("classifier batch must be positive".into()));
    }
    if cfg.rotate && cfg.frame == ChunkFrame::Absolute {
        return Err(Error::Config("rotation needs a relative chunk frame".into()));
    }
    if !(cfg.orientation_shift >= 0.0 && cfg.orientation_shift.is_finite()) {
        return Err(Error::Config("orientation_shift must be finite and non-negative".into()));
    }
    let shift = cfg.orientation_shift / d_r.normalizer()?.action_std[2];
    let robot = d_r.chunks(horizon)?;
    let human = d_h.chunks(horizon)?;
    let mut rng = SeededRng::new(seed);
    let chunk_len = horizon * ACTION_DIM;
    let width = conditioned_width(chunk_len, cfg.context.width());
    let hidden = vec![cfg.hidden; cfg.depth];
    let mut net = FeedForwardNet::mlp(width, &hidden, 1, cfg.activation, &mut rng);
    let mut adam = AdamState::for_net(&net, AdamConfig::default());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut audit = BalanceAudit::default();
    let kmax = schedule.steps();
    let mut batch = InputBatch::new(cfg.batch, chunk_len, cfg.context.width());
    let mut labels = vec![0.0; cfg.batch];
    let mut eps = vec![0.0; chunk_len];
    let mut buf = vec![0.0; chunk_len];
    let mut clean = vec![0.0; chunk_len];
    for step in 0..cfg.steps {
        for i in 0..cfg.batch {
            let is_robot = rng.bernoulli(0.5);
            let pool = if is_robot { &robot } else { &human };
            let c = &pool[rng.index(pool.len())];
            if is_robot {
                audit.robot += 1;
            } else {
                audit.human += 1;
            }
            let k = 1 + rng.index(kmax);
            clean.copy_from_slice(&c.actions);
            if shift > 0.0 {
                let off = rng.uniform_range(-shift, shift);
                clean.iter_mut().skip(2).step_by(ACTION_DIM).for_each(|v| *v += off);
            }
            rng.fill_normal(&mut eps);
            let noisy = forward_noise(schedule, &clean, k, &eps)?;
            encode(cfg.frame, schedule, k, &noisy, &c.anchor, &mut buf);
            if cfg.rotate {
                let (sin, cos) = rng.uniform_range(0.0, std::f64::consts::TAU).sin_cos();
                for row in buf.chunks_mut(ACTION_DIM) {
                    let (x, y) = (row[0], row[1]);
                    row[0] = cos * x - sin * y;
                    row[1] = sin * x + cos * y;
                }
            }
            batch.set(i, k, &buf, cfg.context.select(&c.state));
            labels[i] = if is_robot { 1.0 } else { 0.0 };
        }
        let (out, cache) = net.forward_train(batch.x.view())?;
        let mut loss = 0.0;
        let mut up = Array2::zeros((cfg.batch, 1));
        for (i, (&z, &y)) in out.iter().zip(&labels).enumerate() {
            // Stable BCE on logits.
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            up[[i, 0]] = (sigmoid(z) - y) / cfg.batch as f64;
        }
        loss /= cfg.batch as f64;
        trace.push(loss);
        check_loss(step, loss, &trace)?;
        let mut grads = net.backward_batch(&cache, up.view())?;
        apply_update(&mut net, &mut adam, &mut grads, cfg.lr)?;
    }
    Ok(ClassifierTraining {
        model: ClassifierModel::new(net, cfg.context, cfg.frame, horizon)?,
        loss_trace: trace,
        audit,
    })
}

/// Mean classifier output over `n_draws` noisings of `a0` at step `k`
/// (the clean chunk is used once at `k = 0`).
pub fn robot_probability(
    model: &ClassifierModel,
    schedule: &NoiseSchedule,
    chunk: &Chunk,
    k: usize,
    n_draws: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    Ok(curve_for_chunk(model, schedule, chunk, &[k], n_draws, rng)?[0])
}

fn curve_for_chunk(
    model: &ClassifierModel,
    schedule: &NoiseSchedule,
    chunk: &Chunk,
    ks: &[usize],
    n_draws: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if n_draws == 0 {
        return Err(Error::Config("n_draws must be at least 1".into()));
    }
    let a0 = &chunk.actions;
    let mut noisy: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut eps = vec![0.0; a0.len()];
    for &k in ks {
        if k > schedule.steps() {
            return Err(Error::StepOutOfRange {
                k,
                max: schedule.steps(),
            });
        }
        let draws = if k == 0 { 1 } else { n_draws };
        for _ in 0..draws {
            if k == 0 {
                noisy.push((k, a0.clone()));
            } else {
                rng.fill_normal(&mut eps);
                noisy.push((k, forward_noise(schedule, a0, k, &eps)?));
            }
        }
    }
    let rows: Vec<(usize, &[f64], &Chunk)> =
        noisy.iter().map(|(k, x)| (*k, x.as_slice(), chunk)).collect();
    let p = model.probabilities(schedule, &rows)?;
    let mut out = Vec::with_capacity(ks.len());
    let mut i = 0;
    for &k in ks {
        let draws = if k == 0 { 1 } else { n_draws };
        out.push(p[i..i + draws].iter().sum::<f64>() / draws as f64);
        i += draws;
    }
    Ok(out)
}

/// Raw probability curves for every chunk, parallel across chunks.
pub fn chunk_curves(
    model: &ClassifierModel,
    schedule: &NoiseSchedule,
    chunks: &[Chunk],
    ks: &[usize],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    par::map(chunks, |i, c| {
        let mut rng = SeededRng::with_stream(seed, i as u64);
        curve_for_chunk(model, schedule, c, ks, n_draws, &mut rng)
    })
    .into_iter()
    .collect()
}

/// First `k` whose running-maximum probability reaches 0.5, capped at `K`.
pub fn kstar_from_curve(ks: &[usize], curve: &[f64], cap: usize) -> usize {
    let mut best = f64::NEG_INFINITY;
    for (&k, &p) in ks.iter().zip(curve) {
        best = best.max(p);
        if best >= 0.5 {
            return k;
        }
    }
    cap
}

/// Running maximum, the monotone envelope used for the crossing.
pub fn running_max(curve: &[f64]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    curve
        .iter()
        .map(|&p| {
            best = best.max(p);
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KStarMode {
    #[default]
    PerChunk,
    /// Every chunk gets the maximum k* of its trajectory.
    PerTrajectoryMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStarEntry {
    pub traj: usize,
    pub chunk: usize,
    pub embodiment: Embodiment,
    pub k_star: usize,
    /// Raw probabilities on the annotation's `curve_grid`.
    #[serde(serialize_with = "crate::fmt::vec_f64_17")]
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStarAnnotation {
    pub dataset_id: String,
    pub steps: usize,
    pub mode: KStarMode,
    pub curve_grid: Vec<usize>,
    pub entries: Vec<KStarEntry>,
}

impl KStarAnnotation {
    /// `table[traj][chunk]`, the lookup used by the selective loss.
    pub fn table(&self) -> Vec<Vec<usize>> {
        let n = self.entries.iter().map(|e| e.traj + 1).max().unwrap_or(0);
        let mut t = vec![Vec::new(); n];
        for e in &self.entries {
            let row = &mut t[e.traj];
            if row.len() <= e.chunk {
                row.resize(e.chunk + 1, 0);
            }
            row[e.chunk] = e.k_star;
        }
        t
    }

    /// Same annotation with every k* replaced by `f(k*)`.
    pub fn map_kstar(&self, f: impl Fn(usize) -> usize) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.k_star = f(e.k_star).min(self.steps);
        }
        out
    }

    /// An annotation assigning the same k* to every chunk of `ds`.
    pub fn constant(ds: &DemoDataset, horizon: usize, steps: usize, k_star: usize) -> Self {
        let entries = ds
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| {
                (0..t.chunks(horizon).len()).map(move |ci| KStarEntry {
                    traj: ti,
                    chunk: ci,
                    embodiment: t.embodiment,
                    k_star: k_star.min(steps),
                    curve: Vec::new(),
                })
            })
            .collect();
        Self {
            dataset_id: "constant".into(),
            steps,
            mode: KStarMode::PerChunk,
            curve_grid: Vec::new(),
            entries,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            dataset_id: &'a str,
            steps: usize,
            mode: KStarMode,
            curve_grid: &'a [usize],
            count: usize,
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            dataset_id: &self.dataset_id,
            steps: self.steps,
            mode: self.mode,
            curve_grid: &self.curve_grid,
            count: self.entries.len(),
        };
        w.write_all(to_line(&header).as_bytes())
            .map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            w.write_all(to_line(e).as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            dataset_id: String,
            steps: usize,
            mode: KStarMode,
            curve_grid: Vec<usize>,
            count: usize,
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .unwrap_or_default();
        let h: Header = parse_record(&first, path, 0)?;
        let mut entries = Vec::with_capacity(h.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                entries.push(parse_record::<KStarEntry>(&line, path, i + 1)?);
            }
        }
        if entries.len() != h.count {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                record: entries.len() + 1,
                reason: format!("header declares {} entries, found {}", h.count, entries.len()),
            });
        }
        Ok(Self {
            dataset_id: h.dataset_id,
            steps: h.steps,
            mode: h.mode,
            curve_grid: h.curve_grid,
            entries,
        })
    }
}

/// Evaluates every chunk of `dataset` on the full step grid `0..=K` and
/// records k*. Robot chunks are assigned k* = 0. The stored curve keeps every
/// `curve_stride`-th grid point (plus `K`).
#[allow(clippy::too_many_arguments)]
pub fn annotate_kstar(
    model: &ClassifierModel,
    schedule: &NoiseSchedule,
    dataset: &DemoDataset,
    dataset_id: &str,
    n_draws: usize,
    seed: u64,
    mode: KStarMode,
    curve_stride: usize,
) -> Result<KStarAnnotation> {
    let kmax = schedule.steps();
    let grid: Vec<usize> = (0..=kmax).collect();
    let chunks = dataset.chunks(model.horizon)?;
    let curves = chunk_curves(model, schedule, &chunks, &grid, n_draws, seed)?;
    let stride = curve_stride.max(1);
    let curve_grid: Vec<usize> = grid
        .iter()
        .copied()
        .filter(|k| k % stride == 0 || *k == kmax)
        .collect();
    let mut entries: Vec<KStarEntry> = chunks
        .iter()
        .zip(&curves)
        .map(|(c, curve)| KStarEntry {
            traj: c.traj,
            chunk: c.index,
            embodiment: c.embodiment,
            k_star: match c.embodiment {
                Embodiment::Robot => 0,
                Embodiment::Human => kstar_from_curve(&grid, curve, kmax),
            },
            curve: curve_grid.iter().map(|&k| curve[k]).collect(),
        })
        .collect();
    if mode == KStarMode::PerTrajectoryMax {
        let mut worst = vec![0usize; dataset.len()];
        for e in &entries {
            worst[e.traj] = worst[e.traj].max(e.k_star);
        }
        for e in &mut entries {
            e.k_star = worst[e.traj];
        }
    }
    Ok(KStarAnnotation {
        dataset_id: dataset_id.to_string(),
        steps: kmax,
        mode,
        curve_grid,
        entries,
    })
}

/// Per-embodiment mean robot probability with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityCurve {
    pub ks: Vec<usize>,
    pub robot_mean: Vec<f64>,
    pub robot_se: Vec<f64>,
    pub human_mean: Vec<f64>,
    pub human_se: Vec<f64>,
}

impl ProbabilityCurve {
    /// `mean_robot(k) - mean_human(k)`.
    pub fn gap(&self) -> Vec<f64> {
        self.robot_mean
            .iter()
            .zip(&self.human_mean)
            .map(|(r, h)| r - h)
            .collect()
    }

    /// Standard error of the gap, treating the two groups as independent.
    pub fn gap_se(&self) -> Vec<f64> {
        self.robot_se
            .iter()
            .zip(&self.human_se)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect()
    }
}

fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn probability_curve(
    model: &ClassifierModel,
    schedule: &NoiseSchedule,
    chunks: &[Chunk],
    ks: &[usize],
    n_draws: usize,
    seed: u64,
) -> Result<ProbabilityCurve> {
    let curves = chunk_curves(model, schedule, chunks, ks, n_draws, seed)?;
    let mut out = ProbabilityCurve {
        ks: ks.to_vec(),
        robot_mean: Vec::new(),
        robot_se: Vec::new(),
        human_mean: Vec::new(),
        human_se: Vec::new(),
    };
    for j in 0..ks.len() {
        let pick = |e: Embodiment| {
            chunks
                .iter()
                .zip(&curves)
                .filter(move |(c, _)| c.embodiment == e)
                .map(move |(_, cur)| cur[j])
        };
        let (rm, rs) = mean_se(pick(Embodiment::Robot));
        let (hm, hs) = mean_se(pick(Embodiment::Human));
        out.robot_mean.push(rm);
        out.robot_se.push(rs);
        out.human_mean.push(hm);
        out.human_se.push(hs);
    }
    Ok(out)
}

/// Balanced held-out accuracy (mean of per-class accuracies) at each `k`,
/// thresholding the averaged probability at 0.5.
pub fn heldout_accuracy(
    model: &ClassifierModel,
    schedule: &NoiseSchedule,
    chunks: &[Chunk],
    ks: &[usize],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let curves = chunk_curves(model, schedule, chunks, ks, n_draws, seed)?;
    Ok((0..ks.len())
        .map(|j| {
            let acc = |e: Embodiment| {
                let (mut hit, mut n) = (0usize, 0usize);
                for (c, cur) in chunks.iter().zip(&curves) {
                    if c.embodiment == e {
                        n += 1;
                        let says_robot = cur[j] >= 0.5;
                        if says_robot == (e == Embodiment::Robot) {
                            hit += 1;
                        }
                    }
                }
                hit as f64 / n.max(1) as f64
            };
            0.5 * (acc(Embodiment::Robot) + acc(Embodiment::Human))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleParams};
    use crate::numeric::Layer;
    use ndarray::Array1;

    fn zero_model(horizon: usize, ctx: ContextFeatures) -> ClassifierModel {
        let width = conditioned_width(horizon * 4, ctx.width());
        let net = FeedForwardNet::from_layers(vec![Layer {
            weights: Array2::zeros((1, width)),
            bias: Array1::zeros(1),
            activation: Activation::Identity,
        }])
        .unwrap();
        ClassifierModel::new(net, ctx, ChunkFrame::Relative, horizon).unwrap()
    }

    fn chunk(horizon: usize) -> Chunk {
        Chunk {
            traj: 0,
            index: 0,
            embodiment: Embodiment::Robot,
            style: crate::synth::Style::ScriptedRobot,
            feasible: true,
            state: vec![1.0; STATE_DIM],
            actions: vec![0.3; horizon * ACTION_DIM],
            anchor: vec![0.2; ACTION_DIM],
        }
    }

    #[test]
    fn constant_zero_logit_is_one_half() {
        let s = build_schedule(ScheduleParams::default()).unwrap();
        let m = zero_model(8, ContextFeatures::Full);
        let mut rng = SeededRng::new(3);
        for k in [0, 1, 50, 100] {
            let p = robot_probability(&m, &s, &chunk(8), k, 4, &mut rng).unwrap();
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn crossing_uses_running_max() {
        let ks: Vec<usize> = (0..6).collect();
        assert_eq!(kstar_from_curve(&ks, &[0.1, 0.6, 0.2, 0.3, 0.7, 0.9], 5), 1);
        assert_eq!(kstar_from_curve(&ks, &[0.1, 0.2, 0.2, 0.3, 0.4, 0.45], 5), 5);
        assert_eq!(kstar_from_curve(&ks, &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0], 5), 0);
        let env = running_max(&[0.1, 0.6, 0.2, 0.7]);
        assert_eq!(env, vec![0.1, 0.6, 0.6, 0.7]);
    }

    #[test]
    fn table_and_map() {
        let a = KStarAnnotation {
            dataset_id: "x".into(),
            steps: 10,
            mode: KStarMode::PerChunk,
            curve_grid: vec![],
            entries: vec![
                KStarEntry {
                    traj: 0,
                    chunk: 0,
                    embodiment: Embodiment::Human,
                    k_star: 3,
                    curve: vec![],
                },
                KStarEntry {
                    traj: 1,
                    chunk: 1,
                    embodiment: Embodiment::Human,
                    k_star: 9,
                    curve: vec![],
                },
            ],
        };
        assert_eq!(a.table(), vec![vec![3], vec![0, 9]]);
        assert_eq!(a.map_kstar(|k| k + 5).table(), vec![vec![8], vec![0, 10]]);
    }

    #[test]
    fn zero_draws_rejected() {
        let s = build_schedule(ScheduleParams::default()).unwrap();
        let m = zero_model(2, ContextFeatures::Task);
        let mut rng = SeededRng::new(0);
        assert!(robot_probability(&m, &s, &chunk(2), 3, 0, &mut rng).is_err());
    }
}
