//! Offline analysis of step logs: per-episode statistics, period detection,
//! learning-stage segmentation and plot-ready reward distributions.
//!
//! Everything here is a pure function of the log directory, so re-running the
//! analyzer over the same logs reproduces its outputs byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentRole;
use crate::env::{Action, Payoff, NUM_ACTIONS, NUM_PLAYERS};
use crate::harness::{StepRecord, LOG_HEADER};
use crate::modes::{Mode, ModeKind};
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no records")]
    Empty,
    #[error("records mix runs/episodes ({0})")]
    MixedEpisodes(String),
    #[error("sequence of length {len} is too short for max period {max_period} (need {need})")]
    TooShort { len: usize, max_period: usize, need: usize },
    #[error("max period must be at least 1")]
    BadMaxPeriod,
    #[error("{file} line {line}: {message}")]
    Malformed { file: PathBuf, line: u64, message: String },
    #[error("no step logs (run_*.csv) found in {0}")]
    NoLogs(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Shannon entropy in bits of a count histogram.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Fraction of steps `t >= 1` with `a_t == a_{t-1}`; 0 for sequences shorter than 2.
pub fn repetition_rate<T: PartialEq>(seq: &[T]) -> f64 {
    if seq.len() < 2 {
        return 0.0;
    }
    let repeats = seq.windows(2).filter(|w| w[0] == w[1]).count();
    repeats as f64 / (seq.len() - 1) as f64
}

pub const PERIOD_MATCH_FRACTION: f64 = 0.9;

/// Smallest `p <= max_period` with `a_t == a_{t-p}` for at least 90% of the
/// valid `t`; `None` if no lag qualifies.
pub fn detect_period<T: PartialEq>(seq: &[T], max_period: usize) -> Result<Option<usize>> {
    detect_period_with(seq, max_period, PERIOD_MATCH_FRACTION)
}

pub fn detect_period_with<T: PartialEq>(seq: &[T], max_period: usize, match_fraction: f64) -> Result<Option<usize>> {
    if max_period == 0 {
        return Err(AnalysisError::BadMaxPeriod);
    }
    let need = 3 * max_period;
    if seq.len() < need {
        return Err(AnalysisError::TooShort {
            len: seq.len(),
            max_period,
            need,
        });
    }
    for p in 1..=max_period {
        let valid = seq.len() - p;
        let hits = (p..seq.len()).filter(|&t| seq[t] == seq[t - p]).count();
        if hits as f64 >= match_fraction * valid as f64 {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeStats {
    pub run_id: u32,
    pub episode: u32,
    pub steps: usize,
    pub mean_reward: [f64; NUM_PLAYERS],
    pub repetition_rate: [f64; NUM_PLAYERS],
    pub entropy: [f64; NUM_PLAYERS],
    pub big_wins: [u32; NUM_PLAYERS],
    /// Mean cheater reward minus fair reward; 0 in fair mode.
    pub displacement_index: f64,
    pub dominant_period: [Option<usize>; NUM_PLAYERS],
    /// Largest exploration rate among learning agents this episode.
    pub epsilon: f64,
}

/// Statistics for one episode of one run. Rewards are raw unless `use_shaped`.
pub fn episode_stats(records: &[StepRecord], max_period: usize, use_shaped: bool) -> Result<EpisodeStats> {
    let first = records.first().ok_or(AnalysisError::Empty)?;
    if let Some(r) = records
        .iter()
        .find(|r| r.run_id != first.run_id || r.episode != first.episode)
    {
        return Err(AnalysisError::MixedEpisodes(format!(
            "run {} episode {} vs run {} episode {}",
            first.run_id, first.episode, r.run_id, r.episode
        )));
    }
    let mode = Mode::from_tag(&first.mode).ok();
    let n = records.len() as f64;

    let mut sums = [0i64; NUM_PLAYERS];
    let mut big_wins = [0u32; NUM_PLAYERS];
    let mut counts = [[0u64; NUM_ACTIONS]; NUM_PLAYERS];
    for r in records {
        let rewards = if use_shaped { r.shaped } else { r.raw };
        for i in 0..NUM_PLAYERS {
            sums[i] += i64::from(rewards.get(i).halves());
            if r.raw.get(i) == Payoff::TWO {
                big_wins[i] += 1;
            }
            counts[i][r.actions.get(i).code()] += 1;
        }
    }
    let mean_reward = sums.map(|s| s as f64 / 2.0 / n);

    let mut repetition = [0.0; NUM_PLAYERS];
    let mut entropy = [0.0; NUM_PLAYERS];
    let mut period = [None; NUM_PLAYERS];
    for i in 0..NUM_PLAYERS {
        let seq: Vec<Action> = records.iter().map(|r| r.actions.get(i)).collect();
        repetition[i] = repetition_rate(&seq);
        entropy[i] = entropy_bits(&counts[i]);
        period[i] = detect_period(&seq, max_period).ok().flatten();
    }

    let displacement_index = match mode {
        Some(m) if m.kind != ModeKind::Fair => {
            let [c1, c2] = m.cheaters();
            (mean_reward[c1] + mean_reward[c2]) / 2.0 - mean_reward[m.fair_index]
        }
        _ => 0.0,
    };
    let roles = mode.map(|m| m.roles()).unwrap_or([AgentRole::Fair; NUM_PLAYERS]);
    let epsilon = (0..NUM_PLAYERS)
        .filter(|&i| roles[i] != AgentRole::Random)
        .map(|i| first.epsilons[i])
        .fold(0.0, f64::max);

    Ok(EpisodeStats {
        run_id: first.run_id,
        episode: first.episode,
        steps: records.len(),
        mean_reward,
        repetition_rate: repetition,
        entropy,
        big_wins,
        displacement_index,
        dominant_period: period,
        epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3a,
    Stage3b,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3a => "stage3a",
            Stage::Stage3b => "stage3b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageLabel {
    pub stage: Stage,
    pub first_episode: u32,
    pub last_episode: u32,
}

impl StageLabel {
    pub fn len(&self) -> u32 {
        self.last_episode - self.first_episode + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Thresholds for stage segmentation. Overridable from a TOML table.
///
/// | key                        | default | meaning                                              |
/// |----------------------------|---------|------------------------------------------------------|
/// | `explore_epsilon`          | 0.5     | ε above this means exploration dominates (stage 1)    |
/// | `entropy_margin_bits`      | 0.15    | all entropies within this of log2 3 look random       |
/// | `zero_mean`                | 0.1     | all \|mean reward\| below this is zero-mean play      |
/// | `dominance_gap`            | 0.1     | leader's mean exceeds the runner-up by this (stage 2) |
/// | `repetition_stage2`        | 0.6     | any repetition rate above this (stage 2)              |
/// | `repetition_stage3a`       | 0.8     | some agent repeats above this within stage 3 (3a)     |
/// | `min_zero_run`             | 3       | consecutive zero-mean episodes needed for stage 3     |
/// | `min_segment`              | 3       | shorter segments are merged into a neighbour          |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageThresholds {
    pub explore_epsilon: f64,
    pub entropy_margin_bits: f64,
    pub zero_mean: f64,
    pub dominance_gap: f64,
    pub repetition_stage2: f64,
    pub repetition_stage3a: f64,
    pub min_zero_run: usize,
    pub min_segment: usize,
}

impl Default for StageThresholds {
    fn default() -> Self {
        StageThresholds {
            explore_epsilon: 0.5,
            entropy_margin_bits: 0.15,
            zero_mean: 0.1,
            dominance_gap: 0.1,
            repetition_stage2: 0.6,
            repetition_stage3a: 0.8,
            min_zero_run: 3,
            min_segment: 3,
        }
    }
}

/// Coarse per-episode class before smoothing; stage 3 is split afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coarse {
    Explore,
    Dominance,
    Collusive,
}

fn classify_episodes(stats: &[EpisodeStats], epsilons: &[f64], th: &StageThresholds) -> Vec<Coarse> {
    let max_entropy = (NUM_ACTIONS as f64).log2();
    let zero: Vec<bool> = stats
        .iter()
        .map(|s| s.mean_reward.iter().all(|m| m.abs() < th.zero_mean))
        .collect();
    // zero_run[e]: e sits inside a run of at least min_zero_run zero-mean episodes
    let mut zero_run = vec![false; stats.len()];
    let mut start = 0;
    while start < stats.len() {
        if !zero[start] {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < stats.len() && zero[end] {
            end += 1;
        }
        if end - start >= th.min_zero_run {
            zero_run[start..end].iter_mut().for_each(|z| *z = true);
        }
        start = end;
    }

    let mut out = Vec::with_capacity(stats.len());
    let mut prev = Coarse::Explore;
    for (e, s) in stats.iter().enumerate() {
        let eps = epsilons.get(e).copied().unwrap_or(s.epsilon);
        let near_uniform = s.entropy.iter().all(|&h| h >= max_entropy - th.entropy_margin_bits);
        let patterned = s.dominant_period.iter().any(Option::is_some);
        let mut sorted = s.mean_reward;
        sorted.sort_by(|a, b| b.total_cmp(a));
        let dominant = sorted[0] - sorted[1] >= th.dominance_gap;
        let repetitive = s.repetition_rate.iter().any(|&r| r > th.repetition_stage2);

        let class = if eps > th.explore_epsilon || (near_uniform && !patterned) {
            Coarse::Explore
        } else if zero_run[e] {
            Coarse::Collusive
        } else if dominant || repetitive {
            Coarse::Dominance
        } else {
            prev
        };
        out.push(class);
        prev = class;
    }
    out
}

fn runs_of<T: Copy + PartialEq>(labels: &[T]) -> Vec<(T, usize, usize)> {
    let mut segs: Vec<(T, usize, usize)> = Vec::new();
    for (e, &l) in labels.iter().enumerate() {
        match segs.last_mut() {
            Some((cur, _, end)) if *cur == l => *end = e,
            _ => segs.push((l, e, e)),
        }
    }
    segs
}

/// Merges segments shorter than `min_len` into their predecessor (or successor
/// when first) until every segment is long enough or only one remains.
fn smooth(labels: &mut [Coarse], min_len: usize) {
    loop {
        let segs = runs_of(labels);
        if segs.len() <= 1 {
            return;
        }
        let Some(k) = segs.iter().position(|&(_, a, b)| b - a + 1 < min_len) else {
            return;
        };
        let (_, a, b) = segs[k];
        let fill = if k == 0 { segs[1].0 } else { segs[k - 1].0 };
        labels[a..=b].iter_mut().for_each(|l| *l = fill);
    }
}

/// Segments one run into contiguous stages covering every episode exactly once.
///
/// `epsilons[e]` is the exploration rate during episode `e`; when shorter than
/// `stats`, each episode's logged [`EpisodeStats::epsilon`] is used instead.
pub fn label_stages(stats: &[EpisodeStats], epsilons: &[f64], th: &StageThresholds) -> Result<Vec<StageLabel>> {
    if stats.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut coarse = classify_episodes(stats, epsilons, th);
    smooth(&mut coarse, th.min_segment.max(1));
    let base = stats[0].episode;

    let mut labels: Vec<StageLabel> = Vec::new();
    for (class, a, b) in runs_of(&coarse) {
        let stage = match class {
            Coarse::Explore => Stage::Stage1,
            Coarse::Dominance => Stage::Stage2,
            Coarse::Collusive => {
                let seg = &stats[a..=b];
                let len = seg.len() as f64;
                let repeater = (0..NUM_PLAYERS)
                    .any(|i| seg.iter().map(|s| s.repetition_rate[i]).sum::<f64>() / len > th.repetition_stage3a);
                if repeater {
                    Stage::Stage3a
                } else {
                    Stage::Stage3b
                }
            }
        };
        labels.push(StageLabel {
            stage,
            first_episode: base + a as u32,
            last_episode: base + b as u32,
        });
    }
    Ok(labels)
}

/// Linear-interpolation quantile (numpy's default) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuartileRow {
    pub lr: f64,
    pub episode_bucket: u32,
    pub agent: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl QuartileRow {
    pub fn from_values(lr: f64, episode_bucket: u32, agent: usize, values: &mut [f64]) -> Self {
        values.sort_by(f64::total_cmp);
        QuartileRow {
            lr,
            episode_bucket,
            agent,
            min: values[0],
            q1: quantile_sorted(values, 0.25),
            median: quantile_sorted(values, 0.5),
            q3: quantile_sorted(values, 0.75),
            max: values[values.len() - 1],
        }
    }
}

/// Five-number summary of per-episode mean rewards across runs, per
/// (learning rate, episode bucket, agent). Rows are ordered by lr, bucket, agent.
pub fn reward_distribution(runs: &[RunAnalysis], bucket_size: u32) -> Vec<QuartileRow> {
    let bucket_size = bucket_size.max(1);
    let mut groups: BTreeMap<(u64, u32, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for run in runs {
        for s in &run.stats {
            for agent in 0..NUM_PLAYERS {
                groups
                    .entry((run.lr.to_bits(), s.episode / bucket_size, agent))
                    .or_insert_with(|| (run.lr, Vec::new()))
                    .1
                    .push(s.mean_reward[agent]);
            }
        }
    }
    let mut rows: Vec<QuartileRow> = groups
        .into_iter()
        .map(|((_, bucket, agent), (lr, mut v))| QuartileRow::from_values(lr, bucket, agent, &mut v))
        .collect();
    rows.sort_by(|a, b| {
        a.lr.total_cmp(&b.lr)
            .then(a.episode_bucket.cmp(&b.episode_bucket))
            .then(a.agent.cmp(&b.agent))
    });
    rows
}

/// One run's parsed log.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub file: PathBuf,
    pub run_id: u32,
    pub lr: f64,
    pub mode: Mode,
    /// Records grouped by episode, in log order.
    pub episodes: Vec<Vec<StepRecord>>,
}

impl RunLog {
    pub fn records(&self) -> impl Iterator<Item = &StepRecord> {
        self.episodes.iter().flatten()
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<RunLog> {
    let path = path.as_ref();
    let malformed = |line: u64, message: String| AnalysisError::Malformed {
        file: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| malformed(0, e.to_string()))?;
    let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if header.iter().ne(LOG_HEADER.iter().copied()) {
        return Err(malformed(1, format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut episodes: Vec<Vec<StepRecord>> = Vec::new();
    let mut first: Option<StepRecord> = None;
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let rec = StepRecord::from_row(row.iter()).map_err(|m| malformed(line, m))?;
        if !rec.is_consistent() {
            return Err(malformed(line, "rewards do not match the logged actions and mode".into()));
        }
        if let Some(f) = &first {
            if rec.run_id != f.run_id || rec.mode != f.mode {
                return Err(malformed(line, "run_id/mode changes within one log".into()));
            }
        }
        match episodes.last_mut() {
            Some(ep) if ep[0].episode == rec.episode => {
                if rec.step <= ep.last().unwrap().step {
                    return Err(malformed(line, format!("step {} is not increasing", rec.step)));
                }
                ep.push(rec.clone());
            }
            Some(ep) if rec.episode < ep[0].episode => {
                return Err(malformed(line, format!("episode {} out of order", rec.episode)));
            }
            _ => episodes.push(vec![rec.clone()]),
        }
        first.get_or_insert(rec);
    }
    let first = first.ok_or_else(|| malformed(2, "log has no records".into()))?;
    let mode = Mode::from_tag(&first.mode).map_err(|e| malformed(2, e.to_string()))?;
    Ok(RunLog {
        file: path.to_path_buf(),
        run_id: first.run_id,
        lr: first.lr,
        mode,
        episodes,
    })
}

/// Step logs in a directory (`run_*.csv`), sorted by file name.
pub fn find_logs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| AnalysisError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("run_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AnalysisError::NoLogs(dir.to_path_buf()));
    }
    Ok(files)
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub max_period: usize,
    pub bucket_size: u32,
    pub use_shaped: bool,
    pub thresholds: StageThresholds,
    pub execution: Execution,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            max_period: 6,
            bucket_size: 1,
            use_shaped: false,
            thresholds: StageThresholds::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunAnalysis {
    pub run_id: u32,
    pub lr: f64,
    pub mode: Mode,
    pub file: PathBuf,
    pub stats: Vec<EpisodeStats>,
    pub stages: Vec<StageLabel>,
}

pub fn analyze_run(log: &RunLog, opts: &AnalysisOptions) -> Result<RunAnalysis> {
    let stats = log
        .episodes
        .iter()
        .map(|ep| episode_stats(ep, opts.max_period, opts.use_shaped))
        .collect::<Result<Vec<_>>>()?;
    let epsilons: Vec<f64> = stats.iter().map(|s| s.epsilon).collect();
    let stages = label_stages(&stats, &epsilons, &opts.thresholds)?;
    Ok(RunAnalysis {
        run_id: log.run_id,
        lr: log.lr,
        mode: log.mode,
        file: log.file.clone(),
        stats,
        stages,
    })
}

pub fn analyze_logs(files: &[PathBuf], opts: &AnalysisOptions) -> Result<Vec<RunAnalysis>> {
    let results = opts.execution.map(files, |f| read_log(f).and_then(|log| analyze_run(&log, opts)));
    let mut runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    runs.sort_by_key(|r| r.run_id);
    Ok(runs)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn render_report(runs: &[RunAnalysis]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "stage report: {} run(s)", runs.len());
    for run in runs {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "run {} (lr {}, mode {}, {} episodes, {})",
            run.run_id,
            run.lr,
            run.mode.tag(),
            run.stats.len(),
            run.file.file_name().and_then(|n| n.to_str()).unwrap_or("?")
        );
        for seg in &run.stages {
            let _ = writeln!(
                out,
                "  {:<8} episodes {:>4}-{:<4} ({} episodes)",
                seg.stage.as_str(),
                seg.first_episode,
                seg.last_episode,
                seg.len()
            );
        }
        let tail = run.stats.len().saturating_sub(10);
        for agent in 0..NUM_PLAYERS {
            let _ = writeln!(
                out,
                "  agent {agent}: mean reward {:.4}, last-10 mean {:.4}, big wins {}, mean entropy {:.3} bits, mean repetition {:.3}",
                mean(run.stats.iter().map(|s| s.mean_reward[agent])),
                mean(run.stats[tail..].iter().map(|s| s.mean_reward[agent])),
                run.stats.iter().map(|s| u64::from(s.big_wins[agent])).sum::<u64>(),
                mean(run.stats.iter().map(|s| s.entropy[agent])),
                mean(run.stats.iter().map(|s| s.repetition_rate[agent])),
            );
        }
        let _ = writeln!(
            out,
            "  mean displacement index {:.4}",
            mean(run.stats.iter().map(|s| s.displacement_index))
        );
    }
    out
}

pub const STAGES_HEADER: &str = "run_id,stage,first_episode,last_episode";
pub const DISTRIBUTION_HEADER: &str = "lr,episode_bucket,agent,min,q1,median,q3,max";
pub const DISPLACEMENT_HEADER: &str = "run_id,episode,displacement_index,bigwin_f,bigwin_c1,bigwin_c2";

pub fn stages_csv(runs: &[RunAnalysis]) -> String {
    let mut s = format!("{STAGES_HEADER}\n");
    for run in runs {
        for seg in &run.stages {
            let _ = writeln!(s, "{},{},{},{}", run.run_id, seg.stage.as_str(), seg.first_episode, seg.last_episode);
        }
    }
    s
}

pub fn distribution_csv(rows: &[QuartileRow]) -> String {
    let mut s = format!("{DISTRIBUTION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.lr, r.episode_bucket, r.agent, r.min, r.q1, r.median, r.q3, r.max
        );
    }
    s
}

pub fn displacement_csv(runs: &[RunAnalysis]) -> String {
    let mut s = format!("{DISPLACEMENT_HEADER}\n");
    for run in runs {
        let (f, [c1, c2]) = (run.mode.fair_index, run.mode.cheaters());
        for st in &run.stats {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                run.run_id, st.episode, st.displacement_index, st.big_wins[f], st.big_wins[c1], st.big_wins[c2]
            );
        }
    }
    s
}

pub fn distribution_file_name(lr: f64) -> String {
    format!("reward_distribution_lr{lr}.csv")
}

/// What [`analyze_dir`] wrote.
#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub runs: Vec<RunAnalysis>,
    pub report: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Reads every step log in `input`, writes the text report to `report` and
/// `stages.csv`, `displacement.csv` and one `reward_distribution_lr<lr>.csv`
/// per learning rate into `plot_dir`.
pub fn analyze_dir(input: &Path, report: &Path, plot_dir: &Path, opts: &AnalysisOptions) -> Result<AnalysisOutput> {
    let files = find_logs(input)?;
    let runs = analyze_logs(&files, opts)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AnalysisError::Io { path, source }
    };
    fs::create_dir_all(plot_dir).map_err(io(plot_dir))?;
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(report, render_report(&runs)).map_err(io(report))?;

    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = plot_dir.join(name);
        fs::write(&p, body).map_err(io(&p))?;
        written.push(p);
        Ok(())
    };
    put("stages.csv".into(), stages_csv(&runs))?;
    put("displacement.csv".into(), displacement_csv(&runs))?;

    let rows = reward_distribution(&runs, opts.bucket_size);
    let mut by_lr: BTreeMap<u64, (f64, Vec<QuartileRow>)> = BTreeMap::new();
    for r in rows {
        by_lr.entry(r.lr.to_bits()).or_insert_with(|| (r.lr, Vec::new())).1.push(r);
    }
    let mut lrs: Vec<(f64, Vec<QuartileRow>)> = by_lr.into_values().collect();
    lrs.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (lr, rows) in lrs {
        put(distribution_file_name(lr), distribution_csv(&rows))?;
    }
    Ok(AnalysisOutput {
        runs,
        report: report.to_path_buf(),
        files: written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reward, JointAction};
    use crate::modes::shape_rewards;
    use Action::*;

    fn records(mode: Mode, episode: u32, joints: &[JointAction]) -> Vec<StepRecord> {
        joints
            .iter()
            .enumerate()
            .map(|(t, &j)| {
                let raw = reward(j);
                StepRecord {
                    run_id: 0,
                    lr: 0.005,
                    episode,
                    step: t as u32,
                    actions: j,
                    raw,
                    shaped: shape_rewards(&mode, raw),
                    epsilons: [0.0; 3],
                    message: None,
                    mode: mode.tag(),
                }
            })
            .collect()
    }

    #[test]
    fn constant_rock_episode() {
        let j = vec![JointAction::new(Rock, Rock, Rock); 300];
        let s = episode_stats(&records(Mode::fair(), 0, &j), 6, false).unwrap();
        assert_eq!(s.repetition_rate, [1.0; 3]);
        assert_eq!(s.entropy, [0.0; 3]);
        assert_eq!(s.dominant_period, [Some(1); 3]);
    }

    #[test]
    fn paper_rock_rock_every_step() {
        let j = vec![JointAction::new(Paper, Rock, Rock); 300];
        let s = episode_stats(&records(Mode::implicit(), 0, &j), 6, false).unwrap();
        assert_eq!(s.mean_reward, [2.0, -1.0, -1.0]);
        assert_eq!(s.big_wins, [300, 0, 0]);
        assert_eq!(s.displacement_index, -3.0);
        let shaped = episode_stats(&records(Mode::implicit(), 0, &j), 6, true).unwrap();
        assert_eq!(shaped.mean_reward, [2.0, -1.0, -1.0]);
    }

    #[test]
    fn mixed_episodes_rejected() {
        let j = vec![JointAction::new(Rock, Rock, Rock); 4];
        let mut r = records(Mode::fair(), 0, &j);
        r[3].episode = 1;
        assert!(matches!(episode_stats(&r, 1, false), Err(AnalysisError::MixedEpisodes(_))));
        assert!(matches!(episode_stats(&[], 1, false), Err(AnalysisError::Empty)));
    }

    #[test]
    fn period_detection_basics() {
        let alt: Vec<Action> = (0..60).map(|t| if t % 2 == 0 { Rock } else { Scissors }).collect();
        assert_eq!(detect_period(&alt, 6).unwrap(), Some(2));
        assert_eq!(detect_period(&[Paper; 30], 6).unwrap(), Some(1));
        let cyc: Vec<Action> = (0..60).map(|t| Action::ALL[t % 3]).collect();
        assert_eq!(detect_period(&cyc, 6).unwrap(), Some(3));
        assert!(matches!(detect_period(&[Rock; 10], 6), Err(AnalysisError::TooShort { .. })));
        assert!(detect_period(&[Rock; 10], 0).is_err());
    }

    #[test]
    fn entropy_bounds() {
        assert_eq!(entropy_bits(&[5, 0, 0]), 0.0);
        assert!((entropy_bits(&[1, 1, 1]) - 3f64.log2()).abs() < 1e-12);
        assert_eq!(entropy_bits(&[1, 1]), 1.0);
    }

    #[test]
    fn quartiles() {
        let mut v = vec![0.2, -0.2];
        let r = QuartileRow::from_values(0.01, 0, 0, &mut v);
        assert_eq!(r.median, 0.0);
        assert_eq!((r.min, r.max), (-0.2, 0.2));
        let mut one = vec![0.7];
        let r = QuartileRow::from_values(0.01, 0, 0, &mut one);
        assert_eq!([r.min, r.q1, r.median, r.q3, r.max], [0.7; 5]);
        let s: Vec<f64> = (1..=5).map(f64::from).collect();
        assert_eq!(quantile_sorted(&s, 0.25), 2.0);
        assert_eq!(quantile_sorted(&s, 0.5), 3.0);
    }

    #[test]
    fn smoothing_absorbs_short_segments() {
        use Coarse::*;
        let mut l = vec![Explore, Explore, Explore, Dominance, Explore, Explore, Collusive, Collusive, Collusive];
        smooth(&mut l, 3);
        assert_eq!(l, vec![Explore, Explore, Explore, Explore, Explore, Explore, Collusive, Collusive, Collusive]);
        let mut l = vec![Dominance, Collusive, Collusive, Collusive];
        smooth(&mut l, 3);
        assert_eq!(l, vec![Collusive; 4]);
    }

    #[test]
    fn empty_series_is_error() {
        assert!(label_stages(&[], &[], &StageThresholds::default()).is_err());
    }
}
