use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::heads::HeadMode;

use super::{evaluate_top1, sample_few_shot, train_episode, EpisodeSpec, TextSource, TrainConfig, TrainedEpisode};

pub const DEFAULT_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];
pub const DEFAULT_LR_GRID: [f64; 2] = [0.001, 0.0001];
pub const DEFAULT_WD_GRID: [f64; 3] = [0.0, 0.01, 0.0001];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub best: TrainedEpisode,
    pub best_lr: f64,
    pub best_wd: f64,
    /// Selection-set accuracy of the winner.
    pub accuracy: f64,
    /// Every grid point in (lr, wd) ascending order.
    pub grid: Vec<GridPoint>,
}

fn sorted_grid(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Trains every (lr, wd) pair and keeps the one with the best accuracy on
/// `select`. Ties go to the lower lr, then the lower wd.
pub fn sweep_grid(
    lr_grid: &[f64],
    wd_grid: &[f64],
    train: &Dataset,
    select: &Dataset,
    text: TextSource<'_>,
    episode: &EpisodeSpec,
    cfg: &TrainConfig,
) -> Result<SweepOutcome> {
    if lr_grid.is_empty() || wd_grid.is_empty() {
        return Err(Error::Config("learning-rate and weight-decay grids must be nonempty".into()));
    }
    let mut best: Option<SweepOutcome> = None;
    let mut grid = Vec::new();
    for &lr in &sorted_grid(lr_grid) {
        for &wd in &sorted_grid(wd_grid) {
            let run_cfg = TrainConfig {
                base_lr: lr,
                weight_decay: wd,
                ..cfg.clone()
            };
            let trained = train_episode(train, text, episode, &run_cfg)?;
            let accuracy = evaluate_top1(&trained.params, select, cfg.head_mode, &cfg.sopool)?;
            grid.push(GridPoint {
                lr,
                weight_decay: wd,
                accuracy,
            });
            if best.as_ref().map_or(true, |b| accuracy > b.accuracy) {
                best = Some(SweepOutcome {
                    best: trained,
                    best_lr: lr,
                    best_wd: wd,
                    accuracy,
                    grid: Vec::new(),
                });
            }
        }
    }
    let mut out = best.expect("grids are nonempty");
    out.grid = grid;
    Ok(out)
}

/// Pre-split data. Few-shot supports are drawn from `train`; hyperparameters
/// are selected on `val`; the reported figure is on `test` when given,
/// otherwise on `val`.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

/// One table row: a text source and a head mode.
#[derive(Debug, Clone)]
pub struct RowSpec<'a> {
    /// Text-prompt column, e.g. `none`, `vanilla`, `coop4`.
    pub prompt: String,
    pub text: TextSource<'a>,
    pub head_mode: HeadMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sweep: bool,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    /// Worker threads for independent episodes; 1 runs everything in order.
    /// Not serialised: it never changes results.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            shots: DEFAULT_SHOTS.to_vec(),
            seeds: vec![0, 1, 2],
            sweep: false,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            wd_grid: DEFAULT_WD_GRID.to_vec(),
            threads: 1,
        }
    }
}

/// Everything recorded about one (row, shots, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub modal: String,
    pub text_prompt: String,
    pub method: String,
    pub head_mode: HeadMode,
    pub shots: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Top-1 on the reporting set.
    pub accuracy: f64,
    pub evaluated_on: String,
    /// Top-1 on the selection (val) set.
    pub selection_accuracy: f64,
    pub train_accuracy: f64,
    pub grid: Vec<GridPoint>,
    pub loss_history: Vec<(usize, f64)>,
    pub support: Vec<Vec<usize>>,
    #[serde(skip)]
    pub wallclock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub modal: String,
    pub text_prompt: String,
    pub method: String,
    /// Mean accuracy per shot column, in column order.
    pub means: Vec<f64>,
}

/// Mean accuracy per (row, shots), laid out like the prompt-ablation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub shots: Vec<usize>,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    /// Groups records by (modal, prompt, method) in first-seen order and
    /// averages over seeds in record order.
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let mut shots: Vec<usize> = records.iter().map(|r| r.shots).collect();
        shots.sort_unstable();
        shots.dedup();
        let mut keys: Vec<(&str, &str, &str)> = Vec::new();
        for r in records {
            let k = (r.modal.as_str(), r.text_prompt.as_str(), r.method.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let rows = keys
            .iter()
            .map(|&(modal, prompt, method)| {
                let means = shots
                    .iter()
                    .map(|&s| {
                        let accs: Vec<f64> = records
                            .iter()
                            .filter(|r| r.modal == modal && r.text_prompt == prompt && r.method == method && r.shots == s)
                            .map(|r| r.accuracy)
                            .collect();
                        if accs.is_empty() {
                            f64::NAN
                        } else {
                            accs.iter().sum::<f64>() / accs.len() as f64
                        }
                    })
                    .collect();
                SummaryRow {
                    modal: modal.into(),
                    text_prompt: prompt.into(),
                    method: method.into(),
                    means,
                }
            })
            .collect();
        Self { shots, rows }
    }

    /// `modal,text_prompt,method,1-shot,...`; accuracies as fractions at
    /// full precision, empty cells left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modal,text_prompt,method");
        for s in &self.shots {
            out.push_str(&format!(",{s}-shot"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.modal, r.text_prompt, r.method));
            for m in &r.means {
                if m.is_nan() {
                    out.push(',');
                } else {
                    out.push_str(&format!(",{m}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub episodes: Vec<EpisodeRecord>,
    pub table: SummaryTable,
}

struct Job<'r, 'a> {
    row: &'r RowSpec<'a>,
    shots: usize,
    seed: u64,
}

fn run_cell(job: &Job<'_, '_>, data: ProtocolData<'_>, pcfg: &ProtocolConfig, base: &TrainConfig) -> Result<EpisodeRecord> {
    let start = Instant::now();
    let cfg = TrainConfig {
        head_mode: job.row.head_mode,
        seed: job.seed,
        ..base.clone()
    };
    let episode = sample_few_shot(&data.train.labels(), data.train.classes(), job.shots, job.seed)?;
    let (trained, lr, wd, selection_accuracy, grid) = if pcfg.sweep {
        let s = sweep_grid(&pcfg.lr_grid, &pcfg.wd_grid, data.train, data.val, job.row.text, &episode, &cfg)?;
        (s.best, s.best_lr, s.best_wd, s.accuracy, s.grid)
    } else {
        let t = train_episode(data.train, job.row.text, &episode, &cfg)?;
        let acc = evaluate_top1(&t.params, data.val, cfg.head_mode, &cfg.sopool)?;
        (t, cfg.base_lr, cfg.weight_decay, acc, Vec::new())
    };
    let (accuracy, evaluated_on) = match data.test {
        Some(test) => (evaluate_top1(&trained.params, test, cfg.head_mode, &cfg.sopool)?, "test"),
        None => (selection_accuracy, "val"),
    };
    let modal = if job.row.text.is_none() { "uni modal" } else { "multi modal" };
    Ok(EpisodeRecord {
        modal: modal.into(),
        text_prompt: job.row.prompt.clone(),
        method: job.row.head_mode.table_label().into(),
        head_mode: job.row.head_mode,
        shots: job.shots,
        seed: job.seed,
        lr,
        weight_decay: wd,
        accuracy,
        evaluated_on: evaluated_on.into(),
        selection_accuracy,
        train_accuracy: trained.train_accuracy,
        grid,
        loss_history: trained.loss_history,
        support: episode.indices,
        wallclock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs every (row, shots, seed) cell. Cells are independent and may run on
/// `threads` workers; records come back in (row, shots, seed) order
/// regardless.
pub fn run_protocol(
    data: ProtocolData<'_>,
    rows: &[RowSpec<'_>],
    pcfg: &ProtocolConfig,
    base: &TrainConfig,
) -> Result<ProtocolReport> {
    base.validate()?;
    if rows.is_empty() || pcfg.shots.is_empty() || pcfg.seeds.is_empty() {
        return Err(Error::Config("protocol needs at least one row, shot count and seed".into()));
    }
    if pcfg.sweep && (pcfg.lr_grid.is_empty() || pcfg.wd_grid.is_empty()) {
        return Err(Error::Config("sweep grids must be nonempty".into()));
    }
    let mut jobs = Vec::new();
    for row in rows {
        for &shots in &pcfg.shots {
            for &seed in &pcfg.seeds {
                jobs.push(Job { row, shots, seed });
            }
        }
    }
    let slots: Mutex<Vec<Option<Result<EpisodeRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= jobs.len() {
            break;
        }
        let out = run_cell(&jobs[i], data, pcfg, base);
        let failed = out.is_err();
        slots.lock().expect("collector lock")[i] = Some(out);
        if failed {
            // let the other workers drain without starting new cells
            next.store(jobs.len(), Ordering::Relaxed);
        }
    };
    let threads = pcfg.threads.clamp(1, jobs.len());
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    let mut episodes = Vec::with_capacity(jobs.len());
    for slot in slots.into_inner().expect("collector lock") {
        match slot {
            Some(Ok(r)) => episodes.push(r),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    if episodes.len() != jobs.len() {
        return Err(Error::Validation("protocol stopped before every cell ran".into()));
    }
    let table = SummaryTable::from_records(&episodes);
    Ok(ProtocolReport { episodes, table })
}
