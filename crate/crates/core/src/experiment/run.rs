use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, ExperimentPlan, ResolvedArm};
use crate::config::GritConfig;
use crate::eval::uov;
use crate::format::{load_schedule, save_corpus, save_schedule};
use crate::rng::{derive_stream, StreamLabel};
use crate::toymodel::{CorpusSpec, EpochOutcome, SyntheticCorpus, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Pending,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub arm: String,
    pub seed: u64,
    pub dir: String,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub cells: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, ExperimentError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn store(&self, dir: &Path) -> Result<(), ExperimentError> {
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| ExperimentError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| ExperimentError::io(path, e))
}

/// One row of a cell's `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub arm: String,
    pub seed: u64,
    pub config_hash: String,
    pub epoch: u32,
    pub steps: u64,
    pub provenance: String,
    pub itc: f64,
    pub cons: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
    pub mean_neg_sim: f64,
    pub neg_q10: f64,
    pub neg_q50: f64,
    pub neg_q90: f64,
    pub same_cluster_frac: f64,
    pub intra_batch_sim: f64,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub arm: String,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: u32,
    pub steps: u64,
    pub final_r1_i2t: f64,
    pub final_r1_t2i: f64,
    pub mean_neg_sim: f64,
    pub same_cluster_frac: f64,
    pub intra_batch_sim: f64,
    pub steps_to_threshold: Option<u64>,
    /// At the largest evaluation mask probability of the grid.
    pub uov1: Option<f64>,
    pub uov5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub arm: String,
    pub seed: u64,
    pub epoch_seconds_median: f64,
    pub schedule_seconds_median: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
struct TimingRow<'a> {
    arm: &'a str,
    seed: u64,
    epoch: u32,
    schedule_seconds: f64,
    train_seconds: f64,
    total_seconds: f64,
}

pub(crate) fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile; NaN for an empty slice.
pub(crate) fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| ExperimentError::io(path, e))
}

fn cell_dir_name(arm: &str, seed: u64) -> String {
    format!("{arm}__s{seed}")
}

/// Trains one `(arm, seed)` cell and writes its files into `dir`.
pub fn run_cell(
    plan: &ExperimentPlan,
    arm: &ResolvedArm,
    seed: u64,
    dir: &Path,
) -> Result<(CellSummary, CellTiming), ExperimentError> {
    let cell_seed = plan.cell_seed(seed);
    let spec = CorpusSpec { seed: cell_seed, ..plan.corpus.clone() };
    let corpus = SyntheticCorpus::from_spec(&spec)?;
    let cfg = GritConfig { master_seed: cell_seed, ..(*arm.config).clone() }
        .validate()
        .map_err(|source| ExperimentError::Config { arm: arm.name.clone(), source })?;
    let mut state = TrainState::new(&corpus, cfg, arm.train.clone())?;
    if let Some(path) = &plan.initial_schedule {
        state.set_next_schedule(load_schedule(path)?);
    }
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    if plan.dump.corpus {
        save_corpus(&corpus, &dir.join("corpus.grco"))?;
    }
    let sched_dir = dir.join("schedules");
    if plan.dump.schedules {
        std::fs::create_dir_all(&sched_dir).map_err(|e| ExperimentError::io(&sched_dir, e))?;
    }

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let mut last: Option<EpochOutcome> = None;
    for _ in 0..plan.epochs {
        let out = state.run_epoch()?;
        if plan.dump.schedules {
            save_schedule(&out.schedule, &sched_dir.join(format!("epoch-{:03}.grsc", out.metrics.epoch)))?;
        }
        let m = &out.metrics;
        let h = &m.hardness;
        rows.push(MetricsRow {
            arm: arm.name.clone(),
            seed,
            config_hash: arm.config_hash.clone(),
            epoch: m.epoch,
            steps: m.steps,
            provenance: format!("{:?}", m.provenance).to_lowercase(),
            itc: m.itc,
            cons: m.cons,
            itm: m.itm,
            mlm: m.mlm,
            total: m.total,
            mean_neg_sim: h.mean_neg_sim,
            neg_q10: h.q10,
            neg_q50: h.q50,
            neg_q90: h.q90,
            same_cluster_frac: h.same_cluster_frac,
            intra_batch_sim: h.intra_batch_sim,
            r1_i2t: m.r1_i2t,
            r1_t2i: m.r1_t2i,
        });
        timing.push(out.timing);
        last = Some(out);
    }
    let last = last.expect("epochs >= 1");
    write_csv(&dir.join("metrics.csv"), &rows)?;
    let timing_rows: Vec<TimingRow<'_>> = timing
        .iter()
        .enumerate()
        .map(|(e, t)| TimingRow {
            arm: &arm.name,
            seed,
            epoch: e as u32,
            schedule_seconds: t.schedule_seconds,
            train_seconds: t.train_seconds,
            total_seconds: t.total_seconds,
        })
        .collect();
    write_csv(&dir.join("timing.csv"), &timing_rows)?;

    let (mut uov1, mut uov5) = (None, None);
    if !plan.uov_grid.is_empty() {
        let rng = derive_stream(cell_seed, StreamLabel::Masking).substream(u64::MAX);
        let report = uov(&state.model, &corpus, &corpus.eval_ids(), &plan.uov_grid, &rng)?;
        write_csv(&dir.join("uov.csv"), &report.points)?;
        if let Some(top) = report.points.iter().max_by(|a, b| a.mask_prob.total_cmp(&b.mask_prob)) {
            (uov1, uov5) = (Some(top.uov1), Some(top.uov5));
        }
    }
    let h = &last.metrics.hardness;
    let summary = CellSummary {
        arm: arm.name.clone(),
        seed,
        config_hash: arm.config_hash.clone(),
        epochs: plan.epochs,
        steps: state.steps(),
        final_r1_i2t: last.metrics.r1_i2t,
        final_r1_t2i: last.metrics.r1_t2i,
        mean_neg_sim: h.mean_neg_sim,
        same_cluster_frac: h.same_cluster_frac,
        intra_batch_sim: h.intra_batch_sim,
        steps_to_threshold: state.steps_to_threshold(),
        uov1,
        uov5,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)
        .map_err(|e| ExperimentError::io(dir, e))?;
    let epoch_secs: Vec<f64> = timing.iter().map(|t| t.total_seconds).collect();
    let sched_secs: Vec<f64> = timing.iter().map(|t| t.schedule_seconds).collect();
    let cell_timing = CellTiming {
        arm: arm.name.clone(),
        seed,
        epoch_seconds_median: median(&epoch_secs),
        schedule_seconds_median: median(&sched_secs),
        total_seconds: epoch_secs.iter().sum(),
    };
    Ok((summary, cell_timing))
}

type CellResult = Result<(CellSummary, CellTiming), String>;

#[derive(Debug, Clone, Serialize)]
struct ArmSummary {
    arm: String,
    config_hash: String,
    cells: usize,
    final_r1_median: f64,
    mean_neg_sim_median: f64,
    same_cluster_frac_median: f64,
    steps_to_threshold_median: Option<f64>,
    uov1_median: Option<f64>,
}

/// Runs every cell of `plan` into `out`. Each cell is built in a
/// `.partial` directory and renamed when complete; the manifest is
/// rewritten atomically after every cell.
pub fn run(plan: &ExperimentPlan, out: &Path, opts: RunOptions) -> Result<Vec<CellSummary>, ExperimentError> {
    let arms = plan.resolve()?;
    if let Some(p) = &plan.initial_schedule {
        load_schedule(p)?;
    }
    std::fs::create_dir_all(out.join("cells")).map_err(|e| ExperimentError::io(out, e))?;
    std::fs::write(out.join("plan.json"), serde_json::to_string_pretty(plan)?)
        .map_err(|e| ExperimentError::io(out, e))?;

    let cells: Vec<(usize, u64)> =
        plan.seeds.iter().flat_map(|&s| (0..arms.len()).map(move |a| (a, s))).collect();
    let manifest = Mutex::new(Manifest {
        master_seed: plan.base.master_seed,
        cells: cells
            .iter()
            .map(|&(a, s)| ManifestEntry {
                arm: arms[a].name.clone(),
                seed: s,
                dir: format!("cells/{}", cell_dir_name(&arms[a].name, s)),
                status: CellStatus::Pending,
                error: None,
            })
            .collect(),
    });
    manifest.lock().expect("manifest lock").store(out)?;

    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let work = || -> Result<(), ExperimentError> {
        loop {
            let k = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(a, seed)) = cells.get(k) else { return Ok(()) };
            let final_dir = out.join("cells").join(cell_dir_name(&arms[a].name, seed));
            let partial = final_dir.with_extension("partial");
            let _ = std::fs::remove_dir_all(&partial);
            let res = run_cell(plan, &arms[a], seed, &partial).and_then(|r| {
                let _ = std::fs::remove_dir_all(&final_dir);
                std::fs::rename(&partial, &final_dir).map_err(|e| ExperimentError::io(&final_dir, e))?;
                Ok(r)
            });
            let mut m = manifest.lock().expect("manifest lock");
            match &res {
                Ok(_) => m.cells[k].status = CellStatus::Complete,
                Err(e) => {
                    m.cells[k].status = CellStatus::Failed;
                    m.cells[k].error = Some(e.to_string());
                }
            }
            m.store(out)?;
            drop(m);
            results.lock().expect("results lock")[k] = Some(res.map_err(|e| e.to_string()));
        }
    };
    let jobs = opts.jobs.max(1).min(cells.len());
    std::thread::scope(|s| -> Result<(), ExperimentError> {
        let handles: Vec<_> = (0..jobs).map(|_| s.spawn(work)).collect();
        for h in handles {
            h.join().expect("cell worker panicked")?;
        }
        Ok(())
    })?;

    let results = results.into_inner().expect("results lock");
    let failed = results.iter().filter(|r| !matches!(r, Some(Ok(_)))).count();
    let done: Vec<(CellSummary, CellTiming)> = results.into_iter().flatten().flatten().collect();
    let summaries: Vec<CellSummary> = done.iter().map(|d| d.0.clone()).collect();
    let timings: Vec<CellTiming> = done.iter().map(|d| d.1.clone()).collect();
    write_csv(&out.join("cells.csv"), &summaries)?;
    write_csv(&out.join("cells_timing.csv"), &timings)?;

    let per_arm: Vec<ArmSummary> = arms
        .iter()
        .map(|arm| {
            let mine: Vec<&CellSummary> = summaries.iter().filter(|c| c.arm == arm.name).collect();
            let col = |f: &dyn Fn(&CellSummary) -> Option<f64>| {
                let v: Vec<f64> = mine.iter().filter_map(|c| f(c)).collect();
                (!v.is_empty()).then(|| median(&v))
            };
            ArmSummary {
                arm: arm.name.clone(),
                config_hash: arm.config_hash.clone(),
                cells: mine.len(),
                final_r1_median: col(&|c| Some(0.5 * (c.final_r1_i2t + c.final_r1_t2i))).unwrap_or(f64::NAN),
                mean_neg_sim_median: col(&|c| Some(c.mean_neg_sim)).unwrap_or(f64::NAN),
                same_cluster_frac_median: col(&|c| Some(c.same_cluster_frac)).unwrap_or(f64::NAN),
                steps_to_threshold_median: col(&|c| c.steps_to_threshold.map(|s| s as f64)),
                uov1_median: col(&|c| c.uov1),
            }
        })
        .collect();
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&per_arm)?)
        .map_err(|e| ExperimentError::io(out, e))?;

    if failed > 0 {
        return Err(ExperimentError::CellsFailed { failed, total: cells.len() });
    }
    Ok(summaries)
}
