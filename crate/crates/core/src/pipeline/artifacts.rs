//! On-disk layout of a training run.
//!
//! ```text
//! <out>/config.toml
//! <out>/metrics.csv            one row per iteration and view
//! <out>/timings.csv            one row per iteration and stage
//! <out>/reports.jsonl          full iteration reports
//! <out>/progress.json          last completed iteration
//! <out>/memory_bank.csv
//! <out>/pseudo_labels/iter_XXX.csv
//! <out>/checkpoints/{initial_multi,initial_ego,multi,ego,ppf}.txt
//! ```
//!
//! Pseudo labels and the filter are written as soon as they exist; the bank,
//! the detectors and the progress marker are written once an iteration's
//! fits are done, so a run can be resumed from its last completed iteration.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::train::IterationReport;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::geometry::{ProposalSet, View};
use crate::io::checkpoint::ParamMap;
use crate::io::{read_text, records, write_text};
use crate::pps::MemoryBank;
use crate::ppf::PpfClassifier;
use crate::weakdet::DetectorModel;

pub const METRICS_HEADER: &str =
    "iteration,view,tau,lambda,num_labels,ap_03,ap_05,precision_05,recall_05,band_0_30,band_30_50,band_50_100";
pub const TIMINGS_HEADER: &str = "iteration,stage,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Progress {
    completed: usize,
}

#[derive(Debug, Clone)]
pub struct RunWriter {
    dir: PathBuf,
}

impl RunWriter {
    /// Prepares `dir` for a fresh run, truncating previous logs.
    pub fn create(dir: &Path) -> Result<Self> {
        for sub in ["pseudo_labels", "checkpoints"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let w = Self { dir: dir.to_path_buf() };
        write_text(&w.metrics_path(), &format!("{METRICS_HEADER}\n"))?;
        write_text(&w.timings_path(), &format!("{TIMINGS_HEADER}\n"))?;
        write_text(&w.reports_path(), "")?;
        let progress = w.dir.join("progress.json");
        if progress.exists() {
            std::fs::remove_file(&progress).map_err(|e| Error::io(&progress, e))?;
        }
        Ok(w)
    }

    /// Attaches to an existing run directory without touching it.
    pub fn open(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn timings_path(&self) -> PathBuf {
        self.dir.join("timings.csv")
    }

    fn reports_path(&self) -> PathBuf {
        self.dir.join("reports.jsonl")
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.txt"))
    }

    pub fn pseudo_label_path(&self, t: usize) -> PathBuf {
        self.dir.join(format!("pseudo_labels/iter_{t:03}.csv"))
    }

    pub fn write_config(&self, cfg: &PipelineConfig) -> Result<()> {
        write_text(&self.dir.join("config.toml"), &cfg.to_toml_string())
    }

    pub fn read_config(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(&self.dir.join("config.toml"))
    }

    pub fn write_pseudo_labels(&self, t: usize, multi: &[ProposalSet], ego: &[ProposalSet]) -> Result<()> {
        records::write_proposals(&self.pseudo_label_path(t), multi.iter().chain(ego))
    }

    /// Labels of iteration `t` split into (multi, ego), each in frame order.
    pub fn read_pseudo_labels(&self, t: usize) -> Result<(Vec<ProposalSet>, Vec<ProposalSet>)> {
        Ok(records::read_proposals(&self.pseudo_label_path(t))?
            .into_iter()
            .partition(|s| s.view == View::Multi))
    }

    pub fn write_bank(&self, bank: &MemoryBank) -> Result<()> {
        bank.save(&self.dir.join("memory_bank.csv"))
    }

    pub fn read_bank(&self) -> Result<MemoryBank> {
        MemoryBank::load(&self.dir.join("memory_bank.csv"))
    }

    pub fn write_initial(&self, multi: &DetectorModel, ego: &DetectorModel) -> Result<()> {
        multi.to_params().save(&self.checkpoint("initial_multi"))?;
        ego.to_params().save(&self.checkpoint("initial_ego"))
    }

    pub fn write_detectors(&self, multi: &DetectorModel, ego: &DetectorModel) -> Result<()> {
        multi.to_params().save(&self.checkpoint("multi"))?;
        ego.to_params().save(&self.checkpoint("ego"))
    }

    pub fn read_detector(&self, name: &str) -> Result<DetectorModel> {
        DetectorModel::from_params(&ParamMap::load(&self.checkpoint(name))?)
    }

    pub fn write_ppf(&self, clf: &PpfClassifier) -> Result<()> {
        clf.to_params().save(&self.checkpoint("ppf"))
    }

    pub fn read_ppf(&self) -> Result<Option<PpfClassifier>> {
        let path = self.checkpoint("ppf");
        if !path.exists() {
            return Ok(None);
        }
        PpfClassifier::from_params(&ParamMap::load(&path)?).map(Some)
    }

    pub fn write_progress(&self, completed: usize) -> Result<()> {
        let text = serde_json::to_string(&Progress { completed }).expect("progress serializes");
        write_text(&self.dir.join("progress.json"), &text)
    }

    /// Last completed iteration, 0 when the directory holds no progress.
    pub fn read_progress(&self) -> Result<usize> {
        let path = self.dir.join("progress.json");
        if !path.exists() {
            return Ok(0);
        }
        let p: Progress = serde_json::from_str(&read_text(&path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(p.completed)
    }

    pub fn append_report(&self, r: &IterationReport) -> Result<()> {
        let mut m = String::new();
        for (view, n, rep) in [("multi", r.multi_labels, &r.multi), ("ego", r.ego_labels, &r.ego)] {
            m.push_str(&metrics_row(r.iteration, view, r.tau, r.lambda, n, rep.as_ref()));
        }
        append(&self.metrics_path(), &m)?;
        let mut t = String::new();
        for (stage, secs) in &r.timings {
            let _ = writeln!(t, "{},{stage},{secs:.6}", r.iteration);
        }
        append(&self.timings_path(), &t)?;
        let line = serde_json::to_string(r).expect("report serializes");
        append(&self.reports_path(), &format!("{line}\n"))
    }

    /// Reports of iterations `1..=completed`.
    pub fn read_reports(&self, completed: usize) -> Result<Vec<IterationReport>> {
        let path = self.reports_path();
        let text = read_text(&path)?;
        let reports = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<IterationReport>(l)
                    .map_err(|e| crate::io::parse_err(&path, i + 1, e.to_string()))
            })
            .filter(|r| r.as_ref().map_or(true, |r| r.iteration <= completed))
            .collect::<Result<Vec<_>>>()?;
        if reports.len() != completed {
            return Err(Error::Config(format!(
                "{} holds {} reports, expected {completed}",
                path.display(),
                reports.len()
            )));
        }
        Ok(reports)
    }

    /// Drops log rows of iterations after `completed`, left by an interrupted
    /// iteration.
    pub fn truncate_logs(&self, completed: usize) -> Result<()> {
        for path in [self.metrics_path(), self.timings_path()] {
            let text = read_text(&path)?;
            let mut lines = text.lines();
            let mut out = format!("{}\n", lines.next().unwrap_or_default());
            for l in lines {
                let t: usize = l.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
                if t <= completed {
                    out.push_str(l);
                    out.push('\n');
                }
            }
            write_text(&path, &out)?;
        }
        let kept: String = self
            .read_reports(completed)?
            .iter()
            .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
            .collect();
        write_text(&self.reports_path(), &kept)
    }
}

fn metrics_row(t: usize, view: &str, tau: f64, lambda: f64, n: usize, rep: Option<&EvalReport>) -> String {
    let mut s = format!("{t},{view},{tau},{lambda},{n}");
    match rep {
        Some(r) => {
            let _ = write!(s, ",{},{},{},{}", r.ap_03, r.ap_05, r.precision_05, r.recall_05);
            for b in &r.bands {
                let _ = write!(s, ",{}", b.ap);
            }
        }
        None => s.push_str(",,,,,,,"),
    }
    s.push('\n');
    s
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}
