use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use crfgan_study::{ServiceConfig, StudyReport, StudyService, SystemClock};
use serde::{Deserialize, Serialize};

use super::serve::{load_library, EVENT_LOG};
use super::write_json;
use crate::error::{CliError, Result};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::util::{create_dir, load_config, resolve_input};

pub const REPORT_FILE: &str = "study_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Event log written by `serve`.
    pub log: PathBuf,
    /// The volume directories the study was served from.
    pub volumes: Vec<PathBuf>,
    /// Report one study; all studies when unset.
    pub study_id: Option<String>,
    pub out: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            log: PathBuf::from("runs/study").join(EVENT_LOG),
            volumes: Vec::new(),
            study_id: None,
            out: "runs/study-report".into(),
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Repeatable volume directory.
    #[arg(long = "volumes")]
    pub volumes: Vec<PathBuf>,
    #[arg(long)]
    pub study_id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Args {
    pub fn resolve(self) -> Result<Config> {
        let mut c: Config = load_config(self.config.as_deref())?;
        if let Some(v) = self.log {
            c.log = v;
        }
        if !self.volumes.is_empty() {
            c.volumes = self.volumes;
        }
        if self.study_id.is_some() {
            c.study_id = self.study_id;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        Ok(c)
    }
}

/// Replays the log and writes a map of study id to report.
pub fn execute(cfg: Config, out: &mut dyn Write) -> Result<RunManifest> {
    let log = resolve_input(&cfg.log);
    if !log.is_file() {
        return Err(CliError::missing(format!("event log {} does not exist", log.display())));
    }
    let library = Arc::new(load_library(&cfg.volumes)?);
    let mb = ManifestBuilder::start("report", None, None);
    let service = StudyService::open(
        library,
        Arc::new(SystemClock),
        ServiceConfig {
            seed: 0,
            log_path: Some(log),
        },
    )?;
    let ids = match &cfg.study_id {
        Some(id) => vec![id.clone()],
        None => service.study_ids(),
    };
    let mut reports = BTreeMap::new();
    for id in ids {
        let r: StudyReport = service.report(&id)?;
        let accuracy = r.section1.accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
        let _ = writeln!(
            out,
            "{id}: {}/{} sessions completed, section 1 accuracy {accuracy}",
            r.sessions_completed, r.sessions_total
        );
        reports.insert(id, r);
    }
    create_dir(&cfg.out)?;
    let path = write_json(&cfg.out, REPORT_FILE, &reports)?;
    mb.finish(&cfg.out, &cfg, &[path])
}
