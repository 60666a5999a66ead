use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use crfgan_study::{ImageLibrary, ServiceConfig, StudyDefinition, StudyService, SystemClock};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, ErrorKind, Result};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::util::{create_dir, load_config, resolve_input};

pub const EVENT_LOG: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Directories of `.mhd` volumes, keyed by file stem; stems must be
    /// unique across directories.
    pub volumes: Vec<PathBuf>,
    pub addr: String,
    /// Holds the event log and the run manifest.
    pub out: PathBuf,
    pub seed: u64,
    /// JSON study definition created at startup unless the log already
    /// holds a study with the same name.
    pub study: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            volumes: Vec::new(),
            addr: "127.0.0.1:8080".into(),
            out: "runs/study".into(),
            seed: 0,
            study: None,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Repeatable volume directory.
    #[arg(long = "volumes")]
    pub volumes: Vec<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub study: Option<PathBuf>,
}

impl Args {
    pub fn resolve(self) -> Result<Config> {
        let mut c: Config = load_config(self.config.as_deref())?;
        if !self.volumes.is_empty() {
            c.volumes = self.volumes;
        }
        if let Some(v) = self.addr {
            c.addr = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.study.is_some() {
            c.study = self.study;
        }
        Ok(c)
    }
}

/// Merges the volume directories into one library.
pub fn load_library(dirs: &[PathBuf]) -> Result<ImageLibrary> {
    if dirs.is_empty() {
        return Err(CliError::config("at least one volume directory is required"));
    }
    let mut lib = ImageLibrary::new();
    for dir in dirs {
        let part = ImageLibrary::load_dir(&resolve_input(dir))?;
        for id in part.ids() {
            if lib.get(id).is_some() {
                return Err(CliError::config(format!("volume id {id:?} appears in more than one directory")));
            }
            lib.insert(id, part.get(id).expect("listed id").clone());
        }
    }
    if lib.is_empty() {
        return Err(CliError::missing("the volume directories contain no .mhd files"));
    }
    Ok(lib)
}

fn read_definition(path: &std::path::Path) -> Result<StudyDefinition> {
    let path = resolve_input(path);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn execute(cfg: Config, out: &mut dyn Write) -> Result<RunManifest> {
    let addr: SocketAddr = cfg
        .addr
        .parse()
        .map_err(|_| CliError::config(format!("invalid listen address {:?}", cfg.addr)))?;
    let definition = cfg.study.as_deref().map(read_definition).transpose()?;
    let library = Arc::new(load_library(&cfg.volumes)?);
    create_dir(&cfg.out)?;
    let mb = ManifestBuilder::start("serve", Some(cfg.seed), None);
    let service = StudyService::open(
        library,
        Arc::new(SystemClock),
        ServiceConfig {
            seed: cfg.seed,
            log_path: Some(cfg.out.join(EVENT_LOG)),
        },
    )?;
    if let Some(def) = definition {
        match service.study_id_by_name(&def.name) {
            Some(id) => {
                let _ = writeln!(out, "study {id} (existing)");
            }
            None => {
                let created = service.create_study(def)?;
                let _ = writeln!(out, "study {}", created.study_id);
            }
        }
    }
    let manifest = mb.finish(&cfg.out, &cfg, &[])?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new(ErrorKind::Service, e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::new(ErrorKind::Service, format!("bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| CliError::new(ErrorKind::Service, e.to_string()))?;
        let _ = writeln!(out, "listening on http://{local}");
        let _ = out.flush();
        crfgan_study::http::serve(listener, Arc::new(service))
            .await
            .map_err(|e| CliError::new(ErrorKind::Service, e.to_string()))
    })?;
    Ok(manifest)
}
