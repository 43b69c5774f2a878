use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lbmnar::io::to_json17;
use lbmnar::metrics::{ItemLoss, LatentMse};
use lbmnar::{FitConfig, FitResult, ModelParams, VariationalState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::options::Options;
use crate::CliError;

pub const ERROR_FILE: &str = "error.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: FitConfig,
    /// Every resolved setting, flags and config file merged.
    pub options: Options,
    /// SHA-256 of the input files, in the order they were read.
    pub input_digest: Option<String>,
    pub seed: u64,
    pub version: String,
    /// Seconds per phase; empty in deterministic mode.
    pub timings: BTreeMap<String, f64>,
}

/// Collects the manifest while a command runs.
pub struct Run {
    pub manifest: RunManifest,
    hasher: Option<Sha256>,
    deterministic: bool,
}

impl Run {
    pub fn new(command: &str, opts: &Options) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_owned(),
                config: opts.fit_config(),
                options: opts.clone(),
                input_digest: None,
                seed: opts.seed(),
                version: env!("CARGO_PKG_VERSION").to_owned(),
                timings: BTreeMap::new(),
            },
            hasher: None,
            deterministic: opts.deterministic(),
        }
    }

    /// Reads a file and folds it into the input digest.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        self.hasher.get_or_insert_with(Sha256::new).update(&bytes);
        Ok(bytes)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&mut self, path: &Path) -> Result<T, CliError> {
        let bytes = self.read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        if !self.deterministic {
            self.manifest.timings.insert(phase.to_owned(), start.elapsed().as_secs_f64());
        }
        out
    }

    pub fn finish(mut self) -> RunManifest {
        if let Some(h) = self.hasher.take() {
            self.manifest.input_digest = Some(h.finalize().iter().map(|b| format!("{b:02x}")).collect());
        }
        self.manifest
    }
}

/// Result of one fit as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub manifest: RunManifest,
    pub params: ModelParams,
    pub elbo_trace: Vec<f64>,
    pub icl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    pub converged: bool,
    pub n_iters: usize,
    pub varstate: VariationalState,
}

impl FitRecord {
    pub fn new(manifest: RunManifest, fit: &FitResult, icl: f64, metrics: Option<Metrics>) -> Self {
        Self {
            manifest,
            params: fit.params.clone(),
            elbo_trace: fit.elbo_trace.clone(),
            icl,
            metrics,
            converged: fit.converged,
            n_iters: fit.n_iters,
            varstate: fit.varstate.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub l_item: ItemLoss,
    pub param_max_error: f64,
    pub latent_mse: LatentMse,
}

/// Writes every output into a hidden staging name first and renames it in
/// place once all of them are complete.
pub struct Writer {
    dir: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
}

impl Writer {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_owned(),
            staged: Vec::new(),
        })
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.partial"));
        fs::write(&tmp, contents)?;
        self.staged.push((tmp, target));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = to_json17(value)?;
        s.push('\n');
        self.text(name, &s)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(header)?;
        for row in rows {
            out.write_record(&row)?;
        }
        let bytes = out.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
        self.text(name, &String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        let mut done = Vec::new();
        for (tmp, target) in std::mem::take(&mut self.staged) {
            fs::rename(&tmp, &target)?;
            done.push(target);
        }
        Ok(done)
    }
}

impl Drop for Writer {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
    }
}
