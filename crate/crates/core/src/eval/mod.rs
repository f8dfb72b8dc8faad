//! Gradient-check suite, downstream probes and checkpoint inspection.

mod probes;
mod suite;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::model_fingerprint;
use crate::error::Result;
use crate::model::{parameter_count, ModelConfig};
use crate::trainer::Checkpoint;

pub use probes::{
    probe_cross_modal, probe_frame_classifier, probe_stm, CrossModalOptions, FrameProbeOptions, StmProbeOptions,
    MIN_STM_PAIRS,
};
pub use suite::{gradcheck_suite, SuiteOptions, LINEAR_TOLERANCE, SMOOTH_TOLERANCE};

/// Outcome of one probe, serialised as pretty JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub metrics: BTreeMap<String, f64>,
    pub conditions: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub seed: u64,
    pub fingerprint: String,
    pub config: ModelConfig,
}

impl ProbeReport {
    fn new(probe: &str, config: &ModelConfig, seed: u64) -> Self {
        ProbeReport {
            probe: probe.to_string(),
            metrics: BTreeMap::new(),
            conditions: Vec::new(),
            counts: BTreeMap::new(),
            seed,
            fingerprint: model_fingerprint(config),
            config: config.clone(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Human-readable summary of a checkpoint.
pub fn inspect(ckpt: &Checkpoint) -> String {
    let cfg: &ModelConfig = &ckpt.model;
    let mut s = String::new();
    let _ = writeln!(s, "format version   {}", ckpt.version);
    let _ = writeln!(s, "fingerprint      {}", ckpt.fingerprint);
    let _ = writeln!(s, "speech layers    {}", cfg.n_speech_layers);
    let _ = writeln!(s, "shared layers    {}", cfg.n_shared_layers);
    let _ = writeln!(s, "model dim        {}", cfg.model_dim());
    let _ = writeln!(s, "text vocabulary  {}", cfg.vocab_size);
    let _ = writeln!(s, "codebook         {} x {}", cfg.codebook_groups, cfg.codebook_size);
    let _ = writeln!(
        s,
        "stage cursor     stage {} step {} (global step {})",
        ckpt.state.stage, ckpt.state.step_in_stage, ckpt.state.global_step
    );
    let _ = writeln!(s, "optimizer state  {}", if ckpt.optimizer.is_some() { "present" } else { "absent" });
    let _ = writeln!(s, "parameters       {} tensors, {} values", ckpt.params.len(), ckpt.num_elements());
    let _ = writeln!(s, "analytic count   {}", parameter_count(cfg));
    for (name, value) in &ckpt.params {
        let _ = writeln!(s, "  {name:<48} {:?}", value.shape());
    }
    s
}
