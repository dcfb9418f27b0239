//! Online adaptation: seven explicit state machines processed over a
//! fixed-order stream with batch size 1.
//!
//! Every method is a struct implementing [`OnlineAdapter`]; `step`
//! consumes one sample and mutates the state. States can be snapshotted to
//! a directory (manifest plus little-endian `f64` blobs, mirroring the
//! bundle conventions) and restored for crash-resumable streams.

mod boost;
mod dmn;
mod dpe;
mod dynaprompt;
mod ecalp;
mod onzeta;
mod tda;

pub use boost::{BoostAdapterState, BoostConfig};
pub use dmn::{DmnConfig, DmnState};
pub use dpe::{dpe_loss_and_grad, DpeConfig, DpeState};
pub use dynaprompt::{DynaPromptConfig, DynaPromptState};
pub use ecalp::{EcalpConfig, EcalpState};
pub use onzeta::{OnZetaConfig, OnZetaState};
pub use tda::{TdaConfig, TdaState};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bundle::{SampleRecord, ScoringRule};
use crate::episodic::Prediction;
use crate::error::{Result, TtaError};
use crate::optim::OptimConfig;
use crate::scoring::Probs;

/// The seven online methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OnlineMethod {
    Tda,
    Dmn,
    OnZeta,
    BoostAdapter,
    Dpe,
    Ecalp,
    DynaPrompt,
}

impl OnlineMethod {
    pub const ALL: [OnlineMethod; 7] = [
        OnlineMethod::Tda,
        OnlineMethod::Dmn,
        OnlineMethod::OnZeta,
        OnlineMethod::BoostAdapter,
        OnlineMethod::Dpe,
        OnlineMethod::Ecalp,
        OnlineMethod::DynaPrompt,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            OnlineMethod::Tda => "tda",
            OnlineMethod::Dmn => "dmn",
            OnlineMethod::OnZeta => "onzeta",
            OnlineMethod::BoostAdapter => "boostadapter",
            OnlineMethod::Dpe => "dpe",
            OnlineMethod::Ecalp => "ecalp",
            OnlineMethod::DynaPrompt => "dynaprompt",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }
}

/// Configuration for the online family. The shared `optim` block drives
/// DynaPrompt's per-shift updates and the confident-view selection used by
/// the augmentation-based methods.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct OnlineConfig {
    pub optim: OptimConfig,
    pub tda: TdaConfig,
    pub dmn: DmnConfig,
    pub onzeta: OnZetaConfig,
    pub boost: BoostConfig,
    pub dpe: DpeConfig,
    pub ecalp: EcalpConfig,
    pub dynaprompt: DynaPromptConfig,
}

/// One step of an online state machine.
pub trait OnlineAdapter: Send {
    fn step(&mut self, sample: &SampleRecord) -> Result<Prediction>;

    /// Number of samples consumed so far.
    fn step_counter(&self) -> u64;

    /// Serializable image of the full mutable state.
    fn snapshot(&self) -> StateSnapshot;
}

/// Construct a fresh state for a method over a fixed text bank.
pub fn new_online_state(
    method: OnlineMethod,
    bank: Array2<f64>,
    rule: ScoringRule,
    cfg: &OnlineConfig,
) -> Result<Box<dyn OnlineAdapter>> {
    Ok(match method {
        OnlineMethod::Tda => Box::new(TdaState::new(bank, rule, cfg.tda.clone())),
        OnlineMethod::Dmn => Box::new(DmnState::new(bank, rule, cfg.dmn.clone())),
        OnlineMethod::OnZeta => Box::new(OnZetaState::new(bank, rule, cfg.onzeta.clone())),
        OnlineMethod::BoostAdapter => {
            Box::new(BoostAdapterState::new(bank, rule, cfg.boost.clone()))
        }
        OnlineMethod::Dpe => Box::new(DpeState::new(bank, rule, cfg.dpe.clone())),
        OnlineMethod::Ecalp => Box::new(EcalpState::new(bank, rule, cfg.ecalp.clone())?),
        OnlineMethod::DynaPrompt => Box::new(DynaPromptState::new(
            bank,
            rule,
            cfg.dynaprompt.clone(),
            cfg.optim,
        )),
    })
}

/// Restore a state previously written by [`save_state`]. The bank, rule
/// and config must match the original run; only the mutable state lives in
/// the snapshot.
pub fn restore_online_state(
    dir: &Path,
    bank: Array2<f64>,
    rule: ScoringRule,
    cfg: &OnlineConfig,
) -> Result<Box<dyn OnlineAdapter>> {
    let snapshot = load_snapshot(dir)?;
    let method = OnlineMethod::from_tag(&snapshot.method_tag).ok_or_else(|| {
        TtaError::UnknownMethod {
            tag: snapshot.method_tag.clone(),
            available: OnlineMethod::ALL.map(|m| m.tag()).join(", "),
        }
    })?;
    Ok(match method {
        OnlineMethod::Tda => Box::new(TdaState::restore(&snapshot, bank, rule, cfg.tda.clone())?),
        OnlineMethod::Dmn => Box::new(DmnState::restore(&snapshot, bank, rule, cfg.dmn.clone())?),
        OnlineMethod::OnZeta => Box::new(OnZetaState::restore(
            &snapshot,
            bank,
            rule,
            cfg.onzeta.clone(),
        )?),
        OnlineMethod::BoostAdapter => Box::new(BoostAdapterState::restore(
            &snapshot,
            bank,
            rule,
            cfg.boost.clone(),
        )?),
        OnlineMethod::Dpe => Box::new(DpeState::restore(&snapshot, bank, rule, cfg.dpe.clone())?),
        OnlineMethod::Ecalp => Box::new(EcalpState::restore(
            &snapshot,
            bank,
            rule,
            cfg.ecalp.clone(),
        )?),
        OnlineMethod::DynaPrompt => Box::new(DynaPromptState::restore(
            &snapshot,
            bank,
            rule,
            cfg.dynaprompt.clone(),
            cfg.optim,
        )?),
    })
}

/// Mutable-state image: scalars and structure in `meta`, numeric matrices
/// as named blobs.
#[derive(Debug, Clone)]
pub struct StateSnapshot {
    pub method_tag: String,
    pub step_counter: u64,
    pub meta: serde_json::Value,
    pub matrices: BTreeMap<String, Array2<f64>>,
}

impl StateSnapshot {
    pub fn new(method_tag: &str, step_counter: u64, meta: serde_json::Value) -> Self {
        StateSnapshot {
            method_tag: method_tag.to_string(),
            step_counter,
            meta,
            matrices: BTreeMap::new(),
        }
    }

    pub fn with_matrix(mut self, name: &str, m: Array2<f64>) -> Self {
        self.matrices.insert(name.to_string(), m);
        self
    }

    pub fn matrix(&self, name: &str) -> Result<&Array2<f64>> {
        self.matrices
            .get(name)
            .ok_or_else(|| TtaError::Manifest(format!("snapshot is missing matrix '{name}'")))
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotManifest {
    format_version: u32,
    method_tag: String,
    step_counter: u64,
    matrices: BTreeMap<String, (usize, usize)>,
    meta: serde_json::Value,
}

/// Write a state snapshot directory: `state.json` plus one `<name>.f64`
/// little-endian blob per matrix.
pub fn save_state(state: &dyn OnlineAdapter, dir: &Path) -> Result<()> {
    let snapshot = state.snapshot();
    fs::create_dir_all(dir).map_err(|e| TtaError::io(dir, e))?;
    let manifest = SnapshotManifest {
        format_version: 1,
        method_tag: snapshot.method_tag.clone(),
        step_counter: snapshot.step_counter,
        matrices: snapshot
            .matrices
            .iter()
            .map(|(k, v)| (k.clone(), v.dim()))
            .collect(),
        meta: snapshot.meta.clone(),
    };
    let manifest_path = dir.join("state.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TtaError::Manifest(e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| TtaError::io(&manifest_path, e))?;
    for (name, matrix) in &snapshot.matrices {
        let path = dir.join(format!("{name}.f64"));
        let file = fs::File::create(&path).map_err(|e| TtaError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = [0u8; 8];
        for &v in matrix.iter() {
            LittleEndian::write_f64(&mut buf, v);
            w.write_all(&buf).map_err(|e| TtaError::io(&path, e))?;
        }
        w.flush().map_err(|e| TtaError::io(&path, e))?;
    }
    Ok(())
}

fn load_snapshot(dir: &Path) -> Result<StateSnapshot> {
    let manifest_path = dir.join("state.json");
    let bytes = fs::read(&manifest_path).map_err(|e| TtaError::io(&manifest_path, e))?;
    let manifest: SnapshotManifest = serde_json::from_slice(&bytes)
        .map_err(|e| TtaError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != 1 {
        return Err(TtaError::UnknownFormatVersion(manifest.format_version));
    }
    let mut matrices = BTreeMap::new();
    for (name, (rows, cols)) in &manifest.matrices {
        let path = dir.join(format!("{name}.f64"));
        let bytes = fs::read(&path).map_err(|e| TtaError::io(&path, e))?;
        let expected = rows * cols * 8;
        if bytes.len() != expected {
            return Err(TtaError::BlobSize {
                name: format!("{name}.f64"),
                expected: expected as u64,
                found: bytes.len() as u64,
            });
        }
        let mut values = vec![0f64; rows * cols];
        LittleEndian::read_f64_into(&bytes, &mut values);
        matrices.insert(
            name.clone(),
            Array2::from_shape_vec((*rows, *cols), values)
                .map_err(|e| TtaError::Manifest(e.to_string()))?,
        );
    }
    Ok(StateSnapshot {
        method_tag: manifest.method_tag,
        step_counter: manifest.step_counter,
        meta: manifest.meta,
        matrices,
    })
}

/// A capacity-bounded per-class store of confident features, shared by the
/// cache-attention methods. Insertion keeps the lowest-entropy entries,
/// evicting the current maximum when full.
#[derive(Debug, Clone)]
pub(crate) struct ClassCache {
    capacity: usize,
    entries: Vec<Vec<CacheEntry>>,
}

/// One cached feature with its scoring byproducts.
#[derive(Debug, Clone)]
pub(crate) struct CacheEntry {
    pub feature: Array1<f64>,
    pub entropy: f64,
    pub pseudo_label: usize,
    pub probs: Probs,
}

impl ClassCache {
    pub fn new(classes: usize, capacity: usize) -> Self {
        ClassCache {
            capacity,
            entries: vec![Vec::new(); classes],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert(&mut self, entry: CacheEntry) {
        let slot = &mut self.entries[entry.pseudo_label];
        if slot.len() < self.capacity {
            slot.push(entry);
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let mut worst = 0;
        for (i, e) in slot.iter().enumerate() {
            if e.entropy > slot[worst].entropy {
                worst = i;
            }
        }
        if entry.entropy < slot[worst].entropy {
            slot[worst] = entry;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|s| s.is_empty())
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|s| s.len()).sum()
    }

    #[cfg(test)]
    pub fn class_len(&self, class: usize) -> usize {
        self.entries[class].len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter().flatten()
    }

    /// Similarity-weighted one-hot attention readout:
    /// `sum_e exp(gamma (cos(x, f_e) - 1)) * onehot(label_e)`.
    pub fn attention(&self, x: &Array1<f64>, gamma: f64, classes: usize) -> Array1<f64> {
        let mut scores = Array1::<f64>::zeros(classes);
        for e in self.iter() {
            let cos = e.feature.dot(x);
            scores[e.pseudo_label] += (gamma * (cos - 1.0)).exp();
        }
        scores
    }
}

/// Shared helper: attention weight of a single cached feature.
pub(crate) fn attention_weight(x: &Array1<f64>, feature: &Array1<f64>, gamma: f64) -> f64 {
    (gamma * (feature.dot(x) - 1.0)).exp()
}
