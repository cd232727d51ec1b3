//! Binary checkpoints: magic line, length-prefixed JSON header with the tensor
//! manifest and metadata, then little-endian f64 tensor data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamSet, PlateauSchedule};
use crate::predictor::{Predictor, PredictorConfig};
use crate::schedule::ScheduleConfig;
use crate::shape_autoencoder::{Autoencoder, AutoencoderConfig};
use crate::training::{AtomCountHistogram, TrainConfig, TrainerState};

pub const MAGIC: &[u8] = b"SHAPEDIFF1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    manifest: Vec<ManifestEntry>,
    metadata: Value,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub tensors: Vec<(String, Matrix)>,
    pub metadata: Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, m) in &self.tensors {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
                offset: payload.len(),
            });
            for x in m.iter() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            manifest,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("bad magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])?;
        let payload = &rest[header_len..];
        let mut tensors = Vec::with_capacity(header.manifest.len());
        let mut expected = 0;
        for e in header.manifest {
            let n = e.shape[0] * e.shape[1];
            if e.offset != expected || payload.len() < e.offset + 8 * n {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has a bad offset or is truncated",
                    e.name
                )));
            }
            let data: Vec<f64> = payload[e.offset..e.offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Matrix::from_shape_vec((e.shape[0], e.shape[1]), data)
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
            tensors.push((e.name, m));
            expected += 8 * n;
        }
        if expected != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    fn group(&self, prefix: &str) -> (Vec<String>, Vec<Matrix>) {
        self.tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone())))
            .unzip()
    }
}

fn named(prefix: &str, params: &ParamSet, values: &[Matrix]) -> Vec<(String, Matrix)> {
    params
        .names()
        .iter()
        .zip(values)
        .map(|(n, m)| (format!("{prefix}{n}"), m.clone()))
        .collect()
}

pub const AUTOENCODER_KIND: &str = "shape_autoencoder";
pub const DIFFUSION_KIND: &str = "diffusion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AutoencoderMeta {
    config: AutoencoderConfig,
    seed: u64,
}

pub fn save_autoencoder(path: &Path, ae: &Autoencoder, seed: u64) -> Result<()> {
    Checkpoint {
        kind: AUTOENCODER_KIND.into(),
        tensors: named("param/", &ae.params, ae.params.values()),
        metadata: serde_json::to_value(AutoencoderMeta {
            config: ae.config.clone(),
            seed,
        })?,
    }
    .save(path)
}

pub fn load_autoencoder(path: &Path) -> Result<Autoencoder> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(AUTOENCODER_KIND)?;
    let meta: AutoencoderMeta = serde_json::from_value(ck.metadata.clone())?;
    let mut ae = Autoencoder::new(meta.config, meta.seed)?;
    let (names, values) = ck.group("param/");
    ae.params.load_from(&names, &values)?;
    Ok(ae)
}

/// Plateau schedule with the initial infinite best loss stored as `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PlateauMeta {
    lr: f64,
    factor: f64,
    min_lr: f64,
    patience: usize,
    best: Option<f64>,
    bad_evals: usize,
}

impl From<&PlateauSchedule> for PlateauMeta {
    fn from(p: &PlateauSchedule) -> Self {
        Self {
            lr: p.lr,
            factor: p.factor,
            min_lr: p.min_lr,
            patience: p.patience,
            best: p.best.is_finite().then_some(p.best),
            bad_evals: p.bad_evals,
        }
    }
}

impl From<PlateauMeta> for PlateauSchedule {
    fn from(p: PlateauMeta) -> Self {
        Self {
            lr: p.lr,
            factor: p.factor,
            min_lr: p.min_lr,
            patience: p.patience,
            best: p.best.unwrap_or(f64::INFINITY),
            bad_evals: p.bad_evals,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DiffusionMeta {
    predictor: PredictorConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    seed: u64,
    step: usize,
    adam_step: u64,
    plateau: PlateauMeta,
    atom_counts: AtomCountHistogram,
}

/// Everything needed to sample from or resume training a diffusion model.
#[derive(Clone, Debug)]
pub struct DiffusionCheckpoint {
    pub predictor: Predictor,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub state: TrainerState,
    pub atom_counts: AtomCountHistogram,
}

impl DiffusionCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.predictor.params;
        let mut tensors = named("param/", p, p.values());
        tensors.extend(named("adam.m/", p, &self.state.adam.m));
        tensors.extend(named("adam.v/", p, &self.state.adam.v));
        let meta = DiffusionMeta {
            predictor: self.predictor.config.clone(),
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            seed: self.seed,
            step: self.state.step,
            adam_step: self.state.adam.step,
            plateau: (&self.state.plateau).into(),
            atom_counts: self.atom_counts.clone(),
        };
        Checkpoint {
            kind: DIFFUSION_KIND.into(),
            tensors,
            metadata: serde_json::to_value(meta)?,
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(DIFFUSION_KIND)?;
        let meta: DiffusionMeta = serde_json::from_value(ck.metadata.clone())?;
        let mut predictor = Predictor::new(meta.predictor, meta.seed)?;
        let (names, values) = ck.group("param/");
        predictor.params.load_from(&names, &values)?;
        let mut adam = Adam::new(&predictor.params, meta.train.beta1, meta.train.beta2, meta.train.eps);
        adam.step = meta.adam_step;
        let mut slots = predictor.params.clone();
        let (names, values) = ck.group("adam.m/");
        slots.load_from(&names, &values)?;
        adam.m = slots.values().to_vec();
        let (names, values) = ck.group("adam.v/");
        slots.load_from(&names, &values)?;
        adam.v = slots.values().to_vec();
        Ok(Self {
            predictor,
            schedule: meta.schedule,
            train: meta.train,
            seed: meta.seed,
            state: TrainerState {
                step: meta.step,
                adam,
                plateau: meta.plateau.into(),
            },
            atom_counts: meta.atom_counts,
        })
    }
}
