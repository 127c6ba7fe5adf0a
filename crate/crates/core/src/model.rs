//! Whole-model parameter layout and checkpoints.
//!
//! One [`ParamStore`] holds every trainable matrix:
//!
//! | prefix          | contents                                   |
//! |-----------------|--------------------------------------------|
//! | `embedding.*`   | `V x d` word embedding table               |
//! | `rounding.*`    | `d x V` weight (absent when tied), `1 x V` bias |
//! | `denoiser.*`    | see [`crate::denoiser::parameter_shapes`]  |
//! | `backbone.*`    | toy backbone convolutions, when used       |
//!
//! When `rounding.weight` is absent the rounding projection is the
//! transposed embedding table.
//!
//! A checkpoint is a directory containing `params.safetensors`,
//! `vocab.txt` and `manifest.json`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::denoiser::{self, DenoiserConfig};
use crate::error::{Error, Result};
use crate::params::{normal_init, xavier, BoundParams, ParamStore};
use crate::schedule::ScheduleSpec;
use crate::tape::{Tape, Var};
use crate::textspace::{hex_digest, Vocabulary, EMBEDDING, ROUNDING_BIAS, ROUNDING_WEIGHT};
use crate::vision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Toy,
    Resnet,
}

/// Embedding `N(0, 1)`, Xavier rounding, denoiser defaults, and He toy
/// backbone weights when `backbone` is [`BackboneKind::Toy`].
pub fn init_model<R: Rng>(
    vocab_size: usize,
    cfg: &DenoiserConfig,
    tie_rounding: bool,
    backbone: BackboneKind,
    rng: &mut R,
) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    store.insert(EMBEDDING, normal_init(rng, vocab_size, cfg.word_dim, 1.0));
    if !tie_rounding {
        store.insert(ROUNDING_WEIGHT, xavier(rng, cfg.word_dim, vocab_size));
    }
    store.insert(ROUNDING_BIAS, Array2::zeros((1, vocab_size)));
    denoiser::init_params(cfg, rng, &mut store)?;
    if backbone == BackboneKind::Toy {
        vision::init_toy_backbone(rng, &mut store);
    }
    Ok(store)
}

/// Validate the embedding, rounding and denoiser shapes.
pub fn check_model(store: &ParamStore, vocab_size: usize, cfg: &DenoiserConfig) -> Result<()> {
    store.expect_shape(EMBEDDING, vocab_size, cfg.word_dim)?;
    if store.contains(ROUNDING_WEIGHT) {
        store.expect_shape(ROUNDING_WEIGHT, cfg.word_dim, vocab_size)?;
    }
    store.expect_shape(ROUNDING_BIAS, 1, vocab_size)?;
    denoiser::check_params(cfg, store)
}

pub fn is_tied(store: &ParamStore) -> bool {
    !store.contains(ROUNDING_WEIGHT)
}

/// Rounding weight and bias as plain matrices.
pub fn rounding_params(store: &ParamStore) -> Result<(Array2<f64>, &Array2<f64>)> {
    let w = match store.get(ROUNDING_WEIGHT) {
        Ok(w) => w.clone(),
        Err(_) => store.get(EMBEDDING)?.t().to_owned(),
    };
    Ok((w, store.get(ROUNDING_BIAS)?))
}

/// Rounding weight and bias on the tape.
pub fn rounding_vars(tape: &mut Tape<'_>, bound: &BoundParams) -> Result<(Var, Var)> {
    let w = match bound.var(ROUNDING_WEIGHT) {
        Ok(w) => w,
        Err(_) => {
            let e = bound.var(EMBEDDING)?;
            tape.transpose(e)
        }
    };
    Ok((w, bound.var(ROUNDING_BIAS)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub step: usize,
    pub epoch: usize,
    /// SHA-256 of the run configuration snapshot.
    pub config_hash: String,
    pub vocab_hash: String,
    pub params_hash: String,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub backbone: BackboneKind,
    pub shapes: BTreeMap<String, [usize; 2]>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub vocab: Vocabulary,
    pub manifest: CheckpointManifest,
}

pub const PARAMS_FILE: &str = "params.safetensors";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: ParamStore,
        vocab: Vocabulary,
        schedule: ScheduleSpec,
        denoiser: DenoiserConfig,
        backbone: BackboneKind,
        config_hash: String,
        step: usize,
        epoch: usize,
    ) -> Result<Self> {
        let bytes = params.to_archive().to_bytes()?;
        let shapes = params
            .iter()
            .map(|(k, v)| (k.clone(), [v.nrows(), v.ncols()]))
            .collect();
        let manifest = CheckpointManifest {
            step,
            epoch,
            config_hash,
            vocab_hash: vocab.content_hash(),
            params_hash: hex_digest(&bytes),
            schedule,
            denoiser,
            backbone,
            shapes,
        };
        Ok(Self {
            params,
            vocab,
            manifest,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.to_archive().save(&dir.join(PARAMS_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Load and cross-check hashes and shapes.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let params_path = dir.join(PARAMS_FILE);
        let bytes = std::fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        if hex_digest(&bytes) != manifest.params_hash {
            return Err(Error::Archive(format!(
                "{} does not match the manifest hash",
                params_path.display()
            )));
        }
        let params = ParamStore::from_archive(&TensorArchive::from_bytes(&bytes)?)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.content_hash() != manifest.vocab_hash {
            return Err(Error::Archive(
                "vocabulary does not match the manifest hash".into(),
            ));
        }
        check_model(&params, vocab.len(), &manifest.denoiser)?;
        Ok(Self {
            params,
            vocab,
            manifest,
        })
    }
}
