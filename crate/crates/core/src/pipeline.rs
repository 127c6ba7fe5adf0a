//! Glue between datasets, backbones and the training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, RunConfig};
use crate::datasets::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::{init_model, BackboneKind};
use crate::params::ParamStore;
use crate::textspace::Vocabulary;
use crate::train::{Condition, TrainExample};
use crate::vision::{Backbone, ResNet};

/// Stream id of the parameter-initialisation rng. The training loop uses
/// the default stream of the same seed.
const INIT_STREAM: u64 = 1;

/// Backbone selected by the data section. The imported network needs
/// `data.backbone_weights`.
pub fn build_backbone(data: &DataConfig) -> Result<Backbone> {
    match data.backbone {
        BackboneKind::Toy => Ok(Backbone::Toy),
        BackboneKind::Resnet => {
            let path = data.backbone_weights.as_ref().ok_or_else(|| {
                Error::Config("data.backbone = \"resnet\" needs data.backbone_weights".into())
            })?;
            Ok(Backbone::ResNet(Box::new(ResNet::load(path)?)))
        }
    }
}

/// Freshly initialised model parameters for a run.
pub fn init_run_params(cfg: &RunConfig, vocab_size: usize) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(INIT_STREAM);
    init_model(
        vocab_size,
        &cfg.denoiser,
        cfg.train.tie_rounding,
        cfg.data.backbone,
        &mut rng,
    )
}

/// One example per caption. With a frozen backbone the residual map of
/// each pair is computed once and shared by its captions.
pub fn training_examples(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    seq_len: usize,
    backbone: &Backbone,
    params: &ParamStore,
    finetune_backbone: bool,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for pair in &split.pairs {
        let condition = if finetune_backbone {
            Condition::Images {
                before: pair.before.clone(),
                after: pair.after.clone(),
            }
        } else {
            Condition::Residual(backbone.residual(&pair.before, &pair.after, params)?.tokens)
        };
        for caption in &pair.captions {
            out.push(TrainExample {
                ids: vocab.encode(caption, seq_len),
                condition: condition.clone(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "split `{}` has no captions",
            split.name
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_toy_dataset, ToySpec};
    use crate::denoiser::DenoiserConfig;

    #[test]
    fn examples_follow_captions_and_share_residuals() {
        let spec = ToySpec {
            train: 4,
            val: 1,
            test: 1,
            ..ToySpec::default()
        };
        let d = generate_toy_dataset(&spec).unwrap();
        let mut split = d.train.clone();
        let extra = split.pairs[1].captions[0].clone();
        split.pairs[0].captions.push(extra);
        let corpus: Vec<Vec<String>> = split.captions().cloned().collect();
        let vocab = Vocabulary::build(&corpus).unwrap();
        let cfg = RunConfig {
            denoiser: DenoiserConfig {
                d_model: 8,
                heads: 2,
                ffn_dim: 8,
                seq_len: 12,
                ..RunConfig::default().denoiser
            },
            ..RunConfig::default()
        };
        let params = init_run_params(&cfg, vocab.len()).unwrap();
        let ex = training_examples(&split, &vocab, 12, &Backbone::Toy, &params, false).unwrap();
        assert_eq!(ex.len(), 5);
        assert_eq!(ex[0].ids, vocab.encode(&split.pairs[0].captions[0], 12));
        match (&ex[0].condition, &ex[1].condition) {
            (Condition::Residual(a), Condition::Residual(b)) => {
                assert_eq!(a, b);
                assert_eq!(a.dim(), (16, 64));
            }
            _ => panic!("expected residual conditions"),
        }
        let ex = training_examples(&split, &vocab, 12, &Backbone::Toy, &params, true).unwrap();
        assert!(matches!(ex[0].condition, Condition::Images { .. }));
    }

    #[test]
    fn resnet_without_weights_is_a_config_error() {
        let data = DataConfig {
            backbone: BackboneKind::Resnet,
            ..DataConfig::default()
        };
        assert!(matches!(build_backbone(&data), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = RunConfig::default();
        let a = init_run_params(&cfg, 7).unwrap();
        let b = init_run_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
    }
}
