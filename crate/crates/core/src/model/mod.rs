//! Ensemble model graph: two backbones → channel concat → spatial
//! compression → capsule head → class logits.

mod backbone;
pub mod checkpoint;
mod spec;

pub use backbone::{build_backbone, Activation, Backbone, BatchStats, Layer, RUNNING_STATS_MOMENTUM};
pub use checkpoint::{load_checkpoint, save_checkpoint, LoadReport};
pub use spec::{BackboneFamily, BackboneSpec, HeadConfig, ModelSpec, Pooling};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capsule::CapsuleHead;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::srnet::{self, SrCompressor};
use crate::tensor::{Tape, Tensor, Var};
use backbone::Ctx;

pub struct ModelGraph {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub backbones: Vec<Backbone>,
    pub compressor: Option<SrCompressor>,
    pub head: CapsuleHead,
}

/// Intermediate and final values of one forward pass.
pub struct ModelOutput {
    pub features: Var,
    pub compressed: Var,
    pub capsules: Var,
    pub logits: Var,
    pub couplings: Vec<Tensor>,
    pub batch_stats: BatchStats,
}

impl ModelGraph {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        let name_a = spec.backbone_a.family.name().to_string();
        let mut backbones = vec![build_backbone(
            &spec.backbone_a,
            spec.input_size,
            spec.input_channels,
            &name_a,
            &mut params,
            &mut rng,
        )?];
        if let Some(b) = &spec.backbone_b {
            let mut name_b = b.family.name().to_string();
            if name_b == name_a {
                name_b.push_str("_b");
            }
            backbones.push(build_backbone(
                b,
                spec.input_size,
                spec.input_channels,
                &name_b,
                &mut params,
                &mut rng,
            )?);
        }

        let extent = spec.feature_extent()?;
        let channels = spec.concat_channels();
        let compressor = match spec.head.pooling {
            Pooling::SrNet => {
                let c = SrCompressor::new(extent, extent, channels);
                c.register(&mut params)?;
                Some(c)
            }
            Pooling::Gap => None,
        };
        let head = CapsuleHead::new(
            spec.head.capsule_config(channels),
            spec.head.dropout_rate,
            spec.class_count,
        )?;
        head.register(&mut params, &mut rng)?;

        Ok(ModelGraph {
            spec,
            params,
            backbones,
            compressor,
            head,
        })
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    /// `input` is `[N, S, S, input_channels]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        let shape = tape.shape(input);
        let s = self.spec.input_size;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != self.spec.input_channels {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "expected [N, {s}, {s}, {}], got {shape:?}",
                    self.spec.input_channels
                ),
            ));
        }
        let mut stats = BatchStats::default();
        let mut ctx = Ctx {
            training,
            stats: &mut stats,
            rng,
        };
        let mut features: Option<Var> = None;
        for bb in &self.backbones {
            let out = bb.forward(tape, &self.params, input, &mut ctx)?;
            features = Some(match features {
                None => out,
                Some(prev) => tape.concat_channels(prev, out)?,
            });
        }
        let features = features.expect("at least one backbone");

        let compressed = match &self.compressor {
            Some(c) => {
                let k = self.params.bind(tape, srnet::SPATIAL_KERNEL)?;
                c.compress(tape, features, k)?
            }
            None => srnet::gap(tape, features)?,
        };
        let head = self
            .head
            .forward(tape, &self.params, compressed, training, ctx.rng)?;
        Ok(ModelOutput {
            features,
            compressed,
            capsules: head.capsules,
            logits: head.logits,
            couplings: head.couplings,
            batch_stats: stats,
        })
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        let m = RUNNING_STATS_MOMENTUM;
        for (prefix, mean, var) in &stats.updates {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("{prefix}/{suffix}");
                let p = self
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))?;
                for (r, b) in p.value.data_mut().iter_mut().zip(batch.data()) {
                    *r = m * *r + (1.0 - m) * b;
                }
            }
        }
        Ok(())
    }

    /// Eval-mode class probabilities for a `[N, S, S, C]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(batch.clone())?;
        // Eval mode never samples, so any rng will do.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&tape, x, false, &mut rng)?;
        let probs = tape.softmax(out.logits)?;
        Ok((*tape.value(probs)).clone())
    }

    /// Eval-mode argmax class per item.
    pub fn predict_classes(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict(batch)?;
        let k = self.class_count();
        Ok(probs
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(class_count: usize) -> ModelSpec {
        ModelSpec {
            backbone_a: BackboneSpec {
                family: BackboneFamily::XceptionMini,
                stem_channels: 4,
                block_count: 2,
                final_channels: 6,
                downsample_factor: 4,
            },
            backbone_b: Some(BackboneSpec {
                family: BackboneFamily::Effv2Mini,
                stem_channels: 4,
                block_count: 1,
                final_channels: 5,
                downsample_factor: 4,
            }),
            head: HeadConfig {
                out_capsules: 3,
                out_dim: 4,
                ..HeadConfig::default()
            },
            class_count,
            input_size: 8,
            input_channels: 1,
        }
    }

    #[test]
    fn logits_shape_contract() {
        let m = ModelGraph::new(small_spec(3), 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 8, 8, 1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&tape, x, true, &mut rng).unwrap();
        assert_eq!(tape.shape(out.features), vec![2, 2, 2, 11]);
        assert_eq!(tape.shape(out.compressed), vec![2, 1, 1, 11]);
        assert_eq!(tape.shape(out.capsules), vec![2, 3, 4]);
        assert_eq!(tape.shape(out.logits), vec![2, 3]);
    }

    #[test]
    fn mismatched_downsample_rejected() {
        let mut spec = small_spec(2);
        spec.backbone_b.as_mut().unwrap().downsample_factor = 2;
        assert!(ModelGraph::new(spec, 0).is_err());
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut spec = small_spec(2);
        spec.input_size = 10;
        assert!(ModelGraph::new(spec, 0).is_err());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = ModelGraph::new(small_spec(2), 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 4, 1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.forward(&tape, x, false, &mut rng).is_err());
    }

    #[test]
    fn gap_pooling_registers_no_spatial_kernel() {
        let mut spec = small_spec(2);
        spec.head.pooling = Pooling::Gap;
        let m = ModelGraph::new(spec, 0).unwrap();
        assert!(m.params.get(srnet::SPATIAL_KERNEL).is_none());
        let probs = m.predict(&Tensor::ones(&[1, 8, 8, 1])).unwrap();
        assert_eq!(probs.shape(), &[1, 2]);
    }

    #[test]
    fn same_family_backbones_get_distinct_prefixes() {
        let mut spec = small_spec(2);
        spec.backbone_b = Some(spec.backbone_a);
        let m = ModelGraph::new(spec, 0).unwrap();
        assert!(m.params.get("xception_b/stem/conv").is_some());
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut m = ModelGraph::new(small_spec(2), 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 8, 8, 1], 3.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&tape, x, true, &mut rng).unwrap();
        let before = m.params.get("xception/stem/bn/running_mean").unwrap().value.clone();
        m.update_running_stats(&out.batch_stats).unwrap();
        let after = &m.params.get("xception/stem/bn/running_mean").unwrap().value;
        assert_ne!(&before, after);
    }
}
