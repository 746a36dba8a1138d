//! Glue from synthetic scenes to training sequences, compressed queries and
//! evaluation reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::{Encoder, EncoderConfig, FrameTokens};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{EvalCase, Report};
use crate::camera::CameraParams;
use crate::query::{query_4d, relevancy, temporal_localize, threshold_mask, Geometry, Query4DResult, TextQuery, DEFAULT_TAU};
use crate::rng::SeedStreams;
use crate::sbd::{Branch, Sbd, SbdConfig, SemanticMap};
use crate::supervision::{ae_train, build_map, downsample_masks, AeConfig, Autoencoder, EmbeddingKind, Overlap};
use crate::synth::{Query, Scene};
use crate::tensor::{lft, ParamStore, Tensor};
use crate::train::{fit_with_hook, pretrain_encoder, BranchTargets, FitReport, GeometryTarget, Sequence};

/// Every fourth frame (`t % 4 == 3`) is held out of training.
pub fn is_held_out(t: usize) -> bool {
    t % 4 == 3
}

pub fn train_frames(n: usize) -> Vec<usize> {
    (0..n).filter(|&t| !is_held_out(t)).collect()
}

pub fn held_out_frames(n: usize) -> Vec<usize> {
    (0..n).filter(|&t| is_held_out(t)).collect()
}

/// Per-scene autoencoders, one per enabled branch.
#[derive(Clone, Debug)]
pub struct SceneCodec {
    pub scene: String,
    pub aes: Vec<(Branch, Autoencoder)>,
}

impl SceneCodec {
    pub fn prefix(scene: &str, kind: EmbeddingKind) -> String {
        format!("ae/{scene}/{}", kind.name())
    }

    /// Fits one autoencoder per branch to the scene's distinct embeddings.
    pub fn fit(scene: &Scene, branches: &[Branch], config: &AeConfig, seed: u64) -> Result<SceneCodec> {
        let streams = SeedStreams::new(seed);
        let aes = branches
            .iter()
            .map(|&b| {
                let kind = EmbeddingKind::for_branch(b);
                let mut distinct: Vec<Vec<f32>> = Vec::new();
                for v in scene.table(kind).vectors.iter().flatten() {
                    if !distinct.contains(v) {
                        distinct.push(v.clone());
                    }
                }
                let prefix = Self::prefix(scene.name(), kind);
                let ae = ae_train(&prefix, &distinct, b.dim(), config, streams.seed_for(&prefix))?;
                Ok((b, ae))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneCodec {
            scene: scene.name().to_string(),
            aes,
        })
    }

    /// Untrained codec with the same parameter layout, for loading.
    pub fn skeleton(scene: &str, d_full: &[(Branch, usize)], config: &AeConfig) -> Result<SceneCodec> {
        let mut rng = SeedStreams::new(0).stream("ae/skeleton");
        let aes = d_full
            .iter()
            .map(|&(b, d)| {
                let prefix = Self::prefix(scene, EmbeddingKind::for_branch(b));
                Ok((b, Autoencoder::new(&prefix, d, b.dim(), config.clone(), &mut rng)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneCodec {
            scene: scene.to_string(),
            aes,
        })
    }

    pub fn ae(&self, branch: Branch) -> Result<&Autoencoder> {
        self.aes
            .iter()
            .find(|(b, _)| *b == branch)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Config(format!("scene {} has no {branch} autoencoder", self.scene)))
    }

    pub fn ae_mut(&mut self, branch: Branch) -> Option<&mut Autoencoder> {
        self.aes.iter_mut().find(|(b, _)| *b == branch).map(|(_, a)| a)
    }

    /// Compresses a full-dimensional query into the branch's latent space.
    pub fn compress(&self, query: &Query) -> Result<TextQuery> {
        let z = self.ae(query.branch)?.encode(&query.embedding)?;
        TextQuery::new(&query.name, z, query.branch)
    }
}

/// Supervision on the token grid for every frame of `scene`, per enabled
/// branch. Masks are majority-downsampled to the grid and each object's
/// compressed embedding is painted over its cells.
pub fn build_sequence(scene: &Scene, codec: &SceneCodec, patch: usize) -> Result<Sequence> {
    let masks = downsample_masks(&scene.masks()?, patch)?;
    let (h, w) = (masks.height, masks.width);
    let mut targets = Vec::new();
    for (branch, ae) in &codec.aes {
        let table = scene.table(EmbeddingKind::for_branch(*branch));
        let maps = (0..scene.frames.len())
            .map(|t| {
                let emb = (0..masks.num_objects())
                    .map(|i| ae.encode(&table.vectors[i][t]))
                    .collect::<Result<Vec<_>>>()?;
                build_map(&masks.frames[t], &emb, h, w, branch.dim(), Overlap::Sum)
            })
            .collect::<Result<Vec<_>>>()?;
        targets.push(BranchTargets { branch: *branch, maps });
    }
    Ok(Sequence {
        name: scene.name().to_string(),
        images: scene.frames.iter().map(|f| f.image.clone()).collect(),
        targets,
        train_frames: train_frames(scene.frames.len()),
    })
}

/// Encoder, decoder and per-scene codecs.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub sbd: Sbd,
    pub codecs: Vec<SceneCodec>,
}

impl Model {
    pub fn new(encoder: EncoderConfig, sbd: SbdConfig, seed: u64) -> Result<Model> {
        let streams = SeedStreams::new(seed);
        let encoder = Encoder::new(encoder, &mut streams.stream("encoder/init"))?;
        let sbd = Sbd::new(sbd, &encoder.config, &mut streams.stream("sbd/init"))?;
        Ok(Model {
            encoder,
            sbd,
            codecs: Vec::new(),
        })
    }

    pub fn codec(&self, scene: &str) -> Result<&SceneCodec> {
        self.codecs
            .iter()
            .find(|c| c.scene == scene)
            .ok_or_else(|| Error::Contract(format!("model has no codec for scene {scene}")))
    }

    /// Every parameter store with its group name.
    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.encoder.params, &self.sbd.params];
        for c in &self.codecs {
            v.extend(c.aes.iter().map(|(_, a)| &a.params));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tau: f32,
    pub tau_t: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: DEFAULT_TAU,
            tau_t: DEFAULT_TAU,
        }
    }
}

/// Which queries and frames enter an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSelection {
    pub branch: Branch,
    pub paraphrases: bool,
    pub held_out_only: bool,
}

/// Semantic maps of one branch for every frame.
pub fn decode_scene(model: &Model, tokens: &[FrameTokens], branch: Branch) -> Result<Vec<SemanticMap>> {
    tokens.iter().map(|t| Ok(model.sbd.decode(t, branch)?.0)).collect()
}

fn selected_frames(n: usize, sel: EvalSelection) -> Vec<usize> {
    if sel.held_out_only {
        held_out_frames(n)
    } else {
        (0..n).collect()
    }
}

fn selected_queries(scene: &Scene, sel: EvalSelection) -> impl Iterator<Item = &Query> {
    scene
        .queries
        .iter()
        .filter(move |q| q.branch == sel.branch && q.paraphrase_of.is_some() == sel.paraphrases)
}

/// Ground-truth grid masks over `frames` and the segment as positions in
/// that list.
fn ground_truth(scene: &Scene, q: &Query, frames: &[usize], patch: usize) -> Result<(Vec<Vec<u8>>, Vec<usize>)> {
    let masks = frames
        .iter()
        .map(|&t| grid_mask(&q.gt_mask(&scene.frames[t].ids, t), scene.spec.resolution, patch))
        .collect::<Result<_>>()?;
    let segment = frames
        .iter()
        .enumerate()
        .filter(|(_, t)| q.segment.contains(t))
        .map(|(k, _)| k)
        .collect();
    Ok((masks, segment))
}

/// One case per selected query: predicted masks from thresholded
/// relevancy, ground truth from the majority-downsampled object mask.
pub fn eval_cases(model: &Model, scenes: &[Scene], sel: EvalSelection, cfg: &EvalConfig) -> Result<Vec<EvalCase>> {
    let patch = model.encoder.config.patch_size;
    let mut cases = Vec::new();
    for scene in scenes {
        let codec = model.codec(scene.name())?;
        let tokens = model.encoder.encode_video(&scene.frames.iter().map(|f| f.image.clone()).collect::<Vec<_>>())?;
        let maps = decode_scene(model, &tokens, sel.branch)?;
        let frames = selected_frames(scene.frames.len(), sel);
        for q in selected_queries(scene, sel) {
            let mut tq = codec.compress(q)?;
            tq.tau = cfg.tau;
            let mut rels = Vec::new();
            let mut pred_masks = Vec::new();
            for &t in &frames {
                let rel = relevancy(&maps[t], &tq)?;
                pred_masks.push(threshold_mask(&rel, tq.tau));
                rels.push(rel);
            }
            let (gt_masks, gt_segment) = ground_truth(scene, q, &frames, patch)?;
            cases.push(EvalCase {
                name: format!("{}/{}", scene.name(), q.name),
                pred_masks,
                gt_masks,
                pred_segment: temporal_localize(&rels, cfg.tau_t),
                gt_segment,
            });
        }
    }
    Ok(cases)
}

/// Cases from masks and segments stored on disk in the layout written by
/// `Query4DResult::write`, one directory per scene under `dir`.
pub fn prediction_cases(dir: &Path, scenes: &[Scene], sel: EvalSelection, patch: usize) -> Result<Vec<EvalCase>> {
    let mut cases = Vec::new();
    for scene in scenes {
        let sdir = dir.join(scene.name());
        let frames = selected_frames(scene.frames.len(), sel);
        let g = scene.spec.resolution / patch;
        for q in selected_queries(scene, sel) {
            let pred_masks = frames
                .iter()
                .map(|&t| {
                    let (shape, m) = lft::read(&sdir.join(format!("mask_{}_f{t}.lft", q.name)))?.into_u16()?;
                    if shape != [g, g] {
                        return Err(Error::shape("prediction mask", &shape, &[g, g]));
                    }
                    Ok(m.into_iter().map(|v| u8::from(v != 0)).collect())
                })
                .collect::<Result<Vec<Vec<u8>>>>()?;
            let text = fsutil::read_text(&sdir.join(format!("segment_{}.txt", q.name)))?;
            let predicted: Vec<usize> = text
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| Error::Format(format!("bad frame index `{w}` in segment file"))))
                .collect::<Result<_>>()?;
            let pred_segment = frames
                .iter()
                .enumerate()
                .filter(|(_, t)| predicted.contains(t))
                .map(|(k, _)| k)
                .collect();
            let (gt_masks, gt_segment) = ground_truth(scene, q, &frames, patch)?;
            cases.push(EvalCase {
                name: format!("{}/{}", scene.name(), q.name),
                pred_masks,
                gt_masks,
                pred_segment,
                gt_segment,
            });
        }
    }
    Ok(cases)
}

/// Full-resolution binary mask reduced to the token grid by majority vote.
pub fn grid_mask(mask: &[u8], resolution: usize, patch: usize) -> Result<Vec<u8>> {
    let set = crate::supervision::MaskSet::new(resolution, resolution, vec![vec![mask.to_vec()]])?;
    Ok(downsample_masks(&set, patch)?.frames.remove(0).remove(0))
}

pub fn evaluate(model: &Model, scenes: &[Scene], sel: EvalSelection, cfg: &EvalConfig) -> Result<Report> {
    let cases = eval_cases(model, scenes, sel, cfg)?;
    if cases.is_empty() {
        return Err(Error::Contract(format!("no {} queries to evaluate", sel.branch)));
    }
    Report::from_cases(&cases)
}

/// Runs `query` through every frame of `scene`, lifting with predicted
/// geometry or, when `oracle_geometry` is set, the scene's own depth and
/// cameras.
pub fn query_scene(model: &Model, scene: &Scene, query: &TextQuery, oracle_geometry: bool, tau_t: f32) -> Result<Query4DResult> {
    let images: Vec<Tensor> = scene.frames.iter().map(|f| f.image.clone()).collect();
    let oracle: Vec<(Tensor, CameraParams)> = if oracle_geometry {
        scene.frames.iter().map(|f| (f.depth.clone(), f.camera.clone())).collect()
    } else {
        Vec::new()
    };
    let geometry = if oracle_geometry { Geometry::Oracle(&oracle) } else { Geometry::Predicted };
    query_4d(&model.encoder, &model.sbd, &images, query, geometry, tau_t)
}

/// A query from a raw vector: full-size vectors go through the scene's
/// autoencoder, vectors already of the branch's width are used as they are.
pub fn embedding_query(codec: &SceneCodec, name: &str, branch: Branch, vector: Vec<f32>) -> Result<TextQuery> {
    let v = if vector.len() == branch.dim() { vector } else { codec.ae(branch)?.encode(&vector)? };
    TextQuery::new(name, v, branch)
}

/// Geometry targets of a synthetic scene for encoder pretraining.
pub fn geometry_targets(scene: &Scene) -> Vec<GeometryTarget> {
    scene
        .frames
        .iter()
        .map(|f| GeometryTarget {
            depth: f.depth.clone(),
            camera: f.camera.clone(),
        })
        .collect()
}

/// Outcome of [`train_model`].
pub struct TrainedModel {
    pub model: Model,
    pub report: FitReport,
    pub pretrain_loss: Vec<f64>,
    /// Encoder digest after pretraining, before the decoder is fitted.
    pub encoder_digest: String,
}

/// The whole training recipe: initialise from `config.train.seed`,
/// optionally pretrain the encoder's geometry heads, fit per-scene
/// autoencoders, build token-grid supervision and fit the decoder.
pub fn train_model(config: &RunConfig, scenes: &[Scene], log: Option<&mut dyn Write>) -> Result<TrainedModel> {
    train_model_with(config, scenes, log, None)
}

/// Called after each decoder epoch with the epoch number and the stores of
/// the model in [`Model::stores`] order.
pub type ModelHook<'a> = &'a mut dyn FnMut(usize, &[&ParamStore]) -> Result<()>;

/// [`train_model`] with a per-epoch callback.
pub fn train_model_with(
    config: &RunConfig,
    scenes: &[Scene],
    log: Option<&mut dyn Write>,
    hook: Option<ModelHook<'_>>,
) -> Result<TrainedModel> {
    let (encoder, pretrain_loss) = prepare_encoder(config, scenes)?;
    let mut trained = train_decoder(config, scenes, encoder, log, hook)?;
    trained.pretrain_loss = pretrain_loss;
    Ok(trained)
}

/// Initial encoder for `config`, pretrained on the scenes' geometry when
/// `config.pretrain` is set. Returns the per-epoch pretraining loss.
pub fn prepare_encoder(config: &RunConfig, scenes: &[Scene]) -> Result<(Encoder, Vec<f64>)> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    let streams = SeedStreams::new(config.train.seed);
    let mut encoder = Encoder::new(config.encoder.clone(), &mut streams.stream("encoder/init"))?;
    let loss = match &config.pretrain {
        Some(pc) => {
            let videos: Vec<_> = scenes
                .iter()
                .map(|s| (s.frames.iter().map(|f| f.image.clone()).collect(), geometry_targets(s)))
                .collect();
            pretrain_encoder(&mut encoder, &videos, pc)?
        }
        None => Vec::new(),
    };
    Ok((encoder, loss))
}

/// Fits autoencoders and the decoder on top of a prepared encoder, which
/// must match `config.encoder`.
pub fn train_decoder(
    config: &RunConfig,
    scenes: &[Scene],
    encoder: Encoder,
    log: Option<&mut dyn Write>,
    mut hook: Option<ModelHook<'_>>,
) -> Result<TrainedModel> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    if encoder.config != config.encoder {
        return Err(Error::Contract("prepared encoder does not match the encoder config".into()));
    }
    let seed = config.train.seed;
    let mut model = Model::new(config.encoder.clone(), config.sbd.clone(), seed)?;
    model.encoder = encoder;
    let ae_seed = SeedStreams::new(seed).seed_for("autoencoders");
    model.codecs = scenes
        .iter()
        .map(|s| SceneCodec::fit(s, &config.sbd.branches, &config.autoencoder, ae_seed))
        .collect::<Result<_>>()?;
    let patch = config.encoder.patch_size;
    let data = scenes
        .iter()
        .zip(&model.codecs)
        .map(|(s, c)| build_sequence(s, c, patch))
        .collect::<Result<Vec<_>>>()?;
    let codecs = &model.codecs;
    let mut epoch_hook = |epoch: usize, encoder: &Encoder, sbd: &Sbd| -> Result<()> {
        match hook.as_mut() {
            Some(h) => {
                let mut stores = vec![&encoder.params, &sbd.params];
                for c in codecs {
                    stores.extend(c.aes.iter().map(|(_, a)| &a.params));
                }
                h(epoch, &stores)
            }
            None => Ok(()),
        }
    };
    let encoder_digest = model.encoder.params.digest();
    let report = fit_with_hook(
        &mut model.encoder,
        &mut model.sbd,
        &data,
        &config.train,
        &config.loss,
        log,
        Some(&mut epoch_hook),
    )?;
    Ok(TrainedModel {
        model,
        report,
        pretrain_loss: Vec::new(),
        encoder_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneSpec};

    #[test]
    fn held_out_split() {
        assert_eq!(train_frames(8), vec![0, 1, 2, 4, 5, 6]);
        assert_eq!(held_out_frames(8), vec![3, 7]);
    }

    #[test]
    fn train_decoder_rejects_foreign_encoder() {
        let scene = generate(&SceneSpec::random("s", 32, 4, 3)).unwrap();
        let config = RunConfig::default();
        let mut other = config.encoder.clone();
        other.embed_dim = 32;
        let encoder = Encoder::new(other, &mut SeedStreams::new(0).stream("encoder/init")).unwrap();
        let err = train_decoder(&config, &[scene], encoder, None, None).err().unwrap();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn sequence_targets_follow_masks() {
        let scene = generate(&SceneSpec::random("s", 32, 4, 3)).unwrap();
        let cfg = AeConfig {
            epochs: 150,
            ..AeConfig::default()
        };
        let codec = SceneCodec::fit(&scene, &[Branch::Agnostic], &cfg, 1).unwrap();
        let seq = build_sequence(&scene, &codec, 8).unwrap();
        assert_eq!(seq.train_frames, vec![0, 1, 2]);
        let maps = &seq.targets[0].maps;
        assert_eq!(maps.len(), 4);
        let masks = downsample_masks(&scene.masks().unwrap(), 8).unwrap();
        let ae = codec.ae(Branch::Agnostic).unwrap();
        for t in 0..4 {
            for cell in 0..16 {
                let owners: Vec<usize> = (0..masks.num_objects()).filter(|&i| masks.frames[t][i][cell] == 1).collect();
                assert_eq!(maps[t].coverage[cell], u8::from(!owners.is_empty()));
                if owners.len() == 1 {
                    let z = ae.encode(&scene.clip.vectors[owners[0]][t]).unwrap();
                    assert_eq!(&maps[t].values.data()[cell * 3..cell * 3 + 3], z.as_slice());
                }
            }
        }
    }

    #[test]
    fn grid_mask_majority() {
        let mut m = vec![0u8; 16 * 16];
        for y in 0..8 {
            for x in 0..8 {
                m[y * 16 + x] = 1;
            }
        }
        m[8 * 16 + 8] = 1;
        assert_eq!(grid_mask(&m, 16, 8).unwrap(), vec![1, 0, 0, 0]);
    }
}
