//! Ground-truth semantic maps from object masks and per-object embeddings,
//! and the autoencoders that compress embeddings to 3 or 6 dims.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::{AdamW, OptimizerState};
use crate::rng::{Rng, SeedStreams};
use crate::sbd::Branch;
use crate::tensor::{Bound, ParamStore, Real, Tape, Tensor, Var};

/// Binary masks `M_{i,t}` per frame and object, row-major `height×width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    /// `frames[t][i]`, values 0 or 1.
    pub frames: Vec<Vec<Vec<u8>>>,
}

impl MaskSet {
    pub fn new(height: usize, width: usize, frames: Vec<Vec<Vec<u8>>>) -> Result<Self> {
        let set = MaskSet { height, width, frames };
        set.validate()?;
        Ok(set)
    }

    /// Object `i` owns pixels labelled `i + 1`; 0 is background.
    pub fn from_id_maps(maps: &[Vec<u16>], height: usize, width: usize, objects: usize) -> Result<Self> {
        let frames = maps
            .iter()
            .map(|m| {
                if m.len() != height * width {
                    return Err(Error::shape("id map", &[m.len()], &[height, width]));
                }
                Ok((0..objects)
                    .map(|i| m.iter().map(|&id| u8::from(id as usize == i + 1)).collect())
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, frames)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_objects();
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != n {
                return Err(Error::Contract(format!(
                    "mask frame {t} has {} objects, frame 0 has {n}",
                    f.len()
                )));
            }
            for m in f {
                if m.len() != self.height * self.width {
                    return Err(Error::shape("mask", &[m.len()], &[self.height, self.width]));
                }
                if m.iter().any(|&v| v > 1) {
                    return Err(Error::Contract(format!("mask frame {t} has non-binary values")));
                }
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_objects(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn mask(&self, t: usize, object: usize) -> &[u8] {
        &self.frames[t][object]
    }
}

/// Majority-vote reduction of each `patch×patch` cell; exactly half counts
/// as covered.
pub fn downsample_masks(masks: &MaskSet, patch: usize) -> Result<MaskSet> {
    if patch == 0 || !masks.height.is_multiple_of(patch) || !masks.width.is_multiple_of(patch) {
        return Err(Error::Contract(format!(
            "mask size {}×{} is not divisible by patch {patch}",
            masks.height, masks.width
        )));
    }
    let (gh, gw) = (masks.height / patch, masks.width / patch);
    let frames = masks
        .frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|m| {
                    let mut out = vec![0u8; gh * gw];
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let mut count = 0;
                            for y in gy * patch..(gy + 1) * patch {
                                let row = &m[y * masks.width + gx * patch..][..patch];
                                count += row.iter().filter(|&&v| v != 0).count();
                            }
                            out[gy * gw + gx] = u8::from(2 * count >= patch * patch);
                        }
                    }
                    out
                })
                .collect()
        })
        .collect();
    MaskSet::new(gh, gw, frames)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    /// Overlapping masks add their embeddings.
    #[default]
    Sum,
    /// Each pixel takes the embedding of its highest-id object.
    Exclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    ClipStatic,
    Dynamic,
}

impl EmbeddingKind {
    pub fn full_dim(self) -> usize {
        match self {
            EmbeddingKind::ClipStatic => 512,
            EmbeddingKind::Dynamic => 4096,
        }
    }

    pub fn branch(self) -> Branch {
        match self {
            EmbeddingKind::ClipStatic => Branch::Agnostic,
            EmbeddingKind::Dynamic => Branch::Sensitive,
        }
    }

    pub fn for_branch(b: Branch) -> Self {
        match b {
            Branch::Agnostic => EmbeddingKind::ClipStatic,
            Branch::Sensitive => EmbeddingKind::Dynamic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::ClipStatic => "clip_static",
            EmbeddingKind::Dynamic => "dynamic",
        }
    }
}

/// `e_{i,t}` for every object and frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub kind: EmbeddingKind,
    /// `vectors[i][t]`.
    pub vectors: Vec<Vec<Vec<f32>>>,
}

impl EmbeddingTable {
    pub fn validate(&self) -> Result<()> {
        let d = self.kind.full_dim();
        for (i, per_obj) in self.vectors.iter().enumerate() {
            for (t, v) in per_obj.iter().enumerate() {
                if v.len() != d {
                    return Err(Error::shape("embedding", &[v.len()], &[d]));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Contract(format!("embedding {i}/{t} is not finite")));
                }
            }
        }
        Ok(())
    }
}

/// `S_t`, channels-last `h×w×d`, plus the union of the masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionMap {
    pub values: Tensor,
    pub coverage: Vec<u8>,
}

/// Paints each object's embedding over its mask, objects in ascending id
/// order.
pub fn build_map(
    masks: &[Vec<u8>],
    embeddings: &[Vec<f32>],
    height: usize,
    width: usize,
    dim: usize,
    overlap: Overlap,
) -> Result<SupervisionMap> {
    if masks.len() != embeddings.len() {
        return Err(Error::Contract(format!(
            "{} masks but {} embeddings",
            masks.len(),
            embeddings.len()
        )));
    }
    let n = height * width;
    let mut values = vec![0.0f32; n * dim];
    let mut coverage = vec![0u8; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (i, (m, e)) in masks.iter().zip(embeddings).enumerate() {
        if e.len() != dim {
            return Err(Error::Contract(format!(
                "embedding {i} has dim {}, expected {dim}",
                e.len()
            )));
        }
        if m.len() != n {
            return Err(Error::shape("build_map mask", &[m.len()], &[height, width]));
        }
        for (px, &mv) in m.iter().enumerate() {
            if mv == 0 {
                continue;
            }
            coverage[px] = 1;
            match overlap {
                Overlap::Sum => {
                    for (v, &x) in values[px * dim..(px + 1) * dim].iter_mut().zip(e) {
                        *v += x;
                    }
                }
                Overlap::Exclusive => owner[px] = Some(i),
            }
        }
    }
    if overlap == Overlap::Exclusive {
        for (px, o) in owner.iter().enumerate() {
            if let Some(i) = o {
                values[px * dim..(px + 1) * dim].copy_from_slice(&embeddings[*i]);
            }
        }
    }
    Ok(SupervisionMap {
        values: Tensor::new(&[height, width, dim], values)?,
        coverage,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    pub hidden: Vec<usize>,
    /// Project latents onto the unit sphere, so that distinct inputs are
    /// separated by angle, which is what cosine relevancy reads.
    pub normalize_latent: bool,
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the penalty `mean relu(cos(z_i, z_j))²` over pairs of
    /// distinct training vectors; 0 trains on reconstruction alone.
    pub separation: f32,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            hidden: vec![64],
            normalize_latent: true,
            epochs: 600,
            lr: 1e-2,
            separation: 1.0,
        }
    }
}

/// Affine+GELU encoder `d_full → d_low` and decoder `d_low → d_full`.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub d_full: usize,
    pub d_low: usize,
    pub config: AeConfig,
    pub params: ParamStore,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
}

fn stack(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Vec<Linear> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(store, &format!("{name}/l{i}"), w[0], w[1], 1.0, rng))
        .collect()
}

fn run_stack<T: Real>(tape: &mut Tape<T>, p: &Bound, layers: &[Linear], mut x: Var) -> Result<Var> {
    for (i, l) in layers.iter().enumerate() {
        x = l.forward(tape, p, x)?;
        if i + 1 < layers.len() {
            x = tape.gelu(x);
        }
    }
    Ok(x)
}

impl Autoencoder {
    /// Untrained autoencoder; parameter names start with `prefix`.
    pub fn new(prefix: &str, d_full: usize, d_low: usize, config: AeConfig, rng: &mut Rng) -> Result<Self> {
        if d_full == 0 || d_low == 0 {
            return Err(Error::Config("autoencoder dims must be positive".into()));
        }
        let mut dims = vec![d_full];
        dims.extend(&config.hidden);
        dims.push(d_low);
        let mut store = ParamStore::new();
        let encoder = stack(&mut store, &format!("{prefix}/enc"), &dims, rng);
        dims.reverse();
        let decoder = stack(&mut store, &format!("{prefix}/dec"), &dims, rng);
        Ok(Autoencoder {
            d_full,
            d_low,
            config,
            params: store,
            encoder,
            decoder,
        })
    }

    pub fn encode_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let z = run_stack(tape, p, &self.encoder, x)?;
        if self.config.normalize_latent {
            Ok(tape.l2_normalize(z, 1e-8))
        } else {
            Ok(z)
        }
    }

    pub fn decode_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        run_stack(tape, p, &self.decoder, z)
    }

    fn apply(&self, v: &[f32], dim_in: usize, encode: bool) -> Result<Vec<f32>> {
        if v.len() != dim_in {
            return Err(Error::shape(
                if encode { "ae_encode" } else { "ae_decode" },
                &[v.len()],
                &[dim_in],
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(&[1, dim_in], v.to_vec())?;
        let y = if encode {
            self.encode_on(&mut tape, &p, x)?
        } else {
            self.decode_on(&mut tape, &p, x)?
        };
        Ok(tape.tensor(y).into_data())
    }

    pub fn encode(&self, v: &[f32]) -> Result<Vec<f32>> {
        self.apply(v, self.d_full, true)
    }

    pub fn decode(&self, z: &[f32]) -> Result<Vec<f32>> {
        self.apply(z, self.d_low, false)
    }

    /// Mean squared reconstruction error over `vectors`.
    pub fn mse(&self, vectors: &[Vec<f32>]) -> Result<f64> {
        let mut sum = 0.0;
        for v in vectors {
            let r = self.decode(&self.encode(v)?)?;
            sum += v.iter().zip(&r).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
        Ok(sum / (vectors.len() * self.d_full) as f64)
    }
}

/// Fits an autoencoder to `vectors` by full-batch Adam on the mean squared
/// reconstruction error, plus the latent separation penalty when enabled.
/// Duplicate vectors are kept (they weight the reconstruction term).
pub fn ae_train(
    prefix: &str,
    vectors: &[Vec<f32>],
    d_low: usize,
    config: &AeConfig,
    seed: u64,
) -> Result<Autoencoder> {
    let Some(first) = vectors.first() else {
        return Err(Error::Contract("ae_train needs at least one vector".into()));
    };
    let d_full = first.len();
    if vectors.iter().any(|v| v.len() != d_full) {
        return Err(Error::Contract("ae_train vectors differ in length".into()));
    }
    let streams = SeedStreams::new(seed);
    let mut ae = Autoencoder::new(prefix, d_full, d_low, config.clone(), &mut streams.stream("ae/init"))?;
    let batch: Vec<f32> = vectors.iter().flatten().copied().collect();
    let opt = AdamW {
        weight_decay: 0.0,
        grad_clip: None,
        ..AdamW::default()
    };
    let mut state = OptimizerState::default();
    let n = vectors.len();
    let mut pair_weights = vec![0.0f32; n * n];
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if vectors[i] != vectors[j] {
                pair_weights[i * n + j] = 1.0;
                pairs += 1;
            }
        }
    }
    pair_weights.iter_mut().for_each(|w| *w /= pairs.max(1) as f32);
    let separate = pairs > 0 && config.separation > 0.0;
    for _ in 0..config.epochs {
        let mut tape = Tape::new();
        let p = ae.params.bind(&mut tape, true);
        let x = tape.constant(&[n, d_full], batch.clone())?;
        let z = ae.encode_on(&mut tape, &p, x)?;
        let y = ae.decode_on(&mut tape, &p, z)?;
        let diff = tape.sub(y, x)?;
        let sq = tape.square(diff);
        let mut loss = tape.mean(sq);
        if separate {
            let zn = tape.l2_normalize(z, 1e-8);
            let cos = tape.matmul_nt(zn, zn)?;
            let pos = tape.relu(cos);
            let pos = tape.square(pos);
            let w = tape.constant(&[n, n], pair_weights.clone())?;
            let pen = tape.mul(pos, w)?;
            let pen = tape.sum(pen);
            let pen = tape.scale(pen, config.separation);
            loss = tape.add(loss, pen)?;
        }
        let grads = tape.backward(loss)?;
        ae.params.zero_grads();
        ae.params.absorb(&grads, &p);
        opt.step(&mut state, &mut [&mut ae.params], config.lr)?;
    }
    Ok(ae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Independent per-pixel, per-object accumulation.
    fn oracle(masks: &[Vec<u8>], emb: &[Vec<f32>], n: usize, d: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(n * d);
        for px in 0..n {
            for c in 0..d {
                let mut acc = 0.0f32;
                for i in 0..masks.len() {
                    if masks[i][px] == 1 {
                        acc += emb[i][c];
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn full_and_empty_maps() {
        let e = vec![vec![0.5, -1.0, 2.0]];
        let m = build_map(&[vec![1; 6]], &e, 2, 3, 3, Overlap::Sum).unwrap();
        assert!(m.values.data().chunks(3).all(|c| c == e[0].as_slice()));
        assert_eq!(m.coverage, vec![1; 6]);
        let z = build_map(&[], &[], 2, 3, 3, Overlap::Sum).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.coverage, vec![0; 6]);
    }

    #[test]
    fn overlap_sums_or_takes_highest_id() {
        let masks = vec![vec![1, 1, 0], vec![0, 1, 1]];
        let e = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let s = build_map(&masks, &e, 1, 3, 2, Overlap::Sum).unwrap();
        assert_eq!(s.values.data(), &[1.0, 0.0, 1.0, 2.0, 0.0, 2.0]);
        let x = build_map(&masks, &e, 1, 3, 2, Overlap::Exclusive).unwrap();
        assert_eq!(x.values.data(), &[1.0, 0.0, 0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn dim_mismatch_is_contract_error() {
        let r = build_map(&[vec![1], vec![1]], &[vec![1.0, 2.0], vec![1.0]], 1, 1, 2, Overlap::Sum);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn build_map_matches_oracle_bitwise(seed in 0u64..1000, objects in 0usize..5, d in 1usize..7) {
            let mut r = SeedStreams::new(seed).stream("masks");
            let (h, w) = (5, 4);
            let masks: Vec<Vec<u8>> = (0..objects)
                .map(|_| (0..h * w).map(|_| r.random_range(0..2u8)).collect())
                .collect();
            let emb: Vec<Vec<f32>> = (0..objects)
                .map(|_| (0..d).map(|_| r.random_range(-3.0f32..3.0)).collect())
                .collect();
            let m = build_map(&masks, &emb, h, w, d, Overlap::Sum).unwrap();
            let expected = oracle(&masks, &emb, h * w, d);
            prop_assert_eq!(m.values.data(), expected.as_slice());
            for px in 0..h * w {
                let covered = masks.iter().any(|mm| mm[px] == 1);
                prop_assert_eq!(m.coverage[px] == 1, covered);
                if !covered {
                    prop_assert!(m.values.data()[px * d..(px + 1) * d].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn downsample_majority_with_ties_up() {
        let full = MaskSet::new(4, 4, vec![vec![vec![1; 16], vec![0; 16]]]).unwrap();
        let g = downsample_masks(&full, 2).unwrap();
        assert_eq!(g.mask(0, 0), &[1, 1, 1, 1]);
        assert_eq!(g.mask(0, 1), &[0, 0, 0, 0]);
        // Top-left cell exactly half covered, top-right one quarter.
        let mut m = vec![0u8; 16];
        m[0] = 1;
        m[1] = 1;
        m[2] = 1;
        let g = downsample_masks(&MaskSet::new(4, 4, vec![vec![m]]).unwrap(), 2).unwrap();
        assert_eq!(g.mask(0, 0), &[1, 0, 0, 0]);
        assert!(downsample_masks(&full, 3).is_err());
    }

    #[test]
    fn id_maps_split_by_object() {
        let m = MaskSet::from_id_maps(&[vec![0, 1, 2, 2]], 2, 2, 2).unwrap();
        assert_eq!(m.mask(0, 0), &[0, 1, 0, 0]);
        assert_eq!(m.mask(0, 1), &[0, 0, 1, 1]);
    }

    fn linear_ae() -> AeConfig {
        AeConfig {
            hidden: vec![],
            normalize_latent: false,
            epochs: 1500,
            lr: 1e-2,
            separation: 0.0,
        }
    }

    #[test]
    fn subspace_data_reconstructs() {
        let mut r = SeedStreams::new(3).stream("sub");
        let basis: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..16).map(|_| r.random_range(-1.0f32..1.0)).collect())
            .collect();
        let data: Vec<Vec<f32>> = (0..20)
            .map(|_| {
                let c: Vec<f32> = (0..3).map(|_| r.random_range(-1.0f32..1.0)).collect();
                (0..16).map(|j| (0..3).map(|k| c[k] * basis[k][j]).sum()).collect()
            })
            .collect();
        let ae = ae_train("ae", &data, 3, &linear_ae(), 1).unwrap();
        assert_eq!(ae.encode(&data[0]).unwrap().len(), 3);
        assert_eq!(ae.decode(&[0.0; 3]).unwrap().len(), 16);
        let mse = ae.mse(&data).unwrap();
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn repeated_vector_and_full_width() {
        let v = vec![vec![0.3f32, -0.2, 0.9, 0.1]; 3];
        assert!(ae_train("ae", &v, 2, &linear_ae(), 2).unwrap().mse(&v).unwrap() < 1e-4);
        let mut r = SeedStreams::new(4).stream("full");
        let data: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..6).map(|_| r.random_range(-1.0f32..1.0)).collect())
            .collect();
        let mse = ae_train("ae", &data, 6, &linear_ae(), 3).unwrap().mse(&data).unwrap();
        assert!(mse < 1e-4, "mse {mse}");
        assert!(ae_train("ae", &[], 2, &linear_ae(), 0).is_err());
        let ae = ae_train("ae", &v, 2, &linear_ae(), 2).unwrap();
        assert!(ae.encode(&[1.0]).is_err());
        assert!(ae.decode(&[1.0]).is_err());
    }

    #[test]
    fn orthonormal_inputs_get_separated_latents() {
        let v = crate::synth::orthonormal(4, 512, &mut SeedStreams::new(8).stream("basis"));
        let ae = ae_train("ae", &v, 3, &AeConfig::default(), 5).unwrap();
        let z: Vec<Vec<f32>> = v.iter().map(|x| ae.encode(x).unwrap()).collect();
        for i in 0..4 {
            let r = ae.decode(&z[i]).unwrap();
            let dot: f32 = r.iter().zip(&v[i]).map(|(a, b)| a * b).sum();
            let nr = r.iter().map(|a| a * a).sum::<f32>().sqrt();
            assert!(dot / nr > 0.99, "reconstruction cosine {}", dot / nr);
            for j in 0..i {
                let c: f32 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
                assert!(c < 0.2, "latent cosine {c} between {i} and {j}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let v = vec![vec![1.0f32, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let cfg = AeConfig {
            epochs: 20,
            ..AeConfig::default()
        };
        let a = ae_train("ae", &v, 2, &cfg, 9).unwrap();
        let b = ae_train("ae", &v, 2, &cfg, 9).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
    }
}
