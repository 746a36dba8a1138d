//! Streaming geometry encoder.
//!
//! Each frame is cut into patches and embedded together with a learned
//! camera token. `num_blocks` pairs of blocks follow: a spatial block
//! attends within the frame, then a temporal block lets the frame's tokens
//! attend to the cached keys/values of earlier frames plus its own. The
//! per-layer keys/values of every processed frame are appended to a
//! [`MemoryCache`], capped at `max_memory_frames` with oldest-first eviction.
//!
//! [`Encoder::encode_joint`] recomputes a whole clip at once under a
//! block-causal mask and exists to check the streaming path.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraParams};
use crate::error::{Error, Result};
use crate::nn::{self, Conv3x3, LayerNorm, Linear, Mlp, SelfAttentionBlock};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Additive attention-mask value for disallowed pairs.
pub const MASKED: f32 = -1e9;
/// Floor added after the depth softplus so depth never rounds to zero.
pub const DEPTH_FLOOR: f32 = 1e-3;
/// Raw camera-head outputs: fx, fy, cx, cy, axis-angle (3), translation (3).
pub const CAMERA_RAW: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub max_memory_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            max_memory_frames: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.image_size == 0 || self.patch_size == 0 || self.embed_dim == 0 {
            return bad("sizes must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.patch_size.is_multiple_of(4) {
            return bad(format!(
                "patch_size {} must be a multiple of 4 (two ×2 depth-head stages)",
                self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 || self.max_memory_frames == 0 {
            return bad("num_blocks and max_memory_frames must be positive".into());
        }
        Ok(())
    }

    /// Token-grid side length `h = w = image_size / patch_size`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens_per_frame(&self) -> usize {
        1 + self.num_patches()
    }
}

/// Camera token plus patch tokens of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens {
    pub camera_token: Tensor,
    pub patch_tokens: Tensor,
}

impl FrameTokens {
    fn from_stacked(t: &Tensor) -> Result<Self> {
        let d = t.shape()[1];
        let data = t.data();
        Ok(FrameTokens {
            camera_token: Tensor::new(&[1, d], data[..d].to_vec())?,
            patch_tokens: Tensor::new(&[t.shape()[0] - 1, d], data[d..].to_vec())?,
        })
    }

    pub fn token_count(&self) -> usize {
        1 + self.patch_tokens.shape()[0]
    }

    pub fn max_abs_diff(&self, other: &FrameTokens) -> f32 {
        self.camera_token
            .max_abs_diff(&other.camera_token)
            .max(self.patch_tokens.max_abs_diff(&other.patch_tokens))
    }
}

/// Cached per-layer keys and values of past frames.
#[derive(Clone, Debug)]
pub struct MemoryCache {
    config: EncoderConfig,
    frames: VecDeque<Vec<(Tensor, Tensor)>>,
    ingested: usize,
}

impl MemoryCache {
    pub fn new(config: &EncoderConfig) -> Self {
        MemoryCache {
            config: config.clone(),
            frames: VecDeque::new(),
            ingested: 0,
        }
    }

    /// Frames currently retained.
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Frames processed since the last reset, including evicted ones.
    pub fn ingested(&self) -> usize {
        self.ingested
    }

    pub fn reset(&mut self) {
        self.frames.clear();
        self.ingested = 0;
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }
}

/// Keys/values of retained frames recorded on one tape, oldest first.
pub struct TapeMemory {
    cap: usize,
    frames: VecDeque<Vec<(Var, Var)>>,
}

impl TapeMemory {
    pub fn new(cap: usize) -> Self {
        TapeMemory {
            cap,
            frames: VecDeque::new(),
        }
    }

    fn layer(&self, l: usize) -> impl Iterator<Item = &(Var, Var)> {
        self.frames.iter().map(move |f| &f[l])
    }

    fn push(&mut self, frame: Vec<(Var, Var)>) {
        self.frames.push_back(frame);
        while self.frames.len() > self.cap {
            self.frames.pop_front();
        }
    }
}

/// Pre-norm attention block whose keys/values span memory and the current
/// frame.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl TemporalBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        TemporalBlock {
            ln1: LayerNorm::new(store, &format!("{name}/ln1"), dim),
            q: Linear::new(store, &format!("{name}/q"), dim, dim, 1.0, rng),
            k: Linear::new(store, &format!("{name}/k"), dim, dim, 1.0, rng),
            v: Linear::new(store, &format!("{name}/v"), dim, dim, 1.0, rng),
            proj: Linear::new(store, &format!("{name}/proj"), dim, dim, 0.5, rng),
            ln2: LayerNorm::new(store, &format!("{name}/ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}/mlp"), (dim, 2 * dim, dim), 0.5, rng),
            heads,
        }
    }

    /// Normalised input, keys and values of `x`.
    fn qkv<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var, Var)> {
        let h = self.ln1.forward(tape, p, x)?;
        let q = self.q.forward(tape, p, h)?;
        let k = self.k.forward(tape, p, h)?;
        let v = self.v.forward(tape, p, h)?;
        Ok((q, k, v))
    }

    fn finish<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        q: Var,
        keys: Var,
        values: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let a = nn::multi_head_attention(tape, q, keys, values, self.heads, mask)?;
        let a = self.proj.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let m = self.mlp.forward(tape, p, h)?;
        tape.add(x, m)
    }
}

#[derive(Clone, Debug)]
struct DepthHead {
    stage1: Conv3x3,
    stage2: Conv3x3,
    out: Conv3x3,
    shuffle: usize,
}

/// softplus⁻¹(y) = ln(eˠ − 1).
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    patch: Linear,
    pos: ParamId,
    cam_token: ParamId,
    blocks: Vec<(SelfAttentionBlock, TemporalBlock)>,
    cam_head: Mlp,
    depth_head: DepthHead,
}

/// Flattens a `3×H×W` image into `(h·w)×(3·p²)` patch rows, patches in
/// row-major grid order and each patch ordered channel, row, column.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Vec<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::shape("patchify", s, &[3, patch, patch]));
    }
    let (h, w) = (s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let data = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                for y in 0..patch {
                    let row = c * h * w + (gy * patch + y) * w + gx * patch;
                    out.extend_from_slice(&data[row..row + patch]);
                }
            }
        }
    }
    Ok(out)
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes raw camera-head outputs. All-zero input gives fx = fy = size,
/// cx = cy = size / 2, identity rotation and zero translation.
pub fn camera_from_raw(raw: &[f32], image_size: usize) -> CameraParams {
    let s = image_size as f64;
    let r: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let ln2 = std::f64::consts::LN_2;
    CameraParams {
        fx: s * sp(r[0]) / ln2,
        fy: s * sp(r[1]) / ln2,
        cx: s * sigmoid64(r[2]),
        cy: s * sigmoid64(r[3]),
        rotation: camera::rodrigues(&[r[4], r[5], r[6]]),
        translation: [r[7], r[8], r[9]],
    }
}

/// Raw head outputs that [`camera_from_raw`] maps to `cam`.
pub fn camera_to_raw(cam: &CameraParams, image_size: usize) -> [f32; CAMERA_RAW] {
    let s = image_size as f64;
    let ln2 = std::f64::consts::LN_2;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let w = camera::log_rotation(&cam.rotation);
    let t = cam.translation;
    [
        softplus_inverse(cam.fx * ln2 / s),
        softplus_inverse(cam.fy * ln2 / s),
        logit(cam.cx / s),
        logit(cam.cy / s),
        w[0],
        w[1],
        w[2],
        t[0],
        t[1],
        t[2],
    ]
    .map(|v| v as f32)
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_size;
        let mut s = ParamStore::new();
        let patch = Linear::new(&mut s, "encoder/patch", 3 * p * p, d, 1.0, rng);
        let pos = s.add("encoder/pos", Tensor::randn(&[config.num_patches(), d], 0.5, rng));
        let cam_token = s.add("encoder/cam_token", Tensor::randn(&[1, d], 0.5, rng));
        let blocks = (0..config.num_blocks)
            .map(|i| {
                (
                    SelfAttentionBlock::new(&mut s, &format!("encoder/block{i}/spatial"), d, config.num_heads, rng),
                    TemporalBlock::new(&mut s, &format!("encoder/block{i}/temporal"), d, config.num_heads, rng),
                )
            })
            .collect();
        let cam_head = Mlp::new(&mut s, "encoder/cam_head", (d, d, CAMERA_RAW), 0.1, rng);
        let shuffle = p / 4;
        let depth_head = DepthHead {
            stage1: Conv3x3::new(&mut s, "encoder/depth/stage1", d, 32, 1, rng),
            stage2: Conv3x3::new(&mut s, "encoder/depth/stage2", 32, 16, 1, rng),
            out: Conv3x3::new(&mut s, "encoder/depth/out", 16, shuffle * shuffle, 1, rng),
            shuffle,
        };
        let b = softplus_inverse(3.5) as f32;
        s.get_mut(depth_head.out.bias).data_mut().fill(b);
        Ok(Encoder {
            config,
            params: s,
            patch,
            pos,
            cam_token,
            blocks,
            cam_head,
            depth_head,
        })
    }

    pub fn new_memory(&self) -> MemoryCache {
        MemoryCache::new(&self.config)
    }

    /// Fresh, empty memory; the next frame encoded with it behaves as a
    /// first frame.
    pub fn reset_memory(&self) -> MemoryCache {
        self.new_memory()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let n = self.config.image_size;
        if image.shape() != [3, n, n] {
            return Err(Error::shape("encoder input", image.shape(), &[3, n, n]));
        }
        Ok(())
    }

    /// Patch projections before positional encoding, `(h·w)×D`.
    pub fn patch_projection_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let rows = patchify(image, self.config.patch_size)?;
        let ps = self.config.patch_size;
        let x = tape.constant(&[self.config.num_patches(), 3 * ps * ps], rows)?;
        self.patch.forward(tape, p, x)
    }

    /// `[C_t; F_t]` as a `(1 + h·w)×D` stack.
    pub fn embed_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: &Tensor) -> Result<Var> {
        let f = self.patch_projection_on(tape, p, image)?;
        let f = tape.add(f, p.get(self.pos))?;
        tape.concat_rows(&[p.get(self.cam_token), f])
    }

    pub fn patch_projection(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let v = self.patch_projection_on(&mut tape, &p, image)?;
        Ok(tape.tensor(v))
    }

    pub fn embed_frame(&self, image: &Tensor) -> Result<FrameTokens> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let v = self.embed_on(&mut tape, &p, image)?;
        FrameTokens::from_stacked(&tape.tensor(v))
    }

    /// One streaming step on `tape`. Returns the refined `[C_t; G_t]` stack
    /// and appends this frame's keys/values to `memory`.
    pub fn step_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: &Tensor,
        memory: &mut TapeMemory,
    ) -> Result<Var> {
        let mut x = self.embed_on(tape, p, image)?;
        let mut new_kv = Vec::with_capacity(self.blocks.len());
        for (l, (spatial, temporal)) in self.blocks.iter().enumerate() {
            x = spatial.forward(tape, p, x)?;
            let (q, k, v) = temporal.qkv(tape, p, x)?;
            let mut ks: Vec<Var> = memory.layer(l).map(|kv| kv.0).collect();
            let mut vs: Vec<Var> = memory.layer(l).map(|kv| kv.1).collect();
            ks.push(k);
            vs.push(v);
            let keys = if ks.len() == 1 { k } else { tape.concat_rows(&ks)? };
            let values = if vs.len() == 1 { v } else { tape.concat_rows(&vs)? };
            x = temporal.finish(tape, p, x, q, keys, values, None)?;
            new_kv.push((k, v));
        }
        memory.push(new_kv);
        Ok(x)
    }

    /// Encodes one frame given the memory of earlier frames, then appends
    /// this frame to the memory.
    pub fn encode_frame(&self, image: &Tensor, memory: &mut MemoryCache) -> Result<FrameTokens> {
        if memory.config != self.config {
            return Err(Error::Contract(
                "memory cache was built for a different encoder configuration".into(),
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut tm = TapeMemory::new(self.config.max_memory_frames);
        for frame in &memory.frames {
            let vars = frame
                .iter()
                .map(|(k, v)| Ok((tape.leaf(k), tape.leaf(v))))
                .collect::<Result<Vec<_>>>()?;
            tm.frames.push_back(vars);
        }
        let out = self.step_on(&mut tape, &p, image, &mut tm)?;
        let newest = tm.frames.back().expect("step_on appends a frame");
        memory
            .frames
            .push_back(newest.iter().map(|&(k, v)| (tape.tensor(k), tape.tensor(v))).collect());
        while memory.frames.len() > self.config.max_memory_frames {
            memory.frames.pop_front();
        }
        memory.ingested += 1;
        FrameTokens::from_stacked(&tape.tensor(out))
    }

    /// Streams a whole clip from an empty memory.
    pub fn encode_video(&self, images: &[Tensor]) -> Result<Vec<FrameTokens>> {
        let mut memory = self.new_memory();
        images.iter().map(|im| self.encode_frame(im, &mut memory)).collect()
    }

    /// Reference path: all frames at once, spatial blocks under a
    /// block-diagonal mask and temporal blocks under a block-causal mask
    /// that also honours the memory cap.
    pub fn encode_joint(&self, images: &[Tensor]) -> Result<Vec<FrameTokens>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.config.tokens_per_frame();
        let total = n * images.len();
        let cap = self.config.max_memory_frames;
        let mask_with = |allow: &dyn Fn(usize, usize) -> bool| {
            let mut m = vec![0.0f32; total * total];
            for i in 0..total {
                for j in 0..total {
                    if !allow(i / n, j / n) {
                        m[i * total + j] = MASKED;
                    }
                }
            }
            m
        };
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let spatial_mask = tape.constant(&[total, total], mask_with(&|fi, fj| fi == fj))?;
        let temporal_mask =
            tape.constant(&[total, total], mask_with(&|fi, fj| fj <= fi && fi - fj <= cap))?;
        let frames = images
            .iter()
            .map(|im| self.embed_on(&mut tape, &p, im))
            .collect::<Result<Vec<_>>>()?;
        let mut x = tape.concat_rows(&frames)?;
        for (spatial, temporal) in &self.blocks {
            x = spatial.forward_masked(&mut tape, &p, x, Some(spatial_mask))?;
            let (q, k, v) = temporal.qkv(&mut tape, &p, x)?;
            x = temporal.finish(&mut tape, &p, x, q, k, v, Some(temporal_mask))?;
        }
        let all = tape.tensor(x);
        let d = self.config.embed_dim;
        (0..images.len())
            .map(|t| {
                let rows = all.data()[t * n * d..(t + 1) * n * d].to_vec();
                FrameTokens::from_stacked(&Tensor::new(&[n, d], rows)?)
            })
            .collect()
    }

    /// Raw `1×10` camera-head output for a camera token.
    pub fn camera_raw_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, token: Var) -> Result<Var> {
        self.cam_head.forward(tape, p, token)
    }

    pub fn camera_head(&self, camera_token: &Tensor) -> Result<CameraParams> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let t = tape.leaf(camera_token);
        let raw = self.camera_raw_on(&mut tape, &p, t)?;
        Ok(camera_from_raw(tape.value(raw), self.config.image_size))
    }

    /// Dense depth `H×W` from the patch tokens `(h·w)×D`.
    pub fn depth_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, patch_tokens: Var) -> Result<Var> {
        let g = self.config.grid();
        let d = self.config.embed_dim;
        let n = self.config.image_size;
        let x = tape.reshape(patch_tokens, &[g, g, d])?;
        let x = nn::hwc_to_chw(tape, x)?;
        let head = &self.depth_head;
        let x = head.stage1.forward(tape, p, x)?;
        let x = tape.gelu(x);
        let x = tape.upsample_nearest2x(x)?;
        let x = head.stage2.forward(tape, p, x)?;
        let x = tape.gelu(x);
        let x = tape.upsample_nearest2x(x)?;
        let x = head.out.forward(tape, p, x)?;
        let x = tape.depth_to_space(x, head.shuffle)?;
        let x = tape.softplus(x);
        let floor = tape.constant(&[1], vec![DEPTH_FLOOR])?;
        let x = tape.add(x, floor)?;
        tape.reshape(x, &[n, n])
    }

    pub fn depth_head(&self, tokens: &FrameTokens) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let t = tape.leaf(&tokens.patch_tokens);
        let d = self.depth_on(&mut tape, &p, t)?;
        Ok(tape.tensor(d))
    }

    /// Splits a `(1 + h·w)×D` stack into its camera and patch rows.
    pub fn split_tokens<T: Real>(&self, tape: &mut Tape<T>, stacked: Var) -> Result<(Var, Var)> {
        let cam = tape.slice_rows(stacked, 0, 1)?;
        let patches = tape.slice_rows(stacked, 1, self.config.num_patches())?;
        Ok((cam, patches))
    }

    /// Parameter ids of the camera head's output layer (weights, bias).
    pub fn camera_head_output(&self) -> (ParamId, ParamId) {
        (self.cam_head.fc2.w, self.cam_head.fc2.b)
    }

    /// Predicted geometry for a streamed clip.
    pub fn geometry(&self, tokens: &[FrameTokens]) -> Result<Vec<(Tensor, CameraParams)>> {
        tokens
            .iter()
            .map(|t| Ok((self.depth_head(t)?, self.camera_head(&t.camera_token)?)))
            .collect()
    }
}

/// Mean `|d̂ − d| / d` over pixels with positive ground truth.
pub fn mean_abs_rel_depth_error(pred: &Tensor, gt: &Tensor) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g > 0.0 {
            sum += ((p - g).abs() / g) as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
