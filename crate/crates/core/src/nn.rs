//! Layer building blocks shared by the encoder, the decoder and the
//! autoencoders. Each layer owns [`ParamId`]s into a [`ParamStore`] and runs
//! on whatever tape the caller binds that store to.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `in×out` drawn with std `scale / sqrt(in)`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scale: f32,
        rng: &mut Rng,
    ) -> Self {
        let std = scale / (in_dim as f32).sqrt();
        let w = store.add(format!("{name}/w"), Tensor::randn(&[in_dim, out_dim], std, rng));
        let b = store.add(format!("{name}/b"), Tensor::zeros(&[out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// `x[n×in] → [n×out]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.get(self.w))?;
        tape.add_row_bias(y, p.get(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}/gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}/bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gain), p.get(self.bias), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        out_scale: f32,
        rng: &mut Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}/fc1"), dims.0, dims.1, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}/fc2"), dims.1, dims.2, out_scale, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Scaled dot-product attention over already-projected `q[n×c]`,
/// `k[m×c]`, `v[m×c]`, split into `heads` column groups. `mask`, when
/// given, is an additive `n×m` constant.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let c = tape.shape(q)[1];
    let hd = c / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let weights = tape.softmax(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Pre-norm transformer block (`x + attn(ln(x))`, `x + mlp(ln(x))`) over a
/// set of tokens.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        SelfAttentionBlock {
            ln1: LayerNorm::new(store, &format!("{name}/ln1"), dim),
            qkv: Linear::new(store, &format!("{name}/qkv"), dim, 3 * dim, 1.0, rng),
            proj: Linear::new(store, &format!("{name}/proj"), dim, dim, 0.5, rng),
            ln2: LayerNorm::new(store, &format!("{name}/ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}/mlp"), (dim, 2 * dim, dim), 0.5, rng),
            heads,
            dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward_masked(tape, p, x, None)
    }

    /// As [`forward`](Self::forward), with an additive `n×n` attention mask.
    pub fn forward_masked<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let q = tape.slice_cols(qkv, 0, self.dim)?;
        let k = tape.slice_cols(qkv, self.dim, self.dim)?;
        let v = tape.slice_cols(qkv, 2 * self.dim, self.dim)?;
        let a = multi_head_attention(tape, q, k, v, self.heads, mask)?;
        let a = self.proj.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let m = self.mlp.forward(tape, p, h)?;
        tape.add(x, m)
    }
}

/// 3×3 convolution with bias on channels-first maps.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (c_in * 9) as f32).sqrt();
        Conv3x3 {
            kernels: store.add(format!("{name}/k"), Tensor::randn(&[c_out, c_in, 3, 3], std, rng)),
            bias: store.add(format!("{name}/b"), Tensor::zeros(&[c_out])),
            stride,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.get(self.kernels), self.stride)?;
        tape.add_channel_bias(y, p.get(self.bias))
    }
}

/// 1×1 convolution on channels-first maps, stored as an `out×in` matrix.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
    pub out_dim: usize,
}

impl Pointwise {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        scale: f32,
        rng: &mut Rng,
    ) -> Self {
        let std = scale / (c_in as f32).sqrt();
        Pointwise {
            w: store.add(format!("{name}/w"), Tensor::randn(&[c_out, c_in], std, rng)),
            b: store.add(format!("{name}/b"), Tensor::zeros(&[c_out])),
            out_dim: c_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
        let y = tape.matmul(p.get(self.w), flat)?;
        let y = tape.reshape(y, &[self.out_dim, s[1], s[2]])?;
        tape.add_channel_bias(y, p.get(self.b))
    }
}

/// Two-level UNet on channels-first maps: two stride-2 downsampling stages,
/// two nearest-upsampling stages with skip concatenation, then a 1×1
/// projection. Spatial dims must be divisible by 4.
#[derive(Clone, Debug)]
pub struct UNet {
    enc1: Conv3x3,
    enc2: Conv3x3,
    bottleneck: Conv3x3,
    dec2: Conv3x3,
    dec1: Conv3x3,
    out: Pointwise,
}

impl UNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        widths: [usize; 3],
        c_out: usize,
        out_scale: f32,
        rng: &mut Rng,
    ) -> Self {
        let [w1, w2, w3] = widths;
        UNet {
            enc1: Conv3x3::new(store, &format!("{name}/enc1"), c_in, w1, 1, rng),
            enc2: Conv3x3::new(store, &format!("{name}/enc2"), w1, w2, 2, rng),
            bottleneck: Conv3x3::new(store, &format!("{name}/mid"), w2, w3, 2, rng),
            dec2: Conv3x3::new(store, &format!("{name}/dec2"), w3 + w2, w2, 1, rng),
            dec1: Conv3x3::new(store, &format!("{name}/dec1"), w2 + w1, w1, 1, rng),
            out: Pointwise::new(store, &format!("{name}/out"), w1, c_out, out_scale, rng),
        }
    }

    pub fn out_param(&self) -> (ParamId, ParamId) {
        (self.out.w, self.out.b)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let e1 = self.enc1.forward(tape, p, x)?;
        let e1 = tape.gelu(e1);
        let e2 = self.enc2.forward(tape, p, e1)?;
        let e2 = tape.gelu(e2);
        let m = self.bottleneck.forward(tape, p, e2)?;
        let m = tape.gelu(m);

        let u2 = tape.upsample_nearest2x(m)?;
        let u2 = tape.concat_rows(&[u2, e2])?;
        let d2 = self.dec2.forward(tape, p, u2)?;
        let d2 = tape.gelu(d2);

        let u1 = tape.upsample_nearest2x(d2)?;
        let u1 = tape.concat_rows(&[u1, e1])?;
        let d1 = self.dec1.forward(tape, p, u1)?;
        let d1 = tape.gelu(d1);
        self.out.forward(tape, p, d1)
    }
}

/// Converts a channels-last `h×w×c` map into channels-first `c×h×w`.
pub fn hwc_to_chw<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let t = tape.transpose(flat)?;
    tape.reshape(t, &[s[2], s[0], s[1]])
}

/// Converts a channels-first `c×h×w` map into channels-last `h×w×c`.
pub fn chw_to_hwc<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    let t = tape.transpose(flat)?;
    tape.reshape(t, &[s[1], s[2], s[0]])
}
