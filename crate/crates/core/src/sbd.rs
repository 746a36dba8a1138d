//! Semantic bridging decoder.
//!
//! Geometry tokens are refined into context features `H_t` (two
//! self-attention layers and a 3×3 fusion conv, or a per-token projection
//! when the DPT stage is off). Each enabled supervision branch has its own
//! semantic head; an optional RGB head reconstructs the frame from the same
//! features. Inside the tape everything is token-major: a grid of `h×w`
//! cells is a `(h·w)×c` matrix.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FrameTokens};
use crate::error::{Error, Result};
use crate::nn::{self, Conv3x3, Linear, Mlp, SelfAttentionBlock, UNet};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Time-agnostic, object-level embeddings compressed to 3 dims.
    Agnostic,
    /// Time-sensitive, per-state embeddings compressed to 6 dims.
    Sensitive,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Agnostic, Branch::Sensitive];

    pub fn dim(self) -> usize {
        match self {
            Branch::Agnostic => 3,
            Branch::Sensitive => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Agnostic => "agnostic",
            Branch::Sensitive => "sensitive",
        }
    }

    pub fn parse(s: &str) -> Result<Branch> {
        match s {
            "agnostic" => Ok(Branch::Agnostic),
            "sensitive" => Ok(Branch::Sensitive),
            _ => Err(Error::Config(format!(
                "unknown branch {s:?} (expected agnostic or sensitive)"
            ))),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArch {
    Unet,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbdConfig {
    pub use_dpt: bool,
    pub head_arch: HeadArch,
    pub use_rgb_head: bool,
    pub branches: Vec<Branch>,
    /// One refine stage per branch instead of a shared one. The RGB head then
    /// reads the first enabled branch's features.
    pub separate_refine: bool,
    pub context_dim: usize,
    pub num_heads: usize,
    pub head_width: usize,
}

impl Default for SbdConfig {
    fn default() -> Self {
        SbdConfig {
            use_dpt: true,
            head_arch: HeadArch::Unet,
            use_rgb_head: true,
            branches: vec![Branch::Agnostic, Branch::Sensitive],
            separate_refine: false,
            context_dim: 64,
            num_heads: 4,
            head_width: 32,
        }
    }
}

impl SbdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("sbd: at least one branch must be enabled".into()));
        }
        let mut b = self.branches.clone();
        b.sort();
        b.dedup();
        if b.len() != self.branches.len() {
            return Err(Error::Config("sbd: branch listed twice".into()));
        }
        if self.context_dim == 0 || self.head_width == 0 {
            return Err(Error::Config("sbd: widths must be positive".into()));
        }
        if self.use_dpt && (self.num_heads == 0 || !self.context_dim.is_multiple_of(self.num_heads)) {
            return Err(Error::Config(format!(
                "sbd: context_dim {} is not divisible by num_heads {}",
                self.context_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn has(&self, branch: Branch) -> bool {
        self.branches.contains(&branch)
    }
}

/// `H_t`, channels-last `h×w×c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures {
    pub values: Tensor,
}

/// `Ŝ_t`, channels-last `h×w×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    pub values: Tensor,
    pub branch: Branch,
}

#[derive(Clone, Debug)]
enum Refine {
    Dpt {
        proj: Linear,
        attn: [SelfAttentionBlock; 2],
        fuse: Conv3x3,
    },
    Pointwise(Linear),
}

#[derive(Clone, Debug)]
enum Head {
    Unet(UNet),
    Mlp(Mlp),
}

impl Head {
    fn new(
        store: &mut ParamStore,
        name: &str,
        arch: HeadArch,
        c: usize,
        width: usize,
        out: usize,
        rng: &mut Rng,
    ) -> Self {
        match arch {
            HeadArch::Unet => Head::Unet(UNet::new(store, name, c, [width, 2 * width, 2 * width], out, 1.0, rng)),
            HeadArch::Mlp => Head::Mlp(Mlp::new(store, name, (c, 2 * width, out), 1.0, rng)),
        }
    }

    fn output(&self) -> (ParamId, ParamId) {
        match self {
            Head::Unet(u) => u.out_param(),
            Head::Mlp(m) => (m.fc2.w, m.fc2.b),
        }
    }

    /// `(h·w)×c → (h·w)×out`.
    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, grid: usize) -> Result<Var> {
        match self {
            Head::Mlp(m) => m.forward(tape, p, x),
            Head::Unet(u) => {
                let c = tape.shape(x)[1];
                let g = tape.reshape(x, &[grid, grid, c])?;
                let g = nn::hwc_to_chw(tape, g)?;
                let y = u.forward(tape, p, g)?;
                let y = nn::chw_to_hwc(tape, y)?;
                let d = tape.shape(y)[2];
                tape.reshape(y, &[grid * grid, d])
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sbd {
    pub config: SbdConfig,
    pub params: ParamStore,
    grid: usize,
    patch: usize,
    /// One entry when shared, otherwise parallel to `config.branches`.
    refines: Vec<Refine>,
    heads: Vec<(Branch, Head)>,
    rgb: Option<Head>,
}

impl Sbd {
    pub fn new(config: SbdConfig, encoder: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        let grid = encoder.grid();
        if config.head_arch == HeadArch::Unet && !grid.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "sbd: unet heads need a token grid divisible by 4, got {grid}"
            )));
        }
        let (d, c) = (encoder.embed_dim, config.context_dim);
        let mut s = ParamStore::new();
        let refine_names: Vec<String> = if config.separate_refine {
            config.branches.iter().map(|b| b.name().to_string()).collect()
        } else {
            vec!["shared".into()]
        };
        let refines = refine_names
            .iter()
            .map(|n| {
                let base = format!("sbd/{n}/refine");
                if config.use_dpt {
                    Refine::Dpt {
                        proj: Linear::new(&mut s, &format!("{base}/proj"), d, c, 1.0, rng),
                        attn: [0, 1].map(|i| {
                            SelfAttentionBlock::new(&mut s, &format!("{base}/attn{i}"), c, config.num_heads, rng)
                        }),
                        fuse: Conv3x3::new(&mut s, &format!("{base}/fuse"), c, c, 1, rng),
                    }
                } else {
                    Refine::Pointwise(Linear::new(&mut s, &format!("{base}/proj"), d, c, 1.0, rng))
                }
            })
            .collect();
        let heads = config
            .branches
            .iter()
            .map(|&b| {
                let name = format!("sbd/{b}/head");
                (b, Head::new(&mut s, &name, config.head_arch, c, config.head_width, b.dim(), rng))
            })
            .collect();
        let patch = encoder.patch_size;
        let rgb = config.use_rgb_head.then(|| {
            Head::new(&mut s, "sbd/rgb/head", config.head_arch, c, config.head_width, 3 * patch * patch, rng)
        });
        Ok(Sbd {
            config,
            params: s,
            grid,
            patch,
            refines,
            heads,
            rgb,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    fn refine_index(&self, branch: Branch) -> Result<usize> {
        let pos = self
            .config
            .branches
            .iter()
            .position(|&b| b == branch)
            .ok_or_else(|| Error::Config(format!("sbd: branch {branch} is not enabled")))?;
        Ok(if self.config.separate_refine { pos } else { 0 })
    }

    /// Branch whose features the RGB head consumes.
    pub fn rgb_source(&self) -> Branch {
        self.config.branches[0]
    }

    /// Whether both branches read the same refine stage.
    pub fn shares_refine(&self, a: Branch, b: Branch) -> bool {
        matches!((self.refine_index(a), self.refine_index(b)), (Ok(x), Ok(y)) if x == y)
    }

    /// `(h·w)×D` patch tokens → `(h·w)×c` context features.
    pub fn refine_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, branch: Branch, tokens: Var) -> Result<Var> {
        let g = self.grid;
        if tape.shape(tokens)[0] != g * g {
            return Err(Error::shape("sbd refine", tape.shape(tokens), &[g * g]));
        }
        match &self.refines[self.refine_index(branch)?] {
            Refine::Pointwise(l) => l.forward(tape, p, tokens),
            Refine::Dpt { proj, attn, fuse } => {
                let mut x = proj.forward(tape, p, tokens)?;
                for a in attn {
                    x = a.forward(tape, p, x)?;
                }
                let c = self.config.context_dim;
                let m = tape.reshape(x, &[g, g, c])?;
                let m = nn::hwc_to_chw(tape, m)?;
                let m = fuse.forward(tape, p, m)?;
                let m = nn::chw_to_hwc(tape, m)?;
                tape.reshape(m, &[g * g, c])
            }
        }
    }

    /// `(h·w)×c → (h·w)×d` for `branch`, no output nonlinearity.
    pub fn semantic_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, branch: Branch, features: Var) -> Result<Var> {
        let head = self
            .heads
            .iter()
            .find(|(b, _)| *b == branch)
            .map(|(_, h)| h)
            .ok_or_else(|| Error::Config(format!("sbd: branch {branch} is not enabled")))?;
        head.forward(tape, p, features, self.grid)
    }

    /// `(h·w)×c → 3×H×W` in (0, 1).
    pub fn rgb_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<Var> {
        let head = self
            .rgb
            .as_ref()
            .ok_or_else(|| Error::Config("sbd: rgb head is disabled".into()))?;
        let g = self.grid;
        let y = head.forward(tape, p, features, g)?;
        let y = tape.reshape(y, &[g, g, 3 * self.patch * self.patch])?;
        let y = nn::hwc_to_chw(tape, y)?;
        let y = tape.depth_to_space(y, self.patch)?;
        Ok(tape.sigmoid(y))
    }

    pub fn semantic_output(&self, branch: Branch) -> Option<(ParamId, ParamId)> {
        self.heads.iter().find(|(b, _)| *b == branch).map(|(_, h)| h.output())
    }

    pub fn rgb_output(&self) -> Option<(ParamId, ParamId)> {
        self.rgb.as_ref().map(Head::output)
    }

    fn grid_tensor(&self, t: Tensor) -> Result<Tensor> {
        let cols = t.shape()[1];
        t.reshape(&[self.grid, self.grid, cols])
    }

    pub fn refine(&self, tokens: &FrameTokens, branch: Branch) -> Result<ContextFeatures> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.leaf(&tokens.patch_tokens);
        let h = self.refine_on(&mut tape, &p, branch, x)?;
        Ok(ContextFeatures {
            values: self.grid_tensor(tape.tensor(h))?,
        })
    }

    fn feature_var(&self, tape: &mut Tape, features: &ContextFeatures) -> Result<Var> {
        let g = self.grid;
        let c = self.config.context_dim;
        if features.values.shape() != [g, g, c] {
            return Err(Error::shape("sbd features", features.values.shape(), &[g, g, c]));
        }
        let x = tape.leaf(&features.values);
        tape.reshape(x, &[g * g, c])
    }

    pub fn semantic_head(&self, features: &ContextFeatures, branch: Branch) -> Result<SemanticMap> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = self.feature_var(&mut tape, features)?;
        let s = self.semantic_on(&mut tape, &p, branch, x)?;
        Ok(SemanticMap {
            values: self.grid_tensor(tape.tensor(s))?,
            branch,
        })
    }

    pub fn rgb_head(&self, features: &ContextFeatures) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = self.feature_var(&mut tape, features)?;
        let y = self.rgb_on(&mut tape, &p, x)?;
        Ok(tape.tensor(y))
    }

    /// Semantic map for `branch` plus, when enabled, the RGB reconstruction
    /// (from the RGB source branch's features).
    pub fn decode(&self, tokens: &FrameTokens, branch: Branch) -> Result<(SemanticMap, Option<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.leaf(&tokens.patch_tokens);
        let h = self.refine_on(&mut tape, &p, branch, x)?;
        let s = self.semantic_on(&mut tape, &p, branch, h)?;
        let rgb = if self.rgb.is_some() {
            let hr = if self.refine_index(branch)? == self.refine_index(self.rgb_source())? {
                h
            } else {
                self.refine_on(&mut tape, &p, self.rgb_source(), x)?
            };
            let y = self.rgb_on(&mut tape, &p, hr)?;
            Some(tape.tensor(y))
        } else {
            None
        };
        Ok((
            SemanticMap {
                values: self.grid_tensor(tape.tensor(s))?,
                branch,
            },
            rgb,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn enc() -> EncoderConfig {
        EncoderConfig::default()
    }

    fn build(cfg: SbdConfig, seed: u64) -> Sbd {
        Sbd::new(cfg, &enc(), &mut SeedStreams::new(seed).stream("sbd")).unwrap()
    }

    fn tokens(seed: u64) -> FrameTokens {
        let mut r = SeedStreams::new(seed).stream("tokens");
        FrameTokens {
            camera_token: Tensor::randn(&[1, 64], 1.0, &mut r),
            patch_tokens: Tensor::randn(&[64, 64], 1.0, &mut r),
        }
    }

    fn perturb_token(t: &FrameTokens, cell: usize) -> FrameTokens {
        let mut out = t.clone();
        for v in &mut out.patch_tokens.data_mut()[cell * 64..(cell + 1) * 64] {
            *v += 0.5;
        }
        out
    }

    /// Cells (token indices) whose feature vector differs.
    fn changed_cells(a: &Tensor, b: &Tensor) -> Vec<usize> {
        let c = a.shape()[2];
        (0..a.shape()[0] * a.shape()[1])
            .filter(|&i| a.data()[i * c..(i + 1) * c] != b.data()[i * c..(i + 1) * c])
            .collect()
    }

    #[test]
    fn shapes_follow_grid_and_branch() {
        let s = build(SbdConfig::default(), 1);
        let t = tokens(1);
        let h = s.refine(&t, Branch::Agnostic).unwrap();
        assert_eq!(h.values.shape(), &[8, 8, 64]);
        assert_eq!(s.semantic_head(&h, Branch::Agnostic).unwrap().values.shape(), &[8, 8, 3]);
        assert_eq!(s.semantic_head(&h, Branch::Sensitive).unwrap().values.shape(), &[8, 8, 6]);
        assert_eq!(s.rgb_head(&h).unwrap().shape(), &[3, 64, 64]);
    }

    #[test]
    fn config_errors() {
        let mut c = SbdConfig::default();
        c.branches.clear();
        assert!(Sbd::new(c, &enc(), &mut SeedStreams::new(0).stream("x")).is_err());
        let mut c = SbdConfig::default();
        c.branches = vec![Branch::Sensitive];
        c.use_rgb_head = false;
        let s = build(c, 2);
        let h = s.refine(&tokens(2), Branch::Sensitive).unwrap();
        assert!(matches!(s.semantic_head(&h, Branch::Agnostic), Err(Error::Config(_))));
        assert!(matches!(s.rgb_head(&h), Err(Error::Config(_))));
        assert!(s.decode(&tokens(2), Branch::Sensitive).unwrap().1.is_none());
    }

    #[test]
    fn pointwise_refine_is_local() {
        let mut c = SbdConfig::default();
        c.use_dpt = false;
        let s = build(c, 3);
        let t = tokens(3);
        let a = s.refine(&t, Branch::Agnostic).unwrap();
        let b = s.refine(&perturb_token(&t, 27), Branch::Agnostic).unwrap();
        assert_eq!(changed_cells(&a.values, &b.values), vec![27]);
    }

    #[test]
    fn dpt_refine_reaches_distant_cells() {
        let s = build(SbdConfig::default(), 4);
        let t = tokens(4);
        let a = s.refine(&t, Branch::Agnostic).unwrap();
        let b = s.refine(&perturb_token(&t, 0), Branch::Agnostic).unwrap();
        // Cell (7, 7) is beyond the 3×3 fusion conv's reach from (0, 0).
        assert!(changed_cells(&a.values, &b.values).contains(&63));
    }

    #[test]
    fn mlp_head_is_per_pixel() {
        let mut c = SbdConfig::default();
        c.head_arch = HeadArch::Mlp;
        let s = build(c, 5);
        let h = s.refine(&tokens(5), Branch::Sensitive).unwrap();
        let mut h2 = h.clone();
        h2.values.data_mut()[10 * 64 + 3] += 1.0;
        let a = s.semantic_head(&h, Branch::Sensitive).unwrap();
        let b = s.semantic_head(&h2, Branch::Sensitive).unwrap();
        assert_eq!(changed_cells(&a.values, &b.values), vec![10]);
    }

    #[test]
    fn branches_share_no_parameters() {
        for separate in [false, true] {
            let mut c = SbdConfig::default();
            c.separate_refine = separate;
            let s = build(c, 6);
            let t = tokens(6);
            let before = s.decode(&t, Branch::Sensitive).unwrap().0;
            let mut z = s.clone();
            let ids: Vec<_> = z
                .params
                .ids()
                .filter(|&id| z.params.name(id).starts_with("sbd/agnostic/"))
                .collect();
            assert!(!ids.is_empty());
            for id in ids {
                z.params.get_mut(id).data_mut().fill(0.0);
            }
            assert_eq!(z.decode(&t, Branch::Sensitive).unwrap().0, before);
        }
    }

    #[test]
    fn rgb_in_unit_interval_and_half_when_zeroed() {
        for arch in [HeadArch::Unet, HeadArch::Mlp] {
            let mut c = SbdConfig::default();
            c.head_arch = arch;
            let mut s = build(c, 7);
            let h = s.refine(&tokens(7), Branch::Agnostic).unwrap();
            let rgb = s.rgb_head(&h).unwrap();
            assert!(rgb.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let (w, b) = s.rgb_output().unwrap();
            s.params.get_mut(w).data_mut().fill(0.0);
            s.params.get_mut(b).data_mut().fill(0.0);
            assert!(s.rgb_head(&h).unwrap().data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn decode_composes_heads_on_one_refine() {
        let s = build(SbdConfig::default(), 8);
        let t = tokens(8);
        let (sem, rgb) = s.decode(&t, Branch::Agnostic).unwrap();
        let h = s.refine(&t, Branch::Agnostic).unwrap();
        assert_eq!(sem, s.semantic_head(&h, Branch::Agnostic).unwrap());
        assert_eq!(rgb.unwrap(), s.rgb_head(&h).unwrap());
        assert_eq!(s.decode(&t, Branch::Agnostic).unwrap().0, sem);
    }

    #[test]
    fn both_losses_reach_refine_parameters() {
        let s = build(SbdConfig::default(), 9);
        let t = tokens(9);
        let mut tape = Tape::new();
        let p = s.params.bind(&mut tape, true);
        let x = tape.leaf(&t.patch_tokens);
        let h = s.refine_on(&mut tape, &p, Branch::Agnostic, x).unwrap();
        let sem = s.semantic_on(&mut tape, &p, Branch::Agnostic, h).unwrap();
        let rgb = s.rgb_on(&mut tape, &p, h).unwrap();
        let ls = tape.mean(sem);
        let lr = tape.mean(rgb);
        let refine_grad_norm = |loss: Var, tape: &Tape| {
            let g = tape.backward(loss).unwrap();
            s.params
                .ids()
                .filter(|&id| s.params.name(id).contains("/refine/"))
                .map(|id| g.get(p.get(id)).map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f32>()))
                .sum::<f32>()
        };
        assert!(refine_grad_norm(ls, &tape) > 0.0);
        assert!(refine_grad_norm(lr, &tape) > 0.0);
    }
}
