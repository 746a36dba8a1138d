//! The acceptance suite behind `lang4d selftest` and the `acceptance` test
//! target. Each criterion returns an [`Outcome`]; nothing here panics on a
//! failed check.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::camera::{self, CameraParams};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::{Encoder, EncoderConfig, TapeMemory};
use crate::error::{Error, Result};
use crate::gradcheck::{check_params_where, GradCheckReport};
use crate::losses::{joint_loss_on, rgb_loss_on, semantic_loss_on, LossWeights};
use crate::metrics::{acc_viou, iou, miou_macc, pixel_accuracy, EvalCase};
use crate::nn::{Conv3x3, LayerNorm, Linear, Mlp, Pointwise, SelfAttentionBlock, UNet};
use crate::pipeline::{evaluate, prepare_encoder, train_decoder, train_model, EvalSelection, Model, TrainedModel};
use crate::train::PretrainConfig;
use crate::rng::{Rng, SeedStreams};
use crate::sbd::{Branch, HeadArch, Sbd, SbdConfig};
use crate::supervision::{build_map, AeConfig, Autoencoder, Overlap};
use crate::synth::{default_suite, generate, Scene, SceneSpec};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Options {
    /// Run criteria 1 to 6 only.
    pub quick: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<24} {}  {} ({:.1}s)",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let o = Outcome {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    };
    log::info!("{}", o.line());
    o
}

pub fn run(opts: &Options) -> Vec<Outcome> {
    let mut out = vec![
        gradient_suite(opts.seed),
        streaming_equivalence(opts.seed),
        causality(opts.seed),
        supervision_oracle(opts.seed),
        projection_round_trip(opts.seed),
        metric_oracle(opts.seed),
    ];
    if !opts.quick {
        out.extend(end_to_end(opts.seed));
    }
    out
}

// ---- 1: gradients ---------------------------------------------------------------------------

const FD_COORDS: usize = 100;
const FD_STEP: f32 = 2e-4;
const FD_FLOOR: f64 = 1e-6;
const FD_TOL: f64 = 1e-3;

fn probe_sum(tape: &mut Tape<f64>, y: Var, probe: &Tensor) -> Result<Var> {
    let p = tape.leaf(probe);
    let yp = tape.mul(y, p)?;
    Ok(tape.sum(yp))
}

/// Projects `f`'s output onto a fixed random tensor and checks the
/// parameters selected by `select`.
fn check_block<F>(
    store: &mut ParamStore,
    select: impl Fn(&str) -> bool,
    f: F,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::<f64>::default();
        let b = store.bind(&mut tape, false);
        let y = f(&mut tape, &b)?;
        Tensor::randn(tape.shape(y), 1.0, rng)
    };
    check_params_where(
        store,
        select,
        |tape, b| {
            let y = f(tape, b)?;
            probe_sum(tape, y, &probe)
        },
        FD_COORDS,
        FD_STEP,
        FD_FLOOR,
        rng,
    )
}

/// Scalar losses are checked as they are, without a probe.
fn check_scalar<F>(store: &mut ParamStore, f: F, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    check_params_where(store, |_| true, f, FD_COORDS, FD_STEP, FD_FLOOR, rng)
}

/// Offsets of random sign and magnitude in [0.05, 0.5], so that `|x|`
/// terms stay away from their kink at the checked point.
fn offsets(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n)
        .map(|_| rng.random_range(0.05f32..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

fn loss_checks(rng: &mut Rng) -> Result<Vec<(String, GradCheckReport)>> {
    let (n, d) = (16, 6);
    let mut out = Vec::new();
    let mut store = ParamStore::new();
    let a = store.add("pred_a", Tensor::randn(&[n, d], 1.0, rng));
    let b = store.add("pred_b", Tensor::randn(&[n, 3], 1.0, rng));
    let r = store.add("rgb", Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.2f32..0.8)));
    let shifted = |store: &ParamStore, id, rng: &mut Rng| {
        let t = store.get(id);
        let off = offsets(t.numel(), rng);
        Tensor::new(t.shape(), t.data().iter().zip(&off).map(|(x, o)| x + o).collect::<Vec<_>>())
    };
    let ta = shifted(&store, a, rng)?;
    let tb = shifted(&store, b, rng)?;
    let tr = shifted(&store, r, rng)?;
    let cov: Vec<u8> = (0..n).map(|i| u8::from(i % 3 != 0)).collect();
    let w = LossWeights {
        alpha: 0.8,
        beta: 1.3,
        ..LossWeights::default()
    };
    let unmasked = LossWeights { masked: false, ..w.clone() };
    for (name, weights) in [("loss/semantic", &w), ("loss/semantic_unmasked", &unmasked)] {
        let rep = check_scalar(
            &mut store,
            |tape, p| {
                let t = tape.leaf(&ta);
                semantic_loss_on(tape, p.get(a), t, &cov, weights)
            },
            rng,
        )?;
        out.push((name.to_string(), rep));
    }
    let rep = check_scalar(
        &mut store,
        |tape, p| {
            let t = tape.leaf(&tr);
            rgb_loss_on(tape, p.get(r), t, &w)
        },
        rng,
    )?;
    out.push(("loss/rgb".into(), rep));
    let rep = check_scalar(
        &mut store,
        |tape, p| {
            let t1 = tape.leaf(&ta);
            let t2 = tape.leaf(&tb);
            let t3 = tape.leaf(&tr);
            let s1 = semantic_loss_on(tape, p.get(a), t1, &cov, &w)?;
            let s2 = semantic_loss_on(tape, p.get(b), t2, &cov, &w)?;
            let g = rgb_loss_on(tape, p.get(r), t3, &w)?;
            joint_loss_on(tape, &[s1, s2], &[g], &w)
        },
        rng,
    )?;
    out.push(("loss/joint".into(), rep));
    Ok(out)
}

fn nn_checks(rng: &mut Rng) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let all = |_: &str| true;
    let rows = Tensor::randn(&[6, 8], 1.0, rng);

    let mut s = ParamStore::new();
    let l = Linear::new(&mut s, "linear", 8, 5, 1.0, rng);
    randomize(&mut s, rng);
    let rep = check_block(&mut s, all, |t, p| {
        let x = t.leaf(&rows);
        l.forward(t, p, x)
    }, rng)?;
    out.push(("nn/linear".into(), rep));

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 8);
    randomize(&mut s, rng);
    let rep = check_block(&mut s, all, |t, p| {
        let x = t.leaf(&rows);
        ln.forward(t, p, x)
    }, rng)?;
    out.push(("nn/layer_norm".into(), rep));

    let mut s = ParamStore::new();
    let m = Mlp::new(&mut s, "mlp", (8, 12, 4), 1.0, rng);
    randomize(&mut s, rng);
    let rep = check_block(&mut s, all, |t, p| {
        let x = t.leaf(&rows);
        m.forward(t, p, x)
    }, rng)?;
    out.push(("nn/mlp".into(), rep));

    let mut s = ParamStore::new();
    let blk = SelfAttentionBlock::new(&mut s, "attn", 8, 2, rng);
    randomize(&mut s, rng);
    let causal: Vec<f32> = (0..36).map(|i| if i % 6 > i / 6 { -1e9 } else { 0.0 }).collect();
    let rep = check_block(&mut s, all, |t, p| {
        let x = t.leaf(&rows);
        let mask = t.constant(&[6, 6], causal.clone())?;
        blk.forward_masked(t, p, x, Some(mask))
    }, rng)?;
    out.push(("nn/attention".into(), rep));

    let map = Tensor::randn(&[3, 8, 8], 1.0, rng);
    for stride in [1, 2] {
        let mut s = ParamStore::new();
        let c = Conv3x3::new(&mut s, "conv", 3, 4, stride, rng);
        randomize(&mut s, rng);
        let rep = check_block(&mut s, all, |t, p| {
            let x = t.leaf(&map);
            c.forward(t, p, x)
        }, rng)?;
        out.push((format!("nn/conv3x3_stride{stride}"), rep));
    }

    let mut s = ParamStore::new();
    let pw = Pointwise::new(&mut s, "pw", 3, 5, 1.0, rng);
    randomize(&mut s, rng);
    let rep = check_block(&mut s, all, |t, p| {
        let x = t.leaf(&map);
        pw.forward(t, p, x)
    }, rng)?;
    out.push(("nn/pointwise".into(), rep));

    let mut s = ParamStore::new();
    let u = UNet::new(&mut s, "unet", 3, [4, 6, 8], 2, 1.0, rng);
    randomize(&mut s, rng);
    let rep = check_block(&mut s, all, |t, p| {
        let x = t.leaf(&map);
        u.forward(t, p, x)
    }, rng)?;
    out.push(("nn/unet".into(), rep));
    Ok(out)
}

/// Perturbs constant-initialised tensors (biases, gains) so that every
/// parameter has a generic gradient.
fn randomize(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let first = t.data()[0];
        if t.data().iter().all(|&v| v == first) {
            for v in t.data_mut() {
                *v += 0.2 * rng.sample::<f32, _>(StandardNormal);
            }
        }
    }
}

fn encoder_checks(rng: &mut Rng) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = EncoderConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        max_memory_frames: 2,
    };
    let mut enc = Encoder::new(cfg, rng)?;
    randomize(&mut enc.params, rng);
    let frames: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[3, 16, 16], |_| rng.random::<f32>())).collect();
    let enc = enc;
    let forward = |t: &mut Tape<f64>, p: &Bound| -> Result<Var> {
        let mut memory = TapeMemory::new(enc.config.max_memory_frames);
        let mut outs = Vec::new();
        for im in &frames {
            let x = enc.step_on(t, p, im, &mut memory)?;
            let (cam, patches) = enc.split_tokens(t, x)?;
            let raw = enc.camera_raw_on(t, p, cam)?;
            let depth = enc.depth_on(t, p, patches)?;
            let flat_x = t.reshape(x, &[1, enc.config.tokens_per_frame() * enc.config.embed_dim])?;
            let flat_d = t.reshape(depth, &[1, 256])?;
            outs.extend([flat_x, raw, flat_d]);
        }
        t.concat_cols(&outs)
    };
    let mut params = enc.params.clone();
    let selections: [(&str, fn(&str) -> bool); 5] = [
        ("encoder/patch_embed", |n| {
            n.starts_with("encoder/patch") || n == "encoder/pos" || n == "encoder/cam_token"
        }),
        ("encoder/spatial_attention", |n| n.contains("/spatial/")),
        ("encoder/temporal_attention", |n| n.contains("/temporal/")),
        ("encoder/camera_head", |n| n.starts_with("encoder/cam_head")),
        ("encoder/depth_head", |n| n.starts_with("encoder/depth")),
    ];
    let mut out = Vec::new();
    for (name, sel) in selections {
        out.push((name.to_string(), check_block(&mut params, sel, forward, rng)?));
    }
    Ok(out)
}

fn sbd_checks(rng: &mut Rng) -> Result<Vec<(String, GradCheckReport)>> {
    let enc_cfg = EncoderConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        max_memory_frames: 2,
    };
    let tokens = Tensor::randn(&[16, 8], 1.0, rng);
    let mut out = Vec::new();
    let variants = [
        ("dpt_unet", true, HeadArch::Unet),
        ("pointwise_mlp", false, HeadArch::Mlp),
    ];
    for (tag, use_dpt, head_arch) in variants {
        let cfg = SbdConfig {
            use_dpt,
            head_arch,
            context_dim: 8,
            num_heads: 2,
            head_width: 4,
            ..SbdConfig::default()
        };
        let mut sbd = Sbd::new(cfg, &enc_cfg, rng)?;
        randomize(&mut sbd.params, rng);
        let mut params = sbd.params.clone();
        let forward = |t: &mut Tape<f64>, p: &Bound| -> Result<Var> {
            let x = t.leaf(&tokens);
            let h = sbd.refine_on(t, p, Branch::Agnostic, x)?;
            let a = sbd.semantic_on(t, p, Branch::Agnostic, h)?;
            let s = sbd.semantic_on(t, p, Branch::Sensitive, h)?;
            let rgb = sbd.rgb_on(t, p, h)?;
            let rgb = t.reshape(rgb, &[16, 3 * 64])?;
            t.concat_cols(&[a, s, rgb])
        };
        let selections: [(&str, fn(&str) -> bool); 4] = [
            ("refine", |n| n.contains("/refine/")),
            ("agnostic_head", |n| n.starts_with("sbd/agnostic/head")),
            ("sensitive_head", |n| n.starts_with("sbd/sensitive/head")),
            ("rgb_head", |n| n.starts_with("sbd/rgb/head")),
        ];
        for (name, sel) in selections {
            out.push((format!("sbd/{tag}/{name}"), check_block(&mut params, sel, forward, rng)?));
        }
    }

    let mut ae = Autoencoder::new("ae", 32, 3, AeConfig::default(), rng)?;
    randomize(&mut ae.params, rng);
    let x = Tensor::randn(&[4, 32], 1.0, rng);
    let mut params = ae.params.clone();
    let forward = |t: &mut Tape<f64>, p: &Bound| -> Result<Var> {
        let xv = t.leaf(&x);
        let z = ae.encode_on(t, p, xv)?;
        let y = ae.decode_on(t, p, z)?;
        t.concat_cols(&[z, y])
    };
    out.push(("autoencoder/encoder".into(), check_block(&mut params, |n| n.starts_with("ae/enc"), forward, rng)?));
    out.push(("autoencoder/decoder".into(), check_block(&mut params, |n| n.starts_with("ae/dec"), forward, rng)?));
    Ok(out)
}

/// Every loss and network block against central differences.
pub fn gradient_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let streams = SeedStreams::new(seed);
    let mut all = loss_checks(&mut streams.stream("selftest/fd/loss"))?;
    all.extend(nn_checks(&mut streams.stream("selftest/fd/nn"))?);
    all.extend(encoder_checks(&mut streams.stream("selftest/fd/encoder"))?);
    all.extend(sbd_checks(&mut streams.stream("selftest/fd/sbd"))?);
    Ok(all)
}

pub fn gradient_suite(seed: u64) -> Outcome {
    let start = Instant::now();
    timed(1, "gradient-suite", || {
        let reports = gradient_checks(seed)?;
        let secs = start.elapsed().as_secs_f64();
        let failing: Vec<String> = reports
            .iter()
            .filter(|(_, r)| r.max_rel_err >= FD_TOL || r.checked < FD_COORDS)
            .map(|(n, r)| format!("{n} ({:.2e} {:?})", r.max_rel_err, r.worst))
            .collect();
        let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
        let ok = failing.is_empty() && secs < 120.0;
        let mut detail = format!("{} checks x {FD_COORDS} coords, worst rel err {worst:.2e}", reports.len());
        if !failing.is_empty() {
            detail += &format!(", failing: {}", failing.join(", "));
        }
        Ok((ok, detail))
    })
}

// ---- 2, 3: streaming -----------------------------------------------------------------------

fn scene_images(scene: &Scene) -> Vec<Tensor> {
    scene.frames.iter().map(|f| f.image.clone()).collect()
}

pub fn streaming_equivalence(seed: u64) -> Outcome {
    timed(2, "streaming-equivalence", || {
        let streams = SeedStreams::new(seed);
        let scene = generate(&default_suite(seed)[0])?;
        let enc = Encoder::new(EncoderConfig::default(), &mut streams.stream("encoder/init"))?;
        let images = scene_images(&scene);
        let streamed = enc.encode_video(&images)?;
        let joint = enc.encode_joint(&images)?;
        let diff = streamed
            .iter()
            .zip(&joint)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0f32, f32::max);
        Ok((
            diff < 1e-5 && streamed.len() == 8,
            format!("{} frames, max abs token diff {diff:.2e}", streamed.len()),
        ))
    })
}

pub fn causality(seed: u64) -> Outcome {
    timed(3, "causality", || {
        let streams = SeedStreams::new(seed);
        let mut pick = streams.stream("selftest/causality");
        let mut worst = 0.0f64;
        let mut pairs = Vec::new();
        for k in 0..3 {
            let s: u64 = pick.random();
            let t = pick.random_range(0..7usize);
            pairs.push(format!("({s:x}, {t})"));
            let sub = SeedStreams::new(s);
            let scene = generate(&SceneSpec::random(&format!("causal{k}"), 64, 8, s))?;
            let enc = Encoder::new(EncoderConfig::default(), &mut sub.stream("encoder/init"))?;
            let sbd = Sbd::new(SbdConfig::default(), &enc.config, &mut sub.stream("sbd/init"))?;
            let images = scene_images(&scene);
            let mut perturbed = images.clone();
            let mut noise = sub.stream("noise");
            perturbed[t + 1] = Tensor::from_fn(&[3, 64, 64], |_| noise.random::<f32>());
            let outputs = |imgs: &[Tensor]| -> Result<Vec<Vec<f32>>> {
                let stream = enc.encode_video(imgs)?;
                let joint = enc.encode_joint(imgs)?;
                stream
                    .iter()
                    .zip(&joint)
                    .map(|(tok, jt)| {
                        let mut v = tok.camera_token.data().to_vec();
                        v.extend(tok.patch_tokens.data());
                        v.extend(jt.patch_tokens.data());
                        v.extend(enc.depth_head(tok)?.data());
                        let cam = enc.camera_head(&tok.camera_token)?;
                        v.extend([cam.fx, cam.fy, cam.cx, cam.cy].map(|x| x as f32));
                        for b in Branch::ALL {
                            let (m, rgb) = sbd.decode(tok, b)?;
                            v.extend(m.values.data());
                            if let Some(rgb) = rgb {
                                v.extend(rgb.data());
                            }
                        }
                        Ok(v)
                    })
                    .collect()
            };
            let a = outputs(&images)?;
            let b = outputs(&perturbed)?;
            for f in 0..=t {
                for (x, y) in a[f].iter().zip(&b[f]) {
                    worst = worst.max((*x as f64 - *y as f64).abs());
                }
            }
            // The perturbation must actually reach frame t + 1.
            if a[t + 1] == b[t + 1] {
                return Ok((false, format!("perturbing frame {} changed nothing", t + 1)));
            }
        }
        Ok((worst < 1e-12, format!("(seed, t) = {}, max diff on frames <= t {worst:.1e}", pairs.join(" "))))
    })
}

// ---- 4: supervision -------------------------------------------------------------------------

pub fn supervision_oracle(seed: u64) -> Outcome {
    timed(4, "supervision-oracle", || {
        let mut rng = SeedStreams::new(seed).stream("selftest/supervision");
        let mut overlapping = 0;
        for case in 0..20 {
            let (h, w) = (rng.random_range(2..12usize), rng.random_range(2..12usize));
            let objects = rng.random_range(1..6usize);
            let dim = rng.random_range(1..9usize);
            let density = rng.random_range(0.1..0.7);
            let masks: Vec<Vec<u8>> = (0..objects)
                .map(|_| (0..h * w).map(|_| u8::from(rng.random_bool(density))).collect())
                .collect();
            let emb: Vec<Vec<f32>> = (0..objects)
                .map(|_| (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
                .collect();
            let got = build_map(&masks, &emb, h, w, dim, Overlap::Sum)?;
            let mut any_overlap = false;
            for px in 0..h * w {
                let mut acc = vec![0.0f32; dim];
                let mut hits = 0;
                for (m, e) in masks.iter().zip(&emb) {
                    if m[px] != 0 {
                        hits += 1;
                        for k in 0..dim {
                            acc[k] += e[k];
                        }
                    }
                }
                any_overlap |= hits > 1;
                let cell = &got.values.data()[px * dim..(px + 1) * dim];
                if cell.iter().zip(&acc).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Ok((false, format!("case {case}: pixel {px} differs from the oracle")));
                }
                if got.coverage[px] != u8::from(hits > 0) {
                    return Ok((false, format!("case {case}: coverage of pixel {px} differs")));
                }
            }
            overlapping += usize::from(any_overlap);
        }
        Ok((overlapping > 0, format!("20 configurations bit-identical, {overlapping} with overlapping masks")))
    })
}

// ---- 5: projection --------------------------------------------------------------------------

/// Signed distance of `p` from the surface whose id a pixel carries.
fn plane_distance(spec: &SceneSpec, t: usize, id: usize, p: &camera::Vec3) -> f64 {
    if id == spec.objects.len() {
        return p[2] - spec.backdrop_z;
    }
    let obj = &spec.objects[id];
    let c = obj.center_at(t);
    let (_, _, n) = obj.frame();
    camera::dot(&n, &[p[0] - c[0], p[1] - c[1], p[2] - c[2]])
}

pub fn projection_round_trip(seed: u64) -> Outcome {
    timed(5, "projection-round-trip", || {
        let mut rng = SeedStreams::new(seed).stream("selftest/projection");
        let mut worst_rt = 0.0f64;
        for _ in 0..1000 {
            let f = rng.random_range(20.0..150.0);
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(1.0..8.0);
            let eye = [r * a.sin(), rng.random_range(-2.0..2.0), r * a.cos()];
            let target = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let cam = CameraParams::look_at(f, f * rng.random_range(0.8..1.2), 32.0, 32.0, eye, target, [0.0, 1.0, 0.0]);
            let (u, v, d) = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0), rng.random_range(0.1..20.0));
            let p = cam.unproject(u, v, d).ok_or_else(|| Error::Contract("unproject rejected a valid depth".into()))?;
            let (u2, v2, d2) = cam.project(&p).ok_or_else(|| Error::Contract("point behind camera".into()))?;
            worst_rt = worst_rt.max((u - u2).abs()).max((v - v2).abs()).max((d - d2).abs());
        }
        let mut worst_plane = 0.0f64;
        let mut pixels = 0usize;
        for spec in default_suite(seed) {
            let scene = generate(&spec)?;
            let n = spec.resolution;
            for (t, fr) in scene.frames.iter().enumerate() {
                for (px, &id) in fr.ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    let (u, v) = ((px % n) as f64, (px / n) as f64);
                    let p = fr
                        .camera
                        .unproject(u, v, fr.depth.data()[px] as f64)
                        .ok_or_else(|| Error::Contract("masked pixel without depth".into()))?;
                    worst_plane = worst_plane.max(plane_distance(&spec, t, id as usize - 1, &p).abs());
                    pixels += 1;
                }
            }
        }
        Ok((
            worst_rt < 1e-6 && worst_plane < 1e-6,
            format!("1000 samples, max round-trip err {worst_rt:.1e}; {pixels} bundle pixels, max plane distance {worst_plane:.1e}"),
        ))
    })
}

// ---- 6: metrics -----------------------------------------------------------------------------

/// Counting oracle for one frame: (IoU, pixel accuracy).
fn count_frame(p: &[u8], g: &[u8]) -> (f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    for (&a, &b) in p.iter().zip(g) {
        match (a != 0, b != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let union = tp + fp + fn_;
    let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
    let total = tp + fp + fn_ + tn;
    let acc = if total == 0 { 1.0 } else { (tp + tn) as f64 / total as f64 };
    (iou, acc)
}

/// Counting oracle for one case: (Acc, vIoU).
fn count_case(c: &EvalCase) -> (f64, f64) {
    let n = c.gt_masks.len();
    let pred: BTreeSet<usize> = c.pred_segment.iter().copied().collect();
    let gt: BTreeSet<usize> = c.gt_segment.iter().copied().collect();
    let agree = (0..n).filter(|t| pred.contains(t) == gt.contains(t)).count();
    let viou = if gt.is_empty() {
        if pred.is_empty() { 1.0 } else { 0.0 }
    } else {
        let mut s = 0.0;
        for &t in &gt {
            if pred.contains(&t) {
                s += count_frame(&c.pred_masks[t], &c.gt_masks[t]).0;
            }
        }
        s / gt.len() as f64
    };
    (agree as f64 / n as f64, viou)
}

fn hand_built_case() -> EvalCase {
    let full = vec![1, 1, 0, 0];
    EvalCase {
        name: "hand".into(),
        pred_masks: vec![vec![0; 4], full.clone(), vec![0, 0, 1, 1], vec![1, 0, 0, 0]],
        gt_masks: vec![vec![0; 4], full.clone(), full, vec![0; 4]],
        pred_segment: vec![1, 2, 3],
        gt_segment: vec![1, 2],
    }
}

pub fn metric_oracle(seed: u64) -> Outcome {
    timed(6, "metric-oracle", || {
        let mut rng = SeedStreams::new(seed).stream("selftest/metrics");
        let mut cases = Vec::new();
        for k in 0..50 {
            let n = rng.random_range(1..7usize);
            let px = rng.random_range(1..30usize);
            let density = rng.random_range(0.0..1.0);
            let mut mask = || -> Vec<u8> { (0..px).map(|_| u8::from(rng.random_bool(density))).collect() };
            let pred_masks = (0..n).map(|_| mask()).collect();
            let gt_masks = (0..n).map(|_| mask()).collect();
            let seg = |rng: &mut Rng| -> Vec<usize> { (0..n).filter(|_| rng.random_bool(0.5)).collect() };
            let pred_segment = seg(&mut rng);
            let gt_segment = seg(&mut rng);
            cases.push(EvalCase {
                name: format!("random{k}"),
                pred_masks,
                gt_masks,
                pred_segment,
                gt_segment,
            });
        }
        for c in &cases {
            for (p, g) in c.pred_masks.iter().zip(&c.gt_masks) {
                let (i, a) = count_frame(p, g);
                if iou(p, g)? != i || pixel_accuracy(p, g)? != a {
                    return Ok((false, format!("{}: per-frame metric differs from the oracle", c.name)));
                }
            }
            if c.temporal()? != count_case(c) {
                return Ok((false, format!("{}: Acc/vIoU differ from the oracle", c.name)));
            }
        }
        let frames: Vec<(f64, f64)> = cases
            .iter()
            .flat_map(|c| c.pred_masks.iter().zip(&c.gt_masks).map(|(p, g)| count_frame(p, g)))
            .collect();
        let k = frames.len() as f64;
        let oracle_mean = (
            frames.iter().map(|f| f.0).sum::<f64>() / k,
            frames.iter().map(|f| f.1).sum::<f64>() / k,
        );
        let (mi, ma) = miou_macc(&cases)?;
        let per_case: Vec<(f64, f64)> = cases.iter().map(count_case).collect();
        let oracle_t = (
            per_case.iter().map(|c| c.0).sum::<f64>() / per_case.len() as f64,
            per_case.iter().map(|c| c.1).sum::<f64>() / per_case.len() as f64,
        );
        let (acc, viou) = acc_viou(&cases)?;
        if (mi, ma) != oracle_mean || (acc, viou) != oracle_t {
            return Ok((false, "aggregates differ from the oracle".into()));
        }
        let (hacc, hviou) = hand_built_case().temporal()?;
        Ok((
            hacc == 0.75 && hviou == 0.5,
            format!("50 random cases exact; hand-built case Acc {hacc} vIoU {hviou}"),
        ))
    })
}

// ---- 7 to 11: end to end --------------------------------------------------------------------

/// Scores of one trained configuration.
#[derive(Clone, Debug)]
pub struct RunScores {
    pub agnostic: (f64, f64),
    pub agnostic_para: f64,
    /// Sensitive branch over every frame: mIoU, Acc, vIoU.
    pub sensitive: (f64, f64, f64),
    pub sensitive_para: f64,
    /// Sensitive branch on held-out frames.
    pub sensitive_held_out: f64,
    pub seconds: f64,
}

impl RunScores {
    /// Suite mIoU used to rank configurations: the mean of both branches on
    /// held-out frames.
    pub fn suite_miou(&self) -> f64 {
        0.5 * (self.agnostic.0 + self.sensitive_held_out)
    }
}

pub fn score(model: &Model, scenes: &[Scene], cfg: &RunConfig) -> Result<RunScores> {
    let sel = |branch, paraphrases, held_out_only| EvalSelection {
        branch,
        paraphrases,
        held_out_only,
    };
    let a = evaluate(model, scenes, sel(Branch::Agnostic, false, true), &cfg.eval)?;
    let ap = evaluate(model, scenes, sel(Branch::Agnostic, true, true), &cfg.eval)?;
    let s = evaluate(model, scenes, sel(Branch::Sensitive, false, false), &cfg.eval)?;
    let sp = evaluate(model, scenes, sel(Branch::Sensitive, true, false), &cfg.eval)?;
    let sh = evaluate(model, scenes, sel(Branch::Sensitive, false, true), &cfg.eval)?;
    Ok(RunScores {
        agnostic: (a.miou, a.macc),
        agnostic_para: ap.miou,
        sensitive: (s.miou, s.acc, s.viou),
        sensitive_para: sp.miou,
        sensitive_held_out: sh.miou,
        seconds: 0.0,
    })
}

fn train_and_score(cfg: &RunConfig, scenes: &[Scene], encoder: &Encoder) -> Result<(TrainedModel, RunScores)> {
    let start = Instant::now();
    let trained = train_decoder(cfg, scenes, encoder.clone(), None, None)?;
    let mut scores = score(&trained.model, scenes, cfg)?;
    scores.seconds = start.elapsed().as_secs_f64();
    log::info!("trained and scored in {:.0}s: {scores:?}", scores.seconds);
    Ok((trained, scores))
}

fn failed_all(ids: &[(usize, &'static str)], e: &Error) -> Vec<Outcome> {
    ids.iter()
        .map(|&(id, name)| Outcome {
            id,
            name,
            passed: false,
            detail: format!("error: {e}"),
            seconds: 0.0,
        })
        .collect()
}

pub fn end_to_end(seed: u64) -> Vec<Outcome> {
    const IDS: [(usize, &str); 5] = [
        (7, "e2e-time-agnostic"),
        (8, "e2e-time-sensitive"),
        (9, "ablation-directionality"),
        (10, "paraphrase-robustness"),
        (11, "freezing-determinism"),
    ];
    let start = Instant::now();
    let scenes = match default_suite(seed).iter().map(generate).collect::<Result<Vec<_>>>() {
        Ok(s) => s,
        Err(e) => return failed_all(&IDS, &e),
    };
    // End to end runs use a geometry-pretrained frozen encoder. Ablations
    // share it, so only the decoder differs between runs.
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg.pretrain = Some(PretrainConfig::default());
    let encoder = match prepare_encoder(&cfg, &scenes) {
        Ok((e, _)) => e,
        Err(e) => return failed_all(&IDS, &e),
    };
    let (trained, base) = match train_and_score(&cfg, &scenes, &encoder) {
        Ok(r) => r,
        Err(e) => return failed_all(&IDS, &e),
    };
    let base_secs = start.elapsed().as_secs_f64();
    let mut out = Vec::new();

    let (mi, ma) = base.agnostic;
    out.push(Outcome {
        id: 7,
        name: IDS[0].1,
        passed: mi > 0.9 && ma > 0.95 && base_secs < 1800.0,
        detail: format!("held-out mIoU {mi:.3} mAcc {ma:.3}, {:.0}s end to end", base_secs),
        seconds: base_secs,
    });
    let (_, acc, viou) = base.sensitive;
    out.push(Outcome {
        id: 8,
        name: IDS[1].1,
        passed: acc > 0.9 && viou > 0.8,
        detail: format!("Acc {acc:.3} vIoU {viou:.3} (mIoU {:.3})", base.sensitive.0),
        seconds: 0.0,
    });

    out.push(timed(9, IDS[2].1, || {
        let ablations: [(&str, fn(&mut SbdConfig)); 3] = [
            ("no_dpt", |c| c.use_dpt = false),
            ("no_rgb_head", |c| c.use_rgb_head = false),
            ("mlp_head", |c| c.head_arch = HeadArch::Mlp),
        ];
        let base_miou = base.suite_miou();
        let mut ok = true;
        let mut parts = vec![format!("default {base_miou:.3}")];
        for (name, edit) in ablations {
            let mut c = cfg.clone();
            edit(&mut c.sbd);
            let (_, s) = train_and_score(&c, &scenes, &encoder)?;
            ok &= s.suite_miou() <= base_miou;
            parts.push(format!("{name} {:.3}", s.suite_miou()));
        }
        Ok((ok, format!("suite mIoU {}", parts.join(", "))))
    }));

    let drop_a = base.agnostic.0 - base.agnostic_para;
    let drop_s = base.sensitive.0 - base.sensitive_para;
    out.push(Outcome {
        id: 10,
        name: IDS[3].1,
        passed: drop_a < 0.10 && drop_s < 0.10,
        detail: format!("mIoU drop agnostic {:+.3}, sensitive {:+.3}", drop_a, drop_s),
        seconds: 0.0,
    });

    out.push(timed(11, IDS[4].1, || {
        let frozen = trained.model.encoder.params.digest() == trained.encoder_digest;
        let mut short = cfg.clone();
        short.train.epochs = 5;
        short.pretrain = Some(PretrainConfig {
            epochs: 5,
            ..PretrainConfig::default()
        });
        let a = Checkpoint::from_model(&train_model(&short, &scenes, None)?.model, &short, seed).to_bytes()?;
        let b = Checkpoint::from_model(&train_model(&short, &scenes, None)?.model, &short, seed).to_bytes()?;
        Ok((
            frozen && a == b,
            format!(
                "encoder digest {} after training; repeated {}-epoch runs {} ({} bytes)",
                if frozen { "unchanged" } else { "CHANGED" },
                short.train.epochs,
                if a == b { "byte-identical" } else { "DIFFER" },
                a.len()
            ),
        ))
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_case_matches_oracle() {
        let c = hand_built_case();
        assert_eq!(count_case(&c), (0.75, 0.5));
        assert_eq!(c.temporal().unwrap(), (0.75, 0.5));
    }

    #[test]
    fn outcome_line_names_criterion() {
        let o = Outcome {
            id: 3,
            name: "causality",
            passed: false,
            detail: "x".into(),
            seconds: 0.25,
        };
        assert!(o.line().starts_with("criterion  3 causality"));
        assert!(o.line().contains("FAIL"));
    }
}
