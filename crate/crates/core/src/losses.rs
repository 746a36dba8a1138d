//! Semantic, RGB and joint objectives.
//!
//! All norms are means over the participating elements: the L1 term of the
//! semantic loss averages `|Ŝ − S|` over channels and then over pixels, and
//! the RGB terms average over every channel and pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sbd::SemanticMap;
use crate::supervision::SupervisionMap;
use crate::tensor::{Axes, ReduceKind, Real, Tape, Tensor, Var};

pub const COS_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda_img: f32,
    pub alpha: f32,
    pub beta: f32,
    /// Restrict the semantic loss to pixels covered by some mask.
    pub masked: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.2,
            lambda2: 0.01,
            lambda_img: 0.5,
            alpha: 1.0,
            beta: 1.0,
            masked: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_img) {
            return Err(Error::Config(format!("lambda_img {} is outside [0, 1]", self.lambda_img)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `λ1·L1 + λ2·(1 − cos)` between `pred` and `target` (both `n×d`), each
/// term averaged over covered pixels when masked, over all pixels
/// otherwise.
pub fn semantic_loss_on<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    coverage: &[u8],
    w: &LossWeights,
) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred).to_vec(), tape.shape(target).to_vec());
    if ps != ts || ps.len() != 2 {
        return Err(Error::shape("semantic_loss", &ps, &ts));
    }
    let n = ps[0];
    if coverage.len() != n {
        return Err(Error::shape("semantic_loss coverage", &[coverage.len()], &[n]));
    }
    let count = if w.masked {
        coverage.iter().filter(|&&c| c != 0).count()
    } else {
        n
    };
    if count == 0 {
        return tape.constant(&[1], vec![0.0]);
    }
    let weights: Vec<f32> = (0..n)
        .map(|i| if !w.masked || coverage[i] != 0 { 1.0 / count as f32 } else { 0.0 })
        .collect();
    let weights = tape.constant(&[n], weights)?;

    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let l1_px = tape.reduce(ReduceKind::Mean, abs, Axes::Last);
    let l1_px = tape.reshape(l1_px, &[n])?;
    let l1 = tape.mul(l1_px, weights)?;
    let l1 = tape.sum(l1);

    let cos = tape.cosine_rows(pred, target, COS_EPS)?;
    let cos = tape.reshape(cos, &[n])?;
    let one = tape.constant(&[1], vec![1.0])?;
    let dis = tape.sub(one, cos)?;
    let dis = tape.mul(dis, weights)?;
    let dis = tape.sum(dis);

    let a = tape.scale(l1, w.lambda1);
    let b = tape.scale(dis, w.lambda2);
    tape.add(a, b)
}

/// `λ_img·mean|Î − I| + (1 − λ_img)·mean (Î − I)²`.
pub fn rgb_loss_on<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, w: &LossWeights) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let l1 = tape.mean(abs);
    let sq = tape.square(diff);
    let l2 = tape.mean(sq);
    let a = tape.scale(l1, w.lambda_img);
    let b = tape.scale(l2, 1.0 - w.lambda_img);
    tape.add(a, b)
}

/// `α·Σ L_lang + β·Σ L_rgb` over a sequence.
pub fn joint_loss_on<T: Real>(tape: &mut Tape<T>, lang: &[Var], rgb: &[Var], w: &LossWeights) -> Result<Var> {
    let sum = |tape: &mut Tape<T>, xs: &[Var]| -> Result<Var> {
        let mut acc = tape.constant(&[1], vec![0.0])?;
        for &x in xs {
            acc = tape.add(acc, x)?;
        }
        Ok(acc)
    };
    let l = sum(tape, lang)?;
    let r = sum(tape, rgb)?;
    let l = tape.scale(l, w.alpha);
    let r = tape.scale(r, w.beta);
    tape.add(l, r)
}

fn map_rows(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    t.reshape(&[s[0] * s[1], s[2]])
}

pub fn semantic_loss(pred: &SemanticMap, target: &SupervisionMap, w: &LossWeights) -> Result<f64> {
    if pred.values.shape() != target.values.shape() {
        return Err(Error::shape("semantic_loss", pred.values.shape(), target.values.shape()));
    }
    let mut tape = Tape::<f64>::default();
    let p = tape.leaf(&map_rows(&pred.values)?);
    let t = tape.leaf(&map_rows(&target.values)?);
    let l = semantic_loss_on(&mut tape, p, t, &target.coverage, w)?;
    Ok(tape.scalar_f64(l))
}

pub fn rgb_loss(pred: &Tensor, target: &Tensor, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::<f64>::default();
    let p = tape.leaf(pred);
    let t = tape.leaf(target);
    let l = rgb_loss_on(&mut tape, p, t, w)?;
    Ok(tape.scalar_f64(l))
}

/// `α·Σ lang + β·Σ rgb` over precomputed per-frame losses.
pub fn joint_loss(lang: &[f64], rgb: &[f64], w: &LossWeights) -> f64 {
    w.alpha as f64 * lang.iter().sum::<f64>() + w.beta as f64 * rgb.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::rng::SeedStreams;
    use crate::sbd::Branch;
    use crate::tensor::ParamStore;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn smap(values: Vec<f32>, n: usize, d: usize) -> SemanticMap {
        SemanticMap {
            values: Tensor::new(&[1, n, d], values).unwrap(),
            branch: Branch::Agnostic,
        }
    }

    fn target(values: Vec<f32>, n: usize, d: usize, coverage: Vec<u8>) -> SupervisionMap {
        SupervisionMap {
            values: Tensor::new(&[1, n, d], values).unwrap(),
            coverage,
        }
    }

    /// Direct per-pixel evaluation of the semantic loss.
    fn semantic_oracle(p: &[f32], t: &[f32], cov: &[u8], d: usize, w: &LossWeights) -> f64 {
        let (mut l1, mut cs, mut n) = (0.0, 0.0, 0usize);
        for (i, (pp, tt)) in p.chunks(d).zip(t.chunks(d)).enumerate() {
            if w.masked && cov[i] == 0 {
                continue;
            }
            n += 1;
            l1 += pp.iter().zip(tt).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / d as f64;
            let dot: f64 = pp.iter().zip(tt).map(|(a, b)| *a as f64 * *b as f64).sum();
            let na = pp.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt().max(1e-8);
            let nb = tt.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt().max(1e-8);
            cs += 1.0 - dot / (na * nb);
        }
        if n == 0 {
            return 0.0;
        }
        w.lambda1 as f64 * l1 / n as f64 + w.lambda2 as f64 * cs / n as f64
    }

    #[test]
    fn semantic_examples() {
        let w = LossWeights::default();
        let v = vec![0.3, -0.4, 1.0, 2.0];
        assert!(semantic_loss(&smap(v.clone(), 2, 2), &target(v, 2, 2, vec![1, 1]), &w).unwrap().abs() < 1e-7);
        let l = semantic_loss(&smap(vec![1.0, 0.0], 1, 2), &target(vec![0.0, 1.0], 1, 2, vec![1]), &w).unwrap();
        assert!((l - 0.21).abs() < 1e-7, "{l}");
        let l = semantic_loss(&smap(vec![5.0, -3.0], 1, 2), &target(vec![0.0, 1.0], 1, 2, vec![0]), &w).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn rgb_examples() {
        let w = LossWeights::default();
        let t = Tensor::full(&[3, 4, 4], 0.5);
        assert_eq!(rgb_loss(&t, &t, &w).unwrap(), 0.0);
        let p = Tensor::full(&[3, 4, 4], 0.6);
        assert!((rgb_loss(&p, &t, &w).unwrap() - 0.055).abs() < 1e-7);
        let pure = LossWeights {
            lambda_img: 1.0,
            ..w
        };
        let q = Tensor::from_fn(&[3, 4, 4], |i| (i % 7) as f32 / 7.0);
        let oracle: f64 = q.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / 48.0;
        assert!((rgb_loss(&q, &t, &pure).unwrap() - oracle).abs() < 1e-7);
    }

    #[test]
    fn joint_examples() {
        let w = LossWeights {
            beta: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(joint_loss(&[0.5, 0.25], &[3.0], &w), 0.75);
        let z = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..w.clone()
        };
        assert_eq!(joint_loss(&[1.0], &[1.0], &z), 0.0);
        let lang = [0.3, 0.7];
        let rgb = [0.1];
        let w1 = LossWeights::default();
        let w2 = LossWeights {
            alpha: 2.0,
            ..w1.clone()
        };
        assert!((joint_loss(&lang, &rgb, &w2) - joint_loss(&lang, &rgb, &w1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn joint_on_tape_matches_values() {
        let w = LossWeights {
            alpha: 0.7,
            beta: 0.4,
            ..LossWeights::default()
        };
        let mut tape = Tape::<f64>::default();
        let a = tape.constant(&[1], vec![0.5]).unwrap();
        let b = tape.constant(&[1], vec![0.25]).unwrap();
        let c = tape.constant(&[1], vec![2.0]).unwrap();
        let j = joint_loss_on(&mut tape, &[a, b], &[c], &w).unwrap();
        assert!((tape.scalar_f64(j) - joint_loss(&[0.5, 0.25], &[2.0], &w)).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn semantic_matches_oracle(seed in 0u64..300, masked in any::<bool>()) {
            let mut r = SeedStreams::new(seed).stream("sem");
            let (n, d) = (10, 3);
            let p: Vec<f32> = (0..n * d).map(|_| r.random_range(-2.0f32..2.0)).collect();
            let t: Vec<f32> = (0..n * d).map(|_| r.random_range(-2.0f32..2.0)).collect();
            let cov: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
            let w = LossWeights { masked, ..LossWeights::default() };
            let l = semantic_loss(&smap(p.clone(), n, d), &target(t.clone(), n, d, cov.clone()), &w).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - semantic_oracle(&p, &t, &cov, d, &w)).abs() < 1e-6);
        }

        #[test]
        fn cosine_term_scale_invariant_and_mask_ignores_outside(seed in 0u64..300, s in 0.01f32..50.0) {
            let mut r = SeedStreams::new(seed).stream("inv");
            let (n, d) = (6, 6);
            let p: Vec<f32> = (0..n * d).map(|_| r.random_range(-2.0f32..2.0)).collect();
            let t: Vec<f32> = (0..n * d).map(|_| r.random_range(-2.0f32..2.0)).collect();
            let cov = vec![1, 0, 1, 1, 0, 1];
            let cos_only = LossWeights { lambda1: 0.0, ..LossWeights::default() };
            let tg = target(t.clone(), n, d, cov.clone());
            let a = semantic_loss(&smap(p.clone(), n, d), &tg, &cos_only).unwrap();
            let scaled: Vec<f32> = p.iter().map(|x| x * s).collect();
            let b = semantic_loss(&smap(scaled, n, d), &tg, &cos_only).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
            let mut outside = p.clone();
            for px in [1usize, 4] {
                for c in 0..d {
                    outside[px * d + c] = r.random_range(-100.0f32..100.0);
                }
            }
            let w = LossWeights::default();
            let l0 = semantic_loss(&smap(p, n, d), &tg, &w).unwrap();
            let l1 = semantic_loss(&smap(outside, n, d), &tg, &w).unwrap();
            prop_assert_eq!(l0, l1);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let streams = SeedStreams::new(12);
        let mut r = streams.stream("init");
        let (n, d) = (16, 6);
        let mut store = ParamStore::new();
        let pid = store.add("pred", Tensor::randn(&[n, d], 1.0, &mut r));
        let rid = store.add("rgb", Tensor::from_fn(&[3, 8, 8], |_| r.random_range(0.05f32..0.95)));
        let target_sem = Tensor::randn(&[n, d], 1.0, &mut r);
        // Keep every residual well away from the |x| kink.
        let offsets = |r: &mut crate::rng::Rng, n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| r.random_range(0.05f32..0.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect()
        };
        let off = offsets(&mut r, 3 * 64);
        let target_rgb = Tensor::from_fn(&[3, 8, 8], |i| store.get(rid).data()[i] + off[i]);
        let off = offsets(&mut r, n * d);
        let target_sem = Tensor::from_fn(&[n, d], |i| 0.5 * target_sem.data()[i] + store.get(pid).data()[i] + off[i]);
        let cov: Vec<u8> = (0..n).map(|i| u8::from(i % 3 != 0)).collect();
        let w = LossWeights {
            alpha: 0.8,
            beta: 1.3,
            ..LossWeights::default()
        };
        let report = check_params(
            &mut store,
            |tape, p| {
                let ts = tape.leaf(&target_sem);
                let tr = tape.leaf(&target_rgb);
                let s = semantic_loss_on(tape, p.get(pid), ts, &cov, &w)?;
                let g = rgb_loss_on(tape, p.get(rid), tr, &w)?;
                joint_loss_on(tape, &[s], &[g], &w)
            },
            150,
            1e-3,
            1e-10,
            &mut streams.stream("fd"),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
