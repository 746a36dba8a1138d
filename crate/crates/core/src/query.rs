//! Open-vocabulary queries: per-frame relevancy, thresholded masks, lifting
//! to world-space point clouds and temporal localization.

use std::fmt::Write as _;
use std::path::Path;

use crate::camera::{CameraParams, Vec3};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::sbd::{Branch, Sbd, SemanticMap};
use crate::tensor::lft::{self, LftArray};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f32 = 0.6;
const COS_EPS: f64 = 1e-8;

/// A query vector in the compressed space of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct TextQuery {
    pub name: String,
    pub embedding: Vec<f32>,
    pub branch: Branch,
    pub tau: f32,
}

impl TextQuery {
    pub fn new(name: &str, embedding: Vec<f32>, branch: Branch) -> Result<Self> {
        if embedding.len() != branch.dim() {
            return Err(Error::shape("query embedding", &[embedding.len()], &[branch.dim()]));
        }
        Ok(TextQuery {
            name: name.to_string(),
            embedding,
            branch,
            tau: DEFAULT_TAU,
        })
    }
}

/// Per-pixel cosine similarity `h×w` between a semantic map and a query.
pub fn relevancy(map: &SemanticMap, query: &TextQuery) -> Result<Tensor> {
    if map.branch != query.branch {
        return Err(Error::Contract(format!(
            "query for branch {} applied to a {} map",
            query.branch, map.branch
        )));
    }
    let s = map.values.shape();
    let d = s[2];
    if d != query.embedding.len() {
        return Err(Error::shape("relevancy", s, &[query.embedding.len()]));
    }
    let qn = query.embedding.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let out = map
        .values
        .data()
        .chunks(d)
        .map(|px| {
            let dot: f64 = px.iter().zip(&query.embedding).map(|(&a, &b)| a as f64 * b as f64).sum();
            let pn = px.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let c = dot / (pn.max(COS_EPS) * qn.max(COS_EPS));
            c.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Tensor::new(&[s[0], s[1]], out)
}

/// `relevancy ≥ τ`.
pub fn threshold_mask(relevancy: &Tensor, tau: f32) -> Vec<u8> {
    relevancy.data().iter().map(|&r| u8::from(r >= tau)).collect()
}

/// Frames whose maximum relevancy reaches `tau_t`.
pub fn temporal_localize(relevancies: &[Tensor], tau_t: f32) -> Vec<usize> {
    relevancies
        .iter()
        .enumerate()
        .filter(|(_, r)| r.data().iter().any(|&v| v >= tau_t))
        .map(|(t, _)| t)
        .collect()
}

/// Lifts pixel `(u, v)` with camera depth `depth`; `None` if the depth is
/// not positive.
pub fn unproject(u: f64, v: f64, depth: f64, cam: &CameraParams) -> Option<Vec3> {
    cam.unproject(u, v, depth)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[f32; 3]>>,
    pub semantics: Option<Vec<Vec<f32>>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII PLY with float positions and 8-bit colours (mid-grey when the
    /// cloud has none).
    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s += "ply\nformat ascii 1.0\n";
        let _ = writeln!(s, "element vertex {}", self.points.len());
        s += "property float x\nproperty float y\nproperty float z\n";
        s += "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
        let byte = |c: f32| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
        for (i, p) in self.points.iter().enumerate() {
            let c = self.colors.as_ref().map_or([0.5; 3], |cs| cs[i]);
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                p[0] as f32,
                p[1] as f32,
                p[2] as f32,
                byte(c[0]),
                byte(c[1]),
                byte(c[2])
            );
        }
        s
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        fsutil::write_text(path, &self.to_ply())
    }
}

/// One point per masked pixel with positive depth. The `h×w` mask is
/// upsampled to the depth map's `H×W` by nearest neighbour; colours come
/// from `rgb` (`3×H×W`) and semantics from the `h×w×d` map's cell.
pub fn lift_frame(
    mask: &[u8],
    mask_hw: (usize, usize),
    depth: &Tensor,
    cam: &CameraParams,
    rgb: Option<&Tensor>,
    semantics: Option<&SemanticMap>,
) -> Result<PointCloud> {
    let (h, w) = mask_hw;
    if mask.len() != h * w {
        return Err(Error::shape("lift mask", &[mask.len()], &[h, w]));
    }
    let ds = depth.shape();
    let (hh, ww) = (ds[0], ds[1]);
    if let Some(img) = rgb {
        if img.shape() != [3, hh, ww] {
            return Err(Error::shape("lift rgb", img.shape(), &[3, hh, ww]));
        }
    }
    let mut cloud = PointCloud {
        colors: rgb.map(|_| Vec::new()),
        semantics: semantics.map(|_| Vec::new()),
        ..PointCloud::default()
    };
    for v in 0..hh {
        for u in 0..ww {
            let cell = (v * h / hh) * w + u * w / ww;
            if mask[cell] == 0 {
                continue;
            }
            let Some(p) = cam.unproject(u as f64, v as f64, depth.data()[v * ww + u] as f64) else {
                continue;
            };
            cloud.points.push(p);
            if let (Some(cs), Some(img)) = (cloud.colors.as_mut(), rgb) {
                let px = v * ww + u;
                let n = hh * ww;
                cs.push([img.data()[px], img.data()[n + px], img.data()[2 * n + px]]);
            }
            if let (Some(ss), Some(m)) = (cloud.semantics.as_mut(), semantics) {
                let d = m.values.shape()[2];
                ss.push(m.values.data()[cell * d..(cell + 1) * d].to_vec());
            }
        }
    }
    Ok(cloud)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult2D {
    pub relevancy: Tensor,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query4DResult {
    pub frames: Vec<QueryResult2D>,
    /// Lifted matches per frame; empty outside the temporal segment.
    pub clouds: Vec<PointCloud>,
    pub temporal_segment: Vec<usize>,
}

impl Query4DResult {
    /// Writes `query_<name>_f<t>.ply` for every frame, plus each frame's
    /// relevancy map (f32) and mask (u16) as LFT1.
    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        fsutil::create_dir(dir)?;
        for (t, (c, f)) in self.clouds.iter().zip(&self.frames).enumerate() {
            c.write_ply(&dir.join(format!("query_{name}_f{t}.ply")))?;
            lft::write_tensor(&dir.join(format!("relevancy_{name}_f{t}.lft")), &f.relevancy)?;
            let mask = f.mask.iter().map(|&m| u16::from(m)).collect();
            lft::write(&dir.join(format!("mask_{name}_f{t}.lft")), &LftArray::u16(f.relevancy.shape(), mask))?;
        }
        let seg: Vec<String> = self.temporal_segment.iter().map(usize::to_string).collect();
        fsutil::write_text(&dir.join(format!("segment_{name}.txt")), &(seg.join(" ") + "\n"))
    }
}

/// Where depth and cameras come from when lifting.
pub enum Geometry<'a> {
    /// The encoder's depth and camera heads.
    Predicted,
    /// Ground-truth depth and camera per frame.
    Oracle(&'a [(Tensor, CameraParams)]),
}

/// Streams `frames` through the encoder, decodes the query's branch,
/// thresholds relevancy at `query.tau`, localizes at `tau_t` and lifts the
/// matched pixels inside the segment.
pub fn query_4d(
    encoder: &Encoder,
    sbd: &Sbd,
    frames: &[Tensor],
    query: &TextQuery,
    geometry: Geometry<'_>,
    tau_t: f32,
) -> Result<Query4DResult> {
    if frames.is_empty() {
        return Err(Error::Contract("query_4d needs at least one frame".into()));
    }
    if let Geometry::Oracle(g) = &geometry {
        if g.len() != frames.len() {
            return Err(Error::Contract(format!(
                "{} frames but {} oracle geometries",
                frames.len(),
                g.len()
            )));
        }
    }
    let tokens = encoder.encode_video(frames)?;
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut decoded = Vec::with_capacity(frames.len());
    for tok in &tokens {
        let (map, rgb) = sbd.decode(tok, query.branch)?;
        let rel = relevancy(&map, query)?;
        let mask = threshold_mask(&rel, query.tau);
        per_frame.push(QueryResult2D { relevancy: rel, mask });
        decoded.push((map, rgb));
    }
    let rels: Vec<Tensor> = per_frame.iter().map(|r| r.relevancy.clone()).collect();
    let segment = temporal_localize(&rels, tau_t);
    let g = sbd.grid();
    let mut clouds = Vec::with_capacity(frames.len());
    for (t, (res, (map, rgb))) in per_frame.iter().zip(&decoded).enumerate() {
        if !segment.contains(&t) {
            clouds.push(PointCloud::default());
            continue;
        }
        let (depth, cam) = match &geometry {
            Geometry::Oracle(gs) => (gs[t].0.clone(), gs[t].1.clone()),
            Geometry::Predicted => (encoder.depth_head(&tokens[t])?, encoder.camera_head(&tokens[t].camera_token)?),
        };
        let colors = rgb.as_ref().unwrap_or(&frames[t]);
        clouds.push(lift_frame(&res.mask, (g, g), &depth, &cam, Some(colors), Some(map))?);
    }
    Ok(Query4DResult {
        frames: per_frame,
        clouds,
        temporal_segment: segment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::IDENTITY;
    use crate::rng::SeedStreams;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn map(values: Vec<f32>, h: usize, w: usize, branch: Branch) -> SemanticMap {
        SemanticMap {
            values: Tensor::new(&[h, w, branch.dim()], values).unwrap(),
            branch,
        }
    }

    fn cam(fx: f64, cx: f64, t: Vec3) -> CameraParams {
        CameraParams {
            fx,
            fy: fx,
            cx,
            cy: cx,
            rotation: IDENTITY,
            translation: t,
        }
    }

    /// Independent pinhole projection written from the definition.
    fn project_oracle(p: Vec3, c: &CameraParams) -> (f64, f64, f64) {
        let r = c.rotation;
        let pc: Vec<f64> = (0..3)
            .map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + c.translation[i])
            .collect();
        (c.fx * pc[0] / pc[2] + c.cx - 0.5, c.fy * pc[1] / pc[2] + c.cy - 0.5, pc[2])
    }

    #[test]
    fn relevancy_examples() {
        let q = TextQuery::new("q", vec![1.0, 2.0, 3.0], Branch::Agnostic).unwrap();
        let m = map(vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.0], 1, 2, Branch::Agnostic);
        let r = relevancy(&m, &q).unwrap();
        assert!((r.data()[0] - 1.0).abs() < 1e-7);
        let zero = map(vec![0.0; 6], 1, 2, Branch::Agnostic);
        assert!(relevancy(&zero, &q).unwrap().data().iter().all(|v| v.is_finite()));
        let qs = TextQuery::new("q", vec![0.0; 6], Branch::Sensitive).unwrap();
        assert!(relevancy(&m, &qs).is_err());
        assert!(TextQuery::new("q", vec![0.0; 4], Branch::Agnostic).is_err());
    }

    proptest! {
        #[test]
        fn relevancy_scale_invariant(seed in 0u64..500, scale in 0.01f32..100.0) {
            let mut r = SeedStreams::new(seed).stream("rel");
            let vals: Vec<f32> = (0..8 * 8 * 3).map(|_| r.random_range(-1.0f32..1.0)).collect();
            let m = map(vals, 8, 8, Branch::Agnostic);
            let e: Vec<f32> = (0..3).map(|_| r.random_range(-1.0f32..1.0)).collect();
            let q1 = TextQuery::new("a", e.clone(), Branch::Agnostic).unwrap();
            let q2 = TextQuery::new("b", e.iter().map(|x| x * scale).collect(), Branch::Agnostic).unwrap();
            let (a, b) = (relevancy(&m, &q1).unwrap(), relevancy(&m, &q2).unwrap());
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
            prop_assert_eq!(threshold_mask(&a, 0.6), threshold_mask(&b, 0.6));
            prop_assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn mask_monotone_in_tau(seed in 0u64..500, t1 in -1.0f32..1.0, t2 in -1.0f32..1.0) {
            let mut r = SeedStreams::new(seed).stream("tau");
            let rel = Tensor::from_fn(&[6, 6], |_| r.random_range(-1.0f32..1.0));
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let (a, b) = (threshold_mask(&rel, lo), threshold_mask(&rel, hi));
            prop_assert!(a.iter().zip(&b).all(|(x, y)| y <= x));
            let frames = vec![rel.clone(), Tensor::full(&[6, 6], -1.0)];
            let (sa, sb) = (temporal_localize(&frames, lo), temporal_localize(&frames, hi));
            prop_assert!(sb.iter().all(|t| sa.contains(t)));
        }
    }

    #[test]
    fn threshold_endpoints() {
        let rel = Tensor::new(&[1, 3], vec![-1.0, 0.2, 0.9]).unwrap();
        assert_eq!(threshold_mask(&rel, -1.0), vec![1, 1, 1]);
        assert_eq!(threshold_mask(&rel, 0.9f32.next_up()), vec![0, 0, 0]);
        assert_eq!(threshold_mask(&rel, 0.9), vec![0, 0, 1]);
        assert!(temporal_localize(&[Tensor::full(&[2, 2], -0.5)], 0.6).is_empty());
    }

    #[test]
    fn unproject_examples() {
        let c = cam(50.0, 16.0, [0.0; 3]);
        let p = unproject(15.5, 15.5, 2.0, &c).unwrap();
        assert!(p.iter().zip([0.0, 0.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        let t = [0.3, -0.2, 1.0];
        let ct = cam(50.0, 16.0, t);
        let p = unproject(3.0, 7.0, 2.0, &ct).unwrap();
        let pc = [2.0 * (3.5 - 16.0) / 50.0, 2.0 * (7.5 - 16.0) / 50.0, 2.0];
        for i in 0..3 {
            assert!((p[i] - (pc[i] - t[i])).abs() < 1e-12);
        }
        assert!(unproject(1.0, 1.0, 0.0, &c).is_none());
    }

    #[test]
    fn projection_round_trip() {
        let mut r = SeedStreams::new(5).stream("rt");
        for _ in 0..1000 {
            let w = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            let c = CameraParams {
                fx: r.random_range(20.0..200.0),
                fy: r.random_range(20.0..200.0),
                cx: r.random_range(0.0..64.0),
                cy: r.random_range(0.0..64.0),
                rotation: crate::camera::rodrigues(&w),
                translation: [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
            };
            let (u, v, d) = (r.random_range(0.0..64.0), r.random_range(0.0..64.0), r.random_range(0.1..20.0));
            let p = unproject(u, v, d, &c).unwrap();
            let (u2, v2, d2) = project_oracle(p, &c);
            assert!((u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6 && (d - d2).abs() < 1e-6);
        }
    }

    #[test]
    fn lift_examples() {
        let c = cam(4.0, 2.0, [0.0; 3]);
        let depth = Tensor::full(&[4, 4], 3.0);
        let empty = lift_frame(&[0; 4], (2, 2), &depth, &c, None, None).unwrap();
        assert!(empty.is_empty());
        let full = lift_frame(&[1; 4], (2, 2), &depth, &c, None, None).unwrap();
        assert_eq!(full.len(), 16);
        assert!(full.points.iter().all(|p| (p[2] - 3.0).abs() < 1e-12));
        let xs: std::collections::BTreeSet<i64> = full.points.iter().map(|p| (p[0] * 1e6).round() as i64).collect();
        assert_eq!(xs.len(), 4);
    }

    #[test]
    fn lift_count_matches_oracle() {
        let mut r = SeedStreams::new(6).stream("lift");
        for _ in 0..20 {
            let mask: Vec<u8> = (0..16).map(|_| r.random_range(0..2u8)).collect();
            let depth = Tensor::from_fn(&[8, 8], |_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.5f32..4.0) });
            let rgb = Tensor::full(&[3, 8, 8], 0.25);
            let sem = map(vec![0.5; 4 * 4 * 3], 4, 4, Branch::Agnostic);
            let cloud = lift_frame(&mask, (4, 4), &depth, &cam(8.0, 4.0, [0.0; 3]), Some(&rgb), Some(&sem)).unwrap();
            let mut expected = 0;
            for v in 0..8 {
                for u in 0..8 {
                    if mask[(v / 2) * 4 + u / 2] == 1 && depth.data()[v * 8 + u] > 0.0 {
                        expected += 1;
                    }
                }
            }
            assert_eq!(cloud.len(), expected);
            assert_eq!(cloud.colors.as_ref().unwrap().len(), expected);
            assert_eq!(cloud.semantics.as_ref().unwrap().len(), expected);
        }
    }

    #[test]
    fn ply_layout() {
        let c = PointCloud {
            points: vec![[1.0, 2.0, 3.0]],
            colors: Some(vec![[1.0, 0.0, 0.5]]),
            semantics: None,
        };
        let s = c.to_ply();
        assert!(s.starts_with("ply\nformat ascii 1.0\nelement vertex 1\n"));
        assert!(s.ends_with("end_header\n1 2 3 255 0 128\n"));
    }
}
