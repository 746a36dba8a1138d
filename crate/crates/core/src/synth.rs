//! Deterministic synthetic 4D scenes: flat billboard objects in front of a
//! backdrop plane, seen by an orbiting pinhole camera.
//!
//! Every pixel is ray-cast, so images, depth and id masks agree exactly with
//! the camera. Objects may switch colour (their "state") partway through the
//! clip. Embeddings are fabricated: one orthonormal vector per object for
//! the time-agnostic kind and one per (object, state) for the time-sensitive
//! kind. The backdrop is an object of its own so supervision covers every
//! pixel; queries are only generated for foreground objects.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraParams, Vec3};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::{Rng, SeedStreams};
use crate::sbd::Branch;
use crate::supervision::{EmbeddingKind, EmbeddingTable, MaskSet};
use crate::tensor::lft::{self, LftArray};
use crate::tensor::Tensor;

/// Cosine between a paraphrase query and the query it rewrites.
pub const PARAPHRASE_COSINE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Disk radius in both entries, or rectangle half-width and half-height.
    pub half_size: [f64; 2],
    /// Centre at frame 0, world metres.
    pub center: Vec3,
    /// Centre displacement per frame.
    pub velocity: Vec3,
    /// Rotation of the billboard about the world y axis, radians. At 0 it
    /// faces +z.
    pub yaw: f64,
    /// RGB per state.
    pub colors: Vec<[f32; 3]>,
    /// State index per frame.
    pub schedule: Vec<usize>,
}

impl ObjectSpec {
    pub fn center_at(&self, t: usize) -> Vec3 {
        let k = t as f64;
        [
            self.center[0] + k * self.velocity[0],
            self.center[1] + k * self.velocity[1],
            self.center[2] + k * self.velocity[2],
        ]
    }

    pub fn num_states(&self) -> usize {
        self.colors.len()
    }

    /// In-plane axes and normal.
    pub fn frame(&self) -> (Vec3, Vec3, Vec3) {
        let (s, c) = self.yaw.sin_cos();
        ([c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c])
    }

    /// Whether in-plane coordinates fall inside the shape.
    pub fn contains(&self, a: f64, b: f64) -> bool {
        match self.shape {
            Shape::Disk => a * a + b * b <= self.half_size[0] * self.half_size[0],
            Shape::Rectangle => a.abs() <= self.half_size[0] && b.abs() <= self.half_size[1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPath {
    pub radius: f64,
    pub height: f64,
    pub start_deg: f64,
    /// Orbit step per frame; 0 gives a static camera.
    pub step_deg: f64,
    pub focal: f64,
}

impl CameraPath {
    /// Looks at the world origin from a point on a circle about the y axis.
    pub fn camera_at(&self, t: usize, resolution: usize) -> CameraParams {
        let a = (self.start_deg + self.step_deg * t as f64).to_radians();
        let eye = [self.radius * a.sin(), self.height, self.radius * a.cos()];
        let c = resolution as f64 / 2.0;
        CameraParams::look_at(self.focal, self.focal, c, c, eye, [0.0; 3], [0.0, 1.0, 0.0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub resolution: usize,
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
    /// The backdrop is the plane `z = backdrop_z`, facing +z.
    pub backdrop_z: f64,
    pub backdrop_color: [f32; 3],
    pub camera: CameraPath,
    pub seed: u64,
    /// Std of Gaussian noise added to each per-frame embedding before
    /// renormalising; 0 keeps them exactly orthonormal.
    pub jitter: f64,
}

impl SceneSpec {
    /// Object count including the backdrop; the backdrop has the last id.
    pub fn num_ids(&self) -> usize {
        self.objects.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("scene {}: {m}", self.name)));
        if self.frames < 2 {
            return bad(format!("needs at least 2 frames, got {}", self.frames));
        }
        if self.resolution == 0 || self.camera.focal <= 0.0 {
            return bad("resolution and focal length must be positive".into());
        }
        let n = self.resolution as f64;
        for t in 0..self.frames {
            let cam = self.camera.camera_at(t, self.resolution);
            let (o, d) = cam.ray(n / 2.0, n / 2.0);
            if d[2] >= 0.0 || o[2] <= self.backdrop_z {
                return bad(format!("frame {t}: camera does not face the backdrop"));
            }
            for (i, obj) in self.objects.iter().enumerate() {
                if obj.schedule.len() != self.frames {
                    return bad(format!("object {i}: schedule length {} != frames", obj.schedule.len()));
                }
                if obj.schedule.iter().any(|&s| s >= obj.colors.len()) {
                    return bad(format!("object {i}: schedule names a state without a colour"));
                }
                let c = obj.center_at(t);
                if c[2] <= self.backdrop_z {
                    return bad(format!("object {i} is behind the backdrop at frame {t}"));
                }
                let (a, b, _) = obj.frame();
                let r = obj.half_size[0].max(obj.half_size[1]);
                for (sa, sb) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                    let corner = [
                        c[0] + r * (sa * a[0] + sb * b[0]),
                        c[1] + r * (sa * a[1] + sb * b[1]),
                        c[2] + r * (sa * a[2] + sb * b[2]),
                    ];
                    match cam.project(&corner) {
                        Some((u, v, _)) if u >= 0.0 && v >= 0.0 && u < n - 1.0 && v < n - 1.0 => {}
                        _ => return bad(format!("object {i} leaves the view at frame {t}")),
                    }
                }
            }
        }
        Ok(())
    }

    /// Frames where object `i` is in `state`.
    pub fn segment(&self, object: usize, state: usize) -> Vec<usize> {
        (0..self.frames)
            .filter(|&t| self.objects[object].schedule[t] == state)
            .collect()
    }

    /// One of the default benchmark scenes: three billboards (disks and
    /// rectangles) at random depths, the first two switching colour at
    /// `T/2`, under a slow orbit.
    pub fn random(name: &str, resolution: usize, frames: usize, seed: u64) -> SceneSpec {
        let mut r = SeedStreams::new(seed).stream("scene/layout");
        // A state change always moves the dominant channel, so toggles are
        // visible in the images.
        let color = |r: &mut Rng, avoid: Option<usize>| -> ([f32; 3], usize) {
            let mut c = [0.0f32; 3];
            let hi = match avoid {
                Some(a) => (a + r.random_range(1..3)) % 3,
                None => r.random_range(0..3),
            };
            for (k, v) in c.iter_mut().enumerate() {
                *v = if k == hi { r.random_range(0.75..0.95) } else { r.random_range(0.05..0.55) };
            }
            (c, hi)
        };
        // Two objects above, one below, so each gets a few token cells.
        let mut slots = [[-0.95f64, 0.6], [0.95, 0.6], [0.0, -0.65]];
        for i in (1..3).rev() {
            let j = r.random_range(0..=i);
            slots.swap(i, j);
        }
        let objects = (0..3)
            .map(|i| {
                let shape = if r.random_bool(0.5) { Shape::Disk } else { Shape::Rectangle };
                let half_size = match shape {
                    Shape::Disk => {
                        let s = r.random_range(0.62..0.75);
                        [s, s]
                    }
                    Shape::Rectangle => [r.random_range(0.55..0.7), r.random_range(0.6..0.75)],
                };
                let states = if i < 2 { 2 } else { 1 };
                let mut colors = Vec::with_capacity(states);
                let mut prev = None;
                for _ in 0..states {
                    let (c, hi) = color(&mut r, prev);
                    colors.push(c);
                    prev = Some(hi);
                }
                let schedule = (0..frames)
                    .map(|t| if states == 2 && t >= frames / 2 { 1 } else { 0 })
                    .collect();
                ObjectSpec {
                    shape,
                    half_size,
                    center: [
                        slots[i][0] + r.random_range(-0.08..0.08),
                        slots[i][1] + r.random_range(-0.08..0.08),
                        r.random_range(-0.3..0.3),
                    ],
                    velocity: [r.random_range(-0.012..0.012), r.random_range(-0.012..0.012), 0.0],
                    yaw: r.random_range(-0.25..0.25),
                    colors,
                    schedule,
                }
            })
            .collect();
        SceneSpec {
            name: name.to_string(),
            resolution,
            frames,
            objects,
            backdrop_z: -1.5,
            backdrop_color: color(&mut r, None).0,
            camera: CameraPath {
                radius: r.random_range(4.6..5.0),
                height: r.random_range(0.1..0.4),
                start_deg: r.random_range(-5.0..5.0),
                step_deg: r.random_range(0.8..1.5),
                focal: resolution as f64,
            },
            seed,
            jitter: 0.0,
        }
    }
}

/// The default multi-scene suite: four 64×64, 8-frame scenes.
pub fn default_suite(seed: u64) -> Vec<SceneSpec> {
    (0..4)
        .map(|i| SceneSpec::random(&format!("scene{i}"), 64, 8, SeedStreams::new(seed).seed_for(&format!("scene{i}"))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `3×H×W` in [0, 1].
    pub image: Tensor,
    /// `H×W` camera-frame depth.
    pub depth: Tensor,
    /// 0 = nothing hit, `i + 1` = object `i` (the backdrop is the last id).
    pub ids: Vec<u16>,
    pub camera: CameraParams,
}

/// Nearest surface along the ray through pixel `(u, v)`: object index
/// (backdrop = `objects.len()`) and camera depth.
pub fn cast(spec: &SceneSpec, t: usize, cam: &CameraParams, u: f64, v: f64) -> Option<(usize, f64)> {
    let (o, d) = cam.ray(u, v);
    let mut best: Option<(usize, f64)> = None;
    for (i, obj) in spec.objects.iter().enumerate() {
        let c = obj.center_at(t);
        let (a, b, n) = obj.frame();
        let denom = camera::dot(&n, &d);
        if denom.abs() < 1e-12 {
            continue;
        }
        let s = camera::dot(&n, &[c[0] - o[0], c[1] - o[1], c[2] - o[2]]) / denom;
        if s <= 0.0 || best.is_some_and(|(_, bs)| bs <= s) {
            continue;
        }
        let q = [o[0] + s * d[0] - c[0], o[1] + s * d[1] - c[1], o[2] + s * d[2] - c[2]];
        if obj.contains(camera::dot(&a, &q), camera::dot(&b, &q)) {
            best = Some((i, s));
        }
    }
    if best.is_none() && d[2] < 0.0 {
        let s = (spec.backdrop_z - o[2]) / d[2];
        if s > 0.0 {
            best = Some((spec.objects.len(), s));
        }
    }
    best
}

pub fn render(spec: &SceneSpec, t: usize) -> Frame {
    let n = spec.resolution;
    let cam = spec.camera.camera_at(t, n);
    let mut image = vec![0.0f32; 3 * n * n];
    let mut depth = vec![0.0f32; n * n];
    let mut ids = vec![0u16; n * n];
    for v in 0..n {
        for u in 0..n {
            let px = v * n + u;
            let Some((i, s)) = cast(spec, t, &cam, u as f64, v as f64) else {
                continue;
            };
            let color = if i == spec.objects.len() {
                spec.backdrop_color
            } else {
                let o = &spec.objects[i];
                o.colors[o.schedule[t]]
            };
            for c in 0..3 {
                image[c * n * n + px] = color[c];
            }
            depth[px] = s as f32;
            ids[px] = (i + 1) as u16;
        }
    }
    Frame {
        image: Tensor::new(&[3, n, n], image).expect("image shape"),
        depth: Tensor::new(&[n, n], depth).expect("depth shape"),
        ids,
        camera: cam,
    }
}

/// `count` orthonormal vectors of length `dim` by Gram-Schmidt on Gaussian
/// draws.
pub fn orthonormal(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f32>> {
    assert!(count <= dim, "cannot fit {count} orthonormal vectors in {dim} dims");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}

/// Unit vector at exactly `cosine` to `v`, rotated towards a random
/// orthogonal direction.
pub fn paraphrase(v: &[f32], cosine: f64, rng: &mut Rng) -> Vec<f32> {
    let vn: Vec<f64> = {
        let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        v.iter().map(|&x| x as f64 / n).collect()
    };
    let mut w: Vec<f64> = (0..v.len()).map(|_| rng.sample(StandardNormal)).collect();
    let p: f64 = w.iter().zip(&vn).map(|(a, b)| a * b).sum();
    w.iter_mut().zip(&vn).for_each(|(a, b)| *a -= p * b);
    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = (1.0 - cosine * cosine).sqrt();
    vn.iter()
        .zip(&w)
        .map(|(a, b)| (cosine * a + s * b / wn) as f32)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub name: String,
    pub branch: Branch,
    /// Object index in the scene (ids are `object + 1`).
    pub object: usize,
    /// Ground-truth temporal segment.
    pub segment: Vec<usize>,
    /// Name of the query this one paraphrases.
    pub paraphrase_of: Option<String>,
    /// Full-dimensional text embedding.
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

impl Query {
    /// Ground-truth mask of frame `t`: the object's pixels inside the
    /// segment, empty outside it.
    pub fn gt_mask(&self, ids: &[u16], t: usize) -> Vec<u8> {
        let inside = self.segment.contains(&t);
        ids.iter()
            .map(|&id| u8::from(inside && id as usize == self.object + 1))
            .collect()
    }

    pub fn to_text(&self, embedding_file: &str) -> String {
        let seg: Vec<String> = self.segment.iter().map(usize::to_string).collect();
        let mut s = format!(
            "name {}\nbranch {}\nobject {}\nembedding {embedding_file}\nmasks masks\nsegment {}\n",
            self.name,
            self.branch,
            self.object,
            seg.join(" ")
        );
        if let Some(p) = &self.paraphrase_of {
            s.push_str(&format!("paraphrase_of {p}\n"));
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output; returns the query (without
    /// its embedding) and the embedding file it names.
    pub fn from_text(text: &str) -> Result<(Query, String)> {
        let mut q = Query {
            name: String::new(),
            branch: Branch::Agnostic,
            object: 0,
            segment: Vec::new(),
            paraphrase_of: None,
            embedding: Vec::new(),
        };
        let mut file = None;
        let mut have = (false, false, false);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let rest = rest.trim();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::Format(format!("query: bad number `{s}` for {key}: {e}")))
            };
            match key {
                "name" => {
                    q.name = rest.to_string();
                    have.0 = true;
                }
                "branch" => {
                    q.branch = Branch::parse(rest)?;
                    have.1 = true;
                }
                "object" => {
                    q.object = num(rest)?;
                    have.2 = true;
                }
                "embedding" => file = Some(rest.to_string()),
                "masks" => {}
                "segment" => q.segment = rest.split_whitespace().map(num).collect::<Result<_>>()?,
                "paraphrase_of" => q.paraphrase_of = Some(rest.to_string()),
                _ => return Err(Error::Format(format!("query: unknown key `{key}`"))),
            }
        }
        let file = file.ok_or_else(|| Error::Format("query: missing embedding".into()))?;
        if !(have.0 && have.1 && have.2) {
            return Err(Error::Format("query: missing name, branch or object".into()));
        }
        Ok((q, file))
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub frames: Vec<Frame>,
    pub clip: EmbeddingTable,
    pub dynamic: EmbeddingTable,
    pub queries: Vec<Query>,
}

impl Scene {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn masks(&self) -> Result<MaskSet> {
        let ids: Vec<Vec<u16>> = self.frames.iter().map(|f| f.ids.clone()).collect();
        let n = self.spec.resolution;
        MaskSet::from_id_maps(&ids, n, n, self.spec.num_ids())
    }

    pub fn table(&self, kind: EmbeddingKind) -> &EmbeddingTable {
        match kind {
            EmbeddingKind::ClipStatic => &self.clip,
            EmbeddingKind::Dynamic => &self.dynamic,
        }
    }

    pub fn query(&self, name: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.name == name)
    }
}

fn jittered(base: &[f32], sigma: f64, rng: &mut Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let v: Vec<f64> = base
        .iter()
        .map(|&x| x as f64 + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let frames = (0..spec.frames).map(|t| render(spec, t)).collect();
    let ids = spec.num_ids();
    let backdrop = spec.objects.len();

    let clip_base = orthonormal(ids, EmbeddingKind::ClipStatic.full_dim(), &mut streams.stream("emb/clip_static"));
    // One dynamic vector per (object, state); the backdrop has a single state.
    let mut state_index = Vec::new();
    for (i, o) in spec.objects.iter().enumerate() {
        for s in 0..o.num_states() {
            state_index.push((i, s));
        }
    }
    state_index.push((backdrop, 0));
    let dyn_base = orthonormal(
        state_index.len(),
        EmbeddingKind::Dynamic.full_dim(),
        &mut streams.stream("emb/dynamic"),
    );
    let dyn_of = |i: usize, s: usize| state_index.iter().position(|&k| k == (i, s)).expect("state listed");
    let state_at = |i: usize, t: usize| if i == backdrop { 0 } else { spec.objects[i].schedule[t] };

    let mut jr = streams.stream("emb/jitter");
    let clip = EmbeddingTable {
        kind: EmbeddingKind::ClipStatic,
        vectors: (0..ids)
            .map(|i| (0..spec.frames).map(|_| jittered(&clip_base[i], spec.jitter, &mut jr)).collect())
            .collect(),
    };
    let dynamic = EmbeddingTable {
        kind: EmbeddingKind::Dynamic,
        vectors: (0..ids)
            .map(|i| {
                (0..spec.frames)
                    .map(|t| jittered(&dyn_base[dyn_of(i, state_at(i, t))], spec.jitter, &mut jr))
                    .collect()
            })
            .collect(),
    };

    let mut pr = streams.stream("queries/paraphrase");
    let mut queries = Vec::new();
    for (i, o) in spec.objects.iter().enumerate() {
        queries.push(Query {
            name: format!("obj{i}"),
            branch: Branch::Agnostic,
            object: i,
            segment: (0..spec.frames).collect(),
            paraphrase_of: None,
            embedding: clip_base[i].clone(),
        });
        for s in 0..o.num_states() {
            queries.push(Query {
                name: format!("obj{i}_s{s}"),
                branch: Branch::Sensitive,
                object: i,
                segment: spec.segment(i, s),
                paraphrase_of: None,
                embedding: dyn_base[dyn_of(i, s)].clone(),
            });
        }
    }
    let paraphrases: Vec<Query> = queries
        .iter()
        .map(|q| Query {
            name: format!("{}_para", q.name),
            paraphrase_of: Some(q.name.clone()),
            embedding: paraphrase(&q.embedding, PARAPHRASE_COSINE, &mut pr),
            ..q.clone()
        })
        .collect();
    queries.extend(paraphrases);

    Ok(Scene {
        spec: spec.clone(),
        frames,
        clip,
        dynamic,
        queries,
    })
}

fn frame_file(dir: &Path, t: usize, ext: &str) -> PathBuf {
    dir.join(format!("f{t:03}.{ext}"))
}

/// Writes `root/scene/<name>/{frames,depth,masks,cams,emb,queries}`.
pub fn write_scene(root: &Path, scene: &Scene) -> Result<PathBuf> {
    let dir = root.join("scene").join(scene.name());
    let n = scene.spec.resolution;
    for sub in ["frames", "depth", "masks", "cams", "queries"] {
        fsutil::create_dir(&dir.join(sub))?;
    }
    fsutil::write_text(&dir.join("spec.json"), &(serde_json::to_string_pretty(&scene.spec)? + "\n"))?;
    for (t, f) in scene.frames.iter().enumerate() {
        lft::write_tensor(&frame_file(&dir.join("frames"), t, "lft"), &f.image)?;
        lft::write_tensor(&frame_file(&dir.join("depth"), t, "lft"), &f.depth)?;
        lft::write(&frame_file(&dir.join("masks"), t, "lft"), &LftArray::u16(&[n, n], f.ids.clone()))?;
        fsutil::write_text(&frame_file(&dir.join("cams"), t, "txt"), &f.camera.to_text())?;
    }
    for table in [&scene.clip, &scene.dynamic] {
        for (i, per_obj) in table.vectors.iter().enumerate() {
            let odir = dir.join("emb").join(table.kind.name()).join(i.to_string());
            fsutil::create_dir(&odir)?;
            for (t, v) in per_obj.iter().enumerate() {
                lft::write(&odir.join(format!("{t}.lft")), &LftArray::f32(&[v.len()], v.clone()))?;
            }
        }
    }
    for q in &scene.queries {
        let emb = format!("queries/{}.lft", q.name);
        lft::write(&dir.join(&emb), &LftArray::f32(&[q.embedding.len()], q.embedding.clone()))?;
        fsutil::write_text(&dir.join("queries").join(format!("{}.txt", q.name)), &q.to_text(&emb))?;
    }
    Ok(dir)
}

pub fn write_bundle(root: &Path, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        write_scene(root, s)?;
    }
    Ok(())
}

fn read_vector(path: &Path) -> Result<Vec<f32>> {
    Ok(lft::read_tensor(path)?.into_data())
}

/// Reads a scene directory written by [`write_scene`].
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let spec: SceneSpec = serde_json::from_str(&fsutil::read_text(&dir.join("spec.json"))?)?;
    let n = spec.resolution;
    let frames = (0..spec.frames)
        .map(|t| {
            let (shape, ids) = lft::read(&frame_file(&dir.join("masks"), t, "lft"))?.into_u16()?;
            if shape != [n, n] {
                return Err(Error::shape("mask file", &shape, &[n, n]));
            }
            Ok(Frame {
                image: lft::read_tensor(&frame_file(&dir.join("frames"), t, "lft"))?,
                depth: lft::read_tensor(&frame_file(&dir.join("depth"), t, "lft"))?,
                ids,
                camera: CameraParams::from_text(&fsutil::read_text(&frame_file(&dir.join("cams"), t, "txt"))?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let read_table = |kind: EmbeddingKind| -> Result<EmbeddingTable> {
        let vectors = (0..spec.num_ids())
            .map(|i| {
                (0..spec.frames)
                    .map(|t| read_vector(&dir.join("emb").join(kind.name()).join(i.to_string()).join(format!("{t}.lft"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let table = EmbeddingTable { kind, vectors };
        table.validate()?;
        Ok(table)
    };
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir.join("queries"))
        .map_err(|e| Error::io(dir.join("queries"), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    names.sort();
    let queries = names
        .iter()
        .map(|p| {
            let (mut q, file) = Query::from_text(&fsutil::read_text(p)?)?;
            q.embedding = read_vector(&dir.join(file))?;
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        clip: read_table(EmbeddingKind::ClipStatic)?,
        dynamic: read_table(EmbeddingKind::Dynamic)?,
        spec,
        frames,
        queries,
    })
}

/// Every scene under `root/scene/`, sorted by name.
pub fn read_bundle(root: &Path) -> Result<Vec<Scene>> {
    let base = root.join("scene");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&base)
        .map_err(|e| Error::io(&base, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_scene(d)).collect()
}
