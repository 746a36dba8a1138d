use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use lang4d::checkpoint::Checkpoint;
use lang4d::config::RunConfig;
use lang4d::pipeline::train_model;
use lang4d::synth::{default_suite, generate, write_bundle};
use lang4d_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    checkpoint: PathBuf,
    scene: PathBuf,
    query: String,
    frames: usize,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate(&default_suite(3)[0]).unwrap();
    write_bundle(dir.path(), std::slice::from_ref(&scene)).unwrap();
    let mut config = RunConfig::default();
    config.train.epochs = 0;
    config.autoencoder.epochs = 2;
    config.pretrain = None;
    let trained = train_model(&config, std::slice::from_ref(&scene), None).unwrap();
    let checkpoint = dir.path().join("model.l4ck");
    Checkpoint::from_model(&trained.model, &config, config.train.seed).save(&checkpoint).unwrap();
    let scene_dir = find_scene_dir(dir.path(), scene.name());
    Fixture {
        checkpoint,
        scene: scene_dir,
        query: scene.queries[0].name.clone(),
        frames: scene.frames.len(),
        _dir: dir,
    }
}

fn find_scene_dir(root: &Path, name: &str) -> PathBuf {
    for entry in walk(root) {
        if entry.file_name().is_some_and(|n| n == name) && entry.join("spec.json").exists() {
            return entry;
        }
    }
    panic!("scene {name} not written under {}", root.display());
}

fn walk(root: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    for e in std::fs::read_dir(root).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.push(p.clone());
            out.extend(walk(&p));
        }
    }
    out
}

fn c(s: &Path) -> CString {
    CString::new(s.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { l4d_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&b| b as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn query_round_trip() {
    let fx = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(l4d_model_load(c(&fx.checkpoint).as_ptr(), &mut model), L4dStatus::Ok);
        let mut scene = ptr::null_mut();
        assert_eq!(l4d_scene_load(c(&fx.scene).as_ptr(), &mut scene), L4dStatus::Ok);
        assert_eq!(l4d_scene_num_frames(scene), fx.frames);

        let name = CString::new(fx.query.clone()).unwrap();
        let mut result = ptr::null_mut();
        let st = l4d_query_named(model, scene, name.as_ptr(), f32::NAN, f32::NAN, true, &mut result);
        assert_eq!(st, L4dStatus::Ok, "{}", last_error());
        assert_eq!(l4d_result_num_frames(result), fx.frames);

        let mut written = 0usize;
        let mut seg = vec![0usize; fx.frames];
        assert_eq!(l4d_result_segment(result, seg.as_mut_ptr(), seg.len(), &mut written), L4dStatus::Ok);
        assert!(written <= fx.frames);
        assert!(seg[..written].windows(2).all(|w| w[0] < w[1]));

        let (mut h, mut w) = (0usize, 0usize);
        let mut mask = vec![0u8; 4096];
        assert_eq!(l4d_result_mask(result, 0, mask.as_mut_ptr(), mask.len(), &mut h, &mut w), L4dStatus::Ok);
        assert!(h > 0 && w > 0);
        assert!(mask[..h * w].iter().all(|&m| m <= 1));

        for t in 0..fx.frames {
            let n = l4d_result_num_points(result, t);
            if !seg[..written].contains(&t) {
                assert_eq!(n, 0);
            }
            let mut xyz = vec![0f32; 3 * n];
            assert_eq!(l4d_result_points(result, t, xyz.as_mut_ptr(), xyz.len()), L4dStatus::Ok);
            assert!(xyz.iter().all(|v| v.is_finite()));
        }

        // A full-size embedding goes through the scene's autoencoder; an
        // already-compressed one is used directly.
        let dim = l4d_branch_dim(L4dBranch::Agnostic);
        let v = vec![0.5f32; dim];
        let mut r2 = ptr::null_mut();
        let st = l4d_query_embedding(model, scene, L4dBranch::Agnostic, v.as_ptr(), v.len(), 0.6, 0.6, true, &mut r2);
        assert_eq!(st, L4dStatus::Ok, "{}", last_error());
        assert_eq!(l4d_result_num_frames(r2), fx.frames);

        l4d_result_free(r2);
        l4d_result_free(result);
        l4d_scene_free(scene);
        l4d_model_free(model);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(l4d_model_load(ptr::null(), &mut model), L4dStatus::NullPointer);
        assert!(model.is_null());
        assert!(last_error().contains("path"));

        let missing = CString::new("/nonexistent/model.l4ck").unwrap();
        assert_eq!(l4d_model_load(missing.as_ptr(), &mut model), L4dStatus::Io);
        assert!(!last_error().is_empty());

        let mut scene = ptr::null_mut();
        assert_eq!(l4d_scene_load(missing.as_ptr(), &mut scene), L4dStatus::Io);

        let mut written = 0;
        assert_eq!(
            l4d_result_segment(ptr::null(), ptr::null_mut(), 0, &mut written),
            L4dStatus::NullPointer
        );
        assert_eq!(l4d_result_num_frames(ptr::null()), 0);
        assert_eq!(l4d_scene_num_frames(ptr::null()), 0);
        l4d_model_free(ptr::null_mut());
        l4d_result_free(ptr::null_mut());
    }
}

#[test]
fn unknown_query_and_small_buffers() {
    let fx = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(l4d_model_load(c(&fx.checkpoint).as_ptr(), &mut model), L4dStatus::Ok);
        let mut scene = ptr::null_mut();
        assert_eq!(l4d_scene_load(c(&fx.scene).as_ptr(), &mut scene), L4dStatus::Ok);

        let bogus = CString::new("no_such_query").unwrap();
        let mut result = ptr::null_mut();
        assert_eq!(
            l4d_query_named(model, scene, bogus.as_ptr(), f32::NAN, f32::NAN, false, &mut result),
            L4dStatus::NotFound
        );
        assert!(result.is_null());
        assert!(last_error().contains("no_such_query"));

        let v = [1.0f32; 5];
        assert_eq!(
            l4d_query_embedding(model, scene, L4dBranch::Sensitive, v.as_ptr(), v.len(), 0.6, 0.6, false, &mut result),
            L4dStatus::InvalidArgument
        );

        let name = CString::new(fx.query.clone()).unwrap();
        assert_eq!(
            l4d_query_named(model, scene, name.as_ptr(), f32::NAN, f32::NAN, false, &mut result),
            L4dStatus::Ok
        );
        let (mut h, mut w) = (0, 0);
        let mut tiny = [0u8; 1];
        assert_eq!(l4d_result_mask(result, 0, tiny.as_mut_ptr(), 1, &mut h, &mut w), L4dStatus::BufferTooSmall);
        assert!(h * w > 1);
        assert_eq!(
            l4d_result_mask(result, fx.frames, tiny.as_mut_ptr(), 1, &mut h, &mut w),
            L4dStatus::InvalidArgument
        );

        let mut msg = [0 as c_char; 4];
        let full = l4d_last_error(msg.as_mut_ptr(), msg.len());
        assert!(full > 3);
        assert_eq!(msg[3], 0);

        l4d_result_free(result);
        l4d_scene_free(scene);
        l4d_model_free(model);
    }
}
