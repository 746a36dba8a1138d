use proptest::prelude::*;

use super::*;
use crate::gradcheck::check_params;
use crate::rng::{Rng, SeedStreams};

fn rng(name: &str) -> Rng {
    SeedStreams::new(11).stream(name)
}

fn run1(shape: &[usize], data: Vec<f32>, f: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(shape, data).unwrap();
    let y = f(&mut tape, x);
    tape.tensor(y)
}

// ---- independent oracles ------------------------------------------------

fn triple_loop(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn six_loop_conv(
    x: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: &[f32],
    c_out: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0f64;
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as i64 - 1;
                            let ix = (ox * stride + kx) as i64 - 1;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let xv = x[ci * h * w + iy as usize * w + ix as usize] as f64;
                            s += xv * k[((o * c_in + ci) * 3 + ky) * 3 + kx] as f64;
                        }
                    }
                }
                out[o * ho * wo + oy * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

/// Maclaurin series for erf, summed until terms vanish. Accurate to ~1e-15
/// for |x| ≤ 4, which covers the test range.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

// ---- matmul ---------------------------------------------------------------

#[test]
fn matmul_identity_and_hand_sum() {
    let mut tape = Tape::new();
    let i = tape.leaf(&Tensor::identity(2));
    let m = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0]);
    assert_eq!(tape.shape(c), &[1, 1]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng("matmul");
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(va, vb).unwrap();
    let oracle = triple_loop(a.data(), b.data(), 4, 5, 3);
    for (x, o) in tape.value(c).iter().zip(&oracle) {
        assert!((*x as f64 - o).abs() < 1e-6, "{x} vs {o}");
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[4, 2], vec![0.0; 8]).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

// ---- conv2d -----------------------------------------------------------------

#[test]
fn conv_zero_input_gives_zero() {
    let mut r = rng("conv0");
    let k = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(&[2, 5, 5], vec![0.0; 50]).unwrap();
    let kv = tape.leaf(&k);
    for stride in [1, 2] {
        let y = tape.conv2d(x, kv, stride).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn conv_delta_kernel_is_identity() {
    let x: Vec<f32> = (0..9).map(|v| v as f32 - 4.0).collect();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut tape = Tape::new();
    let xv = tape.constant(&[1, 3, 3], x.clone()).unwrap();
    let kv = tape.constant(&[1, 1, 3, 3], k).unwrap();
    let y = tape.conv2d(xv, kv, 1).unwrap();
    assert_eq!(tape.value(y), &x[..]);
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut r = rng("conv");
    let x = Tensor::randn(&[2, 8, 8], 1.0, &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    for stride in [1, 2] {
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(&x), tape.leaf(&k));
        let y = tape.conv2d(xv, kv, stride).unwrap();
        let (oracle, ho, wo) = six_loop_conv(x.data(), 2, 8, 8, k.data(), 3, stride);
        assert_eq!(tape.shape(y), &[3, ho, wo]);
        let diff = tape
            .value(y)
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "stride {stride}: {diff}");
    }
}

#[test]
fn conv_odd_size_stride_two_rounds_up() {
    let mut tape = Tape::new();
    let x = tape.constant(&[1, 5, 7], vec![1.0; 35]).unwrap();
    let k = tape.constant(&[2, 1, 3, 3], vec![1.0; 18]).unwrap();
    let y = tape.conv2d(x, k, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 4]);
}

#[test]
fn conv_channel_mismatch_is_error() {
    let mut tape = Tape::new();
    let x = tape.constant(&[2, 4, 4], vec![0.0; 32]).unwrap();
    let k = tape.constant(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
    assert!(matches!(tape.conv2d(x, k, 1), Err(Error::Shape { .. })));
}

// ---- elementwise --------------------------------------------------------------

#[test]
fn elementwise_examples() {
    let y = run1(&[1], vec![0.0], |t, x| t.sigmoid(x));
    assert_eq!(y.data(), &[0.5]);
    let y = run1(&[1], vec![-3.0], |t, x| t.abs(x));
    assert_eq!(y.data(), &[3.0]);
    let y = run1(&[3], vec![-1.0, 0.0, 2.0], |t, x| t.relu(x));
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    let y = run1(&[2], vec![-1.5, 2.0], |t, x| t.square(x));
    assert_eq!(y.data(), &[2.25, 4.0]);
}

#[test]
fn binary_shapes_and_scalar_broadcast() {
    let mut tape = Tape::new();
    let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = tape.constant(&[1], vec![10.0]).unwrap();
    let y = tape.mul(a, s).unwrap();
    assert_eq!(tape.value(y), &[10.0, 20.0, 30.0, 40.0]);
    let y = tape.sub(s, a).unwrap();
    assert_eq!(tape.value(y), &[9.0, 8.0, 7.0, 6.0]);
    let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn gelu_matches_erf_series() {
    let mut r = rng("gelu");
    let x = Tensor::randn(&[64], 1.5, &mut r);
    let y = run1(&[64], x.data().to_vec(), |t, v| t.gelu(v));
    for (&xi, &yi) in x.data().iter().zip(y.data()) {
        let xd = xi as f64;
        let oracle = 0.5 * xd * (1.0 + erf_series(xd / 2f64.sqrt()));
        let rel = (yi as f64 - oracle).abs() / oracle.abs().max(1e-30);
        assert!(rel < 1e-5, "gelu({xi}) = {yi}, oracle {oracle}");
    }
}

// ---- softmax ----------------------------------------------------------------

#[test]
fn softmax_examples() {
    let y = run1(&[3], vec![0.0; 3], |t, x| t.softmax(x));
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let y = run1(&[2], vec![1000.0, 1000.0], |t, x| t.softmax(x));
    assert_eq!(y.data(), &[0.5, 0.5]);

    let mut r = rng("softmax");
    let x = Tensor::randn(&[5], 2.0, &mut r);
    let y = run1(&[5], x.data().to_vec(), |t, v| t.softmax(v));
    let z: f64 = x.data().iter().map(|&v| (v as f64).exp()).sum();
    for (&xi, &yi) in x.data().iter().zip(y.data()) {
        assert!((yi as f64 - (xi as f64).exp() / z).abs() < 1e-7);
    }
}

// ---- layer norm -----------------------------------------------------------------

fn layer_norm_of(x: Vec<f32>, rows: usize, c: usize, gain: f32, bias: f32) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(&[rows, c], x).unwrap();
    let g = tape.constant(&[c], vec![gain; c]).unwrap();
    let b = tape.constant(&[c], vec![bias; c]).unwrap();
    let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
    tape.tensor(y)
}

#[test]
fn layer_norm_examples() {
    let y = layer_norm_of(vec![3.5; 8], 1, 8, 1.0, 0.0);
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut r = rng("ln");
    let x = Tensor::randn(&[4, 16], 3.0, &mut r);
    let y = layer_norm_of(x.data().to_vec(), 4, 16, 0.0, 0.25);
    assert!(y.data().iter().all(|&v| v == 0.25));

    let y = layer_norm_of(x.data().iter().map(|v| v + 5.0).collect(), 4, 16, 1.0, 0.0);
    for row in y.data().chunks(16) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

// ---- upsample -----------------------------------------------------------------

#[test]
fn upsample_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&[1, 1, 1], vec![7.0]).unwrap();
    let y = tape.upsample_nearest2x(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2]);
    assert_eq!(tape.value(y), &[7.0; 4]);

    let x = tape.constant(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = tape.upsample_nearest2x(x).unwrap();
    #[rustfmt::skip]
    let expected = [
        1.0, 1.0, 0.0, 0.0,
        1.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 1.0,
        0.0, 0.0, 1.0, 1.0,
    ];
    assert_eq!(tape.value(y), &expected);
}

#[test]
fn upsample_then_stride_recovers_input() {
    let mut r = rng("up");
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let y = run1(&[3, 4, 5], x.data().to_vec(), |t, v| t.upsample_nearest2x(v).unwrap());
    let (h2, w2) = (8, 10);
    let mut back = Vec::new();
    for c in 0..3 {
        for yy in (0..h2).step_by(2) {
            for xx in (0..w2).step_by(2) {
                back.push(y.data()[c * h2 * w2 + yy * w2 + xx]);
            }
        }
    }
    assert_eq!(back, x.data());
}

// ---- reductions -----------------------------------------------------------------

#[test]
fn reduce_examples() {
    let y = run1(&[3], vec![1.0, 2.0, 3.0], |t, x| t.mean(x));
    assert_eq!(y.data(), &[2.0]);
    let y = run1(&[4], vec![0.0; 4], |t, x| t.sum(x));
    assert_eq!(y.data(), &[0.0]);

    let mut r = rng("reduce");
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let y = run1(&[3, 4], x.data().to_vec(), |t, v| t.mean(v));
    let mut s = 0.0f64;
    for v in x.data() {
        s += *v as f64;
    }
    assert!((y.data()[0] as f64 - s / 12.0).abs() < 1e-7);

    let y = run1(&[3, 4], x.data().to_vec(), |t, v| t.reduce(ReduceKind::Sum, v, Axes::Last));
    assert_eq!(y.shape(), &[3]);
    for (row, out) in x.data().chunks(4).zip(y.data()) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((*out as f64 - s).abs() < 1e-6);
    }
}

// ---- cosine ------------------------------------------------------------------------

fn cosine_of(a: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a), tape.leaf(b));
    let c = tape.cosine_rows(va, vb, 1e-8).unwrap();
    tape.tensor(c)
}

#[test]
fn cosine_examples() {
    let mut r = rng("cos");
    let a = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let c = cosine_of(&a, &a);
    assert_eq!(c.shape(), &[3, 4]);
    assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

    let x = Tensor::new(&[2, 2, 2], [1.0, 0.0].repeat(4)).unwrap();
    let y = Tensor::new(&[2, 2, 2], [0.0, 1.0].repeat(4)).unwrap();
    assert!(cosine_of(&x, &y).data().iter().all(|&v| v == 0.0));

    let b = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let b27 = Tensor::new(b.shape(), b.data().iter().map(|v| v * 2.7).collect()).unwrap();
    let (c1, c2) = (cosine_of(&a, &b), cosine_of(&a, &b27));
    assert!(c1.max_abs_diff(&c2) < 1e-6);
    assert!(c1.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn cosine_of_zero_vector_is_finite() {
    let z = Tensor::zeros(&[2, 3]);
    let a = Tensor::full(&[2, 3], 1.0);
    assert!(cosine_of(&z, &a).data().iter().all(|&v| v == 0.0));
}

// ---- backward ----------------------------------------------------------------------

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w = tape.leaf(&Tensor::full(&[5], 3.0).with_grad());
    let l = tape.mean(w);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(w).unwrap(), &[0.2; 5]);

    let mut tape = Tape::new();
    let w = tape.leaf(&Tensor::new(&[2], vec![1.0, -2.0]).unwrap().with_grad());
    let sq = tape.square(w);
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(w).unwrap(), &[2.0, -4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let w = tape.leaf(&Tensor::full(&[3], 1.0).with_grad());
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let w = tape.leaf(&Tensor::full(&[2], 1.0).with_grad());
    let c = tape.constant(&[2], vec![3.0, 4.0]).unwrap();
    let p = tape.mul(w, c).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(w).unwrap(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
}

// ---- finite-difference checks, one per differentiable op ---------------------------------

/// Checks `op` on inputs registered as parameters `x0, x1, ...`, reducing
/// its output through a fixed random projection.
fn fd_check(name: &str, inputs: &[Tensor], op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let mut r = rng(name);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t.clone()))
        .collect();
    let probe = {
        let mut tape = Tape::<f64>::default();
        let b = store.bind(&mut tape, false);
        let vars: Vec<Var> = ids.iter().map(|&id| b.get(id)).collect();
        let y = op(&mut tape, &vars).unwrap();
        Tensor::randn(tape.shape(y), 1.0, &mut r)
    };
    let report = check_params(
        &mut store,
        |tape, b| {
            let vars: Vec<Var> = ids.iter().map(|&id| b.get(id)).collect();
            let y = op(tape, &vars)?;
            let p = tape.leaf(&probe);
            let yp = tape.mul(y, p)?;
            Ok(tape.sum(yp))
        },
        100,
        1e-3,
        1e-10,
        &mut r,
    )
    .unwrap();
    assert_eq!(report.checked, 100);
    assert!(report.max_rel_err < 1e-3, "{name}: {report:?}");
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn away_from_zero(shape: &[usize], r: &mut Rng) -> Tensor {
    let t = Tensor::randn(shape, 1.0, r);
    Tensor::new(shape, t.data().iter().map(|&v| v.signum() * (0.1 + v.abs())).collect()).unwrap()
}

#[test]
fn fd_linear_algebra_and_structure() {
    let mut r = rng("fd-lin");
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 3], 1.0, &mut r);
    let c = Tensor::randn(&[3, 5], 1.0, &mut r);
    fd_check("matmul", &[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
    fd_check("matmul_nt", &[a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1]));
    fd_check("transpose", std::slice::from_ref(&a), |t, v| t.transpose(v[0]));
    fd_check("reshape", std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[2, 10]));
    fd_check("concat_rows", &[a.clone(), c.clone()], |t, v| t.concat_rows(&[v[0], v[1]]));
    fd_check("concat_cols", &[a.clone(), b.clone()], |t, v| {
        let bt = t.transpose(v[1])?;
        let bt = t.slice_rows(bt, 0, 3)?;
        let a3 = t.slice_rows(v[0], 1, 3)?;
        t.concat_cols(&[a3, bt])
    });
    fd_check("slice_cols", std::slice::from_ref(&a), |t, v| t.slice_cols(v[0], 1, 3));
}

#[test]
fn fd_elementwise() {
    let mut r = rng("fd-ew");
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3, 4], 1.0, &mut r);
    let s = Tensor::randn(&[1], 1.0, &mut r);
    let k = away_from_zero(&[3, 4], &mut r);
    fd_check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    fd_check("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    fd_check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    fd_check("mul_broadcast", &[a.clone(), s.clone()], |t, v| t.mul(v[1], v[0]));
    fd_check("sub_broadcast", &[a.clone(), s.clone()], |t, v| t.sub(v[0], v[1]));
    fd_check("scale", std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7)));
    fd_check("abs", std::slice::from_ref(&k), |t, v| Ok(t.abs(v[0])));
    fd_check("relu", std::slice::from_ref(&k), |t, v| Ok(t.relu(v[0])));
    for kind in [Unary::Square, Unary::Sigmoid, Unary::Gelu, Unary::Softplus, Unary::Tanh] {
        fd_check(&format!("{kind:?}"), std::slice::from_ref(&a), |t, v| Ok(t.unary(kind, v[0])));
    }
    let bias = Tensor::randn(&[4], 1.0, &mut r);
    fd_check("add_row_bias", &[a.clone(), bias], |t, v| t.add_row_bias(v[0], v[1]));
    let img = Tensor::randn(&[3, 2, 2], 1.0, &mut r);
    let cb = Tensor::randn(&[3], 1.0, &mut r);
    fd_check("add_channel_bias", &[img, cb], |t, v| t.add_channel_bias(v[0], v[1]));
}

#[test]
fn fd_normalisation_and_similarity() {
    let mut r = rng("fd-norm");
    let a = Tensor::randn(&[3, 6], 1.0, &mut r);
    let b = Tensor::randn(&[3, 6], 1.0, &mut r);
    let g = Tensor::randn(&[6], 1.0, &mut r);
    let beta = Tensor::randn(&[6], 1.0, &mut r);
    fd_check("softmax", std::slice::from_ref(&a), |t, v| Ok(t.softmax(v[0])));
    fd_check("layer_norm", &[a.clone(), g, beta], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    fd_check("cosine_rows", &[a.clone(), b.clone()], |t, v| t.cosine_rows(v[0], v[1], 1e-8));
    fd_check("l2_normalize", std::slice::from_ref(&a), |t, v| Ok(t.l2_normalize(v[0], 1e-8)));
    let hw = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let hw2 = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    fd_check("cosine_map", &[hw, hw2], |t, v| t.cosine_rows(v[0], v[1], 1e-8));
}

#[test]
fn fd_spatial() {
    let mut r = rng("fd-sp");
    let x = Tensor::randn(&[2, 5, 6], 1.0, &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    fd_check("conv_s1", &[x.clone(), k.clone()], |t, v| t.conv2d(v[0], v[1], 1));
    fd_check("conv_s2", &[x.clone(), k.clone()], |t, v| t.conv2d(v[0], v[1], 2));
    fd_check("upsample", std::slice::from_ref(&x), |t, v| t.upsample_nearest2x(v[0]));
    let d = Tensor::randn(&[8, 2, 3], 1.0, &mut r);
    fd_check("depth_to_space", &[d], |t, v| t.depth_to_space(v[0], 2));
}

#[test]
fn fd_reductions() {
    let mut r = rng("fd-red");
    let a = Tensor::randn(&[3, 5], 1.0, &mut r);
    for kind in [ReduceKind::Sum, ReduceKind::Mean] {
        for axes in [Axes::All, Axes::Last] {
            fd_check(&format!("{kind:?}{axes:?}"), std::slice::from_ref(&a), |t, v| {
                Ok(t.reduce(kind, v[0], axes))
            });
        }
    }
}

// ---- properties -------------------------------------------------------------------

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-50.0f32..50.0, len)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in finite_vec(1..40), cols in 1usize..8) {
        let rows = data.len() / cols;
        prop_assume!(rows > 0);
        let data = data[..rows * cols].to_vec();
        let y = run1(&[rows, cols], data, |t, x| t.softmax(x));
        for row in y.data().chunks(cols) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sigmoid_in_open_unit_interval(data in proptest::collection::vec(-15.0f32..15.0, 1..64)) {
        let n = data.len();
        let y = run1(&[n], data, |t, x| t.sigmoid(x));
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn ops_are_deterministic_and_finite(seed in any::<u64>()) {
        let run = || {
            let mut r = SeedStreams::new(seed).stream("det");
            let x = Tensor::randn(&[2, 6, 6], 1.0, &mut r);
            let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
            let mut tape = Tape::new();
            let (xv, kv) = (tape.leaf(&x), tape.leaf(&k.with_grad()));
            let y = tape.conv2d(xv, kv, 2).unwrap();
            let y = tape.gelu(y);
            let y = tape.reshape(y, &[3, 9]).unwrap();
            let y = tape.softmax(y);
            let l = tape.sum(y);
            let g = tape.backward(l).unwrap();
            (tape.tensor(y), g.get(kv).unwrap().to_vec())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert!(a.is_finite());
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(ga, gb);
    }
}
