//! Finite-difference checks for every tape primitive.
//!
//! Each case rebuilds its graph from a flat parameter vector, so the central
//! difference oracle exercises the same forward path the analytic backward
//! claims to differentiate. Tolerance is shared across primitives.

use gnmr::autodiff::gradcheck::{central_diff, max_rel_err, DEFAULT_STEP};
use gnmr::autodiff::{Tape, Tensor, TensorId};
use gnmr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;

/// Split a flat vector into leaves of the given shapes, run `build`, and
/// return the scalar output plus per-leaf analytic gradients.
fn run_graph(
    shapes: &[&[usize]],
    flat: &[f64],
    build: &dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut ids = Vec::new();
    let mut off = 0;
    for shape in shapes {
        let len: usize = shape.iter().product();
        let t = Tensor::from_vec(shape.to_vec(), flat[off..off + len].to_vec())?.with_grad();
        ids.push(tape.leaf(&t));
        off += len;
    }
    assert_eq!(off, flat.len());
    let out = build(&mut tape, &ids)?;
    assert_eq!(tape.values(out).len(), 1, "graph must end in a scalar");
    let value = tape.values(out)[0];
    let mut grads = Vec::new();
    if want_grad {
        tape.backward(out)?;
        for (id, shape) in ids.iter().zip(shapes) {
            let len: usize = shape.iter().product();
            match tape.grad(*id) {
                Some(g) => grads.extend_from_slice(g),
                None => grads.extend(std::iter::repeat(0.0).take(len)),
            }
        }
    }
    Ok((value, grads))
}

fn fd_check(
    name: &str,
    shapes: &[&[usize]],
    seed: u64,
    build: &dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
) {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.5..1.5)).collect();

    let (_, analytic) = run_graph(shapes, &flat, build, true).unwrap();
    let mut eval = |x: &[f64]| run_graph(shapes, x, build, false).map(|(v, _)| v);
    let numeric = central_diff(&mut eval, &flat, DEFAULT_STEP).unwrap();

    let err = max_rel_err(&analytic, &numeric);
    assert!(
        err < REL_TOL,
        "{name}: max relative gradient error {err:.3e} exceeds {REL_TOL:.0e}"
    );
}

/// Weighted quadratic scalarizer: pushes a non-uniform upstream gradient
/// through the op under test instead of an all-ones one.
fn to_scalar(tape: &mut Tape, x: TensorId, seed: u64) -> Result<TensorId> {
    let len = tape.values(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = tape.constant(vec![len], target);
    tape.mse_loss(x, t)
}

#[test]
fn gradcheck_matmul() {
    fd_check("matmul", &[&[3, 4], &[4, 2]], 11, &|tape, ids| {
        let y = tape.matmul(ids[0], ids[1])?;
        to_scalar(tape, y, 101)
    });
}

#[test]
fn gradcheck_add_and_scaled_add() {
    fd_check("add", &[&[2, 3], &[2, 3]], 12, &|tape, ids| {
        let y = tape.add(ids[0], ids[1])?;
        to_scalar(tape, y, 102)
    });
    fd_check("add_scaled", &[&[2, 3], &[2, 3]], 13, &|tape, ids| {
        let y = tape.add_scaled(ids[0], ids[1], -0.7)?;
        to_scalar(tape, y, 103)
    });
}

#[test]
fn gradcheck_add_bias() {
    fd_check("add_bias", &[&[3, 4], &[4]], 14, &|tape, ids| {
        let y = tape.add_bias(ids[0], ids[1])?;
        to_scalar(tape, y, 104)
    });
}

#[test]
fn gradcheck_mul() {
    fd_check("mul", &[&[2, 5], &[2, 5]], 15, &|tape, ids| {
        let y = tape.mul(ids[0], ids[1])?;
        to_scalar(tape, y, 105)
    });
}

#[test]
fn gradcheck_affine() {
    fd_check("affine", &[&[6]], 16, &|tape, ids| {
        let y = tape.affine(ids[0], -2.5, 0.3);
        to_scalar(tape, y, 106)
    });
}

#[test]
fn gradcheck_sigmoid_tanh() {
    fd_check("sigmoid", &[&[7]], 17, &|tape, ids| {
        let y = tape.sigmoid(ids[0]);
        to_scalar(tape, y, 107)
    });
    fd_check("tanh", &[&[7]], 18, &|tape, ids| {
        let y = tape.tanh(ids[0]);
        to_scalar(tape, y, 108)
    });
}

#[test]
fn gradcheck_leaky_relu() {
    // Keep samples away from the kink so central differences stay valid.
    let shapes: &[&[usize]] = &[&[8]];
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let flat: Vec<f64> = (0..8)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let build = |tape: &mut Tape, ids: &[TensorId]| {
        let y = tape.leaky_relu(ids[0], 0.01);
        to_scalar(tape, y, 109)
    };
    let (_, analytic) = run_graph(shapes, &flat, &build, true).unwrap();
    let mut eval = |x: &[f64]| run_graph(shapes, x, &build, false).map(|(v, _)| v);
    let numeric = central_diff(&mut eval, &flat, DEFAULT_STEP).unwrap();
    assert!(max_rel_err(&analytic, &numeric) < REL_TOL);
}

#[test]
fn gradcheck_softmax() {
    fd_check("softmax_lastdim", &[&[3, 5]], 20, &|tape, ids| {
        let y = tape.softmax_lastdim(ids[0]);
        to_scalar(tape, y, 110)
    });
}

#[test]
fn gradcheck_concat_and_slice() {
    fd_check(
        "concat_lastdim",
        &[&[3, 2], &[3, 4]],
        21,
        &|tape, ids| {
            let y = tape.concat_lastdim(&[ids[0], ids[1]])?;
            to_scalar(tape, y, 111)
        },
    );
    fd_check("concat_rows", &[&[2, 3], &[4, 3]], 22, &|tape, ids| {
        let y = tape.concat_rows(&[ids[0], ids[1]])?;
        to_scalar(tape, y, 112)
    });
    fd_check("slice_rows", &[&[5, 3]], 23, &|tape, ids| {
        let y = tape.slice_rows(ids[0], 1, 3)?;
        to_scalar(tape, y, 113)
    });
    fd_check("slice_lastdim", &[&[3, 6]], 24, &|tape, ids| {
        let y = tape.slice_lastdim(ids[0], 2, 3)?;
        to_scalar(tape, y, 114)
    });
}

#[test]
fn gradcheck_sum_lastdim() {
    fd_check("sum_lastdim", &[&[4, 3]], 25, &|tape, ids| {
        let y = tape.sum_lastdim(ids[0]);
        to_scalar(tape, y, 115)
    });
}

#[test]
fn gradcheck_mse_loss_both_sides() {
    fd_check("mse_loss", &[&[6], &[6]], 26, &|tape, ids| {
        tape.mse_loss(ids[0], ids[1])
    });
}

#[test]
fn gradcheck_dropout_with_frozen_mask() {
    // Reseeding inside the closure pins the mask, so the finite-difference
    // oracle and the analytic pass see the same function.
    fd_check("dropout", &[&[4, 5]], 27, &|tape, ids| {
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let y = tape.dropout(ids[0], 0.4, &mut rng, true)?;
        to_scalar(tape, y, 116)
    });
}

const GRU_SHAPES: &[&[usize]] = &[
    &[2, 3], // x
    &[2, 4], // h
    &[3, 4], // w_z
    &[4, 4], // u_z
    &[4],    // b_z
    &[3, 4], // w_r
    &[4, 4], // u_r
    &[4],    // b_r
    &[3, 4], // w_h
    &[4, 4], // u_h
    &[4],    // b_h
];

fn gru_ids(ids: &[TensorId]) -> [TensorId; 9] {
    [
        ids[2], ids[3], ids[4], ids[5], ids[6], ids[7], ids[8], ids[9], ids[10],
    ]
}

#[test]
fn gradcheck_gru_cell() {
    fd_check("gru_cell", GRU_SHAPES, 28, &|tape, ids| {
        let y = tape.gru_cell(ids[0], ids[1], &gru_ids(ids))?;
        to_scalar(tape, y, 117)
    });
}

/// The fused cell must agree with the same computation spelled out in
/// primitive ops, both in value and in every parameter gradient.
#[test]
fn fused_gru_cell_matches_unfused_composition() {
    let total: usize = GRU_SHAPES.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let flat: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.2..1.2)).collect();

    let fused = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
        let y = tape.gru_cell(ids[0], ids[1], &gru_ids(ids))?;
        to_scalar(tape, y, 118)
    };
    let unfused = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
        let (x, h) = (ids[0], ids[1]);
        let gate = |tape: &mut Tape, w: TensorId, u: TensorId, b: TensorId| -> Result<TensorId> {
            let xw = tape.matmul(x, w)?;
            let hu = tape.matmul(h, u)?;
            let pre = tape.add(xw, hu)?;
            tape.add_bias(pre, b)
        };
        let zpre = gate(tape, ids[2], ids[3], ids[4])?;
        let z = tape.sigmoid(zpre);
        let rpre = gate(tape, ids[5], ids[6], ids[7])?;
        let r = tape.sigmoid(rpre);
        let rh = tape.mul(r, h)?;
        let xw = tape.matmul(x, ids[8])?;
        let rhu = tape.matmul(rh, ids[9])?;
        let cpre0 = tape.add(xw, rhu)?;
        let cpre = tape.add_bias(cpre0, ids[10])?;
        let hh = tape.tanh(cpre);
        let keep = tape.affine(z, -1.0, 1.0);
        let kept = tape.mul(keep, h)?;
        let new = tape.mul(z, hh)?;
        let y = tape.add(kept, new)?;
        to_scalar(tape, y, 118)
    };

    let (v_fused, g_fused) = run_graph(GRU_SHAPES, &flat, &fused, true).unwrap();
    let (v_unfused, g_unfused) = run_graph(GRU_SHAPES, &flat, &unfused, true).unwrap();

    assert!(
        (v_fused - v_unfused).abs() < 1e-12,
        "fused {v_fused} vs unfused {v_unfused}"
    );
    assert_eq!(g_fused.len(), g_unfused.len());
    for (i, (a, b)) in g_fused.iter().zip(&g_unfused).enumerate() {
        assert!(
            (a - b).abs() < 1e-10,
            "gradient {i} differs: fused {a} vs unfused {b}"
        );
    }
}
