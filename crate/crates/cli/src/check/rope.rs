use exms_core::layers::{rope_1d_apply, rope_2d_apply, RopeParams};
use exms_core::numcore::{SeededRng, Tensor};

use super::{max_abs_diff, Recorder};
use crate::error::CliError;

const SEED: u64 = 0x726f_7065;
const HEAD_DIM: usize = 16;
const PAIRS: usize = 12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec1(rng: &mut SeededRng) -> Tensor {
    rng.normal_tensor(&[1, HEAD_DIM], 1.0)
}

fn norms(x: &Tensor) -> Vec<f64> {
    x.data().chunks(x.last_dim()).map(|r| dot(r, r).sqrt()).collect()
}

fn isometry(rng: &mut SeededRng) -> Result<f64, CliError> {
    let one = RopeParams::one_d(HEAD_DIM)?;
    let two = RopeParams::two_d(HEAD_DIM)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t = rng.between(1, 16);
        let x = rng.normal_tensor(&[3, t, HEAD_DIM], 2.0);
        let pos: Vec<usize> = (0..t).map(|_| rng.below(4096)).collect();
        let rows: Vec<usize> = (0..t).map(|_| rng.below(64)).collect();
        let cols: Vec<usize> = (0..t).map(|_| rng.below(64)).collect();
        worst = worst.max(max_abs_diff(&norms(&rope_1d_apply(&x, &pos, &one)?), &norms(&x)));
        worst = worst.max(max_abs_diff(&norms(&rope_2d_apply(&x, &rows, &cols, &two)?), &norms(&x)));
    }
    Ok(worst)
}

fn origin_identity(rng: &mut SeededRng) -> Result<f64, CliError> {
    let x = rng.normal_tensor(&[5, HEAD_DIM], 1.0);
    let a = rope_1d_apply(&x, &[0; 5], &RopeParams::one_d(HEAD_DIM)?)?;
    let b = rope_2d_apply(&x, &[0; 5], &[0; 5], &RopeParams::two_d(HEAD_DIM)?)?;
    Ok(max_abs_diff(a.data(), x.data()).max(max_abs_diff(b.data(), x.data())))
}

/// `⟨rope(q, p), rope(k, p + Δ)⟩` against `⟨rope(q, 0), rope(k, Δ)⟩`.
fn relative_1d(rng: &mut SeededRng) -> Result<f64, CliError> {
    let params = RopeParams::one_d(HEAD_DIM)?;
    let mut worst = 0.0f64;
    for _ in 0..PAIRS {
        let (q, k) = (vec1(rng), vec1(rng));
        let (p, delta) = (rng.below(2000), rng.below(500));
        let shifted = dot(rope_1d_apply(&q, &[p], &params)?.data(), rope_1d_apply(&k, &[p + delta], &params)?.data());
        let base = dot(rope_1d_apply(&q, &[0], &params)?.data(), rope_1d_apply(&k, &[delta], &params)?.data());
        worst = worst.max((shifted - base).abs());
    }
    Ok(worst)
}

/// Score between grid points `(r, c)` and `(r', c')` against the score
/// between `(r − r', c − c')` and the origin.
fn relative_2d(rng: &mut SeededRng) -> Result<f64, CliError> {
    let params = RopeParams::two_d(HEAD_DIM)?;
    let mut worst = 0.0f64;
    for _ in 0..PAIRS {
        let (q, k) = (vec1(rng), vec1(rng));
        let (r2, c2) = (rng.below(64), rng.below(64));
        let (r, c) = (r2 + rng.below(64), c2 + rng.below(64));
        let a = dot(rope_2d_apply(&q, &[r], &[c], &params)?.data(), rope_2d_apply(&k, &[r2], &[c2], &params)?.data());
        let b = dot(
            rope_2d_apply(&q, &[r - r2], &[c - c2], &params)?.data(),
            rope_2d_apply(&k, &[0], &[0], &params)?.data(),
        );
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// With every column at zero the first half is 1D RoPE over rows at half
/// width and the second half is untouched.
fn reduces_to_1d(rng: &mut SeededRng) -> Result<f64, CliError> {
    let half = HEAD_DIM / 2;
    let n = 10;
    let x = rng.normal_tensor(&[n, HEAD_DIM], 1.0);
    let rows: Vec<usize> = (0..n).map(|_| rng.below(100)).collect();
    let out = rope_2d_apply(&x, &rows, &[0; 10], &RopeParams::two_d(HEAD_DIM)?)?;
    let split = |t: &Tensor, first: bool| -> Vec<f64> {
        t.data().chunks(HEAD_DIM).flat_map(|r| if first { r[..half].to_vec() } else { r[half..].to_vec() }).collect()
    };
    let first = Tensor::new(vec![n, half], split(&x, true))?;
    let expect = rope_1d_apply(&first, &rows, &RopeParams::one_d(half)?)?;
    Ok(max_abs_diff(&split(&out, true), expect.data()).max(max_abs_diff(&split(&out, false), &split(&x, false))))
}

pub(super) fn run() -> Vec<super::CheckOutcome> {
    let mut rec = Recorder::new("rope");
    let mut rng = SeededRng::new(SEED);
    rec.record("isometry_1d_2d", 1e-12, isometry(&mut rng));
    rec.record("origin_is_identity", 0.0, origin_identity(&mut rng));
    rec.record(format!("relative_offset_1d ({PAIRS} pairs)"), 1e-10, relative_1d(&mut rng));
    rec.record(format!("relative_offset_2d ({PAIRS} pairs)"), 1e-10, relative_2d(&mut rng));
    rec.record("2d_reduces_to_1d", 1e-12, reduces_to_1d(&mut rng));
    rec.finish()
}
