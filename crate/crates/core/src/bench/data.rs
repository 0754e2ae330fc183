//! Deterministic benchmark inputs and the brute-force result oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Dtype, ReduceFn};

/// Relative tolerance the oracle allows for floating-point reductions.
pub fn tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => 1e-6,
        Dtype::F64 => 1e-12,
        Dtype::I32 | Dtype::I64 => 0.0,
    }
}

/// Element count carrying `bytes` of `dtype`; never less than one element.
pub fn elements_for(bytes: u64, dtype: Dtype) -> u64 {
    bytes.div_ceil(dtype.size()).max(1)
}

/// `count` elements for `rank`, fixed by `(seed, rank, salt)`. Integers span
/// the full range; floats are drawn from [0.5, 1.5).
pub fn input(dtype: Dtype, seed: u64, rank: u32, salt: u64, count: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((rank as u64) << 40) ^ salt);
    let mut out = Vec::with_capacity((count * dtype.size()) as usize);
    for _ in 0..count {
        match dtype {
            Dtype::I32 => out.extend_from_slice(&rng.gen::<i32>().to_le_bytes()),
            Dtype::I64 => out.extend_from_slice(&rng.gen::<i64>().to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&rng.gen_range(0.5f32..1.5).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&rng.gen_range(0.5f64..1.5).to_le_bytes()),
        }
    }
    out
}

pub fn f32s_to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn as_f64(dtype: Dtype, b: &[u8]) -> f64 {
    match dtype {
        Dtype::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
        Dtype::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        Dtype::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
        Dtype::I64 => i64::from_le_bytes(b.try_into().unwrap()) as f64,
    }
}

/// Element-wise reduction of `inputs`, accumulated in f64 for floats and
/// with wrapping arithmetic for integers.
pub fn reduce(dtype: Dtype, func: ReduceFn, inputs: &[Vec<u8>]) -> Vec<u8> {
    let w = dtype.size() as usize;
    let n = inputs.first().map_or(0, |v| v.len() / w);
    let mut out = Vec::with_capacity(n * w);
    for e in 0..n {
        let at = e * w..(e + 1) * w;
        match dtype {
            Dtype::I32 => {
                let it = inputs.iter().map(|v| i32::from_le_bytes(v[at.clone()].try_into().unwrap()));
                let r = match func {
                    ReduceFn::Sum => it.fold(0i32, i32::wrapping_add),
                    ReduceFn::Max => it.max().unwrap_or(i32::MIN),
                };
                out.extend_from_slice(&r.to_le_bytes());
            }
            Dtype::I64 => {
                let it = inputs.iter().map(|v| i64::from_le_bytes(v[at.clone()].try_into().unwrap()));
                let r = match func {
                    ReduceFn::Sum => it.fold(0i64, i64::wrapping_add),
                    ReduceFn::Max => it.max().unwrap_or(i64::MIN),
                };
                out.extend_from_slice(&r.to_le_bytes());
            }
            Dtype::F32 | Dtype::F64 => {
                let it = inputs.iter().map(|v| as_f64(dtype, &v[at.clone()]));
                let r = match func {
                    ReduceFn::Sum => it.sum::<f64>(),
                    ReduceFn::Max => it.fold(f64::NEG_INFINITY, f64::max),
                };
                if dtype == Dtype::F32 {
                    out.extend_from_slice(&(r as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&r.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Checks `got` against `want`: exact for integers, relative error within
/// [`tolerance`] for floats. Reports the first differing element.
pub fn compare(dtype: Dtype, got: &[u8], want: &[u8]) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("length {} != expected {}", got.len(), want.len()));
    }
    let tol = tolerance(dtype);
    let w = dtype.size() as usize;
    for (i, (g, e)) in got.chunks_exact(w).zip(want.chunks_exact(w)).enumerate() {
        let ok = if tol == 0.0 {
            g == e
        } else {
            let (g, e) = (as_f64(dtype, g), as_f64(dtype, e));
            (g - e).abs() <= tol * e.abs().max(f64::MIN_POSITIVE)
        };
        if !ok {
            return Err(format!(
                "element {i}: got {} expected {}",
                as_f64(dtype, g),
                as_f64(dtype, e)
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_deterministic_and_rank_specific() {
        let a = input(Dtype::F32, 7, 0, 64, 16);
        assert_eq!(a, input(Dtype::F32, 7, 0, 64, 16));
        assert_ne!(a, input(Dtype::F32, 7, 1, 64, 16));
        assert!(bytes_to_f32s(&a).iter().all(|&x| (0.5..1.5).contains(&x)));
    }

    #[test]
    fn integer_sum_wraps() {
        let a = i32::MAX.to_le_bytes().to_vec();
        let b = 1i32.to_le_bytes().to_vec();
        assert_eq!(reduce(Dtype::I32, ReduceFn::Sum, &[a, b]), i32::MIN.to_le_bytes());
    }

    #[test]
    fn float_compare_is_relative() {
        let want = f32s_to_bytes(&[1000.0]);
        assert!(compare(Dtype::F32, &f32s_to_bytes(&[1000.0005]), &want).is_ok());
        assert!(compare(Dtype::F32, &f32s_to_bytes(&[1000.01]), &want).is_err());
    }
}
