//! Streaming arithmetic plugins on the data path.
//!
//! A [`BinaryPlugin`] consumes two byte streams and emits results as soon as
//! both inputs hold a full element, so output starts before either input
//! ends. The [`PluginRouter`] picks the plugin from the `dest` field carried
//! with each input packet.

use std::collections::BTreeMap;

use thiserror::Error;

use super::request::{Dtype, ReduceFn};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PluginError {
    #[error("operand streams differ in length: {a} vs {b} bytes")]
    LengthMismatch { a: u64, b: u64 },
    #[error("stream length {0} is not a multiple of the element size")]
    Misaligned(u64),
    #[error("no plugin routed at dest {0}")]
    NoRoute(u8),
    #[error("plugin at dest {dest} is {found}, expected {expected}")]
    WrongKind { dest: u8, found: &'static str, expected: &'static str },
}

macro_rules! fold_elems {
    ($t:ty, $a:expr, $b:expr, $out:expr, $f:expr) => {{
        const W: usize = std::mem::size_of::<$t>();
        for (x, y) in $a.chunks_exact(W).zip($b.chunks_exact(W)) {
            let x = <$t>::from_le_bytes(x.try_into().unwrap());
            let y = <$t>::from_le_bytes(y.try_into().unwrap());
            $out.extend_from_slice(&$f(x, y).to_le_bytes());
        }
    }};
}

fn combine(func: ReduceFn, dtype: Dtype, a: &[u8], b: &[u8], out: &mut Vec<u8>) {
    match (func, dtype) {
        (ReduceFn::Sum, Dtype::I32) => fold_elems!(i32, a, b, out, i32::wrapping_add),
        (ReduceFn::Sum, Dtype::I64) => fold_elems!(i64, a, b, out, i64::wrapping_add),
        (ReduceFn::Sum, Dtype::F32) => fold_elems!(f32, a, b, out, |x: f32, y: f32| x + y),
        (ReduceFn::Sum, Dtype::F64) => fold_elems!(f64, a, b, out, |x: f64, y: f64| x + y),
        (ReduceFn::Max, Dtype::I32) => fold_elems!(i32, a, b, out, |x: i32, y: i32| x.max(y)),
        (ReduceFn::Max, Dtype::I64) => fold_elems!(i64, a, b, out, |x: i64, y: i64| x.max(y)),
        (ReduceFn::Max, Dtype::F32) => fold_elems!(f32, a, b, out, f32::max),
        (ReduceFn::Max, Dtype::F64) => fold_elems!(f64, a, b, out, f64::max),
    }
}

/// Elementwise SUM or MAX over two little-endian streams.
#[derive(Debug, Clone)]
pub struct BinaryPlugin {
    func: ReduceFn,
    dtype: Dtype,
    a: Vec<u8>,
    b: Vec<u8>,
    out: Vec<u8>,
    consumed: u64,
    a_total: u64,
    b_total: u64,
}

impl BinaryPlugin {
    pub fn new(func: ReduceFn, dtype: Dtype) -> Self {
        BinaryPlugin { func, dtype, a: Vec::new(), b: Vec::new(), out: Vec::new(), consumed: 0, a_total: 0, b_total: 0 }
    }

    pub fn push_a(&mut self, chunk: &[u8]) {
        self.a_total += chunk.len() as u64;
        self.a.extend_from_slice(chunk);
        self.pump();
    }

    pub fn push_b(&mut self, chunk: &[u8]) {
        self.b_total += chunk.len() as u64;
        self.b.extend_from_slice(chunk);
        self.pump();
    }

    fn pump(&mut self) {
        let w = self.dtype.size() as usize;
        let n = self.a.len().min(self.b.len()) / w * w;
        if n == 0 {
            return;
        }
        combine(self.func, self.dtype, &self.a[..n], &self.b[..n], &mut self.out);
        self.a.drain(..n);
        self.b.drain(..n);
        self.consumed += n as u64;
    }

    /// Bytes of output produced so far and not yet pulled.
    pub fn available(&self) -> usize {
        self.out.len()
    }

    pub fn pull(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.out)
    }

    /// Ends both input streams; leftover bytes mean the operands disagreed.
    pub fn finish(mut self) -> Result<Vec<u8>, PluginError> {
        if self.a_total != self.b_total {
            return Err(PluginError::LengthMismatch { a: self.a_total, b: self.b_total });
        }
        if !self.a.is_empty() {
            return Err(PluginError::Misaligned(self.a_total));
        }
        Ok(self.pull())
    }
}

/// Runs two whole buffers through a plugin in fixed-size chunks.
pub fn apply(func: ReduceFn, dtype: Dtype, a: &[u8], b: &[u8]) -> Result<Vec<u8>, PluginError> {
    const CHUNK: usize = 4096;
    let mut p = BinaryPlugin::new(func, dtype);
    let mut out = Vec::with_capacity(a.len());
    let chunks = a.len().max(b.len()).div_ceil(CHUNK);
    for i in 0..chunks {
        let r = |s: &[u8]| s[(i * CHUNK).min(s.len())..((i + 1) * CHUNK).min(s.len())].to_vec();
        p.push_a(&r(a));
        p.push_b(&r(b));
        out.extend(p.pull());
    }
    out.extend(p.finish()?);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PluginKind {
    Unary(UnaryKind),
    Binary(ReduceFn),
}

impl PluginKind {
    fn name(self) -> &'static str {
        match self {
            PluginKind::Unary(_) => "unary",
            PluginKind::Binary(_) => "binary",
        }
    }
}

/// Dest-field routing from the data path to plugins.
#[derive(Clone, Debug)]
pub struct PluginRouter {
    routes: BTreeMap<u8, PluginKind>,
}

impl Default for PluginRouter {
    fn default() -> Self {
        let mut routes = BTreeMap::new();
        routes.insert(0, PluginKind::Unary(UnaryKind::Identity));
        routes.insert(1, PluginKind::Binary(ReduceFn::Sum));
        routes.insert(2, PluginKind::Binary(ReduceFn::Max));
        PluginRouter { routes }
    }
}

impl PluginRouter {
    pub fn dest_for(&self, func: ReduceFn) -> Option<u8> {
        self.routes.iter().find(|(_, k)| **k == PluginKind::Binary(func)).map(|(d, _)| *d)
    }

    pub fn kind(&self, dest: u8) -> Option<PluginKind> {
        self.routes.get(&dest).copied()
    }

    pub fn binary(&self, dest: u8, dtype: Dtype) -> Result<BinaryPlugin, PluginError> {
        match self.routes.get(&dest) {
            Some(PluginKind::Binary(func)) => Ok(BinaryPlugin::new(*func, dtype)),
            Some(k) => Err(PluginError::WrongKind { dest, found: k.name(), expected: "binary" }),
            None => Err(PluginError::NoRoute(dest)),
        }
    }

    /// Passes a chunk through the unary plugin at `dest`.
    pub fn unary(&self, dest: u8, chunk: Vec<u8>) -> Result<Vec<u8>, PluginError> {
        match self.routes.get(&dest) {
            Some(PluginKind::Unary(UnaryKind::Identity)) => Ok(chunk),
            Some(k) => Err(PluginError::WrongKind { dest, found: k.name(), expected: "unary" }),
            None => Err(PluginError::NoRoute(dest)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32s(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn i32s(v: &[i32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn sum_f32() {
        let out = apply(ReduceFn::Sum, Dtype::F32, &f32s(&[1.5, 2.5]), &f32s(&[0.5, 0.5])).unwrap();
        assert_eq!(out, f32s(&[2.0, 3.0]));
    }

    #[test]
    fn max_i32() {
        let out = apply(ReduceFn::Max, Dtype::I32, &i32s(&[3, -7]), &i32s(&[2, 9])).unwrap();
        assert_eq!(out, i32s(&[3, 9]));
    }

    #[test]
    fn integer_sum_wraps() {
        let out = apply(ReduceFn::Sum, Dtype::I32, &i32s(&[i32::MAX]), &i32s(&[1])).unwrap();
        assert_eq!(out, i32s(&[i32::MIN]));
    }

    #[test]
    fn output_starts_before_inputs_end() {
        let mut p = BinaryPlugin::new(ReduceFn::Sum, Dtype::I32);
        p.push_a(&i32s(&[1, 2, 3]));
        assert_eq!(p.available(), 0);
        p.push_b(&i32s(&[10]));
        assert_eq!(p.pull(), i32s(&[11]));
        p.push_b(&i32s(&[20, 30]));
        assert_eq!(p.finish().unwrap(), i32s(&[22, 33]));
    }

    #[test]
    fn length_mismatch_at_stream_end() {
        let mut p = BinaryPlugin::new(ReduceFn::Sum, Dtype::I32);
        p.push_a(&i32s(&[1, 2]));
        p.push_b(&i32s(&[1]));
        assert_eq!(p.finish(), Err(PluginError::LengthMismatch { a: 8, b: 4 }));
    }

    #[test]
    fn router_selects_by_dest() {
        let r = PluginRouter::default();
        let d = r.dest_for(ReduceFn::Max).unwrap();
        let mut p = r.binary(d, Dtype::I32).unwrap();
        p.push_a(&i32s(&[1]));
        p.push_b(&i32s(&[5]));
        assert_eq!(p.finish().unwrap(), i32s(&[5]));
        assert_eq!(r.unary(0, vec![1, 2, 3]).unwrap(), vec![1, 2, 3]);
        assert!(r.binary(0, Dtype::I32).is_err());
        assert_eq!(r.binary(9, Dtype::I32).unwrap_err(), PluginError::NoRoute(9));
    }
}
