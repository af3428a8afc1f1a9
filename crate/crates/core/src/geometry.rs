//! Embedding and latent types, interpolation, and diverse subset selection.
//!
//! Interpolants act on the flattened vector, never row by row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Row-major `T x D` prompt embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PromptEmbedding {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows * dim != data.len() || rows == 0 || dim == 0 {
            return Err(Error::DataLength {
                shape: vec![rows, dim],
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt embedding"));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.dim], self.data.clone())
            .expect("embedding invariants imply a valid tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [rows, dim] => Self::new(*rows, *dim, t.data().to_vec()),
            other => Err(Error::invalid(
                "embedding tensor",
                format!("expected 2-D shape, got {other:?}"),
            )),
        }
    }

    /// SHA-256 over the shape and the little-endian `f64` bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Generator latent, optionally remembering the seed it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    data: Vec<f64>,
    seed: Option<u64>,
}

impl Latent {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data, seed: None }
    }

    pub fn with_seed(data: Vec<f64>, seed: u64) -> Self {
        Self {
            data,
            seed: Some(seed),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.data.clone()).expect("latent must be non-empty and finite")
    }
}

/// Anything the interpolants can treat as one flat vector.
pub trait FlatVector: Sized {
    fn flat(&self) -> &[f64];
    /// Same kind of value with new contents of equal length.
    fn rebuild(&self, data: Vec<f64>) -> Self;
}

impl FlatVector for PromptEmbedding {
    fn flat(&self) -> &[f64] {
        &self.data
    }

    fn rebuild(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            rows: self.rows,
            dim: self.dim,
            data,
        }
    }
}

impl FlatVector for Latent {
    fn flat(&self) -> &[f64] {
        &self.data
    }

    fn rebuild(&self, data: Vec<f64>) -> Self {
        Self { data, seed: None }
    }
}

impl FlatVector for Vec<f64> {
    fn flat(&self) -> &[f64] {
        self
    }

    fn rebuild(&self, data: Vec<f64>) -> Self {
        data
    }
}

impl PromptEmbedding {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }
}

impl Latent {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine of the angle between two non-zero vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (l2(a) * l2(b))).clamp(-1.0, 1.0)
}

/// Angle in radians between two non-zero vectors.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).acos()
}

fn check_pair(a: &[f64], b: &[f64], t: f64) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("t", format!("{t} is outside [0, 1]")));
    }
    Ok(())
}

fn lerp_raw(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

/// `(1 - t) a + t b`.
pub fn lerp<V: FlatVector>(a: &V, b: &V, t: f64) -> Result<V> {
    check_pair(a.flat(), b.flat(), t)?;
    if t == 0.0 {
        return Ok(a.rebuild(a.flat().to_vec()));
    }
    if t == 1.0 {
        return Ok(a.rebuild(b.flat().to_vec()));
    }
    Ok(a.rebuild(lerp_raw(a.flat(), b.flat(), t)))
}

/// Linear interpolation rescaled to the interpolated endpoint norm.
pub fn nlerp<V: FlatVector>(a: &V, b: &V, t: f64) -> Result<V> {
    check_pair(a.flat(), b.flat(), t)?;
    if t == 0.0 {
        return Ok(a.rebuild(a.flat().to_vec()));
    }
    if t == 1.0 {
        return Ok(a.rebuild(b.flat().to_vec()));
    }
    let mixed = lerp_raw(a.flat(), b.flat(), t);
    let n = l2(&mixed);
    if n <= 1e-12 {
        return Err(Error::Degenerate("linear interpolant passes through the origin"));
    }
    let target = (1.0 - t) * l2(a.flat()) + t * l2(b.flat());
    Ok(a.rebuild(mixed.into_iter().map(|v| v * target / n).collect()))
}

/// Angle below which slerp falls back to nlerp.
pub const SLERP_PARALLEL_EPS: f64 = 1e-7;
/// Angles within this distance of pi are treated as antipodal.
pub const SLERP_ANTIPODAL_EPS: f64 = 1e-6;

/// Spherical interpolation of directions with a linear norm schedule.
pub fn slerp<V: FlatVector>(a: &V, b: &V, t: f64) -> Result<V> {
    check_pair(a.flat(), b.flat(), t)?;
    let (na, nb) = (l2(a.flat()), l2(b.flat()));
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::Degenerate("slerp endpoint has zero norm"));
    }
    let omega = angle(a.flat(), b.flat());
    if omega > std::f64::consts::PI - SLERP_ANTIPODAL_EPS {
        return Err(Error::Degenerate("antipodal endpoints have no unique geodesic"));
    }
    if t == 0.0 {
        return Ok(a.rebuild(a.flat().to_vec()));
    }
    if t == 1.0 {
        return Ok(a.rebuild(b.flat().to_vec()));
    }
    if omega < SLERP_PARALLEL_EPS {
        return nlerp(a, b, t);
    }
    let s = omega.sin();
    let wa = ((1.0 - t) * omega).sin() / s;
    let wb = (t * omega).sin() / s;
    let norm = (1.0 - t) * na + t * nb;
    let data = a
        .flat()
        .iter()
        .zip(b.flat())
        .map(|(x, y)| (wa * x / na + wb * y / nb) * norm)
        .collect();
    Ok(a.rebuild(data))
}

/// Slerp parameter that places the result at cosine `kappa` from `current`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlerpParam {
    pub c: f64,
    /// Set when the candidate already lies within the target angle and `c`
    /// was clamped to 1.
    pub clamped: bool,
}

/// Solves `cos(c * omega) = kappa` for `c`, clamped to `[0, 1]`.
pub fn solve_slerp_param<V: FlatVector>(current: &V, candidate: &V, kappa: f64) -> Result<SlerpParam> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::invalid("kappa", format!("{kappa} is outside (0, 1)")));
    }
    let (a, b) = (current.flat(), candidate.flat());
    check_pair(a, b, 0.0)?;
    if l2(a) <= 1e-12 || l2(b) <= 1e-12 {
        return Err(Error::Degenerate("cannot normalise a zero vector"));
    }
    let omega = angle(a, b);
    if kappa <= omega.cos() {
        return Ok(SlerpParam {
            c: 1.0,
            clamped: true,
        });
    }
    let c = kappa.acos() / omega;
    Ok(SlerpParam {
        c: c.clamp(0.0, 1.0),
        clamped: c > 1.0,
    })
}

/// Greedy farthest-point selection under cosine distance.
///
/// Seeds with the element of largest mean distance to the pool, then
/// repeatedly adds the element whose minimum distance to the selection is
/// largest. Ties go to the lowest index.
pub fn select_diverse<V: FlatVector>(pool: &[V], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > pool.len() {
        return Err(Error::SelectionSize {
            k,
            pool: pool.len(),
        });
    }
    let dist = cosine_distance_matrix(pool);
    let n = pool.len();
    if k == n {
        return Ok((0..n).collect());
    }

    let first = argmax((0..n).map(|i| dist[i].iter().sum::<f64>() / n as f64));
    let mut selected = vec![first];
    let mut min_dist: Vec<f64> = dist[first].clone();
    let mut taken = vec![false; n];
    taken[first] = true;
    while selected.len() < k {
        let next = argmax((0..n).map(|i| if taken[i] { f64::NEG_INFINITY } else { min_dist[i] }));
        taken[next] = true;
        selected.push(next);
        for (m, d) in min_dist.iter_mut().zip(&dist[next]) {
            *m = m.min(*d);
        }
    }
    Ok(selected)
}

/// `1 - cos` between every pair of pool elements.
pub fn cosine_distance_matrix<V: FlatVector>(pool: &[V]) -> Vec<Vec<f64>> {
    let units: Vec<Vec<f64>> = pool
        .iter()
        .map(|v| {
            let n = l2(v.flat());
            v.flat().iter().map(|x| x / n).collect()
        })
        .collect();
    units
        .iter()
        .map(|a| {
            units
                .iter()
                .map(|b| (1.0 - dot(a, b).clamp(-1.0, 1.0)).max(0.0))
                .collect()
        })
        .collect()
}

/// Smallest pairwise distance among `indices`.
pub fn min_pairwise(dist: &[Vec<f64>], indices: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, &a) in indices.iter().enumerate() {
        for &b in &indices[i + 1..] {
            best = best.min(dist[a][b]);
        }
    }
    best
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

    fn v(x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    #[test]
    fn lerp_examples() {
        let a = v(&[0.0, 0.0]);
        let b = v(&[2.0, 4.0]);
        assert_eq!(lerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(lerp(&a, &b, 1.0).unwrap(), b);
        assert_eq!(lerp(&a, &b, 0.5).unwrap(), v(&[1.0, 2.0]));
        assert!(lerp(&a, &b, 1.5).is_err());
        assert!(lerp(&a, &v(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn nlerp_examples() {
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        assert_eq!(nlerp(&a, &b, 0.0).unwrap(), a);
        let mid = nlerp(&a, &b, 0.5).unwrap();
        assert!((mid[0] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((mid[1] - FRAC_1_SQRT_2).abs() < 1e-15);
        for t in [0.1, 0.3, 0.77] {
            assert!((l2(&nlerp(&a, &b, t).unwrap()) - 1.0).abs() < 1e-12);
        }
        assert!(nlerp(&a, &v(&[-1.0, 0.0]), 0.5).is_err());
    }

    #[test]
    fn slerp_examples() {
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        assert_eq!(slerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(slerp(&a, &b, 1.0).unwrap(), b);
        let mid = slerp(&a, &b, 0.5).unwrap();
        assert!((mid[0] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((mid[1] - FRAC_1_SQRT_2).abs() < 1e-15);
        for i in 1..10 {
            let t = f64::from(i) / 10.0;
            let p = slerp(&a, &b, t).unwrap();
            assert!((angle(&a, &p) - t * FRAC_PI_2).abs() < 1e-9);
        }
    }

    #[test]
    fn slerp_rejects_antipodes_and_falls_back_when_parallel() {
        assert!(slerp(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0]), 0.3).is_err());
        let a = v(&[1.0, 0.0]);
        let b = v(&[2.0, 0.0]);
        let p = slerp(&a, &b, 0.25).unwrap();
        assert!((p[0] - 1.25).abs() < 1e-12 && p[1] == 0.0);
    }

    #[test]
    fn solve_param_examples() {
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        let p = solve_slerp_param(&a, &b, FRAC_1_SQRT_2).unwrap();
        assert!((p.c - 0.5).abs() < 1e-12 && !p.clamped);

        let b = v(&[0.6, 0.8]);
        let p = solve_slerp_param(&a, &b, 0.6 + 1e-15).unwrap();
        assert!((p.c - 1.0).abs() < 1e-6);
        let p = solve_slerp_param(&a, &b, 0.6).unwrap();
        assert_eq!(p.c, 1.0);
        let p = solve_slerp_param(&a, &b, 1.0 - 1e-12).unwrap();
        assert!(p.c > 0.0 && p.c < 1e-5);

        let p = solve_slerp_param(&a, &b, 0.5).unwrap();
        assert!(p.clamped && p.c == 1.0);
    }

    #[test]
    fn select_diverse_examples() {
        let pool = vec![v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])];
        assert_eq!(select_diverse(&pool, 3).unwrap(), vec![0, 1, 2]);
        let dup = vec![v(&[1.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        let sel = select_diverse(&dup, 2).unwrap();
        assert!(sel.contains(&2));
        assert!(!(sel.contains(&0) && sel.contains(&1)));
        assert!(select_diverse(&dup, 4).is_err());
        assert!(select_diverse(&dup, 0).is_err());
    }

    #[test]
    fn content_hash_tracks_bytes() {
        let a = PromptEmbedding::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = PromptEmbedding::new(1, 2, vec![1.0, 2.0 + 1e-15]).unwrap();
        let c = PromptEmbedding::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(a.content_hash(), a.clone().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
