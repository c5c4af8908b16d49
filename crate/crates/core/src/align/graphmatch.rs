//! Correlation-matrix graph matching: parts are re-ordered by the
//! permutation whose conjugated correlation matrix is closest (Frobenius)
//! to a reference matrix kept in memory across training steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest part count accepted by [`MatchMode::Exact`] (8! candidates).
pub const MAX_EXACT_PARTS: usize = 8;

/// Dense square matrix of part-to-part similarities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CorrMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DataLength {
                len: data.len(),
                shape: vec![n, n],
            });
        }
        Ok(CorrMatrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        CorrMatrix { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// `P * C * P^T` for the permutation matrix of `perm`: entry `(i, j)`
    /// becomes `C[perm(i)][perm(j)]`.
    pub fn conjugate(&self, perm: &Permutation) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::ShapeMismatch {
                op: "conjugate",
                lhs: vec![self.n, self.n],
                rhs: vec![perm.len()],
            });
        }
        let m = &perm.mapping;
        let data = (0..self.n * self.n)
            .map(|k| self.get(m[k / self.n], m[k % self.n]))
            .collect();
        Ok(CorrMatrix { n: self.n, data })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// Element-wise mean of equally sized matrices.
    pub fn mean(mats: &[CorrMatrix]) -> Result<Self> {
        let first = mats.first().ok_or(Error::EmptyParts)?;
        let mut data = vec![0.0; first.data.len()];
        for m in mats {
            if m.n != first.n {
                return Err(Error::ShapeMismatch {
                    op: "correlation mean",
                    lhs: vec![first.n],
                    rhs: vec![m.n],
                });
            }
            data.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / mats.len() as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        Ok(CorrMatrix { n: first.n, data })
    }
}

/// Bijection on `0..n`, stored as `mapping[i] = source index of slot i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Config(format!("{mapping:?} is not a permutation")));
            }
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Self {
        Permutation {
            mapping: other.mapping.iter().map(|&i| self.mapping[i]).collect(),
        }
    }

    /// Advances to the lexicographically next permutation; `false` after the last.
    fn advance(m: &mut [usize]) -> bool {
        let Some(i) = (1..m.len()).rev().find(|&i| m[i - 1] < m[i]) else {
            return false;
        };
        let j = (i..m.len()).rev().find(|&j| m[j] > m[i - 1]).expect("pivot exists");
        m.swap(i - 1, j);
        m[i..].reverse();
        true
    }
}

/// Cosine similarity between every pair of rows of `parts: [N, d]`.
/// Symmetric with an exact unit diagonal.
pub fn correlation<T: Scalar>(parts: &Tensor<T>) -> Result<CorrMatrix> {
    let s = parts.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "correlation",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (n, d) = (s[0], s[1]);
    let rows: Vec<Vec<f64>> = parts
        .data()
        .chunks(d)
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::ZeroNormRow(i));
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            data[i * n + j] = c;
            data[j * n + i] = c;
        }
    }
    Ok(CorrMatrix { n, data })
}

/// Negative Frobenius distance; 0 is the maximum.
pub fn similarity(a: &CorrMatrix, b: &CorrMatrix) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            lhs: vec![a.n, a.n],
            rhs: vec![b.n, b.n],
        });
    }
    Ok(-squared_distance(a, b).sqrt())
}

fn squared_distance(a: &CorrMatrix, b: &CorrMatrix) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Enumerate all `N!` permutations.
    Exact,
    /// Fill slots in order, each with the unused part that best matches the
    /// slots filled so far.
    Greedy,
}

/// Permutation `π` maximizing `similarity(conjugate(c_in, π), c_ref)`.
/// Exact mode breaks ties towards the lexicographically smallest mapping.
pub fn best_permutation(c_in: &CorrMatrix, c_ref: &CorrMatrix, mode: MatchMode) -> Result<Permutation> {
    if c_in.n != c_ref.n {
        return Err(Error::ShapeMismatch {
            op: "best_permutation",
            lhs: vec![c_in.n, c_in.n],
            rhs: vec![c_ref.n, c_ref.n],
        });
    }
    let n = c_in.n;
    match mode {
        MatchMode::Exact => {
            if n > MAX_EXACT_PARTS {
                return Err(Error::TooManyParts {
                    n,
                    max: MAX_EXACT_PARTS,
                });
            }
            let mut cur: Vec<usize> = (0..n).collect();
            let mut best = cur.clone();
            let mut best_cost = f64::INFINITY;
            loop {
                let mut cost = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let diff = c_in.get(cur[i], cur[j]) - c_ref.get(i, j);
                        cost += diff * diff;
                    }
                    if cost >= best_cost {
                        break;
                    }
                }
                if cost < best_cost {
                    best_cost = cost;
                    best.copy_from_slice(&cur);
                }
                if !Permutation::advance(&mut cur) {
                    break;
                }
            }
            Ok(Permutation { mapping: best })
        }
        MatchMode::Greedy => {
            let mut mapping: Vec<usize> = Vec::with_capacity(n);
            let mut used = vec![false; n];
            for slot in 0..n {
                let mut pick = None;
                let mut pick_cost = f64::INFINITY;
                for cand in (0..n).filter(|&c| !used[c]) {
                    let mut cost = {
                        let diff = c_in.get(cand, cand) - c_ref.get(slot, slot);
                        diff * diff
                    };
                    for (prev_slot, &prev) in mapping.iter().enumerate() {
                        let diff = c_in.get(cand, prev) - c_ref.get(slot, prev_slot);
                        cost += 2.0 * diff * diff;
                    }
                    if cost < pick_cost {
                        pick_cost = cost;
                        pick = Some(cand);
                    }
                }
                let pick = pick.expect("an unused part remains");
                used[pick] = true;
                mapping.push(pick);
            }
            Ok(Permutation { mapping })
        }
    }
}

/// Row `i` of the result is row `perm(i)` of `parts`.
pub fn reorder_parts<T: Scalar>(parts: &Tensor<T>, perm: &Permutation) -> Result<Tensor<T>> {
    let s = parts.shape();
    if s.len() != 2 || s[0] != perm.len() {
        return Err(Error::ShapeMismatch {
            op: "reorder_parts",
            lhs: s.to_vec(),
            rhs: vec![perm.len()],
        });
    }
    let d = s[1];
    let data = perm
        .mapping
        .iter()
        .flat_map(|&r| parts.data()[r * d..(r + 1) * d].iter().copied())
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// Reference correlation matrix maintained across training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBank {
    pub n: usize,
    pub ema_rate: f64,
    pub updates_seen: u64,
    c_ref: Option<CorrMatrix>,
}

impl CorrelationBank {
    pub fn new(n: usize, ema_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_rate) {
            return Err(Error::Config(format!("ema rate {ema_rate} outside [0, 1]")));
        }
        Ok(CorrelationBank {
            n,
            ema_rate,
            updates_seen: 0,
            c_ref: None,
        })
    }

    pub fn reference(&self) -> Option<&CorrMatrix> {
        self.c_ref.as_ref()
    }

    /// Restores a reference matrix read from a checkpoint.
    pub fn restore(&mut self, c_ref: Option<CorrMatrix>, updates_seen: u64) -> Result<()> {
        if let Some(c) = &c_ref {
            if c.n != self.n {
                return Err(Error::Checkpoint(format!(
                    "bank holds {}x{} reference, expected {n}x{n}",
                    c.n,
                    c.n,
                    n = self.n
                )));
            }
        }
        self.c_ref = c_ref;
        self.updates_seen = updates_seen;
        Ok(())
    }

    /// Permutation aligning `c_in` to the reference; identity before the
    /// first update.
    pub fn align(&self, c_in: &CorrMatrix, mode: MatchMode) -> Result<Permutation> {
        match &self.c_ref {
            Some(r) => best_permutation(c_in, r, mode),
            None => Ok(Permutation::identity(c_in.n)),
        }
    }

    /// First call adopts `c_aligned`; later calls blend it in with rate `ema_rate`.
    pub fn update(&mut self, c_aligned: &CorrMatrix) -> Result<()> {
        if c_aligned.n != self.n {
            return Err(Error::ShapeMismatch {
                op: "bank_update",
                lhs: vec![self.n, self.n],
                rhs: vec![c_aligned.n, c_aligned.n],
            });
        }
        let rho = self.ema_rate;
        match &mut self.c_ref {
            None => self.c_ref = Some(c_aligned.clone()),
            Some(r) => {
                for (a, b) in r.data.iter_mut().zip(&c_aligned.data) {
                    *a = (1.0 - rho) * *a + rho * b;
                }
                for i in 0..r.n {
                    r.data[i * r.n + i] = 1.0;
                }
            }
        }
        self.updates_seen += 1;
        Ok(())
    }

    /// Updates with the mean of a batch of aligned correlations.
    pub fn update_batch(&mut self, batch: &[CorrMatrix]) -> Result<()> {
        self.update(&CorrMatrix::mean(batch)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn correlation_identical_and_orthogonal_rows() {
        let c = correlation(&t(&[&[1.0, 2.0], &[1.0, 2.0], &[2.0, 4.0]])).unwrap();
        assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let c = correlation(&t(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0]])).unwrap();
        assert_eq!(c, CorrMatrix::identity(3));
    }

    #[test]
    fn correlation_rejects_zero_rows() {
        let err = correlation(&t(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::ZeroNormRow(1)));
    }

    #[test]
    fn similarity_examples() {
        let a = CorrMatrix::identity(2);
        let b = CorrMatrix::new(2, vec![1.0; 4]).unwrap();
        assert_eq!(similarity(&a, &a).unwrap(), 0.0);
        assert!((similarity(&a, &b).unwrap() + 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        assert!(similarity(&a, &CorrMatrix::identity(3)).is_err());
    }

    #[test]
    fn identity_on_equal_and_degenerate_references() {
        let c = CorrMatrix::new(3, vec![1.0, 0.2, -0.4, 0.2, 1.0, 0.7, -0.4, 0.7, 1.0]).unwrap();
        for mode in [MatchMode::Exact, MatchMode::Greedy] {
            assert!(best_permutation(&c, &c, mode).unwrap().is_identity());
        }
        let ones = CorrMatrix::new(4, vec![1.0; 16]).unwrap();
        assert!(best_permutation(&ones, &ones, MatchMode::Exact).unwrap().is_identity());
    }

    #[test]
    fn exact_mode_rejects_large_n() {
        let c = CorrMatrix::identity(9);
        assert!(matches!(
            best_permutation(&c, &c, MatchMode::Exact),
            Err(Error::TooManyParts { n: 9, .. })
        ));
        assert!(best_permutation(&c, &c, MatchMode::Greedy).is_ok());
    }

    #[test]
    fn lexicographic_enumeration_visits_all() {
        let mut m = vec![0, 1, 2, 3];
        let mut count = 1;
        let mut prev = m.clone();
        while Permutation::advance(&mut m) {
            assert!(m > prev);
            prev = m.clone();
            count += 1;
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn permutation_algebra() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert!(p.compose(&p.inverse()).is_identity());
        assert!(p.inverse().compose(&p).is_identity());
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
    }

    #[test]
    fn reorder_roundtrip_and_errors() {
        let x = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let p = Permutation::new(vec![1, 2, 0]).unwrap();
        let y = reorder_parts(&x, &p).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 5.0, 6.0, 1.0, 2.0]);
        assert_eq!(reorder_parts(&y, &p.inverse()).unwrap(), x);
        assert_eq!(reorder_parts(&x, &Permutation::identity(3)).unwrap(), x);
        assert!(reorder_parts(&x, &Permutation::identity(2)).is_err());
    }

    #[test]
    fn bank_update_rules() {
        let a = CorrMatrix::new(2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let b = CorrMatrix::new(2, vec![1.0, -0.5, -0.5, 1.0]).unwrap();

        let mut bank = CorrelationBank::new(2, 0.0).unwrap();
        bank.update(&a).unwrap();
        assert_eq!(bank.reference(), Some(&a));
        bank.update(&b).unwrap();
        assert_eq!(bank.reference(), Some(&a));
        assert_eq!(bank.updates_seen, 2);

        let mut bank = CorrelationBank::new(2, 1.0).unwrap();
        bank.update(&a).unwrap();
        bank.update(&b).unwrap();
        assert_eq!(bank.reference(), Some(&b));

        let mut bank = CorrelationBank::new(2, 0.25).unwrap();
        bank.update(&a).unwrap();
        bank.update(&b).unwrap();
        assert!((bank.reference().unwrap().get(0, 1) - 0.25).abs() < 1e-15);

        assert!(bank.update(&CorrMatrix::identity(3)).is_err());
        assert!(CorrelationBank::new(2, 1.5).is_err());
    }

    #[test]
    fn align_before_first_update_is_identity() {
        let bank = CorrelationBank::new(3, 0.1).unwrap();
        let c = CorrMatrix::new(3, vec![1.0, 0.1, 0.2, 0.1, 1.0, 0.3, 0.2, 0.3, 1.0]).unwrap();
        assert!(bank.align(&c, MatchMode::Exact).unwrap().is_identity());
    }
}
