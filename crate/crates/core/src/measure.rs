//! Weighted empirical measures on R^d.
//!
//! An [`EmpiricalMeasure`] stands in for an element of P_2(R^d): every
//! finite atom list has a finite second moment. Atoms are stored row-major in
//! one flat buffer so particle clouds can be wrapped without re-boxing each
//! state.

use std::io::Write;

use crate::error::{LabError, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Largest atom count accepted by the exact assignment solver for d > 1.
pub const MAX_ASSIGNMENT_ATOMS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
}

impl EmpiricalMeasure {
    /// Builds a measure from flat row-major atoms and explicit weights.
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(LabError::contract("measure dimension must be positive"));
        }
        if atoms.is_empty() || !atoms.len().is_multiple_of(dim) {
            return Err(LabError::contract(format!(
                "atom buffer of length {} is not a nonempty multiple of d = {dim}",
                atoms.len()
            )));
        }
        let m = atoms.len() / dim;
        if weights.len() != m {
            return Err(LabError::contract(format!(
                "{} weights for {m} atoms",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(LabError::contract("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(LabError::contract(format!("weights sum to {total}, not 1")));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(LabError::contract("atoms must be finite"));
        }
        let uniform = weights.iter().all(|w| *w == weights[0]);
        Ok(Self {
            dim,
            atoms,
            weights,
            uniform,
        })
    }

    /// Uniform weights 1/M over the given atoms.
    pub fn uniform(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 || atoms.is_empty() || !atoms.len().is_multiple_of(dim) {
            return Err(LabError::contract(format!(
                "atom buffer of length {} is not a nonempty multiple of d = {dim}",
                atoms.len()
            )));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(LabError::contract("atoms must be finite"));
        }
        let m = atoms.len() / dim;
        Ok(Self {
            dim,
            atoms,
            weights: vec![1.0 / m as f64; m],
            uniform: true,
        })
    }

    /// One-dimensional uniform measure.
    pub fn from_scalars(points: &[f64]) -> Result<Self> {
        Self::uniform(1, points.to_vec())
    }

    /// The point mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        assert!(!x.is_empty(), "dirac of an empty vector");
        Self {
            dim: x.len(),
            atoms: x.to_vec(),
            weights: vec![1.0],
            uniform: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks_exact(self.dim)
    }

    pub fn flat_atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (atom, w) in self.atoms().zip(&self.weights) {
            for (o, a) in out.iter_mut().zip(atom) {
                *o += w * a;
            }
        }
        out
    }

    /// mu(|.|^2)
    pub fn second_moment(&self) -> f64 {
        self.atoms()
            .zip(&self.weights)
            .map(|(atom, w)| w * atom.iter().map(|a| a * a).sum::<f64>())
            .sum()
    }

    /// Weighted average of a scalar function of the atoms.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms().zip(&self.weights).map(|(a, w)| w * f(a)).sum()
    }

    /// Pushforward by `Id + phi`, with the displacement given per atom as a
    /// flat row-major buffer. Weights are unchanged.
    pub fn perturb(&self, displacement: &[f64]) -> Result<Self> {
        if displacement.len() != self.atoms.len() {
            return Err(LabError::contract(format!(
                "displacement field has {} entries, expected {}",
                displacement.len(),
                self.atoms.len()
            )));
        }
        let atoms = self
            .atoms
            .iter()
            .zip(displacement)
            .map(|(a, p)| a + p)
            .collect();
        Ok(Self {
            atoms,
            ..self.clone()
        })
    }

    /// Pushforward by `Id + phi` for a displacement function of the atom.
    pub fn perturb_by(&self, phi: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut field = Vec::with_capacity(self.atoms.len());
        for atom in self.atoms() {
            let v = phi(atom);
            if v.len() != self.dim {
                return Err(LabError::contract("perturbation has the wrong dimension"));
            }
            field.extend(v);
        }
        self.perturb(&field)
    }

    /// One atom per row: `weight,component_0,..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["weight".to_string()];
        header.extend((0..self.dim).map(|i| format!("component_{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for (atom, w) in self.atoms().zip(&self.weights) {
            let mut row = vec![w.to_string()];
            row.extend(atom.iter().map(|a| a.to_string()));
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Io(std::io::Error::other(e))
}

/// Wasserstein-2 distance.
///
/// Exact in d = 1 for arbitrary weights via the quantile coupling. For d > 1
/// both measures must be uniform with the same atom count (at most
/// [`MAX_ASSIGNMENT_ATOMS`]); the optimal coupling is then a permutation and
/// is found by the Hungarian method.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(LabError::contract(format!(
            "W2 between dimensions {} and {}",
            mu.dim, nu.dim
        )));
    }
    if mu.dim == 1 {
        return Ok(quantile_w2_squared(mu, nu).max(0.0).sqrt());
    }
    if !mu.uniform || !nu.uniform || mu.len() != nu.len() {
        return Err(LabError::unsupported(
            "W2 in d > 1 needs uniform measures with equal atom counts",
        ));
    }
    if mu.len() > MAX_ASSIGNMENT_ATOMS {
        return Err(LabError::unsupported(format!(
            "W2 in d > 1 is limited to {MAX_ASSIGNMENT_ATOMS} atoms, got {}",
            mu.len()
        )));
    }
    let m = mu.len();
    let cost: Vec<f64> = (0..m)
        .flat_map(|i| {
            (0..m).map(move |j| {
                mu.atom(i)
                    .iter()
                    .zip(nu.atom(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
        })
        .collect();
    let (total, _) = hungarian(m, &cost);
    Ok((total / m as f64).max(0.0).sqrt())
}

fn sorted_1d(mu: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = mu.atoms.iter().copied().zip(mu.weights.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

fn quantile_w2_squared(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let a = sorted_1d(mu);
    let b = sorted_1d(nu);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut acc = 0.0;
    loop {
        let mass = ra.min(rb);
        let gap = a[i].0 - b[j].0;
        acc += mass * gap * gap;
        ra -= mass;
        rb -= mass;
        // Exhaust whichever side ran out; rounding leaves tiny residues.
        let a_done = ra <= 1e-15;
        let b_done = rb <= 1e-15;
        if a_done {
            i += 1;
        }
        if b_done {
            j += 1;
        }
        if i >= a.len() || j >= b.len() {
            break;
        }
        if a_done {
            ra = a[i].1;
        }
        if b_done {
            rb = b[j].1;
        }
    }
    acc
}

/// Minimum-cost perfect assignment on a dense `n x n` cost matrix.
///
/// Returns the optimal total cost and `assignment[row] = column`.
pub(crate) fn hungarian(n: usize, cost: &[f64]) -> (f64, Vec<usize>) {
    // Potentials formulation, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i * n + assignment[i]]).sum();
    (total, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force_w2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        let m = mu.len();
        permutations(m)
            .into_iter()
            .map(|perm| {
                (0..m)
                    .map(|i| {
                        mu.atom(i)
                            .iter()
                            .zip(nu.atom(perm[i]))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / m as f64
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    #[test]
    fn dirac_examples() {
        let zero = EmpiricalMeasure::dirac(&[0.0]);
        assert_eq!(zero.second_moment(), 0.0);
        let x = EmpiricalMeasure::dirac(&[1.7]);
        assert_eq!(wasserstein2(&x, &x).unwrap(), 0.0);
        let three = EmpiricalMeasure::dirac(&[3.0]);
        assert_eq!(wasserstein2(&zero, &three).unwrap(), 3.0);
        assert_eq!(wasserstein2(&three, &EmpiricalMeasure::dirac(&[-1.5])).unwrap(), 4.5);
    }

    #[test]
    fn two_atom_w2_matches_assignment_oracle() {
        // min over the two assignments: min(0 + 4, 1 + 9) / 2 = 2.
        let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
        let nu = EmpiricalMeasure::from_scalars(&[0.0, 3.0]).unwrap();
        let w = wasserstein2(&mu, &nu).unwrap();
        assert!((w - 2f64.sqrt()).abs() < 1e-15);
        assert!((brute_force_w2(&mu, &nu) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn moments() {
        let sym = EmpiricalMeasure::from_scalars(&[-1.0, 1.0]).unwrap();
        assert_eq!(sym.second_moment(), 1.0);
        assert_eq!(sym.mean(), vec![0.0]);
        let d = EmpiricalMeasure::dirac(&[2.0, -1.0]);
        assert_eq!(d.second_moment(), 5.0);
        assert_eq!(d.mean(), vec![2.0, -1.0]);
        let u = EmpiricalMeasure::from_scalars(&[1.0, 2.0, 3.0]).unwrap();
        assert!((u.mean()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn perturb_examples() {
        let mu = EmpiricalMeasure::from_scalars(&[0.5, -2.0, 4.0]).unwrap();
        assert_eq!(mu.perturb(&[0.0; 3]).unwrap(), mu);
        let one = EmpiricalMeasure::dirac(&[1.0]);
        assert_eq!(one.perturb_by(|x| x.to_vec()).unwrap(), EmpiricalMeasure::dirac(&[2.0]));
        let phi = [0.3, 1.2, -0.6];
        let shifted = mu.perturb(&phi).unwrap();
        let expected = mu.mean()[0] + phi.iter().sum::<f64>() / 3.0;
        assert!((shifted.mean()[0] - expected).abs() < 1e-14);
        assert!(mu.perturb(&[1.0]).is_err());
    }

    #[test]
    fn construction_rejects_bad_weights() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0, 1.0, 2.0], vec![1.0]).is_err());
        assert!(EmpiricalMeasure::uniform(1, vec![]).is_err());
    }

    #[test]
    fn weighted_quantile_coupling() {
        // mu = 0.25 d0 + 0.75 d2, nu = d1: every unit of mass moves distance 1.
        let mu = EmpiricalMeasure::new(1, vec![0.0, 2.0], vec![0.25, 0.75]).unwrap();
        let nu = EmpiricalMeasure::dirac(&[1.0]);
        assert!((wasserstein2(&mu, &nu).unwrap() - 1.0).abs() < 1e-15);
        // mu = 0.5 d0 + 0.5 d1 vs nu = 0.25 d0 + 0.75 d1: a quarter moves by 1.
        let mu = EmpiricalMeasure::new(1, vec![1.0, 0.0], vec![0.5, 0.5]).unwrap();
        let nu = EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.25, 0.75]).unwrap();
        assert!((wasserstein2(&mu, &nu).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn multidimensional_requirements() {
        let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::uniform(2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(wasserstein2(&a, &b), Err(LabError::Unsupported(_))));
        let w = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 1.0], vec![0.3, 0.7]).unwrap();
        assert!(matches!(wasserstein2(&a, &w), Err(LabError::Unsupported(_))));
        let c = EmpiricalMeasure::dirac(&[0.0]);
        assert!(matches!(wasserstein2(&a, &c), Err(LabError::Contract(_))));
    }

    #[test]
    fn uniform_w2_to_origin_is_the_second_moment() {
        let mu = EmpiricalMeasure::from_scalars(&[-1.5, 0.25, 2.0, 3.5]).unwrap();
        let w = wasserstein2(&mu, &EmpiricalMeasure::dirac(&[0.0])).unwrap();
        assert!((w * w - mu.second_moment()).abs() < 1e-12);
    }

    fn cloud(dim: usize, max_atoms: usize) -> impl Strategy<Value = EmpiricalMeasure> {
        (1..=max_atoms).prop_flat_map(move |m| {
            prop::collection::vec(-5.0f64..5.0, m * dim)
                .prop_map(move |atoms| EmpiricalMeasure::uniform(dim, atoms).unwrap())
        })
    }

    fn same_size_pair(dim: usize, max_atoms: usize) -> impl Strategy<Value = (EmpiricalMeasure, EmpiricalMeasure)> {
        (1..=max_atoms).prop_flat_map(move |m| {
            (
                prop::collection::vec(-5.0f64..5.0, m * dim),
                prop::collection::vec(-5.0f64..5.0, m * dim),
            )
                .prop_map(move |(a, b)| {
                    (
                        EmpiricalMeasure::uniform(dim, a).unwrap(),
                        EmpiricalMeasure::uniform(dim, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn metric_axioms_1d(a in cloud(1, 8), b in cloud(1, 8), c in cloud(1, 8)) {
            let ab = wasserstein2(&a, &b).unwrap();
            let ba = wasserstein2(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
            let bc = wasserstein2(&b, &c).unwrap();
            let ac = wasserstein2(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn second_moment_bounds_distance_to_origin(a in cloud(1, 10)) {
            let w = wasserstein2(&a, &EmpiricalMeasure::dirac(&[0.0])).unwrap();
            prop_assert!(w * w <= a.second_moment() * (1.0 + 1e-12) + 1e-300);
            prop_assert!((w * w - a.second_moment()).abs() <= 1e-12 * (1.0 + a.second_moment()));
        }

        #[test]
        fn quantile_coupling_matches_brute_force((a, b) in same_size_pair(1, 6)) {
            let fast = wasserstein2(&a, &b).unwrap();
            let slow = brute_force_w2(&a, &b);
            prop_assert!((fast - slow).abs() <= 1e-12 * (1.0 + slow));
        }

        #[test]
        fn hungarian_matches_brute_force_2d((a, b) in same_size_pair(2, 6)) {
            let fast = wasserstein2(&a, &b).unwrap();
            let slow = brute_force_w2(&a, &b);
            prop_assert!((fast - slow).abs() <= 1e-12 * (1.0 + slow));
        }
    }
}
