//! Prior precision structures and hyperprior densities: intrinsic CAR over an
//! adjacency graph, second-order random walks over ordered levels, iid
//! heterogeneity, Gaussian fixed-effect priors, and gamma hyperpriors.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gmrf::SymmetricSparseMatrix;

/// Lattice of geographical units with symmetric neighbor sets.
#[derive(Debug, Clone)]
pub struct AdjacencyGraph {
    n_units: usize,
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    pub fn new(n_units: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n_units];
        for &(a, b) in edges {
            if a >= n_units || b >= n_units {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range for {n_units} units")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop on unit {a}")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        Ok(AdjacencyGraph { n_units, neighbors })
    }

    /// Parse the plain-text adjacency format: one line per unit,
    /// `unit_id n_neighbors id1 id2 ... idk`, ids 0-based. The symmetric
    /// closure is validated; the offending pair is named on failure.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 2 {
                return Err(Error::Graph(format!("line {}: expected `unit_id n_neighbors ids...`", lineno + 1)));
            }
            let id: usize = toks[0]
                .parse()
                .map_err(|_| Error::Graph(format!("line {}: bad unit id {:?}", lineno + 1, toks[0])))?;
            let k: usize = toks[1]
                .parse()
                .map_err(|_| Error::Graph(format!("line {}: bad neighbor count {:?}", lineno + 1, toks[1])))?;
            if toks.len() != 2 + k {
                return Err(Error::Graph(format!(
                    "line {}: unit {} declares {} neighbors but lists {}",
                    lineno + 1,
                    id,
                    k,
                    toks.len() - 2
                )));
            }
            let mut ids = Vec::with_capacity(k);
            for t in &toks[2..] {
                ids.push(
                    t.parse::<usize>()
                        .map_err(|_| Error::Graph(format!("line {}: bad neighbor id {t:?}", lineno + 1)))?,
                );
            }
            rows.push((id, ids));
        }
        let n = rows.len();
        let mut neighbors: Vec<Option<Vec<usize>>> = vec![None; n];
        for (id, ids) in rows {
            if id >= n {
                return Err(Error::Graph(format!("unit id {id} out of range: file has {n} lines so ids must be 0..{}", n - 1)));
            }
            if neighbors[id].is_some() {
                return Err(Error::Graph(format!("unit {id} listed twice")));
            }
            for &j in &ids {
                if j >= n {
                    return Err(Error::Graph(format!("unknown unit {j} in neighbor list of {id}")));
                }
                if j == id {
                    return Err(Error::Graph(format!("self-loop on unit {id}")));
                }
            }
            neighbors[id] = Some(ids);
        }
        let mut nb: Vec<Vec<usize>> = neighbors
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Graph(format!("unit {i} missing from adjacency file"))))
            .collect::<Result<_>>()?;
        for v in &mut nb {
            v.sort_unstable();
            v.dedup();
        }
        // symmetric closure check
        for i in 0..n {
            for &j in &nb[i] {
                if nb[j].binary_search(&i).is_err() {
                    return Err(Error::Graph(format!("asymmetric adjacency: {i} lists {j} but {j} does not list {i}")));
                }
            }
        }
        Ok(AdjacencyGraph { n_units: n, neighbors: nb })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn neighbors(&self, unit: usize) -> &[usize] {
        &self.neighbors[unit]
    }

    pub fn degree(&self, unit: usize) -> usize {
        self.neighbors[unit].len()
    }

    /// Connected components as sorted lists of unit indices.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n_units];
        let mut comps = Vec::new();
        for start in 0..self.n_units {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            let mut comp = Vec::new();
            seen[start] = true;
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// Serialize in the same plain-text format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n_units {
            s.push_str(&format!("{} {}", i, self.neighbors[i].len()));
            for &j in &self.neighbors[i] {
                s.push_str(&format!(" {j}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Gamma(shape, rate) prior on a precision.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperPrior {
    pub a: f64,
    pub b: f64,
}

impl HyperPrior {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a <= 0.0 || b <= 0.0 {
            return Err(Error::Domain(format!("gamma hyperprior needs a > 0, b > 0; got ({a}, {b})")));
        }
        Ok(HyperPrior { a, b })
    }
}

/// Q = tau (D - W): Q_ii = tau n_i, Q_ij = -tau for neighbors. Row sums are
/// exactly zero; rank is n - (number of connected components).
pub fn icar_precision(g: &AdjacencyGraph, tau: f64) -> Result<SymmetricSparseMatrix> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("ICAR precision needs tau > 0, got {tau}")));
    }
    for u in 0..g.n_units() {
        if g.degree(u) == 0 {
            return Err(Error::IsolatedUnit { unit: u });
        }
    }
    let mut entries = Vec::new();
    for i in 0..g.n_units() {
        entries.push((i, i, tau * g.degree(i) as f64));
        for &j in g.neighbors(i) {
            if j > i {
                entries.push((i, j, -tau));
            }
        }
    }
    SymmetricSparseMatrix::build(g.n_units(), entries)
}

/// Q = tau D2^T D2 with D2 the (m-2) x m second-difference operator. The
/// null space is spanned by the constant and linear vectors.
pub fn rw2_precision(m: usize, tau: f64) -> Result<SymmetricSparseMatrix> {
    if m < 3 {
        return Err(Error::TooFewLevels { m });
    }
    if tau <= 0.0 {
        return Err(Error::Domain(format!("RW2 precision needs tau > 0, got {tau}")));
    }
    let mut entries = Vec::new();
    // row r of D2 has (1, -2, 1) at columns (r, r+1, r+2)
    for r in 0..m - 2 {
        let c = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
        for (i, vi) in c {
            for (j, vj) in c {
                if j >= i {
                    entries.push((i, j, tau * vi * vj));
                }
            }
        }
    }
    SymmetricSparseMatrix::build(m, entries)
}

/// tau * I over m levels.
pub fn iid_precision(m: usize, tau: f64) -> Result<SymmetricSparseMatrix> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("iid precision needs tau > 0, got {tau}")));
    }
    SymmetricSparseMatrix::build(m, (0..m).map(|i| (i, i, tau)))
}

/// prior_precision * I over a fixed-effect block.
pub fn fixed_effect_precision(count: usize, prior_precision: f64) -> Result<SymmetricSparseMatrix> {
    if count == 0 {
        return Err(Error::Domain("fixed-effect block needs count >= 1".into()));
    }
    if prior_precision <= 0.0 {
        return Err(Error::Domain(format!("fixed-effect prior precision must be > 0, got {prior_precision}")));
    }
    SymmetricSparseMatrix::build(count, (0..count).map(|i| (i, i, prior_precision)))
}

/// log Gamma(tau; a, b) = a log b - log G(a) + (a-1) log tau - b tau.
pub fn log_gamma_density(tau: f64, hp: &HyperPrior) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("gamma density undefined at tau = {tau}")));
    }
    Ok(hp.a * hp.b.ln() - ln_gamma(hp.a) + (hp.a - 1.0) * tau.ln() - hp.b * tau)
}

/// Improper intrinsic GMRF log-density with the rank-based precision
/// exponent: ((m - rank_deficiency)/2) log tau - (tau/2) f^T Q f. The
/// tau-independent constant is dropped; callers that need an absolutely
/// normalized value add the structure constant separately.
pub fn intrinsic_log_density(
    q_structure: &SymmetricSparseMatrix,
    tau: f64,
    f: &[f64],
    rank_deficiency: usize,
) -> Result<f64> {
    if f.len() != q_structure.dim() {
        return Err(Error::DimensionMismatch { expected: q_structure.dim(), got: f.len() });
    }
    if tau <= 0.0 {
        return Err(Error::Domain(format!("intrinsic density needs tau > 0, got {tau}")));
    }
    let m = q_structure.dim();
    let rank = m.saturating_sub(rank_deficiency) as f64;
    Ok(0.5 * rank * tau.ln() - 0.5 * tau * q_structure.quadratic_form(f)?)
}

/// Proper multivariate normal log-density for a precision matrix tau * Q
/// where Q is full rank with known log-determinant at tau = 1.
pub fn gaussian_log_density(q: &SymmetricSparseMatrix, log_det_q: f64, f: &[f64]) -> Result<f64> {
    let m = q.dim() as f64;
    Ok(-0.5 * m * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det_q - 0.5 * q.quadratic_form(f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{jacobi_eigen, DenseSym};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph(n: usize) -> AdjacencyGraph {
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        AdjacencyGraph::new(n, &edges).unwrap()
    }

    fn rank_by_eigencount(m: &SymmetricSparseMatrix, tol: f64) -> usize {
        let n = m.dim();
        let mut d = DenseSym::zeros(n);
        let dense = m.to_dense();
        for i in 0..n {
            for j in 0..n {
                d.data[i * n + j] = dense[i * n + j];
            }
        }
        let (vals, _) = jacobi_eigen(&d);
        vals.iter().filter(|v| v.abs() > tol).count()
    }

    #[test]
    fn icar_two_node_path() {
        let q = icar_precision(&path_graph(2), 1.0).unwrap();
        assert_eq!(q.get(0, 0), 1.0);
        assert_eq!(q.get(0, 1), -1.0);
        assert_eq!(q.get(1, 1), 1.0);
    }

    #[test]
    fn icar_three_node_path_tau_two() {
        let q = icar_precision(&path_graph(3), 2.0).unwrap();
        let expect = [[2.0, -2.0, 0.0], [-2.0, 4.0, -2.0], [0.0, -2.0, 2.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(q.get(i, j), expect[i][j]);
            }
        }
    }

    #[test]
    fn icar_row_sums_zero_and_rank() {
        let g = path_graph(5);
        let q = icar_precision(&g, 1.7).unwrap();
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| q.get(i, j)).sum();
            assert_eq!(row, 0.0);
        }
        assert_eq!(rank_by_eigencount(&q, 1e-9), 4);
    }

    #[test]
    fn icar_rank_counts_components() {
        // two disjoint paths: 3 + 4 nodes -> rank = 7 - 2
        let edges = [(0, 1), (1, 2), (3, 4), (4, 5), (5, 6)];
        let g = AdjacencyGraph::new(7, &edges).unwrap();
        let q = icar_precision(&g, 1.0).unwrap();
        assert_eq!(rank_by_eigencount(&q, 1e-9), 5);
        assert_eq!(g.connected_components().len(), 2);
    }

    #[test]
    fn icar_rejects_isolated_unit() {
        let g = AdjacencyGraph::new(3, &[(0, 1)]).unwrap();
        match icar_precision(&g, 1.0) {
            Err(Error::IsolatedUnit { unit }) => assert_eq!(unit, 2),
            other => panic!("expected IsolatedUnit, got {other:?}"),
        }
    }

    #[test]
    fn rw2_three_levels() {
        let q = rw2_precision(3, 1.0).unwrap();
        let expect = [[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(q.get(i, j), expect[i][j]);
            }
        }
    }

    #[test]
    fn rw2_annihilates_constant_and_linear() {
        for (m, tau) in [(3usize, 1.0), (8, 2.5), (21, 0.3)] {
            let q = rw2_precision(m, tau).unwrap();
            let ones = vec![1.0; m];
            let lin: Vec<f64> = (1..=m).map(|i| i as f64).collect();
            for v in [ones, lin] {
                let qv = q.mul_vec(&v).unwrap();
                for x in qv {
                    assert!(x.abs() < 1e-12, "m={m} tau={tau}: {x}");
                }
            }
        }
    }

    #[test]
    fn rw2_rank_is_m_minus_two() {
        let q = rw2_precision(6, 3.0).unwrap();
        assert_eq!(rank_by_eigencount(&q, 1e-9), 4);
    }

    #[test]
    fn rw2_rejects_too_few_levels() {
        assert!(matches!(rw2_precision(2, 1.0), Err(Error::TooFewLevels { m: 2 })));
    }

    #[test]
    fn iid_block_is_scaled_identity() {
        let q = iid_precision(3, 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(q.get(i, j), if i == j { 2.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn iid_log_density_normalizer() {
        // at f = 0 the proper density is (m/2) log(tau / 2 pi)
        let m = 3;
        let tau = 2.0;
        let q = iid_precision(m, tau).unwrap();
        let log_det = (m as f64) * tau.ln();
        let ld = gaussian_log_density(&q, log_det, &[0.0; 3]).unwrap();
        let expect = 1.5 * (tau / (2.0 * std::f64::consts::PI)).ln();
        assert!((ld - expect).abs() < 1e-12);
    }

    #[test]
    fn iid_log_density_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 4;
        let tau = 1.6;
        let q = iid_precision(m, tau).unwrap();
        let f: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ld = gaussian_log_density(&q, (m as f64) * tau.ln(), &f).unwrap();
        // direct sum of independent normal log-densities
        let direct: f64 = f
            .iter()
            .map(|x| 0.5 * (tau / (2.0 * std::f64::consts::PI)).ln() - 0.5 * tau * x * x)
            .sum();
        assert!((ld - direct).abs() < 1e-10);
    }

    #[test]
    fn fixed_effect_examples() {
        let q = fixed_effect_precision(1, 0.01).unwrap();
        assert_eq!(q.get(0, 0), 0.01);
        let q7 = fixed_effect_precision(7, 0.01).unwrap();
        assert_eq!(q7.dim(), 7);
        for i in 0..7 {
            assert_eq!(q7.get(i, i), 0.01);
        }
        // density ratio between beta = 0 and beta = 1 is exp(precision/2)
        let prec = 0.01_f64;
        let d0 = -0.5 * prec * 0.0;
        let d1 = -0.5 * prec * 1.0;
        assert!(((d0 - d1).exp() - (prec / 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn gamma_density_closed_forms() {
        let hp = HyperPrior::new(1.0, 1.0).unwrap();
        assert!((log_gamma_density(1.0, &hp).unwrap() - (-1.0)).abs() < 1e-14);
        let hp = HyperPrior::new(2.0, 3.0).unwrap();
        assert!((log_gamma_density(1.0, &hp).unwrap() - (2.0 * 3.0_f64.ln() - 3.0)).abs() < 1e-13);
    }

    #[test]
    fn gamma_density_vague_prior_high_precision_value() {
        // frozen from a 50-digit evaluation of a ln b - lnGamma(a) - b at
        // a = b = 0.001, tau = 1
        let hp = HyperPrior::new(0.001, 0.001).unwrap();
        let v = log_gamma_density(1.0, &hp).unwrap();
        assert!((v - (-6.915086640662836)).abs() < 1e-10);
    }

    #[test]
    fn gamma_density_rejects_nonpositive_tau() {
        let hp = HyperPrior::new(1.0, 1.0).unwrap();
        assert!(log_gamma_density(0.0, &hp).is_err());
        assert!(log_gamma_density(-2.0, &hp).is_err());
    }

    #[test]
    fn intrinsic_density_rw2_zero_vector() {
        let q = rw2_precision(3, 1.0).unwrap();
        for tau in [0.5, 1.0, 4.0] {
            let v = intrinsic_log_density(&q, tau, &[0.0; 3], 2).unwrap();
            assert!((v - 0.5 * tau.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn intrinsic_density_null_space_invariance() {
        let g = path_graph(2);
        let q = icar_precision(&g, 1.0).unwrap();
        let v1 = intrinsic_log_density(&q, 2.0, &[0.7, 0.7], 1).unwrap();
        let v2 = intrinsic_log_density(&q, 2.0, &[-3.1, -3.1], 1).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn intrinsic_density_matches_second_difference_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 5;
        let tau = 1.9;
        let q = rw2_precision(m, 1.0).unwrap();
        let f: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = intrinsic_log_density(&q, tau, &f, 2).unwrap();
        let ss: f64 = (2..m).map(|j| (f[j] - 2.0 * f[j - 1] + f[j - 2]).powi(2)).sum();
        let direct = 0.5 * (m as f64 - 2.0) * tau.ln() - 0.5 * tau * ss;
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn convolution_sum_is_full_rank() {
        let g = path_graph(4);
        let mut q = icar_precision(&g, 1.3).unwrap();
        let iid = iid_precision(4, 0.2).unwrap();
        q.add_block(0, &iid).unwrap();
        assert_eq!(rank_by_eigencount(&q, 1e-9), 4);
        assert!(crate::gmrf::cholesky(&q, 0.0).is_ok());
    }

    #[test]
    fn adjacency_parse_round_trip_and_symmetry_check() {
        let text = "0 1 1\n1 2 0 2\n2 1 1\n";
        let g = AdjacencyGraph::parse(text).unwrap();
        assert_eq!(g.n_units(), 3);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.to_text(), text);

        let bad = "0 1 1\n1 0\n";
        match AdjacencyGraph::parse(bad) {
            Err(Error::Graph(msg)) => assert!(msg.contains("asymmetric"), "{msg}"),
            other => panic!("expected asymmetry error, got {other:?}"),
        }
    }

    #[test]
    fn adjacency_diagonal_dominance_of_icar() {
        let g = path_graph(6);
        let q = icar_precision(&g, 2.0).unwrap();
        for i in 0..6 {
            let off: f64 = (0..6).filter(|&j| j != i).map(|j| q.get(i, j).abs()).sum();
            assert!(q.get(i, i) >= off - 1e-12);
        }
    }
}
