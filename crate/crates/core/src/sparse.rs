//! ℓ1-regularized reconstruction of a query over a prototype dictionary and
//! the per-class residuals read from the sparse code.
//!
//! The solver minimizes `‖q − D c‖² + ρ‖c‖₁` with FISTA in Gram space
//! (`G = DᵀD`, `b = Dᵀq`), restarting momentum whenever the objective goes
//! up, and finishes with a sign-constrained least-squares polish on the
//! detected support.

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_norm, solve_linear, Matrix, Vector};

/// Prototype dictionary; column `j` of `atoms` is the prototype for class
/// `atom_labels[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Matrix,
    atom_labels: Vec<usize>,
    normalized: bool,
    gram: Matrix,
    lipschitz: f64,
}

impl Dictionary {
    pub fn new(atoms: Matrix, atom_labels: Vec<usize>) -> Result<Self> {
        if atoms.cols() == 0 || atoms.rows() == 0 {
            return Err(Error::argument("dictionary needs at least one atom"));
        }
        if atom_labels.len() != atoms.cols() {
            return Err(Error::shape(format!(
                "{} labels for {} atoms",
                atom_labels.len(),
                atoms.cols()
            )));
        }
        if !atoms.is_finite() {
            return Err(Error::numeric("dictionary has non-finite entries"));
        }
        let gram = atoms.gram();
        let lipschitz = lipschitz_bound(&gram);
        Ok(Dictionary {
            atoms,
            atom_labels,
            normalized: false,
            gram,
            lipschitz,
        })
    }

    /// Builds a dictionary from column vectors.
    pub fn from_atoms(columns: &[Vector], atom_labels: Vec<usize>) -> Result<Self> {
        let cols: Vec<&[f64]> = columns.iter().map(|c| c.as_slice()).collect();
        Dictionary::new(Matrix::from_columns(&cols)?, atom_labels)
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    pub fn atom(&self, j: usize) -> Vector {
        self.atoms.column(j)
    }

    pub fn atom_labels(&self) -> &[usize] {
        &self.atom_labels
    }

    pub fn dim(&self) -> usize {
        self.atoms.rows()
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.cols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Distinct class ids, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut ids = self.atom_labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub(crate) fn gram(&self) -> &Matrix {
        &self.gram
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim() {
            return Err(Error::shape(format!(
                "query has length {} but atoms have length {}",
                query.len(),
                self.dim()
            )));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("query has non-finite entries"));
        }
        Ok(())
    }
}

/// Largest eigenvalue of `2G` by 50 power iterations, padded and capped by
/// the Gershgorin bound. The solver doubles it if a step ever fails to
/// descend.
fn lipschitz_bound(gram: &Matrix) -> f64 {
    let k = gram.rows();
    let gershgorin = (0..k)
        .map(|i| gram.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let mut v: Vec<f64> = (0..k).map(|i| 1.0 + 0.1 * i as f64 / k as f64).collect();
    let mut estimate = 0.0;
    for _ in 0..50 {
        let w = gram.mul_vec(&v).expect("square gram");
        let n = l2_norm(&w);
        if n == 0.0 {
            break;
        }
        estimate = dot(&v, &w) / dot(&v, &v);
        v = w.iter().map(|x| x / n).collect();
    }
    let l = 2.0 * (estimate * 1.05).min(gershgorin).max(estimate);
    if l > 0.0 {
        l
    } else {
        1.0
    }
}

/// Scales each column to unit ℓ2 norm.
pub fn normalize_dictionary(d: &Dictionary) -> Result<Dictionary> {
    let mut atoms = d.atoms.clone();
    for j in 0..atoms.cols() {
        let n = l2_norm(&atoms.column(j));
        if n == 0.0 {
            return Err(Error::DegenerateAtom { column: j });
        }
        for i in 0..atoms.rows() {
            atoms[(i, j)] /= n;
        }
    }
    let mut out = Dictionary::new(atoms, d.atom_labels.clone())?;
    out.normalized = true;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub coeffs: Vector,
    pub rho: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Per-class reconstruction errors; `values[i]` belongs to `class_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    pub values: Vector,
    pub class_ids: Vec<usize>,
}

impl ResidualVector {
    pub fn new(values: Vec<f64>, class_ids: Vec<usize>) -> Result<Self> {
        if values.len() != class_ids.len() {
            return Err(Error::shape("residual values and class ids differ in length"));
        }
        Ok(ResidualVector {
            values: Vector::new(values),
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

struct GramProblem<'a> {
    gram: &'a Matrix,
    b: Vector,
    qq: f64,
    rho: f64,
}

impl GramProblem<'_> {
    fn gradient(&self, c: &[f64]) -> Vec<f64> {
        let gc = self.gram.mul_vec(c).expect("gram dims");
        gc.iter().zip(self.b.iter()).map(|(g, b)| 2.0 * (g - b)).collect()
    }

    fn objective(&self, c: &[f64]) -> f64 {
        let gc = self.gram.mul_vec(c).expect("gram dims");
        let quad = self.qq - 2.0 * dot(&self.b, c) + dot(c, &gc);
        quad.max(0.0) + self.rho * c.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn kkt(&self, c: &[f64]) -> f64 {
        kkt_from_gradient(c, &self.gradient(c), self.rho)
    }

    fn prox_step(&self, from: &[f64], lipschitz: f64) -> Vec<f64> {
        let g = self.gradient(from);
        from.iter()
            .zip(&g)
            .map(|(x, gi)| soft_threshold(x - gi / lipschitz, self.rho / lipschitz))
            .collect()
    }

    /// Re-solves the least-squares problem restricted to the support of `c`
    /// with the signs of `c` held fixed, pruning atoms whose sign flips.
    fn polish(&self, c: &[f64]) -> Option<Vec<f64>> {
        let mut support: Vec<usize> = (0..c.len()).filter(|&j| c[j] != 0.0).collect();
        while !support.is_empty() {
            let s = support.len();
            let mut sub = Matrix::zeros(s, s);
            for (a, &i) in support.iter().enumerate() {
                for (bb, &j) in support.iter().enumerate() {
                    sub[(a, bb)] = self.gram[(i, j)];
                }
            }
            let rhs: Vec<f64> = support
                .iter()
                .map(|&j| self.b[j] - 0.5 * self.rho * c[j].signum())
                .collect();
            let sol = solve_linear(&sub, &rhs)?;
            let keep: Vec<usize> = support
                .iter()
                .zip(sol.iter())
                .filter(|(&j, &v)| v != 0.0 && v.signum() == c[j].signum())
                .map(|(&j, _)| j)
                .collect();
            if keep.len() == s {
                let mut out = vec![0.0; c.len()];
                for (&j, &v) in support.iter().zip(sol.iter()) {
                    out[j] = v;
                }
                return Some(out);
            }
            support = keep;
        }
        None
    }
}

fn kkt_from_gradient(c: &[f64], grad: &[f64], rho: f64) -> f64 {
    c.iter()
        .zip(grad)
        .map(|(cj, gj)| {
            if *cj != 0.0 {
                (gj + rho * cj.signum()).abs()
            } else {
                (gj.abs() - rho).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Minimizes `‖query − D c‖² + ρ‖c‖₁`.
pub fn solve_lasso(
    query: &[f64],
    d: &Dictionary,
    rho: f64,
    opts: &LassoOptions,
) -> Result<SparseCode> {
    d.check_query(query)?;
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::argument(format!("rho must be finite and >= 0, got {rho}")));
    }
    if opts.max_iter == 0 {
        return Err(Error::argument("max_iter must be at least 1"));
    }
    let problem = GramProblem {
        gram: d.gram(),
        b: d.atoms.tr_mul_vec(query)?,
        qq: dot(query, query),
        rho,
    };
    let k = d.num_atoms();
    let mut lipschitz = d.lipschitz;
    let mut x = vec![0.0; k];
    let mut fx = problem.objective(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;
    let mut converged = problem.kkt(&x) <= opts.tol;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut x_new = problem.prox_step(&y, lipschitz);
        let mut f_new = problem.objective(&x_new);
        if f_new > fx {
            // momentum overshoot: restart from x with a plain proximal step
            t = 1.0;
            loop {
                x_new = problem.prox_step(&x, lipschitz);
                f_new = problem.objective(&x_new);
                if f_new <= fx + 1e-15 * fx.abs().max(1.0) {
                    break;
                }
                lipschitz *= 2.0;
            }
            y.clone_from(&x);
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_new;
        for j in 0..k {
            y[j] = x_new[j] + momentum * (x_new[j] - x[j]);
        }
        x = x_new;
        fx = f_new;
        t = t_new;
        converged = problem.kkt(&x) <= opts.tol;
    }

    let current = problem.kkt(&x);
    if let Some(polished) = problem.polish(&x) {
        let polished_kkt = problem.kkt(&polished);
        if polished_kkt < current {
            x = polished;
            converged = polished_kkt <= opts.tol;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("lasso iterates diverged"));
    }
    Ok(SparseCode {
        coeffs: Vector::new(x),
        rho,
        iterations_used: iterations,
        converged,
    })
}

/// Objective `‖query − D c‖² + ρ‖c‖₁` evaluated directly.
pub fn lasso_objective(query: &[f64], d: &Dictionary, coeffs: &[f64], rho: f64) -> Result<f64> {
    d.check_query(query)?;
    let recon = d.atoms.mul_vec(coeffs)?;
    let r2: f64 = query.iter().zip(recon.iter()).map(|(q, r)| (q - r).powi(2)).sum();
    Ok(r2 + rho * coeffs.iter().map(|v| v.abs()).sum::<f64>())
}

/// Largest violation of the subgradient optimality conditions at `code`.
pub fn kkt_residual(code: &SparseCode, query: &[f64], d: &Dictionary, rho: f64) -> Result<f64> {
    d.check_query(query)?;
    if code.coeffs.len() != d.num_atoms() {
        return Err(Error::shape(format!(
            "code has {} coefficients for {} atoms",
            code.coeffs.len(),
            d.num_atoms()
        )));
    }
    let recon = d.atoms.mul_vec(&code.coeffs)?;
    let diff: Vec<f64> = recon.iter().zip(query).map(|(r, q)| r - q).collect();
    let grad: Vec<f64> = d.atoms.tr_mul_vec(&diff)?.iter().map(|g| 2.0 * g).collect();
    Ok(kkt_from_gradient(&code.coeffs, &grad, rho))
}

/// `r(k) = ‖query − D δ_k(c)‖` for every class present in the dictionary.
pub fn class_residuals(query: &[f64], d: &Dictionary, code: &SparseCode) -> Result<ResidualVector> {
    d.check_query(query)?;
    if code.coeffs.len() != d.num_atoms() {
        return Err(Error::shape(format!(
            "code has {} coefficients for {} atoms",
            code.coeffs.len(),
            d.num_atoms()
        )));
    }
    let classes = d.classes();
    let mut values = Vec::with_capacity(classes.len());
    let mut recon = vec![0.0; d.dim()];
    for &class in &classes {
        recon.iter_mut().for_each(|v| *v = 0.0);
        for (j, &label) in d.atom_labels.iter().enumerate() {
            let cj = code.coeffs[j];
            if label != class || cj == 0.0 {
                continue;
            }
            for (i, r) in recon.iter_mut().enumerate() {
                *r += cj * d.atoms[(i, j)];
            }
        }
        let err: f64 = query
            .iter()
            .zip(&recon)
            .map(|(q, r)| (q - r).powi(2))
            .sum::<f64>()
            .sqrt();
        values.push(err);
    }
    ResidualVector::new(values, classes)
}
