//! Hands a [`ConicProgram`] to the Clarabel interior-point solver.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

use super::program::ConicProgram;

#[derive(Debug, Clone)]
pub(crate) struct RawSolution {
    pub status: SolverStatus,
    pub x: Vec<f64>,
    /// Duals in row order: equalities, inequalities, then cone blocks.
    pub z: Vec<f64>,
    pub obj_primal: f64,
    pub obj_dual: f64,
    pub iterations: u32,
    pub solve_time: f64,
    pub r_prim: f64,
    pub r_dual: f64,
}

fn csc(m: usize, n: usize, mut triplets: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in triplets {
        if last == Some((r, c)) {
            *nzval.last_mut().expect("previous entry") += v;
            continue;
        }
        rowval.push(r);
        nzval.push(v);
        colptr[c + 1] += 1;
        last = Some((r, c));
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

pub(crate) fn solve(prog: &ConicProgram, tol: f64, gap_tol: f64, max_iter: u32, verbose: bool) -> Result<RawSolution, String> {
    let n = prog.n_vars;
    let p_triplets: Vec<_> = prog
        .quad_diag
        .iter()
        .enumerate()
        .filter(|(_, q)| **q != 0.0)
        .map(|(i, q)| (i, i, *q))
        .collect();
    let p = csc(n, n, p_triplets);

    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut row = 0;
    for r in prog.equalities.iter().chain(&prog.inequalities) {
        a.extend(r.coeffs.iter().map(|(j, c)| (row, *j, *c)));
        b.push(r.rhs);
        row += 1;
    }
    let mut cones = vec![
        SupportedConeT::ZeroConeT(prog.equalities.len()),
        SupportedConeT::NonnegativeConeT(prog.inequalities.len()),
    ];
    for cone in &prog.cones {
        for comp in &cone.components {
            // slack = b - A x must equal coeffs . x + constant
            a.extend(comp.coeffs.iter().map(|(j, c)| (row, *j, -*c)));
            b.push(comp.constant);
            row += 1;
        }
        cones.push(SupportedConeT::SecondOrderConeT(cone.components.len()));
    }
    let a = csc(row, n, a);

    let settings = DefaultSettingsBuilder::default()
        .verbose(verbose)
        .max_iter(max_iter)
        .tol_gap_abs(gap_tol)
        .tol_gap_rel(gap_tol)
        .tol_feas(tol)
        .tol_ktratio(tol.max(1e-8))
        .presolve_enable(false)
        // Row equilibration mixes the tiny lateral-flow cone rows with the
        // O(1) voltage rows and measurably loosens the final cone slack.
        .equilibrate_enable(false)
        .build()
        .map_err(|e| e.to_string())?;
    let mut solver = DefaultSolver::new(&p, &prog.linear, &a, &b, &cones, settings).map_err(|e| e.to_string())?;
    solver.solve();
    let sol = &solver.solution;
    Ok(RawSolution {
        status: sol.status,
        x: sol.x.clone(),
        z: sol.z.clone(),
        obj_primal: sol.obj_val + prog.constant,
        obj_dual: sol.obj_val_dual + prog.constant,
        iterations: sol.iterations,
        solve_time: sol.solve_time,
        r_prim: sol.r_prim,
        r_dual: sol.r_dual,
    })
}
