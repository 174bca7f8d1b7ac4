//! Nelder–Mead simplex minimisation with restarts.

use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub max_iter: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    pub restarts: usize,
    /// Initial edge length relative to `1 + |x₀ᵢ|`.
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { max_iter: 5000, x_tol: 1e-10, f_tol: 1e-14, restarts: 2, initial_step: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimise `f` from `x0`.
///
/// Non-finite objective values are treated as +∞. Hitting `max_iter`
/// returns the best point so far with `converged = false`.
pub fn minimize_simplex<F>(f: F, x0: &DVector<f64>, opts: &SimplexOptions) -> SimplexResult
where
    F: Fn(&DVector<f64>) -> f64,
{
    let eval = |x: &DVector<f64>| {
        let v = f(x);
        if v.is_finite() { v } else { f64::INFINITY }
    };
    let mut best = run(&eval, x0, opts, opts.initial_step);
    let mut total = best.iterations;
    for _ in 0..opts.restarts {
        if !best.converged {
            break;
        }
        let again = run(&eval, &best.x, opts, opts.initial_step);
        total += again.iterations;
        let improvement = best.f - again.f;
        if again.f <= best.f {
            best = SimplexResult { converged: again.converged, ..again };
        }
        if improvement < opts.f_tol {
            break;
        }
    }
    best.iterations = total;
    best
}

fn run<F>(f: &F, x0: &DVector<f64>, opts: &SimplexOptions, step: f64) -> SimplexResult
where
    F: Fn(&DVector<f64>) -> f64,
{
    const REFLECT: f64 = 1.0;
    const EXPAND: f64 = 2.0;
    const CONTRACT: f64 = 0.5;
    const SHRINK: f64 = 0.5;

    let dim = x0.len();
    let mut pts: Vec<DVector<f64>> = Vec::with_capacity(dim + 1);
    pts.push(x0.clone());
    for i in 0..dim {
        let mut p = x0.clone();
        p[i] += step * (1.0 + x0[i].abs());
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(f).collect();

    let mut iter = 0;
    loop {
        // stable sort keeps x0 first among ties
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let f_spread = vals[dim] - vals[0];
        let x_spread = pts[1..]
            .iter()
            .map(|p| (p - &pts[0]).amax())
            .fold(0.0, f64::max);
        if (f_spread <= opts.f_tol || !f_spread.is_finite() && vals[0].is_infinite()) && x_spread <= opts.x_tol {
            return SimplexResult { x: pts[0].clone(), f: vals[0], converged: true, iterations: iter };
        }
        if iter >= opts.max_iter {
            return SimplexResult { x: pts[0].clone(), f: vals[0], converged: false, iterations: iter };
        }
        iter += 1;

        let centroid = pts[..dim].iter().fold(DVector::zeros(dim), |acc, p| acc + p) / dim as f64;
        let worst = pts[dim].clone();
        let xr = &centroid + (&centroid - &worst) * REFLECT;
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = &centroid + (&xr - &centroid) * EXPAND;
            let fe = f(&xe);
            if fe < fr {
                pts[dim] = xe;
                vals[dim] = fe;
            } else {
                pts[dim] = xr;
                vals[dim] = fr;
            }
            continue;
        }
        if fr < vals[dim - 1] {
            pts[dim] = xr;
            vals[dim] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[dim] {
            let xc = &centroid + (&xr - &centroid) * CONTRACT;
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = &centroid + (&worst - &centroid) * CONTRACT;
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < vals[dim].min(fr) {
            pts[dim] = xc;
            vals[dim] = fc;
            continue;
        }
        for i in 1..=dim {
            pts[i] = &pts[0] + (&pts[i] - &pts[0]) * SHRINK;
            vals[i] = f(&pts[i]);
        }
    }
}
