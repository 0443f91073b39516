//! Route-flow subproblem: with demand fixed, choose route flows
//! `q_i in g_i * simplex` minimising the whitened misfit. Solved with
//! monotone FISTA and Euclidean projection onto scaled simplices.

use super::covariance::Whitener;

/// Projects `v` onto `{q >= 0, sum q = total}` in place.
pub fn project_simplex(v: &mut [f64], total: f64) {
    if v.is_empty() {
        return;
    }
    if total <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - total) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// One free block of route flows: a pair with positive demand and at
/// least two routes.
pub(crate) struct Block {
    pub total: f64,
    /// Edge lists of the routes, in route order.
    pub routes: Vec<Vec<usize>>,
}

pub(crate) struct RouteProblem<'a> {
    pub whitener: &'a Whitener,
    /// `x_bar - (loads of all fixed routes)`
    pub target: Vec<f64>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy)]
pub struct InnerOptions {
    pub max_iterations: usize,
    /// Stop once the prox-gradient step is this small relative to the iterate.
    pub step_tol: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions {
            max_iterations: 300,
            step_tol: 1e-10,
        }
    }
}

impl RouteProblem<'_> {
    fn loads(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.target.len()];
        let mut k = 0;
        for b in &self.blocks {
            for r in &b.routes {
                let f = q[k];
                k += 1;
                if f != 0.0 {
                    for &a in r {
                        out[a] += f;
                    }
                }
            }
        }
        out
    }

    /// Gradient of `value` given the loads `B q`.
    fn gradient_from_loads(&self, loads: &[f64]) -> Vec<f64> {
        let resid: Vec<f64> = self.target.iter().zip(loads).map(|(t, l)| t - l).collect();
        let y = self.whitener.whiten_t(&self.whitener.whiten(&resid));
        self.route_sums(&y, -2.0)
    }

    fn value_from_loads(&self, loads: &[f64]) -> f64 {
        let resid: Vec<f64> = self.target.iter().zip(loads).map(|(t, l)| t - l).collect();
        self.whitener.quad(&resid)
    }

    fn route_sums(&self, y: &[f64], scale: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.dim());
        for b in &self.blocks {
            for r in &b.routes {
                g.push(scale * r.iter().map(|&a| y[a]).sum::<f64>());
            }
        }
        g
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.routes.len()).sum()
    }

    fn project(&self, q: &mut [f64]) {
        let mut k = 0;
        for b in &self.blocks {
            let n = b.routes.len();
            project_simplex(&mut q[k..k + n], b.total);
            k += n;
        }
    }

    /// Upper estimate of the gradient's Lipschitz constant,
    /// `2 * lambda_max(B' S^{-1} B)`, by power iteration.
    fn lipschitz(&self) -> f64 {
        let n = self.dim();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..50 {
            let bv = self.loads(&v);
            let y = self.whitener.whiten_t(&self.whitener.whiten(&bv));
            let w = self.route_sums(&y, 1.0);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm;
            v = w.into_iter().map(|x| x / norm).collect();
            if (next - lambda).abs() <= 1e-6 * next {
                lambda = next;
                break;
            }
            lambda = next;
        }
        2.0 * lambda * 1.1
    }

    /// Monotone FISTA from the feasible start `q0`. The returned point is
    /// never worse than `q0`. Edge loads of the iterates are carried along
    /// so each iteration needs one load evaluation and one route sum.
    pub fn solve(&self, q0: Vec<f64>, opts: InnerOptions) -> (Vec<f64>, f64) {
        let mut x = q0;
        let mut bx = self.loads(&x);
        let mut fx = self.value_from_loads(&bx);
        let lip = self.lipschitz();
        if lip == 0.0 || x.is_empty() {
            return (x, fx);
        }
        let mut y = x.clone();
        let mut by = bx.clone();
        let mut t = 1.0f64;
        for _ in 0..opts.max_iterations {
            let grad = self.gradient_from_loads(&by);
            let mut z: Vec<f64> = y.iter().zip(&grad).map(|(yi, gi)| yi - gi / lip).collect();
            self.project(&mut z);
            let step: f64 = z.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let scale = 1.0 + y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let bz = self.loads(&z);
            let fz = self.value_from_loads(&bz);
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let (c1, c2) = (t / t_next, (t - 1.0) / t_next);
            if fz <= fx {
                // x_next = z: y = z + c2 (z - x)
                y = z.iter().zip(&x).map(|(zi, xo)| zi + c2 * (zi - xo)).collect();
                by = bz.iter().zip(&bx).map(|(zi, xo)| zi + c2 * (zi - xo)).collect();
                x = z;
                bx = bz;
                fx = fz;
            } else {
                // x_next = x: y = x + c1 (z - x)
                y = x.iter().zip(&z).map(|(xo, zi)| xo + c1 * (zi - xo)).collect();
                by = bx.iter().zip(&bz).map(|(xo, zi)| xo + c1 * (zi - xo)).collect();
            }
            t = t_next;
            if step <= opts.step_tol * scale {
                break;
            }
        }
        (x, fx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn simplex_projection_cases() {
        let mut v = vec![0.2, 0.3, 0.5];
        project_simplex(&mut v, 1.0);
        assert!(v.iter().zip([0.2, 0.3, 0.5]).all(|(a, b)| (a - b).abs() < 1e-15));

        let mut v = vec![3.0, -1.0];
        project_simplex(&mut v, 1.0);
        assert_eq!(v, vec![1.0, 0.0]);

        let mut v = vec![1.0, 1.0];
        project_simplex(&mut v, 4.0);
        assert_eq!(v, vec![2.0, 2.0]);

        let mut v = vec![5.0, 1.0];
        project_simplex(&mut v, 0.0);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn parallel_routes_recover_split() {
        let w = Whitener::new(&DMatrix::identity(2, 2)).unwrap();
        let problem = RouteProblem {
            whitener: &w,
            target: vec![30.0, 70.0],
            blocks: vec![Block {
                total: 100.0,
                routes: vec![vec![0], vec![1]],
            }],
        };
        let (q, f) = problem.solve(vec![50.0, 50.0], InnerOptions::default());
        assert!((q[0] - 30.0).abs() < 1e-8);
        assert!((q[1] - 70.0).abs() < 1e-8);
        assert!(f < 1e-12);
    }
}
