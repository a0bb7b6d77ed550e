//! First- and quasi-second-order minimizers over flat parameter vectors.
//!
//! The L-BFGS routine follows the classic two-loop recursion with a
//! strong-Wolfe line search (cubic interpolation in the zoom phase).

use serde::{Deserialize, Serialize};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    pub history: usize,
    /// Iterations per call of [`Lbfgs::minimize_round`].
    pub max_iter: usize,
    /// Objective evaluations per round.
    pub max_eval: usize,
    pub lr: f64,
    pub tolerance_grad: f64,
    pub tolerance_change: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iter: 20,
            max_eval: 20,
            lr: 1.0,
            tolerance_grad: 1e-7,
            tolerance_change: 1e-9,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

/// Outcome of one optimization round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub evaluations: usize,
    pub iterations: usize,
    /// The line search could not produce a finite, non-increasing point.
    pub line_search_failed: bool,
}

/// Limited-memory BFGS with curvature history kept across rounds.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    pub config: LbfgsConfig,
    old_dirs: Vec<Vec<f64>>,
    old_steps: Vec<Vec<f64>>,
    ro: Vec<f64>,
    hessian_diag: f64,
}

impl Lbfgs {
    pub fn new(config: LbfgsConfig) -> Self {
        Self {
            config,
            old_dirs: Vec::new(),
            old_steps: Vec::new(),
            ro: Vec::new(),
            hessian_diag: 1.0,
        }
    }

    /// Drops the curvature history, e.g. when the objective changes.
    pub fn reset(&mut self) {
        self.old_dirs.clear();
        self.old_steps.clear();
        self.ro.clear();
        self.hessian_diag = 1.0;
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        if self.old_dirs.is_empty() {
            return q;
        }
        let k = self.old_dirs.len();
        let mut al = vec![0.0; k];
        for i in (0..k).rev() {
            al[i] = dot(&self.old_steps[i], &q) * self.ro[i];
            axpy(&mut q, -al[i], &self.old_dirs[i]);
        }
        q.iter_mut().for_each(|v| *v *= self.hessian_diag);
        for (i, a) in al.iter().enumerate() {
            let be = dot(&self.old_dirs[i], &q) * self.ro[i];
            axpy(&mut q, a - be, &self.old_steps[i]);
        }
        q
    }

    fn push_pair(&mut self, y: Vec<f64>, s: Vec<f64>) {
        let ys = dot(&y, &s);
        if ys > 1e-10 {
            if self.old_dirs.len() == self.config.history {
                self.old_dirs.remove(0);
                self.old_steps.remove(0);
                self.ro.remove(0);
            }
            self.hessian_diag = ys / dot(&y, &y);
            self.ro.push(1.0 / ys);
            self.old_dirs.push(y);
            self.old_steps.push(s);
        }
    }

    /// One round: up to `max_iter` iterations / `max_eval` evaluations of
    /// `f(x) -> (loss, grad)`. `x` is updated in place to the best point found.
    pub fn minimize_round<F>(&mut self, x: &mut [f64], mut f: F) -> crate::Result<RoundStats>
    where
        F: FnMut(&[f64]) -> crate::Result<(f64, Vec<f64>)>,
    {
        let cfg = self.config;
        let (mut loss, mut grad) = f(x)?;
        let initial_loss = loss;
        let mut evals = 1;
        let mut iters = 0;
        let mut failed = false;
        if !loss.is_finite() {
            return Err(crate::Error::Numeric("non-finite loss at round start".into()));
        }
        if grad.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= cfg.tolerance_grad {
            return Ok(RoundStats {
                initial_loss,
                final_loss: loss,
                evaluations: evals,
                iterations: 0,
                line_search_failed: false,
            });
        }
        let mut first_ever = self.old_dirs.is_empty();
        while iters < cfg.max_iter && evals < cfg.max_eval {
            iters += 1;
            let d = self.direction(&grad);
            let gtd = dot(&grad, &d);
            if gtd > -cfg.tolerance_change {
                break;
            }
            let t0 = if first_ever {
                first_ever = false;
                let l1: f64 = grad.iter().map(|v| v.abs()).sum();
                (1.0f64).min(1.0 / l1) * cfg.lr
            } else {
                cfg.lr
            };
            let budget = cfg.max_eval - evals;
            let ls = strong_wolfe(&mut f, x, t0, &d, loss, &grad, gtd, cfg.c1, cfg.c2, cfg.tolerance_change, budget)?;
            evals += ls.evals;
            if !(ls.loss.is_finite() && ls.loss <= loss) {
                failed = true;
                break;
            }
            let s: Vec<f64> = d.iter().map(|v| v * ls.step).collect();
            let y: Vec<f64> = ls.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            axpy(x, ls.step, &d);
            let change = (loss - ls.loss).abs();
            loss = ls.loss;
            grad = ls.grad;
            self.push_pair(y, s);
            if grad.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= cfg.tolerance_grad {
                break;
            }
            if d.iter().fold(0.0f64, |m, v| m.max(v.abs())) * ls.step <= cfg.tolerance_change {
                break;
            }
            if change < cfg.tolerance_change {
                break;
            }
        }
        Ok(RoundStats {
            initial_loss,
            final_loss: loss,
            evaluations: evals,
            iterations: iters,
            line_search_failed: failed,
        })
    }
}

struct LineSearchResult {
    loss: f64,
    grad: Vec<f64>,
    step: f64,
    evals: usize,
}

#[derive(Clone)]
struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: Option<(f64, f64)>) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        pos.clamp(lo, hi)
    } else {
        (lo + hi) / 2.0
    }
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    f: &mut F,
    x: &[f64],
    mut t: f64,
    d: &[f64],
    loss: f64,
    grad: &[f64],
    gtd: f64,
    c1: f64,
    c2: f64,
    tolerance_change: f64,
    max_evals: usize,
) -> crate::Result<LineSearchResult>
where
    F: FnMut(&[f64]) -> crate::Result<(f64, Vec<f64>)>,
{
    let at = |t: f64| -> Vec<f64> { x.iter().zip(d).map(|(xi, di)| xi + t * di).collect() };
    let d_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut best = Probe {
        t: 0.0,
        f: loss,
        g: grad.to_vec(),
        gtd,
    };
    if max_evals == 0 {
        return Ok(LineSearchResult {
            loss,
            grad: grad.to_vec(),
            step: 0.0,
            evals: 0,
        });
    }
    let (mut f_new, mut g_new) = f(&at(t))?;
    let mut evals = 1;
    let mut gtd_new = dot(&g_new, d);
    let mut prev = best.clone();
    let mut bracket: Option<(Probe, Probe)> = None;
    let mut done: Option<Probe> = None;
    let mut iter = 0;

    while evals < max_evals {
        let cur = Probe {
            t,
            f: f_new,
            g: g_new.clone(),
            gtd: gtd_new,
        };
        if !f_new.is_finite() {
            // shrink into the finite region
            bracket = Some((prev.clone(), cur));
            break;
        }
        if f_new > loss + c1 * t * gtd || (iter > 0 && f_new >= prev.f) {
            bracket = Some((prev.clone(), cur));
            break;
        }
        if gtd_new.abs() <= -c2 * gtd {
            done = Some(cur);
            break;
        }
        if gtd_new >= 0.0 {
            bracket = Some((prev.clone(), cur));
            break;
        }
        let min_step = t + 0.01 * (t - prev.t);
        let max_step = t * 10.0;
        let next = cubic_interpolate(prev.t, prev.f, prev.gtd, t, f_new, gtd_new, Some((min_step, max_step)));
        prev = cur;
        t = next;
        let (fv, gv) = f(&at(t))?;
        f_new = fv;
        g_new = gv;
        gtd_new = dot(&g_new, d);
        evals += 1;
        iter += 1;
    }

    if let Some(p) = done {
        return Ok(LineSearchResult {
            loss: p.f,
            grad: p.g,
            step: p.t,
            evals,
        });
    }

    let Some((mut lo, mut hi)) = bracket else {
        // ran out of evaluations while still expanding: keep the last finite point
        let last = if f_new.is_finite() && f_new <= prev.f {
            Probe {
                t,
                f: f_new,
                g: g_new,
                gtd: gtd_new,
            }
        } else {
            prev
        };
        return Ok(LineSearchResult {
            loss: last.f,
            grad: last.g,
            step: last.t,
            evals,
        });
    };
    if lo.f > hi.f || !lo.f.is_finite() {
        std::mem::swap(&mut lo, &mut hi);
    }

    // zoom: `lo` always holds the lowest finite value seen in the bracket
    let mut insuf_progress = false;
    while evals < max_evals {
        if (hi.t - lo.t).abs() * d_norm < tolerance_change {
            break;
        }
        let hi_finite = hi.f.is_finite();
        let mut tn = if hi_finite {
            cubic_interpolate(lo.t, lo.f, lo.gtd, hi.t, hi.f, hi.gtd, None)
        } else {
            (lo.t + hi.t) / 2.0
        };
        let (bmin, bmax) = (lo.t.min(hi.t), lo.t.max(hi.t));
        let eps = 0.1 * (bmax - bmin);
        if (bmax - tn).min(tn - bmin) < eps {
            if insuf_progress || tn >= bmax || tn <= bmin {
                tn = if (tn - bmax).abs() < (tn - bmin).abs() { bmax - eps } else { bmin + eps };
                insuf_progress = false;
            } else {
                insuf_progress = true;
            }
        } else {
            insuf_progress = false;
        }
        let (fv, gv) = f(&at(tn))?;
        evals += 1;
        let gtdv = dot(&gv, d);
        let probe = Probe {
            t: tn,
            f: fv,
            g: gv,
            gtd: gtdv,
        };
        if !fv.is_finite() || fv > loss + c1 * tn * gtd || fv >= lo.f {
            hi = probe;
        } else {
            if gtdv.abs() <= -c2 * gtd {
                lo = probe;
                break;
            }
            if gtdv * (hi.t - lo.t) >= 0.0 {
                hi = lo.clone();
            }
            lo = probe;
        }
    }
    if lo.f <= best.f {
        best = lo;
    }
    Ok(LineSearchResult {
        loss: best.f,
        grad: best.g,
        step: best.t,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> crate::Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let mut opt = Lbfgs::new(LbfgsConfig {
            max_iter: 100,
            max_eval: 200,
            ..LbfgsConfig::default()
        });
        let mut x = vec![-1.2, 1.0];
        for _ in 0..5 {
            opt.minimize_round(&mut x, rosenbrock).unwrap();
        }
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] - 1.0).abs() < 1e-4, "{x:?}");
    }

    #[test]
    fn lbfgs_respects_evaluation_budget() {
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let mut x = vec![-1.2, 1.0];
        let mut calls = 0;
        let stats = opt
            .minimize_round(&mut x, |p| {
                calls += 1;
                rosenbrock(p)
            })
            .unwrap();
        assert_eq!(stats.evaluations, calls);
        assert!(calls <= 20);
        assert!(stats.final_loss < stats.initial_loss);
    }

    #[test]
    fn lbfgs_quadratic_converges_fast() {
        // ill-conditioned diagonal quadratic, scaled like a heavily weighted loss
        let scales = [1e6, 1e3, 1.0, 1e-1];
        let f = |x: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
            let v = x.iter().zip(&scales).map(|(xi, s)| s * (xi - 1.0).powi(2)).sum();
            let g = x.iter().zip(&scales).map(|(xi, s)| 2.0 * s * (xi - 1.0)).collect();
            Ok((v, g))
        };
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let mut x = vec![0.0; 4];
        for _ in 0..5 {
            opt.minimize_round(&mut x, f).unwrap();
        }
        assert!(f(&x).unwrap().0 < 1e-8);
    }

    #[test]
    fn adam_moves_downhill() {
        let mut x = vec![3.0];
        let mut adam = Adam::new(0.1, 1);
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            adam.step(&mut x, &g);
        }
        assert!(x[0].abs() < 0.05);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let mut x = vec![0.0];
        let r = opt.minimize_round(&mut x, |_| Ok((f64::NAN, vec![0.0])));
        assert!(matches!(r, Err(crate::Error::Numeric(_))));
    }
}
