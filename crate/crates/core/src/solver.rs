//! Proximal gradient with a fixed step and spectral-norm estimation.

use rand::Rng;

use crate::error::{invalid, mismatch, Error, Result};
use crate::geometry::LinearOperator;
use crate::objectives::{FlatFieldEstimate, SmoothObjective};
use crate::priors::{project_nonneg, tv_eval_grad, TvConfig};
use crate::simulate::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerConfig {
    pub iters: usize,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { iters: 100, seed: 0 }
    }
}

fn start_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, "power-iteration", 0);
    let mut x: Vec<f64> = (0..dim).map(|_| 0.5 + rng.random::<f64>()).collect();
    normalize(&mut x);
    x
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Largest eigenvalue of a symmetric positive semidefinite map.
pub fn power_iteration_sym(dim: usize, mut apply: impl FnMut(&[f64], &mut [f64]), cfg: &PowerConfig) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    let mut x = start_vector(dim, cfg.seed);
    let mut y = vec![0.0; dim];
    let mut estimate = 0.0;
    for _ in 0..cfg.iters.max(1) {
        apply(&x, &mut y);
        // Rayleigh quotient with unit x
        estimate = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        if normalize(&mut y) == 0.0 {
            return 0.0;
        }
        std::mem::swap(&mut x, &mut y);
    }
    estimate
}

/// `||A||^2` by power iteration on `A^T A`.
pub fn power_iteration(op: &dyn LinearOperator, cfg: &PowerConfig) -> f64 {
    let mut tmp = vec![0.0; op.rows()];
    power_iteration_sym(
        op.cols(),
        |x, out| {
            op.apply(x, &mut tmp);
            op.apply_adjoint(&tmp, out);
        },
        cfg,
    )
}

/// Initial image of a solve.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    Image(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Step is `step_factor / L`; must lie in (0, 2).
    pub step_factor: f64,
    pub init: Init,
    pub record_every: usize,
    /// Use this Lipschitz constant instead of the objective's own.
    pub lipschitz_override: Option<f64>,
    /// Fail on any objective increase; only honored for `step_factor <= 1`.
    pub check_descent: bool,
    pub power: PowerConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            step_factor: 1.8,
            init: Init::Zeros,
            record_every: 1,
            lipschitz_override: None,
            check_descent: false,
            power: PowerConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return invalid("max_iters must be at least 1");
        }
        if !(self.step_factor > 0.0 && self.step_factor < 2.0) {
            return invalid(format!("step_factor must lie in (0, 2), got {}", self.step_factor));
        }
        if self.record_every == 0 {
            return invalid("record_every must be at least 1");
        }
        if let Some(l) = self.lipschitz_override {
            if !(l > 0.0 && l.is_finite()) {
                return invalid(format!("Lipschitz override must be positive, got {l}"));
            }
        }
        Ok(())
    }
}

/// Data term plus optional TV, with a nonnegativity (and optional support)
/// constraint handled by the prox.
pub struct Problem<'a> {
    pub data: &'a dyn SmoothObjective,
    pub tv: Option<TvConfig>,
    pub grid_n: usize,
    /// Pixels outside the support are held at zero.
    pub support: Option<&'a [bool]>,
}

impl<'a> Problem<'a> {
    pub fn new(data: &'a dyn SmoothObjective, grid_n: usize) -> Result<Self> {
        if data.dim() != grid_n * grid_n {
            return mismatch(format!("objective has dimension {}, grid {grid_n}x{grid_n}", data.dim()));
        }
        Ok(Self {
            data,
            tv: None,
            grid_n,
            support: None,
        })
    }

    pub fn with_tv(mut self, tv: TvConfig) -> Self {
        self.tv = (tv.gamma > 0.0).then_some(tv);
        self
    }

    pub fn with_support(mut self, support: &'a [bool]) -> Result<Self> {
        if support.len() != self.data.dim() {
            return mismatch("support mask length differs from image size");
        }
        self.support = Some(support);
        Ok(self)
    }

    /// Value and gradient of the smooth part.
    pub fn value_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mut f = self.data.value_grad(u, grad)?;
        if let Some(tv) = &self.tv {
            let (t, g) = tv_eval_grad(u, self.grid_n, tv.delta)?;
            f += tv.gamma * t;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += tv.gamma * b;
            }
        }
        Ok(f)
    }

    pub fn value(&self, u: &[f64]) -> Result<f64> {
        let mut f = self.data.value(u)?;
        if let Some(tv) = &self.tv {
            f += tv.gamma * tv_eval_grad(u, self.grid_n, tv.delta)?.0;
        }
        Ok(f)
    }

    pub fn lipschitz(&self, power: &PowerConfig) -> f64 {
        self.data.lipschitz(power) + self.tv.map_or(0.0, |tv| tv.lipschitz())
    }

    pub fn prox(&self, u: &mut [f64]) {
        project_nonneg(u);
        if let Some(mask) = self.support {
            for (v, &keep) in u.iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub metrics: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub image: Vec<f64>,
    pub flatfield: Option<FlatFieldEstimate>,
    pub history: Vec<IterationRecord>,
    pub lipschitz: f64,
    pub step: f64,
    pub iterations: usize,
}

/// Called at recorded iterations with the iterate and its flat-field
/// estimate (if the model has one); returns metric values to store.
pub type MetricCallback<'c> = dyn FnMut(usize, &[f64], Option<&FlatFieldEstimate>) -> Vec<f64> + 'c;

pub fn prox_gradient(problem: &Problem<'_>, cfg: &SolverConfig, mut metrics: Option<&mut MetricCallback<'_>>) -> Result<SolveResult> {
    cfg.validate()?;
    let dim = problem.data.dim();
    let mut u = match &cfg.init {
        Init::Zeros => vec![0.0; dim],
        Init::Image(x) => {
            if x.len() != dim {
                return mismatch(format!("initial image has {} values, expected {dim}", x.len()));
            }
            x.clone()
        }
    };
    problem.prox(&mut u);
    let lipschitz = match cfg.lipschitz_override {
        Some(l) => l,
        None => problem.lipschitz(&cfg.power),
    };
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::DegenerateInput(format!("Lipschitz constant is {lipschitz}")));
    }
    let step = cfg.step_factor / lipschitz;
    let check_descent = cfg.check_descent && cfg.step_factor <= 1.0;

    let mut grad = vec![0.0; dim];
    let mut history = Vec::new();
    let mut f = problem.value_grad(&u, &mut grad)?;
    if !f.is_finite() {
        return Err(Error::NonFinite { iteration: 0, snapshot: u });
    }
    let mut record = |k: usize, f: f64, u: &[f64], history: &mut Vec<IterationRecord>| -> Result<()> {
        let values = match metrics.as_deref_mut() {
            Some(cb) => {
                let ff = problem.data.flatfield(u)?;
                cb(k, u, ff.as_ref())
            }
            None => Vec::new(),
        };
        history.push(IterationRecord { iter: k, objective: f, metrics: values });
        Ok(())
    };
    record(0, f, &u, &mut history)?;

    for k in 1..=cfg.max_iters {
        for (x, g) in u.iter_mut().zip(&grad) {
            *x -= step * g;
        }
        problem.prox(&mut u);
        let f_new = problem.value_grad(&u, &mut grad)?;
        if !f_new.is_finite() {
            return Err(Error::NonFinite { iteration: k, snapshot: u });
        }
        if check_descent && f_new > f + 1e-12 * f.abs().max(1.0) {
            return Err(Error::DescentViolation { iteration: k, before: f, after: f_new });
        }
        f = f_new;
        if k % cfg.record_every == 0 || k == cfg.max_iters {
            record(k, f, &u, &mut history)?;
        }
    }

    let flatfield = problem.data.flatfield(&u)?;
    Ok(SolveResult {
        image: u,
        flatfield,
        history,
        lipschitz,
        step,
        iterations: cfg.max_iters,
    })
}

/// One stage of a warm-started sequence.
pub struct Stage<'a> {
    pub problem: Problem<'a>,
    pub config: SolverConfig,
}

/// Runs stages in order, starting each from the previous final image. The
/// first stage keeps its own `init`. Histories are concatenated with
/// iteration numbers counted across stages.
pub fn warm_start_chain(stages: &[Stage<'_>]) -> Result<SolveResult> {
    let (first, rest) = match stages.split_first() {
        Some(x) => x,
        None => return invalid("warm-start chain needs at least one stage"),
    };
    let mut result = prox_gradient(&first.problem, &first.config, None)?;
    for stage in rest {
        if stage.problem.data.dim() != result.image.len() {
            return mismatch("warm-start stages must share the image size");
        }
        let mut cfg = stage.config.clone();
        cfg.init = Init::Image(std::mem::take(&mut result.image));
        let offset = result.iterations;
        let next = prox_gradient(&stage.problem, &cfg, None)?;
        let mut history = std::mem::take(&mut result.history);
        history.extend(next.history.into_iter().skip(1).map(|mut h| {
            h.iter += offset;
            h
        }));
        result = SolveResult {
            history,
            iterations: offset + next.iterations,
            ..next
        };
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DenseMatrix;

    struct Quadratic {
        target: Vec<f64>,
    }

    impl SmoothObjective for Quadratic {
        fn dim(&self) -> usize {
            self.target.len()
        }
        fn value(&self, u: &[f64]) -> Result<f64> {
            Ok(0.5 * u.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        }
        fn value_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
            for ((g, a), b) in grad.iter_mut().zip(u).zip(&self.target) {
                *g = a - b;
            }
            self.value(u)
        }
        fn lipschitz(&self, _: &PowerConfig) -> f64 {
            1.0
        }
    }

    fn cfg(iters: usize, step: f64) -> SolverConfig {
        SolverConfig {
            max_iters: iters,
            step_factor: step,
            ..Default::default()
        }
    }

    #[test]
    fn power_iteration_diagonal() {
        let m = DenseMatrix::new(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let est = power_iteration(&m, &PowerConfig { iters: 100, seed: 1 });
        assert!((est - 9.0).abs() < 9e-6, "{est}");
        let id = DenseMatrix::identity(5);
        assert!((power_iteration(&id, &PowerConfig::default()) - 1.0).abs() < 1e-12);
        let zero = DenseMatrix::new(3, 4, vec![0.0; 12]).unwrap();
        assert_eq!(power_iteration(&zero, &PowerConfig::default()), 0.0);
    }

    #[test]
    fn power_iteration_is_deterministic() {
        let m = DenseMatrix::new(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.3, 2.0]).unwrap();
        let c = PowerConfig { iters: 7, seed: 9 };
        assert_eq!(power_iteration(&m, &c).to_bits(), power_iteration(&m, &c).to_bits());
    }

    #[test]
    fn scalar_quadratic_converges() {
        let q = Quadratic { target: vec![3.0] };
        let p = Problem::new(&q, 1).unwrap();
        let r = prox_gradient(&p, &cfg(60, 1.0), None).unwrap();
        assert!((r.image[0] - 3.0).abs() < 1e-8);
        let q = Quadratic { target: vec![-3.0] };
        let p = Problem::new(&q, 1).unwrap();
        let r = prox_gradient(&p, &cfg(60, 1.0), None).unwrap();
        assert_eq!(r.image[0], 0.0);
    }

    #[test]
    fn history_and_records() {
        let q = Quadratic { target: vec![1.0, 2.0, 3.0, 4.0] };
        let p = Problem::new(&q, 2).unwrap();
        let mut c = cfg(10, 0.5);
        c.record_every = 3;
        let mut seen = Vec::new();
        let mut cb = |k: usize, u: &[f64], _: Option<&FlatFieldEstimate>| {
            seen.push(k);
            vec![u[0]]
        };
        let r = prox_gradient(&p, &c, Some(&mut cb)).unwrap();
        let iters: Vec<usize> = r.history.iter().map(|h| h.iter).collect();
        assert_eq!(iters, vec![0, 3, 6, 9, 10]);
        assert_eq!(seen, iters);
        assert!(r.history.windows(2).all(|w| w[1].objective <= w[0].objective));
    }

    #[test]
    fn invalid_configs() {
        let q = Quadratic { target: vec![1.0] };
        let p = Problem::new(&q, 1).unwrap();
        assert!(prox_gradient(&p, &cfg(0, 1.0), None).is_err());
        assert!(prox_gradient(&p, &cfg(5, 2.0), None).is_err());
        assert!(prox_gradient(&p, &cfg(5, 0.0), None).is_err());
        assert!(warm_start_chain(&[]).is_err());
    }

    #[test]
    fn support_mask_pins_pixels() {
        let q = Quadratic { target: vec![1.0, 2.0, 3.0, 4.0] };
        let mask = [true, false, true, false];
        let p = Problem::new(&q, 2).unwrap().with_support(&mask).unwrap();
        let r = prox_gradient(&p, &cfg(80, 1.0), None).unwrap();
        assert_eq!(r.image[1], 0.0);
        assert_eq!(r.image[3], 0.0);
        assert!((r.image[2] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn single_stage_chain_matches_direct() {
        let q = Quadratic { target: vec![0.5, -1.0, 2.0, 0.1] };
        let c = cfg(17, 1.3);
        let direct = prox_gradient(&Problem::new(&q, 2).unwrap(), &c, None).unwrap();
        let chained = warm_start_chain(&[Stage { problem: Problem::new(&q, 2).unwrap(), config: c }]).unwrap();
        assert_eq!(direct, chained);
    }

    #[test]
    fn chain_counts_iterations_across_stages() {
        let q = Quadratic { target: vec![0.5, 1.0, 2.0, 0.1] };
        let stages = [
            Stage { problem: Problem::new(&q, 2).unwrap(), config: cfg(5, 1.0) },
            Stage { problem: Problem::new(&q, 2).unwrap(), config: cfg(7, 1.0) },
        ];
        let r = warm_start_chain(&stages).unwrap();
        assert_eq!(r.iterations, 12);
        assert_eq!(r.history.last().unwrap().iter, 12);
        assert_eq!(r.history.len(), 13);
    }
}
