//! Exact optimal stopping on small recombining binomial trees.
//!
//! Every conditional expectation is a two-point sum, so the Snell envelope,
//! the optimal exercise rule and the Doob decomposition `U = U_0 + M* - A*`
//! are available exactly. With `N <= 20` all `2^N` paths can be enumerated,
//! which turns pathwise identities into exhaustive checks.

use crate::dual_martingale::MartingaleMatrix;
use crate::market::{ModelSpec, PathBatch, PayoffMatrix, PayoffSpec};
use crate::{Error, Result};

pub const MAX_ENUMERATED_STEPS: usize = 20;

/// Single-asset recombining tree. Node `(n, j)` has price `s0 u^j d^(n-j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeModel {
    pub steps: usize,
    pub up: f64,
    pub down: f64,
    /// Risk-neutral probability of an up move.
    pub prob: f64,
    pub spot: f64,
    /// Growth of the risk-free asset over one step (`e^{r dt}`).
    pub growth: f64,
}

impl TreeModel {
    /// Tree with up probability 1/2: `u = g (1 + spread)`, `d = g (1 - spread)`.
    /// Enumerated paths are then equally likely.
    pub fn symmetric(steps: usize, spot: f64, growth: f64, spread: f64) -> Self {
        Self {
            steps,
            up: growth * (1.0 + spread),
            down: growth * (1.0 - spread),
            prob: 0.5,
            spot,
            growth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prob > 0.0 && self.prob < 1.0) {
            return Err(Error::InvalidTree(format!("up probability {} outside (0, 1)", self.prob)));
        }
        if !(self.up > self.down && self.down > 0.0) {
            return Err(Error::InvalidTree("need u > d > 0".into()));
        }
        if !(self.spot > 0.0 && self.growth > 0.0) {
            return Err(Error::InvalidTree("spot and growth must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidTree("need at least one step".into()));
        }
        Ok(())
    }

    pub fn price(&self, n: usize, j: usize) -> f64 {
        self.spot * self.up.powi(j as i32) * self.down.powi((n - j) as i32)
    }

    pub fn node_count(&self) -> usize {
        (self.steps + 1) * (self.steps + 2) / 2
    }
}

/// Snell envelope and Doob decomposition on every node.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSolution {
    pub steps: usize,
    pub prob: f64,
    /// Discounted payoff per node, `[n][j]`.
    pub z: Vec<Vec<f64>>,
    /// Snell envelope per node.
    pub u: Vec<Vec<f64>>,
    /// `E[U_{n+1} | node]` for `n < N`.
    pub continuation: Vec<Vec<f64>>,
    /// Exercise flag of the optimal rule (`Z >= continuation`, always at `N`).
    pub exercise: Vec<Vec<bool>>,
}

impl TreeSolution {
    pub fn value(&self) -> f64 {
        self.u[0][0]
    }

    /// `M*_{n+1} - M*_n` when leaving node `(n, j)` upward or downward.
    pub fn martingale_increment(&self, n: usize, j: usize, up: bool) -> f64 {
        let next = if up { self.u[n + 1][j + 1] } else { self.u[n + 1][j] };
        next - self.continuation[n][j]
    }

    /// `A*_{n+1} - A*_n`, known at node `(n, j)`.
    pub fn compensator_increment(&self, n: usize, j: usize) -> f64 {
        self.u[n][j] - self.continuation[n][j]
    }
}

/// Backward dynamic programming with an arbitrary payoff of the asset price.
pub fn solve_tree_with(tree: &TreeModel, payoff: impl Fn(f64) -> f64) -> Result<TreeSolution> {
    tree.validate()?;
    let n_steps = tree.steps;
    let z: Vec<Vec<f64>> = (0..=n_steps)
        .map(|n| {
            let bank = tree.growth.powi(n as i32);
            (0..=n).map(|j| payoff(tree.price(n, j)) / bank).collect()
        })
        .collect();
    let mut u = z.clone();
    let mut continuation: Vec<Vec<f64>> = (0..n_steps).map(|n| vec![0.0; n + 1]).collect();
    let mut exercise: Vec<Vec<bool>> = (0..=n_steps).map(|n| vec![n == n_steps; n + 1]).collect();
    for n in (0..n_steps).rev() {
        for j in 0..=n {
            let c = tree.prob * u[n + 1][j + 1] + (1.0 - tree.prob) * u[n + 1][j];
            continuation[n][j] = c;
            exercise[n][j] = z[n][j] >= c;
            u[n][j] = z[n][j].max(c);
        }
    }
    Ok(TreeSolution {
        steps: n_steps,
        prob: tree.prob,
        z,
        u,
        continuation,
        exercise,
    })
}

pub fn solve_tree(tree: &TreeModel, payoff: &PayoffSpec) -> Result<TreeSolution> {
    payoff.validate()?;
    payoff.check_dim(1)?;
    solve_tree_with(tree, |s| payoff.evaluate(&[s]))
}

/// One enumerated path: `moves[i]` is true for an up move at step `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePath {
    pub moves: Vec<bool>,
    pub probability: f64,
}

impl TreePath {
    /// Up-move count after `n` steps, i.e. the node index at date `n`.
    pub fn node(&self, n: usize) -> usize {
        self.moves[..n].iter().filter(|&&m| m).count()
    }
}

pub fn enumerate_paths(tree: &TreeModel) -> Result<Vec<TreePath>> {
    tree.validate()?;
    if tree.steps > MAX_ENUMERATED_STEPS {
        return Err(Error::TreeTooLarge(tree.steps));
    }
    Ok((0..1u32 << tree.steps)
        .map(|bits| {
            let moves: Vec<bool> = (0..tree.steps).map(|i| bits >> i & 1 == 1).collect();
            let ups = moves.iter().filter(|&&m| m).count() as i32;
            let probability = tree.prob.powi(ups) * (1.0 - tree.prob).powi(tree.steps as i32 - ups);
            TreePath { moves, probability }
        })
        .collect())
}

/// Pathwise quantities along one enumerated path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathValues {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub martingale: Vec<f64>,
    pub compensator: Vec<f64>,
    pub optimal_stop: usize,
}

pub fn path_values(solution: &TreeSolution, path: &TreePath) -> PathValues {
    let n_steps = solution.steps;
    let mut z = Vec::with_capacity(n_steps + 1);
    let mut u = Vec::with_capacity(n_steps + 1);
    let mut martingale = vec![0.0; n_steps + 1];
    let mut compensator = vec![0.0; n_steps + 1];
    let mut optimal_stop = None;
    for n in 0..=n_steps {
        let j = path.node(n);
        z.push(solution.z[n][j]);
        u.push(solution.u[n][j]);
        if optimal_stop.is_none() && solution.exercise[n][j] {
            optimal_stop = Some(n);
        }
        if n < n_steps {
            martingale[n + 1] = martingale[n] + solution.martingale_increment(n, j, path.moves[n]);
            compensator[n + 1] = compensator[n] + solution.compensator_increment(n, j);
        }
    }
    PathValues {
        z,
        u,
        martingale,
        compensator,
        optimal_stop: optimal_stop.unwrap_or(n_steps),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub max_error: f64,
    pub passed: bool,
    /// Index of the worst enumerated path, when the check is pathwise.
    pub worst_path: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub value: f64,
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &IdentityCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub const IDENTITY_TOLERANCE: f64 = 1e-10;

struct Worst {
    name: &'static str,
    err: f64,
    path: Option<usize>,
}

impl Worst {
    fn new(name: &'static str) -> Self {
        Self { name, err: 0.0, path: None }
    }

    fn update(&mut self, err: f64, path: usize) {
        if err > self.err || err.is_nan() {
            self.err = err;
            self.path = Some(path);
        }
    }

    fn finish(self) -> IdentityCheck {
        IdentityCheck {
            name: self.name,
            max_error: self.err,
            passed: self.err <= IDENTITY_TOLERANCE,
            worst_path: self.path,
        }
    }
}

/// Exhaustively verifies the optimal-stopping identities on every path.
pub fn exact_identity_checks(tree: &TreeModel, solution: &TreeSolution) -> Result<IdentityReport> {
    let paths = enumerate_paths(tree)?;
    let u0 = solution.value();
    let n_steps = solution.steps;

    let mut dominance = Worst::new("snell_dominates_payoff");
    let mut supermartingale = Worst::new("snell_supermartingale");
    let mut terminal = Worst::new("snell_terminal_equals_payoff");
    for n in 0..=n_steps {
        for j in 0..=n {
            dominance.update((solution.z[n][j] - solution.u[n][j]).max(0.0), 0);
            if n < n_steps {
                supermartingale.update((solution.continuation[n][j] - solution.u[n][j]).max(0.0), 0);
            } else {
                terminal.update((solution.u[n][j] - solution.z[n][j]).abs(), 0);
            }
        }
    }

    let mut compensator_at_stop = Worst::new("compensator_vanishes_at_optimal_stop");
    let mut compensator_monotone = Worst::new("compensator_nondecreasing");
    let mut stopped_identity = Worst::new("stopped_payoff_minus_martingale_equals_value");
    let mut dual_max = Worst::new("pathwise_dual_max_equals_value");
    let mut doob = Worst::new("doob_reconstruction");
    let mut prob_sum = 0.0;
    let mut dual_mean = 0.0;
    let mut stopped_snell = vec![0.0; n_steps + 1];
    for (i, path) in paths.iter().enumerate() {
        let v = path_values(solution, path);
        let tau = v.optimal_stop;
        compensator_at_stop.update(v.compensator[tau].abs(), i);
        for n in 0..n_steps {
            compensator_monotone.update((v.compensator[n] - v.compensator[n + 1]).max(0.0), i);
        }
        stopped_identity.update((v.z[tau] - v.martingale[tau] - u0).abs(), i);
        let max = (0..=n_steps)
            .map(|n| v.z[n] - v.martingale[n])
            .fold(f64::NEG_INFINITY, f64::max);
        dual_max.update((max - u0).abs(), i);
        for n in 0..=n_steps {
            doob.update((u0 + v.martingale[n] - v.compensator[n] - v.u[n]).abs(), i);
            stopped_snell[n] += path.probability * v.u[n.min(tau)];
        }
        prob_sum += path.probability;
        dual_mean += path.probability * max;
    }
    let mut stopped_martingale = Worst::new("stopped_snell_is_martingale");
    for (n, &e) in stopped_snell.iter().enumerate() {
        stopped_martingale.update((e - u0).abs(), n);
    }
    let mut expectation = Worst::new("expected_dual_max_equals_value");
    expectation.update((dual_mean - u0).abs(), 0);
    let mut probabilities = Worst::new("path_probabilities_sum_to_one");
    probabilities.update((prob_sum - 1.0).abs(), 0);

    let mut checks: Vec<IdentityCheck> = [
        dominance,
        supermartingale,
        terminal,
        compensator_at_stop,
        compensator_monotone,
        stopped_identity,
        dual_max,
        doob,
        stopped_martingale,
        expectation,
        probabilities,
    ]
    .into_iter()
    .map(Worst::finish)
    .collect();
    for c in &mut checks {
        if !matches!(
            c.name,
            "compensator_vanishes_at_optimal_stop"
                | "compensator_nondecreasing"
                | "stopped_payoff_minus_martingale_equals_value"
                | "pathwise_dual_max_equals_value"
                | "doob_reconstruction"
        ) {
            c.worst_path = None;
        }
    }
    Ok(IdentityReport { value: u0, checks })
}

/// Largest pathwise deviation from `U_n - M_n = max_{n <= p <= N} (Z_p - M_p)`,
/// where `U` is the literal recursion `U_N = Z_N`, `U_n = max(Z_n, U_{n+1} + M_n - M_{n+1})`.
/// Holds for any `M`, adapted or not.
pub fn proxy_identity_error(z: &PayoffMatrix, m: &MartingaleMatrix) -> f64 {
    let big_n = z.intervals();
    let mut worst: f64 = 0.0;
    for p in 0..z.len() {
        let mut u = z.get(p, big_n);
        let mut suffix = z.get(p, big_n) - m.get(p, big_n);
        worst = worst.max((u - m.get(p, big_n) - suffix).abs());
        for n in (0..big_n).rev() {
            u = z.get(p, n).max(u + m.get(p, n) - m.get(p, n + 1));
            suffix = suffix.max(z.get(p, n) - m.get(p, n));
            worst = worst.max((u - m.get(p, n) - suffix).abs());
        }
    }
    worst
}

/// Maturity used when presenting a tree as a [`PathBatch`] (`e^{r T} = g^N`).
pub const TREE_MATURITY: f64 = 1.0;

/// All `2^N` paths of a symmetric tree as a path batch with `Nbar = 1`, plus
/// payoffs and the exact Doob martingale along each path. Equal path weights
/// make sample averages over the batch exact expectations.
pub fn enumerated_batch(tree: &TreeModel, payoff: &PayoffSpec) -> Result<(PathBatch, PayoffMatrix, MartingaleMatrix)> {
    if tree.prob != 0.5 {
        return Err(Error::InvalidTree("enumerated batches need p = 1/2".into()));
    }
    let solution = solve_tree(tree, payoff)?;
    let paths = enumerate_paths(tree)?;
    let n_steps = tree.steps;
    let rate = tree.growth.ln() * n_steps as f64 / TREE_MATURITY;
    let model = ModelSpec::single(tree.spot, rate, 0.0, TREE_MATURITY, n_steps, 1);
    let mut values = Vec::with_capacity(paths.len() * (n_steps + 1));
    let mut z = Vec::with_capacity(paths.len() * (n_steps + 1));
    let mut m = Vec::with_capacity(paths.len() * (n_steps + 1));
    for path in &paths {
        let v = path_values(&solution, path);
        for n in 0..=n_steps {
            values.push(tree.price(n, path.node(n)));
        }
        z.extend_from_slice(&v.z);
        m.extend_from_slice(&v.martingale);
    }
    let batch = PathBatch::from_values(model, values, 0)?;
    let q = paths.len();
    Ok((
        batch,
        PayoffMatrix::from_rows(q, n_steps + 1, z)?,
        MartingaleMatrix::from_rows(q, n_steps + 1, m)?,
    ))
}
