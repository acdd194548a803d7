//! Exact small-instance ground truth: joint state graphs, Laplacian
//! spectra, random-walk cover times, and a central-difference gradient
//! checker.
//!
//! Graphs are enumerated exhaustively from the environment dynamics with the
//! box and switch frozen, so the spectrum of `L = D - A` can be computed
//! densely and compared against learned connectivity functions.

use crate::env::{normalize_cell, Cell, EnvConfig, PrimitiveAction};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("joint state space too large: {got} vertices exceeds cap {cap}")]
    TooLarge { got: usize, cap: usize },
    #[error("graph needs at least {need} vertices, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("graph is disconnected; cover time undefined")]
    Disconnected,
    #[error("eigensolver failed to converge for a {n}x{n} Laplacian")]
    EigenFailed { n: usize },
    #[error("environment error: {0}")]
    Env(#[from] crate::env::EnvError),
}

/// Enumerated joint state graph of a sub-group's positions.
#[derive(Clone, Debug)]
pub struct StateGraph {
    /// Joint cells per vertex, in group order.
    pub vertices: Vec<Vec<Cell>>,
    /// Normalized joint observation per vertex.
    pub observations: Vec<Vec<f64>>,
    /// Sorted neighbor lists, symmetric, no self loops.
    pub adj: Vec<Vec<u32>>,
    /// `step_table[v][a]` = vertex reached from `v` under joint action `a`.
    pub step_table: Vec<Vec<u32>>,
    pub n_joint_actions: usize,
}

impl StateGraph {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    /// Test/bench constructor from an explicit undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut sets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a != b {
                sets[a].insert(b as u32);
                sets[b].insert(a as u32);
            }
        }
        StateGraph {
            vertices: (0..n).map(|i| vec![(i, 0)]).collect(),
            observations: (0..n).map(|i| vec![i as f64]).collect(),
            adj: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            step_table: Vec::new(),
            n_joint_actions: 0,
        }
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_vertices();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &self.adj[v] {
                if !seen[u as usize] {
                    seen[u as usize] = true;
                    count += 1;
                    queue.push_back(u as usize);
                }
            }
        }
        count == n
    }

    /// One-step move set of the uniform walk at `v`: the joint-action row
    /// when the graph came from environment dynamics (self-loops from
    /// blocked moves included, making the walk lazy), otherwise the
    /// neighbor list.
    pub fn walk_moves(&self, v: usize) -> &[u32] {
        if self.step_table.is_empty() {
            &self.adj[v]
        } else {
            &self.step_table[v]
        }
    }

    /// Plain-text undirected edge list, one `u v` pair per line.
    pub fn edge_list_text(&self) -> String {
        let mut out = String::new();
        for v in 0..self.n_vertices() {
            for &u in &self.adj[v] {
                if (u as usize) > v {
                    out.push_str(&format!("{v} {u}\n"));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GraphBuildOptions {
    /// Frozen switch state; decides whether the gate is passable.
    pub switch_on: bool,
    /// Refuse enumeration beyond this many joint states.
    pub max_vertices: usize,
}

impl Default for GraphBuildOptions {
    fn default() -> Self {
        Self {
            switch_on: true,
            max_vertices: 200_000,
        }
    }
}

fn agent_next(config: &EnvConfig, cell: Cell, action: PrimitiveAction, switch_on: bool) -> Cell {
    let (dx, dy) = match action {
        PrimitiveAction::Up => (0i64, -1i64),
        PrimitiveAction::Down => (0, 1),
        PrimitiveAction::Left => (-1, 0),
        PrimitiveAction::Right => (1, 0),
        PrimitiveAction::Stay => (0, 0),
    };
    let nx = cell.0 as i64 + dx;
    let ny = cell.1 as i64 + dy;
    if nx < 0 || ny < 0 || nx as usize >= config.grid_width || ny as usize >= config.grid_height {
        return cell;
    }
    let next = (nx as usize, ny as usize);
    let blocked = if next == config.gate_cell {
        !switch_on
    } else {
        config.is_wall(next)
    };
    if blocked {
        cell
    } else {
        next
    }
}

/// Enumerates the reachable joint positions of `group`'s agents with the box
/// and switch frozen. Edges are one-joint-action reachability, symmetrized.
pub fn build_graph(
    config: &EnvConfig,
    group: &[usize],
    opts: &GraphBuildOptions,
) -> Result<StateGraph, SpectralError> {
    config.validate()?;
    let g = group.len();
    assert!(g >= 1, "group must be nonempty");
    let n_actions = 5usize.pow(g as u32);
    let start: Vec<Cell> = group.iter().map(|&i| config.agent_start_cells[i]).collect();

    let mut index: HashMap<Vec<Cell>, u32> = HashMap::new();
    let mut vertices: Vec<Vec<Cell>> = Vec::new();
    index.insert(start.clone(), 0);
    vertices.push(start);
    let mut queue: VecDeque<usize> = VecDeque::from([0usize]);
    let mut step_table: Vec<Vec<u32>> = Vec::new();

    while let Some(v) = queue.pop_front() {
        let cells = vertices[v].clone();
        let mut row = Vec::with_capacity(n_actions);
        for a in 0..n_actions {
            let mut next_cells = Vec::with_capacity(g);
            let mut code = a;
            for k in 0..g {
                let act = PrimitiveAction::from_index(code % 5);
                code /= 5;
                next_cells.push(agent_next(config, cells[k], act, opts.switch_on));
            }
            let id = match index.get(&next_cells) {
                Some(&id) => id,
                None => {
                    let id = vertices.len() as u32;
                    if vertices.len() >= opts.max_vertices {
                        return Err(SpectralError::TooLarge {
                            got: vertices.len() + 1,
                            cap: opts.max_vertices,
                        });
                    }
                    index.insert(next_cells.clone(), id);
                    vertices.push(next_cells);
                    queue.push_back(id as usize);
                    id
                }
            };
            row.push(id);
        }
        step_table.push(row);
    }

    let n = vertices.len();
    let mut sets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for (v, row) in step_table.iter().enumerate() {
        for &u in row {
            if u as usize != v {
                sets[v].insert(u);
                sets[u as usize].insert(v as u32);
            }
        }
    }
    let observations = vertices
        .iter()
        .map(|cells| {
            cells
                .iter()
                .flat_map(|&c| normalize_cell(config, c))
                .collect()
        })
        .collect();
    Ok(StateGraph {
        vertices,
        observations,
        adj: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        step_table,
        n_joint_actions: n_actions,
    })
}

/// Algebraic connectivity and its eigenvector.
#[derive(Clone, Debug)]
pub struct SpectralResult {
    pub lambda2: f64,
    /// Unit-norm eigenvector for `lambda2`, indexed by vertex.
    pub fiedler: Vec<f64>,
    /// Full spectrum, ascending.
    pub eigenvalues: Vec<f64>,
}

/// Dense eigendecomposition of the unnormalized Laplacian `L = D - A`.
pub fn fiedler(graph: &StateGraph) -> Result<SpectralResult, SpectralError> {
    let n = graph.n_vertices();
    if n < 2 {
        return Err(SpectralError::TooSmall { need: 2, got: n });
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for v in 0..n {
        l[(v, v)] = graph.degree(v) as f64;
        for &u in &graph.adj[v] {
            l[(v, u as usize)] = -1.0;
        }
    }
    let eig = l
        .symmetric_eigen_try(16 * n.max(32))
        .ok_or(SpectralError::EigenFailed { n })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let col = eig.eigenvectors.column(order[1]);
    Ok(SpectralResult {
        lambda2: eigenvalues[1],
        fiedler: col.iter().copied().collect(),
        eigenvalues,
    })
}

trait SymEigExt {
    fn symmetric_eigen_try(self, max_iter: usize) -> Option<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>>;
}

impl SymEigExt for DMatrix<f64> {
    fn symmetric_eigen_try(
        self,
        max_iter: usize,
    ) -> Option<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
        nalgebra::SymmetricEigen::try_new(self, f64::EPSILON, max_iter)
    }
}

/// An option usable inside the cover-time walk: initiation and termination
/// over vertices plus a one-step policy returning a joint action index.
pub struct WalkOption<'a> {
    pub initiation: Box<dyn Fn(usize) -> bool + 'a>,
    pub termination: Box<dyn Fn(usize) -> bool + 'a>,
    pub policy: Box<dyn Fn(usize, &mut ChaCha8Rng) -> usize + 'a>,
    pub max_steps: usize,
}

#[derive(Clone, Debug)]
pub struct CoverTimeEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
    /// Trials that exhausted the horizon before covering every vertex; their
    /// samples are censored at the horizon.
    pub censored: usize,
    pub samples: Vec<f64>,
}

/// Monte-Carlo cover time of a uniform random walk, optionally augmented
/// with one option. At each decision point the walker picks uniformly among
/// its primitive moves (see [`StateGraph::walk_moves`]) plus the option when
/// the current vertex lies in the option's initiation set; choosing the
/// option runs its policy through the transition table until termination,
/// counting every primitive step.
pub fn cover_time(
    graph: &StateGraph,
    start: usize,
    option: Option<&WalkOption>,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<CoverTimeEstimate, SpectralError> {
    let n = graph.n_vertices();
    if n == 0 {
        return Err(SpectralError::TooSmall { need: 1, got: 0 });
    }
    if !graph.is_connected() {
        return Err(SpectralError::Disconnected);
    }
    if option.is_some() {
        assert!(
            !graph.step_table.is_empty(),
            "options need the joint-action transition table"
        );
    }
    let mut samples = Vec::with_capacity(trials);
    let mut censored = 0usize;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(trial as u64 + 1)));
        let mut visited = vec![false; n];
        let mut n_visited = 1usize;
        visited[start] = true;
        let mut v = start;
        let mut steps = 0usize;
        while n_visited < n && steps < horizon {
            let moves = graph.walk_moves(v);
            let option_here = option
                .map(|o| (o.initiation)(v) && !(o.termination)(v))
                .unwrap_or(false);
            let n_choices = moves.len() + option_here as usize;
            let pick = rng.gen_range(0..n_choices);
            if pick < moves.len() {
                v = moves[pick] as usize;
                steps += 1;
                if !visited[v] {
                    visited[v] = true;
                    n_visited += 1;
                }
            } else {
                let o = option.unwrap();
                let mut in_option = 0usize;
                loop {
                    let a = (o.policy)(v, &mut rng);
                    v = graph.step_table[v][a] as usize;
                    steps += 1;
                    in_option += 1;
                    if !visited[v] {
                        visited[v] = true;
                        n_visited += 1;
                    }
                    if (o.termination)(v)
                        || in_option >= o.max_steps
                        || steps >= horizon
                        || n_visited == n
                    {
                        break;
                    }
                }
            }
        }
        if n_visited < n {
            censored += 1;
        }
        samples.push(steps as f64);
    }
    let mean = samples.iter().sum::<f64>() / trials.max(1) as f64;
    let var = if trials > 1 {
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (trials - 1) as f64
    } else {
        0.0
    };
    Ok(CoverTimeEstimate {
        mean,
        stderr: (var / trials.max(1) as f64).sqrt(),
        trials,
        censored,
        samples,
    })
}

/// Exact expected cover time of the uniform neighbor walk by first-step
/// analysis over `(vertex, visited-set)` states. Exponential in the vertex
/// count; intended for graphs of a dozen vertices or fewer.
pub fn exact_cover_time(graph: &StateGraph, start: usize) -> Result<f64, SpectralError> {
    let n = graph.n_vertices();
    if n == 0 {
        return Err(SpectralError::TooSmall { need: 1, got: 0 });
    }
    if n > 16 {
        return Err(SpectralError::TooLarge { got: n, cap: 16 });
    }
    if !graph.is_connected() {
        return Err(SpectralError::Disconnected);
    }
    let full = (1usize << n) - 1;
    // expectation[mask][v]; filled in decreasing popcount order
    let mut expectation = vec![vec![0.0f64; n]; full + 1];
    let mut masks: Vec<usize> = (1..=full).collect();
    masks.sort_by_key(|m| std::cmp::Reverse(m.count_ones()));
    for mask in masks {
        if mask == full {
            continue;
        }
        // members of `mask` form a linear system among themselves
        let members: Vec<usize> = (0..n).filter(|&v| mask & (1 << v) != 0).collect();
        let k = members.len();
        let mut a = DMatrix::<f64>::identity(k, k);
        let mut b = nalgebra::DVector::<f64>::from_element(k, 1.0);
        for (row, &v) in members.iter().enumerate() {
            let moves = graph.walk_moves(v);
            let p = 1.0 / moves.len() as f64;
            for &u in moves {
                let u = u as usize;
                let next_mask = mask | (1 << u);
                if next_mask == mask {
                    let col = members.iter().position(|&m| m == u).unwrap();
                    a[(row, col)] -= p;
                } else {
                    b[row] += p * expectation[next_mask][u];
                }
            }
        }
        let sol = a
            .lu()
            .solve(&b)
            .ok_or(SpectralError::EigenFailed { n: k })?;
        for (row, &v) in members.iter().enumerate() {
            expectation[mask][v] = sol[row];
        }
    }
    Ok(expectation[1 << start][start])
}

/// Outcome of a central finite-difference gradient comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub n_checked: usize,
}

/// Compares `analytic` against central differences of `eval` around
/// `theta0`. With `max_coords`, a deterministic evenly-strided subset of
/// coordinates is checked. Relative error per coordinate is
/// `|fd - analytic| / max(|fd|, |analytic|, 1e-6)`.
pub fn central_diff_check(
    theta0: &[f64],
    analytic: &[f64],
    eps: f64,
    max_coords: Option<usize>,
    mut eval: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(theta0.len(), analytic.len());
    let n = theta0.len();
    let stride = match max_coords {
        Some(k) if k < n => (n / k).max(1),
        _ => 1,
    };
    let mut theta = theta0.to_vec();
    let mut worst = 0.0f64;
    let mut worst_coord = 0;
    let mut checked = 0;
    let mut i = 0;
    while i < n {
        theta[i] = theta0[i] + eps;
        let up = eval(&theta);
        theta[i] = theta0[i] - eps;
        let down = eval(&theta);
        theta[i] = theta0[i];
        let fd = (up - down) / (2.0 * eps);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_coord = i;
        }
        checked += 1;
        i += stride;
    }
    GradCheckReport {
        max_rel_error: worst,
        worst_coord,
        n_checked: checked,
    }
}
