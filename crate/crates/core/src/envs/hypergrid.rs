use super::{DagEnv, StateId, Transition};
use crate::error::{invalid, Result};

/// Hypergrid reward at grid point `x` of a side-`side` grid.
///
/// `r0 + r1 * prod_i [|x_i/(H-1) - 0.5| > 0.25] + r2 * prod_i [|x_i/(H-1) - 0.5| > 0.4]`,
/// with strict inequalities.
pub fn hypergrid_reward(x: &[usize], side: usize, r0: f64, r1: f64, r2: f64) -> f64 {
    let scale = (side - 1) as f64;
    let outer = x.iter().all(|&xi| (xi as f64 / scale - 0.5).abs() > 0.25);
    let corner = x.iter().all(|&xi| (xi as f64 / scale - 0.5).abs() > 0.4);
    r0 + if outer { r1 } else { 0.0 } + if corner { r2 } else { 0.0 }
}

/// Default background reward for side `H`: `10^(-2 log2(H/8) - 1)`.
pub fn hypergrid_default_r0(side: usize) -> Result<f64> {
    if side <= 1 {
        return Err(invalid("hypergrid side must exceed 1"));
    }
    let exponent = -2.0 * (side as f64 / 8.0).log2() - 1.0;
    Ok(10f64.powf(exponent))
}

/// `{0..H-1}^D` grid. Action `i < D` increments coordinate `i`; action `D`
/// exits to the sink, so every grid point is terminating.
#[derive(Clone, Debug)]
pub struct Hypergrid {
    dim: usize,
    side: usize,
    r0: f64,
    r1: f64,
    r2: f64,
    strides: Vec<usize>,
    points: usize,
}

impl Hypergrid {
    pub fn new(dim: usize, side: usize, r0: f64, r1: f64, r2: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("hypergrid dimension must be positive"));
        }
        if side < 2 {
            return Err(invalid("hypergrid side must be at least 2"));
        }
        if !(r0 > 0.0 && r0.is_finite()) {
            return Err(invalid("hypergrid r0 must be positive"));
        }
        if !(r1 >= 0.0 && r2 >= 0.0 && r1.is_finite() && r2.is_finite()) {
            return Err(invalid("hypergrid r1, r2 must be nonnegative"));
        }
        let mut strides = Vec::with_capacity(dim);
        let mut points = 1usize;
        for _ in 0..dim {
            strides.push(points);
            points = points.checked_mul(side).ok_or_else(|| invalid("hypergrid too large"))?;
        }
        Ok(Self {
            dim,
            side,
            r0,
            r1,
            r2,
            strides,
            points,
        })
    }

    /// Grid with `r0` from [`hypergrid_default_r0`], `r1 = 0.5`, `r2 = 2.0`.
    pub fn standard(dim: usize, side: usize) -> Result<Self> {
        Self::new(dim, side, hypergrid_default_r0(side)?, 0.5, 2.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn rewards(&self) -> (f64, f64, f64) {
        (self.r0, self.r1, self.r2)
    }

    pub fn coords(&self, s: StateId) -> Vec<usize> {
        self.strides.iter().map(|&st| (s.0 / st) % self.side).collect()
    }

    pub fn state_of(&self, coords: &[usize]) -> StateId {
        StateId(coords.iter().zip(&self.strides).map(|(c, st)| c * st).sum())
    }

    fn coord(&self, s: StateId, i: usize) -> usize {
        (s.0 / self.strides[i]) % self.side
    }
}

impl DagEnv for Hypergrid {
    fn num_states(&self) -> usize {
        self.points + 1
    }

    fn sink(&self) -> StateId {
        StateId(self.points)
    }

    fn num_forward_actions(&self) -> usize {
        self.dim + 1
    }

    fn num_backward_actions(&self) -> usize {
        self.dim
    }

    fn forward_transitions(&self, s: StateId) -> Vec<Transition> {
        if s == self.sink() {
            return Vec::new();
        }
        let mut out: Vec<Transition> = (0..self.dim)
            .filter(|&i| self.coord(s, i) + 1 < self.side)
            .map(|i| Transition {
                action: i,
                state: StateId(s.0 + self.strides[i]),
            })
            .collect();
        out.push(Transition {
            action: self.dim,
            state: self.sink(),
        });
        out
    }

    fn backward_transitions(&self, s: StateId) -> Vec<Transition> {
        if s == self.sink() {
            return Vec::new();
        }
        (0..self.dim)
            .filter(|&i| self.coord(s, i) > 0)
            .map(|i| Transition {
                action: i,
                state: StateId(s.0 - self.strides[i]),
            })
            .collect()
    }

    fn is_terminating(&self, s: StateId) -> bool {
        s.0 < self.points
    }

    fn reward(&self, s: StateId) -> f64 {
        if !self.is_terminating(s) {
            return 0.0;
        }
        hypergrid_reward(&self.coords(s), self.side, self.r0, self.r1, self.r2)
    }

    fn feature_dim(&self) -> usize {
        self.dim * self.side
    }

    fn encode(&self, s: StateId, out: &mut [f64]) {
        out.fill(0.0);
        if s == self.sink() {
            return;
        }
        for i in 0..self.dim {
            out[i * self.side + self.coord(s, i)] = 1.0;
        }
    }

    fn max_trajectory_len(&self) -> usize {
        self.dim * (self.side - 1) + 1
    }

    fn terminating_states(&self) -> Vec<StateId> {
        (0..self.points).map(StateId).collect()
    }

    /// Cells where every coordinate clears the outer (0.4) band.
    fn is_mode(&self, s: StateId) -> bool {
        if !self.is_terminating(s) {
            return false;
        }
        let scale = (self.side - 1) as f64;
        (0..self.dim).all(|i| (self.coord(s, i) as f64 / scale - 0.5).abs() > 0.4)
    }

    /// Corner index: bit `i` is set when coordinate `i` lies in the upper half.
    fn mode_region(&self, s: StateId) -> Option<usize> {
        if !self.is_mode(s) {
            return None;
        }
        let half = (self.side - 1) as f64 / 2.0;
        Some((0..self.dim).fold(0, |acc, i| acc | (usize::from(self.coord(s, i) as f64 > half) << i)))
    }

    fn reachable_terminals(&self, s: StateId) -> Option<u64> {
        if s == self.sink() {
            return Some(0);
        }
        Some((0..self.dim).map(|i| (self.side - self.coord(s, i)) as u64).product())
    }

    fn describe(&self) -> String {
        format!("hypergrid(D={}, H={})", self.dim, self.side)
    }

    fn is_pure_terminal(&self, s: StateId) -> bool {
        // only the far corner has no increment left
        s.0 + 1 == self.points
    }
}
