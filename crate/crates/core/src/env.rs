//! Goal-signalling gridworld.
//!
//! A speaker sees the goal cell, a listener sees its own cell, and only the
//! listener moves. Every step costs -1 unless it lands on the goal, which pays
//! +1 and ends the episode. Moves into a wall leave the listener in place.
//!
//! Coordinates put (0,0) at the bottom-left corner; `Up` increments `y`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, usage, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub message_alphabet_size: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::new(5, 5)
    }
}

impl GridConfig {
    /// Grid with the default horizon (longest Manhattan distance) and one
    /// symbol per goal cell.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            horizon: (width + height).saturating_sub(2).max(1),
            message_alphabet_size: width * height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(domain(format!(
                "grid must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if self.horizon == 0 {
            return Err(domain("horizon must be at least 1"));
        }
        if self.message_alphabet_size == 0 {
            return Err(domain("message alphabet must contain at least one symbol"));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn num_states(&self) -> usize {
        self.num_cells() * self.num_cells()
    }

    /// Length of the concatenated one-hot state features, `2W + 2H`.
    pub fn feature_len(&self) -> usize {
        2 * (self.width + self.height)
    }

    /// Widths of the four categorical factors: goal x, goal y, listener x, listener y.
    pub fn factor_sizes(&self) -> [usize; 4] {
        [self.width, self.height, self.width, self.height]
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.x < self.width && cell.y < self.height
    }

    pub fn cell_index(&self, cell: Cell) -> usize {
        cell.y * self.width + cell.x
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    /// All cells in index order (row-major from the bottom row).
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.num_cells()).map(|i| self.cell_at(i))
    }

    pub fn state_index(&self, state: State) -> usize {
        self.cell_index(state.listener) * self.num_cells() + self.cell_index(state.goal)
    }

    pub fn state_at(&self, index: usize) -> State {
        let n = self.num_cells();
        State::new(self.cell_at(index / n), self.cell_at(index % n))
    }

    pub fn states(&self) -> impl Iterator<Item = State> + '_ {
        (0..self.num_states()).map(|i| self.state_at(i))
    }

    /// States where an episode can start (listener away from the goal).
    pub fn start_states(&self) -> impl Iterator<Item = State> + '_ {
        self.states().filter(|s| !s.is_terminal())
    }

    pub fn check_state(&self, state: State) -> Result<()> {
        if !self.contains(state.listener) || !self.contains(state.goal) {
            return Err(domain(format!(
                "state {state} lies outside the {}x{} grid",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Cell reached by moving one step, clamped to the grid.
    pub fn moved(&self, cell: Cell, action: Action) -> Cell {
        let Cell { x, y } = cell;
        match action {
            Action::Up => Cell::new(x, (y + 1).min(self.height - 1)),
            Action::Down => Cell::new(x, y.saturating_sub(1)),
            Action::Left => Cell::new(x.saturating_sub(1), y),
            Action::Right => Cell::new((x + 1).min(self.width - 1), y),
        }
    }

    /// Advances the listener by one action.
    pub fn step(&self, state: State, action: Action) -> Result<StepOutcome> {
        self.check_state(state)?;
        if state.is_terminal() {
            return Err(usage(format!("cannot step terminated state {state}")));
        }
        let next_state = State::new(self.moved(state.listener, action), state.goal);
        let terminated = next_state.is_terminal();
        Ok(StepOutcome {
            next_state,
            reward: if terminated { 1 } else { -1 },
            terminated,
        })
    }

    /// Uniform draw over all (listener, goal) pairs with listener != goal.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<State> {
        self.validate()?;
        let n = self.num_cells();
        if n < 2 {
            return Err(domain("a single-cell grid has no start state"));
        }
        let listener = rng.random_range(0..n);
        let mut goal = rng.random_range(0..n - 1);
        if goal >= listener {
            goal += 1;
        }
        Ok(State::new(self.cell_at(listener), self.cell_at(goal)))
    }

    /// Uniform draw over every (listener, goal) pair, coincident ones included.
    pub fn sample_any<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        self.state_at(rng.random_range(0..self.num_states()))
    }

    /// `[one_hot(goal.x), one_hot(goal.y), one_hot(listener.x), one_hot(listener.y)]`.
    ///
    /// The first `W + H` entries are the speaker's observation, the rest the
    /// listener's.
    pub fn encode_state_features(&self, state: State) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let mut features = vec![0.0; self.feature_len()];
        for (offset, value) in self.factor_offsets().into_iter().zip(state.factors()) {
            features[offset + value] = 1.0;
        }
        Ok(features)
    }

    /// Inverse of [`encode_state_features`](Self::encode_state_features).
    /// Rejects anything that is not exactly four one-hot blocks.
    pub fn decode_state_features(&self, features: &[f64]) -> Result<State> {
        if features.len() != self.feature_len() {
            return Err(domain(format!(
                "expected {} features, got {}",
                self.feature_len(),
                features.len()
            )));
        }
        let mut factors = [0usize; 4];
        for (k, (offset, size)) in self
            .factor_offsets()
            .into_iter()
            .zip(self.factor_sizes())
            .enumerate()
        {
            let block = &features[offset..offset + size];
            let ones: Vec<usize> = (0..size).filter(|&i| block[i] == 1.0).collect();
            let zeros = block.iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros != size - 1 {
                return Err(domain(format!("feature block {k} is not one-hot")));
            }
            factors[k] = ones[0];
        }
        Ok(State::from_factors(factors))
    }

    /// Argmax decoding of a (possibly relaxed) feature vector.
    pub fn argmax_state(&self, features: &[f64]) -> State {
        let mut factors = [0usize; 4];
        for (k, (offset, size)) in self
            .factor_offsets()
            .into_iter()
            .zip(self.factor_sizes())
            .enumerate()
        {
            factors[k] = argmax(&features[offset..offset + size]);
        }
        State::from_factors(factors)
    }

    pub fn factor_offsets(&self) -> [usize; 4] {
        let [a, b, c, _] = self.factor_sizes();
        [0, a, a + b, a + b + c]
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Grid cell; serialised as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl From<[usize; 2]> for Cell {
    fn from([x, y]: [usize; 2]) -> Self {
        Cell::new(x, y)
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Listener and goal positions. Also the joint observation: the speaker sees
/// `goal`, the listener sees `listener`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub listener: Cell,
    pub goal: Cell,
}

impl State {
    pub const fn new(listener: Cell, goal: Cell) -> Self {
        Self { listener, goal }
    }

    pub fn is_terminal(&self) -> bool {
        self.listener == self.goal
    }

    pub fn distance(&self) -> usize {
        self.listener.manhattan(self.goal)
    }

    /// `[goal.x, goal.y, listener.x, listener.y]`
    pub fn factors(&self) -> [usize; 4] {
        [self.goal.x, self.goal.y, self.listener.x, self.listener.y]
    }

    pub fn from_factors([gx, gy, lx, ly]: [usize; 4]) -> Self {
        Self::new(Cell::new(lx, ly), Cell::new(gx, gy))
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "listener {} goal {}", self.listener, self.goal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| domain(format!("action index {index} is not in 0..4")))
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        };
        f.write_str(name)
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let index = u8::deserialize(d)?;
        Action::from_index(index as usize).map_err(serde::de::Error::custom)
    }
}

/// An abstract message symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Message(pub usize);

impl Message {
    pub fn new(symbol: usize, alphabet_size: usize) -> Result<Self> {
        if symbol >= alphabet_size {
            return Err(domain(format!(
                "message symbol {symbol} outside alphabet of size {alphabet_size}"
            )));
        }
        Ok(Self(symbol))
    }

    pub fn symbol(self) -> usize {
        self.0
    }

    /// Fixed-width binary rendering; only defined for power-of-two alphabets.
    pub fn to_bits(self, alphabet_size: usize) -> Option<String> {
        if !alphabet_size.is_power_of_two() || self.0 >= alphabet_size {
            return None;
        }
        let width = alphabet_size.trailing_zeros() as usize;
        if width == 0 {
            return Some(String::new());
        }
        Some(format!("{:0width$b}", self.0, width = width))
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: i32,
    pub terminated: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn grid() -> GridConfig {
        GridConfig::default()
    }

    fn st(lx: usize, ly: usize, gx: usize, gy: usize) -> State {
        State::new(Cell::new(lx, ly), Cell::new(gx, gy))
    }

    #[test]
    fn default_config() {
        let g = grid();
        assert_eq!((g.width, g.height, g.horizon, g.message_alphabet_size), (5, 5, 8, 25));
        assert_eq!(g.feature_len(), 20);
    }

    #[test]
    fn step_examples() {
        let g = grid();
        let out = g.step(st(0, 0, 1, 0), Action::Right).unwrap();
        assert_eq!(out.next_state.listener, Cell::new(1, 0));
        assert_eq!((out.reward, out.terminated), (1, true));

        let out = g.step(st(2, 4, 0, 0), Action::Up).unwrap();
        assert_eq!(out.next_state.listener, Cell::new(2, 4));
        assert_eq!((out.reward, out.terminated), (-1, false));

        let out = g.step(st(2, 2, 4, 4), Action::Right).unwrap();
        assert_eq!(out.next_state.listener, Cell::new(3, 2));
        assert_eq!((out.reward, out.terminated), (-1, false));
    }

    #[test]
    fn step_errors() {
        let g = grid();
        assert!(matches!(g.step(st(5, 0, 1, 1), Action::Up), Err(crate::Error::Domain(_))));
        assert!(matches!(g.step(st(1, 1, 1, 1), Action::Up), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn step_properties_exhaustive() {
        let g = grid();
        for s in g.start_states() {
            for a in Action::ALL {
                let out = g.step(s, a).unwrap();
                assert_eq!(out, g.step(s, a).unwrap());
                assert_eq!(out.next_state.goal, s.goal);
                assert_eq!(out.terminated, out.next_state.is_terminal());
                assert_eq!(out.reward == 1, out.terminated);
                let d0 = s.distance() as i64;
                let d1 = out.next_state.distance() as i64;
                assert!(d0 - d1 <= 1 && d1 - d0 <= 1);
            }
        }
    }

    #[test]
    fn episode_return_is_two_minus_length() {
        let g = grid();
        let mut s = st(0, 0, 3, 2);
        let mut ret = 0;
        let mut k = 0;
        for a in [Action::Right, Action::Up, Action::Right, Action::Up, Action::Right] {
            let out = g.step(s, a).unwrap();
            ret += out.reward;
            k += 1;
            s = out.next_state;
            if out.terminated {
                break;
            }
        }
        assert_eq!(k, 5);
        assert_eq!(ret, 2 - k);
    }

    #[test]
    fn feature_examples() {
        let g = grid();
        let hot = |v: Vec<f64>| -> Vec<usize> { (0..v.len()).filter(|&i| v[i] == 1.0).collect() };
        assert_eq!(hot(g.encode_state_features(st(0, 0, 0, 0)).unwrap()), vec![0, 5, 10, 15]);
        assert_eq!(hot(g.encode_state_features(st(1, 3, 4, 2)).unwrap()), vec![4, 7, 11, 18]);
    }

    #[test]
    fn feature_round_trip_all_states() {
        let g = grid();
        let mut seen = std::collections::HashSet::new();
        for s in g.states() {
            let f = g.encode_state_features(s).unwrap();
            assert_eq!(g.decode_state_features(&f).unwrap(), s);
            assert_eq!(g.argmax_state(&f), s);
            assert!(seen.insert(f.iter().map(|v| *v as u8).collect::<Vec<_>>()));
        }
        assert_eq!(seen.len(), 625);
        let mut bad = g.encode_state_features(st(0, 0, 0, 0)).unwrap();
        bad[1] = 1.0;
        assert!(g.decode_state_features(&bad).is_err());
    }

    #[test]
    fn sample_initial_small_grids() {
        let g = GridConfig::new(1, 2);
        let mut rng = seeded(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let s = g.sample_initial(&mut rng).unwrap();
            assert!(!s.is_terminal());
            seen.insert(s);
        }
        assert_eq!(seen.len(), 2);
        assert!(GridConfig::new(1, 1).sample_initial(&mut rng).is_err());
    }

    #[test]
    fn sample_initial_deterministic() {
        let g = grid();
        let a: Vec<_> = {
            let mut r = seeded(11);
            (0..50).map(|_| g.sample_initial(&mut r).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut r = seeded(11);
            (0..50).map(|_| g.sample_initial(&mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sample_initial_is_uniform_chi_square() {
        // 600 bins, 599 dof. The 0.99 quantile of chi2(599) is about 681.6
        // (Wilson-Hilferty: 599 * (1 - 2/(9*599) + 2.326*sqrt(2/(9*599)))^3).
        let g = grid();
        let mut rng = seeded(2024);
        let n = 600_000;
        let mut counts = vec![0usize; g.num_states()];
        for _ in 0..n {
            counts[g.state_index(g.sample_initial(&mut rng).unwrap())] += 1;
        }
        let expected = n as f64 / 600.0;
        let mut chi2 = 0.0;
        for s in g.states() {
            let c = counts[g.state_index(s)];
            if s.is_terminal() {
                assert_eq!(c, 0);
            } else {
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
        let dof = 599.0f64;
        let k = 2.0 / (9.0 * dof);
        let crit = dof * (1.0 - k + 2.326 * k.sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
    }

    #[test]
    fn message_rendering() {
        assert_eq!(Message(3).to_bits(16).as_deref(), Some("0011"));
        assert_eq!(Message(3).to_bits(25), None);
        assert!(Message::new(25, 25).is_err());
    }
}
