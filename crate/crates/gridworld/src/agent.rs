use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::world::World;

/// Compass heading; north is `−y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    /// Unit step forward.
    pub fn forward(self) -> (i64, i64) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    /// Unit step to the agent's right.
    pub fn right(self) -> (i64, i64) {
        match self {
            Heading::N => (1, 0),
            Heading::E => (0, 1),
            Heading::S => (-1, 0),
            Heading::W => (0, -1),
        }
    }

    pub fn turn_left(self) -> Self {
        match self {
            Heading::N => Heading::W,
            Heading::W => Heading::S,
            Heading::S => Heading::E,
            Heading::E => Heading::N,
        }
    }

    pub fn turn_right(self) -> Self {
        self.turn_left().turn_left().turn_left()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
}

impl AgentState {
    /// Applies one action; forward moves stop at the map edge.
    pub fn step(self, action: Action, size: usize) -> Self {
        match action {
            Action::TurnLeft => Self { heading: self.heading.turn_left(), ..self },
            Action::TurnRight => Self { heading: self.heading.turn_right(), ..self },
            Action::Forward => {
                let (dx, dy) = self.heading.forward();
                let max = size as i64 - 1;
                Self {
                    x: (self.x as i64 + dx).clamp(0, max) as usize,
                    y: (self.y as i64 + dy).clamp(0, max) as usize,
                    ..self
                }
            }
        }
    }
}

/// Probability of turning at each step.
pub const TURN_PROBABILITY: f64 = 0.2;

/// `frames` states starting from a random pose; each later state turns ±90°
/// with probability [`TURN_PROBABILITY`], otherwise moves forward one tile.
pub fn generate_trajectory(seed: u64, frames: usize, world: &World) -> Vec<AgentState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = world.size;
    let mut state = AgentState {
        x: rng.random_range(0..n),
        y: rng.random_range(0..n),
        heading: Heading::ALL[rng.random_range(0..4)],
    };
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        if i > 0 {
            let action = if rng.random_bool(TURN_PROBABILITY) {
                if rng.random_bool(0.5) {
                    Action::TurnLeft
                } else {
                    Action::TurnRight
                }
            } else {
                Action::Forward
            };
            state = state.step(action, n);
        }
        out.push(state);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conventions() {
        let s = AgentState { x: 5, y: 5, heading: Heading::N };
        assert_eq!(s.step(Action::Forward, 32), AgentState { x: 5, y: 4, heading: Heading::N });
        assert_eq!(Heading::N.turn_left(), Heading::W);
        assert_eq!(Heading::N.turn_right(), Heading::E);
        let edge = AgentState { x: 3, y: 0, heading: Heading::N };
        assert_eq!(edge.step(Action::Forward, 32), edge);
    }

    #[test]
    fn right_is_forward_turned_clockwise() {
        for h in Heading::ALL {
            assert_eq!(h.turn_right().forward(), h.right());
        }
    }
}
