//! Two-room switch/gate/box/target grid world.
//!
//! The arena is split by a vertical wall with a single gate cell. All agents
//! start in the left room together with the box and the switch; the target
//! sits in the right room. The gate stays shut until enough switch-capable
//! agents stand on the switch cell simultaneously, after which it latches
//! open for the rest of the episode. The box moves one cell when enough
//! push-capable agents stand on the cell behind it and issue the push
//! direction together.
//!
//! Stepping is a pure function of `(state, joint_action)`: no hidden RNG.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid coordinate, `x` to the right, `y` downward.
pub type Cell = (usize, usize);

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("joint action has {got} entries, expected {expected}")]
    ActionLength { got: usize, expected: usize },
    #[error("episode already terminal")]
    EpisodeOver,
}

/// The five primitive moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrimitiveAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl PrimitiveAction {
    pub const ALL: [PrimitiveAction; 5] = [
        PrimitiveAction::Up,
        PrimitiveAction::Down,
        PrimitiveAction::Left,
        PrimitiveAction::Right,
        PrimitiveAction::Stay,
    ];

    pub fn index(self) -> usize {
        match self {
            PrimitiveAction::Up => 0,
            PrimitiveAction::Down => 1,
            PrimitiveAction::Left => 2,
            PrimitiveAction::Right => 3,
            PrimitiveAction::Stay => 4,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    fn delta(self) -> (i64, i64) {
        match self {
            PrimitiveAction::Up => (0, -1),
            PrimitiveAction::Down => (0, 1),
            PrimitiveAction::Left => (-1, 0),
            PrimitiveAction::Right => (1, 0),
            PrimitiveAction::Stay => (0, 0),
        }
    }
}

/// What one agent is allowed to participate in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    pub can_switch: bool,
    pub can_push: bool,
}

/// Per-event reward weights for `r_i = -c0 + c1*switch + c2*move + c3*target`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            c0: 0.01,
            c1: 0.5,
            c2: 0.1,
            c3: 10.0,
        }
    }
}

/// Environment layout, capabilities, and episode limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub sub_setting: u8,
    pub grid_width: usize,
    pub grid_height: usize,
    /// Column of the dividing wall; every cell in it except the gate is solid.
    pub wall_x: usize,
    pub gate_cell: Cell,
    pub switch_cell: Cell,
    pub box_start_cell: Cell,
    pub target_cell: Cell,
    pub agent_start_cells: Vec<Cell>,
    pub capabilities: Vec<Capability>,
    pub weights: RewardWeights,
    pub min_switchers: usize,
    pub min_pushers: usize,
    pub max_steps: usize,
}

impl EnvConfig {
    /// Standard layout for one of the three evaluation sub-settings on an
    /// 11x11 arena (two 5-wide rooms around the wall column).
    pub fn sub_setting(setting: u8) -> Result<Self, EnvError> {
        Self::sub_setting_with_rooms(setting, 5, 11)
    }

    /// Same task, arbitrary room size: full grid is `2*room_w + 1` wide and
    /// `room_h` tall, with the gate centered in the dividing wall.
    pub fn sub_setting_with_rooms(
        setting: u8,
        room_w: usize,
        room_h: usize,
    ) -> Result<Self, EnvError> {
        if room_w < 1 || room_h < 1 {
            return Err(EnvError::Config("rooms must be at least 1x1".into()));
        }
        let (caps, min_switchers, min_pushers) = match setting {
            1 => (
                vec![
                    Capability {
                        can_switch: true,
                        can_push: false,
                    },
                    Capability {
                        can_switch: false,
                        can_push: true,
                    },
                ],
                1,
                1,
            ),
            2 => (
                vec![
                    Capability {
                        can_switch: true,
                        can_push: false,
                    },
                    Capability {
                        can_switch: true,
                        can_push: false,
                    },
                    Capability {
                        can_switch: false,
                        can_push: true,
                    },
                    Capability {
                        can_switch: false,
                        can_push: true,
                    },
                ],
                2,
                2,
            ),
            3 => (
                vec![
                    Capability {
                        can_switch: true,
                        can_push: false,
                    },
                    Capability {
                        can_switch: true,
                        can_push: true,
                    },
                    Capability {
                        can_switch: false,
                        can_push: true,
                    },
                ],
                2,
                2,
            ),
            other => {
                return Err(EnvError::Config(format!(
                    "sub_setting must be 1, 2, or 3, got {other}"
                )))
            }
        };
        let grid_width = 2 * room_w + 1;
        let grid_height = room_h;
        let wall_x = room_w;
        let gate_y = room_h / 2;
        let n_agents = caps.len();
        let cfg = Self {
            sub_setting: setting,
            grid_width,
            grid_height,
            wall_x,
            gate_cell: (wall_x, gate_y),
            switch_cell: (1usize.min(room_w - 1), 1usize.min(room_h - 1)),
            box_start_cell: (room_w.saturating_sub(2), gate_y),
            target_cell: ((grid_width - 2).max(wall_x + 1), gate_y),
            agent_start_cells: vec![(0, gate_y); n_agents],
            capabilities: caps,
            weights: RewardWeights::default(),
            min_switchers,
            min_pushers,
            max_steps: 400,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_agents(&self) -> usize {
        self.capabilities.len()
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        cell.0 == self.wall_x && cell != self.gate_cell
    }

    fn room_of(&self, cell: Cell) -> Option<u8> {
        if cell.0 < self.wall_x {
            Some(0)
        } else if cell.0 > self.wall_x {
            Some(1)
        } else {
            None
        }
    }

    fn in_bounds(&self, cell: Cell) -> bool {
        cell.0 < self.grid_width && cell.1 < self.grid_height
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |msg: String| Err(EnvError::Config(msg));
        if self.max_steps == 0 {
            return err("max_steps must be positive".into());
        }
        if self.min_switchers < 1 || self.min_pushers < 1 {
            return err("min_switchers and min_pushers must be at least 1".into());
        }
        if self.capabilities.len() != self.agent_start_cells.len() {
            return err("capability map and start cells must have equal length".into());
        }
        if self.capabilities.is_empty() {
            return err("at least one agent required".into());
        }
        if self.wall_x == 0 || self.wall_x + 1 >= self.grid_width {
            return err("dividing wall must leave a room on each side".into());
        }
        if self.gate_cell.0 != self.wall_x || !self.in_bounds(self.gate_cell) {
            return err("gate must sit inside the dividing wall".into());
        }
        for (name, cell) in [
            ("switch", self.switch_cell),
            ("box start", self.box_start_cell),
            ("target", self.target_cell),
        ] {
            if !self.in_bounds(cell) {
                return err(format!("{name} cell out of bounds"));
            }
            if self.is_wall(cell) || cell == self.gate_cell {
                return err(format!("{name} cell may not sit on the wall"));
            }
        }
        for (i, &cell) in self.agent_start_cells.iter().enumerate() {
            if !self.in_bounds(cell) || self.is_wall(cell) || cell == self.gate_cell {
                return err(format!("agent {i} start cell invalid"));
            }
        }
        if self.box_start_cell == self.target_cell {
            return err("box already at target".into());
        }
        let switch_room = self.room_of(self.switch_cell);
        let box_room = self.room_of(self.box_start_cell);
        let target_room = self.room_of(self.target_cell);
        if switch_room == target_room {
            return err("switch and target must lie in distinct rooms".into());
        }
        if box_room != switch_room {
            return err("box must start in the switch room so it has to cross the gate".into());
        }
        let capable_switchers = self.capabilities.iter().filter(|c| c.can_switch).count();
        let capable_pushers = self.capabilities.iter().filter(|c| c.can_push).count();
        if capable_switchers < self.min_switchers || capable_pushers < self.min_pushers {
            return err("not enough capable agents to satisfy the task minima".into());
        }
        Ok(())
    }
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_cells: Vec<Cell>,
    pub box_cell: Cell,
    pub switch_on: bool,
    pub step_count: usize,
}

/// Per-step event record; rewards decompose exactly over these.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepEvents {
    pub switch: Vec<bool>,
    pub moved: Vec<bool>,
    pub target: bool,
}

/// Places agents and the box at their start cells. Deterministic in
/// `(config, seed)`; the seed is accepted for interface uniformity.
pub fn reset(config: &EnvConfig, _seed: u64) -> Result<WorldState, EnvError> {
    config.validate()?;
    Ok(WorldState {
        agent_cells: config.agent_start_cells.clone(),
        box_cell: config.box_start_cell,
        switch_on: false,
        step_count: 0,
    })
}

pub fn is_terminal(config: &EnvConfig, state: &WorldState) -> bool {
    state.box_cell == config.target_cell || state.step_count >= config.max_steps
}

fn passable_for_agent(config: &EnvConfig, cell: Cell, switch_on: bool) -> bool {
    if !config.in_bounds(cell) {
        return false;
    }
    if cell == config.gate_cell {
        return switch_on;
    }
    !config.is_wall(cell)
}

fn shifted(cell: Cell, d: (i64, i64)) -> Option<Cell> {
    let x = cell.0 as i64 + d.0;
    let y = cell.1 as i64 + d.1;
    if x < 0 || y < 0 {
        None
    } else {
        Some((x as usize, y as usize))
    }
}

/// Advances the world one tick.
///
/// Resolution order: agents move (blocked by walls and the pre-step gate
/// state, never by each other or the box), the box push is evaluated from
/// pre-step pusher positions, then the switch is checked on post-move
/// positions and latches on. Rewards are `-c0 + c1*e_switch + c2*e_move +
/// c3*e_target` per agent.
pub fn step(
    config: &EnvConfig,
    state: &WorldState,
    joint_action: &[PrimitiveAction],
) -> Result<(WorldState, Vec<f64>, bool, StepEvents), EnvError> {
    let n = config.n_agents();
    if joint_action.len() != n {
        return Err(EnvError::ActionLength {
            got: joint_action.len(),
            expected: n,
        });
    }
    if is_terminal(config, state) {
        return Err(EnvError::EpisodeOver);
    }

    let switch_pre = state.switch_on;

    // Box push from pre-move positions: enough capable pushers on the cell
    // behind the box, all issuing the push direction. If several directions
    // qualify at once the push is contested and the box stays.
    let mut push_dir: Option<PrimitiveAction> = None;
    let mut contested = false;
    for dir in [
        PrimitiveAction::Up,
        PrimitiveAction::Down,
        PrimitiveAction::Left,
        PrimitiveAction::Right,
    ] {
        let behind = match shifted(state.box_cell, (-dir.delta().0, -dir.delta().1)) {
            Some(c) if config.in_bounds(c) => c,
            _ => continue,
        };
        let pushers = (0..n)
            .filter(|&i| {
                config.capabilities[i].can_push
                    && state.agent_cells[i] == behind
                    && joint_action[i] == dir
            })
            .count();
        if pushers >= config.min_pushers {
            if push_dir.is_some() {
                contested = true;
            }
            push_dir = Some(dir);
        }
    }
    if contested {
        push_dir = None;
    }

    let mut box_cell = state.box_cell;
    let mut moved = vec![false; n];
    if let Some(dir) = push_dir {
        if let Some(dest) = shifted(state.box_cell, dir.delta()) {
            let dest_ok = config.in_bounds(dest)
                && (!config.is_wall(dest))
                && (dest != config.gate_cell || switch_pre);
            if dest_ok {
                let behind = shifted(state.box_cell, (-dir.delta().0, -dir.delta().1)).unwrap();
                box_cell = dest;
                for i in 0..n {
                    moved[i] = config.capabilities[i].can_push
                        && state.agent_cells[i] == behind
                        && joint_action[i] == dir;
                }
            }
        }
    }

    // Agent movement against the pre-step gate state.
    let mut agent_cells = Vec::with_capacity(n);
    for i in 0..n {
        let from = state.agent_cells[i];
        let to = shifted(from, joint_action[i].delta())
            .filter(|&c| passable_for_agent(config, c, switch_pre))
            .unwrap_or(from);
        agent_cells.push(to);
    }

    // Switch check on post-move positions; latches permanently.
    let mut switch_events = vec![false; n];
    let mut switch_on = switch_pre;
    if !switch_pre {
        let on_switch: Vec<usize> = (0..n)
            .filter(|&i| {
                config.capabilities[i].can_switch && agent_cells[i] == config.switch_cell
            })
            .collect();
        if on_switch.len() >= config.min_switchers {
            switch_on = true;
            for i in on_switch {
                switch_events[i] = true;
            }
        }
    }

    let target = box_cell == config.target_cell;
    let events = StepEvents {
        switch: switch_events,
        moved,
        target,
    };

    let w = &config.weights;
    let rewards: Vec<f64> = (0..n)
        .map(|i| {
            -w.c0
                + w.c1 * (events.switch[i] as u8 as f64)
                + w.c2 * (events.moved[i] as u8 as f64)
                + w.c3 * (events.target as u8 as f64)
        })
        .collect();

    let next = WorldState {
        agent_cells,
        box_cell,
        switch_on,
        step_count: state.step_count + 1,
    };
    let done = is_terminal(config, &next);
    Ok((next, rewards, done, events))
}

/// Per-agent observation: own cell normalized to the unit square.
pub fn observe(config: &EnvConfig, state: &WorldState) -> Vec<[f64; 2]> {
    let dx = (config.grid_width - 1).max(1) as f64;
    let dy = (config.grid_height - 1).max(1) as f64;
    state
        .agent_cells
        .iter()
        .map(|&(x, y)| [x as f64 / dx, y as f64 / dy])
        .collect()
}

/// Normalized observation of an arbitrary cell, matching [`observe`].
pub fn normalize_cell(config: &EnvConfig, cell: Cell) -> [f64; 2] {
    let dx = (config.grid_width - 1).max(1) as f64;
    let dy = (config.grid_height - 1).max(1) as f64;
    [cell.0 as f64 / dx, cell.1 as f64 / dy]
}

/// ASCII map: `#` wall, `/`/`=` gate (closed/open), `S`/`s` switch
/// (off/on), `B` box, `T` target, digits for agents, `.` floor.
pub fn render_ascii(config: &EnvConfig, state: &WorldState) -> String {
    let mut out = String::new();
    for y in 0..config.grid_height {
        for x in 0..config.grid_width {
            let cell = (x, y);
            let ch = if let Some(i) = state.agent_cells.iter().position(|&c| c == cell) {
                char::from_digit((i % 10) as u32, 10).unwrap()
            } else if cell == state.box_cell {
                'B'
            } else if cell == config.gate_cell {
                if state.switch_on {
                    '='
                } else {
                    '/'
                }
            } else if config.is_wall(cell) {
                '#'
            } else if cell == config.switch_cell {
                if state.switch_on {
                    's'
                } else {
                    'S'
                }
            } else if cell == config.target_cell {
                'T'
            } else {
                '.'
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}
