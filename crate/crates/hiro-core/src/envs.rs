//! Kinematic navigation environments: Gather, Maze, Push, Fall, plus an
//! open arena for isolated lower-level training.
//!
//! A point agent with a square 0.75 half-width footprint replaces the
//! quadruped: actions are per-dim accelerations, velocity decays by a drag
//! factor and is clipped, and collisions resolve by axis-separated clamping.
//! Arenas are built from 8x8 cells addressed by their centers; every grid
//! cell inside the padded bounding box that is not listed free is a wall.
//!
//! Episodes run 500 steps. Navigation tasks reward negative Euclidean
//! distance to the target every step and count success as a final-step
//! distance strictly below 5. Gather rewards +1 per apple and -1 per bomb.

use crate::error::{Error, Result};
use crate::goal::GoalSpace;
use crate::tensor::Bounds;
use serde::Serialize;

pub const EPISODE_LEN: u32 = 500;
pub const CELL_HALF: f64 = 4.0;
pub const AGENT_HALF: f64 = 0.75;
pub const ACCEL_MAX: f64 = 1.0;
pub const SPEED_MAX: f64 = 1.0;
pub const DRAG: f64 = 0.95;
pub const SUCCESS_DISTANCE: f64 = 5.0;
pub const PLATFORM_Z: f64 = 4.5;

const GATHER_HALF: f64 = 10.0;
const GATHER_APPLES: usize = 8;
const GATHER_BOMBS: usize = 8;
const ITEM_RADIUS: f64 = 0.5;
const COLLECT_DISTANCE: f64 = AGENT_HALF + ITEM_RADIUS;
const START_CLEARANCE: f64 = 2.0;
const GATHER_NEAREST: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// Empty 20x20 arena, no target, zero reward; lower-level test bed.
    Open,
    Gather,
    Maze,
    Push,
    Fall,
}

impl EnvKind {
    /// Names accepted by configuration; the open arena is reachable only
    /// through the API.
    pub fn from_name(name: &str) -> Option<EnvKind> {
        match name {
            "gather" => Some(EnvKind::Gather),
            "maze" => Some(EnvKind::Maze),
            "push" => Some(EnvKind::Push),
            "fall" => Some(EnvKind::Fall),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Open => "open",
            EnvKind::Gather => "gather",
            EnvKind::Maze => "maze",
            EnvKind::Push => "push",
            EnvKind::Fall => "fall",
        }
    }

    pub fn observation_dim(self) -> usize {
        match self {
            EnvKind::Open => 5,
            EnvKind::Maze => 7,
            EnvKind::Push => 9,
            EnvKind::Fall => 13,
            EnvKind::Gather => 5 + 3 * GATHER_NEAREST,
        }
    }

    pub fn action_dim(self) -> usize {
        2
    }

    pub fn action_bounds(self) -> Bounds {
        Bounds::uniform(2, ACCEL_MAX).unwrap()
    }

    /// Goal space over the positional head of the observation: (x, y), plus
    /// z on the three-dimensional task.
    pub fn goal_space(self) -> GoalSpace {
        match self {
            EnvKind::Fall => {
                GoalSpace::new(vec![0, 1, 2], Bounds::new(vec![10.0, 10.0, 4.0]).unwrap()).unwrap()
            }
            _ => GoalSpace::planar(10.0),
        }
    }

    /// Fixed evaluation target; None for the reward-counting tasks.
    pub fn eval_target(self) -> Option<Vec<f64>> {
        match self {
            EnvKind::Maze => Some(vec![0.0, 16.0]),
            EnvKind::Push => Some(vec![0.0, 19.0]),
            EnvKind::Fall => Some(vec![0.0, 27.0, PLATFORM_Z]),
            EnvKind::Gather | EnvKind::Open => None,
        }
    }

    fn free_cells(self) -> &'static [(i32, i32)] {
        match self {
            EnvKind::Maze => &[(0, 0), (8, 0), (16, 0), (16, 8), (16, 16), (8, 16), (0, 16)],
            EnvKind::Push => &[(0, 0), (-8, 0), (-8, 8), (0, 8), (8, 8), (16, 8), (0, 16)],
            EnvKind::Fall => &[
                (-8, 0),
                (0, 0),
                (-8, 8),
                (0, 8),
                (-8, 16),
                (0, 16),
                (-8, 24),
                (0, 24),
            ],
            EnvKind::Open | EnvKind::Gather => &[],
        }
    }

    fn movable_block_cells(self) -> &'static [(i32, i32)] {
        match self {
            EnvKind::Push => &[(0, 8)],
            EnvKind::Fall => &[(8, 8)],
            _ => &[],
        }
    }
}

/// Axis-aligned rectangle, closed bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    fn cell(cx: f64, cy: f64) -> Rect {
        Rect {
            min: [cx - CELL_HALF, cy - CELL_HALF],
            max: [cx + CELL_HALF, cy + CELL_HALF],
        }
    }

    /// Open-interval overlap: touching faces do not collide.
    fn overlaps(&self, other: &Rect) -> bool {
        self.min[0] < other.max[0]
            && self.max[0] > other.min[0]
            && self.min[1] < other.max[1]
            && self.max[1] > other.min[1]
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.min[0] && x < self.max[0] && y > self.min[1] && y < self.max[1]
    }

    fn around(center: [f64; 2], half: f64) -> Rect {
        Rect {
            min: [center[0] - half, center[1] - half],
            max: [center[0] + half, center[1] + half],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub center: [f64; 2],
    /// Dropped into the chasm: no longer an obstacle, walkable at platform
    /// height.
    pub fallen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub position: [f64; 2],
    /// +1 apple, -1 bomb.
    pub value: f64,
    pub collected: bool,
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// Final-step success on navigation tasks; false elsewhere and on
    /// non-final steps.
    pub success: bool,
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRecord {
    pub step: u32,
    pub position: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Final-step success test: strictly inside the threshold radius.
pub fn success_within(final_position: &[f64], target: &[f64]) -> bool {
    debug_assert_eq!(final_position.len(), target.len());
    let dist: f64 = final_position
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    dist < SUCCESS_DISTANCE
}

#[derive(Debug, Clone)]
pub struct Env {
    kind: EnvKind,
    walls: Vec<Rect>,
    chasm: Option<Rect>,
    blocks: Vec<Block>,
    items: Vec<Item>,
    target: Vec<f64>,
    position: [f64; 2],
    z: f64,
    velocity: [f64; 2],
    step: u32,
    fallen: bool,
    done: bool,
}

impl Env {
    pub fn new(kind: EnvKind) -> Env {
        let walls = build_walls(kind);
        let chasm = match kind {
            EnvKind::Fall => Some(Rect {
                min: [-4.0, 12.0],
                max: [12.0, 20.0],
            }),
            _ => None,
        };
        let mut env = Env {
            kind,
            walls,
            chasm,
            blocks: Vec::new(),
            items: Vec::new(),
            target: Vec::new(),
            position: [0.0, 0.0],
            z: 0.0,
            velocity: [0.0, 0.0],
            step: 0,
            fallen: false,
            done: false,
        };
        env.reset_common();
        env.target = kind.eval_target().unwrap_or_default();
        env
    }

    fn reset_common(&mut self) {
        self.position = [0.0, 0.0];
        self.z = if self.kind == EnvKind::Fall {
            PLATFORM_Z
        } else {
            0.0
        };
        self.velocity = [0.0, 0.0];
        self.step = 0;
        self.fallen = false;
        self.done = false;
        self.blocks = self
            .kind
            .movable_block_cells()
            .iter()
            .map(|(cx, cy)| Block {
                center: [*cx as f64, *cy as f64],
                fallen: false,
            })
            .collect();
        self.items.clear();
    }

    /// Training reset: Maze samples its target uniformly; Gather places
    /// items; the fixed-target tasks are deterministic.
    pub fn reset(&mut self, rng: &mut crate::rng::Rng) -> Vec<f64> {
        self.reset_any(rng, false)
    }

    /// Evaluation reset: identical except the Maze target is pinned.
    pub fn reset_eval(&mut self, rng: &mut crate::rng::Rng) -> Vec<f64> {
        self.reset_any(rng, true)
    }

    fn reset_any(&mut self, rng: &mut crate::rng::Rng, eval: bool) -> Vec<f64> {
        self.reset_common();
        self.target = match self.kind {
            EnvKind::Maze => {
                if eval {
                    self.kind.eval_target().unwrap()
                } else {
                    vec![rng.uniform_in(-4.0, 20.0), rng.uniform_in(-4.0, 20.0)]
                }
            }
            _ => self.kind.eval_target().unwrap_or_default(),
        };
        if self.kind == EnvKind::Gather {
            for i in 0..GATHER_APPLES + GATHER_BOMBS {
                let value = if i < GATHER_APPLES { 1.0 } else { -1.0 };
                let position = loop {
                    let x = rng.uniform_in(-GATHER_HALF, GATHER_HALF);
                    let y = rng.uniform_in(-GATHER_HALF, GATHER_HALF);
                    if (x * x + y * y).sqrt() >= START_CLEARANCE {
                        break [x, y];
                    }
                };
                self.items.push(Item {
                    position,
                    value,
                    collected: false,
                });
            }
        }
        self.observe()
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn walls(&self) -> &[Rect] {
        &self.walls
    }

    pub fn chasm_region(&self) -> Option<&Rect> {
        self.chasm.as_ref()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Agent center including height on the three-dimensional task.
    pub fn agent_position(&self) -> Vec<f64> {
        match self.kind {
            EnvKind::Fall => vec![self.position[0], self.position[1], self.z],
            _ => vec![self.position[0], self.position[1]],
        }
    }

    pub fn velocity(&self) -> [f64; 2] {
        self.velocity
    }

    /// True when the point is strictly inside some wall cell.
    pub fn is_wall_at(&self, x: f64, y: f64) -> bool {
        self.walls.iter().any(|w| w.contains_point(x, y))
    }

    /// Observation layout, fixed per task:
    /// open   [x, y, vx, vy, t/500]
    /// maze   [.., target x, target y]
    /// push   [.., target x, target y, block x, block y]
    /// fall   [x, y, z, vx, vy, vz, t/500, target xyz, block xyz]
    /// gather [x, y, vx, vy, t/500, then per nearest item dx, dy, type]
    /// The kinematic height of blocks and agent is the platform height until
    /// either falls into the chasm, then 0.
    pub fn observe(&self) -> Vec<f64> {
        let t = self.step as f64 / EPISODE_LEN as f64;
        match self.kind {
            EnvKind::Open => {
                vec![
                    self.position[0],
                    self.position[1],
                    self.velocity[0],
                    self.velocity[1],
                    t,
                ]
            }
            EnvKind::Maze => vec![
                self.position[0],
                self.position[1],
                self.velocity[0],
                self.velocity[1],
                t,
                self.target[0],
                self.target[1],
            ],
            EnvKind::Push => vec![
                self.position[0],
                self.position[1],
                self.velocity[0],
                self.velocity[1],
                t,
                self.target[0],
                self.target[1],
                self.blocks[0].center[0],
                self.blocks[0].center[1],
            ],
            EnvKind::Fall => {
                let block = &self.blocks[0];
                let block_z = if block.fallen { 0.0 } else { PLATFORM_Z };
                vec![
                    self.position[0],
                    self.position[1],
                    self.z,
                    self.velocity[0],
                    self.velocity[1],
                    0.0,
                    t,
                    self.target[0],
                    self.target[1],
                    self.target[2],
                    block.center[0],
                    block.center[1],
                    block_z,
                ]
            }
            EnvKind::Gather => {
                let mut obs = vec![
                    self.position[0],
                    self.position[1],
                    self.velocity[0],
                    self.velocity[1],
                    t,
                ];
                let mut nearest: Vec<(f64, usize)> = self
                    .items
                    .iter()
                    .enumerate()
                    .filter(|(_, item)| !item.collected)
                    .map(|(i, item)| {
                        let dx = item.position[0] - self.position[0];
                        let dy = item.position[1] - self.position[1];
                        ((dx * dx + dy * dy).sqrt(), i)
                    })
                    .collect();
                nearest.sort_by(|a, b| a.partial_cmp(b).unwrap());
                for k in 0..GATHER_NEAREST {
                    if let Some((_, i)) = nearest.get(k) {
                        let item = &self.items[*i];
                        obs.push(item.position[0] - self.position[0]);
                        obs.push(item.position[1] - self.position[1]);
                        obs.push(item.value);
                    } else {
                        obs.extend_from_slice(&[0.0, 0.0, 0.0]);
                    }
                }
                obs
            }
        }
    }

    /// Advances one step: accelerate, drag, clip, move axis by axis with
    /// wall clamping and block pushing, then task bookkeeping.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Precondition("episode already finished".into()));
        }
        if action.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "action has {} dims, want 2",
                action.len()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("non-finite action".into()));
        }

        if !self.fallen {
            for (v, a) in self.velocity.iter_mut().zip(action) {
                let a = a.clamp(-ACCEL_MAX, ACCEL_MAX);
                *v = (DRAG * *v + a).clamp(-SPEED_MAX, SPEED_MAX);
            }
            self.move_axis(0);
            self.move_axis(1);
            self.settle_blocks();
            self.check_agent_fall();
        }

        let mut reward = 0.0;
        if self.kind == EnvKind::Gather {
            for item in &mut self.items {
                if item.collected {
                    continue;
                }
                let dx = item.position[0] - self.position[0];
                let dy = item.position[1] - self.position[1];
                if (dx * dx + dy * dy).sqrt() < COLLECT_DISTANCE {
                    item.collected = true;
                    reward += item.value;
                }
            }
        }

        self.step += 1;
        if !self.target.is_empty() {
            let pos = self.agent_position();
            let dist: f64 = pos
                .iter()
                .zip(&self.target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                .sqrt();
            reward = -dist;
        }

        let terminal = self.step >= EPISODE_LEN || self.fallen;
        let success = terminal
            && !self.target.is_empty()
            && success_within(&self.agent_position(), &self.target);
        self.done = terminal;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            terminal,
            success,
        })
    }

    fn agent_rect(&self, x: f64, y: f64) -> Rect {
        Rect::around([x, y], AGENT_HALF)
    }

    fn move_axis(&mut self, axis: usize) {
        let delta = self.velocity[axis];
        if delta == 0.0 {
            return;
        }
        let mut pos = self.position;
        pos[axis] += delta;

        // Walls: clamp to the nearest violated face.
        let mut clamped = false;
        for i in 0..self.walls.len() {
            let wall = self.walls[i];
            if self.agent_rect(pos[0], pos[1]).overlaps(&wall) {
                pos[axis] = if delta > 0.0 {
                    pos[axis].min(wall.min[axis] - AGENT_HALF)
                } else {
                    pos[axis].max(wall.max[axis] + AGENT_HALF)
                };
                clamped = true;
            }
        }

        // Movable blocks: push, then clamp against wherever the block ended.
        for b in 0..self.blocks.len() {
            if self.blocks[b].fallen {
                continue;
            }
            let rect = Rect::around(self.blocks[b].center, CELL_HALF);
            if !self.agent_rect(pos[0], pos[1]).overlaps(&rect) {
                continue;
            }
            let push = if delta > 0.0 {
                (pos[axis] + AGENT_HALF) - rect.min[axis]
            } else {
                (pos[axis] - AGENT_HALF) - rect.max[axis]
            };
            self.push_block(b, axis, push);
            let rect = Rect::around(self.blocks[b].center, CELL_HALF);
            if self.agent_rect(pos[0], pos[1]).overlaps(&rect) {
                pos[axis] = if delta > 0.0 {
                    rect.min[axis] - AGENT_HALF
                } else {
                    rect.max[axis] + AGENT_HALF
                };
                clamped = true;
            }
        }

        if clamped {
            self.velocity[axis] = 0.0;
        }
        self.position = pos;
    }

    /// Slides a block along one axis, clamped by walls and other standing
    /// blocks; blocks have no momentum of their own.
    fn push_block(&mut self, b: usize, axis: usize, delta: f64) {
        let mut center = self.blocks[b].center;
        center[axis] += delta;
        for wall in &self.walls {
            let rect = Rect::around(center, CELL_HALF);
            if rect.overlaps(wall) {
                center[axis] = if delta > 0.0 {
                    center[axis].min(wall.min[axis] - CELL_HALF)
                } else {
                    center[axis].max(wall.max[axis] + CELL_HALF)
                };
            }
        }
        for (o, other) in self.blocks.iter().enumerate() {
            if o == b || other.fallen {
                continue;
            }
            let other_rect = Rect::around(other.center, CELL_HALF);
            let rect = Rect::around(center, CELL_HALF);
            if rect.overlaps(&other_rect) {
                center[axis] = if delta > 0.0 {
                    center[axis].min(other_rect.min[axis] - CELL_HALF)
                } else {
                    center[axis].max(other_rect.max[axis] + CELL_HALF)
                };
            }
        }
        self.blocks[b].center = center;
    }

    /// A block whose center crosses into the chasm drops: it snaps to the
    /// center of the 8x8 grid cell it is in, stops colliding, and becomes a
    /// bridge at platform height.
    fn settle_blocks(&mut self) {
        let Some(chasm) = self.chasm else { return };
        for block in &mut self.blocks {
            if block.fallen {
                continue;
            }
            if chasm.contains_point(block.center[0], block.center[1]) {
                block.center = [
                    snap_to_cell_center(block.center[0]),
                    snap_to_cell_center(block.center[1]),
                ];
                block.fallen = true;
            }
        }
    }

    /// Walking over the chasm without a dropped block underneath: the agent
    /// falls to the ground and the episode ends there.
    fn check_agent_fall(&mut self) {
        let Some(chasm) = self.chasm else { return };
        if !chasm.contains_point(self.position[0], self.position[1]) {
            return;
        }
        let covered = self.blocks.iter().any(|b| {
            b.fallen
                && Rect::around(b.center, CELL_HALF)
                    .contains_point(self.position[0], self.position[1])
        });
        if !covered {
            self.fallen = true;
            self.z = 0.0;
            self.velocity = [0.0, 0.0];
        }
    }

    #[cfg(test)]
    fn pose_agent(&mut self, x: f64, y: f64) {
        self.position = [x, y];
    }

    #[cfg(test)]
    fn pose_block(&mut self, b: usize, cx: f64, cy: f64) {
        self.blocks[b].center = [cx, cy];
        self.settle_blocks();
    }
}

fn snap_to_cell_center(v: f64) -> f64 {
    (v / 8.0).round() * 8.0
}

fn build_walls(kind: EnvKind) -> Vec<Rect> {
    match kind {
        EnvKind::Open | EnvKind::Gather => {
            let h = GATHER_HALF;
            let t = 8.0;
            vec![
                Rect {
                    min: [-h - t, -h - t],
                    max: [h + t, -h],
                },
                Rect {
                    min: [-h - t, h],
                    max: [h + t, h + t],
                },
                Rect {
                    min: [-h - t, -h],
                    max: [-h, h],
                },
                Rect {
                    min: [h, -h],
                    max: [h + t, h],
                },
            ]
        }
        _ => {
            let free = kind.free_cells();
            let blocks = kind.movable_block_cells();
            let occupied: Vec<(i32, i32)> = free.iter().chain(blocks).copied().collect();
            let min_x = occupied.iter().map(|c| c.0).min().unwrap();
            let max_x = occupied.iter().map(|c| c.0).max().unwrap();
            let min_y = occupied.iter().map(|c| c.1).min().unwrap();
            let max_y = occupied.iter().map(|c| c.1).max().unwrap();
            let mut walls = Vec::new();
            let mut y = min_y - 8;
            while y <= max_y + 8 {
                let mut x = min_x - 8;
                while x <= max_x + 8 {
                    if !occupied.contains(&(x, y)) {
                        walls.push(Rect::cell(x as f64, y as f64));
                    }
                    x += 8;
                }
                y += 8;
            }
            walls
        }
    }
}
