//! Pixel-Taxi: a taxi on a square grid must pick up the red passenger and
//! drop it at the destination. Other colored passengers are distractors.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvStepResult, Environment};
use crate::error::{Error, Result};
use crate::state::{RawFrame, FRAME_SIDE};

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const TAXI_GRAY: [u8; 3] = [128, 128, 128];
pub const DESTINATION_BLACK: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassengerColor {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl PassengerColor {
    pub const PALETTE: [PassengerColor; 6] = [
        PassengerColor::Red,
        PassengerColor::Green,
        PassengerColor::Blue,
        PassengerColor::Yellow,
        PassengerColor::Magenta,
        PassengerColor::Cyan,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            PassengerColor::Red => [255, 0, 0],
            PassengerColor::Green => [0, 255, 0],
            PassengerColor::Blue => [0, 0, 255],
            PassengerColor::Yellow => [255, 255, 0],
            PassengerColor::Magenta => [255, 0, 255],
            PassengerColor::Cyan => [0, 255, 255],
        }
    }

    pub fn from_rgb(rgb: [u8; 3]) -> Option<Self> {
        Self::PALETTE.into_iter().find(|c| c.rgb() == rgb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxiConfig {
    pub grid_size: usize,
    pub n_passengers: usize,
    pub max_steps: usize,
    pub cell_px: usize,
}

impl Default for TaxiConfig {
    fn default() -> Self {
        Self {
            grid_size: 7,
            n_passengers: 3,
            max_steps: 100,
            cell_px: 12,
        }
    }
}

impl TaxiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 3 {
            return Err(Error::InvalidConfig(format!(
                "grid_size must be >= 3, got {}",
                self.grid_size
            )));
        }
        if self.n_passengers == 0 || self.n_passengers > PassengerColor::PALETTE.len() {
            return Err(Error::InvalidConfig(format!(
                "n_passengers must be in 1..={}, got {}",
                PassengerColor::PALETTE.len(),
                self.n_passengers
            )));
        }
        if self.grid_size * self.cell_px != FRAME_SIDE {
            return Err(Error::InvalidConfig(format!(
                "grid_size * cell_px must equal {FRAME_SIDE}, got {} * {}",
                self.grid_size, self.cell_px
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be positive".into()));
        }
        let cells = self.grid_size * self.grid_size;
        let entities = self.n_passengers + 2;
        if entities > cells {
            return Err(Error::GridTooSmall { cells, entities });
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

/// Grid coordinates: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Pickup,
    Dropoff,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Pickup,
        Action::Dropoff,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passenger {
    pub color: PassengerColor,
    /// `None` while carried or after delivery.
    pub cell: Option<Cell>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxiState {
    pub config: TaxiConfig,
    pub taxi: Cell,
    pub destination: Cell,
    pub passengers: Vec<Passenger>,
    pub carried: Option<usize>,
    pub target: usize,
    pub delivered: bool,
    pub steps_elapsed: usize,
    pub done: bool,
}

impl TaxiState {
    pub fn passenger_at(&self, cell: Cell) -> Option<usize> {
        self.passengers.iter().position(|p| p.cell == Some(cell))
    }

    pub fn target_cell(&self) -> Option<Cell> {
        self.passengers[self.target].cell
    }

    /// Check every structural invariant; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<()> {
        let g = self.config.grid_size;
        let inside = |c: Cell| c.x < g && c.y < g;
        let bad = |m: &str| Err(Error::InvalidConfig(format!("state invariant: {m}")));
        if !inside(self.taxi) || !inside(self.destination) {
            return bad("taxi or destination outside grid");
        }
        let placed: Vec<Cell> = self.passengers.iter().filter_map(|p| p.cell).collect();
        if placed.iter().any(|&c| !inside(c)) {
            return bad("passenger outside grid");
        }
        for (i, a) in placed.iter().enumerate() {
            if placed[i + 1..].contains(a) {
                return bad("two passengers share a cell");
            }
        }
        if let Some(c) = self.carried {
            if self.passengers[c].cell.is_some() {
                return bad("carried passenger still on the board");
            }
        }
        let off_board = self.passengers.iter().filter(|p| p.cell.is_none()).count();
        let expected = usize::from(self.carried.is_some()) + usize::from(self.delivered);
        if off_board != expected {
            return bad("passenger missing from board");
        }
        if self.steps_elapsed > self.config.max_steps {
            return bad("step budget exceeded");
        }
        Ok(())
    }
}

/// Random initial layout: taxi, destination and passengers on distinct cells,
/// each drawn uniformly from the cells still free. Passenger 0 is red and is
/// the one to deliver.
pub fn reset(config: &TaxiConfig, seed: u64) -> Result<(TaxiState, RawFrame)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = config.grid_size;
    let picks = sample(&mut rng, config.cells(), config.n_passengers + 2);
    let cell = |i: usize| Cell::new(i % g, i / g);
    let mut it = picks.iter();
    let taxi = cell(it.next().unwrap_or(0));
    let destination = cell(it.next().unwrap_or(0));
    let passengers = PassengerColor::PALETTE
        .iter()
        .take(config.n_passengers)
        .zip(it)
        .map(|(&color, i)| Passenger {
            color,
            cell: Some(cell(i)),
        })
        .collect();
    let state = TaxiState {
        config: *config,
        taxi,
        destination,
        passengers,
        carried: None,
        target: 0,
        delivered: false,
        steps_elapsed: 0,
        done: false,
    };
    let frame = render(&state);
    Ok((state, frame))
}

/// Advance one step. Only dropping the red passenger on the destination pays.
pub fn step(state: &TaxiState, action: Action) -> Result<(TaxiState, EnvStepResult)> {
    if state.done {
        return Err(Error::EpisodeTerminated);
    }
    let mut next = state.clone();
    let last = state.config.grid_size - 1;
    let mut reward = 0.0;
    match action {
        Action::Up => next.taxi.y = next.taxi.y.saturating_sub(1),
        Action::Down => next.taxi.y = (next.taxi.y + 1).min(last),
        Action::Left => next.taxi.x = next.taxi.x.saturating_sub(1),
        Action::Right => next.taxi.x = (next.taxi.x + 1).min(last),
        Action::Pickup => {
            if next.carried.is_none() {
                if let Some(p) = next.passenger_at(next.taxi) {
                    next.passengers[p].cell = None;
                    next.carried = Some(p);
                }
            }
        }
        Action::Dropoff => {
            if let Some(p) = next.carried {
                if p == next.target && next.taxi == next.destination {
                    next.carried = None;
                    next.delivered = true;
                    next.done = true;
                    reward = 1.0;
                } else if next.passenger_at(next.taxi).is_none() {
                    next.passengers[p].cell = Some(next.taxi);
                    next.carried = None;
                }
            }
        }
    }
    next.steps_elapsed += 1;
    if next.steps_elapsed >= next.config.max_steps {
        next.done = true;
    }
    debug_assert!(next.check_invariants().is_ok());
    let frame = render(&next);
    let terminal = next.done;
    Ok((
        next,
        EnvStepResult {
            frame,
            reward,
            terminal,
        },
    ))
}

fn fill_cell(frame: &mut RawFrame, cell: Cell, px: usize, rgb: [u8; 3]) {
    for y in cell.y * px..(cell.y + 1) * px {
        for x in cell.x * px..(cell.x + 1) * px {
            frame.set(x, y, rgb);
        }
    }
}

fn draw_dot(frame: &mut RawFrame, cell: Cell, px: usize, rgb: [u8; 3]) {
    let (lo, hi) = (px / 4, px - px / 4);
    for y in lo..hi {
        for x in lo..hi {
            frame.set(cell.x * px + x, cell.y * px + y, rgb);
        }
    }
}

fn draw_border(frame: &mut RawFrame, cell: Cell, px: usize, width: usize, rgb: [u8; 3]) {
    for y in 0..px {
        for x in 0..px {
            if x < width || y < width || x >= px - width || y >= px - width {
                frame.set(cell.x * px + x, cell.y * px + y, rgb);
            }
        }
    }
}

/// Rasterize the state: white background, black destination, gray taxi,
/// colored passenger dots. A carried passenger is drawn inside the taxi cell;
/// a taxi parked on the destination keeps a black border.
pub fn render(state: &TaxiState) -> RawFrame {
    let px = state.config.cell_px;
    let side = state.config.grid_size * px;
    let mut frame = RawFrame::filled(side, side, WHITE).expect("validated config");
    fill_cell(&mut frame, state.destination, px, DESTINATION_BLACK);
    fill_cell(&mut frame, state.taxi, px, TAXI_GRAY);
    if state.taxi == state.destination {
        draw_border(&mut frame, state.taxi, px, (px / 6).max(1), DESTINATION_BLACK);
    }
    for p in &state.passengers {
        if let Some(cell) = p.cell {
            draw_dot(&mut frame, cell, px, p.color.rgb());
        }
    }
    if let Some(c) = state.carried {
        draw_dot(&mut frame, state.taxi, px, state.passengers[c].color.rgb());
    }
    frame
}

/// Stateful wrapper implementing [`Environment`].
#[derive(Debug, Clone)]
pub struct PixelTaxi {
    config: TaxiConfig,
    state: Option<TaxiState>,
}

impl PixelTaxi {
    pub fn new(config: TaxiConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: None,
        })
    }

    pub fn config(&self) -> &TaxiConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&TaxiState> {
        self.state.as_ref()
    }
}

impl Environment for PixelTaxi {
    fn action_count(&self) -> usize {
        Action::ALL.len()
    }

    fn reset(&mut self, seed: u64) -> Result<RawFrame> {
        let (state, frame) = reset(&self.config, seed)?;
        self.state = Some(state);
        Ok(frame)
    }

    fn step(&mut self, action: usize) -> Result<EnvStepResult> {
        let action = Action::from_index(action).ok_or_else(|| {
            Error::InvalidConfig(format!("action index {action} out of range"))
        })?;
        let state = self.state.as_ref().ok_or(Error::EpisodeTerminated)?;
        let (next, result) = step(state, action)?;
        self.state = Some(next);
        Ok(result)
    }
}
