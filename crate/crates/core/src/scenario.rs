//! Deployment geometry and ground truth for simulated localization runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("warehouse dimensions must be positive (length {length}, width {width})")]
    Dimensions { length: f64, width: f64 },
    #[error("at least 3 anchors are required, got {0}")]
    TooFewAnchors(usize),
    #[error("duplicate anchor id {0}")]
    DuplicateAnchor(u32),
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("target ({x}, {y}) lies outside the {length} x {width} area")]
    TargetOutside { x: f64, y: f64, length: f64, width: f64 },
    #[error("invalid channel parameters: {0}")]
    Channel(&'static str),
}

/// A point on the floor plan, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: u32,
    pub position: Position,
}

impl Anchor {
    pub const fn new(id: u32, x: f64, y: f64) -> Self {
        Self {
            id,
            position: Position::new(x, y),
        }
    }
}

/// Ground-truth channel used by the measurement simulator.
///
/// `eta` is a positive decay magnitude in dB per decade of distance; the
/// simulator subtracts `eta * log10(d)` from `rho0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub rho0: f64,
    pub eta: f64,
    pub sigma_shadow: f64,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.rho0.is_finite() && self.eta.is_finite() && self.sigma_shadow.is_finite()) {
            return Err(ScenarioError::Channel("parameters must be finite"));
        }
        if self.eta <= 0.0 {
            return Err(ScenarioError::Channel("eta must be positive"));
        }
        if self.sigma_shadow < 0.0 {
            return Err(ScenarioError::Channel("sigma_shadow must be non-negative"));
        }
        Ok(())
    }
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            rho0: -40.0,
            eta: 30.0,
            sigma_shadow: 2.0,
        }
    }
}

pub const DEFAULT_SIDE: f64 = 100.0;
pub const DEFAULT_TARGET: Position = Position::new(25.0, 25.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    length: f64,
    width: f64,
    anchors: Vec<Anchor>,
    target: Position,
    channel: ChannelParams,
}

impl Scenario {
    pub fn new(
        length: f64,
        width: f64,
        anchors: Vec<Anchor>,
        target: Position,
        channel: ChannelParams,
    ) -> Result<Self, ScenarioError> {
        if !(length.is_finite() && width.is_finite()) || length <= 0.0 || width <= 0.0 {
            return Err(ScenarioError::Dimensions { length, width });
        }
        if anchors.len() < 3 {
            return Err(ScenarioError::TooFewAnchors(anchors.len()));
        }
        for (i, a) in anchors.iter().enumerate() {
            if !a.position.is_finite() {
                return Err(ScenarioError::NonFinite("anchor position"));
            }
            if anchors[..i].iter().any(|b| b.id == a.id) {
                return Err(ScenarioError::DuplicateAnchor(a.id));
            }
        }
        if !target.is_finite() {
            return Err(ScenarioError::NonFinite("target position"));
        }
        if target.x < 0.0 || target.x > length || target.y < 0.0 || target.y > width {
            return Err(ScenarioError::TargetOutside {
                x: target.x,
                y: target.y,
                length,
                width,
            });
        }
        channel.validate()?;
        Ok(Self {
            length,
            width,
            anchors,
            target,
            channel,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn target(&self) -> Position {
        self.target
    }

    pub fn channel(&self) -> ChannelParams {
        self.channel
    }

    pub fn anchor(&self, id: u32) -> Option<&Anchor> {
        self.anchors.iter().find(|a| a.id == id)
    }

    pub fn with_target(self, target: Position) -> Result<Self, ScenarioError> {
        Self::new(self.length, self.width, self.anchors, target, self.channel)
    }

    pub fn with_channel(self, channel: ChannelParams) -> Result<Self, ScenarioError> {
        Self::new(self.length, self.width, self.anchors, self.target, channel)
    }
}

/// Anchors at the four corners of an `length` x `width` rectangle, ids 0..4
/// in the order (0,0), (L,0), (0,W), (L,W).
pub fn corner_anchors(length: f64, width: f64) -> Vec<Anchor> {
    vec![
        Anchor::new(0, 0.0, 0.0),
        Anchor::new(1, length, 0.0),
        Anchor::new(2, 0.0, width),
        Anchor::new(3, length, width),
    ]
}

/// The 100 m square warehouse with one access point in each corner.
pub fn default_scenario() -> Scenario {
    Scenario::new(
        DEFAULT_SIDE,
        DEFAULT_SIDE,
        corner_anchors(DEFAULT_SIDE, DEFAULT_SIDE),
        DEFAULT_TARGET,
        ChannelParams::default(),
    )
    .expect("default scenario is valid")
}

pub fn distance(target: Position, anchor: &Anchor) -> f64 {
    target.distance_to(&anchor.position)
}
