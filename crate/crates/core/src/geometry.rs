//! Pitch coordinate systems, the segment data model and motion statistics.
//!
//! All downstream processing works in a normalized pitch frame with
//! `x ∈ [-1, 1]` along the pitch length and `y ∈ [-0.42, 0.42]` along the
//! width. Metric coordinates (meters, origin at one corner) are converted
//! through [`pitch_to_normalized`] / [`normalized_to_pitch`].

use thiserror::Error;

/// Number of tracked agents per frame: 22 players plus the ball.
pub const AGENT_COUNT: usize = 23;

/// Normalized half-extent of the pitch along its length.
pub const X_BOUND: f64 = 1.0;

/// Normalized half-extent of the pitch along its width.
pub const Y_BOUND: f64 = 0.42;

/// Total normalized extent along the length axis.
pub const X_EXTENT: f64 = 2.0;

/// Total normalized extent along the width axis.
pub const Y_EXTENT: f64 = 0.84;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("coordinate ({x}, {y}) lies outside the valid domain")]
    OutOfBounds { x: f64, y: f64 },
    #[error("trajectory has {got} frames, need at least {needed}")]
    InsufficientFrames { got: usize, needed: usize },
    #[error("window of {window} frames invalid for trajectory of length {len}")]
    InvalidWindow { window: usize, len: usize },
    #[error("pitch dimensions must be positive, got {length_m} x {width_m}")]
    InvalidPitchSpec { length_m: f64, width_m: f64 },
    #[error("agent index {index} out of range 0..{AGENT_COUNT}")]
    InvalidAgentIndex { index: usize },
    #[error("outcome must be present exactly when the phase is Attack or Defense")]
    InvalidPhaseLabel,
}

/// Metric dimensions of the physical pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchSpec {
    pub length_m: f64,
    pub width_m: f64,
}

impl Default for PitchSpec {
    fn default() -> Self {
        Self {
            length_m: 105.0,
            width_m: 68.0,
        }
    }
}

impl PitchSpec {
    pub fn new(length_m: f64, width_m: f64) -> Result<Self, GeometryError> {
        if !(length_m > 0.0) || !(width_m > 0.0) {
            return Err(GeometryError::InvalidPitchSpec { length_m, width_m });
        }
        Ok(Self { length_m, width_m })
    }
}

/// Point in meters on the pitch plane, origin at one corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchPoint {
    pub x: f64,
    pub y: f64,
}

impl PitchPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Point in the normalized pitch frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    /// Builds a point, rejecting non-finite or out-of-bounds coordinates.
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        if !Self::coords_in_bounds(x, y) {
            return Err(GeometryError::OutOfBounds { x, y });
        }
        Ok(Self { x, y })
    }

    /// Builds a point by clamping both coordinates into bounds.
    pub fn clamped(x: f64, y: f64) -> Self {
        Self {
            x: x.clamp(-X_BOUND, X_BOUND),
            y: y.clamp(-Y_BOUND, Y_BOUND),
        }
    }

    pub fn coords_in_bounds(x: f64, y: f64) -> bool {
        x.is_finite() && y.is_finite() && (-X_BOUND..=X_BOUND).contains(&x) && (-Y_BOUND..=Y_BOUND).contains(&y)
    }

    pub fn in_bounds(&self) -> bool {
        Self::coords_in_bounds(self.x, self.y)
    }

    pub fn distance(&self, other: &NormalizedPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Identity of one tracked agent. Indices 0-10 are team A, 11-21 team B
/// and 22 is the ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentId(usize);

impl AgentId {
    pub const BALL: AgentId = AgentId(22);

    pub fn new(index: usize) -> Result<Self, GeometryError> {
        if index >= AGENT_COUNT {
            return Err(GeometryError::InvalidAgentIndex { index });
        }
        Ok(Self(index))
    }

    pub fn index(&self) -> usize {
        self.0
    }

    pub fn is_ball(&self) -> bool {
        self.0 == 22
    }

    /// All 23 agent ids in index order.
    pub fn all() -> impl Iterator<Item = AgentId> {
        (0..AGENT_COUNT).map(AgentId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Attack,
    Defense,
    Transition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Successful,
    Failed,
}

/// Tactical phase annotation of a segment. Attack and Defense phases carry
/// an outcome; Transition never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseLabel {
    phase: Phase,
    outcome: Option<Outcome>,
}

impl PhaseLabel {
    pub fn new(phase: Phase, outcome: Option<Outcome>) -> Result<Self, GeometryError> {
        let needs_outcome = matches!(phase, Phase::Attack | Phase::Defense);
        if needs_outcome != outcome.is_some() {
            return Err(GeometryError::InvalidPhaseLabel);
        }
        Ok(Self { phase, outcome })
    }

    pub fn attack(outcome: Outcome) -> Self {
        Self {
            phase: Phase::Attack,
            outcome: Some(outcome),
        }
    }

    pub fn defense(outcome: Outcome) -> Self {
        Self {
            phase: Phase::Defense,
            outcome: Some(outcome),
        }
    }

    pub fn transition() -> Self {
        Self {
            phase: Phase::Transition,
            outcome: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }
}

/// One time step of a segment: a position for every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Source frame index; must be strictly increasing within a segment.
    pub frame_idx: usize,
    /// One entry per agent, ordered by agent index. Expected to hold
    /// [`AGENT_COUNT`] points (see [`validate_segment`]).
    pub points: Vec<NormalizedPoint>,
}

/// A possession clip: per-frame positions of all agents plus annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub segment_id: String,
    pub match_id: String,
    pub fps: f64,
    pub phase: PhaseLabel,
    pub frames: Vec<Frame>,
}

impl Segment {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    /// Extracts the trajectory of one agent across all frames.
    ///
    /// Requires a well-formed segment (every frame holds [`AGENT_COUNT`]
    /// points); run [`validate_segment`] first on untrusted data.
    pub fn agent_track(&self, agent: AgentId) -> Vec<NormalizedPoint> {
        self.frames.iter().map(|f| f.points[agent.index()]).collect()
    }
}

/// A single problem found by [`validate_segment`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptySegment,
    InvalidFps { fps: f64 },
    WrongAgentCount { frame: usize, got: usize },
    NonMonotonicTime { position: usize, frame_idx: usize },
    NonFiniteCoordinate { frame: usize, agent: usize },
    OutOfBounds { frame: usize, agent: usize, x: f64, y: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptySegment => write!(f, "segment has no frames"),
            Violation::InvalidFps { fps } => write!(f, "fps must be positive, got {fps}"),
            Violation::WrongAgentCount { frame, got } => {
                write!(f, "frame {frame} has {got} agents, expected {AGENT_COUNT}")
            }
            Violation::NonMonotonicTime { position, frame_idx } => {
                write!(f, "frame index {frame_idx} at position {position} is not strictly increasing")
            }
            Violation::NonFiniteCoordinate { frame, agent } => {
                write!(f, "non-finite coordinate at frame {frame}, agent {agent}")
            }
            Violation::OutOfBounds { frame, agent, x, y } => {
                write!(f, "point ({x}, {y}) out of bounds at frame {frame}, agent {agent}")
            }
        }
    }
}

/// Average per-frame displacement magnitude over a trailing window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionStats {
    /// Mean consecutive-frame displacement, in normalized units per frame.
    pub s_t: f64,
    pub window_frames: usize,
}

/// Maps a metric pitch point into the normalized frame.
pub fn pitch_to_normalized(p: PitchPoint, spec: &PitchSpec) -> Result<NormalizedPoint, GeometryError> {
    if !p.x.is_finite() || !p.y.is_finite() || p.x < 0.0 || p.x > spec.length_m || p.y < 0.0 || p.y > spec.width_m {
        return Err(GeometryError::OutOfBounds { x: p.x, y: p.y });
    }
    Ok(NormalizedPoint {
        x: X_EXTENT * (p.x / spec.length_m) - X_BOUND,
        y: Y_EXTENT * (p.y / spec.width_m) - Y_BOUND,
    })
}

/// Exact inverse of [`pitch_to_normalized`].
pub fn normalized_to_pitch(q: NormalizedPoint, spec: &PitchSpec) -> Result<PitchPoint, GeometryError> {
    if !q.in_bounds() {
        return Err(GeometryError::OutOfBounds { x: q.x, y: q.y });
    }
    Ok(PitchPoint {
        x: (q.x + X_BOUND) / X_EXTENT * spec.length_m,
        y: (q.y + Y_BOUND) / Y_EXTENT * spec.width_m,
    })
}

/// Checks every segment invariant and reports all violations found.
///
/// An empty report means the segment is well-formed.
pub fn validate_segment(segment: &Segment) -> Vec<Violation> {
    let mut violations = Vec::new();
    if segment.frames.is_empty() {
        violations.push(Violation::EmptySegment);
    }
    if !(segment.fps > 0.0) {
        violations.push(Violation::InvalidFps { fps: segment.fps });
    }
    let mut prev_idx: Option<usize> = None;
    for (pos, frame) in segment.frames.iter().enumerate() {
        if let Some(prev) = prev_idx {
            if frame.frame_idx <= prev {
                violations.push(Violation::NonMonotonicTime {
                    position: pos,
                    frame_idx: frame.frame_idx,
                });
            }
        }
        prev_idx = Some(frame.frame_idx);
        if frame.points.len() != AGENT_COUNT {
            violations.push(Violation::WrongAgentCount {
                frame: pos,
                got: frame.points.len(),
            });
        }
        for (agent, pt) in frame.points.iter().enumerate() {
            if !pt.x.is_finite() || !pt.y.is_finite() {
                violations.push(Violation::NonFiniteCoordinate { frame: pos, agent });
            } else if !pt.in_bounds() {
                violations.push(Violation::OutOfBounds {
                    frame: pos,
                    agent,
                    x: pt.x,
                    y: pt.y,
                });
            }
        }
    }
    violations
}

/// Computes the mean Euclidean displacement between consecutive frames over
/// the last `window_frames` frames of a trajectory.
///
/// A window of one frame contains no displacements and yields zero.
pub fn displacement_stats(traj: &[NormalizedPoint], window_frames: usize) -> Result<MotionStats, GeometryError> {
    if traj.len() < 2 {
        return Err(GeometryError::InsufficientFrames {
            got: traj.len(),
            needed: 2,
        });
    }
    if window_frames == 0 || window_frames > traj.len() {
        return Err(GeometryError::InvalidWindow {
            window: window_frames,
            len: traj.len(),
        });
    }
    let start = traj.len() - window_frames;
    let steps = window_frames - 1;
    let s_t = if steps == 0 {
        0.0
    } else {
        let total: f64 = traj[start..]
            .windows(2)
            .map(|w| w[1].distance(&w[0]))
            .sum();
        total / steps as f64
    };
    Ok(MotionStats { s_t, window_frames })
}
