//! Ablation variants of the transformer and the heading-normalisation wrapper.

use std::fmt;
use std::str::FromStr;

use crate::encoding::{build_input, GeometricState, SubRotation, Z_COLS};
use crate::error::{Error, Result};
use crate::set::{SetConfig, StreamLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    /// Gravity and target direction both join the vector stacks.
    Set,
    /// Gravity moves to the scalar input.
    NoGravity,
    /// Gravity and target direction both move to the scalar input.
    NoGravityTarget,
    /// Height is dropped from the scalar input.
    NoHeight,
    /// Every vector is flattened into the scalar input; no vector stream.
    InputInvariant,
    /// Actions read linearly from the value matrices instead of projected.
    OutputInvariant,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Set,
        VariantKind::NoGravity,
        VariantKind::NoGravityTarget,
        VariantKind::NoHeight,
        VariantKind::InputInvariant,
        VariantKind::OutputInvariant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Set => "SET",
            VariantKind::NoGravity => "SET\\g",
            VariantKind::NoGravityTarget => "SET\\gd",
            VariantKind::NoHeight => "SET\\z",
            VariantKind::InputInvariant => "SET_in_invar",
            VariantKind::OutputInvariant => "SET_out_invar",
        }
    }

    pub fn layout(self) -> StreamLayout {
        match self {
            VariantKind::NoGravity => StreamLayout { gravity_column: false, target_column: true, equivariant: true },
            VariantKind::NoGravityTarget => {
                StreamLayout { gravity_column: false, target_column: false, equivariant: true }
            }
            VariantKind::InputInvariant => {
                StreamLayout { gravity_column: false, target_column: false, equivariant: false }
            }
            _ => StreamLayout::FULL,
        }
    }

    /// Width of the raw scalar input, before any action columns.
    pub fn scalar_width(self) -> usize {
        match self {
            VariantKind::Set | VariantKind::OutputInvariant => 14,
            VariantKind::NoHeight => 13,
            VariantKind::NoGravity => 17,
            VariantKind::NoGravityTarget => 20,
            VariantKind::InputInvariant => 14 + 3 * Z_COLS + 3 + 3,
        }
    }

    /// Whether the actor reads actions linearly instead of by projection.
    pub fn linear_action(self) -> bool {
        matches!(self, VariantKind::InputInvariant | VariantKind::OutputInvariant)
    }

    /// Whether the target direction is fed as a geometric vector (and so is
    /// rotated by full-rotation probes).
    pub fn target_is_vector(self) -> bool {
        self.layout().target_column
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace(['/', '-'], "\\");
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| {
                let names: Vec<_> = VariantKind::ALL.iter().map(|k| k.name()).collect();
                Error::Contract(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// A variant plus the optional heading-normalisation wrapper.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub kind: VariantKind,
    pub hn: bool,
    /// Yaw offset (radians) of the "forward" direction used by the wrapper.
    pub hn_bias: f64,
}

impl Variant {
    pub fn new(kind: VariantKind) -> Self {
        Self { kind, hn: false, hn_bias: 0.0 }
    }

    pub fn with_hn(kind: VariantKind, bias: f64) -> Self {
        Self { kind, hn: true, hn_bias: bias }
    }

    /// The state as the network sees it.
    pub fn prepare(&self, s: &GeometricState) -> Result<GeometricState> {
        if self.hn {
            heading_normalize(s, self.hn_bias)
        } else {
            Ok(s.clone())
        }
    }
}

/// A variant bound to a base network shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub cfg: SetConfig,
}

pub fn make_variant(variant: Variant, base: &SetConfig) -> Result<ModelSpec> {
    base.validate()?;
    if !variant.hn_bias.is_finite() {
        return Err(Error::Contract("heading bias must be finite".into()));
    }
    Ok(ModelSpec { variant, cfg: base.clone() })
}

/// Horizontal projections shorter than this have no defined heading.
pub const MIN_HEADING_NORM: f64 = 1e-9;

/// Rotates the state about gravity so the torso heading, offset by `bias`,
/// points along +x.
pub fn heading_normalize(s: &GeometricState, bias: f64) -> Result<GeometricState> {
    let torso = s.limbs.first().ok_or_else(|| Error::Contract("state has no torso".into()))?;
    let x = torso.axes[0];
    if x.x.hypot(x.y) < MIN_HEADING_NORM {
        return Err(Error::DegenerateHeading("torso x-axis is vertical".into()));
    }
    let psi = x.y.atan2(x.x);
    Ok(s.transformed(&SubRotation::new(-(psi + bias), false).matrix()))
}

/// Network inputs for a batch of same-morphology states.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub graphs: usize,
    pub limbs: usize,
    /// `[G·V·3 × 6]`, rows (graph, limb, coordinate).
    pub z: Vec<f64>,
    /// `[G·V × scalar_width]`.
    pub scalars: Vec<f64>,
    pub scalar_width: usize,
    pub gravity: [f64; 3],
    pub targets: Vec<[f64; 3]>,
    /// `[G·V·3 × 3]`, row (graph, limb, k) holds joint axis k.
    pub axes: Vec<f64>,
    /// Limb adjacency (1-based), used only by the optional logit bias.
    pub edges: Vec<(usize, usize)>,
}

impl EncodedBatch {
    pub fn rows(&self) -> usize {
        self.graphs * self.limbs
    }

    pub fn with_edges(mut self, edges: &[(usize, usize)]) -> Self {
        self.edges = edges.to_vec();
        self
    }
}

pub fn encode_batch(variant: &Variant, states: &[&GeometricState]) -> Result<EncodedBatch> {
    let first = states.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let limbs = first.num_limbs();
    let kind = variant.kind;
    let width = kind.scalar_width();
    let mut out = EncodedBatch {
        graphs: states.len(),
        limbs,
        z: Vec::with_capacity(states.len() * limbs * 18),
        scalars: Vec::with_capacity(states.len() * limbs * width),
        scalar_width: width,
        gravity: first.gravity.into(),
        targets: Vec::with_capacity(states.len()),
        axes: Vec::with_capacity(states.len() * limbs * 9),
        edges: Vec::new(),
    };
    for s in states {
        if s.num_limbs() != limbs {
            return Err(Error::Contract(format!(
                "batch mixes {limbs}-limb and {}-limb states",
                s.num_limbs()
            )));
        }
        let s = variant.prepare(s)?;
        let inputs = build_input(&s)?;
        let g: [f64; 3] = s.gravity.into();
        let d: [f64; 3] = s.target_dir.into();
        out.targets.push(d);
        for inp in &inputs {
            for r in 0..3 {
                out.z.extend(inp.z.iter().map(|col| col[r]));
            }
            for axis in &inp.z[3..] {
                out.axes.extend(axis.iter());
            }
            match kind {
                VariantKind::NoHeight => out.scalars.extend_from_slice(&inp.h[..13]),
                _ => out.scalars.extend_from_slice(&inp.h),
            }
            match kind {
                VariantKind::NoGravity => out.scalars.extend_from_slice(&g),
                VariantKind::NoGravityTarget => {
                    out.scalars.extend_from_slice(&g);
                    out.scalars.extend_from_slice(&d);
                }
                VariantKind::InputInvariant => {
                    for col in &inp.z {
                        out.scalars.extend(col.iter());
                    }
                    out.scalars.extend_from_slice(&g);
                    out.scalars.extend_from_slice(&d);
                }
                _ => {}
            }
        }
    }
    debug_assert_eq!(out.scalars.len(), out.rows() * width);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{gravity, LimbObservation, Vec3, SCALAR_WIDTH};
    use std::f64::consts::PI;

    fn facing(yaw: f64) -> GeometricState {
        let r = SubRotation::new(yaw, false).matrix();
        let torso = LimbObservation {
            position: Vec3::new(0.3, -0.2, 1.0),
            velocity: Vec3::new(0.1, 0.2, 0.0),
            angular_velocity: Vec3::zeros(),
            axes: [r.column(0).into(), r.column(1).into(), r.column(2).into()],
            scalars: [0.5; SCALAR_WIDTH],
        };
        let mut leg = torso.clone();
        leg.position = Vec3::new(1.0, 0.5, 0.4);
        GeometricState { limbs: vec![torso, leg], gravity: gravity(), target_dir: Vec3::new(0.6, 0.8, 0.0) }
    }

    fn max_diff(a: &GeometricState, b: &GeometricState) -> f64 {
        a.limbs
            .iter()
            .zip(&b.limbs)
            .flat_map(|(x, y)| {
                [x.position - y.position, x.velocity - y.velocity, x.axes[0] - y.axes[0], x.axes[1] - y.axes[1]]
            })
            .chain([a.target_dir - b.target_dir])
            .map(|v| v.abs().max())
            .fold(0.0, f64::max)
    }

    #[test]
    fn names_roundtrip() {
        for k in VariantKind::ALL {
            assert_eq!(k.name().parse::<VariantKind>().unwrap(), k);
        }
        assert_eq!("set-gd".parse::<VariantKind>().unwrap(), VariantKind::NoGravityTarget);
        assert!(matches!("SET\\q".parse::<VariantKind>(), Err(Error::Contract(_))));
    }

    #[test]
    fn scalar_widths_match_encoding() {
        let s = facing(0.4);
        for k in VariantKind::ALL {
            let b = encode_batch(&Variant::new(k), &[&s, &s]).unwrap();
            assert_eq!(b.scalars.len(), 4 * k.scalar_width(), "{k}");
        }
        assert_eq!(VariantKind::InputInvariant.scalar_width(), 38);
    }

    #[test]
    fn heading_normalize_cases() {
        let s = facing(0.0);
        assert!(max_diff(&heading_normalize(&s, 0.0).unwrap(), &s) <= 1e-12);
        let once = heading_normalize(&s, PI).unwrap();
        let twice = heading_normalize(&once, PI).unwrap();
        assert!(max_diff(&once, &twice) <= 1e-12);
        for yaw in [0.3, 1.7, 3.0, 5.9] {
            let rotated = facing(0.0).transformed(&SubRotation::new(yaw, false).matrix());
            let a = heading_normalize(&rotated, 0.2).unwrap();
            let b = heading_normalize(&s, 0.2).unwrap();
            assert!(max_diff(&a, &b) <= 1e-10);
        }
    }

    #[test]
    fn vertical_heading_rejected() {
        let mut s = facing(0.0);
        s.limbs[0].axes[0] = Vec3::new(0.0, 0.0, 1.0);
        assert!(matches!(heading_normalize(&s, 0.0), Err(Error::DegenerateHeading(_))));
    }

    #[test]
    fn batch_layout() {
        let s = facing(0.0);
        let b = encode_batch(&Variant::new(VariantKind::Set), &[&s]).unwrap();
        // Row 1 of limb 0 is the y-coordinate of each column.
        assert_eq!(b.z[6..12], [0.0, 0.2, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(b.axes[..9], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.scalars[13], 1.0);
    }
}
