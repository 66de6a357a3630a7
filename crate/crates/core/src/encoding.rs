//! Per-limb geometric observations and the gravity-fixing group acting on them.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::morphology::LimbType;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Direction of gravity. Only the direction is encoded; the magnitude lives in
/// the environment.
pub const GRAVITY_DIR: [f64; 3] = [0.0, 0.0, -1.0];

pub fn gravity() -> Vec3 {
    Vec3::from(GRAVITY_DIR)
}

pub const SCALAR_WIDTH: usize = 13;
pub const Z_COLS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct LimbObservation {
    pub position: Vec3,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
    /// Joint x, y and z axes.
    pub axes: [Vec3; 3],
    /// Normalised (angle, low, high) for each axis followed by the type code.
    pub scalars: [f64; SCALAR_WIDTH],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricState {
    /// Torso first.
    pub limbs: Vec<LimbObservation>,
    pub gravity: Vec3,
    /// Unit horizontal direction to the target, or zero when on top of it.
    pub target_dir: Vec3,
}

/// Network input for one limb: six 3-vector columns and 14 scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct LimbInput {
    /// `[p − p_torso, v, ω, x, y, z]`.
    pub z: [Vec3; Z_COLS],
    /// Joint scalars followed by the height `p_z`.
    pub h: [f64; SCALAR_WIDTH + 1],
}

impl GeometricState {
    pub fn num_limbs(&self) -> usize {
        self.limbs.len()
    }

    pub fn is_finite(&self) -> bool {
        let v = |x: &Vec3| x.iter().all(|c| c.is_finite());
        v(&self.gravity)
            && v(&self.target_dir)
            && self.limbs.iter().all(|l| {
                v(&l.position)
                    && v(&l.velocity)
                    && v(&l.angular_velocity)
                    && l.axes.iter().all(v)
                    && l.scalars.iter().all(|s| s.is_finite())
            })
    }

    /// Applies `o` to every vector quantity except gravity.
    pub fn transformed(&self, o: &Mat3) -> GeometricState {
        let limbs = self
            .limbs
            .iter()
            .map(|l| LimbObservation {
                position: o * l.position,
                velocity: o * l.velocity,
                angular_velocity: o * l.angular_velocity,
                axes: l.axes.map(|a| o * a),
                scalars: l.scalars,
            })
            .collect();
        GeometricState { limbs, gravity: self.gravity, target_dir: o * self.target_dir }
    }

    /// Shifts every position by `offset` (target direction is unaffected by a
    /// common translation).
    pub fn translated(&self, offset: Vec3) -> GeometricState {
        let mut out = self.clone();
        for l in &mut out.limbs {
            l.position += offset;
        }
        out
    }
}

pub fn build_input(s: &GeometricState) -> Result<Vec<LimbInput>> {
    if s.limbs.is_empty() {
        return Err(Error::Contract("state has no torso".into()));
    }
    if !s.is_finite() {
        return Err(Error::Numeric("non-finite value in geometric state".into()));
    }
    let origin = s.limbs[0].position;
    Ok(s.limbs
        .iter()
        .map(|l| {
            let mut h = [0.0; SCALAR_WIDTH + 1];
            h[..SCALAR_WIDTH].copy_from_slice(&l.scalars);
            h[SCALAR_WIDTH] = l.position.z;
            LimbInput {
                z: [l.position - origin, l.velocity, l.angular_velocity, l.axes[0], l.axes[1], l.axes[2]],
                h,
            }
        })
        .collect())
}

/// Below this planar distance the target direction is reported as zero.
pub const DEGENERATE_TARGET: f64 = 1e-6;

pub fn target_direction(torso_xy: [f64; 2], target_xy: [f64; 2]) -> Vec3 {
    let dx = target_xy[0] - torso_xy[0];
    let dy = target_xy[1] - torso_xy[1];
    let n = dx.hypot(dy);
    if n < DEGENERATE_TARGET {
        Vec3::zeros()
    } else {
        Vec3::new(dx / n, dy / n, 0.0)
    }
}

/// Affine map of a joint angle and its range onto `[0, 1]`, followed by the
/// limb type code.
pub fn joint_scalars(angles: [f64; 3], ranges: [[f64; 2]; 3], t: LimbType) -> [f64; SCALAR_WIDTH] {
    let mut out = [0.0; SCALAR_WIDTH];
    for k in 0..3 {
        let [lo, hi] = ranges[k];
        out[3 * k] = ((angles[k] - lo) / (hi - lo)).clamp(0.0, 1.0);
        out[3 * k + 1] = (lo + PI) / TAU;
        out[3 * k + 2] = (hi + PI) / TAU;
    }
    out[9..].copy_from_slice(&t.code());
    out
}

pub fn yaw_matrix(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// An orthogonal map that fixes the gravity direction: optional reflection
/// `y → −y` followed by a yaw rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubRotation {
    yaw: f64,
    reflect: bool,
}

impl SubRotation {
    pub fn new(yaw: f64, reflect: bool) -> Self {
        Self { yaw: yaw.rem_euclid(TAU), reflect }
    }

    pub fn identity() -> Self {
        Self::new(0.0, false)
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn reflect(&self) -> bool {
        self.reflect
    }

    pub fn matrix(&self) -> Mat3 {
        let flip = if self.reflect { -1.0 } else { 1.0 };
        yaw_matrix(self.yaw) * Mat3::from_diagonal(&Vec3::new(1.0, flip, 1.0))
    }

    /// Recovers the (yaw, reflection) form of an orthogonal matrix that fixes
    /// gravity.
    pub fn from_matrix(m: &Mat3) -> Result<Self> {
        check_orthogonal(m)?;
        let g = gravity();
        if (m * g - g).norm() > 1e-12 {
            return Err(Error::Contract("orthogonal map does not fix gravity".into()));
        }
        let reflect = m.determinant() < 0.0;
        Ok(Self::new(m[(1, 0)].atan2(m[(0, 0)]), reflect))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SubRotation) -> SubRotation {
        // R(a)F^s · R(b)F^t = R(a ± b) F^(s xor t), since F R(b) F = R(−b).
        let b = if self.reflect { -other.yaw } else { other.yaw };
        SubRotation::new(self.yaw + b, self.reflect != other.reflect)
    }
}

pub fn check_orthogonal(m: &Mat3) -> Result<()> {
    let err = (m.transpose() * m - Mat3::identity()).abs().max();
    if !(err <= 1e-9) {
        return Err(Error::Contract(format!("matrix is not orthogonal (|OᵀO − I| = {err:e})")));
    }
    Ok(())
}

pub fn apply_subrotation(o: &SubRotation, s: &GeometricState) -> GeometricState {
    s.transformed(&o.matrix())
}

/// Applies an arbitrary orthogonal matrix to every vector quantity except
/// gravity. Used to probe full-rotation behaviour.
pub fn apply_orthogonal(o: &Mat3, s: &GeometricState) -> Result<GeometricState> {
    check_orthogonal(o)?;
    Ok(s.transformed(o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut impl Rng, n: usize) -> GeometricState {
        let mut v = || Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let limbs = (0..n)
            .map(|_| {
                let frame = nalgebra::Rotation3::from_scaled_axis(v()).into_inner();
                LimbObservation {
                    position: v(),
                    velocity: v(),
                    angular_velocity: v(),
                    axes: [frame.column(0).into(), frame.column(1).into(), frame.column(2).into()],
                    scalars: [0.5; SCALAR_WIDTH],
                }
            })
            .collect();
        let a: f64 = rng.random_range(0.0..TAU);
        GeometricState { limbs, gravity: gravity(), target_dir: Vec3::new(a.cos(), a.sin(), 0.0) }
    }

    #[test]
    fn torso_offset_is_zero_and_height_appended() {
        let mut s = random_state(&mut ChaCha8Rng::seed_from_u64(1), 3);
        s.limbs[1].position = Vec3::new(1.0, 2.0, 3.0);
        let inp = build_input(&s).unwrap();
        assert_eq!(inp[0].z[0], Vec3::zeros());
        assert_eq!(inp[1].h[13], 3.0);
    }

    #[test]
    fn xy_translation_leaves_offsets_and_direction() {
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(2), 5);
        let shift = Vec3::new(5.0, -7.0, 0.0);
        let a = build_input(&s).unwrap();
        let b = build_input(&s.translated(shift)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.z[0] - y.z[0]).abs().max() <= 1e-12);
        }
        let torso = s.limbs[0].position;
        let d1 = target_direction([torso.x, torso.y], [3.0, 1.0]);
        let d2 = target_direction([torso.x + 5.0, torso.y - 7.0], [8.0, -6.0]);
        assert!((d1 - d2).abs().max() <= 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = random_state(&mut ChaCha8Rng::seed_from_u64(3), 2);
        s.limbs[1].velocity.x = f64::NAN;
        assert!(matches!(build_input(&s), Err(Error::Numeric(_))));
    }

    #[test]
    fn target_direction_cases() {
        assert!((target_direction([0.0, 0.0], [3.0, 4.0]) - Vec3::new(0.6, 0.8, 0.0)).norm() < 1e-15);
        assert_eq!(target_direction([1.0, 1.0], [1.0, 1.0]), Vec3::zeros());
        assert_eq!(target_direction([2.0, 0.0], [-2.0, 0.0]), Vec3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn subrotation_cases() {
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(4), 4);
        assert_eq!(apply_subrotation(&SubRotation::identity(), &s), s);

        let mut one = s.clone();
        one.limbs[0].position = Vec3::new(1.0, 0.0, 0.0);
        let r = apply_subrotation(&SubRotation::new(PI / 2.0, false), &one);
        assert!((r.limbs[0].position - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);

        one.target_dir = Vec3::new(0.6, 0.8, 0.0);
        let r = apply_subrotation(&SubRotation::new(0.0, true), &one);
        assert_eq!(r.target_dir, Vec3::new(0.6, -0.8, 0.0));
    }

    #[test]
    fn subrotation_fixes_gravity_and_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let o = SubRotation::new(rng.random_range(0.0..TAU), rng.random());
            let m = o.matrix();
            assert!((m.transpose() * m - Mat3::identity()).abs().max() <= 1e-12);
            assert_eq!(m * gravity(), gravity());
            let back = SubRotation::from_matrix(&m).unwrap();
            assert!((back.matrix() - m).abs().max() < 1e-12);
        }
    }

    #[test]
    fn group_action_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_state(&mut rng, 6);
        for _ in 0..50 {
            let o1 = SubRotation::new(rng.random_range(0.0..TAU), rng.random());
            let o2 = SubRotation::new(rng.random_range(0.0..TAU), rng.random());
            let seq = apply_subrotation(&o2, &apply_subrotation(&o1, &s));
            let once = apply_subrotation(&o2.compose(&o1), &s);
            assert!((o2.compose(&o1).matrix() - o2.matrix() * o1.matrix()).abs().max() < 1e-12);
            for (a, b) in seq.limbs.iter().zip(&once.limbs) {
                assert!((a.position - b.position).abs().max() <= 1e-12);
                assert!((a.axes[2] - b.axes[2]).abs().max() <= 1e-12);
            }
        }
    }

    #[test]
    fn non_orthogonal_rejected() {
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(7), 2);
        let m = Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0));
        assert!(matches!(apply_orthogonal(&m, &s), Err(Error::Contract(_))));
        let tilt = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), 0.3).into_inner();
        assert!(matches!(SubRotation::from_matrix(&tilt), Err(Error::Contract(_))));
    }

    #[test]
    fn scalar_normalisation() {
        let r = [[-PI, PI], [-2.0, 0.0], [0.0, 1.0]];
        let h = joint_scalars([0.0, -1.0, 1.0], r, LimbType::Shin);
        assert_eq!(&h[..3], &[0.5, 0.0, 1.0]);
        assert_eq!(h[3], 0.5);
        assert_eq!(h[8], (1.0 + PI) / TAU);
        assert_eq!(&h[9..], &[0.0, 0.0, 1.0, 0.0]);
        assert!(h.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
