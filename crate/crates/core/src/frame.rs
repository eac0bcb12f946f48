//! Planar parent frames used by pose, kinematic-switch and collision
//! constraints.
//!
//! A frame maps the value of its parent variable (if any) to a point in the
//! plane. Constraint params store each frame as four reals
//! `[code, base_x, base_y, reach]` so that a constraint is fully described by
//! its kind, scope and params.

use serde::{Deserialize, Serialize};

/// Number of params used to encode one frame.
pub const FRAME_PARAMS: usize = 4;

const CODE_WORLD: f64 = 0.0;
const CODE_POINT: f64 = 1.0;
const CODE_ARM: f64 = 2.0;

/// A parent frame in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Frame {
    /// The fixed world/table frame; no parent variable.
    World,
    /// A parent whose variable is directly its planar position.
    Point,
    /// A base-anchored arm. The parent variable is a 2-D joint vector `q`,
    /// and the gripper sits at `base + reach * q / sqrt(1 + |q|^2)`, which
    /// covers exactly the open disc of radius `reach` around `base`.
    Arm { base: [f64; 2], reach: f64 },
}

impl Frame {
    pub fn has_variable(&self) -> bool {
        !matches!(self, Frame::World)
    }

    pub fn encode(&self) -> [f64; FRAME_PARAMS] {
        match *self {
            Frame::World => [CODE_WORLD, 0.0, 0.0, 0.0],
            Frame::Point => [CODE_POINT, 0.0, 0.0, 0.0],
            Frame::Arm { base, reach } => [CODE_ARM, base[0], base[1], reach],
        }
    }

    pub fn decode(params: &[f64]) -> Option<Frame> {
        if params.len() < FRAME_PARAMS {
            return None;
        }
        let code = params[0];
        if code == CODE_WORLD {
            Some(Frame::World)
        } else if code == CODE_POINT {
            Some(Frame::Point)
        } else if code == CODE_ARM && params[3].is_finite() && params[3] > 0.0 {
            Some(Frame::Arm {
                base: [params[1], params[2]],
                reach: params[3],
            })
        } else {
            None
        }
    }

    /// Position of the frame origin given the parent value (ignored for `World`).
    pub fn point(&self, parent: &[f64]) -> [f64; 2] {
        match *self {
            Frame::World => [0.0, 0.0],
            Frame::Point => [parent[0], parent[1]],
            Frame::Arm { base, reach } => {
                let s = (1.0 + parent[0] * parent[0] + parent[1] * parent[1]).sqrt();
                [
                    base[0] + reach * parent[0] / s,
                    base[1] + reach * parent[1] / s,
                ]
            }
        }
    }

    /// Row-major 2x2 Jacobian of [`Frame::point`] with respect to the parent value.
    pub fn point_jacobian(&self, parent: &[f64]) -> [[f64; 2]; 2] {
        match *self {
            Frame::World => [[0.0; 2]; 2],
            Frame::Point => [[1.0, 0.0], [0.0, 1.0]],
            Frame::Arm { reach, .. } => {
                let (x, y) = (parent[0], parent[1]);
                let s2 = 1.0 + x * x + y * y;
                let s = s2.sqrt();
                let s3 = s2 * s;
                [
                    [reach * (1.0 / s - x * x / s3), -reach * x * y / s3],
                    [-reach * x * y / s3, reach * (1.0 / s - y * y / s3)],
                ]
            }
        }
    }

    /// Joint vector that puts an arm's gripper at `target`, if it is strictly
    /// inside the reach disc.
    pub fn arm_inverse(base: [f64; 2], reach: f64, target: [f64; 2]) -> Option<[f64; 2]> {
        let u = [(target[0] - base[0]) / reach, (target[1] - base[1]) / reach];
        let n2 = u[0] * u[0] + u[1] * u[1];
        if n2 >= 1.0 {
            return None;
        }
        let k = 1.0 / (1.0 - n2).sqrt();
        Some([u[0] * k, u[1] * k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        for f in [
            Frame::World,
            Frame::Point,
            Frame::Arm {
                base: [0.3, -1.0],
                reach: 0.6,
            },
        ] {
            assert_eq!(Frame::decode(&f.encode()), Some(f));
        }
        assert_eq!(Frame::decode(&[7.0, 0.0, 0.0, 0.0]), None);
        assert_eq!(Frame::decode(&[2.0, 0.0, 0.0, -1.0]), None);
    }

    #[test]
    fn arm_stays_in_reach_and_inverts() {
        let arm = Frame::Arm {
            base: [1.0, 2.0],
            reach: 0.5,
        };
        let p = arm.point(&[100.0, -40.0]);
        let d = ((p[0] - 1.0).powi(2) + (p[1] - 2.0).powi(2)).sqrt();
        assert!(d < 0.5);
        let q = Frame::arm_inverse([1.0, 2.0], 0.5, [1.2, 2.1]).unwrap();
        let p = arm.point(&q);
        assert!((p[0] - 1.2).abs() < 1e-12 && (p[1] - 2.1).abs() < 1e-12);
        assert!(Frame::arm_inverse([1.0, 2.0], 0.5, [1.6, 2.0]).is_none());
    }

    #[test]
    fn arm_jacobian_matches_differences() {
        let arm = Frame::Arm {
            base: [0.0, 0.0],
            reach: 0.7,
        };
        let q = [0.4, -1.3];
        let j = arm.point_jacobian(&q);
        let h = 1e-6;
        for c in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[c] += h;
            qm[c] -= h;
            let (a, b) = (arm.point(&qp), arm.point(&qm));
            for r in 0..2 {
                let fd = (a[r] - b[r]) / (2.0 * h);
                assert!((fd - j[r][c]).abs() < 1e-8);
            }
        }
    }
}
