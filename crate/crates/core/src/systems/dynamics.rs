//! Continuous-time dynamics `dx/dt = f(x, u)` for each built-in system.

use serde::{Deserialize, Serialize};

/// Physical parameters, one variant per system family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Physics {
    /// Two-link arm actuated at the elbow only. Angles are measured from the
    /// hanging-down configuration; `theta2` is relative to the first link.
    Acrobot {
        m1: f64,
        m2: f64,
        l1: f64,
        l2: f64,
        lc1: f64,
        lc2: f64,
        i1: f64,
        i2: f64,
        gravity: f64,
    },
    /// Cart with a pole hinged on top; `theta = 0` is upright.
    Cartpole {
        cart_mass: f64,
        pole_mass: f64,
        half_length: f64,
        gravity: f64,
    },
    /// First-order unicycle, controls are forward speed and turn rate.
    Car,
    /// Rigid body with unit quaternion attitude `(w, x, y, z)`. The collective
    /// command acts along body -z, so hover is `-mass * gravity`.
    Quadrotor {
        mass: f64,
        inertia: [f64; 3],
        gravity: f64,
    },
    DoubleIntegrator,
}

impl Physics {
    pub(crate) fn derivative(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match *self {
            Physics::Acrobot {
                m1,
                m2,
                l1,
                lc1,
                lc2,
                i1,
                i2,
                gravity: g,
                ..
            } => {
                let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
                let (s2, c2) = t2.sin_cos();
                let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2) + i1 + i2;
                let d2 = m2 * (lc2 * lc2 + l1 * lc2 * c2) + i2;
                let phi2 = m2 * lc2 * g * (t1 + t2).sin();
                let phi1 = -m2 * l1 * lc2 * w2 * w2 * s2 - 2.0 * m2 * l1 * lc2 * w2 * w1 * s2
                    + (m1 * lc1 + m2 * l1) * g * t1.sin()
                    + phi2;
                let dd2 = (u[0] + d2 / d1 * phi1 - m2 * l1 * lc2 * w1 * w1 * s2 - phi2)
                    / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
                let dd1 = -(d2 * dd2 + phi1) / d1;
                out[0] = w1;
                out[1] = w2;
                out[2] = dd1;
                out[3] = dd2;
            }
            Physics::Cartpole {
                cart_mass,
                pole_mass,
                half_length: l,
                gravity: g,
            } => {
                let (xd, th, thd) = (x[1], x[2], x[3]);
                let (s, c) = th.sin_cos();
                let total = cart_mass + pole_mass;
                let pml = pole_mass * l;
                let temp = (u[0] + pml * thd * thd * s) / total;
                let thdd = (g * s - c * temp) / (l * (4.0 / 3.0 - pole_mass * c * c / total));
                let xdd = temp - pml * thdd * c / total;
                out[0] = xd;
                out[1] = xdd;
                out[2] = thd;
                out[3] = thdd;
            }
            Physics::Car => {
                let (s, c) = x[2].sin_cos();
                out[0] = u[0] * c;
                out[1] = u[0] * s;
                out[2] = u[1];
            }
            Physics::Quadrotor {
                mass,
                inertia,
                gravity,
            } => {
                let (qw, qx, qy, qz) = (x[3], x[4], x[5], x[6]);
                let (wx, wy, wz) = (x[10], x[11], x[12]);
                out[0] = x[7];
                out[1] = x[8];
                out[2] = x[9];
                // q_dot = 0.5 * q ⊗ (0, ω)
                out[3] = 0.5 * (-qx * wx - qy * wy - qz * wz);
                out[4] = 0.5 * (qw * wx + qy * wz - qz * wy);
                out[5] = 0.5 * (qw * wy - qx * wz + qz * wx);
                out[6] = 0.5 * (qw * wz + qx * wy - qy * wx);
                // Third column of R(q) is the body z axis in world frame.
                let zx = 2.0 * (qx * qz + qw * qy);
                let zy = 2.0 * (qy * qz - qw * qx);
                let zz = 1.0 - 2.0 * (qx * qx + qy * qy);
                let thrust = -u[0] / mass;
                out[7] = thrust * zx;
                out[8] = thrust * zy;
                out[9] = thrust * zz - gravity;
                let [jx, jy, jz] = inertia;
                out[10] = (u[1] - (jz - jy) * wy * wz) / jx;
                out[11] = (u[2] - (jx - jz) * wz * wx) / jy;
                out[12] = (u[3] - (jy - jx) * wx * wy) / jz;
            }
            Physics::DoubleIntegrator => {
                out[0] = x[1];
                out[1] = u[0];
            }
        }
    }

    /// Total mechanical energy of the acrobot, `None` for other systems.
    pub fn acrobot_energy(&self, x: &[f64]) -> Option<f64> {
        let Physics::Acrobot {
            m1,
            m2,
            l1,
            lc1,
            lc2,
            i1,
            i2,
            gravity: g,
            ..
        } = *self
        else {
            return None;
        };
        let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let c2 = t2.cos();
        let m11 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2) + i1 + i2;
        let m12 = m2 * (lc2 * lc2 + l1 * lc2 * c2) + i2;
        let m22 = m2 * lc2 * lc2 + i2;
        let kinetic = 0.5 * (m11 * w1 * w1 + 2.0 * m12 * w1 * w2 + m22 * w2 * w2);
        let potential = -(m1 * lc1 + m2 * l1) * g * t1.cos() - m2 * lc2 * g * (t1 + t2).cos();
        Some(kinetic + potential)
    }
}
