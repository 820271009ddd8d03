//! Optimal reciprocal collision avoidance in velocity space.
//!
//! Each neighbor contributes one half-plane built from the truncated velocity
//! obstacle; the new velocity is the point of the speed disk closest to the
//! preferred velocity that satisfies all half-planes. When no such point
//! exists the least-penetrating velocity is returned instead.

use serde::{Deserialize, Serialize};

use super::AgentModel;
use crate::geometry::Vec2;
use crate::scalar::Scalar;

/// Share of the avoidance effort each agent of a pair takes on.
pub const RECIPROCITY: f64 = 0.5;

const LP_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrcaParams {
    /// Seconds of lookahead for the truncated velocity obstacle.
    pub time_horizon: f64,
}

impl Default for OrcaParams {
    fn default() -> Self {
        OrcaParams { time_horizon: 2.0 }
    }
}

/// Velocity-space half-plane `{v : (v - point) . normal >= 0}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfPlane<T> {
    pub point: Vec2<T>,
    /// Unit vector pointing into the feasible side.
    pub normal: Vec2<T>,
}

impl<T: Scalar> HalfPlane<T> {
    /// Boundary direction with the feasible side on its left.
    fn direction(&self) -> Vec2<T> {
        Vec2::new(self.normal.y, -self.normal.x)
    }

    fn from_direction(point: Vec2<T>, direction: Vec2<T>) -> Self {
        HalfPlane { point, normal: direction.perp() }
    }

    /// Signed distance of `v` into the feasible side.
    pub fn slack(&self, v: Vec2<T>) -> T {
        (v - self.point).dot(self.normal)
    }
}

/// One half-plane per neighbor, with reciprocity factor [`RECIPROCITY`].
pub fn orca_half_planes<T: Scalar>(
    agent: &AgentModel<T>,
    neighbors: &[&AgentModel<T>],
    time_horizon: T,
    dt: T,
) -> Vec<HalfPlane<T>> {
    let inv_horizon = T::one() / time_horizon;
    let share = T::lit(RECIPROCITY);
    neighbors
        .iter()
        .map(|other| {
            let rel_pos = other.position - agent.position;
            let rel_vel = agent.velocity - other.velocity;
            let dist_sq = rel_pos.norm_sq();
            let r = agent.radius + other.radius;
            let r_sq = r * r;

            let (direction, u) = if dist_sq > r_sq {
                // Vector from the cutoff circle center to the relative velocity.
                let w = rel_vel - rel_pos * inv_horizon;
                let w_len_sq = w.norm_sq();
                let dot1 = w.dot(rel_pos);
                if dot1 < T::zero() && dot1 * dot1 > r_sq * w_len_sq {
                    // Project onto the cutoff circle.
                    let w_len = w_len_sq.sqrt();
                    let unit_w = w / w_len;
                    (Vec2::new(unit_w.y, -unit_w.x), unit_w * (r * inv_horizon - w_len))
                } else {
                    // Project onto the nearer leg of the cone.
                    let leg = (dist_sq - r_sq).sqrt();
                    let direction = if rel_pos.cross(w) > T::zero() {
                        Vec2::new(rel_pos.x * leg - rel_pos.y * r, rel_pos.x * r + rel_pos.y * leg) / dist_sq
                    } else {
                        -Vec2::new(rel_pos.x * leg + rel_pos.y * r, -rel_pos.x * r + rel_pos.y * leg) / dist_sq
                    };
                    let dot2 = rel_vel.dot(direction);
                    (direction, direction * dot2 - rel_vel)
                }
            } else {
                // Already overlapping: resolve within one time step.
                let inv_step = T::one() / dt;
                let w = rel_vel - rel_pos * inv_step;
                let w_len = w.norm();
                let unit_w = w / w_len;
                (Vec2::new(unit_w.y, -unit_w.x), unit_w * (r * inv_step - w_len))
            };
            HalfPlane::from_direction(agent.velocity + u * share, direction)
        })
        .collect()
}

/// New velocity for `agent` given its neighbors, limited to `pref_speed`.
pub fn orca_velocity<T: Scalar>(agent: &AgentModel<T>, neighbors: &[&AgentModel<T>], time_horizon: T, dt: T) -> Vec2<T> {
    let preferred = agent.preferred_velocity();
    orca_velocity_towards(agent, neighbors, preferred, agent.pref_speed, time_horizon, dt)
}

/// ORCA against an explicit preferred velocity and speed limit.
pub fn orca_velocity_towards<T: Scalar>(
    agent: &AgentModel<T>,
    neighbors: &[&AgentModel<T>],
    preferred: Vec2<T>,
    max_speed: T,
    time_horizon: T,
    dt: T,
) -> Vec2<T> {
    if neighbors.is_empty() {
        return preferred;
    }
    let planes = orca_half_planes(agent, neighbors, time_horizon, dt);
    solve(&planes, max_speed, preferred)
}

/// Point of the disk of radius `max_speed` closest to `preferred` subject to
/// `planes`, or the least-penetrating point when infeasible.
pub fn solve<T: Scalar>(planes: &[HalfPlane<T>], max_speed: T, preferred: Vec2<T>) -> Vec2<T> {
    match program_2d(planes, max_speed, Objective::Closest(preferred)) {
        Ok(v) => v,
        Err((failed, partial)) => program_3d(planes, failed, max_speed, partial),
    }
}

#[derive(Clone, Copy)]
enum Objective<T> {
    Closest(Vec2<T>),
    /// Furthest along a unit direction.
    Direction(Vec2<T>),
}

fn program_1d<T: Scalar>(
    planes: &[HalfPlane<T>],
    index: usize,
    radius: T,
    objective: Objective<T>,
) -> Option<Vec2<T>> {
    let eps = T::lit(LP_EPSILON);
    let line = &planes[index];
    let dir = line.direction();
    let dot = line.point.dot(dir);
    let discriminant = dot * dot + radius * radius - line.point.norm_sq();
    if discriminant < T::zero() {
        return None;
    }
    let root = discriminant.sqrt();
    let mut t_left = -dot - root;
    let mut t_right = -dot + root;

    for other in &planes[..index] {
        let other_dir = other.direction();
        let denominator = dir.cross(other_dir);
        let numerator = other_dir.cross(line.point - other.point);
        if denominator.abs() <= eps {
            if numerator < T::zero() {
                return None;
            }
            continue;
        }
        let t = numerator / denominator;
        if denominator >= T::zero() {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return None;
        }
    }

    let t = match objective {
        Objective::Direction(d) => {
            if d.dot(dir) > T::zero() {
                t_right
            } else {
                t_left
            }
        }
        Objective::Closest(p) => dir.dot(p - line.point).max(t_left).min(t_right),
    };
    Some(line.point + dir * t)
}

fn program_2d<T: Scalar>(
    planes: &[HalfPlane<T>],
    radius: T,
    objective: Objective<T>,
) -> Result<Vec2<T>, (usize, Vec2<T>)> {
    let mut result = match objective {
        Objective::Direction(d) => d * radius,
        Objective::Closest(p) => p.clamp_norm(radius),
    };
    for (i, plane) in planes.iter().enumerate() {
        if plane.direction().cross(plane.point - result) > T::zero() {
            match program_1d(planes, i, radius, objective) {
                Some(v) => result = v,
                None => return Err((i, result)),
            }
        }
    }
    Ok(result)
}

fn program_3d<T: Scalar>(planes: &[HalfPlane<T>], begin: usize, radius: T, mut result: Vec2<T>) -> Vec2<T> {
    let eps = T::lit(LP_EPSILON);
    let mut distance = T::zero();
    for i in begin..planes.len() {
        let line = &planes[i];
        let dir_i = line.direction();
        if dir_i.cross(line.point - result) <= distance {
            continue;
        }
        let mut projected = Vec::with_capacity(i);
        for other in &planes[..i] {
            let dir_j = other.direction();
            let det = dir_i.cross(dir_j);
            let point = if det.abs() <= eps {
                if dir_i.dot(dir_j) > T::zero() {
                    continue;
                }
                (line.point + other.point) * T::lit(0.5)
            } else {
                line.point + dir_i * (dir_j.cross(line.point - other.point) / det)
            };
            let direction = (dir_j - dir_i).normalized();
            projected.push(HalfPlane::from_direction(point, direction));
        }
        if let Ok(v) = program_2d(&projected, radius, Objective::Direction(dir_i.perp())) {
            result = v;
        }
        distance = dir_i.cross(line.point - result);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::PolicyKind;
    use proptest::prelude::*;

    fn agent(pos: (f64, f64), vel: (f64, f64), goal: (f64, f64)) -> AgentModel<f64> {
        AgentModel {
            position: Vec2::new(pos.0, pos.1),
            velocity: Vec2::new(vel.0, vel.1),
            goal: Vec2::new(goal.0, goal.1),
            radius: 0.5,
            pref_speed: 1.0,
            policy_kind: PolicyKind::Orca,
        }
    }

    #[test]
    fn no_neighbors_returns_preferred() {
        let a = agent((0.0, 0.0), (0.3, 0.0), (5.0, 0.0));
        assert_eq!(orca_velocity(&a, &[], 2.0, 0.1), Vec2::new(1.0, 0.0));
    }

    #[test]
    fn single_neighbor_constraint_against_grid_oracle() {
        let a = agent((0.0, 0.0), (1.0, 0.0), (10.0, 0.0));
        let b = agent((4.0, 0.0), (0.0, 0.0), (4.0, 0.0));
        let planes = orca_half_planes(&a, &[&b], 2.0, 0.1);
        assert_eq!(planes.len(), 1);
        let v = orca_velocity(&a, &[&b], 2.0, 0.1);
        let plane = planes[0];
        assert!(plane.slack(v) >= -1e-9);
        assert!(v.norm() <= 1.0 + 1e-9);

        // Dense sampling of the speed disk: no feasible candidate is closer to
        // the preferred velocity than the returned one.
        let pref = Vec2::new(1.0, 0.0);
        let best = (v - pref).norm();
        let mut best_grid = f64::INFINITY;
        let n = 100;
        for i in 0..n {
            for j in 0..n {
                let c = Vec2::new(-1.0 + 2.0 * i as f64 / (n - 1) as f64, -1.0 + 2.0 * j as f64 / (n - 1) as f64);
                if c.norm() <= 1.0 && plane.slack(c) >= 0.0 {
                    best_grid = best_grid.min((c - pref).norm());
                }
            }
        }
        assert!(best <= best_grid + 1e-9, "lp {best} grid {best_grid}");
        assert!(best_grid - best < 0.03);
    }

    #[test]
    fn head_on_pair_is_point_symmetric() {
        let a = agent((-2.0, 0.0), (1.0, 0.0), (4.0, 0.0));
        let b = agent((2.0, 0.0), (-1.0, 0.0), (-4.0, 0.0));
        let va = orca_velocity(&a, &[&b], 2.0, 0.1);
        let vb = orca_velocity(&b, &[&a], 2.0, 0.1);
        assert_eq!(va, -vb);
        assert!(va.y != 0.0, "head-on pair must deflect");
    }

    #[test]
    fn overlapping_agents_separate() {
        let a = agent((0.0, 0.0), (0.0, 0.0), (1.0, 0.0));
        let b = agent((0.6, 0.0), (0.0, 0.0), (-1.0, 0.0));
        let v = orca_velocity(&a, &[&b], 2.0, 0.1);
        assert!(v.x < 0.0);
    }

    #[test]
    fn infeasible_program_falls_back() {
        // Two contradictory constraints: x >= 0.5 and x <= -0.5.
        let planes = [
            HalfPlane { point: Vec2::new(0.5, 0.0), normal: Vec2::new(1.0, 0.0) },
            HalfPlane { point: Vec2::new(-0.5, 0.0), normal: Vec2::new(-1.0, 0.0) },
        ];
        let v: Vec2<f64> = solve(&planes, 1.0, Vec2::new(0.0, 1.0));
        assert!(v.is_finite());
        // The least-penetrating point is equidistant to both boundaries.
        assert!((planes[0].slack(v) - planes[1].slack(v)).abs() < 1e-9);
    }

    fn random_agent(r: &[f64]) -> AgentModel<f64> {
        agent((r[0], r[1]), (r[2], r[3]), (r[4], r[5]))
    }

    proptest! {
        #[test]
        fn feasible_output_satisfies_all_planes(vals in proptest::collection::vec(-4.0f64..4.0, 24)) {
            let a = random_agent(&vals[0..6]);
            let others: Vec<_> = (1..4).map(|k| random_agent(&vals[6 * k..6 * k + 6])).collect();
            prop_assume!(others.iter().all(|o| (o.position - a.position).norm() > 1.0));
            let refs: Vec<_> = others.iter().collect();
            let planes = orca_half_planes(&a, &refs, 2.0, 0.1);
            if let Ok(v) = program_2d(&planes, a.pref_speed, Objective::Closest(a.preferred_velocity())) {
                for p in &planes {
                    prop_assert!(p.slack(v) >= -1e-9);
                }
                prop_assert_eq!(v, orca_velocity(&a, &refs, 2.0, 0.1));
            }
        }

        #[test]
        fn equivariant_under_rigid_motion(
            vals in proptest::collection::vec(-4.0f64..4.0, 18),
            angle in -3.1f64..3.1,
            shift in proptest::collection::vec(-10.0f64..10.0, 2),
        ) {
            let a = random_agent(&vals[0..6]);
            let others: Vec<_> = (1..3).map(|k| random_agent(&vals[6 * k..6 * k + 6])).collect();
            prop_assume!(others.iter().all(|o| (o.position - a.position).norm() > 1.0));
            let refs: Vec<_> = others.iter().collect();
            let v = orca_velocity(&a, &refs, 2.0, 0.1);

            let t = Vec2::new(shift[0], shift[1]);
            let moved = |m: &AgentModel<f64>| AgentModel {
                position: m.position.rotate(angle) + t,
                velocity: m.velocity.rotate(angle),
                goal: m.goal.rotate(angle) + t,
                ..m.clone()
            };
            let a2 = moved(&a);
            let others2: Vec<_> = others.iter().map(moved).collect();
            let refs2: Vec<_> = others2.iter().collect();
            let v2 = orca_velocity(&a2, &refs2, 2.0, 0.1);
            prop_assert!((v2 - v.rotate(angle)).norm() < 1e-7, "{:?} vs {:?}", v2, v.rotate(angle));
        }
    }
}
