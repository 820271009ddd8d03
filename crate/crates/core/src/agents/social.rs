//! Deterministic social-reactive pedestrian policy.
//!
//! Goal attraction plus a repulsion term per nearby neighbor. The repulsion
//! decays exponentially with clearance, is tapered to zero at the sensing
//! radius so the policy stays continuous, and carries a tangential component
//! to the agent's left when the neighbor is ahead. The left bias breaks the
//! symmetry of head-on encounters the same way for every agent.

use serde::{Deserialize, Serialize};

use super::AgentModel;
use crate::geometry::Vec2;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SocialParams {
    pub sensing_radius: f64,
    /// Repulsion magnitude at zero clearance, m/s.
    pub strength: f64,
    /// Clearance decay length, m.
    pub range: f64,
    /// Weight of the leftward tangential component.
    pub left_bias: f64,
    /// Agents slow down linearly inside this distance to their goal.
    pub arrival_radius: f64,
}

impl Default for SocialParams {
    fn default() -> Self {
        SocialParams { sensing_radius: 3.0, strength: 1.5, range: 0.6, left_bias: 0.8, arrival_radius: 1.0 }
    }
}

pub fn social_reactive_velocity<T: Scalar>(
    agent: &AgentModel<T>,
    neighbors: &[&AgentModel<T>],
    params: &SocialParams,
) -> Vec2<T> {
    let to_goal = agent.goal - agent.position;
    let heading = to_goal.normalized();
    let arrival = T::lit(params.arrival_radius);
    let pref = heading * (agent.pref_speed * (to_goal.norm() / arrival).min(T::one()));

    let sensing = T::lit(params.sensing_radius);
    let strength = T::lit(params.strength);
    let range = T::lit(params.range);
    let bias = T::lit(params.left_bias);

    let mut push = Vec2::zero();
    for other in neighbors {
        let away = agent.position - other.position;
        let dist = away.norm();
        if dist >= sensing {
            continue;
        }
        let clearance = (dist - agent.radius - other.radius).max(T::zero());
        let taper = (T::one() - dist / sensing).powi(2);
        let magnitude = strength * (-clearance / range).exp() * taper;
        let away_dir = if dist > T::zero() { away / dist } else { -heading.perp() };
        let ahead = (-away_dir.dot(heading)).max(T::zero());
        push += (away_dir + heading.perp() * (bias * ahead)) * magnitude;
    }
    (pref + push).clamp_norm(agent.pref_speed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::PolicyKind;
    use proptest::prelude::*;

    fn agent(pos: (f64, f64), goal: (f64, f64)) -> AgentModel<f64> {
        AgentModel {
            position: Vec2::new(pos.0, pos.1),
            velocity: Vec2::zero(),
            goal: Vec2::new(goal.0, goal.1),
            radius: 0.5,
            pref_speed: 1.0,
            policy_kind: PolicyKind::SocialReactive,
        }
    }

    #[test]
    fn unobstructed_goes_straight_at_pref_speed() {
        let a = agent((0.0, 0.0), (0.0, 5.0));
        let v = social_reactive_velocity(&a, &[], &SocialParams::default());
        assert!((v - Vec2::new(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn far_neighbor_has_no_effect() {
        let p = SocialParams::default();
        let a = agent((0.0, 0.0), (5.0, 1.0));
        let far = agent((50.0, 0.0), (0.0, 0.0));
        assert_eq!(social_reactive_velocity(&a, &[&far], &p), social_reactive_velocity(&a, &[], &p));
    }

    #[test]
    fn head_on_pair_deflects_left_symmetrically() {
        let p = SocialParams::default();
        let mut a = agent((-3.0, 0.0), (3.0, 0.0));
        let mut b = agent((3.0, 0.0), (-3.0, 0.0));
        let dt = 0.1;
        let mut max_left = 0.0f64;
        for _ in 0..80 {
            let va = social_reactive_velocity(&a, &[&b], &p);
            let vb = social_reactive_velocity(&b, &[&a], &p);
            a.position += va * dt;
            b.position += vb * dt;
            // Point reflection maps one trajectory onto the other.
            assert!((a.position + b.position).norm() < 1e-12);
            max_left = max_left.max(a.position.y);
        }
        // Moving +x, "left" is +y.
        assert!(max_left > 0.1);
    }

    proptest! {
        #[test]
        fn speed_never_exceeds_pref(vals in proptest::collection::vec(-5.0f64..5.0, 12), speed in 0.1f64..2.0) {
            let mut a = agent((vals[0], vals[1]), (vals[2], vals[3]));
            a.pref_speed = speed;
            let others: Vec<_> = (1..3).map(|k| agent((vals[4 * k], vals[4 * k + 1]), (vals[4 * k + 2], vals[4 * k + 3]))).collect();
            let refs: Vec<_> = others.iter().collect();
            let v = social_reactive_velocity(&a, &refs, &SocialParams::default());
            prop_assert!(v.norm() <= speed * (1.0 + 1e-12));
        }
    }
}
