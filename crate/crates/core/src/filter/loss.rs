//! Penalty-relaxed imitation objective and its tape counterpart.

use super::{FilterModel, FilterTrainingRecord, LocalRecord};
use crate::error::{Error, Result};
use crate::learncore::{mlp_graph, Graph, Var};
use crate::scalar::{wrap_angle, Scalar};
use crate::world::{step_dynamics, ControlInput, VehicleParams};

/// Keeps the clearance square root differentiable at zero distance.
const DIST_EPS: f64 = 1e-12;

/// The two terms of the filter objective for one record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    /// `Σ_h ‖x̄_{t+h} − x̂_{t+h}‖²`.
    pub imitation: T,
    /// `Σ_h Σ_j max(0, C_{t+h} + ε − ‖τ̄^j_{t+h} − x̂_{t+h}‖)²`.
    pub hinge: T,
    /// Number of `(h, j)` pairs with positive hinge.
    pub violations: usize,
}

impl<T: Scalar> LossParts<T> {
    pub fn total(&self, lambda: T) -> T {
        self.imitation + lambda * self.hinge
    }
}

/// Rolls `inputs` out from the record's state and scores them.
pub fn filter_loss<T: Scalar>(
    inputs: &[ControlInput<T>],
    record: &FilterTrainingRecord<T>,
    epsilon: f64,
    vehicle: &VehicleParams,
    dt: f64,
) -> Result<LossParts<T>> {
    record.validate()?;
    if inputs.len() != record.horizon() {
        return Err(Error::Shape { expected: vec![record.horizon()], found: vec![inputs.len()] });
    }
    let mut x = record.state;
    let mut parts = LossParts { imitation: T::zero(), hinge: T::zero(), violations: 0 };
    for h in 0..inputs.len() {
        x = step_dynamics(&x, &inputs[h], vehicle, T::lit(dt))?;
        let nominal = &record.nominal_states[h];
        let dp = nominal.position() - x.position();
        let dth = wrap_angle(nominal.heading - x.heading);
        let dv = nominal.speed - x.speed;
        parts.imitation += dp.norm_sq() + dth * dth + dv * dv;
        let bound = T::lit(record.radii[h] + epsilon);
        for p in &record.predictions[h].positions {
            let gap = bound - (*p - x.position()).norm();
            if gap > T::zero() {
                parts.hinge += gap * gap;
                parts.violations += 1;
            }
        }
    }
    Ok(parts)
}

/// Clamped filter outputs `(accel, steer)` per step on the tape.
pub fn filter_output_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &FilterModel<T>,
    local: &LocalRecord<T>,
) -> Result<Vec<(Var, Var)>> {
    let x = g.input(model.encode(local)?);
    let out = mlp_graph(g, x)?;
    let a_max = T::lit(model.vehicle.a_max);
    let s_max = T::lit(model.vehicle.steer_max);
    let mut inputs = Vec::with_capacity(model.horizon);
    for h in 0..model.horizon {
        let mut a = g.index(out, 2 * h);
        a = g.scale(a, a_max);
        let mut s = g.index(out, 2 * h + 1);
        s = g.scale(s, s_max);
        if model.residual {
            a = g.offset(a, local.nominal_inputs[h].accel);
            s = g.offset(s, local.nominal_inputs[h].steer);
        }
        inputs.push((g.clamp(a, -a_max, a_max), g.clamp(s, -s_max, s_max)));
    }
    Ok(inputs)
}

/// Tape version of [`filter_loss`] applied to the model's own output, in the
/// ego frame. Returns `(total, imitation, hinge)` nodes.
pub fn filter_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &FilterModel<T>,
    local: &LocalRecord<T>,
    lambda: T,
) -> Result<(Var, Var, Var)> {
    let inputs = filter_output_graph(g, model, local)?;
    let dt = T::lit(model.dt);
    let inv_l = T::one() / T::lit(model.vehicle.wheelbase);
    let mut px = g.constant(T::zero());
    let mut py = g.constant(T::zero());
    let mut th = g.constant(T::zero());
    let mut v = g.constant(local.speed);
    let mut imitation = Vec::with_capacity(4 * model.horizon);
    let mut hinge = Vec::new();
    for (h, &(a, s)) in inputs.iter().enumerate() {
        let c = g.cos(th);
        let sn = g.sin(th);
        let vc = g.mul(v, c);
        let vs = g.mul(v, sn);
        let dx = g.scale(vc, dt);
        let dy = g.scale(vs, dt);
        let ts = g.tan(s);
        let yaw = g.mul(v, ts);
        let dth = g.scale(yaw, dt * inv_l);
        let dv = g.scale(a, dt);
        px = g.add(px, dx);
        py = g.add(py, dy);
        th = g.add(th, dth);
        let vn = g.add(v, dv);
        v = g.clamp(vn, T::zero(), T::lit(model.vehicle.v_max));

        let target = local.nominal_states[h];
        for (node, goal) in [(px, target[0]), (py, target[1]), (th, target[2]), (v, target[3])] {
            let d = g.offset(node, -goal);
            imitation.push(g.square(d));
        }
        let bound = local.radii[h] + T::lit(model.epsilon);
        for q in &local.predictions[h] {
            let ex = g.offset(px, -q.x);
            let ey = g.offset(py, -q.y);
            let ex2 = g.square(ex);
            let ey2 = g.square(ey);
            let d2 = g.add(ex2, ey2);
            let d2 = g.offset(d2, T::lit(DIST_EPS));
            let d = g.sqrt(d2);
            let neg = g.scale(d, -T::one());
            let gap = g.offset(neg, bound);
            let r = g.relu(gap);
            hinge.push(g.square(r));
        }
    }
    let imitation = g.add_all(&imitation);
    let hinge = g.add_all(&hinge);
    let weighted = g.scale(hinge, lambda);
    let total = g.add(imitation, weighted);
    Ok((total, imitation, hinge))
}
