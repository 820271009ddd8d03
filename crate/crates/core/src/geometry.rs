use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::scalar::Scalar;

/// Plain 2D vector, used for positions and velocities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Serialize> Serialize for Vec2<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (&self.x, &self.y).serialize(s)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Vec2<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (x, y) = <(T, T)>::deserialize(d)?;
        Ok(Vec2 { x, y })
    }
}

impl<T: Scalar> Vec2<T> {
    pub const fn new(x: T, y: T) -> Self {
        Vec2 { x, y }
    }

    pub fn zero() -> Self {
        Vec2::new(T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product (`det` in RVO terminology).
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    /// Unit vector, or zero for the zero vector.
    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n > T::zero() {
            self / n
        } else {
            Self::zero()
        }
    }

    /// Rotated by +90 degrees.
    pub fn perp(self) -> Self {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn cast<U: Scalar>(self) -> Vec2<U> {
        Vec2::new(U::lit(self.x.to_f64_lossy()), U::lit(self.y.to_f64_lossy()))
    }

    /// Scales the vector down so its norm is at most `max`.
    pub fn clamp_norm(self, max: T) -> Self {
        let n = self.norm();
        if n > max && n > T::zero() {
            self * (max / n)
        } else {
            self
        }
    }
}

impl<T: Scalar> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> AddAssign for Vec2<T> {
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl<T: Scalar> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Scalar> SubAssign for Vec2<T> {
    fn sub_assign(&mut self, o: Self) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl<T: Scalar> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl<T: Scalar> Div<T> for Vec2<T> {
    type Output = Self;
    fn div(self, s: T) -> Self {
        Vec2::new(self.x / s, self.y / s)
    }
}

impl<T: Scalar> Neg for Vec2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec2::new(-self.x, -self.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_ops() {
        let a = Vec2::new(3.0f64, 4.0);
        assert_eq!(a.norm(), 5.0);
        assert_eq!(a.perp(), Vec2::new(-4.0, 3.0));
        assert_eq!(a.cross(a.perp()), 25.0);
        assert!((a.clamp_norm(1.0) - Vec2::new(0.6, 0.8)).norm() < 1e-15);
        assert_eq!(Vec2::<f64>::zero().normalized(), Vec2::zero());
    }

    #[test]
    fn serializes_as_pair() {
        let v = Vec2::new(1.5f64, -2.0);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, "[1.5,-2.0]");
        let back: Vec2<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
