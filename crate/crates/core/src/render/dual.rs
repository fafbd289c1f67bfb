//! Forward-mode dual numbers carrying derivatives with respect to the three
//! viewpoint parameters (theta, phi, rho).

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    pub fn variable(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 3];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    pub fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }

    pub fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, k: f64) -> Dual {
        Dual {
            v: self.v * k,
            d: self.d.map(|x| x * k),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        Dual {
            v: q,
            d: [
                (self.d[0] - q * o.d[0]) * inv,
                (self.d[1] - q * o.d[1]) * inv,
                (self.d[2] - q * o.d[2]) * inv,
            ],
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

pub(crate) type DVec3 = [Dual; 3];

pub(crate) fn dconst(v: &Vec3) -> DVec3 {
    [Dual::constant(v.x), Dual::constant(v.y), Dual::constant(v.z)]
}

pub(crate) fn dvalue(v: &DVec3) -> Vec3 {
    Vec3::new(v[0].v, v[1].v, v[2].v)
}

pub(crate) fn dsub(a: &DVec3, b: &DVec3) -> DVec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn ddot(a: &DVec3, b: &DVec3) -> Dual {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn dcross(a: &DVec3, b: &DVec3) -> DVec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dnormalize(a: &DVec3) -> DVec3 {
    let n = ddot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}
