use super::{Mat3, Vec3};

/// Local reference frame anchored at a keypoint. Columns of `rotation` are
/// the x, y and z axes; z is the keypoint normal.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFrame {
    pub origin: Vec3,
    pub rotation: Mat3,
}

impl LocalFrame {
    pub fn x_axis(&self) -> Vec3 {
        self.rotation.column(0).into_owned()
    }

    pub fn y_axis(&self) -> Vec3 {
        self.rotation.column(1).into_owned()
    }

    pub fn z_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn to_local(&self, q: &Vec3) -> Vec3 {
        self.rotation.transpose() * (q - self.origin)
    }

    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.rotation * local + self.origin
    }
}

/// Perturbs `up` when it is (nearly) parallel to `axis`, returning a vector
/// whose cross product with `axis` is usable.
pub(crate) fn deparallelize(up: Vec3, axis: &Vec3) -> Vec3 {
    if up.dot(axis).abs() <= 1.0 - 1e-6 {
        return up;
    }
    let mut nudged = up;
    nudged.x += 1e-3;
    let nudged = nudged.normalize();
    if nudged.cross(axis).norm() > 1e-9 {
        return nudged;
    }
    // `up` lies along the x axis, where the first-coordinate nudge is a no-op.
    let mut nudged = up;
    nudged.y += 1e-3;
    nudged.normalize()
}

/// z = normal, x = normalize(up × z), y = z × x.
pub fn build_lrf(keypoint: Vec3, normal: Vec3, up: Vec3) -> LocalFrame {
    let z = normal.normalize();
    let up = deparallelize(up.normalize(), &z);
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    LocalFrame {
        origin: keypoint,
        rotation: Mat3::from_columns(&[x, y, z]),
    }
}
