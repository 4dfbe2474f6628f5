use std::f64::consts::PI;

pub type Point = [f64; 2];

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Rotate world vector `v` into a frame whose +x axis points along `heading`.
pub fn to_local(v: Point, heading: f64) -> Point {
    let (s, c) = heading.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
}

/// Inverse of [`to_local`].
pub fn to_world(v: Point, heading: f64) -> Point {
    let (s, c) = heading.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn local_world_round_trip() {
        let v = [3.0, -1.5];
        let l = to_local(v, 0.7);
        let w = to_world(l, 0.7);
        assert!((w[0] - v[0]).abs() < 1e-12 && (w[1] - v[1]).abs() < 1e-12);
        let north = to_local([0.0, 5.0], PI / 2.0);
        assert!((north[0] - 5.0).abs() < 1e-12 && north[1].abs() < 1e-12);
    }
}
