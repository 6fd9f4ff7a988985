//! Deterministic synthetic colored clouds used by tests, the self test and
//! the CLI demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point3, PointCloud, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    Plane,
    Hemisphere,
    Corner,
}

impl Fixture {
    pub const ALL: [Fixture; 3] = [Fixture::Plane, Fixture::Hemisphere, Fixture::Corner];

    pub fn name(&self) -> &'static str {
        match self {
            Fixture::Plane => "plane",
            Fixture::Hemisphere => "hemisphere",
            Fixture::Corner => "corner",
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> PointCloud {
        match self {
            Fixture::Plane => plane(n, seed),
            Fixture::Hemisphere => hemisphere(n, seed),
            Fixture::Corner => corner(n, seed),
        }
    }
}

/// Smooth color field with detail at a few point spacings.
fn texture(p: Point3) -> Rgb {
    let c = |v: f64| (127.5 + 127.5 * v).round().clamp(0.0, 255.0) as u8;
    [
        c((3.0 * p[0] + 1.0 * p[2]).sin() * (2.5 * p[1]).cos()),
        c((5.0 * p[1] - 2.0 * p[2]).sin()),
        c((4.0 * (p[0] + p[1]) + 3.0 * p[2]).cos()),
    ]
}

fn colored(positions: Vec<Point3>) -> PointCloud {
    let colors = positions.iter().map(|&p| texture(p)).collect();
    PointCloud::new(positions, colors).expect("synthetic cloud is valid")
}

/// Uniform random points on the square [-1,1]² at z = 0.
pub fn plane(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
        .collect();
    colored(pts)
}

/// Area-uniform random points on the unit upper hemisphere.
pub fn hemisphere(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let z: f64 = rng.gen_range(0.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    colored(pts)
}

/// Two unit squares meeting at a right angle along the x axis.
pub fn corner(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(-1.0..1.0);
            let v: f64 = rng.gen_range(0.0..1.0);
            if rng.gen_bool(0.5) {
                [u, v, 0.0]
            } else {
                [u, 0.0, v]
            }
        })
        .collect();
    colored(pts)
}
