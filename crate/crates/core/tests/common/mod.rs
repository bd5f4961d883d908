#![allow(dead_code)]

use cdpa_core::rng::{self, Purpose};
use cdpa_core::Volume;

pub fn gaussian_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut r = rng::stream(seed, Purpose::Test, 0, 0);
    let n = shape.iter().product();
    Volume::from_vec(shape, rng::normal_vec(&mut r, n)).unwrap()
}

pub fn gaussian_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, Purpose::Test, 1, 0);
    rng::normal_vec(&mut r, n)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    num.sqrt() / norm(b)
}

/// Image of `f(x, y)` in mm around the grid centre, averaged over `ss × ss`
/// sub-samples per pixel.
pub fn rasterize(n: usize, pixel: f64, ss: usize, f: impl Fn(f64, f64) -> f64) -> Volume {
    let c = 0.5 * (n as f64 - 1.0);
    Volume::from_fn([1, n, n], |_, iy, ix| {
        let mut acc = 0.0;
        for sy in 0..ss {
            for sx in 0..ss {
                let x = (ix as f64 - c + (sx as f64 + 0.5) / ss as f64 - 0.5) * pixel;
                let y = (iy as f64 - c + (sy as f64 + 0.5) / ss as f64 - 0.5) * pixel;
                acc += f(x, y);
            }
        }
        (acc / (ss * ss) as f64) as f32
    })
}
