//! Mesh families shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdme::mesh::{build_1d_mesh, build_disc, build_structured_unit_square, Mesh};

/// Mesh `i` of a reproducible family: jittered squares, discs with uneven
/// ring counts and random 1D partitions.
pub fn generated_mesh(i: u64) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
    match i % 3 {
        0 => {
            let n = rng.random_range(2..10);
            let h = 1.0 / n as f64;
            let base = build_structured_unit_square(n, [0.0, 0.0]);
            let jitter: Vec<[f64; 2]> = (0..base.num_vertices())
                .map(|_| [rng.random_range(-0.15..0.15) * h, rng.random_range(-0.15..0.15) * h])
                .collect();
            base.displaced(|j, p| if base.is_boundary(j) { p } else { [p[0] + jitter[j][0], p[1] + jitter[j][1]] })
                .expect("small jitter keeps triangles valid")
        }
        1 => {
            let rings = rng.random_range(1..7);
            let vertices = (rings > 1 && rng.random_bool(0.5)).then(|| 1 + 7 * rings * (rings + 1) / 2);
            build_disc(rng.random_range(0.2..3.0), rings, vertices).expect("valid disc")
        }
        _ => {
            let k = rng.random_range(2..40);
            let mut x = 0.0;
            let pos: Vec<f64> = (0..k)
                .map(|_| {
                    x += rng.random_range(0.01..1.0);
                    x
                })
                .collect();
            build_1d_mesh(&pos).expect("increasing nodes")
        }
    }
}
